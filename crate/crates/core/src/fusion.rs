//! Popularity gate, single-key KG attention, fusion MLP and the blended score.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::gnn::Activation;
use crate::linalg::Matrix;
use crate::manifold::{self, Curvature, LorentzPoint};
use crate::scalar::{sigmoid, Scalar};

/// `ln(1 + countᵢ) / ln(1 + max count)` for every item, and whether all counts were zero.
pub fn popularity_scores<T: Scalar>(ds: &InteractionDataset) -> (Vec<T>, bool) {
    let pop = ds.item_popularity();
    let max = pop.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return (vec![T::zero(); pop.len()], true);
    }
    let denom = (max as f64).ln_1p();
    let p = pop
        .iter()
        .map(|&c| T::lit((c as f64).ln_1p() / denom))
        .collect();
    (p, false)
}

pub fn popularity_score<T: Scalar>(ds: &InteractionDataset, item: u32) -> Result<T> {
    let (p, _) = popularity_scores(ds);
    p.get(item as usize).copied().ok_or(Error::OutOfRange {
        what: "item",
        index: item as usize,
        limit: ds.num_items(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    /// 1 x 1 slope of the popularity gate.
    pub gate_a: Matrix<T>,
    /// 1 x 1 bias of the popularity gate.
    pub gate_b: Matrix<T>,
    pub attn_wq: Matrix<T>,
    pub attn_wk: Matrix<T>,
    pub attn_wv: Matrix<T>,
    /// `2·d_e x d_e` first fusion layer.
    pub mlp_w1: Matrix<T>,
    pub mlp_b1: Matrix<T>,
    pub mlp_w2: Matrix<T>,
    pub mlp_b2: Matrix<T>,
    /// `d x d_e`.
    pub kg_to_de: Matrix<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn init(d: usize, d_e: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (d_e as f64).sqrt();
        Self {
            gate_a: Matrix::scalar(T::lit(4.0)),
            gate_b: Matrix::scalar(T::lit(-2.0)),
            attn_wq: Matrix::uniform(d_e, d_e, b, rng),
            attn_wk: Matrix::uniform(d_e, d_e, b, rng),
            attn_wv: Matrix::uniform(d_e, d_e, b, rng),
            mlp_w1: Matrix::uniform(2 * d_e, d_e, 1.0 / ((2 * d_e) as f64).sqrt(), rng),
            mlp_b1: Matrix::zeros(1, d_e),
            mlp_w2: Matrix::uniform(d_e, d_e, b, rng),
            mlp_b2: Matrix::zeros(1, d_e),
            kg_to_de: Matrix::uniform(d, d_e, 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn d_e(&self) -> usize {
        self.mlp_w2.cols()
    }
}

/// Parameter leaves of [`FusionParams`] on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub gate_a: Var,
    pub gate_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub kg_to_de: Var,
}

impl FusionVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, p: &FusionParams<T>, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix<T>| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        Self {
            gate_a: leaf(&p.gate_a),
            gate_b: leaf(&p.gate_b),
            wq: leaf(&p.attn_wq),
            wk: leaf(&p.attn_wk),
            wv: leaf(&p.attn_wv),
            w1: leaf(&p.mlp_w1),
            b1: leaf(&p.mlp_b1),
            w2: leaf(&p.mlp_w2),
            b2: leaf(&p.mlp_b2),
            kg_to_de: leaf(&p.kg_to_de),
        }
    }
}

/// `σ(a·p + b)` for a column of popularity values.
pub fn gate_on_tape<T: Scalar>(tape: &mut Tape<T>, v: &FusionVars, p: Var) -> Var {
    let ap = tape.scale_by(p, v.gate_a);
    let z = tape.add_scalar(ap, v.gate_b);
    tape.sigmoid(z)
}

/// `tanh(q·k/√d_a)·v` with `q = h0·Wq`, `k = (agg·K)·Wk`, `v = (agg·K)·Wv`.
pub fn attention_on_tape<T: Scalar>(tape: &mut Tape<T>, v: &FusionVars, h0: Var, kg: Var) -> Var {
    let q = tape.matmul(h0, v.wq);
    let kg_e = tape.matmul(kg, v.kg_to_de);
    let k = tape.matmul(kg_e, v.wk);
    let val = tape.matmul(kg_e, v.wv);
    let d_a = tape.value(q).cols();
    let s = tape.row_dot(q, k);
    let s = tape.scale(s, T::one() / T::from_usize_lossy(d_a).sqrt());
    let g = tape.tanh(s);
    tape.mul_rows(val, g)
}

/// `w'·h_L + (1 - w')·MLP([h_L, e_att])`.
pub fn fuse_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    v: &FusionVars,
    h_l: Var,
    e_att: Var,
    w: Var,
) -> Var {
    let x = tape.concat_cols(h_l, e_att);
    let hid = tape.matmul(x, v.w1);
    let hid = tape.add_row(hid, v.b1);
    let hid = Activation::LeakyRelu.on_tape(tape, hid);
    let out = tape.matmul(hid, v.w2);
    let fused = tape.add_row(out, v.b2);
    let keep = tape.mul_rows(h_l, w);
    let one_minus = tape.affine(w, -T::one(), T::one());
    let mixed = tape.mul_rows(fused, one_minus);
    tape.add(keep, mixed)
}

/// Row-wise `w'·⟨u_E, i_E⟩ - (1 - w')·d_L(u_H, lift(i_E))`; Euclidean only
/// (plain inner product) when `user_h` is `None`.
pub fn score_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    user_e: Var,
    item_e: Var,
    user_h: Option<Var>,
    w: Var,
    cv: Curvature<T>,
    max_norm: T,
) -> Var {
    let dot = tape.row_dot(user_e, item_e);
    let Some(uh) = user_h else {
        return dot;
    };
    let ih = tape.exp_origin(item_e, cv, max_norm);
    let dist = tape.lorentz_dist(uh, ih, cv);
    let e = tape.hadamard(dot, w);
    let one_minus = tape.affine(w, -T::one(), T::one());
    let h = tape.hadamard(dist, one_minus);
    tape.sub(e, h)
}

pub fn gate_weight<T: Scalar>(p: T, params: &FusionParams<T>) -> T {
    sigmoid(params.gate_a.item() * p + params.gate_b.item())
}

fn check_len(op: &'static str, x: usize, want: usize) -> Result<()> {
    if x == want {
        Ok(())
    } else {
        Err(Error::shape(op, format!("length {x}, expected {want}")))
    }
}

fn vector<T: Scalar>(x: &[T]) -> Matrix<T> {
    Matrix::from_vec(1, x.len(), x.to_vec()).expect("row vector")
}

/// Attention output `e_att` for one item.
pub fn kg_attention<T: Scalar>(h_item0: &[T], kg_agg: &[T], params: &FusionParams<T>) -> Result<Vec<T>> {
    check_len("kg_attention", h_item0.len(), params.attn_wq.rows())?;
    check_len("kg_attention", kg_agg.len(), params.kg_to_de.rows())?;
    let mut tape = Tape::new();
    let v = FusionVars::register(&mut tape, params, false);
    let h0 = tape.constant(vector(h_item0));
    let kg = tape.constant(vector(kg_agg));
    let out = attention_on_tape(&mut tape, &v, h0, kg);
    Ok(tape.value(out).as_slice().to_vec())
}

/// Final Euclidean item embedding for one item with gate value `w_prime`.
pub fn fuse_item_embedding<T: Scalar>(
    h_item_l: &[T],
    h_item0: &[T],
    kg_agg: &[T],
    w_prime: T,
    params: &FusionParams<T>,
) -> Result<Vec<T>> {
    check_len("fuse_item_embedding", h_item_l.len(), params.d_e())?;
    check_len("fuse_item_embedding", h_item0.len(), params.attn_wq.rows())?;
    check_len("fuse_item_embedding", kg_agg.len(), params.kg_to_de.rows())?;
    let mut tape = Tape::new();
    let v = FusionVars::register(&mut tape, params, false);
    let hl = tape.constant(vector(h_item_l));
    let h0 = tape.constant(vector(h_item0));
    let kg = tape.constant(vector(kg_agg));
    let w = tape.constant(Matrix::scalar(w_prime));
    let att = attention_on_tape(&mut tape, &v, h0, kg);
    let out = fuse_on_tape(&mut tape, &v, hl, att, w);
    Ok(tape.value(out).as_slice().to_vec())
}

/// `w'·⟨u_E, i_E⟩ + (1 - w')·(-d_L(u_H, i_H))`.
pub fn predict_score<T: Scalar>(
    user_e: &[T],
    item_e_final: &[T],
    user_h: &LorentzPoint<T>,
    item_h_final: &LorentzPoint<T>,
    w_prime: T,
    cv: Curvature<T>,
) -> Result<T> {
    check_len("predict_score", item_e_final.len(), user_e.len())?;
    let dot: T = user_e.iter().zip(item_e_final).map(|(&a, &b)| a * b).sum();
    let dist = manifold::geodesic_distance(user_h, item_h_final, cv)?;
    Ok(w_prime * dot - (T::one() - w_prime) * dist)
}
