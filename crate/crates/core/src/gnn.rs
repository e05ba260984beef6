//! Parallel Euclidean and Lorentz graph convolutions over the user-item graph.
//!
//! Nodes are ordered users first (`0..M`), then items (`M..M+N`).

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{SparseOperand, Tape, Var};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::linalg::{Csr, Matrix};
use crate::manifold::{self, Curvature, LorentzPoint, TangentVector};
use crate::scalar::{leaky_relu, Scalar};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu => leaky_relu(x, T::lit(LEAKY_SLOPE)),
            Activation::Identity => x,
        }
    }

    pub fn on_tape<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::LeakyRelu => tape.leaky_relu(x, T::lit(LEAKY_SLOPE)),
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::LeakyRelu => "leaky_relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "leaky_relu" | "leaky" => Some(Activation::LeakyRelu),
            "identity" | "none" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// `D^{-1/2} A D^{-1/2}` of the bipartite training graph, `(M+N) x (M+N)`.
pub fn normalize_adjacency<T: Scalar>(ds: &InteractionDataset) -> Csr<T> {
    let m = ds.num_users();
    let n = m + ds.num_items();
    let mut deg = vec![0usize; n];
    for &(u, i) in ds.train() {
        deg[u as usize] += 1;
        deg[m + i as usize] += 1;
    }
    let mut trip = Vec::with_capacity(2 * ds.train().len());
    for &(u, i) in ds.train() {
        let (a, b) = (u as usize, m + i as usize);
        let w = T::one() / T::from_usize_lossy(deg[a] * deg[b]).sqrt();
        trip.push((a, b, w));
        trip.push((b, a, w));
    }
    Csr::from_triplets(n, n, &trip).expect("node ids in range")
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer<T> {
    pub w_e: Matrix<T>,
    pub w_self: Matrix<T>,
    /// Tangent-space transform applied after hyperbolic aggregation.
    pub w_hyp: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnWeights<T> {
    pub layers: Vec<GnnLayer<T>>,
    pub alpha_e: T,
    pub w_s: T,
    pub activation: Activation,
}

impl<T: Scalar> GnnWeights<T> {
    pub fn init(
        d_e: usize,
        num_layers: usize,
        alpha_e: T,
        w_s: T,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("GNN needs at least one layer".into()));
        }
        let unit = T::zero()..=T::one();
        if !unit.contains(&alpha_e) || !unit.contains(&w_s) {
            return Err(Error::Config("alpha_e and w_s must lie in [0, 1]".into()));
        }
        let bound = 1.0 / (d_e as f64).sqrt();
        let layers = (0..num_layers)
            .map(|_| GnnLayer {
                w_e: Matrix::uniform(d_e, d_e, bound, rng),
                w_self: Matrix::uniform(d_e, d_e, bound, rng),
                w_hyp: Matrix::uniform(d_e, d_e, bound, rng),
            })
            .collect();
        Ok(Self {
            layers,
            alpha_e,
            w_s,
            activation,
        })
    }
}

/// `act(α·A·H·W_E + (1-α)·H·W_self)`.
pub fn euclidean_layer<T: Scalar>(
    h: &Matrix<T>,
    adj: &Csr<T>,
    layer: &GnnLayer<T>,
    alpha: T,
    act: Activation,
) -> Result<Matrix<T>> {
    let agg = adj.spmm(h)?.matmul(&layer.w_e)?;
    let own = h.matmul(&layer.w_self)?;
    let mut out = agg.scale(alpha);
    out.axpy(T::one() - alpha, &own);
    Ok(out.map(|x| act.apply(x)))
}

/// Aggregates in the origin tangent space, maps back, then blends with the
/// previous layer: `combine([w_s, 1-w_s], [exp_o((A·log_o H)·W), H])`.
pub fn hyperbolic_layer<T: Scalar>(
    points: &[LorentzPoint<T>],
    adj: &Csr<T>,
    w_hyp: &Matrix<T>,
    w_s: T,
    cv: Curvature<T>,
) -> Result<Vec<LorentzPoint<T>>> {
    if points.len() != adj.rows() {
        return Err(Error::shape(
            "hyperbolic_layer",
            format!("{} points for {} graph nodes", points.len(), adj.rows()),
        ));
    }
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    let d = first.dim();
    let o = manifold::origin(d, cv);
    let mut tangent = Matrix::zeros(points.len(), d);
    for (r, p) in points.iter().enumerate() {
        if p.dim() != d {
            return Err(Error::shape("hyperbolic_layer", "points differ in dimension"));
        }
        let t = manifold::log_map(&o, p, cv)?;
        tangent.row_mut(r).copy_from_slice(&t.coords()[1..]);
    }
    let agg = adj.spmm(&tangent)?.matmul(w_hyp)?;
    let weights = [w_s, T::one() - w_s];
    points
        .iter()
        .enumerate()
        .map(|(r, prev)| {
            let moved = manifold::exp_map(&o, &TangentVector::at_origin(agg.row(r), cv), cv)?;
            manifold::tangent_combine(&weights, &[moved, prev.clone()], cv)
        })
        .collect()
}

/// Outputs of both pathways split into user and item blocks.
#[derive(Clone, Debug)]
pub struct GnnOutput<T> {
    pub user_e: Matrix<T>,
    pub item_e: Matrix<T>,
    pub user_h: Vec<LorentzPoint<T>>,
    pub item_h: Vec<LorentzPoint<T>>,
}

/// Runs `L` Euclidean layers from `h0` and `L` hyperbolic layers from its lift.
pub fn forward<T: Scalar>(
    h0: &Matrix<T>,
    weights: &GnnWeights<T>,
    adj: &Csr<T>,
    num_users: usize,
    cv: Curvature<T>,
) -> Result<GnnOutput<T>> {
    if !h0.is_finite() {
        return Err(Error::NonFinite("initial GNN features".into()));
    }
    let mut he = h0.clone();
    for layer in &weights.layers {
        he = euclidean_layer(&he, adj, layer, weights.alpha_e, weights.activation)?;
    }
    let mut hh: Vec<LorentzPoint<T>> = (0..h0.rows())
        .map(|r| manifold::lift_euclidean(h0.row(r), cv))
        .collect::<Result<_>>()?;
    for layer in &weights.layers {
        hh = hyperbolic_layer(&hh, adj, &layer.w_hyp, weights.w_s, cv)?;
    }
    let item_h = hh.split_off(num_users);
    Ok(GnnOutput {
        user_e: he.slice_rows(0, num_users),
        item_e: he.slice_rows(num_users, he.rows()),
        user_h: hh,
        item_h,
    })
}

/// Layer weights registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_e: Var,
    pub w_self: Var,
    pub w_hyp: Var,
}

pub fn euclidean_layer_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    adj: &Arc<SparseOperand<T>>,
    h: Var,
    layer: LayerVars,
    alpha: T,
    act: Activation,
) -> Var {
    let ah = tape.spmm(adj.clone(), h);
    let agg = tape.matmul(ah, layer.w_e);
    let own = tape.matmul(h, layer.w_self);
    let agg = tape.scale(agg, alpha);
    let own = tape.scale(own, T::one() - alpha);
    let pre = tape.add(agg, own);
    act.on_tape(tape, pre)
}

/// Hyperbolic layer over spatial coordinates; tangent norms are clamped to `max_norm`.
pub fn hyperbolic_layer_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    adj: &Arc<SparseOperand<T>>,
    p: Var,
    w_hyp: Var,
    w_s: T,
    cv: Curvature<T>,
    max_norm: T,
) -> Var {
    let t = tape.log_origin(p, cv);
    let at = tape.spmm(adj.clone(), t);
    let agg = tape.matmul(at, w_hyp);
    let moved = tape.exp_origin(agg, cv, max_norm);
    let back = tape.log_origin(moved, cv);
    let a = tape.scale(back, w_s);
    let b = tape.scale(t, T::one() - w_s);
    let mixed = tape.add(a, b);
    tape.exp_origin(mixed, cv, max_norm)
}

/// Both pathways on a tape; returns (Euclidean, hyperbolic spatial) node matrices.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    adj: &Arc<SparseOperand<T>>,
    h0: Var,
    layers: &[LayerVars],
    weights: &GnnWeights<T>,
    cv: Curvature<T>,
    max_norm: T,
    hyperbolic: bool,
) -> (Var, Option<Var>) {
    let mut he = h0;
    for &l in layers {
        he = euclidean_layer_on_tape(tape, adj, he, l, weights.alpha_e, weights.activation);
    }
    if !hyperbolic {
        return (he, None);
    }
    let mut hh = tape.exp_origin(h0, cv, max_norm);
    for &l in layers {
        hh = hyperbolic_layer_on_tape(tape, adj, hh, l.w_hyp, weights.w_s, cv, max_norm);
    }
    (he, Some(hh))
}
