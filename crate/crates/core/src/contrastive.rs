//! Collaborative and KG item views and their bidirectional InfoNCE alignment.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{SparseOperand, Tape, Var};
use crate::data::KnowledgeGraph;
use crate::error::{Error, Result};
use crate::gnn::Activation;
use crate::linalg::{Csr, Matrix};
use crate::scalar::Scalar;

pub const NORM_FLOOR: f64 = 1e-12;

static ZERO_PROJECTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of projections so far whose norm fell below the normalization floor.
pub fn zero_projection_count() -> u64 {
    ZERO_PROJECTIONS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads<T> {
    /// `d_e x d_p`.
    pub f_svd: Matrix<T>,
    /// `d x d_p`.
    pub f_kg: Matrix<T>,
    /// `d x d` transform of the KG neighbour mean.
    pub kg_agg: Matrix<T>,
    pub tau: T,
    pub kg_activation: Activation,
}

impl<T: Scalar> ProjectionHeads<T> {
    pub fn init(d: usize, d_e: usize, d_p: usize, tau: T, rng: &mut impl Rng) -> Result<Self> {
        if !(tau > T::zero() && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self {
            f_svd: Matrix::uniform(d_e, d_p, 1.0 / (d_e as f64).sqrt(), rng),
            f_kg: Matrix::uniform(d, d_p, 1.0 / (d as f64).sqrt(), rng),
            kg_agg: Matrix::uniform(d, d, 1.0 / (d as f64).sqrt(), rng),
            tau,
            kg_activation: Activation::LeakyRelu,
        })
    }
}

/// Row-stochastic `N x cols` operator averaging each item's entity with its
/// distinct one-hop neighbours. `cols` is the entity table height (at least `|E|`).
pub fn kg_mean_operator<T: Scalar>(kg: &KnowledgeGraph, cols: usize) -> Csr<T> {
    let neighbors = kg.neighbors();
    let mut trip = Vec::new();
    for (item, &e) in kg.item_to_entity().iter().enumerate() {
        let nb = &neighbors[e as usize];
        let w = T::one() / T::from_usize_lossy(nb.len() + 1);
        trip.push((item, e as usize, w));
        trip.extend(nb.iter().map(|&n| (item, n as usize, w)));
    }
    Csr::from_triplets(kg.num_items(), cols, &trip).expect("entity ids in range")
}

/// `act(mean(e_item, neighbours) · W_kg)` for one item.
pub fn kg_neighbor_aggregate<T: Scalar>(
    kg: &KnowledgeGraph,
    entity_emb: &Matrix<T>,
    item: u32,
    heads: &ProjectionHeads<T>,
) -> Result<Vec<T>> {
    if item as usize >= kg.num_items() {
        return Err(Error::OutOfRange {
            what: "item",
            index: item as usize,
            limit: kg.num_items(),
        });
    }
    let op = kg_mean_operator::<T>(kg, entity_emb.rows()).select_rows(&[item as usize]);
    let mean = op.spmm(entity_emb)?;
    let out = mean.matmul(&heads.kg_agg)?;
    Ok(out.as_slice().iter().map(|&x| heads.kg_activation.apply(x)).collect())
}

/// KG aggregates for the rows selected into `op` (see [`kg_mean_operator`]).
pub fn kg_aggregate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    op: Arc<SparseOperand<T>>,
    entity: Var,
    w_kg: Var,
    act: Activation,
) -> Var {
    let mean = tape.spmm(op, entity);
    let z = tape.matmul(mean, w_kg);
    act.on_tape(tape, z)
}

/// `x·head / max(‖x·head‖, 1e-12)`.
pub fn project_view<T: Scalar>(x: &[T], head: &Matrix<T>) -> Result<Vec<T>> {
    if x.len() != head.rows() {
        return Err(Error::shape(
            "project_view",
            format!("vector of length {} for a {}x{} head", x.len(), head.rows(), head.cols()),
        ));
    }
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let y = xm.matmul(head)?;
    let n = y.frobenius();
    if n < T::lit(NORM_FLOOR) {
        ZERO_PROJECTIONS.fetch_add(1, Ordering::Relaxed);
    }
    let n = n.max(T::lit(NORM_FLOOR));
    Ok(y.as_slice().iter().map(|&v| v / n).collect())
}

fn similarity<T: Scalar>(z1: &Matrix<T>, z2: &Matrix<T>, tau: T) -> Result<Matrix<T>> {
    if z1.shape() != z2.shape() {
        return Err(Error::shape(
            "info_nce",
            format!("{:?} vs {:?}", z1.shape(), z2.shape()),
        ));
    }
    if z1.rows() == 0 {
        return Err(Error::InvalidArgument("InfoNCE needs a nonempty batch".into()));
    }
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    Ok(z1.matmul_t(z2).scale(T::one() / tau))
}

/// Row-wise and column-wise softmax of `s`.
fn softmaxes<T: Scalar>(s: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let b = s.rows();
    let mut row = s.clone();
    for r in 0..b {
        let m = row.row(r).iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.row(r).iter().map(|&x| (x - m).exp()).sum();
        row.row_mut(r).iter_mut().for_each(|x| *x = (*x - m).exp() / z);
    }
    let st = s.transpose();
    let mut col = st.clone();
    for r in 0..b {
        let m = col.row(r).iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = col.row(r).iter().map(|&x| (x - m).exp()).sum();
        col.row_mut(r).iter_mut().for_each(|x| *x = (*x - m).exp() / z);
    }
    (row, col.transpose())
}

fn log_softmax_diag<T: Scalar>(s: &Matrix<T>, i: usize, by_row: bool) -> T {
    let b = s.rows();
    let get = |j: usize| if by_row { s[(i, j)] } else { s[(j, i)] };
    let m = (0..b).map(get).fold(T::neg_infinity(), T::max);
    let lse = m + (0..b).map(|j| (get(j) - m).exp()).sum::<T>().ln();
    s[(i, i)] - lse
}

/// `-(1/B) Σᵢ [log softmax_row(S)ᵢᵢ + log softmax_col(S)ᵢᵢ]` with `S = Z₁Z₂ᵀ/τ`.
pub fn info_nce_value<T: Scalar>(z1: &Matrix<T>, z2: &Matrix<T>, tau: T) -> Result<T> {
    let s = similarity(z1, z2, tau)?;
    let b = s.rows();
    let total: T = (0..b)
        .map(|i| log_softmax_diag(&s, i, true) + log_softmax_diag(&s, i, false))
        .sum();
    Ok(-total / T::from_usize_lossy(b))
}

/// Derivative of [`info_nce_value`] with respect to the logits `S`.
pub fn info_nce_logit_grad<T: Scalar>(z1: &Matrix<T>, z2: &Matrix<T>, tau: T) -> Matrix<T> {
    let s = similarity(z1, z2, tau).expect("info_nce shapes checked on the forward pass");
    let b = s.rows();
    let (p, q) = softmaxes(&s);
    let k = -T::one() / T::from_usize_lossy(b);
    Matrix::from_fn(b, b, |i, j| {
        let delta = if i == j { T::lit(2.0) } else { T::zero() };
        k * (delta - p[(i, j)] - q[(i, j)])
    })
}

/// Bidirectional InfoNCE between matched unit rows of `z_svd` and `z_kg`.
pub fn infonce_loss<T: Scalar>(z_svd: &Matrix<T>, z_kg: &Matrix<T>, tau: T) -> Result<T> {
    info_nce_value(z_svd, z_kg, tau)
}
