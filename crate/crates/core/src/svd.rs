//! Truncated SVD of the interaction matrix and spectrally filtered initial features.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::linalg::{Csr, Matrix};
use crate::scalar::Scalar;

const OVERSAMPLE: usize = 8;
const POWER_ITERS: usize = 4;
const MAX_FILTER_EXPONENT: f64 = 30.0;
const JACOBI_SWEEPS: usize = 60;
const CACHE_MAGIC: &[u8; 4] = b"KSVD";
const CACHE_VERSION: u32 = 1;

/// Rank-`k` factors with orthonormal columns and descending singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors<T> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdFactors<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, &s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

/// Binary `M x N` matrix of training interactions.
pub fn interaction_matrix<T: Scalar>(ds: &InteractionDataset) -> Csr<T> {
    let trip: Vec<(usize, usize, T)> = ds
        .train()
        .iter()
        .map(|&(u, i)| (u as usize, i as usize, T::one()))
        .collect();
    Csr::from_triplets(ds.num_users(), ds.num_items(), &trip).expect("dataset ids in range")
}

/// Orthonormalizes the rows of `m` in place with two passes of modified
/// Gram-Schmidt. Rows that collapse are replaced by unit vectors orthogonal to
/// the preceding rows, so the result always has orthonormal rows.
fn orthonormalize_rows<T: Scalar>(m: &mut Matrix<T>) {
    let (rows, cols) = m.shape();
    assert!(rows <= cols, "cannot orthonormalize {rows} rows in dimension {cols}");
    for r in 0..rows {
        let scale = norm(m.row(r));
        for _pass in 0..2 {
            project_out(m, r);
        }
        let n = norm(m.row(r));
        if n > T::lit(1e-10) * scale.max(T::one()) && n > T::zero() {
            m.row_mut(r).iter_mut().for_each(|x| *x /= n);
            continue;
        }
        // Some unit vector keeps at least (cols - r) / cols of its mass.
        let mut best = (T::zero(), Vec::new());
        for j in 0..cols {
            let row = m.row_mut(r);
            row.iter_mut().for_each(|x| *x = T::zero());
            row[j] = T::one();
            project_out(m, r);
            project_out(m, r);
            let n = norm(m.row(r));
            if n > best.0 {
                best = (n, m.row(r).to_vec());
            }
        }
        let (n, v) = best;
        assert!(n > T::zero(), "no orthogonal completion available");
        for (x, y) in m.row_mut(r).iter_mut().zip(v) {
            *x = y / n;
        }
    }
}

fn project_out<T: Scalar>(m: &mut Matrix<T>, r: usize) {
    let cols = m.cols();
    let (head, tail) = m.as_mut_slice().split_at_mut(r * cols);
    let row = &mut tail[..cols];
    for prow in head.chunks_exact(cols) {
        let d = dot(prow, row);
        for (x, &q) in row.iter_mut().zip(prow) {
            *x -= d * q;
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// One-sided Jacobi SVD of a tall matrix `g` (`n x l`, `n ≥ l`).
///
/// Returns `(U, σ, V)` with `g = U diag(σ) Vᵀ`, σ descending, `U` `n x l`
/// with orthonormal columns and `V` `l x l` orthogonal.
fn jacobi_svd<T: Scalar>(g: &Matrix<T>) -> (Matrix<T>, Vec<T>, Matrix<T>) {
    let (n, l) = g.shape();
    // Work on columns as rows for contiguous access.
    let mut a = g.transpose();
    let mut v = Matrix::<T>::identity(l);
    let eps = T::epsilon() * T::lit(4.0);
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..l {
            for q in p + 1..l {
                let alpha = dot(a.row(p), a.row(p));
                let beta = dot(a.row(q), a.row(q));
                let gamma = dot(a.row(p), a.row(q));
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == T::zero() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut a, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..l).collect();
    let sig: Vec<T> = (0..l).map(|r| norm(a.row(r))).collect();
    order.sort_by(|&x, &y| sig[y].partial_cmp(&sig[x]).unwrap_or(std::cmp::Ordering::Equal));
    let tiny = sig.iter().copied().fold(T::zero(), T::max) * T::lit(1e-12);
    let mut ut = Matrix::zeros(l, n);
    let mut vt = Matrix::zeros(l, l);
    let mut sigma = Vec::with_capacity(l);
    for (dst, &src) in order.iter().enumerate() {
        let s = sig[src];
        if s > tiny && s > T::zero() {
            for (o, &x) in ut.row_mut(dst).iter_mut().zip(a.row(src)) {
                *o = x / s;
            }
            sigma.push(s);
        } else {
            sigma.push(T::zero());
        }
        vt.row_mut(dst).copy_from_slice(v.row(src));
    }
    orthonormalize_rows(&mut ut);
    (ut.transpose(), sigma, vt.transpose())
}

fn rotate_rows<T: Scalar>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (lo, hi) = data.split_at_mut(q * cols);
    let rp = &mut lo[p * cols..(p + 1) * cols];
    let rq = &mut hi[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Flips factor pairs so the largest-magnitude entry of each `U` column is positive.
fn fix_signs<T: Scalar>(u: &mut Matrix<T>, v: &mut Matrix<T>) {
    for c in 0..u.cols() {
        let col = u.column(c);
        let pivot = col
            .iter()
            .copied()
            .fold(T::zero(), |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < T::zero() {
            for r in 0..u.rows() {
                u[(r, c)] = -u[(r, c)];
            }
            for r in 0..v.rows() {
                v[(r, c)] = -v[(r, c)];
            }
        }
    }
}

/// Top-`k` singular triplets by randomized subspace iteration
/// (oversampling 8, four power iterations).
pub fn truncated_svd<T: Scalar>(r: &Csr<T>, k: usize, seed: u64) -> Result<SvdFactors<T>> {
    let (m, n) = (r.rows(), r.cols());
    if k == 0 || k > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {k} must be in 1..={}",
            m.min(n)
        )));
    }
    if r.nnz() == 0 {
        return Err(Error::EmptyDataset);
    }
    let l = (k + OVERSAMPLE).min(m.min(n));
    let rt = r.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Matrix::from_fn(n, l, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::lit(z)
    });

    // Rows of `qt` span the range of R; rows of `zt` span the range of Rᵀ.
    let mut qt = r.spmm(&omega)?.transpose();
    orthonormalize_rows(&mut qt);
    for _ in 0..POWER_ITERS {
        let mut zt = rt.spmm(&qt.transpose())?.transpose();
        orthonormalize_rows(&mut zt);
        qt = r.spmm(&zt.transpose())?.transpose();
        orthonormalize_rows(&mut qt);
    }
    // Bᵀ = Rᵀ Q is n x l; Bᵀ = U_b Σ V_bᵀ gives R ≈ (Q V_b) Σ U_bᵀ.
    let bt = rt.spmm(&qt.transpose())?;
    let (ub, sigma, vb) = jacobi_svd(&bt);
    let q = qt.transpose();
    let left = q.matmul_unchecked(&vb);
    let mut u = Matrix::from_fn(m, k, |i, j| left[(i, j)]);
    let mut v = Matrix::from_fn(n, k, |i, j| ub[(i, j)]);
    fix_signs(&mut u, &mut v);
    Ok(SvdFactors {
        u,
        sigma: sigma[..k].to_vec(),
        v,
    })
}

/// Element-wise `exp(β σ)`; rejects `β·max σ > 30`.
pub fn spectral_filter<T: Scalar>(sigma: &[T], beta: T) -> Result<Vec<T>> {
    if !beta.is_finite() || sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("spectral filter input".into()));
    }
    let top = sigma.iter().map(|&s| beta * s).fold(T::neg_infinity(), T::max);
    if top > T::lit(MAX_FILTER_EXPONENT) {
        return Err(Error::Config(format!(
            "spectral filter exponent {top} exceeds {MAX_FILTER_EXPONENT}; \
             lower beta or normalize singular values"
        )));
    }
    Ok(sigma.iter().map(|&s| (beta * s).exp()).collect())
}

/// Learnable projection of filtered SVD features and the filter exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdInitParams<T> {
    /// `k_s x d_e`.
    pub f_s: Matrix<T>,
    pub beta: T,
}

impl<T: Scalar> SvdInitParams<T> {
    pub fn init(k_s: usize, d_e: usize, beta: T, rng: &mut impl rand::Rng) -> Self {
        Self {
            f_s: Matrix::uniform(k_s, d_e, 1.0 / (k_s as f64).sqrt(), rng),
            beta,
        }
    }
}

/// Filter weights with σ divided by its maximum first.
pub fn normalized_filter<T: Scalar>(sigma: &[T], beta: T) -> Result<Vec<T>> {
    let top = sigma.iter().copied().fold(T::zero(), T::max);
    let scaled: Vec<T> = if top > T::zero() {
        sigma.iter().map(|&s| s / top).collect()
    } else {
        sigma.to_vec()
    };
    spectral_filter(&scaled, beta)
}

/// Fixed features `[U diag(f); V diag(f)]`, shape `(M + N) x k_s`.
pub fn filtered_features<T: Scalar>(factors: &SvdFactors<T>, beta: T) -> Result<Matrix<T>> {
    let f = normalized_filter(&factors.sigma, beta)?;
    let scale = |m: &Matrix<T>| {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (x, &w) in out.row_mut(r).iter_mut().zip(&f) {
                *x *= w;
            }
        }
        out
    };
    scale(&factors.u).vstack(&scale(&factors.v))
}

/// `H_user0 = U diag(f) F_S`, `H_item0 = V diag(f) F_S`.
pub fn init_embeddings<T: Scalar>(
    factors: &SvdFactors<T>,
    params: &SvdInitParams<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if params.f_s.rows() != factors.rank() {
        return Err(Error::shape(
            "init_embeddings",
            format!("F_S has {} rows, rank is {}", params.f_s.rows(), factors.rank()),
        ));
    }
    let feats = filtered_features(factors, params.beta)?;
    let h = feats.matmul(&params.f_s)?;
    let m = factors.u.rows();
    Ok((h.slice_rows(0, m), h.slice_rows(m, h.rows())))
}

/// Cache file name for `(dataset hash, k, seed)`.
pub fn cache_path(dir: impl AsRef<Path>, dataset_hash: u64, k: usize, seed: u64) -> PathBuf {
    dir.as_ref()
        .join(format!("svd-{dataset_hash:016x}-k{k}-s{seed}.bin"))
}

pub fn save_factors<T: Scalar>(path: impl AsRef<Path>, f: &SvdFactors<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for d in [f.u.rows(), f.v.rows(), f.rank()] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in f.u.as_slice().iter().chain(&f.sigma).chain(f.v.as_slice()) {
        buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_factors<T: Scalar>(path: impl AsRef<Path>) -> Result<SvdFactors<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 32 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("not an SVD cache file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(bad("unsupported cache version"));
    }
    let dim = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize;
    let (m, n, k) = (dim(8), dim(16), dim(24));
    let count = m * k + k + n * k;
    if bytes.len() != 32 + 8 * count {
        return Err(bad("truncated cache file"));
    }
    let vals: Vec<T> = bytes[32..]
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Ok(SvdFactors {
        u: Matrix::from_vec(m, k, vals[..m * k].to_vec())?,
        sigma: vals[m * k..m * k + k].to_vec(),
        v: Matrix::from_vec(n, k, vals[m * k + k..].to_vec())?,
    })
}

/// Truncated SVD of the training matrix, reusing a cached result in `cache_dir` when present.
pub fn dataset_svd<T: Scalar>(
    ds: &InteractionDataset,
    k: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<SvdFactors<T>> {
    let path = cache_dir.map(|d| cache_path(d, ds.content_hash(), k, seed));
    if let Some(p) = &path {
        if p.exists() {
            return load_factors(p);
        }
    }
    let f = truncated_svd(&interaction_matrix(ds), k, seed)?;
    if let Some(p) = &path {
        save_factors(p, &f)?;
    }
    Ok(f)
}
