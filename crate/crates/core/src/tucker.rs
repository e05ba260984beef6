//! Tucker-decomposition triple scoring over the knowledge graph.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 1e-1;
const MAX_NEGATIVE_ATTEMPTS: usize = 100;

/// Running per-feature statistics of one normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
        }
    }

    /// Exponential moving average towards a batch's statistics.
    pub fn update(&mut self, batch: &NormStats<T>) {
        let m = T::lit(NORM_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Which statistics the normalization sites use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; dropout masks are drawn from `seed`.
    Train { seed: u64 },
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerParams<T> {
    pub entity_emb: Matrix<T>,
    pub relation_emb: Matrix<T>,
    pub w_e: Matrix<T>,
    pub w_r: Matrix<T>,
    /// `d_c x d_c²` unfolding: `core[(i, j·d_c + k)] = W[i, j, k]`.
    pub core: Matrix<T>,
    /// Head, relation and tail sites.
    pub norm_stats: [NormStats<T>; 3],
    pub dropout: f64,
    /// When false the three sites are identity maps.
    pub normalize: bool,
}

impl<T: Scalar> TuckerParams<T> {
    pub fn init(
        num_entities: usize,
        num_relations: usize,
        d: usize,
        d_c: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d == 0 || d_c == 0 || d_c > d {
            return Err(Error::Config(format!("need 0 < d_c <= d, got d={d} d_c={d_c}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {dropout}")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            entity_emb: Matrix::uniform(num_entities, d, bound, rng),
            relation_emb: Matrix::uniform(num_relations, d, bound, rng),
            w_e: Matrix::uniform(d, d_c, bound, rng),
            w_r: Matrix::uniform(d, d_c, bound, rng),
            core: Matrix::uniform(d_c, d_c * d_c, 0.1, rng),
            norm_stats: std::array::from_fn(|_| NormStats::new(d_c)),
            dropout,
            normalize: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.entity_emb.cols()
    }

    pub fn core_dim(&self) -> usize {
        self.core.rows()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_emb.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_emb.rows()
    }

    fn check_triple(&self, t: &Triple) -> Result<()> {
        for (what, id, limit) in [
            ("head entity", t.head, self.num_entities()),
            ("relation", t.relation, self.num_relations()),
            ("tail entity", t.tail, self.num_entities()),
        ] {
            if id as usize >= limit {
                return Err(Error::OutOfRange {
                    what,
                    index: id as usize,
                    limit,
                });
            }
        }
        Ok(())
    }
}

/// `Σ_{ijk} W[i,j,k]·hᵢ·rⱼ·tₖ`, contracting the relation mode first, then the
/// head mode, then the inner product with the tail.
pub fn contract_staged<T: Scalar>(w: &Matrix<T>, h: &[T], r: &[T], t: &[T]) -> T {
    let dc = w.rows();
    let mut v = vec![T::zero(); dc];
    let mut m = vec![T::zero(); dc];
    for (i, &hi) in h.iter().enumerate() {
        m.iter_mut().for_each(|x| *x = T::zero());
        let row = w.row(i);
        for (j, &rj) in r.iter().enumerate() {
            for (mk, &wv) in m.iter_mut().zip(&row[j * dc..(j + 1) * dc]) {
                *mk += wv * rj;
            }
        }
        for (vk, &mk) in v.iter_mut().zip(&m) {
            *vk += hi * mk;
        }
    }
    v.iter().zip(t).map(|(&a, &b)| a * b).sum()
}

/// Parameter leaves of [`TuckerParams`] on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TuckerVars {
    pub entity: Var,
    pub relation: Var,
    pub w_e: Var,
    pub w_r: Var,
    pub core: Var,
}

impl TuckerVars {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, p: &TuckerParams<T>) -> Self {
        Self {
            entity: tape.param(p.entity_emb.clone()),
            relation: tape.param(p.relation_emb.clone()),
            w_e: tape.param(p.w_e.clone()),
            w_r: tape.param(p.w_r.clone()),
            core: tape.param(p.core.clone()),
        }
    }

    /// Same values as non-differentiable leaves.
    pub fn constants<T: Scalar>(tape: &mut Tape<T>, p: &TuckerParams<T>) -> Self {
        Self {
            entity: tape.constant(p.entity_emb.clone()),
            relation: tape.constant(p.relation_emb.clone()),
            w_e: tape.constant(p.w_e.clone()),
            w_r: tape.constant(p.w_r.clone()),
            core: tape.constant(p.core.clone()),
        }
    }
}

/// Batch statistics observed at the three sites during a train-mode pass.
pub type SiteStats<T> = [NormStats<T>; 3];

fn dropout_mask<T: Scalar>(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Matrix<T> {
    let keep = T::lit(1.0 / (1.0 - p));
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

fn normalize_site<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &TuckerParams<T>,
    site: usize,
    mode: Mode,
    rng: Option<&mut rand_chacha::ChaCha8Rng>,
    observed: &mut Vec<NormStats<T>>,
) -> Var {
    if !params.normalize {
        return x;
    }
    let rows = tape.value(x).rows();
    let eps = T::lit(NORM_EPS);
    let use_batch = matches!(mode, Mode::Train { .. }) && rows > 1;
    let y = if use_batch {
        let (y, mean, var) = tape.standardize(x, eps);
        observed.push(NormStats { mean, var });
        y
    } else {
        let stats = &params.norm_stats[site];
        let neg_mean = tape.constant(Matrix::from_fn(1, stats.mean.len(), |_, c| -stats.mean[c]));
        let shifted = tape.add_row(x, neg_mean);
        let inv: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let scale = Arc::new(Matrix::from_fn(rows, inv.len(), |_, c| inv[c]));
        tape.mul_const(shifted, scale)
    };
    match (mode, rng) {
        (Mode::Train { .. }, Some(rng)) if params.dropout > 0.0 => {
            let (r, c) = tape.value(y).shape();
            let mask = Arc::new(dropout_mask(r, c, params.dropout, rng));
            tape.mul_const(y, mask)
        }
        _ => y,
    }
}

/// Scores `triples` as one normalization batch; returns an `n x 1` node and,
/// in train mode with more than one triple, the observed batch statistics.
pub fn score_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &TuckerVars,
    params: &TuckerParams<T>,
    triples: &[Triple],
    mode: Mode,
) -> (Var, Option<SiteStats<T>>) {
    use rand::SeedableRng;
    let mut rng = match mode {
        Mode::Train { seed } => Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
        Mode::Eval => None,
    };
    let heads: Vec<usize> = triples.iter().map(|t| t.head as usize).collect();
    let rels: Vec<usize> = triples.iter().map(|t| t.relation as usize).collect();
    let tails: Vec<usize> = triples.iter().map(|t| t.tail as usize).collect();

    let mut observed = Vec::new();
    let h = tape.gather(vars.entity, &heads);
    let h = tape.matmul(h, vars.w_e);
    let h = normalize_site(tape, h, params, 0, mode, rng.as_mut(), &mut observed);
    let r = tape.gather(vars.relation, &rels);
    let r = tape.matmul(r, vars.w_r);
    let r = normalize_site(tape, r, params, 1, mode, rng.as_mut(), &mut observed);
    let t = tape.gather(vars.entity, &tails);
    let t = tape.matmul(t, vars.w_e);
    let t = normalize_site(tape, t, params, 2, mode, rng.as_mut(), &mut observed);
    let s = tape.tucker(vars.core, h, r, t);
    let stats = (observed.len() == 3).then(|| {
        let mut it = observed.into_iter();
        std::array::from_fn(|_| it.next().expect("three sites"))
    });
    (s, stats)
}

/// Scores of `triples` scored together as one batch.
pub fn score_batch<T: Scalar>(
    params: &TuckerParams<T>,
    triples: &[Triple],
    mode: Mode,
) -> Result<Vec<T>> {
    for t in triples {
        params.check_triple(t)?;
    }
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = TuckerVars::constants(&mut tape, params);
    let (s, _) = score_on_tape(&mut tape, &vars, params, triples, mode);
    Ok(tape.value(s).as_slice().to_vec())
}

/// Plausibility score of one triple. A single triple in train mode is
/// normalized with the running statistics.
pub fn tucker_score<T: Scalar>(
    params: &TuckerParams<T>,
    h: u32,
    r: u32,
    t: u32,
    mode: Mode,
) -> Result<T> {
    Ok(score_batch(params, &[Triple::new(h, r, t)], mode)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    Head,
    Relation,
    Tail,
}

/// Eval-mode projected and normalized embeddings of `ids` at one site.
pub fn project_eval<T: Scalar>(params: &TuckerParams<T>, ids: &[usize], site: Site) -> Matrix<T> {
    let (table, w, k) = match site {
        Site::Head => (&params.entity_emb, &params.w_e, 0),
        Site::Relation => (&params.relation_emb, &params.w_r, 1),
        Site::Tail => (&params.entity_emb, &params.w_e, 2),
    };
    let mut x = table.gather_rows(ids).matmul_unchecked(w);
    if params.normalize {
        let st = &params.norm_stats[k];
        let eps = T::lit(NORM_EPS);
        for r in 0..x.rows() {
            for ((v, &mu), &var) in x.row_mut(r).iter_mut().zip(&st.mean).zip(&st.var) {
                *v = (*v - mu) / (var + eps).sqrt();
            }
        }
    }
    x
}

/// `M[i, k] = Σ_j W[i, j, k]·r_j`, so a score is `h·M·t`.
pub fn relation_slice<T: Scalar>(core: &Matrix<T>, r: &[T]) -> Matrix<T> {
    let dc = core.rows();
    Matrix::from_fn(dc, dc, |i, k| {
        r.iter()
            .enumerate()
            .map(|(j, &rj)| core[(i, j * dc + k)] * rj)
            .sum()
    })
}

/// Corrupts the tail uniformly over the other entities, retrying observed
/// triples up to 100 times.
pub fn sample_negative_triple(kg: &KnowledgeGraph, pos: Triple, rng: &mut impl Rng) -> Triple {
    let n = kg.num_entities() as u32;
    assert!(n >= 2, "negative sampling needs at least two entities");
    let mut cand = pos;
    for _ in 0..MAX_NEGATIVE_ATTEMPTS {
        let mut t = rng.random_range(0..n - 1);
        if t >= pos.tail {
            t += 1;
        }
        cand = Triple::new(pos.head, pos.relation, t);
        if !kg.contains(&cand) {
            break;
        }
    }
    cand
}

/// Builds `mean −log σ(s⁺ − s⁻)` on the tape with positives and negatives
/// normalized as one batch.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &TuckerVars,
    params: &TuckerParams<T>,
    batch: &[(Triple, Triple)],
    mode: Mode,
) -> (Var, Option<SiteStats<T>>) {
    let b = batch.len();
    let triples: Vec<Triple> = batch
        .iter()
        .map(|p| p.0)
        .chain(batch.iter().map(|p| p.1))
        .collect();
    let (s, stats) = score_on_tape(tape, vars, params, &triples, mode);
    let pos = tape.gather(s, &(0..b).collect::<Vec<_>>());
    let neg = tape.gather(s, &(b..2 * b).collect::<Vec<_>>());
    let diff = tape.sub(pos, neg);
    let ls = tape.log_sigmoid(diff);
    let m = tape.mean(ls);
    (tape.scale(m, -T::one()), stats)
}

/// Pairwise logistic ranking loss over (positive, corrupted) triple pairs.
pub fn tucker_loss<T: Scalar>(
    params: &TuckerParams<T>,
    batch: &[(Triple, Triple)],
    mode: Mode,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("tucker_loss needs a nonempty batch".into()));
    }
    for (p, n) in batch {
        params.check_triple(p)?;
        params.check_triple(n)?;
    }
    let mut tape = Tape::new();
    let vars = TuckerVars::constants(&mut tape, params);
    let (l, _) = loss_on_tape(&mut tape, &vars, params, batch, mode);
    let v = tape.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite("tucker loss".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute(w: &Matrix<f64>, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        let dc = w.rows();
        let mut s = 0.0;
        for i in 0..dc {
            for j in 0..dc {
                for k in 0..dc {
                    s += w[(i, j * dc + k)] * h[i] * r[j] * t[k];
                }
            }
        }
        s
    }

    fn plain_params(dc: usize) -> TuckerParams<f64> {
        let mut p = TuckerParams::init(3, 2, dc, dc, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.normalize = false;
        p.w_e = Matrix::identity(dc);
        p.w_r = Matrix::identity(dc);
        p
    }

    #[test]
    fn worked_example_scores_three() {
        let mut p = plain_params(2);
        p.core = Matrix::from_fn(2, 4, |i, jk| (i + jk / 2 + jk % 2) as f64);
        p.entity_emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        p.relation_emb = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let s = tucker_score(&p, 0, 0, 1, Mode::Eval).unwrap();
        assert!((s - 3.0).abs() < 1e-12);
        assert!((brute(&p.core, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_core_scores_zero() {
        let mut p = plain_params(3);
        p.normalize = true;
        p.core = Matrix::zeros(3, 9);
        for (h, r, t) in [(0, 0, 1), (2, 1, 0)] {
            assert_eq!(tucker_score(&p, h, r, t, Mode::Eval).unwrap(), 0.0);
        }
    }

    #[test]
    fn staged_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let dc = rng.random_range(1..=8);
            let w = Matrix::<f64>::uniform(dc, dc * dc, 1.0, &mut rng);
            let v = |rng: &mut ChaCha8Rng| Matrix::<f64>::uniform(1, dc, 1.0, rng).into_vec();
            let (h, r, t) = (v(&mut rng), v(&mut rng), v(&mut rng));
            assert!((contract_staged(&w, &h, &r, &t) - brute(&w, &h, &r, &t)).abs() < 1e-10);
        }
    }

    #[test]
    fn score_is_linear_in_tail() {
        let mut p = plain_params(3);
        let s1 = tucker_score(&p, 0, 1, 2, Mode::Eval).unwrap();
        p.entity_emb.row_mut(2).iter_mut().for_each(|x| *x *= 2.5);
        let s2 = tucker_score(&p, 0, 1, 2, Mode::Eval).unwrap();
        assert!((s2 - 2.5 * s1).abs() < 1e-12);
    }

    #[test]
    fn train_and_eval_agree_when_stats_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = TuckerParams::<f64>::init(5, 2, 4, 3, 0.0, &mut rng).unwrap();
        let triples = [Triple::new(0, 0, 1), Triple::new(2, 1, 3), Triple::new(4, 0, 0)];
        let mut tape = Tape::new();
        let vars = TuckerVars::constants(&mut tape, &p);
        let (_, stats) = score_on_tape(&mut tape, &vars, &p, &triples, Mode::Train { seed: 1 });
        p.norm_stats = stats.unwrap();
        let train = score_batch(&p, &triples, Mode::Train { seed: 1 }).unwrap();
        let eval = score_batch(&p, &triples, Mode::Eval).unwrap();
        for (a, b) in train.iter().zip(&eval) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_triple_train_mode_uses_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = TuckerParams::<f64>::init(4, 1, 4, 2, 0.0, &mut rng).unwrap();
        let a = tucker_score(&p, 1, 0, 2, Mode::Train { seed: 9 }).unwrap();
        let b = tucker_score(&p, 1, 0, 2, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_ids_error() {
        let p = plain_params(2);
        assert!(matches!(
            tucker_score(&p, 3, 0, 0, Mode::Eval),
            Err(Error::OutOfRange { .. })
        ));
        assert!(tucker_score(&p, 0, 2, 0, Mode::Eval).is_err());
    }

    #[test]
    fn loss_examples() {
        let p = plain_params(2);
        let pair = (Triple::new(0, 0, 1), Triple::new(0, 0, 1));
        let l = tucker_loss(&p, &[pair, pair], Mode::Eval).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(tucker_loss(&p, &[], Mode::Eval).is_err());
    }

    #[test]
    fn forced_negative_with_two_entities() {
        let kg = KnowledgeGraph::new(2, 2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_negative_triple(&kg, Triple::new(0, 0, 1), &mut rng).tail, 0);
        }
    }

    #[test]
    fn negatives_are_deterministic_and_mostly_unobserved() {
        let spec = crate::data::SyntheticSpec::default();
        let (_, kg) = crate::data::gen_synthetic_longtail(&spec).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            kg.triples()
                .iter()
                .map(|&t| sample_negative_triple(&kg, t, &mut rng))
                .collect::<Vec<_>>()
        };
        let a = draw(5);
        assert_eq!(a, draw(5));
        let observed = a.iter().filter(|t| kg.contains(t)).count();
        assert!((observed as f64) <= 0.01 * a.len() as f64);
        assert!(a.iter().zip(kg.triples()).all(|(n, p)| n.tail != p.tail));
    }
}
