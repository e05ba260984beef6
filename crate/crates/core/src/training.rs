//! Composite objective, Adam updates, epochs, KG pretraining and gradient checks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::data::{InteractionDataset, Triple};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{evaluate_ranking, Target};
use crate::model::{self, GraphContext, Model, ModelVars};
use crate::scalar::{log_sigmoid, Scalar};
use crate::tucker::{self, Mode, SiteStats};

/// Mean of `−log σ(s⁺ − s⁻)`.
pub fn bpr_rec_loss<T: Scalar>(pos: &[T], neg: &[T]) -> Result<T> {
    if pos.is_empty() {
        return Err(Error::InvalidArgument("BPR loss needs a nonempty batch".into()));
    }
    if pos.len() != neg.len() {
        return Err(Error::shape(
            "bpr_rec_loss",
            format!("{} positives, {} negatives", pos.len(), neg.len()),
        ));
    }
    let sum: T = pos.iter().zip(neg).map(|(&p, &n)| -log_sigmoid(p - n)).sum();
    Ok(sum / T::from_usize_lossy(pos.len()))
}

/// One optimization step's worth of samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub users: Vec<u32>,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
    /// Observed and corrupted KG triples for the Tucker term.
    pub kg: Vec<(Triple, Triple)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Per-term loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub cl: f64,
    pub tucker: f64,
    pub reg: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.rec += o.rec;
        self.cl += o.cl;
        self.tucker += o.tucker;
        self.reg += o.reg;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.total *= k;
        self.rec *= k;
        self.cl *= k;
        self.tucker *= k;
        self.reg *= k;
        self
    }
}

/// Tape nodes of each term plus normalization statistics seen in training mode.
pub struct LossGraph<T> {
    pub total: Var,
    pub rec: Option<Var>,
    pub cl: Option<Var>,
    pub tucker: Option<Var>,
    pub reg: Var,
    pub stats: Vec<SiteStats<T>>,
}

fn split_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dedup_index(ids: impl Iterator<Item = u32>) -> (Vec<usize>, BTreeMap<u32, usize>) {
    let mut order = Vec::new();
    let mut pos = BTreeMap::new();
    for id in ids {
        pos.entry(id).or_insert_with(|| {
            order.push(id as usize);
            order.len() - 1
        });
    }
    (order, pos)
}

/// Builds `rec + λ_CL·cl + λ_T·tucker + λ_REG·Σ‖θ‖²` on the tape.
///
/// An empty interaction batch contributes nothing to the rec and contrastive
/// terms; an empty KG batch contributes nothing to the Tucker term.
pub fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &ModelVars,
    batch: &Batch,
    mode: Mode,
) -> LossGraph<T> {
    let cfg = &model.cfg;
    let mut stats = Vec::new();
    let salted = |salt| match mode {
        Mode::Train { seed } => Mode::Train {
            seed: split_seed(seed, salt),
        },
        Mode::Eval => Mode::Eval,
    };

    let (mut rec, mut cl) = (None, None);
    if !batch.is_empty() {
        let (users, upos) = dedup_index(batch.users.iter().copied());
        let (items, ipos) = dedup_index(batch.pos.iter().chain(&batch.neg).copied());
        let fw = model::forward(tape, model, vars, &users, &items);
        let b = batch.len();
        let mut rows = Vec::with_capacity(2 * b);
        let mut raw = Vec::with_capacity(2 * b);
        for list in [&batch.pos, &batch.neg] {
            for (k, &i) in list.iter().enumerate() {
                let u = batch.users[k];
                rows.push((upos[&u], ipos[&i]));
                raw.push((u, i));
            }
        }
        let (s, st) = model::pair_scores(tape, model, vars, &fw, &rows, &raw, salted(1));
        stats.extend(st);
        let sp = tape.gather(s, &(0..b).collect::<Vec<_>>());
        let sn = tape.gather(s, &(b..2 * b).collect::<Vec<_>>());
        let diff = tape.sub(sp, sn);
        let ls = tape.log_sigmoid(diff);
        let m = tape.mean(ls);
        rec = Some(tape.scale(m, -T::one()));

        let (pos_items, _) = dedup_index(batch.pos.iter().copied());
        let prow: Vec<usize> = pos_items.iter().map(|&i| ipos[&(i as u32)]).collect();
        let eps = T::lit(crate::contrastive::NORM_FLOOR);
        let il = tape.gather(fw.item_l, &prow);
        let zs = tape.matmul(il, vars.f_svd);
        let zs = tape.row_normalize(zs, eps);
        let kg = tape.gather(fw.kg_agg, &prow);
        let zk = tape.matmul(kg, vars.f_kg);
        let zk = tape.row_normalize(zk, eps);
        cl = Some(tape.info_nce(zs, zk, model.state.heads.tau));
    }

    let mut tuck = None;
    if !batch.kg.is_empty() {
        let (l, st) = tucker::loss_on_tape(tape, &vars.tucker, &model.state.tucker, &batch.kg, salted(2));
        stats.extend(st);
        tuck = Some(l);
    }

    let mut reg = None;
    for &v in &vars.all {
        let sq = tape.sum_squares(v);
        reg = Some(match reg {
            None => sq,
            Some(acc) => tape.add(acc, sq),
        });
    }
    let reg = reg.unwrap_or_else(|| tape.constant(Matrix::scalar(T::zero())));

    let mut total = tape.scale(reg, T::lit(cfg.lambda_reg));
    if let Some(r) = rec {
        total = tape.add(total, r);
    }
    if let Some(c) = cl {
        let w = tape.scale(c, T::lit(cfg.lambda_cl));
        total = tape.add(total, w);
    }
    if let Some(t) = tuck {
        let w = tape.scale(t, T::lit(cfg.lambda_tucker));
        total = tape.add(total, w);
    }
    LossGraph {
        total,
        rec,
        cl,
        tucker: tuck,
        reg,
        stats,
    }
}

fn breakdown<T: Scalar>(tape: &Tape<T>, g: &LossGraph<T>) -> Result<LossBreakdown> {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).to_f64_lossy());
    let out = LossBreakdown {
        total: get(Some(g.total)),
        rec: get(g.rec),
        cl: get(g.cl),
        tucker: get(g.tucker),
        reg: get(Some(g.reg)),
    };
    for (name, v) in [
        ("rec", out.rec),
        ("cl", out.cl),
        ("tucker", out.tucker),
        ("reg", out.reg),
        ("total", out.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    Ok(out)
}

/// Loss value and per-term breakdown in the given mode.
pub fn total_loss<T: Scalar>(model: &Model<T>, batch: &Batch, mode: Mode) -> Result<LossBreakdown> {
    check_batch(&model.ctx, batch)?;
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, false);
    let g = build_loss(&mut tape, model, &vars, batch, mode);
    breakdown(&tape, &g)
}

fn check_batch<T: Scalar>(ctx: &GraphContext<T>, batch: &Batch) -> Result<()> {
    if batch.pos.len() != batch.len() || batch.neg.len() != batch.len() {
        return Err(Error::shape("batch", "users, pos and neg differ in length"));
    }
    for &u in &batch.users {
        if u as usize >= ctx.num_users {
            return Err(Error::OutOfRange {
                what: "user",
                index: u as usize,
                limit: ctx.num_users,
            });
        }
    }
    for &i in batch.pos.iter().chain(&batch.neg) {
        if i as usize >= ctx.num_items {
            return Err(Error::OutOfRange {
                what: "item",
                index: i as usize,
                limit: ctx.num_items,
            });
        }
    }
    Ok(())
}

/// One Adam update from `grads` (aligned with [`crate::model::ModelState::params`]).
///
/// Tensors without a gradient are left alone. With a zero learning rate only
/// the step counters advance.
pub fn adam_step<T: Scalar>(model: &mut Model<T>, grads: &[Option<Matrix<T>>]) {
    let cfg = &model.cfg;
    let (b1, b2) = (T::lit(cfg.adam_beta1), T::lit(cfg.adam_beta2));
    let (lr, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.adam_eps));
    let frozen = cfg.learning_rate == 0.0;
    let state = &mut model.state;
    let mut adam = std::mem::replace(
        &mut state.adam,
        crate::model::AdamState {
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
        },
    );
    for (k, p) in state.params_mut().into_iter().enumerate() {
        let Some(g) = &grads[k] else { continue };
        adam.steps[k] += 1;
        if frozen {
            continue;
        }
        let t = adam.steps[k] as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let m = adam.m[k].as_mut_slice();
        let v = adam.v[k].as_mut_slice();
        for (((x, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    state.adam = adam;
}

/// Forward, backward, Adam update and running-statistics update for one batch.
pub fn train_step<T: Scalar>(model: &mut Model<T>, batch: &Batch, seed: u64) -> Result<LossBreakdown> {
    check_batch(&model.ctx, batch)?;
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, true);
    let g = build_loss(&mut tape, model, &vars, batch, Mode::Train { seed });
    let out = breakdown(&tape, &g)?;
    let mut grads = tape.backward(g.total);
    let per: Vec<Option<Matrix<T>>> = vars.all.iter().map(|&v| grads.take(v)).collect();
    for (k, g) in per.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                let name = &model.state.params()[k].0;
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }
    adam_step(model, &per);
    if model.cfg.learning_rate != 0.0 {
        for st in &g.stats {
            for (run, b) in model.state.tucker.norm_stats.iter_mut().zip(st) {
                run.update(b);
            }
        }
    }
    if !model.state.is_finite() {
        let bad: Vec<String> = model
            .state
            .params()
            .into_iter()
            .filter(|(_, p)| !p.is_finite())
            .map(|(n, _)| n)
            .collect();
        return Err(Error::NonFinite(format!("parameters {}", bad.join(", "))));
    }
    Ok(out)
}

fn sample_negative_item(train: &[u32], num_items: usize, rng: &mut impl Rng) -> u32 {
    if train.len() >= num_items {
        return rng.random_range(0..num_items as u32);
    }
    loop {
        let i = rng.random_range(0..num_items as u32);
        if train.binary_search(&i).is_err() {
            return i;
        }
    }
}

fn kg_pairs(ctx_kg: &crate::data::KnowledgeGraph, n: usize, rng: &mut impl Rng) -> Vec<(Triple, Triple)> {
    let triples = ctx_kg.triples();
    if triples.is_empty() || ctx_kg.num_entities() < 2 || n == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let p = triples[rng.random_range(0..triples.len())];
            (p, tucker::sample_negative_triple(ctx_kg, p, rng))
        })
        .collect()
}

/// Shuffled training batches with one uniform unobserved negative per positive
/// and a uniformly drawn KG batch per step.
pub fn epoch_batches<T: Scalar>(ctx: &GraphContext<T>, cfg: &crate::config::TrainConfig, rng: &mut impl Rng) -> Vec<Batch> {
    let mut pairs: Vec<(u32, u32)> = ctx
        .train_items
        .iter()
        .enumerate()
        .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
        .collect();
    pairs.shuffle(rng);
    let lambda_t = cfg.lambda_tucker > 0.0;
    pairs
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let mut b = Batch::default();
            for &(u, i) in chunk {
                b.users.push(u);
                b.pos.push(i);
                b.neg
                    .push(sample_negative_item(&ctx.train_items[u as usize], ctx.num_items, rng));
            }
            if lambda_t {
                b.kg = kg_pairs(&ctx.kg, cfg.kg_batch_size.min(ctx.kg.triples().len()), rng);
            }
            b
        })
        .collect()
}

fn epoch_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(split_seed(seed, phase), epoch as u64))
}

/// One pass over the training interactions; returns mean per-term losses.
pub fn train_epoch<T: Scalar>(model: &mut Model<T>, epoch: usize) -> Result<LossBreakdown> {
    let mut rng = epoch_rng(model.cfg.seed, 1, epoch);
    let batches = epoch_batches(&model.ctx, &model.cfg, &mut rng);
    let mut sum = LossBreakdown::default();
    for b in &batches {
        let seed = rng.next_u64();
        sum.accumulate(&train_step(model, b, seed)?);
    }
    Ok(sum.scaled(1.0 / batches.len().max(1) as f64))
}

/// Tucker-only training over the KG; returns the mean loss of each epoch.
pub fn kg_pretrain<T: Scalar>(model: &mut Model<T>, epochs: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(epochs);
    if model.ctx.kg.triples().is_empty() || model.ctx.kg.num_entities() < 2 {
        return Ok(out);
    }
    for epoch in 0..epochs {
        let mut rng = epoch_rng(model.cfg.seed, 2, epoch);
        let mut triples = model.ctx.kg.triples().to_vec();
        triples.shuffle(&mut rng);
        let chunks: Vec<Vec<(Triple, Triple)>> = triples
            .chunks(model.cfg.kg_batch_size)
            .map(|c| {
                c.iter()
                    .map(|&p| (p, tucker::sample_negative_triple(&model.ctx.kg, p, &mut rng)))
                    .collect()
            })
            .collect();
        let mut total = 0.0;
        for kg in chunks {
            let seed = rng.next_u64();
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, model, true);
            let (loss, stats) = tucker::loss_on_tape(
                &mut tape,
                &vars.tucker,
                &model.state.tucker,
                &kg,
                Mode::Train { seed },
            );
            let v = tape.scalar(loss).to_f64_lossy();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("tucker pretraining loss = {v}")));
            }
            total += v;
            let mut grads = tape.backward(loss);
            let per: Vec<Option<Matrix<T>>> = vars.all.iter().map(|&v| grads.take(v)).collect();
            adam_step(model, &per);
            if model.cfg.learning_rate != 0.0 {
                if let Some(st) = stats {
                    for (run, b) in model.state.tucker.norm_stats.iter_mut().zip(&st) {
                        run.update(b);
                    }
                }
            }
        }
        let n = model.ctx.kg.triples().len().div_ceil(model.cfg.kg_batch_size);
        out.push(total / n as f64);
    }
    Ok(out)
}

/// Relative errors of analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// `(tensor name, ‖a − n‖ / max(‖a‖, ‖n‖))`, zero when both norms are below 1e-12.
    pub per_tensor: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

/// Multiplies the analytic gradient of one tensor by `1 + fraction` before
/// comparison, to exercise the checker.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCorruption {
    pub tensor: String,
    pub fraction: f64,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares analytic gradients of the total loss against central finite
/// differences for every parameter entry.
pub fn grad_check<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
    seed: u64,
    corrupt: Option<&GradCorruption>,
) -> Result<GradCheckReport> {
    check_batch(&model.ctx, batch)?;
    let mode = Mode::Train { seed };
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model, true);
    let g = build_loss(&mut tape, model, &vars, batch, mode);
    let mut grads = tape.backward(g.total);
    let names: Vec<String> = model.state.params().into_iter().map(|(n, _)| n).collect();
    if let Some(c) = corrupt {
        if !names.contains(&c.tensor) {
            return Err(Error::InvalidArgument(format!("unknown tensor {}", c.tensor)));
        }
    }

    let eval = |m: &Model<T>| -> T {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, m, false);
        let g = build_loss(&mut tape, m, &vars, batch, mode);
        tape.scalar(g.total)
    };
    let mut work = model.clone();
    let h = T::lit(GRAD_CHECK_STEP);
    let two_h = h + h;
    let mut per_tensor = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let len = work.state.params()[k].1.len();
        let mut analytic = grads
            .take(vars.all[k])
            .map(Matrix::into_vec)
            .unwrap_or_else(|| vec![T::zero(); len]);
        if let Some(c) = corrupt.filter(|c| &c.tensor == name) {
            let f = T::lit(1.0 + c.fraction);
            analytic.iter_mut().for_each(|a| *a *= f);
        }
        let mut numeric = vec![T::zero(); len];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = work.state.params_mut()[k].as_slice()[j];
            work.state.params_mut()[k].as_mut_slice()[j] = orig + h;
            let up = eval(&work);
            work.state.params_mut()[k].as_mut_slice()[j] = orig - h;
            let down = eval(&work);
            work.state.params_mut()[k].as_mut_slice()[j] = orig;
            *n = (up - down) / two_h;
        }
        let norm = |v: &[T]| v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let diff: Vec<T> = analytic.iter().zip(&numeric).map(|(&a, &b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale < 1e-12 { 0.0 } else { norm(&diff) / scale };
        per_tensor.push((name.clone(), rel));
    }
    let max_relative_error = per_tensor.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_relative_error,
    })
}

/// Four users, four items and six entities with `d = d_e = 8`, two layers
/// and every loss term active, plus one batch exercising all of them.
pub fn toy_problem<T: Scalar>(seed: u64) -> Result<(Model<T>, Batch)> {
    let pairs = vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 0)];
    let ds = InteractionDataset::new(4, 4, pairs)?;
    let kg = crate::data::KnowledgeGraph::new(
        4,
        6,
        2,
        vec![
            Triple::new(0, 0, 4),
            Triple::new(1, 0, 4),
            Triple::new(2, 1, 5),
            Triple::new(3, 1, 5),
            Triple::new(0, 1, 5),
        ],
    )?;
    let mut cfg = crate::config::TrainConfig::default();
    cfg.d = 8;
    cfg.d_e = 8;
    cfg.d_c = 4;
    cfg.k_s = 3;
    cfg.layers = 2;
    cfg.lambda_cl = 0.5;
    cfg.lambda_tucker = 0.5;
    cfg.lambda_reg = 1e-2;
    cfg.seed = seed;
    let model = Model::new(&cfg, &ds, &kg, None)?;
    let batch = Batch {
        users: vec![0, 1, 2, 3],
        pos: vec![1, 2, 3, 0],
        neg: vec![2, 3, 0, 1],
        kg: vec![
            (Triple::new(0, 0, 4), Triple::new(0, 0, 5)),
            (Triple::new(2, 1, 5), Triple::new(2, 1, 4)),
            (Triple::new(1, 0, 4), Triple::new(1, 0, 2)),
        ],
    };
    Ok((model, batch))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_cl: f64,
    pub loss_tucker: f64,
    pub loss_reg: f64,
    #[serde(rename = "val_recall@20")]
    pub val_recall_20: f64,
}

/// Where and how [`fit`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub kg_pretrain: bool,
}

/// What [`fit`] produced.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub pretrain_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall: f64,
}

/// Optional KG pretraining, then `cfg.epochs` joint epochs.
///
/// Writes `config.txt`, `log.jsonl` (one JSON object per epoch), periodic
/// `epoch-{n}.sprk`, `best.sprk` (best validation Recall@20) and `last.sprk`.
pub fn fit<T: Scalar>(model: &mut Model<T>, ds: &InteractionDataset, opts: &FitOptions) -> Result<FitSummary> {
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.txt", &model.cfg.to_text())?;
    let pretrain_losses = if opts.kg_pretrain {
        kg_pretrain(model, model.cfg.kg_pretrain_epochs)?
    } else {
        Vec::new()
    };
    let log_path = dir.join("log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut epochs = Vec::new();
    let (mut best_epoch, mut best) = (0, f64::NEG_INFINITY);
    let has_val = !ds.val().is_empty();
    for epoch in 1..=model.cfg.epochs {
        let l = train_epoch(model, epoch)?;
        let val = if has_val {
            let emb = model.embeddings();
            let r = evaluate_ranking(&emb, ds, &[20], 0.1, Target::Validation)?;
            r.recall[&20]
        } else {
            0.0
        };
        let rec = EpochRecord {
            epoch,
            loss_total: l.total,
            loss_rec: l.rec,
            loss_cl: l.cl,
            loss_tucker: l.tucker,
            loss_reg: l.reg,
            val_recall_20: val,
        };
        let line = serde_json::to_string(&rec).expect("plain record");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if val > best {
            best = val;
            best_epoch = epoch;
            checkpoint::save(model, dir.join("best.sprk"))?;
        }
        if model.cfg.checkpoint_every > 0 && epoch % model.cfg.checkpoint_every == 0 {
            checkpoint::save(model, dir.join(format!("epoch-{epoch}.sprk")))?;
        }
        epochs.push(rec);
    }
    checkpoint::save(model, dir.join("last.sprk"))?;
    Ok(FitSummary {
        pretrain_losses,
        epochs,
        best_epoch,
        best_val_recall: best.max(0.0),
    })
}
