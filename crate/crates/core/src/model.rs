//! Full model state, its graph context and the shared forward pass.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SparseOperand, Tape, Var};
use crate::config::TrainConfig;
use crate::contrastive::{kg_aggregate_on_tape, kg_mean_operator, ProjectionHeads};
use crate::data::{InteractionDataset, KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionParams, FusionVars};
use crate::gnn::{self, GnnWeights, LayerVars};
use crate::linalg::{Csr, Matrix};
use crate::manifold::{self, Curvature, MAX_TANGENT_NORM};
use crate::metrics::Scorer;
use crate::scalar::Scalar;
use crate::svd::{self, SvdInitParams};
use crate::tucker::{self, Mode, TuckerParams, TuckerVars};

/// Adam moment buffers, one pair per parameter tensor, with per-tensor step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub steps: Vec<u64>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &[(String, &Matrix<T>)]) -> Self {
        let z: Vec<Matrix<T>> = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: z.clone(),
            v: z,
            steps: vec![0; params.len()],
        }
    }
}

/// Every learnable tensor plus fixed buffers and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub tucker: TuckerParams<T>,
    pub svd: SvdInitParams<T>,
    /// Filtered SVD features `[U diag(f); V diag(f)]`, not trained.
    pub svd_features: Matrix<T>,
    pub gnn: GnnWeights<T>,
    pub heads: ProjectionHeads<T>,
    pub fusion: FusionParams<T>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Learnable tensors in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = vec![
            ("tucker.entity".into(), &self.tucker.entity_emb),
            ("tucker.relation".into(), &self.tucker.relation_emb),
            ("tucker.w_e".into(), &self.tucker.w_e),
            ("tucker.w_r".into(), &self.tucker.w_r),
            ("tucker.core".into(), &self.tucker.core),
            ("svd.f_s".into(), &self.svd.f_s),
        ];
        for (l, layer) in self.gnn.layers.iter().enumerate() {
            out.push((format!("gnn.{l}.w_e"), &layer.w_e));
            out.push((format!("gnn.{l}.w_self"), &layer.w_self));
            out.push((format!("gnn.{l}.w_hyp"), &layer.w_hyp));
        }
        let f = &self.fusion;
        out.extend([
            ("heads.f_svd".into(), &self.heads.f_svd),
            ("heads.f_kg".into(), &self.heads.f_kg),
            ("heads.kg_agg".into(), &self.heads.kg_agg),
            ("fusion.gate_a".into(), &f.gate_a),
            ("fusion.gate_b".into(), &f.gate_b),
            ("fusion.attn_wq".into(), &f.attn_wq),
            ("fusion.attn_wk".into(), &f.attn_wk),
            ("fusion.attn_wv".into(), &f.attn_wv),
            ("fusion.mlp_w1".into(), &f.mlp_w1),
            ("fusion.mlp_b1".into(), &f.mlp_b1),
            ("fusion.mlp_w2".into(), &f.mlp_w2),
            ("fusion.mlp_b2".into(), &f.mlp_b2),
            ("fusion.kg_to_de".into(), &f.kg_to_de),
        ]);
        out
    }

    /// Mutable view in the order of [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let Self {
            tucker,
            svd,
            gnn,
            heads,
            fusion: f,
            ..
        } = self;
        let mut out: Vec<&mut Matrix<T>> = vec![
            &mut tucker.entity_emb,
            &mut tucker.relation_emb,
            &mut tucker.w_e,
            &mut tucker.w_r,
            &mut tucker.core,
            &mut svd.f_s,
        ];
        for layer in gnn.layers.iter_mut() {
            out.push(&mut layer.w_e);
            out.push(&mut layer.w_self);
            out.push(&mut layer.w_hyp);
        }
        out.extend([
            &mut heads.f_svd,
            &mut heads.f_kg,
            &mut heads.kg_agg,
            &mut f.gate_a,
            &mut f.gate_b,
            &mut f.attn_wq,
            &mut f.attn_wk,
            &mut f.attn_wv,
            &mut f.mlp_w1,
            &mut f.mlp_b1,
            &mut f.mlp_w2,
            &mut f.mlp_b2,
            &mut f.kg_to_de,
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.is_finite())
    }
}

/// Structures derived from the data that the model reads but never trains.
#[derive(Clone, Debug)]
pub struct GraphContext<T> {
    pub num_users: usize,
    pub num_items: usize,
    pub adj: Arc<SparseOperand<T>>,
    /// `N x |entity table|` neighbour-mean operator.
    pub kg_mean: Csr<T>,
    pub popularity: Vec<T>,
    pub kg: KnowledgeGraph,
    /// Sorted training items of each user.
    pub train_items: Vec<Vec<u32>>,
    /// Relation id of the user-item relation when the Tucker score term is on.
    pub interacts_relation: Option<u32>,
    /// Entity id of user 0 when the Tucker score term is on.
    pub user_entity_offset: usize,
}

impl<T: Scalar> GraphContext<T> {
    pub fn new(cfg: &TrainConfig, ds: &InteractionDataset, kg: &KnowledgeGraph) -> Result<Self> {
        if kg.num_items() != ds.num_items() {
            return Err(Error::InvalidArgument(format!(
                "knowledge graph covers {} items, dataset has {}",
                kg.num_items(),
                ds.num_items()
            )));
        }
        if ds.train().is_empty() {
            return Err(Error::EmptyDataset);
        }
        let entity_rows = kg.num_entities() + if cfg.use_tucker_score { ds.num_users() } else { 0 };
        let (popularity, _) = fusion::popularity_scores(ds);
        Ok(Self {
            num_users: ds.num_users(),
            num_items: ds.num_items(),
            adj: SparseOperand::new(gnn::normalize_adjacency(ds)),
            kg_mean: kg_mean_operator(kg, entity_rows),
            popularity,
            kg: kg.clone(),
            train_items: ds.by_user(ds.train()),
            interacts_relation: cfg.use_tucker_score.then_some(kg.num_relations() as u32),
            user_entity_offset: kg.num_entities(),
        })
    }

    pub fn entity_rows(&self) -> usize {
        self.kg_mean.cols()
    }

    pub fn relation_rows(&self) -> usize {
        self.kg.num_relations() + usize::from(self.interacts_relation.is_some())
    }

    pub fn interaction_triple(&self, user: u32, item: u32) -> Option<Triple> {
        self.interacts_relation
            .map(|r| Triple::new((self.user_entity_offset + user as usize) as u32, r, item))
    }
}

#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub cfg: TrainConfig,
    pub state: ModelState<T>,
    pub ctx: GraphContext<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model: SVD features from the training split plus seeded initial weights.
    pub fn new(
        cfg: &TrainConfig,
        ds: &InteractionDataset,
        kg: &KnowledgeGraph,
        svd_cache: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        let max_rank = ds.num_users().min(ds.num_items());
        if cfg.k_s > max_rank {
            return Err(Error::Config(format!(
                "k_s = {} exceeds min(users, items) = {max_rank}",
                cfg.k_s
            )));
        }
        let factors = svd::dataset_svd::<T>(ds, cfg.k_s, cfg.seed, svd_cache)?;
        let svd_features = svd::filtered_features(&factors, T::lit(cfg.beta))?;
        Self::from_features(cfg, ds, kg, svd_features)
    }

    /// Fresh model around precomputed `(M+N) x k_s` SVD features.
    pub fn from_features(
        cfg: &TrainConfig,
        ds: &InteractionDataset,
        kg: &KnowledgeGraph,
        svd_features: Matrix<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        if svd_features.shape() != (ds.num_users() + ds.num_items(), cfg.k_s) {
            return Err(Error::shape(
                "Model::from_features",
                format!("features are {:?}", svd_features.shape()),
            ));
        }
        let ctx = GraphContext::new(cfg, ds, kg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tucker = TuckerParams::init(
            ctx.entity_rows(),
            ctx.relation_rows(),
            cfg.d,
            cfg.d_c,
            cfg.dropout,
            &mut rng,
        )?;
        tucker.normalize = cfg.tucker_normalize;
        let svd = SvdInitParams::init(cfg.k_s, cfg.d_e, T::lit(cfg.beta), &mut rng);
        let gnn = GnnWeights::init(
            cfg.d_e,
            cfg.layers,
            T::lit(cfg.alpha_e),
            T::lit(cfg.w_s),
            cfg.activation,
            &mut rng,
        )?;
        let heads = ProjectionHeads::init(cfg.d, cfg.d_e, cfg.d_e, T::lit(cfg.tau), &mut rng)?;
        let fusion = FusionParams::init(cfg.d, cfg.d_e, &mut rng);
        let mut state = ModelState {
            tucker,
            svd,
            svd_features,
            gnn,
            heads,
            fusion,
            adam: AdamState {
                m: Vec::new(),
                v: Vec::new(),
                steps: Vec::new(),
            },
        };
        state.adam = AdamState::zeros_like(&state.params());
        Ok(Self {
            cfg: cfg.clone(),
            state,
            ctx,
        })
    }

    pub fn curvature(&self) -> Curvature<T> {
        Curvature::new(T::lit(self.cfg.curvature)).expect("validated curvature")
    }

    /// Final embeddings of every user and item in evaluation mode.
    pub fn embeddings(&self) -> Embeddings<T> {
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, self, false);
        let users: Vec<usize> = (0..self.ctx.num_users).collect();
        let items: Vec<usize> = (0..self.ctx.num_items).collect();
        let fw = forward(&mut tape, self, &vars, &users, &items);
        let cv = self.curvature();
        let item_final = tape.value(fw.item_final).clone();
        let item_h = fw.user_h.map(|_| {
            let mut m = item_final.clone();
            for r in 0..m.rows() {
                let s = manifold::exp_origin_spatial(item_final.row(r), cv);
                m.row_mut(r).copy_from_slice(&s);
            }
            m
        });
        let tucker_terms = self.ctx.interacts_relation.map(|rel| {
            let p = &self.state.tucker;
            let user_ids: Vec<usize> = (0..self.ctx.num_users)
                .map(|u| self.ctx.user_entity_offset + u)
                .collect();
            let h = tucker::project_eval(p, &user_ids, tucker::Site::Head);
            let r = tucker::project_eval(p, &[rel as usize], tucker::Site::Relation);
            let t = tucker::project_eval(p, &items, tucker::Site::Tail);
            let m = tucker::relation_slice(&p.core, r.row(0));
            (h.matmul_unchecked(&m), t)
        });
        Embeddings {
            user_e: tape.value(fw.user_e).clone(),
            user_h: fw.user_h.map(|v| tape.value(v).clone()),
            item_final,
            item_h,
            gate: tape.value(fw.gate).as_slice().to_vec(),
            tucker_terms,
            curvature: cv,
        }
    }
}

/// Parameter leaves for one tape, in [`ModelState::params`] order.
pub struct ModelVars {
    pub all: Vec<Var>,
    pub tucker: TuckerVars,
    pub f_s: Var,
    pub layers: Vec<LayerVars>,
    pub f_svd: Var,
    pub f_kg: Var,
    pub kg_agg: Var,
    pub fusion: FusionVars,
    pub features: Var,
}

impl ModelVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>, trainable: bool) -> Self {
        let all: Vec<Var> = model
            .state
            .params()
            .into_iter()
            .map(|(_, m)| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        let nl = model.state.gnn.layers.len();
        let layers = (0..nl)
            .map(|l| LayerVars {
                w_e: all[6 + 3 * l],
                w_self: all[7 + 3 * l],
                w_hyp: all[8 + 3 * l],
            })
            .collect();
        let h = 6 + 3 * nl;
        let features = tape.constant(model.state.svd_features.clone());
        Self {
            tucker: TuckerVars {
                entity: all[0],
                relation: all[1],
                w_e: all[2],
                w_r: all[3],
                core: all[4],
            },
            f_s: all[5],
            layers,
            f_svd: all[h],
            f_kg: all[h + 1],
            kg_agg: all[h + 2],
            fusion: FusionVars {
                gate_a: all[h + 3],
                gate_b: all[h + 4],
                wq: all[h + 5],
                wk: all[h + 6],
                wv: all[h + 7],
                w1: all[h + 8],
                b1: all[h + 9],
                w2: all[h + 10],
                b2: all[h + 11],
                kg_to_de: all[h + 12],
            },
            features,
            all,
        }
    }
}

/// Tape nodes produced by [`forward`] for a set of users and items.
pub struct Forward {
    /// All `(M+N)` Euclidean GNN outputs.
    pub node_e: Var,
    pub user_e: Var,
    pub user_h: Option<Var>,
    /// Euclidean GNN output rows of the requested items.
    pub item_l: Var,
    pub item_final: Var,
    pub gate: Var,
    pub kg_agg: Var,
}

/// Shared forward pass: SVD features, both GNN pathways, KG aggregation,
/// popularity gate, attention and fusion for the requested rows.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &ModelVars,
    users: &[usize],
    items: &[usize],
) -> Forward {
    let cfg = &model.cfg;
    let ctx = &model.ctx;
    let cv = model.curvature();
    let max_norm = T::lit(MAX_TANGENT_NORM);
    let h0 = tape.matmul(vars.features, vars.f_s);
    let (he, hh) = gnn::forward_on_tape(
        tape,
        &ctx.adj,
        h0,
        &vars.layers,
        &model.state.gnn,
        cv,
        max_norm,
        cfg.use_hyperbolic,
    );
    let user_e = tape.gather(he, users);
    let user_h = hh.map(|h| tape.gather(h, users));
    let item_rows: Vec<usize> = items.iter().map(|&i| ctx.num_users + i).collect();
    let item_l = tape.gather(he, &item_rows);
    let item_h0 = tape.gather(h0, &item_rows);

    let op = SparseOperand::new(ctx.kg_mean.select_rows(items));
    let kg_agg = kg_aggregate_on_tape(
        tape,
        op,
        vars.tucker.entity,
        vars.kg_agg,
        model.state.heads.kg_activation,
    );
    let pop = tape.constant(Matrix::from_fn(items.len(), 1, |r, _| ctx.popularity[items[r]]));
    let gate = fusion::gate_on_tape(tape, &vars.fusion, pop);
    let att = fusion::attention_on_tape(tape, &vars.fusion, item_h0, kg_agg);
    let item_final = fusion::fuse_on_tape(tape, &vars.fusion, item_l, att, gate);
    Forward {
        node_e: he,
        user_e,
        user_h,
        item_l,
        item_final,
        gate,
        kg_agg,
    }
}

/// Scores of `(user, item)` pairs given as row positions into a [`Forward`].
/// Returns the score node and any Tucker batch statistics observed.
pub fn pair_scores<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &ModelVars,
    fw: &Forward,
    pairs: &[(usize, usize)],
    raw_pairs: &[(u32, u32)],
    mode: Mode,
) -> (Var, Option<tucker::SiteStats<T>>) {
    let urows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let irows: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ue = tape.gather(fw.user_e, &urows);
    let ie = tape.gather(fw.item_final, &irows);
    let uh = fw.user_h.map(|h| tape.gather(h, &urows));
    let w = tape.gather(fw.gate, &irows);
    let s = fusion::score_on_tape(
        tape,
        ue,
        ie,
        uh,
        w,
        model.curvature(),
        T::lit(MAX_TANGENT_NORM),
    );
    if model.ctx.interacts_relation.is_none() {
        return (s, None);
    }
    let triples: Vec<Triple> = raw_pairs
        .iter()
        .map(|&(u, i)| model.ctx.interaction_triple(u, i).expect("relation present"))
        .collect();
    let (ts, stats) = tucker::score_on_tape(tape, &vars.tucker, &model.state.tucker, &triples, mode);
    (tape.add(s, ts), stats)
}

/// Evaluation-mode embeddings of a model, ready for full-catalog scoring.
#[derive(Clone, Debug)]
pub struct Embeddings<T> {
    pub user_e: Matrix<T>,
    /// Spatial coordinates of user points; `None` for the Euclidean-only variant.
    pub user_h: Option<Matrix<T>>,
    pub item_final: Matrix<T>,
    pub item_h: Option<Matrix<T>>,
    pub gate: Vec<T>,
    /// Per-user contracted Tucker vectors and projected item tails.
    pub tucker_terms: Option<(Matrix<T>, Matrix<T>)>,
    pub curvature: Curvature<T>,
}

impl<T: Scalar> Scorer for Embeddings<T> {
    fn num_users(&self) -> usize {
        self.user_e.rows()
    }

    fn num_items(&self) -> usize {
        self.item_final.rows()
    }

    fn score_user(&self, user: u32, out: &mut [f64]) {
        let u = user as usize;
        let ue = self.user_e.row(u);
        for (i, o) in out.iter_mut().enumerate() {
            let dot: T = ue.iter().zip(self.item_final.row(i)).map(|(&a, &b)| a * b).sum();
            let mut s = match (&self.user_h, &self.item_h) {
                (Some(uh), Some(ih)) => {
                    let w = self.gate[i];
                    let d = manifold::distance_spatial(uh.row(u), ih.row(i), self.curvature);
                    w * dot - (T::one() - w) * d
                }
                _ => dot,
            };
            if let Some((hu, ti)) = &self.tucker_terms {
                s += hu.row(u).iter().zip(ti.row(i)).map(|(&a, &b)| a * b).sum::<T>();
            }
            *o = s.to_f64_lossy();
        }
    }
}
