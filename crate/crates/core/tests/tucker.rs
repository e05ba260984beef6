use kgrec::data::{KnowledgeGraph, Triple};
use kgrec::training::kg_pretrain;
use kgrec::tucker::{contract_staged, sample_negative_triple, score_batch, tucker_score, Mode, TuckerParams};
use kgrec::{InteractionDataset, Matrix, Model, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_force(w: &Matrix<f64>, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let dc = h.len();
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

fn instance() -> impl Strategy<Value = (Matrix<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|dc| {
        (
            prop::collection::vec(-1.0f64..1.0, dc * dc * dc),
            prop::collection::vec(-2.0f64..2.0, dc),
            prop::collection::vec(-2.0f64..2.0, dc),
            prop::collection::vec(-2.0f64..2.0, dc),
        )
            .prop_map(move |(w, h, r, t)| (Matrix::from_vec(dc, dc * dc, w).unwrap(), h, r, t))
    })
}

proptest! {
    #[test]
    fn staged_contraction_matches_triple_loop((w, h, r, t) in instance()) {
        let a = contract_staged(&w, &h, &r, &t);
        let b = brute_force(&w, &h, &r, &t);
        prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
    }

    #[test]
    fn score_is_linear_in_unnormalized_tail(seed in 0u64..1000, lambda in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TuckerParams::<f64>::init(5, 2, 6, 4, 0.0, &mut rng).unwrap();
        p.normalize = false;
        let base = tucker_score(&p, 0, 1, 3, Mode::Eval).unwrap();
        for x in p.entity_emb.row_mut(3) {
            *x *= lambda;
        }
        let scaled = tucker_score(&p, 0, 1, 3, Mode::Eval).unwrap();
        prop_assert!((scaled - lambda * base).abs() <= 1e-12 * base.abs().max(1.0));
    }
}

#[test]
fn train_mode_batch_scores_are_batch_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = TuckerParams::<f64>::init(6, 2, 8, 4, 0.0, &mut rng).unwrap();
    let triples = [Triple::new(0, 0, 1), Triple::new(2, 1, 3), Triple::new(4, 0, 5)];
    let train = score_batch(&p, &triples, Mode::Train { seed: 1 }).unwrap();
    let eval = score_batch(&p, &triples, Mode::Eval).unwrap();
    assert_eq!(train.len(), 3);
    assert!(train.iter().zip(&eval).any(|(a, b)| (a - b).abs() > 1e-9));
}

/// Two clusters of ten entities; relation 0 links entities inside a cluster.
fn clustered_kg() -> (InteractionDataset, KnowledgeGraph) {
    let mut triples = Vec::new();
    for c in 0..2u32 {
        for a in 0..10u32 {
            for b in [1u32, 3] {
                triples.push(Triple::new(10 * c + a, 0, 10 * c + (a + b) % 10));
            }
        }
    }
    let pairs: Vec<(u32, u32)> = (0..8u32).flat_map(|u| [(u, u), (u, (u + 1) % 8)]).collect();
    let ds = InteractionDataset::new(8, 8, pairs).unwrap();
    let kg = KnowledgeGraph::new(8, 20, 1, triples).unwrap();
    (ds, kg)
}

#[test]
fn kg_pretraining_separates_observed_from_corrupted() {
    let (ds, kg) = clustered_kg();
    let mut cfg = TrainConfig::default();
    cfg.d = 16;
    cfg.d_e = 8;
    cfg.d_c = 8;
    cfg.k_s = 4;
    cfg.layers = 1;
    cfg.learning_rate = 1e-2;
    cfg.kg_batch_size = 40;
    cfg.dropout = 0.0;
    let mut model = Model::<f64>::new(&cfg, &ds, &kg, None).unwrap();
    let losses = kg_pretrain(&mut model, 50).unwrap();
    assert_eq!(losses.len(), 50);
    assert!(losses[49] < losses[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let observed = kg.triples().to_vec();
    let corrupted: Vec<Triple> = observed
        .iter()
        .map(|&t| sample_negative_triple(&kg, t, &mut rng))
        .collect();
    let mean = |ts: &[Triple]| {
        let s = score_batch(&model.state.tucker, ts, Mode::Eval).unwrap();
        s.iter().sum::<f64>() / s.len() as f64
    };
    assert!(mean(&observed) > mean(&corrupted));
}
