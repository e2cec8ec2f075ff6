//! Invariants of the ops, blocks, losses and metrics under random inputs.

use proptest::prelude::*;
use seanet::losses::{center_loss, hybrid_loss, weighted_ce, ClassCenters, ClassWeights, HybridLossConfig};
use seanet::metrics::{aca, multiclass_auc, roc_auc, ConfusionMatrix};
use seanet::nn::{attention_forward, build_model, se_forward, AttentionNodes, ModelConfig, Placement, SeNodes};
use seanet::{Graph, Tensor};

fn tensor(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(dims.to_vec(), data).unwrap()
}

/// Brute-force rank statistic: P(pos > neg) + ½ P(pos = neg).
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn nhwc() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..6).prop_flat_map(|(n, h, w, c)| {
        (
            Just(vec![n, h, w, c]),
            prop::collection::vec(-5.0f64..5.0, n * h * w * c),
        )
    })
}

/// Labelled scores with both classes present; scores drawn from a small
/// grid so ties are common.
fn binary_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..20).prop_map(|v| v as f64 / 4.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("needs both classes", |(_, p)| {
                p.iter().any(|&b| b) && p.iter().any(|&b| !b)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution((dims, data) in nhwc(), spread in 0.1f64..200.0) {
        let mut g = Graph::new();
        let x = g.input(tensor(&dims, data.iter().map(|v| v * spread).collect()));
        let s = g.softmax(x, 3).unwrap();
        let c = dims[3];
        for row in g.value(s).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv1x1_is_a_matmul_over_pixels((dims, data) in nhwc(), co in 1usize..5, seed in any::<u64>()) {
        let ci = dims[3];
        let w: Vec<f64> = (0..ci * co).map(|i| ((seed.wrapping_add(i as u64) % 17) as f64 - 8.0) / 8.0).collect();
        let b: Vec<f64> = (0..co).map(|i| i as f64 * 0.25 - 0.5).collect();
        let mut g = Graph::new();
        let xn = g.input(tensor(&dims, data.clone()));
        let wn = g.input(tensor(&[ci, co], w.clone()));
        let bn = g.input(tensor(&[co], b.clone()));
        let y = g.conv1x1(xn, wn, bn).unwrap();
        let pixels = data.len() / ci;
        for p in 0..pixels {
            for o in 0..co {
                let want: f64 = b[o] + (0..ci).map(|i| data[p * ci + i] * w[i * co + o]).sum::<f64>();
                prop_assert!((g.value(y).data()[p * co + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gap_is_linear((dims, data) in nhwc(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let other: Vec<f64> = data.iter().rev().copied().collect();
        let gap = |v: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input(tensor(&dims, v));
            let p = g.global_avg_pool(x).unwrap();
            g.value(p).data().to_vec()
        };
        let mixed = gap(data.iter().zip(&other).map(|(x, y)| a * x + b * y).collect());
        let (gx, gy) = (gap(data.clone()), gap(other));
        for k in 0..mixed.len() {
            prop_assert!((mixed[k] - (a * gx[k] + b * gy[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn se_gates_lie_strictly_between_zero_and_one(
        (dims, data) in nhwc(),
        w in prop::collection::vec(-0.5f64..0.5, 64),
    ) {
        // reduction 1 so any channel count works; weights keep |ẑ| below the
        // ~37 where an f64 sigmoid rounds to exactly 1
        let c = dims[3];
        let positive: Vec<f64> = data.iter().map(|v| v.abs() + 0.1).collect();
        let mut g = Graph::new();
        let x = g.input(tensor(&dims, positive.clone()));
        let w1 = g.input(tensor(&[c, c], w[..c * c].to_vec()));
        let w2 = g.input(tensor(&[c, c], w[w.len() - c * c..].to_vec()));
        let y = se_forward(&mut g, x, SeNodes { w1, w2 }).unwrap();
        for (&out, &inp) in g.value(y).data().iter().zip(&positive) {
            let gate = out / inp;
            prop_assert!(gate > 0.0 && gate < 1.0, "gate {gate}");
        }
    }

    #[test]
    fn refined_map_equal_to_input_gives_uniform_attention(
        (dims, data) in nhwc(),
    ) {
        // identity 1×1 conv on a positive map: A = U, so GAP(A)/GAP(U) = 1
        // up to the ε guard, which shifts each ratio by about ε/GAP(U);
        // channel means of order one keep that shift below 1e-9
        let c = dims[3];
        let u: Vec<f64> = data.iter().map(|v| 2.0 + v.abs() * 0.4).collect();
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let mut g = Graph::new();
        let un = g.input(tensor(&dims, u));
        let w = g.input(tensor(&[c, c], eye));
        let b = g.input(tensor(&[c], vec![0.0; c]));
        let out = attention_forward(&mut g, un, &AttentionNodes { convs: vec![(w, b)] }, Placement::At, &[]).unwrap();
        for &s in g.value(out.distribution).data() {
            prop_assert!((s - 1.0 / c as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn placements_carry_the_expected_number_of_se_blocks(convs in 1usize..4, placement in prop::sample::select(Placement::ALL.to_vec())) {
        let cfg = ModelConfig {
            stage_channels: vec![4],
            stage_strides: vec![2],
            attention_channels: vec![4; convs],
            placement,
            ..ModelConfig::default()
        };
        let model = build_model::<f64>(&cfg, 0).unwrap();
        let expected = match placement {
            Placement::At => 0,
            Placement::SeAt | Placement::AtSe => 1,
            Placement::Sea => convs,
        };
        prop_assert_eq!(model.se_blocks().len(), expected);
        prop_assert_eq!(placement.se_count(convs), expected);
    }

    #[test]
    fn weighted_ce_ignores_a_per_row_shift(
        logits in prop::collection::vec(-10.0f64..10.0, 12),
        shifts in prop::collection::vec(-50.0f64..50.0, 4),
        labels in prop::collection::vec(0usize..3, 4),
        counts in prop::collection::vec(1usize..40, 3),
    ) {
        let w = ClassWeights::from_counts(&counts).unwrap();
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + shifts[i / 3]).collect();
        let loss = |v: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input(tensor(&[4, 3], v));
            let l = weighted_ce(&mut g, x, &labels, &w).unwrap();
            g.value(l).item().unwrap()
        };
        let (a, b) = (loss(logits), loss(shifted));
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn center_loss_is_nonnegative_and_hybrid_grows_with_lambda(
        feats in prop::collection::vec(-4.0f64..4.0, 12),
        centers in prop::collection::vec(-4.0f64..4.0, 9),
        labels in prop::collection::vec(0usize..3, 4),
        lambdas in (0.0f64..1.0, 0.0f64..1.0),
    ) {
        let c = ClassCenters { centers: tensor(&[3, 3], centers), alpha: 0.5 };
        let total = |lambda: f64| {
            let mut g = Graph::new();
            let f = g.input(tensor(&[4, 3], feats.clone()));
            let logits = g.input(tensor(&[4, 3], vec![0.0; 12]));
            let cfg = HybridLossConfig::new(lambda, ClassWeights::uniform(3)).unwrap();
            let h = hybrid_loss(&mut g, logits, f, &labels, &cfg, &c).unwrap();
            (g.value(h.total).item().unwrap(), g.value(h.center).item().unwrap())
        };
        let mut g = Graph::new();
        let f = g.input(tensor(&[4, 3], feats.clone()));
        let ct = center_loss(&mut g, f, &labels, &c).unwrap();
        prop_assert!(g.value(ct).item().unwrap() >= 0.0);

        let (lo, hi) = if lambdas.0 <= lambdas.1 { lambdas } else { (lambdas.1, lambdas.0) };
        prop_assert!(total(lo).0 <= total(hi).0);
    }

    #[test]
    fn auc_equals_the_pairwise_rank_statistic((scores, positive) in binary_scores()) {
        let (_, auc) = roc_auc(&scores, &positive).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &positive)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms((scores, positive) in binary_scores(), scale in 0.01f64..100.0, offset in -5.0f64..5.0) {
        let (_, a) = roc_auc(&scores, &positive).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (scale * s + offset).exp()).collect();
        let (_, b) = roc_auc(&mapped, &positive).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn macro_auc_is_invariant_under_class_relabelling(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 8..40),
        labels_seed in prop::collection::vec(0usize..4, 40),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let n = raw.len();
        let mut labels: Vec<usize> = labels_seed[..n].to_vec();
        labels[..4].copy_from_slice(&[0, 1, 2, 3]);
        let probs: Vec<f64> = raw.iter().flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        }).collect();
        // class k becomes perm[k]: move its column and relabel its samples
        let mut moved = vec![0.0; probs.len()];
        for i in 0..n {
            for k in 0..4 {
                moved[i * 4 + perm[k]] = probs[i * 4 + k];
            }
        }
        let relabelled: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let a = multiclass_auc(&probs, 4, &labels).unwrap().auc;
        let b = multiclass_auc(&moved, 4, &relabelled).unwrap().auc;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn aca_equals_accuracy_on_balanced_sets(
        per_class in 1usize..20,
        predictions in prop::collection::vec(0usize..4, 80),
    ) {
        let truth: Vec<usize> = (0..4 * per_class).map(|i| i % 4).collect();
        let predicted = &predictions[..truth.len()];
        let cm = ConfusionMatrix::from_predictions(&truth, predicted, 4).unwrap();
        let accuracy = truth.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        prop_assert!((aca(&cm).unwrap() - accuracy).abs() < 1e-12);
    }
}
