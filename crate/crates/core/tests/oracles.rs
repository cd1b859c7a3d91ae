mod common;

use rand::Rng;
use segfl::aggregation::{mean_params, weighted_aggregate, AggregationWeights, LocalContribution};
use segfl::dataset::Matrix;
use segfl::flow_data::{parse_flow_csv, partition_workers, ColumnMap};
use segfl::metrics::{auroc_ovr, binary_auc, confusion, prf1, ConfusionMatrix};
use segfl::nnet::{
    argmax, forward, init_params, loss_and_grad, predict, train_local, LayerSpec, ModelParams, TrainConfig,
};
use segfl::resample::{nearmiss3_undersample, ResampleConfig};
use segfl::segmentation::{eval_score, score_means, sigmoid, threshold, EvalWindow, SegmentationConfig};
use segfl::synthgen::{generate, EnvironmentProfile};
use segfl::{LabeledDataset, NUM_CLASSES};

#[test]
fn byte_suffixes_match_hand_expansion() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/byte_suffixes.csv");
    let parsed = parse_flow_csv(path, &ColumnMap::default()).unwrap();
    assert!(parsed.rejects.is_empty());
    let bytes: Vec<u64> = parsed.records.iter().map(|r| r.bytes).collect();
    assert_eq!(bytes, vec![108, 2_100_000, 15_000, 1_500_000_000, 2_250]);
}

#[test]
fn shards_reassemble_the_input_multiset() {
    let mut r = common::rng(3);
    let rows: Vec<[f64; 2]> = (0..1000).map(|_| [r.random_range(0..20) as f64, r.random_range(0..5) as f64]).collect();
    let labels: Vec<usize> = (0..1000).map(|i| i % 3).collect();
    let data = LabeledDataset::from_rows(2, &rows, labels).unwrap();
    let shards = partition_workers(&data, &[0.5, 0.3, 0.15, 0.05], 9).unwrap();
    let key = |d: &LabeledDataset, i: usize| (d.row(i)[0] as u64, d.row(i)[1] as u64, d.label(i));
    let mut want: Vec<_> = (0..data.len()).map(|i| key(&data, i)).collect();
    let mut got: Vec<_> = shards.iter().flat_map(|s| (0..s.len()).map(move |i| key(s, i))).collect();
    want.sort_unstable();
    got.sort_unstable();
    assert_eq!(got, want);
    assert_eq!(shards.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![500, 300, 150, 50]);
}

#[test]
fn nearmiss_toy_set_matches_exhaustive_oracle() {
    let mut r = common::rng(21);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..20 {
        rows.push([r.random::<f64>(), r.random::<f64>()]);
        labels.push(0);
    }
    for _ in 0..10 {
        rows.push([r.random::<f64>() + 0.3, r.random::<f64>()]);
        labels.push(1);
    }
    let data = LabeledDataset::from_rows(2, &rows, labels).unwrap();
    let cfg = ResampleConfig { neighbors_k: 3, target_ratio: vec![2.0, 1.0] };
    let out = nearmiss3_undersample(&data, &cfg).unwrap();
    assert_eq!(out.kept, common::nearmiss3_oracle(&data, 3, &cfg.target_ratio));
    assert_eq!(out.dataset.class_counts(2), vec![20, 10]);
}

#[test]
fn nearmiss_toy_set_shrinks_majority_to_target() {
    let mut r = common::rng(22);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..30 {
        rows.push([r.random::<f64>(), r.random::<f64>()]);
        labels.push(usize::from(i >= 24));
    }
    let data = LabeledDataset::from_rows(2, &rows, labels).unwrap();
    let cfg = ResampleConfig { neighbors_k: 3, target_ratio: vec![2.0, 1.0] };
    let out = nearmiss3_undersample(&data, &cfg).unwrap();
    assert_eq!(out.kept, common::nearmiss3_oracle(&data, 3, &cfg.target_ratio));
    assert_eq!(out.dataset.class_counts(2)[1], 6);
    assert!(out.dataset.class_counts(2)[0] <= 12);
}

#[test]
fn initial_weights_centre_on_zero() {
    let spec = LayerSpec::new(100, vec![], 100).unwrap();
    let p = init_params(&spec, 5);
    let (w, b) = p.layer_slices()[0];
    assert_eq!(w.len(), 10_000);
    let bound = (6.0f64 / 200.0).sqrt();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let se = bound / (3.0 * w.len() as f64).sqrt();
    assert!(mean.abs() < 3.0 * se, "{mean} vs {se}");
    assert!(w.iter().all(|v| v.abs() <= bound));
    assert!(b.iter().all(|&v| v == 0.0));
}

#[test]
fn single_hidden_unit_forward_by_hand() {
    let spec = LayerSpec::new(2, vec![1], 3).unwrap();
    // Hidden: w = [0.5, -0.25], b = 0.1. Output: v = [1, 2, -1], c = [0, 0.1, 0.2].
    let p = ModelParams::from_flat(&spec, vec![0.5, -0.25, 0.1, 1.0, 2.0, -1.0, 0.0, 0.1, 0.2]).unwrap();
    let x = Matrix::from_rows(2, &[[1.0, 2.0], [4.0, 0.0]]).unwrap();
    let probs = forward(&p, &x).unwrap();
    // Row 1: h = relu(0.5 - 0.5 + 0.1) = 0.1, logits [0.1, 0.3, 0.1].
    // Row 2: h = relu(2.0 + 0.1) = 2.1, logits [2.1, 4.3, -1.9].
    for (row, logits) in [[0.1, 0.3, 0.1], [2.1, 4.3, -1.9]].iter().enumerate() {
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        for c in 0..3 {
            assert!((probs.get(row, c) - logits[c].exp() / z).abs() < 1e-15);
        }
    }
    let neg = Matrix::from_rows(2, &[[-4.0, 0.0]]).unwrap();
    let probs = forward(&p, &neg).unwrap();
    let logits = [0.0f64, 0.1, 0.2];
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    assert!((probs.get(0, 2) - 0.2f64.exp() / z).abs() < 1e-15);
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for draw in 0..20u64 {
        let mut r = common::rng(100 + draw);
        let hidden: Vec<usize> = (0..r.random_range(1..3)).map(|_| r.random_range(2..7)).collect();
        let spec = LayerSpec::new(4, hidden, 3).unwrap();
        let base = init_params(&spec, draw);
        let flat: Vec<f64> = base.as_slice().iter().map(|w| w + r.random_range(-0.1..0.1)).collect();
        let p = ModelParams::from_flat(&spec, flat).unwrap();
        let n = r.random_range(3..16);
        let batch = common::smooth_batch(&mut r, &p, n, 3, 1e-4);
        let (_, g) = loss_and_grad(&p, &batch).unwrap();
        let numeric = common::numeric_gradient(&p, &batch, 1e-5);
        worst = worst.max(max_relative_error(&g, &numeric));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn separable_toy_set_is_learned() {
    let mut r = common::rng(8);
    let rows: Vec<[f64; 2]> = (0..300).map(|_| [r.random::<f64>(), r.random::<f64>()]).collect();
    let labels: Vec<usize> = rows.iter().map(|x| usize::from(x[0] + x[1] > 1.0)).collect();
    let data = LabeledDataset::from_rows(2, &rows, labels).unwrap();
    let spec = LayerSpec::new(2, vec![8], 2).unwrap();
    let cfg = TrainConfig { epochs: 50, batch_size: 16, learning_rate: 0.5, seed: 1 };
    let trained = train_local(&init_params(&spec, 2), &data, &cfg).unwrap();
    let pred = predict(&trained, data.features()).unwrap();
    let acc = confusion(data.labels(), &pred, 2).unwrap().accuracy();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn predict_is_argmax_of_forward() {
    let spec = LayerSpec::new(5, vec![6, 4], 3).unwrap();
    let p = init_params(&spec, 77);
    let mut r = common::rng(77);
    let x = common::random_dataset(&mut r, 100, 5, 3);
    let probs = forward(&p, x.features()).unwrap();
    let expect: Vec<usize> = probs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    assert_eq!(predict(&p, x.features()).unwrap(), expect);
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
}

#[test]
fn mean_of_random_vectors_per_coordinate() {
    let spec = LayerSpec::new(9, vec![], 1).unwrap();
    let mut r = common::rng(4);
    let vs: Vec<ModelParams> = (0..7)
        .map(|_| ModelParams::from_flat(&spec, (0..10).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap())
        .collect();
    let refs: Vec<&ModelParams> = vs.iter().collect();
    let out = mean_params(&refs).unwrap();
    for j in 0..10 {
        let mut acc = 0.0;
        for v in &vs {
            acc += v.as_slice()[j];
        }
        assert!((out.as_slice()[j] - acc / 7.0).abs() < 1e-12);
    }
}

#[test]
fn weighted_pair_by_hand() {
    let spec = LayerSpec::new(1, vec![], 1).unwrap();
    let p = |v: f64| ModelParams::from_flat(&spec, vec![v, v]).unwrap();
    let (prev, a, b) = (p(100.0), p(2.0), p(5.0));
    let w = AggregationWeights::new(0.0, 1.0, 0.0).unwrap();
    let out = weighted_aggregate(&prev, &[LocalContribution::new(&a, 1), LocalContribution::new(&b, 3)], &[], &w).unwrap();
    let oracle = common::aggregate_oracle(prev.as_slice(), &[(vec![2.0; 2], 1), (vec![5.0; 2], 3)], &[], 0.0, 1.0, 0.0);
    assert_eq!(out.as_slice(), &[4.25, 4.25]);
    assert_eq!(out.as_slice(), oracle.as_slice());
}

#[test]
fn two_worker_scores_by_hand() {
    let s = score_means(&[0.9, 0.7]).unwrap();
    let oracle = common::score_oracle(&[0.9, 0.7]);
    assert!((s[0].deviation - 0.1).abs() < 1e-12 && (s[1].deviation + 0.1).abs() < 1e-12);
    assert!((s[0].score - 0.524_979_187_478_939_7).abs() < 1e-12);
    assert!((s[1].score - 0.475_020_812_521_060_3).abs() < 1e-12);
    for (w, (d, c)) in s.iter().zip(oracle) {
        assert!((w.deviation - d).abs() < 1e-12 && (w.score - c).abs() < 1e-12);
    }
    let mut a = EvalWindow::new(3);
    let mut b = EvalWindow::new(3);
    for v in [0.8, 1.0, 0.9] {
        a.push(v).unwrap();
    }
    for v in [0.6, 0.8] {
        b.push(v).unwrap();
    }
    let w = eval_score(&[&a, &b]).unwrap();
    assert!((w[0].score - sigmoid(0.1)).abs() < 1e-12);
    assert!((threshold(&SegmentationConfig { fineness: 0, ..Default::default() }) - 0.5).abs() < 1e-15);
}

#[test]
fn random_confusion_matches_tally() {
    let mut r = common::rng(20);
    let truth: Vec<usize> = (0..20).map(|_| r.random_range(0..3)).collect();
    let pred: Vec<usize> = (0..20).map(|_| r.random_range(0..3)).collect();
    let cm = confusion(&truth, &pred, 3).unwrap();
    for t in 0..3 {
        for p in 0..3 {
            let tally = truth.iter().zip(&pred).filter(|&(&a, &b)| a == t && b == p).count() as u64;
            assert_eq!(cm.count(t, p), tally);
        }
    }
    let report = prf1(&cm);
    for (got, want) in report.per_class.iter().zip(common::prf_oracle(&truth, &pred, 3)) {
        assert!((got.precision - want.precision).abs() < 1e-12);
        assert!((got.recall - want.recall).abs() < 1e-12);
        assert!((got.f1 - want.f1).abs() < 1e-12);
    }
}

#[test]
fn two_class_reduction_by_hand() {
    let report = prf1(&ConfusionMatrix::from_counts(vec![vec![5, 5], vec![0, 10]]));
    let c0 = report.per_class[0];
    assert!((c0.recall - 0.5).abs() < 1e-15);
    assert!((c0.precision - 1.0).abs() < 1e-15);
    assert!((c0.f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn twelve_sample_auc_fixture() {
    let scores = [0.9, 0.8, 0.8, 0.7, 0.6, 0.55, 0.55, 0.5, 0.4, 0.3, 0.2, 0.1];
    let positive = [true, true, false, true, false, true, false, false, true, false, false, false];
    let fast = binary_auc(&scores, &positive).unwrap();
    let slow = common::pairwise_auc(&scores, &positive).unwrap();
    assert!((fast - slow).abs() < 1e-12);
    // 5 positives, 7 negatives: 7 + 6.5 + 6 + 4.5 + 3 = 27 of 35 pairs.
    assert!((slow - 27.0 / 35.0).abs() < 1e-12);
}

#[test]
fn auc_degenerate_cases() {
    let perfect = binary_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
    assert_eq!(perfect, 1.0);
    let uniform = Matrix::from_vec(3, vec![1.0 / 3.0; 12]).unwrap();
    let per = auroc_ovr(&[0, 1, 2, 0], &uniform).unwrap();
    assert!(per.iter().all(|a| *a == Some(0.5)));
    assert!(binary_auc(&[0.1, 0.2], &[true, true]).is_none());
}

#[test]
fn class_mix_is_honoured() {
    let profile = EnvironmentProfile::with_mix("P", 0.0, [0.5, 0.3, 0.2]).unwrap();
    let d = generate(&profile, 10_000, 6).unwrap();
    let counts = d.class_counts(NUM_CLASSES);
    for (c, want) in counts.iter().zip([0.5, 0.3, 0.2]) {
        assert!((*c as f64 / 10_000.0 - want).abs() <= 0.01);
    }
}
