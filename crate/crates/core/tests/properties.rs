use divrisk::data::{self, UnlabeledView};
use divrisk::divergence::{self, Categorical, DivergenceSpec, MetricTransform};
use divrisk::model::{ClassifierModel, ModelConfig, OptimizerConfig, OptimizerState};
use divrisk::risk::{self, LabelAssignment, RegularizationWeights, Rows, WeightedBatch};
use divrisk::selftrain::{self, SelectionThresholds};
use divrisk::theory::METRIC_PAIRS;
use ndarray::Array2;
use proptest::prelude::*;
use std::f64::consts::LN_2;

const SPECS: [DivergenceSpec; 8] = [
    DivergenceSpec::Kl,
    DivergenceSpec::Tv,
    DivergenceSpec::ChiSquared,
    DivergenceSpec::Power { p: 1.2 },
    DivergenceSpec::JensenShannon,
    DivergenceSpec::LeCam,
    DivergenceSpec::Renyi { alpha: 0.6 },
    DivergenceSpec::Renyi { alpha: 2.0 },
];

fn normalize(raw: Vec<f64>) -> Categorical {
    let sum: f64 = raw.iter().sum();
    Categorical::new(raw.into_iter().map(|x| x / sum).collect()).unwrap()
}

/// Strictly positive distribution on `k` outcomes.
fn positive(k: usize) -> impl Strategy<Value = Categorical> {
    prop::collection::vec(1e-3..1.0f64, k).prop_map(normalize)
}

/// Distribution that may put zero mass on some outcomes.
fn sparse(k: usize) -> impl Strategy<Value = Categorical> {
    (prop::collection::vec(prop_oneof![Just(0.0), 1e-3..1.0f64], k), 0..k).prop_map(|(mut raw, keep)| {
        raw[keep] += 0.5;
        normalize(raw)
    })
}

fn pair() -> impl Strategy<Value = (Categorical, Categorical)> {
    (2..8usize).prop_flat_map(|k| (sparse(k), positive(k)))
}

fn div(spec: DivergenceSpec, p: &Categorical, q: &Categorical) -> f64 {
    divergence::divergence(spec, p, q).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn divergences_are_nonnegative_and_vanish_on_the_diagonal((p, q) in pair()) {
        for spec in SPECS {
            prop_assert!(div(spec, &p, &q) >= -1e-12, "{spec}");
            prop_assert!(div(spec, &q, &q).abs() <= 1e-12, "{spec}");
        }
    }

    #[test]
    fn hard_label_closed_forms_match_the_generic_path((q, y) in (2..10usize).prop_flat_map(|k| (positive(k), 0..k))) {
        let one_hot = Categorical::one_hot(q.k(), y).unwrap();
        for spec in SPECS {
            let closed = risk::hard_label_term(spec, q.probs()[y]);
            prop_assert!((closed - div(spec, &one_hot, &q)).abs() <= 1e-10, "{spec}");
        }
    }

    #[test]
    fn inequalities_between_divergences((p, q) in pair()) {
        let tol = 1e-12;
        let (kl, tv, chi2) = (div(DivergenceSpec::Kl, &p, &q), div(DivergenceSpec::Tv, &p, &q), div(DivergenceSpec::ChiSquared, &p, &q));
        let (js, lc) = (div(DivergenceSpec::JensenShannon, &p, &q), div(DivergenceSpec::LeCam, &p, &q));
        prop_assert!(tv <= 1.0 + tol && js <= 2.0 * LN_2 + tol && lc <= 1.0 + tol);
        prop_assert!(2.0 * tv * tv <= kl + tol);
        prop_assert!(kl <= chi2 + tol);
        prop_assert!(js <= 2.0 * LN_2 * lc + tol);
        let renyi: Vec<f64> = [0.3, 0.6, 0.9, 1.5, 2.0].iter().map(|&alpha| div(DivergenceSpec::Renyi { alpha }, &p, &q)).collect();
        prop_assert!(renyi.windows(2).all(|w| w[0] <= w[1] + 1e-10), "{renyi:?}");
    }

    #[test]
    fn metric_pairs_satisfy_the_triangle_inequality((a, b, c) in (2..8usize).prop_flat_map(|k| (sparse(k), sparse(k), sparse(k)))) {
        for (spec, g) in METRIC_PAIRS {
            let d = |x: &Categorical, y: &Categorical| g.apply(div(spec, x, y)).unwrap();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9, "{spec}");
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-9, "{spec}");
        }
    }

    #[test]
    fn joint_risk_decomposes_for_f_divergences(
        (labeled, pseudo) in (3..7usize).prop_flat_map(|k| (
            prop::collection::vec((positive(k), 0..k), 1..6),
            prop::collection::vec((positive(k), 0..k), 1..9),
        )),
        beta in 0.05..0.95f64,
    ) {
        let split = |rows: &[(Categorical, usize)]| -> (Vec<Categorical>, Vec<LabelAssignment>) {
            (rows.iter().map(|r| r.0.clone()).collect(), rows.iter().map(|r| LabelAssignment::Hard(r.1)).collect())
        };
        let (lp, lt) = split(&labeled);
        let (pp, pt) = split(&pseudo);
        let l = Rows::new(&lp, &lt).unwrap();
        let u = Rows::new(&pp, &pt).unwrap();
        for spec in SPECS {
            let joint = risk::der_ssl(spec, l, u, beta).unwrap();
            let sl = risk::der_sl(spec, &WeightedBatch::uniform(lp.clone(), lt.clone()).unwrap()).unwrap();
            let pl = risk::der_sl(spec, &WeightedBatch::uniform(pp.clone(), pt.clone()).unwrap()).unwrap();
            let mix = beta * sl + (1.0 - beta) * pl;
            if let DivergenceSpec::Renyi { alpha } = spec {
                // jointly convex for alpha <= 1, only quasi-convex above
                let bound = if alpha <= 1.0 { mix } else { sl.max(pl) };
                prop_assert!(joint <= bound + 1e-10, "{spec}: {joint} > {bound}");
            } else {
                prop_assert!((joint - mix).abs() <= 1e-10, "{spec}");
            }
        }
    }

    #[test]
    fn risks_vanish_when_predictions_equal_targets(rows in (2..6usize).prop_flat_map(|k| prop::collection::vec(sparse(k), 1..6))) {
        let targets: Vec<LabelAssignment> = rows.iter().cloned().map(LabelAssignment::Soft).collect();
        let batch = WeightedBatch::uniform(rows.clone(), targets).unwrap();
        for spec in SPECS {
            prop_assert!(risk::joint_divergence(spec, &batch).unwrap().abs() <= 1e-12, "{spec}");
        }
    }

    #[test]
    fn softmax_is_positive_and_normalized(logits in prop::collection::vec(-700.0..700.0f64, 2..12)) {
        let k = logits.len();
        let probs = risk::softmax_rows(Array2::from_shape_vec((1, k), logits).unwrap().view());
        prop_assert!(probs.iter().all(|&p| p > 0.0 || p == 0.0 && probs.iter().any(|&x| x > 0.5)));
        prop_assert!((probs.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cosine_schedule_ends_below_its_start(lr in 1e-4..1.0f64, steps in 1..500usize) {
        let state = OptimizerState::new(OptimizerConfig { learning_rate: lr, ..OptimizerConfig::default() }, steps);
        prop_assert_eq!(state.learning_rate_at(0), lr);
        prop_assert!(state.learning_rate_at(steps) <= lr);
        prop_assert_eq!(state.learning_rate_at(steps / 2), state.learning_rate_at(steps / 2));
    }

    #[test]
    fn splits_have_exact_sizes_and_are_deterministic(per_class in 3..12usize, labeled in 1..10usize, test in 0..10usize, seed in any::<u64>()) {
        let all = data::make_synthetic_mixture(3, 2, per_class, 0.5, 1).unwrap();
        prop_assume!(labeled + test <= all.len());
        let a = data::split(&all, labeled, test, seed, true).unwrap();
        prop_assert_eq!(a.count(data::SplitRole::Labeled), labeled);
        prop_assert_eq!(a.count(data::SplitRole::Test), test);
        prop_assert_eq!(a.count(data::SplitRole::Unlabeled), all.len() - labeled - test);
        let b = data::split(&all, labeled, test, seed, true).unwrap();
        prop_assert_eq!(a.labeled().labels, b.labeled().labels);
        let (ua, ub) = (a.unlabeled(), b.unlabeled());
        prop_assert_eq!(ua.features(), ub.features());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gate_is_sound_monotone_and_balance_equalizes(seed in 0..1000u64, low in 0.1..0.6f64, gap in 0.0..0.3f64, kappa in 0.0..0.2f64) {
        let model = ClassifierModel::new(3, 4, ModelConfig { hidden: 6, hidden_layers: 1, dropout: 0.3, ..ModelConfig::default() }, seed).unwrap();
        let mut rng = divrisk::random::rng(seed ^ 7);
        let x = Array2::from_shape_fn((60, 3), |_| 3.0 * (rand::Rng::random::<f64>(&mut rng) - 0.5));
        let pool = UnlabeledView::new(x);
        for use_uncertainty in [false, true] {
            let loose = SelectionThresholds::new(low, kappa, use_uncertainty).unwrap();
            let tight = SelectionThresholds::new(low + gap, kappa, use_uncertainty).unwrap();
            let a = selftrain::select_pseudo_labels(&model, &pool, &loose, 10, seed, 2).unwrap();
            let b = selftrain::select_pseudo_labels(&model, &pool, &tight, 10, seed, 2).unwrap();
            for e in a.entries() {
                prop_assert!(loose.passes(e.confidence, e.uncertainty));
            }
            for e in b.entries() {
                prop_assert!(a.get(e.index).is_some());
            }
            let balanced = selftrain::balance(&a, seed);
            let counts: Vec<usize> = balanced.class_counts(4).into_iter().filter(|&c| c > 0).collect();
            prop_assert!(counts.windows(2).all(|w| w[0] == w[1]));
        }
    }
}

#[test]
fn uniform_unlabeled_predictions_add_no_entropy_term() {
    let uniform = vec![Categorical::uniform(5).unwrap(); 4];
    let labeled = WeightedBatch::uniform(vec![normalize(vec![0.1, 0.2, 0.3, 0.2, 0.2])], vec![LabelAssignment::Hard(2)]).unwrap();
    for spec in SPECS {
        let plain = risk::regularized_risk(spec, &labeled, &uniform, RegularizationWeights::default()).unwrap();
        let with_entropy = risk::regularized_risk(spec, &labeled, &uniform, RegularizationWeights::new(0.4, 0.0).unwrap()).unwrap();
        assert!((with_entropy - plain).abs() <= 1e-15, "{spec}");
    }
}

#[test]
fn kl_is_not_a_metric_under_any_transform() {
    assert!(!MetricTransform::Identity.pairs_with(DivergenceSpec::Kl));
    assert!(!MetricTransform::Sqrt.pairs_with(DivergenceSpec::Kl));
}
