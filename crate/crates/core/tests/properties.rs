use consult_core::dispatch_policy::{
    evaluate_point, route, tune_thresholds, Branch, Grid, PolicyOptions, Thresholds, TuneRow,
};
use consult_core::eval_harness::{expected_experts, routing_recalls};
use std::collections::BTreeSet;

use consult_core::event_schema::{
    build_vocabulary, gold_token, Domain, DomainSet, EncodedEpisode, SequenceConfig, MAX_SEQ_LEN,
};
use consult_core::linalg::{randomized_svd, Csr, SparseVec, SvdOptions};
use consult_core::prefix_features::{expand_all, expand_prefixes, prefix_document, Featurizer};
use consult_core::router::{fit_head, platt_fit, split, HeadOptions, SplitSpec};
use consult_core::synth_cohort::{
    generate_cohort, stream_rng, CohortConfig, GrammarSet, MixtureSpec,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn probs() -> impl Strategy<Value = [f64; 5]> {
    prop::array::uniform5(0.0f64..=1.0)
}

fn domain_set() -> impl Strategy<Value = DomainSet> {
    (0u8..32).prop_map(DomainSet::from_bits)
}

fn thresholds() -> impl Strategy<Value = Thresholds> {
    (10u32..=95, 10u32..=95)
        .prop_map(|(a, b)| Thresholds::new(a.max(b) as f64 / 100.0, a.min(b) as f64 / 100.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn branch_matches_route_shape(p in probs(), thr in thresholds(), danger in any::<bool>()) {
        let d = route(&p, &thr, danger, &PolicyOptions::default()).unwrap();
        match d.branch {
            Branch::FailOpen => prop_assert_eq!(d.route, DomainSet::ALL),
            Branch::Top1Life => {
                prop_assert_eq!(d.route.len(), 1);
                prop_assert!(d.route.is_subset(DomainSet::LIFE));
                prop_assert!(p[0].max(p[1]) >= thr.tau_hi);
            }
            Branch::Top2 => prop_assert_eq!(d.route.len(), 2),
            Branch::Top2Guard => prop_assert!(false, "guard disabled"),
        }
        if danger {
            prop_assert_eq!(d.branch, Branch::FailOpen);
        }
    }

    #[test]
    fn guard_route_contains_life(p in probs(), thr in thresholds(), g in 0.05f64..0.9) {
        let opts = PolicyOptions { life_guard: Some(g), global_argmax: false };
        let d = route(&p, &thr, false, &opts).unwrap();
        if d.branch == Branch::Top2Guard {
            prop_assert!(DomainSet::LIFE.is_subset(d.route));
        }
        let plain = route(&p, &thr, false, &PolicyOptions::default()).unwrap();
        prop_assert!(plain.route.is_subset(d.route));
    }

    #[test]
    fn raising_tau_hi_never_shrinks_a_route(p in probs(), lo in 10u32..=50, a in 50u32..=95, b in 50u32..=95) {
        let (h1, h2) = (a.min(b) as f64 / 100.0, a.max(b) as f64 / 100.0);
        let lo = lo as f64 / 100.0;
        let r1 = route(&p, &Thresholds::new(h1, lo), false, &PolicyOptions::default()).unwrap();
        let r2 = route(&p, &Thresholds::new(h2, lo), false, &PolicyOptions::default()).unwrap();
        prop_assert!(r2.route.len() >= r1.route.len());
    }

    #[test]
    fn lowering_tau_lo_never_grows_a_route(p in probs(), hi in 50u32..=95, a in 10u32..=50, b in 10u32..=50) {
        let hi = hi as f64 / 100.0;
        let (l1, l2) = (a.min(b) as f64 / 100.0, a.max(b) as f64 / 100.0);
        let r1 = route(&p, &Thresholds::new(hi, l1), false, &PolicyOptions::default()).unwrap();
        let r2 = route(&p, &Thresholds::new(hi, l2), false, &PolicyOptions::default()).unwrap();
        prop_assert!(r1.route.len() <= r2.route.len());
    }

    #[test]
    fn recall_all_below_recall_any(pairs in prop::collection::vec((domain_set(), domain_set()), 1..60)) {
        let (routes, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        if let Ok(r) = routing_recalls(&routes, &truths) {
            prop_assert!(r.recall_all <= r.recall_any + 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.recall_any));
        }
    }

    #[test]
    fn adding_a_domain_never_lowers_recall(pairs in prop::collection::vec((domain_set(), domain_set()), 1..60), extra in 0usize..5) {
        let (routes, truths): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let d = Domain::from_index(extra).unwrap();
        let wider: Vec<DomainSet> = routes.iter().map(|r| r.with(d)).collect();
        if let (Ok(a), Ok(b)) = (routing_recalls(&routes, &truths), routing_recalls(&wider, &truths)) {
            prop_assert!(b.recall_any >= a.recall_any);
            prop_assert!(b.recall_all >= a.recall_all);
            if let (Some(x), Some(y)) = (a.life_recall, b.life_recall) {
                prop_assert!(y >= x);
            }
            prop_assert!(expected_experts(&wider).unwrap() >= expected_experts(&routes).unwrap());
        }
    }

    #[test]
    fn platt_preserves_or_reverses_order(scores in prop::collection::vec(-5.0f64..5.0, 20..80), seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let y: Vec<bool> = scores.iter().map(|s| rng.random::<f64>() < 1.0 / (1.0 + (-2.0 * s).exp())).collect();
        let cal = platt_fit(&scores, &y, 3);
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let out: Vec<f64> = sorted.iter().map(|&s| cal.apply(s)).collect();
        if cal.a >= 0.0 {
            prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        } else {
            prop_assert!(out.windows(2).all(|w| w[0] >= w[1]));
        }
        prop_assert!(out.iter().all(|p| *p > 0.0 && *p < 1.0));
    }
}

#[test]
fn tuner_output_is_feasible_and_minimal() {
    let mut rng = stream_rng(11, 0);
    let rows: Vec<TuneRow> = (0..400)
        .map(|_| {
            let labels = DomainSet::single(Domain::from_index(rng.random_range(0..5)).unwrap());
            let mut probs = [0.0; 5];
            for d in Domain::ALL {
                let base = if labels.contains(d) { 0.55 } else { 0.15 };
                probs[d.index()] = (base + 0.4 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
            }
            TuneRow {
                probs,
                labels,
                danger: rng.random::<f64>() < 0.02,
            }
        })
        .collect();
    let grid = Grid::default();
    let res = tune_thresholds(&rows, &grid, 0.9, 0.25, &PolicyOptions::default()).unwrap();
    assert_eq!(res.table.len(), grid.points.len());
    let feasible: Vec<_> = res.table.iter().filter(|p| p.life_recall >= 0.9).collect();
    if res.constraint_met {
        let best = feasible
            .iter()
            .map(|p| p.expected_experts)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(res.expected_experts, best);
    } else {
        assert!(feasible.is_empty());
    }
}

#[test]
fn svd_matches_dense_oracle() {
    let mut rng = stream_rng(21, 0);
    let a = DMatrix::from_fn(50, 30, |_, _| {
        if rng.random::<f64>() < 0.4 {
            rng.random::<f64>()
        } else {
            0.0
        }
    });
    let rows: Vec<SparseVec> = (0..50)
        .map(|i| {
            (0..30)
                .filter(|&j| a[(i, j)] != 0.0)
                .map(|j| (j as u32, a[(i, j)]))
                .collect()
        })
        .collect();
    let p = randomized_svd(
        &Csr::new(&rows, 30),
        10,
        SvdOptions {
            seed: 5,
            ..SvdOptions::default()
        },
    )
    .unwrap();
    let oracle = a.clone().svd(false, false).singular_values;
    let mut expect: Vec<f64> = oracle.iter().copied().collect();
    expect.sort_by(|x, y| y.total_cmp(x));
    for (got, want) in p.singular_values.iter().zip(&expect[..10]) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

fn cohort(total: usize, seed: u64) -> Vec<consult_core::event_schema::Episode> {
    let cfg = CohortConfig {
        counts: None,
        mixture: MixtureSpec::default(),
        total,
        seed,
        k: 5,
        multi_label_rate: 0.0,
    };
    generate_cohort(&cfg, &GrammarSet::default_grammars()).unwrap()
}

#[test]
fn split_prevalence_within_two_points() {
    let eps = cohort(5000, 3);
    let labels: Vec<DomainSet> = eps.iter().map(|e| e.labels).collect();
    let sp = split(
        &labels,
        &SplitSpec {
            seed: 9,
            ..SplitSpec::default()
        },
    )
    .unwrap();
    assert_eq!(sp.train.len() + sp.dev.len() + sp.test.len(), 5000);
    let prev = |idx: &[usize], d: Domain| {
        idx.iter().filter(|&&i| labels[i].contains(d)).count() as f64 / idx.len() as f64
    };
    let all: Vec<usize> = (0..labels.len()).collect();
    for d in Domain::ALL {
        let p = prev(&all, d);
        for part in [&sp.train, &sp.dev, &sp.test] {
            assert!(
                (prev(part, d) - p).abs() <= 0.02,
                "{d}: {} vs {p}",
                prev(part, d)
            );
        }
    }
    assert_eq!(
        sp,
        split(
            &labels,
            &SplitSpec {
                seed: 9,
                ..SplitSpec::default()
            }
        )
        .unwrap()
    );
}

#[test]
fn cohort_is_seed_deterministic() {
    assert_eq!(cohort(300, 1), cohort(300, 1));
    assert_ne!(cohort(300, 1), cohort(300, 2));
}

#[test]
fn weight_norm_grows_along_regularization_path() {
    let mut rng = stream_rng(5, 0);
    let x: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect())
        .collect();
    let y: Vec<bool> = x
        .iter()
        .map(|r| r[0] + 0.5 * r[1] + 0.3 * (rng.random::<f64>() - 0.5) > 0.0)
        .collect();
    let w = vec![1.0; x.len()];
    let mut last = 0.0;
    for c in [0.1, 1.0, 2.0, 10.0] {
        let h = fit_head(
            Domain::Cardiac,
            &x,
            &y,
            &w,
            HeadOptions {
                c,
                ..HeadOptions::default()
            },
        )
        .unwrap();
        assert!(h.converged);
        let n: f64 = h.weights.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n > last, "C={c}: {n} <= {last}");
        last = n;
    }
}

fn tune_rows(seed: u64, n: usize) -> Vec<TuneRow> {
    let mut rng = stream_rng(seed, 0);
    (0..n)
        .map(|_| {
            let labels = DomainSet::from_bits(rng.random_range(1u8..32));
            let mut probs = [0.0; 5];
            for d in Domain::ALL {
                let base = if labels.contains(d) { 0.6 } else { 0.2 };
                probs[d.index()] = (base + 0.6 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
            }
            TuneRow {
                probs,
                labels,
                danger: rng.random::<f64>() < 0.03,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lowering_tau_hi_keeps_life_recall(seed in any::<u64>(), lo in 2u32..=10, a in 10u32..=19, b in 10u32..=19) {
        let rows = tune_rows(seed, 120);
        let lo = lo as f64 * 0.05;
        let (h_low, h_high) = (a.min(b) as f64 * 0.05, a.max(b) as f64 * 0.05);
        let opts = PolicyOptions::default();
        let at = |h: f64| evaluate_point(&rows, &Thresholds::new(h, lo), &opts).unwrap();
        prop_assert!(at(h_low).life_recall >= at(h_high).life_recall);
    }

    #[test]
    fn raising_tau_lo_keeps_or_adds_experts(seed in any::<u64>(), hi in 10u32..=19, a in 2u32..=10, b in 2u32..=10) {
        let rows = tune_rows(seed, 120);
        let hi = hi as f64 * 0.05;
        let (l_low, l_high) = (a.min(b) as f64 * 0.05, a.max(b) as f64 * 0.05);
        let opts = PolicyOptions::default();
        let at = |l: f64| evaluate_point(&rows, &Thresholds::new(hi, l), &opts).unwrap();
        prop_assert!(at(l_high).expected_experts >= at(l_low).expected_experts);
    }

    #[test]
    fn sequences_never_contain_gold(seed in any::<u64>()) {
        let eps = cohort(30, seed);
        let sc = SequenceConfig::default();
        let vocab = build_vocabulary(&eps, 1, &BTreeSet::new(), &sc).unwrap();
        for e in &eps {
            let enc = EncodedEpisode::encode(e, &vocab, &sc).unwrap();
            let gold = gold_token(&e.gold);
            prop_assert!(enc.tokens.iter().all(|&t| vocab.decode(t) != Some(gold.as_str())));
            prop_assert!(enc.tokens.len() <= MAX_SEQ_LEN);
        }
    }

    #[test]
    fn features_ignore_tokens_past_the_prefix(seed in any::<u64>(), ell in 1usize..=5) {
        let eps = cohort(40, 17);
        let sc = SequenceConfig::default();
        let vocab = build_vocabulary(&eps, 1, &BTreeSet::new(), &sc).unwrap();
        let enc: Vec<EncodedEpisode> = eps.iter().map(|e| EncodedEpisode::encode(e, &vocab, &sc).unwrap()).collect();
        let rows = expand_all(&enc, 5);
        let docs: Vec<String> = rows.iter().map(|r| prefix_document(&r.tokens, &vocab)).collect();
        let fz = Featurizer::fit(&docs, 8, false, 1).unwrap();
        let mut rng = stream_rng(seed, 0);
        let original = &enc[rng.random_range(0..enc.len())];
        let mut mutated = original.clone();
        // tokens[0] is BOS, content follows
        let n = mutated.tokens.len();
        for t in &mut mutated.tokens[1 + ell..n - 1] {
            *t = rng.random_range(4..vocab.len() as u32);
        }
        let a = &expand_prefixes(original, 5)[ell - 1];
        let b = &expand_prefixes(&mutated, 5)[ell - 1];
        prop_assert_eq!(&a.tokens, &b.tokens);
        prop_assert_eq!(fz.featurize_row(a, &vocab), fz.featurize_row(b, &vocab));
    }
}
