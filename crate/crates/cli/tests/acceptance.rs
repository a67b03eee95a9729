//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use consult_cli::artifacts::{features_file, rows_file, Workdir, MANIFEST};
use consult_cli::commands::{cmd_pipeline, Ctx, EvalReport, SpecialistSummary};
use consult_cli::config::PipelineConfig;
use consult_cli::error::CliError;
use consult_core::dispatch_policy::{
    route, tune_thresholds, Branch, Grid, PolicyOptions, Thresholds, TuneResult, TuneRow,
};
use consult_core::eval_harness::{
    brier, compute_savings, latency, ndcg_at_k, roc_auc, routing_recalls, LatencyModel,
};
use consult_core::event_schema::{
    build_vocabulary, Domain, DomainSet, EncodedEpisode, SequenceConfig,
};
use consult_core::prefix_features::{expand_all, FeatureMatrix, PrefixRow};
use consult_core::router::{sigmoid, temperature_fit, RouterModel, ScoringHead};
use consult_core::specialist::{perplexity, SpecialistConfig, SpecialistModel};
use consult_core::synth_cohort::{
    generate_cohort, stream_rng, CohortConfig, GrammarSet, MixtureSpec,
};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn scratch() -> PathBuf {
    tempfile::tempdir().expect("tempdir").keep()
}

fn run_pipeline(cfg: PipelineConfig, specialists: bool) -> Result<PathBuf, String> {
    let root = cfg.workdir.clone();
    let ctx = Ctx::new(cfg).map_err(|e| e.to_string())?;
    match cmd_pipeline(&ctx, specialists) {
        Ok(()) | Err(CliError::ConstraintUnmet { .. }) => Ok(root),
        Err(e) => Err(e.to_string()),
    }
}

fn read<T: serde::de::DeserializeOwned>(wd: &Path, rel: &str) -> Result<T, String> {
    let bytes = std::fs::read(wd.join(rel)).map_err(|e| format!("{rel}: {e}"))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{rel}: {e}"))
}

/// Default configuration, full pipeline with specialists. Shared by 5, 8, 10.
fn reference_run() -> &'static Result<PathBuf, String> {
    static RUN: OnceLock<Result<PathBuf, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        run_pipeline(
            PipelineConfig {
                workdir: scratch().join("ref"),
                ..PipelineConfig::default()
            },
            true,
        )
    })
}

// ---------------------------------------------------------------------------

fn c1_fixtures() -> Check {
    let pairs = [
        (0.7917, 2.21),
        (0.7041, 2.02),
        (0.7004, 2.01),
        (1.2692, 3.56),
        (0.6289, 1.88),
    ];
    for (l, p) in pairs {
        let got = (perplexity(l) * 100.0).round() / 100.0;
        if (got - p).abs() > 1e-9 {
            return Err(format!("exp({l}) rounds to {got}, expected {p}"));
        }
    }
    let s = compute_savings(1.565);
    ensure(
        (s - 0.687).abs() <= 0.005,
        format!("5 perplexity pairs to 2 dp; savings(1.565) = {s:.4}"),
    )
}

fn c2_prefix_rows() -> Check {
    let cfg = CohortConfig {
        counts: None,
        mixture: MixtureSpec::default(),
        total: 13_801,
        seed: 2,
        k: 5,
        multi_label_rate: 0.0,
    };
    let eps = generate_cohort(&cfg, &GrammarSet::default_grammars()).map_err(|e| e.to_string())?;
    let sc = SequenceConfig::default();
    let vocab = build_vocabulary(&eps, 1, &BTreeSet::new(), &sc).map_err(|e| e.to_string())?;
    let enc: Vec<EncodedEpisode> = eps
        .iter()
        .map(|e| EncodedEpisode::encode(e, &vocab, &sc))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let short = enc.iter().filter(|e| e.content().len() < 5).count();
    let rows = expand_all(&enc, 5).len();
    ensure(
        eps.len() == 13_801 && short == 0 && rows == 69_005,
        format!(
            "{} episodes, {short} shorter than 5, {rows} rows",
            eps.len()
        ),
    )
}

/// Routing rule written out case by case; top-2 found by checking every pair.
fn oracle_route(p: &[f64; 5], hi: f64, lo: f64, floor: f64, danger: bool) -> (DomainSet, Branch) {
    let max = p.iter().cloned().fold(0.0f64, f64::max);
    if danger || max < floor {
        return (DomainSet::ALL, Branch::FailOpen);
    }
    if p[0] >= hi || p[1] >= hi {
        let d = if p[1] > p[0] {
            Domain::Pulmonary
        } else {
            Domain::Cardiac
        };
        return (DomainSet::single(d), Branch::Top1Life);
    }
    if max >= lo {
        let beats = |a: usize, b: usize| p[a] > p[b] || (p[a] == p[b] && a < b);
        for i in 0..5 {
            for j in i + 1..5 {
                if (0..5)
                    .filter(|&k| k != i && k != j)
                    .all(|k| beats(i, k) && beats(j, k))
                {
                    let r = DomainSet::single(Domain::from_index(i).unwrap())
                        .with(Domain::from_index(j).unwrap());
                    return (r, Branch::Top2);
                }
            }
        }
        unreachable!("some pair beats the rest");
    }
    (DomainSet::ALL, Branch::FailOpen)
}

fn random_probs(rng: &mut impl Rng) -> [f64; 5] {
    let coarse = rng.random::<f64>() < 0.3;
    std::array::from_fn(|_| {
        let u = rng.random::<f64>();
        if coarse {
            (u * 20.0).round() / 20.0
        } else {
            u
        }
    })
}

fn c3_policy_oracle() -> Check {
    let mut rng = stream_rng(3, 0);
    let pairs = [(0.70, 0.30), (0.50, 0.10), (0.95, 0.50)];
    let mut mismatches = 0;
    let mut branches = BTreeSet::new();
    for _ in 0..10_000 {
        let p = random_probs(&mut rng);
        let danger = rng.random::<f64>() < 0.05;
        for &(hi, lo) in &pairs {
            let thr = Thresholds::new(hi, lo);
            let got =
                route(&p, &thr, danger, &PolicyOptions::default()).map_err(|e| e.to_string())?;
            let want = oracle_route(&p, hi, lo, thr.fail_open_floor, danger);
            branches.insert(format!("{:?}", got.branch));
            if (got.route, got.branch) != want {
                mismatches += 1;
            }
        }
    }
    ensure(
        mismatches == 0 && branches.len() == 3,
        format!("30000 decisions, {mismatches} mismatches, branches seen {branches:?}"),
    )
}

fn c4_tuner() -> Check {
    let mut rng = stream_rng(4, 0);
    let rows: Vec<TuneRow> = (0..500)
        .map(|_| {
            let labels = DomainSet::single(Domain::from_index(rng.random_range(0..5)).unwrap());
            let probs = std::array::from_fn(|i| {
                let base = if labels.contains(Domain::from_index(i).unwrap()) {
                    0.55
                } else {
                    0.2
                };
                (base + 0.5 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)
            });
            TuneRow {
                probs,
                labels,
                danger: rng.random::<f64>() < 0.02,
            }
        })
        .collect();
    let grid = Grid::default();
    let mut problems = Vec::new();
    for constraint in [0.9, 0.98, 1.0] {
        let res = tune_thresholds(&rows, &grid, constraint, 0.25, &PolicyOptions::default())
            .map_err(|e| e.to_string())?;
        // exhaustive search
        let mut table = Vec::new();
        for &(hi, lo) in &grid.points {
            let (mut n_life, mut life, mut any, mut all, mut size) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in &rows {
                let (route, _) = oracle_route(&r.probs, hi, lo, 0.25, r.danger);
                size += route.len() as f64;
                any += route.intersects(r.labels) as u8 as f64;
                all += r.labels.is_subset(route) as u8 as f64;
                if r.labels.intersects(DomainSet::LIFE) {
                    n_life += 1.0;
                    life += route.intersects(DomainSet::LIFE) as u8 as f64;
                }
            }
            let n = rows.len() as f64;
            table.push((hi, lo, life / n_life, size / n, any / n, all / n));
        }
        let feasible: Vec<usize> = (0..table.len())
            .filter(|&i| table[i].2 >= constraint)
            .collect();
        let best = if feasible.is_empty() {
            let top = table.iter().map(|t| t.2).fold(0.0, f64::max);
            let cands: Vec<usize> = (0..table.len()).filter(|&i| table[i].2 == top).collect();
            let e = cands
                .iter()
                .map(|&i| table[i].3)
                .fold(f64::INFINITY, f64::min);
            *cands.iter().find(|&&i| table[i].3 == e).unwrap()
        } else {
            let e = feasible
                .iter()
                .map(|&i| table[i].3)
                .fold(f64::INFINITY, f64::min);
            *feasible.iter().find(|&&i| table[i].3 == e).unwrap()
        };
        if (res.chosen.tau_hi, res.chosen.tau_lo) != (table[best].0, table[best].1)
            || res.constraint_met == feasible.is_empty()
        {
            problems.push(format!(
                "constraint {constraint}: chose {:?}, exhaustive {:?}",
                (res.chosen.tau_hi, res.chosen.tau_lo),
                table[best]
            ));
        }
        let same = res.table.len() == table.len()
            && res.table.iter().zip(&table).all(|(a, b)| {
                let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
                a.tau_hi == b.0
                    && a.tau_lo == b.1
                    && close(a.life_recall, b.2)
                    && close(a.expected_experts, b.3)
                    && close(a.recall_any, b.4)
                    && close(a.recall_all, b.5)
            });
        if !same {
            problems.push(format!("constraint {constraint}: frontier table differs"));
        }
    }
    ensure(
        problems.is_empty(),
        if problems.is_empty() {
            "500 rows x 90 points x 3 constraints agree".into()
        } else {
            problems.join("; ")
        },
    )
}

fn c5_end_to_end() -> Check {
    let wd = reference_run().as_ref().map_err(Clone::clone)?;
    let tuned: TuneResult = read(wd, "thresholds.json")?;
    let m: EvalReport = read(wd, "reports/metrics.json")?;
    let h = &m.headline;
    let msg = format!(
        "tau=({:.2},{:.2}) dev life recall {:.4}, test Recall_any {:.4}, E[|R|] {:.3} (life recall on test {:?})",
        tuned.chosen.tau_hi, tuned.chosen.tau_lo, tuned.life_recall, h.recall_any, h.expected_experts, h.life_recall
    );
    ensure(
        tuned.life_recall >= 0.95 && h.recall_any >= 0.99 && h.expected_experts <= 2.5,
        msg,
    )
}

fn c6_router_sanity() -> Check {
    let mut free = PipelineConfig {
        workdir: scratch().join("free"),
        ..PipelineConfig::default()
    };
    free.cohort.total = 25_000;
    free.cohort.signal_strength = Some(0.0);
    free.router.svd_rank = 64;
    let wd = run_pipeline(free, false)?;
    let m: EvalReport = read(&wd, "reports/metrics.json")?;
    let aucs: Vec<(String, f64)> = m
        .headline
        .per_domain
        .iter()
        .map(|(d, v)| (d.clone(), v.roc_auc.unwrap_or(f64::NAN)))
        .collect();
    let free_ok = aucs.len() == 5 && aucs.iter().all(|(_, a)| (0.45..=0.55).contains(a));

    let mut sep = PipelineConfig {
        workdir: scratch().join("separable"),
        ..PipelineConfig::default()
    };
    sep.cohort.signal_strength = Some(1.0);
    sep.router.svd_rank = 64;
    let wd = run_pipeline(sep, false)?;
    let m: EvalReport = read(&wd, "reports/metrics.json")?;
    let macro_auc = m.headline.macro_roc_auc.unwrap_or(f64::NAN);
    let shown: Vec<String> = aucs.iter().map(|(d, a)| format!("{d} {a:.3}")).collect();
    ensure(
        free_ok && macro_auc >= 0.99,
        format!(
            "signal-free AUC [{}]; separable macro AUC {macro_auc:.4}",
            shown.join(", ")
        ),
    )
}

fn c7_calibration() -> Check {
    let mut worst = f64::NEG_INFINITY;
    for seed in 1..=5u64 {
        let mut cfg = PipelineConfig {
            seed,
            workdir: scratch().join(format!("cal{seed}")),
            ..PipelineConfig::default()
        };
        cfg.cohort.total = 2000;
        cfg.cohort.signal_strength = Some(0.5);
        cfg.router.svd_rank = 64;
        let wd = cfg.workdir.clone();
        let ctx = Ctx::new(cfg).map_err(|e| e.to_string())?;
        use consult_cli::commands::*;
        cmd_synth(&ctx)
            .and_then(|_| cmd_tokenize(&ctx))
            .and_then(|_| cmd_featurize(&ctx))
            .and_then(|_| cmd_train_router(&ctx))
            .map_err(|e| e.to_string())?;
        let w = Workdir::new(&wd);
        let model = RouterModel::from_json(
            &w.read("router.json", "train-router")
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let rows: Vec<PrefixRow> = consult_core::event_schema::read_jsonl(
            &std::fs::read(wd.join(rows_file("dev"))).map_err(|e| e.to_string())?[..],
        )
        .map_err(|e| e.to_string())?;
        let fm = FeatureMatrix::read(
            &std::fs::read(wd.join(features_file("dev"))).map_err(|e| e.to_string())?[..],
        )
        .map_err(|e| e.to_string())?;
        for (h, cal) in model.heads.iter().zip(&model.calibrators) {
            let y: Vec<bool> = rows.iter().map(|r| r.labels.contains(h.domain)).collect();
            let raw: Vec<f64> = fm.rows().map(|z| h.raw_score(z)).collect();
            let before = brier(&raw.iter().map(|&s| sigmoid(s)).collect::<Vec<_>>(), &y);
            let after = brier(&raw.iter().map(|&s| cal.apply(s)).collect::<Vec<_>>(), &y);
            worst = worst.max(after - before);
        }
    }
    // temperature recovery on simulated logits
    let mut rng = stream_rng(7, 0);
    let (mut logits, mut y) = (Vec::new(), Vec::new());
    for _ in 0..20_000 {
        let u: f64 = 6.0 * (rng.random::<f64>() - 0.5);
        y.push(rng.random::<f64>() < sigmoid(u));
        logits.push(4.0 * u);
    }
    let t = temperature_fit(&logits, &y);
    ensure(
        worst <= 1e-6 && (t - 4.0).abs() <= 0.5,
        format!("worst Brier change after Platt {worst:+.2e} over 25 heads; T = {t:.3}"),
    )
}

fn c8_specialist() -> Check {
    let tiny = SpecialistConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        vocab_size: 12,
        dropout: 0.0,
    };
    let mut m = SpecialistModel::new(tiny.clone(), 8).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(8, 0);
    for p in m.params.iter_mut() {
        *p += 0.3 * (rng.random::<f64>() - 0.5);
    }
    let seq = [2u32, 5, 7, 5, 9, 11, 4, 3];
    let (_, g) = m.loss_and_grad(&seq).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..m.params.len() {
        let orig = m.params[i];
        m.params[i] = orig + h;
        let lp = m.loss_and_grad(&seq).unwrap().0;
        m.params[i] = orig - h;
        let lm = m.loss_and_grad(&seq).unwrap().0;
        m.params[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        worst = worst.max((num - g[i]).abs() / (num.abs() + g[i].abs()).max(1e-6));
    }
    let a = m.forward(&[2, 4, 5, 6, 7]).unwrap();
    let b = m.forward(&[2, 4, 5, 9, 1]).unwrap();
    let causal = a[..3 * 12] == b[..3 * 12];

    let mut l = SpecialistModel::new(SpecialistConfig::desk(30), 9).map_err(|e| e.to_string())?;
    let ids = [2u32, 7, 8, 9, 10, 11];
    let before = l.forward(&ids).unwrap();
    l.attach_lora(4, 8.0, 1).map_err(|e| e.to_string())?;
    let invariant = before == l.forward(&ids).unwrap();
    if let Some(ad) = l.lora.as_mut() {
        ad.params
            .iter_mut()
            .for_each(|p| *p += 0.05 * (rng.random::<f64>() - 0.5));
    }
    let adapted = l.forward(&ids).unwrap();
    l.merge_lora().map_err(|e| e.to_string())?;
    let merge_err = adapted
        .iter()
        .zip(l.forward(&ids).unwrap())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let wd = reference_run().as_ref().map_err(Clone::clone)?;
    let summary: Vec<SpecialistSummary> = read(wd, "specialists/summary.json")?;
    let mut training = Vec::new();
    let mut train_ok = summary.len() == 5;
    for s in &summary {
        let first = s.curve.first().map_or(f64::NAN, |c| c.dev_loss);
        let fifth = s.curve.get(4).map_or(f64::NAN, |c| c.dev_loss);
        train_ok &= s.dev_loss < s.unigram_entropy && fifth < first;
        training.push(format!(
            "{} {:.3}<{:.3} ({:.3}->{:.3})",
            s.domain, s.dev_loss, s.unigram_entropy, first, fifth
        ));
    }
    ensure(
        worst <= 1e-3 && causal && invariant && merge_err <= 1e-6 && train_ok,
        format!(
            "grad rel err {worst:.1e}, causal {causal}, lora invariant {invariant}, merge err {merge_err:.1e}; dev loss vs unigram: {}",
            training.join(", ")
        ),
    )
}

fn c9_metric_oracles() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let mut bad = Vec::new();
    if !close(
        roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
        0.75,
    ) {
        bad.push("auc");
    }
    if !close(
        roc_auc(&[0.5, 0.5, 0.2, 0.9], &[true, false, false, true]).unwrap(),
        0.875,
    ) {
        bad.push("auc ties");
    }
    if !close(brier(&[0.9, 0.2, 0.6], &[true, false, false]), 0.41 / 3.0) {
        bad.push("brier");
    }
    if !close(ndcg_at_k(&["a", "b", "c"], &["b"], 3), 1.0 / 3f64.log2()) {
        bad.push("ndcg single");
    }
    if !close(
        ndcg_at_k(&["a", "b", "c", "d"], &["a", "c"], 3),
        1.5 / (1.0 + 1.0 / 3f64.log2()),
    ) {
        bad.push("ndcg pair");
    }
    let c = Domain::Cardiac;
    let p = Domain::Pulmonary;
    let g = Domain::Gastro;
    let routes = [
        DomainSet::single(c),
        DomainSet::single(c).with(p),
        DomainSet::single(g),
        DomainSet::ALL,
    ];
    let truths = [
        DomainSet::single(c),
        DomainSet::single(p).with(g),
        DomainSet::single(Domain::Musculoskeletal),
        DomainSet::single(Domain::Psychogenic),
    ];
    let r = routing_recalls(&routes, &truths).unwrap();
    if !close(r.recall_any, 0.75)
        || !close(r.recall_all, 0.5)
        || r.life_recall.map_or(true, |v| !close(v, 1.0))
    {
        bad.push("recalls");
    }
    let lm = LatencyModel {
        router_ms: 10.0,
        expert_ms: [40.0, 50.0, 60.0, 70.0, 80.0],
    };
    let (per, mean) = latency(&[DomainSet::single(c).with(g), DomainSet::ALL], &lm);
    if !close(per[0], 110.0) || !close(per[1], 310.0) || !close(mean, 210.0) {
        bad.push("latency");
    }
    let mut rng = stream_rng(9, 0);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=20);
        let routes: Vec<DomainSet> = (0..n)
            .map(|_| DomainSet::from_bits(rng.random_range(1u8..32)))
            .collect();
        let truths: Vec<DomainSet> = (0..n)
            .map(|_| DomainSet::from_bits(rng.random_range(1u8..32)))
            .collect();
        let r = routing_recalls(&routes, &truths).unwrap();
        violations += (r.recall_all > r.recall_any) as usize;
    }
    ensure(
        bad.is_empty() && violations == 0,
        format!("fixture failures {bad:?}; Recall_all > Recall_any in {violations} of 10000 draws"),
    )
}

fn c10_reproducibility() -> Check {
    let a = reference_run().as_ref().map_err(Clone::clone)?;
    let b = run_pipeline(
        PipelineConfig {
            workdir: scratch().join("rerun"),
            ..PipelineConfig::default()
        },
        true,
    )?;
    let manifest: serde_json::Value = read(a, MANIFEST)?;
    let files: Vec<String> = manifest["artifacts"]
        .as_object()
        .ok_or("manifest without artifacts")?
        .keys()
        .cloned()
        .collect();
    let mut differ: Vec<String> = Vec::new();
    for rel in files.iter().map(String::as_str).chain([MANIFEST]) {
        if std::fs::read(a.join(rel)).ok() != std::fs::read(b.join(rel)).ok() {
            differ.push(rel.to_string());
        }
    }
    let checkpoints = files
        .iter()
        .filter(|f| f.ends_with(".bin") && f.starts_with("specialists/"))
        .count();
    let reports = files.iter().filter(|f| f.starts_with("reports/")).count();
    ensure(
        differ.is_empty() && checkpoints == 5 && reports >= 5,
        format!("{} artifacts + manifest compared ({checkpoints} checkpoints, {reports} reports); differing: {differ:?}", files.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("perplexity and savings fixtures", c1_fixtures),
        ("prefix-row identity", c2_prefix_rows),
        ("policy oracle equivalence", c3_policy_oracle),
        ("tuner optimality", c4_tuner),
        ("end-to-end routing targets", c5_end_to_end),
        ("router sanity", c6_router_sanity),
        ("calibration", c7_calibration),
        ("specialist numerics", c8_specialist),
        ("metric oracles", c9_metric_oracles),
        ("reproducibility", c10_reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = std::time::Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {:>2} PASS {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
