//! One function per pipeline command.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};

use consult_core::dispatch_policy::{
    arbitrate, route, tune_thresholds, AuditLog, AuditRecord, Branch, RouteDecision, Thresholds,
    TuneResult, TuneRow,
};
use consult_core::eval_harness::{
    anytime, baselines, bootstrap_ci, canonical_json, expected_experts, roc_auc, routing_recalls,
    AnytimeCurve, MetricReport, Policy,
};
use consult_core::event_schema::{
    build_vocabulary, read_jsonl, write_jsonl, Domain, DomainSet, EncodedEpisode, Episode,
    Vocabulary,
};
use consult_core::par;
use consult_core::prefix_features::{
    expand_all, expand_prefixes, prefix_document, FeatureMatrix, Featurizer, PrefixRow,
};
use consult_core::router::{split, FeatureTable, RouterModel, SplitSpec};
use consult_core::specialist::{
    next_event_metrics, train, unigram_entropy, write_curve_csv, CurvePoint, NextEventMetrics,
    SpecialistModel,
};
use consult_core::synth_cohort::{
    generate_cohort, ingest, proportional_sample, subsample_indices, CohortConfig, GrammarSet,
    MixtureSpec,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::{streams, PipelineConfig};
use crate::error::{CliError, CliResult};

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub wd: Workdir,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> CliResult<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let wd = Workdir::new(cfg.workdir.clone());
        Ok(Self { cfg, wd, hash })
    }
}

fn jsonl_bytes<T: Serialize>(items: &[T]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items)?;
    Ok(buf)
}

fn read_jsonl_artifact<T: serde::de::DeserializeOwned>(
    wd: &Workdir,
    rel: &str,
    producer: &'static str,
) -> CliResult<Vec<T>> {
    let bytes = wd.read(rel, producer)?;
    Ok(read_jsonl(&bytes[..])?)
}

fn json_bytes<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut s = canonical_json(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn load_vocab(wd: &Workdir) -> CliResult<Vocabulary> {
    Ok(Vocabulary::read_tsv(&wd.read(VOCAB, "tokenize")?[..])?)
}

fn load_rows(wd: &Workdir, split: &str) -> CliResult<Vec<PrefixRow>> {
    read_jsonl_artifact(wd, &rows_file(split), "tokenize")
}

fn load_router(ctx: &Ctx) -> CliResult<RouterModel> {
    let m = RouterModel::from_json(&ctx.wd.read(ROUTER, "train-router")?)?;
    if m.config_hash != ctx.hash {
        return Err(CliError::Config(format!(
            "{} was trained under config {}, current config is {}; rerun `consult train-router`",
            ROUTER,
            &m.config_hash[..m.config_hash.len().min(12)],
            &ctx.hash[..12]
        )));
    }
    Ok(m)
}

fn load_tuned(wd: &Workdir) -> CliResult<TuneResult> {
    Ok(serde_json::from_slice(&wd.read(THRESHOLDS, "tune")?)?)
}

/// Index of each episode's longest prefix; rows are grouped by episode with
/// increasing `ell`.
pub fn final_indices(rows: &[PrefixRow]) -> Vec<usize> {
    (0..rows.len())
        .filter(|&i| i + 1 == rows.len() || rows[i + 1].episode_id != rows[i].episode_id)
        .collect()
}

// ---------------------------------------------------------------------------

pub fn cmd_synth(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let mut stage = Stage::new(&ctx.wd, "synth", &ctx.hash);
    let episodes = if !cfg.cohort.inputs.is_empty() {
        let mut records = Vec::new();
        for p in &cfg.cohort.inputs {
            let bytes = std::fs::read(p).map_err(|source| CliError::Io {
                path: p.display().to_string(),
                source,
            })?;
            stage.record_input(p, &bytes);
            records.extend(read_jsonl::<Episode>(&bytes[..])?);
        }
        for r in &records {
            r.validate()?;
        }
        let merged = ingest(records)?;
        match cfg.cohort.sample {
            Some(n) => proportional_sample(&merged, n, cfg.stage_seed(streams::SAMPLE)),
            None => merged,
        }
    } else {
        let mut grammars = match &cfg.cohort.grammars {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|source| CliError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                stage.record_input(p, &bytes);
                serde_json::from_slice::<GrammarSet>(&bytes)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => GrammarSet::default_grammars(),
        };
        if let Some(s) = cfg.cohort.signal_strength {
            grammars = grammars.with_signal(s);
        }
        let cc = CohortConfig {
            counts: cfg.cohort.counts,
            mixture: MixtureSpec {
                prevalence: cfg.cohort.mixture,
            },
            total: cfg.cohort.total,
            seed: cfg.seed,
            k: cfg.router.k,
            multi_label_rate: cfg.cohort.multi_label_rate,
        };
        generate_cohort(&cc, &grammars)?
    };
    log::info!("cohort: {} episodes", episodes.len());
    stage.write(COHORT, &jsonl_bytes(&episodes)?)?;
    stage.commit(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitsFile {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

pub fn cmd_tokenize(ctx: &Ctx) -> CliResult<()> {
    ctx.wd.check_config(&ctx.hash)?;
    let mut stage = Stage::new(&ctx.wd, "tokenize", &ctx.hash);
    let cfg = &ctx.cfg;
    let episodes: Vec<Episode> = read_jsonl_artifact(&ctx.wd, COHORT, "synth")?;
    let eligible: Vec<&Episode> = episodes
        .iter()
        .filter(|e| e.is_training_eligible())
        .collect();
    if eligible.len() < episodes.len() {
        log::warn!(
            "{} unlabeled episodes skipped",
            episodes.len() - eligible.len()
        );
    }
    let labels: Vec<DomainSet> = eligible.iter().map(|e| e.labels).collect();
    let [tr, dv, te] = cfg.router.split;
    let sp = split(
        &labels,
        &SplitSpec {
            train: tr,
            dev: dv,
            test: te,
            seed: cfg.stage_seed(streams::SPLIT),
        },
    )?;
    let ids = |idx: &[usize]| -> Vec<String> {
        idx.iter()
            .map(|&i| eligible[i].episode_id.clone())
            .collect()
    };
    let splits = SplitsFile {
        train: ids(&sp.train),
        dev: ids(&sp.dev),
        test: ids(&sp.test),
    };

    let sc = cfg.sequence.sequence_config();
    let train_eps: Vec<Episode> = sp.train.iter().map(|&i| eligible[i].clone()).collect();
    let whitelist: BTreeSet<String> = cfg.sequence.whitelist.iter().cloned().collect();
    let vocab = build_vocabulary(&train_eps, cfg.sequence.min_count, &whitelist, &sc)?;
    let encoded: Vec<EncodedEpisode> =
        par::map(&eligible, |e| EncodedEpisode::encode(e, &vocab, &sc))
            .into_iter()
            .collect::<consult_core::Result<_>>()?;
    stage.write(SPLITS, &json_bytes(&splits)?)?;
    let mut vbuf = Vec::new();
    vocab.write_tsv(&mut vbuf)?;
    stage.write(VOCAB, &vbuf)?;
    stage.write(SEQUENCES, &jsonl_bytes(&encoded)?)?;
    for (name, idx) in SPLIT_NAMES.iter().zip([&sp.train, &sp.dev, &sp.test]) {
        let eps: Vec<EncodedEpisode> = idx.iter().map(|&i| encoded[i].clone()).collect();
        stage.write(
            &rows_file(name),
            &jsonl_bytes(&expand_all(&eps, cfg.router.k))?,
        )?;
    }
    log::info!(
        "vocabulary {} tokens; splits {}/{}/{}",
        vocab.len(),
        sp.train.len(),
        sp.dev.len(),
        sp.test.len()
    );
    stage.commit(false)
}

pub fn cmd_featurize(ctx: &Ctx) -> CliResult<()> {
    ctx.wd.check_config(&ctx.hash)?;
    let mut stage = Stage::new(&ctx.wd, "featurize", &ctx.hash);
    let vocab = load_vocab(&ctx.wd)?;
    let train_rows = load_rows(&ctx.wd, "train")?;
    let docs: Vec<String> = train_rows
        .iter()
        .map(|r| prefix_document(&r.tokens, &vocab))
        .collect();
    let rc = ctx.cfg.router_config();
    let fz = Featurizer::fit(&docs, rc.svd_rank, rc.use_time, rc.seed)?;
    let hash = fz.model_hash();
    stage.write(FEATURIZER, &serde_json::to_vec(&fz)?)?;
    for name in SPLIT_NAMES {
        let rows = if name == "train" {
            train_rows.clone()
        } else {
            load_rows(&ctx.wd, name)?
        };
        let x = fz.featurize_rows(&rows, &vocab);
        let fm = FeatureMatrix::from_rows(&x, fz.dim(), rc.seed, hash)?;
        let mut buf = Vec::new();
        fm.write(&mut buf)?;
        stage.write(&features_file(name), &buf)?;
    }
    log::info!("featurizer: {} terms, dim {}", fz.tfidf.n_terms(), fz.dim());
    stage.commit(false)
}

fn load_featurizer(wd: &Workdir) -> CliResult<Featurizer> {
    let mut fz: Featurizer = serde_json::from_slice(&wd.read(FEATURIZER, "featurize")?)?;
    fz.restore_index();
    Ok(fz)
}

fn load_features(
    wd: &Workdir,
    split: &str,
    expect: [u8; 32],
    n: usize,
) -> CliResult<Vec<Vec<f64>>> {
    let fm = FeatureMatrix::read(&wd.read(&features_file(split), "featurize")?[..])?;
    if fm.model_hash != expect {
        return Err(CliError::Data(format!(
            "{} was built by another featurizer; rerun `consult featurize`",
            features_file(split)
        )));
    }
    if fm.n != n {
        return Err(CliError::Data(format!(
            "{} has {} rows, {} expected; rerun `consult featurize`",
            features_file(split),
            fm.n,
            n
        )));
    }
    Ok(fm.rows().map(|r| r.to_vec()).collect())
}

pub fn cmd_train_router(ctx: &Ctx) -> CliResult<()> {
    ctx.wd.check_config(&ctx.hash)?;
    let mut stage = Stage::new(&ctx.wd, "train-router", &ctx.hash);
    let fz = load_featurizer(&ctx.wd)?;
    let hash = fz.model_hash();
    let (tr_rows, dv_rows) = (load_rows(&ctx.wd, "train")?, load_rows(&ctx.wd, "dev")?);
    let tr = FeatureTable::new(
        &tr_rows,
        load_features(&ctx.wd, "train", hash, tr_rows.len())?,
    );
    let dv = FeatureTable::new(
        &dv_rows,
        load_features(&ctx.wd, "dev", hash, dv_rows.len())?,
    );
    let model = RouterModel::fit(fz, &tr, &dv, &ctx.cfg.router_config(), &ctx.hash)?;
    for h in &model.heads {
        log::info!(
            "{} head: {} iterations, grad norm {:.2e}",
            h.domain,
            h.iterations,
            h.grad_norm
        );
    }
    stage.write(ROUTER, &model.to_json()?)?;
    stage.commit(false)
}

/// Raw scores and calibrated probabilities for a split.
fn score_split(
    ctx: &Ctx,
    model: &RouterModel,
    split: &str,
) -> CliResult<(Vec<PrefixRow>, Vec<[f64; 5]>, Vec<[f64; 5]>)> {
    let rows = load_rows(&ctx.wd, split)?;
    let x = load_features(&ctx.wd, split, model.featurizer.model_hash(), rows.len())?;
    let raw = x
        .iter()
        .map(|z| model.predict_raw(z))
        .collect::<consult_core::Result<Vec<_>>>()?;
    let probs = raw.iter().map(|r| model.calibrate_scores(r)).collect();
    Ok((rows, raw, probs))
}

pub fn cmd_tune(ctx: &Ctx) -> CliResult<()> {
    ctx.wd.check_config(&ctx.hash)?;
    let mut stage = Stage::new(&ctx.wd, "tune", &ctx.hash);
    let model = load_router(ctx)?;
    let (rows, _, probs) = score_split(ctx, &model, "dev")?;
    let tune_rows: Vec<TuneRow> = final_indices(&rows)
        .into_iter()
        .map(|i| TuneRow {
            probs: probs[i],
            labels: rows[i].labels,
            danger: rows[i].danger,
        })
        .collect();
    let p = &ctx.cfg.policy;
    let res = tune_thresholds(
        &tune_rows,
        &p.grid(),
        p.constraint,
        p.fail_open_floor,
        &p.options(),
    )?;
    let mut csv = Vec::new();
    res.write_frontier_csv(&mut csv)?;
    stage.write(THRESHOLDS, &json_bytes(&res)?)?;
    stage.write(FRONTIER, &csv)?;
    stage.commit(false)?;
    log::info!(
        "chosen tau_hi={:.2} tau_lo={:.2}: dev life recall {:.4}, E[|R|] {:.3}",
        res.chosen.tau_hi,
        res.chosen.tau_lo,
        res.life_recall,
        res.expected_experts
    );
    if !res.constraint_met {
        return Err(CliError::ConstraintUnmet {
            constraint: res.constraint,
            achieved: res.life_recall,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Specialists

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistSummary {
    pub domain: Domain,
    pub train_episodes: usize,
    pub dev_episodes: usize,
    pub best_epoch: usize,
    pub dev_loss: f64,
    pub ppl: f64,
    pub unigram_entropy: f64,
    pub trainable_params: usize,
    pub curve: Vec<CurvePoint>,
}

fn specialist_file(d: Domain) -> String {
    format!("{SPECIALISTS}/{}.bin", d.name())
}

fn curve_file(d: Domain) -> String {
    format!("{SPECIALISTS}/{}_curve.csv", d.name())
}

fn sequences_by_split(ctx: &Ctx) -> CliResult<HashMap<&'static str, Vec<EncodedEpisode>>> {
    let encoded: Vec<EncodedEpisode> = read_jsonl_artifact(&ctx.wd, SEQUENCES, "tokenize")?;
    let splits: SplitsFile = serde_json::from_slice(&ctx.wd.read(SPLITS, "tokenize")?)?;
    let mut which: HashMap<&str, &'static str> = HashMap::new();
    for (name, ids) in SPLIT_NAMES
        .iter()
        .zip([&splits.train, &splits.dev, &splits.test])
    {
        for id in ids {
            which.insert(id.as_str(), name);
        }
    }
    let mut out: HashMap<&'static str, Vec<EncodedEpisode>> =
        SPLIT_NAMES.iter().map(|n| (*n, Vec::new())).collect();
    for e in encoded {
        if let Some(name) = which.get(e.episode_id.as_str()).copied() {
            out.get_mut(name).expect("split").push(e);
        }
    }
    Ok(out)
}

fn domain_seqs(eps: &[EncodedEpisode], d: Domain) -> Vec<Vec<u32>> {
    eps.iter()
        .filter(|e| e.labels.contains(d))
        .map(|e| e.tokens.clone())
        .collect()
}

/// Seeded uniform subsample keeping input order.
fn scope(seqs: Vec<Vec<u32>>, cap: Option<usize>, seed: u64) -> Vec<Vec<u32>> {
    match cap {
        Some(n) if n < seqs.len() => subsample_indices(seqs.len(), n, seed)
            .into_iter()
            .map(|i| seqs[i].clone())
            .collect(),
        _ => seqs,
    }
}

pub fn cmd_train_specialist(ctx: &Ctx) -> CliResult<()> {
    ctx.wd.check_config(&ctx.hash)?;
    let mut stage = Stage::new(&ctx.wd, "train-specialist", &ctx.hash);
    let vocab = load_vocab(&ctx.wd)?;
    let by_split = sequences_by_split(ctx)?;
    let sc = &ctx.cfg.specialist;
    let mcfg = sc.model_config(vocab.len())?;
    let seed = ctx.cfg.stage_seed(streams::SPECIALIST);

    let base = match sc.lora_rank {
        Some(_) => {
            let all_train = scope(
                by_split["train"].iter().map(|e| e.tokens.clone()).collect(),
                sc.scope.map(|n| n * Domain::COUNT),
                seed,
            );
            let all_dev: Vec<Vec<u32>> = by_split["dev"].iter().map(|e| e.tokens.clone()).collect();
            let m = SpecialistModel::new(mcfg.clone(), seed)?;
            Some(train(m, &all_train, &all_dev, &sc.train_config(seed))?.model)
        }
        None => None,
    };

    let results = par::map(
        &Domain::ALL,
        |&d| -> CliResult<(SpecialistModel, SpecialistSummary)> {
            let dseed = seed.wrapping_add(d.index() as u64 + 1);
            let tr = scope(domain_seqs(&by_split["train"], d), sc.scope, dseed);
            let dv = domain_seqs(&by_split["dev"], d);
            if tr.is_empty() || dv.is_empty() {
                return Err(CliError::Data(format!(
                    "{d}: {} train and {} dev episodes; cannot train a specialist",
                    tr.len(),
                    dv.len()
                )));
            }
            let mut m = match (&base, sc.lora_rank) {
                (Some(b), Some(r)) => {
                    let mut m = b.clone();
                    m.attach_lora(r, sc.lora_alpha, dseed)?;
                    m
                }
                _ => SpecialistModel::new(mcfg.clone(), dseed)?,
            };
            m.domain = Some(d);
            m.vocab_hash = vocab.fingerprint();
            let trainable = m.trainable_count();
            let out = train(m, &tr, &dv, &sc.train_config(dseed))?;
            let mut model = out.model;
            model.fit_temperature(&dv)?;
            let dev_loss = model.mean_loss(&dv)?;
            log::info!("{d}: best epoch {}, dev loss {dev_loss:.4}", out.best_epoch);
            let summary = SpecialistSummary {
                domain: d,
                train_episodes: tr.len(),
                dev_episodes: dv.len(),
                best_epoch: out.best_epoch,
                dev_loss,
                ppl: dev_loss.exp(),
                unigram_entropy: unigram_entropy(&tr),
                trainable_params: trainable,
                curve: out.curve,
            };
            Ok((model, summary))
        },
    );
    let mut summaries = Vec::new();
    for r in results {
        let (model, summary) = r?;
        let d = summary.domain;
        let mut buf = Vec::new();
        model.write(&mut buf)?;
        stage.write(&specialist_file(d), &buf)?;
        let mut csv = Vec::new();
        write_curve_csv(&summary.curve, &mut csv)?;
        stage.write(&curve_file(d), &csv)?;
        summaries.push(summary);
    }
    stage.write(SPECIALIST_SUMMARY, &json_bytes(&summaries)?)?;
    stage.commit(false)
}

fn load_specialists(ctx: &Ctx, vocab: &Vocabulary) -> CliResult<Option<Vec<SpecialistModel>>> {
    if !ctx.wd.exists(SPECIALIST_SUMMARY) {
        return Ok(None);
    }
    let mut out = Vec::new();
    for d in Domain::ALL {
        let m = SpecialistModel::read(&ctx.wd.read(&specialist_file(d), "train-specialist")?[..])?;
        if m.vocab_hash != vocab.fingerprint() {
            return Err(CliError::Data(format!(
                "{} uses another vocabulary; rerun `consult train-specialist`",
                specialist_file(d)
            )));
        }
        out.push(m);
    }
    Ok(Some(out))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub episode_id: String,
    pub ell: usize,
    pub labels: DomainSet,
    pub danger: bool,
    pub raw: [f64; 5],
    pub probs: [f64; 5],
    pub route: DomainSet,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialistEval {
    pub domain: Domain,
    pub test_episodes: usize,
    pub test_loss: f64,
    pub ppl: f64,
    pub next_event: NextEventMetrics,
    pub unigram_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub policy: String,
    pub thresholds: Thresholds,
    pub headline: MetricReport,
    pub baselines: Vec<MetricReport>,
    pub bootstrap: BTreeMap<String, Interval>,
    pub specialists: Vec<SpecialistEval>,
    pub n_test_episodes: usize,
    pub n_test_prefixes: usize,
}

pub fn cmd_eval(ctx: &Ctx, policy: Policy) -> CliResult<()> {
    ctx.wd.check_config(&ctx.hash)?;
    let mut stage = Stage::new(&ctx.wd, "eval", &ctx.hash);
    let model = load_router(ctx)?;
    let tuned = load_tuned(&ctx.wd)?;
    let thr = tuned.chosen;
    let opts = ctx.cfg.policy.options();
    let (rows, raw, probs) = score_split(ctx, &model, "test")?;

    let mut preds = Vec::with_capacity(rows.len());
    let mut audit = AuditLog::new(Vec::new());
    for (i, r) in rows.iter().enumerate() {
        let dec = route(&probs[i], &thr, r.danger, &opts)?;
        audit.append(&AuditRecord::new(
            &r.episode_id,
            r.ell,
            raw[i],
            &dec,
            r.danger,
            &ctx.cfg.eval.timestamp,
        ))?;
        preds.push(Prediction {
            episode_id: r.episode_id.clone(),
            ell: r.ell,
            labels: r.labels,
            danger: r.danger,
            raw: raw[i],
            probs: probs[i],
            route: dec.route,
            branch: dec.branch,
        });
    }
    debug_assert_eq!(audit.written(), rows.len());

    let fin = final_indices(&rows);
    let fprobs: Vec<[f64; 5]> = fin.iter().map(|&i| probs[i]).collect();
    let ftruth: Vec<DomainSet> = fin.iter().map(|&i| rows[i].labels).collect();
    let froutes: Vec<DomainSet> = fin.iter().map(|&i| preds[i].route).collect();
    let lm = ctx.cfg.latency.model();
    let base = baselines(&fprobs, &ftruth, &froutes, &lm)?;
    let headline = base
        .iter()
        .find(|r| r.policy == policy.name())
        .cloned()
        .expect("every policy has a report");

    let routes_for = |p: Policy| -> Vec<DomainSet> {
        p.fixed_route()
            .map_or_else(|| froutes.clone(), |r| vec![r; fin.len()])
    };
    let hroutes = routes_for(policy);
    let ev = &ctx.cfg.eval;
    let bseed = ctx.cfg.stage_seed(streams::BOOTSTRAP);
    let mut bootstrap = BTreeMap::new();
    if fin.len() >= 10 {
        let pick = |s: &[usize]| -> (Vec<DomainSet>, Vec<DomainSet>) {
            (
                s.iter().map(|&i| hroutes[i]).collect(),
                s.iter().map(|&i| ftruth[i]).collect(),
            )
        };
        let metrics: [(&str, &(dyn Fn(&[usize]) -> f64 + Sync)); 4] = [
            ("recall_any", &|s| {
                let (r, y) = pick(s);
                routing_recalls(&r, &y).map_or(f64::NAN, |m| m.recall_any)
            }),
            ("recall_all", &|s| {
                let (r, y) = pick(s);
                routing_recalls(&r, &y).map_or(f64::NAN, |m| m.recall_all)
            }),
            ("life_recall", &|s| {
                let (r, y) = pick(s);
                routing_recalls(&r, &y)
                    .ok()
                    .and_then(|m| m.life_recall)
                    .unwrap_or(f64::NAN)
            }),
            ("expected_experts", &|s| {
                let (r, _) = pick(s);
                expected_experts(&r).unwrap_or(f64::NAN)
            }),
        ];
        for (name, f) in metrics {
            let (lo, hi) = bootstrap_ci(fin.len(), f, ev.bootstrap, ev.level, bseed)?;
            bootstrap.insert(name.to_string(), Interval { lo, hi });
        }
    }

    let vocab = load_vocab(&ctx.wd)?;
    let mut specialists = Vec::new();
    if let Some(models) = load_specialists(ctx, &vocab)? {
        let by_split = sequences_by_split(ctx)?;
        let train_all = &by_split["train"];
        let evals = par::map(&models, |m| -> CliResult<Option<SpecialistEval>> {
            let d = m
                .domain
                .ok_or_else(|| CliError::Data("specialist checkpoint without a domain".into()))?;
            let te = domain_seqs(&by_split["test"], d);
            if te.is_empty() {
                return Ok(None);
            }
            let loss = m.mean_loss(&te)?;
            Ok(Some(SpecialistEval {
                domain: d,
                test_episodes: te.len(),
                test_loss: loss,
                ppl: loss.exp(),
                next_event: next_event_metrics(m, &te)?,
                unigram_entropy: unigram_entropy(&domain_seqs(train_all, d)),
            }))
        });
        for e in evals {
            specialists.extend(e?);
        }
    }

    let report = EvalReport {
        config_hash: ctx.hash.clone(),
        policy: policy.name().to_string(),
        thresholds: thr,
        headline: headline.clone(),
        baselines: base,
        bootstrap,
        specialists,
        n_test_episodes: fin.len(),
        n_test_prefixes: rows.len(),
    };
    let mut csv = Vec::new();
    for r in &report.baselines {
        let mut part = Vec::new();
        r.write_domain_csv(&mut part)?;
        if !csv.is_empty() {
            part = part
                .splitn(2, |&b| b == b'\n')
                .nth(1)
                .unwrap_or_default()
                .to_vec();
        }
        csv.extend(part);
    }
    stage.write(METRICS, &json_bytes(&report)?)?;
    stage.write(PER_DOMAIN, &csv)?;
    stage.write(PREDICTIONS, &jsonl_bytes(&preds)?)?;
    stage.write(EVAL_AUDIT, &audit.into_inner()?)?;
    stage.commit(false)?;
    log::info!(
        "{}: recall_any {:.4}, life recall {:?}, E[|R|] {:.3}",
        headline.policy,
        headline.recall_any,
        headline.life_recall,
        headline.expected_experts
    );
    Ok(())
}

pub fn cmd_report(ctx: &Ctx) -> CliResult<()> {
    ctx.wd.check_config(&ctx.hash)?;
    let mut stage = Stage::new(&ctx.wd, "report", &ctx.hash);
    let preds: Vec<Prediction> = read_jsonl_artifact(&ctx.wd, PREDICTIONS, "eval")?;
    let k = ctx.cfg.router.k;
    let ells: Vec<usize> = preds.iter().map(|p| p.ell).collect();
    let routes_of = |idx: &[usize]| -> (Vec<DomainSet>, Vec<DomainSet>) {
        (
            idx.iter().map(|&i| preds[i].route).collect(),
            idx.iter().map(|&i| preds[i].labels).collect(),
        )
    };
    let mut curves: Vec<AnytimeCurve> = Vec::new();
    curves.push(anytime("macro_roc_auc", &ells, k, |idx| {
        let mut total = 0.0;
        for d in Domain::ALL {
            let s: Vec<f64> = idx.iter().map(|&i| preds[i].probs[d.index()]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| preds[i].labels.contains(d)).collect();
            total += roc_auc(&s, &y)?;
        }
        Ok(total / Domain::COUNT as f64)
    }));
    curves.push(anytime("recall_any", &ells, k, |idx| {
        let (r, y) = routes_of(idx);
        Ok(routing_recalls(&r, &y)?.recall_any)
    }));
    curves.push(anytime("recall_all", &ells, k, |idx| {
        let (r, y) = routes_of(idx);
        Ok(routing_recalls(&r, &y)?.recall_all)
    }));
    curves.push(anytime("life_recall", &ells, k, |idx| {
        let (r, y) = routes_of(idx);
        routing_recalls(&r, &y)?
            .life_recall
            .ok_or_else(|| consult_core::Error::UndefinedMetric("no life-threat rows".into()))
    }));
    curves.push(anytime("expected_experts", &ells, k, |idx| {
        expected_experts(&routes_of(idx).0)
    }));
    let mut csv = Vec::new();
    AnytimeCurve::write_csv(&curves, &mut csv)?;
    let frontier = ctx.wd.read(FRONTIER, "tune")?;
    stage.write(ANYTIME, &csv)?;
    stage.write(REPORT_FRONTIER, &frontier)?;
    stage.commit(false)
}

// ---------------------------------------------------------------------------
// Online routing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub token: String,
    pub expert: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutput {
    pub episode_id: String,
    pub ell: usize,
    pub decision: RouteDecision,
    pub suggestions: Vec<Suggestion>,
}

/// Route one episode JSON read from `input` (`-` for stdin) and append one
/// audit record.
pub fn cmd_route(
    ctx: &Ctx,
    input: &Path,
    timestamp: Option<String>,
    audit_path: Option<PathBuf>,
) -> CliResult<RouteOutput> {
    ctx.wd.check_config(&ctx.hash)?;
    let text = if input == Path::new("-") {
        let mut s = String::new();
        std::io::stdin()
            .read_to_string(&mut s)
            .map_err(|source| CliError::Io {
                path: "stdin".into(),
                source,
            })?;
        s
    } else {
        std::fs::read_to_string(input).map_err(|source| CliError::Io {
            path: input.display().to_string(),
            source,
        })?
    };
    let ep: Episode =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("episode JSON: {e}")))?;
    ep.validate()?;
    let vocab = load_vocab(&ctx.wd)?;
    let model = load_router(ctx)?;
    let tuned = load_tuned(&ctx.wd)?;
    let enc = EncodedEpisode::encode(&ep, &vocab, &ctx.cfg.sequence.sequence_config())?;
    let row = expand_prefixes(&enc, ctx.cfg.router.k)
        .pop()
        .ok_or_else(|| {
            CliError::Data(format!("episode {} has no content tokens", ep.episode_id))
        })?;
    let z = model.featurize(&row, &vocab);
    let raw = model.predict_raw(&z)?;
    let probs = model.calibrate_scores(&raw);
    let ts = timestamp
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let mut decision = route(&probs, &tuned.chosen, ep.danger, &ctx.cfg.policy.options())?;
    decision.timestamp = Some(ts.clone());

    let mut merged = Vec::new();
    if let Some(models) = load_specialists(ctx, &vocab)? {
        let mut prefix = vec![consult_core::event_schema::BOS_ID];
        prefix.extend(enc.content());
        let k = ctx.cfg.specialist.suggest_k;
        let mut lists = Vec::new();
        for d in decision.route.iter() {
            let m = &models[d.index()];
            let s = m.suggest(&prefix[..prefix.len().min(m.config.max_len)], k)?;
            lists.push((
                d,
                s.iter()
                    .map(|(id, _)| vocab.decode(*id).unwrap_or("[UNK]").to_string())
                    .collect(),
            ));
        }
        merged = arbitrate(&lists);
    }
    let mut rec = AuditRecord::new(&ep.episode_id, row.ell, raw, &decision, ep.danger, &ts);
    rec.arbitration = merged.clone();
    let audit_path = audit_path.unwrap_or_else(|| ctx.wd.path(AUDIT));
    if let Some(dir) = audit_path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&audit_path)
        .map_err(|source| CliError::Io {
            path: audit_path.display().to_string(),
            source,
        })?;
    let mut log = AuditLog::new(std::io::BufWriter::new(file));
    log.append(&rec)?;
    log.into_inner()?;
    Ok(RouteOutput {
        episode_id: ep.episode_id,
        ell: row.ell,
        decision,
        suggestions: merged
            .into_iter()
            .map(|a| Suggestion {
                token: a.token,
                expert: a.expert,
            })
            .collect(),
    })
}

/// All batch stages in order. A missed life-threat constraint is reported
/// after the remaining stages complete.
pub fn cmd_pipeline(ctx: &Ctx, with_specialists: bool) -> CliResult<()> {
    cmd_synth(ctx)?;
    cmd_tokenize(ctx)?;
    cmd_featurize(ctx)?;
    cmd_train_router(ctx)?;
    let tuned = cmd_tune(ctx);
    if let Err(e) = &tuned {
        if !matches!(e, CliError::ConstraintUnmet { .. }) {
            return tuned;
        }
        log::warn!("{e}");
    }
    if with_specialists {
        cmd_train_specialist(ctx)?;
    }
    cmd_eval(ctx, Policy::Router)?;
    cmd_report(ctx)?;
    tuned
}
