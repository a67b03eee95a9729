//! Seeded synthetic episode generator, ingestion merge and proportional
//! sampling.
//!
//! Every episode draws from its own ChaCha8 stream: the generator is seeded
//! with the cohort seed, stream 0 shuffles the domain assignment and stream
//! `i + 1` generates episode `i`. Output order is the episode index, so the
//! result is identical whether episodes are generated in parallel or not.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_schema::{compute_time_feats, ClinicalEvent, Domain, DomainSet, Episode, LabBin};
use crate::par;

/// Default domain mixture (Cardiac, Pulmonary, Gastro, Musculoskeletal,
/// Psychogenic).
pub const DEFAULT_MIXTURE: [f64; 5] = [0.082, 0.228, 0.326, 0.038, 0.326];

/// Per-domain counts of the reference cohort (13,801 episodes).
pub const REFERENCE_COUNTS: [usize; 5] = [1128, 3150, 4500, 523, 4500];

/// Seeded RNG for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCode {
    pub code: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedBin {
    pub bin: LabBin,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSpec {
    pub test: String,
    pub weight: f64,
    pub bins: Vec<WeightedBin>,
}

/// Code pools shared by every domain; the noise source of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedPool {
    pub initial_codes: Vec<WeightedCode>,
    pub order_pool: Vec<WeightedCode>,
    pub lab_pool: Vec<LabSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGrammar {
    pub domain: Domain,
    pub initial_codes: Vec<WeightedCode>,
    pub order_pool: Vec<WeightedCode>,
    pub lab_pool: Vec<LabSpec>,
    pub gold_codes: Vec<WeightedCode>,
    /// Probability that an emitted token comes from the domain pools rather
    /// than the shared pool.
    pub signal_strength: f64,
    /// Inclusive range of content events per episode.
    pub length_range: (usize, usize),
    #[serde(default)]
    pub danger_rate: f64,
}

/// Grammar file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSet {
    pub shared: SharedPool,
    pub domains: Vec<DomainGrammar>,
}

fn check_weights<'a>(what: &str, w: impl Iterator<Item = &'a f64>) -> Result<()> {
    let mut n = 0;
    for &x in w {
        if !(x.is_finite() && x > 0.0) {
            return Err(Error::Config(format!(
                "{what}: weight {x} must be positive"
            )));
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!("{what}: empty pool")));
    }
    Ok(())
}

fn check_labs(what: &str, labs: &[LabSpec]) -> Result<()> {
    check_weights(what, labs.iter().map(|l| &l.weight))?;
    for l in labs {
        check_weights(
            &format!("{what}/{}", l.test),
            l.bins.iter().map(|b| &b.weight),
        )?;
    }
    Ok(())
}

impl DomainGrammar {
    pub fn validate(&self, k: usize) -> Result<()> {
        let d = self.domain.name();
        check_weights(
            &format!("{d} initial_codes"),
            self.initial_codes.iter().map(|c| &c.weight),
        )?;
        check_weights(
            &format!("{d} order_pool"),
            self.order_pool.iter().map(|c| &c.weight),
        )?;
        check_weights(
            &format!("{d} gold_codes"),
            self.gold_codes.iter().map(|c| &c.weight),
        )?;
        check_labs(&format!("{d} lab_pool"), &self.lab_pool)?;
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config(format!(
                "{d}: signal_strength {} outside [0,1]",
                self.signal_strength
            )));
        }
        if !(0.0..=1.0).contains(&self.danger_rate) {
            return Err(Error::Config(format!(
                "{d}: danger_rate {} outside [0,1]",
                self.danger_rate
            )));
        }
        let (lo, hi) = self.length_range;
        if lo > hi {
            return Err(Error::Config(format!(
                "{d}: length_range ({lo}, {hi}) is empty"
            )));
        }
        if lo < k {
            return Err(Error::Config(format!(
                "{d}: length_range minimum {lo} is below K={k}"
            )));
        }
        Ok(())
    }
}

impl GrammarSet {
    pub fn validate(&self, k: usize) -> Result<()> {
        check_weights(
            "shared initial_codes",
            self.shared.initial_codes.iter().map(|c| &c.weight),
        )?;
        check_weights(
            "shared order_pool",
            self.shared.order_pool.iter().map(|c| &c.weight),
        )?;
        check_labs("shared lab_pool", &self.shared.lab_pool)?;
        for d in Domain::ALL {
            let n = self.domains.iter().filter(|g| g.domain == d).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "expected exactly one grammar for {d}, found {n}"
                )));
            }
        }
        for g in &self.domains {
            g.validate(k)?;
        }
        Ok(())
    }

    pub fn grammar(&self, d: Domain) -> &DomainGrammar {
        self.domains
            .iter()
            .find(|g| g.domain == d)
            .expect("validated grammar set")
    }

    /// Override every domain's signal strength.
    pub fn with_signal(mut self, s: f64) -> Self {
        for g in &mut self.domains {
            g.signal_strength = s;
        }
        self
    }

    /// Built-in grammars. Domain pools are pairwise disjoint and disjoint from
    /// the shared pool.
    pub fn default_grammars() -> GrammarSet {
        fn codes(list: &[(&str, f64)]) -> Vec<WeightedCode> {
            list.iter()
                .map(|(c, w)| WeightedCode {
                    code: c.to_string(),
                    weight: *w,
                })
                .collect()
        }
        fn labs(list: &[(&str, f64, &[(LabBin, f64)])]) -> Vec<LabSpec> {
            list.iter()
                .map(|(t, w, bins)| LabSpec {
                    test: t.to_string(),
                    weight: *w,
                    bins: bins
                        .iter()
                        .map(|(b, w)| WeightedBin {
                            bin: *b,
                            weight: *w,
                        })
                        .collect(),
                })
                .collect()
        }
        use LabBin::*;
        let shared = SharedPool {
            initial_codes: codes(&[("786.50", 3.0), ("780.79", 1.0), ("789.00", 1.0)]),
            order_pool: codes(&[("CBC", 3.0), ("BMP", 2.0), ("XRAY_CHEST", 2.0)]),
            lab_pool: labs(&[
                ("WBC", 2.0, &[(Normal, 0.7), (High, 0.2), (Low, 0.1)]),
                ("NA", 1.0, &[(Normal, 0.85), (Low, 0.1), (High, 0.05)]),
                ("GLUC", 1.0, &[(Normal, 0.7), (High, 0.3)]),
            ]),
        };
        let mk = |domain,
                  init: &[(&str, f64)],
                  ords: &[(&str, f64)],
                  lab: Vec<LabSpec>,
                  gold: &[(&str, f64)],
                  danger| {
            DomainGrammar {
                domain,
                initial_codes: codes(init),
                order_pool: codes(ords),
                lab_pool: lab,
                gold_codes: codes(gold),
                signal_strength: 0.8,
                length_range: (6, 14),
                danger_rate: danger,
            }
        };
        let domains = vec![
            mk(
                Domain::Cardiac,
                &[
                    ("786.51", 3.0),
                    ("785.1", 1.0),
                    ("780.2", 1.0),
                    ("413.9", 2.0),
                    ("427.89", 1.0),
                ],
                &[
                    ("ECG", 4.0),
                    ("ECHO", 2.0),
                    ("TELEMETRY", 2.0),
                    ("CATH", 1.0),
                    ("STRESS_TEST", 1.0),
                ],
                labs(&[
                    (
                        "TROP",
                        3.0,
                        &[(High, 0.6), (Critical, 0.25), (Normal, 0.15)],
                    ),
                    ("CKMB", 1.0, &[(High, 0.6), (Normal, 0.4)]),
                    ("BNP", 1.0, &[(High, 0.5), (Normal, 0.5)]),
                ]),
                &[
                    ("410.71", 3.0),
                    ("411.1", 2.0),
                    ("420.90", 1.0),
                    ("441.01", 1.0),
                    ("425.1", 1.0),
                ],
                0.02,
            ),
            mk(
                Domain::Pulmonary,
                &[
                    ("786.05", 3.0),
                    ("786.52", 2.0),
                    ("786.2", 2.0),
                    ("786.3", 1.0),
                    ("799.02", 1.0),
                ],
                &[
                    ("CTA_CHEST", 3.0),
                    ("ABG", 2.0),
                    ("VQ_SCAN", 1.0),
                    ("SPUTUM_CX", 1.0),
                    ("PFT", 1.0),
                ],
                labs(&[
                    ("DDIMER", 3.0, &[(Pos, 0.75), (Neg, 0.25)]),
                    ("PO2", 2.0, &[(Low, 0.6), (Normal, 0.3), (Critical, 0.1)]),
                    ("PROCAL", 1.0, &[(High, 0.5), (Normal, 0.5)]),
                ]),
                &[
                    ("415.19", 3.0),
                    ("512.8", 1.0),
                    ("511.9", 1.0),
                    ("486", 2.0),
                ],
                0.02,
            ),
            mk(
                Domain::Gastro,
                &[
                    ("787.1", 3.0),
                    ("787.20", 1.0),
                    ("787.01", 2.0),
                    ("789.06", 2.0),
                    ("787.3", 1.0),
                ],
                &[
                    ("EGD", 2.0),
                    ("ABD_US", 2.0),
                    ("UGI_SERIES", 1.0),
                    ("BARIUM_SWALLOW", 1.0),
                    ("PH_STUDY", 1.0),
                ],
                labs(&[
                    ("LIPASE", 2.0, &[(Normal, 0.6), (High, 0.4)]),
                    ("HPYLORI", 1.0, &[(Pos, 0.5), (Neg, 0.5)]),
                    ("ALT", 1.0, &[(Normal, 0.6), (High, 0.4)]),
                ]),
                &[
                    ("530.81", 4.0),
                    ("530.5", 1.0),
                    ("530.4", 1.0),
                    ("533.50", 1.0),
                ],
                0.0,
            ),
            mk(
                Domain::Musculoskeletal,
                &[
                    ("786.59", 2.0),
                    ("724.1", 2.0),
                    ("729.1", 2.0),
                    ("719.41", 1.0),
                    ("959.11", 1.0),
                ],
                &[
                    ("XRAY_RIBS", 3.0),
                    ("XRAY_TSPINE", 1.0),
                    ("US_SOFT_TISSUE", 1.0),
                    ("ORTHO_CONSULT", 1.0),
                ],
                labs(&[
                    ("CK", 2.0, &[(High, 0.5), (Normal, 0.5)]),
                    ("ESR", 1.0, &[(High, 0.4), (Normal, 0.6)]),
                    ("CA", 1.0, &[(Normal, 0.9), (Low, 0.1)]),
                ]),
                &[("733.6", 3.0), ("807.00", 1.0), ("922.1", 1.0)],
                0.0,
            ),
            mk(
                Domain::Psychogenic,
                &[
                    ("799.2", 2.0),
                    ("786.01", 3.0),
                    ("780.4", 1.0),
                    ("780.52", 1.0),
                    ("308.9", 1.0),
                ],
                &[
                    ("PSYCH_EVAL", 3.0),
                    ("TOX_SCREEN", 2.0),
                    ("SW_CONSULT", 1.0),
                ],
                labs(&[
                    ("TOX", 2.0, &[(Neg, 0.7), (Pos, 0.3)]),
                    ("ETOH", 1.0, &[(Neg, 0.8), (Pos, 0.2)]),
                    ("TSH", 1.0, &[(Normal, 0.85), (Low, 0.1), (High, 0.05)]),
                ]),
                &[("300.01", 3.0), ("300.00", 2.0), ("306.1", 1.0)],
                0.0,
            ),
        ];
        GrammarSet { shared, domains }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub prevalence: [f64; 5],
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            prevalence: DEFAULT_MIXTURE,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.prevalence.iter().sum();
        if self
            .prevalence
            .iter()
            .any(|p| !(p.is_finite() && *p >= 0.0))
            || (s - 1.0).abs() > 1e-6
        {
            return Err(Error::Config(format!(
                "mixture {:?} must be non-negative and sum to 1",
                self.prevalence
            )));
        }
        Ok(())
    }

    /// Counts for `total` episodes by largest remainder.
    pub fn counts(&self, total: usize) -> [usize; 5] {
        let v = largest_remainder(&self.prevalence, total);
        [v[0], v[1], v[2], v[3], v[4]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    /// Explicit per-domain counts; when absent `mixture` and `total` apply.
    #[serde(default)]
    pub counts: Option<[usize; 5]>,
    #[serde(default)]
    pub mixture: MixtureSpec,
    #[serde(default)]
    pub total: usize,
    pub seed: u64,
    pub k: usize,
    /// Probability that an episode carries a second domain.
    #[serde(default)]
    pub multi_label_rate: f64,
}

impl CohortConfig {
    pub fn resolved_counts(&self) -> Result<[usize; 5]> {
        match self.counts {
            Some(c) => Ok(c),
            None => {
                self.mixture.validate()?;
                Ok(self.mixture.counts(self.total))
            }
        }
    }
}

/// Largest-remainder apportionment of `total` by `weights`. Ties go to the
/// lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T], weight: impl Fn(&T) -> f64) -> &'a T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut u = rng.random::<f64>() * total;
    for it in items {
        u -= weight(it);
        if u < 0.0 {
            return it;
        }
    }
    items.last().expect("non-empty pool")
}

struct Sources<'a> {
    shared: &'a SharedPool,
    primary: &'a DomainGrammar,
    secondary: Option<&'a DomainGrammar>,
}

impl Sources<'_> {
    /// `None` selects the shared pool.
    fn source(&self, rng: &mut impl Rng) -> Option<&DomainGrammar> {
        if rng.random::<f64>() < self.primary.signal_strength {
            match self.secondary {
                Some(s) if rng.random::<bool>() => Some(s),
                _ => Some(self.primary),
            }
        } else {
            None
        }
    }

    fn initial(&self, rng: &mut impl Rng, t: u32) -> ClinicalEvent {
        let pool = match self.source(rng) {
            Some(g) => &g.initial_codes,
            None => &self.shared.initial_codes,
        };
        ClinicalEvent::diag(pick(rng, pool, |c| c.weight).code.clone(), t)
    }

    fn order(&self, rng: &mut impl Rng, t: u32) -> ClinicalEvent {
        let pool = match self.source(rng) {
            Some(g) => &g.order_pool,
            None => &self.shared.order_pool,
        };
        ClinicalEvent::order(pick(rng, pool, |c| c.weight).code.clone(), t)
    }

    fn lab(&self, rng: &mut impl Rng, t: u32) -> ClinicalEvent {
        let pool = match self.source(rng) {
            Some(g) => &g.lab_pool,
            None => &self.shared.lab_pool,
        };
        let spec = pick(rng, pool, |l| l.weight);
        let bin = pick(rng, &spec.bins, |b| b.weight).bin;
        ClinicalEvent::lab(spec.test.clone(), bin, t)
    }
}

/// One diagnostic journey: presenting symptom codes at t=0, then rounds of
/// orders followed by lab results, then the conclusive diagnosis.
fn generate_episode(
    index: usize,
    domain: Domain,
    grammars: &GrammarSet,
    cfg: &CohortConfig,
) -> Episode {
    let mut rng = stream_rng(cfg.seed, index as u64 + 1);
    let primary = grammars.grammar(domain);
    let secondary = if cfg.multi_label_rate > 0.0 && rng.random::<f64>() < cfg.multi_label_rate {
        let others: Vec<Domain> = Domain::ALL.into_iter().filter(|d| *d != domain).collect();
        Some(grammars.grammar(*others.choose(&mut rng).expect("four other domains")))
    } else {
        None
    };
    let src = Sources {
        shared: &grammars.shared,
        primary,
        secondary,
    };
    let (lo, hi) = primary.length_range;
    let n = rng.random_range(lo..=hi);

    let mut events = Vec::with_capacity(n + 1);
    events.push(src.initial(&mut rng, 0));
    if n > 1 && rng.random::<f64>() < 0.3 {
        events.push(src.initial(&mut rng, 0));
    }
    let mut t: u32 = rng.random_range(5..=30);
    while events.len() < n {
        let n_orders = rng.random_range(1..=2usize).min(n - events.len());
        for _ in 0..n_orders {
            events.push(src.order(&mut rng, t));
        }
        if events.len() >= n {
            break;
        }
        t += rng.random_range(20..=90);
        let n_labs = rng.random_range(1..=3usize).min(n - events.len());
        for _ in 0..n_labs {
            events.push(src.lab(&mut rng, t));
        }
        let u = rng.random::<f64>();
        t += if u < 0.15 {
            rng.random_range(400..=600)
        } else if u < 0.45 {
            rng.random_range(60..=200)
        } else {
            rng.random_range(10..=50)
        };
    }
    let gold = pick(&mut rng, &primary.gold_codes, |c| c.weight)
        .code
        .clone();
    let time_feats = compute_time_feats(&events);
    events.push(ClinicalEvent::diag(
        gold.clone(),
        t + rng.random_range(30..=240),
    ));
    let danger = rng.random::<f64>() < primary.danger_rate;

    let mut labels = DomainSet::single(domain);
    if let Some(s) = secondary {
        labels.insert(s.domain);
    }
    Episode {
        episode_id: format!("ep{index:06}"),
        events,
        time_feats,
        labels,
        gold,
        danger,
    }
}

/// Generate a cohort. Deterministic for a given seed.
pub fn generate_cohort(cfg: &CohortConfig, grammars: &GrammarSet) -> Result<Vec<Episode>> {
    grammars.validate(cfg.k)?;
    if !(0.0..=1.0).contains(&cfg.multi_label_rate) {
        return Err(Error::Config(format!(
            "multi_label_rate {} outside [0,1]",
            cfg.multi_label_rate
        )));
    }
    let counts = cfg.resolved_counts()?;
    let mut assignment: Vec<Domain> = Domain::ALL
        .iter()
        .zip(counts)
        .flat_map(|(d, c)| std::iter::repeat_n(*d, c))
        .collect();
    assignment.shuffle(&mut stream_rng(cfg.seed, 0));
    let idx: Vec<(usize, Domain)> = assignment.into_iter().enumerate().collect();
    Ok(par::map(&idx, |&(i, d)| {
        generate_episode(i, d, grammars, cfg)
    }))
}

/// Merge records sharing an `episode_id`: longest event list retained,
/// non-empty `time_feats` preferred, labels OR-ed.
pub fn merge_records(records: &[Episode]) -> Result<Episode> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("merge of zero records".into()))?;
    if let Some(r) = records.iter().find(|r| r.episode_id != first.episode_id) {
        return Err(Error::Data(format!(
            "cannot merge episodes {} and {}",
            first.episode_id, r.episode_id
        )));
    }
    let mut best = first;
    for r in &records[1..] {
        if r.events.len() > best.events.len() {
            best = r;
        }
    }
    let mut out = best.clone();
    if out.time_feats.is_empty() {
        if let Some(r) = records.iter().find(|r| !r.time_feats.is_empty()) {
            out.time_feats = r.time_feats.clone();
        }
    }
    if out.gold.is_empty() {
        if let Some(r) = records.iter().find(|r| !r.gold.is_empty()) {
            out.gold = r.gold.clone();
        }
    }
    out.labels = records
        .iter()
        .fold(DomainSet::EMPTY, |acc, r| acc.union(r.labels));
    out.danger = records.iter().any(|r| r.danger);
    Ok(out)
}

/// Group records by id (first-seen order) and merge each group.
pub fn ingest(records: Vec<Episode>) -> Result<Vec<Episode>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Episode>> = HashMap::new();
    for r in records {
        let g = groups.entry(r.episode_id.clone()).or_default();
        if g.is_empty() {
            order.push(r.episode_id.clone());
        }
        g.push(r);
    }
    order.iter().map(|id| merge_records(&groups[id])).collect()
}

/// Sorted indices of a seeded uniform subsample of `k` out of `n`.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if k >= n {
        return idx;
    }
    idx.shuffle(&mut stream_rng(seed, 0));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Mixture-preserving subsample of size `min(target, N)`; `target = 0`
/// returns the input unchanged. Output keeps input order.
pub fn proportional_sample(episodes: &[Episode], target: usize, seed: u64) -> Vec<Episode> {
    if target == 0 || target >= episodes.len() {
        return episodes.to_vec();
    }
    let mut census = [0f64; 5];
    for e in episodes {
        for d in e.labels.iter() {
            census[d.index()] += 1.0;
        }
    }
    let quotas = largest_remainder(&census, target);
    let mut selected = vec![false; episodes.len()];
    let mut filled = [0usize; 5];
    let mut total = 0;

    // exclusive episodes first, then any episode carrying the domain
    for pass in 0..2 {
        for d in Domain::ALL {
            let mut cands: Vec<usize> = (0..episodes.len())
                .filter(|&i| {
                    !selected[i]
                        && if pass == 0 {
                            episodes[i].labels == DomainSet::single(d)
                        } else {
                            episodes[i].labels.contains(d)
                        }
                })
                .collect();
            cands.shuffle(&mut stream_rng(seed, 1 + (pass * 5 + d.index()) as u64));
            for i in cands {
                if filled[d.index()] >= quotas[d.index()] || total >= target {
                    break;
                }
                selected[i] = true;
                filled[d.index()] += 1;
                total += 1;
            }
        }
    }
    if total < target {
        let mut rest: Vec<usize> = (0..episodes.len()).filter(|&i| !selected[i]).collect();
        rest.shuffle(&mut stream_rng(seed, 100));
        for i in rest.into_iter().take(target - total) {
            selected[i] = true;
        }
    }
    episodes
        .iter()
        .zip(selected)
        .filter(|(_, s)| *s)
        .map(|(e, _)| e.clone())
        .collect()
}
