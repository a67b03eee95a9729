//! Discrimination, calibration, routing and compute metrics.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_schema::{Domain, DomainSet};
use crate::par;
use crate::synth_cohort::stream_rng;

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney estimate of P(score⁺ > score⁻); ties count ½.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group
        let rank = (i + j + 2) as f64 / 2.0;
        rank_sum += rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: step integration of precision over recall, with
/// tied scores forming a single threshold.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        tp += idx[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecalls {
    pub recall_any: f64,
    pub recall_all: f64,
    /// `None` when no evaluated episode carries a life-threat label.
    pub life_recall: Option<f64>,
    pub n: usize,
    pub n_life: usize,
    pub excluded: usize,
}

pub fn routing_recalls(routes: &[DomainSet], truths: &[DomainSet]) -> Result<RoutingRecalls> {
    if routes.len() != truths.len() {
        return Err(Error::DimMismatch {
            expected: truths.len(),
            got: routes.len(),
        });
    }
    let (mut any, mut all, mut n, mut life_hit, mut n_life, mut excluded) =
        (0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    for (&r, &y) in routes.iter().zip(truths) {
        if y.is_empty() {
            excluded += 1;
            continue;
        }
        n += 1;
        any += r.intersects(y) as usize;
        all += y.is_subset(r) as usize;
        if y.intersects(DomainSet::LIFE) {
            n_life += 1;
            life_hit += r.intersects(DomainSet::LIFE) as usize;
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} episodes with an empty truth set excluded from routing recalls");
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "no episode with a non-empty truth set".into(),
        ));
    }
    Ok(RoutingRecalls {
        recall_any: any as f64 / n as f64,
        recall_all: all as f64 / n as f64,
        life_recall: (n_life > 0).then(|| life_hit as f64 / n_life as f64),
        n,
        n_life,
        excluded,
    })
}

/// Mean route size.
pub fn expected_experts(routes: &[DomainSet]) -> Result<f64> {
    if routes.is_empty() {
        return Err(Error::UndefinedMetric(
            "expected experts over zero decisions".into(),
        ));
    }
    Ok(routes.iter().map(|r| r.len() as f64).sum::<f64>() / routes.len() as f64)
}

pub fn compute_savings(expected: f64) -> f64 {
    1.0 - expected / Domain::COUNT as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub router_ms: f64,
    pub expert_ms: [f64; 5],
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            router_ms: 10.0,
            expert_ms: [50.0; 5],
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if self.router_ms < 0.0 || self.expert_ms.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(
                "latency constants must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn episode(&self, route: DomainSet) -> f64 {
        self.router_ms + route.iter().map(|d| self.expert_ms[d.index()]).sum::<f64>()
    }
}

/// Per-episode latencies and their mean.
pub fn latency(routes: &[DomainSet], lm: &LatencyModel) -> (Vec<f64>, f64) {
    let per: Vec<f64> = routes.iter().map(|&r| lm.episode(r)).collect();
    let mean = if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    };
    (per, mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub mean_prob: Option<f64>,
    pub empirical_rate: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub brier: f64,
    pub ece: f64,
    pub bins: Vec<ReliabilityBin>,
}

pub fn brier(probs: &[f64], labels: &[bool]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let e = p - if y { 1.0 } else { 0.0 };
            e * e
        })
        .sum::<f64>()
        / probs.len() as f64
}

pub fn calibration_metrics(
    probs: &[f64],
    labels: &[bool],
    bins: usize,
) -> Result<CalibrationReport> {
    if probs.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: labels.len(),
            got: probs.len(),
        });
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Data(format!("probability {p} outside [0, 1]")));
    }
    let bins = bins.max(1);
    let mut sum_p = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        sum_p[b] += p;
        sum_y[b] += y as u8 as f64;
        count[b] += 1;
    }
    let n = probs.len().max(1) as f64;
    let mut ece = 0.0;
    let table = (0..bins)
        .map(|b| {
            let c = count[b];
            let (mp, er) = if c > 0 {
                (Some(sum_p[b] / c as f64), Some(sum_y[b] / c as f64))
            } else {
                (None, None)
            };
            if let (Some(mp), Some(er)) = (mp, er) {
                ece += c as f64 / n * (mp - er).abs();
            }
            ReliabilityBin {
                bin: b,
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                mean_prob: mp,
                empirical_rate: er,
                count: c,
            }
        })
        .collect();
    Ok(CalibrationReport {
        brier: brier(probs, labels),
        ece,
        bins: table,
    })
}

/// Binary-relevance NDCG@k with log2 discounting.
pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], relevant: &[S], k: usize) -> f64 {
    if relevant.is_empty() {
        log::warn!("ndcg with an empty relevant set scored 0");
        return 0.0;
    }
    let k = k.max(1);
    let is_rel = |s: &str| relevant.iter().any(|r| r.as_ref() == s);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, s)| is_rel(s.as_ref()))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    dcg / ideal
}

/// `1[target ∈ top-k]`.
pub fn topk_hit<S: AsRef<str>>(ranked: &[S], target: &str, k: usize) -> f64 {
    ranked.iter().take(k).any(|s| s.as_ref() == target) as u8 as f64
}

/// Mean top-k recall over `(ranked list, target)` pairs.
pub fn topk_recall<S: AsRef<str>>(cases: &[(Vec<S>, String)], k: usize) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    cases.iter().map(|(r, t)| topk_hit(r, t, k)).sum::<f64>() / cases.len() as f64
}

/// Metric values per prefix length; `None` marks an undefined stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnytimeCurve {
    pub metric: String,
    pub values: Vec<(usize, Option<f64>)>,
}

impl AnytimeCurve {
    pub fn write_csv(curves: &[AnytimeCurve], mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "ell,metric,value")?;
        for c in curves {
            for (ell, v) in &c.values {
                match v {
                    Some(v) => writeln!(w, "{ell},{},{v}", c.metric)?,
                    None => writeln!(w, "{ell},{},", c.metric)?,
                }
            }
        }
        Ok(())
    }
}

/// Evaluate `f` on the row indices of each stratum `ℓ = 1..=k`.
pub fn anytime<F>(metric: &str, ells: &[usize], k: usize, f: F) -> AnytimeCurve
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    let values = par::map_range(k, |i| {
        let ell = i + 1;
        let idx: Vec<usize> = (0..ells.len()).filter(|&r| ells[r] == ell).collect();
        (ell, if idx.is_empty() { None } else { f(&idx).ok() })
    });
    AnytimeCurve {
        metric: metric.to_string(),
        values,
    }
}

/// Percentile at `q ∈ [0,1]` of sorted data with linear interpolation.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap over episodes. `metric` receives the resampled
/// episode indices (with repetition).
pub fn bootstrap_ci<F>(
    n_episodes: usize,
    metric: F,
    b: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    if n_episodes < 10 {
        return Err(Error::Data(format!(
            "bootstrap needs at least 10 episodes, got {n_episodes}"
        )));
    }
    if !(level > 0.0 && level < 1.0) || b < 2 {
        return Err(Error::Config(format!(
            "bootstrap level {level} and B={b} out of range"
        )));
    }
    let mut stats = par::map_range(b, |rep| {
        let mut rng = stream_rng(seed, rep as u64 + 1);
        let sample: Vec<usize> = (0..n_episodes)
            .map(|_| rng.random_range(0..n_episodes))
            .collect();
        metric(&sample)
    });
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&stats, alpha), percentile(&stats, 1.0 - alpha)))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    ConsultAll,
    FixedLife,
    Router,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::ConsultAll => "consult-all",
            Policy::FixedLife => "fixed-cardiac-pulmonary",
            Policy::Router => "router",
        }
    }

    /// Route for the fixed policies; `None` for the learned router.
    pub fn fixed_route(self) -> Option<DomainSet> {
        match self {
            Policy::ConsultAll => Some(DomainSet::ALL),
            Policy::FixedLife => Some(DomainSet::LIFE),
            Policy::Router => None,
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consult-all" => Ok(Policy::ConsultAll),
            "fixed-cardiac-pulmonary" | "fixed" => Ok(Policy::FixedLife),
            "router" => Ok(Policy::Router),
            _ => Err(Error::Config(format!("unknown policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub brier: f64,
    pub ece: f64,
    pub positives: usize,
    pub reliability: Vec<ReliabilityBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub policy: String,
    pub n: usize,
    pub per_domain: BTreeMap<String, DomainMetrics>,
    pub macro_roc_auc: Option<f64>,
    pub macro_pr_auc: Option<f64>,
    pub macro_brier: f64,
    pub recall_any: f64,
    pub recall_all: f64,
    pub life_recall: Option<f64>,
    pub expected_experts: f64,
    pub compute_savings: f64,
    pub latency_mean_ms: f64,
    pub route_sizes: BTreeMap<usize, usize>,
    pub extra: BTreeMap<String, f64>,
}

/// Per-domain discrimination and calibration over a probability table.
pub fn domain_metrics(
    probs: &[[f64; 5]],
    truths: &[DomainSet],
) -> Result<BTreeMap<String, DomainMetrics>> {
    let per = par::map(&Domain::ALL, |&d| -> Result<(String, DomainMetrics)> {
        let p: Vec<f64> = probs.iter().map(|r| r[d.index()]).collect();
        let y: Vec<bool> = truths.iter().map(|t| t.contains(d)).collect();
        let cal = calibration_metrics(&p, &y, 10)?;
        Ok((
            d.name().to_string(),
            DomainMetrics {
                roc_auc: roc_auc(&p, &y).ok(),
                pr_auc: pr_auc(&p, &y).ok(),
                brier: cal.brier,
                ece: cal.ece,
                positives: y.iter().filter(|&&v| v).count(),
                reliability: cal.bins,
            },
        ))
    });
    per.into_iter().collect()
}

fn macro_mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = vals.collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn build(
        policy: &str,
        probs: &[[f64; 5]],
        truths: &[DomainSet],
        routes: &[DomainSet],
        lm: &LatencyModel,
    ) -> Result<Self> {
        let per_domain = domain_metrics(probs, truths)?;
        let rec = routing_recalls(routes, truths)?;
        let e = expected_experts(routes)?;
        let mut route_sizes = BTreeMap::new();
        for r in routes {
            *route_sizes.entry(r.len()).or_insert(0) += 1;
        }
        Ok(Self {
            policy: policy.to_string(),
            n: routes.len(),
            macro_roc_auc: macro_mean(per_domain.values().map(|m| m.roc_auc)),
            macro_pr_auc: macro_mean(per_domain.values().map(|m| m.pr_auc)),
            macro_brier: per_domain.values().map(|m| m.brier).sum::<f64>() / Domain::COUNT as f64,
            per_domain,
            recall_any: rec.recall_any,
            recall_all: rec.recall_all,
            life_recall: rec.life_recall,
            expected_experts: e,
            compute_savings: compute_savings(e),
            latency_mean_ms: latency(routes, lm).1,
            route_sizes,
            extra: BTreeMap::new(),
        })
    }

    /// JSON with lexicographically sorted keys.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn write_domain_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "policy,domain,roc_auc,pr_auc,brier,ece,positives")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for d in Domain::ALL {
            let m = &self.per_domain[d.name()];
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.policy,
                d.name(),
                opt(m.roc_auc),
                opt(m.pr_auc),
                m.brier,
                m.ece,
                m.positives
            )?;
        }
        Ok(())
    }
}

/// Serialize through `serde_json::Value`, whose maps are key-sorted.
pub fn canonical_json<T: Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v)?;
    Ok(serde_json::to_string_pretty(&value)?)
}

/// Reports for consult-all, fixed Cardiac+Pulmonary and the router routes,
/// all on the same rows.
pub fn baselines(
    probs: &[[f64; 5]],
    truths: &[DomainSet],
    router_routes: &[DomainSet],
    lm: &LatencyModel,
) -> Result<Vec<MetricReport>> {
    [Policy::ConsultAll, Policy::FixedLife, Policy::Router]
        .iter()
        .map(|&p| {
            let routes = match p.fixed_route() {
                Some(r) => vec![r; truths.len()],
                None => router_routes.to_vec(),
            };
            MetricReport::build(p.name(), probs, truths, &routes, lm)
        })
        .collect()
}
