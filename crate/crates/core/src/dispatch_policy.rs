//! Safety-first routing, threshold tuning, arbitration and audit records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_harness::{expected_experts, routing_recalls};
use crate::event_schema::{Domain, DomainSet};
use crate::par;

pub const FAIL_OPEN_FLOOR: f64 = 0.25;
pub const LIFE_CONSTRAINT: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_hi: f64,
    pub tau_lo: f64,
    #[serde(default = "default_floor")]
    pub fail_open_floor: f64,
}

fn default_floor() -> f64 {
    FAIL_OPEN_FLOOR
}

impl Thresholds {
    pub fn new(tau_hi: f64, tau_lo: f64) -> Self {
        Self {
            tau_hi,
            tau_lo,
            fail_open_floor: FAIL_OPEN_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.tau_hi) && unit(self.tau_lo) && unit(self.fail_open_floor))
            || self.tau_lo > self.tau_hi
        {
            return Err(Error::Config(format!("invalid thresholds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Top1Life,
    Top2,
    /// Top-2 widened with both life-threat domains.
    Top2Guard,
    FailOpen,
}

/// Policy variants. The default is the main-results policy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyOptions {
    /// When set, a top-2 route also includes Cardiac and Pulmonary whenever
    /// either of their probabilities reaches this value.
    #[serde(default)]
    pub life_guard: Option<f64>,
    /// Rule (b) selects the global argmax instead of the life-threat argmax.
    #[serde(default)]
    pub global_argmax: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub route: DomainSet,
    pub branch: Branch,
    pub probs: [f64; 5],
    pub thresholds: Thresholds,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<String>,
}

/// Index of the maximum over `candidates`; ties go to the earlier
/// (higher-priority) domain.
fn argmax(probs: &[f64; 5], candidates: &[Domain]) -> Domain {
    let mut best = candidates[0];
    for &d in &candidates[1..] {
        if probs[d.index()] > probs[best.index()] {
            best = d;
        }
    }
    best
}

fn top2(probs: &[f64; 5]) -> DomainSet {
    let mut order = Domain::ALL;
    order.sort_by(|a, b| {
        probs[b.index()]
            .total_cmp(&probs[a.index()])
            .then(a.priority().cmp(&b.priority()))
    });
    DomainSet::single(order[0]).with(order[1])
}

pub fn route(
    probs: &[f64; 5],
    thr: &Thresholds,
    danger: bool,
    opts: &PolicyOptions,
) -> Result<RouteDecision> {
    if let Some(p) = probs.iter().find(|p| p.is_nan()) {
        return Err(Error::NonFinite(format!("routing probability {p}")));
    }
    let decide = |route, branch| RouteDecision {
        route,
        branch,
        probs: *probs,
        thresholds: *thr,
        timestamp: None,
    };
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if danger || max < thr.fail_open_floor {
        return Ok(decide(DomainSet::ALL, Branch::FailOpen));
    }
    let life = [Domain::Cardiac, Domain::Pulmonary];
    let life_max = probs[0].max(probs[1]);
    if life_max >= thr.tau_hi {
        let pick = if opts.global_argmax {
            argmax(probs, &Domain::ALL)
        } else {
            argmax(probs, &life)
        };
        return Ok(decide(DomainSet::single(pick), Branch::Top1Life));
    }
    if max >= thr.tau_lo {
        let r = top2(probs);
        if let Some(g) = opts.life_guard {
            if life_max >= g && !DomainSet::LIFE.is_subset(r) {
                return Ok(decide(r.union(DomainSet::LIFE), Branch::Top2Guard));
            }
        }
        return Ok(decide(r, Branch::Top2));
    }
    Ok(decide(DomainSet::ALL, Branch::FailOpen))
}

// ---------------------------------------------------------------------------
// Threshold tuning

/// One development row as seen by the tuner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub probs: [f64; 5],
    pub labels: DomainSet,
    pub danger: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub points: Vec<(f64, f64)>,
}

impl Default for Grid {
    /// τ_hi ∈ {0.50, …, 0.95}, τ_lo ∈ {0.10, …, 0.50}, steps of 0.05, τ_lo ≤ τ_hi.
    fn default() -> Self {
        Self::from_percent_ranges((50, 95), (10, 50), 5)
    }
}

impl Grid {
    pub fn from_percent_ranges(hi: (u32, u32), lo: (u32, u32), step: u32) -> Self {
        let mut points = Vec::new();
        for h in (hi.0..=hi.1).step_by(step.max(1) as usize) {
            for l in (lo.0..=lo.1).step_by(step.max(1) as usize) {
                if l <= h {
                    points.push((h as f64 / 100.0, l as f64 / 100.0));
                }
            }
        }
        Self { points }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub life_recall: f64,
    pub expected_experts: f64,
    pub recall_any: f64,
    pub recall_all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub chosen: Thresholds,
    pub life_recall: f64,
    pub expected_experts: f64,
    pub constraint: f64,
    pub constraint_met: bool,
    pub table: Vec<FrontierPoint>,
}

impl TuneResult {
    pub fn write_frontier_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "tau_hi,tau_lo,life_recall,expected_experts,recall_any,recall_all"
        )?;
        for p in &self.table {
            writeln!(
                w,
                "{:.2},{:.2},{},{},{},{}",
                p.tau_hi, p.tau_lo, p.life_recall, p.expected_experts, p.recall_any, p.recall_all
            )?;
        }
        Ok(())
    }
}

/// Evaluate one grid point on the tuning rows.
pub fn evaluate_point(
    rows: &[TuneRow],
    thr: &Thresholds,
    opts: &PolicyOptions,
) -> Result<FrontierPoint> {
    let routes = rows
        .iter()
        .map(|r| route(&r.probs, thr, r.danger, opts).map(|d| d.route))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<DomainSet> = rows.iter().map(|r| r.labels).collect();
    let rec = routing_recalls(&routes, &truths)?;
    Ok(FrontierPoint {
        tau_hi: thr.tau_hi,
        tau_lo: thr.tau_lo,
        life_recall: rec
            .life_recall
            .ok_or_else(|| Error::UndefinedMetric("no life-threat rows".into()))?,
        expected_experts: expected_experts(&routes)?,
        recall_any: rec.recall_any,
        recall_all: rec.recall_all,
    })
}

/// Grid search: among points meeting the life-threat recall constraint,
/// minimize expected experts; otherwise maximize life-threat recall with
/// lower expected experts as tie-break. Remaining ties keep grid order.
pub fn tune_thresholds(
    rows: &[TuneRow],
    grid: &Grid,
    constraint: f64,
    floor: f64,
    opts: &PolicyOptions,
) -> Result<TuneResult> {
    if grid.points.is_empty() {
        return Err(Error::Config("empty threshold grid".into()));
    }
    if !rows.iter().any(|r| r.labels.intersects(DomainSet::LIFE)) {
        return Err(Error::UndefinedMetric(
            "tuning rows contain no life-threat episode".into(),
        ));
    }
    let points: Vec<Thresholds> = grid
        .points
        .iter()
        .filter(|(h, l)| l <= h)
        .map(|&(h, l)| Thresholds {
            tau_hi: h,
            tau_lo: l,
            fail_open_floor: floor,
        })
        .collect();
    let table = par::map(&points, |t| evaluate_point(rows, t, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let met: Vec<usize> = (0..table.len())
        .filter(|&i| table[i].life_recall >= constraint)
        .collect();
    let constraint_met = !met.is_empty();
    let pick = if constraint_met {
        met.iter().copied().fold(met[0], |b, i| {
            if table[i].expected_experts < table[b].expected_experts {
                i
            } else {
                b
            }
        })
    } else {
        (1..table.len()).fold(0, |b, i| {
            let (pi, pb) = (&table[i], &table[b]);
            if pi.life_recall > pb.life_recall
                || (pi.life_recall == pb.life_recall && pi.expected_experts < pb.expected_experts)
            {
                i
            } else {
                b
            }
        })
    };
    if !constraint_met {
        log::warn!(
            "no grid point reaches life-threat recall {constraint}; using the best available point"
        );
    }
    Ok(TuneResult {
        chosen: points[pick],
        life_recall: table[pick].life_recall,
        expected_experts: table[pick].expected_experts,
        constraint,
        constraint_met,
        table,
    })
}

// ---------------------------------------------------------------------------
// Arbitration and audit

/// A merged suggestion with the expert it is attributed to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributed {
    pub token: String,
    pub expert: Domain,
}

/// Priority-ordered merge; duplicates keep their highest-priority occurrence.
pub fn arbitrate(suggestions: &[(Domain, Vec<String>)]) -> Vec<Attributed> {
    let mut ordered: Vec<&(Domain, Vec<String>)> = suggestions.iter().collect();
    ordered.sort_by_key(|(d, _)| d.priority());
    let mut out: Vec<Attributed> = Vec::new();
    for (d, list) in ordered {
        for t in list {
            if !out.iter().any(|a| &a.token == t) {
                out.push(Attributed {
                    token: t.clone(),
                    expert: *d,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub episode_id: String,
    pub ell: usize,
    pub raw_scores: [f64; 5],
    pub probs: [f64; 5],
    pub thresholds: Thresholds,
    pub branch: Branch,
    pub route: DomainSet,
    pub arbitration: Vec<Attributed>,
    pub danger_flag: bool,
    pub timestamp: String,
}

impl AuditRecord {
    pub fn new(
        episode_id: &str,
        ell: usize,
        raw_scores: [f64; 5],
        decision: &RouteDecision,
        danger: bool,
        timestamp: &str,
    ) -> Self {
        Self {
            episode_id: episode_id.to_string(),
            ell,
            raw_scores,
            probs: decision.probs,
            thresholds: decision.thresholds,
            branch: decision.branch,
            route: decision.route,
            arbitration: Vec::new(),
            danger_flag: danger,
            timestamp: timestamp.to_string(),
        }
    }
}

/// Append-only JSONL audit sink.
pub struct AuditLog<W: Write> {
    out: W,
    written: usize,
}

impl<W: Write> AuditLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, written: 0 }
    }

    pub fn append(&mut self, rec: &AuditRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
