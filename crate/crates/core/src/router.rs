//! One-vs-rest logistic router with Platt calibration.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::event_schema::{Domain, DomainSet, Vocabulary};
use crate::par;
use crate::prefix_features::{prefix_document, Featurizer, PrefixRow, DEFAULT_K, DEFAULT_SVD_RANK};
use crate::synth_cohort::{largest_remainder, stream_rng};

pub const DEFAULT_C: f64 = 2.0;
pub const DEFAULT_MAX_ITER: usize = 3000;
pub const GRAD_TOL: f64 = 1e-6;
/// Relative objective decrease treated as round-off; three such steps in a
/// row end the fit.
pub const F_TOL: f64 = 16.0 * f64::EPSILON;
const PROB_EPS: f64 = 1e-15;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logloss_from_logit(s: f64, y: bool) -> f64 {
    softplus(s) - if y { s } else { 0.0 }
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.70,
            dev: 0.10,
            test: 0.20,
            seed: 0,
        }
    }
}

/// Episode indices per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Episode-level split stratified on (any positive label, primary domain).
///
/// Global split sizes follow largest-remainder rounding of the fractions;
/// inside the stratum-sorted order each episode goes to the split furthest
/// behind its running target, which keeps every stratum within one episode
/// of proportional.
pub fn split(labels: &[DomainSet], spec: &SplitSpec) -> Result<Split> {
    let fr = [spec.train, spec.dev, spec.test];
    if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0))
        || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fr:?} must be non-negative and sum to 1"
        )));
    }
    let n = labels.len();
    if n < 10 {
        return Err(Error::Data(format!(
            "split needs at least 10 episodes, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, 0x5911));
    let stratum = |i: usize| {
        let l = labels[i];
        (!l.is_empty(), l.primary().map_or(usize::MAX, Domain::index))
    };
    order.sort_by_key(|&i| stratum(i));

    let targets = largest_remainder(&fr, n);
    let mut assigned = [0usize; 3];
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (pos, &i) in order.iter().enumerate() {
        let mut best = None;
        let mut best_def = f64::NEG_INFINITY;
        for s in 0..3 {
            if assigned[s] >= targets[s] {
                continue;
            }
            let def = targets[s] as f64 * (pos + 1) as f64 / n as f64 - assigned[s] as f64;
            if def > best_def {
                best_def = def;
                best = Some(s);
            }
        }
        let s = best.expect("targets sum to n");
        assigned[s] += 1;
        out[s].push(i);
    }
    for o in out.iter_mut() {
        o.sort_unstable();
    }
    let [train, dev, test] = out;
    for d in Domain::ALL {
        for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
            if !part.iter().any(|&i| labels[i].contains(d)) {
                log::warn!("{d} has no positive episode in the {name} split");
            }
        }
    }
    Ok(Split { train, dev, test })
}

// ---------------------------------------------------------------------------
// Logistic heads

/// Scoring interface for router heads.
pub trait ScoringHead {
    fn domain(&self) -> Domain;
    fn raw_score(&self, z: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub domain: Domain,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl ScoringHead for LogisticHead {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn raw_score(&self, z: &[f64]) -> f64 {
        self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOptions {
    pub c: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            max_iter: DEFAULT_MAX_ITER,
            grad_tol: GRAD_TOL,
        }
    }
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    w: &'a [f64],
    dim: usize,
    inv_c: f64,
}

impl Problem<'_> {
    /// Objective and gradient at `theta = [weights; bias]`.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.dim;
        let idx: Vec<usize> = (0..self.x.len()).collect();
        let acc = par::chunked_sum(&idx, d + 2, |_, chunk, acc| {
            for &i in chunk {
                let xi = &self.x[i];
                let s = xi.iter().zip(&theta[..d]).map(|(a, b)| a * b).sum::<f64>() + theta[d];
                let wi = self.w[i];
                acc[d + 1] += wi * logloss_from_logit(s, self.y[i]);
                let r = wi * (sigmoid(s) - if self.y[i] { 1.0 } else { 0.0 });
                for (g, x) in acc[..d].iter_mut().zip(xi) {
                    *g += r * x;
                }
                acc[d] += r;
            }
        });
        let mut grad = acc[..d + 1].to_vec();
        let mut f = acc[d + 1];
        for j in 0..d {
            f += 0.5 * self.inv_c * theta[j] * theta[j];
            grad[j] += self.inv_c * theta[j];
        }
        (f, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize `Σ wᵢ·logloss + ‖weights‖²/(2C)` (bias unpenalized) with L-BFGS
/// and a backtracking Armijo line search. Stops at gradient norm ≤
/// `grad_tol`, when the objective stalls at round-off ([`F_TOL`]), or after
/// `max_iter` iterations.
pub fn fit_head(
    domain: Domain,
    x: &[Vec<f64>],
    y: &[bool],
    weights: &[f64],
    opts: HeadOptions,
) -> Result<LogisticHead> {
    if x.len() != y.len() || x.len() != weights.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len().min(weights.len()),
        });
    }
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Degenerate(format!(
            "{domain} head has a single class ({pos} positives of {})",
            y.len()
        )));
    }
    if !(opts.c > 0.0) {
        return Err(Error::Config(format!("C must be positive, got {}", opts.c)));
    }
    let dim = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            got: r.len(),
        });
    }
    let prob = Problem {
        x,
        y,
        w: weights,
        dim,
        inv_c: 1.0 / opts.c,
    };

    const MEMORY: usize = 10;
    let mut theta = vec![0.0; dim + 1];
    let (mut f, mut g) = prob.eval(&theta);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iters = 0;
    let mut converged = norm(&g) <= opts.grad_tol;
    let mut stalled = 0;
    while !converged && iters < opts.max_iter {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(yv) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match hist.back() {
            Some((s, yv, _)) => dot(s, yv) / dot(yv, yv),
            None => 1.0 / norm(&g).max(1.0),
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v / norm(&g).max(1.0)).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (fc, gc) = prob.eval(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        iters += 1;
        let Some((cand, fc, gc)) = accepted else {
            // no decrease representable in floating point
            break;
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm(&s) * norm(&yv) {
            if hist.len() == MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, yv, 1.0 / sy));
        }
        theta = cand;
        let rel = (f - fc) / f.abs().max(fc.abs()).max(1.0);
        stalled = if rel <= F_TOL { stalled + 1 } else { 0 };
        f = fc;
        g = gc;
        converged = norm(&g) <= opts.grad_tol || stalled >= 3;
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{domain} head parameters")));
    }
    let bias = theta.pop().expect("bias");
    Ok(LogisticHead {
        domain,
        weights: theta,
        bias,
        c: opts.c,
        iterations: iters,
        grad_norm: norm(&g),
        converged,
    })
}

// ---------------------------------------------------------------------------
// Calibration

/// Maps a raw score `s` to `σ(a·s + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlattCalibrator {
    pub a: f64,
    pub b: f64,
    /// Per-fold parameters fitted on the complement of each fold.
    pub fold_params: Vec<(f64, f64)>,
    /// Pooled out-of-fold log loss of the per-fold fits.
    pub oof_logloss: f64,
    pub identity: bool,
}

impl PlattCalibrator {
    pub fn identity() -> Self {
        Self {
            a: 1.0,
            b: 0.0,
            fold_params: Vec::new(),
            oof_logloss: f64::NAN,
            identity: true,
        }
    }

    pub fn apply(&self, s: f64) -> f64 {
        sigmoid(self.a * s + self.b).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }
}

/// Newton's method for `min Σ logloss(σ(a·s + b), y)`.
fn platt_newton(scores: &[f64], y: &[bool]) -> (f64, f64) {
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let n = y.len() as f64;
    let prior = ((pos + 0.5) / (n - pos + 0.5)).ln();
    let obj = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(y)
            .map(|(&s, &yi)| logloss_from_logit(a * s + b, yi))
            .sum()
    };
    let (mut a, mut b) = (0.0, prior);
    let mut f = obj(a, b);
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&s, &yi) in scores.iter().zip(y) {
            let p = sigmoid(a * s + b);
            let r = p - if yi { 1.0 } else { 0.0 };
            let h = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += h * s * s;
            hab += h * s;
            hbb += h;
        }
        if ga.abs().max(gb.abs()) < 1e-10 * n.max(1.0) {
            break;
        }
        let ridge = 1e-12 * (haa + hbb) + 1e-300;
        let (haa, hbb) = (haa + ridge, hbb + ridge);
        let det = haa * hbb - hab * hab;
        let (da, db) = if det > 0.0 {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            (-ga, -gb)
        };
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-12 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = obj(na, nb);
            if nf.is_finite() && nf <= f + 1e-4 * step * (ga * da + gb * db) {
                a = na;
                b = nb;
                f = nf;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (a, b)
}

/// Platt scaling on development scores. Folds give out-of-fold diagnostics;
/// the final `(a, b)` is refit on all pooled pairs. A single-class dev set
/// yields the identity calibration.
pub fn platt_fit(scores: &[f64], y: &[bool], folds: usize) -> PlattCalibrator {
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() || scores.len() != y.len() {
        log::warn!(
            "platt calibration skipped: dev labels are single-class ({pos} of {})",
            y.len()
        );
        return PlattCalibrator::identity();
    }
    let folds = folds.max(1).min(scores.len());
    let mut fold_params = Vec::with_capacity(folds);
    let mut oof = 0.0;
    if folds > 1 {
        for f in 0..folds {
            let (mut ts, mut ty) = (Vec::new(), Vec::new());
            for i in (0..scores.len()).filter(|i| i % folds != f) {
                ts.push(scores[i]);
                ty.push(y[i]);
            }
            let (a, b) = if ty.iter().any(|&v| v) && ty.iter().any(|&v| !v) {
                platt_newton(&ts, &ty)
            } else {
                (1.0, 0.0)
            };
            fold_params.push((a, b));
            for i in (0..scores.len()).filter(|i| i % folds == f) {
                oof += logloss_from_logit(a * scores[i] + b, y[i]);
            }
        }
        oof /= scores.len() as f64;
    }
    let (a, b) = platt_newton(scores, y);
    PlattCalibrator {
        a,
        b,
        fold_params,
        oof_logloss: oof,
        identity: false,
    }
}

/// Temperature `T` minimizing the cross-entropy of `σ(s/T)`, searched over
/// `[0.05, 20]` by golden section on `ln T`.
pub fn temperature_fit(logits: &[f64], y: &[bool]) -> f64 {
    let obj = |t: f64| -> f64 {
        logits
            .iter()
            .zip(y)
            .map(|(&s, &yi)| logloss_from_logit(s / t, yi))
            .sum()
    };
    golden_section(|lt| obj(lt.exp()), 0.05f64.ln(), 20f64.ln(), 1e-10).exp()
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// Router model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub k: usize,
    pub use_time: bool,
    pub use_weights: bool,
    pub calibrate: bool,
    pub c: f64,
    pub max_iter: usize,
    pub svd_rank: usize,
    pub platt_folds: usize,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            use_time: false,
            use_weights: true,
            calibrate: true,
            c: DEFAULT_C,
            max_iter: DEFAULT_MAX_ITER,
            svd_rank: DEFAULT_SVD_RANK,
            platt_folds: 3,
            seed: 0,
        }
    }
}

pub const ROUTER_FORMAT: &str = "consult-router/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub format: String,
    pub config: RouterConfig,
    pub config_hash: String,
    pub data_fingerprint: String,
    pub featurizer: Featurizer,
    pub heads: Vec<LogisticHead>,
    pub calibrators: Vec<PlattCalibrator>,
}

/// Prefix rows with their feature vectors.
pub struct FeatureTable<'a> {
    pub rows: &'a [PrefixRow],
    pub x: Vec<Vec<f64>>,
}

impl<'a> FeatureTable<'a> {
    pub fn new(rows: &'a [PrefixRow], x: Vec<Vec<f64>>) -> Self {
        Self { rows, x }
    }

    pub fn build(rows: &'a [PrefixRow], featurizer: &Featurizer, vocab: &Vocabulary) -> Self {
        Self {
            rows,
            x: featurizer.featurize_rows(rows, vocab),
        }
    }

    pub fn labels_for(&self, d: Domain) -> Vec<bool> {
        self.rows.iter().map(|r| r.labels.contains(d)).collect()
    }
}

/// SHA-256 over the episode ids, prefix lengths and labels of a row set.
pub fn rows_fingerprint(rows: &[PrefixRow]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        h.update(r.episode_id.as_bytes());
        h.update([0, r.ell as u8, r.labels.bits()]);
        for t in &r.tokens {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl RouterModel {
    /// Fit the featurizer and heads on `train`, calibrate on `dev`.
    pub fn train(
        train: &[PrefixRow],
        dev: &[PrefixRow],
        vocab: &Vocabulary,
        cfg: &RouterConfig,
        config_hash: &str,
    ) -> Result<Self> {
        let docs: Vec<String> = train
            .iter()
            .map(|r| prefix_document(&r.tokens, vocab))
            .collect();
        let featurizer = Featurizer::fit(&docs, cfg.svd_rank, cfg.use_time, cfg.seed)?;
        let tr = FeatureTable::build(train, &featurizer, vocab);
        let dv = FeatureTable::build(dev, &featurizer, vocab);
        Self::fit(featurizer, &tr, &dv, cfg, config_hash)
    }

    /// Fit heads on precomputed training features and calibrate on dev.
    pub fn fit(
        featurizer: Featurizer,
        train: &FeatureTable<'_>,
        dev: &FeatureTable<'_>,
        cfg: &RouterConfig,
        config_hash: &str,
    ) -> Result<Self> {
        if train
            .x
            .iter()
            .chain(&dev.x)
            .any(|z| z.len() != featurizer.dim())
        {
            return Err(Error::DimMismatch {
                expected: featurizer.dim(),
                got: train.x.first().map_or(0, Vec::len),
            });
        }
        let weights: Vec<f64> = if cfg.use_weights {
            train.rows.iter().map(|r| r.weight).collect()
        } else {
            vec![1.0; train.rows.len()]
        };
        let opts = HeadOptions {
            c: cfg.c,
            max_iter: cfg.max_iter,
            grad_tol: GRAD_TOL,
        };
        let heads = par::map(&Domain::ALL, |&d| {
            fit_head(d, &train.x, &train.labels_for(d), &weights, opts)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut model = Self {
            format: ROUTER_FORMAT.to_string(),
            config: cfg.clone(),
            config_hash: config_hash.to_string(),
            data_fingerprint: rows_fingerprint(train.rows),
            featurizer,
            heads,
            calibrators: vec![PlattCalibrator::identity(); Domain::COUNT],
        };
        if cfg.calibrate {
            model.calibrate(dev);
        }
        Ok(model)
    }

    pub fn calibrate(&mut self, dev: &FeatureTable<'_>) {
        let cals = par::map(&self.heads, |h| {
            let scores: Vec<f64> = dev.x.iter().map(|z| h.raw_score(z)).collect();
            platt_fit(&scores, &dev.labels_for(h.domain), self.config.platt_folds)
        });
        self.calibrators = cals;
    }

    pub fn dim(&self) -> usize {
        self.featurizer.dim()
    }

    pub fn predict_raw(&self, z: &[f64]) -> Result<[f64; 5]> {
        if z.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let mut out = [0.0; 5];
        for (o, h) in out.iter_mut().zip(&self.heads) {
            *o = h.raw_score(z);
        }
        Ok(out)
    }

    /// Per-head calibrated probabilities; not normalized across domains.
    pub fn predict_proba(&self, z: &[f64]) -> Result<[f64; 5]> {
        let raw = self.predict_raw(z)?;
        Ok(self.calibrate_scores(&raw))
    }

    pub fn calibrate_scores(&self, raw: &[f64; 5]) -> [f64; 5] {
        let mut out = [0.0; 5];
        for ((o, s), c) in out.iter_mut().zip(raw).zip(&self.calibrators) {
            *o = c.apply(*s);
        }
        out
    }

    pub fn featurize(&self, row: &PrefixRow, vocab: &Vocabulary) -> Vec<f64> {
        self.featurizer.featurize_row(row, vocab)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut m: RouterModel = serde_json::from_slice(bytes)?;
        if m.format != ROUTER_FORMAT {
            return Err(Error::Data(format!(
                "router checkpoint format {:?}, expected {ROUTER_FORMAT:?}",
                m.format
            )));
        }
        if m.heads.len() != Domain::COUNT || m.calibrators.len() != Domain::COUNT {
            return Err(Error::Data(
                "router checkpoint must hold five heads and calibrators".into(),
            ));
        }
        m.featurizer.restore_index();
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_1d() {
        let x = vec![vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]];
        let y = vec![false, false, true, true];
        let h = fit_head(Domain::Cardiac, &x, &y, &[1.0; 4], HeadOptions::default()).unwrap();
        assert!(h.converged, "grad {}", h.grad_norm);
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(h.raw_score(xi) > 0.0, *yi);
        }
        // stationarity of the weighted, penalized objective
        let g: f64 = x
            .iter()
            .zip(&y)
            .map(|(xi, &yi)| (sigmoid(h.raw_score(xi)) - yi as u8 as f64) * xi[0])
            .sum::<f64>()
            + h.weights[0] / DEFAULT_C;
        assert!(g.abs() < 1e-6);
    }

    #[test]
    fn symmetric_boundary_at_zero() {
        let x = vec![vec![-1.0], vec![1.0]];
        let y = vec![false, true];
        let opts = HeadOptions {
            c: 1e12,
            max_iter: 3000,
            grad_tol: 1e-6,
        };
        let h = fit_head(Domain::Cardiac, &x, &y, &[1.0, 1.0], opts).unwrap();
        assert!(h.bias.abs() < 1e-6, "{}", h.bias);
        assert!(h.weights[0] > 0.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            fit_head(
                Domain::Gastro,
                &x,
                &[true, true],
                &[1.0, 1.0],
                HeadOptions::default()
            ),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn doubled_weights_with_halved_c_same_argmin() {
        let mut rng = stream_rng(5, 1);
        let x: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let y: Vec<bool> = x
            .iter()
            .map(|r| r[0] + 0.5 * r[1] + 0.3 * (rng.random::<f64>() - 0.5) > 0.0)
            .collect();
        let w: Vec<f64> = (0..200).map(|i| 0.2 + (i % 5) as f64 * 0.2).collect();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let a = fit_head(
            Domain::Pulmonary,
            &x,
            &y,
            &w,
            HeadOptions {
                c: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        let b = fit_head(
            Domain::Pulmonary,
            &x,
            &y,
            &w2,
            HeadOptions {
                c: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        for (p, q) in a.weights.iter().zip(&b.weights) {
            assert!((p - q).abs() < 1e-5);
        }
        assert!((a.bias - b.bias).abs() < 1e-5);
    }

    #[test]
    fn platt_recovers_identity_on_calibrated_scores() {
        let mut rng = stream_rng(11, 2);
        let n = 10_000;
        let s: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() - 0.5) * 8.0).collect();
        let y: Vec<bool> = s
            .iter()
            .map(|&v| rng.random::<f64>() < sigmoid(v))
            .collect();
        let c = platt_fit(&s, &y, 3);
        assert!(
            (c.a - 1.0).abs() < 0.1 && c.b.abs() < 0.1,
            "a={} b={}",
            c.a,
            c.b
        );
        assert_eq!(c.fold_params.len(), 3);
        let flipped: Vec<bool> = y.iter().map(|v| !v).collect();
        assert!(platt_fit(&s, &flipped, 3).a < 0.0);
        assert!(platt_fit(&s, &vec![true; n], 3).identity);
    }

    #[test]
    fn temperature_recovers_scale() {
        let mut rng = stream_rng(12, 3);
        let n = 20_000;
        let s: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() - 0.5) * 6.0).collect();
        let y: Vec<bool> = s
            .iter()
            .map(|&v| rng.random::<f64>() < sigmoid(v))
            .collect();
        let t1 = temperature_fit(&s, &y);
        assert!((t1 - 1.0).abs() < 0.1, "{t1}");
        let s4: Vec<f64> = s.iter().map(|v| v * 4.0).collect();
        let t4 = temperature_fit(&s4, &y);
        assert!((t4 - 4.0).abs() < 0.5, "{t4}");
    }

    #[test]
    fn split_exact_fractions() {
        let labels: Vec<DomainSet> = (0..100)
            .map(|i| DomainSet::single(Domain::ALL[i % 5]))
            .collect();
        let s = split(&labels, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (70, 10, 20));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.dev)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split(&labels[..5], &SplitSpec::default()).is_err());
        let bad = SplitSpec {
            train: 0.8,
            ..SplitSpec::default()
        };
        assert!(matches!(split(&labels, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn predict_identity_head_is_half() {
        let h = LogisticHead {
            domain: Domain::Cardiac,
            weights: vec![0.0; 3],
            bias: 0.0,
            c: 2.0,
            iterations: 0,
            grad_norm: 0.0,
            converged: true,
        };
        assert_eq!(
            PlattCalibrator::identity().apply(h.raw_score(&[1.0, 2.0, 3.0])),
            0.5
        );
    }
}
