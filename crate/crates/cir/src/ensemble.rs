//! Weighted fusion of score matrices with TPE weight search and iterative
//! best-score accumulation.
//!
//! The optimizer models good and bad trials with per-dimension kernel
//! density estimates (truncated Gaussians on [0, 1]) and proposes the
//! candidate maximizing the log-density ratio. The iterative stage feeds the
//! current best fused matrix back into the pool as one more candidate; each
//! later round seeds a one-hot trial on it, which makes the round objectives
//! non-decreasing by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{DatastoreError, ScoreMatrix};
use crate::metrics::{ensemble_objective, report_from_matrix, GroundTruth, MetricsError};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Datastore(#[from] DatastoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("pool members are misaligned: {0}")]
    Misaligned(String),
    #[error("{0}")]
    Invalid(String),
}

/// Weight vector over the candidate pool; the search space is [0, 1] per
/// dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub weights: Vec<f64>,
    pub objective: f64,
}

/// Named score matrices sharing identical query and gallery orderings.
#[derive(Debug, Clone)]
pub struct EnsemblePool {
    names: Vec<String>,
    matrices: Vec<ScoreMatrix>,
}

impl EnsemblePool {
    pub fn new(entries: Vec<(String, ScoreMatrix)>) -> Result<Self, EnsembleError> {
        if entries.is_empty() {
            return Err(EnsembleError::Invalid("pool must be non-empty".into()));
        }
        let mut pool = EnsemblePool { names: Vec::new(), matrices: Vec::new() };
        for (name, m) in entries {
            pool.push(name, m)?;
        }
        Ok(pool)
    }

    pub fn push(&mut self, name: String, m: ScoreMatrix) -> Result<(), EnsembleError> {
        if let Some(first) = self.matrices.first() {
            if first.query_ids != m.query_ids {
                return Err(EnsembleError::Misaligned(format!(
                    "`{name}` has different query ids"
                )));
            }
            if first.gallery_ids != m.gallery_ids {
                return Err(EnsembleError::Misaligned(format!(
                    "`{name}` has different gallery ids"
                )));
            }
        }
        self.names.push(name);
        self.matrices.push(m);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrix(&self, i: usize) -> &ScoreMatrix {
        &self.matrices[i]
    }
}

/// Elementwise weighted sum of the pool. Raw scores are summed with no
/// per-matrix normalization; the members are cosines on one scale.
pub fn weighted_sum(pool: &EnsemblePool, w: &[f64]) -> Result<ScoreMatrix, EnsembleError> {
    if w.len() != pool.len() {
        return Err(EnsembleError::Invalid(format!(
            "{} weights for a pool of {}",
            w.len(),
            pool.len()
        )));
    }
    let first = pool.matrix(0);
    let mut values = vec![0.0; first.values().len()];
    for (wi, m) in w.iter().zip(&pool.matrices) {
        for (acc, v) in values.iter_mut().zip(m.values()) {
            *acc += wi * v;
        }
    }
    Ok(ScoreMatrix::new(first.query_ids.clone(), first.gallery_ids.clone(), values)?)
}

/// Per-row z-score normalization, for externally supplied matrices whose
/// scales are not commensurate. Rows with zero spread become zero rows.
pub fn zscore_rows(m: &ScoreMatrix) -> Result<ScoreMatrix, EnsembleError> {
    let g = m.n_gallery();
    let mut values = Vec::with_capacity(m.values().len());
    for i in 0..m.n_queries() {
        let row = m.row(i);
        let mean = row.iter().sum::<f64>() / g as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g as f64;
        let std = var.sqrt();
        if std == 0.0 {
            values.extend(std::iter::repeat(0.0).take(g));
        } else {
            values.extend(row.iter().map(|v| (v - mean) / std));
        }
    }
    Ok(ScoreMatrix::new(m.query_ids.clone(), m.gallery_ids.clone(), values)?)
}

fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7.
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Mixture of truncated Gaussians on [0, 1], one component per observation,
/// plus one uniform prior component (as in the adaptive Parzen estimator the
/// search is modeled on) so sampling never collapses onto early clusters.
/// Bandwidths follow the neighbor-distance rule with a floor of
/// `1 / min(100, set size)`. An empty set degrades to the prior alone.
struct TruncatedKde {
    centers: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl TruncatedKde {
    fn fit(values: &[f64]) -> TruncatedKde {
        let mut centers = values.to_vec();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = centers.len();
        if k == 0 {
            return TruncatedKde { centers, bandwidths: Vec::new() };
        }
        let floor = 1.0 / (k.min(100) as f64);
        let bandwidths = (0..k)
            .map(|i| {
                let left = if i > 0 { centers[i] - centers[i - 1] } else { 0.0 };
                let right = if i + 1 < k { centers[i + 1] - centers[i] } else { 0.0 };
                left.max(right).max(floor)
            })
            .collect();
        TruncatedKde { centers, bandwidths }
    }

    fn pdf(&self, x: f64) -> f64 {
        // One uniform component (density 1 on [0, 1]) plus the observations.
        let mut acc = 1.0;
        for (&mu, &sigma) in self.centers.iter().zip(&self.bandwidths) {
            let z = normal_cdf((1.0 - mu) / sigma) - normal_cdf(-mu / sigma);
            let u = (x - mu) / sigma;
            let density = (-0.5 * u * u).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            acc += density / z;
        }
        acc / (self.centers.len() + 1) as f64
    }

    fn log_pdf(&self, x: f64) -> f64 {
        self.pdf(x).max(f64::MIN_POSITIVE).ln()
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let i = rng.index(self.centers.len() + 1);
        if i == self.centers.len() {
            return rng.uniform(); // the prior component
        }
        let (mu, sigma) = (self.centers[i], self.bandwidths[i]);
        loop {
            let x = mu + sigma * rng.normal();
            if (0.0..=1.0).contains(&x) {
                return x;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeSettings {
    /// Fraction of trials forming the "good" density (maximization: top
    /// gamma by objective).
    pub gamma: f64,
    /// Random trials before the model kicks in.
    pub n_startup: usize,
    /// Candidates sampled from the good density per suggestion.
    pub n_candidates: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        TpeSettings { gamma: 0.25, n_startup: 20, n_candidates: 24 }
    }
}

impl TpeSettings {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(EnsembleError::Invalid("gamma must be in (0, 1)".into()));
        }
        if self.n_candidates == 0 {
            return Err(EnsembleError::Invalid("n_candidates must be positive".into()));
        }
        Ok(())
    }
}

/// Proposes the next weight vector.
///
/// Before `n_startup` observations this is a uniform draw. Afterwards the
/// history splits at the `ceil(gamma * n)`-th best objective into good and
/// bad sets; per dimension, candidates drawn from the good KDE are ranked by
/// the summed log-density ratio and the best one is returned.
pub fn tpe_suggest(
    history: &[TrialRecord],
    n_dims: usize,
    settings: &TpeSettings,
    rng: &mut Rng,
) -> Vec<f64> {
    if history.len() < settings.n_startup.max(2) {
        return (0..n_dims).map(|_| rng.uniform()).collect();
    }
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[b].objective.partial_cmp(&history[a].objective).unwrap());
    let n_good = ((settings.gamma * history.len() as f64).ceil() as usize)
        .clamp(1, history.len() - 1);
    let good: Vec<usize> = order[..n_good].to_vec();
    let bad: Vec<usize> = order[n_good..].to_vec();

    let mut good_kdes = Vec::with_capacity(n_dims);
    let mut bad_kdes = Vec::with_capacity(n_dims);
    for d in 0..n_dims {
        let gv: Vec<f64> = good.iter().map(|&i| history[i].weights[d]).collect();
        let bv: Vec<f64> = bad.iter().map(|&i| history[i].weights[d]).collect();
        good_kdes.push(TruncatedKde::fit(&gv));
        bad_kdes.push(TruncatedKde::fit(&bv));
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..settings.n_candidates {
        let candidate: Vec<f64> = good_kdes.iter().map(|kde| kde.sample(rng)).collect();
        let score: f64 = candidate
            .iter()
            .enumerate()
            .map(|(d, &x)| good_kdes[d].log_pdf(x) - bad_kdes[d].log_pdf(x))
            .sum();
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, candidate));
        }
    }
    best.expect("n_candidates > 0").1
}

#[derive(Debug, Clone)]
pub struct TpeResult {
    pub best_weights: EnsembleWeights,
    pub best_matrix: ScoreMatrix,
    pub best_objective: f64,
    pub history: Vec<TrialRecord>,
}

fn evaluate(
    pool: &EnsemblePool,
    truth: &GroundTruth,
    ks: (usize, usize),
    w: &[f64],
) -> Result<(ScoreMatrix, f64), EnsembleError> {
    let fused = weighted_sum(pool, w)?;
    let report = report_from_matrix(&fused, truth, ks)?;
    Ok((fused, ensemble_objective(&report)))
}

/// TPE search for fusion weights maximizing `(R@k1 + R@k2) / 2`.
///
/// `seeded_trials` are evaluated first (they count toward `n_trials`); the
/// iterative stage uses this to guarantee monotone rounds. Fully
/// deterministic in `seed`.
pub fn tpe_optimize(
    pool: &EnsemblePool,
    truth: &GroundTruth,
    ks: (usize, usize),
    n_trials: usize,
    seed: u64,
    settings: &TpeSettings,
    seeded_trials: &[Vec<f64>],
) -> Result<TpeResult, EnsembleError> {
    settings.validate()?;
    if n_trials == 0 {
        return Err(EnsembleError::Invalid("n_trials must be at least 1".into()));
    }
    let mut rng = Rng::stream(seed, "tpe", &[]);
    let mut history: Vec<TrialRecord> = Vec::with_capacity(n_trials);
    let mut best: Option<(f64, Vec<f64>, ScoreMatrix)> = None;
    for t in 0..n_trials {
        let w = match seeded_trials.get(t) {
            Some(seeded) => {
                if seeded.len() != pool.len() {
                    return Err(EnsembleError::Invalid("seeded trial has wrong arity".into()));
                }
                seeded.clone()
            }
            None => tpe_suggest(&history, pool.len(), settings, &mut rng),
        };
        let (fused, objective) = evaluate(pool, truth, ks, &w)?;
        if !objective.is_finite() {
            return Err(EnsembleError::Invalid("non-finite objective".into()));
        }
        if best.as_ref().map_or(true, |(b, _, _)| objective > *b) {
            best = Some((objective, w.clone(), fused));
        }
        history.push(TrialRecord { weights: w, objective });
    }
    let (best_objective, weights, best_matrix) = best.expect("n_trials >= 1");
    Ok(TpeResult {
        best_weights: EnsembleWeights(weights),
        best_matrix,
        best_objective,
        history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub objective: f64,
    pub weights: Vec<f64>,
    /// Pool arity this round (grows by one per accumulation).
    pub pool_size: usize,
}

#[derive(Debug)]
pub struct IterativeResult {
    pub final_matrix: ScoreMatrix,
    pub final_objective: f64,
    pub rounds: Vec<RoundRecord>,
    pub history: Vec<Vec<TrialRecord>>,
    /// Pool member names at the last executed round; the final round's
    /// weights are aligned with these.
    pub pool_names: Vec<String>,
}

/// Iterative best-score accumulation.
///
/// Round 1 optimizes the given pool. Every later round appends the current
/// best fused matrix as one more candidate and re-optimizes with a one-hot
/// trial on it seeded first, so the objective sequence never decreases.
/// Stops early once the round-over-round gain drops below `stop_eps`.
pub fn iterative_ensemble(
    pool: &EnsemblePool,
    truth: &GroundTruth,
    ks: (usize, usize),
    rounds: usize,
    n_trials: usize,
    stop_eps: f64,
    seed: u64,
    settings: &TpeSettings,
) -> Result<IterativeResult, EnsembleError> {
    if rounds == 0 {
        return Err(EnsembleError::Invalid("rounds must be at least 1".into()));
    }
    let mut working = pool.clone();
    let mut round_records = Vec::new();
    let mut histories = Vec::new();
    let mut current: Option<(ScoreMatrix, f64)> = None;
    let mut pool_names = working.names().to_vec();
    for round in 0..rounds {
        let mut seeded = Vec::new();
        if round > 0 {
            let mut one_hot = vec![0.0; working.len()];
            *one_hot.last_mut().unwrap() = 1.0;
            seeded.push(one_hot);
        }
        let result = tpe_optimize(
            &working,
            truth,
            ks,
            n_trials,
            seed.wrapping_add(round as u64),
            settings,
            &seeded,
        )?;
        pool_names = working.names().to_vec();
        round_records.push(RoundRecord {
            round: round + 1,
            objective: result.best_objective,
            weights: result.best_weights.0.clone(),
            pool_size: working.len(),
        });
        histories.push(result.history);
        let gain = match &current {
            Some((_, prev)) => result.best_objective - prev,
            None => f64::INFINITY,
        };
        let stop = round > 0 && gain < stop_eps;
        current = Some((result.best_matrix, result.best_objective));
        if stop {
            break;
        }
        if round + 1 < rounds {
            let (m, _) = current.as_ref().unwrap();
            working.push(format!("h_best_r{}", round + 1), m.clone())?;
        }
    }
    let (final_matrix, final_objective) = current.expect("rounds >= 1");
    Ok(IterativeResult {
        final_matrix,
        final_objective,
        rounds: round_records,
        history: histories,
        pool_names,
    })
}
