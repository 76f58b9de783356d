//! Iterative parallel decoding of MASK tokens.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::seed::derive;
use crate::transformer::BidirectionalTransformer;
use crate::vq::TokenGrid;

/// Anything that yields a `[h·w, K]` logit field (row-major) for a grid.
pub trait TokenPredictor {
    fn logits(&self, grid: &TokenGrid) -> Result<Vec<f32>>;
}

impl TokenPredictor for BidirectionalTransformer {
    fn logits(&self, grid: &TokenGrid) -> Result<Vec<f32>> {
        Ok(self.predict(grid)?.to_vec())
    }
}

/// Cumulative reveal counts `c_i = ⌈m(1 − cos(π(i+1)/2k))⌉`, clamped to `m`
/// and, when `m ≥ k`, raised to `c_{i−1} + 1` so every step commits at least
/// one cell. Returns per-step counts `f(i) = c_i − c_{i−1}`.
pub fn cosine_schedule(missing: usize, k: usize) -> Vec<usize> {
    let mut counts = Vec::with_capacity(k);
    let mut prev = 0usize;
    for i in 0..k {
        let frac = 1.0 - (std::f64::consts::PI * (i + 1) as f64 / (2 * k) as f64).cos();
        let mut c = ((missing as f64 * frac).ceil() as usize).min(missing);
        if i + 1 == k {
            c = missing;
        }
        if missing >= k {
            c = c.max(prev + 1);
        }
        counts.push(c - prev);
        prev = c;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSchedule {
    pub keep_counts: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub anneal: f64,
}

impl SampleSchedule {
    /// Cosine keep counts and `t_{i+1} = s · t_i`.
    pub fn new(missing: usize, steps: usize, t0: f64, anneal: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule", "need at least one step"));
        }
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(invalid("schedule", format!("temperature {t0} must be positive")));
        }
        if !(anneal > 0.0 && anneal <= 1.0) {
            return Err(invalid("schedule", format!("anneal {anneal} outside (0, 1]")));
        }
        let mut temperatures = Vec::with_capacity(steps);
        let mut t = t0;
        for _ in 0..steps {
            temperatures.push(t);
            t *= anneal;
        }
        Ok(SampleSchedule {
            keep_counts: cosine_schedule(missing, steps),
            temperatures,
            anneal,
        })
    }

    pub fn steps(&self) -> usize {
        self.keep_counts.len()
    }
}

/// One step's draws, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// Cells that were MASK before the step, ascending.
    pub cells: Vec<usize>,
    pub labels: Vec<usize>,
    /// Tempered probability of each drawn label.
    pub scores: Vec<f64>,
    /// Positions (into `cells`) that were committed.
    pub committed: Vec<usize>,
}

/// `softmax(z / t)` in f64.
pub fn tempered_probs(logits: &[f32], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|&v| v as f64 / temperature).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Inverse-CDF draw from `probs` with one uniform from `rng`.
fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

/// Draws a label at every MASK cell and commits the `keep` best-scoring
/// draws (ties to the lowest cell index). Each cell draws from its own
/// stream derived from `seed`, so results do not depend on visiting order.
pub fn sample_step(
    grid: &TokenGrid,
    model: &dyn TokenPredictor,
    keep: usize,
    temperature: f64,
    seed: u64,
) -> Result<(TokenGrid, StepTrace)> {
    if !(temperature > 0.0) {
        return Err(invalid("sample_step", format!("temperature {temperature} must be positive")));
    }
    let cells = grid.missing();
    let keep = if keep > cells.len() {
        warn!("sample_step: keep {keep} exceeds {} missing cells, clamped", cells.len());
        cells.len()
    } else {
        keep
    };
    let k = grid.k();
    let mut trace = StepTrace {
        cells: cells.clone(),
        labels: Vec::with_capacity(cells.len()),
        scores: Vec::with_capacity(cells.len()),
        committed: Vec::new(),
    };
    if cells.is_empty() {
        return Ok((grid.clone(), trace));
    }
    let logits = model.logits(grid)?;
    if logits.len() != grid.len() * k {
        return Err(invalid("sample_step", format!("{} logits for {} cells of K = {k}", logits.len(), grid.len())));
    }
    for &c in &cells {
        let probs = tempered_probs(&logits[c * k..(c + 1) * k], temperature);
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[c as u64]));
        let label = draw(&probs, &mut rng);
        trace.labels.push(label);
        trace.scores.push(probs[label]);
    }
    let mut order: Vec<usize> = (0..cells.len()).collect();
    // stable sort keeps ascending cell order among equal scores
    order.sort_by(|&a, &b| trace.scores[b].total_cmp(&trace.scores[a]));
    order.truncate(keep);
    order.sort_unstable();
    let mut out = grid.clone();
    for &j in &order {
        out.set(cells[j], trace.labels[j]);
    }
    trace.committed = order;
    Ok((out, trace))
}

/// Runs every step of `schedule`; step `i` uses seed `derive(seed, [i])`.
pub fn sample_all(
    grid: &TokenGrid,
    model: &dyn TokenPredictor,
    schedule: &SampleSchedule,
    seed: u64,
) -> Result<(TokenGrid, Vec<StepTrace>)> {
    let missing = grid.missing_count();
    let total: usize = schedule.keep_counts.iter().sum();
    if total != missing || schedule.temperatures.len() != schedule.keep_counts.len() {
        return Err(invalid(
            "sample_all",
            format!("schedule reveals {total} cells over {} steps; grid has {missing} missing", schedule.steps()),
        ));
    }
    let mut g = grid.clone();
    let mut traces = Vec::with_capacity(schedule.steps());
    for (i, (&keep, &t)) in schedule.keep_counts.iter().zip(&schedule.temperatures).enumerate() {
        if keep == 0 {
            continue;
        }
        let (next, trace) = sample_step(&g, model, keep, t, derive(seed, &[i as u64]))?;
        g = next;
        traces.push(trace);
    }
    debug_assert_eq!(g.missing_count(), 0);
    Ok((g, traces))
}
