//! Timing of the search and of single updates, for checking how cost grows
//! with `d₁`, with the number of changed groups `t`, and with `|S|`.
//!
//! Timings are wall-clock; run inside a single-thread rayon pool for stable
//! numbers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{random_instance, InstanceShape};
use crate::problem::PruneSelection;
use crate::rng::SeedSplitter;
use crate::search::{make_schedule, run_local_search, PresetKind, SearchOptions};
use crate::update::{EngineOptions, PruneState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub t_hat: usize,
    /// `d₁` used for the per-update and scoring measurements.
    pub update_d1: usize,
    /// Below roughly `t = 8` an update is dominated by a few full passes
    /// over the `d₁×d₁` inverse, so the sweep runs well past that.
    pub t_values: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn full(seed: u64) -> Self {
        BenchConfig {
            sizes: vec![128, 256, 512],
            t_hat: 2,
            update_d1: 512,
            t_values: vec![1, 4, 8, 16, 24, 32, 48, 64],
            repetitions: 15,
            seed,
        }
    }

    pub fn quick(seed: u64) -> Self {
        BenchConfig {
            sizes: vec![64, 128],
            t_hat: 2,
            update_d1: 128,
            t_values: vec![1, 4, 16, 32],
            repetitions: 5,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub d1: usize,
    pub d2: usize,
    pub t_hat: usize,
    pub init_ms: f64,
    pub total_ms: f64,
    pub per_update_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub t: usize,
    pub shrink_ms: f64,
    pub grow_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub pruned: usize,
    pub score_us: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scaling: Vec<ScalingRow>,
    /// Slope of `log(total_ms)` against `log(d₁)`; absent with one size.
    pub growth_exponent: Option<f64>,
    pub updates: Vec<UpdateRow>,
    /// Fit of `shrink_ms + grow_ms` against `t`.
    pub update_fit: Option<LinearFit>,
    pub scores: Vec<ScoreRow>,
    /// Slowest over fastest `score_removal` time across `|S|`.
    pub score_spread: Option<f64>,
}

impl BenchReport {
    pub fn scaling_csv(&self) -> String {
        let mut out = String::from("d1,d2,t_hat,total_ms,per_update_ms\n");
        for r in &self.scaling {
            out.push_str(&format!("{},{},{},{:.4},{:.6}\n", r.d1, r.d2, r.t_hat, r.total_ms, r.per_update_ms));
        }
        out
    }

    pub fn updates_csv(&self) -> String {
        let mut out = String::from("t,shrink_ms,grow_ms\n");
        for r in &self.updates {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.t, r.shrink_ms, r.grow_ms));
        }
        out
    }
}

/// Ordinary least squares `y ≈ a + b·x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit { intercept: my - slope * mx, slope, r_squared })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Nested search with singleton groups, `d₂ = d₁/4`, pruning half the groups.
pub fn time_nested(d1: usize, t_hat: usize, splitter: &SeedSplitter) -> Result<ScalingRow> {
    let d2 = (d1 / 4).max(1);
    let mut rng = splitter.child("scaling").stream(&d1.to_string());
    let problem = random_instance(&mut rng, &InstanceShape::uniform(d1, 1, d2));
    let schedule = make_schedule(PresetKind::Nested, d1 / 2, t_hat, 0)?;
    let options = SearchOptions { engine: EngineOptions::benchmark(), ..SearchOptions::default() };
    let start = Instant::now();
    let report = run_local_search(&problem, &schedule, "nested", &options)?;
    let total_ms = ms(start);
    let timings = report.timings.expect("search records timings");
    Ok(ScalingRow {
        d1,
        d2,
        t_hat,
        init_ms: timings.init_ms,
        total_ms,
        per_update_ms: timings.search_ms / schedule.len().max(1) as f64,
    })
}

/// Median time of shrinking `t` groups and of restoring them again, from a
/// state with a quarter of the groups pruned.
pub fn time_updates(d1: usize, t_values: &[usize], reps: usize, splitter: &SeedSplitter) -> Result<Vec<UpdateRow>> {
    let d2 = (d1 / 4).max(1);
    let mut rng = splitter.stream("updates");
    let problem = random_instance(&mut rng, &InstanceShape::uniform(d1, 1, d2));
    let base = PruneSelection::new((0..d1 / 4).map(|i| 4 * i).collect(), d1)?;
    let mut state = PruneState::at_selection(&problem, base, EngineOptions::benchmark())?;
    let free: Vec<usize> = (0..d1).filter(|j| j % 4 != 0).collect();
    t_values
        .iter()
        .map(|&t| {
            let groups: Vec<usize> = free.iter().copied().step_by(3).take(t).collect();
            if groups.len() < t {
                return Err(Error::InvalidSchedule(format!("t = {t} is too large for d1 = {d1}")));
            }
            let (mut shrink, mut grow) = (Vec::new(), Vec::new());
            for _ in 0..reps + 1 {
                let s = Instant::now();
                state.shrink(&groups)?;
                let a = ms(s);
                let s = Instant::now();
                state.grow(&groups)?;
                let b = ms(s);
                shrink.push(a);
                grow.push(b);
            }
            // First repetition warms caches.
            Ok(UpdateRow { t, shrink_ms: median(shrink[1..].to_vec()), grow_ms: median(grow[1..].to_vec()) })
        })
        .collect()
}

/// Median `score_removal` time for groups of size 4 at several `|S|`. The
/// levels are timed round-robin so that slow periods on the host hit all of
/// them alike.
pub fn time_scores(d1: usize, reps: usize, splitter: &SeedSplitter) -> Result<Vec<ScoreRow>> {
    const CALLS: usize = 2000;
    let groups = d1 / 4;
    let mut rng = splitter.stream("scores");
    let problem = random_instance(&mut rng, &InstanceShape::uniform(groups, 4, 8));
    let probe = groups - 1;
    let levels = [0, groups / 4, groups / 2, 3 * groups / 4];
    let states = levels
        .iter()
        .map(|&pruned| {
            let sel = PruneSelection::new((0..pruned).collect(), groups)?;
            PruneState::at_selection(&problem, sel, EngineOptions::benchmark())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut batches = vec![Vec::new(); levels.len()];
    for _ in 0..reps.max(3) {
        for (state, times) in states.iter().zip(&mut batches) {
            let s = Instant::now();
            for _ in 0..CALLS {
                std::hint::black_box(state.score_removal(std::hint::black_box(probe))?);
            }
            times.push(ms(s) * 1e3 / CALLS as f64);
        }
    }
    Ok(levels.iter().zip(batches).map(|(&pruned, times)| ScoreRow { pruned, score_us: median(times) }).collect())
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    let splitter = SeedSplitter::new(config.seed);
    let scaling = config
        .sizes
        .iter()
        .map(|&d1| time_nested(d1, config.t_hat, &splitter))
        .collect::<Result<Vec<_>>>()?;
    let growth_exponent = (scaling.len() > 1)
        .then(|| {
            let x: Vec<f64> = scaling.iter().map(|r| (r.d1 as f64).ln()).collect();
            let y: Vec<f64> = scaling.iter().map(|r| r.total_ms.ln()).collect();
            linear_fit(&x, &y).map(|f| f.slope)
        })
        .flatten();
    let updates = time_updates(config.update_d1, &config.t_values, config.repetitions, &splitter)?;
    let update_fit = linear_fit(
        &updates.iter().map(|r| r.t as f64).collect::<Vec<_>>(),
        &updates.iter().map(|r| r.shrink_ms + r.grow_ms).collect::<Vec<_>>(),
    );
    let scores = time_scores(config.update_d1, config.repetitions, &splitter)?;
    let score_spread = {
        let times: Vec<f64> = scores.iter().map(|r| r.score_us).collect();
        let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = times.iter().copied().fold(0.0, f64::max);
        (lo > 0.0 && lo.is_finite()).then(|| hi / lo)
    };
    Ok(BenchReport { scaling, growth_exponent, updates, update_fit, scores, score_spread })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn single_size_has_one_row() {
        let config = BenchConfig {
            sizes: vec![32],
            t_hat: 2,
            update_d1: 32,
            t_values: vec![1, 2],
            repetitions: 3,
            seed: 1,
        };
        let r = run_bench(&config).unwrap();
        assert_eq!(r.scaling_csv().lines().count(), 2);
        assert!(r.growth_exponent.is_none());
        assert_eq!(r.updates.len(), 2);
        assert_eq!(r.scores.len(), 4);
    }
}
