//! Accuracy experiments: error statistics, k and noise sweeps, and the
//! GDOP-bucket comparison of k-NN against multilateration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geo::{horizontal_distance, GeoPosition};
use crate::grid::{build_grid, GridError, TrainingGrid};
use crate::knn::{localize, KnnConfig, KnnError};
use crate::mlat::{gdop, gdop_3d, mlat_solve};
use crate::sim::{add_noise, derive_seed, generate_scenario, stream_rng, ScenarioSpec, SimError, STREAM_NOISE};
use crate::tdoa::{measured_fingerprint, Reception};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl ErrorStats {
    /// `None` for an empty sample.
    pub fn from_errors(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let mut v = errors.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile_sorted(&v, 0.5),
            p90: quantile_sorted(&v, 0.9),
            max: *v.last().unwrap(),
        })
    }
}

/// Linear-interpolated quantile of an ascending sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    ErrorStats::from_errors(values).map(|s| s.median)
}

/// Ranks with ties averaged, 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` for fewer than two points or a
/// constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// GDOP bucket edges: `[1, 5)`, `[5, 10)`, `[10, 20)`, `[20, ∞)`. Values
/// below 1 fall into the first bucket.
pub const GDOP_BUCKETS: [(f64, f64); 4] = [(1.0, 5.0), (5.0, 10.0), (10.0, 20.0), (20.0, f64::INFINITY)];

pub fn gdop_bucket(g: f64) -> Option<usize> {
    if g.is_nan() {
        return None;
    }
    Some(GDOP_BUCKETS.iter().position(|&(_, hi)| g < hi).unwrap_or(GDOP_BUCKETS.len() - 1))
}

pub fn bucket_label(i: usize) -> String {
    let (lo, hi) = GDOP_BUCKETS[i];
    if hi.is_infinite() {
        format!("[{lo},inf)")
    } else {
        format!("[{lo},{hi})")
    }
}

/// Outcome of localizing one simulated message both ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageTrial {
    pub truth: GeoPosition,
    /// Horizontal GDOP of the full deployment at the true position.
    pub gdop: f64,
    /// Three-dimensional dilution at the same point.
    pub gdop_3d: f64,
    pub knn_error_m: Option<f64>,
    pub mlat_error_m: Option<f64>,
}

/// Localizes every message against `grid` (k-NN) and with the algebraic
/// solver; failures of either method leave the corresponding error empty.
pub fn run_trials(grid: &TrainingGrid, truths: &[GeoPosition], receptions: &[Vec<Reception>], cfg: &KnnConfig, with_mlat: bool) -> Vec<MessageTrial> {
    let hint = grid.spec().altitude_m;
    truths
        .par_iter()
        .zip(receptions.par_iter())
        .map(|(truth, rx)| {
            let fp = measured_fingerprint(rx).ok();
            let knn_error_m = fp
                .as_ref()
                .and_then(|fp| localize(fp, grid, cfg).ok())
                .map(|e| horizontal_distance(&e.position, truth));
            let mlat_error_m = if with_mlat {
                fp.as_ref()
                    .and_then(|fp| mlat_solve(fp, grid.sensors(), hint).ok())
                    .map(|s| horizontal_distance(&s.position, truth))
            } else {
                None
            };
            MessageTrial {
                truth: *truth,
                gdop: gdop(truth, grid.sensors()).unwrap_or(f64::INFINITY),
                gdop_3d: gdop_3d(truth, grid.sensors()).unwrap_or(f64::INFINITY),
                knn_error_m,
                mlat_error_m,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepConfig {
    pub scenario: ScenarioSpec,
    pub noise_levels_s: Vec<f64>,
    pub deployments: usize,
    pub square_side_m: f64,
    pub grid_altitude_m: f64,
    pub knn: KnnConfig,
    pub seed: u64,
}

impl NoiseSweepConfig {
    /// Half-decade steps from 1e-9 s to 1e-6 s.
    pub fn half_decades() -> Vec<f64> {
        (0..=6).map(|i| 10f64.powf(-9.0 + 0.5 * i as f64)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelResult {
    pub noise_std_s: f64,
    pub trials: Vec<MessageTrial>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Knn(#[from] KnnError),
}

/// For each deployment, trains one grid and localizes the same emitters at
/// every noise level. Deployment `i` uses seed `derive_seed(seed, i)`.
pub fn sweep_noise(cfg: &NoiseSweepConfig) -> Result<Vec<NoiseLevelResult>, ExperimentError> {
    let mut out: Vec<NoiseLevelResult> = cfg.noise_levels_s.iter().map(|&n| NoiseLevelResult { noise_std_s: n, trials: Vec::new() }).collect();
    for d in 0..cfg.deployments {
        let spec = ScenarioSpec { rng_seed: derive_seed(cfg.seed, d as u64), ..cfg.scenario };
        let scenario = generate_scenario(&spec)?;
        let grid_spec = spec.region().grid_spec(cfg.grid_altitude_m, cfg.square_side_m);
        let grid = build_grid(&grid_spec, &scenario.sensors, &Default::default())?;
        let truths: Vec<GeoPosition> = scenario.emissions.iter().map(|e| e.position).collect();
        for (li, level) in out.iter_mut().enumerate() {
            let mut rng = stream_rng(spec.rng_seed, STREAM_NOISE + 16 * li as u64);
            let rx: Vec<Vec<Reception>> = scenario.emissions.iter().map(|e| add_noise(&e.arrivals, level.noise_std_s, &mut rng)).collect();
            level.trials.extend(run_trials(&grid, &truths, &rx, &cfg.knn, true));
        }
    }
    Ok(out)
}

/// Per-k error statistics of k-NN over a fixed message set.
pub fn sweep_k(grid: &TrainingGrid, truths: &[GeoPosition], receptions: &[Vec<Reception>], ks: &[usize], base: &KnnConfig) -> Vec<(usize, Option<ErrorStats>)> {
    ks.iter()
        .map(|&k| {
            let cfg = KnnConfig { k, ..*base };
            let trials = run_trials(grid, truths, receptions, &cfg, false);
            let errs: Vec<f64> = trials.iter().filter_map(|t| t.knn_error_m).collect();
            (k, ErrorStats::from_errors(&errs))
        })
        .collect()
}

/// Median error per GDOP bucket for each method, `(knn, mlat)`.
pub fn bucket_medians(trials: &[MessageTrial], dilution: impl Fn(&MessageTrial) -> f64) -> Vec<(Option<f64>, Option<f64>, usize)> {
    (0..GDOP_BUCKETS.len())
        .map(|b| {
            let inb: Vec<&MessageTrial> = trials.iter().filter(|t| gdop_bucket(dilution(t)) == Some(b)).collect();
            let knn: Vec<f64> = inb.iter().filter_map(|t| t.knn_error_m).collect();
            let mlat: Vec<f64> = inb.iter().filter_map(|t| t.mlat_error_m).collect();
            (median(&knn), median(&mlat), inb.len())
        })
        .collect()
}
