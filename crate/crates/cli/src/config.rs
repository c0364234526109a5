//! Run configuration, read from TOML and overridden by command-line flags.
//!
//! Every section and field is optional; a missing config file means all
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use gridloc::experiment::NoiseSweepConfig;
use gridloc::knn::KnnConfig;
use gridloc::sim::{AttackerKind, ScenarioSpec};
use gridloc::sync::DEFAULT_WINDOW_S;
use gridloc::tdoa::Sensor;
use gridloc::verify::{VerifyPolicy, GROUND_GRID_ALTITUDE_M};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub scenario: ScenarioSpec,
    /// Explicit deployment; when absent sensors are drawn from `scenario`.
    pub sensors: Option<Vec<Sensor>>,
    pub grid: GridConfig,
    pub knn: KnnConfig,
    pub verify: VerifyConfig,
    pub sync: SyncConfig,
    pub sweep: SweepConfig,
    pub coverage: CoverageConfig,
    pub simulate: SimulateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: ScenarioSpec::default(),
            sensors: None,
            grid: GridConfig::default(),
            knn: KnnConfig::default(),
            verify: VerifyConfig::default(),
            sync: SyncConfig::default(),
            sweep: SweepConfig::default(),
            coverage: CoverageConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub altitude_m: f64,
    pub square_side_m: f64,
    /// Plane of the second grid used for ground-origin search.
    pub ground_altitude_m: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { altitude_m: 10_500.0, square_side_m: 150.0, ground_altitude_m: GROUND_GRID_ALTITUDE_M }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub policy: VerifyPolicy,
    /// Locate the origin of flagged tracks.
    pub locate_origin: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { policy: VerifyPolicy::STRICT, locate_origin: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub window_s: f64,
    /// Trusted sensor whose clock anchors the rest; first sensor by default.
    pub reference_sensor: Option<String>,
    /// Flights trusted as calibration sources. Claims anchor the fit, so a
    /// spoofed track would corrupt it; all flights are used when absent.
    pub calibration_flights: Option<Vec<String>>,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { window_s: DEFAULT_WINDOW_S, reference_sensor: None, calibration_flights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub square_sides_m: Vec<f64>,
    pub noise_levels_s: Vec<f64>,
    pub deployments: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { ks: (1..=10).collect(), square_sides_m: vec![600.0, 300.0, 150.0], noise_levels_s: NoiseSweepConfig::half_decades(), deployments: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentKind {
    Random,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    pub gdop_threshold: f64,
    pub samples: usize,
    /// Side of the square sampled around the scenario centre.
    pub extent_km: f64,
    /// Sensor layout used when `sensors` is not given.
    pub deployment: DeploymentKind,
    pub cluster_radius_km: f64,
    pub sensor_count: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self { gdop_threshold: 10.0, samples: 100_000, extent_km: 1000.0, deployment: DeploymentKind::Clustered, cluster_radius_km: 60.0, sensor_count: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub flights: usize,
    pub messages_per_flight: usize,
    pub attackers: usize,
    pub attacker_kind: AttackerKind,
    pub max_clock_offset_s: f64,
    pub max_clock_drift_sps: f64,
    /// Independent per-message drop probability.
    pub loss_probability: f64,
    pub format: LogFormatChoice,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            flights: 10,
            messages_per_flight: 200,
            attackers: 0,
            attacker_kind: AttackerKind::GroundMobile,
            max_clock_offset_s: 0.0,
            max_clock_drift_sps: 0.0,
            loss_probability: 0.0,
            format: LogFormatChoice::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormatChoice {
    Csv,
    Jsonl,
}

/// Flag values layered over the file config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub square_side_m: Option<f64>,
    pub min_receivers: Option<usize>,
    pub threshold_m: Option<f64>,
    pub window_len: Option<usize>,
    pub noise_std_s: Option<f64>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
            None => Ok(Self::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.k {
            self.knn.k = v;
        }
        if let Some(v) = o.square_side_m {
            self.grid.square_side_m = v;
        }
        if let Some(v) = o.min_receivers {
            self.knn.min_receivers = v;
        }
        if let Some(v) = o.threshold_m {
            self.verify.policy.threshold_m = v;
        }
        if let Some(v) = o.window_len {
            self.verify.policy.window_len = v;
        }
        if let Some(v) = o.noise_std_s {
            self.scenario.noise_std_s = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.verify.policy.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.knn.k == 0 {
            return bad("knn.k must be at least 1".into());
        }
        for (name, v) in [("grid.square_side_m", self.grid.square_side_m), ("sync.window_s", self.sync.window_s), ("coverage.extent_km", self.coverage.extent_km)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be a positive number, got {v}"));
            }
        }
        if self.sweep.square_sides_m.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("sweep.square_sides_m must be positive".into());
        }
        if self.sweep.ks.contains(&0) {
            return bad("sweep.ks must be at least 1".into());
        }
        if self.sweep.noise_levels_s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("sweep.noise_levels_s must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.simulate.loss_probability) {
            return bad("simulate.loss_probability must lie in [0, 1)".into());
        }
        if !(self.simulate.max_clock_offset_s >= 0.0 && self.simulate.max_clock_drift_sps >= 0.0) {
            return bad("simulate clock bounds must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn sections_merge_with_defaults() {
        let cfg = Config::parse("seed = 9\n[knn]\nk = 3\n[grid]\nsquare_side_m = 300.0\n[scenario]\nsensor_count = 6\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.knn.k, 3);
        assert_eq!(cfg.knn.min_receivers, 2);
        assert_eq!(cfg.grid.square_side_m, 300.0);
        assert_eq!(cfg.scenario.sensor_count, 6);
        assert_eq!(cfg.scenario.region_km, (100.0, 100.0));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(Config::parse("sed = 1"), Err(CliError::Config(_))));
        assert!(matches!(Config::parse("[knn]\nk = 0"), Err(CliError::Config(_))));
        assert!(matches!(Config::parse("[verify.policy]\nwindow_len = 0"), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = Config::default();
        cfg.apply(&Overrides { k: Some(1), threshold_m: Some(750.0), window_len: Some(9), ..Default::default() }).unwrap();
        assert_eq!(cfg.knn.k, 1);
        assert_eq!(cfg.verify.policy, VerifyPolicy::FAST);
        assert!(cfg.apply(&Overrides { square_side_m: Some(-1.0), ..Default::default() }).is_err());
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = Config { sensors: None, ..Config::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(Config::parse(&text).unwrap(), cfg);
    }
}
