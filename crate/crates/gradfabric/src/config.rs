//! Scenario configuration: named presets, validation, TOML round-tripping.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bytes per second for one Gbps (decimal).
pub const GBPS: f64 = 0.125e9;

/// Bytes in a megabyte (decimal).
pub const MB: f64 = 1e6;

/// NIC rates (Gbps) background traffic can pin a link to, in the order the
/// probability vector indexes them.
pub const RATES_GBPS: [f64; 5] = [1.0, 2.5, 3.3, 5.0, 10.0];

/// Known compute-straggler presets as (name, probability %, slowdown).
pub const COMPUTE_PRESETS: [(&str, f64, f64); 3] =
    [("C1", 10.0, 2.0), ("C2", 10.0, 4.0), ("C3", 4.0, 2.0)];

/// Known network-fluctuation presets: probability over [`RATES_GBPS`].
pub const NETWORK_PRESETS: [(&str, [f64; 5]); 3] = [
    ("N1", [0.0, 0.0, 0.0, 0.1, 0.9]),
    ("N2", [0.0, 0.1, 0.1, 0.1, 0.7]),
    ("N3", [0.5, 0.0, 0.0, 0.0, 0.5]),
];

/// Compute-straggler setting: a preset name or explicit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComputeSetting {
    Preset(String),
    Explicit { r: f64, s: f64 },
}

impl Default for ComputeSetting {
    fn default() -> Self {
        ComputeSetting::Preset("C1".into())
    }
}

impl ComputeSetting {
    /// (straggler probability %, slowdown factor).
    pub fn resolve(&self) -> Result<(f64, f64)> {
        match self {
            ComputeSetting::Explicit { r, s } => {
                if !(0.0..=100.0).contains(r) {
                    return Err(Error::Config(format!("straggler probability {r}% out of [0, 100]")));
                }
                if *s < 1.0 {
                    return Err(Error::Config(format!("straggler slowdown {s} must be >= 1")));
                }
                Ok((*r, *s))
            }
            ComputeSetting::Preset(name) => COMPUTE_PRESETS
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, r, s)| (*r, *s))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown compute preset {name:?}; known presets: {}",
                        COMPUTE_PRESETS.map(|(n, _, _)| n).join(", ")
                    ))
                }),
        }
    }
}

/// Network-fluctuation setting: a preset name or an explicit probability
/// vector over [`RATES_GBPS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSetting {
    Preset(String),
    Explicit { p: [f64; 5] },
}

impl Default for NetworkSetting {
    fn default() -> Self {
        NetworkSetting::Preset("N1".into())
    }
}

impl NetworkSetting {
    pub fn resolve(&self) -> Result<[f64; 5]> {
        let p = match self {
            NetworkSetting::Explicit { p } => *p,
            NetworkSetting::Preset(name) => NETWORK_PRESETS
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, p)| *p)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown network preset {name:?}; known presets: {}",
                        NETWORK_PRESETS.map(|(n, _)| n).join(", ")
                    ))
                })?,
        };
        if p.iter().any(|x| *x < 0.0) {
            return Err(Error::Config("rate probabilities must be nonnegative".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("rate probabilities sum to {sum}, expected 1")));
        }
        Ok(p)
    }
}

/// How gradients flow to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Async,
    /// Per-round planned batch transfer through the same control plane.
    Sync,
    /// Ring all-reduce cost model, no parameter server.
    AllreduceEmulation,
}

/// Link speeds that do not fluctuate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    /// Host NIC speed before background traffic (Gbps).
    #[serde(default = "d_nic")]
    pub nic_gbps: f64,
    /// Links between co-hosted processes on the server machine (Gbps).
    #[serde(default = "d_intra")]
    pub intra_host_gbps: f64,
}

impl Default for Topology {
    fn default() -> Self {
        Topology { nic_gbps: d_nic(), intra_host_gbps: d_intra() }
    }
}

fn d_nic() -> f64 {
    10.0
}
fn d_intra() -> f64 {
    40.0
}
fn d_version() -> u32 {
    1
}
fn d_workers() -> usize {
    30
}
fn d_seed() -> u64 {
    7
}
fn d_duration() -> f64 {
    60.0
}
fn d_update_mb() -> f64 {
    100.0
}
fn d_compute_base() -> f64 {
    0.3
}
fn d_window() -> f64 {
    0.1
}
fn d_period() -> f64 {
    5.0
}
fn d_lag() -> f64 {
    0.2
}
fn d_tau() -> u32 {
    30
}
fn d_divmax() -> f64 {
    30.0
}
fn d_aggregators() -> usize {
    4
}
fn d_rep_aggregators() -> usize {
    2
}
fn d_norm() -> f64 {
    1.0
}
fn d_replicate() -> bool {
    true
}

/// One simulated cluster run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_workers")]
    pub workers: usize,
    #[serde(default = "d_duration")]
    pub duration_s: f64,
    /// Bytes one gradient push moves, in MB.
    #[serde(default = "d_update_mb")]
    pub update_mb: f64,
    /// Unslowed time to compute one gradient.
    #[serde(default = "d_compute_base")]
    pub compute_base_s: f64,
    #[serde(default = "d_window")]
    pub batch_window_s: f64,
    /// NIC rates are redrawn every this many seconds.
    #[serde(default = "d_period")]
    pub period_s: f64,
    /// Capacity changes reach the scheduler after this long.
    #[serde(default = "d_lag")]
    pub t_lag_s: f64,
    #[serde(default = "d_tau")]
    pub tau_max: u32,
    #[serde(default = "d_divmax")]
    pub div_max: f64,
    /// Momentum factor used for divergence accounting.
    #[serde(default)]
    pub gamma: f64,
    /// Norm reported with every update (divergence accounting only).
    #[serde(default = "d_norm")]
    pub update_norm: f64,
    #[serde(default = "d_aggregators")]
    pub aggregators: usize,
    #[serde(default = "d_rep_aggregators")]
    pub replica_aggregators: usize,
    #[serde(default = "d_replicate")]
    pub replicate: bool,
    /// Plan model copies back to workers over the network instead of handing
    /// them over instantly.
    #[serde(default)]
    pub distribute_model: bool,
    #[serde(default)]
    pub compute: ComputeSetting,
    #[serde(default)]
    pub network: NetworkSetting,
    #[serde(default)]
    pub topology: Topology,
    /// Output directory for metrics artifacts; None writes to the working
    /// directory.
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: d_version(),
            mode: Mode::default(),
            seed: d_seed(),
            workers: d_workers(),
            duration_s: d_duration(),
            update_mb: d_update_mb(),
            compute_base_s: d_compute_base(),
            batch_window_s: d_window(),
            period_s: d_period(),
            t_lag_s: d_lag(),
            tau_max: d_tau(),
            div_max: d_divmax(),
            gamma: 0.0,
            update_norm: d_norm(),
            aggregators: d_aggregators(),
            replica_aggregators: d_rep_aggregators(),
            replicate: d_replicate(),
            distribute_model: false,
            compute: ComputeSetting::default(),
            network: NetworkSetting::default(),
            topology: Topology::default(),
            out: None,
        }
    }
}

impl ScenarioConfig {
    /// Default configuration with compute and network presets from a combined
    /// name like "C2-N1".
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ScenarioConfig::default();
        cfg.apply_preset(name)?;
        Ok(cfg)
    }

    /// Set compute and/or network from "C2", "N3", or "C2-N3".
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        for part in name.split('-') {
            if COMPUTE_PRESETS.iter().any(|(n, _, _)| *n == part) {
                self.compute = ComputeSetting::Preset(part.into());
            } else if NETWORK_PRESETS.iter().any(|(n, _)| *n == part) {
                self.network = NetworkSetting::Preset(part.into());
            } else {
                return Err(Error::Config(format!(
                    "unknown preset {part:?}; known presets: {}, {}",
                    COMPUTE_PRESETS.map(|(n, _, _)| n).join(", "),
                    NETWORK_PRESETS.map(|(n, _)| n).join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Copy with presets expanded to their explicit values, for echoing into
    /// run manifests.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        let (r, s) = self.compute.resolve()?;
        cfg.compute = ComputeSetting::Explicit { r, s };
        let p = self.network.resolve()?;
        cfg.network = NetworkSetting::Explicit { p };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (this build reads version 1)",
                self.schema_version
            )));
        }
        let positive = [
            ("duration_s", self.duration_s),
            ("update_mb", self.update_mb),
            ("compute_base_s", self.compute_base_s),
            ("batch_window_s", self.batch_window_s),
            ("period_s", self.period_s),
            ("nic_gbps", self.topology.nic_gbps),
            ("intra_host_gbps", self.topology.intra_host_gbps),
            ("update_norm", self.update_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        if self.tau_max == 0 {
            return Err(Error::Config("tau_max must be at least 1".into()));
        }
        if self.t_lag_s < 0.0 {
            return Err(Error::Config(format!("t_lag_s must be nonnegative, got {}", self.t_lag_s)));
        }
        if self.div_max < 0.0 || self.div_max.is_nan() {
            return Err(Error::Config(format!("div_max must be nonnegative, got {}", self.div_max)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        self.compute.resolve()?;
        self.network.resolve()?;
        Ok(())
    }
}
