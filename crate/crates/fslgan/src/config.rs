//! Experiment configuration: a single TOML file covering federation, timing,
//! data, device-pool generation, and benchmark settings. Unknown keys are
//! rejected, defaults mirror the reference experimental constants, and the
//! fully-defaulted form can be re-serialized for replay.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::ShardMode;
use crate::error::{Error, Result};
use crate::fed::FederationConfig;
use crate::gan::DCGAN_LR;
use crate::splitplan::{Granularity, Strategy};
use crate::timesim::TimingConfig;

/// Environment variable overriding `[data].root`.
pub const DATA_ROOT_ENV: &str = "FSLGAN_DATA";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub num_clients: usize,
    pub epochs: usize,
    pub g_steps_per_round: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub granularity: Granularity,
    pub latent_dim: usize,
    pub lr: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            num_clients: 5,
            epochs: 500,
            g_steps_per_round: 24,
            seed: 7,
            strategy: Strategy::SortedMultiple,
            granularity: Granularity::PerBlock,
            latent_dim: 100,
            lr: DCGAN_LR,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory holding the MNIST IDX files (gzip or raw).
    pub root: PathBuf,
    /// Use only the first `subset` training images after a seeded shuffle;
    /// 0 means the full set.
    pub subset: usize,
    pub shard_mode: ShardMode,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("data/mnist"),
            subset: 0,
            shard_mode: ShardMode::Iid,
        }
    }
}

/// Per-device template for explicitly listed pools. `capacity_units` is in
/// abstract memory units; a unit equals the largest portion's memory so every
/// capacity scales with the model actually being split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceInit {
    pub time_factor: f64,
    pub capacity_units: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    /// "random" or "explicit".
    pub mode: String,
    pub devices_per_client: usize,
    /// Uniform time_factor range for random pools.
    pub time_factor_range: [f64; 2],
    /// Uniform integer capacity range (in memory units) for random pools.
    pub capacity_units_range: [u32; 2],
    pub seed: u64,
    /// Outer list = clients, inner = that client's devices (explicit mode).
    pub explicit: Vec<Vec<DeviceInit>>,
}

impl Default for DeviceSection {
    fn default() -> Self {
        DeviceSection {
            mode: "random".into(),
            devices_per_client: 4,
            time_factor_range: [1.0, 8.0],
            capacity_units_range: [1, 4],
            seed: 11,
            explicit: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeBenchSection {
    /// Number of seeded device pools per strategy.
    pub seeds: usize,
    /// Also run the M=1 single-discriminator baseline with sorted_multiple.
    pub include_baseline: bool,
}

impl Default for TimeBenchSection {
    fn default() -> Self {
        TimeBenchSection {
            seeds: 100,
            include_baseline: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccBenchSection {
    pub m_list: Vec<usize>,
    /// Dump a fixed-latent PGM grid every this many epochs (0 = only first
    /// and last).
    pub image_interval: usize,
    /// Samples per dumped grid (laid out 8 wide).
    pub grid_samples: usize,
    /// Held-out reals used for the nearest-neighbor distance metric.
    pub holdout_size: usize,
}

impl Default for AccBenchSection {
    fn default() -> Self {
        AccBenchSection {
            m_list: vec![1, 3, 5, 7, 8],
            image_interval: 10,
            grid_samples: 64,
            holdout_size: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub federation: FederationSection,
    pub timing: TimingConfig,
    pub data: DataSection,
    pub devices: DeviceSection,
    pub time_bench: TimeBenchSection,
    pub acc_bench: AccBenchSection,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Full-scale reference defaults: 5 clients x 4 devices, 500 epochs, 24
    /// batches of 256.
    pub fn reference_default() -> Self {
        let mut cfg = ExperimentConfig {
            output_dir: PathBuf::from("out"),
            ..Default::default()
        };
        cfg.timing = TimingConfig::default();
        cfg
    }

    /// Desktop-scale preset: 2000-image subset, 30 epochs, smaller batches so
    /// a full M sweep finishes on one CPU.
    pub fn desk_preset() -> Self {
        let mut cfg = Self::reference_default();
        cfg.federation.epochs = 30;
        cfg.federation.g_steps_per_round = 8;
        cfg.data.subset = 2000;
        cfg.timing.batch_size = 64;
        cfg.timing.batches_per_epoch = 8;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if f.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if f.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if !(f.lr.is_finite() && f.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        let t = &self.timing;
        if t.batch_size == 0 || t.batches_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size and batches_per_epoch must be >= 1".into(),
            ));
        }
        if !(t.lan_latency >= 0.0 && t.unit_time > 0.0) {
            return Err(Error::Config(
                "lan_latency must be >= 0 and unit_time > 0".into(),
            ));
        }
        let d = &self.devices;
        match d.mode.as_str() {
            "random" => {
                if d.devices_per_client == 0 {
                    return Err(Error::Config("devices_per_client must be >= 1".into()));
                }
                let [lo, hi] = d.time_factor_range;
                if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
                    return Err(Error::Config("invalid time_factor_range".into()));
                }
                let [clo, chi] = d.capacity_units_range;
                if clo == 0 || clo > chi {
                    return Err(Error::Config("invalid capacity_units_range".into()));
                }
            }
            "explicit" => {
                if self.devices.explicit.len() != f.num_clients {
                    return Err(Error::Config(format!(
                        "explicit device list covers {} clients, expected {}",
                        self.devices.explicit.len(),
                        f.num_clients
                    )));
                }
                if self.devices.explicit.iter().any(|c| c.is_empty()) {
                    return Err(Error::Config("client with empty device list".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "devices.mode must be \"random\" or \"explicit\", got {other:?}"
                )));
            }
        }
        if self.time_bench.seeds == 0 {
            return Err(Error::Config("time_bench.seeds must be >= 1".into()));
        }
        if self.acc_bench.m_list.is_empty() || self.acc_bench.m_list.contains(&0) {
            return Err(Error::Config("acc_bench.m_list must be nonempty, all >= 1".into()));
        }
        if self.acc_bench.grid_samples == 0 || self.acc_bench.holdout_size == 0 {
            return Err(Error::Config(
                "acc_bench grid_samples and holdout_size must be >= 1".into(),
            ));
        }
        if let ShardMode::LabelSkew(k) = self.data.shard_mode {
            if k == 0 || k > 10 {
                return Err(Error::Config("label_skew k must be in 1..=10".into()));
            }
        }
        Ok(())
    }

    /// Dataset root after applying the `FSLGAN_DATA` override.
    pub fn data_root(&self) -> PathBuf {
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.data.root.clone(),
        }
    }

    /// Fully-defaulted TOML form written next to outputs for replay.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn federation_config(&self, num_clients: usize) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            num_clients,
            epochs: f.epochs,
            g_steps_per_round: f.g_steps_per_round,
            seed: f.seed,
            strategy: f.strategy,
            granularity: f.granularity,
            latent_dim: f.latent_dim,
            lr: f.lr,
            timing: self.timing.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::reference_default();
        cfg.validate().unwrap();
        let text = cfg.resolved_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.resolved_toml(), text);
    }

    #[test]
    fn desk_preset_is_reduced_scale() {
        let cfg = ExperimentConfig::desk_preset();
        cfg.validate().unwrap();
        assert_eq!(cfg.federation.epochs, 30);
        assert_eq!(cfg.data.subset, 2000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[federation]\nnum_clienst = 5\n");
        assert!(err.is_err());
        let err = toml::from_str::<ExperimentConfig>("totally_unknown = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.federation.num_clients, 5);
        assert_eq!(cfg.timing.batch_size, 256);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::reference_default();
        cfg.federation.num_clients = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::reference_default();
        cfg.devices.mode = "psychic".into();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::reference_default();
        cfg.devices.mode = "explicit".into();
        cfg.devices.explicit = vec![vec![]; 5];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::reference_default();
        cfg.acc_bench.m_list = vec![];
        assert!(cfg.validate().is_err());
    }
}
