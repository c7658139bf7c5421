//! Serializable run configuration shared by every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{EncoderConfig, ExpanderConfig, PretrainConfig, EMBED_DIM};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowTrainConfig, RawSummaryConfig};
use crate::rng::derive_seed;
use crate::signal::{DatasetSpec, ParamPrior, ShiftPrior, SignalKind, TimeGrid};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub grid: TimeGrid,
    pub prior: ParamPrior,
    pub shift_prior: ShiftPrior,
    pub sigma: f64,
    /// Shifted pairs used for pretraining.
    pub n_pretrain: usize,
    /// Labelled records used for flow training (validation split included).
    pub n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub n_samples: usize,
    pub grid_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateConfig {
    pub n_instances: usize,
    pub n_samples: usize,
    pub n_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub kind: SignalKind,
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub expander: ExpanderConfig,
    pub pretrain: PretrainConfig,
    pub flow: FlowConfig,
    pub train: FlowTrainConfig,
    pub baseline: RawSummaryConfig,
    pub baseline_flow: FlowConfig,
    pub infer: InferConfig,
    pub calibrate: CalibrateConfig,
}

/// Independent seeds for each stage, all derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub pretrain_data: u64,
    pub train_data: u64,
    pub test_data: u64,
    pub init: u64,
    pub pretrain: u64,
    pub train: u64,
    pub infer: u64,
    pub calibrate: u64,
}

/// Which dataset a stage draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRole {
    Pretrain,
    Train,
    Test,
}

impl RunConfig {
    pub fn defaults(kind: SignalKind) -> Self {
        let grid = TimeGrid::default_for(kind);
        let baseline = RawSummaryConfig::default_for(grid.n_samples);
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            kind,
            seed: 0,
            data: DataConfig {
                grid,
                prior: ParamPrior::default_for(kind),
                shift_prior: ShiftPrior::default_for(&grid),
                sigma: 0.4,
                n_pretrain: 8192,
                n_train: 50_000,
            },
            encoder: EncoderConfig::default_for(grid.n_samples),
            expander: ExpanderConfig::default(),
            pretrain: PretrainConfig::default(),
            flow: FlowConfig::with_context(EMBED_DIM),
            train: FlowTrainConfig::default(),
            baseline_flow: FlowConfig::with_context(baseline.output_dim()),
            baseline,
            infer: InferConfig {
                n_samples: 3000,
                grid_resolution: 256,
            },
            calibrate: CalibrateConfig {
                n_instances: 1000,
                n_samples: 3000,
                n_levels: 21,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not {CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.data.prior.kind != self.kind {
            return Err(Error::Config("prior kind differs from run kind".into()));
        }
        self.dataset_spec(DatasetRole::Train, 1)?;
        self.encoder.validate()?;
        self.expander.validate()?;
        self.flow.validate()?;
        self.baseline.validate()?;
        self.baseline_flow.validate()?;
        self.train.validate()?;
        self.pretrain.schedule.validate()?;
        let n = self.data.grid.n_samples;
        if self.encoder.input_len != n || self.baseline.input_len != n {
            return Err(Error::Config(format!("network input lengths must equal {n} samples")));
        }
        if self.flow.context_dim != EMBED_DIM {
            return Err(Error::Config(format!("flow context must be {EMBED_DIM}-D")));
        }
        if self.baseline_flow.context_dim != self.baseline.output_dim() {
            return Err(Error::Config("baseline flow context must match the summary width".into()));
        }
        if self.infer.n_samples == 0 || self.calibrate.n_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = |l: &str| derive_seed(self.seed, l);
        StageSeeds {
            pretrain_data: s("dataset-pretrain"),
            train_data: s("dataset-train"),
            test_data: s("dataset-test"),
            init: s("init"),
            pretrain: s("pretrain"),
            train: s("train"),
            infer: s("infer"),
            calibrate: s("calibrate"),
        }
    }

    pub fn dataset_spec(&self, role: DatasetRole, n: usize) -> Result<DatasetSpec> {
        let seeds = self.seeds();
        let (seed, ssl) = match role {
            DatasetRole::Pretrain => (seeds.pretrain_data, true),
            DatasetRole::Train => (seeds.train_data, false),
            DatasetRole::Test => (seeds.test_data, false),
        };
        let spec = DatasetSpec {
            kind: self.kind,
            grid: self.data.grid,
            prior: self.data.prior,
            shift_prior: self.data.shift_prior,
            sigma: self.data.sigma,
            n,
            seed,
            ssl_pairs: ssl,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for kind in [SignalKind::Sho, SignalKind::Sg] {
            let c = RunConfig::defaults(kind);
            c.validate().unwrap();
            let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json().unwrap(), c.to_json().unwrap());
        }
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let s = RunConfig::defaults(SignalKind::Sho).seeds();
        let mut v = vec![s.pretrain_data, s.train_data, s.test_data, s.init, s.pretrain, s.train, s.infer, s.calibrate];
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut c = RunConfig::defaults(SignalKind::Sg);
        c.encoder.input_len = 256;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::defaults(SignalKind::Sho);
        c.schema_version = 99;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults(SignalKind::Sho);
        c.flow.context_dim = 4;
        assert!(c.validate().is_err());
    }
}
