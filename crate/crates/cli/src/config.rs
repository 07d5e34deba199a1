use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tips_core::refiner::RefinerConfig;
use tips_core::render::{DSConfig, GSConfig, RenderTrainConfig};
use tips_core::seed::derive_seed;
use tips_core::text2pose::T2PTrainConfig;

pub const OUT_DIR_ENV: &str = "TIPS_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "tips-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub samples: usize,
    pub test_samples: usize,
    pub size: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { samples: 2200, test_samples: 200, size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub train: RenderTrainConfig,
    pub generator: GSConfig,
    pub discriminator: DSConfig,
    /// `random-conv`, `identity` or `none`.
    pub extractor: String,
    /// Use at most this many training pairs.
    pub max_pairs: Option<usize>,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            train: RenderTrainConfig::default(),
            generator: GSConfig::desk(),
            discriminator: DSConfig::desk(),
            extractor: "random-conv".into(),
            max_pairs: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// `partial` or `full`.
    pub mode: Option<String>,
    /// Render at most this many test pairs.
    pub count: Option<usize>,
}

/// Everything a command may need. Stage seeds are derived from `seed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub synth: SynthSection,
    pub t2p: T2PTrainConfig,
    pub refiner: RefinerConfig,
    pub render: RenderSection,
    pub infer: InferSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Overwrites every stage seed with one derived from the global seed.
    pub fn derive_stage_seeds(&mut self) {
        self.t2p.seed = derive_seed(self.seed, "stage/text2pose");
        self.refiner.seed = derive_seed(self.seed, "stage/refiner");
        self.render.train.seed = derive_seed(self.seed, "stage/render");
    }

    pub fn synth_seed(&self) -> u64 {
        derive_seed(self.seed, "stage/synth")
    }

    pub fn infer_seed(&self) -> u64 {
        derive_seed(self.seed, "stage/infer")
    }

    pub fn extractor_seed(&self) -> u64 {
        derive_seed(self.seed, "stage/extractor")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir().join("dataset"))
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.out_dir().join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn trace_path(&self, stage: &str) -> PathBuf {
        self.out_dir().join("traces").join(format!("{stage}.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: PipelineConfig = toml::from_str("seed = 4\n[t2p]\niterations = 7\n[render.train]\nlambda2 = 0.0\n").unwrap();
        assert_eq!(cfg.t2p.iterations, 7);
        assert_eq!(cfg.t2p.batch_size, 16);
        assert_eq!(cfg.render.train.lambda2, 0.0);
        assert_eq!(cfg.render.train.lambda1, 5.0);
        assert_eq!(cfg.render.generator, GSConfig::desk());
        assert!(toml::from_str::<PipelineConfig>("[t2p]\nbogus = 1\n").is_err());
    }

    #[test]
    fn stage_seeds_depend_on_global_seed() {
        let mut a = PipelineConfig { seed: 1, ..Default::default() };
        let mut b = PipelineConfig { seed: 2, ..Default::default() };
        a.derive_stage_seeds();
        b.derive_stage_seeds();
        assert_ne!(a.t2p.seed, b.t2p.seed);
        assert_ne!(a.t2p.seed, a.refiner.seed);
    }
}
