use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{AdaptConfig, Regularizer, TestOptimizer};
use crate::baselines::Variant;
use crate::error::{Error, Result};
use crate::synthbench::BenchmarkSpec;
use crate::training::TrainConfig;

/// Test-time settings of the two adapting variant families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub lr: f64,
    pub optimizer: TestOptimizer,
    /// Iterations of the early-stopping variants.
    pub es_iterations: usize,
    /// Iterations of the two-norm variants.
    pub l2_iterations: usize,
    /// Penalty weight of the two-norm variants.
    pub alpha: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            lr: 0.035,
            optimizer: TestOptimizer::Sgd,
            es_iterations: 2,
            l2_iterations: 10,
            alpha: 1.0,
        }
    }
}

impl AdaptSection {
    pub fn early_stop(&self) -> AdaptConfig {
        AdaptConfig {
            iterations: self.es_iterations,
            lr: self.lr,
            regularizer: Regularizer::EarlyStop,
            optimizer: self.optimizer,
        }
    }

    pub fn two_norm(&self) -> AdaptConfig {
        AdaptConfig {
            iterations: self.l2_iterations,
            lr: self.lr,
            regularizer: Regularizer::TwoNorm { alpha: self.alpha },
            optimizer: self.optimizer,
        }
    }
}

/// Grids swept by `eval` and `sensitivity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Iteration counts for the early-stopping sweep and the sensitivity grid.
    pub iterations: Vec<usize>,
    /// Penalty weights for the two-norm sweep and the sensitivity grid.
    pub alphas: Vec<f64>,
    /// Test-time learning rates; every grid point is run at each.
    pub lrs: Vec<f64>,
    /// Numbers of noisy tags injected per instance.
    pub noise_k: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            iterations: vec![0, 1, 2, 5, 10, 25],
            alphas: vec![0.0, 0.1, 1.0, 10.0, 1e3],
            lrs: vec![0.035],
            noise_k: vec![0, 1, 2, 3],
        }
    }
}

/// Everything that determines a run.
///
/// The global `seed` is authoritative: the benchmark seed, the training
/// shuffle seed and the initialisation seed are all derived from it, so any
/// seed written into the `benchmark` or `train` sections is overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    /// Widths of the tanh trunk layers; empty means the benchmark default.
    pub trunk: Vec<usize>,
    /// Auxiliary heads trained and fed evidence (the grid benchmark offers
    /// a second, quadrant-occupancy head when enabled).
    pub aux_heads: usize,
    pub variants: Vec<Variant>,
    /// Winning-probability threshold below which a prediction abstains in
    /// precision/recall.
    pub confidence_threshold: f64,
    pub benchmark: BenchmarkSpec,
    pub train: TrainConfig,
    pub adapt: AdaptSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
            trunk: Vec::new(),
            aux_heads: 1,
            variants: Variant::ALL.to_vec(),
            confidence_threshold: 0.0,
            benchmark: BenchmarkSpec::default(),
            train: TrainConfig {
                lambda: 1.0,
                lr: 1.0,
                epochs: 150,
                batch_size: 32,
                seed: 0,
                shuffle: true,
                pretrain_epochs: 0,
            },
            adapt: AdaptSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the global seed and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.benchmark.set_seed(self.seed);
        self.train.seed = self.seed.wrapping_add(1);
        if self.trunk.is_empty() {
            self.trunk = self.benchmark.default_trunk();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(self, seed: u64) -> Result<Self> {
        Self { seed, ..self }.resolved()
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn noise_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.adapt.early_stop().validate()?;
        self.adapt.two_norm().validate()?;
        if self.trunk.contains(&0) {
            return Err(Error::Config("trunk widths must be positive".into()));
        }
        let available = self.benchmark.aux_widths().len();
        if self.aux_heads == 0 || self.aux_heads > available {
            return Err(Error::Config(format!(
                "aux_heads must be between 1 and {available} for this benchmark, got {}",
                self.aux_heads
            )));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        if self.sweep.lrs.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("sweep learning rates must be positive".into()));
        }
        if self.sweep.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("sweep alphas must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config("confidence_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialisation, written next to every CSV.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}
