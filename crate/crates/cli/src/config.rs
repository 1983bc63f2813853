//! Experiment configuration, read from a TOML file.
//!
//! Every section is optional and falls back to the low-count defaults.
//! Unknown keys are rejected so that a misspelt `beta1` cannot silently
//! fall back to its default.

use std::path::{Path, PathBuf};

use mkrem::dictionary::DictionarySpec;
use mkrem::graph::GraphSpec;
use mkrem::kernel::Neighborhood;
use mkrem::phantom::{NoiseSpec, PhantomConfig};
use mkrem::pipeline::KernelSetup;
use mkrem::projector::Geometry;
use mkrem::recon::{Algorithm, ReconConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; relative paths resolve against the working directory.
    pub output: PathBuf,
    pub geometry: Geometry,
    pub phantom: PhantomConfig,
    pub noise: NoiseSpec,
    pub kernel: KernelSetup,
    pub dictionary: DictionarySpec,
    pub graph: GraphSpec,
    pub recon: ReconSection,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            geometry: Geometry::default(),
            phantom: PhantomConfig::default(),
            noise: NoiseSpec::default(),
            kernel: KernelSetup::default(),
            dictionary: DictionarySpec::default(),
            graph: GraphSpec::default(),
            recon: ReconSection::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// Settings shared by every algorithm of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub algorithms: Vec<Algorithm>,
    pub n_iters: usize,
    pub record_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub denom_floor: Option<f64>,
    pub outside_kt: bool,
    pub filter_sigma: f64,
    pub filter_window: usize,
}

impl Default for ReconSection {
    fn default() -> Self {
        let base = ReconConfig::default();
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            n_iters: base.n_iters,
            record_every: base.record_every,
            beta1: base.beta1,
            beta2: base.beta2,
            denom_floor: base.denom_floor,
            outside_kt: base.outside_kt,
            filter_sigma: base.filter_sigma,
            filter_window: base.filter_window,
        }
    }
}

impl ReconSection {
    pub fn config_for(&self, algorithm: Algorithm) -> ReconConfig {
        ReconConfig {
            algorithm,
            n_iters: self.n_iters,
            beta1: self.beta1,
            beta2: self.beta2,
            denom_floor: self.denom_floor,
            record_every: self.record_every,
            outside_kt: self.outside_kt,
            filter_sigma: self.filter_sigma,
            filter_window: self.filter_window,
            ..ReconConfig::default()
        }
    }

    /// Iterations at which images are recorded.
    pub fn recorded_iterations(&self) -> Vec<usize> {
        (1..=self.n_iters / self.record_every)
            .map(|k| k * self.record_every)
            .collect()
    }
}

/// Window widths `J_a` visited by the `sweep` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub ja: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ja: vec![9, 15, 21, 27],
            algorithms: vec![Algorithm::Kem, Algorithm::Mkrem],
        }
    }
}

fn config_err(e: mkrem::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The defaults of the `demo` command at a given image size.
    pub fn demo(size: usize) -> Self {
        let mut cfg = Self::default();
        cfg.geometry = Geometry::new(size, size, 90, size + size / 2 - 1);
        cfg.output = PathBuf::from("demo-out");
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate().map_err(config_err)?;
        self.noise.validate().map_err(config_err)?;
        self.kernel.a.validate().map_err(config_err)?;
        self.kernel.b.validate().map_err(config_err)?;
        if self.kernel.g == 0 {
            return Err(CliError::Config("kernel.g must be >= 1".into()));
        }
        self.dictionary.validate().map_err(config_err)?;
        self.graph.validate().map_err(config_err)?;
        if self.recon.algorithms.is_empty() {
            return Err(CliError::Config("recon.algorithms is empty".into()));
        }
        for alg in &self.recon.algorithms {
            self.recon.config_for(*alg).validate().map_err(config_err)?;
        }
        if self.recon.record_every > self.recon.n_iters {
            return Err(CliError::Config("recon.record_every exceeds recon.n_iters".into()));
        }
        if let Some(&j) = self.sweep.ja.iter().find(|&&j| j == 0 || j % 2 == 0) {
            return Err(CliError::Config(format!("sweep.ja values must be odd, got {j}")));
        }
        Ok(())
    }

    /// Copy with the reconstruction kernel's window width replaced.
    pub fn with_ja(&self, ja: usize) -> Self {
        let mut cfg = self.clone();
        cfg.kernel.a.neighborhood = Neighborhood::Window(ja);
        cfg
    }

    /// Algorithms that need the kernel, dictionary and graph stages.
    pub fn needs_build(&self) -> bool {
        self.recon.algorithms.iter().any(|a| a.uses_kernel())
    }
}
