//! JSON configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bregman::{CertificateProtocol, SourceConditionParams};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::integrands::{builtin, Integrand};
use crate::registration::{blob_image, default_blobs, random_blobs, Blob, ScalarImage};
use crate::solver::SolverOptions;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub grid: GridConfig,
    pub mask: MaskConfig,
    pub integrand: IntegrandConfig,
    pub image: ImageConfig,
    pub experiment: ExperimentConfig,
    pub solver: SolverConfig,
    pub certificate: CertificateProtocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lower: [-1.0, -1.0],
            upper: [1.0, 1.0],
            nx: 64,
            ny: 64,
        }
    }
}

/// The domain `Ω` inside the grid box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskConfig {
    Box,
    Disk { center: [f64; 2], radius: f64 },
    /// A 0/1 CSV with one row per cell row, relative to the config file.
    File { path: PathBuf },
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig::Disk {
            center: [0.0, 0.0],
            radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrandConfig {
    pub name: String,
    pub p: f64,
    pub q: f64,
}

impl Default for IntegrandConfig {
    fn default() -> Self {
        IntegrandConfig {
            name: "rotation".into(),
            p: 4.0,
            q: 2.0,
        }
    }
}

/// The reference image `I₂`: explicit blobs, or `count` random blobs drawn
/// from `seed`, or the default three blobs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub blobs: Option<Vec<Blob>>,
    pub seed: Option<u64>,
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubgradientChoice {
    /// `w = 0`, a subgradient wherever `R` is globally minimal.
    #[default]
    Zero,
    /// `w` built from the integrand gradient at `u†`.
    Integrand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub theta: f64,
    pub delta0: f64,
    pub levels: usize,
    pub alpha0: f64,
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    pub q: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Defaults to `alpha0`.
    pub alpha_bar: Option<f64>,
    /// Defaults to `10·ᾱ·R(u†)`.
    pub rho: Option<f64>,
    pub subgradient: SubgradientChoice,
    /// Number of smallest levels used for the slope fit.
    pub fit_levels: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            theta: std::f64::consts::FRAC_PI_6,
            delta0: 0.1,
            levels: 7,
            alpha0: 0.1,
            epsilon: 0.0,
            seeds: vec![1, 2],
            q: 2.0,
            beta1: 0.5,
            beta2: 1.0,
            alpha_bar: None,
            rho: None,
            subgradient: SubgradientChoice::Zero,
            fit_levels: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Start {
    Identity,
    Random,
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub starts: Vec<Start>,
    /// Amplitude of the smooth perturbation used by the random start.
    pub random_amplitude: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        SolverConfig {
            tol: o.tol,
            max_iter: o.max_iter,
            memory: o.memory,
            starts: vec![Start::Identity, Start::Random, Start::Warm],
            random_amplitude: 0.02,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            memory: self.memory,
        }
    }
}

impl Config {
    /// Reads and validates a config. Relative mask paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Config = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let MaskConfig::File { path: mask } = &mut cfg.mask {
            if mask.is_relative() {
                if let Some(dir) = path.parent() {
                    *mask = dir.join(&*mask);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if !(e.q >= 1.0) {
            return Err(Error::Config(format!("experiment.q must be >= 1, got {}", e.q)));
        }
        if !(e.delta0 > 0.0) || !(e.alpha0 > 0.0) {
            return Err(Error::Config("experiment.delta0 and alpha0 must be positive".into()));
        }
        if e.q == 1.0 {
            if !(0.0..1.0).contains(&e.epsilon) {
                return Err(Error::Config(format!(
                    "experiment.epsilon must lie in [0, 1) for q = 1, got {}",
                    e.epsilon
                )));
            }
            if e.epsilon == 0.0 && !(e.alpha0 * e.beta2 < 1.0) {
                return Err(Error::Config(format!(
                    "q = 1 with epsilon = 0 needs 0 < alpha*beta2 < 1, got {}",
                    e.alpha0 * e.beta2
                )));
            }
        }
        if e.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        if e.fit_levels < 3 {
            return Err(Error::Config("experiment.fit_levels must be at least 3".into()));
        }
        SourceConditionParams::new(e.beta1, e.beta2, e.rho.unwrap_or(1.0), self.alpha_bar())?;
        if self.solver.starts.is_empty() {
            return Err(Error::Config("solver.starts is empty".into()));
        }
        self.solver.options().validate()
    }

    pub fn alpha_bar(&self) -> f64 {
        self.experiment.alpha_bar.unwrap_or(self.experiment.alpha0)
    }

    pub fn build_grid(&self) -> Result<Grid> {
        let g = &self.grid;
        let grid = Grid::new(g.lower, g.upper, g.nx, g.ny)?;
        match &self.mask {
            MaskConfig::Box => Ok(grid),
            MaskConfig::Disk { center, radius } => grid.with_disk(*center, *radius),
            MaskConfig::File { path } => {
                let mask = crate::io::read_mask(path, g.nx - 1, g.ny - 1)?;
                grid.with_mask(mask)
            }
        }
    }

    pub fn build_integrand(&self) -> Result<Arc<dyn Integrand>> {
        builtin(&self.integrand.name, self.integrand.p, self.integrand.q)
    }

    pub fn blobs(&self, grid: &Grid) -> Vec<Blob> {
        match (&self.image.blobs, self.image.seed) {
            (Some(b), _) => b.clone(),
            (None, Some(seed)) => random_blobs(grid, self.image.count.unwrap_or(3), seed),
            (None, None) => default_blobs(),
        }
    }

    pub fn reference_image(&self, grid: &Grid) -> ScalarImage {
        blob_image(grid, &self.blobs(grid))
    }
}
