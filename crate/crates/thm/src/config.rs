//! Experiment configuration files (flat TOML with typed keys).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;
use thm_core::forms::{TransportAverage, TransportVariant, UpwindFaces};
use thm_core::picard::IncrementNorm;
use thm_core::system::SolverMethod;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Experiment families of the verification battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ConvergenceH,
    ConvergenceP,
    RobustnessTheta,
    RobustnessKappa,
    RobustnessThetakappa,
    Superconvergence,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ConvergenceH => "convergence-h",
            Self::ConvergenceP => "convergence-p",
            Self::RobustnessTheta => "robustness-theta",
            Self::RobustnessKappa => "robustness-kappa",
            Self::RobustnessThetakappa => "robustness-thetakappa",
            Self::Superconvergence => "superconvergence",
        }
    }

    /// Robustness sweeps additionally print an iteration matrix.
    pub fn is_robustness(&self) -> bool {
        matches!(self, Self::RobustnessTheta | Self::RobustnessKappa | Self::RobustnessThetakappa)
    }
}

/// Manufactured solution used by every run of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseChoice {
    /// Trigonometric fields with both displacement components given by the same function of `x`.
    #[default]
    Trigonometric,
    /// Trigonometric fields with the second displacement component mirrored in `y`.
    TrigonometricMirrored,
    /// Polynomial fields of degree `min(ell, 2)`, reproduced exactly by the scheme when `cf = 0`.
    Polynomial,
}

fn default_seed() -> u64 {
    1
}
fn default_lloyd() -> usize {
    100
}
fn default_one() -> f64 {
    1.0
}
fn default_variants() -> Vec<String> {
    vec!["vol".into()]
}
fn default_tolerance() -> f64 {
    1e-10
}
fn default_max_iterations() -> usize {
    1000
}
fn default_solver() -> String {
    "direct".into()
}
fn default_norm() -> String {
    "absolute".into()
}
fn default_average() -> String {
    "arithmetic".into()
}
fn default_upwind_faces() -> String {
    "interior".into()
}

/// One experiment: the cartesian product of mesh sizes, degrees, variants and
/// parameter sweeps. Unset material overrides keep the reference material.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Numbers of Voronoi cells of the meshes.
    pub cells: Vec<usize>,
    pub degrees: Vec<usize>,
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_lloyd")]
    pub lloyd: usize,
    /// Scalars multiplying the identity for the thermal conductivity.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    /// Scalars multiplying the identity for the permeability.
    #[serde(default)]
    pub kappa: Option<Vec<f64>>,
    /// Common value of the three storage coefficients `a0 = b0 = c0`.
    #[serde(default)]
    pub abc: Option<f64>,
    /// Convective coupling coefficient.
    #[serde(default)]
    pub cf: Option<f64>,
    #[serde(default = "default_one")]
    pub nu_u: f64,
    /// Common amplitudes of the pressure and temperature (`nu_p = nu_T`).
    #[serde(default)]
    pub nu_pt: Option<Vec<f64>>,
    #[serde(default)]
    pub case: CaseChoice,
    /// Common value of the four penalty constants.
    #[serde(default)]
    pub penalty: Option<f64>,
    #[serde(default = "default_average")]
    pub transport_average: String,
    #[serde(default = "default_upwind_faces")]
    pub upwind_faces: String,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_norm")]
    pub increment_norm: String,
    #[serde(default = "default_solver")]
    pub solver: String,
    /// Variants whose runs may end at `max_iter` without failing the experiment.
    #[serde(default)]
    pub expected_max_iter: Vec<String>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Validated, typed view of the string-valued options.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedOptions {
    pub variants: Vec<TransportVariant>,
    pub expected_max_iter: Vec<TransportVariant>,
    pub solver: SolverMethod,
    pub norm: IncrementNorm,
    pub average: TransportAverage,
    pub upwind_faces: UpwindFaces,
}

fn nonempty_positive(name: &str, values: &Option<Vec<f64>>) -> Result<(), ConfigError> {
    match values {
        Some(v) if v.is_empty() => Err(ConfigError::Invalid(format!("`{name}` must not be empty"))),
        Some(v) if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) => {
            Err(ConfigError::Invalid(format!("`{name}` values must be positive and finite")))
        }
        _ => Ok(()),
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<TransportVariant>, ConfigError> {
    names.iter().map(|s| TransportVariant::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string()))).collect()
}

impl ExperimentConfig {
    /// Minimal configuration of `kind` on the given meshes and degrees.
    pub fn new(kind: ExperimentKind, cells: Vec<usize>, degrees: Vec<usize>) -> Self {
        Self {
            kind,
            cells,
            degrees,
            variants: default_variants(),
            seed: default_seed(),
            lloyd: default_lloyd(),
            theta: None,
            kappa: None,
            abc: None,
            cf: None,
            nu_u: 1.0,
            nu_pt: None,
            case: CaseChoice::default(),
            penalty: None,
            transport_average: default_average(),
            upwind_faces: default_upwind_faces(),
            tolerance: default_tolerance(),
            max_iterations: default_max_iterations(),
            increment_norm: default_norm(),
            solver: default_solver(),
            expected_max_iter: Vec::new(),
            output: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    pub fn with_variants(mut self, variants: &[TransportVariant]) -> Self {
        self.variants = variants.iter().map(|v| v.name().to_owned()).collect();
        self
    }

    /// Checks the invariants and parses the string-valued options.
    pub fn resolve(&self) -> Result<ResolvedOptions, ConfigError> {
        if self.cells.is_empty() || self.degrees.is_empty() || self.variants.is_empty() {
            return Err(ConfigError::Invalid("`cells`, `degrees` and `variants` must not be empty".into()));
        }
        if self.cells.iter().any(|&n| n < 2) {
            return Err(ConfigError::Invalid("meshes need at least two cells".into()));
        }
        if self.degrees.contains(&0) {
            return Err(ConfigError::Invalid("degrees must be at least 1".into()));
        }
        nonempty_positive("theta", &self.theta)?;
        nonempty_positive("kappa", &self.kappa)?;
        nonempty_positive("nu_pt", &self.nu_pt)?;
        if let Some(abc) = self.abc {
            if !(abc >= 0.0) {
                return Err(ConfigError::Invalid("`abc` must be non-negative".into()));
            }
        }
        if let Some(p) = self.penalty {
            if !(p > 0.0) {
                return Err(ConfigError::Invalid("`penalty` must be positive".into()));
            }
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(ConfigError::Invalid("`tolerance` must be positive and `max_iterations` at least 1".into()));
        }
        let solver = SolverMethod::from_str(&self.solver).map_err(ConfigError::Invalid)?;
        let norm = match self.increment_norm.as_str() {
            "absolute" => IncrementNorm::Absolute,
            "relative" => IncrementNorm::Relative,
            other => return Err(ConfigError::Invalid(format!("unknown increment norm `{other}`"))),
        };
        let average = match self.transport_average.as_str() {
            "arithmetic" => TransportAverage::Arithmetic,
            "weighted" => TransportAverage::Weighted,
            other => return Err(ConfigError::Invalid(format!("unknown transport average `{other}`"))),
        };
        let upwind_faces = match self.upwind_faces.as_str() {
            "interior" => UpwindFaces::Interior,
            "all" => UpwindFaces::All,
            other => return Err(ConfigError::Invalid(format!("unknown upwind face set `{other}`"))),
        };
        Ok(ResolvedOptions {
            variants: parse_variants(&self.variants)?,
            expected_max_iter: parse_variants(&self.expected_max_iter)?,
            solver,
            norm,
            average,
            upwind_faces,
        })
    }
}
