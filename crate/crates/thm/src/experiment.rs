//! Expansion of a configuration into runs, and execution of single runs.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;
use thm_core::PolyMesh;
use thm_core::forms::{
    Discretization, FormError, Material, ModelParams, PenaltyParams, TransportOptions, TransportVariant,
    scaled_identity,
};
use thm_core::mesh::{MeshError, Rect, generate_voronoi};
use thm_core::mms::{CaseKind, ErrorReport, ManufacturedCase, MmsError, error_norms};
use thm_core::picard::{PicardOptions, PicardStatus, fixed_point_solve};
use thm_core::system::{DofLayout, SolverOptions};

use crate::config::{CaseChoice, ConfigError, ExperimentConfig, ExperimentKind, ResolvedOptions};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("mesh generation failed for {cells} cells: {source}")]
    Mesh { cells: usize, source: MeshError },
}

/// Runs with this many cells or more are heavy.
pub const HEAVY_CELLS: usize = 10_000;
/// Runs with this degree or more are heavy.
pub const HEAVY_DEGREE: usize = 5;

pub fn is_heavy(cells: usize, ell: usize) -> bool {
    cells >= HEAVY_CELLS || ell >= HEAVY_DEGREE
}

/// Parameter values of one sweep point; `None` keeps the reference material.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SweepPoint {
    pub theta: Option<f64>,
    pub kappa: Option<f64>,
    pub nu_pt: Option<f64>,
}

impl SweepPoint {
    /// `kind[theta=..,kappa=..,nu=..]` listing the parameters that are swept
    /// over more than one value in `cfg`.
    pub fn label(&self, cfg: &ExperimentConfig) -> String {
        let swept = |v: &Option<Vec<f64>>| v.as_ref().is_some_and(|v| v.len() > 1);
        let mut parts = Vec::new();
        if let (true, Some(t)) = (swept(&cfg.theta), self.theta) {
            parts.push(format!("theta={t:e}"));
        }
        if let (true, Some(k)) = (swept(&cfg.kappa), self.kappa) {
            parts.push(format!("kappa={k:e}"));
        }
        if let (true, Some(n)) = (swept(&cfg.nu_pt), self.nu_pt) {
            parts.push(format!("nu={n:e}"));
        }
        if parts.is_empty() { cfg.kind.name().to_owned() } else { format!("{}[{}]", cfg.kind.name(), parts.join(",")) }
    }
}

/// Outcome class of one run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Picard(PicardStatus),
    /// The run could not be completed (assembly or linear solver failure).
    Error(String),
    /// Heavy run not executed.
    Skipped,
}

impl RunStatus {
    pub fn name(&self) -> &str {
        match self {
            Self::Picard(s) => s.name(),
            Self::Error(_) => "error",
            Self::Skipped => "skipped",
        }
    }
}

/// One `(N, ell, variant, sweep point)` combination.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub cells: usize,
    pub ell: usize,
    pub variant: TransportVariant,
    pub point: SweepPoint,
    /// Position of the sweep point in the configuration (for ordering).
    pub point_index: usize,
    pub heavy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub spec: RunSpec,
    pub label: String,
    pub h: f64,
    pub status: RunStatus,
    pub iterations: usize,
    pub errors: Option<ErrorReport>,
    pub increments: Vec<f64>,
    pub seconds: f64,
}

impl RunResult {
    /// Converged, or stopped at `max_iter` for a variant listed as expected to.
    pub fn is_acceptable(&self, opts: &ResolvedOptions) -> bool {
        match &self.status {
            RunStatus::Picard(PicardStatus::Converged) => true,
            RunStatus::Picard(PicardStatus::MaxIter) => opts.expected_max_iter.contains(&self.spec.variant),
            RunStatus::Skipped => self.spec.heavy,
            _ => false,
        }
    }
}

fn variant_rank(v: TransportVariant) -> usize {
    TransportVariant::ALL.iter().position(|&w| w == v).unwrap_or(usize::MAX)
}

/// Sweep points in configuration order.
pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let opt_list = |v: &Option<Vec<f64>>| -> Vec<Option<f64>> {
        v.as_ref().map_or(vec![None], |v| v.iter().map(|&x| Some(x)).collect())
    };
    let mut points = Vec::new();
    for &theta in &opt_list(&cfg.theta) {
        for &kappa in &opt_list(&cfg.kappa) {
            for &nu_pt in &opt_list(&cfg.nu_pt) {
                points.push(SweepPoint { theta, kappa, nu_pt });
            }
        }
    }
    points
}

/// All runs of an experiment, sorted by `(ell, N, variant, sweep point)`.
pub fn expand(cfg: &ExperimentConfig) -> Result<Vec<RunSpec>, ConfigError> {
    let opts = cfg.resolve()?;
    let points = sweep_points(cfg);
    let mut runs = Vec::new();
    for &cells in &cfg.cells {
        for &ell in &cfg.degrees {
            for &variant in &opts.variants {
                for (point_index, &point) in points.iter().enumerate() {
                    runs.push(RunSpec { cells, ell, variant, point, point_index, heavy: is_heavy(cells, ell) });
                }
            }
        }
    }
    runs.sort_by_key(|r| (r.ell, r.cells, variant_rank(r.variant), r.point_index));
    runs.dedup();
    Ok(runs)
}

/// Reference material with the configuration's overrides and the sweep point applied.
pub fn material(cfg: &ExperimentConfig, point: &SweepPoint) -> Material {
    let mut m = Material::reference();
    if let Some(abc) = cfg.abc {
        m.a0 = abc;
        m.b0 = abc;
        m.c0 = abc;
    }
    if let Some(cf) = cfg.cf {
        m.cf = cf;
    }
    if let Some(t) = point.theta {
        m.theta = scaled_identity(t);
    }
    if let Some(k) = point.kappa {
        m.k = scaled_identity(k);
    }
    m
}

pub fn manufactured_case(cfg: &ExperimentConfig, point: &SweepPoint, ell: usize) -> ManufacturedCase {
    let base = match cfg.case {
        CaseChoice::Trigonometric => ManufacturedCase::trigonometric(),
        CaseChoice::TrigonometricMirrored => {
            ManufacturedCase { kind: CaseKind::Trigonometric { mirrored: true }, ..ManufacturedCase::trigonometric() }
        }
        CaseChoice::Polynomial => ManufacturedCase::polynomial(ell),
    };
    let nu = point.nu_pt.unwrap_or(1.0);
    base.with_amplitudes(cfg.nu_u, nu, nu)
}

/// Lloyd-relaxed Voronoi mesh of the unit square used by every experiment.
pub fn build_mesh(cells: usize, seed: u64, lloyd: usize) -> Result<PolyMesh, MeshError> {
    generate_voronoi(cells, Rect::unit(), seed, lloyd)
}

#[derive(Debug, Error)]
enum RunFailure {
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Mms(#[from] MmsError),
    #[error(transparent)]
    Picard(#[from] thm_core::picard::PicardError),
}

/// Executes one run on `mesh`; failures are reported in the status.
pub fn run_one(cfg: &ExperimentConfig, opts: &ResolvedOptions, spec: &RunSpec, mesh: Arc<PolyMesh>) -> RunResult {
    let label = spec.point.label(cfg);
    let h = mesh.h();
    let started = Instant::now();
    let mut result = RunResult {
        spec: spec.clone(),
        label,
        h,
        status: RunStatus::Skipped,
        iterations: 0,
        errors: None,
        increments: Vec::new(),
        seconds: 0.0,
    };
    match execute(cfg, opts, spec, mesh) {
        Ok((status, iterations, errors, increments)) => {
            result.status = RunStatus::Picard(status);
            result.iterations = iterations;
            result.errors = Some(errors);
            result.increments = increments;
        }
        Err(e) => result.status = RunStatus::Error(e.to_string()),
    }
    result.seconds = started.elapsed().as_secs_f64();
    result
}

type Outcome = (PicardStatus, usize, ErrorReport, Vec<f64>);

fn execute(
    cfg: &ExperimentConfig,
    opts: &ResolvedOptions,
    spec: &RunSpec,
    mesh: Arc<PolyMesh>,
) -> Result<Outcome, RunFailure> {
    let mat = material(cfg, &spec.point);
    let params = ModelParams::uniform(mat, mesh.n_cells());
    let penalties = match cfg.penalty {
        Some(a) => PenaltyParams { alpha1: a, alpha2: a, alpha3: a, alpha4: a, ..PenaltyParams::default() },
        None => PenaltyParams::default(),
    };
    let disc = Discretization::new(mesh, spec.ell, spec.ell, params, penalties)?;
    let case = manufactured_case(cfg, &spec.point, spec.ell);
    let transport = TransportOptions { average: opts.average, upwind_faces: opts.upwind_faces };
    let problem = case.problem(disc.clone(), spec.variant, transport)?;
    let picard = PicardOptions {
        tolerance: cfg.tolerance,
        max_iterations: cfg.max_iterations,
        norm: opts.norm,
        solver: SolverOptions { method: opts.solver, ..SolverOptions::default() },
        ..PicardOptions::default()
    };
    let state = fixed_point_solve(&problem, &picard, &mut |_| {})?;
    let layout = DofLayout::new(&disc);
    let errors = error_norms(&disc, &layout, &state.solution, &case);
    Ok((state.status, state.iteration, errors, state.increments()))
}

/// Executes an experiment. Heavy runs are skipped unless `heavy` is set;
/// `progress` is called after each finished run.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    heavy: bool,
    progress: &(dyn Fn(&RunResult) + Sync),
) -> Result<Vec<RunResult>, ExperimentError> {
    let opts = cfg.resolve()?;
    let specs = expand(cfg)?;
    let needed: Vec<usize> = {
        let mut n: Vec<usize> = specs.iter().filter(|s| heavy || !s.heavy).map(|s| s.cells).collect();
        n.sort_unstable();
        n.dedup();
        n
    };
    let meshes: BTreeMap<usize, Arc<PolyMesh>> = needed
        .par_iter()
        .map(|&cells| {
            build_mesh(cells, cfg.seed, cfg.lloyd)
                .map(|m| (cells, Arc::new(m)))
                .map_err(|source| ExperimentError::Mesh { cells, source })
        })
        .collect::<Result<_, _>>()?;
    let results: Vec<RunResult> = specs
        .par_iter()
        .map(|spec| {
            let r = match meshes.get(&spec.cells) {
                Some(mesh) if heavy || !spec.heavy => run_one(cfg, &opts, spec, mesh.clone()),
                _ => RunResult {
                    spec: spec.clone(),
                    label: spec.point.label(cfg),
                    h: f64::NAN,
                    status: RunStatus::Skipped,
                    iterations: 0,
                    errors: None,
                    increments: Vec::new(),
                    seconds: 0.0,
                },
            };
            progress(&r);
            r
        })
        .collect();
    Ok(results)
}

/// Whether every run is acceptable: converged, an expected `max_iter`, or a skipped heavy run.
pub fn all_acceptable(cfg: &ExperimentConfig, results: &[RunResult]) -> Result<bool, ConfigError> {
    let opts = cfg.resolve()?;
    Ok(results.iter().all(|r| r.is_acceptable(&opts)))
}

/// Whether the experiment kind reports observed orders across mesh sizes.
pub fn reports_orders(kind: ExperimentKind) -> bool {
    !matches!(kind, ExperimentKind::ConvergenceP)
}
