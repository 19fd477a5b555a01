//! Fixed-point (Picard) linearization of the convective term.

use thiserror::Error;

use crate::PolyMesh;
use crate::fespace::{FESpace, face_rule};
use crate::forms::{EtaField, FormError};
use crate::system::{LinearSolver, Problem, SolveError, SolveReport, SolverMethod, SolverOptions, SystemAssembler, TransportState};

/// Norm used in the stopping test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IncrementNorm {
    /// Euclidean norm of the coefficient increment.
    #[default]
    Absolute,
    /// Increment divided by the norm of the new iterate.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Increments above this value (or non-finite) stop the iteration as diverged.
    pub divergence_threshold: f64,
    pub norm: IncrementNorm,
    pub solver: SolverOptions,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 1000,
            divergence_threshold: 1e12,
            norm: IncrementNorm::Absolute,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PicardError {
    #[error("invalid options: {0}")]
    Options(&'static str),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error("linear solve failed at iteration {iteration}: {source}")]
    Solve { iteration: usize, source: SolveError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PicardStatus {
    Converged,
    MaxIter,
    Diverged,
}

impl PicardStatus {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxIter => "max_iter",
            Self::Diverged => "diverged",
        }
    }
}

/// Diagnostics of one Picard iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub increment: f64,
    pub relative_increment: f64,
    /// `|eta|_{dG,inf}` of the velocity used in this iteration.
    pub eta_dg_inf: f64,
    /// `||T||_{dG,inf}` of the new temperature.
    pub t_dg_inf: f64,
    pub solve: SolveReport,
}

impl IterationRecord {
    /// Log line `iter k |d| |d|_rel |eta|_dGinf`.
    pub fn log_line(&self) -> String {
        format!(
            "iter {} {:.6e} {:.6e} {:.6e}",
            self.iteration, self.increment, self.relative_increment, self.eta_dg_inf
        )
    }
}

/// Current iterate, the velocity it induces and the iteration history.
#[derive(Debug, Clone)]
pub struct PicardState {
    pub iteration: usize,
    pub solution: Vec<f64>,
    pub eta: EtaField,
    pub history: Vec<IterationRecord>,
    pub status: PicardStatus,
}

impl PicardState {
    pub fn increments(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.increment).collect()
    }
}

/// `eta = -c_f K grad(p)` with exact modal differentiation.
pub fn compute_eta(space: &FESpace, p: &[f64], params: &crate::forms::ModelParams) -> EtaField {
    EtaField::new(space, p, params)
}

/// `||div eta||_inf + max_F max_K (ell^2 / h_K) ||[eta]_n||_inf(F)`, maxima taken
/// over quadrature points of order `order`. On boundary faces the jump is `eta.n`.
pub fn eta_dg_inf_seminorm(eta: &EtaField, mesh: &PolyMesh, ell: usize, order: usize) -> f64 {
    let mut div_max: f64 = 0.0;
    for c in 0..mesh.n_cells() {
        for (x, _) in crate::fespace::element_rule(mesh, c, order).iter() {
            div_max = div_max.max(eta.value_and_div(c, x).1.abs());
        }
    }
    let l2 = (ell * ell) as f64;
    let mut jump_max: f64 = 0.0;
    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let mut scale = l2 / mesh.diameter(face.owner);
        if let Some(nb) = face.neighbor {
            scale = scale.max(l2 / mesh.diameter(nb));
        }
        for (x, _) in face_rule(mesh, f, order).iter() {
            let ep = eta.value(face.owner, x);
            let em = face.neighbor.map_or([0.0, 0.0], |nb| eta.value(nb, x));
            let jn = (ep[0] - em[0]) * face.normal[0] + (ep[1] - em[1]) * face.normal[1];
            jump_max = jump_max.max(scale * jn.abs());
        }
    }
    div_max + jump_max
}

/// `||grad T||_inf + max_F max_K (ell^2 / h_K) ||[T]||_inf(F)`; boundary jumps
/// are the trace itself.
pub fn dg_inf_norm(space: &FESpace, t: &[f64], order: usize) -> f64 {
    let mesh = space.mesh();
    let mut grad_max: f64 = 0.0;
    for c in 0..mesh.n_cells() {
        for (x, _) in space.element_quadrature(c, order).iter() {
            let g = space.evaluate(t, c, x).grad[0];
            grad_max = grad_max.max(g[0].hypot(g[1]));
        }
    }
    let l2 = (space.degree() * space.degree()) as f64;
    let mut jump_max: f64 = 0.0;
    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let mut scale = l2 / mesh.diameter(face.owner);
        if let Some(nb) = face.neighbor {
            scale = scale.max(l2 / mesh.diameter(nb));
        }
        for (x, _) in face_rule(mesh, f, order).iter() {
            let tp = space.evaluate(t, face.owner, x).value[0];
            let tm = face.neighbor.map_or(0.0, |nb| space.evaluate(t, nb, x).value[0]);
            jump_max = jump_max.max(scale * (tp - tm).abs());
        }
    }
    grad_max + jump_max
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the Picard iteration. The first iteration uses `eta = 0` (and a zero
/// previous temperature for the frozen-gradient variant); every linear solve
/// counts as one iteration. `log` receives one record per iteration.
pub fn fixed_point_solve(
    problem: &Problem,
    opts: &PicardOptions,
    log: &mut dyn FnMut(&IterationRecord),
) -> Result<PicardState, PicardError> {
    if !(opts.tolerance > 0.0) {
        return Err(PicardError::Options("tolerance must be positive"));
    }
    if opts.max_iterations == 0 {
        return Err(PicardError::Options("max_iterations must be at least 1"));
    }
    let assembler = SystemAssembler::new(problem)?;
    let layout = assembler.layout().clone();
    let disc = &problem.disc;
    let space = disc.space();
    let diag_order = disc.volume_order();
    let mut solver = LinearSolver::new(opts.solver);
    if opts.solver.method == SolverMethod::LowRankUpdate {
        let (rows, cols) = assembler.transport_ranges();
        solver
            .set_base(assembler.base_matrix(), rows, cols)
            .map_err(|source| PicardError::Solve { iteration: 0, source })?;
    }

    let mut x = vec![0.0; layout.len()];
    let mut eta = EtaField::zero(space, disc.params());
    let mut history = Vec::new();
    let mut status = PicardStatus::MaxIter;
    let mut k = 0;

    while k < opts.max_iterations {
        k += 1;
        let fields = layout.split(&x);
        let state = TransportState { eta: &eta, t_prev: Some(fields.t) };
        let system = assembler.assemble(state)?;
        let eta_dg_inf = if eta.is_zero() { 0.0 } else { eta_dg_inf_seminorm(&eta, disc.mesh(), disc.ell(), diag_order) };
        let (x_new, solve) = match solver.solve(&system.matrix, &system.rhs) {
            Ok(r) => r,
            Err(SolveError::NonFinite) => {
                status = PicardStatus::Diverged;
                break;
            }
            Err(source) => return Err(PicardError::Solve { iteration: k, source }),
        };
        let diff: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let increment = norm(&diff);
        let new_norm = norm(&x_new);
        let relative_increment = if new_norm > 0.0 { increment / new_norm } else { increment };
        x = x_new;
        let t_dg_inf = dg_inf_norm(space, layout.split(&x).t, diag_order);
        let record = IterationRecord { iteration: k, increment, relative_increment, eta_dg_inf, t_dg_inf, solve };
        log(&record);
        history.push(record);

        if !increment.is_finite() || increment > opts.divergence_threshold {
            status = PicardStatus::Diverged;
            break;
        }
        eta = EtaField::new(space, layout.split(&x).p, disc.params());
        let measure = match opts.norm {
            IncrementNorm::Absolute => increment,
            IncrementNorm::Relative => relative_increment,
        };
        if measure <= opts.tolerance {
            status = PicardStatus::Converged;
            break;
        }
    }
    Ok(PicardState { iteration: k, solution: x, eta, history, status })
}
