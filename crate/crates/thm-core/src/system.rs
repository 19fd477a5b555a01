//! Global block operator over `(u, p, T, phi)` and sparse linear solvers.

use std::ops::Range;
use std::sync::Arc;

use faer::Col;
use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use thiserror::Error;

use crate::basis::BasisEval;
use crate::forms::{
    self, DirichletData, Discretization, EtaField, FormError, ScalarBlocks, ScalarFn, TransportOptions,
    TransportVariant, VectorFn,
};
use crate::krylov::{self, Ilu0, Preconditioner};
use crate::sparse::{Coo, CscMatrix, MergedPattern, residual_compensated};

/// Volume sources of the momentum, mass and energy equations.
#[derive(Clone)]
pub struct Sources {
    pub f: VectorFn,
    pub g: ScalarFn,
    pub h: ScalarFn,
}

impl Sources {
    pub fn zero() -> Self {
        Self { f: Arc::new(|_| [0.0, 0.0]), g: Arc::new(|_| 0.0), h: Arc::new(|_| 0.0) }
    }
}

impl std::fmt::Debug for Sources {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Sources { .. }")
    }
}

/// Index ranges of the four unknowns in the global vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DofLayout {
    pub n_cells: usize,
    /// Scalar modes per cell of the degree-`ell` space.
    pub nb: usize,
    /// Modes per cell of the total pressure space.
    pub nq: usize,
    pub u: Range<usize>,
    pub p: Range<usize>,
    pub t: Range<usize>,
    pub phi: Range<usize>,
}

impl DofLayout {
    pub fn new(disc: &Discretization) -> Self {
        let n_cells = disc.mesh().n_cells();
        let nb = disc.space().n_modes();
        let nq = disc.space_q().n_modes();
        let nu = 2 * nb * n_cells;
        let ns = nb * n_cells;
        let nphi = nq * n_cells;
        Self {
            n_cells,
            nb,
            nq,
            u: 0..nu,
            p: nu..nu + ns,
            t: nu + ns..nu + 2 * ns,
            phi: nu + 2 * ns..nu + 2 * ns + nphi,
        }
    }

    pub fn len(&self) -> usize {
        self.phi.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split<'a>(&self, x: &'a [f64]) -> Fields<'a> {
        Fields { u: &x[self.u.clone()], p: &x[self.p.clone()], t: &x[self.t.clone()], phi: &x[self.phi.clone()] }
    }
}

/// Borrowed views of the four unknowns.
#[derive(Debug, Clone, Copy)]
pub struct Fields<'a> {
    pub u: &'a [f64],
    pub p: &'a [f64],
    pub t: &'a [f64],
    pub phi: &'a [f64],
}

/// Everything needed to assemble the linearized system.
#[derive(Debug, Clone)]
pub struct Problem {
    pub disc: Discretization,
    pub dirichlet: DirichletData,
    pub sources: Sources,
    pub variant: TransportVariant,
    pub transport: TransportOptions,
}

/// Frozen quantities of the previous iterate.
#[derive(Debug, Clone, Copy)]
pub struct TransportState<'a> {
    pub eta: &'a EtaField,
    pub t_prev: Option<&'a [f64]>,
}

/// Assembled matrix, right-hand side and dof layout.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub matrix: CscMatrix,
    pub rhs: Vec<f64>,
    pub layout: DofLayout,
}

/// Assembles the parameter-independent part of the operator once and adds the
/// transport block for each new transport state.
#[derive(Debug, Clone)]
pub struct SystemAssembler {
    problem: Problem,
    layout: DofLayout,
    pattern: MergedPattern,
    static_rhs: Vec<f64>,
}

impl SystemAssembler {
    pub fn new(problem: &Problem) -> Result<Self, FormError> {
        let layout = DofLayout::new(&problem.disc);
        let (fixed, static_rhs) = assemble_static(problem, &layout);
        let eta = EtaField::zero(problem.disc.space(), problem.disc.params());
        let t0 = vec![0.0; layout.t.len()];
        let (c, _) = transport_block(problem, &layout, TransportState { eta: &eta, t_prev: Some(&t0) })?;
        let pattern = MergedPattern::new(&fixed, &c);
        Ok(Self { problem: problem.clone(), layout, pattern, static_rhs })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn layout(&self) -> &DofLayout {
        &self.layout
    }

    /// Operator without the transport block, on the same pattern as [`SystemAssembler::assemble`].
    pub fn base_matrix(&self) -> CscMatrix {
        self.pattern.base()
    }

    /// Rows and columns of the global matrix touched by the transport block.
    pub fn transport_ranges(&self) -> (Range<usize>, Range<usize>) {
        let cols = if self.problem.variant == TransportVariant::Old { self.layout.p.clone() } else { self.layout.t.clone() };
        (self.layout.t.clone(), cols)
    }

    pub fn assemble(&self, state: TransportState<'_>) -> Result<BlockSystem, FormError> {
        let (c, c_rhs) = transport_block(&self.problem, &self.layout, state)?;
        let matrix = self.pattern.combine(&c);
        let rhs = self.static_rhs.iter().zip(&c_rhs).map(|(a, b)| a + b).collect();
        Ok(BlockSystem { matrix, rhs, layout: self.layout.clone() })
    }
}

/// One-shot assembly of the global system for a given transport state.
pub fn assemble_global(problem: &Problem, state: TransportState<'_>) -> Result<BlockSystem, FormError> {
    SystemAssembler::new(problem)?.assemble(state)
}

/// All blocks except the transport operator, with sources and Dirichlet liftings.
pub fn assemble_static(problem: &Problem, layout: &DofLayout) -> (Coo, Vec<f64>) {
    let disc = &problem.disc;
    let dir = &problem.dirichlet;
    let n = layout.len();
    let mut a = Coo::new(n, n);
    let mut rhs = vec![0.0; n];

    let (ae, re) = forms::assemble_ae(disc, &*dir.g_u);
    a.append(&ae, layout.u.start, layout.u.start, 1.0);
    add_into(&mut rhs[layout.u.clone()], &re);
    drop(ae);

    let (ap, rp) = forms::assemble_ap(disc, &*dir.g_p);
    a.append(&ap, layout.p.start, layout.p.start, 1.0);
    add_into(&mut rhs[layout.p.clone()], &rp);
    drop(ap);

    let (at, rt) = forms::assemble_at(disc, &*dir.g_t);
    a.append(&at, layout.t.start, layout.t.start, 1.0);
    add_into(&mut rhs[layout.t.clone()], &rt);
    drop(at);

    let (b, rb) = forms::assemble_b(disc, &*dir.g_u);
    // B and -B^T are placed from the same summed entries.
    let b = b.compressed();
    a.append(&b, layout.phi.start, layout.u.start, 1.0);
    a.append_transpose(&b, layout.u.start, layout.phi.start, -1.0);
    add_into(&mut rhs[layout.phi.clone()], &rb);
    drop(b);

    a.append(&forms::assemble_d(disc), layout.phi.start, layout.phi.start, 1.0);
    let blocks = ScalarBlocks::new(disc);
    debug_assert_eq!(blocks.size, n - layout.p.start);
    a.append(&forms::assemble_m(disc), layout.p.start + blocks.p, layout.p.start + blocks.p, 1.0);

    let (rf, rg, rh) = source_vectors(disc, &problem.sources);
    add_into(&mut rhs[layout.u.clone()], &rf);
    add_into(&mut rhs[layout.p.clone()], &rg);
    add_into(&mut rhs[layout.t.clone()], &rh);
    (a, rhs)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Load vectors `(f, v)`, `(g, q)` and `(H, S)`.
pub fn source_vectors(disc: &Discretization, src: &Sources) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let space = disc.space();
    let nb = space.n_modes();
    let nc = disc.mesh().n_cells();
    let (mut rf, mut rg, mut rh) = (vec![0.0; 2 * nb * nc], vec![0.0; nb * nc], vec![0.0; nb * nc]);
    let mut e = BasisEval::default();
    for c in 0..nc {
        for (x, w) in space.element_quadrature(c, disc.volume_order()).iter() {
            space.basis(c).eval(x, false, &mut e);
            let (f, g, h) = ((src.f)(x), (src.g)(x), (src.h)(x));
            for i in 0..nb {
                let v = w * e.values[i];
                rf[c * 2 * nb + i] += v * f[0];
                rf[c * 2 * nb + nb + i] += v * f[1];
                rg[c * nb + i] += v * g;
                rh[c * nb + i] += v * h;
            }
        }
    }
    (rf, rg, rh)
}

/// Transport block placed in global indices, plus its right-hand side.
pub fn transport_block(
    problem: &Problem,
    layout: &DofLayout,
    state: TransportState<'_>,
) -> Result<(Coo, Vec<f64>), FormError> {
    let (c, rc) = forms::assemble_c(
        &problem.disc,
        problem.variant,
        problem.transport,
        state.eta,
        state.t_prev,
        &*problem.dirichlet.g_t,
    )?;
    let n = layout.len();
    let mut global = Coo::new(n, n);
    let col = if problem.variant == TransportVariant::Old { layout.p.start } else { layout.t.start };
    global.append(&c, layout.t.start, col, 1.0);
    let mut rhs = vec![0.0; n];
    add_into(&mut rhs[layout.t.clone()], &rc);
    Ok((global, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    /// Sparse LU factorization of every system.
    #[default]
    DirectLu,
    /// Restarted GMRES preconditioned by ILU(0).
    GmresIlu,
    /// GMRES preconditioned by the LU factors of an earlier system; the
    /// factorization is refreshed when GMRES needs too many iterations.
    GmresLaggedLu,
    /// The operator without transport is factorized once; each system is then
    /// solved through the Woodbury identity, with a dense factorization of the
    /// size of the transport block, falling back to a full LU when the refined
    /// residual misses `low_rank_rtol`. Requires [`LinearSolver::set_base`].
    LowRankUpdate,
}

impl std::str::FromStr for SolverMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" | "direct-lu" => Ok(Self::DirectLu),
            "gmres-ilu" => Ok(Self::GmresIlu),
            "gmres-lagged-lu" => Ok(Self::GmresLaggedLu),
            "low-rank" => Ok(Self::LowRankUpdate),
            other => Err(format!("unknown solver `{other}` (direct, gmres-ilu, gmres-lagged-lu, low-rank)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    /// Target relative residual.
    pub rtol: f64,
    /// A solve whose relative residual stays above this value is an error.
    pub fail_rtol: f64,
    pub max_krylov: usize,
    pub restart: usize,
    /// Iterative refinement steps after a direct solve.
    pub max_refinements: usize,
    /// Krylov iteration count above which the lagged factorization is refreshed.
    pub refactor_after: usize,
    /// Relative residual the low-rank update path must reach before a full LU is tried.
    pub low_rank_rtol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::DirectLu,
            rtol: 1e-12,
            fail_rtol: 1e-6,
            max_krylov: 2000,
            restart: 100,
            max_refinements: 6,
            refactor_after: 40,
            low_rank_rtol: 1e-10,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("matrix is not square ({0} x {1})")]
    NotSquare(usize, usize),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("ILU(0) breakdown: {0}")]
    Ilu(String),
    #[error("Krylov solver stagnated at relative residual {residual:e} after {iterations} iterations")]
    Stagnation { residual: f64, iterations: usize },
    #[error("relative residual {residual:e} above the failure threshold")]
    Residual { residual: f64 },
    #[error("solution contains non-finite values")]
    NonFinite,
    #[error("low-rank update solver used without a base operator")]
    MissingBase,
    #[error("matrix pattern differs from the base operator")]
    PatternMismatch,
}

/// Outcome details of one linear solve.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveReport {
    pub residual: f64,
    pub krylov_iterations: usize,
    pub factorized: bool,
}

/// Reusable solver: keeps the symbolic factorization (and, for the lagged
/// method, the last numeric one) between calls with the same pattern.
pub struct LinearSolver {
    opts: SolverOptions,
    symbolic: Option<SymbolicLu<usize>>,
    lagged: Option<Lu<usize, f64>>,
    base: Option<LowRankBase>,
}

/// Factorized base operator `S` and the coupling matrix `W = P_c^T S^{-1} P_r`
/// for systems `A = S + P_r C P_c^T` whose update `C` lives in rows `r` and
/// columns `c`.
struct LowRankBase {
    s: CscMatrix,
    lu: Lu<usize, f64>,
    rows: Range<usize>,
    cols: Range<usize>,
    w: Mat<f64>,
}

/// Inverse of `S + P_r C P_c^T` for one update `C`.
struct LowRankInverse<'a> {
    base: &'a LowRankBase,
    c: Vec<(usize, usize, f64)>,
    capacitance: faer::linalg::solvers::PartialPivLu<f64>,
}

impl LowRankBase {
    fn new(s: CscMatrix, rows: Range<usize>, cols: Range<usize>) -> Result<Self, SolveError> {
        let sym = SymbolicLu::try_new(s.symbolic()).map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
        let lu = Lu::try_new_with_symbolic(sym, s.as_ref()).map_err(|e| SolveError::Factorization(format!("{e:?}")))?;
        let n = s.nrows();
        let mut w = Mat::<f64>::zeros(cols.len(), rows.len());
        const CHUNK: usize = 128;
        let mut start = 0;
        while start < rows.len() {
            let width = CHUNK.min(rows.len() - start);
            let mut e = Mat::<f64>::zeros(n, width);
            for j in 0..width {
                e[(rows.start + start + j, j)] = 1.0;
            }
            let z = lu.solve(&e);
            for j in 0..width {
                for i in 0..cols.len() {
                    w[(i, start + j)] = z[(cols.start + i, j)];
                }
            }
            start += width;
        }
        Ok(Self { s, lu, rows, cols, w })
    }

    fn solve_base(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Col::<f64>::from_fn(b.len(), |i| b[i]);
        let z = self.lu.solve(&rhs);
        (0..b.len()).map(|i| z[i]).collect()
    }

    /// Extracts `C = A - S` and factorizes the capacitance matrix `I + W C`.
    fn update<'a>(&'a self, a: &CscMatrix) -> Result<LowRankInverse<'a>, SolveError> {
        if a.symbolic().col_ptr() != self.s.symbolic().col_ptr() || a.symbolic().row_idx() != self.s.symbolic().row_idx() {
            return Err(SolveError::PatternMismatch);
        }
        let cp = a.symbolic().col_ptr();
        let ri = a.symbolic().row_idx();
        let (av, sv) = (a.val(), self.s.val());
        let mut c = Vec::new();
        for j in 0..a.ncols() {
            for k in cp[j]..cp[j + 1] {
                let d = av[k] - sv[k];
                if d != 0.0 {
                    let i = ri[k];
                    if !self.rows.contains(&i) || !self.cols.contains(&j) {
                        return Err(SolveError::PatternMismatch);
                    }
                    c.push((i - self.rows.start, j - self.cols.start, d));
                }
            }
        }
        let m = self.cols.len();
        let mut cap = Mat::<f64>::identity(m, m);
        for &(i, j, v) in &c {
            for r in 0..m {
                cap[(r, j)] += self.w[(r, i)] * v;
            }
        }
        Ok(LowRankInverse { base: self, c, capacitance: cap.partial_piv_lu() })
    }
}

impl Preconditioner for LowRankInverse<'_> {
    fn apply(&self, b: &[f64]) -> Vec<f64> {
        let base = self.base;
        let mut y = base.solve_base(b);
        let yc = Col::<f64>::from_fn(base.cols.len(), |i| y[base.cols.start + i]);
        let xc = self.capacitance.solve(&yc);
        let mut corr = vec![0.0; b.len()];
        for &(i, j, v) in &self.c {
            corr[base.rows.start + i] += v * xc[j];
        }
        let z = base.solve_base(&corr);
        for (yi, zi) in y.iter_mut().zip(&z) {
            *yi -= zi;
        }
        y
    }
}

impl std::fmt::Debug for LinearSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSolver").field("opts", &self.opts).field("has_lu", &self.lagged.is_some()).finish()
    }
}

struct LuPrecond<'a>(&'a Lu<usize, f64>);

impl Preconditioner for LuPrecond<'_> {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let rhs = Col::<f64>::from_fn(r.len(), |i| r[i]);
        let z = self.0.solve(&rhs);
        (0..r.len()).map(|i| z[i]).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn relative_residual(a: &CscMatrix, x: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let r = residual_compensated(a, x, b);
    let bn = norm(b);
    let rel = if bn > 0.0 { norm(&r) / bn } else { norm(&r) };
    (r, rel)
}

impl LinearSolver {
    pub fn new(opts: SolverOptions) -> Self {
        Self { opts, symbolic: None, lagged: None, base: None }
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    /// Numeric LU, reusing the cached symbolic analysis. A solver must only be
    /// reused across systems sharing one sparsity pattern (see [`LinearSolver::reset`]).
    fn factorize(&mut self, a: &CscMatrix) -> Result<Lu<usize, f64>, SolveError> {
        if self.symbolic.is_none() {
            self.symbolic =
                Some(SymbolicLu::try_new(a.symbolic()).map_err(|e| SolveError::Factorization(format!("{e:?}")))?);
        }
        let sym = self.symbolic.clone().expect("symbolic factorization");
        Lu::try_new_with_symbolic(sym, a.as_ref()).map_err(|e| SolveError::Factorization(format!("{e:?}")))
    }

    /// Forgets cached factorizations (required when the pattern changes).
    pub fn reset(&mut self) {
        self.symbolic = None;
        self.lagged = None;
        self.base = None;
    }

    /// Installs the base operator `S` for [`SolverMethod::LowRankUpdate`]: later
    /// systems must equal `S` outside rows `rows` x columns `cols` and share its pattern.
    pub fn set_base(&mut self, s: CscMatrix, rows: Range<usize>, cols: Range<usize>) -> Result<(), SolveError> {
        if s.nrows() != s.ncols() {
            return Err(SolveError::NotSquare(s.nrows(), s.ncols()));
        }
        self.base = Some(LowRankBase::new(s, rows, cols)?);
        Ok(())
    }

    /// LU solve followed by iterative refinement with compensated residuals,
    /// stopping once the correction no longer shrinks or drops below round-off.
    fn direct(&self, pre: &dyn Preconditioner, a: &CscMatrix, b: &[f64]) -> (Vec<f64>, f64) {
        let mut x = pre.apply(b);
        let mut last = f64::INFINITY;
        for _ in 0..self.opts.max_refinements {
            let r = residual_compensated(a, &x, b);
            let dx = pre.apply(&r);
            let dn = norm(&dx);
            if !(dn < last) || !dn.is_finite() {
                break;
            }
            for (xi, d) in x.iter_mut().zip(&dx) {
                *xi += d;
            }
            last = dn;
            if dn <= f64::EPSILON * norm(&x) {
                break;
            }
        }
        let (_, rel) = relative_residual(a, &x, b);
        (x, rel)
    }

    pub fn solve(&mut self, a: &CscMatrix, b: &[f64]) -> Result<(Vec<f64>, SolveReport), SolveError> {
        if a.nrows() != a.ncols() {
            return Err(SolveError::NotSquare(a.nrows(), a.ncols()));
        }
        if b.iter().all(|&v| v == 0.0) {
            return Ok((vec![0.0; b.len()], SolveReport::default()));
        }
        let (x, report) = match self.opts.method {
            SolverMethod::DirectLu => {
                let lu = self.factorize(a)?;
                let (x, rel) = self.direct(&LuPrecond(&lu), a, b);
                (x, SolveReport { residual: rel, krylov_iterations: 0, factorized: true })
            }
            SolverMethod::LowRankUpdate => {
                let base = self.base.as_ref().ok_or(SolveError::MissingBase)?;
                let inv = base.update(a)?;
                let (x, rel) = self.direct(&inv, a, b);
                if rel <= self.opts.low_rank_rtol {
                    (x, SolveReport { residual: rel, krylov_iterations: 0, factorized: false })
                } else {
                    let lu = self.factorize(a)?;
                    let (x_lu, rel_lu) = self.direct(&LuPrecond(&lu), a, b);
                    if rel_lu <= rel {
                        (x_lu, SolveReport { residual: rel_lu, krylov_iterations: 0, factorized: true })
                    } else {
                        (x, SolveReport { residual: rel, krylov_iterations: 0, factorized: true })
                    }
                }
            }
            SolverMethod::GmresIlu => {
                let ilu = Ilu0::new(a).map_err(|e| SolveError::Ilu(format!("{e:?}")))?;
                let mut x = vec![0.0; b.len()];
                let out = krylov::gmres(a, b, &mut x, &ilu, self.opts.rtol, self.opts.restart, self.opts.max_krylov);
                if !out.converged && !(out.residual <= self.opts.fail_rtol) {
                    return Err(SolveError::Stagnation { residual: out.residual, iterations: out.iterations });
                }
                (x, SolveReport { residual: out.residual, krylov_iterations: out.iterations, factorized: false })
            }
            SolverMethod::GmresLaggedLu => {
                let mut attempt = None;
                if let Some(lu) = &self.lagged {
                    let mut x = vec![0.0; b.len()];
                    let out = krylov::gmres(
                        a,
                        b,
                        &mut x,
                        &LuPrecond(lu),
                        self.opts.rtol,
                        self.opts.refactor_after,
                        self.opts.refactor_after,
                    );
                    if out.converged {
                        attempt = Some((x, SolveReport { residual: out.residual, krylov_iterations: out.iterations, factorized: false }));
                    }
                }
                match attempt {
                    Some(done) => done,
                    None => {
                        let lu = self.factorize(a)?;
                        let (x, rel) = self.direct(&LuPrecond(&lu), a, b);
                        self.lagged = Some(lu);
                        (x, SolveReport { residual: rel, krylov_iterations: 0, factorized: true })
                    }
                }
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite);
        }
        if !(report.residual <= self.opts.fail_rtol) {
            return Err(SolveError::Residual { residual: report.residual });
        }
        Ok((x, report))
    }
}

/// Solves one assembled system with a fresh solver.
pub fn solve_linear(system: &BlockSystem, opts: &SolverOptions) -> Result<(Vec<f64>, SolveReport), SolveError> {
    LinearSolver::new(*opts).solve(&system.matrix, &system.rhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_system() {
        let mut c = Coo::new(5, 5);
        for i in 0..5 {
            c.push(i, i, 1.0);
        }
        let b = vec![1.0, -2.0, 3.0, 0.5, 0.0];
        for method in [SolverMethod::DirectLu, SolverMethod::GmresIlu, SolverMethod::GmresLaggedLu] {
            let opts = SolverOptions { method, ..Default::default() };
            let (x, _) = LinearSolver::new(opts).solve(&c.to_csc(), &b).unwrap();
            assert_eq!(x, b);
        }
    }
}
