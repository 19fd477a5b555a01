//! Weighted symmetric interior penalty forms, coupling operators and the
//! linearized convective term with its upwind and inflow stabilizations.
//!
//! All assemblers return a [`Coo`] on their own (sub)space, rows indexed by
//! test functions and columns by trial functions, together with the right-hand
//! side contribution of non-homogeneous Dirichlet data where applicable.

use std::sync::Arc;

use thiserror::Error;

use crate::PolyMesh;
use crate::basis::BasisEval;
use crate::fespace::{FESpace, SpaceError};
use crate::sparse::Coo;

pub type Tensor2 = [[f64; 2]; 2];

pub const IDENTITY: Tensor2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn scaled_identity(s: f64) -> Tensor2 {
    [[s, 0.0], [0.0, s]]
}

fn mat_vec(a: &Tensor2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// `n^T A n`.
pub fn normal_component(a: &Tensor2, n: [f64; 2]) -> f64 {
    dot(n, mat_vec(a, n))
}

/// Eigenvalues of a symmetric 2x2 tensor, ascending.
pub fn sym_eigenvalues(a: &Tensor2) -> [f64; 2] {
    let m = 0.5 * (a[0][0] + a[1][1]);
    let d = (0.25 * (a[0][0] - a[1][1]).powi(2) + a[0][1] * a[1][0]).max(0.0).sqrt();
    [m - d, m + d]
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("cell {cell}: {what}")]
    Invalid { cell: usize, what: String },
    #[error("expected {expected} per-cell materials, got {got}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum FormError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("face {face}: negative normal diffusivity {value:e} (tensor not positive semidefinite)")]
    NegativeDelta { face: usize, value: f64 },
    #[error("total pressure degree {m} exceeds displacement degree {ell} + 1")]
    DegreeMismatch { ell: usize, m: usize },
    #[error("transport variant `{0}` needs the previous temperature iterate")]
    MissingTemperature(&'static str),
}

/// Physical coefficients of one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cf: f64,
    pub mu: f64,
    pub lambda: f64,
    pub k: Tensor2,
    pub theta: Tensor2,
    /// Informational; when present `alpha` must exceed it.
    pub porosity: Option<f64>,
}

impl Material {
    /// Reference coefficients used by the convergence experiments.
    pub fn reference() -> Self {
        Self {
            a0: 0.02,
            b0: 0.01,
            c0: 0.03,
            alpha: 1.0,
            beta: 0.8,
            cf: 1.0,
            mu: 1.0,
            lambda: 5.0,
            k: scaled_identity(0.2),
            theta: scaled_identity(0.05),
            porosity: None,
        }
    }

    pub fn validate(&self, cell: usize) -> Result<(), ParamError> {
        let bad = |what: &str| Err(ParamError::Invalid { cell, what: what.to_string() });
        let finite = [self.a0, self.b0, self.c0, self.alpha, self.beta, self.cf, self.mu, self.lambda]
            .iter()
            .chain(self.k.iter().flatten())
            .chain(self.theta.iter().flatten())
            .all(|x| x.is_finite());
        if !finite {
            return bad("non-finite coefficient");
        }
        let sym = |t: &Tensor2| (t[0][1] - t[1][0]).abs() <= 1e-14 * (t[0][1].abs() + t[1][0].abs()).max(f64::MIN_POSITIVE);
        if !sym(&self.k) || sym_eigenvalues(&self.k)[0] <= 0.0 {
            return bad("K must be symmetric positive definite");
        }
        if !sym(&self.theta) || sym_eigenvalues(&self.theta)[0] < 0.0 {
            return bad("Theta must be symmetric positive semidefinite");
        }
        if self.mu <= 0.0 {
            return bad("mu must be positive");
        }
        if self.cf < 0.0 {
            return bad("c_f must be nonnegative");
        }
        let alpha_floor = self.porosity.unwrap_or(0.0);
        if !(self.alpha > alpha_floor && self.alpha <= 1.0) {
            return bad("alpha must lie in (porosity, 1]");
        }
        if self.beta <= 0.0 {
            return bad("beta must be positive");
        }
        if self.lambda <= 0.0 {
            return bad("lambda must be positive");
        }
        if self.b0 < 0.0 || self.a0 < self.b0 || self.c0 < self.b0 {
            return bad("need a0, c0 >= b0 >= 0");
        }
        Ok(())
    }
}

/// Per-element materials.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    cells: Vec<Material>,
}

impl ModelParams {
    pub fn uniform(material: Material, n_cells: usize) -> Self {
        Self { cells: vec![material; n_cells] }
    }

    pub fn from_cells(cells: Vec<Material>) -> Self {
        Self { cells }
    }

    pub fn cell(&self, c: usize) -> &Material {
        &self.cells[c]
    }

    pub fn cells(&self) -> &[Material] {
        &self.cells
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn validate(&self, mesh: &PolyMesh) -> Result<(), ParamError> {
        if self.cells.len() != mesh.n_cells() {
            return Err(ParamError::Length { expected: mesh.n_cells(), got: self.cells.len() });
        }
        self.cells.iter().enumerate().try_for_each(|(c, m)| m.validate(c))
    }

    pub fn map(&self, f: impl Fn(&Material) -> Material) -> Self {
        Self { cells: self.cells.iter().map(f).collect() }
    }
}

/// Penalty scalings `alpha_1..alpha_4` and the upwind scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub upwind: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self { alpha1: 10.0, alpha2: 10.0, alpha3: 10.0, alpha4: 10.0, upwind: 1.0 }
    }
}

/// Weights and penalties attached to one face. On boundary faces the owner
/// weight is 1 and the neighbor weight 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FaceCoefficients {
    pub omega_theta: [f64; 2],
    pub omega_k: [f64; 2],
    pub omega_mu: [f64; 2],
    pub gamma_theta: f64,
    pub gamma_k: f64,
    pub gamma_mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub zeta: f64,
    pub rho: f64,
}

/// Diffusion-weighted averaging weights `(w+, w-)` and harmonic coefficient `gamma`.
pub fn wsip_weights(d_plus: f64, d_minus: f64) -> ([f64; 2], f64) {
    let s = d_plus + d_minus;
    if s <= 0.0 {
        return ([0.5, 0.5], 0.0);
    }
    ([d_minus / s, d_plus / s], d_plus * d_minus / s)
}

pub fn face_coefficients(
    mesh: &PolyMesh,
    face: usize,
    params: &ModelParams,
    pen: &PenaltyParams,
    ell: usize,
    m: usize,
) -> Result<FaceCoefficients, FormError> {
    let f = mesh.face(face);
    let n = f.normal;
    let mp = params.cell(f.owner);
    let l2 = (ell * ell) as f64;
    let check = |v: f64| {
        if v < 0.0 { Err(FormError::NegativeDelta { face, value: v }) } else { Ok(v) }
    };
    let hp = mesh.diameter(f.owner);
    match f.neighbor {
        None => {
            check(normal_component(&mp.theta, n))?;
            check(normal_component(&mp.k, n))?;
            let ratio = l2 / hp;
            Ok(FaceCoefficients {
                omega_theta: [1.0, 0.0],
                omega_k: [1.0, 0.0],
                omega_mu: [1.0, 0.0],
                gamma_theta: 0.0,
                gamma_k: 0.0,
                gamma_mu: 0.0,
                sigma: pen.alpha1 * sym_eigenvalues(&mp.theta)[1].max(0.0) * ratio,
                xi: pen.alpha2 * sym_eigenvalues(&mp.k)[1] * ratio,
                zeta: pen.alpha3 * mp.mu * ratio,
                rho: pen.alpha4 * hp / m as f64,
            })
        }
        Some(nb) => {
            let mm = params.cell(nb);
            let hm = mesh.diameter(nb);
            let (wt, gt) = wsip_weights(check(normal_component(&mp.theta, n))?, check(normal_component(&mm.theta, n))?);
            let (wk, gk) = wsip_weights(check(normal_component(&mp.k, n))?, check(normal_component(&mm.k, n))?);
            let (wm, gm) = wsip_weights(mp.mu, mm.mu);
            let ratio = (l2 / hp).max(l2 / hm);
            Ok(FaceCoefficients {
                omega_theta: wt,
                omega_k: wk,
                omega_mu: wm,
                gamma_theta: gt,
                gamma_k: gk,
                gamma_mu: gm,
                sigma: pen.alpha1 * gt * ratio,
                xi: pen.alpha2 * gk * ratio,
                zeta: pen.alpha3 * gm * ratio,
                rho: pen.alpha4 * (hp / m as f64).min(hm / m as f64),
            })
        }
    }
}

pub type ScalarFn = Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>;

/// Boundary values of displacement, pressure and temperature.
#[derive(Clone)]
pub struct DirichletData {
    pub g_u: VectorFn,
    pub g_p: ScalarFn,
    pub g_t: ScalarFn,
}

impl DirichletData {
    pub fn homogeneous() -> Self {
        Self { g_u: Arc::new(|_| [0.0, 0.0]), g_p: Arc::new(|_| 0.0), g_t: Arc::new(|_| 0.0) }
    }
}

impl std::fmt::Debug for DirichletData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DirichletData { .. }")
    }
}

/// How the convective term is linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransportVariant {
    /// Frozen temperature gradient, acting on the new pressure.
    Old,
    /// Volume term only.
    Vol,
    /// Volume term plus interior-face consistency term.
    Plain,
    /// Plain plus upwind jump penalty and inflow boundary term.
    Stab,
}

impl TransportVariant {
    pub const ALL: [TransportVariant; 4] = [Self::Old, Self::Vol, Self::Plain, Self::Stab];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Old => "old",
            Self::Vol => "vol",
            Self::Plain => "plain",
            Self::Stab => "stab",
        }
    }
}

impl std::str::FromStr for TransportVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "old" => Ok(Self::Old),
            "vol" => Ok(Self::Vol),
            "plain" => Ok(Self::Plain),
            "stab" => Ok(Self::Stab),
            other => Err(format!("unknown transport variant `{other}` (old, vol, plain, stab)")),
        }
    }
}

/// Averages used in the transport face terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportAverage {
    #[default]
    Arithmetic,
    /// Weighted by the thermal-conductivity weights of the face.
    Weighted,
}

/// Faces carrying the upwind jump penalty of the stabilized variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpwindFaces {
    /// Interior faces, plus the inflow term `(eta.n)^- T S` on the boundary.
    #[default]
    Interior,
    /// All faces with `|eta.n|/2 T S - (eta.n)/2 T S` on the boundary.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransportOptions {
    pub average: TransportAverage,
    pub upwind_faces: UpwindFaces,
}

/// Negative part `(|x| - x) / 2`.
pub fn negative_part(x: f64) -> f64 {
    (x.abs() - x) / 2.0
}

/// Mesh, spaces, materials and face coefficients shared by all assemblers.
#[derive(Debug, Clone)]
pub struct Discretization {
    mesh: Arc<PolyMesh>,
    space: FESpace,
    space_q: FESpace,
    params: ModelParams,
    penalties: PenaltyParams,
    faces: Vec<FaceCoefficients>,
    volume_order: usize,
    face_order: usize,
}

impl Discretization {
    /// `ell` is the degree of displacement, pressure and temperature, `m` the
    /// degree of the total pressure.
    pub fn new(
        mesh: Arc<PolyMesh>,
        ell: usize,
        m: usize,
        params: ModelParams,
        penalties: PenaltyParams,
    ) -> Result<Self, FormError> {
        if m > ell + 1 || m == 0 {
            return Err(FormError::DegreeMismatch { ell, m });
        }
        params.validate(&mesh)?;
        let space = FESpace::new(mesh.clone(), ell, 1)?;
        let space_q = if m == ell { space.clone() } else { FESpace::new(mesh.clone(), m, 1)? };
        let faces = (0..mesh.n_faces())
            .map(|f| face_coefficients(&mesh, f, &params, &penalties, ell, m))
            .collect::<Result<_, _>>()?;
        let order = 3 * ell.max(m) + 2;
        Ok(Self { mesh, space, space_q, params, penalties, faces, volume_order: order, face_order: order })
    }

    pub fn mesh(&self) -> &Arc<PolyMesh> {
        &self.mesh
    }

    /// Scalar space of degree `ell` (pressure, temperature, displacement components).
    pub fn space(&self) -> &FESpace {
        &self.space
    }

    /// Scalar space of degree `m` (total pressure).
    pub fn space_q(&self) -> &FESpace {
        &self.space_q
    }

    pub fn ell(&self) -> usize {
        self.space.degree()
    }

    pub fn m(&self) -> usize {
        self.space_q.degree()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn penalties(&self) -> &PenaltyParams {
        &self.penalties
    }

    pub fn face_coeffs(&self, f: usize) -> &FaceCoefficients {
        &self.faces[f]
    }

    pub fn volume_order(&self) -> usize {
        self.volume_order
    }

    pub fn face_order(&self) -> usize {
        self.face_order
    }

    /// Overrides both quadrature orders.
    pub fn with_quadrature_order(mut self, order: usize) -> Self {
        self.volume_order = order;
        self.face_order = order;
        self
    }

    /// Copy with different materials on the same mesh and spaces.
    pub fn with_params(&self, params: ModelParams) -> Result<Self, FormError> {
        params.validate(&self.mesh)?;
        let faces = (0..self.mesh.n_faces())
            .map(|f| face_coefficients(&self.mesh, f, &params, &self.penalties, self.ell(), self.m()))
            .collect::<Result<_, _>>()?;
        Ok(Self { params, faces, ..self.clone() })
    }

    fn nb(&self) -> usize {
        self.space.n_modes()
    }

    fn nq(&self) -> usize {
        self.space_q.n_modes()
    }
}

/// Basis values on both sides of a face at each quadrature point.
struct FaceEval {
    weights: Vec<f64>,
    points: Vec<[f64; 2]>,
    sides: [Vec<BasisEval>; 2],
}

fn face_eval(space: &FESpace, face: usize, order: usize) -> FaceEval {
    let mesh = space.mesh();
    let f = mesh.face(face);
    let rule = space.face_quadrature(face, order);
    let cells = [Some(f.owner), f.neighbor];
    let mut sides: [Vec<BasisEval>; 2] = [Vec::new(), Vec::new()];
    for (s, cell) in cells.iter().enumerate() {
        if let Some(c) = cell {
            sides[s] = rule
                .points
                .iter()
                .map(|&x| {
                    let mut e = BasisEval::default();
                    space.basis(*c).eval(x, false, &mut e);
                    e
                })
                .collect();
        }
    }
    FaceEval { weights: rule.weights, points: rule.points, sides }
}

fn cell_dofs(base: usize, n: usize) -> Vec<usize> {
    (base..base + n).collect()
}

const SIGN: [f64; 2] = [1.0, -1.0];

/// Copies the upper triangle of a symmetric `n x n` local matrix onto the
/// lower one so that rounding cannot break symmetry.
fn mirror_lower(local: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..i {
            local[i * n + j] = local[j * n + i];
        }
    }
}

/// Same as [`mirror_lower`] for the 2x2 block layout `blocks[test * 2 + trial]`
/// of a symmetric face operator.
fn mirror_face_blocks(blocks: &mut [Vec<f64>], n: usize) {
    mirror_lower(&mut blocks[0], n);
    mirror_lower(&mut blocks[3], n);
    for i in 0..n {
        for j in 0..n {
            blocks[2][i * n + j] = blocks[1][j * n + i];
        }
    }
}

/// Scalar WSIP diffusion operator for the per-cell tensor returned by `tensor`.
fn assemble_diffusion(
    disc: &Discretization,
    tensor: impl Fn(&Material) -> Tensor2,
    weights: impl Fn(&FaceCoefficients) -> [f64; 2],
    penalty: impl Fn(&FaceCoefficients) -> f64,
    data: &dyn Fn([f64; 2]) -> f64,
) -> (Coo, Vec<f64>) {
    let space = disc.space();
    let mesh = space.mesh();
    let nb = disc.nb();
    let n = space.n_dofs();
    let mut coo = Coo::new(n, n);
    let mut rhs = vec![0.0; n];
    let mut e = BasisEval::default();
    let mut local = vec![0.0; nb * nb];

    for c in 0..mesh.n_cells() {
        let d = tensor(disc.params().cell(c));
        local.fill(0.0);
        let rule = space.element_quadrature(c, disc.volume_order());
        for (x, w) in rule.iter() {
            space.basis(c).eval(x, false, &mut e);
            for j in 0..nb {
                let dg = mat_vec(&d, e.grads[j]);
                for i in 0..nb {
                    local[i * nb + j] += w * dot(dg, e.grads[i]);
                }
            }
        }
        let dofs = cell_dofs(c * nb, nb);
        mirror_lower(&mut local, nb);
        coo.add_block(&dofs, &dofs, &local);
    }

    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let fc = disc.face_coeffs(f);
        let normal = face.normal;
        let fe = face_eval(space, f, disc.face_order());
        let pen = penalty(fc);
        match face.neighbor {
            None => {
                let d = tensor(disc.params().cell(face.owner));
                local.fill(0.0);
                let base = face.owner * nb;
                for (q, &w) in fe.weights.iter().enumerate() {
                    let ev = &fe.sides[0][q];
                    let g = data(fe.points[q]);
                    let flux: Vec<f64> = (0..nb).map(|i| dot(mat_vec(&d, ev.grads[i]), normal)).collect();
                    for i in 0..nb {
                        for j in 0..nb {
                            local[i * nb + j] +=
                                w * (-flux[j] * ev.values[i] - ev.values[j] * flux[i] + pen * ev.values[j] * ev.values[i]);
                        }
                        rhs[base + i] += w * (pen * g * ev.values[i] - g * flux[i]);
                    }
                }
                let dofs = cell_dofs(base, nb);
                mirror_lower(&mut local, nb);
                coo.add_block(&dofs, &dofs, &local);
            }
            Some(nbr) => {
                let cells = [face.owner, nbr];
                let om = weights(fc);
                let ds = [tensor(disc.params().cell(face.owner)), tensor(disc.params().cell(nbr))];
                let mut blocks = vec![vec![0.0; nb * nb]; 4];
                for (q, &w) in fe.weights.iter().enumerate() {
                    let flux: [Vec<f64>; 2] = std::array::from_fn(|s| {
                        (0..nb).map(|i| dot(mat_vec(&ds[s], fe.sides[s][q].grads[i]), normal)).collect()
                    });
                    for b in 0..2 {
                        for a in 0..2 {
                            let blk = &mut blocks[b * 2 + a];
                            let (eb, ea) = (&fe.sides[b][q], &fe.sides[a][q]);
                            for i in 0..nb {
                                for j in 0..nb {
                                    blk[i * nb + j] += w
                                        * (-om[a] * flux[a][j] * SIGN[b] * eb.values[i]
                                            - SIGN[a] * ea.values[j] * om[b] * flux[b][i]
                                            + pen * SIGN[a] * SIGN[b] * ea.values[j] * eb.values[i]);
                                }
                            }
                        }
                    }
                }
                mirror_face_blocks(&mut blocks, nb);
                for b in 0..2 {
                    for a in 0..2 {
                        coo.add_block(&cell_dofs(cells[b] * nb, nb), &cell_dofs(cells[a] * nb, nb), &blocks[b * 2 + a]);
                    }
                }
            }
        }
    }
    (coo, rhs)
}

/// Thermal diffusion `A^T` with penalty `sigma` and lifting of `g_T`.
pub fn assemble_at(disc: &Discretization, g_t: &dyn Fn([f64; 2]) -> f64) -> (Coo, Vec<f64>) {
    assemble_diffusion(disc, |m| m.theta, |fc| fc.omega_theta, |fc| fc.sigma, g_t)
}

/// Darcy diffusion `A^p` with penalty `xi` and lifting of `g_p`.
pub fn assemble_ap(disc: &Discretization, g_p: &dyn Fn([f64; 2]) -> f64) -> (Coo, Vec<f64>) {
    assemble_diffusion(disc, |m| m.k, |fc| fc.omega_k, |fc| fc.xi, g_p)
}

/// Elasticity `A^e` on the vector space (`u_x` modes then `u_y` modes per cell)
/// with penalty `zeta` and lifting of `g_u`.
pub fn assemble_ae(disc: &Discretization, g_u: &dyn Fn([f64; 2]) -> [f64; 2]) -> (Coo, Vec<f64>) {
    let space = disc.space();
    let mesh = space.mesh();
    let nb = disc.nb();
    let nl = 2 * nb;
    let n = nl * mesh.n_cells();
    let mut coo = Coo::new(n, n);
    let mut rhs = vec![0.0; n];
    let mut e = BasisEval::default();
    let mut local = vec![0.0; nl * nl];

    for c in 0..mesh.n_cells() {
        let mu = disc.params().cell(c).mu;
        local.fill(0.0);
        let rule = space.element_quadrature(c, disc.volume_order());
        for (x, w) in rule.iter() {
            space.basis(c).eval(x, false, &mut e);
            for i in 0..nb {
                for j in 0..nb {
                    let gg = dot(e.grads[j], e.grads[i]);
                    for ci in 0..2 {
                        for dj in 0..2 {
                            let delta = if ci == dj { gg } else { 0.0 };
                            local[(ci * nb + i) * nl + dj * nb + j] +=
                                w * mu * (delta + e.grads[j][ci] * e.grads[i][dj]);
                        }
                    }
                }
            }
        }
        let dofs = cell_dofs(c * nl, nl);
        mirror_lower(&mut local, nl);
        coo.add_block(&dofs, &dofs, &local);
    }

    // (eps(e_d phi) n)_c = (delta_cd grad(phi).n + d_c(phi) n_d) / 2
    let strain_n = |g: [f64; 2], n: [f64; 2], c: usize, d: usize| -> f64 {
        0.5 * (if c == d { dot(g, n) } else { 0.0 } + g[c] * n[d])
    };

    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let fc = disc.face_coeffs(f);
        let normal = face.normal;
        let fe = face_eval(space, f, disc.face_order());
        match face.neighbor {
            None => {
                let mu = disc.params().cell(face.owner).mu;
                local.fill(0.0);
                let base = face.owner * nl;
                for (q, &w) in fe.weights.iter().enumerate() {
                    let ev = &fe.sides[0][q];
                    let g = g_u(fe.points[q]);
                    for i in 0..nb {
                        for ci in 0..2 {
                            let row = ci * nb + i;
                            for j in 0..nb {
                                for dj in 0..2 {
                                    let col = dj * nb + j;
                                    let same = if ci == dj { ev.values[j] * ev.values[i] } else { 0.0 };
                                    local[row * nl + col] += w
                                        * (-2.0 * mu * strain_n(ev.grads[j], normal, ci, dj) * ev.values[i]
                                            - ev.values[j] * 2.0 * mu * strain_n(ev.grads[i], normal, dj, ci)
                                            + fc.zeta * same);
                                }
                            }
                            let tn = (0..2).map(|d| g[d] * 2.0 * mu * strain_n(ev.grads[i], normal, d, ci)).sum::<f64>();
                            rhs[base + row] += w * (-tn + fc.zeta * g[ci] * ev.values[i]);
                        }
                    }
                }
                let dofs = cell_dofs(base, nl);
                mirror_lower(&mut local, nl);
                coo.add_block(&dofs, &dofs, &local);
            }
            Some(nbr) => {
                let cells = [face.owner, nbr];
                let mus = [disc.params().cell(face.owner).mu, disc.params().cell(nbr).mu];
                let om = fc.omega_mu;
                let mut blocks = vec![vec![0.0; nl * nl]; 4];
                for (q, &w) in fe.weights.iter().enumerate() {
                    for b in 0..2 {
                        for a in 0..2 {
                            let blk = &mut blocks[b * 2 + a];
                            let (eb, ea) = (&fe.sides[b][q], &fe.sides[a][q]);
                            let ss = SIGN[a] * SIGN[b];
                            for i in 0..nb {
                                for ci in 0..2 {
                                    let row = ci * nb + i;
                                    for j in 0..nb {
                                        for dj in 0..2 {
                                            let same = if ci == dj { ea.values[j] * eb.values[i] } else { 0.0 };
                                            blk[row * nl + dj * nb + j] += w
                                                * (-om[a] * 2.0 * mus[a] * strain_n(ea.grads[j], normal, ci, dj) * SIGN[b] * eb.values[i]
                                                    - SIGN[a] * ea.values[j] * om[b] * 2.0 * mus[b] * strain_n(eb.grads[i], normal, dj, ci)
                                                    + fc.zeta * ss * same);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                mirror_face_blocks(&mut blocks, nl);
                for b in 0..2 {
                    for a in 0..2 {
                        coo.add_block(&cell_dofs(cells[b] * nl, nl), &cell_dofs(cells[a] * nl, nl), &blocks[b * 2 + a]);
                    }
                }
            }
        }
    }
    (coo, rhs)
}

/// Coupling `B(psi, v) = -(psi, div v) + sum_F {psi} [v]_n`: rows are total
/// pressure test functions, columns displacement trial functions. The vector
/// is the lifting `int_{boundary} psi g_u.n` of the total pressure row.
pub fn assemble_b(disc: &Discretization, g_u: &dyn Fn([f64; 2]) -> [f64; 2]) -> (Coo, Vec<f64>) {
    let (space, space_q) = (disc.space(), disc.space_q());
    let mesh = space.mesh();
    let (nb, nq) = (disc.nb(), disc.nq());
    let nl = 2 * nb;
    let mut coo = Coo::new(nq * mesh.n_cells(), nl * mesh.n_cells());
    let mut rhs = vec![0.0; nq * mesh.n_cells()];
    let (mut eu, mut eq) = (BasisEval::default(), BasisEval::default());
    let mut local = vec![0.0; nq * nl];

    for c in 0..mesh.n_cells() {
        local.fill(0.0);
        let rule = space.element_quadrature(c, disc.volume_order());
        for (x, w) in rule.iter() {
            space.basis(c).eval(x, false, &mut eu);
            space_q.basis(c).eval(x, false, &mut eq);
            for i in 0..nq {
                for dj in 0..2 {
                    for j in 0..nb {
                        local[i * nl + dj * nb + j] -= w * eq.values[i] * eu.grads[j][dj];
                    }
                }
            }
        }
        coo.add_block(&cell_dofs(c * nq, nq), &cell_dofs(c * nl, nl), &local);
    }

    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let normal = face.normal;
        let fu = face_eval(space, f, disc.face_order());
        let fq = face_eval(space_q, f, disc.face_order());
        match face.neighbor {
            None => {
                local.fill(0.0);
                for (q, &w) in fu.weights.iter().enumerate() {
                    let (ev, eqv) = (&fu.sides[0][q], &fq.sides[0][q]);
                    let gn = dot(g_u(fu.points[q]), normal);
                    for i in 0..nq {
                        for dj in 0..2 {
                            for j in 0..nb {
                                local[i * nl + dj * nb + j] += w * eqv.values[i] * ev.values[j] * normal[dj];
                            }
                        }
                        rhs[face.owner * nq + i] += w * eqv.values[i] * gn;
                    }
                }
                coo.add_block(&cell_dofs(face.owner * nq, nq), &cell_dofs(face.owner * nl, nl), &local);
            }
            Some(nbr) => {
                let cells = [face.owner, nbr];
                let mut blocks = vec![vec![0.0; nq * nl]; 4];
                for (q, &w) in fu.weights.iter().enumerate() {
                    for b in 0..2 {
                        for a in 0..2 {
                            let blk = &mut blocks[b * 2 + a];
                            let (eqb, eua) = (&fq.sides[b][q], &fu.sides[a][q]);
                            for i in 0..nq {
                                for dj in 0..2 {
                                    for j in 0..nb {
                                        blk[i * nl + dj * nb + j] +=
                                            w * 0.5 * eqb.values[i] * SIGN[a] * eua.values[j] * normal[dj];
                                    }
                                }
                            }
                        }
                    }
                }
                for b in 0..2 {
                    for a in 0..2 {
                        coo.add_block(&cell_dofs(cells[b] * nq, nq), &cell_dofs(cells[a] * nl, nl), &blocks[b * 2 + a]);
                    }
                }
            }
        }
    }
    (coo, rhs)
}

/// Total pressure jump stabilization on interior faces.
pub fn assemble_d(disc: &Discretization) -> Coo {
    let space_q = disc.space_q();
    let mesh = space_q.mesh();
    let nq = disc.nq();
    let n = nq * mesh.n_cells();
    let mut coo = Coo::new(n, n);
    for f in mesh.interior_faces() {
        let face = mesh.face(f);
        let rho = disc.face_coeffs(f).rho;
        let cells = [face.owner, face.neighbor.expect("interior face")];
        let fe = face_eval(space_q, f, disc.face_order());
        let mut blocks = vec![vec![0.0; nq * nq]; 4];
        for (q, &w) in fe.weights.iter().enumerate() {
            for b in 0..2 {
                for a in 0..2 {
                    let blk = &mut blocks[b * 2 + a];
                    let (eb, ea) = (&fe.sides[b][q], &fe.sides[a][q]);
                    for i in 0..nq {
                        for j in 0..nq {
                            blk[i * nq + j] += w * rho * SIGN[a] * SIGN[b] * ea.values[j] * eb.values[i];
                        }
                    }
                }
            }
        }
        mirror_face_blocks(&mut blocks, nq);
        for b in 0..2 {
            for a in 0..2 {
                coo.add_block(&cell_dofs(cells[b] * nq, nq), &cell_dofs(cells[a] * nq, nq), &blocks[b * 2 + a]);
            }
        }
    }
    coo
}

/// Block offsets of the `(p, T, phi)` unknowns inside [`assemble_m`]'s matrix.
#[derive(Debug, Clone, Copy)]
pub struct ScalarBlocks {
    pub p: usize,
    pub t: usize,
    pub phi: usize,
    pub size: usize,
}

impl ScalarBlocks {
    pub fn new(disc: &Discretization) -> Self {
        let n = disc.mesh().n_cells();
        let (nb, nq) = (disc.nb(), disc.nq());
        Self { p: 0, t: nb * n, phi: 2 * nb * n, size: (2 * nb + nq) * n }
    }
}

/// Mass-type coupling of `(p, T, phi)`; see [`ScalarBlocks`] for the layout.
pub fn assemble_m(disc: &Discretization) -> Coo {
    let (space, space_q) = (disc.space(), disc.space_q());
    let mesh = space.mesh();
    let (nb, nq) = (disc.nb(), disc.nq());
    let blocks = ScalarBlocks::new(disc);
    let mut coo = Coo::new(blocks.size, blocks.size);
    let (mut e, mut eq) = (BasisEval::default(), BasisEval::default());
    for c in 0..mesh.n_cells() {
        let m = disc.params().cell(c);
        let il = 1.0 / m.lambda;
        let rule = space.element_quadrature(c, disc.volume_order());
        let mut mll = vec![0.0; nb * nb];
        let mut mlq = vec![0.0; nb * nq];
        let mut mqq = vec![0.0; nq * nq];
        for (x, w) in rule.iter() {
            space.basis(c).eval(x, false, &mut e);
            space_q.basis(c).eval(x, false, &mut eq);
            for i in 0..nb {
                for j in 0..nb {
                    mll[i * nb + j] += w * e.values[i] * e.values[j];
                }
                for j in 0..nq {
                    mlq[i * nq + j] += w * e.values[i] * eq.values[j];
                }
            }
            for i in 0..nq {
                for j in 0..nq {
                    mqq[i * nq + j] += w * eq.values[i] * eq.values[j];
                }
            }
        }
        let (p, t, ph) = (
            cell_dofs(blocks.p + c * nb, nb),
            cell_dofs(blocks.t + c * nb, nb),
            cell_dofs(blocks.phi + c * nq, nq),
        );
        mirror_lower(&mut mll, nb);
        mirror_lower(&mut mqq, nq);
        let scaled = |mat: &[f64], s: f64| mat.iter().map(|v| v * s).collect::<Vec<_>>();
        let mql: Vec<f64> = (0..nq).flat_map(|i| (0..nb).map(move |j| (i, j))).map(|(i, j)| mlq[j * nq + i]).collect();
        let pt = -m.b0 + m.alpha * m.beta * il;
        coo.add_block(&p, &p, &scaled(&mll, m.c0 + m.alpha * m.alpha * il));
        coo.add_block(&p, &t, &scaled(&mll, pt));
        coo.add_block(&t, &p, &scaled(&mll, pt));
        coo.add_block(&t, &t, &scaled(&mll, m.a0 + m.beta * m.beta * il));
        coo.add_block(&p, &ph, &scaled(&mlq, m.alpha * il));
        coo.add_block(&ph, &p, &scaled(&mql, m.alpha * il));
        coo.add_block(&t, &ph, &scaled(&mlq, m.beta * il));
        coo.add_block(&ph, &t, &scaled(&mql, m.beta * il));
        coo.add_block(&ph, &ph, &scaled(&mqq, il));
    }
    coo
}

/// Darcy velocity `eta = -c_f K grad(p)` of a discrete pressure, evaluated exactly
/// from its modal coefficients.
#[derive(Debug, Clone)]
pub struct EtaField {
    space: FESpace,
    p: Vec<f64>,
    factor: Vec<Tensor2>,
}

impl EtaField {
    pub fn new(space: &FESpace, p: &[f64], params: &ModelParams) -> Self {
        assert_eq!(p.len(), space.n_dofs());
        let factor = params
            .cells()
            .iter()
            .map(|m| [[-m.cf * m.k[0][0], -m.cf * m.k[0][1]], [-m.cf * m.k[1][0], -m.cf * m.k[1][1]]])
            .collect();
        Self { space: space.clone(), p: p.to_vec(), factor }
    }

    pub fn zero(space: &FESpace, params: &ModelParams) -> Self {
        Self::new(space, &vec![0.0; space.n_dofs()], params)
    }

    pub fn pressure(&self) -> &[f64] {
        &self.p
    }

    /// `eta(x)` on `cell`.
    pub fn value(&self, cell: usize, x: [f64; 2]) -> [f64; 2] {
        self.value_and_div(cell, x).0
    }

    /// `eta(x)` and its broken divergence on `cell`.
    pub fn value_and_div(&self, cell: usize, x: [f64; 2]) -> ([f64; 2], f64) {
        let mut e = BasisEval::default();
        self.space.basis(cell).eval(x, true, &mut e);
        let nb = self.space.n_modes();
        let local = &self.p[cell * nb..(cell + 1) * nb];
        let (mut g, mut h) = ([0.0; 2], [0.0; 3]);
        for i in 0..nb {
            g[0] += local[i] * e.grads[i][0];
            g[1] += local[i] * e.grads[i][1];
            for k in 0..3 {
                h[k] += local[i] * e.hessians[i][k];
            }
        }
        let f = &self.factor[cell];
        // div(F grad p) = F : Hess(p) for element-wise constant F.
        let div = f[0][0] * h[0] + (f[0][1] + f[1][0]) * h[1] + f[1][1] * h[2];
        (mat_vec(f, g), div)
    }

    /// True when the field vanishes identically (zero pressure or `c_f K = 0`
    /// on every cell).
    pub fn is_zero(&self) -> bool {
        self.p.iter().all(|&v| v == 0.0) || self.factor.iter().all(|f| f.iter().flatten().all(|&v| v == 0.0))
    }
}

/// Linearized convective operator for the temperature equation.
///
/// For [`TransportVariant::Old`] the matrix acts on pressure (columns in the
/// pressure space) and uses `t_prev`; all other variants act on temperature.
/// The structure of the returned triplets depends only on the mesh and the
/// variant, never on the field values.
pub fn assemble_c(
    disc: &Discretization,
    variant: TransportVariant,
    opts: TransportOptions,
    eta: &EtaField,
    t_prev: Option<&[f64]>,
    g_t: &dyn Fn([f64; 2]) -> f64,
) -> Result<(Coo, Vec<f64>), FormError> {
    let space = disc.space();
    let mesh = space.mesh();
    let nb = disc.nb();
    let n = space.n_dofs();
    let mut coo = Coo::new(n, n);
    let mut rhs = vec![0.0; n];
    let mut e = BasisEval::default();
    let mut local = vec![0.0; nb * nb];

    if variant == TransportVariant::Old {
        let t_prev = t_prev.ok_or(FormError::MissingTemperature("old"))?;
        for c in 0..mesh.n_cells() {
            let m = disc.params().cell(c);
            local.fill(0.0);
            let rule = space.element_quadrature(c, disc.volume_order());
            for (x, w) in rule.iter() {
                space.basis(c).eval(x, false, &mut e);
                let gt = space.evaluate_with(t_prev, c, &e).grad[0];
                let kgt = mat_vec(&m.k, gt);
                for j in 0..nb {
                    let adv = -m.cf * dot(e.grads[j], kgt);
                    for i in 0..nb {
                        local[i * nb + j] += w * adv * e.values[i];
                    }
                }
            }
            let dofs = cell_dofs(c * nb, nb);
            coo.add_block(&dofs, &dofs, &local);
        }
        return Ok((coo, rhs));
    }

    for c in 0..mesh.n_cells() {
        local.fill(0.0);
        let rule = space.element_quadrature(c, disc.volume_order());
        for (x, w) in rule.iter() {
            space.basis(c).eval(x, false, &mut e);
            let eta_x = eta.value(c, x);
            for j in 0..nb {
                let adv = dot(eta_x, e.grads[j]);
                for i in 0..nb {
                    local[i * nb + j] += w * adv * e.values[i];
                }
            }
        }
        let dofs = cell_dofs(c * nb, nb);
        coo.add_block(&dofs, &dofs, &local);
    }

    if variant == TransportVariant::Vol {
        return Ok((coo, rhs));
    }
    let stab = variant == TransportVariant::Stab;
    let upwind = disc.penalties().upwind;

    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let normal = face.normal;
        let fe = face_eval(space, f, disc.face_order());
        match face.neighbor {
            Some(nbr) => {
                let cells = [face.owner, nbr];
                let om = match opts.average {
                    TransportAverage::Arithmetic => [0.5, 0.5],
                    TransportAverage::Weighted => disc.face_coeffs(f).omega_theta,
                };
                let mut blocks = vec![vec![0.0; nb * nb]; 4];
                for (q, &w) in fe.weights.iter().enumerate() {
                    let x = fe.points[q];
                    let (ep, em) = (eta.value(face.owner, x), eta.value(nbr, x));
                    let avg_eta = [om[0] * ep[0] + om[1] * em[0], om[0] * ep[1] + om[1] * em[1]];
                    let en = dot(avg_eta, normal);
                    let pen = if stab { upwind * en.abs() / 2.0 } else { 0.0 };
                    for b in 0..2 {
                        for a in 0..2 {
                            let blk = &mut blocks[b * 2 + a];
                            let (eb, ea) = (&fe.sides[b][q], &fe.sides[a][q]);
                            for i in 0..nb {
                                for j in 0..nb {
                                    blk[i * nb + j] += w
                                        * (-en * SIGN[a] * ea.values[j] * om[b] * eb.values[i]
                                            + pen * SIGN[a] * SIGN[b] * ea.values[j] * eb.values[i]);
                                }
                            }
                        }
                    }
                }
                for b in 0..2 {
                    for a in 0..2 {
                        coo.add_block(&cell_dofs(cells[b] * nb, nb), &cell_dofs(cells[a] * nb, nb), &blocks[b * 2 + a]);
                    }
                }
            }
            None if stab => {
                local.fill(0.0);
                let base = face.owner * nb;
                for (q, &w) in fe.weights.iter().enumerate() {
                    let x = fe.points[q];
                    let en = dot(eta.value(face.owner, x), normal);
                    let coef = match opts.upwind_faces {
                        UpwindFaces::Interior => negative_part(en),
                        UpwindFaces::All => upwind * en.abs() / 2.0 - en / 2.0,
                    };
                    let ev = &fe.sides[0][q];
                    let g = g_t(x);
                    for i in 0..nb {
                        for j in 0..nb {
                            local[i * nb + j] += w * coef * ev.values[j] * ev.values[i];
                        }
                        rhs[base + i] += w * coef * g * ev.values[i];
                    }
                }
                let dofs = cell_dofs(base, nb);
                coo.add_block(&dofs, &dofs, &local);
            }
            None => {}
        }
    }
    Ok((coo, rhs))
}

/// Upwind jump and inflow quadratic forms of the stabilized variant, split out
/// for inspection: returns `(s_uw, s_inflow)` as matrices on the scalar space.
pub fn assemble_upwind_parts(disc: &Discretization, eta: &EtaField) -> (Coo, Coo) {
    let space = disc.space();
    let mesh = space.mesh();
    let nb = disc.nb();
    let n = space.n_dofs();
    let (mut uw, mut inflow) = (Coo::new(n, n), Coo::new(n, n));
    let upwind = disc.penalties().upwind;
    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let fe = face_eval(space, f, disc.face_order());
        match face.neighbor {
            Some(nbr) => {
                let cells = [face.owner, nbr];
                let mut blocks = vec![vec![0.0; nb * nb]; 4];
                for (q, &w) in fe.weights.iter().enumerate() {
                    let x = fe.points[q];
                    let (ep, em) = (eta.value(face.owner, x), eta.value(nbr, x));
                    let en = dot([0.5 * (ep[0] + em[0]), 0.5 * (ep[1] + em[1])], face.normal);
                    for b in 0..2 {
                        for a in 0..2 {
                            for i in 0..nb {
                                for j in 0..nb {
                                    blocks[b * 2 + a][i * nb + j] += w * upwind * en.abs() / 2.0
                                        * SIGN[a] * SIGN[b] * fe.sides[a][q].values[j] * fe.sides[b][q].values[i];
                                }
                            }
                        }
                    }
                }
                mirror_face_blocks(&mut blocks, nb);
                for b in 0..2 {
                    for a in 0..2 {
                        uw.add_block(&cell_dofs(cells[b] * nb, nb), &cell_dofs(cells[a] * nb, nb), &blocks[b * 2 + a]);
                    }
                }
            }
            None => {
                let mut local = vec![0.0; nb * nb];
                for (q, &w) in fe.weights.iter().enumerate() {
                    let en = dot(eta.value(face.owner, fe.points[q]), face.normal);
                    let ev = &fe.sides[0][q];
                    for i in 0..nb {
                        for j in 0..nb {
                            local[i * nb + j] += w * negative_part(en) * ev.values[j] * ev.values[i];
                        }
                    }
                }
                let dofs = cell_dofs(face.owner * nb, nb);
                mirror_lower(&mut local, nb);
                inflow.add_block(&dofs, &dofs, &local);
            }
        }
    }
    (uw, inflow)
}

/// Evaluates `B(phi, v)` for a scalar `phi` and vector `v` given point-wise on
/// each element: `phi(cell, x)` and `v(cell, x) -> (value, divergence)`.
pub fn b_functional(
    mesh: &PolyMesh,
    order: usize,
    phi: &dyn Fn(usize, [f64; 2]) -> f64,
    v: &dyn Fn(usize, [f64; 2]) -> ([f64; 2], f64),
) -> f64 {
    let mut total = 0.0;
    for c in 0..mesh.n_cells() {
        let rule = crate::fespace::element_rule(mesh, c, order);
        total -= rule.iter().map(|(x, w)| w * phi(c, x) * v(c, x).1).sum::<f64>();
    }
    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let rule = crate::fespace::face_rule(mesh, f, order);
        for (x, w) in rule.iter() {
            let vp = v(face.owner, x).0;
            total += w * match face.neighbor {
                None => phi(face.owner, x) * dot(vp, face.normal),
                Some(nb) => {
                    let vm = v(nb, x).0;
                    0.5 * (phi(face.owner, x) + phi(nb, x)) * dot([vp[0] - vm[0], vp[1] - vm[1]], face.normal)
                }
            };
        }
    }
    total
}

/// Handle naming a bilinear form for [`evaluate_form`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormHandle {
    At,
    Ap,
    Ae,
    B,
    D,
    M,
}

/// `test^T A trial` for one of the homogeneous-data forms.
pub fn evaluate_form(disc: &Discretization, form: FormHandle, trial: &[f64], test: &[f64]) -> f64 {
    let zero = |_: [f64; 2]| 0.0;
    let zero_v = |_: [f64; 2]| [0.0, 0.0];
    let coo = match form {
        FormHandle::At => assemble_at(disc, &zero).0,
        FormHandle::Ap => assemble_ap(disc, &zero).0,
        FormHandle::Ae => assemble_ae(disc, &zero_v).0,
        FormHandle::B => assemble_b(disc, &zero_v).0,
        FormHandle::D => assemble_d(disc),
        FormHandle::M => assemble_m(disc),
    };
    coo.bilinear(test, trial)
}
