//! Manufactured solutions, forcing terms derived by automatic differentiation,
//! and discretization error norms.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use thiserror::Error;

use crate::forms::{DirichletData, Discretization, Material, Tensor2, TransportOptions, TransportVariant};
use crate::system::{DofLayout, Problem, Sources};

/// Value, gradient and Hessian `[xx, xy, yy]` of a function of `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 2],
    pub h: [f64; 3],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Self { v, ..Default::default() }
    }

    pub fn x(p: [f64; 2]) -> Self {
        Self { v: p[0], g: [1.0, 0.0], h: [0.0; 3] }
    }

    pub fn y(p: [f64; 2]) -> Self {
        Self { v: p[1], g: [0.0, 1.0], h: [0.0; 3] }
    }

    /// Applies a scalar function with derivatives `(f, f', f'')` at `self.v`.
    fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        let g = self.g;
        Self {
            v: f,
            g: [df * g[0], df * g[1]],
            h: [
                df * self.h[0] + d2f * g[0] * g[0],
                df * self.h[1] + d2f * g[0] * g[1],
                df * self.h[2] + d2f * g[1] * g[1],
            ],
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn laplacian(&self) -> f64 {
        self.h[0] + self.h[2]
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            g: [self.g[0] + o.g[0], self.g[1] + o.g[1]],
            h: [self.h[0] + o.h[0], self.h[1] + o.h[1], self.h[2] + o.h[2]],
        }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self * -1.0
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let (a, b) = (self, o);
        Jet {
            v: a.v * b.v,
            g: [a.g[0] * b.v + a.v * b.g[0], a.g[1] * b.v + a.v * b.g[1]],
            h: [
                a.h[0] * b.v + 2.0 * a.g[0] * b.g[0] + a.v * b.h[0],
                a.h[1] * b.v + a.g[0] * b.g[1] + a.g[1] * b.g[0] + a.v * b.h[1],
                a.h[2] * b.v + 2.0 * a.g[1] * b.g[1] + a.v * b.h[2],
            ],
        }
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, s: f64) -> Jet {
        Jet { v: self.v * s, g: [self.g[0] * s, self.g[1] * s], h: [self.h[0] * s, self.h[1] * s, self.h[2] * s] }
    }
}

/// Closed-form fields of a manufactured case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaseKind {
    /// Trigonometric fields of the convergence study; `mirrored` replaces the
    /// second displacement component by the same profile in `y`.
    Trigonometric { mirrored: bool },
    /// Polynomial fields of total degree `min(degree, 2)`.
    Polynomial { degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManufacturedCase {
    pub kind: CaseKind,
    pub nu_u: f64,
    pub nu_p: f64,
    pub nu_t: f64,
}

/// Exact fields and their gradients at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactValues {
    pub u: [f64; 2],
    pub grad_u: [[f64; 2]; 2],
    pub p: f64,
    pub grad_p: [f64; 2],
    pub t: f64,
    pub grad_t: [f64; 2],
    pub phi: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MmsError {
    #[error("manufactured forcings need uniform materials")]
    NonUniform,
    #[error("observed order needs at least two samples of equal length, got {0} and {1}")]
    TooFew(usize, usize),
    #[error("mesh sizes must be strictly decreasing")]
    NonMonotone,
    #[error("errors and mesh sizes must be positive")]
    NonPositive,
}

fn double_contract(a: &Tensor2, h: [f64; 3]) -> f64 {
    a[0][0] * h[0] + (a[0][1] + a[1][0]) * h[1] + a[1][1] * h[2]
}

impl ManufacturedCase {
    /// Trigonometric case with unit amplitudes.
    pub fn trigonometric() -> Self {
        Self { kind: CaseKind::Trigonometric { mirrored: false }, nu_u: 1.0, nu_p: 1.0, nu_t: 1.0 }
    }

    pub fn polynomial(degree: usize) -> Self {
        Self { kind: CaseKind::Polynomial { degree }, nu_u: 1.0, nu_p: 1.0, nu_t: 1.0 }
    }

    pub fn with_amplitudes(self, nu_u: f64, nu_p: f64, nu_t: f64) -> Self {
        Self { nu_u, nu_p, nu_t, ..self }
    }

    /// `(u_x, u_y, p, T)` as jets at `pt`.
    pub fn jets(&self, pt: [f64; 2]) -> [Jet; 4] {
        let (x, y) = (Jet::x(pt), Jet::y(pt));
        let c = Jet::constant;
        let [ux, uy, p, t] = match self.kind {
            CaseKind::Trigonometric { mirrored } => {
                let profile = |s: Jet| s * s * (s * (PI / 2.0)).cos() * (s * PI).sin();
                let bubble = (x * PI).sin() * (y * PI).sin();
                let ux = profile(x);
                let uy = if mirrored { profile(y) } else { profile(x) };
                [ux, uy, x * x * bubble, -(y * y * bubble)]
            }
            CaseKind::Polynomial { degree } if degree >= 2 => [x * x, x * y, x + y, x - y],
            CaseKind::Polynomial { .. } => [x - y * 2.0 + c(0.5), x * 3.0 + y, x + y, x - y],
        };
        [ux * self.nu_u, uy * self.nu_u, p * self.nu_p, t * self.nu_t]
    }

    pub fn exact_eval(&self, pt: [f64; 2], m: &Material) -> ExactValues {
        let [ux, uy, p, t] = self.jets(pt);
        let div = ux.g[0] + uy.g[1];
        ExactValues {
            u: [ux.v, uy.v],
            grad_u: [ux.g, uy.g],
            p: p.v,
            grad_p: p.g,
            t: t.v,
            grad_t: t.g,
            phi: m.lambda * div - m.alpha * p.v - m.beta * t.v,
        }
    }

    /// Sources `(f, g, H)` of the strong equations at `pt`.
    pub fn forcing_at(&self, pt: [f64; 2], m: &Material) -> ([f64; 2], f64, f64) {
        let [ux, uy, p, t] = self.jets(pt);
        let div = ux.g[0] + uy.g[1];
        // Gradient of div u from the Hessians.
        let grad_div = [ux.h[0] + uy.h[1], ux.h[1] + uy.h[2]];
        let grad_phi = [
            m.lambda * grad_div[0] - m.alpha * p.g[0] - m.beta * t.g[0],
            m.lambda * grad_div[1] - m.alpha * p.g[1] - m.beta * t.g[1],
        ];
        let f = [
            -(m.mu * (ux.laplacian() + grad_div[0]) + grad_phi[0]),
            -(m.mu * (uy.laplacian() + grad_div[1]) + grad_phi[1]),
        ];
        let kgp = [m.k[0][0] * p.g[0] + m.k[0][1] * p.g[1], m.k[1][0] * p.g[0] + m.k[1][1] * p.g[1]];
        let g = m.c0 * p.v - m.b0 * t.v + m.alpha * div - double_contract(&m.k, p.h);
        let h = m.a0 * t.v - m.b0 * p.v + m.beta * div - m.cf * (t.g[0] * kgp[0] + t.g[1] * kgp[1])
            - double_contract(&m.theta, t.h);
        (f, g, h)
    }

    pub fn sources(&self, m: &Material) -> Sources {
        let (c1, c2, c3) = (*self, *self, *self);
        let (m1, m2, m3) = (*m, *m, *m);
        Sources {
            f: Arc::new(move |x| c1.forcing_at(x, &m1).0),
            g: Arc::new(move |x| c2.forcing_at(x, &m2).1),
            h: Arc::new(move |x| c3.forcing_at(x, &m3).2),
        }
    }

    pub fn dirichlet(&self) -> DirichletData {
        let (c1, c2, c3) = (*self, *self, *self);
        DirichletData {
            g_u: Arc::new(move |x| {
                let j = c1.jets(x);
                [j[0].v, j[1].v]
            }),
            g_p: Arc::new(move |x| c2.jets(x)[2].v),
            g_t: Arc::new(move |x| c3.jets(x)[3].v),
        }
    }

    /// Linearized problem whose exact solution is this case.
    pub fn problem(
        &self,
        disc: Discretization,
        variant: TransportVariant,
        transport: TransportOptions,
    ) -> Result<Problem, MmsError> {
        let m = uniform_material(&disc)?;
        Ok(Problem { sources: self.sources(&m), dirichlet: self.dirichlet(), disc, variant, transport })
    }
}

/// Forcing terms `(f, g, H)` as closures for uniform material `m`.
pub fn derive_forcings(case: &ManufacturedCase, m: &Material) -> Sources {
    case.sources(m)
}

fn uniform_material(disc: &Discretization) -> Result<Material, MmsError> {
    let cells = disc.params().cells();
    let first = cells[0];
    if cells.iter().all(|c| *c == first) { Ok(first) } else { Err(MmsError::NonUniform) }
}

/// L2 and energy-norm errors of a discrete solution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorReport {
    pub u_l2: f64,
    pub u_dg: f64,
    pub p_l2: f64,
    pub p_dg: f64,
    pub t_l2: f64,
    pub t_dg: f64,
    pub phi_l2: f64,
    pub h: f64,
    pub iterations: usize,
}

impl ErrorReport {
    pub fn as_array(&self) -> [f64; 7] {
        [self.u_l2, self.u_dg, self.p_l2, self.p_dg, self.t_l2, self.t_dg, self.phi_l2]
    }
}

/// Errors of `x` (global coefficient vector) against `case` with quadrature of
/// order `max(2 ell + 4, 3 ell + 2)`.
pub fn error_norms(disc: &Discretization, layout: &DofLayout, x: &[f64], case: &ManufacturedCase) -> ErrorReport {
    let ell = disc.ell();
    error_norms_with_order(disc, layout, x, case, (2 * ell + 4).max(3 * ell + 2))
}

pub fn error_norms_with_order(
    disc: &Discretization,
    layout: &DofLayout,
    x: &[f64],
    case: &ManufacturedCase,
    order: usize,
) -> ErrorReport {
    let mesh = disc.mesh();
    let space = disc.space();
    let vspace = space.with_components(2).expect("vector space");
    let qspace = disc.space_q();
    let fields = layout.split(x);
    let mut sq = [0.0; 7];

    for c in 0..mesh.n_cells() {
        let m = disc.params().cell(c);
        for (pt, w) in space.element_quadrature(c, order).iter() {
            let ex = case.exact_eval(pt, m);
            let u = vspace.evaluate(fields.u, c, pt);
            let p = space.evaluate(fields.p, c, pt);
            let t = space.evaluate(fields.t, c, pt);
            let phi = qspace.evaluate(fields.phi, c, pt);
            let eu = [u.value[0] - ex.u[0], u.value[1] - ex.u[1]];
            sq[0] += w * (eu[0] * eu[0] + eu[1] * eu[1]);
            let gu = [
                [u.grad[0][0] - ex.grad_u[0][0], u.grad[0][1] - ex.grad_u[0][1]],
                [u.grad[1][0] - ex.grad_u[1][0], u.grad[1][1] - ex.grad_u[1][1]],
            ];
            let exy = 0.5 * (gu[0][1] + gu[1][0]);
            sq[1] += w * 2.0 * m.mu * (gu[0][0] * gu[0][0] + 2.0 * exy * exy + gu[1][1] * gu[1][1]);
            let ep = p.value[0] - ex.p;
            sq[2] += w * ep * ep;
            let gp = [p.grad[0][0] - ex.grad_p[0], p.grad[0][1] - ex.grad_p[1]];
            sq[3] += w * quad_form(&m.k, gp);
            let et = t.value[0] - ex.t;
            sq[4] += w * et * et;
            let gt = [t.grad[0][0] - ex.grad_t[0], t.grad[0][1] - ex.grad_t[1]];
            sq[5] += w * quad_form(&m.theta, gt);
            let ephi = phi.value[0] - ex.phi;
            sq[6] += w * ephi * ephi;
        }
    }

    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let fc = disc.face_coeffs(f);
        let mo = disc.params().cell(face.owner);
        for (pt, w) in space.face_quadrature(f, order).iter() {
            let u = vspace.evaluate(fields.u, face.owner, pt);
            let p = space.evaluate(fields.p, face.owner, pt);
            let t = space.evaluate(fields.t, face.owner, pt);
            let (ju, jp, jt) = match face.neighbor {
                Some(nb) => {
                    let un = vspace.evaluate(fields.u, nb, pt);
                    (
                        [u.value[0] - un.value[0], u.value[1] - un.value[1]],
                        p.value[0] - space.evaluate(fields.p, nb, pt).value[0],
                        t.value[0] - space.evaluate(fields.t, nb, pt).value[0],
                    )
                }
                None => {
                    let ex = case.exact_eval(pt, mo);
                    ([u.value[0] - ex.u[0], u.value[1] - ex.u[1]], p.value[0] - ex.p, t.value[0] - ex.t)
                }
            };
            sq[1] += w * fc.zeta * (ju[0] * ju[0] + ju[1] * ju[1]);
            sq[3] += w * fc.xi * jp * jp;
            sq[5] += w * fc.sigma * jt * jt;
        }
    }

    let r = sq.map(|v: f64| v.max(0.0).sqrt());
    ErrorReport {
        u_l2: r[0],
        u_dg: r[1],
        p_l2: r[2],
        p_dg: r[3],
        t_l2: r[4],
        t_dg: r[5],
        phi_l2: r[6],
        h: mesh.h(),
        iterations: 0,
    }
}

fn quad_form(a: &Tensor2, v: [f64; 2]) -> f64 {
    v[0] * (a[0][0] * v[0] + a[0][1] * v[1]) + v[1] * (a[1][0] * v[0] + a[1][1] * v[1])
}

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn observed_order(errors: &[f64], hs: &[f64]) -> Result<f64, MmsError> {
    if errors.len() < 2 || errors.len() != hs.len() {
        return Err(MmsError::TooFew(errors.len(), hs.len()));
    }
    if hs.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(MmsError::NonMonotone);
    }
    if errors.iter().chain(hs).any(|&v| !(v > 0.0)) {
        return Err(MmsError::NonPositive);
    }
    let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}
