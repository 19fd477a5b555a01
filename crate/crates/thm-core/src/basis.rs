//! Element-wise L2-orthonormal modal bases built from scaled monomials.

use crate::quadrature::QuadratureRule;

/// Dimension of the full polynomial space of total degree `degree` in 2D.
pub fn local_dim(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

/// Exponents `(a, b)` of `x^a y^b`, graded by total degree.
pub fn monomial_exponents(degree: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(local_dim(degree));
    for d in 0..=degree {
        for j in 0..=d {
            out.push((d - j, j));
        }
    }
    out
}

/// Orthonormal basis on one element.
///
/// Basis function `i` is `sum_{j <= i} coeffs[i][j] m_j(x)` where the `m_j` are
/// monomials in the bounding-box coordinates `(x - center) / scale`.
#[derive(Debug, Clone)]
pub struct ElementBasis {
    degree: usize,
    center: [f64; 2],
    scale: [f64; 2],
    exps: Vec<(usize, usize)>,
    coeffs: Vec<f64>,
}

/// Values, gradients and (optionally) Hessians of all basis functions at a point.
#[derive(Debug, Clone, Default)]
pub struct BasisEval {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
    /// Hessians stored as `[dxx, dxy, dyy]`.
    pub hessians: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisError {
    Degenerate,
}

impl ElementBasis {
    /// Orthonormalizes the scaled monomials of degree `degree` on the element
    /// described by `rule` and the bounding box `[lo, hi]`.
    pub fn new(degree: usize, lo: [f64; 2], hi: [f64; 2], rule: &QuadratureRule) -> Result<Self, BasisError> {
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let scale = [0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])];
        if !(scale[0] > 0.0 && scale[1] > 0.0) || !(rule.measure() > 0.0) {
            return Err(BasisError::Degenerate);
        }
        let exps = monomial_exponents(degree);
        let n = exps.len();
        let mut basis = Self { degree, center, scale, exps, coeffs: identity(n) };

        // Columns of `vals` are the current basis functions at the quadrature points.
        let npts = rule.len();
        let mut mono = vec![0.0; n];
        let mut vals = vec![0.0; n * npts];
        for (q, &x) in rule.points.iter().enumerate() {
            basis.monomials(x, &mut mono);
            for i in 0..n {
                vals[i * npts + q] = mono[i];
            }
        }
        // Two passes of modified Gram-Schmidt keep orthogonality at high degree.
        for _ in 0..2 {
            for i in 0..n {
                for j in 0..i {
                    let r: f64 = (0..npts).map(|q| rule.weights[q] * vals[i * npts + q] * vals[j * npts + q]).sum();
                    for q in 0..npts {
                        vals[i * npts + q] -= r * vals[j * npts + q];
                    }
                    for k in 0..=j {
                        basis.coeffs[i * n + k] -= r * basis.coeffs[j * n + k];
                    }
                }
                let norm2: f64 = (0..npts).map(|q| rule.weights[q] * vals[i * npts + q].powi(2)).sum();
                if !(norm2 > 0.0) || !norm2.is_finite() {
                    return Err(BasisError::Degenerate);
                }
                let inv = 1.0 / norm2.sqrt();
                for q in 0..npts {
                    vals[i * npts + q] *= inv;
                }
                for k in 0..=i {
                    basis.coeffs[i * n + k] *= inv;
                }
            }
        }
        Ok(basis)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.exps.len()
    }

    fn monomials(&self, x: [f64; 2], out: &mut [f64]) {
        let s = (x[0] - self.center[0]) / self.scale[0];
        let t = (x[1] - self.center[1]) / self.scale[1];
        let mut ps = [1.0; 16];
        let mut pt = [1.0; 16];
        for k in 1..=self.degree {
            ps[k] = ps[k - 1] * s;
            pt[k] = pt[k - 1] * t;
        }
        for (o, &(a, b)) in out.iter_mut().zip(&self.exps) {
            *o = ps[a] * pt[b];
        }
    }

    /// Monomial values and first (and optionally second) physical derivatives.
    fn monomial_derivs(&self, x: [f64; 2], m: &mut [[f64; 6]], second: bool) {
        let s = (x[0] - self.center[0]) / self.scale[0];
        let t = (x[1] - self.center[1]) / self.scale[1];
        let (sx, sy) = (1.0 / self.scale[0], 1.0 / self.scale[1]);
        let mut ps = [1.0; 16];
        let mut pt = [1.0; 16];
        for k in 1..=self.degree {
            ps[k] = ps[k - 1] * s;
            pt[k] = pt[k - 1] * t;
        }
        let pw = |p: &[f64; 16], k: usize, d: usize| -> f64 {
            // d-th derivative of z^k
            if k < d {
                0.0
            } else {
                let c: f64 = (0..d).map(|i| (k - i) as f64).product();
                c * p[k - d]
            }
        };
        for (o, &(a, b)) in m.iter_mut().zip(&self.exps) {
            o[0] = ps[a] * pt[b];
            o[1] = pw(&ps, a, 1) * pt[b] * sx;
            o[2] = ps[a] * pw(&pt, b, 1) * sy;
            if second {
                o[3] = pw(&ps, a, 2) * pt[b] * sx * sx;
                o[4] = pw(&ps, a, 1) * pw(&pt, b, 1) * sx * sy;
                o[5] = ps[a] * pw(&pt, b, 2) * sy * sy;
            }
        }
    }

    /// Values of all basis functions at `x`.
    pub fn values(&self, x: [f64; 2], out: &mut [f64]) {
        let n = self.dim();
        let mut mono = [0.0; 64];
        self.monomials(x, &mut mono[..n]);
        for i in 0..n {
            let row = &self.coeffs[i * n..i * n + i + 1];
            out[i] = row.iter().zip(&mono[..=i]).map(|(c, m)| c * m).sum();
        }
    }

    /// Values and gradients (and Hessians if `second`) at `x`.
    pub fn eval(&self, x: [f64; 2], second: bool, out: &mut BasisEval) {
        let n = self.dim();
        let mut m = [[0.0; 6]; 64];
        self.monomial_derivs(x, &mut m[..n], second);
        out.values.resize(n, 0.0);
        out.grads.resize(n, [0.0; 2]);
        if second {
            out.hessians.resize(n, [0.0; 3]);
        }
        for i in 0..n {
            let row = &self.coeffs[i * n..i * n + i + 1];
            let mut acc = [0.0; 6];
            for (c, mj) in row.iter().zip(&m[..=i]) {
                let len = if second { 6 } else { 3 };
                for k in 0..len {
                    acc[k] += c * mj[k];
                }
            }
            out.values[i] = acc[0];
            out.grads[i] = [acc[1], acc[2]];
            if second {
                out.hessians[i] = [acc[3], acc[4], acc[5]];
            }
        }
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::polygon_rule;

    #[test]
    fn dims() {
        assert_eq!(local_dim(1), 3);
        assert_eq!(local_dim(2), 6);
        assert_eq!(monomial_exponents(2), vec![(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]);
    }

    #[test]
    fn gram_is_identity_on_hexagon() {
        let hex: Vec<[f64; 2]> = (0..6)
            .map(|k| {
                let a = std::f64::consts::PI / 3.0 * k as f64;
                [0.3 + 0.05 * a.cos(), 0.7 + 0.05 * a.sin()]
            })
            .collect();
        for degree in 1..=8 {
            let rule = polygon_rule(&hex, [0.3, 0.7], 2 * degree + 2);
            let lo = [0.25, 0.7 - 0.05 * 3f64.sqrt() / 2.0];
            let hi = [0.35, 0.7 + 0.05 * 3f64.sqrt() / 2.0];
            let b = ElementBasis::new(degree, lo, hi, &rule).unwrap();
            let n = b.dim();
            let mut v = vec![0.0; n];
            let mut gram = vec![0.0; n * n];
            for (x, w) in rule.iter() {
                b.values(x, &mut v);
                for i in 0..n {
                    for j in 0..n {
                        gram[i * n + j] += w * v[i] * v[j];
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[i * n + j] - e).abs() < 1e-10, "degree {degree}: G[{i}][{j}] = {}", gram[i * n + j]);
                }
            }
        }
    }
}
