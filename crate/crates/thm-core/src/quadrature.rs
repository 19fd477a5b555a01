//! Gauss rules on segments, triangles (collapsed coordinates) and polygons
//! (centroid fans).

/// Points and weights in physical coordinates.
#[derive(Debug, Clone, Default)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn integrate(&self, f: impl Fn([f64; 2]) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` with `n` points (exact to degree `2n-1`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

fn points_for_order(order: usize) -> usize {
    (order + 2).div_ceil(2)
}

/// Gauss rule on the segment `a-b`, exact for polynomials of degree `order`.
pub fn segment_rule(a: [f64; 2], b: [f64; 2], order: usize) -> QuadratureRule {
    let (x, w) = gauss_legendre(points_for_order(order));
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let mut rule = QuadratureRule::default();
    for (xi, wi) in x.iter().zip(&w) {
        let t = 0.5 * (xi + 1.0);
        rule.points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        rule.weights.push(0.5 * wi * len);
    }
    rule
}

/// Collapsed-coordinate Gauss rule on triangle `abc`, exact to degree `order`.
pub fn triangle_rule(a: [f64; 2], b: [f64; 2], c: [f64; 2], order: usize, out: &mut QuadratureRule) {
    // (s, t) in [0,1]^2 -> a + s(1-t)(b-a) + st(c-a); Jacobian 2|T| s adds one degree in s.
    let (xs, ws) = gauss_legendre(points_for_order(order + 1));
    let (xt, wt) = gauss_legendre(points_for_order(order));
    let area2 = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
    for (si, wsi) in xs.iter().zip(&ws) {
        let s = 0.5 * (si + 1.0);
        for (ti, wti) in xt.iter().zip(&wt) {
            let t = 0.5 * (ti + 1.0);
            let (u, v) = (s * (1.0 - t), s * t);
            out.points.push([
                a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
                a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
            ]);
            out.weights.push(0.25 * wsi * wti * area2 * s);
        }
    }
}

/// Rule on a star-shaped polygon built from the fan of triangles `(center, v_i, v_{i+1})`.
pub fn polygon_rule(poly: &[[f64; 2]], center: [f64; 2], order: usize) -> QuadratureRule {
    let mut rule = QuadratureRule::default();
    for i in 0..poly.len() {
        triangle_rule(center, poly[i], poly[(i + 1) % poly.len()], order, &mut rule);
    }
    rule
}

/// Exact integral of `x^a y^b` over a counterclockwise polygon via the
/// divergence theorem on `F = (x^{a+1} y^b / (a+1), 0)`.
pub fn polygon_monomial_integral(poly: &[[f64; 2]], a: usize, b: usize) -> f64 {
    let n = poly.len();
    let mut total = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let len = (q[0] - p[0]).hypot(q[1] - p[1]);
        if len == 0.0 {
            continue;
        }
        let nx = (q[1] - p[1]) / len;
        let rule = segment_rule(p, q, a + b + 1);
        total += nx * rule.integrate(|x| x[0].powi(a as i32 + 1) * x[1].powi(b as i32)) / (a + 1) as f64;
    }
    total
}
