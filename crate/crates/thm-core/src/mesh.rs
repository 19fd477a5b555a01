//! Two-dimensional polygonal meshes with full face topology.
//!
//! Meshes are either generated as Lloyd-relaxed clipped Voronoi diagrams of a
//! rectangle or loaded from a plain text file. Every mesh carries the face
//! list used by the interior penalty forms: each face knows its owner cell,
//! its neighbor (if any) and the unit normal pointing away from the owner.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::quadrature;
use crate::real::Real;

pub type Point<T> = [T; 2];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("cannot read mesh file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed mesh file at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cell {cell} has fewer than three distinct vertices")]
    TooFewVertices { cell: usize },
    #[error("cell {cell} references vertex {vertex} which does not exist")]
    BadVertex { cell: usize, vertex: usize },
    #[error("cell {cell} is clockwise or degenerate (signed area {area:e})")]
    Clockwise { cell: usize, area: f64 },
    #[error("cell {cell} is self-intersecting")]
    SelfIntersecting { cell: usize },
    #[error("cell {cell} is non-conforming: edge {a}-{b} is not matched by its neighbor")]
    NonConforming { cell: usize, a: usize, b: usize },
    #[error("edge {a}-{b} is shared by more than two cells or with equal orientation (cell {cell})")]
    Overlap { cell: usize, a: usize, b: usize },
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("need at least one cell")]
    Empty,
    #[error("sites {first} and {second} coincide after relaxation")]
    DuplicateSites { first: usize, second: usize },
}

/// Axis-aligned rectangle `[min.0, max.0] x [min.1, max.1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T> {
    pub min: Point<T>,
    pub max: Point<T>,
}

impl<T: Real> Rect<T> {
    pub fn new(min: Point<T>, max: Point<T>) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([T::zero(), T::zero()], [T::one(), T::one()])
    }

    pub fn width(&self) -> T {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> T {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> T {
        self.width().hypot(self.height())
    }

    fn corners(&self) -> Vec<Point<T>> {
        vec![
            self.min,
            [self.max[0], self.min[1]],
            self.max,
            [self.min[0], self.max[1]],
        ]
    }

    fn validate(&self) -> Result<(), MeshError> {
        let ok = self.width() > T::zero()
            && self.height() > T::zero()
            && self.width().is_finite()
            && self.height().is_finite();
        if ok {
            Ok(())
        } else {
            Err(MeshError::Domain(format!("{:?} has no interior", self)))
        }
    }
}

/// Side of the bounding rectangle a boundary face lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Left,
    Right,
    Bottom,
    Top,
    Other,
}

#[derive(Debug, Clone)]
pub struct Face<T> {
    /// Endpoints, ordered counterclockwise with respect to the owner.
    pub vertices: [usize; 2],
    pub owner: usize,
    pub neighbor: Option<usize>,
    /// Unit normal pointing from owner to neighbor (outward on the boundary).
    pub normal: Point<T>,
    pub length: T,
    pub tag: Option<BoundaryTag>,
}

impl<T> Face<T> {
    pub fn is_boundary(&self) -> bool {
        self.neighbor.is_none()
    }
}

/// Polygonal mesh; immutable after construction.
#[derive(Debug, Clone)]
pub struct Mesh<T> {
    vertices: Vec<Point<T>>,
    cells: Vec<Vec<usize>>,
    faces: Vec<Face<T>>,
    cell_faces: Vec<Vec<usize>>,
    diameters: Vec<T>,
    areas: Vec<T>,
    centroids: Vec<Point<T>>,
    bounds: Rect<T>,
}

impl<T: Real> Mesh<T> {
    /// Builds a mesh from vertex coordinates and counterclockwise cell loops,
    /// reconstructing faces and validating orientation and conformity.
    pub fn from_polygons(vertices: Vec<Point<T>>, cells: Vec<Vec<usize>>) -> Result<Self, MeshError> {
        if cells.is_empty() {
            return Err(MeshError::Empty);
        }
        for (c, cell) in cells.iter().enumerate() {
            if let Some(&v) = cell.iter().find(|&&v| v >= vertices.len()) {
                return Err(MeshError::BadVertex { cell: c, vertex: v });
            }
            let mut distinct = cell.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if distinct.len() < 3 || distinct.len() != cell.len() {
                return Err(MeshError::TooFewVertices { cell: c });
            }
        }

        let mut areas = Vec::with_capacity(cells.len());
        let mut centroids = Vec::with_capacity(cells.len());
        let mut diameters = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let poly: Vec<Point<T>> = cell.iter().map(|&v| vertices[v]).collect();
            let (area, centroid) = polygon_area_centroid(&poly);
            if area <= T::zero() || !area.is_finite() {
                return Err(MeshError::Clockwise { cell: c, area: area.as_f64() });
            }
            if is_self_intersecting(&poly) {
                return Err(MeshError::SelfIntersecting { cell: c });
            }
            areas.push(area);
            centroids.push(centroid);
            diameters.push(polygon_diameter(&poly));
        }

        let bounds = bounding_rect(&vertices, &cells);
        let (faces, cell_faces) = build_faces(&vertices, &cells, &bounds)?;
        Ok(Self { vertices, cells, faces, cell_faces, diameters, areas, centroids, bounds })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Point<T>] {
        &self.vertices
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        &self.cells[c]
    }

    pub fn cell_polygon(&self, c: usize) -> Vec<Point<T>> {
        self.cells[c].iter().map(|&v| self.vertices[v]).collect()
    }

    pub fn faces(&self) -> &[Face<T>] {
        &self.faces
    }

    pub fn face(&self, f: usize) -> &Face<T> {
        &self.faces[f]
    }

    /// Faces touching cell `c`, in the cell's vertex order.
    pub fn cell_faces(&self, c: usize) -> &[usize] {
        &self.cell_faces[c]
    }

    pub fn face_endpoints(&self, f: usize) -> (Point<T>, Point<T>) {
        let [a, b] = self.faces[f].vertices;
        (self.vertices[a], self.vertices[b])
    }

    pub fn interior_faces(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.faces.len()).filter(|&f| !self.faces[f].is_boundary())
    }

    pub fn boundary_faces(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.faces.len()).filter(|&f| self.faces[f].is_boundary())
    }

    pub fn diameter(&self, c: usize) -> T {
        self.diameters[c]
    }

    pub fn diameters(&self) -> &[T] {
        &self.diameters
    }

    /// Mesh size `h`: largest cell diameter.
    pub fn h(&self) -> T {
        self.diameters.iter().copied().fold(T::zero(), T::max)
    }

    pub fn area(&self, c: usize) -> T {
        self.areas[c]
    }

    pub fn areas(&self) -> &[T] {
        &self.areas
    }

    pub fn centroid(&self, c: usize) -> Point<T> {
        self.centroids[c]
    }

    /// Bounding rectangle of all vertices.
    pub fn bounds(&self) -> Rect<T> {
        self.bounds
    }

    pub fn total_area(&self) -> T {
        self.areas.iter().fold(T::zero(), |acc, &a| acc + a)
    }

    /// Converts the geometry to another scalar type and rebuilds topology.
    pub fn cast<U: Real>(&self) -> Result<Mesh<U>, MeshError> {
        let vertices = self
            .vertices
            .iter()
            .map(|p| [U::lit(p[0].as_f64()), U::lit(p[1].as_f64())])
            .collect();
        Mesh::from_polygons(vertices, self.cells.clone())
    }

    /// Serializes to the text format accepted by [`load_mesh`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.vertices.len(), self.cells.len());
        for p in &self.vertices {
            let _ = writeln!(out, "{:e} {:e}", p[0].as_f64(), p[1].as_f64());
        }
        for cell in &self.cells {
            let _ = write!(out, "{}", cell.len());
            for v in cell {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Reads a mesh file: `nv nc`, then `nv` lines `x y`, then `nc` lines `k i1 .. ik`.
pub fn load_mesh<T: Real>(path: impl AsRef<Path>) -> Result<Mesh<T>, MeshError> {
    let text = std::fs::read_to_string(path)?;
    parse_mesh(&text)
}

pub fn parse_mesh<T: Real>(text: &str) -> Result<Mesh<T>, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let parse_err = |line: usize, msg: &str| MeshError::Parse { line, msg: msg.to_string() };
    let (line, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let counts: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(line, "expected `nv nc`")))
        .collect::<Result<_, _>>()?;
    let [nv, nc] = counts[..] else {
        return Err(parse_err(line, "expected `nv nc`"));
    };

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, l) = lines.next().ok_or_else(|| parse_err(0, "missing vertex lines"))?;
        let xy: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(line, "expected `x y`")))
            .collect::<Result<_, _>>()?;
        let [x, y] = xy[..] else {
            return Err(parse_err(line, "expected `x y`"));
        };
        if !x.is_finite() || !y.is_finite() {
            return Err(parse_err(line, "non-finite coordinate"));
        }
        vertices.push([T::lit(x), T::lit(y)]);
    }

    let mut cells = Vec::with_capacity(nc);
    for _ in 0..nc {
        let (line, l) = lines.next().ok_or_else(|| parse_err(0, "missing cell lines"))?;
        let ids: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(line, "expected `k i1 .. ik`")))
            .collect::<Result<_, _>>()?;
        match ids.split_first() {
            Some((&k, rest)) if k == rest.len() => cells.push(rest.to_vec()),
            _ => return Err(parse_err(line, "vertex count does not match `k`")),
        }
    }
    if let Some((line, _)) = lines.next() {
        return Err(parse_err(line, "trailing content"));
    }
    Mesh::from_polygons(vertices, cells)
}

/// Signed area and area centroid of a polygon.
pub fn polygon_area_centroid<T: Real>(poly: &[Point<T>]) -> (T, Point<T>) {
    let n = poly.len();
    // Shift to the first vertex to limit cancellation.
    let o = poly[0];
    let mut a2 = T::zero();
    let mut cx = T::zero();
    let mut cy = T::zero();
    for i in 0..n {
        let p = [poly[i][0] - o[0], poly[i][1] - o[1]];
        let q = [poly[(i + 1) % n][0] - o[0], poly[(i + 1) % n][1] - o[1]];
        let cr = p[0] * q[1] - q[0] * p[1];
        a2 += cr;
        cx += (p[0] + q[0]) * cr;
        cy += (p[1] + q[1]) * cr;
    }
    let area = a2 / T::lit(2.0);
    if a2 == T::zero() {
        return (area, o);
    }
    let three = T::lit(3.0);
    (area, [o[0] + cx / (three * a2), o[1] + cy / (three * a2)])
}

pub fn polygon_diameter<T: Real>(poly: &[Point<T>]) -> T {
    let mut h = T::zero();
    for (i, p) in poly.iter().enumerate() {
        for q in &poly[i + 1..] {
            h = h.max(dist(*p, *q));
        }
    }
    h
}

fn dist<T: Real>(p: Point<T>, q: Point<T>) -> T {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

fn cross<T: Real>(o: Point<T>, a: Point<T>, b: Point<T>) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross<T: Real>(p1: Point<T>, p2: Point<T>, q1: Point<T>, q2: Point<T>) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    ((d1 > T::zero() && d2 < T::zero()) || (d1 < T::zero() && d2 > T::zero()))
        && ((d3 > T::zero() && d4 < T::zero()) || (d3 < T::zero() && d4 > T::zero()))
}

fn is_self_intersecting<T: Real>(poly: &[Point<T>]) -> bool {
    let n = poly.len();
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

fn bounding_rect<T: Real>(vertices: &[Point<T>], cells: &[Vec<usize>]) -> Rect<T> {
    let mut min = [T::infinity(); 2];
    let mut max = [T::neg_infinity(); 2];
    for v in cells.iter().flatten() {
        let p = vertices[*v];
        for k in 0..2 {
            min[k] = min[k].min(p[k]);
            max[k] = max[k].max(p[k]);
        }
    }
    Rect { min, max }
}

fn boundary_tag<T: Real>(a: Point<T>, b: Point<T>, r: &Rect<T>) -> BoundaryTag {
    let tol = r.diameter() * T::lit(1e-9);
    let on = |x: T, y: T| (x - y).abs() <= tol;
    if on(a[0], r.min[0]) && on(b[0], r.min[0]) {
        BoundaryTag::Left
    } else if on(a[0], r.max[0]) && on(b[0], r.max[0]) {
        BoundaryTag::Right
    } else if on(a[1], r.min[1]) && on(b[1], r.min[1]) {
        BoundaryTag::Bottom
    } else if on(a[1], r.max[1]) && on(b[1], r.max[1]) {
        BoundaryTag::Top
    } else {
        BoundaryTag::Other
    }
}

fn point_on_segment<T: Real>(p: Point<T>, a: Point<T>, b: Point<T>) -> bool {
    let len = dist(a, b);
    let tol = len * T::lit(1e-9);
    if cross(a, b, p).abs() > tol * len {
        return false;
    }
    let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len);
    t > T::zero() && t < T::one()
}

#[allow(clippy::type_complexity)]
fn build_faces<T: Real>(
    vertices: &[Point<T>],
    cells: &[Vec<usize>],
    bounds: &Rect<T>,
) -> Result<(Vec<Face<T>>, Vec<Vec<usize>>), MeshError> {
    let mut edge_to_face: HashMap<(usize, usize), usize> = HashMap::new();
    let mut faces: Vec<Face<T>> = Vec::new();
    let mut cell_faces = vec![Vec::new(); cells.len()];

    for (c, cell) in cells.iter().enumerate() {
        let k = cell.len();
        for i in 0..k {
            let (a, b) = (cell[i], cell[(i + 1) % k]);
            let key = (a.min(b), a.max(b));
            match edge_to_face.get(&key) {
                None => {
                    let (pa, pb) = (vertices[a], vertices[b]);
                    let length = dist(pa, pb);
                    let normal = [(pb[1] - pa[1]) / length, -(pb[0] - pa[0]) / length];
                    edge_to_face.insert(key, faces.len());
                    cell_faces[c].push(faces.len());
                    faces.push(Face { vertices: [a, b], owner: c, neighbor: None, normal, length, tag: None });
                }
                Some(&f) => {
                    let face = &mut faces[f];
                    if face.neighbor.is_some() || face.vertices != [b, a] || face.owner == c {
                        return Err(MeshError::Overlap { cell: c, a, b });
                    }
                    face.neighbor = Some(c);
                    cell_faces[c].push(f);
                }
            }
        }
    }

    let unmatched: Vec<usize> = (0..faces.len()).filter(|&f| faces[f].neighbor.is_none()).collect();
    // A hanging node shows up as an unmatched edge whose endpoint or midpoint
    // lies strictly inside another unmatched edge.
    let two = T::lit(2.0);
    for &f in &unmatched {
        let [a, b] = faces[f].vertices;
        let (pa, pb) = (vertices[a], vertices[b]);
        let mid = [(pa[0] + pb[0]) / two, (pa[1] + pb[1]) / two];
        for &g in &unmatched {
            if g == f {
                continue;
            }
            let [c0, c1] = faces[g].vertices;
            let (qa, qb) = (vertices[c0], vertices[c1]);
            if point_on_segment(mid, qa, qb) || point_on_segment(pa, qa, qb) || point_on_segment(pb, qa, qb) {
                let cell = faces[f].owner.max(faces[g].owner);
                return Err(MeshError::NonConforming { cell, a, b });
            }
        }
    }
    for f in unmatched {
        let [a, b] = faces[f].vertices;
        faces[f].tag = Some(boundary_tag(vertices[a], vertices[b], bounds));
    }
    Ok((faces, cell_faces))
}

/// Clips a convex polygon to the half-plane of points closer to `si` than to `sj`.
fn clip_bisector<T: Real>(poly: &[Point<T>], si: Point<T>, sj: Point<T>) -> Vec<Point<T>> {
    let two = T::lit(2.0);
    let d = [sj[0] - si[0], sj[1] - si[1]];
    let m = [(si[0] + sj[0]) / two, (si[1] + sj[1]) / two];
    let side = |p: Point<T>| (p[0] - m[0]) * d[0] + (p[1] - m[1]) * d[1];
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let (sp, sq) = (side(p), side(q));
        if sp <= T::zero() {
            out.push(p);
        }
        if (sp < T::zero() && sq > T::zero()) || (sp > T::zero() && sq < T::zero()) {
            let t = sp / (sp - sq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

/// Uniform bucket grid over the sites, used to visit candidates by distance.
struct SiteGrid<T> {
    origin: Point<T>,
    size: T,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<T: Real> SiteGrid<T> {
    fn new(sites: &[Point<T>], domain: &Rect<T>) -> Self {
        let n = sites.len().max(1);
        let size = (domain.area() / T::lit(n as f64)).sqrt();
        let nx = (domain.width() / size).ceil().to_usize().unwrap_or(1).max(1);
        let ny = (domain.height() / size).ceil().to_usize().unwrap_or(1).max(1);
        let mut grid = Self { origin: domain.min, size, nx, ny, buckets: vec![Vec::new(); nx * ny] };
        for (i, s) in sites.iter().enumerate() {
            let (bx, by) = grid.bucket(*s);
            grid.buckets[by * nx + bx].push(i);
        }
        grid
    }

    fn bucket(&self, p: Point<T>) -> (usize, usize) {
        let ix = ((p[0] - self.origin[0]) / self.size).floor().to_isize().unwrap_or(0);
        let iy = ((p[1] - self.origin[1]) / self.size).floor().to_isize().unwrap_or(0);
        (ix.clamp(0, self.nx as isize - 1) as usize, iy.clamp(0, self.ny as isize - 1) as usize)
    }

    /// Calls `visit` for every site in the buckets at Chebyshev distance `r`.
    fn ring(&self, center: (usize, usize), r: usize, mut visit: impl FnMut(usize)) {
        let (cx, cy) = (center.0 as isize, center.1 as isize);
        let r = r as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx.abs() != r && dy.abs() != r {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
                    continue;
                }
                for &j in &self.buckets[y as usize * self.nx + x as usize] {
                    visit(j);
                }
            }
        }
    }
}

/// Clipped Voronoi cells of `sites` inside `domain`, one polygon per site.
pub fn voronoi_cells<T: Real>(sites: &[Point<T>], domain: &Rect<T>) -> Vec<Vec<Point<T>>> {
    let grid = SiteGrid::new(sites, domain);
    let max_ring = grid.nx.max(grid.ny);
    sites
        .iter()
        .enumerate()
        .map(|(i, &si)| {
            let mut poly = domain.corners();
            let center = grid.bucket(si);
            for r in 0..=max_ring {
                grid.ring(center, r, |j| {
                    if j != i {
                        poly = clip_bisector(&poly, si, sites[j]);
                    }
                });
                let reach = poly.iter().map(|&p| dist(p, si)).fold(T::zero(), T::max);
                if T::lit(r as f64) * grid.size >= T::lit(2.0) * reach {
                    break;
                }
            }
            poly
        })
        .collect()
}

/// Lloyd relaxation driver with access to intermediate states.
pub struct LloydRelaxation<T> {
    domain: Rect<T>,
    sites: Vec<Point<T>>,
}

impl<T: Real> LloydRelaxation<T> {
    /// Uniformly random initial sites drawn from a ChaCha8 stream.
    pub fn random(n_cells: usize, domain: Rect<T>, seed: u64) -> Result<Self, MeshError> {
        if n_cells == 0 {
            return Err(MeshError::Empty);
        }
        domain.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = (0..n_cells)
            .map(|_| {
                let (u, v): (f64, f64) = (rng.random(), rng.random());
                [
                    domain.min[0] + T::lit(u) * domain.width(),
                    domain.min[1] + T::lit(v) * domain.height(),
                ]
            })
            .collect();
        Ok(Self { domain, sites })
    }

    pub fn from_sites(sites: Vec<Point<T>>, domain: Rect<T>) -> Result<Self, MeshError> {
        if sites.is_empty() {
            return Err(MeshError::Empty);
        }
        domain.validate()?;
        Ok(Self { domain, sites })
    }

    pub fn sites(&self) -> &[Point<T>] {
        &self.sites
    }

    pub fn cells(&self) -> Vec<Vec<Point<T>>> {
        voronoi_cells(&self.sites, &self.domain)
    }

    /// Moves every site to the centroid of its cell; returns the new cell areas.
    pub fn step(&mut self) -> Vec<T> {
        let cells = self.cells();
        let mut areas = Vec::with_capacity(cells.len());
        for (site, poly) in self.sites.iter_mut().zip(&cells) {
            let (a, c) = polygon_area_centroid(poly);
            areas.push(a);
            if a > T::zero() {
                *site = c;
            }
        }
        areas
    }

    pub fn check_distinct(&self) -> Result<(), MeshError> {
        let tol = self.domain.diameter() * T::lit(1e-12).max(T::epsilon() * T::lit(10.0));
        let grid = SiteGrid::new(&self.sites, &self.domain);
        for (i, &s) in self.sites.iter().enumerate() {
            let center = grid.bucket(s);
            let mut clash = None;
            for r in 0..=1 {
                grid.ring(center, r, |j| {
                    if j > i && clash.is_none() && dist(s, self.sites[j]) <= tol {
                        clash = Some(j);
                    }
                });
            }
            if let Some(j) = clash {
                return Err(MeshError::DuplicateSites { first: i, second: j });
            }
        }
        Ok(())
    }

    /// Turns the current diagram into a conforming mesh.
    pub fn into_mesh(self) -> Result<Mesh<T>, MeshError> {
        self.check_distinct()?;
        let cells = self.cells();
        polygons_to_mesh(&cells, &self.domain)
    }
}

/// Welds near-coincident vertices of independently clipped polygons.
fn polygons_to_mesh<T: Real>(polys: &[Vec<Point<T>>], domain: &Rect<T>) -> Result<Mesh<T>, MeshError> {
    let tol = domain.diameter() * T::lit(1e-10).max(T::epsilon() * T::lit(1e3));
    let key_of = |p: Point<T>| -> (i64, i64) {
        (
            ((p[0] - domain.min[0]) / tol).floor().to_i64().unwrap_or(0),
            ((p[1] - domain.min[1]) / tol).floor().to_i64().unwrap_or(0),
        )
    };
    let mut lookup: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut vertices: Vec<Point<T>> = Vec::new();
    let mut cells = Vec::with_capacity(polys.len());
    for poly in polys {
        let mut cell: Vec<usize> = Vec::with_capacity(poly.len());
        for &p in poly {
            let (kx, ky) = key_of(p);
            let mut found = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(ids) = lookup.get(&(kx + dx, ky + dy)) {
                        if let Some(&id) = ids.iter().find(|&&id| dist(vertices[id], p) <= tol) {
                            found = Some(id);
                            break 'search;
                        }
                    }
                }
            }
            let id = found.unwrap_or_else(|| {
                vertices.push(p);
                lookup.entry((kx, ky)).or_default().push(vertices.len() - 1);
                vertices.len() - 1
            });
            if cell.last() != Some(&id) {
                cell.push(id);
            }
        }
        while cell.len() > 1 && cell.first() == cell.last() {
            cell.pop();
        }
        cells.push(cell);
    }
    Mesh::from_polygons(vertices, cells)
}

/// Lloyd-relaxed clipped Voronoi mesh of `domain` with `n_cells` cells.
pub fn generate_voronoi<T: Real>(
    n_cells: usize,
    domain: Rect<T>,
    rng_seed: u64,
    lloyd_iterations: usize,
) -> Result<Mesh<T>, MeshError> {
    let mut lloyd = LloydRelaxation::random(n_cells, domain, rng_seed)?;
    for _ in 0..lloyd_iterations {
        lloyd.step();
    }
    lloyd.into_mesh()
}

/// Clipped Voronoi mesh for explicit sites, without relaxation.
pub fn voronoi_from_sites<T: Real>(sites: Vec<Point<T>>, domain: Rect<T>) -> Result<Mesh<T>, MeshError> {
    LloydRelaxation::from_sites(sites, domain)?.into_mesh()
}

/// Structured mesh of `nx x ny` rectangles; handy for tests and patch checks.
pub fn structured_quads<T: Real>(nx: usize, ny: usize, domain: Rect<T>) -> Result<Mesh<T>, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::Empty);
    }
    domain.validate()?;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([
                domain.min[0] + domain.width() * T::lit(i as f64 / nx as f64),
                domain.min[1] + domain.height() * T::lit(j as f64 / ny as f64),
            ]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let cells = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| vec![id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]))
        .collect();
    Mesh::from_polygons(vertices, cells)
}

/// Shape-regularity diagnostics of a mesh.
#[derive(Debug, Clone)]
pub struct RegularityReport<T> {
    /// Minimum over faces of `d |S| / (|F| h)` with `S` the face-centroid triangle.
    pub min_simplex_ratio: T,
    /// Largest ratio of diameters between neighboring cells (>= 1).
    pub max_neighbor_h_ratio: T,
    /// For each cell, the face with the smallest ratio and that ratio.
    pub worst_face: Vec<(usize, T)>,
}

pub fn check_regularity<T: Real>(mesh: &Mesh<T>) -> RegularityReport<T> {
    let d = T::lit(2.0);
    let mut worst_face = Vec::with_capacity(mesh.n_cells());
    for c in 0..mesh.n_cells() {
        let centroid = mesh.centroid(c);
        let h = mesh.diameter(c);
        let mut worst = (usize::MAX, T::infinity());
        for &f in mesh.cell_faces(c) {
            let (a, b) = mesh.face_endpoints(f);
            let simplex = cross(a, b, centroid).abs() / T::lit(2.0);
            let ratio = d * simplex / (mesh.face(f).length * h);
            if ratio < worst.1 {
                worst = (f, ratio);
            }
        }
        worst_face.push(worst);
    }
    let min_simplex_ratio = worst_face.iter().map(|w| w.1).fold(T::infinity(), T::min);
    let mut max_neighbor_h_ratio = T::one();
    for f in mesh.interior_faces() {
        let face = mesh.face(f);
        let (h1, h2) = (mesh.diameter(face.owner), mesh.diameter(face.neighbor.unwrap_or(face.owner)));
        max_neighbor_h_ratio = max_neighbor_h_ratio.max(h1.max(h2) / h1.min(h2));
    }
    RegularityReport { min_simplex_ratio, max_neighbor_h_ratio, worst_face }
}

/// `||v||_{dK} h^{1/2} / (l ||v||_K)` for the polynomial with the given
/// coefficients in the scaled monomial basis of cell `c`.
pub fn trace_ratio<T: Real>(mesh: &Mesh<T>, c: usize, degree: usize, coeffs: &[f64]) -> Option<f64> {
    let poly: Vec<[f64; 2]> = mesh.cell_polygon(c).iter().map(|p| [p[0].as_f64(), p[1].as_f64()]).collect();
    let centroid = [mesh.centroid(c)[0].as_f64(), mesh.centroid(c)[1].as_f64()];
    let h = mesh.diameter(c).as_f64();
    let exps = crate::basis::monomial_exponents(degree);
    let eval = |x: [f64; 2]| -> f64 {
        let (s, t) = ((x[0] - centroid[0]) / h, (x[1] - centroid[1]) / h);
        exps.iter().zip(coeffs).map(|(&(a, b), &w)| w * s.powi(a as i32) * t.powi(b as i32)).sum()
    };
    let order = 2 * degree;
    let vol = quadrature::polygon_rule(&poly, centroid, order);
    let vol_norm2: f64 = vol.points.iter().zip(&vol.weights).map(|(&x, &w)| w * eval(x).powi(2)).sum();
    let mut face_norm2 = 0.0;
    for i in 0..poly.len() {
        let rule = quadrature::segment_rule(poly[i], poly[(i + 1) % poly.len()], order);
        face_norm2 += rule.points.iter().zip(&rule.weights).map(|(&x, &w)| w * eval(x).powi(2)).sum::<f64>();
    }
    if !(vol_norm2 > 0.0) {
        return None;
    }
    Some(face_norm2.sqrt() * h.sqrt() / (degree as f64 * vol_norm2.sqrt()))
}

/// Largest trace ratio over random degree-`l` polynomials on every cell.
pub fn measure_trace_constant<T: Real>(mesh: &Mesh<T>, degree: usize, trials: usize, seed: u64) -> f64 {
    assert!(degree >= 1, "degree must be at least 1");
    let dim = crate::basis::local_dim(degree);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for c in 0..mesh.n_cells() {
        let mut accepted = 0;
        while accepted < trials {
            let coeffs: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            if let Some(r) = trace_ratio(mesh, c, degree, &coeffs) {
                best = best.max(r);
                accepted += 1;
            }
        }
    }
    best
}
