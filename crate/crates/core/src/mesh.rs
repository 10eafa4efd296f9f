//! Conforming P1 triangulations of a domain inside a rectangular hold-all box.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::Vec2;

/// Smallest admissible signed triangle area.
pub const MIN_AREA: f64 = 1e-14;

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) || ![x0, x1, y0, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rectangle [{x0}, {x1}] x [{y0}, {y1}] is empty or not finite"
            )));
        }
        Ok(Rect { x0, x1, y0, y1 })
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// True if `p` lies strictly inside.
    pub fn interior(&self, p: Vec2) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x0 >= self.x0 && o.x1 <= self.x1 && o.y0 >= self.y0 && o.y1 <= self.y1
    }
}

/// The default hold-all box `D = [-1, 2]²`.
pub const HOLD_ALL: Rect = Rect { x0: -1.0, x1: 2.0, y0: -1.0, y1: 2.0 };

/// Geometry of one triangle: area and the gradients of its three
/// barycentric coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Element {
    pub nodes: [usize; 3],
    pub area: f64,
    pub grads: [Vec2; 3],
}

impl Element {
    /// Gradient of the P1 interpolant with nodal values `v`.
    pub fn gradient(&self, v: &[f64]) -> Vec2 {
        let mut g = [0.0; 2];
        for (a, &n) in self.nodes.iter().enumerate() {
            g[0] += v[n] * self.grads[a][0];
            g[1] += v[n] * self.grads[a][1];
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec2>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<([usize; 2], u8)>,
    boundary_nodes: Vec<usize>,
    on_boundary: Vec<bool>,
    hold_all: Rect,
    edges: Vec<[usize; 2]>,
    tri_edges: Vec<[usize; 3]>,
}

impl Mesh {
    /// Builds a mesh and checks every invariant.
    pub fn new(
        vertices: Vec<Vec2>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<([usize; 2], u8)>,
        hold_all: Rect,
    ) -> Result<Self> {
        let nv = vertices.len();
        for (k, p) in vertices.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::NonFinite(format!("vertex {k}")));
            }
            if !hold_all.contains(*p) {
                return Err(Error::InvalidArgument(format!(
                    "vertex {k} at ({}, {}) outside the hold-all box",
                    p[0], p[1]
                )));
            }
        }
        for (k, t) in triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= nv) {
                return Err(Error::InvalidArgument(format!("triangle {k} references a missing vertex")));
            }
            let a = signed_area(&vertices, t);
            if a <= MIN_AREA {
                return Err(Error::InvertedElement { triangle: k, area: a });
            }
        }

        // Every boundary edge must be the edge of exactly one triangle, with the
        // same orientation, and the edges must close into loops.
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut out_deg = vec![0usize; nv];
        let mut in_deg = vec![0usize; nv];
        for &([a, b], _) in &boundary_edges {
            if a >= nv || b >= nv || a == b {
                return Err(Error::InvalidArgument(format!("bad boundary edge ({a}, {b})")));
            }
            if edge_count.get(&(a.min(b), a.max(b))) != Some(&1) {
                return Err(Error::InvalidArgument(format!(
                    "boundary edge ({a}, {b}) is not the edge of exactly one triangle"
                )));
            }
            out_deg[a] += 1;
            in_deg[b] += 1;
        }
        if out_deg != in_deg {
            return Err(Error::InvalidArgument("boundary edges do not form closed loops".into()));
        }
        let n_open = edge_count.values().filter(|&&c| c == 1).count();
        if n_open != boundary_edges.len() {
            return Err(Error::InvalidArgument(format!(
                "{n_open} triangle edges lie on the boundary but {} boundary edges were given",
                boundary_edges.len()
            )));
        }

        let mut on_boundary = vec![false; nv];
        for &([a, b], _) in &boundary_edges {
            on_boundary[a] = true;
            on_boundary[b] = true;
        }
        let boundary_nodes = (0..nv).filter(|&i| on_boundary[i]).collect();

        let mut edge_index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut edges = Vec::new();
        let mut tri_edges = Vec::with_capacity(triangles.len());
        for t in &triangles {
            let mut te = [0; 3];
            for (e, slot) in te.iter_mut().enumerate() {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *slot = *edge_index.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    edges.push([a.min(b), a.max(b)]);
                    edges.len() - 1
                });
            }
            tri_edges.push(te);
        }
        Ok(Mesh { vertices, triangles, boundary_edges, boundary_nodes, on_boundary, hold_all, edges, tri_edges })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Vec2 {
        self.vertices[i]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[([usize; 2], u8)] {
        &self.boundary_edges
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn is_boundary(&self, i: usize) -> bool {
        self.on_boundary[i]
    }

    pub fn hold_all(&self) -> Rect {
        self.hold_all
    }

    /// Undirected edges, each stored once with the smaller index first.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// For each triangle, the edge index of its local edge `e`, which joins
    /// local vertices `e` and `e + 1 (mod 3)`.
    pub fn triangle_edges(&self) -> &[[usize; 3]] {
        &self.tri_edges
    }

    pub fn edge_midpoint(&self, e: usize) -> Vec2 {
        let [a, b] = self.edges[e];
        let (p, q) = (self.vertices[a], self.vertices[b]);
        [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
    }

    pub fn element(&self, k: usize) -> Element {
        let t = self.triangles[k];
        let p = [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]];
        let two_a = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let mut grads = [[0.0; 2]; 3];
        for a in 0..3 {
            let (b, c) = (p[(a + 1) % 3], p[(a + 2) % 3]);
            grads[a] = [(b[1] - c[1]) / two_a, (c[0] - b[0]) / two_a];
        }
        Element { nodes: t, area: 0.5 * two_a, grads }
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        (0..self.triangles.len()).map(move |k| self.element(k))
    }

    pub fn centroid(&self, k: usize) -> Vec2 {
        let t = self.triangles[k];
        let mut c = [0.0; 2];
        for &i in &t {
            c[0] += self.vertices[i][0] / 3.0;
            c[1] += self.vertices[i][1] / 3.0;
        }
        c
    }

    pub fn total_area(&self) -> f64 {
        self.triangles.iter().map(|t| signed_area(&self.vertices, t)).sum()
    }

    /// Lumped (vertex) mass: one third of the adjacent triangle areas.
    pub fn lumped_mass(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_vertices()];
        for e in self.elements() {
            for &i in &e.nodes {
                m[i] += e.area / 3.0;
            }
        }
        m
    }

    /// Applies `map` to every vertex. Connectivity and markers are kept; an
    /// element whose image is not positively oriented is rejected.
    pub fn deform(&self, map: impl Fn(Vec2) -> Result<Vec2>) -> Result<Mesh> {
        let vertices = self.vertices.iter().map(|&p| map(p)).collect::<Result<Vec<_>>>()?;
        for (k, t) in self.triangles.iter().enumerate() {
            let a = signed_area(&vertices, t);
            if !(a > MIN_AREA) {
                return Err(Error::InvertedElement { triangle: k, area: a });
            }
        }
        for (k, p) in vertices.iter().enumerate() {
            if !self.hold_all.contains(*p) {
                return Err(Error::InvalidArgument(format!("deformed vertex {k} left the hold-all box")));
            }
        }
        Ok(Mesh { vertices, ..self.clone() })
    }

    /// Red refinement: every triangle is split into four through its edge
    /// midpoints. Vertices are renumbered row by row (by y, then x) so that
    /// the assembled matrices keep a narrow envelope.
    pub fn refine_uniform(&self) -> Mesh {
        let mut vertices = self.vertices.clone();
        let mut mid: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec2>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let (p, q) = (vertices[a], vertices[b]);
                vertices.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
                vertices.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        let mut boundary = Vec::with_capacity(2 * self.boundary_edges.len());
        for &([a, b], m) in &self.boundary_edges {
            let ab = midpoint(a, b, &mut vertices);
            boundary.push(([a, ab], m));
            boundary.push(([ab, b], m));
        }

        let mut order: Vec<usize> = (0..vertices.len()).collect();
        order.sort_by(|&i, &j| {
            let (p, q) = (vertices[i], vertices[j]);
            p[1].total_cmp(&q[1]).then(p[0].total_cmp(&q[0]))
        });
        let mut new_index = vec![0; vertices.len()];
        for (k, &i) in order.iter().enumerate() {
            new_index[i] = k;
        }
        let vertices = order.iter().map(|&i| vertices[i]).collect();
        let triangles = triangles.iter().map(|t| t.map(|i| new_index[i])).collect();
        let boundary = boundary.iter().map(|&(e, m)| (e.map(|i| new_index[i]), m)).collect();
        Mesh::new(vertices, triangles, boundary, self.hold_all).expect("refinement keeps mesh invariants")
    }

    fn check_field(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_vertices() {
            return Err(Error::SizeMismatch { expected: self.n_vertices(), got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("nodal field".into()));
        }
        Ok(())
    }

    /// Exact L² norm of a P1 field.
    pub fn l2_norm(&self, v: &[f64]) -> Result<f64> {
        self.check_field(v)?;
        let mut s = 0.0;
        for e in self.elements() {
            let [a, b, c] = e.nodes.map(|i| v[i]);
            s += e.area / 6.0 * (a * a + b * b + c * c + a * b + b * c + c * a);
        }
        Ok(s.sqrt())
    }

    /// Exact H¹ seminorm of a P1 field.
    pub fn h1_seminorm(&self, v: &[f64]) -> Result<f64> {
        self.check_field(v)?;
        let s: f64 = self
            .elements()
            .map(|e| {
                let g = e.gradient(v);
                e.area * (g[0] * g[0] + g[1] * g[1])
            })
            .sum();
        Ok(s.sqrt())
    }

    pub fn h1_norm(&self, v: &[f64]) -> Result<f64> {
        Ok(self.l2_norm(v)?.hypot(self.h1_seminorm(v)?))
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(&self, f: impl Fn(Vec2) -> f64) -> Vec<f64> {
        self.vertices.iter().map(|&p| f(p)).collect()
    }

    /// Area-weighted average of the element gradients around each vertex.
    pub fn recovered_gradient(&self, v: &[f64]) -> Result<Vec<Vec2>> {
        self.check_field(v)?;
        let mut g = vec![[0.0; 2]; self.n_vertices()];
        let mut w = vec![0.0; self.n_vertices()];
        for e in self.elements() {
            let ge = e.gradient(v);
            for &i in &e.nodes {
                g[i][0] += e.area * ge[0];
                g[i][1] += e.area * ge[1];
                w[i] += e.area;
            }
        }
        for (gi, wi) in g.iter_mut().zip(&w) {
            gi[0] /= wi;
            gi[1] /= wi;
        }
        Ok(g)
    }

    /// Plain-text export with `vertices:`, `triangles:` and `boundary:` blocks.
    pub fn to_text(&self) -> String {
        let mut out = String::from("vertices:\n");
        for p in &self.vertices {
            let _ = writeln!(out, "{} {}", fmt_f64(p[0]), fmt_f64(p[1]));
        }
        out.push_str("triangles:\n");
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        out.push_str("boundary:\n");
        for ([a, b], m) in &self.boundary_edges {
            let _ = writeln!(out, "{a} {b} {m}");
        }
        out
    }

    /// CSV export `node,x,y,value`.
    pub fn field_csv(&self, v: &[f64]) -> Result<String> {
        if v.len() != self.n_vertices() {
            return Err(Error::SizeMismatch { expected: self.n_vertices(), got: v.len() });
        }
        let mut out = String::from("node,x,y,value\n");
        for (i, (p, x)) in self.vertices.iter().zip(v).enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*x));
        }
        Ok(out)
    }
}

fn signed_area(v: &[Vec2], t: &[usize; 3]) -> f64 {
    let (p, q, r) = (v[t[0]], v[t[1]], v[t[2]]);
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

/// Structured mesh of the unit square with `(n+1)²` vertices numbered row by
/// row. Every cell is cut along its (0,0)-(1,1) diagonal, which makes the mesh
/// symmetric under the reflection `x ↔ y`.
pub fn unit_square_mesh(n: usize) -> Result<Mesh> {
    structured(n, |i, j| [i as f64 / n as f64, j as f64 / n as f64], |_, _| false, HOLD_ALL)
}

/// Disk of the given centre and radius, obtained from an `n × n` square grid
/// through the elliptical square-to-disk map.
pub fn disk_mesh(n: usize, center: Vec2, radius: f64) -> Result<Mesh> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("disk radius must be positive".into()));
    }
    let map = |i: usize, j: usize| {
        let s = 2.0 * i as f64 / n as f64 - 1.0;
        let t = 2.0 * j as f64 / n as f64 - 1.0;
        let x = s * (1.0 - 0.5 * t * t).sqrt();
        let y = t * (1.0 - 0.5 * s * s).sqrt();
        [center[0] + radius * x, center[1] + radius * y]
    };
    // Cells in the second and fourth quadrant use the other diagonal so that
    // no triangle has all three vertices on the circle.
    let flip = |i: usize, j: usize| (2 * i + 1 < n) != (2 * j + 1 < n);
    let hold = Rect::new(
        center[0] - 2.0 * radius,
        center[0] + 2.0 * radius,
        center[1] - 2.0 * radius,
        center[1] + 2.0 * radius,
    )?;
    structured(n, map, flip, hold)
}

fn structured(
    n: usize,
    point: impl Fn(usize, usize) -> Vec2,
    flip: impl Fn(usize, usize) -> bool,
    hold_all: Rect,
) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidArgument("mesh resolution n must be at least 1".into()));
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push(point(i, j));
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            if flip(i, j) {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            } else {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
    }
    let mut boundary = Vec::with_capacity(4 * n);
    for i in 0..n {
        boundary.push(([idx(i, 0), idx(i + 1, 0)], 1));
    }
    for j in 0..n {
        boundary.push(([idx(n, j), idx(n, j + 1)], 1));
    }
    for i in (0..n).rev() {
        boundary.push(([idx(i + 1, n), idx(i, n)], 1));
    }
    for j in (0..n).rev() {
        boundary.push(([idx(0, j + 1), idx(0, j)], 1));
    }
    Mesh::new(vertices, triangles, boundary, hold_all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let m = unit_square_mesh(1).unwrap();
        assert_eq!((m.n_vertices(), m.n_triangles(), m.boundary_edges().len()), (4, 2, 4));
        let m = unit_square_mesh(2).unwrap();
        assert_eq!((m.n_vertices(), m.n_triangles()), (9, 8));
        assert_eq!(m.boundary_nodes().len(), 8);
        assert!(unit_square_mesh(0).is_err());
    }

    #[test]
    fn area_and_refinement() {
        let m = unit_square_mesh(4).unwrap();
        assert!((m.total_area() - 1.0).abs() < 1e-12);
        let r = unit_square_mesh(1).unwrap().refine_uniform();
        assert_eq!(r.n_triangles(), 8);
        assert_eq!(r.boundary_edges().len(), 8);
        // Red refinement of the structured mesh reproduces the vertices of the
        // structured mesh at 2n, in the same order.
        let r = unit_square_mesh(3).unwrap().refine_uniform();
        let s = unit_square_mesh(6).unwrap();
        for (p, q) in r.vertices().iter().zip(s.vertices()) {
            assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn deform_scaling_and_reflection() {
        let m = unit_square_mesh(4).unwrap();
        let s = 0.1f64.exp();
        let d = m.deform(|p| Ok([s * p[0], p[1]])).unwrap();
        assert!((d.total_area() - s).abs() < 1e-12);
        assert_eq!(m.deform(Ok).unwrap(), m);
        let err = m.deform(|p| Ok([-p[0], p[1]])).unwrap_err();
        assert!(matches!(err, Error::InvertedElement { triangle: 0, .. }));
    }

    #[test]
    fn norms() {
        let m = unit_square_mesh(4).unwrap();
        let zero = vec![0.0; m.n_vertices()];
        assert_eq!(m.h1_norm(&zero).unwrap(), 0.0);
        let c = vec![-3.0; m.n_vertices()];
        assert!((m.l2_norm(&c).unwrap() - 3.0).abs() < 1e-12);
        assert!(m.h1_seminorm(&c).unwrap().abs() < 1e-12);
        let x = m.interpolate(|p| p[0]);
        assert!((m.h1_seminorm(&x).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(m.l2_norm(&[1.0]), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn disk_is_valid() {
        let m = disk_mesh(8, [0.5, 0.5], 0.5).unwrap();
        let exact = std::f64::consts::PI * 0.25;
        assert!((m.total_area() - exact).abs() < 0.05 * exact);
        let r = m.refine_uniform();
        assert!((r.total_area() - m.total_area()).abs() < 1e-12);
    }

    #[test]
    fn export_formats() {
        let m = unit_square_mesh(1).unwrap();
        let t = m.to_text();
        assert!(t.starts_with("vertices:\n0.0000000000000000e0 0.0000000000000000e0\n"));
        assert!(t.contains("triangles:\n0 1 3\n0 3 2\n"));
        let csv = m.field_csv(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(csv.lines().next(), Some("node,x,y,value"));
        assert_eq!(csv.lines().count(), 5);
    }
}
