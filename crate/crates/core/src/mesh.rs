//! Planar triangular meshes, their text format, and barycentric projection
//! of point locations onto mesh nodes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::sparse::{CsrMatrix, Triplets};

/// Axis-aligned rectangle `[min.x, max.x] × [min.y, max.y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox<T> {
    pub min: [T; 2],
    pub max: [T; 2],
}

impl<T: Real> BoundingBox<T> {
    pub fn new(min: [T; 2], max: [T; 2]) -> Self {
        Self { min, max }
    }

    pub fn of_points(points: &[[T; 2]]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Self { min: *first, max: *first };
        for p in points {
            for d in 0..2 {
                b.min[d] = b.min[d].min(p[d]);
                b.max[d] = b.max[d].max(p[d]);
            }
        }
        Some(b)
    }

    pub fn width(&self) -> T {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> T {
        self.max[1] - self.min[1]
    }

    pub fn diagonal(&self) -> T {
        self.width().hypot(self.height())
    }

    /// Grows every side by `margin`.
    pub fn padded(&self, margin: T) -> Self {
        Self { min: [self.min[0] - margin, self.min[1] - margin], max: [self.max[0] + margin, self.max[1] + margin] }
    }

    fn is_degenerate(&self) -> bool {
        !(self.width() > T::zero() && self.height() > T::zero())
            || !self.width().is_finite()
            || !self.height().is_finite()
    }
}

/// Node coordinates, node-index triangles and per-node boundary flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularMesh<T> {
    nodes: Vec<[T; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
}

/// Barycentric interpolation weights, one row per location.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix<T> {
    pub matrix: CsrMatrix<T>,
}

impl<T: Real> ProjectionMatrix<T> {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows
    }

    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        self.matrix.row(i)
    }

    pub fn apply(&self, nodal: &[T]) -> Vec<T> {
        self.matrix.matvec(nodal)
    }
}

const DUPLICATE_TOL: f64 = 1e-9;
const SNAP_FRACTION: f64 = 1e-6;

impl<T: Real> TriangularMesh<T> {
    /// Validates and wraps mesh data.
    pub fn new(nodes: Vec<[T; 2]>, triangles: Vec<[usize; 3]>, boundary: Vec<bool>) -> Result<Self> {
        if boundary.len() != nodes.len() {
            return Err(Error::Mesh(format!("{} boundary flags for {} nodes", boundary.len(), nodes.len())));
        }
        let mesh = Self { nodes, triangles, boundary };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n < 3 || self.triangles.is_empty() {
            return Err(Error::Mesh("mesh needs at least one triangle".into()));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::Mesh(format!(
                    "triangle {t} references node {bad} but the mesh has {n} nodes (index out of range)"
                )));
            }
            if self.signed_area(t) == T::zero() {
                return Err(Error::Mesh(format!("triangle {t} has zero area")));
            }
        }
        for (i, p) in self.nodes.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::Mesh(format!("node {i} has non-finite coordinates")));
            }
        }
        // Duplicate detection by a sweep over x-sorted nodes.
        let tol = T::lit(DUPLICATE_TOL);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.nodes[a][0].partial_cmp(&self.nodes[b][0]).unwrap());
        for (k, &a) in order.iter().enumerate() {
            for &b in &order[k + 1..] {
                if self.nodes[b][0] - self.nodes[a][0] > tol {
                    break;
                }
                if (self.nodes[b][1] - self.nodes[a][1]).abs() <= tol {
                    return Err(Error::Mesh(format!(
                        "nodes {} and {} coincide within {DUPLICATE_TOL}",
                        a.min(b),
                        a.max(b)
                    )));
                }
            }
        }
        // Connectivity through shared triangle vertices.
        let mut uf: Vec<usize> = (0..n).collect();
        fn find(uf: &mut [usize], mut x: usize) -> usize {
            while uf[x] != x {
                uf[x] = uf[uf[x]];
                x = uf[x];
            }
            x
        }
        let mut used = vec![false; n];
        for tri in &self.triangles {
            for &v in tri {
                used[v] = true;
            }
            let r0 = find(&mut uf, tri[0]);
            for &v in &tri[1..] {
                let r = find(&mut uf, v);
                uf[r] = r0;
            }
        }
        if let Some(orphan) = used.iter().position(|u| !u) {
            return Err(Error::Mesh(format!("node {orphan} belongs to no triangle")));
        }
        let root = find(&mut uf, 0);
        for v in 1..n {
            if find(&mut uf, v) != root {
                return Err(Error::Mesh(format!("mesh is disconnected at node {v}")));
            }
        }
        Ok(())
    }

    /// Regular `nx × ny` grid over `bbox`, each cell split along its
    /// lower-left to upper-right diagonal. Node `(i, j)` has index `j·nx + i`.
    pub fn structured(bbox: BoundingBox<T>, nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return invalid(format!("structured mesh needs nx, ny >= 2 (got {nx}, {ny})"));
        }
        if bbox.is_degenerate() {
            return invalid("degenerate bounding box");
        }
        let dx = bbox.width() / T::from_count(nx - 1);
        let dy = bbox.height() / T::from_count(ny - 1);
        let mut nodes = Vec::with_capacity(nx * ny);
        let mut boundary = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let x = if i == nx - 1 { bbox.max[0] } else { bbox.min[0] + dx * T::from_count(i) };
                let y = if j == ny - 1 { bbox.max[1] } else { bbox.min[1] + dy * T::from_count(j) };
                nodes.push([x, y]);
                boundary.push(i == 0 || j == 0 || i == nx - 1 || j == ny - 1);
            }
        }
        let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                let b = a + 1;
                let c = a + nx;
                let d = c + 1;
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        Self::new(nodes, triangles, boundary)
    }

    pub fn nodes(&self) -> &[[T; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Signed (shoelace) area of triangle `t`; positive when counter-clockwise.
    pub fn signed_area(&self, t: usize) -> T {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        T::lit(0.5) * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
    }

    pub fn area(&self) -> T {
        (0..self.triangles.len()).map(|t| self.signed_area(t).abs()).sum()
    }

    pub fn bbox(&self) -> BoundingBox<T> {
        BoundingBox::of_points(&self.nodes).expect("validated mesh has nodes")
    }

    /// Edges used by exactly one triangle.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        let mut edges: Vec<[usize; 2]> = self
            .triangles
            .iter()
            .flat_map(|t| [[t[0], t[1]], [t[1], t[2]], [t[2], t[0]]].map(|[a, b]| [a.min(b), a.max(b)]))
            .collect();
        edges.sort_unstable();
        let mut out = Vec::new();
        let mut k = 0;
        while k < edges.len() {
            let mut m = k + 1;
            while m < edges.len() && edges[m] == edges[k] {
                m += 1;
            }
            if m - k == 1 {
                out.push(edges[k]);
            }
            k = m;
        }
        out
    }

    /// Euclidean distance from `p` to the mesh boundary.
    pub fn distance_to_boundary(&self, p: [T; 2]) -> T {
        self.boundary_edges()
            .iter()
            .map(|&[a, b]| segment_distance(p, self.nodes[a], self.nodes[b]).0)
            .fold(T::infinity(), T::min)
    }

    fn barycentric(&self, t: usize, p: [T; 2]) -> [T; 3] {
        let [a, b, c] = self.triangles[t];
        let (p0, p1, p2) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let l1 = ((p[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p[1] - p0[1])) / det;
        let l2 = ((p1[0] - p0[0]) * (p[1] - p0[1]) - (p[0] - p0[0]) * (p1[1] - p0[1])) / det;
        [T::one() - l1 - l2, l1, l2]
    }

    fn triangle_distance(&self, t: usize, p: [T; 2]) -> (T, [T; 2]) {
        let [a, b, c] = self.triangles[t];
        [[a, b], [b, c], [c, a]]
            .iter()
            .map(|&[i, j]| segment_distance(p, self.nodes[i], self.nodes[j]))
            .fold((T::infinity(), p), |acc, d| if d.0 < acc.0 { d } else { acc })
    }

    /// Barycentric projection of `locations` onto the mesh nodes. Points
    /// outside the mesh but within `1e-6 × bbox diagonal` snap to the nearest
    /// boundary point.
    pub fn projection_matrix(&self, locations: &[[T; 2]]) -> Result<ProjectionMatrix<T>> {
        let snap = T::lit(SNAP_FRACTION) * self.bbox().diagonal();
        let eps = T::lit(1e-12);
        let tri_boxes: Vec<BoundingBox<T>> = self
            .triangles
            .iter()
            .map(|t| BoundingBox::of_points(&t.map(|i| self.nodes[i])).unwrap().padded(snap))
            .collect();
        let mut trip = Triplets::with_capacity(locations.len(), self.nodes.len(), 3 * locations.len());
        let mut outside = Vec::new();
        for (row, &p) in locations.iter().enumerate() {
            let mut found: Option<(usize, [T; 3])> = None;
            let mut nearest: Option<(T, usize, [T; 2])> = None;
            for (t, bb) in tri_boxes.iter().enumerate() {
                if p[0] < bb.min[0] || p[0] > bb.max[0] || p[1] < bb.min[1] || p[1] > bb.max[1] {
                    continue;
                }
                let lam = self.barycentric(t, p);
                if lam.iter().all(|&l| l >= -eps) {
                    found = Some((t, lam));
                    break;
                }
                let (d, q) = self.triangle_distance(t, p);
                if nearest.map_or(true, |n| d < n.0) {
                    nearest = Some((d, t, q));
                }
            }
            let (t, lam) = match (found, nearest) {
                (Some(f), _) => f,
                (None, Some((d, t, q))) if d <= snap => (t, self.barycentric(t, q)),
                _ => {
                    outside.push(format!("#{row} ({}, {})", p[0], p[1]));
                    continue;
                }
            };
            let mut lam = lam.map(|l| l.max(T::zero()).min(T::one()));
            if let Some(k) = lam.iter().position(|&l| l >= T::one() - eps) {
                trip.push(row, self.triangles[t][k], T::one());
                continue;
            }
            for l in lam.iter_mut() {
                if *l < T::lit(1e-14) {
                    *l = T::zero();
                }
            }
            let total: T = lam.iter().copied().sum();
            for k in 0..3 {
                if lam[k] > T::zero() {
                    trip.push(row, self.triangles[t][k], lam[k] / total);
                }
            }
        }
        if !outside.is_empty() {
            return Err(Error::Mesh(format!("{} location(s) outside the mesh: {}", outside.len(), outside.join(", "))));
        }
        Ok(ProjectionMatrix { matrix: trip.to_csr() })
    }

    /// Serializes to the `mesh v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mesh v1 {} {}", self.nodes.len(), self.triangles.len());
        for (p, &b) in self.nodes.iter().zip(&self.boundary) {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], u8::from(b));
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    /// Parses the `mesh v1` text format: a header `mesh v1 <n_nodes>
    /// <n_triangles>`, node lines `x y boundary_flag`, then triangle lines
    /// `i j k` with 0-based indices. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let perr = |line: usize, message: String| Error::Parse { line, message };
        let (hline, header) = lines.next().ok_or_else(|| perr(1, "empty mesh file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "mesh" || h[1] != "v1" {
            return Err(perr(hline, format!("expected `mesh v1 <n_nodes> <n_triangles>`, got `{header}`")));
        }
        let count = |s: &str| s.parse::<usize>().map_err(|e| perr(hline, format!("bad count `{s}`: {e}")));
        let (nn, nt) = (count(h[2])?, count(h[3])?);
        let mut nodes = Vec::with_capacity(nn);
        let mut boundary = Vec::with_capacity(nn);
        for _ in 0..nn {
            let (ln, l) = lines.next().ok_or_else(|| perr(hline, format!("expected {nn} node lines")))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(ln, format!("node line needs `x y boundary_flag`, got `{l}`")));
            }
            let num = |s: &str| T::from_str_radix(s, 10).map_err(|_| perr(ln, format!("bad coordinate `{s}`")));
            nodes.push([num(f[0])?, num(f[1])?]);
            boundary.push(match f[2] {
                "0" => false,
                "1" => true,
                other => return Err(perr(ln, format!("boundary flag must be 0 or 1, got `{other}`"))),
            });
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = lines.next().ok_or_else(|| perr(hline, format!("expected {nt} triangle lines")))?;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(perr(ln, format!("triangle line needs `i j k`, got `{l}`")));
            }
            let mut tri = [0usize; 3];
            for (slot, s) in tri.iter_mut().zip(&f) {
                *slot = s.parse().map_err(|_| perr(ln, format!("bad node index `{s}`")))?;
            }
            triangles.push(tri);
        }
        if let Some((ln, l)) = lines.next() {
            return Err(perr(ln, format!("unexpected trailing content `{l}`")));
        }
        Self::new(nodes, triangles, boundary)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn segment_distance<T: Real>(p: [T; 2], a: [T; 2], b: [T; 2]) -> (T, [T; 2]) {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > T::zero() {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).hypot(p[1] - q[1]), q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoundingBox<f64> {
        BoundingBox::new([0.0, 0.0], [1.0, 1.0])
    }

    #[test]
    fn structured_counts_and_area() {
        let m = TriangularMesh::structured(unit(), 2, 2).unwrap();
        assert_eq!((m.num_nodes(), m.num_triangles()), (4, 2));
        assert!((m.area() - 1.0).abs() < 1e-15);
        let m = TriangularMesh::structured(unit(), 3, 3).unwrap();
        assert_eq!((m.num_nodes(), m.num_triangles()), (9, 8));
        assert_eq!(m.boundary_flags().iter().filter(|b| !**b).count(), 1);
        let wide = TriangularMesh::structured(BoundingBox::new([0.0, 0.0], [2.0, 1.0]), 21, 11).unwrap();
        // Shoelace sum computed independently of `area()`.
        let total: f64 = wide
            .triangles()
            .iter()
            .map(|t| {
                let p: Vec<[f64; 2]> = t.iter().map(|&i| wide.nodes()[i]).collect();
                0.5 * (0..3).map(|k| p[k][0] * p[(k + 1) % 3][1] - p[(k + 1) % 3][0] * p[k][1]).sum::<f64>().abs()
            })
            .sum();
        assert!((total - 2.0).abs() < 1e-10);
        assert_eq!(wide.boundary_edges().len(), 2 * 20 + 2 * 10);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let flat = BoundingBox::new([0.0, 0.0], [1.0, 0.0]);
        assert!(matches!(TriangularMesh::structured(flat, 3, 3), Err(Error::InvalidArgument(_))));
        assert!(TriangularMesh::structured(unit(), 1, 3).is_err());
        let dup = TriangularMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1e-12, 0.0]],
            vec![[0, 1, 2], [3, 1, 2]],
            vec![true; 4],
        );
        assert!(matches!(dup, Err(Error::Mesh(m)) if m.contains("coincide")));
        let zero = TriangularMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![[0, 1, 2]], vec![true; 3]);
        assert!(matches!(zero, Err(Error::Mesh(m)) if m.contains("zero area")));
        let split = TriangularMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0], [6.0, 5.0], [5.0, 6.0]],
            vec![[0, 1, 2], [3, 4, 5]],
            vec![true; 6],
        );
        assert!(matches!(split, Err(Error::Mesh(m)) if m.contains("disconnected")));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "mesh v1 4 2\n0 0 1\n1 0 1\n1 1 1\n0 1 1\n0 1 2\n0 2 999\n";
        let e = TriangularMesh::<f64>::parse(bad).unwrap_err();
        assert!(matches!(&e, Error::Mesh(m) if m.contains("999") && m.contains("out of range")), "{e}");
        let bad = "mesh v1 4 2\n0 0 1\n# comment\n1 zero 1\n";
        match TriangularMesh::<f64>::parse(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn projection_rows() {
        let m = TriangularMesh::structured(unit(), 3, 3).unwrap();
        let a = m.projection_matrix(&[m.nodes()[2], [0.5 + 1e-9 / 3.0, 0.25]]).unwrap();
        assert_eq!(a.row(0), (&[2usize][..], &[1.0][..]));
        let (_, w) = a.row(1);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Centroid of the first triangle.
        let t = m.triangles()[0];
        let c = [0, 1].map(|d| t.iter().map(|&i| m.nodes()[i][d]).sum::<f64>() / 3.0);
        let a = m.projection_matrix(&[c]).unwrap();
        let (_, w) = a.row(0);
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        // Near-boundary snap versus true outside point.
        assert!(m.projection_matrix(&[[1.0 + 1e-8, 0.5]]).is_ok());
        assert!(matches!(m.projection_matrix(&[[1.1, 0.5]]), Err(Error::Mesh(_))));
    }
}
