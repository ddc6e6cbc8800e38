//! Triangulated meshes over the study region and their finite-element
//! matrices.
//!
//! A mesh is built from pixel locations either directly (every location a
//! node) or from a coarser lattice hitting a node-budget ratio, optionally
//! surrounded by rings of extension nodes that push the artificial boundary
//! away from the data. The piecewise-linear basis on the triangulation
//! yields the lumped mass diagonal `C` and stiffness matrix `G1`; the
//! squared-operator matrix `G2 = G1 C^{-1} G1` lives on the two-hop
//! neighbor pattern shared by every precision matrix downstream.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::{Pattern, SymSparse};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub lon: f64,
    pub lat: f64,
}

impl Point2 {
    pub fn new(lon: f64, lat: f64) -> Point2 {
        Point2 { lon, lat }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        ((self.lon - other.lon).powi(2) + (self.lat - other.lat).powi(2)).sqrt()
    }
}

/// Largest pairwise distance among locations.
pub fn domain_diameter(locations: &[Point2]) -> f64 {
    let mut d = 0.0f64;
    for i in 0..locations.len() {
        for j in (i + 1)..locations.len() {
            d = d.max(locations[i].dist(&locations[j]));
        }
    }
    d
}

#[derive(Debug, Clone)]
pub struct MeshConfig {
    /// Offset of the extension rings as a fraction of the domain diameter;
    /// 0 disables the rings.
    pub extension_margin: f64,
    /// Target mesh-node count as a fraction of the number of locations.
    /// `None` uses the locations themselves as nodes.
    pub node_target_ratio: Option<f64>,
    /// Hard cap on total node count.
    pub max_nodes: usize,
    /// Locations closer than this are treated as duplicates.
    pub dedup_tol: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            extension_margin: 0.1,
            node_target_ratio: Some(0.3),
            max_nodes: 20_000,
            dedup_tol: 1e-9,
        }
    }
}

impl MeshConfig {
    /// Locations as nodes, no extension: the configuration used by small
    /// exact-geometry tests.
    pub fn bare() -> MeshConfig {
        MeshConfig {
            extension_margin: 0.0,
            node_target_ratio: None,
            ..MeshConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TriMesh {
    nodes: Vec<Point2>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
}

fn signed_area(a: &Point2, b: &Point2, c: &Point2) -> f64 {
    0.5 * ((b.lon - a.lon) * (c.lat - a.lat) - (c.lon - a.lon) * (b.lat - a.lat))
}

impl TriMesh {
    /// Validate raw parts: positive triangle areas, indices in range.
    /// Boundary nodes are endpoints of edges used by exactly one triangle.
    pub fn from_parts(nodes: Vec<Point2>, triangles: Vec<[usize; 3]>) -> Result<TriMesh> {
        if triangles.is_empty() {
            return Err(Error::DegenerateGeometry(
                "mesh has no triangles".to_string(),
            ));
        }
        let mut tris = Vec::with_capacity(triangles.len());
        for t in &triangles {
            for &v in t {
                if v >= nodes.len() {
                    return Err(Error::Dimension(format!(
                        "triangle vertex {v} out of range ({} nodes)",
                        nodes.len()
                    )));
                }
            }
            let area = signed_area(&nodes[t[0]], &nodes[t[1]], &nodes[t[2]]);
            if area.abs() < 1e-14 {
                return Err(Error::DegenerateGeometry(format!(
                    "triangle {t:?} has zero area"
                )));
            }
            // Canonical counter-clockwise winding.
            if area > 0.0 {
                tris.push(*t);
            } else {
                tris.push([t[0], t[2], t[1]]);
            }
        }
        let mut edge_use: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &tris {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                *edge_use.entry(key).or_insert(0) += 1;
            }
        }
        let mut boundary = vec![false; nodes.len()];
        for (&(a, b), &count) in &edge_use {
            if count == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
        }
        Ok(TriMesh { nodes, triangles: tris, boundary })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Point2] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    /// Containing triangle and barycentric weights, if inside the hull.
    /// Weights are clamped nonnegative and renormalized at the 1e-9 level.
    pub fn locate(&self, p: &Point2) -> Option<(usize, [f64; 3])> {
        for (idx, t) in self.triangles.iter().enumerate() {
            if let Some(w) = self.barycentric(t, p) {
                return Some((idx, w));
            }
        }
        None
    }

    fn barycentric(&self, t: &[usize; 3], p: &Point2) -> Option<[f64; 3]> {
        let (a, b, c) = (&self.nodes[t[0]], &self.nodes[t[1]], &self.nodes[t[2]]);
        let area = signed_area(a, b, c);
        let w0 = signed_area(p, b, c) / area;
        let w1 = signed_area(a, p, c) / area;
        let w2 = signed_area(a, b, p) / area;
        let tol = -1e-9;
        if w0 >= tol && w1 >= tol && w2 >= tol {
            let mut w = [w0.max(0.0), w1.max(0.0), w2.max(0.0)];
            let s: f64 = w.iter().sum();
            for v in &mut w {
                *v /= s;
            }
            Some(w)
        } else {
            None
        }
    }
}

fn dedup_points(points: &[Point2], tol: f64) -> Vec<Point2> {
    let mut kept: Vec<Point2> = Vec::with_capacity(points.len());
    let mut dropped = 0usize;
    for p in points {
        if kept.iter().any(|q| q.dist(p) <= tol) {
            dropped += 1;
        } else {
            kept.push(*p);
        }
    }
    if dropped > 0 {
        log::warn!("deduplicated {dropped} coincident mesh input points");
    }
    kept
}

fn bbox(points: &[Point2]) -> (Point2, Point2) {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.lon = lo.lon.min(p.lon);
        lo.lat = lo.lat.min(p.lat);
        hi.lon = hi.lon.max(p.lon);
        hi.lat = hi.lat.max(p.lat);
    }
    (lo, hi)
}

/// Points along the perimeter of the rectangle `[lo, hi]` inflated by
/// `offset`, spaced roughly `spacing` apart.
fn ring_points(lo: Point2, hi: Point2, offset: f64, spacing: f64) -> Vec<Point2> {
    let (x0, y0) = (lo.lon - offset, lo.lat - offset);
    let (x1, y1) = (hi.lon + offset, hi.lat + offset);
    let nx = (((x1 - x0) / spacing).ceil() as usize).max(1);
    let ny = (((y1 - y0) / spacing).ceil() as usize).max(1);
    let mut pts = Vec::new();
    for k in 0..nx {
        let x = x0 + (x1 - x0) * k as f64 / nx as f64;
        pts.push(Point2::new(x, y0));
        pts.push(Point2::new(x1 - (x - x0), y1));
    }
    for k in 0..ny {
        let y = y0 + (y1 - y0) * k as f64 / ny as f64;
        pts.push(Point2::new(x1, y));
        pts.push(Point2::new(x0, y1 - (y - y0)));
    }
    pts
}

/// Build a mesh whose hull contains every location.
pub fn build_mesh(locations: &[Point2], config: &MeshConfig) -> Result<TriMesh> {
    if locations.is_empty() {
        return Err(Error::DegenerateGeometry("no locations given".to_string()));
    }
    let (lo, hi) = bbox(locations);
    let diameter = lo.dist(&hi);

    let mut nodes = match config.node_target_ratio {
        None => dedup_points(locations, config.dedup_tol),
        Some(ratio) => {
            if !(ratio > 0.0) {
                return Err(Error::Config(format!("node_target_ratio {ratio} must be positive")));
            }
            let (w, h) = (hi.lon - lo.lon, hi.lat - lo.lat);
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::DegenerateGeometry(
                    "node-budget lattice requires two-dimensional extent".to_string(),
                ));
            }
            let target = ((ratio * locations.len() as f64).round() as usize).max(9);
            let ny = (((target as f64 * h / w).sqrt()).round() as usize).clamp(3, target);
            let nx = (target / ny).max(3);
            let mut pts = Vec::with_capacity(nx * ny);
            for iy in 0..ny {
                for ix in 0..nx {
                    pts.push(Point2::new(
                        lo.lon + w * ix as f64 / (nx - 1) as f64,
                        lo.lat + h * iy as f64 / (ny - 1) as f64,
                    ));
                }
            }
            pts
        }
    };

    if config.extension_margin > 0.0 {
        // Graded rings: first at the interior spacing, then coarsening
        // outward, so triangle sizes change gradually toward the far
        // boundary and edge-of-data variance stays controlled.
        let offset_max = config.extension_margin * diameter;
        let s0 = {
            let (w, h) = ((hi.lon - lo.lon).max(1e-12), (hi.lat - lo.lat).max(1e-12));
            (w * h / nodes.len() as f64).sqrt().max(1e-12)
        };
        let mut off = s0.min(offset_max);
        let mut sp = s0;
        loop {
            nodes.extend(ring_points(lo, hi, off, sp));
            if off >= offset_max {
                break;
            }
            sp *= 1.6;
            off = (off + 1.5 * sp).min(offset_max);
        }
        nodes = dedup_points(&nodes, config.dedup_tol);
    }

    if nodes.len() > config.max_nodes {
        return Err(Error::SizeCap(format!(
            "{} mesh nodes exceed cap {}",
            nodes.len(),
            config.max_nodes
        )));
    }

    let dpoints: Vec<delaunator::Point> = nodes
        .iter()
        .map(|p| delaunator::Point { x: p.lon, y: p.lat })
        .collect();
    let tri = delaunator::triangulate(&dpoints);
    if tri.triangles.is_empty() {
        return Err(Error::DegenerateGeometry(
            "locations are collinear or coincident; triangulation is empty".to_string(),
        ));
    }
    let triangles: Vec<[usize; 3]> = tri
        .triangles
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mesh = TriMesh::from_parts(nodes, triangles)?;
    for p in locations {
        if mesh.locate(p).is_none() {
            return Err(Error::OutOfDomain { lon: p.lon, lat: p.lat });
        }
    }
    Ok(mesh)
}

/// Lumped mass diagonal, stiffness matrix, and `G2 = G1 C^{-1} G1`, all on
/// the shared two-hop pattern.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    pattern: Arc<Pattern>,
    pub c_lumped: Vec<f64>,
    pub g1: SymSparse,
    pub g2: SymSparse,
    one_hop: Pattern,
}

impl FemMatrices {
    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn one_hop(&self) -> &Pattern {
        &self.one_hop
    }

    pub fn n(&self) -> usize {
        self.c_lumped.len()
    }
}

pub fn assemble_fem(mesh: &TriMesh) -> Result<FemMatrices> {
    let n = mesh.n_nodes();
    let one_hop = Pattern::from_edges(
        n,
        mesh.triangles()
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]),
    );
    let pattern = Arc::new(one_hop.two_hop());

    let mut c_lumped = vec![0.0; n];
    let mut g1 = SymSparse::zeros(pattern.clone());
    for t in mesh.triangles() {
        let (pa, pb, pc) = (&mesh.nodes()[t[0]], &mesh.nodes()[t[1]], &mesh.nodes()[t[2]]);
        let area = signed_area(pa, pb, pc);
        if area <= 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "triangle {t:?} has non-positive area {area}"
            )));
        }
        let b = [pb.lat - pc.lat, pc.lat - pa.lat, pa.lat - pb.lat];
        let c = [pc.lon - pb.lon, pa.lon - pc.lon, pb.lon - pa.lon];
        for i in 0..3 {
            c_lumped[t[i]] += area / 3.0;
            for j in i..3 {
                let v = (b[i] * b[j] + c[i] * c[j]) / (4.0 * area);
                g1.add_sym(t[i], t[j], v);
            }
        }
    }

    let mut g2 = SymSparse::zeros(pattern.clone());
    for k in 0..n {
        let nbrs = one_hop.column(k);
        let inv_ck = 1.0 / c_lumped[k];
        for &a in nbrs {
            let gak = g1.get(a, k);
            if gak == 0.0 {
                continue;
            }
            for &b in nbrs {
                let idx = pattern
                    .index_of(a, b)
                    .expect("two-hop pattern misses a product entry");
                g2.values_mut()[idx] += gak * g1.get(k, b) * inv_ck;
            }
        }
    }

    Ok(FemMatrices { pattern, c_lumped, g1, g2, one_hop })
}

/// Sparse barycentric interpolation from mesh nodes to target locations.
/// Each row has at most three weights, nonnegative and summing to one.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    n_nodes: usize,
    rows: Vec<[(usize, f64); 3]>,
}

impl ProjectionMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn row(&self, i: usize) -> &[(usize, f64); 3] {
        &self.rows[i]
    }

    /// y = A w (nodes to locations).
    pub fn mul_vec(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.n_nodes);
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(k, a)| a * w[k]).sum())
            .collect()
    }

    pub fn row_dot(&self, i: usize, w: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(k, a)| a * w[k]).sum()
    }

    /// y = A' v (locations to nodes).
    pub fn mul_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows.len());
        let mut out = vec![0.0; self.n_nodes];
        for (r, &vi) in self.rows.iter().zip(v) {
            for &(k, a) in r {
                out[k] += a * vi;
            }
        }
        out
    }

    /// A' A assembled on `pattern` (which must contain the triangle-mate
    /// adjacency of the mesh).
    pub fn normal_matrix(&self, pattern: &Arc<Pattern>) -> SymSparse {
        let mut m = SymSparse::zeros(pattern.clone());
        for r in &self.rows {
            for &(ka, wa) in r {
                if wa == 0.0 {
                    continue;
                }
                for &(kb, wb) in r {
                    if wb == 0.0 {
                        continue;
                    }
                    let idx = pattern
                        .index_of(ka, kb)
                        .expect("projection pair outside pattern");
                    m.values_mut()[idx] += wa * wb;
                }
            }
        }
        m
    }
}

/// Project target locations onto the mesh basis. Errors with the offending
/// coordinates if any target falls outside the hull.
pub fn project(mesh: &TriMesh, targets: &[Point2]) -> Result<ProjectionMatrix> {
    let mut rows = Vec::with_capacity(targets.len());
    for p in targets {
        let (t_idx, w) = mesh
            .locate(p)
            .ok_or(Error::OutOfDomain { lon: p.lon, lat: p.lat })?;
        let t = mesh.triangles()[t_idx];
        rows.push([(t[0], w[0]), (t[1], w[1]), (t[2], w[2])]);
    }
    Ok(ProjectionMatrix { n_nodes: mesh.n_nodes(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_meshes() {
        let tri = build_mesh(
            &[Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)],
            &MeshConfig::bare(),
        )
        .unwrap();
        assert_eq!(tri.n_nodes(), 3);
        assert_eq!(tri.triangles().len(), 1);

        let square = build_mesh(
            &[
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 0.0),
                Point2::new(1.0, 1.0),
                Point2::new(0.0, 1.0),
            ],
            &MeshConfig::bare(),
        )
        .unwrap();
        assert_eq!(square.n_nodes(), 4);
        assert_eq!(square.triangles().len(), 2);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<Point2> = (0..5).map(|i| Point2::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(
            build_mesh(&pts, &MeshConfig::bare()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn duplicates_are_merged() {
        let mut pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ];
        pts.push(Point2::new(0.0, 0.0));
        let mesh = build_mesh(&pts, &MeshConfig::bare()).unwrap();
        assert_eq!(mesh.n_nodes(), 3);
    }

    #[test]
    fn reference_triangle_fem_matrices() {
        let mesh = TriMesh::from_parts(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let fem = assemble_fem(&mesh).unwrap();
        for c in &fem.c_lumped {
            assert!((c - 1.0 / 6.0).abs() <= 1e-12);
        }
        let want = [
            [1.0, -0.5, -0.5],
            [-0.5, 0.5, 0.0],
            [-0.5, 0.0, 0.5],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!(
                    (fem.g1.get(i, j) - want[i][j]).abs() <= 1e-12,
                    "G1[{i},{j}]"
                );
            }
        }
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_psd() {
        let pts: Vec<Point2> = (0..25)
            .map(|k| Point2::new((k % 5) as f64 + 0.01 * (k as f64).sin(), (k / 5) as f64))
            .collect();
        let mesh = build_mesh(&pts, &MeshConfig::bare()).unwrap();
        let fem = assemble_fem(&mesh).unwrap();
        let n = mesh.n_nodes();
        let ones = vec![1.0; n];
        let mut out = vec![0.0; n];
        fem.g1.matvec(&ones, &mut out);
        for v in out {
            assert!(v.abs() < 1e-10, "G1 row sum {v}");
        }
        let eig = fem.g1.to_dense().symmetric_eigen();
        assert!(eig.eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn empty_circumcircle_property() {
        let mut pts = Vec::new();
        let mut s = 123u64;
        for _ in 0..40 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let x = (s >> 11) as f64 / (1u64 << 53) as f64;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let y = (s >> 11) as f64 / (1u64 << 53) as f64;
            pts.push(Point2::new(x * 10.0, y * 10.0));
        }
        let mesh = build_mesh(&pts, &MeshConfig::bare()).unwrap();
        for t in mesh.triangles() {
            let (a, b, c) = (
                &mesh.nodes()[t[0]],
                &mesh.nodes()[t[1]],
                &mesh.nodes()[t[2]],
            );
            // Circumcenter via perpendicular bisectors.
            let d = 2.0 * ((a.lon - c.lon) * (b.lat - c.lat) - (b.lon - c.lon) * (a.lat - c.lat));
            let a2 = a.lon * a.lon + a.lat * a.lat - c.lon * c.lon - c.lat * c.lat;
            let b2 = b.lon * b.lon + b.lat * b.lat - c.lon * c.lon - c.lat * c.lat;
            let ux = (a2 * (b.lat - c.lat) - b2 * (a.lat - c.lat)) / d;
            let uy = (b2 * (a.lon - c.lon) - a2 * (b.lon - c.lon)) / d;
            let center = Point2::new(ux, uy);
            let r = center.dist(a);
            for (k, p) in mesh.nodes().iter().enumerate() {
                if t.contains(&k) {
                    continue;
                }
                assert!(
                    center.dist(p) >= r - 1e-7,
                    "node {k} inside circumcircle of {t:?}"
                );
            }
        }
    }

    #[test]
    fn projection_rows_are_barycentric() {
        let pts: Vec<Point2> = (0..16)
            .map(|k| Point2::new((k % 4) as f64, (k / 4) as f64))
            .collect();
        let mesh = build_mesh(&pts, &MeshConfig::bare()).unwrap();
        // A node location projects with weight 1 on that node.
        let a = project(&mesh, &[pts[5]]).unwrap();
        let w: f64 = a
            .row(0)
            .iter()
            .map(|&(k, v)| if k == 5 { v } else { 0.0 })
            .sum();
        assert!((w - 1.0).abs() < 1e-9);
        // Interior points get convex weights.
        let targets = vec![Point2::new(0.3, 0.7), Point2::new(2.5, 1.5), Point2::new(1.2, 2.9)];
        let a = project(&mesh, &targets).unwrap();
        for i in 0..targets.len() {
            let s: f64 = a.row(i).iter().map(|&(_, v)| v).sum();
            assert!((s - 1.0).abs() <= 1e-9);
            assert!(a.row(i).iter().all(|&(_, v)| v >= 0.0));
        }
        // Outside the hull is an error naming the point.
        match project(&mesh, &[Point2::new(-1.0, 5.0)]) {
            Err(Error::OutOfDomain { lon, lat }) => {
                assert_eq!((lon, lat), (-1.0, 5.0));
            }
            other => panic!("expected out-of-domain, got {other:?}"),
        }
    }

    #[test]
    fn node_budget_lattice_covers_data() {
        let pts: Vec<Point2> = (0..400)
            .map(|k| Point2::new(0.5 * (k % 20) as f64, 0.5 * (k / 20) as f64))
            .collect();
        let cfg = MeshConfig { extension_margin: 0.1, node_target_ratio: Some(0.3), ..MeshConfig::default() };
        let mesh = build_mesh(&pts, &cfg).unwrap();
        assert!(mesh.n_nodes() < 400);
        let a = project(&mesh, &pts);
        assert!(a.is_ok());
    }

    #[test]
    fn permutation_equivariance_of_fem_assembly() {
        let nodes = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.1),
            Point2::new(0.4, 0.9),
            Point2::new(1.3, 1.1),
        ];
        let tris = vec![[0, 1, 2], [1, 3, 2]];
        let fem = assemble_fem(&TriMesh::from_parts(nodes.clone(), tris).unwrap()).unwrap();
        // Renumber with permutation sigma: new index = sigma[old].
        let sigma = [2usize, 0, 3, 1];
        let mut pnodes = vec![Point2::new(0.0, 0.0); 4];
        for (old, &new) in sigma.iter().enumerate() {
            pnodes[new] = nodes[old];
        }
        let ptris = vec![[sigma[0], sigma[1], sigma[2]], [sigma[1], sigma[3], sigma[2]]];
        let pfem = assemble_fem(&TriMesh::from_parts(pnodes, ptris).unwrap()).unwrap();
        for i in 0..4 {
            assert!((fem.c_lumped[i] - pfem.c_lumped[sigma[i]]).abs() < 1e-14);
            for j in 0..4 {
                assert!((fem.g1.get(i, j) - pfem.g1.get(sigma[i], sigma[j])).abs() < 1e-14);
                assert!((fem.g2.get(i, j) - pfem.g2.get(sigma[i], sigma[j])).abs() < 1e-12);
            }
        }
    }
}
