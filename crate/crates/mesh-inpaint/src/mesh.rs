//! Indexed triangle mesh with adjacency queries, normals, graph Laplacian
//! and basic geometric utilities.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Point3, Vector3};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Indexed triangle mesh. Immutable after construction; adjacency is derived
/// once and kept alongside the arrays.
#[derive(Debug, Clone)]
pub struct Mesh {
    positions: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    /// Per-vertex neighbor lists, sorted ascending.
    neighbors: Vec<Vec<usize>>,
    /// Per-vertex incident-face lists, in face order.
    vertex_faces: Vec<Vec<usize>>,
}

/// Unit face normals, one per face.
#[derive(Debug, Clone)]
pub struct FaceNormals {
    pub normals: Vec<Vector3<f64>>,
}

impl Mesh {
    /// Build a mesh and derive adjacency. Rejects out-of-range and repeated
    /// face indices.
    pub fn new(positions: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let nv = positions.len();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= nv {
                    return Err(Error::Data(format!(
                        "face {fi} references vertex {v} but the mesh has {nv} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Data(format!("face {fi} repeats a vertex index: {f:?}")));
            }
        }
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); nv];
        let mut vertex_faces: Vec<Vec<usize>> = vec![Vec::new(); nv];
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                neighbors[a].push(b);
                neighbors[b].push(a);
                vertex_faces[f[k]].push(fi);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            positions,
            faces,
            neighbors,
            vertex_faces,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn vertex_faces(&self, v: usize) -> &[usize] {
        &self.vertex_faces[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// Same connectivity, new vertex positions.
    pub fn with_positions(&self, positions: Vec<Point3<f64>>) -> Result<Self> {
        if positions.len() != self.positions.len() {
            return Err(Error::Dimension(format!(
                "expected {} positions, got {}",
                self.positions.len(),
                positions.len()
            )));
        }
        Ok(Self {
            positions,
            faces: self.faces.clone(),
            neighbors: self.neighbors.clone(),
            vertex_faces: self.vertex_faces.clone(),
        })
    }

    /// Vertex positions as a |V|x3 matrix.
    pub fn positions_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.positions.len(), 3);
        for (i, p) in self.positions.iter().enumerate() {
            m[(i, 0)] = p.x;
            m[(i, 1)] = p.y;
            m[(i, 2)] = p.z;
        }
        m
    }

    /// Unique undirected edges, each as (min, max), sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.faces.len() * 3 / 2);
        for (v, list) in self.neighbors.iter().enumerate() {
            for &w in list {
                if w > v {
                    edges.push((v, w));
                }
            }
        }
        edges
    }

    /// Map from undirected edge (min, max) to incident face indices.
    pub fn edge_faces(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                map.entry(key).or_default().push(fi);
            }
        }
        map
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        if edges.is_empty() {
            return 0.0;
        }
        let total: f64 = edges
            .iter()
            .map(|&(a, b)| (self.positions[a] - self.positions[b]).norm())
            .sum();
        total / edges.len() as f64
    }

    /// n_j = normalize(cross(x_b - x_a, x_c - x_a)). Errors on zero-area faces.
    pub fn face_normals(&self) -> Result<FaceNormals> {
        let mut normals = Vec::with_capacity(self.faces.len());
        for (fi, f) in self.faces.iter().enumerate() {
            let c = face_cross(&self.positions, f);
            let len = c.norm();
            if len == 0.0 {
                return Err(Error::DegenerateFace {
                    face: fi,
                    message: "zero-area face has no normal".into(),
                });
            }
            normals.push(c / len);
        }
        Ok(FaceNormals { normals })
    }

    /// Uniform graph Laplacian L = I - D^{-1} A. Row i carries 1 on the
    /// diagonal and -1/deg(i) at each neighbor.
    pub fn uniform_laplacian(&self) -> Result<SparseMatrix> {
        let n = self.vertex_count();
        let mut triplets = Vec::with_capacity(n * 7);
        for v in 0..n {
            let deg = self.neighbors[v].len();
            if deg == 0 {
                return Err(Error::Structure(format!("vertex {v} is isolated")));
            }
            triplets.push((v, v, 1.0));
            let w = -1.0 / deg as f64;
            for &u in &self.neighbors[v] {
                triplets.push((v, u, w));
            }
        }
        SparseMatrix::from_triplets(n, n, &triplets)
    }

    /// Length of the axis-aligned bounding-box diagonal.
    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal_of(&self.positions)
    }

    /// All vertices within graph distance `k` of `seed`, seed included.
    /// Returned sorted ascending.
    pub fn k_ring(&self, seed: usize, k: usize) -> Vec<usize> {
        assert!(seed < self.vertex_count(), "k_ring: seed out of range");
        let mut dist = vec![usize::MAX; self.vertex_count()];
        dist[seed] = 0;
        let mut frontier = vec![seed];
        for d in 1..=k {
            let mut next = Vec::new();
            for &v in &frontier {
                for &u in &self.neighbors[v] {
                    if dist[u] == usize::MAX {
                        dist[u] = d;
                        next.push(u);
                    }
                }
            }
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        let mut out: Vec<usize> = (0..self.vertex_count()).filter(|&v| dist[v] <= k).collect();
        out.sort_unstable();
        out
    }

    /// Closed cycles of boundary edges (edges with exactly one incident face).
    /// Empty iff the mesh is watertight. Errors on edges with more than two
    /// incident faces or inconsistent winding.
    pub fn boundary_loops(&self) -> Result<Vec<Vec<usize>>> {
        // directed edges as they appear in faces
        let mut directed: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let e = (f[k], f[(k + 1) % 3]);
                if directed.insert(e, fi).is_some() {
                    return Err(Error::Structure(format!(
                        "edge ({}, {}) traversed twice in the same direction; winding is inconsistent or the mesh is non-manifold",
                        e.0, e.1
                    )));
                }
            }
        }
        for (&(a, b), faces) in self.edge_faces().iter() {
            if faces.len() > 2 {
                return Err(Error::Structure(format!(
                    "edge ({a}, {b}) has {} incident faces",
                    faces.len()
                )));
            }
        }
        // boundary directed edges: present once, with no opposite
        let mut next_vertex: BTreeMap<usize, usize> = BTreeMap::new();
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) {
                if next_vertex.insert(a, b).is_some() {
                    return Err(Error::Structure(format!(
                        "vertex {a} lies on more than one boundary edge pair (non-manifold vertex)"
                    )));
                }
            }
        }
        let mut loops = Vec::new();
        let mut visited: BTreeMap<usize, bool> = BTreeMap::new();
        let starts: Vec<usize> = next_vertex.keys().copied().collect();
        for start in starts {
            if visited.get(&start).copied().unwrap_or(false) {
                continue;
            }
            let mut cycle = Vec::new();
            let mut v = start;
            loop {
                cycle.push(v);
                visited.insert(v, true);
                v = *next_vertex
                    .get(&v)
                    .ok_or_else(|| Error::Structure(format!("boundary walk dead-ends at vertex {v}")))?;
                if v == start {
                    break;
                }
            }
            loops.push(cycle);
        }
        Ok(loops)
    }

    pub fn is_watertight(&self) -> Result<bool> {
        Ok(self.boundary_loops()?.is_empty())
    }

    /// Total surface area.
    pub fn surface_area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| 0.5 * face_cross(&self.positions, f).norm())
            .sum()
    }
}

/// Unnormalized face normal: cross(x_b - x_a, x_c - x_a).
pub fn face_cross(positions: &[Point3<f64>], face: &[usize; 3]) -> Vector3<f64> {
    let a = positions[face[0]];
    let b = positions[face[1]];
    let c = positions[face[2]];
    (b - a).cross(&(c - a))
}

pub fn triangle_area(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

pub fn face_centroid(positions: &[Point3<f64>], face: &[usize; 3]) -> Point3<f64> {
    let a = positions[face[0]];
    let b = positions[face[1]];
    let c = positions[face[2]];
    Point3::from((a.coords + b.coords + c.coords) / 3.0)
}

pub fn bbox_diagonal_of(positions: &[Point3<f64>]) -> f64 {
    if positions.is_empty() {
        return 0.0;
    }
    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (hi - lo).norm()
}

/// Positions matrix back to a point list.
pub fn matrix_to_points(m: &DMatrix<f64>) -> Vec<Point3<f64>> {
    (0..m.nrows())
        .map(|i| Point3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;

    fn icosahedron() -> Mesh {
        fixtures::icosphere(0)
    }

    #[test]
    fn rejects_bad_faces() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        assert!(Mesh::new(pts.clone(), vec![[0, 1, 3]]).is_err());
        assert!(Mesh::new(pts, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn face_normal_unit_right_triangle() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let m = Mesh::new(pts.clone(), vec![[0, 1, 2]]).unwrap();
        let n = m.face_normals().unwrap().normals[0];
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);

        let rev = Mesh::new(pts, vec![[0, 2, 1]]).unwrap();
        let n = rev.face_normals().unwrap().normals[0];
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
    }

    #[test]
    fn face_normal_zero_area_errors() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let m = Mesh::new(pts, vec![[0, 1, 2]]).unwrap();
        match m.face_normals() {
            Err(Error::DegenerateFace { face, .. }) => assert_eq!(face, 0),
            other => panic!("expected degenerate-face error, got {other:?}"),
        }
    }

    #[test]
    fn icosahedron_normals_point_along_centroids() {
        // brute-force oracle: on a centered convex solid every face normal is
        // parallel to its centroid direction
        let m = icosahedron();
        let normals = m.face_normals().unwrap();
        for (f, n) in m.faces().iter().zip(normals.normals.iter()) {
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-9);
            let c = face_centroid(m.positions(), f).coords.normalize();
            assert_relative_eq!(n, &c, epsilon = 1e-12);
        }
    }

    #[test]
    fn laplacian_triangle_graph() {
        // 3 mutually adjacent vertices: deg = 2 everywhere
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let m = Mesh::new(pts, vec![[0, 1, 2]]).unwrap();
        let l = m.uniform_laplacian().unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { -0.5 };
                assert_relative_eq!(l[(i, j)], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn laplacian_annihilates_constants_and_rows_sum_zero() {
        let m = fixtures::icosphere(2);
        let l = m.uniform_laplacian().unwrap();
        let ones = vec![1.0; m.vertex_count()];
        for v in l.mul_vec(&ones) {
            assert!(v.abs() < 1e-12);
        }
        for s in l.row_sums() {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_on_sphere_is_radial() {
        // oracle: (L x)_i = x_i - mean(neighbors of i); on a centered sphere
        // that difference is radially aligned and points outward
        let m = fixtures::icosphere(1);
        let l = m.uniform_laplacian().unwrap();
        let x = m.positions_matrix();
        let lx = l.mul_dense(&x);
        for i in 0..m.vertex_count() {
            let mut mean = Vector3::zeros();
            for &u in m.neighbors(i) {
                mean += m.positions()[u].coords;
            }
            mean /= m.degree(i) as f64;
            let oracle = m.positions()[i].coords - mean;
            let got = Vector3::new(lx[(i, 0)], lx[(i, 1)], lx[(i, 2)]);
            assert_relative_eq!(got, oracle, epsilon = 1e-12);
            // radial: parallel to the position with positive dot on a convex solid
            let cross = got.cross(&m.positions()[i].coords).norm();
            assert!(cross < 1e-9, "Lx not radial at vertex {i}");
            assert!(got.dot(&m.positions()[i].coords) > 0.0);
        }
    }

    #[test]
    fn laplacian_isolated_vertex_errors() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(5.0, 5.0, 5.0),
        ];
        let m = Mesh::new(pts, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(m.uniform_laplacian(), Err(Error::Structure(_))));
    }

    #[test]
    fn bbox_diagonal_cases() {
        let cube = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.0, 0.0, 0.0),
        ];
        let m = Mesh::new(cube, vec![[0, 1, 2]]).unwrap();
        assert_relative_eq!(m.bbox_diagonal(), 3.0f64.sqrt(), epsilon = 1e-15);

        let single = Mesh::new(vec![Point3::new(2.0, 3.0, 4.0)], vec![]).unwrap();
        assert_eq!(single.bbox_diagonal(), 0.0);

        // homogeneity
        let m2 = fixtures::icosphere(1);
        let scaled: Vec<_> = m2.positions().iter().map(|p| Point3::from(p.coords * 2.5)).collect();
        let m3 = m2.with_positions(scaled).unwrap();
        assert_relative_eq!(m3.bbox_diagonal(), 2.5 * m2.bbox_diagonal(), epsilon = 1e-12);
    }

    #[test]
    fn k_ring_small_cases() {
        let m = fixtures::icosphere(2);
        assert_eq!(m.k_ring(5, 0), vec![5]);
        let mut expect: Vec<usize> = m.neighbors(5).to_vec();
        expect.push(5);
        expect.sort_unstable();
        assert_eq!(m.k_ring(5, 1), expect);
    }

    #[test]
    fn k_ring_matches_bfs_oracle() {
        // independent breadth-first oracle
        fn bfs(m: &Mesh, seed: usize, k: usize) -> Vec<usize> {
            use std::collections::VecDeque;
            let mut dist = vec![None; m.vertex_count()];
            dist[seed] = Some(0usize);
            let mut q = VecDeque::from([seed]);
            while let Some(v) = q.pop_front() {
                let d = dist[v].unwrap();
                if d == k {
                    continue;
                }
                for &u in m.neighbors(v) {
                    if dist[u].is_none() {
                        dist[u] = Some(d + 1);
                        q.push_back(u);
                    }
                }
            }
            (0..m.vertex_count()).filter(|&v| dist[v].is_some()).collect()
        }
        let m = fixtures::icosphere(3);
        let got = m.k_ring(17, 4);
        let expect = bfs(&m, 17, 4);
        assert_eq!(got, expect);
    }

    #[test]
    fn boundary_loops_closed_and_open() {
        let m = icosahedron();
        assert!(m.boundary_loops().unwrap().is_empty());
        assert!(m.is_watertight().unwrap());

        // remove one face: a single loop of length 3
        let faces: Vec<[usize; 3]> = m.faces()[1..].to_vec();
        let open = Mesh::new(m.positions().to_vec(), faces).unwrap();
        let loops = open.boundary_loops().unwrap();
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].len(), 3);
        let mut loop_sorted = loops[0].clone();
        loop_sorted.sort_unstable();
        let mut expect = m.faces()[0].to_vec();
        expect.sort_unstable();
        assert_eq!(loop_sorted, expect);
    }

    #[test]
    fn plane_grid_boundary_matches_edge_count_oracle() {
        let m = fixtures::plane_grid(6, 4);
        let loops = m.boundary_loops().unwrap();
        assert_eq!(loops.len(), 1);
        // oracle: count edges with exactly one incident face
        let boundary_edges = m
            .edge_faces()
            .values()
            .filter(|faces| faces.len() == 1)
            .count();
        assert_eq!(loops[0].len(), boundary_edges);
    }

    #[test]
    fn non_manifold_edge_errors() {
        // three faces share edge (0, 1)
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, -1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let m = Mesh::new(pts, vec![[0, 1, 2], [1, 0, 3], [1, 0, 4]]).unwrap();
        assert!(matches!(m.boundary_loops(), Err(Error::Structure(_))));
    }

    #[test]
    fn watertight_iff_no_single_edge() {
        let m = fixtures::cube_grid(3);
        assert!(m.is_watertight().unwrap());
        let all_double = m.edge_faces().values().all(|f| f.len() == 2);
        assert!(all_double);
    }
}
