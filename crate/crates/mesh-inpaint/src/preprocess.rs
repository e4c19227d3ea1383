//! Conversion of a raw mesh with holes into the watertight, uniformly
//! sampled initial mesh, its oversmoothed counterpart, the real-hole mask,
//! and the per-vertex displacement field the network learns to reproduce.

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::mesh::{triangle_area, Mesh};
use crate::remesh;

/// Per-vertex and per-face hole flags. `true` = known region (mask value 1),
/// `false` = hole (mask value 0). A face is known only if all three of its
/// vertices are known, since its normal depends on every corner.
#[derive(Debug, Clone, PartialEq)]
pub struct HoleMask {
    vertex: Vec<bool>,
    face: Vec<bool>,
}

impl HoleMask {
    pub fn all_known(mesh: &Mesh) -> Self {
        Self {
            vertex: vec![true; mesh.vertex_count()],
            face: vec![true; mesh.face_count()],
        }
    }

    /// Derive the face mask from per-vertex flags: a face is a hole face iff
    /// any of its vertices is a hole vertex.
    pub fn from_vertex_flags(mesh: &Mesh, vertex: Vec<bool>) -> Result<Self> {
        if vertex.len() != mesh.vertex_count() {
            return Err(Error::Dimension(format!(
                "mask has {} vertex flags for {} vertices",
                vertex.len(),
                mesh.vertex_count()
            )));
        }
        let face = mesh
            .faces()
            .iter()
            .map(|f| f.iter().all(|&v| vertex[v]))
            .collect();
        Ok(Self { vertex, face })
    }

    pub fn vertex(&self) -> &[bool] {
        &self.vertex
    }

    pub fn face(&self) -> &[bool] {
        &self.face
    }

    pub fn known_vertex_count(&self) -> usize {
        self.vertex.iter().filter(|&&k| k).count()
    }

    pub fn hole_vertex_count(&self) -> usize {
        self.vertex.len() - self.known_vertex_count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.hole_vertex_count() as f64 / self.vertex.len().max(1) as f64
    }

    /// Write the mask as a small binary sidecar.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        use byteorder::{LittleEndian, WriteBytesExt};
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"MIMK")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.vertex.len() as u64)?;
        w.write_all(&self.vertex.iter().map(|&k| k as u8).collect::<Vec<u8>>())?;
        w.write_u64::<LittleEndian>(self.face.len() as u64)?;
        w.write_all(&self.face.iter().map(|&k| k as u8).collect::<Vec<u8>>())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<HoleMask> {
        use byteorder::{LittleEndian, ReadBytesExt};
        use std::io::Read;
        let path = path.as_ref();
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MIMK" {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: 0,
                message: "not a hole-mask sidecar (bad magic)".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: 0,
                message: format!("unsupported mask version {version}"),
            });
        }
        let nv = r.read_u64::<LittleEndian>()? as usize;
        let mut vertex_bytes = vec![0u8; nv];
        r.read_exact(&mut vertex_bytes)?;
        let nf = r.read_u64::<LittleEndian>()? as usize;
        let mut face_bytes = vec![0u8; nf];
        r.read_exact(&mut face_bytes)?;
        Ok(HoleMask {
            vertex: vertex_bytes.into_iter().map(|b| b != 0).collect(),
            face: face_bytes.into_iter().map(|b| b != 0).collect(),
        })
    }

    /// Combine hole regions: a vertex or face is a hole in the result iff it
    /// is a hole in either input.
    pub fn union_holes(&self, other: &HoleMask) -> Result<HoleMask> {
        if self.vertex.len() != other.vertex.len() || self.face.len() != other.face.len() {
            return Err(Error::Dimension("mask sizes differ".into()));
        }
        Ok(HoleMask {
            vertex: self
                .vertex
                .iter()
                .zip(&other.vertex)
                .map(|(&a, &b)| a && b)
                .collect(),
            face: self
                .face
                .iter()
                .zip(&other.face)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

/// Output of [`preprocess`].
#[derive(Debug, Clone)]
pub struct PreprocessResult {
    /// Watertight remeshed mesh the network is supervised against.
    pub init_mesh: Mesh,
    /// Same connectivity as `init_mesh`, positions oversmoothed.
    pub smooth_mesh: Mesh,
    /// Real-hole flags on `init_mesh`.
    pub real_mask: HoleMask,
    /// init position minus smooth position, per vertex.
    pub displacement: Vec<Vector3<f64>>,
}

/// Knobs for [`preprocess`].
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub remesh_iterations: usize,
    /// None = derive from the mean edge length of the non-inserted region.
    pub target_edge_length: Option<f64>,
    pub smooth_steps: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            remesh_iterations: 5,
            target_edge_length: None,
            smooth_steps: 30,
        }
    }
}

/// Close every boundary loop of the largest connected component with a
/// minimum-area triangulation. Returns the closed mesh and a per-face flag
/// marking inserted faces.
///
/// Self-intersections of the inserted patches are not checked; loops are
/// always triangulated.
pub fn fill_holes_watertight(mesh: &Mesh) -> Result<(Mesh, Vec<bool>)> {
    if mesh.face_count() == 0 {
        return Err(Error::Structure("mesh has no faces".into()));
    }
    for (&(a, b), faces) in mesh.edge_faces().iter() {
        if faces.len() > 2 {
            return Err(Error::Structure(format!(
                "edge ({a}, {b}) has {} incident faces; non-manifold input",
                faces.len()
            )));
        }
    }

    // largest connected component by face count (vertex connectivity)
    let component = vertex_components(mesh);
    let ncomp = component.iter().copied().max().map_or(0, |c| c + 1);
    let mut faces_per_component = vec![0usize; ncomp];
    for f in mesh.faces() {
        faces_per_component[component[f[0]]] += 1;
    }
    let keep = faces_per_component
        .iter()
        .enumerate()
        .max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .unwrap();

    // preserve relative vertex order while dropping other components
    let mut keep_vertex = vec![false; mesh.vertex_count()];
    for f in mesh.faces() {
        if component[f[0]] == keep {
            for &v in f {
                keep_vertex[v] = true;
            }
        }
    }
    let mut remap = vec![usize::MAX; mesh.vertex_count()];
    let mut positions = Vec::new();
    for (v, &kept) in keep_vertex.iter().enumerate() {
        if kept {
            remap[v] = positions.len();
            positions.push(mesh.positions()[v]);
        }
    }
    let mut faces = Vec::new();
    for f in mesh.faces() {
        if component[f[0]] == keep {
            faces.push([remap[f[0]], remap[f[1]], remap[f[2]]]);
        }
    }
    let mut inserted = vec![false; faces.len()];

    let base = Mesh::new(positions.clone(), faces.clone())?;
    for cycle in base.boundary_loops()? {
        // the patch must traverse each boundary edge opposite to the walk
        // direction, so triangulate the reversed loop
        let mut polygon = cycle.clone();
        polygon[1..].reverse();
        for tri in triangulate_polygon(&positions, &polygon) {
            faces.push(tri);
            inserted.push(true);
        }
    }
    let closed = Mesh::new(positions, faces)?;
    debug_assert!(closed.boundary_loops()?.is_empty());
    Ok((closed, inserted))
}

fn vertex_components(mesh: &Mesh) -> Vec<usize> {
    let mut component = vec![usize::MAX; mesh.vertex_count()];
    let mut next = 0usize;
    for start in 0..mesh.vertex_count() {
        if component[start] != usize::MAX || mesh.degree(start) == 0 {
            continue;
        }
        let mut stack = vec![start];
        component[start] = next;
        while let Some(v) = stack.pop() {
            for &u in mesh.neighbors(v) {
                if component[u] == usize::MAX {
                    component[u] = next;
                    stack.push(u);
                }
            }
        }
        next += 1;
    }
    // isolated vertices get their own components so indexing stays total
    for c in component.iter_mut() {
        if *c == usize::MAX {
            *c = next;
            next += 1;
        }
    }
    component
}

/// Triangulate a closed 3D polygon given as global vertex indices, minimizing
/// total triangle area. Dynamic programming up to `DP_LIMIT` vertices, greedy
/// minimum-area ear clipping beyond that.
fn triangulate_polygon(positions: &[Point3<f64>], polygon: &[usize]) -> Vec<[usize; 3]> {
    const DP_LIMIT: usize = 256;
    let n = polygon.len();
    assert!(n >= 3);
    if n == 3 {
        return vec![[polygon[0], polygon[1], polygon[2]]];
    }
    if n <= DP_LIMIT {
        triangulate_min_area_dp(positions, polygon)
    } else {
        triangulate_greedy_ear(positions, polygon)
    }
}

fn triangulate_min_area_dp(positions: &[Point3<f64>], polygon: &[usize]) -> Vec<[usize; 3]> {
    let n = polygon.len();
    let p = |i: usize| positions[polygon[i]];
    let mut cost = vec![vec![0.0f64; n]; n];
    let mut choice = vec![vec![0usize; n]; n];
    for span in 2..n {
        for i in 0..n - span {
            let j = i + span;
            let mut best = f64::INFINITY;
            let mut best_k = i + 1;
            for k in i + 1..j {
                let c = cost[i][k] + cost[k][j] + triangle_area(&p(i), &p(k), &p(j));
                if c < best {
                    best = c;
                    best_k = k;
                }
            }
            cost[i][j] = best;
            choice[i][j] = best_k;
        }
    }
    let mut triangles = Vec::with_capacity(n - 2);
    let mut stack = vec![(0usize, n - 1)];
    while let Some((i, j)) = stack.pop() {
        if j - i < 2 {
            continue;
        }
        let k = choice[i][j];
        triangles.push([polygon[i], polygon[k], polygon[j]]);
        stack.push((i, k));
        stack.push((k, j));
    }
    triangles
}

fn triangulate_greedy_ear(positions: &[Point3<f64>], polygon: &[usize]) -> Vec<[usize; 3]> {
    let mut ring: Vec<usize> = polygon.to_vec();
    let mut triangles = Vec::with_capacity(ring.len() - 2);
    while ring.len() > 3 {
        let m = ring.len();
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        for i in 0..m {
            let a = positions[ring[(i + m - 1) % m]];
            let b = positions[ring[i]];
            let c = positions[ring[(i + 1) % m]];
            let area = triangle_area(&a, &b, &c);
            if area < best {
                best = area;
                best_i = i;
            }
        }
        let m = ring.len();
        triangles.push([
            ring[(best_i + m - 1) % m],
            ring[best_i],
            ring[(best_i + 1) % m],
        ]);
        ring.remove(best_i);
    }
    triangles.push([ring[0], ring[1], ring[2]]);
    triangles
}

/// Replace every vertex position with the plain average of its neighbors,
/// `steps` times (uniform Laplacian smoothing with step size 1, no cotangent
/// weights). Connectivity is untouched.
pub fn oversmooth(mesh: &Mesh, steps: usize) -> Mesh {
    let mut positions: Vec<Point3<f64>> = mesh.positions().to_vec();
    for _ in 0..steps {
        let mut next = positions.clone();
        for v in 0..mesh.vertex_count() {
            let neighbors = mesh.neighbors(v);
            if neighbors.is_empty() {
                continue;
            }
            let mut acc = Vector3::zeros();
            for &u in neighbors {
                acc += positions[u].coords;
            }
            next[v] = Point3::from(acc / neighbors.len() as f64);
        }
        positions = next;
    }
    mesh.with_positions(positions).expect("same vertex count")
}

/// Full preprocessing: fill holes, remesh to uniform density, derive the
/// real-hole mask from inserted-face flags, oversmooth, and take the
/// displacement field init - smooth.
pub fn preprocess(mesh: &Mesh, config: &PreprocessConfig) -> Result<PreprocessResult> {
    let (filled, inserted) = fill_holes_watertight(mesh)?;
    let target = match config.target_edge_length {
        Some(t) => {
            if t <= 0.0 {
                return Err(Error::Config("remesh.target_edge_length must be positive".into()));
            }
            t
        }
        None => non_inserted_mean_edge(&filled, &inserted),
    };
    let (init_mesh, inserted) = remesh::isotropic_remesh(&filled, &inserted, target, config.remesh_iterations)?;

    // a vertex lies inside the inserted region iff every incident face is inserted
    let vertex_known: Vec<bool> = (0..init_mesh.vertex_count())
        .map(|v| !init_mesh.vertex_faces(v).iter().all(|&f| inserted[f]))
        .collect();
    let real_mask = HoleMask::from_vertex_flags(&init_mesh, vertex_known)?;

    let smooth_mesh = oversmooth(&init_mesh, config.smooth_steps);
    let displacement: Vec<Vector3<f64>> = init_mesh
        .positions()
        .iter()
        .zip(smooth_mesh.positions())
        .map(|(init, smooth)| init - smooth)
        .collect();

    Ok(PreprocessResult {
        init_mesh,
        smooth_mesh,
        real_mask,
        displacement,
    })
}

fn non_inserted_mean_edge(mesh: &Mesh, inserted: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (&(a, b), faces) in mesh.edge_faces().iter() {
        if faces.iter().all(|&f| !inserted[f]) {
            total += (mesh.positions()[a] - mesh.positions()[b]).norm();
            count += 1;
        }
    }
    if count == 0 {
        mesh.mean_edge_length()
    } else {
        total / count as f64
    }
}
