//! Isotropic remeshing: alternating edge split, edge collapse, valence-
//! improving edge flip, and tangential relaxation with back-projection onto
//! the pre-remesh surface. Operates on closed manifold meshes and propagates
//! per-face inserted flags through every operation.

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::surface::SurfaceBvh;

const SPLIT_FACTOR: f64 = 4.0 / 3.0;
const COLLAPSE_FACTOR: f64 = 0.8;
const MAX_SPLIT_ROUNDS: usize = 10;

struct EditMesh {
    positions: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    alive: Vec<bool>,
    inserted: Vec<bool>,
    /// per-vertex ids of alive incident faces
    vfaces: Vec<Vec<usize>>,
}

impl EditMesh {
    fn from_mesh(mesh: &Mesh, inserted: &[bool]) -> Self {
        let faces: Vec<[usize; 3]> = mesh.faces().to_vec();
        let mut vfaces = vec![Vec::new(); mesh.vertex_count()];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                vfaces[v].push(fi);
            }
        }
        Self {
            positions: mesh.positions().to_vec(),
            alive: vec![true; faces.len()],
            inserted: inserted.to_vec(),
            faces,
            vfaces,
        }
    }

    fn add_vertex(&mut self, p: Point3<f64>) -> usize {
        self.positions.push(p);
        self.vfaces.push(Vec::new());
        self.positions.len() - 1
    }

    fn add_face(&mut self, f: [usize; 3], inserted: bool) -> usize {
        let id = self.faces.len();
        self.faces.push(f);
        self.alive.push(true);
        self.inserted.push(inserted);
        for &v in &f {
            self.vfaces[v].push(id);
        }
        id
    }

    fn kill_face(&mut self, id: usize) {
        if !self.alive[id] {
            return;
        }
        self.alive[id] = false;
        let f = self.faces[id];
        for &v in &f {
            self.vfaces[v].retain(|&x| x != id);
        }
    }

    /// Alive faces containing both u and v.
    fn edge_faces(&self, u: usize, v: usize) -> Vec<usize> {
        self.vfaces[u]
            .iter()
            .copied()
            .filter(|&fi| self.faces[fi].contains(&v))
            .collect()
    }

    /// Sorted neighbor vertices of v, derived from alive faces.
    fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(8);
        for &fi in &self.vfaces[v] {
            for &u in &self.faces[fi] {
                if u != v {
                    out.push(u);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn degree(&self, v: usize) -> usize {
        self.neighbors(v).len()
    }

    /// Unique alive edges, sorted by index pair.
    fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.faces.len() * 3 / 2);
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.alive[fi] {
                continue;
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    fn edge_length(&self, u: usize, v: usize) -> f64 {
        (self.positions[u] - self.positions[v]).norm()
    }

    fn face_normal_raw(&self, f: &[usize; 3]) -> Vector3<f64> {
        let a = self.positions[f[0]];
        let b = self.positions[f[1]];
        let c = self.positions[f[2]];
        (b - a).cross(&(c - a))
    }

    /// Split edge (u, v) at its midpoint. The two incident faces are replaced
    /// by four; children inherit the parent's inserted flag.
    fn split_edge(&mut self, u: usize, v: usize) {
        let incident = self.edge_faces(u, v);
        let mid = Point3::from((self.positions[u].coords + self.positions[v].coords) / 2.0);
        let m = self.add_vertex(mid);
        for fi in incident {
            let f = self.faces[fi];
            let flag = self.inserted[fi];
            // locate the directed traversal of (u, v) within the face
            let k = (0..3)
                .find(|&k| {
                    (f[k] == u && f[(k + 1) % 3] == v) || (f[k] == v && f[(k + 1) % 3] == u)
                })
                .expect("edge face must contain the edge");
            let (x, y, w) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            self.kill_face(fi);
            self.add_face([x, m, w], flag);
            self.add_face([m, y, w], flag);
        }
    }

    /// Collapse u into v at the edge midpoint. Returns false (and leaves the
    /// mesh untouched) if the collapse would break the manifold or fold faces.
    fn collapse_edge(&mut self, u: usize, v: usize) -> bool {
        let incident = self.edge_faces(u, v);
        if incident.len() != 2 {
            return false; // boundary or degenerate configuration
        }
        let nu = self.neighbors(u);
        let nv = self.neighbors(v);
        let common: Vec<usize> = nu.iter().copied().filter(|x| nv.binary_search(x).is_ok()).collect();
        // link condition: exactly the two opposite vertices may be shared
        if common.len() != 2 {
            return false;
        }
        // the opposite vertices each lose one edge; keep their valence > 3
        for &w in &common {
            if self.degree(w) <= 4 {
                return false;
            }
        }
        let mid = Point3::from((self.positions[u].coords + self.positions[v].coords) / 2.0);

        // reject if any surviving face around u or v flips or degenerates
        let affected: Vec<usize> = self.vfaces[u]
            .iter()
            .chain(self.vfaces[v].iter())
            .copied()
            .filter(|fi| !incident.contains(fi))
            .collect();
        for &fi in &affected {
            let before = self.face_normal_raw(&self.faces[fi]);
            let mut f = self.faces[fi];
            for x in f.iter_mut() {
                if *x == u || *x == v {
                    // simulated position of the merged vertex
                    *x = usize::MAX;
                }
            }
            let pos =
                |idx: usize| if idx == usize::MAX { mid } else { self.positions[idx] };
            let after = (pos(f[1]) - pos(f[0])).cross(&(pos(f[2]) - pos(f[0])));
            if after.norm() < 1e-300 || before.dot(&after) <= 0.0 {
                return false;
            }
        }

        let or_flag = incident.iter().any(|&fi| self.inserted[fi]);
        for &fi in &incident.clone() {
            self.kill_face(fi);
        }
        // rewrite u -> v in the remaining faces around u
        let around_u: Vec<usize> = self.vfaces[u].clone();
        for fi in around_u {
            let mut f = self.faces[fi];
            for x in f.iter_mut() {
                if *x == u {
                    *x = v;
                }
            }
            let flag = self.inserted[fi] || or_flag;
            self.kill_face(fi);
            self.add_face(f, flag);
        }
        // spread the removed faces' flags to the remaining ring around v
        if or_flag {
            for &fi in &self.vfaces[v].clone() {
                self.inserted[fi] = true;
            }
        }
        self.positions[v] = mid;
        true
    }

    /// Flip edge (u, v) if it strictly improves the squared deviation of the
    /// four surrounding valences from 6 and keeps the surface consistent.
    fn try_flip(&mut self, u: usize, v: usize) -> bool {
        let incident = self.edge_faces(u, v);
        if incident.len() != 2 {
            return false;
        }
        let (f0, f1) = (incident[0], incident[1]);
        let other = |f: &[usize; 3]| f.iter().copied().find(|&x| x != u && x != v).unwrap();
        let a = other(&self.faces[f0]);
        let b = other(&self.faces[f1]);
        if a == b || self.neighbors(a).binary_search(&b).is_ok() {
            return false;
        }
        let deviation = |deg: i64| (deg - 6) * (deg - 6);
        let du = self.degree(u) as i64;
        let dv = self.degree(v) as i64;
        let da = self.degree(a) as i64;
        let db = self.degree(b) as i64;
        let before = deviation(du) + deviation(dv) + deviation(da) + deviation(db);
        let after = deviation(du - 1) + deviation(dv - 1) + deviation(da + 1) + deviation(db + 1);
        if after >= before {
            return false;
        }
        if du <= 3 || dv <= 3 {
            return false;
        }
        // determine the directed orientation: one face traverses u->v
        let f_uv = if has_directed_edge(&self.faces[f0], u, v) { f0 } else { f1 };
        let f_vu = if f_uv == f0 { f1 } else { f0 };
        if !has_directed_edge(&self.faces[f_uv], u, v) || !has_directed_edge(&self.faces[f_vu], v, u) {
            return false; // inconsistent winding; leave untouched
        }
        let a = other(&self.faces[f_uv]); // apex of the u->v face
        let b = other(&self.faces[f_vu]);
        let n0 = self.face_normal_raw(&self.faces[f_uv]);
        let n1 = self.face_normal_raw(&self.faces[f_vu]);
        let mean = n0 + n1;
        let new0 = [a, u, b];
        let new1 = [b, v, a];
        for f in [&new0, &new1] {
            let n = self.face_normal_raw(f);
            if n.norm() < 1e-300 || n.dot(&mean) <= 0.0 {
                return false;
            }
        }
        let flag = self.inserted[f_uv] || self.inserted[f_vu];
        self.kill_face(f_uv);
        self.kill_face(f_vu);
        self.add_face(new0, flag);
        self.add_face(new1, flag);
        true
    }

    /// Area-weighted vertex normal.
    fn vertex_normal(&self, v: usize) -> Vector3<f64> {
        let mut n = Vector3::zeros();
        for &fi in &self.vfaces[v] {
            n += self.face_normal_raw(&self.faces[fi]);
        }
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    fn compact(self) -> Result<(Mesh, Vec<bool>)> {
        let mut remap = vec![usize::MAX; self.positions.len()];
        let mut positions = Vec::new();
        let mut faces = Vec::new();
        let mut flags = Vec::new();
        for (fi, f) in self.faces.iter().enumerate() {
            if !self.alive[fi] {
                continue;
            }
            let mut nf = [0usize; 3];
            for (k, &v) in f.iter().enumerate() {
                if remap[v] == usize::MAX {
                    remap[v] = positions.len();
                    positions.push(self.positions[v]);
                }
                nf[k] = remap[v];
            }
            faces.push(nf);
            flags.push(self.inserted[fi]);
        }
        Ok((Mesh::new(positions, faces)?, flags))
    }
}

fn has_directed_edge(f: &[usize; 3], from: usize, to: usize) -> bool {
    (0..3).any(|k| f[k] == from && f[(k + 1) % 3] == to)
}

/// Remesh a closed manifold mesh toward uniform edge length `target`.
/// Inserted-face flags are propagated: split children inherit, collapses and
/// flips OR the flags of the faces they merge or remove.
pub fn isotropic_remesh(
    mesh: &Mesh,
    inserted: &[bool],
    target: f64,
    iterations: usize,
) -> Result<(Mesh, Vec<bool>)> {
    if inserted.len() != mesh.face_count() {
        return Err(Error::Dimension(format!(
            "{} inserted flags for {} faces",
            inserted.len(),
            mesh.face_count()
        )));
    }
    if target <= 0.0 {
        return Err(Error::Config("remesh target edge length must be positive".into()));
    }
    if iterations == 0 {
        return Ok((mesh.clone(), inserted.to_vec()));
    }
    if !mesh.is_watertight()? {
        return Err(Error::Structure("isotropic remeshing expects a watertight mesh".into()));
    }

    let reference = SurfaceBvh::build(mesh);
    let mut edit = EditMesh::from_mesh(mesh, inserted);
    let high = SPLIT_FACTOR * target;
    let low = COLLAPSE_FACTOR * target;

    for _ in 0..iterations {
        // split long edges until none remain
        for _ in 0..MAX_SPLIT_ROUNDS {
            let long: Vec<(usize, usize)> = edit
                .edges()
                .into_iter()
                .filter(|&(u, v)| edit.edge_length(u, v) > high)
                .collect();
            if long.is_empty() {
                break;
            }
            for (u, v) in long {
                if !edit.edge_faces(u, v).is_empty() && edit.edge_length(u, v) > high {
                    edit.split_edge(u, v);
                }
            }
        }

        // collapse short edges
        for (u, v) in edit.edges() {
            if edit.edge_faces(u, v).is_empty() {
                continue; // removed by an earlier collapse
            }
            let len = edit.edge_length(u, v);
            if len < low {
                // avoid creating long edges around the merged vertex
                let mid = Point3::from((edit.positions[u].coords + edit.positions[v].coords) / 2.0);
                let too_long = edit
                    .neighbors(u)
                    .iter()
                    .chain(edit.neighbors(v).iter())
                    .any(|&w| w != u && w != v && (edit.positions[w] - mid).norm() > high);
                if !too_long {
                    edit.collapse_edge(u, v);
                }
            }
        }

        // valence-improving flips
        for (u, v) in edit.edges() {
            edit.try_flip(u, v);
        }

        // tangential relaxation with back-projection
        let n = edit.positions.len();
        let mut next = edit.positions.clone();
        for v in 0..n {
            if edit.vfaces[v].is_empty() {
                continue;
            }
            let neighbors = edit.neighbors(v);
            if neighbors.is_empty() {
                continue;
            }
            let mut q = Vector3::zeros();
            for &u in &neighbors {
                q += edit.positions[u].coords;
            }
            let q = Point3::from(q / neighbors.len() as f64);
            let normal = edit.vertex_normal(v);
            let p = edit.positions[v];
            let tangential = q + normal * normal.dot(&(p - q));
            next[v] = reference.closest_point(&tangential).point;
        }
        edit.positions = next;
    }

    edit.compact()
}
