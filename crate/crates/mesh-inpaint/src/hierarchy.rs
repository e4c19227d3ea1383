//! Progressive mesh hierarchy built by quadric-error edge collapses with a
//! valence penalty, plus the average pooling / unpooling defined by the
//! recorded merge sets.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Point3, Vector3};

use crate::error::{Error, Result};
use crate::io::{read_ply_from, write_ply_to};
use crate::mesh::Mesh;

/// Ratio of vertices kept by each simplification level.
pub const LEVEL_RATIO: f64 = 0.6;

/// Penalty added to the collapse cost based on the valence the merged vertex
/// would have: |n - 6| + 1 when n > 3, infinite otherwise.
pub fn valence_penalty(n_val: usize) -> f64 {
    if n_val > 3 {
        (n_val as f64 - 6.0).abs() + 1.0
    } else {
        f64::INFINITY
    }
}

/// 4x4 symmetric quadric, stored as the 10 unique coefficients of
/// [a b c d; b e f g; c f h i; d g i j].
#[derive(Debug, Clone, Copy, Default)]
pub struct QemQuadric {
    data: [f64; 10],
}

impl QemQuadric {
    /// Quadric of the plane with unit normal `n` through point `p`.
    pub fn from_plane(n: &Vector3<f64>, p: &Point3<f64>) -> Self {
        let d = -n.dot(&p.coords);
        let (a, b, c) = (n.x, n.y, n.z);
        Self {
            data: [
                a * a,
                a * b,
                a * c,
                a * d,
                b * b,
                b * c,
                b * d,
                c * c,
                c * d,
                d * d,
            ],
        }
    }

    pub fn add(&mut self, other: &QemQuadric) {
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x += y;
        }
    }

    /// vᵀ Q v for v = (x, y, z, 1).
    pub fn evaluate(&self, p: &Point3<f64>) -> f64 {
        let [a, b, c, d, e, f, g, h, i, j] = self.data;
        let (x, y, z) = (p.x, p.y, p.z);
        a * x * x
            + 2.0 * b * x * y
            + 2.0 * c * x * z
            + 2.0 * d * x
            + e * y * y
            + 2.0 * f * y * z
            + 2.0 * g * y
            + h * z * z
            + 2.0 * i * z
            + j
    }
}

/// How one simplification level maps onto the next coarser one.
#[derive(Debug, Clone)]
pub struct MergeMap {
    /// coarse index -> sorted fine indices merged into it (survivor included);
    /// the sets partition the fine vertex set
    sets: Vec<Vec<usize>>,
    /// fine index -> coarse owner
    owner: Vec<usize>,
    /// coarse index -> the fine index of the surviving vertex
    surviving: Vec<usize>,
}

impl MergeMap {
    pub fn coarse_count(&self) -> usize {
        self.sets.len()
    }

    pub fn fine_count(&self) -> usize {
        self.owner.len()
    }

    pub fn set(&self, coarse: usize) -> &[usize] {
        &self.sets[coarse]
    }

    pub fn owner(&self, fine: usize) -> usize {
        self.owner[fine]
    }

    pub fn surviving_index(&self) -> &[usize] {
        &self.surviving
    }
}

/// R+1 meshes (level 0 = finest) and the merge maps between them.
#[derive(Debug, Clone)]
pub struct ProgressiveHierarchy {
    levels: Vec<Mesh>,
    merge_maps: Vec<MergeMap>,
}

impl ProgressiveHierarchy {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, r: usize) -> &Mesh {
        &self.levels[r]
    }

    pub fn levels(&self) -> &[Mesh] {
        &self.levels
    }

    /// Merge map between level r and level r+1.
    pub fn merge_map(&self, r: usize) -> &MergeMap {
        &self.merge_maps[r]
    }

    /// For each vertex of level `r`, its corresponding vertex at level 0.
    pub fn surviving_to_finest(&self, r: usize) -> Vec<usize> {
        let mut index: Vec<usize> = (0..self.levels[0].vertex_count()).collect();
        for map in &self.merge_maps[..r] {
            index = map.surviving.iter().map(|&s| index[s]).collect();
        }
        index
    }

    /// For each vertex of level 0, the coarse vertex owning it at level `r`.
    pub fn finest_to_level(&self, r: usize) -> Vec<usize> {
        let mut owner: Vec<usize> = (0..self.levels[0].vertex_count()).collect();
        for map in &self.merge_maps[..r] {
            owner = owner.iter().map(|&o| map.owner[o]).collect();
        }
        owner
    }

    /// Restrict per-vertex rows from level 0 to level `r` by reading off the
    /// surviving vertices.
    pub fn restrict_rows(&self, r: usize, fine: &DMatrix<f64>) -> DMatrix<f64> {
        let index = self.surviving_to_finest(r);
        let mut out = DMatrix::zeros(index.len(), fine.ncols());
        for (row, &src) in index.iter().enumerate() {
            for c in 0..fine.ncols() {
                out[(row, c)] = fine[(src, c)];
            }
        }
        out
    }

    /// Restrict a known/hole vertex mask to level `r`: a coarse vertex is
    /// known only if every finest vertex in its cumulative merge set is known.
    pub fn restrict_mask(&self, r: usize, fine_known: &[bool]) -> Vec<bool> {
        let owner = self.finest_to_level(r);
        let mut out = vec![true; self.levels[r].vertex_count()];
        for (fine, &o) in owner.iter().enumerate() {
            if !fine_known[fine] {
                out[o] = false;
            }
        }
        out
    }
}

/// f'_i = mean of the fine rows in C(i).
pub fn pool_avg(fine: &DMatrix<f64>, map: &MergeMap) -> Result<DMatrix<f64>> {
    if fine.nrows() != map.fine_count() {
        return Err(Error::Dimension(format!(
            "pool_avg: {} feature rows for {} fine vertices",
            fine.nrows(),
            map.fine_count()
        )));
    }
    let mut out = DMatrix::zeros(map.coarse_count(), fine.ncols());
    for (i, set) in map.sets.iter().enumerate() {
        let scale = 1.0 / set.len() as f64;
        for &k in set {
            for c in 0..fine.ncols() {
                out[(i, c)] += fine[(k, c)];
            }
        }
        for c in 0..fine.ncols() {
            out[(i, c)] *= scale;
        }
    }
    Ok(out)
}

/// Σ over C(i) of the fine rows; the adjoint of unpooling.
pub fn pool_sum(fine: &DMatrix<f64>, map: &MergeMap) -> Result<DMatrix<f64>> {
    if fine.nrows() != map.fine_count() {
        return Err(Error::Dimension(format!(
            "pool_sum: {} feature rows for {} fine vertices",
            fine.nrows(),
            map.fine_count()
        )));
    }
    let mut out = DMatrix::zeros(map.coarse_count(), fine.ncols());
    for (i, set) in map.sets.iter().enumerate() {
        for &k in set {
            for c in 0..fine.ncols() {
                out[(i, c)] += fine[(k, c)];
            }
        }
    }
    Ok(out)
}

/// Every fine vertex in C(i) receives the coarse row i.
pub fn unpool(coarse: &DMatrix<f64>, map: &MergeMap) -> Result<DMatrix<f64>> {
    if coarse.nrows() != map.coarse_count() {
        return Err(Error::Dimension(format!(
            "unpool: {} feature rows for {} coarse vertices",
            coarse.nrows(),
            map.coarse_count()
        )));
    }
    let mut out = DMatrix::zeros(map.fine_count(), coarse.ncols());
    for (fine, &o) in map.owner.iter().enumerate() {
        for c in 0..coarse.ncols() {
            out[(fine, c)] = coarse[(o, c)];
        }
    }
    Ok(out)
}

/// Backward of [`pool_avg`]: distribute each coarse gradient row to its merge
/// set, scaled by 1/|C(i)|.
pub fn pool_avg_backward(coarse_grad: &DMatrix<f64>, map: &MergeMap) -> Result<DMatrix<f64>> {
    let mut out = unpool(coarse_grad, map)?;
    for (fine, &o) in map.owner.iter().enumerate() {
        let scale = 1.0 / map.sets[o].len() as f64;
        for c in 0..out.ncols() {
            out[(fine, c)] *= scale;
        }
    }
    Ok(out)
}

// ------------------------------------------------------------ simplification

struct SimplifyMesh {
    positions: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vertex_alive: Vec<bool>,
    vfaces: Vec<Vec<usize>>,
    quadrics: Vec<QemQuadric>,
    generation: Vec<u64>,
}

struct HeapEntry {
    cost: f64,
    /// vertex that disappears
    from: usize,
    /// surviving vertex
    into: usize,
    gen_from: u64,
    gen_into: u64,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we pop the cheapest collapse;
        // ties break on the lowest edge index, then direction
        let key = |e: &HeapEntry| (e.from.min(e.into), e.from.max(e.into), e.from);
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| key(other).cmp(&key(self)))
    }
}

impl SimplifyMesh {
    fn new(mesh: &Mesh) -> Result<Self> {
        let normals = mesh.face_normals()?;
        let mut quadrics = vec![QemQuadric::default(); mesh.vertex_count()];
        for (f, n) in mesh.faces().iter().zip(&normals.normals) {
            let q = QemQuadric::from_plane(n, &mesh.positions()[f[0]]);
            for &v in f {
                quadrics[v].add(&q);
            }
        }
        let mut vfaces = vec![Vec::new(); mesh.vertex_count()];
        for (fi, f) in mesh.faces().iter().enumerate() {
            for &v in f {
                vfaces[v].push(fi);
            }
        }
        Ok(Self {
            positions: mesh.positions().to_vec(),
            faces: mesh.faces().to_vec(),
            face_alive: vec![true; mesh.face_count()],
            vertex_alive: vec![true; mesh.vertex_count()],
            vfaces,
            quadrics,
            generation: vec![0; mesh.vertex_count()],
        })
    }

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

    fn edge_faces(&self, u: usize, v: usize) -> Vec<usize> {
        self.vfaces[u]
            .iter()
            .copied()
            .filter(|&fi| self.faces[fi].contains(&v))
            .collect()
    }

    fn face_normal_raw(&self, f: &[usize; 3]) -> Vector3<f64> {
        let a = self.positions[f[0]];
        let b = self.positions[f[1]];
        let c = self.positions[f[2]];
        (b - a).cross(&(c - a))
    }

    /// Cost of collapsing `from` into `into` (subset placement: the survivor
    /// keeps its own position), or None if the collapse is illegal.
    fn collapse_cost(&self, from: usize, into: usize) -> Option<f64> {
        if !self.vertex_alive[from] || !self.vertex_alive[into] {
            return None;
        }
        if self.edge_faces(from, into).len() != 2 {
            return None;
        }
        let nf = self.neighbors(from);
        let ni = self.neighbors(into);
        let common: Vec<usize> = nf.iter().copied().filter(|x| ni.binary_search(x).is_ok()).collect();
        if common.len() != 2 {
            return None; // link condition
        }
        // opposite vertices lose one edge each; keep every valence above 3
        for &w in &common {
            if self.neighbors(w).len() <= 4 {
                return None;
            }
        }
        let merged_valence = nf.len() + ni.len() - 4;
        let penalty = valence_penalty(merged_valence);
        if !penalty.is_finite() {
            return None;
        }
        let mut q = self.quadrics[from];
        q.add(&self.quadrics[into]);
        let qem = q.evaluate(&self.positions[into]).max(0.0);
        Some(qem + penalty)
    }

    /// Geometric guard evaluated right before execution.
    fn collapse_folds_faces(&self, from: usize, into: usize) -> bool {
        let killed = self.edge_faces(from, into);
        for &fi in &self.vfaces[from] {
            if killed.contains(&fi) {
                continue;
            }
            let before = self.face_normal_raw(&self.faces[fi]);
            let mut f = self.faces[fi];
            for x in f.iter_mut() {
                if *x == from {
                    *x = into;
                }
            }
            let after = self.face_normal_raw(&f);
            if after.norm() < 1e-300 || before.dot(&after) <= 0.0 {
                return true;
            }
        }
        false
    }

    /// Execute the collapse; returns the vertices whose costs changed.
    fn collapse(&mut self, from: usize, into: usize) -> Vec<usize> {
        let killed = self.edge_faces(from, into);
        let nf = self.neighbors(from);
        let ni = self.neighbors(into);
        let common: Vec<usize> = nf.iter().copied().filter(|x| ni.binary_search(x).is_ok()).collect();

        for fi in killed {
            self.face_alive[fi] = false;
            let f = self.faces[fi];
            for &v in &f {
                self.vfaces[v].retain(|&x| x != fi);
            }
        }
        let around: Vec<usize> = self.vfaces[from].clone();
        for fi in around {
            for x in self.faces[fi].iter_mut() {
                if *x == from {
                    *x = into;
                }
            }
            self.vfaces[into].push(fi);
        }
        self.vfaces[from].clear();
        self.vertex_alive[from] = false;
        let from_quadric = self.quadrics[from];
        self.quadrics[into].add(&from_quadric);

        // affected: the survivor, the old neighbors of `from`, and the
        // opposite vertices whose degree changed
        let mut touched: Vec<usize> = Vec::new();
        touched.push(into);
        touched.extend(nf.iter().copied().filter(|&v| v != into));
        touched.extend(common.iter().copied());
        touched.sort_unstable();
        touched.dedup();
        touched.retain(|&v| self.vertex_alive[v]);
        for &v in &touched {
            self.generation[v] += 1;
        }
        touched
    }

}

/// Collapse edges in ascending order of QEM cost plus valence penalty until
/// `target` vertices remain. The survivor of each collapse keeps its own
/// position, so every coarse vertex corresponds to a fine vertex.
pub fn qem_simplify(mesh: &Mesh, target: usize) -> Result<(Mesh, MergeMap)> {
    let n = mesh.vertex_count();
    if target > n {
        return Err(Error::Config(format!(
            "simplification target {target} exceeds vertex count {n}"
        )));
    }
    let mut sim = SimplifyMesh::new(mesh)?;
    let mut merged_into: Vec<usize> = (0..n).collect();

    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
    let push_edges_of = |sim: &SimplifyMesh, heap: &mut BinaryHeap<HeapEntry>, v: usize| {
        for u in sim.neighbors(v) {
            for (from, into) in [(v, u), (u, v)] {
                if let Some(cost) = sim.collapse_cost(from, into) {
                    heap.push(HeapEntry {
                        cost,
                        from,
                        into,
                        gen_from: sim.generation[from],
                        gen_into: sim.generation[into],
                    });
                }
            }
        }
    };
    for v in 0..n {
        for u in sim.neighbors(v) {
            if u > v {
                for (from, into) in [(v, u), (u, v)] {
                    if let Some(cost) = sim.collapse_cost(from, into) {
                        heap.push(HeapEntry {
                            cost,
                            from,
                            into,
                            gen_from: sim.generation[from],
                            gen_into: sim.generation[into],
                        });
                    }
                }
            }
        }
    }

    let mut remaining = n;
    while remaining > target {
        let entry = match heap.pop() {
            Some(e) => e,
            None => {
                return Err(Error::Simplify {
                    achieved: remaining,
                    target,
                })
            }
        };
        if !sim.vertex_alive[entry.from]
            || !sim.vertex_alive[entry.into]
            || sim.generation[entry.from] != entry.gen_from
            || sim.generation[entry.into] != entry.gen_into
        {
            continue; // stale
        }
        if sim.collapse_cost(entry.from, entry.into).is_none() {
            continue;
        }
        if sim.collapse_folds_faces(entry.from, entry.into) {
            continue;
        }
        merged_into[entry.from] = entry.into;
        let touched = sim.collapse(entry.from, entry.into);
        remaining -= 1;
        for v in touched {
            push_edges_of(&sim, &mut heap, v);
        }
    }

    // resolve merge roots
    let mut root = merged_into;
    for v in 0..n {
        let mut r = v;
        while root[r] != r {
            r = root[r];
        }
        let mut cur = v;
        while root[cur] != r {
            let next = root[cur];
            root[cur] = r;
            cur = next;
        }
    }

    // coarse ids in ascending fine-index order of the survivors
    let mut coarse_of = vec![usize::MAX; n];
    let mut surviving = Vec::with_capacity(remaining);
    for v in 0..n {
        if sim.vertex_alive[v] {
            coarse_of[v] = surviving.len();
            surviving.push(v);
        }
    }
    let owner: Vec<usize> = (0..n).map(|v| coarse_of[root[v]]).collect();
    let mut sets = vec![Vec::new(); surviving.len()];
    for v in 0..n {
        sets[owner[v]].push(v);
    }

    let positions: Vec<Point3<f64>> = surviving.iter().map(|&v| sim.positions[v]).collect();
    let faces: Vec<[usize; 3]> = sim
        .faces
        .iter()
        .zip(&sim.face_alive)
        .filter(|(_, &alive)| alive)
        .map(|(f, _)| [coarse_of[f[0]], coarse_of[f[1]], coarse_of[f[2]]])
        .collect();
    let coarse = Mesh::new(positions, faces)?;

    Ok((
        coarse,
        MergeMap {
            sets,
            owner,
            surviving,
        },
    ))
}

/// Build R successive levels, each keeping round(0.6 N) vertices of the
/// previous. Intended to run on the oversmoothed mesh.
pub fn build_hierarchy(smooth_mesh: &Mesh, levels: usize) -> Result<ProgressiveHierarchy> {
    let mut hierarchy = ProgressiveHierarchy {
        levels: vec![smooth_mesh.clone()],
        merge_maps: Vec::new(),
    };
    for r in 0..levels {
        let current = &hierarchy.levels[r];
        let target = (LEVEL_RATIO * current.vertex_count() as f64).round() as usize;
        let (coarse, map) = qem_simplify(current, target)?;
        hierarchy.levels.push(coarse);
        hierarchy.merge_maps.push(map);
    }
    Ok(hierarchy)
}

// ------------------------------------------------------------ serialization

const HIERARCHY_MAGIC: &[u8; 4] = b"MIHI";
const HIERARCHY_VERSION: u32 = 1;

impl ProgressiveHierarchy {
    /// Write the hierarchy to a sidecar file: level count, then one PLY block
    /// per level followed by its merge-map index lists.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(HIERARCHY_MAGIC)?;
        w.write_u32::<LittleEndian>(HIERARCHY_VERSION)?;
        w.write_u32::<LittleEndian>(self.levels.len() as u32)?;
        for (r, level) in self.levels.iter().enumerate() {
            let mut block = Vec::new();
            write_ply_to(level, &mut block, None, true)?;
            w.write_u64::<LittleEndian>(block.len() as u64)?;
            w.write_all(&block)?;
            if r + 1 < self.levels.len() {
                let map = &self.merge_maps[r];
                w.write_u64::<LittleEndian>(map.coarse_count() as u64)?;
                for (coarse, set) in map.sets.iter().enumerate() {
                    w.write_u64::<LittleEndian>(map.surviving[coarse] as u64)?;
                    w.write_u64::<LittleEndian>(set.len() as u64)?;
                    for &fine in set {
                        w.write_u64::<LittleEndian>(fine as u64)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != HIERARCHY_MAGIC {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: 0,
                message: "not a hierarchy sidecar (bad magic)".into(),
            });
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != HIERARCHY_VERSION {
            return Err(Error::Format {
                path: path.display().to_string(),
                line: 0,
                message: format!("unsupported hierarchy version {version}"),
            });
        }
        let level_count = r.read_u32::<LittleEndian>()? as usize;
        let mut levels = Vec::with_capacity(level_count);
        let mut merge_maps = Vec::new();
        for idx in 0..level_count {
            let len = r.read_u64::<LittleEndian>()? as usize;
            let mut block = vec![0u8; len];
            r.read_exact(&mut block)?;
            let mut cursor = std::io::Cursor::new(block);
            levels.push(read_ply_from(&mut cursor, &format!("{}#level{idx}", path.display()))?);
            if idx + 1 < level_count {
                let coarse_count = r.read_u64::<LittleEndian>()? as usize;
                let mut sets = Vec::with_capacity(coarse_count);
                let mut surviving = Vec::with_capacity(coarse_count);
                for _ in 0..coarse_count {
                    surviving.push(r.read_u64::<LittleEndian>()? as usize);
                    let set_len = r.read_u64::<LittleEndian>()? as usize;
                    let mut set = Vec::with_capacity(set_len);
                    for _ in 0..set_len {
                        set.push(r.read_u64::<LittleEndian>()? as usize);
                    }
                    sets.push(set);
                }
                let fine_count: usize = sets.iter().map(|s| s.len()).sum();
                let mut owner = vec![usize::MAX; fine_count];
                for (coarse, set) in sets.iter().enumerate() {
                    for &fine in set {
                        if fine >= fine_count || owner[fine] != usize::MAX {
                            return Err(Error::Format {
                                path: path.display().to_string(),
                                line: 0,
                                message: "merge sets do not partition the fine vertex set".into(),
                            });
                        }
                        owner[fine] = coarse;
                    }
                }
                merge_maps.push(MergeMap {
                    sets,
                    owner,
                    surviving,
                });
            }
        }
        Ok(Self { levels, merge_maps })
    }
}
