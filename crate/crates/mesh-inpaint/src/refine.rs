//! Post-network least-squares refinement: keep the network's predictions in
//! hole regions, snap everything else back to the initial mesh, and smooth
//! the seam by solving (LᵀL + μ diag(q)) X = LᵀL X_mix + μ (Q ⊙ X_init)
//! per coordinate with preconditioned conjugate gradients.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::losses::MeshType;
use crate::mesh::Mesh;
use crate::sparse::SparseMatrix;

/// Row i is x_init^i where the vertex is known, x_cmp^i where it is a hole.
pub fn build_xmix(
    x_init: &DMatrix<f64>,
    x_cmp: &DMatrix<f64>,
    vertex_mask: &[bool],
) -> Result<DMatrix<f64>> {
    if x_init.shape() != x_cmp.shape() || x_init.nrows() != vertex_mask.len() {
        return Err(Error::Dimension(format!(
            "build_xmix: {:?} vs {:?} with {} mask entries",
            x_init.shape(),
            x_cmp.shape(),
            vertex_mask.len()
        )));
    }
    let mut out = x_cmp.clone();
    for (i, &known) in vertex_mask.iter().enumerate() {
        if known {
            for c in 0..x_init.ncols() {
                out[(i, c)] = x_init[(i, c)];
            }
        }
    }
    Ok(out)
}

/// H̄: hole vertices together with their 1-ring neighbors. Returns a flag per
/// vertex, true when the vertex belongs to H̄.
pub fn build_hbar(mesh: &Mesh, vertex_mask: &[bool]) -> Vec<bool> {
    let mut hbar = vec![false; mesh.vertex_count()];
    for (i, &known) in vertex_mask.iter().enumerate() {
        if !known {
            hbar[i] = true;
            for &j in mesh.neighbors(i) {
                hbar[j] = true;
            }
        }
    }
    hbar
}

#[derive(Debug, Clone)]
pub struct RefineOptions {
    pub mu: f64,
    /// Relative-residual target for the conjugate-gradient solver.
    pub tolerance: f64,
    /// Iteration cap; defaults to 10 |V| when None.
    pub max_iterations: Option<usize>,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            mu: 1.0,
            tolerance: 1e-10,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub positions: DMatrix<f64>,
    /// Largest relative residual among the three coordinate solves, checked
    /// by an explicit matrix-vector product.
    pub residual: f64,
    pub iterations: usize,
}

/// Default anchoring weight per mesh type.
pub fn default_mu(mesh_type: MeshType) -> f64 {
    match mesh_type {
        MeshType::Cad => 0.1,
        MeshType::NonCad | MeshType::RealScan => 1.0,
    }
}

/// Per-mesh anchoring weights for the meshes we ship settings for; falls back
/// to [`default_mu`] for anything unrecognized.
pub fn mu_for_known_mesh(name: &str) -> Option<f64> {
    let key = name.to_ascii_lowercase();
    let table: &[(&str, f64)] = &[
        ("ankylosaurus", 1.0),
        ("bimba", 1.0),
        ("bust", 1.0),
        ("igea", 1.0),
        ("cg", 0.1),
        ("fandisk", 0.01),
        ("part-lp", 0.01),
        ("sharp-sphere", 0.1),
        ("twelve", 0.1),
        ("bunny", 1.0),
        ("dragon", 1.0),
        ("fertility", 1.0),
        ("olivier", 1.0),
        ("raccoon", 1.0),
        ("bear", 1.0),
        ("lion-dog", 1.0),
    ];
    table.iter().find(|(k, _)| *k == key).map(|&(_, mu)| mu)
}

struct NormalOperator<'a> {
    l: &'a SparseMatrix,
    lt: SparseMatrix,
    mu: f64,
    q: &'a [f64],
}

impl NormalOperator<'_> {
    /// y = Lᵀ(L x) + μ q ⊙ x
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let lx = self.l.mul_vec(x);
        let mut y = self.lt.mul_vec(&lx);
        for i in 0..x.len() {
            y[i] += self.mu * self.q[i] * x[i];
        }
        y
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = self.l.column_squared_norms();
        for i in 0..d.len() {
            d[i] += self.mu * self.q[i];
            if d[i] <= 0.0 {
                d[i] = 1.0;
            }
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Diagonally preconditioned conjugate gradients from a warm start.
fn solve_pcg(
    op: &NormalOperator,
    b: &[f64],
    x0: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> (Vec<f64>, usize) {
    let n = b.len();
    let diag = op.diagonal();
    let mut x = x0.to_vec();
    let ax = op.apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let b_norm = norm(b).max(f64::MIN_POSITIVE);
    if norm(&r) / b_norm <= tolerance {
        return (x, 0);
    }
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for iter in 1..=max_iterations {
        let ap = op.apply(&p);
        let alpha = rz / dot(&p, &ap).max(f64::MIN_POSITIVE);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) / b_norm <= tolerance {
            return (x, iter);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, max_iterations)
}

/// Solve the refinement problem. The three coordinates decouple and share the
/// same system matrix; each is solved independently.
pub fn refine(
    mesh: &Mesh,
    x_init: &DMatrix<f64>,
    x_cmp: &DMatrix<f64>,
    vertex_mask: &[bool],
    options: &RefineOptions,
) -> Result<RefineOutcome> {
    if options.mu <= 0.0 {
        return Err(Error::Config("refine.mu must be positive".into()));
    }
    let n = mesh.vertex_count();
    if x_init.nrows() != n || x_cmp.nrows() != n || vertex_mask.len() != n {
        return Err(Error::Dimension("refine: vertex count mismatch".into()));
    }
    let hbar = build_hbar(mesh, vertex_mask);
    let q: Vec<f64> = hbar.iter().map(|&in_hbar| if in_hbar { 0.0 } else { 1.0 }).collect();
    if q.iter().all(|&v| v == 0.0) {
        return Err(Error::Numeric(
            "every vertex lies in the hole closure; the minimizer is only determined up to translation".into(),
        ));
    }
    let x_mix = build_xmix(x_init, x_cmp, vertex_mask)?;
    let l = mesh.uniform_laplacian()?;
    let op = NormalOperator {
        lt: l.transpose(),
        l: &l,
        mu: options.mu,
        q: &q,
    };
    let max_iterations = options.max_iterations.unwrap_or(10 * n);

    let mut out = DMatrix::zeros(n, 3);
    let mut worst_residual = 0.0f64;
    let mut total_iterations = 0usize;
    for c in 0..3 {
        let x_mix_c: Vec<f64> = (0..n).map(|i| x_mix[(i, c)]).collect();
        let l_xmix = l.mul_vec(&x_mix_c);
        let mut b = op.lt.mul_vec(&l_xmix);
        for i in 0..n {
            b[i] += options.mu * q[i] * x_init[(i, c)];
        }
        let (x, iterations) = solve_pcg(&op, &b, &x_mix_c, options.tolerance, max_iterations);
        total_iterations += iterations;
        // explicit residual check against the normal equations
        let ax = op.apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
        let rel = norm(&r) / norm(&b).max(f64::MIN_POSITIVE);
        worst_residual = worst_residual.max(rel);
        for i in 0..n {
            out[(i, c)] = x[i];
        }
    }
    if worst_residual > 1e-8 {
        return Err(Error::Numeric(format!(
            "refinement solver did not converge: relative residual {worst_residual:.3e} after {total_iterations} iterations"
        )));
    }
    Ok(RefineOutcome {
        positions: out,
        residual: worst_residual,
        iterations: total_iterations,
    })
}
