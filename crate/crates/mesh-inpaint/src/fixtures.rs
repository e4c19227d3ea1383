//! Built-in test meshes: spheres, cube and plane grids, and helpers that cut
//! holes into them. Used by the CLI self-checks and the test suite so no
//! external data is required.

use std::collections::BTreeMap;

use nalgebra::Point3;

use crate::mesh::Mesh;

/// Unit icosphere: icosahedron subdivided `subdivisions` times, vertices
/// projected to the unit sphere. Vertex counts: 12, 42, 162, 642, 2562, ...
pub fn icosphere(subdivisions: usize) -> Mesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut positions: Vec<Point3<f64>> = vec![
        Point3::new(-1.0, phi, 0.0),
        Point3::new(1.0, phi, 0.0),
        Point3::new(-1.0, -phi, 0.0),
        Point3::new(1.0, -phi, 0.0),
        Point3::new(0.0, -1.0, phi),
        Point3::new(0.0, 1.0, phi),
        Point3::new(0.0, -1.0, -phi),
        Point3::new(0.0, 1.0, -phi),
        Point3::new(phi, 0.0, -1.0),
        Point3::new(phi, 0.0, 1.0),
        Point3::new(-phi, 0.0, -1.0),
        Point3::new(-phi, 0.0, 1.0),
    ];
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for p in &mut positions {
        *p = Point3::from(p.coords.normalize());
    }
    for _ in 0..subdivisions {
        let mut midpoint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mids = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mids[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (positions[a].coords + positions[b].coords) / 2.0;
                    positions.push(Point3::from(m.normalize()));
                    positions.len() - 1
                });
            }
            new_faces.push([f[0], mids[0], mids[2]]);
            new_faces.push([f[1], mids[1], mids[0]]);
            new_faces.push([f[2], mids[2], mids[1]]);
            new_faces.push([mids[0], mids[1], mids[2]]);
        }
        faces = new_faces;
    }
    Mesh::new(positions, faces).expect("icosphere construction is valid")
}

/// Unit UV sphere with `segments` meridians and `rings` latitude bands.
/// Vertex count: segments * (rings - 1) + 2.
pub fn uv_sphere(segments: usize, rings: usize) -> Mesh {
    assert!(segments >= 3 && rings >= 2);
    let mut positions = Vec::new();
    positions.push(Point3::new(0.0, 0.0, 1.0)); // north pole
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            positions.push(Point3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ));
        }
    }
    positions.push(Point3::new(0.0, 0.0, -1.0)); // south pole
    let south = positions.len() - 1;
    let idx = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);

    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, idx(1, s), idx(1, s + 1)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b) = (idx(r, s), idx(r, s + 1));
            let (c, d) = (idx(r + 1, s), idx(r + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for s in 0..segments {
        faces.push([south, idx(rings - 1, s + 1), idx(rings - 1, s)]);
    }
    Mesh::new(positions, faces).expect("uv sphere construction is valid")
}

/// Cube surface [-1, 1]^3, each side an n x n grid of quads split into
/// triangles; shared edges and corners are welded.
pub fn cube_grid(n: usize) -> Mesh {
    assert!(n >= 1);
    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut lookup: BTreeMap<(u64, u64, u64), usize> = BTreeMap::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    let step = 2.0 / n as f64;
    let coord = |i: usize| -1.0 + step * i as f64;
    let mut vertex = |p: Point3<f64>| -> usize {
        let key = (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        *lookup.entry(key).or_insert_with(|| {
            positions.push(p);
            positions.len() - 1
        })
    };

    // (axis, sign): face plane axis = axis, at sign; (u, v) span the others
    for (axis, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0)] {
        let (ua, va) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let make = |iu: usize, iv: usize| {
            let mut c = [0.0f64; 3];
            c[axis] = sign;
            c[ua] = coord(iu);
            c[va] = coord(iv);
            Point3::new(c[0], c[1], c[2])
        };
        for iu in 0..n {
            for iv in 0..n {
                let p00 = vertex(make(iu, iv));
                let p10 = vertex(make(iu + 1, iv));
                let p01 = vertex(make(iu, iv + 1));
                let p11 = vertex(make(iu + 1, iv + 1));
                // wind so normals point outward along `sign * axis`
                if sign > 0.0 {
                    faces.push([p00, p10, p11]);
                    faces.push([p00, p11, p01]);
                } else {
                    faces.push([p00, p11, p10]);
                    faces.push([p00, p01, p11]);
                }
            }
        }
    }
    Mesh::new(positions, faces).expect("cube grid construction is valid")
}

/// Flat triangulated grid in the z = 0 plane with nx x ny quads.
pub fn plane_grid(nx: usize, ny: usize) -> Mesh {
    assert!(nx >= 1 && ny >= 1);
    let mut positions = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            positions.push(Point3::new(i as f64, j as f64, 0.0));
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut faces = Vec::with_capacity(nx * ny * 2);
    for j in 0..ny {
        for i in 0..nx {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    Mesh::new(positions, faces).expect("plane grid construction is valid")
}

/// Remove every face whose three vertices all lie within graph distance `k`
/// of `seed`, then drop unreferenced vertices. Cuts a cap-style hole.
pub fn remove_k_ring_cap(mesh: &Mesh, seed: usize, k: usize) -> Mesh {
    let ring = mesh.k_ring(seed, k);
    let in_ring = {
        let mut flags = vec![false; mesh.vertex_count()];
        for &v in &ring {
            flags[v] = true;
        }
        flags
    };
    let kept: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .filter(|f| !f.iter().all(|&v| in_ring[v]))
        .copied()
        .collect();
    compact(mesh, kept)
}

/// Remove every face whose centroid lies within `radius` of `center`.
pub fn remove_faces_near(mesh: &Mesh, center: Point3<f64>, radius: f64) -> Mesh {
    let kept: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .filter(|f| (crate::mesh::face_centroid(mesh.positions(), f) - center).norm() > radius)
        .copied()
        .collect();
    compact(mesh, kept)
}

fn compact(mesh: &Mesh, faces: Vec<[usize; 3]>) -> Mesh {
    let mut remap = vec![usize::MAX; mesh.vertex_count()];
    let mut positions = Vec::new();
    let mut new_faces = Vec::with_capacity(faces.len());
    for f in &faces {
        let mut nf = [0usize; 3];
        for (k, &v) in f.iter().enumerate() {
            if remap[v] == usize::MAX {
                remap[v] = positions.len();
                positions.push(mesh.positions()[v]);
            }
            nf[k] = remap[v];
        }
        new_faces.push(nf);
    }
    Mesh::new(positions, new_faces).expect("face subset of a valid mesh is valid")
}
