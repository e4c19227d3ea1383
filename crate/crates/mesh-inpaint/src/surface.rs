//! Closest-point queries against a triangle surface, accelerated by a
//! bounding-volume hierarchy. Used for remeshing back-projection and for
//! output-vs-ground-truth distance metrics.

use nalgebra::{Point3, Vector3};

use crate::mesh::Mesh;

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            hi: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    fn dist_sq(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.lo[k] {
                self.lo[k] - p[k]
            } else if p[k] > self.hi[k] {
                p[k] - self.hi[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Debug)]
enum Node {
    Leaf { faces: Vec<usize>, bounds: Aabb },
    Inner { left: usize, right: usize, bounds: Aabb },
}

/// BVH over the triangles of a fixed mesh.
#[derive(Debug)]
pub struct SurfaceBvh {
    nodes: Vec<Node>,
    root: usize,
    triangles: Vec<[Point3<f64>; 3]>,
    normals: Vec<Vector3<f64>>,
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy)]
pub struct ClosestPoint {
    pub point: Point3<f64>,
    pub face: usize,
    pub distance: f64,
}

const LEAF_SIZE: usize = 8;

impl SurfaceBvh {
    pub fn build(mesh: &Mesh) -> Self {
        let triangles: Vec<[Point3<f64>; 3]> = mesh
            .faces()
            .iter()
            .map(|f| [mesh.positions()[f[0]], mesh.positions()[f[1]], mesh.positions()[f[2]]])
            .collect();
        let normals: Vec<Vector3<f64>> = triangles
            .iter()
            .map(|t| {
                let c = (t[1] - t[0]).cross(&(t[2] - t[0]));
                let n = c.norm();
                if n > 0.0 {
                    c / n
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        let centroids: Vec<Point3<f64>> = triangles
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut nodes = Vec::new();
        let mut indices: Vec<usize> = (0..triangles.len()).collect();
        let root = Self::build_node(&triangles, &centroids, &mut indices, &mut nodes);
        Self {
            nodes,
            root,
            triangles,
            normals,
        }
    }

    fn bounds_of(triangles: &[[Point3<f64>; 3]], indices: &[usize]) -> Aabb {
        let mut b = Aabb::empty();
        for &i in indices {
            for p in &triangles[i] {
                b.grow(p);
            }
        }
        b
    }

    fn build_node(
        triangles: &[[Point3<f64>; 3]],
        centroids: &[Point3<f64>],
        indices: &mut [usize],
        nodes: &mut Vec<Node>,
    ) -> usize {
        let bounds = Self::bounds_of(triangles, indices);
        if indices.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf {
                faces: indices.to_vec(),
                bounds,
            });
            return nodes.len() - 1;
        }
        // split along the longest centroid axis at the median
        let mut cb = Aabb::empty();
        for &i in indices.iter() {
            cb.grow(&centroids[i]);
        }
        let extent = cb.hi - cb.lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            centroids[a][axis]
                .partial_cmp(&centroids[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let (left_slice, right_slice) = indices.split_at_mut(mid);
        let left = Self::build_node(triangles, centroids, left_slice, nodes);
        let right = Self::build_node(triangles, centroids, right_slice, nodes);
        nodes.push(Node::Inner { left, right, bounds });
        nodes.len() - 1
    }

    /// Closest point on the surface to `p`.
    pub fn closest_point(&self, p: &Point3<f64>) -> ClosestPoint {
        let mut best = ClosestPoint {
            point: *p,
            face: usize::MAX,
            distance: f64::INFINITY,
        };
        let mut best_sq = f64::INFINITY;
        let mut stack = vec![self.root];
        while let Some(idx) = stack.pop() {
            match &self.nodes[idx] {
                Node::Leaf { faces, bounds } => {
                    if bounds.dist_sq(p) >= best_sq {
                        continue;
                    }
                    for &fi in faces {
                        let q = closest_point_on_triangle(p, &self.triangles[fi]);
                        let d_sq = (q - p).norm_squared();
                        if d_sq < best_sq {
                            best_sq = d_sq;
                            best = ClosestPoint {
                                point: q,
                                face: fi,
                                distance: d_sq.sqrt(),
                            };
                        }
                    }
                }
                Node::Inner { left, right, bounds } => {
                    if bounds.dist_sq(p) >= best_sq {
                        continue;
                    }
                    // visit the nearer child first
                    let dl = match &self.nodes[*left] {
                        Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds.dist_sq(p),
                    };
                    let dr = match &self.nodes[*right] {
                        Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds.dist_sq(p),
                    };
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best
    }

    /// Distance with sign taken from the closest face's normal: positive on
    /// the side the normal points to.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        let hit = self.closest_point(p);
        let side = (p - hit.point).dot(&self.normals[hit.face]);
        if side < 0.0 {
            -hit.distance
        } else {
            hit.distance
        }
    }
}

/// Closest point on a triangle to `p` (Voronoi-region case analysis).
pub fn closest_point_on_triangle(p: &Point3<f64>, tri: &[Point3<f64>; 3]) -> Point3<f64> {
    let (a, b, c) = (tri[0], tri[1], tri[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_voronoi_regions() {
        let tri = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        // interior projects straight down
        let q = closest_point_on_triangle(&Point3::new(0.25, 0.25, 3.0), &tri);
        assert_relative_eq!(q, Point3::new(0.25, 0.25, 0.0), epsilon = 1e-14);
        // vertex region
        let q = closest_point_on_triangle(&Point3::new(-1.0, -1.0, 0.0), &tri);
        assert_relative_eq!(q, tri[0], epsilon = 1e-14);
        // edge region
        let q = closest_point_on_triangle(&Point3::new(0.5, -2.0, 0.0), &tri);
        assert_relative_eq!(q, Point3::new(0.5, 0.0, 0.0), epsilon = 1e-14);
        // hypotenuse region
        let q = closest_point_on_triangle(&Point3::new(1.0, 1.0, 0.0), &tri);
        assert_relative_eq!(q, Point3::new(0.5, 0.5, 0.0), epsilon = 1e-14);
    }

    #[test]
    fn bvh_matches_brute_force_oracle() {
        let mesh = fixtures::icosphere(2);
        let bvh = SurfaceBvh::build(&mesh);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = Point3::new(
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
            );
            let hit = bvh.closest_point(&p);
            // oracle: scan every triangle
            let mut best = f64::INFINITY;
            for f in mesh.faces() {
                let tri = [
                    mesh.positions()[f[0]],
                    mesh.positions()[f[1]],
                    mesh.positions()[f[2]],
                ];
                let q = closest_point_on_triangle(&p, &tri);
                best = best.min((q - p).norm());
            }
            assert_relative_eq!(hit.distance, best, epsilon = 1e-12);
        }
    }

    #[test]
    fn signed_distance_sign_follows_normals() {
        let mesh = fixtures::cube_grid(4);
        let bvh = SurfaceBvh::build(&mesh);
        assert!(bvh.signed_distance(&Point3::new(0.0, 0.0, 2.0)) > 0.0);
        assert!(bvh.signed_distance(&Point3::new(0.0, 0.0, 0.0)) < 0.0);
    }
}
