//! Bounding-volume hierarchy over triangles for segment occlusion queries.

use nalgebra::Vector3;

use super::mesh::Mesh;

/// Fraction of the segment length trimmed from each end so surfaces the
/// segment starts or ends on do not count as blocking.
pub const SEGMENT_EPS: f64 = 1e-7;

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Node {
    min: Vector3<f64>,
    max: Vector3<f64>,
    /// Leaves hold `count > 0` triangles from `start`. Inner nodes have the
    /// left child right after them and the right child at `right`.
    start: u32,
    count: u32,
    right: u32,
}

#[derive(Clone, Debug, Default)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<[Vector3<f64>; 3]>,
}

/// Parameter along `o + t·d` where the segment crosses the triangle, if any.
pub fn segment_triangle(o: &Vector3<f64>, d: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (SEGMENT_EPS..=1.0 - SEGMENT_EPS).contains(&t).then_some(t)
}

/// Brute-force count of triangles crossed by the segment `a → b`.
pub fn brute_force_hits(tris: &[[Vector3<f64>; 3]], a: &Vector3<f64>, b: &Vector3<f64>) -> usize {
    let d = b - a;
    tris.iter().filter(|t| segment_triangle(a, &d, t).is_some()).count()
}

fn slab(o: &Vector3<f64>, inv_d: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> bool {
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for k in 0..3 {
        let (mut a, mut b) = ((min[k] - o[k]) * inv_d[k], (max[k] - o[k]) * inv_d[k]);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        // NaN from 0·inf (segment parallel to and on a slab face) keeps the box.
        if a > t0 {
            t0 = a;
        }
        if b < t1 {
            t1 = b;
        }
        if t0 > t1 {
            return false;
        }
    }
    true
}

impl Bvh {
    pub fn new(mesh: &Mesh) -> Self {
        let mut tris: Vec<[Vector3<f64>; 3]> = (0..mesh.triangle_count()).map(|i| mesh.triangle(i)).collect();
        let mut bvh = Bvh { nodes: Vec::new(), tris: Vec::new() };
        if !tris.is_empty() {
            let n = tris.len();
            bvh.build(&mut tris, 0, n);
        }
        bvh.tris = tris;
        bvh
    }

    pub fn triangles(&self) -> &[[Vector3<f64>; 3]] {
        &self.tris
    }

    fn build(&mut self, tris: &mut [[Vector3<f64>; 3]], start: usize, end: usize) -> usize {
        let slice = &mut tris[start..end];
        let (mut min, mut max) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        let (mut cmin, mut cmax) = (min, max);
        for t in slice.iter() {
            for v in t {
                min = min.inf(v);
                max = max.sup(v);
            }
            let c = (t[0] + t[1] + t[2]) / 3.0;
            cmin = cmin.inf(&c);
            cmax = cmax.sup(&c);
        }
        let idx = self.nodes.len();
        self.nodes.push(Node { min, max, start: start as u32, count: (end - start) as u32, right: 0 });
        if end - start <= LEAF_SIZE {
            return idx;
        }
        let axis = (cmax - cmin).imax();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |a, b| {
            let ca = a[0][axis] + a[1][axis] + a[2][axis];
            let cb = b[0][axis] + b[1][axis] + b[2][axis];
            ca.total_cmp(&cb)
        });
        self.nodes[idx].count = 0;
        self.build(tris, start, start + mid);
        let right = self.build(tris, start + mid, end);
        self.nodes[idx].right = right as u32;
        idx
    }

    fn visit(&self, a: &Vector3<f64>, b: &Vector3<f64>, mut f: impl FnMut(&[Vector3<f64>; 3]) -> bool) {
        if self.nodes.is_empty() {
            return;
        }
        let d = b - a;
        let inv_d = d.map(|x| 1.0 / x);
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i];
            if !slab(a, &inv_d, &node.min, &node.max) {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for t in &self.tris[s..s + node.count as usize] {
                    if f(t) {
                        return;
                    }
                }
            } else {
                stack.push(node.right as usize);
                stack.push(i + 1);
            }
        }
    }

    /// True if any triangle crosses the open segment `a → b`.
    pub fn blocks(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let d = b - a;
        let mut hit = false;
        self.visit(a, b, |t| {
            hit = segment_triangle(a, &d, t).is_some();
            hit
        });
        hit
    }

    /// Number of triangles crossed by the segment.
    pub fn count_hits(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> usize {
        let d = b - a;
        let mut n = 0;
        self.visit(a, b, |t| {
            n += segment_triangle(a, &d, t).is_some() as usize;
            false
        });
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(rng: &mut ChaCha8Rng) -> Mesh {
        let boxes: Vec<Mesh> = (0..rng.random_range(1..12))
            .map(|_| {
                let half = Vector3::new(rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
                let pose = RigidTransform::new(
                    UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
                    Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                );
                Mesh::cuboid(half).transformed(&pose)
            })
            .collect();
        Mesh::merge(&boxes)
    }

    #[test]
    fn segment_through_box_crosses_two_faces() {
        let bvh = Bvh::new(&Mesh::cuboid(Vector3::repeat(0.5)));
        let a = Vector3::new(-2.0, 0.1, 0.2);
        let b = Vector3::new(2.0, 0.1, 0.2);
        assert_eq!(bvh.count_hits(&a, &b), 2);
        assert!(bvh.blocks(&a, &b));
        assert!(!bvh.blocks(&a, &Vector3::new(-1.0, 0.1, 0.2)));
        // Ending on the surface does not block.
        assert!(!bvh.blocks(&a, &Vector3::new(-0.5, 0.1, 0.2)));
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mesh = random_scene(&mut rng);
            let bvh = Bvh::new(&mesh);
            for _ in 0..300 {
                let a = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
                let b = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
                let brute = brute_force_hits(bvh.triangles(), &a, &b);
                assert_eq!(bvh.count_hits(&a, &b), brute);
                assert_eq!(bvh.blocks(&a, &b), brute > 0);
            }
        }
    }

    #[test]
    fn axis_aligned_segments() {
        let bvh = Bvh::new(&Mesh::cuboid(Vector3::repeat(0.5)));
        let a = Vector3::new(0.1, 0.1, -3.0);
        let b = Vector3::new(0.1, 0.1, 3.0);
        assert_eq!(bvh.count_hits(&a, &b), brute_force_hits(bvh.triangles(), &a, &b));
        assert_eq!(bvh.count_hits(&a, &b), 2);
        assert!(Bvh::new(&Mesh::new(vec![], vec![]).unwrap()).count_hits(&a, &b) == 0);
    }
}
