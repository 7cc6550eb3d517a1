//! Triangle meshes, OBJ text, surface sampling and point-to-surface distance.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimulationError;
use crate::geometry::RigidTransform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
}

/// A point on a surface with its outward normal, when one is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub position: Vector3<f64>,
    pub normal: Option<Vector3<f64>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<Self, SimulationError> {
        if vertices.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(SimulationError::InvalidMesh("non-finite vertex".into()));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= vertices.len())) {
            return Err(SimulationError::InvalidMesh(format!("triangle {t:?} indexes past {} vertices", vertices.len())));
        }
        Ok(Self { vertices, triangles })
    }

    /// Axis-aligned box centred on the origin, outward-facing triangles.
    pub fn cuboid(half: Vector3<f64>) -> Self {
        let vertices = (0..8)
            .map(|i| {
                Vector3::new(if i & 1 == 0 { -half.x } else { half.x }, if i & 2 == 0 { -half.y } else { half.y }, if i & 4 == 0 { -half.z } else { half.z })
            })
            .collect();
        let triangles = vec![
            [0, 2, 1],
            [1, 2, 3], // -z
            [4, 5, 6],
            [5, 7, 6], // +z
            [0, 1, 4],
            [1, 5, 4], // -y
            [2, 6, 3],
            [3, 6, 7], // +y
            [0, 4, 2],
            [2, 4, 6], // -x
            [1, 3, 5],
            [3, 7, 5], // +x
        ];
        Self { vertices, triangles }
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        self.triangles[i].map(|k| self.vertices[k as usize])
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn transformed(&self, pose: &RigidTransform) -> Self {
        Self { vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(), triangles: self.triangles.clone() }
    }

    /// Concatenation of several meshes.
    pub fn merge(meshes: &[Mesh]) -> Self {
        let mut out = Mesh { vertices: Vec::new(), triangles: Vec::new() };
        for m in meshes {
            let base = out.vertices.len() as u32;
            out.vertices.extend(&m.vertices);
            out.triangles.extend(m.triangles.iter().map(|t| t.map(|i| i + base)));
        }
        out
    }

    /// Unnormalized normal (length = twice the area).
    fn cross(&self, i: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.cross(i).norm() / 2.0).sum()
    }

    /// Area-weighted uniform samples with face normals.
    pub fn sample_surface<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<SurfacePoint> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for i in 0..self.triangles.len() {
            total += self.cross(i).norm();
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let pick = rng.random_range(0.0..total);
                let i = cumulative.partition_point(|&c| c <= pick).min(self.triangles.len() - 1);
                let [a, b, c] = self.triangle(i);
                let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                SurfacePoint { position: a + (b - a) * u + (c - a) * v, normal: Some(self.cross(i).normalize()) }
            })
            .collect()
    }

    /// Distance from `p` to the closest point of any triangle.
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        (0..self.triangles.len()).map(|i| (closest_point_on_triangle(p, &self.triangle(i)) - p).norm()).fold(f64::INFINITY, f64::min)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            writeln!(s, "v {} {} {}", v.x, v.y, v.z).expect("writing to a string");
        }
        for t in &self.triangles {
            writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("writing to a string");
        }
        s
    }

    /// Reads `v` and `f` records; polygons are fan-triangulated and
    /// texture/normal indices ignored.
    pub fn from_obj(text: &str) -> Result<Self, SimulationError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let bad = |line: usize, msg: &str| SimulationError::InvalidMesh(format!("line {line}: {msg}"));
        for (n, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let xyz: Vec<f64> = it.take(3).map(|x| x.parse::<f64>().map_err(|_| bad(n + 1, "bad coordinate"))).collect::<Result<_, _>>()?;
                    if xyz.len() != 3 {
                        return Err(bad(n + 1, "vertex needs three coordinates"));
                    }
                    vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| bad(n + 1, "bad face index"))?;
                            let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                            u32::try_from(resolved).map_err(|_| bad(n + 1, "face index out of range"))
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() < 3 {
                        return Err(bad(n + 1, "face needs three vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }
}

/// Closest point on a triangle (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Vector3<f64> {
    let [a, b, c] = *tri;
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
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Uniform grid over triangle bounding boxes for bounded distance queries.
#[derive(Clone, Debug)]
pub struct SurfaceGrid {
    mesh: Mesh,
    origin: Vector3<f64>,
    cell: f64,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl SurfaceGrid {
    pub fn new(mesh: Mesh, cell: f64) -> Self {
        let cell = if cell.is_finite() && cell > 0.0 { cell } else { 0.05 };
        let origin = mesh.vertices.iter().fold(Vector3::repeat(f64::INFINITY), |m, v| m.inf(v));
        let origin = if origin.x.is_finite() { origin } else { Vector3::zeros() };
        let mut grid = Self { mesh, origin, cell, cells: HashMap::new() };
        for i in 0..grid.mesh.triangles.len() {
            let [a, b, c] = grid.mesh.triangle(i);
            let lo = grid.key(&a.inf(&b).inf(&c));
            let hi = grid.key(&a.sup(&b).sup(&c));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        grid.cells.entry([x, y, z]).or_default().push(i as u32);
                    }
                }
            }
        }
        grid
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        let q = (p - self.origin) / self.cell;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    /// Distance to the surface if it is at most `radius`.
    pub fn distance_within(&self, p: &Vector3<f64>, radius: f64) -> Option<f64> {
        let r = Vector3::repeat(radius.max(0.0));
        let lo = self.key(&(p - r));
        let hi = self.key(&(p + r));
        let mut best = f64::INFINITY;
        let mut seen = std::collections::HashSet::new();
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    for &t in self.cells.get(&[x, y, z]).into_iter().flatten() {
                        if seen.insert(t) {
                            let d = (closest_point_on_triangle(p, &self.mesh.triangle(t as usize)) - p).norm();
                            best = best.min(d);
                        }
                    }
                }
            }
        }
        (best <= radius).then_some(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cuboid_normals_point_outward() {
        let m = Mesh::cuboid(Vector3::new(0.5, 1.0, 1.5));
        assert_relative_eq!(m.area(), 2.0 * (1.0 * 2.0 + 1.0 * 3.0 + 2.0 * 3.0), epsilon = 1e-12);
        for i in 0..m.triangle_count() {
            let [a, b, c] = m.triangle(i);
            let centroid = (a + b + c) / 3.0;
            assert!(m.cross(i).dot(&centroid) > 0.0, "triangle {i}");
        }
    }

    #[test]
    fn obj_round_trip_and_polygons() {
        let m = Mesh::cuboid(Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(Mesh::from_obj(&m.to_obj()).unwrap(), m);
        let quad = Mesh::from_obj("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 -1\n").unwrap();
        assert_eq!(quad.triangles(), &[[0, 1, 2], [0, 2, 3]]);
        assert!(Mesh::from_obj("v 0 0\n").is_err());
        assert!(Mesh::from_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn closest_point_regions() {
        let tri = [Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        let cases = [
            (Vector3::new(0.2, 0.2, 0.5), Vector3::new(0.2, 0.2, 0.0)),
            (Vector3::new(-1.0, -1.0, 0.0), Vector3::zeros()),
            (Vector3::new(2.0, -0.5, 0.0), Vector3::new(1.0, 0.0, 0.0)),
            (Vector3::new(0.5, -1.0, 1.0), Vector3::new(0.5, 0.0, 0.0)),
            (Vector3::new(1.0, 1.0, 0.0), Vector3::new(0.5, 0.5, 0.0)),
            (Vector3::new(-0.5, 0.5, 0.0), Vector3::new(0.0, 0.5, 0.0)),
        ];
        for (p, want) in cases {
            assert_relative_eq!(closest_point_on_triangle(&p, &tri), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn samples_lie_on_surface() {
        let m = Mesh::cuboid(Vector3::new(0.2, 0.3, 0.1));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = m.sample_surface(200, &mut rng);
        assert_eq!(pts.len(), 200);
        for p in pts {
            assert!(m.distance_to_point(&p.position) < 1e-12);
            let n = p.normal.unwrap();
            assert!(n.dot(&p.position) > 0.0);
        }
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Mesh::merge(&[
            Mesh::cuboid(Vector3::new(0.3, 0.2, 0.1)),
            Mesh::cuboid(Vector3::new(0.1, 0.1, 0.4)).transformed(&RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.2))),
        ]);
        let grid = SurfaceGrid::new(m.clone(), 0.07);
        for _ in 0..500 {
            let p = Vector3::new(rng.random_range(-0.6..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.8));
            let r = rng.random_range(0.0..0.3);
            let brute = m.distance_to_point(&p);
            match grid.distance_within(&p, r) {
                Some(d) => assert_eq!(d, brute),
                None => assert!(brute > r),
            }
        }
    }
}
