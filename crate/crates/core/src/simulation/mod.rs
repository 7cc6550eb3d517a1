//! Synthetic scenes, visibility accounting and the camera-count and
//! virtual-marker studies.

pub mod bvh;
pub mod capture;
pub mod generator;
pub mod mesh;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, GeometryError, Rig, RigidTransform};
use bvh::Bvh;
use mesh::{Mesh, SurfacePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Segment swept by a sphere: the occluder primitive for body segments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

/// Closest distance between segments `p1→q1` and `p2→q2`.
pub fn segment_distance(p1: &Vector3<f64>, q1: &Vector3<f64>, p2: &Vector3<f64>, q2: &Vector3<f64>) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-300;
    let (s, t) = if a <= eps && e <= eps {
        (0.0, 0.0)
    } else if a <= eps {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s = if denom > eps { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

impl Capsule {
    pub fn blocks(&self, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
        segment_distance(from, to, &self.a, &self.b) < self.radius
    }

    pub fn transformed(&self, g: &RigidTransform) -> Self {
        Self { a: g.transform_point(&self.a), b: g.transform_point(&self.b), radius: self.radius }
    }
}

/// Cameras, static furniture, per-frame body capsules and a moving target mesh.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    rig: Rig,
    furniture: Mesh,
    furniture_bvh: Bvh,
    body: Vec<Vec<Capsule>>,
    target: Mesh,
    target_poses: Vec<RigidTransform>,
    seed: u64,
}

impl SyntheticScene {
    pub fn new(
        rig: Rig,
        furniture: Mesh,
        body: Vec<Vec<Capsule>>,
        target: Mesh,
        target_poses: Vec<RigidTransform>,
        seed: u64,
    ) -> Result<Self, SimulationError> {
        if body.len() != target_poses.len() {
            return Err(SimulationError::InvalidScene(format!("{} body frames vs {} target frames", body.len(), target_poses.len())));
        }
        if !target_poses.iter().all(|p| p.is_finite())
            || body.iter().flatten().any(|c| !(c.radius.is_finite() && c.radius >= 0.0) || c.a.iter().chain(c.b.iter()).any(|v| !v.is_finite()))
        {
            return Err(SimulationError::InvalidScene("non-finite geometry".into()));
        }
        if rig.is_empty() {
            return Err(SimulationError::InvalidScene("empty rig".into()));
        }
        let furniture_bvh = Bvh::new(&furniture);
        Ok(Self { rig, furniture, furniture_bvh, body, target, target_poses, seed })
    }

    pub fn rig(&self) -> &Rig {
        &self.rig
    }

    pub fn furniture(&self) -> &Mesh {
        &self.furniture
    }

    pub fn body(&self, frame: usize) -> &[Capsule] {
        &self.body[frame]
    }

    pub fn target(&self) -> &Mesh {
        &self.target
    }

    pub fn target_poses(&self) -> &[RigidTransform] {
        &self.target_poses
    }

    pub fn frames(&self) -> usize {
        self.target_poses.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The whole scene moved by `g` (cameras, occluders and targets together).
    pub fn transformed(&self, g: &RigidTransform) -> Result<Self, SimulationError> {
        let g_inv = g.inverse();
        let cameras = self
            .rig
            .cameras()
            .iter()
            .map(|c| CameraModel::new(c.id(), *c.intrinsics(), c.extrinsics().compose(&g_inv), c.width(), c.height()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            Rig::new(cameras)?,
            self.furniture.transformed(g),
            self.body.iter().map(|f| f.iter().map(|c| c.transformed(g)).collect()).collect(),
            self.target.clone(),
            self.target_poses.iter().map(|p| g.compose(p)).collect(),
            self.seed,
        )
    }

    fn sees(&self, frame: usize, cam: &CameraModel, p: &Vector3<f64>, n: Option<&Vector3<f64>>) -> bool {
        if !cam.sees(p) {
            return false;
        }
        let c = cam.center();
        if let Some(n) = n {
            if n.dot(&(c - p)) <= 0.0 {
                return false;
            }
        }
        !self.body[frame].iter().any(|cap| cap.blocks(&c, p)) && !self.furniture_bvh.blocks(&c, p)
    }

    fn world_points(&self, frame: usize, points: &[SurfacePoint]) -> Vec<(Vector3<f64>, Option<Vector3<f64>>)> {
        let pose = &self.target_poses[frame];
        points.iter().map(|p| (pose.transform_point(&p.position), p.normal.map(|n| pose.transform_vector(&n)))).collect()
    }

    /// Camera bitmask per point at `frame`, `words` u64 words per point.
    fn masks(&self, frame: usize, points: &[SurfacePoint]) -> Vec<u64> {
        let words = self.rig.len().div_ceil(64);
        let mut out = vec![0u64; words * points.len()];
        for (i, (p, n)) in self.world_points(frame, points).iter().enumerate() {
            for (k, cam) in self.rig.cameras().iter().enumerate() {
                if self.sees(frame, cam, p, n.as_ref()) {
                    out[i * words + k / 64] |= 1 << (k % 64);
                }
            }
        }
        out
    }
}

/// Cameras that see each point at one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityRecord {
    pub frame: usize,
    /// Camera ids per point, in rig order.
    pub cameras: Vec<Vec<u32>>,
}

/// A point is visible to a camera when it projects inside the image, faces
/// the camera (if it has a normal), and the line of sight misses every
/// body capsule and furniture triangle. `points` are in the target frame.
pub fn visibility(scene: &SyntheticScene, frame: usize, points: &[SurfacePoint]) -> VisibilityRecord {
    let cameras = scene
        .world_points(frame, points)
        .iter()
        .map(|(p, n)| scene.rig.cameras().iter().filter(|c| scene.sees(frame, c, p, n.as_ref())).map(|c| c.id()).collect())
        .collect();
    VisibilityRecord { frame, cameras }
}

/// Bitmasks for every frame, frame-major.
fn all_masks(scene: &SyntheticScene, points: &[SurfacePoint]) -> Vec<Vec<u64>> {
    (0..scene.frames()).into_par_iter().map(|f| scene.masks(f, points)).collect()
}

fn count_views(mask: &[u64], subset: &[u64]) -> u32 {
    mask.iter().zip(subset).map(|(m, s)| (m & s).count_ones()).sum()
}

/// Aggregate for one study setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    /// Camera subset size or marker count.
    pub size: usize,
    pub mean: f64,
    pub stddev: f64,
    pub samples: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub const DETECTION_VIEWS: u32 = 2;
pub const TRACKING_VIEWS: u32 = 3;
pub const TRACKING_MIN_MARKERS: usize = 4;

/// Ratio of corner detections (visible from at least two cameras) under
/// random camera subsets to detections under the full rig.
pub fn camera_count_study(
    scene: &SyntheticScene,
    points: &[SurfacePoint],
    sizes: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<StudyRow>, SimulationError> {
    let n = scene.rig.len();
    if let Some(bad) = sizes.iter().find(|&&s| s == 0 || s > n) {
        return Err(SimulationError::InvalidSpec(format!("subset size {bad} for a {n}-camera rig")));
    }
    if samples == 0 {
        return Err(SimulationError::InvalidSpec("zero samples per size".into()));
    }
    let words = n.div_ceil(64);
    let masks = all_masks(scene, points);
    let full_mask = {
        let mut m = vec![0u64; words];
        for k in 0..n {
            m[k / 64] |= 1 << (k % 64);
        }
        m
    };
    let detected =
        |subset: &[u64]| -> usize { masks.iter().map(|frame| frame.chunks(words).filter(|m| count_views(m, subset) >= DETECTION_VIEWS).count()).sum() };
    let full = detected(&full_mask);
    if full == 0 {
        return Err(SimulationError::InvalidScene("no corner is detected by the full rig".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let subsets: Vec<Vec<u64>> = (0..samples)
            .map(|_| {
                let mut m = vec![0u64; words];
                for k in sample(&mut rng, n, size) {
                    m[k / 64] |= 1 << (k % 64);
                }
                m
            })
            .collect();
        let ratios: Vec<f64> = subsets.par_iter().map(|s| detected(s) as f64 / full as f64).collect();
        let (mean, stddev) = mean_std(&ratios);
        rows.push(StudyRow { size, mean, stddev, samples });
    }
    Ok(rows)
}

/// Fraction of sampled windows in which every frame keeps at least four of
/// `count` surface markers visible from three or more cameras, over `draws`
/// random marker sets. Within a set, markers are nested: the first `count`
/// of one sample. Windows start every `stride` frames and are cut short at
/// the end of the sequence.
pub fn virtual_marker_study(
    scene: &SyntheticScene,
    counts: &[usize],
    window: usize,
    stride: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<StudyRow>, SimulationError> {
    if window == 0 || stride == 0 || draws == 0 {
        return Err(SimulationError::InvalidSpec("window, stride and draws must be positive".into()));
    }
    let frames = scene.frames();
    if frames == 0 {
        return Err(SimulationError::InvalidScene("no frames".into()));
    }
    let most = counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = scene.target.sample_surface(most * draws, &mut rng);
    if points.len() < most * draws {
        return Err(SimulationError::InvalidScene("target mesh has no area".into()));
    }
    let words = scene.rig.len().div_ceil(64);
    let all = vec![u64::MAX; words];
    // Per frame and draw, prefix counts of tracked markers.
    let tracked: Vec<Vec<Vec<usize>>> = all_masks(scene, &points)
        .iter()
        .map(|frame| {
            frame
                .chunks(words * most.max(1))
                .map(|set| {
                    let mut acc = 0;
                    std::iter::once(0)
                        .chain(set.chunks(words).map(|m| {
                            acc += (count_views(m, &all) >= TRACKING_VIEWS) as usize;
                            acc
                        }))
                        .collect()
                })
                .collect()
        })
        .collect();
    let starts: Vec<usize> = (0..frames).step_by(stride).collect();
    Ok(counts
        .iter()
        .map(|&k| {
            let success: Vec<f64> = (0..draws)
                .flat_map(|d| {
                    let ok: Vec<bool> = tracked.iter().map(|t| t.get(d).map_or(0, |c| c[k]) >= TRACKING_MIN_MARKERS).collect();
                    starts.iter().map(|&s| ok[s..(s + window).min(frames)].iter().all(|&b| b) as u8 as f64).collect::<Vec<_>>()
                })
                .collect();
            let (mean, stddev) = mean_std(&success);
            StudyRow { size: k, mean, stddev, samples: success.len() }
        })
        .collect())
}

/// Study rows as CSV with the given header for the size column.
pub fn study_csv(size_column: &str, rows: &[StudyRow]) -> String {
    let mut s = format!("{size_column},mean,stddev,samples\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.size, r.mean, r.stddev, r.samples));
    }
    s
}
