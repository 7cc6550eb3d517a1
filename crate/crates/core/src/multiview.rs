//! Multi-view triangulation of fiducial corners.
//!
//! Each corner seen by two or more calibrated cameras is first solved with the
//! linear DLT system and then refined by Gauss-Newton on the pixel
//! reprojection error. Views whose reprojection error exceeds three times the
//! median are dropped and the point is solved once more.
//!
//! Reprojection error is reported as a root-mean-square over image
//! coordinates: `sqrt(Σ‖r_i‖² / 2n)` for `n` contributing views.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, GeometryError, Rig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiviewError {
    #[error("need detections from at least 2 distinct cameras, got {0}")]
    InsufficientViews(usize),
    #[error("viewing rays are parallel within {0:.1e} rad")]
    DegenerateGeometry(f64),
    #[error("detections mix different corners")]
    MixedCorners,
    #[error("no triangulated corners to report on")]
    EmptySession,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A 2D fiducial-corner detection in one camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerDetection {
    pub camera_id: u32,
    pub marker_id: u32,
    pub corner_index: u8,
    pub pixel: Vector2<f64>,
    pub frame: u32,
}

/// Identifies one physical corner at one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CornerKey {
    pub frame: u32,
    pub marker_id: u32,
    pub corner_index: u8,
}

impl CornerDetection {
    pub fn key(&self) -> CornerKey {
        CornerKey { frame: self.frame, marker_id: self.marker_id, corner_index: self.corner_index }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangulatedCorner {
    pub marker_id: u32,
    pub corner_index: u8,
    pub frame: u32,
    pub position: Vector3<f64>,
    /// Per-coordinate RMS reprojection error over contributing views (pixels).
    pub reprojection_rms: f64,
    pub n_views: usize,
}

impl TriangulatedCorner {
    pub fn key(&self) -> CornerKey {
        CornerKey { frame: self.frame, marker_id: self.marker_id, corner_index: self.corner_index }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriangulationConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Views above `outlier_factor × median` reprojection error are dropped.
    pub outlier_factor: f64,
    /// Errors below this never count as outliers (keeps noiseless data intact).
    pub outlier_floor_px: f64,
    pub min_ray_angle: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { max_iterations: 10, step_tolerance: 1e-10, outlier_factor: 3.0, outlier_floor_px: 1e-3, min_ray_angle: 1e-6 }
    }
}

struct View<'a> {
    camera: &'a CameraModel,
    pixel: Vector2<f64>,
}

/// Triangulates all detections of a single corner.
pub fn triangulate(detections: &[CornerDetection], rig: &Rig, config: &TriangulationConfig) -> Result<TriangulatedCorner, MultiviewError> {
    let first = detections.first().ok_or(MultiviewError::InsufficientViews(0))?;
    let key = first.key();
    if detections.iter().any(|d| d.key() != key) {
        return Err(MultiviewError::MixedCorners);
    }

    // One observation per camera; repeated camera ids keep the first detection.
    let mut per_camera: BTreeMap<u32, Vector2<f64>> = BTreeMap::new();
    for d in detections {
        per_camera.entry(d.camera_id).or_insert(d.pixel);
    }
    if per_camera.len() < 2 {
        return Err(MultiviewError::InsufficientViews(per_camera.len()));
    }
    let views = per_camera.iter().map(|(&id, &pixel)| Ok(View { camera: rig.get(id)?, pixel })).collect::<Result<Vec<_>, MultiviewError>>()?;

    check_ray_spread(&views, config.min_ray_angle)?;

    let mut position = solve(&views, config)?;
    let mut errors = view_errors(&views, &position);
    let mut active: Vec<&View> = views.iter().collect();

    if views.len() > 2 {
        let med = median(&errors);
        let cut = (config.outlier_factor * med).max(config.outlier_floor_px);
        let keep: Vec<&View> = views.iter().zip(&errors).filter(|(_, &e)| e <= cut).map(|(v, _)| v).collect();
        if keep.len() >= 2 && keep.len() < views.len() {
            let kept: Vec<View> = keep.iter().map(|v| View { camera: v.camera, pixel: v.pixel }).collect();
            if check_ray_spread(&kept, config.min_ray_angle).is_ok() {
                position = solve(&kept, config)?;
                errors = view_errors(&kept, &position);
                active = keep;
            }
        }
    }

    let n = active.len();
    let sum_sq: f64 = errors.iter().map(|e| e * e).sum();
    Ok(TriangulatedCorner {
        marker_id: key.marker_id,
        corner_index: key.corner_index,
        frame: key.frame,
        position,
        reprojection_rms: (sum_sq / (2.0 * n as f64)).sqrt(),
        n_views: n,
    })
}

fn solve(views: &[View], config: &TriangulationConfig) -> Result<Vector3<f64>, MultiviewError> {
    let mut x = dlt(views)?;
    for _ in 0..config.max_iterations {
        let step = gauss_newton_step(views, &x)?;
        x += step;
        if step.norm() < config.step_tolerance {
            break;
        }
    }
    for v in views {
        if v.camera.to_camera_frame(&x).z <= crate::geometry::MIN_DEPTH {
            return Err(MultiviewError::DegenerateGeometry(config.min_ray_angle));
        }
    }
    Ok(x)
}

fn dlt(views: &[View]) -> Result<Vector3<f64>, MultiviewError> {
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, v) in views.iter().enumerate() {
        let p = v.camera.projection_matrix();
        let r0 = p.row(2) * v.pixel.x - p.row(0);
        let r1 = p.row(2) * v.pixel.y - p.row(1);
        a.row_mut(2 * i).copy_from(&(r0 / r0.norm()));
        a.row_mut(2 * i + 1).copy_from(&(r1 / r1.norm()));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (min_idx, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-12 {
        return Err(MultiviewError::DegenerateGeometry(0.0));
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

fn gauss_newton_step(views: &[View], x: &Vector3<f64>) -> Result<Vector3<f64>, MultiviewError> {
    let mut jtj = Matrix3::<f64>::zeros();
    let mut jtr = Vector3::<f64>::zeros();
    for v in views {
        let k = v.camera.intrinsics();
        let q = k * v.camera.extrinsics().matrix();
        let h = k * v.camera.to_camera_frame(x);
        if h.z <= crate::geometry::MIN_DEPTH {
            return Err(MultiviewError::DegenerateGeometry(0.0));
        }
        let u = h.x / h.z;
        let w = h.y / h.z;
        let du = (q.row(0) - q.row(2) * u) / h.z;
        let dv = (q.row(1) - q.row(2) * w) / h.z;
        let ru = u - v.pixel.x;
        let rv = w - v.pixel.y;
        jtj += du.transpose() * du + dv.transpose() * dv;
        jtr += du.transpose() * ru + dv.transpose() * rv;
    }
    let chol = jtj.cholesky().ok_or(MultiviewError::DegenerateGeometry(0.0))?;
    Ok(-chol.solve(&jtr))
}

fn view_errors(views: &[View], x: &Vector3<f64>) -> Vec<f64> {
    views.iter().map(|v| v.camera.project(x).map(|px| (px - v.pixel).norm()).unwrap_or(f64::INFINITY)).collect()
}

fn check_ray_spread(views: &[View], min_angle: f64) -> Result<(), MultiviewError> {
    let rays: Vec<Vector3<f64>> = views.iter().map(|v| v.camera.ray_direction(&v.pixel)).collect();
    let mut max_angle: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            max_angle = max_angle.max(rays[i].angle(&rays[j]));
        }
    }
    if max_angle < min_angle {
        return Err(MultiviewError::DegenerateGeometry(min_angle));
    }
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Outcome of triangulating a batch of detections.
#[derive(Debug, Default)]
pub struct BatchTriangulation {
    pub corners: Vec<TriangulatedCorner>,
    pub failures: Vec<(CornerKey, MultiviewError)>,
}

/// Groups detections by corner and triangulates every group, in key order.
pub fn triangulate_all(detections: &[CornerDetection], rig: &Rig, config: &TriangulationConfig) -> BatchTriangulation {
    let mut groups: BTreeMap<CornerKey, Vec<CornerDetection>> = BTreeMap::new();
    for d in detections {
        groups.entry(d.key()).or_default().push(*d);
    }
    let groups: Vec<(CornerKey, Vec<CornerDetection>)> = groups.into_iter().collect();
    let results: Vec<(CornerKey, Result<TriangulatedCorner, MultiviewError>)> =
        groups.par_iter().map(|(k, dets)| (*k, triangulate(dets, rig, config))).collect();
    let mut out = BatchTriangulation::default();
    for (k, r) in results {
        match r {
            Ok(c) => out.corners.push(c),
            Err(e) => out.failures.push((k, e)),
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionStats {
    pub corners: usize,
    pub frames: usize,
    pub mean_rms_px: f64,
    pub mean_views: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReprojection {
    pub frame: u32,
    pub mean_rms_px: f64,
    pub mean_views: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionReport {
    pub overall: ReprojectionStats,
    /// Restricted to corners flagged as being manipulated; `None` if no such corner.
    pub manipulation: Option<ReprojectionStats>,
    pub per_frame: Vec<FrameReprojection>,
}

fn stats<'a>(corners: impl Iterator<Item = &'a TriangulatedCorner>) -> ReprojectionStats {
    let mut s = ReprojectionStats::default();
    let mut frames = std::collections::BTreeSet::new();
    for c in corners {
        s.corners += 1;
        s.mean_rms_px += c.reprojection_rms;
        s.mean_views += c.n_views as f64;
        frames.insert(c.frame);
    }
    if s.corners > 0 {
        s.mean_rms_px /= s.corners as f64;
        s.mean_views /= s.corners as f64;
    }
    s.frames = frames.len();
    s
}

/// Aggregates reprojection error and visibility over all corners and over the
/// subset for which `in_manipulation(frame, marker_id)` holds.
pub fn reprojection_report(corners: &[TriangulatedCorner], in_manipulation: impl Fn(u32, u32) -> bool) -> Result<ReprojectionReport, MultiviewError> {
    if corners.is_empty() {
        return Err(MultiviewError::EmptySession);
    }
    let overall = stats(corners.iter());
    let manip = stats(corners.iter().filter(|c| in_manipulation(c.frame, c.marker_id)));
    let mut by_frame: BTreeMap<u32, Vec<&TriangulatedCorner>> = BTreeMap::new();
    for c in corners {
        by_frame.entry(c.frame).or_default().push(c);
    }
    let per_frame = by_frame
        .into_iter()
        .map(|(frame, cs)| {
            let s = stats(cs.into_iter());
            FrameReprojection { frame, mean_rms_px: s.mean_rms_px, mean_views: s.mean_views }
        })
        .collect();
    Ok(ReprojectionReport { overall, manipulation: (manip.corners > 0).then_some(manip), per_frame })
}
