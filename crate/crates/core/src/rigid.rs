//! Rigid pose recovery from corresponded marker corners.
//!
//! Object poses follow the marker-to-object relation: the marker motion
//! `T_mar(t)` is solved with weighted Kabsch from the canonical cube corners
//! to the triangulated ones, and the fixed scan correction `T_mar→obj`
//! (measured once with [`solve_mount`]) is applied in the object frame:
//! `T_obj(t) = T_mar(t) ∘ T_mar→obj`.

use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{MarkerCube, RigidTransform};
use crate::multiview::TriangulatedCorner;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RigidError {
    #[error("point lists differ in length ({canonical} canonical, {observed} observed, {weights} weights)")]
    LengthMismatch { canonical: usize, observed: usize, weights: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("only {0} cube corners visible, need at least 3")]
    TooFewCorners(usize),
}

/// Minimum ratio between the middle and largest covariance eigenvalue of the
/// canonical points. Planar sets (a single marker face) are accepted.
pub const COLLINEARITY_RATIO: f64 = 1e-8;

/// Corresponded point sets with non-negative weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerCorrespondence {
    canonical: Vec<Vector3<f64>>,
    observed: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

impl MarkerCorrespondence {
    pub fn new(canonical: Vec<Vector3<f64>>, observed: Vec<Vector3<f64>>, weights: Vec<f64>) -> Result<Self, RigidError> {
        if canonical.len() != observed.len() || canonical.len() != weights.len() {
            return Err(RigidError::LengthMismatch { canonical: canonical.len(), observed: observed.len(), weights: weights.len() });
        }
        if canonical.len() < 3 {
            return Err(RigidError::DegenerateConfiguration(format!("{} points, need at least 3", canonical.len())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(RigidError::DegenerateConfiguration("weights must be finite and non-negative".into()));
        }
        if canonical.iter().chain(&observed).any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(RigidError::DegenerateConfiguration("non-finite coordinates".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(RigidError::DegenerateConfiguration("all weights are zero".into()));
        }
        let c = Self { canonical, observed, weights };
        let (centroid, _) = c.centroids();
        let mut cov = Matrix3::zeros();
        for (p, w) in c.canonical.iter().zip(&c.weights) {
            let d = p - centroid;
            cov += d * d.transpose() * *w;
        }
        let mut eig = SymmetricEigen::new(cov / total).eigenvalues;
        eig.as_mut_slice().sort_by(f64::total_cmp);
        if eig[2] <= 0.0 || eig[1] / eig[2] <= COLLINEARITY_RATIO {
            return Err(RigidError::DegenerateConfiguration("canonical points are collinear or coincident".into()));
        }
        Ok(c)
    }

    pub fn unweighted(canonical: Vec<Vector3<f64>>, observed: Vec<Vector3<f64>>) -> Result<Self, RigidError> {
        let w = vec![1.0; canonical.len()];
        Self::new(canonical, observed, w)
    }

    pub fn canonical(&self) -> &[Vector3<f64>] {
        &self.canonical
    }

    pub fn observed(&self) -> &[Vector3<f64>] {
        &self.observed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.canonical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canonical.is_empty()
    }

    fn centroids(&self) -> (Vector3<f64>, Vector3<f64>) {
        let total: f64 = self.weights.iter().sum();
        let mut a = Vector3::zeros();
        let mut b = Vector3::zeros();
        for ((p, q), w) in self.canonical.iter().zip(&self.observed).zip(&self.weights) {
            a += p * *w;
            b += q * *w;
        }
        (a / total, b / total)
    }

    /// `Σ w_i ‖T·canonical_i − observed_i‖²`.
    pub fn weighted_sq_residual(&self, t: &RigidTransform) -> f64 {
        self.canonical.iter().zip(&self.observed).zip(&self.weights).map(|((p, q), w)| w * (t.transform_point(p) - q).norm_squared()).sum()
    }

    /// Unweighted RMS per coordinate after applying `t`: `sqrt(Σ‖r_i‖² / 3n)`.
    pub fn coordinate_rms(&self, t: &RigidTransform) -> f64 {
        self.rms(t) / 3f64.sqrt()
    }

    /// Unweighted RMS point distance after applying `t`.
    pub fn rms(&self, t: &RigidTransform) -> f64 {
        let s: f64 = self.canonical.iter().zip(&self.observed).map(|(p, q)| (t.transform_point(p) - q).norm_squared()).sum();
        (s / self.len() as f64).sqrt()
    }
}

/// Weighted least-squares rigid alignment of `canonical` onto `observed`.
///
/// Always returns a proper rotation: when the SVD solution is a reflection the
/// sign of the weakest singular direction is flipped.
pub fn kabsch(c: &MarkerCorrespondence) -> Result<RigidTransform, RigidError> {
    let (ca, cb) = c.centroids();
    let mut h = Matrix3::zeros();
    for ((p, q), w) in c.canonical.iter().zip(&c.observed).zip(&c.weights) {
        h += (p - ca) * (q - cb).transpose() * *w;
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(RigidError::DegenerateConfiguration("SVD did not converge".into())),
    };
    // nalgebra sorts singular values in decreasing order; flip the last one.
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * correction * u.transpose();
    let rot = RigidTransform::from_matrix(&r, Vector3::zeros());
    let t = cb - rot.rotation() * ca;
    Ok(RigidTransform::new(*rot.rotation(), t))
}

/// Unweighted Kabsch on plain point lists.
pub fn kabsch_points(canonical: &[Vector3<f64>], observed: &[Vector3<f64>]) -> Result<RigidTransform, RigidError> {
    kabsch(&MarkerCorrespondence::unweighted(canonical.to_vec(), observed.to_vec())?)
}

/// Weight assigned to a triangulated corner: `1 / (1 + rms_px)`.
pub fn corner_weight(reprojection_rms: f64) -> f64 {
    1.0 / (1.0 + reprojection_rms.max(0.0))
}

/// Builds the joint correspondence between all visible corners of `cubes`
/// (canonical coordinates in the host frame via each cube's mount) and their
/// triangulated positions. Corners of unrelated markers are ignored.
pub fn cube_correspondence(corners: &[&TriangulatedCorner], cubes: &[MarkerCube]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f64>) {
    let mut lookup: HashMap<u32, (&MarkerCube, usize)> = HashMap::new();
    for cube in cubes {
        for face in 0..crate::geometry::CUBE_FACES {
            lookup.insert(cube.marker_id(face), (cube, face));
        }
    }
    let mut canonical = Vec::new();
    let mut observed = Vec::new();
    let mut weights = Vec::new();
    for c in corners {
        if let Some((cube, face)) = lookup.get(&c.marker_id) {
            let idx = c.corner_index as usize;
            if idx < 4 {
                canonical.push(cube.host_corners(*face)[idx]);
                observed.push(c.position);
                weights.push(corner_weight(c.reprojection_rms));
            }
        }
    }
    (canonical, observed, weights)
}

/// Solves the marker motion `T_mar(t)` from the corners visible at one frame.
/// Multiple cubes on the same host are solved jointly.
pub fn marker_pose(corners: &[&TriangulatedCorner], cubes: &[MarkerCube]) -> Result<RigidTransform, RigidError> {
    let (canonical, observed, weights) = cube_correspondence(corners, cubes);
    if canonical.len() < 3 {
        return Err(RigidError::TooFewCorners(canonical.len()));
    }
    kabsch(&MarkerCorrespondence::new(canonical, observed, weights)?)
}

/// Object pose at one frame: `T_mar(t) ∘ T_mar→obj`.
pub fn object_pose(corners: &[&TriangulatedCorner], cubes: &[MarkerCube], mount_correction: &RigidTransform) -> Result<RigidTransform, RigidError> {
    Ok(marker_pose(corners, cubes)?.compose(mount_correction))
}

/// Fixed marker-to-object correction and the residual of the fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MountSolution {
    pub transform: RigidTransform,
    /// Per-coordinate RMS of the scan-to-camera alignment (meters).
    pub residual_rms: f64,
}

/// Computes `T_mar→obj` from picked scan points and their camera-space
/// counterparts, given the marker motion at the same instant.
pub fn solve_mount(scan_points: &[Vector3<f64>], observed_points: &[Vector3<f64>], marker_pose: &RigidTransform) -> Result<MountSolution, RigidError> {
    let corr = MarkerCorrespondence::unweighted(scan_points.to_vec(), observed_points.to_vec())?;
    let scan_to_camera = kabsch(&corr)?;
    Ok(MountSolution { transform: marker_pose.inverse().compose(&scan_to_camera), residual_rms: corr.coordinate_rms(&scan_to_camera) })
}
