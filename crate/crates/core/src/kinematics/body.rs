//! 23-segment body skeleton, forward kinematics and marker-based calibration.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::KinematicsError;
use crate::geometry::{skew, RigidTransform};
use crate::rigid::kabsch_points;
use crate::state::{check_angles, BODY_JOINTS};

pub const PELVIS: usize = 0;
pub const L5: usize = 1;
pub const L3: usize = 2;
pub const T12: usize = 3;
pub const T8: usize = 4;
pub const NECK: usize = 5;
pub const HEAD: usize = 6;
pub const RIGHT_SHOULDER: usize = 7;
pub const RIGHT_UPPER_ARM: usize = 8;
pub const RIGHT_FOREARM: usize = 9;
pub const RIGHT_HAND: usize = 10;
pub const LEFT_SHOULDER: usize = 11;
pub const LEFT_UPPER_ARM: usize = 12;
pub const LEFT_FOREARM: usize = 13;
pub const LEFT_HAND: usize = 14;
pub const RIGHT_UPPER_LEG: usize = 15;
pub const RIGHT_LOWER_LEG: usize = 16;
pub const RIGHT_FOOT: usize = 17;
pub const RIGHT_TOE: usize = 18;
pub const LEFT_UPPER_LEG: usize = 19;
pub const LEFT_LOWER_LEG: usize = 20;
pub const LEFT_FOOT: usize = 21;
pub const LEFT_TOE: usize = 22;

pub const JOINT_NAMES: [&str; BODY_JOINTS] = [
    "Pelvis",
    "L5",
    "L3",
    "T12",
    "T8",
    "Neck",
    "Head",
    "RightShoulder",
    "RightUpperArm",
    "RightForeArm",
    "RightHand",
    "LeftShoulder",
    "LeftUpperArm",
    "LeftForeArm",
    "LeftHand",
    "RightUpperLeg",
    "RightLowerLeg",
    "RightFoot",
    "RightToe",
    "LeftUpperLeg",
    "LeftLowerLeg",
    "LeftFoot",
    "LeftToe",
];

/// Parent of each joint; every parent index is smaller than its child.
pub const PARENTS: [Option<usize>; BODY_JOINTS] = [
    None,
    Some(PELVIS),
    Some(L5),
    Some(L3),
    Some(T12),
    Some(T8),
    Some(NECK),
    Some(T8),
    Some(RIGHT_SHOULDER),
    Some(RIGHT_UPPER_ARM),
    Some(RIGHT_FOREARM),
    Some(T8),
    Some(LEFT_SHOULDER),
    Some(LEFT_UPPER_ARM),
    Some(LEFT_FOREARM),
    Some(PELVIS),
    Some(RIGHT_UPPER_LEG),
    Some(RIGHT_LOWER_LEG),
    Some(RIGHT_FOOT),
    Some(PELVIS),
    Some(LEFT_UPPER_LEG),
    Some(LEFT_LOWER_LEG),
    Some(LEFT_FOOT),
];

/// Body parts that carry markers during the alignment capture.
pub const INSTRUMENTED_PARTS: [usize; 11] =
    [T8, RIGHT_UPPER_ARM, RIGHT_FOREARM, RIGHT_HAND, LEFT_UPPER_ARM, LEFT_FOREARM, LEFT_HAND, RIGHT_UPPER_LEG, RIGHT_LOWER_LEG, LEFT_UPPER_LEG, LEFT_LOWER_LEG];

/// Offsets that marker correspondences constrain, relative to the fixed
/// pelvis-to-L5 anchor. Neck, head and feet carry no markers.
pub const CALIBRATED_OFFSETS: [usize; 15] = [
    L3,
    T12,
    T8,
    RIGHT_SHOULDER,
    RIGHT_UPPER_ARM,
    RIGHT_FOREARM,
    RIGHT_HAND,
    LEFT_SHOULDER,
    LEFT_UPPER_ARM,
    LEFT_FOREARM,
    LEFT_HAND,
    RIGHT_UPPER_LEG,
    RIGHT_LOWER_LEG,
    LEFT_UPPER_LEG,
    LEFT_LOWER_LEG,
];

const SPINE: [usize; 4] = [L3, T12, T8, NECK];
const SYMMETRIC_PAIRS: [(usize, usize); 8] = [
    (RIGHT_SHOULDER, LEFT_SHOULDER),
    (RIGHT_UPPER_ARM, LEFT_UPPER_ARM),
    (RIGHT_FOREARM, LEFT_FOREARM),
    (RIGHT_HAND, LEFT_HAND),
    (RIGHT_UPPER_LEG, LEFT_UPPER_LEG),
    (RIGHT_LOWER_LEG, LEFT_LOWER_LEG),
    (RIGHT_FOOT, LEFT_FOOT),
    (RIGHT_TOE, LEFT_TOE),
];

/// Marker corners attached to one body part, in the part's local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartMarkers {
    pub part: usize,
    pub markers: Vec<[Vector3<f64>; 4]>,
}

/// A point on a foot sole, used for the ground contact term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolePoint {
    pub joint: usize,
    pub local: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySkeleton {
    offsets: Vec<Vector3<f64>>,
    parts: Vec<PartMarkers>,
    soles: Vec<SolePoint>,
}

fn marker_square(center: Vector3<f64>, along: Vector3<f64>, normal: Vector3<f64>) -> [Vector3<f64>; 4] {
    let half = 0.025;
    let e1 = along.normalize();
    let e2 = normal.cross(&e1).normalize();
    [center - e1 * half - e2 * half, center + e1 * half - e2 * half, center + e1 * half + e2 * half, center - e1 * half + e2 * half]
}

fn limb_markers(part: usize, along: Vector3<f64>, length: f64, radius: f64, count: usize) -> PartMarkers {
    let d = along.normalize();
    let helper = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let u = d.cross(&helper).normalize();
    let w = d.cross(&u);
    let markers = (0..count)
        .map(|k| {
            let phi = std::f64::consts::TAU * k as f64 / count as f64 + 0.3;
            let radial = u * phi.cos() + w * phi.sin();
            let center = d * (length * (0.35 + 0.15 * (k % 2) as f64)) + radial * radius;
            marker_square(center, d, radial)
        })
        .collect();
    PartMarkers { part, markers }
}

impl BodySkeleton {
    pub fn new(offsets: Vec<Vector3<f64>>, parts: Vec<PartMarkers>, soles: Vec<SolePoint>) -> Result<Self, KinematicsError> {
        if offsets.len() != BODY_JOINTS {
            return Err(KinematicsError::InvalidSkeleton(format!("{} offsets, expected {BODY_JOINTS}", offsets.len())));
        }
        if offsets.iter().any(|o| o.iter().any(|v| !v.is_finite())) {
            return Err(KinematicsError::InvalidSkeleton("non-finite offset".into()));
        }
        let mut seen: Vec<usize> = parts.iter().map(|p| p.part).collect();
        seen.sort_unstable();
        let mut expected = INSTRUMENTED_PARTS.to_vec();
        expected.sort_unstable();
        if seen != expected {
            return Err(KinematicsError::InvalidSkeleton("markers must cover each instrumented part exactly once".into()));
        }
        for p in &parts {
            if !(3..=4).contains(&p.markers.len()) {
                return Err(KinematicsError::InvalidSkeleton(format!("{} carries {} markers, expected 3 or 4", JOINT_NAMES[p.part], p.markers.len())));
            }
            if p.markers.iter().flatten().any(|c| c.iter().any(|v| !v.is_finite())) {
                return Err(KinematicsError::InvalidSkeleton("non-finite marker corner".into()));
            }
        }
        if soles.iter().any(|s| s.joint >= BODY_JOINTS) {
            return Err(KinematicsError::InvalidSkeleton("sole joint out of range".into()));
        }
        Ok(Self { offsets, parts, soles })
    }

    /// Adult template in a T-pose: x forward, y left, z up.
    pub fn template() -> Self {
        let mut o = vec![Vector3::zeros(); BODY_JOINTS];
        o[L5] = Vector3::new(0.0, 0.0, 0.1);
        o[L3] = Vector3::new(0.0, 0.0, 0.1);
        o[T12] = Vector3::new(0.0, 0.0, 0.1);
        o[T8] = Vector3::new(0.0, 0.0, 0.1);
        o[NECK] = Vector3::new(0.0, 0.0, 0.18);
        o[HEAD] = Vector3::new(0.0, 0.0, 0.1);
        for (sign, sh, ua, fa, ha, ul, ll, ft, toe) in [
            (-1.0, RIGHT_SHOULDER, RIGHT_UPPER_ARM, RIGHT_FOREARM, RIGHT_HAND, RIGHT_UPPER_LEG, RIGHT_LOWER_LEG, RIGHT_FOOT, RIGHT_TOE),
            (1.0, LEFT_SHOULDER, LEFT_UPPER_ARM, LEFT_FOREARM, LEFT_HAND, LEFT_UPPER_LEG, LEFT_LOWER_LEG, LEFT_FOOT, LEFT_TOE),
        ] {
            o[sh] = Vector3::new(0.0, sign * 0.04, 0.12);
            o[ua] = Vector3::new(0.0, sign * 0.15, 0.0);
            o[fa] = Vector3::new(0.0, sign * 0.29, 0.0);
            o[ha] = Vector3::new(0.0, sign * 0.26, 0.0);
            o[ul] = Vector3::new(0.0, sign * 0.09, 0.0);
            o[ll] = Vector3::new(0.0, 0.0, -0.43);
            o[ft] = Vector3::new(0.0, 0.0, -0.42);
            o[toe] = Vector3::new(0.14, 0.0, -0.07);
        }
        let mut parts = vec![PartMarkers {
            part: T8,
            markers: vec![
                marker_square(Vector3::new(0.12, 0.0, 0.08), Vector3::z(), Vector3::x()),
                marker_square(Vector3::new(-0.12, 0.0, 0.1), Vector3::z(), -Vector3::x()),
                marker_square(Vector3::new(0.0, 0.14, 0.05), Vector3::z(), Vector3::y()),
                marker_square(Vector3::new(0.0, -0.14, 0.05), Vector3::z(), -Vector3::y()),
            ],
        }];
        for sign in [-1.0, 1.0] {
            let right = sign < 0.0;
            let pick = |r: usize, l: usize| if right { r } else { l };
            let lateral = Vector3::new(0.0, sign, 0.0);
            parts.push(limb_markers(pick(RIGHT_UPPER_ARM, LEFT_UPPER_ARM), lateral, 0.29, 0.05, 3));
            parts.push(limb_markers(pick(RIGHT_FOREARM, LEFT_FOREARM), lateral, 0.26, 0.04, 3));
            parts.push(limb_markers(pick(RIGHT_HAND, LEFT_HAND), lateral, 0.08, 0.03, 3));
            parts.push(limb_markers(pick(RIGHT_UPPER_LEG, LEFT_UPPER_LEG), -Vector3::z(), 0.43, 0.08, 4));
            parts.push(limb_markers(pick(RIGHT_LOWER_LEG, LEFT_LOWER_LEG), -Vector3::z(), 0.42, 0.055, 3));
        }
        parts.sort_by_key(|p| p.part);
        let mut soles = Vec::new();
        for (foot, toe) in [(RIGHT_FOOT, RIGHT_TOE), (LEFT_FOOT, LEFT_TOE)] {
            soles.push(SolePoint { joint: foot, local: Vector3::new(-0.04, 0.0, -0.08) });
            soles.push(SolePoint { joint: toe, local: Vector3::new(0.0, 0.0, -0.01) });
            soles.push(SolePoint { joint: toe, local: Vector3::new(0.05, 0.0, -0.01) });
        }
        Self::new(o, parts, soles).expect("template skeleton is valid")
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn parts(&self) -> &[PartMarkers] {
        &self.parts
    }

    pub fn soles(&self) -> &[SolePoint] {
        &self.soles
    }

    pub fn with_offsets(&self, offsets: Vec<Vector3<f64>>) -> Result<Self, KinematicsError> {
        Self::new(offsets, self.parts.clone(), self.soles.clone())
    }

    pub fn with_parts(&self, parts: Vec<PartMarkers>) -> Result<Self, KinematicsError> {
        Self::new(self.offsets.clone(), parts, self.soles.clone())
    }

    /// Total number of marker corners, in (part, marker, corner) order.
    pub fn corner_count(&self) -> usize {
        self.parts.iter().map(|p| 4 * p.markers.len()).sum()
    }

    /// Joint carrying each flattened corner.
    pub fn corner_joints(&self) -> Vec<usize> {
        self.parts.iter().flat_map(|p| std::iter::repeat_n(p.part, 4 * p.markers.len())).collect()
    }

    /// Flattened index range of the corners carried by `part`.
    pub fn part_corner_range(&self, part: usize) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for p in &self.parts {
            let n = 4 * p.markers.len();
            if p.part == part {
                return Some(start..start + n);
            }
            start += n;
        }
        None
    }

    fn local_corners(&self) -> Vec<Vector3<f64>> {
        self.parts.iter().flat_map(|p| p.markers.iter().flatten().copied()).collect()
    }

    fn set_local_corners(&mut self, corners: &[Vector3<f64>]) {
        let mut it = corners.iter();
        for p in &mut self.parts {
            for m in &mut p.markers {
                for c in m.iter_mut() {
                    *c = *it.next().expect("corner count matches");
                }
            }
        }
    }
}

/// Forward kinematics output in the person-centric frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyPose {
    /// Global pose of every joint.
    pub joints: Vec<RigidTransform>,
    /// Marker corners in (part, marker, corner) order.
    pub markers: Vec<Vector3<f64>>,
}

impl BodyPose {
    pub fn joint_positions(&self) -> Vec<Vector3<f64>> {
        self.joints.iter().map(|j| *j.translation()).collect()
    }
}

/// Body forward kinematics with the pelvis at the origin of the
/// person-centric frame. Each joint pose is
/// `parent ∘ translate(offset) ∘ rotate(angle)`.
pub fn fk_body(skel: &BodySkeleton, angles: &[[f64; 3]]) -> Result<BodyPose, KinematicsError> {
    fk_body_at(skel, angles, &RigidTransform::identity())
}

/// [`fk_body`] with the whole body placed by `root`.
pub fn fk_body_at(skel: &BodySkeleton, angles: &[[f64; 3]], root: &RigidTransform) -> Result<BodyPose, KinematicsError> {
    check_angles("body angles", angles, BODY_JOINTS)?;
    let mut joints: Vec<RigidTransform> = Vec::with_capacity(BODY_JOINTS);
    for j in 0..BODY_JOINTS {
        let local = RigidTransform::new(UnitQuaternion::from_scaled_axis(Vector3::from(angles[j])), skel.offsets[j]);
        let parent = match PARENTS[j] {
            Some(p) => joints[p],
            None => *root,
        };
        joints.push(parent.compose(&local));
    }
    let markers = skel
        .parts
        .iter()
        .flat_map(|p| {
            let pose = joints[p.part];
            p.markers.iter().flatten().map(move |c| pose.transform_point(c))
        })
        .collect();
    Ok(BodyPose { joints, markers })
}

/// Rigid transform taking mocap-space markers onto their triangulated
/// counterparts, using only the visible corners.
pub fn mocap_to_camera(mocap: &[Vector3<f64>], camera: &[Option<Vector3<f64>>]) -> Result<RigidTransform, KinematicsError> {
    if mocap.len() != camera.len() {
        return Err(crate::state::StateError::DimensionMismatch { what: "marker corners", expected: mocap.len(), got: camera.len() }.into());
    }
    let (src, dst): (Vec<_>, Vec<_>) = mocap.iter().zip(camera).filter_map(|(m, c)| c.map(|c| (*m, c))).unzip();
    if src.len() < 3 {
        return Err(KinematicsError::NoVisibleMarkers);
    }
    Ok(kabsch_points(&src, &dst)?)
}

/// Mocap angles plus triangulated marker corners (None when not visible).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyFrame {
    pub angles: Vec<[f64; 3]>,
    pub markers: Vec<Option<Vector3<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyCalibrationConfig {
    pub lambda_body: f64,
    pub lambda_foot: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Frames per optimizer step.
    pub batch_size: usize,
    /// Allowed floating band above the ground for the lowest sole point (m).
    pub foot_band: f64,
    /// Offsets held at their initial value besides the root.
    pub fixed_offsets: Vec<usize>,
    /// Weight of the spine length-change penalty; zero disables it.
    pub spine_regularizer: f64,
    /// Weight of the left/right length symmetry penalty; zero disables it.
    pub symmetry_regularizer: f64,
    /// Relative increase of the epoch loss tolerated before failing.
    pub loss_tolerance: f64,
    /// Levenberg damping added to the metric diagonal, relative to its largest entry.
    pub damping: f64,
}

impl Default for BodyCalibrationConfig {
    fn default() -> Self {
        Self {
            lambda_body: 100.0,
            lambda_foot: 5000.0,
            learning_rate: 0.008,
            epochs: 50,
            batch_size: 10,
            foot_band: 0.01,
            fixed_offsets: vec![L5],
            spine_regularizer: 0.0,
            symmetry_regularizer: 0.0,
            loss_tolerance: 1e-9,
            damping: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyCalibration {
    pub skeleton: BodySkeleton,
    /// Mean per-frame loss before optimization and after every epoch.
    pub epoch_losses: Vec<f64>,
    /// Root-mean-square corner distance after calibration (m).
    pub marker_rms: f64,
}

fn foot_hinge(z: f64, band: f64) -> (f64, f64) {
    if z < 0.0 {
        (z * z, 2.0 * z)
    } else if z > band {
        ((z - band) * (z - band), 2.0 * (z - band))
    } else {
        (0.0, 0.0)
    }
}

struct FrameEval {
    loss: f64,
    sq_error: f64,
    visible: usize,
}

/// Loss of one frame; accumulates gradients into `grad` (offsets then corners) when given.
fn eval_frame(
    skel: &BodySkeleton,
    frame: &BodyFrame,
    cfg: &BodyCalibrationConfig,
    corner_joints: &[usize],
    mut grad: Option<&mut [f64]>,
    scale: f64,
) -> Result<Option<FrameEval>, KinematicsError> {
    let pose = fk_body(skel, &frame.angles)?;
    let cam = match mocap_to_camera(&pose.markers, &frame.markers) {
        Ok(t) => t,
        Err(KinematicsError::NoVisibleMarkers) => return Ok(None),
        Err(e) => return Err(e),
    };
    let r_cam = cam.rotation().to_rotation_matrix().into_inner();
    let visible = frame.markers.iter().filter(|m| m.is_some()).count();
    let inv_n = 1.0 / visible as f64;
    // Per-joint accumulated gradient w.r.t. a point on the joint, in the person frame.
    let mut force = [Vector3::zeros(); BODY_JOINTS];
    let mut sq_error = 0.0;
    let mut body_loss = 0.0;
    let offsets_len = 3 * BODY_JOINTS;
    for (c, (x, y)) in pose.markers.iter().zip(&frame.markers).enumerate() {
        let Some(y) = y else { continue };
        let r = cam.transform_point(x) - y;
        let e = r.norm_squared();
        sq_error += e;
        body_loss += e * inv_n;
        if let Some(g) = grad.as_deref_mut() {
            let gx = r_cam.transpose() * (r * (2.0 * inv_n * cfg.lambda_body * scale));
            let j = corner_joints[c];
            force[j] += gx;
            let gm = pose.joints[j].rotation().inverse() * gx;
            for k in 0..3 {
                g[offsets_len + 3 * c + k] += gm[k];
            }
        }
    }
    let mut foot_loss = 0.0;
    if let Some((idx, z, sole)) = skel
        .soles
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = cam.transform_point(&pose.joints[s.joint].transform_point(&s.local));
            (i, p.z, p)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
    {
        let (h, dh) = foot_hinge(z, cfg.foot_band);
        foot_loss = h;
        if dh != 0.0 {
            if let Some(g) = grad.as_deref_mut() {
                let k = cfg.lambda_foot * dh * scale;
                force[skel.soles[idx].joint] += r_cam.transpose() * Vector3::z() * k;
                // The camera transform is re-solved from the markers, so moving a
                // corner also moves the sole through the transform.
                for (c, gc) in kabsch_sensitivity(&cam, &pose.markers, &frame.markers, &sole) {
                    let gx = r_cam.transpose() * (gc * k);
                    let j = corner_joints[c];
                    force[j] += gx;
                    let gm = pose.joints[j].rotation().inverse() * gx;
                    for a in 0..3 {
                        g[offsets_len + 3 * c + a] += gm[a];
                    }
                }
            }
        }
    }
    if let Some(g) = grad {
        for j in (1..BODY_JOINTS).rev() {
            let p = PARENTS[j].expect("non-root joint");
            let go = pose.joints[p].rotation().inverse() * force[j];
            for k in 0..3 {
                g[3 * j + k] += go[k];
            }
            let f = force[j];
            force[p] += f;
        }
    }
    Ok(Some(FrameEval { loss: cfg.lambda_body * body_loss + cfg.lambda_foot * foot_loss, sq_error, visible }))
}

/// Derivative of the height of `point` (camera frame, carried by `cam`) with
/// respect to each visible corner's camera-frame position, through the
/// least-squares transform. Implicit differentiation of the optimality
/// conditions, with rotations parameterized about the corner centroid.
fn kabsch_sensitivity(cam: &RigidTransform, mocap: &[Vector3<f64>], observed: &[Option<Vector3<f64>>], point: &Vector3<f64>) -> Vec<(usize, Vector3<f64>)> {
    let vis: Vec<(usize, Vector3<f64>, Vector3<f64>)> =
        mocap.iter().zip(observed).enumerate().filter_map(|(c, (x, y))| y.map(|y| (c, cam.transform_point(x), y))).collect();
    let n = vis.len() as f64;
    let centroid = vis.iter().map(|v| v.1).sum::<Vector3<f64>>() / n;
    let mut b = Matrix3::zeros();
    for (_, tx, y) in &vis {
        let u = tx - centroid;
        let r = tx - y;
        b += (Matrix3::identity() * u.norm_squared() - u * u.transpose()) * 2.0;
        b += r * u.transpose() + u * r.transpose() - Matrix3::identity() * (2.0 * r.dot(&u));
    }
    let q = (point - centroid).cross(&Vector3::z());
    let w = b.try_inverse().map(|bi| bi * q).unwrap_or_else(Vector3::zeros);
    vis.iter()
        .map(|(c, tx, y)| {
            let u = tx - centroid;
            let r = tx - y;
            (*c, -(Vector3::z() / n + w.cross(&(u - r)) * 2.0))
        })
        .collect()
}

fn chain(joint: usize) -> impl Iterator<Item = usize> {
    std::iter::successors(Some(joint), |&j| PARENTS[j]).filter(|&j| j != PELVIS)
}

/// Gauss-Newton metric of the mean per-frame loss, with the per-frame
/// camera transform projected out. Frames are processed in fixed chunks so
/// the sum does not depend on the thread count.
fn gauss_newton_metric(
    skel: &BodySkeleton,
    frames: &[BodyFrame],
    cfg: &BodyCalibrationConfig,
    corner_joints: &[usize],
    free: &[bool],
) -> Result<DMatrix<f64>, KinematicsError> {
    let parts: Vec<(DMatrix<f64>, usize)> =
        frames.par_chunks(METRIC_CHUNK).map(|chunk| metric_chunk(skel, chunk, cfg, corner_joints, free)).collect::<Result<_, _>>()?;
    let used: usize = parts.iter().map(|p| p.1).sum();
    if used == 0 {
        return Err(KinematicsError::NoVisibleMarkers);
    }
    let mut h = DMatrix::zeros(free.len(), free.len());
    for (part, _) in &parts {
        h += part;
    }
    Ok(h * (2.0 / used as f64))
}

const METRIC_CHUNK: usize = 16;

fn metric_chunk(
    skel: &BodySkeleton,
    frames: &[BodyFrame],
    cfg: &BodyCalibrationConfig,
    corner_joints: &[usize],
    free: &[bool],
) -> Result<(DMatrix<f64>, usize), KinematicsError> {
    let np = free.len();
    let mut h = DMatrix::zeros(np, np);
    let mut projected: Vec<f64> = Vec::new();
    let mut foot_rows: Vec<f64> = Vec::new();
    let mut used = 0usize;
    for frame in frames {
        let pose = fk_body(skel, &frame.angles)?;
        let cam = match mocap_to_camera(&pose.markers, &frame.markers) {
            Ok(t) => t,
            Err(KinematicsError::NoVisibleMarkers) => continue,
            Err(e) => return Err(e),
        };
        used += 1;
        let r_cam = cam.rotation().to_rotation_matrix().into_inner();
        let rot = |j: usize| pose.joints[j].rotation().to_rotation_matrix().into_inner();
        let visible: Vec<usize> = (0..frame.markers.len()).filter(|&c| frame.markers[c].is_some()).collect();
        let w = cfg.lambda_body / visible.len() as f64;
        let centroid = visible.iter().map(|&c| cam.transform_point(&pose.markers[c])).sum::<Vector3<f64>>() / visible.len() as f64;
        let mut g = Matrix6::zeros();
        let mut k = DMatrix::zeros(6, np);
        for &c in &visible {
            let part = corner_joints[c];
            let mut blocks: Vec<(usize, Matrix3<f64>)> = vec![(3 * BODY_JOINTS + 3 * c, r_cam * rot(part))];
            for j in chain(part) {
                if free[3 * j] {
                    let parent = PARENTS[j].expect("non-root joint");
                    blocks.push((3 * j, r_cam * rot(parent)));
                }
            }
            for (a, xa) in &blocks {
                for (b, xb) in &blocks {
                    let mut view = h.fixed_view_mut::<3, 3>(*a, *b);
                    view += xa.transpose() * xb * w;
                }
            }
            let u = cam.transform_point(&pose.markers[c]) - centroid;
            let mut jt = Matrix3x6::zeros();
            jt.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jt.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&u)));
            g += jt.transpose() * jt * w;
            for (a, xa) in &blocks {
                let mut view = k.fixed_view_mut::<6, 3>(0, *a);
                view += jt.transpose() * xa * w;
            }
        }
        let Some(chol) = g.cholesky() else { continue };
        // Rows of L⁻¹K, subtracted below as (L⁻¹K)ᵀ(L⁻¹K) = Kᵀ G⁻¹ K.
        let l = chol.l();
        let z = l.solve_lower_triangular(&k).expect("cholesky factor is invertible");
        projected.extend(z.transpose().iter());
        if let Some((joint, p)) =
            skel.soles.iter().map(|s| (s.joint, cam.transform_point(&pose.joints[s.joint].transform_point(&s.local)))).min_by(|a, b| a.1.z.total_cmp(&b.1.z))
        {
            if foot_hinge(p.z, cfg.foot_band).1 != 0.0 {
                let mut f = DVector::zeros(np);
                for j in chain(joint) {
                    if free[3 * j] {
                        let parent = PARENTS[j].expect("non-root joint");
                        let col: Vector3<f64> = (r_cam * rot(parent)).transpose() * Vector3::z();
                        f.fixed_rows_mut::<3>(3 * j).copy_from(&col);
                    }
                }
                let mut jft = Vector6::zeros();
                jft.fixed_rows_mut::<3>(0).copy_from(&Vector3::z());
                jft.fixed_rows_mut::<3>(3).copy_from(&(p - centroid).cross(&Vector3::z()));
                let m = chol.solve(&jft);
                f -= k.transpose() * m;
                foot_rows.extend((f * cfg.lambda_foot.sqrt()).iter());
            }
        }
    }
    if !projected.is_empty() {
        let z = DMatrix::from_row_slice(projected.len() / np, np, &projected);
        h -= z.transpose() * &z;
    }
    if !foot_rows.is_empty() {
        let f = DMatrix::from_row_slice(foot_rows.len() / np, np, &foot_rows);
        h += f.transpose() * &f;
    }
    Ok((h, used))
}

fn regularizer(offsets: &[Vector3<f64>], initial: &[Vector3<f64>], cfg: &BodyCalibrationConfig, grad: Option<&mut [f64]>) -> f64 {
    let mut loss = 0.0;
    let mut g_off = vec![Vector3::zeros(); BODY_JOINTS];
    let unit = |v: &Vector3<f64>| if v.norm() > 0.0 { v / v.norm() } else { Vector3::zeros() };
    if cfg.spine_regularizer > 0.0 {
        for &j in &SPINE {
            let d = offsets[j].norm() - initial[j].norm();
            loss += cfg.spine_regularizer * d * d;
            g_off[j] += unit(&offsets[j]) * (2.0 * cfg.spine_regularizer * d);
        }
    }
    if cfg.symmetry_regularizer > 0.0 {
        for &(r, l) in &SYMMETRIC_PAIRS {
            let d = offsets[r].norm() - offsets[l].norm();
            loss += cfg.symmetry_regularizer * d * d;
            g_off[r] += unit(&offsets[r]) * (2.0 * cfg.symmetry_regularizer * d);
            g_off[l] -= unit(&offsets[l]) * (2.0 * cfg.symmetry_regularizer * d);
        }
    }
    if let Some(g) = grad {
        for (j, v) in g_off.iter().enumerate() {
            for k in 0..3 {
                g[3 * j + k] += v[k];
            }
        }
    }
    loss
}

fn pack(skel: &BodySkeleton) -> Vec<f64> {
    skel.offsets.iter().chain(skel.local_corners().iter()).flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn unpack(template: &BodySkeleton, params: &[f64]) -> BodySkeleton {
    let vecs: Vec<Vector3<f64>> = params.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    let mut skel = template.clone();
    skel.offsets = vecs[..BODY_JOINTS].to_vec();
    skel.set_local_corners(&vecs[BODY_JOINTS..]);
    skel
}

/// Mean per-frame loss (plus regularizers) and the corner RMS of a skeleton.
pub fn body_loss(skel: &BodySkeleton, frames: &[BodyFrame], initial: &BodySkeleton, cfg: &BodyCalibrationConfig) -> Result<(f64, f64), KinematicsError> {
    let joints = skel.corner_joints();
    let mut total = 0.0;
    let mut used = 0usize;
    let mut sq = 0.0;
    let mut n = 0usize;
    for f in frames {
        if let Some(e) = eval_frame(skel, f, cfg, &joints, None, 1.0)? {
            total += e.loss;
            used += 1;
            sq += e.sq_error;
            n += e.visible;
        }
    }
    if used == 0 {
        return Err(KinematicsError::NoVisibleMarkers);
    }
    let reg = regularizer(&skel.offsets, &initial.offsets, cfg, None);
    Ok((total / used as f64 + reg, (sq / n as f64).sqrt()))
}

fn check_frames(skel: &BodySkeleton, frames: &[BodyFrame]) -> Result<(), KinematicsError> {
    let n = skel.corner_count();
    for f in frames {
        check_angles("body angles", &f.angles, BODY_JOINTS)?;
        if f.markers.len() != n {
            return Err(crate::state::StateError::DimensionMismatch { what: "marker corners", expected: n, got: f.markers.len() }.into());
        }
    }
    Ok(())
}

fn batch_gradient(
    skel: &BodySkeleton,
    batch: &[BodyFrame],
    initial: &BodySkeleton,
    cfg: &BodyCalibrationConfig,
    joints: &[usize],
    frozen: &[bool],
) -> Result<Vec<f64>, KinematicsError> {
    let mut grad = vec![0.0; frozen.len()];
    let scale = 1.0 / batch.len() as f64;
    for f in batch {
        eval_frame(skel, f, cfg, joints, Some(&mut grad), scale)?;
    }
    regularizer(&skel.offsets, &initial.offsets, cfg, Some(&mut grad));
    for (g, &fz) in grad.iter_mut().zip(frozen) {
        if fz {
            *g = 0.0;
        }
    }
    Ok(grad)
}

/// Jointly refines skeleton offsets and marker placements so forward
/// kinematics matches the triangulated markers, with the lowest sole point
/// kept inside the ground band. The per-frame mocap-to-camera transform is
/// re-solved in closed form at every step.
pub fn calibrate_body(frames: &[BodyFrame], init: &BodySkeleton, cfg: &BodyCalibrationConfig) -> Result<BodyCalibration, KinematicsError> {
    check_frames(init, frames)?;
    if frames.is_empty() || cfg.batch_size == 0 {
        return Err(KinematicsError::NoVisibleMarkers);
    }
    let joints = init.corner_joints();
    let mut params = pack(init);
    let mut frozen = vec![false; params.len()];
    for j in std::iter::once(PELVIS).chain(cfg.fixed_offsets.iter().copied()) {
        frozen[3 * j..3 * j + 3].fill(true);
    }
    let free: Vec<bool> = frozen.iter().map(|f| !f).collect();
    let (initial_loss, _) = body_loss(init, frames, init, cfg)?;
    let mut epoch_losses = vec![initial_loss];
    let mut skel = init.clone();
    for epoch in 0..cfg.epochs {
        let mut metric = gauss_newton_metric(&skel, frames, cfg, &joints, &free)?;
        let scale = metric.diagonal().max().max(f64::MIN_POSITIVE);
        for i in 0..params.len() {
            metric[(i, i)] += if frozen[i] { scale } else { cfg.damping * scale };
        }
        let chol = metric.cholesky().ok_or_else(|| KinematicsError::NonConvergence(format!("singular metric in epoch {epoch}")))?;
        // Variance-reduced batch gradients: each batch gradient is corrected by
        // its value at the epoch snapshot plus the full snapshot gradient.
        let snapshot = skel.clone();
        let full = batch_gradient(&snapshot, frames, init, cfg, &joints, &frozen)?;
        for batch in frames.chunks(cfg.batch_size) {
            let now = batch_gradient(&skel, batch, init, cfg, &joints, &frozen)?;
            let then = batch_gradient(&snapshot, batch, init, cfg, &joints, &frozen)?;
            let grad = DVector::from_iterator(params.len(), (0..params.len()).map(|i| now[i] - then[i] + full[i]));
            let step = chol.solve(&grad);
            for (p, d) in params.iter_mut().zip(step.iter()) {
                *p -= cfg.learning_rate * d;
            }
            skel = unpack(init, &params);
        }
        let (loss, _) = body_loss(&skel, frames, init, cfg)?;
        if !loss.is_finite() {
            return Err(KinematicsError::NonConvergence(format!("loss {loss} in epoch {epoch}")));
        }
        let previous = *epoch_losses.last().expect("initial loss recorded");
        if loss > previous * (1.0 + cfg.loss_tolerance) + 1e-18 {
            return Err(KinematicsError::NonDecreasingLoss { epoch, previous, current: loss });
        }
        epoch_losses.push(loss);
    }
    let (_, marker_rms) = body_loss(&skel, frames, init, cfg)?;
    Ok(BodyCalibration { skeleton: skel, epoch_losses, marker_rms })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRom {
    pub frames: Vec<BodyFrame>,
    /// Ground-truth mocap-to-camera transform per frame.
    pub camera_from_mocap: Vec<RigidTransform>,
}

/// Random range-of-motion poses for `truth`, placed so the lowest sole point
/// floats `band / 2` above the floor.
pub fn synthetic_rom(truth: &BodySkeleton, frames: usize, marker_noise: f64, dropout: f64, band: f64, seed: u64) -> SyntheticRom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, marker_noise.max(0.0)).expect("finite noise");
    let mut ranges = [[0.3; 3]; BODY_JOINTS];
    ranges[PELVIS] = [0.15, 0.15, 3.0];
    for j in [RIGHT_SHOULDER, LEFT_SHOULDER] {
        ranges[j] = [0.4; 3];
    }
    for j in [RIGHT_UPPER_ARM, LEFT_UPPER_ARM, RIGHT_FOREARM, LEFT_FOREARM] {
        ranges[j] = [1.0; 3];
    }
    for j in [RIGHT_HAND, LEFT_HAND, RIGHT_UPPER_LEG, LEFT_UPPER_LEG] {
        ranges[j] = [0.7; 3];
    }
    for j in [RIGHT_LOWER_LEG, LEFT_LOWER_LEG] {
        ranges[j] = [0.3, 0.9, 0.3];
    }
    let mut out = SyntheticRom { frames: Vec::with_capacity(frames), camera_from_mocap: Vec::with_capacity(frames) };
    for _ in 0..frames {
        let angles: Vec<[f64; 3]> = ranges.iter().map(|r| r.map(|a| rng.random_range(-a..=a))).collect();
        let pose = fk_body(truth, &angles).expect("angles have body shape");
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let mut t = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
        );
        let lowest = truth.soles.iter().map(|s| t.transform_point(&pose.joints[s.joint].transform_point(&s.local)).z).fold(f64::INFINITY, f64::min);
        t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, band / 2.0 - lowest)).compose(&t);
        let markers = pose
            .markers
            .iter()
            .map(|m| {
                if dropout > 0.0 && rng.random::<f64>() < dropout {
                    return None;
                }
                let mut p = t.transform_point(m);
                if marker_noise > 0.0 {
                    p += Vector3::from_fn(|_, _| noise.sample(&mut rng));
                }
                Some(p)
            })
            .collect();
        out.frames.push(BodyFrame { angles, markers });
        out.camera_from_mocap.push(t);
    }
    out
}

/// Adds a random displacement of length `magnitude` to each listed offset.
pub fn perturb_offsets(skel: &BodySkeleton, joints: &[usize], magnitude: f64, seed: u64) -> BodySkeleton {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut offsets = skel.offsets.clone();
    for &j in joints {
        let d = Vector3::from_fn(|_, _| normal.sample(&mut rng)).normalize();
        offsets[j] += d * magnitude;
    }
    skel.with_offsets(offsets).expect("finite offsets")
}

/// Largest offset error among `joints`.
pub fn max_offset_error(a: &BodySkeleton, b: &BodySkeleton, joints: &[usize]) -> f64 {
    joints.iter().map(|&j| (a.offsets[j] - b.offsets[j]).norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rest() -> Vec<[f64; 3]> {
        vec![[0.0; 3]; BODY_JOINTS]
    }

    #[test]
    fn parents_precede_children() {
        for (j, p) in PARENTS.iter().enumerate() {
            assert_eq!(p.is_none(), j == PELVIS);
            if let Some(p) = p {
                assert!(*p < j);
            }
        }
    }

    #[test]
    fn template_is_valid() {
        let s = BodySkeleton::template();
        assert_eq!(s.parts().len(), 11);
        assert_eq!(s.corner_count(), 4 * 36);
        let mut bad = s.parts().to_vec();
        bad[0].markers.truncate(2);
        assert!(s.with_parts(bad).is_err());
        let mut bad = s.parts().to_vec();
        bad.pop();
        assert!(s.with_parts(bad).is_err());
    }

    #[test]
    fn rest_pose_composes_offsets() {
        let s = BodySkeleton::template();
        let pose = fk_body(&s, &rest()).unwrap();
        // Right hand joint = sum of offsets along its chain.
        let chain = [L5, L3, T12, T8, RIGHT_SHOULDER, RIGHT_UPPER_ARM, RIGHT_FOREARM, RIGHT_HAND];
        let expected: Vector3<f64> = chain.iter().map(|&j| s.offsets()[j]).sum();
        assert_relative_eq!(*pose.joints[RIGHT_HAND].translation(), expected, epsilon = 1e-12);
        let range = s.part_corner_range(RIGHT_HAND).unwrap();
        let local: Vec<_> = s.parts().iter().find(|p| p.part == RIGHT_HAND).unwrap().markers.iter().flatten().copied().collect();
        for (c, l) in pose.markers[range].iter().zip(local) {
            assert_relative_eq!(*c, expected + l, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_joint_bend() {
        let s = BodySkeleton::template();
        let mut angles = rest();
        angles[RIGHT_FOREARM] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let bent = fk_body(&s, &angles).unwrap();
        let straight = fk_body(&s, &rest()).unwrap();
        let elbow = *straight.joints[RIGHT_FOREARM].translation();
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        for part in [RIGHT_FOREARM, RIGHT_HAND] {
            for c in s.part_corner_range(part).unwrap() {
                let expected = elbow + rz * (straight.markers[c] - elbow);
                assert_relative_eq!(bent.markers[c], expected, epsilon = 1e-9);
            }
        }
        let upper = s.part_corner_range(RIGHT_UPPER_ARM).unwrap();
        assert_eq!(bent.markers[upper.clone()], straight.markers[upper]);
    }

    #[test]
    fn wrong_angle_shape() {
        let s = BodySkeleton::template();
        assert!(matches!(fk_body(&s, &vec![[0.0; 3]; 22]), Err(KinematicsError::Dimension(_))));
    }

    #[test]
    fn mocap_to_camera_cases() {
        let s = BodySkeleton::template();
        let rom = synthetic_rom(&s, 5, 0.0, 0.0, 0.01, 7);
        for (f, t) in rom.frames.iter().zip(&rom.camera_from_mocap) {
            let pose = fk_body(&s, &f.angles).unwrap();
            let got = mocap_to_camera(&pose.markers, &f.markers).unwrap();
            assert!(got.rotation_angle_to(t) < 1e-9);
            assert!(got.translation_distance_to(t) < 1e-9);
            // Subset consistency: a single marker gives the same transform.
            let mut subset = vec![None; f.markers.len()];
            subset[8..12].copy_from_slice(&f.markers[8..12]);
            let one = mocap_to_camera(&pose.markers, &subset).unwrap();
            assert!(one.rotation_angle_to(t) < 1e-9);
            assert!(one.translation_distance_to(t) < 1e-9);
        }
        let pose = fk_body(&s, &rest()).unwrap();
        assert_eq!(mocap_to_camera(&pose.markers, &vec![None; pose.markers.len()]), Err(KinematicsError::NoVisibleMarkers));
    }

    #[test]
    fn single_marker_under_noise() {
        let s = BodySkeleton::template();
        let rom = synthetic_rom(&s, 200, 0.0, 0.0, 0.01, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.001).unwrap();
        let range = s.part_corner_range(T8).unwrap();
        let mut errors = Vec::new();
        for (f, t) in rom.frames.iter().zip(&rom.camera_from_mocap) {
            let pose = fk_body(&s, &f.angles).unwrap();
            let mut cam = vec![None; f.markers.len()];
            for c in range.start..range.start + 4 {
                cam[c] = f.markers[c].map(|p| p + Vector3::from_fn(|_, _| noise.sample(&mut rng)));
            }
            let got = mocap_to_camera(&pose.markers, &cam).unwrap();
            // Error of the transform over the visible marker.
            let err =
                (range.start..range.start + 4).map(|c| (got.transform_point(&pose.markers[c]) - t.transform_point(&pose.markers[c])).norm()).sum::<f64>() / 4.0;
            errors.push(err);
        }
        errors.sort_by(f64::total_cmp);
        let median = errors[errors.len() / 2];
        assert!(median < 0.005, "{median}");
    }

    #[test]
    fn equivariance_under_root_motion() {
        let s = BodySkeleton::template();
        let rom = synthetic_rom(&s, 3, 0.0, 0.0, 0.01, 10);
        let g = RigidTransform::new(UnitQuaternion::from_euler_angles(0.3, -0.2, 1.0), Vector3::new(0.5, -1.0, 2.0));
        for f in &rom.frames {
            let a = fk_body(&s, &f.angles).unwrap();
            let b = fk_body_at(&s, &f.angles, &g).unwrap();
            for (p, q) in a.markers.iter().zip(&b.markers) {
                assert_relative_eq!(g.transform_point(p), *q, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let truth = BodySkeleton::template();
        let rom = synthetic_rom(&truth, 2, 0.0, 0.1, 0.01, 11);
        let init = perturb_offsets(&truth, &CALIBRATED_OFFSETS, 0.02, 12);
        let cfg = BodyCalibrationConfig::default();
        let joints = init.corner_joints();
        let frame = &rom.frames[0];
        let mut grad = vec![0.0; pack(&init).len()];
        eval_frame(&init, frame, &cfg, &joints, Some(&mut grad), 1.0).unwrap();
        let loss = |s: &BodySkeleton| -> f64 { eval_frame(s, frame, &cfg, &joints, None, 1.0).unwrap().unwrap().loss };
        let base = pack(&init);
        let h = 1e-6;
        for i in 3..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let up = loss(&unpack(&init, &p));
            p[i] -= 2.0 * h;
            let down = loss(&unpack(&init, &p));
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-4 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn fixed_point_at_ground_truth() {
        let truth = BodySkeleton::template();
        let rom = synthetic_rom(&truth, 50, 0.0, 0.0, 0.01, 13);
        let cfg = BodyCalibrationConfig { epochs: 3, ..Default::default() };
        let out = calibrate_body(&rom.frames, &truth, &cfg).unwrap();
        assert!(out.epoch_losses[0] < 1e-20);
        assert!(out.marker_rms < 1e-9);
        assert!(max_offset_error(&out.skeleton, &truth, &(0..BODY_JOINTS).collect::<Vec<_>>()) < 1e-6);
    }

    #[test]
    fn recovers_perturbed_offsets() {
        let truth = BodySkeleton::template();
        let rom = synthetic_rom(&truth, 300, 0.0, 0.0, 0.01, 14);
        let init = perturb_offsets(&truth, &CALIBRATED_OFFSETS, 0.02, 15);
        let out = calibrate_body(&rom.frames, &init, &BodyCalibrationConfig::default()).unwrap();
        let err = max_offset_error(&out.skeleton, &truth, &CALIBRATED_OFFSETS);
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] <= w[0], "{:?}", out.epoch_losses);
        }
        assert!(err < 0.003, "max offset error {err}, losses {:?}", out.epoch_losses);
    }

    #[test]
    fn metric_matches_hessian_at_optimum() {
        let truth = BodySkeleton::template();
        let rom = synthetic_rom(&truth, 6, 0.0, 0.0, 0.01, 16);
        let cfg = BodyCalibrationConfig::default();
        let joints = truth.corner_joints();
        let mut free = vec![true; pack(&truth).len()];
        free[..6].fill(false);
        let h = gauss_newton_metric(&truth, &rom.frames, &cfg, &joints, &free).unwrap();
        let full_grad = |p: &[f64]| -> DVector<f64> {
            let s = unpack(&truth, p);
            let mut g = vec![0.0; p.len()];
            for f in &rom.frames {
                eval_frame(&s, f, &cfg, &joints, Some(&mut g), 1.0 / rom.frames.len() as f64).unwrap();
            }
            g[..6].fill(0.0);
            DVector::from_vec(g)
        };
        let base = pack(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d: Vec<f64> = (0..base.len()).map(|i| if i < 6 { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        let eps = 1e-6;
        let plus: Vec<f64> = base.iter().zip(&d).map(|(b, x)| b + eps * x).collect();
        let minus: Vec<f64> = base.iter().zip(&d).map(|(b, x)| b - eps * x).collect();
        let fd = (full_grad(&plus) - full_grad(&minus)) / (2.0 * eps);
        let hd = &h * DVector::from_vec(d);
        let err = (&fd - &hd).amax();
        assert!(err < 1e-4 * fd.amax(), "{err} vs {}", fd.amax());
    }

    #[test]
    fn overshooting_step_reports_increase() {
        let truth = BodySkeleton::template();
        let rom = synthetic_rom(&truth, 40, 0.0, 0.0, 0.01, 18);
        let init = perturb_offsets(&truth, &CALIBRATED_OFFSETS, 0.02, 19);
        let cfg = BodyCalibrationConfig { learning_rate: 40.0, epochs: 5, ..Default::default() };
        assert!(matches!(calibrate_body(&rom.frames, &init, &cfg), Err(KinematicsError::NonDecreasingLoss { .. }) | Err(KinematicsError::Rigid(_))));
    }

    #[test]
    fn regularizer_gradient() {
        let truth = BodySkeleton::template();
        let init = perturb_offsets(&truth, &CALIBRATED_OFFSETS, 0.02, 20);
        let cfg = BodyCalibrationConfig { spine_regularizer: 3.0, symmetry_regularizer: 2.0, ..Default::default() };
        let mut g = vec![0.0; 3 * BODY_JOINTS];
        regularizer(init.offsets(), truth.offsets(), &cfg, Some(&mut g));
        let h = 1e-7;
        for i in 0..3 * BODY_JOINTS {
            let mut o = init.offsets().to_vec();
            o[i / 3][i % 3] += h;
            let up = regularizer(&o, truth.offsets(), &cfg, None);
            o[i / 3][i % 3] -= 2.0 * h;
            let down = regularizer(&o, truth.offsets(), &cfg, None);
            assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-6);
        }
        assert_eq!(regularizer(truth.offsets(), truth.offsets(), &BodyCalibrationConfig::default(), None), 0.0);
    }
}
