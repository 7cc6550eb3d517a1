//! Glove skeleton, fingertip forward kinematics and touch-based calibration.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::KinematicsError;
use crate::geometry::RigidTransform;
use crate::optim::Adam;
use crate::rigid::kabsch_points;
use crate::state::{check_angles, StateError, HAND_JOINTS};

pub const FINGERS: usize = 5;
pub const SEGMENTS_PER_FINGER: usize = 4;
pub const FINGER_NAMES: [&str; FINGERS] = ["thumb", "index", "middle", "ring", "little"];
pub const HAND_MARKERS: usize = 3;
pub const SCALE_MIN: f64 = 0.8;
pub const SCALE_MAX: f64 = 1.2;
/// Bound on every offset component (m).
pub const OFFSET_MAX: f64 = 0.01;
pub const STRUCTURE_CORNERS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

/// Per-segment scales and offsets on top of a template, plus the wrist
/// marker corners in the hand frame (x toward the fingers, z out of the back
/// of the hand, origin at the wrist).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HandSkeletonRepr")]
pub struct HandSkeleton {
    side: HandSide,
    template: Vec<Vector3<f64>>,
    scales: Vec<f64>,
    offsets: Vec<Vector3<f64>>,
    markers: Vec<[Vector3<f64>; 4]>,
}

#[derive(Deserialize)]
struct HandSkeletonRepr {
    side: HandSide,
    template: Vec<Vector3<f64>>,
    scales: Vec<f64>,
    offsets: Vec<Vector3<f64>>,
    markers: Vec<[Vector3<f64>; 4]>,
}

impl TryFrom<HandSkeletonRepr> for HandSkeleton {
    type Error = KinematicsError;

    fn try_from(r: HandSkeletonRepr) -> Result<Self, Self::Error> {
        HandSkeleton::new(r.side, r.template, r.scales, r.offsets, r.markers)
    }
}

fn dims(what: &'static str, expected: usize, got: usize) -> Result<(), KinematicsError> {
    if expected != got {
        return Err(StateError::DimensionMismatch { what, expected, got }.into());
    }
    Ok(())
}

impl HandSkeleton {
    pub fn new(
        side: HandSide,
        template: Vec<Vector3<f64>>,
        scales: Vec<f64>,
        offsets: Vec<Vector3<f64>>,
        markers: Vec<[Vector3<f64>; 4]>,
    ) -> Result<Self, KinematicsError> {
        dims("hand template", HAND_JOINTS, template.len())?;
        dims("hand scales", HAND_JOINTS, scales.len())?;
        dims("hand offsets", HAND_JOINTS, offsets.len())?;
        dims("hand markers", HAND_MARKERS, markers.len())?;
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !template.iter().all(finite) || !markers.iter().flatten().all(finite) {
            return Err(KinematicsError::InvalidSkeleton("non-finite hand geometry".into()));
        }
        if let Some((i, s)) = scales.iter().enumerate().find(|(_, s)| !(SCALE_MIN..=SCALE_MAX).contains(*s)) {
            return Err(KinematicsError::ConstraintViolation(format!("segment {i} scale {s} outside [{SCALE_MIN}, {SCALE_MAX}]")));
        }
        if let Some((i, o)) = offsets.iter().enumerate().find(|(_, o)| o.amax().is_nan() || o.amax() > OFFSET_MAX) {
            return Err(KinematicsError::ConstraintViolation(format!("segment {i} offset {:?} exceeds {OFFSET_MAX} m", o.as_slice())));
        }
        Ok(Self { side, template, scales, offsets, markers })
    }

    /// Adult template with unit scales and zero offsets.
    pub fn template(side: HandSide) -> Self {
        let y = if side == HandSide::Right { 1.0 } else { -1.0 };
        let v = |a: f64, b: f64, c: f64| Vector3::new(a, b * y, c);
        let template = vec![
            v(0.025, 0.02, -0.01),
            v(0.035, 0.018, 0.0),
            v(0.03, 0.01, 0.0),
            v(0.025, 0.006, 0.0),
            v(0.085, 0.02, 0.0),
            v(0.04, 0.0, 0.0),
            v(0.025, 0.0, 0.0),
            v(0.02, 0.0, 0.0),
            v(0.085, 0.0, 0.0),
            v(0.045, 0.0, 0.0),
            v(0.028, 0.0, 0.0),
            v(0.022, 0.0, 0.0),
            v(0.08, -0.02, 0.0),
            v(0.042, 0.0, 0.0),
            v(0.026, 0.0, 0.0),
            v(0.021, 0.0, 0.0),
            v(0.075, -0.038, 0.0),
            v(0.033, 0.0, 0.0),
            v(0.02, 0.0, 0.0),
            v(0.019, 0.0, 0.0),
        ];
        let square = |cx: f64, cy: f64, cz: f64, tilt: f64| {
            let h = 0.0125;
            let e1 = Vector3::new(1.0, 0.0, 0.0);
            let e2 = Vector3::new(0.0, tilt.cos(), tilt.sin());
            let c = v(cx, cy, cz);
            [c - e1 * h - e2 * h, c + e1 * h - e2 * h, c + e1 * h + e2 * h, c - e1 * h + e2 * h]
        };
        let markers = vec![square(0.0, 0.015, 0.03, 0.3), square(0.0, -0.018, 0.03, -0.3), square(0.04, 0.0, 0.028, 0.0)];
        Self::new(side, template, vec![1.0; HAND_JOINTS], vec![Vector3::zeros(); HAND_JOINTS], markers).expect("template hand is valid")
    }

    pub fn side(&self) -> HandSide {
        self.side
    }

    pub fn template_segments(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn markers(&self) -> &[[Vector3<f64>; 4]] {
        &self.markers
    }

    pub fn with_scales(&self, scales: Vec<f64>) -> Result<Self, KinematicsError> {
        Self::new(self.side, self.template.clone(), scales, self.offsets.clone(), self.markers.clone())
    }

    pub fn with_offsets(&self, offsets: Vec<Vector3<f64>>) -> Result<Self, KinematicsError> {
        Self::new(self.side, self.template.clone(), self.scales.clone(), offsets, self.markers.clone())
    }

    pub fn with_markers(&self, markers: Vec<[Vector3<f64>; 4]>) -> Result<Self, KinematicsError> {
        Self::new(self.side, self.template.clone(), self.scales.clone(), self.offsets.clone(), markers)
    }

    fn marker_corners(&self) -> Vec<Vector3<f64>> {
        self.markers.iter().flatten().copied().collect()
    }

    /// Length-weighted mean scale of one finger.
    pub fn finger_scale(&self, finger: usize) -> f64 {
        let segs = finger * SEGMENTS_PER_FINGER..(finger + 1) * SEGMENTS_PER_FINGER;
        let total: f64 = self.template[segs.clone()].iter().map(|o| o.norm()).sum();
        segs.map(|k| self.scales[k] * self.template[k].norm()).sum::<f64>() / total
    }
}

/// Hand frame relative to the body's hand joint: fingers continue the arm
/// (body −y on the right, +y on the left) with the back of the hand up and
/// the thumb forward in the rest pose.
pub fn wrist_frame(side: HandSide) -> RigidTransform {
    let (x, y) = match side {
        HandSide::Right => (-Vector3::y(), Vector3::x()),
        HandSide::Left => (Vector3::y(), -Vector3::x()),
    };
    let m = nalgebra::Matrix3::from_columns(&[x, y, Vector3::z()]);
    RigidTransform::from_rotation(UnitQuaternion::from_matrix(&m))
}

/// Joint and fingertip positions in the hand frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    /// End point of every segment, finger-major.
    pub joints: Vec<Vector3<f64>>,
    /// Accumulated rotation of every segment, same order as `joints`.
    pub rotations: Vec<UnitQuaternion<f64>>,
    pub tips: [Vector3<f64>; FINGERS],
}

/// Each segment end is `parent + R(scale · template + offset)`, where `R`
/// accumulates the glove rotations from the wrist to that segment.
pub fn fk_hand(skel: &HandSkeleton, angles: &[[f64; 3]]) -> Result<HandPose, KinematicsError> {
    check_angles("hand angles", angles, HAND_JOINTS)?;
    let mut joints = Vec::with_capacity(HAND_JOINTS);
    let mut rotations = Vec::with_capacity(HAND_JOINTS);
    let mut tips = [Vector3::zeros(); FINGERS];
    for (f, tip) in tips.iter_mut().enumerate() {
        let mut rot = UnitQuaternion::identity();
        let mut pos = Vector3::zeros();
        for k in 0..SEGMENTS_PER_FINGER {
            let i = f * SEGMENTS_PER_FINGER + k;
            rot *= UnitQuaternion::from_scaled_axis(Vector3::from(angles[i]));
            pos += rot * (skel.template[i] * skel.scales[i] + skel.offsets[i]);
            joints.push(pos);
            rotations.push(rot);
        }
        *tip = pos;
    }
    Ok(HandPose { joints, rotations, tips })
}

/// Six ordered corners of the calibration structure with outward normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStructure {
    pub corners: [Vector3<f64>; STRUCTURE_CORNERS],
    pub normals: [Vector3<f64>; STRUCTURE_CORNERS],
}

impl CalibrationStructure {
    pub fn new(corners: [Vector3<f64>; STRUCTURE_CORNERS], normals: [Vector3<f64>; STRUCTURE_CORNERS]) -> Result<Self, KinematicsError> {
        if corners.iter().chain(&normals).any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(KinematicsError::InvalidStructure("non-finite geometry".into()));
        }
        if normals.iter().any(|n| n.norm() < 1e-9) {
            return Err(KinematicsError::InvalidStructure("zero normal".into()));
        }
        Ok(Self { corners, normals: normals.map(|n| n.normalize()) })
    }

    /// Three stacked cubes, in the structure's own frame.
    pub fn reference() -> Self {
        let corners = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.06, 0.0, 0.0),
            Vector3::new(0.06, 0.035, 0.0),
            Vector3::new(0.0, 0.06, 0.03),
            Vector3::new(0.03, -0.03, 0.03),
            Vector3::new(0.0, 0.03, 0.06),
        ];
        let center = Vector3::new(0.03, 0.02, -0.03);
        let normals = corners.map(|c| c - center);
        Self::new(corners, normals).expect("reference structure is valid")
    }

    pub fn transformed(&self, pose: &RigidTransform) -> Self {
        Self { corners: self.corners.map(|c| pose.transform_point(&c)), normals: self.normals.map(|n| pose.transform_vector(&n)) }
    }

    /// Checks that pairwise corner distances match `declared` within 1 mm.
    pub fn check_rigidity(&self, declared: &CalibrationStructure) -> Result<(), KinematicsError> {
        for i in 0..STRUCTURE_CORNERS {
            for j in i + 1..STRUCTURE_CORNERS {
                let a = (self.corners[i] - self.corners[j]).norm();
                let b = (declared.corners[i] - declared.corners[j]).norm();
                if (a - b).abs() > 1e-3 {
                    return Err(KinematicsError::InvalidStructure(format!("corners {i}-{j}: {a:.4} m measured, {b:.4} m declared")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Touch {
    pub finger: usize,
    pub corner: usize,
}

/// Touch protocol: per step, which finger touches which corner (zero-based;
/// fingers ordered thumb to little).
pub fn hand_protocol(side: HandSide) -> Vec<Vec<Touch>> {
    let rows: [&[usize]; 6] = match side {
        HandSide::Right => [&[1, 2], &[1, 3], &[2, 4], &[5, 2], &[6, 2], &[6, 3, 2]],
        HandSide::Left => [&[2, 1], &[3, 1], &[4, 2], &[5, 2], &[6, 2], &[2, 5, 6]],
    };
    let pairs: [&[usize]; 4] = [&[1, 2], &[1, 3], &[1, 4], &[1, 5]];
    let triples: [&[usize]; 3] = [&[1, 2, 3], &[1, 3, 4], &[1, 4, 5]];
    let mut steps = Vec::new();
    for corners in rows {
        let seqs: &[&[usize]] = if corners.len() == 3 { &triples } else { &pairs };
        for fingers in seqs {
            steps.push(corners.iter().zip(fingers.iter()).map(|(&c, &f)| Touch { finger: f - 1, corner: c - 1 }).collect());
        }
    }
    steps
}

/// One touch step: glove angles, observed wrist marker corners (None when
/// not visible) and the wrist position from the body mocap, all at the
/// contact frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandTouchStep {
    pub touches: Vec<Touch>,
    pub angles: Vec<[f64; 3]>,
    pub markers: Vec<Option<Vector3<f64>>>,
    pub wrist: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandCalibrationConfig {
    pub lambda_tip: f64,
    pub lambda_wrist: f64,
    pub lambda_pen: f64,
    pub iterations: usize,
    pub scale_start: usize,
    pub offset_start: usize,
    pub lr_markers: f64,
    pub lr_scales: f64,
    pub lr_offsets: f64,
    /// Central-difference step for the numerical gradient.
    pub gradient_step: f64,
}

impl Default for HandCalibrationConfig {
    fn default() -> Self {
        Self {
            lambda_tip: 1.0,
            lambda_wrist: 1.0,
            lambda_pen: 1.0,
            iterations: 150,
            scale_start: 50,
            offset_start: 100,
            lr_markers: 0.002,
            lr_scales: 0.01,
            lr_offsets: 0.001,
            gradient_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandCalibration {
    pub skeleton: HandSkeleton,
    /// Mean fingertip-to-corner distance after calibration (m).
    pub tip_residual: f64,
    /// Total loss before optimization and after every iteration.
    pub loss_history: Vec<f64>,
}

fn hand_to_camera(skel: &HandSkeleton, step: &HandTouchStep) -> Result<RigidTransform, KinematicsError> {
    let (src, dst): (Vec<_>, Vec<_>) = skel.marker_corners().into_iter().zip(&step.markers).filter_map(|(m, o)| o.map(|o| (m, o))).unzip();
    if src.len() < 3 {
        return Err(KinematicsError::NoVisibleMarkers);
    }
    Ok(kabsch_points(&src, &dst)?)
}

struct LossTerms {
    tip: f64,
    wrist: f64,
    pen: f64,
}

fn loss_terms(skel: &HandSkeleton, steps: &[HandTouchStep], structure: &CalibrationStructure) -> Result<LossTerms, KinematicsError> {
    let mut tip = 0.0;
    let mut pen = 0.0;
    let mut wrist = 0.0;
    let mut touches = 0usize;
    for step in steps {
        let t = hand_to_camera(skel, step)?;
        let pose = fk_hand(skel, &step.angles)?;
        for touch in &step.touches {
            let p = t.transform_point(&pose.tips[touch.finger]);
            let d = p - structure.corners[touch.corner];
            tip += d.norm();
            // Depth of the tip behind the corner along the outward normal.
            pen += (-structure.normals[touch.corner].dot(&d)).max(0.0);
            touches += 1;
        }
        wrist += (t.translation() - step.wrist).norm();
    }
    Ok(LossTerms { tip: tip / touches as f64, wrist: wrist / steps.len() as f64, pen: pen / touches as f64 })
}

const MARKER_PARAMS: usize = 3 * 4 * HAND_MARKERS;
const SCALE_PARAMS: usize = HAND_JOINTS;

fn pack(skel: &HandSkeleton) -> Vec<f64> {
    let mut p: Vec<f64> = skel.marker_corners().iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    p.extend(&skel.scales);
    p.extend(skel.offsets.iter().flat_map(|v| [v.x, v.y, v.z]));
    p
}

fn unpack(base: &HandSkeleton, p: &[f64]) -> Result<HandSkeleton, KinematicsError> {
    let v = |i: usize| Vector3::new(p[i], p[i + 1], p[i + 2]);
    let markers = (0..HAND_MARKERS).map(|m| std::array::from_fn(|c| v(12 * m + 3 * c))).collect();
    let scales = p[MARKER_PARAMS..MARKER_PARAMS + SCALE_PARAMS].to_vec();
    let offsets = (0..HAND_JOINTS).map(|j| v(MARKER_PARAMS + SCALE_PARAMS + 3 * j)).collect();
    HandSkeleton::new(base.side, base.template.clone(), scales, offsets, markers)
}

fn project(p: &mut [f64]) {
    for s in &mut p[MARKER_PARAMS..MARKER_PARAMS + SCALE_PARAMS] {
        *s = s.clamp(SCALE_MIN, SCALE_MAX);
    }
    for o in &mut p[MARKER_PARAMS + SCALE_PARAMS..] {
        *o = o.clamp(-OFFSET_MAX, OFFSET_MAX);
    }
}

fn validate_steps(steps: &[HandTouchStep]) -> Result<(), KinematicsError> {
    if steps.iter().all(|s| s.touches.is_empty()) {
        return Err(KinematicsError::NoEvents);
    }
    for s in steps {
        check_angles("hand angles", &s.angles, HAND_JOINTS)?;
        dims("hand marker corners", 4 * HAND_MARKERS, s.markers.len())?;
        for t in &s.touches {
            if t.finger >= FINGERS || t.corner >= STRUCTURE_CORNERS {
                return Err(KinematicsError::InvalidStructure(format!("touch {t:?} out of range")));
            }
        }
    }
    Ok(())
}

/// Staged projected-gradient calibration of the hand markers, segment scales
/// and offsets. Every iterate satisfies the scale and offset bounds.
pub fn calibrate_hand(
    steps: &[HandTouchStep],
    structure: &CalibrationStructure,
    init: &HandSkeleton,
    cfg: &HandCalibrationConfig,
) -> Result<HandCalibration, KinematicsError> {
    calibrate_hand_observed(steps, structure, init, cfg, |_, _| {})
}

/// [`calibrate_hand`] calling `observe` with every accepted iterate.
pub fn calibrate_hand_observed(
    steps: &[HandTouchStep],
    structure: &CalibrationStructure,
    init: &HandSkeleton,
    cfg: &HandCalibrationConfig,
    mut observe: impl FnMut(usize, &HandSkeleton),
) -> Result<HandCalibration, KinematicsError> {
    validate_steps(steps)?;
    let total = |s: &HandSkeleton| -> Result<f64, KinematicsError> {
        let l = loss_terms(s, steps, structure)?;
        Ok(cfg.lambda_tip * l.tip + cfg.lambda_wrist * l.wrist + cfg.lambda_pen * l.pen)
    };
    let mut params = pack(init);
    let initial = total(init)?;
    let mut loss_history = vec![initial];
    // The loss is a sum of distances, so first-order iterates chatter around
    // the minimum; the lowest-loss iterate is returned.
    let mut best = (initial, init.clone());
    let mut adam = Adam::new(params.len(), 1e-6);
    let groups = [
        (0..MARKER_PARAMS, 0, cfg.lr_markers),
        (MARKER_PARAMS..MARKER_PARAMS + SCALE_PARAMS, cfg.scale_start, cfg.lr_scales),
        (MARKER_PARAMS + SCALE_PARAMS..params.len(), cfg.offset_start, cfg.lr_offsets),
    ];
    let h = cfg.gradient_step;
    for it in 0..cfg.iterations {
        let mut grad = vec![0.0; params.len()];
        for (range, start, _) in &groups {
            if it < *start {
                continue;
            }
            for i in range.clone() {
                // Differences are taken on the clamped box so the probe stays feasible.
                let mut up = params.clone();
                up[i] += h;
                project(&mut up);
                let mut down = params.clone();
                down[i] -= h;
                project(&mut down);
                let span = up[i] - down[i];
                if span > 0.0 {
                    grad[i] = (total(&unpack(init, &up)?)? - total(&unpack(init, &down)?)?) / span;
                }
            }
        }
        for (range, start, lr) in &groups {
            if it < *start {
                continue;
            }
            let progress = (it - start) as f64 / (cfg.iterations - start).max(1) as f64;
            let rate = lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.step(&mut params, &grad, range.clone(), rate);
        }
        project(&mut params);
        let skel = unpack(init, &params)?;
        observe(it, &skel);
        let loss = total(&skel)?;
        if !loss.is_finite() {
            return Err(KinematicsError::NonConvergence(format!("hand loss became {loss} at iteration {it}")));
        }
        loss_history.push(loss);
        if loss < best.0 {
            best = (loss, skel);
        }
    }
    let skel = best.1;
    let tip_residual = loss_terms(&skel, steps, structure)?.tip;
    Ok(HandCalibration { skeleton: skel, tip_residual, loss_history })
}

/// Average fingertip-to-corner distance over touch events.
pub fn validate_hand_ape(skel: &HandSkeleton, events: &[HandTouchStep], structure: &CalibrationStructure) -> Result<f64, KinematicsError> {
    validate_steps(events)?;
    Ok(loss_terms(skel, events, structure)?.tip)
}

/// Solves for a hand placement and touching-finger angles that put each
/// touching fingertip on its target.
fn solve_touch(truth: &HandSkeleton, touches: &[Touch], targets: &[Vector3<f64>], angles: &mut [[f64; 3]], pose: &mut RigidTransform) -> bool {
    // Unknowns: hand rotation and translation increments, then flexion and
    // spread of each touching finger joint.
    let fingers: Vec<usize> = touches.iter().map(|t| t.finger).collect();
    let n = 6 + fingers.len() * SEGMENTS_PER_FINGER * 2;
    let residual = |angles: &[[f64; 3]], pose: &RigidTransform| -> DVector<f64> {
        let fk = fk_hand(truth, angles).expect("hand angles have the right shape");
        let mut r = DVector::zeros(3 * touches.len());
        for (k, (t, target)) in touches.iter().zip(targets).enumerate() {
            r.fixed_rows_mut::<3>(3 * k).copy_from(&(pose.transform_point(&fk.tips[t.finger]) - target));
        }
        r
    };
    let apply = |x: &DVector<f64>, angles: &mut [[f64; 3]], pose: &mut RigidTransform| {
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(x[0], x[1], x[2]));
        let centre = *pose.translation();
        *pose = RigidTransform::new(rot * pose.rotation(), centre + Vector3::new(x[3], x[4], x[5]));
        for (fi, &f) in fingers.iter().enumerate() {
            for k in 0..SEGMENTS_PER_FINGER {
                let j = f * SEGMENTS_PER_FINGER + k;
                angles[j][1] += x[6 + fi * 8 + 2 * k];
                angles[j][2] += x[6 + fi * 8 + 2 * k + 1];
            }
        }
    };
    for _ in 0..60 {
        let r = residual(angles, pose);
        if r.amax() < 1e-13 {
            return angles.iter().all(|a| a[1].abs() < 1.8 && a[2].abs() < 0.6);
        }
        let eps = 1e-7;
        let mut jac = DMatrix::zeros(r.len(), n);
        for i in 0..n {
            let mut x = DVector::zeros(n);
            x[i] = eps;
            let (mut a, mut p) = (angles.to_vec(), *pose);
            apply(&x, &mut a, &mut p);
            let up = residual(&a, &p);
            x[i] = -eps;
            let (mut a, mut p) = (angles.to_vec(), *pose);
            apply(&x, &mut a, &mut p);
            let down = residual(&a, &p);
            jac.set_column(i, &((up - down) / (2.0 * eps)));
        }
        let Ok(step) = jac.svd(true, true).solve(&(-&r), 1e-12) else {
            return false;
        };
        apply(&step, angles, pose);
    }
    false
}

/// Synthetic touch steps for `truth` following `protocol`, with the tip
/// landing `touch_noise` away from each target corner.
pub fn synthetic_touches(
    truth: &HandSkeleton,
    structure: &CalibrationStructure,
    protocol: &[Vec<Touch>],
    touch_noise: f64,
    marker_noise: f64,
    seed: u64,
) -> Vec<HandTouchStep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let corners = truth.marker_corners();
    let mut out = Vec::with_capacity(protocol.len());
    for touches in protocol {
        let targets: Vec<Vector3<f64>> =
            touches.iter().map(|t| structure.corners[t.corner] + Vector3::from_fn(|_, _| unit.sample(&mut rng)) * touch_noise).collect();
        let (angles, pose) = loop {
            let mut angles: Vec<[f64; 3]> = (0..HAND_JOINTS).map(|_| [0.0, rng.random_range(0.1..0.6), rng.random_range(-0.1..0.1)]).collect();
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let tilt = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
            let rot = UnitQuaternion::from_scaled_axis(tilt) * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
            let fk = fk_hand(truth, &angles).expect("hand angles have the right shape");
            let tip_mean = touches.iter().map(|t| rot * fk.tips[t.finger]).sum::<Vector3<f64>>() / touches.len() as f64;
            let target_mean = targets.iter().sum::<Vector3<f64>>() / targets.len() as f64;
            let mut pose = RigidTransform::new(rot, target_mean - tip_mean);
            if solve_touch(truth, touches, &targets, &mut angles, &mut pose) {
                break (angles, pose);
            }
        };
        let markers = corners.iter().map(|c| Some(pose.transform_point(c) + Vector3::from_fn(|_, _| unit.sample(&mut rng)) * marker_noise)).collect();
        out.push(HandTouchStep { touches: touches.clone(), angles, markers, wrist: *pose.translation() });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn placed_structure() -> CalibrationStructure {
        CalibrationStructure::reference().transformed(&RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 0.4), Vector3::new(1.0, 0.5, 0.9)))
    }

    fn perturbed_markers(skel: &HandSkeleton) -> HandSkeleton {
        let g = RigidTransform::new(UnitQuaternion::from_euler_angles(0.03, -0.02, 0.04), Vector3::new(0.004, -0.003, 0.002));
        skel.with_markers(skel.markers().iter().map(|m| m.map(|c| g.transform_point(&c))).collect()).unwrap()
    }

    #[test]
    fn protocol_shape() {
        for side in [HandSide::Right, HandSide::Left] {
            let p = hand_protocol(side);
            assert_eq!(p.len(), 23);
            assert_eq!(p.iter().filter(|s| s.len() == 3).count(), 3);
            assert!(p.iter().all(|s| s[0].finger == 0));
        }
        let r = hand_protocol(HandSide::Right);
        assert_eq!(r[0], vec![Touch { finger: 0, corner: 0 }, Touch { finger: 1, corner: 1 }]);
        assert_eq!(r[22], vec![Touch { finger: 0, corner: 5 }, Touch { finger: 3, corner: 2 }, Touch { finger: 4, corner: 1 },]);
        let l = hand_protocol(HandSide::Left);
        assert_eq!(l[7], vec![Touch { finger: 0, corner: 2 }, Touch { finger: 4, corner: 0 }]);
        assert_eq!(l[20], vec![Touch { finger: 0, corner: 1 }, Touch { finger: 1, corner: 4 }, Touch { finger: 2, corner: 5 },]);
    }

    #[test]
    fn template_fk_and_scaling() {
        let t = HandSkeleton::template(HandSide::Right);
        let rest = vec![[0.0; 3]; HAND_JOINTS];
        let pose = fk_hand(&t, &rest).unwrap();
        let index_tip: Vector3<f64> = t.template_segments()[4..8].iter().sum();
        assert_relative_eq!(pose.tips[1], index_tip, epsilon = 1e-12);
        let mut scales = vec![1.0; HAND_JOINTS];
        scales[4..8].fill(1.2);
        let scaled = fk_hand(&t.with_scales(scales).unwrap(), &rest).unwrap();
        assert_relative_eq!(scaled.tips[1], index_tip * 1.2, epsilon = 1e-9);
        assert_eq!(scaled.tips[2], pose.tips[2]);
        let left = HandSkeleton::template(HandSide::Left);
        let lp = fk_hand(&left, &rest).unwrap();
        assert_relative_eq!(lp.tips[0].y, -pose.tips[0].y, epsilon = 1e-12);
    }

    #[test]
    fn constraints_enforced() {
        let t = HandSkeleton::template(HandSide::Right);
        let mut s = vec![1.0; HAND_JOINTS];
        s[3] = 1.5;
        assert!(matches!(t.with_scales(s), Err(KinematicsError::ConstraintViolation(_))));
        let mut o = vec![Vector3::zeros(); HAND_JOINTS];
        o[0].z = 0.011;
        assert!(matches!(t.with_offsets(o), Err(KinematicsError::ConstraintViolation(_))));
        let json = serde_json::to_string(&t).unwrap().replace("1.0,1.0,1.0", "1.0,1.3,1.0");
        assert!(serde_json::from_str::<HandSkeleton>(&json).is_err());
        assert!(fk_hand(&t, &vec![[0.0; 3]; 19]).is_err());
    }

    #[test]
    fn structure_rigidity() {
        let s = placed_structure();
        s.check_rigidity(&CalibrationStructure::reference()).unwrap();
        let mut bent = s.clone();
        bent.corners[3].x += 0.002;
        assert!(bent.check_rigidity(&CalibrationStructure::reference()).is_err());
    }

    #[test]
    fn synthetic_touches_hit_targets() {
        let truth = HandSkeleton::template(HandSide::Right);
        let structure = placed_structure();
        let steps = synthetic_touches(&truth, &structure, &hand_protocol(HandSide::Right), 0.0, 0.0, 1);
        assert_eq!(steps.len(), 23);
        assert!(validate_hand_ape(&truth, &steps, &structure).unwrap() < 1e-9);
    }

    #[test]
    fn fixed_point() {
        let truth = HandSkeleton::template(HandSide::Right);
        let structure = placed_structure();
        let steps = synthetic_touches(&truth, &structure, &hand_protocol(HandSide::Right), 0.0, 0.0, 2);
        let out = calibrate_hand(&steps, &structure, &truth, &HandCalibrationConfig::default()).unwrap();
        assert!(out.tip_residual < 1e-6);
        let a = pack(&truth);
        let b = pack(&out.skeleton);
        let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "{drift}");
    }

    #[test]
    fn recovers_finger_scales() {
        let base = HandSkeleton::template(HandSide::Right);
        let finger_scales = [0.87, 1.12, 0.92, 1.08, 0.86];
        let scales: Vec<f64> = (0..HAND_JOINTS).map(|j| finger_scales[j / 4]).collect();
        let truth = base.with_scales(scales.clone()).unwrap();
        let structure = placed_structure();
        let steps = synthetic_touches(&truth, &structure, &hand_protocol(HandSide::Right), 0.0, 0.0, 3);
        let init = perturbed_markers(&base);
        let mut feasible = true;
        let out = calibrate_hand_observed(&steps, &structure, &init, &HandCalibrationConfig::default(), |_, s| {
            feasible &= s.scales().iter().all(|v| (SCALE_MIN..=SCALE_MAX).contains(v)) && s.offsets().iter().all(|o| o.amax() <= OFFSET_MAX);
        })
        .unwrap();
        assert!(feasible);
        for f in 0..FINGERS {
            let got = out.skeleton.finger_scale(f);
            assert!((got - finger_scales[f]).abs() < 0.02, "finger {f}: {got} vs {}", finger_scales[f]);
        }
        assert!(out.tip_residual < 0.002, "{}", out.tip_residual);
    }

    #[test]
    fn noisy_touch_residual() {
        let base = HandSkeleton::template(HandSide::Left);
        let structure = placed_structure();
        let steps = synthetic_touches(&base, &structure, &hand_protocol(HandSide::Left), 0.002, 0.0005, 4);
        let out = calibrate_hand(&steps, &structure, &perturbed_markers(&base), &HandCalibrationConfig::default()).unwrap();
        assert!(out.tip_residual < 0.012, "{}", out.tip_residual);
    }

    #[test]
    fn ape_corridor() {
        let truth = HandSkeleton::template(HandSide::Right);
        let structure = placed_structure();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let protocol: Vec<Vec<Touch>> =
            (0..86).map(|_| vec![Touch { finger: rng.random_range(0..FINGERS), corner: rng.random_range(0..STRUCTURE_CORNERS) }]).collect();
        let clean = synthetic_touches(&truth, &structure, &protocol, 0.0, 0.0, 6);
        assert!(validate_hand_ape(&truth, &clean, &structure).unwrap() < 1e-9);
        let noisy = synthetic_touches(&truth, &structure, &protocol, 0.003, 0.0, 7);
        let ape = validate_hand_ape(&truth, &noisy, &structure).unwrap();
        assert!((0.002..=0.008).contains(&ape), "{ape}");
        assert_eq!(validate_hand_ape(&truth, &[], &structure), Err(KinematicsError::NoEvents));
    }

    #[test]
    fn wrist_frame_extends_the_arm() {
        for (side, arm) in [(HandSide::Right, -1.0), (HandSide::Left, 1.0)] {
            let w = wrist_frame(side);
            let pose = fk_hand(&HandSkeleton::template(side), &vec![[0.0; 3]; HAND_JOINTS]).unwrap();
            let middle = w.transform_point(&pose.tips[2]);
            assert!(middle.y * arm > 0.15 && middle.z.abs() < 1e-9, "{middle:?}");
            // Thumb forward, back of the hand up.
            assert!(w.transform_point(&pose.tips[0]).x > 0.0);
            assert!((w.transform_vector(&Vector3::z()) - Vector3::z()).norm() < 1e-12);
            assert_eq!(pose.rotations.len(), HAND_JOINTS);
        }
    }
}
