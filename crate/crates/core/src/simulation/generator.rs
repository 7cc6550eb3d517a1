//! Synthetic ground truth: camera rings, an animated human proxy, carried
//! objects and the streams derived from them.

use std::f64::consts::{PI, TAU};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mesh::{Mesh, SurfacePoint};
use super::{Capsule, SimulationError, SyntheticScene};
use crate::geometry::{CameraModel, MarkerCube, Rig, RigidTransform, CUBE_FACES};
use crate::kinematics::body::*;
use crate::kinematics::{fk_body_at, BodySkeleton};
use crate::postprocess::{marker_weight, CarrySequence, WristSample};
use crate::state::BODY_JOINTS;

pub const IMAGE_WIDTH: u32 = 1280;
pub const IMAGE_HEIGHT: u32 = 1024;
pub const FOCAL_PX: f64 = 900.0;
const CAMERA_HEIGHTS: [f64; 3] = [0.6, 1.5, 2.4];
/// Half extents of the carried box (m).
pub const TARGET_HALF: [f64; 3] = [0.1, 0.075, 0.06];
pub const CUBE_EDGE: f64 = 0.06;
const PELVIS_HEIGHT: f64 = 0.94;

/// Cameras on a ring of `radius` around the capture volume, cycling over
/// three mounting heights and aimed near the volume centre.
pub fn ring_rig(count: usize, radius: f64, seed: u64) -> Result<Rig, SimulationError> {
    if count == 0 || !(radius.is_finite() && radius > 0.5) {
        return Err(SimulationError::InvalidSpec(format!("{count} cameras on radius {radius}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let cams = (0..count)
        .map(|k| {
            let az = TAU * k as f64 / count as f64 + rng.random_range(-0.05..0.05);
            let eye = Vector3::new(radius * az.cos(), radius * az.sin(), CAMERA_HEIGHTS[k % 3]);
            let target = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.9 + rng.random_range(-0.2..0.2));
            CameraModel::look_at(k as u32, FOCAL_PX, IMAGE_WIDTH, IMAGE_HEIGHT, eye, target, Vector3::z())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Rig::new(cams)?)
}

/// Table and shelf blocks standing on the floor.
pub fn furniture() -> Mesh {
    let block = |half: Vector3<f64>, at: Vector3<f64>| Mesh::cuboid(half).transformed(&RigidTransform::from_translation(at));
    Mesh::merge(&[block(Vector3::new(0.3, 0.5, 0.375), Vector3::new(1.3, 0.0, 0.375)), block(Vector3::new(0.2, 0.5, 0.9), Vector3::new(-1.9, 1.4, 0.9))])
}

/// Body angles and root pose of a person walking an ellipse, carrying
/// something in the right hand while the left arm swings.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyMotion {
    pub angles: Vec<Vec<[f64; 3]>>,
    pub roots: Vec<RigidTransform>,
}

fn between(from: Vector3<f64>, to: Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&from, &to).unwrap_or_else(UnitQuaternion::identity)
}

pub fn body_motion(frames: usize, rate_hz: f64, seed: u64) -> BodyMotion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0d1);
    let phase0 = rng.random_range(0.0..TAU);
    let lap = rng.random_range(10.0..14.0);
    let (ax, ay) = (rng.random_range(0.8..1.0), rng.random_range(0.7..0.9));
    let centre = Vector3::new(-0.3, 0.0, 0.0);
    let lift_rate = rng.random_range(0.15..0.3);
    let mut angles = Vec::with_capacity(frames);
    let mut roots = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / rate_hz;
        let psi = phase0 + TAU * t / lap;
        let pos = centre + Vector3::new(ax * psi.cos(), ay * psi.sin(), PELVIS_HEIGHT);
        let heading = (ay * psi.cos()).atan2(-ax * psi.sin()) + 0.3 * (0.21 * TAU * t).sin();
        let root = RigidTransform::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), heading), pos);
        let stride = TAU * 1.8 * t;
        let mut a = vec![[0.0; 3]; BODY_JOINTS];
        let set = |a: &mut Vec<[f64; 3]>, j: usize, q: UnitQuaternion<f64>| a[j] = q.scaled_axis().into();
        // Right arm: forearm held forward, rising and falling slowly.
        let lift = 0.35 * (TAU * lift_rate * t).sin();
        let ua = between(-Vector3::y(), Vector3::new(0.35, -0.15, -1.0).normalize());
        let fa_world = between(-Vector3::y(), Vector3::new(1.0, 0.25, 0.1 + lift).normalize());
        set(&mut a, RIGHT_UPPER_ARM, ua);
        set(&mut a, RIGHT_FOREARM, ua.inverse() * fa_world);
        set(&mut a, RIGHT_HAND, UnitQuaternion::from_euler_angles(0.4 * (0.37 * TAU * t).sin(), 0.0, 0.0));
        // Left arm swings against the right leg.
        let swing = 0.35 * stride.sin();
        set(&mut a, LEFT_UPPER_ARM, between(Vector3::y(), Vector3::new(swing, 0.15, -1.0).normalize()));
        set(&mut a, LEFT_FOREARM, UnitQuaternion::from_euler_angles(0.0, -0.3, 0.0));
        for (leg, knee, phase) in [(RIGHT_UPPER_LEG, RIGHT_LOWER_LEG, 0.0), (LEFT_UPPER_LEG, LEFT_LOWER_LEG, PI)] {
            let s = stride + phase;
            set(&mut a, leg, UnitQuaternion::from_euler_angles(0.0, 0.35 * s.sin(), 0.0));
            set(&mut a, knee, UnitQuaternion::from_euler_angles(0.0, 0.5 * (s + PI / 2.0).sin().max(0.0), 0.0));
        }
        set(&mut a, HEAD, UnitQuaternion::from_euler_angles(0.0, 0.1 * (0.3 * TAU * t).sin(), 0.4 * (0.13 * TAU * t).sin()));
        angles.push(a);
        roots.push(root);
    }
    BodyMotion { angles, roots }
}

fn segment_radius(j: usize) -> f64 {
    match j {
        L5 | L3 | T12 | T8 => 0.13,
        NECK => 0.06,
        HEAD => 0.06,
        RIGHT_SHOULDER | LEFT_SHOULDER => 0.06,
        RIGHT_UPPER_ARM | LEFT_UPPER_ARM => 0.05,
        RIGHT_FOREARM | LEFT_FOREARM => 0.045,
        RIGHT_HAND | LEFT_HAND => 0.04,
        RIGHT_UPPER_LEG | LEFT_UPPER_LEG => 0.09,
        RIGHT_LOWER_LEG | LEFT_LOWER_LEG => 0.07,
        RIGHT_FOOT | LEFT_FOOT => 0.05,
        _ => 0.04,
    }
}

/// Capsule chain along every bone plus head and hand volumes.
pub fn body_capsules(joints: &[RigidTransform]) -> Vec<Capsule> {
    let pos = |j: usize| *joints[j].translation();
    let mut caps: Vec<Capsule> =
        (1..BODY_JOINTS).map(|j| Capsule { a: pos(PARENTS[j].expect("non-root joint has a parent")), b: pos(j), radius: segment_radius(j) }).collect();
    caps.push(Capsule { a: pos(HEAD), b: joints[HEAD].transform_point(&Vector3::new(0.0, 0.0, 0.16)), radius: 0.1 });
    for (hand, side) in [(RIGHT_HAND, -1.0), (LEFT_HAND, 1.0)] {
        caps.push(Capsule { a: pos(hand), b: joints[hand].transform_point(&Vector3::new(0.0, side * 0.09, 0.0)), radius: 0.035 });
    }
    caps
}

/// Joint poses of the template body for every frame of `motion`.
pub fn joint_stream(skeleton: &BodySkeleton, motion: &BodyMotion) -> Vec<Vec<RigidTransform>> {
    motion.angles.iter().zip(&motion.roots).map(|(a, r)| fk_body_at(skeleton, a, r).expect("generated angles have body shape").joints).collect()
}

/// Box target carried by the right hand, in the hand frame.
pub fn grip() -> RigidTransform {
    RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, -PI / 2.0), Vector3::new(0.0, -0.16, 0.0))
}

/// Fingers over the top face and a thumb under the box, in the box frame.
/// The wrist sits beyond the -x face.
pub fn grip_capsules() -> Vec<Capsule> {
    let (hx, hz) = (TARGET_HALF[0], TARGET_HALF[2]);
    let r = 0.018;
    let mut caps: Vec<Capsule> = [-0.045, -0.015, 0.015, 0.045]
        .iter()
        .map(|&y| Capsule { a: Vector3::new(-hx - 0.01, y, hz + r), b: Vector3::new(-0.02, y, hz + r), radius: r })
        .collect();
    caps.push(Capsule { a: Vector3::new(-hx - 0.01, 0.0, -hz - 0.02), b: Vector3::new(-0.03, 0.0, -hz - 0.02), radius: 0.02 });
    caps
}

pub fn target_mesh() -> Mesh {
    Mesh::cuboid(Vector3::from(TARGET_HALF))
}

/// The two marker cubes on the carried box: one on top, one on the +x end.
pub fn target_cubes(first_id: u32) -> Vec<MarkerCube> {
    let h = Vector3::from(TARGET_HALF);
    let e = CUBE_EDGE / 2.0;
    vec![
        MarkerCube::new(first_id, CUBE_EDGE, RigidTransform::from_translation(Vector3::new(0.03, 0.0, h.z + e))).expect("valid cube"),
        MarkerCube::new(first_id + 1, CUBE_EDGE, RigidTransform::from_translation(Vector3::new(h.x + e, 0.0, 0.0))).expect("valid cube"),
    ]
}

/// Exposed fiducial corners of [`target_cubes`] with their face normals,
/// in the target frame. Faces glued to the box are skipped.
pub fn target_cube_corners() -> Vec<SurfacePoint> {
    let mut out = Vec::new();
    for cube in target_cubes(0) {
        let inward = -cube.mount.translation().normalize();
        for face in 0..CUBE_FACES {
            let n = cube.mount.transform_vector(&MarkerCube::face_normal(face));
            if n.dot(&inward) > 0.9 {
                continue;
            }
            for c in cube.host_corners(face) {
                out.push(SurfacePoint { position: c, normal: Some(n) });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySpec {
    pub cameras: usize,
    pub frames: usize,
    pub rate_hz: f64,
    pub ring_radius: f64,
    pub seed: u64,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self { cameras: 70, frames: 7200, rate_hz: 30.0, ring_radius: 3.2, seed: 0 }
    }
}

/// Occlusion scene for the studies: camera ring, furniture, the walking
/// human proxy and the box in their hand.
pub fn study_scene(spec: &StudySpec) -> Result<SyntheticScene, SimulationError> {
    if spec.frames == 0 || !(spec.rate_hz.is_finite() && spec.rate_hz > 0.0) {
        return Err(SimulationError::InvalidSpec(format!("{} frames at {} Hz", spec.frames, spec.rate_hz)));
    }
    let rig = ring_rig(spec.cameras, spec.ring_radius, spec.seed)?;
    let motion = body_motion(spec.frames, spec.rate_hz, spec.seed);
    let joints = joint_stream(&BodySkeleton::template(), &motion);
    let g = grip();
    let target_poses: Vec<RigidTransform> = joints.iter().map(|j| j[RIGHT_HAND].compose(&g)).collect();
    let fingers = grip_capsules();
    let body = joints
        .iter()
        .map(|j| {
            let pose = j[RIGHT_HAND].compose(&g);
            let mut caps = body_capsules(j);
            caps.extend(fingers.iter().map(|c| c.transformed(&pose)));
            caps
        })
        .collect();
    SyntheticScene::new(rig, furniture(), body, target_mesh(), target_poses, spec.seed)
}

/// Slowly slipping grip: a few millimetres and about a degree of drift.
fn slipping_grip(t: f64, phases: &[f64; 4]) -> RigidTransform {
    let d = Vector3::new(0.003 * (TAU * 0.07 * t + phases[0]).sin(), 0.002 * (TAU * 0.11 * t + phases[1]).sin(), 0.002 * (TAU * 0.05 * t + phases[2]).sin());
    let r = UnitQuaternion::from_euler_angles(0.015 * (TAU * 0.09 * t + phases[3]).sin(), 0.0, 0.0);
    grip().compose(&RigidTransform::new(r, d))
}

/// Carried-object ground truth for drop-and-recover evaluation.
pub fn carry_sequence(frames: usize, rate_hz: f64, seed: u64) -> CarrySequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca77);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
    let motion = body_motion(frames, rate_hz, seed);
    let joints = joint_stream(&BodySkeleton::template(), &motion);
    let object = joints.iter().enumerate().map(|(f, j)| j[RIGHT_HAND].compose(&slipping_grip(f as f64 / rate_hz, &phases))).collect();
    let mut surface = target_mesh().sample_surface(300, &mut rng).into_iter().map(|p| p.position).collect::<Vec<_>>();
    surface.extend(target_mesh().vertices());
    CarrySequence { joints, object, surface }
}

/// Right-wrist ground truth with a drifting mocap estimate and noisy marker
/// tracking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WristStreams {
    pub truth: Vec<RigidTransform>,
    pub mocap: Vec<RigidTransform>,
    pub marker: Vec<Option<WristSample>>,
}

pub fn wrist_streams(frames: usize, rate_hz: f64, marker_noise: f64, seed: u64) -> WristStreams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3415);
    let noise = Normal::new(0.0, marker_noise.max(0.0)).expect("finite noise");
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
    let motion = body_motion(frames, rate_hz, seed);
    let truth: Vec<RigidTransform> = joint_stream(&BodySkeleton::template(), &motion).iter().map(|j| j[RIGHT_HAND]).collect();
    let mocap = truth
        .iter()
        .enumerate()
        .map(|(f, p)| {
            let t = f as f64 / rate_hz;
            let drift = RigidTransform::new(
                UnitQuaternion::from_euler_angles(0.03 * (TAU * 0.05 * t + phases[3]).sin(), 0.0, 0.0),
                Vector3::new(0.015 * (TAU * 0.08 * t + phases[0]).sin(), 0.01 * (TAU * 0.06 * t + phases[1]).sin(), 0.008 * (TAU * 0.1 * t + phases[2]).sin()),
            );
            p.compose(&drift)
        })
        .collect();
    let weight = marker_weight(6, 0.5);
    let marker = truth
        .iter()
        .map(|p| {
            let n = Vector3::from_fn(|_, _| noise.sample(&mut rng));
            Some(WristSample { pose: RigidTransform::new(*p.rotation(), p.translation() + n), weight })
        })
        .collect();
    WristStreams { truth, mocap, marker }
}
