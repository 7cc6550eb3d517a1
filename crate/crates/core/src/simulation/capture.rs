//! Complete synthetic capture sessions: rig, marker detections, mocap
//! streams, object models, hand touch captures and the ground truth behind
//! them.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bvh::{brute_force_hits, Bvh};
use super::generator::{body_capsules, body_motion, grip, grip_capsules, ring_rig, target_cubes, target_mesh, CUBE_EDGE};
use super::mesh::Mesh;
use super::{Capsule, SimulationError};
use crate::articulation::JointSpec;
use crate::geometry::{MarkerCube, Rig, RigidTransform, CUBE_FACES};
use crate::kinematics::body::*;
use crate::kinematics::{fk_body_at, hand_protocol, synthetic_touches, wrist_frame, BodySkeleton, CalibrationStructure, HandSide, HandSkeleton};
use crate::session::{
    Annotation, CaptureSession, GroundTruth, HandCalibrationData, HandPair, MarkerDetection, MarkerLayout, MocapFrame, ObjectModel, ObjectTruth, PartKind,
    PartModel, SessionMeta, SCHEMA_VERSION, TOOL_VERSION,
};
use crate::state::{BODY_JOINTS, HAND_JOINTS};

pub const BOX_NAME: &str = "box";
pub const CABINET_NAME: &str = "cabinet";
pub const MARKER_LAYOUT: MarkerLayout = MarkerLayout { body_first: 1000, left_hand_first: 2000, right_hand_first: 2100 };
/// Lowest sole point above the floor (m).
const SOLE_CLEARANCE: f64 = 0.005;
/// Minimum cosine between a marker normal and the line of sight.
const MIN_VIEW_COSINE: f64 = 0.2;
/// Capsules this close to a marker centre carry the marker and never hide it.
const HOST_MARGIN: f64 = 0.02;
const DOOR_PERIOD_S: f64 = 6.0;
const DOOR_MAX: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureSpec {
    pub name: String,
    pub cameras: usize,
    pub ring_radius: f64,
    /// Camera frames.
    pub frames: usize,
    /// Leading range-of-motion camera frames.
    pub rom_frames: usize,
    pub camera_rate_hz: f64,
    /// Whole multiple of the camera rate.
    pub mocap_rate_hz: f64,
    /// Pixel noise on every detected corner.
    pub pixel_noise: f64,
    /// Displacement of every calibrated body offset from the template (m).
    pub body_perturbation: f64,
    /// Camera frames `[start, end)` whose box detections are removed.
    pub drop: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for CaptureSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            cameras: 10,
            ring_radius: 3.2,
            frames: 240,
            rom_frames: 90,
            camera_rate_hz: 30.0,
            mocap_rate_hz: 60.0,
            pixel_noise: 0.5,
            body_perturbation: 0.02,
            drop: Some([180, 195]),
            seed: 0,
        }
    }
}

impl CaptureSpec {
    fn mocap_ratio(&self) -> Result<usize, SimulationError> {
        let r = self.mocap_rate_hz / self.camera_rate_hz;
        if !(r.is_finite() && r >= 1.0 && (r - r.round()).abs() < 1e-9) {
            return Err(SimulationError::InvalidSpec(format!("mocap rate {} Hz is not a whole multiple of {} Hz", self.mocap_rate_hz, self.camera_rate_hz)));
        }
        Ok(r.round() as usize)
    }

    fn check(&self) -> Result<usize, SimulationError> {
        if self.frames == 0 || self.rom_frames >= self.frames {
            return Err(SimulationError::InvalidSpec(format!("{} frames with {} rom frames", self.frames, self.rom_frames)));
        }
        if !(self.camera_rate_hz.is_finite() && self.camera_rate_hz > 0.0) {
            return Err(SimulationError::InvalidSpec(format!("camera rate {}", self.camera_rate_hz)));
        }
        if !(self.pixel_noise.is_finite() && self.pixel_noise >= 0.0) || !(self.body_perturbation.is_finite() && self.body_perturbation >= 0.0) {
            return Err(SimulationError::InvalidSpec("noise levels must be finite and non-negative".into()));
        }
        if let Some([a, b]) = self.drop {
            if a >= b || b > self.frames {
                return Err(SimulationError::InvalidSpec(format!("drop [{a}, {b}) outside {} frames", self.frames)));
            }
        }
        self.mocap_ratio()
    }
}

/// Cabinet placement in the world: back against the corner, front facing
/// the walking area.
pub fn cabinet_pose() -> RigidTransform {
    RigidTransform::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.6), Vector3::new(-2.0, -1.2, 0.0))
}

fn cabinet_carcass() -> Mesh {
    Mesh::cuboid(Vector3::new(0.25, 0.3, 0.5)).transformed(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.5)))
}

fn cabinet_door_mesh() -> Mesh {
    Mesh::cuboid(Vector3::new(0.01, 0.3, 0.48)).transformed(&RigidTransform::from_translation(Vector3::new(0.265, 0.0, 0.5)))
}

/// Door hinge on the front-left edge; positive states swing the door open.
pub fn cabinet_door_joint() -> JointSpec {
    JointSpec::revolute(-Vector3::z(), Vector3::new(0.265, -0.3, 0.0)).expect("valid hinge")
}

fn cube_at(id: u32, at: [f64; 3]) -> MarkerCube {
    MarkerCube::new(id, CUBE_EDGE, RigidTransform::from_translation(Vector3::from(at))).expect("valid cube")
}

/// Cabinet with three cubes on the carcass and two on the door leaf. Cube
/// mounts are in the cabinet frame with the door shut.
pub fn cabinet_model() -> ObjectModel {
    let e = CUBE_EDGE / 2.0;
    let base = PartModel {
        part: "carcass".into(),
        kind: PartKind::Base,
        axis: None,
        pivot: None,
        cubes: vec![cube_at(10, [0.17, 0.22, 1.0 + e]), cube_at(11, [0.17, -0.22, 1.0 + e]), cube_at(14, [-0.17, 0.0, 1.0 + e])],
        mesh: Some("carcass.obj".into()),
    };
    let door = PartModel {
        part: "door".into(),
        kind: PartKind::Revolute,
        axis: None,
        pivot: None,
        cubes: vec![cube_at(12, [0.275 + e, 0.12, 0.75]), cube_at(13, [0.275 + e, 0.12, 0.3])],
        mesh: Some("door.obj".into()),
    };
    ObjectModel {
        mesh: Mesh::merge(&[cabinet_carcass(), cabinet_door_mesh()]),
        parts: vec![base, door],
        part_meshes: BTreeMap::from([("carcass.obj".to_string(), cabinet_carcass()), ("door.obj".to_string(), cabinet_door_mesh())]),
    }
}

pub fn box_model() -> ObjectModel {
    ObjectModel {
        mesh: target_mesh(),
        parts: vec![PartModel { part: "body".into(), kind: PartKind::Base, axis: None, pivot: None, cubes: target_cubes(0), mesh: None }],
        part_meshes: BTreeMap::new(),
    }
}

/// Door angle at time `t` seconds after the range-of-motion segment.
fn door_state(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        0.5 * DOOR_MAX * (1.0 - (TAU * t / DOOR_PERIOD_S).cos())
    }
}

/// Faces of a cube not glued onto its host. The glued face points back to
/// the host surface, along `inward`.
fn exposed_faces(cube: &MarkerCube, inward: &Vector3<f64>) -> Vec<usize> {
    (0..CUBE_FACES).filter(|&f| cube.mount.transform_vector(&MarkerCube::face_normal(f)).dot(inward) < 0.9).collect()
}

/// A fiducial square expressed in its host frame.
#[derive(Clone, Debug)]
struct MarkerSource {
    id: u32,
    corners: [Vector3<f64>; 4],
    normal: Vector3<f64>,
}

fn square_normal(c: &[Vector3<f64>; 4]) -> Vector3<f64> {
    (c[1] - c[0]).cross(&(c[3] - c[0])).normalize()
}

fn cube_sources(cube: &MarkerCube, inward: &Vector3<f64>) -> Vec<MarkerSource> {
    exposed_faces(cube, inward)
        .into_iter()
        .map(|f| MarkerSource { id: cube.marker_id(f), corners: cube.host_corners(f), normal: cube.mount.transform_vector(&MarkerCube::face_normal(f)) })
        .collect()
}

/// Angles of a hand holding the box (right) or hanging loosely (left).
fn hand_angles(side: HandSide, t: f64, phase: f64) -> Vec<[f64; 3]> {
    (0..HAND_JOINTS)
        .map(|i| {
            let (finger, seg) = (i / 4, i % 4);
            let w = (TAU * 0.3 * t + phase + 0.4 * finger as f64).sin();
            match (side, finger, seg) {
                (_, 0, _) => [0.0, 0.15 + 0.05 * w, 0.25],
                (_, _, 0) => [0.0, 0.1, 0.0],
                (HandSide::Right, _, _) => [0.0, 0.55 + 0.05 * w, 0.0],
                (HandSide::Left, _, _) => [0.0, 0.25 + 0.15 * w, 0.0],
            }
        })
        .collect()
}

/// Per-finger random scales within [0.85, 1.15].
fn random_hand(side: HandSide, rng: &mut ChaCha8Rng) -> HandSkeleton {
    let base = HandSkeleton::template(side);
    let scales = (0..5).flat_map(|_| std::iter::repeat_n(rng.random_range(0.85..1.15), 4)).collect();
    base.with_scales(scales).expect("scales within bounds")
}

/// ROM amplitude (rad) per joint and axis.
fn rom_ranges() -> [[f64; 3]; BODY_JOINTS] {
    let mut r = [[0.2; 3]; BODY_JOINTS];
    r[PELVIS] = [0.15, 0.15, 0.5];
    r[HEAD] = [0.3, 0.4, 0.5];
    for j in [RIGHT_SHOULDER, LEFT_SHOULDER] {
        r[j] = [0.3; 3];
    }
    for j in [RIGHT_UPPER_ARM, LEFT_UPPER_ARM, RIGHT_FOREARM, LEFT_FOREARM] {
        r[j] = [0.9; 3];
    }
    for j in [RIGHT_HAND, LEFT_HAND, RIGHT_UPPER_LEG, LEFT_UPPER_LEG] {
        r[j] = [0.5; 3];
    }
    for j in [RIGHT_LOWER_LEG, LEFT_LOWER_LEG] {
        r[j] = [0.15, 0.7, 0.15];
    }
    r
}

/// Truth body motion at the mocap rate: a range-of-motion warm-up in place,
/// blending into the walking loop.
fn truth_motion(spec: &CaptureSpec, ratio: usize, truth: &BodySkeleton, rng: &mut ChaCha8Rng) -> (Vec<Vec<[f64; 3]>>, Vec<RigidTransform>) {
    let total = spec.frames * ratio;
    let rom = spec.rom_frames * ratio;
    let walk = body_motion(total - rom, spec.mocap_rate_hz, spec.seed);
    let ranges = rom_ranges();
    let waves: Vec<[(f64, f64); 3]> = (0..BODY_JOINTS).map(|_| std::array::from_fn(|_| (rng.random_range(0.4..1.1), rng.random_range(0.0..TAU)))).collect();
    let rom_seconds = rom as f64 / spec.mocap_rate_hz;
    let mut angles = Vec::with_capacity(total);
    let mut roots = Vec::with_capacity(total);
    for m in 0..rom {
        let t = m as f64 / spec.mocap_rate_hz;
        let env = (PI * t / rom_seconds).sin().powi(2);
        let a: Vec<[f64; 3]> = (0..BODY_JOINTS)
            .map(|j| std::array::from_fn(|k| walk.angles[0][j][k] + env * ranges[j][k] * (TAU * waves[j][k].0 * t + waves[j][k].1).sin()))
            .collect();
        angles.push(a);
        roots.push(walk.roots[0]);
    }
    angles.extend(walk.angles);
    roots.extend(walk.roots);
    for (a, root) in angles.iter().zip(roots.iter_mut()) {
        let pose = fk_body_at(truth, a, root).expect("generated angles have body shape");
        let lowest = truth.soles().iter().map(|s| pose.joints[s.joint].transform_point(&s.local).z).fold(f64::INFINITY, f64::min);
        *root = RigidTransform::from_translation(Vector3::new(0.0, 0.0, SOLE_CLEARANCE - lowest)).compose(root);
    }
    (angles, roots)
}

/// Static scene plus per-frame moving occluders.
struct Occluders<'a> {
    furniture: &'a Bvh,
    capsules: Vec<Capsule>,
    triangles: Vec<[Vector3<f64>; 3]>,
}

impl Occluders<'_> {
    fn hides(&self, centre: &Vector3<f64>, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
        if self.furniture.blocks(from, to) || brute_force_hits(&self.triangles, from, to) > 0 {
            return true;
        }
        self.capsules.iter().any(|c| {
            let host = super::segment_distance(centre, centre, &c.a, &c.b) < c.radius + HOST_MARGIN;
            !host && c.blocks(from, to)
        })
    }
}

fn world_triangles(mesh: &Mesh, pose: &RigidTransform) -> Vec<[Vector3<f64>; 3]> {
    (0..mesh.triangle_count()).map(|i| mesh.triangle(i).map(|v| pose.transform_point(&v))).collect()
}

/// Marker id, world corners and face normal.
type PlacedMarker = (u32, [Vector3<f64>; 4], Vector3<f64>);

/// Detections of the markers in `placed` (world corners and normal) by
/// every camera, with Gaussian pixel noise.
fn detect(rig: &Rig, frame: usize, placed: &[PlacedMarker], occluders: &Occluders, noise: f64, rng: &mut ChaCha8Rng) -> Vec<MarkerDetection> {
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut out = Vec::new();
    for cam in rig.cameras() {
        let eye = cam.center();
        for (id, corners, normal) in placed {
            let centre = corners.iter().sum::<Vector3<f64>>() / 4.0;
            if normal.dot(&(eye - centre).normalize()) < MIN_VIEW_COSINE {
                continue;
            }
            let mut px = [[0.0; 2]; 4];
            let mut ok = true;
            for (k, c) in corners.iter().enumerate() {
                match cam.project(c) {
                    Ok(p) if p.x >= 2.0 && p.y >= 2.0 && p.x <= cam.width() as f64 - 2.0 && p.y <= cam.height() as f64 - 2.0 => {
                        if occluders.hides(&centre, c, &eye) {
                            ok = false;
                            break;
                        }
                        px[k] = [p.x, p.y];
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                if noise > 0.0 {
                    for p in &mut px {
                        p[0] += gauss.sample(rng);
                        p[1] += gauss.sample(rng);
                    }
                }
                out.push(MarkerDetection { frame: frame as u32, camera_id: cam.id(), marker_id: *id, corners: px });
            }
        }
    }
    out.sort_by_key(|d| (d.camera_id, d.marker_id));
    out
}

fn slow_bias(t: f64, phases: &[f64; 3], amplitude: f64) -> [f64; 3] {
    std::array::from_fn(|k| amplitude * (TAU * (0.05 + 0.02 * k as f64) * t + phases[k]).sin())
}

/// Builds a full synthetic session with its ground truth.
pub fn generate_session(spec: &CaptureSpec) -> Result<CaptureSession, SimulationError> {
    let ratio = spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc4_9713);
    let rig = ring_rig(spec.cameras, spec.ring_radius, spec.seed)?;
    let template = BodySkeleton::template();
    let truth_body = perturb_offsets(&template, &CALIBRATED_OFFSETS, spec.body_perturbation, spec.seed ^ 0xb0d7);
    let truth_hands = HandPair { left: random_hand(HandSide::Left, &mut rng), right: random_hand(HandSide::Right, &mut rng) };
    let (angles, roots) = truth_motion(spec, ratio, &truth_body, &mut rng);

    // Mocap stream: yaw-offset root orientation, slowly biased arms, noisy glove.
    let yaw_offset = rng.random_range(-PI..PI);
    let unyaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -yaw_offset);
    let arm_joints = [RIGHT_UPPER_ARM, RIGHT_FOREARM, RIGHT_HAND, LEFT_UPPER_ARM, LEFT_FOREARM, LEFT_HAND];
    let bias_phases: Vec<[f64; 3]> = arm_joints.iter().map(|_| std::array::from_fn(|_| rng.random_range(0.0..TAU))).collect();
    let hand_phase = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
    let glove_noise = Normal::new(0.0, 0.01).expect("finite noise");
    let mut mocap = Vec::with_capacity(angles.len());
    for (m, (a, root)) in angles.iter().zip(&roots).enumerate() {
        let t = m as f64 / spec.mocap_rate_hz;
        let mut body = a.clone();
        let pelvis = unyaw * root.rotation() * UnitQuaternion::from_scaled_axis(Vector3::from(a[PELVIS]));
        body[PELVIS] = pelvis.scaled_axis().into();
        for (j, ph) in arm_joints.iter().zip(&bias_phases) {
            let b = slow_bias(t, ph, 0.015);
            for k in 0..3 {
                body[*j][k] += b[k];
            }
        }
        let left = hand_angles(HandSide::Left, t, hand_phase[0]);
        let right = hand_angles(HandSide::Right, t, hand_phase[1]);
        let glove = |h: &[[f64; 3]], rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> { h.iter().map(|v| v.map(|x| x + glove_noise.sample(rng))).collect() };
        mocap.push(MocapFrame { frame: m as u32, body_angles: body, left_hand: glove(&left, &mut rng), right_hand: glove(&right, &mut rng) });
    }

    // Camera-frame ground truth.
    let joints: Vec<Vec<RigidTransform>> =
        (0..spec.frames).map(|f| fk_body_at(&truth_body, &angles[f * ratio], &roots[f * ratio]).expect("body shape").joints).collect();
    let box_poses: Vec<RigidTransform> = joints.iter().map(|j| j[RIGHT_HAND].compose(&grip())).collect();
    let cabinet = cabinet_model();
    let door = cabinet_door_joint();
    let rom_s = spec.rom_frames as f64 / spec.camera_rate_hz;
    let door_states: Vec<f64> = (0..spec.frames).map(|f| door_state(f as f64 / spec.camera_rate_hz - rom_s)).collect();
    let box_obj = box_model();

    // Marker sources in their host frames.
    let body_sources: Vec<(usize, MarkerSource)> = {
        let mut id = MARKER_LAYOUT.body_first;
        let mut v = Vec::new();
        for p in truth_body.parts() {
            for m in &p.markers {
                v.push((p.part, MarkerSource { id, corners: *m, normal: square_normal(m) }));
                id += 1;
            }
        }
        v
    };
    let hand_sources = |skel: &HandSkeleton, first: u32| -> Vec<MarkerSource> {
        skel.markers().iter().enumerate().map(|(k, m)| MarkerSource { id: first + k as u32, corners: *m, normal: square_normal(m) }).collect()
    };
    let left_sources = hand_sources(&truth_hands.left, MARKER_LAYOUT.left_hand_first);
    let right_sources = hand_sources(&truth_hands.right, MARKER_LAYOUT.right_hand_first);
    let box_sources: Vec<MarkerSource> = box_obj.parts[0].cubes.iter().flat_map(|c| cube_sources(c, &-c.mount.translation().normalize())).collect();
    let inward_carcass = [-Vector3::z(); 3];
    let carcass_sources: Vec<MarkerSource> = cabinet.parts[0].cubes.iter().zip(&inward_carcass).flat_map(|(c, i)| cube_sources(c, i)).collect();
    let door_sources: Vec<MarkerSource> = cabinet.parts[1].cubes.iter().flat_map(|c| cube_sources(c, &-Vector3::x())).collect();

    let cab_pose = cabinet_pose();
    let static_scene = Mesh::merge(&[
        Mesh::cuboid(Vector3::new(0.3, 0.5, 0.375)).transformed(&RigidTransform::from_translation(Vector3::new(1.3, 0.0, 0.375))),
        cabinet_carcass().transformed(&cab_pose),
    ]);
    let furniture = Bvh::new(&static_scene);
    let fingers = grip_capsules();
    let box_mesh = target_mesh();
    let door_mesh = cabinet_door_mesh();
    let detections: Vec<MarkerDetection> = (0..spec.frames)
        .into_par_iter()
        .map(|f| {
            let mut frng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xde7e_c700 ^ ((f as u64) << 20));
            let j = &joints[f];
            let door_pose = cab_pose.compose(&door.transform(door_states[f]));
            let mut capsules = body_capsules(j);
            capsules.extend(fingers.iter().map(|c| c.transformed(&box_poses[f])));
            let mut triangles = world_triangles(&box_mesh, &box_poses[f]);
            triangles.extend(world_triangles(&door_mesh, &door_pose));
            let occ = Occluders { furniture: &furniture, capsules, triangles };
            let place = |src: &MarkerSource, pose: &RigidTransform| (src.id, src.corners.map(|c| pose.transform_point(&c)), pose.transform_vector(&src.normal));
            let mut placed: Vec<_> = body_sources.iter().map(|(part, s)| place(s, &j[*part])).collect();
            let lh = j[LEFT_HAND].compose(&wrist_frame(HandSide::Left));
            let rh = j[RIGHT_HAND].compose(&wrist_frame(HandSide::Right));
            placed.extend(left_sources.iter().map(|s| place(s, &lh)));
            placed.extend(right_sources.iter().map(|s| place(s, &rh)));
            let dropped = spec.drop.is_some_and(|[a, b]| (a..b).contains(&f));
            if !dropped {
                placed.extend(box_sources.iter().map(|s| place(s, &box_poses[f])));
            }
            placed.extend(carcass_sources.iter().map(|s| place(s, &cab_pose)));
            placed.extend(door_sources.iter().map(|s| place(s, &door_pose)));
            detect(&rig, f, &placed, &occ, spec.pixel_noise, &mut frng)
        })
        .flatten()
        .collect();

    // Touch captures on the calibration structure resting on the table.
    let structure = CalibrationStructure::reference()
        .transformed(&RigidTransform::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3), Vector3::new(1.2, 0.1, 0.76)));
    let hand_calibration = HandCalibrationData {
        left: synthetic_touches(&truth_hands.left, &structure, &hand_protocol(HandSide::Left), 0.0, 0.0005, spec.seed ^ 0x1ef7),
        right: synthetic_touches(&truth_hands.right, &structure, &hand_protocol(HandSide::Right), 0.0, 0.0005, spec.seed ^ 0x6127),
        structure,
    };

    let mut objects_truth = BTreeMap::new();
    objects_truth.insert(BOX_NAME.to_string(), ObjectTruth { joints: vec![], poses: box_poses, states: vec![vec![0.0]; spec.frames] });
    objects_truth.insert(
        CABINET_NAME.to_string(),
        ObjectTruth { joints: vec![Some(door)], poses: vec![cab_pose; spec.frames], states: door_states.iter().map(|&s| vec![0.0, s]).collect() },
    );
    let mut dropped = BTreeMap::new();
    if let Some(d) = spec.drop {
        dropped.insert(BOX_NAME.to_string(), d);
    }
    let meta = SessionMeta {
        schema_version: SCHEMA_VERSION,
        name: spec.name.clone(),
        camera_rate_hz: spec.camera_rate_hz,
        mocap_rate_hz: spec.mocap_rate_hz,
        frames: spec.frames,
        rom: [0, spec.rom_frames],
        seed: spec.seed,
        tool_version: TOOL_VERSION.into(),
        markers: MARKER_LAYOUT,
        annotations: vec![
            Annotation { start: 0, end: spec.rom_frames, text: "range of motion".into() },
            Annotation { start: spec.rom_frames, end: spec.frames, text: "carry the box past the cabinet".into() },
        ],
    };
    let session = CaptureSession {
        meta,
        rig,
        detections,
        mocap,
        body: template,
        hands: HandPair { left: HandSkeleton::template(HandSide::Left), right: HandSkeleton::template(HandSide::Right) },
        hand_calibration: Some(hand_calibration),
        objects: BTreeMap::from([(BOX_NAME.to_string(), box_obj), (CABINET_NAME.to_string(), cabinet)]),
        truth: Some(GroundTruth { body: truth_body, hands: truth_hands, joints, objects: objects_truth, dropped }),
    };
    session.validate().map_err(|e| SimulationError::InvalidScene(e.to_string()))?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> CaptureSpec {
        CaptureSpec { frames: 60, rom_frames: 20, drop: Some([40, 50]), cameras: 8, ..CaptureSpec::default() }
    }

    #[test]
    fn session_is_valid_and_deterministic() {
        let a = generate_session(&small()).unwrap();
        let b = generate_session(&small()).unwrap();
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.mocap, b.mocap);
        assert_eq!(a.mocap.len(), 120);
        a.validate().unwrap();
    }

    #[test]
    fn every_marker_family_is_detected() {
        let s = generate_session(&small()).unwrap();
        let ids: BTreeSet<u32> = s.detections.iter().map(|d| d.marker_id).collect();
        assert!(ids.iter().any(|&i| i < 12), "box markers");
        assert!(ids.iter().any(|&i| (60..72).contains(&i)), "carcass markers");
        assert!(ids.iter().any(|&i| (72..84).contains(&i)), "door markers");
        assert!(ids.iter().filter(|&&i| (1000..2000).contains(&i)).count() > 20, "body markers");
        assert!(ids.iter().any(|&i| (2000..2003).contains(&i)));
        assert!(ids.iter().any(|&i| (2100..2103).contains(&i)));
    }

    #[test]
    fn dropped_interval_has_no_box_detections() {
        let s = generate_session(&small()).unwrap();
        assert!(s.detections.iter().all(|d| !(d.marker_id < 12 && (40..50).contains(&(d.frame as usize)))));
        assert!(s.detections.iter().any(|d| d.marker_id < 12 && d.frame == 39));
    }

    #[test]
    fn detections_reproject_truth_within_noise() {
        let spec = CaptureSpec { pixel_noise: 0.0, ..small() };
        let s = generate_session(&spec).unwrap();
        let truth = s.truth.as_ref().unwrap();
        let cube = &s.objects[BOX_NAME].parts[0].cubes[0];
        let mut checked = 0;
        for d in s.detections.iter().filter(|d| cube.face_of(d.marker_id).is_some()) {
            let face = cube.face_of(d.marker_id).unwrap();
            let pose = truth.objects[BOX_NAME].poses[d.frame as usize];
            let cam = s.rig.get(d.camera_id).unwrap();
            for (k, c) in cube.host_corners(face).iter().enumerate() {
                let p = cam.project(&pose.transform_point(c)).unwrap();
                assert!((p.x - d.corners[k][0]).abs() < 1e-9 && (p.y - d.corners[k][1]).abs() < 1e-9);
            }
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn mocap_reproduces_truth_up_to_a_world_transform() {
        let s = generate_session(&small()).unwrap();
        let truth = s.truth.as_ref().unwrap();
        // Mocap joint poses differ from truth by one rigid transform per
        // frame, up to the arm bias and the pelvis yaw offset.
        for f in [0, 30, 59] {
            let m = s.mocap_at(f).unwrap();
            let pose = crate::kinematics::fk_body(&truth.body, &m.body_angles).unwrap();
            let w = truth.joints[f][PELVIS].compose(&pose.joints[PELVIS].inverse());
            for j in [HEAD, RIGHT_FOOT, LEFT_TOE] {
                let p = w.compose(&pose.joints[j]);
                assert!(p.translation_distance_to(&truth.joints[f][j]) < 1e-9, "frame {f} joint {j}");
            }
            assert!(w.rotation().axis().is_none_or(|a| a.z.abs() > 1.0 - 1e-9), "world alignment is a yaw");
        }
    }

    #[test]
    fn feet_stay_on_the_floor() {
        let s = generate_session(&small()).unwrap();
        let truth = s.truth.as_ref().unwrap();
        for j in &truth.joints {
            let lowest = truth.body.soles().iter().map(|p| j[p.joint].transform_point(&p.local).z).fold(f64::INFINITY, f64::min);
            assert!((lowest - SOLE_CLEARANCE).abs() < 1e-9);
        }
    }

    #[test]
    fn door_opens_after_the_rom() {
        assert_eq!(door_state(-1.0), 0.0);
        assert!((door_state(DOOR_PERIOD_S / 2.0) - DOOR_MAX).abs() < 1e-12);
        let open = cabinet_door_joint().transform(1.0);
        // The free edge swings outward, away from the carcass.
        assert!(open.transform_point(&Vector3::new(0.265, 0.3, 0.5)).x > 0.5);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            CaptureSpec { mocap_rate_hz: 45.0, ..small() },
            CaptureSpec { rom_frames: 60, ..small() },
            CaptureSpec { drop: Some([50, 70]), ..small() },
            CaptureSpec { pixel_noise: -1.0, ..small() },
        ] {
            assert!(matches!(generate_session(&spec), Err(SimulationError::InvalidSpec(_))));
        }
    }
}
