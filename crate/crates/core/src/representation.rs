//! Learning-facing derived data: motion features, person-to-object relative
//! state and per-frame contact records.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::simulation::mesh::SurfaceGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RepresentationError {
    #[error("need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("frame {frame} has {got} joints, expected {expected}")]
    JointCount { frame: usize, expected: usize, got: usize },
    #[error("joint index {0} out of range")]
    JointIndex(usize),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid rate {0}")]
    InvalidRate(f64),
    #[error("feature matrix: {0}")]
    Layout(String),
}

/// Feature length for `joints` joints: `1+2+1 + 3J+6J+3J + 4 = 8 + 12J`.
pub const fn feature_dimension(joints: usize) -> usize {
    1 + 2 + 1 + 3 * joints + 6 * joints + 3 * joints + 4
}

/// A point on a joint whose height and speed decide foot contact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootPoint {
    pub joint: usize,
    pub local: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub root: usize,
    /// Left heel, left toe, right heel, right toe.
    pub feet: [FootPoint; 4],
    /// Height below which a foot point may be in contact (m).
    pub contact_height: f64,
    /// Displacement per frame below which a foot point may be in contact (m).
    pub contact_speed: f64,
}

impl FeatureConfig {
    /// Root plus foot points given directly as joints.
    pub fn with_feet(root: usize, feet: [usize; 4]) -> Self {
        Self { root, feet: feet.map(|joint| FootPoint { joint, local: Vector3::zeros() }), contact_height: 0.05, contact_speed: 0.01 }
    }
}

/// One feature frame. Ground is the plane z = 0 and yaw is about +z; the
/// root height is the vertical coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionFeatureFrame {
    pub root_height: f64,
    /// Root displacement to the next frame in the current heading frame.
    pub root_velocity: Vector2<f64>,
    /// Heading change to the next frame, wrapped to (−π, π].
    pub root_yaw_velocity: f64,
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 6]>,
    pub velocities: Vec<Vector3<f64>>,
    pub foot_contacts: [bool; 4],
}

impl MotionFeatureFrame {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(feature_dimension(self.positions.len()));
        v.push(self.root_height);
        v.extend(self.root_velocity.iter());
        v.push(self.root_yaw_velocity);
        v.extend(self.positions.iter().flat_map(|p| p.iter().copied()));
        v.extend(self.rotations.iter().flatten());
        v.extend(self.velocities.iter().flat_map(|p| p.iter().copied()));
        v.extend(self.foot_contacts.iter().map(|&c| c as u8 as f64));
        v
    }

    pub fn from_slice(v: &[f64], joints: usize) -> Result<Self, RepresentationError> {
        if v.len() != feature_dimension(joints) {
            return Err(RepresentationError::Layout(format!("{} values for {joints} joints, expected {}", v.len(), feature_dimension(joints))));
        }
        let vec3 = |s: &[f64]| s.chunks(3).map(Vector3::from_column_slice).collect::<Vec<_>>();
        let p0 = 4;
        let r0 = p0 + 3 * joints;
        let v0 = r0 + 6 * joints;
        let c0 = v0 + 3 * joints;
        Ok(Self {
            root_height: v[0],
            root_velocity: Vector2::new(v[1], v[2]),
            root_yaw_velocity: v[3],
            positions: vec3(&v[p0..r0]),
            rotations: v[r0..v0].chunks(6).map(|c| c.try_into().expect("chunk of six")).collect(),
            velocities: vec3(&v[v0..c0]),
            foot_contacts: std::array::from_fn(|k| v[c0 + k] > 0.5),
        })
    }
}

/// First two columns of a rotation matrix, column-major.
pub fn rotation_to_6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Gram-Schmidt reconstruction of a 6-value rotation block.
pub fn rotation_from_6d(v: &[f64; 6]) -> Option<Rotation3<f64>> {
    let a = Vector3::new(v[0], v[1], v[2]);
    let b = Vector3::new(v[3], v[4], v[5]);
    let x = a.try_normalize(1e-12)?;
    let y = (b - x * x.dot(&b)).try_normalize(1e-12)?;
    let z = x.cross(&y);
    Some(Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z])))
}

fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Heading of a pose: the angle of its +x axis projected on the ground.
pub fn heading(pose: &RigidTransform) -> f64 {
    let x = pose.transform_vector(&Vector3::x());
    x.y.atan2(x.x)
}

fn check_stream(stream: &[Vec<RigidTransform>], cfg: &FeatureConfig) -> Result<usize, RepresentationError> {
    if stream.len() < 2 {
        return Err(RepresentationError::TooShort { needed: 2, got: stream.len() });
    }
    let joints = stream[0].len();
    for (frame, f) in stream.iter().enumerate() {
        if f.len() != joints {
            return Err(RepresentationError::JointCount { frame, expected: joints, got: f.len() });
        }
        if !f.iter().all(|p| p.is_finite()) {
            return Err(RepresentationError::NonFinite("joint pose"));
        }
    }
    if let Some(j) = std::iter::once(cfg.root).chain(cfg.feet.iter().map(|f| f.joint)).find(|&j| j >= joints) {
        return Err(RepresentationError::JointIndex(j));
    }
    Ok(joints)
}

/// Feature frames from global joint poses. Frame `t` uses poses `t` and
/// `t+1`, so `T` input frames give `T−1` feature frames.
pub fn build_features(stream: &[Vec<RigidTransform>], cfg: &FeatureConfig) -> Result<Vec<MotionFeatureFrame>, RepresentationError> {
    check_stream(stream, cfg)?;
    let frame = |t: usize| -> MotionFeatureFrame {
        let now = &stream[t];
        let next = &stream[t + 1];
        let root = &now[cfg.root];
        let yaw = heading(root);
        let unyaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -yaw);
        let origin = Vector3::new(root.translation().x, root.translation().y, 0.0);
        let step = next[cfg.root].translation() - root.translation();
        let local_step = unyaw * step;
        let foot = |s: &[RigidTransform], f: &FootPoint| s[f.joint].transform_point(&f.local);
        MotionFeatureFrame {
            root_height: root.translation().z,
            root_velocity: Vector2::new(local_step.x, local_step.y),
            root_yaw_velocity: wrap(heading(&next[cfg.root]) - yaw),
            positions: now.iter().map(|p| unyaw * (p.translation() - origin)).collect(),
            rotations: now.iter().map(|p| rotation_to_6d(&(unyaw * p.rotation()).to_rotation_matrix().into_inner())).collect(),
            velocities: now.iter().zip(next).map(|(a, b)| unyaw * (b.translation() - a.translation())).collect(),
            foot_contacts: std::array::from_fn(|k| {
                let f = &cfg.feet[k];
                let p = foot(now, f);
                p.z < cfg.contact_height && (foot(next, f) - p).norm() < cfg.contact_speed
            }),
        }
    };
    Ok((0..stream.len() - 1).into_par_iter().map(frame).collect())
}

/// Integrates root velocities from a start position and heading. Returns one
/// root position per input frame plus the final one.
pub fn reconstruct_root(features: &[MotionFeatureFrame], start: Vector2<f64>, start_yaw: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(features.len() + 1);
    let mut pos = start;
    let mut yaw = start_yaw;
    for f in features {
        out.push(Vector3::new(pos.x, pos.y, f.root_height));
        let (s, c) = yaw.sin_cos();
        pos += Vector2::new(c * f.root_velocity.x - s * f.root_velocity.y, s * f.root_velocity.x + c * f.root_velocity.y);
        yaw += f.root_yaw_velocity;
    }
    if let Some(last) = features.last() {
        // The last height is not stored; the previous one stands in.
        out.push(Vector3::new(pos.x, pos.y, last.root_height));
    }
    out
}

/// Person root pose in the object frame: `object⁻¹ ∘ root`.
pub fn relative_state(root: &RigidTransform, object: &RigidTransform) -> RigidTransform {
    object.inverse().compose(root)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    LeftHand,
    RightHand,
    Body,
}

/// Joint positions of one party, per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyStream {
    pub party: Party,
    pub points: Vec<Vec<Vector3<f64>>>,
}

/// One object part with its surface in the part frame and its poses.
#[derive(Clone, Debug)]
pub struct ContactTarget {
    pub object: String,
    pub part: usize,
    pub surface: SurfaceGrid,
    pub poses: Vec<Option<RigidTransform>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactRecord {
    pub frame: usize,
    pub party: Party,
    pub object: String,
    pub part: usize,
    /// Closest joint-to-surface distance (m).
    pub distance: f64,
}

pub const DEFAULT_CONTACT_THRESHOLD: f64 = 0.01;
/// Rounding allowance on the inclusive contact boundary (m).
pub const CONTACT_TOLERANCE: f64 = 1e-12;

/// Records a contact when any joint of a party lies within `threshold` of a
/// posed part surface; the boundary is inclusive up to
/// [`CONTACT_TOLERANCE`]. Frames where a part has no pose produce no records
/// for it.
pub fn compute_contacts(parties: &[PartyStream], targets: &[ContactTarget], threshold: f64) -> Vec<ContactRecord> {
    let reach = threshold.max(0.0) + CONTACT_TOLERANCE;
    let frames = parties.iter().map(|p| p.points.len()).chain(targets.iter().map(|t| t.poses.len())).min().unwrap_or(0);
    (0..frames)
        .into_par_iter()
        .flat_map_iter(|frame| {
            let mut out = Vec::new();
            for party in parties {
                for target in targets {
                    let Some(pose) = target.poses[frame] else { continue };
                    let inv = pose.inverse();
                    let best =
                        party.points[frame].iter().filter_map(|p| target.surface.distance_within(&inv.transform_point(p), reach)).fold(f64::INFINITY, f64::min);
                    if best <= reach {
                        out.push(ContactRecord { frame, party: party.party, object: target.object.clone(), part: target.part, distance: best });
                    }
                }
            }
            out
        })
        .collect()
}

/// Header stored next to the raw feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub dimension: usize,
    pub joints: usize,
    pub frames: usize,
    pub rate_hz: f64,
    /// Element type of the row-major matrix.
    pub dtype: String,
    pub joint_names: Vec<String>,
}

pub const FEATURE_DTYPE: &str = "f64le";

/// Writes features row-major as little-endian f64 and returns the header.
pub fn write_features<W: Write>(out: &mut W, features: &[MotionFeatureFrame], rate_hz: f64, joint_names: Vec<String>) -> Result<FeatureHeader, std::io::Error> {
    let joints = features.first().map_or(joint_names.len(), |f| f.positions.len());
    for f in features {
        for v in f.to_vec() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(FeatureHeader { dimension: feature_dimension(joints), joints, frames: features.len(), rate_hz, dtype: FEATURE_DTYPE.into(), joint_names })
}

pub fn read_features<R: Read>(input: &mut R, header: &FeatureHeader) -> Result<Vec<MotionFeatureFrame>, RepresentationError> {
    if header.dtype != FEATURE_DTYPE || header.dimension != feature_dimension(header.joints) {
        return Err(RepresentationError::Layout(format!("unsupported header {} / {}", header.dtype, header.dimension)));
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| RepresentationError::Layout(e.to_string()))?;
    if bytes.len() != header.frames * header.dimension * 8 {
        return Err(RepresentationError::Layout(format!("{} bytes for {} frames of {} values", bytes.len(), header.frames, header.dimension)));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("eight bytes"))).collect();
    values.chunks(header.dimension).map(|row| MotionFeatureFrame::from_slice(row, header.joints)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::mesh::Mesh;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::new(
            UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0)),
            Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0)),
        )
    }

    /// Five-joint chain: root, two feet, two toes, all in the root frame.
    fn figure(root: RigidTransform) -> Vec<RigidTransform> {
        let local =
            [Vector3::zeros(), Vector3::new(0.0, 0.1, -0.9), Vector3::new(0.1, 0.1, -0.92), Vector3::new(0.0, -0.1, -0.9), Vector3::new(0.1, -0.1, -0.92)];
        local.iter().map(|l| root.compose(&RigidTransform::from_translation(*l))).collect()
    }

    fn cfg() -> FeatureConfig {
        FeatureConfig::with_feet(0, [1, 2, 3, 4])
    }

    fn walk(frames: usize, seed: u64) -> Vec<Vec<RigidTransform>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut yaw, mut pos) = (rng.random_range(-3.0..3.0), Vector3::new(0.0, 0.0, 0.93));
        (0..frames)
            .map(|_| {
                yaw += rng.random_range(-0.05..0.05);
                pos += UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw) * Vector3::new(rng.random_range(0.0..0.03), 0.0, 0.0);
                pos.z = 0.93 + rng.random_range(-0.01..0.01);
                figure(RigidTransform::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), pos))
            })
            .collect()
    }

    #[test]
    fn dimension_for_sixty_one_joints() {
        assert_eq!(feature_dimension(61), 740);
        let stream: Vec<Vec<RigidTransform>> = (0..3).map(|_| vec![RigidTransform::identity(); 61]).collect();
        let f = build_features(&stream, &FeatureConfig::with_feet(0, [1, 2, 3, 4])).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].to_vec().len(), 740);
    }

    #[test]
    fn standing_still() {
        let root = RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 0.7), Vector3::new(1.0, -2.0, 0.93));
        let f = build_features(&vec![figure(root); 5], &cfg()).unwrap();
        for frame in &f {
            assert_eq!(frame.root_velocity, Vector2::zeros());
            assert_eq!(frame.root_yaw_velocity, 0.0);
            assert!(frame.velocities.iter().all(|v| v.norm() == 0.0));
            assert_eq!(frame.foot_contacts, [true; 4]);
            assert_relative_eq!(frame.root_height, 0.93);
        }
    }

    #[test]
    fn pure_yaw_rotation() {
        let omega = 0.037;
        let stream: Vec<_> = (0..40)
            .map(|t| figure(RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 3.0 + omega * t as f64), Vector3::new(0.3, 0.2, 0.93))))
            .collect();
        let f = build_features(&stream, &cfg()).unwrap();
        for frame in &f {
            assert_relative_eq!(frame.root_yaw_velocity, omega, epsilon = 1e-9);
            for (p, q) in frame.positions.iter().zip(&f[0].positions) {
                assert_relative_eq!(p, q, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rotation_blocks_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let r = random_pose(&mut rng).matrix();
            let back = rotation_from_6d(&rotation_to_6d(&r)).unwrap();
            assert!((back.matrix() - r).norm() < 1e-6);
            assert_relative_eq!(back.matrix().determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn root_trajectory_round_trip() {
        let stream = walk(300, 4);
        let f = build_features(&stream, &cfg()).unwrap();
        let r0 = &stream[0][0];
        let rec = reconstruct_root(&f, Vector2::new(r0.translation().x, r0.translation().y), heading(r0));
        for (t, p) in rec.iter().enumerate().take(f.len()) {
            let truth = stream[t][0].translation();
            assert!((p - truth).norm() <= 1e-6 * (t + 1) as f64, "frame {t}");
        }
        let last = rec.last().unwrap();
        let truth = stream.last().unwrap()[0].translation();
        assert!((last.xy() - truth.xy()).norm() < 1e-6 * stream.len() as f64);
    }

    proptest! {
        #[test]
        fn equivariant_under_yaw_and_planar_shift(yaw in -3.1f64..3.1, dx in -5.0f64..5.0, dy in -5.0f64..5.0, seed in 0u64..1000) {
            let stream = walk(20, seed);
            let g = RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, yaw), Vector3::new(dx, dy, 0.0));
            let moved: Vec<Vec<_>> = stream.iter().map(|f| f.iter().map(|p| g.compose(p)).collect()).collect();
            let a = build_features(&stream, &cfg()).unwrap();
            let b = build_features(&moved, &cfg()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (u, v) in x.to_vec().iter().zip(y.to_vec()) {
                    prop_assert!((u - v).abs() < 1e-9, "{} vs {}", u, v);
                }
            }
        }

        #[test]
        fn relative_state_round_trip(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let root = random_pose(&mut rng);
            let object = random_pose(&mut rng);
            let back = object.compose(&relative_state(&root, &object));
            prop_assert!(back.translation_distance_to(&root) < 1e-9);
            prop_assert!(back.rotation_angle_to(&root) < 1e-9);
        }
    }

    #[test]
    fn relative_state_examples() {
        let p = RigidTransform::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let id = relative_state(&p, &p);
        assert!(id.translation().norm() < 1e-12 && id.rotation_angle_to(&RigidTransform::identity()) < 1e-12);
        let object = RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, PI / 2.0), Vector3::new(1.0, 1.0, 0.0));
        let root = RigidTransform::new(*object.rotation(), object.transform_point(&Vector3::new(2.0, 0.0, 0.0)));
        assert_relative_eq!(*relative_state(&root, &object).translation(), Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn too_short_and_bad_joints() {
        assert_eq!(build_features(&[figure(RigidTransform::identity())], &cfg()), Err(RepresentationError::TooShort { needed: 2, got: 1 }));
        let mut s = walk(3, 1);
        s[1].pop();
        assert!(matches!(build_features(&s, &cfg()), Err(RepresentationError::JointCount { frame: 1, .. })));
        assert!(matches!(build_features(&walk(3, 1), &FeatureConfig::with_feet(9, [1, 2, 3, 4])), Err(RepresentationError::JointIndex(9))));
    }

    fn box_target(poses: Vec<Option<RigidTransform>>) -> ContactTarget {
        ContactTarget { object: "box".into(), part: 0, surface: SurfaceGrid::new(Mesh::cuboid(Vector3::repeat(0.1)), 0.05), poses }
    }

    #[test]
    fn contact_examples() {
        let far = PartyStream { party: Party::RightHand, points: vec![vec![Vector3::new(1.1, 0.0, 0.0)]; 3] };
        let target = box_target(vec![Some(RigidTransform::identity()); 3]);
        assert!(compute_contacts(&[far], std::slice::from_ref(&target), 0.01).is_empty());
        let mut pts = vec![vec![Vector3::new(1.0, 0.0, 0.0)]; 3];
        pts[1] = vec![Vector3::new(0.1, 0.02, 0.03)];
        let touch = PartyStream { party: Party::LeftHand, points: pts };
        let rec = compute_contacts(std::slice::from_ref(&touch), std::slice::from_ref(&target), 0.01);
        assert_eq!(rec.len(), 1);
        assert_eq!((rec[0].frame, rec[0].party), (1, Party::LeftHand));
        // Exact touch at zero threshold counts.
        assert_eq!(compute_contacts(std::slice::from_ref(&touch), std::slice::from_ref(&target), 0.0).len(), 1);
        // Untracked frames yield nothing.
        let hidden = box_target(vec![None; 3]);
        assert!(compute_contacts(&[touch], &[hidden], 0.01).is_empty());
    }

    #[test]
    fn contacts_follow_part_pose() {
        let pose = RigidTransform::new(UnitQuaternion::from_euler_angles(0.3, 0.2, 0.1), Vector3::new(2.0, 0.0, 1.0));
        let p = pose.transform_point(&Vector3::new(0.0, 0.0, 0.105));
        let party = PartyStream { party: Party::Body, points: vec![vec![p]] };
        let rec = compute_contacts(&[party], &[box_target(vec![Some(pose)])], 0.01);
        assert_eq!(rec.len(), 1);
        assert_relative_eq!(rec[0].distance, 0.005, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn contacts_monotone_in_threshold(seed in 0u64..500, t1 in 0.0f64..0.05, extra in 0.0f64..0.05) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<Vector3<f64>>> = (0..10)
                .map(|_| (0..4).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2))).collect())
                .collect();
            let parties = [PartyStream { party: Party::RightHand, points: points.clone() }, PartyStream { party: Party::Body, points }];
            let targets = [box_target(vec![Some(RigidTransform::identity()); 10])];
            let small = compute_contacts(&parties, &targets, t1);
            let large = compute_contacts(&parties, &targets, t1 + extra);
            for r in &small {
                prop_assert!(large.contains(r));
            }
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let f = build_features(&walk(30, 9), &cfg()).unwrap();
        let mut buf = Vec::new();
        let header = write_features(&mut buf, &f, 30.0, (0..5).map(|j| format!("j{j}")).collect()).unwrap();
        assert_eq!(header.dimension, feature_dimension(5));
        assert_eq!(buf.len(), f.len() * header.dimension * 8);
        assert_eq!(read_features(&mut buf.as_slice(), &header).unwrap(), f);
        assert!(read_features(&mut &buf[..buf.len() - 8], &header).is_err());
    }
}
