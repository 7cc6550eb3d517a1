//! Shared geometric vocabulary: rigid transforms, pinhole cameras, marker cubes.
//!
//! Conventions used throughout the crate:
//!
//! * units are meters, radians, pixels and seconds;
//! * quaternions are serialized in `(w, x, y, z)` order;
//! * cameras follow the computer-vision convention (x right, y down, z forward)
//!   and their extrinsics map world points into the camera frame;
//! * the world frame is z-up with the floor at `z = 0`.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Depth below which a point is considered to lie on or behind the image plane.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },
    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: u32, reason: String },
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid marker cube {id}: {reason}")]
    InvalidCube { id: u32, reason: String },
    #[error("unknown camera id {0}")]
    UnknownCamera(u32),
    #[error("duplicate camera id {0}")]
    DuplicateCamera(u32),
}

/// An element of SE(3): a proper rotation followed by a translation.
#[derive(Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "RigidTransform {{ q: [{:.9}, {:.9}, {:.9}, {:.9}], t: [{:.9}, {:.9}, {:.9}] }}",
            q.w, q.i, q.j, q.k, self.translation.x, self.translation.y, self.translation.z
        )
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        // Re-normalize: composed quaternions drift away from unit length.
        let rotation = UnitQuaternion::new_normalize(rotation.into_inner());
        Self { rotation, translation }
    }

    /// Builds a transform from a `(w, x, y, z)` quaternion and a translation,
    /// normalizing the quaternion. Rejects non-finite or zero quaternions.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self, GeometryError> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(GeometryError::InvalidTransform(format!("quaternion {q:?} cannot be normalized")));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidTransform(format!("non-finite translation {t:?}")));
        }
        let rotation = if (norm - 1.0).abs() <= 1e-12 {
            // Already unit: keep the exact bits so serialization round trips.
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::new_normalize(quat)
        };
        Ok(Self { rotation, translation: Vector3::from(t) })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: UnitQuaternion::identity(), translation }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Rotation by `angle` about the unit `axis` through the origin.
    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self::from_rotation(UnitQuaternion::from_axis_angle(axis, angle))
    }

    /// Rotation by `angle` about the line through `pivot` along `axis`.
    pub fn about_pivot(axis: &Unit<Vector3<f64>>, angle: f64, pivot: &Vector3<f64>) -> Self {
        let rotation = UnitQuaternion::from_axis_angle(axis, angle);
        let translation = pivot - rotation * pivot;
        Self::new(rotation, translation)
    }

    /// Projects an arbitrary 3×3 matrix onto SO(3) before building the transform.
    pub fn from_matrix(m: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `(w, x, y, z)` quaternion coefficients.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Composition `self ∘ other`: the result applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Angle (radians) of the relative rotation between `self` and `other`.
    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Interpolates translation linearly and rotation spherically.
    pub fn interpolate(&self, other: &RigidTransform, alpha: f64) -> RigidTransform {
        let rotation = self.rotation.try_slerp(&other.rotation, alpha, 1e-12).unwrap_or(self.rotation);
        Self::new(rotation, self.translation + (other.translation - self.translation) * alpha)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite()) && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformRepr { q: self.wxyz(), t: self.translation.into() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(d)?;
        RigidTransform::from_wxyz(repr.q, repr.t).map_err(serde::de::Error::custom)
    }
}

/// Rotation vector (axis · angle) to unit quaternion.
pub fn rotation_from_vector(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A calibrated pinhole camera. Detections are assumed undistorted.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    id: u32,
    intrinsics: Matrix3<f64>,
    /// World-to-camera rotation as given; the quaternion in `extrinsics` is
    /// derived from it so that matrix-based files round-trip exactly.
    rotation: Matrix3<f64>,
    extrinsics: RigidTransform,
    width: u32,
    height: u32,
}

impl CameraModel {
    pub fn new(id: u32, intrinsics: Matrix3<f64>, extrinsics: RigidTransform, width: u32, height: u32) -> Result<Self, GeometryError> {
        let bad = |reason: &str| GeometryError::InvalidCamera { id, reason: reason.to_string() };
        if !extrinsics.is_finite() {
            return Err(bad("non-finite extrinsics"));
        }
        Self::from_matrices(id, intrinsics, extrinsics.matrix(), *extrinsics.translation(), width, height)
    }

    /// Camera from a world-to-camera rotation matrix and translation.
    pub fn from_matrices(
        id: u32,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let bad = |reason: &str| GeometryError::InvalidCamera { id, reason: reason.to_string() };
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(bad("non-finite extrinsics"));
        }
        if (rotation.transpose() * rotation - Matrix3::identity()).norm() > 1e-6 || rotation.determinant() <= 0.0 {
            return Err(bad("R is not a rotation"));
        }
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rotation));
        let extrinsics = RigidTransform::new(q, translation);
        let camera = Self { id, intrinsics, rotation, extrinsics, width, height };
        camera.validate_intrinsics()?;
        Ok(camera)
    }

    fn validate_intrinsics(&self) -> Result<(), GeometryError> {
        let (id, intrinsics, width, height) = (self.id, self.intrinsics, self.width, self.height);
        let bad = |reason: &str| GeometryError::InvalidCamera { id, reason: reason.to_string() };
        if intrinsics.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite intrinsics"));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(bad("focal lengths must be positive"));
        }
        if intrinsics[(1, 0)] != 0.0 || intrinsics[(2, 0)] != 0.0 || intrinsics[(2, 1)] != 0.0 {
            return Err(bad("intrinsics must be upper triangular"));
        }
        if (intrinsics[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(bad("intrinsics K[2][2] must be 1"));
        }
        if width == 0 || height == 0 {
            return Err(bad("resolution must be non-zero"));
        }
        let (cx, cy) = (intrinsics[(0, 2)], intrinsics[(1, 2)]);
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(bad("principal point outside the image"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with image-up roughly along `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(id: u32, focal: f64, width: u32, height: u32, eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera { id, reason: "view direction parallel to up vector".into() });
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // Rows of the world→camera rotation are the camera axes in world coordinates.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let extrinsics = RigidTransform::new(rot, -(rot * eye));
        let k = Matrix3::new(focal, 0.0, width as f64 / 2.0, 0.0, focal, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Self::new(id, k, extrinsics, width, height)
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &RigidTransform {
        &self.extrinsics
    }

    /// World-to-camera rotation matrix.
    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(self.intrinsics[(0, 2)], self.intrinsics[(1, 2)])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        *self.extrinsics.inverse().translation()
    }

    pub fn to_camera_frame(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.transform_point(world)
    }

    /// Pinhole projection of a point already expressed in the camera frame.
    pub fn project_camera_frame(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { depth: p.z });
        }
        let h = self.intrinsics * p;
        Ok(Vector2::new(h.x / h.z, h.y / h.z))
    }

    pub fn project(&self, world: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.project_camera_frame(&self.to_camera_frame(world))
    }

    pub fn contains_pixel(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= self.width as f64 && px.y <= self.height as f64
    }

    /// True when the point projects inside the image with positive depth.
    pub fn sees(&self, world: &Vector3<f64>) -> bool {
        self.project(world).map(|px| self.contains_pixel(&px)).unwrap_or(false)
    }

    /// Unit direction in world coordinates of the ray through `pixel`.
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let k_inv = self.intrinsics.try_inverse().expect("intrinsics validated as invertible");
        let d_cam = k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        self.extrinsics.rotation().inverse_transform_vector(&d_cam).normalize()
    }

    /// The 3×4 matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(self.extrinsics.translation());
        self.intrinsics * rt
    }
}

/// A set of cameras addressed by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rig {
    cameras: Vec<CameraModel>,
    index: HashMap<u32, usize>,
}

impl Rig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self, GeometryError> {
        let mut index = HashMap::with_capacity(cameras.len());
        for (i, cam) in cameras.iter().enumerate() {
            if index.insert(cam.id(), i).is_some() {
                return Err(GeometryError::DuplicateCamera(cam.id()));
            }
        }
        Ok(Self { cameras, index })
    }

    pub fn get(&self, id: u32) -> Result<&CameraModel, GeometryError> {
        self.index.get(&id).map(|&i| &self.cameras[i]).ok_or(GeometryError::UnknownCamera(id))
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Position of camera `id` within [`Rig::cameras`].
    pub fn position(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// A rig restricted to the cameras at the given positions.
    pub fn subset(&self, positions: &[usize]) -> Rig {
        let cams = positions.iter().map(|&i| self.cameras[i].clone()).collect();
        Rig::new(cams).expect("subset of a valid rig has unique ids")
    }
}

/// Number of faces on a marker cube.
pub const CUBE_FACES: usize = 6;

/// A cube with one square fiducial per face, rigidly mounted on a host
/// (object part or body segment).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerCube {
    pub id: u32,
    pub edge_length: f64,
    /// Cube frame → host frame.
    pub mount: RigidTransform,
}

impl MarkerCube {
    pub fn new(id: u32, edge_length: f64, mount: RigidTransform) -> Result<Self, GeometryError> {
        if !(edge_length.is_finite() && edge_length > 0.0) {
            return Err(GeometryError::InvalidCube { id, reason: format!("edge length {edge_length} must be positive") });
        }
        Ok(Self { id, edge_length, mount })
    }

    /// Fiducial id printed on `face`.
    pub fn marker_id(&self, face: usize) -> u32 {
        self.id * CUBE_FACES as u32 + face as u32
    }

    /// Inverse of [`MarkerCube::marker_id`]; `None` if the marker is not on this cube.
    pub fn face_of(&self, marker_id: u32) -> Option<usize> {
        let base = self.id * CUBE_FACES as u32;
        (marker_id >= base && marker_id < base + CUBE_FACES as u32).then(|| (marker_id - base) as usize)
    }

    /// Outward unit normal of `face` in the cube frame.
    pub fn face_normal(face: usize) -> Vector3<f64> {
        let (n, _, _) = face_basis(face);
        n
    }

    /// Four face corners in the cube frame, counter-clockwise seen from outside.
    pub fn face_corners(&self, face: usize) -> [Vector3<f64>; 4] {
        let h = self.edge_length / 2.0;
        let (n, u, v) = face_basis(face);
        let c = n * h;
        [c + (-u - v) * h, c + (u - v) * h, c + (u + v) * h, c + (-u + v) * h]
    }

    /// All 6×4 corners in the cube frame.
    pub fn face_corner_coords(&self) -> [[Vector3<f64>; 4]; CUBE_FACES] {
        std::array::from_fn(|f| self.face_corners(f))
    }

    /// Face corners expressed in the host frame.
    pub fn host_corners(&self, face: usize) -> [Vector3<f64>; 4] {
        self.face_corners(face).map(|c| self.mount.transform_point(&c))
    }
}

/// (normal, u, v) with `u × v = normal`.
fn face_basis(face: usize) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    match face {
        0 => (x, y, z),
        1 => (-x, z, y),
        2 => (y, z, x),
        3 => (-y, x, z),
        4 => (z, x, y),
        5 => (-z, y, x),
        _ => panic!("cube face index {face} out of range"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn rz(deg: f64) -> RigidTransform {
        RigidTransform::from_axis_angle(&Vector3::z_axis(), deg.to_radians())
    }

    fn camera() -> CameraModel {
        let k = Matrix3::new(1000.0, 0.0, 640.0, 0.0, 1000.0, 360.0, 0.0, 0.0, 1.0);
        CameraModel::new(0, k, RigidTransform::identity(), 1280, 720).unwrap()
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = RigidTransform::new(UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1), Vector3::new(1.0, 2.0, 3.0));
        let left = RigidTransform::identity().compose(&t);
        assert!(left.rotation_angle_to(&t) < 1e-12);
        assert!(left.translation_distance_to(&t) < 1e-12);
        let id = t.compose(&t.inverse());
        assert!(id.rotation_angle_to(&RigidTransform::identity()) < 1e-9);
        assert!(id.translation().norm() < 1e-9);
    }

    #[test]
    fn compose_rotations_about_z() {
        // Oracle: multiply the rotation matrices directly.
        let a = rz(30.0);
        let b = rz(60.0);
        let expected = a.matrix() * b.matrix();
        let got = a.compose(&b);
        assert_relative_eq!(got.matrix(), expected, epsilon = 1e-12);
        assert!(got.rotation_angle_to(&rz(90.0)) < 1e-12);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let r = rz(90.0);
        let t = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let p = Vector3::zeros();
        // translate then rotate: (1,0,0) → (0,1,0)
        assert_relative_eq!(r.compose(&t).transform_point(&p), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn project_principal_point_and_offset() {
        let cam = camera();
        for depth in [0.5, 1.0, 7.0] {
            let px = cam.project(&Vector3::new(0.0, 0.0, depth)).unwrap();
            assert_relative_eq!(px, cam.principal_point(), epsilon = 1e-12);
        }
        let px = cam.project(&Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(1640.0, 360.0), epsilon = 1e-12);
        assert!(matches!(cam.project(&Vector3::new(0.1, 0.0, 0.0)), Err(GeometryError::BehindCamera { .. })));
    }

    #[test]
    fn camera_rejects_bad_intrinsics() {
        let k = Matrix3::new(-1.0, 0.0, 10.0, 0.0, 1.0, 10.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(1, k, RigidTransform::identity(), 20, 20).is_err());
        let k = Matrix3::new(1.0, 0.0, 10.0, 0.5, 1.0, 10.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(1, k, RigidTransform::identity(), 20, 20).is_err());
        let k = Matrix3::new(1.0, 0.0, 30.0, 0.0, 1.0, 10.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(1, k, RigidTransform::identity(), 20, 20).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let cam = CameraModel::look_at(3, 900.0, 1280, 720, Vector3::new(3.0, 0.5, 2.0), Vector3::new(0.0, 0.0, 1.0), Vector3::z()).unwrap();
        let px = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(px, cam.principal_point(), epsilon = 1e-9);
        assert_relative_eq!(cam.center(), Vector3::new(3.0, 0.5, 2.0), epsilon = 1e-12);
        // World up maps to image up (negative v).
        let above = cam.project(&Vector3::new(0.0, 0.0, 1.2)).unwrap();
        assert!(above.y < px.y);
        let dir = cam.ray_direction(&px);
        assert_relative_eq!(dir, (Vector3::new(0.0, 0.0, 1.0) - cam.center()).normalize(), epsilon = 1e-12);
    }

    #[test]
    fn cube_corner_geometry() {
        let cube = MarkerCube::new(2, 0.06, RigidTransform::identity()).unwrap();
        for face in 0..CUBE_FACES {
            let corners = cube.face_corners(face);
            let n = MarkerCube::face_normal(face);
            let center = n * 0.03;
            for c in &corners {
                assert_relative_eq!((c - center).norm(), 0.06 * 2f64.sqrt() / 2.0, epsilon = 1e-15);
            }
            for i in 0..4 {
                let a = corners[(i + 1) % 4] - corners[i];
                let b = corners[(i + 2) % 4] - corners[(i + 1) % 4];
                assert!(a.cross(&b).dot(&n) > 0.0, "face {face} not CCW");
            }
            assert_eq!(cube.face_of(cube.marker_id(face)), Some(face));
        }
        assert_eq!(cube.face_of(0), None);
    }

    #[test]
    fn transform_serde_round_trip_is_exact() {
        let t = RigidTransform::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(0.1, -2.5, 1e-7));
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.starts_with("{\"q\":["));
        let back: RigidTransform = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (-PI..PI, -PI..PI, -PI..PI, -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64)
            .prop_map(|(a, b, c, x, y, z)| RigidTransform::new(UnitQuaternion::from_euler_angles(a, b, c), Vector3::new(x, y, z)))
    }

    proptest! {
        #[test]
        fn composition_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.rotation_angle_to(&r) < 1e-9);
            prop_assert!(l.translation_distance_to(&r) < 1e-9);
        }

        #[test]
        fn quaternion_stays_unit(a in arb_transform(), b in arb_transform()) {
            let q = a.compose(&b.inverse());
            prop_assert!((q.rotation().quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn project_matches_camera_frame_pinhole(ext in arb_transform(), x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.5..6.0f64) {
            let k = Matrix3::new(800.0, 0.0, 320.0, 0.0, 820.0, 240.0, 0.0, 0.0, 1.0);
            let cam = CameraModel::new(0, k, ext, 640, 480).unwrap();
            let p_cam = Vector3::new(x, y, z);
            let world = ext.inverse().transform_point(&p_cam);
            let direct = Vector2::new(800.0 * x / z + 320.0, 820.0 * y / z + 240.0);
            let projected = cam.project(&world).unwrap();
            prop_assert!((projected - direct).norm() < 1e-9);
        }
    }
}
