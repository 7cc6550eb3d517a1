//! Per-frame person and object state records.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;

/// Number of body segments driven by the mocap suit.
pub const BODY_JOINTS: usize = 23;
/// Number of segments per glove.
pub const HAND_JOINTS: usize = 20;

/// Per-joint rotation vectors (axis · angle, radians).
pub type JointAngles = Vec<[f64; 3]>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("{what}: expected {expected} entries, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
}

pub(crate) fn check_angles(what: &'static str, angles: &[[f64; 3]], expected: usize) -> Result<(), StateError> {
    if angles.len() != expected {
        return Err(StateError::DimensionMismatch { what, expected, got: angles.len() });
    }
    if angles.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StateError::NonFinite(what));
    }
    Ok(())
}

/// Person state at one instant: body and hand joint angles plus the root pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonState {
    pub body: JointAngles,
    pub left_hand: JointAngles,
    pub right_hand: JointAngles,
    pub root: RigidTransform,
}

impl PersonState {
    pub fn new(body: JointAngles, left_hand: JointAngles, right_hand: JointAngles, root: RigidTransform) -> Result<Self, StateError> {
        check_angles("body angles", &body, BODY_JOINTS)?;
        check_angles("left hand angles", &left_hand, HAND_JOINTS)?;
        check_angles("right hand angles", &right_hand, HAND_JOINTS)?;
        Ok(Self { body, left_hand, right_hand, root })
    }

    pub fn rest() -> Self {
        Self {
            body: vec![[0.0; 3]; BODY_JOINTS],
            left_hand: vec![[0.0; 3]; HAND_JOINTS],
            right_hand: vec![[0.0; 3]; HAND_JOINTS],
            root: RigidTransform::identity(),
        }
    }
}

/// Object state: rigid pose of the base part plus one scalar per articulated part
/// (radians for revolute joints, meters for sliding joints).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectState {
    pub translation: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub part_states: Vec<f64>,
}

impl ObjectState {
    pub fn new(pose: RigidTransform, part_states: Vec<f64>, part_count: usize) -> Result<Self, StateError> {
        if part_states.len() != part_count {
            return Err(StateError::DimensionMismatch { what: "part states", expected: part_count, got: part_states.len() });
        }
        if part_states.iter().any(|v| !v.is_finite()) {
            return Err(StateError::NonFinite("part states"));
        }
        Ok(Self { translation: *pose.translation(), orientation: *pose.rotation(), part_states })
    }

    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.orientation, self.translation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn person_state_checks_dimensions() {
        let ok = PersonState::rest();
        assert!(PersonState::new(ok.body.clone(), ok.left_hand.clone(), ok.right_hand.clone(), ok.root).is_ok());
        let err = PersonState::new(vec![[0.0; 3]; 22], ok.left_hand.clone(), ok.right_hand.clone(), ok.root).unwrap_err();
        assert_eq!(err, StateError::DimensionMismatch { what: "body angles", expected: 23, got: 22 });
        let mut nan = ok.left_hand.clone();
        nan[3][1] = f64::NAN;
        assert!(PersonState::new(ok.body, nan, ok.right_hand, ok.root).is_err());
    }

    #[test]
    fn object_state_part_count() {
        let pose = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let s = ObjectState::new(pose, vec![0.1, 0.2], 2).unwrap();
        assert_eq!(s.pose(), pose);
        assert!(ObjectState::new(pose, vec![0.1], 2).is_err());
    }
}
