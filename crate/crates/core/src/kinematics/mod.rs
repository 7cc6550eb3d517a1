//! Wearable mocap alignment: body and hand skeleton calibration against
//! triangulated marker corners.

pub mod body;
pub mod hand;

use thiserror::Error;

use crate::rigid::RigidError;
use crate::state::StateError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error(transparent)]
    Dimension(#[from] StateError),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("fewer than three visible marker corners")]
    NoVisibleMarkers,
    #[error("loss increased in epoch {epoch}: {previous:.6e} -> {current:.6e}")]
    NonDecreasingLoss { epoch: usize, previous: f64, current: f64 },
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("optimization did not converge: {0}")]
    NonConvergence(String),
    #[error("invalid calibration structure: {0}")]
    InvalidStructure(String),
    #[error("no touch events")]
    NoEvents,
    #[error(transparent)]
    Rigid(#[from] RigidError),
}

pub use body::{
    calibrate_body, fk_body, fk_body_at, mocap_to_camera, synthetic_rom, BodyCalibration, BodyCalibrationConfig, BodyFrame, BodyPose, BodySkeleton,
    PartMarkers, SolePoint, SyntheticRom,
};
pub use hand::{
    calibrate_hand, calibrate_hand_observed, fk_hand, hand_protocol, synthetic_touches, validate_hand_ape, wrist_frame, CalibrationStructure, HandCalibration,
    HandCalibrationConfig, HandPose, HandSide, HandSkeleton, HandTouchStep, Touch,
};
