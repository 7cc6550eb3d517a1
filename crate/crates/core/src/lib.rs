//! Capture processing for multi-camera fiducial markers and wearable motion capture.

#![allow(clippy::needless_range_loop)]

pub mod articulation;
pub mod geometry;
pub mod kinematics;
pub mod multiview;
mod optim;
pub mod pipeline;
pub mod postprocess;
pub mod representation;
pub mod rigid;
pub mod session;
pub mod simulation;
pub mod state;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/conventions.md")]
    struct Conventions;
    #[doc = include_str!("../../../book/src/tracking.md")]
    struct Tracking;
    #[doc = include_str!("../../../book/src/calibration.md")]
    struct Calibration;
    #[doc = include_str!("../../../book/src/postprocess.md")]
    struct Postprocess;
    #[doc = include_str!("../../../book/src/studies.md")]
    struct Studies;
    #[doc = include_str!("../../../book/src/features.md")]
    struct Features;
}
