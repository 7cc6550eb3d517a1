//! `calibrate-body` and `calibrate-hand`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{load_session, stats, triangulate_session, Input, Metrics, OutputDir, PipelineError, BODY_CALIBRATION_FILE, HAND_CALIBRATION_FILE};
use crate::kinematics::body::{max_offset_error, CALIBRATED_OFFSETS};
use crate::kinematics::hand::FINGERS;
use crate::kinematics::{
    calibrate_body as solve_body, calibrate_hand as solve_hand, BodyCalibrationConfig, BodyFrame, BodySkeleton, HandCalibrationConfig, HandSkeleton,
};
use crate::multiview::{TriangulatedCorner, TriangulationConfig};
use crate::session::{read_json, CaptureSession, HandPair, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateBodyConfig {
    pub triangulation: TriangulationConfig,
    pub calibration: BodyCalibrationConfig,
    /// Range-of-motion frames with fewer triangulated body corners are skipped.
    pub min_corners: usize,
}

impl Default for CalibrateBodyConfig {
    fn default() -> Self {
        Self { triangulation: TriangulationConfig::default(), calibration: BodyCalibrationConfig::default(), min_corners: 12 }
    }
}

/// Contents of `body_calibration.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyCalibrationFile {
    pub provenance: Provenance,
    pub skeleton: BodySkeleton,
    pub marker_rms: f64,
    pub epoch_losses: Vec<f64>,
    pub frames: usize,
}

/// Triangulated body corners of one frame in skeleton order.
pub fn body_corners(session: &CaptureSession, skeleton: &BodySkeleton, corners: &[TriangulatedCorner]) -> Vec<Option<Vector3<f64>>> {
    let by_key: HashMap<(u32, u8), Vector3<f64>> = corners.iter().map(|c| ((c.marker_id, c.corner_index), c.position)).collect();
    let first = session.meta.markers.body_first;
    let markers: usize = skeleton.parts().iter().map(|p| p.markers.len()).sum();
    (0..markers).flat_map(|k| (0..4u8).map(move |c| (first + k as u32, c))).map(|key| by_key.get(&key).copied()).collect()
}

pub fn calibrate_body(session_dir: &Path, out: &Path, cfg: &CalibrateBodyConfig) -> Result<Metrics, PipelineError> {
    let mut output = OutputDir::create(out, vec![Input::new("session", session_dir)])?;
    let session = load_session(session_dir)?;
    let (corners, failed) = triangulate_session(&session, &cfg.triangulation);
    let [start, end] = session.meta.rom;
    let mut frames = Vec::new();
    for f in start..end {
        let Some(m) = session.mocap_at(f) else { continue };
        let markers = body_corners(&session, &session.body, &corners[f]);
        if markers.iter().flatten().count() >= cfg.min_corners.max(3) {
            frames.push(BodyFrame { angles: m.body_angles.clone(), markers });
        }
    }
    if frames.is_empty() {
        return Err(PipelineError::Numerical(format!("no range-of-motion frame has {} body corners", cfg.min_corners)));
    }
    let cal = solve_body(&frames, &session.body, &cfg.calibration)?;
    let file = BodyCalibrationFile {
        provenance: Provenance::new(cfg, None),
        skeleton: cal.skeleton.clone(),
        marker_rms: cal.marker_rms,
        epoch_losses: cal.epoch_losses.clone(),
        frames: frames.len(),
    };
    output.write_json(BODY_CALIBRATION_FILE, &file)?;
    let mut results = json!({
        "frames": frames.len(),
        "triangulation_failures": failed,
        "marker_rms_m": cal.marker_rms,
        "initial_loss": cal.epoch_losses.first(),
        "final_loss": cal.epoch_losses.last(),
        "loss_non_increasing": cal.epoch_losses.windows(2).all(|w| w[1] <= w[0] * (1.0 + cfg.calibration.loss_tolerance) + 1e-18),
    });
    if let Some(truth) = &session.truth {
        results["truth"] = json!({
            "template_max_offset_error_m": max_offset_error(&session.body, &truth.body, &CALIBRATED_OFFSETS),
            "calibrated_max_offset_error_m": max_offset_error(&cal.skeleton, &truth.body, &CALIBRATED_OFFSETS),
        });
    }
    output.finish("calibrate-body", cfg, None, results)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateHandConfig {
    pub calibration: HandCalibrationConfig,
}

/// Contents of `hand_calibration.json` in a calibrate-hand output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandCalibrationFile {
    pub provenance: Provenance,
    pub hands: HandPair,
    /// Mean fingertip-to-corner distance per hand (m).
    pub left_tip_residual: f64,
    pub right_tip_residual: f64,
}

fn finger_scale_errors(a: &HandSkeleton, b: &HandSkeleton) -> Vec<f64> {
    (0..FINGERS).map(|f| (a.finger_scale(f) - b.finger_scale(f)).abs()).collect()
}

pub fn calibrate_hand(session_dir: &Path, out: &Path, cfg: &CalibrateHandConfig) -> Result<Metrics, PipelineError> {
    let mut output = OutputDir::create(out, vec![Input::new("session", session_dir)])?;
    let session = load_session(session_dir)?;
    let data = session.hand_calibration.as_ref().ok_or_else(|| PipelineError::Validation("session has no hand_calibration.json".into()))?;
    let left = solve_hand(&data.left, &data.structure, &session.hands.left, &cfg.calibration)?;
    let right = solve_hand(&data.right, &data.structure, &session.hands.right, &cfg.calibration)?;
    let file = HandCalibrationFile {
        provenance: Provenance::new(cfg, None),
        hands: HandPair { left: left.skeleton.clone(), right: right.skeleton.clone() },
        left_tip_residual: left.tip_residual,
        right_tip_residual: right.tip_residual,
    };
    output.write_json(HAND_CALIBRATION_FILE, &file)?;
    let mut results = json!({
        "left": { "steps": data.left.len(), "tip_residual_m": left.tip_residual, "initial_loss": left.loss_history.first(), "best_loss": left.loss_history.iter().copied().fold(f64::INFINITY, f64::min) },
        "right": { "steps": data.right.len(), "tip_residual_m": right.tip_residual, "initial_loss": right.loss_history.first(), "best_loss": right.loss_history.iter().copied().fold(f64::INFINITY, f64::min) },
    });
    if let Some(truth) = &session.truth {
        results["truth"] = json!({
            "left_finger_scale_error": stats(&finger_scale_errors(&left.skeleton, &truth.hands.left)),
            "right_finger_scale_error": stats(&finger_scale_errors(&right.skeleton, &truth.hands.right)),
        });
    }
    output.finish("calibrate-hand", cfg, None, results)
}

/// Body skeleton from a calibrate-body output, or the session template.
pub fn load_body(path: Option<&Path>, session: &CaptureSession) -> Result<BodySkeleton, PipelineError> {
    match path {
        Some(p) => Ok(read_json::<BodyCalibrationFile>(&super::artifact(p, BODY_CALIBRATION_FILE))?.skeleton),
        None => Ok(session.body.clone()),
    }
}

/// Hands from a calibrate-hand output, or the session templates.
pub fn load_hands(path: Option<&Path>, session: &CaptureSession) -> Result<HandPair, PipelineError> {
    match path {
        Some(p) => Ok(read_json::<HandCalibrationFile>(&super::artifact(p, HAND_CALIBRATION_FILE))?.hands),
        None => Ok(session.hands.clone()),
    }
}
