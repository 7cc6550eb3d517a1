//! `gen-synthetic`, `simulate occlusion|cameras` and `evaluate drop-recover`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Metrics, OutputDir, PipelineError};
use crate::postprocess::{drop_and_recover, fuse_wrist, mean_jerk, wrist_drop_recover, FillConfig, FusionConfig};
use crate::simulation::capture::{generate_session, CaptureSpec};
use crate::simulation::generator::{carry_sequence, study_scene, target_cube_corners, wrist_streams, StudySpec};
use crate::simulation::{camera_count_study, study_csv, virtual_marker_study, SimulationError, StudyRow};

pub const OCCLUSION_CSV: &str = "occlusion.csv";
pub const CAMERAS_CSV: &str = "cameras.csv";
pub const DROP_RECOVER_CSV: &str = "drop_recover.csv";
pub const WRIST_RECOVER_CSV: &str = "wrist_recover.csv";

/// Writes a synthetic session with ground truth. The `CaptureSpec` seed is replaced
/// by `seed`.
pub fn gen_synthetic(out: &Path, spec: &CaptureSpec, seed: u64) -> Result<Metrics, PipelineError> {
    let spec = CaptureSpec { seed, ..spec.clone() };
    let mut output = OutputDir::create(out, Vec::new())?;
    let session = generate_session(&spec)?;
    session.save(output.path())?;
    let names = crate::session::input_digest(output.path())?.into_iter().map(|(p, _)| p).filter(|p| p != super::METRICS_FILE);
    output.adopt(names);
    let results = json!({
        "frames": session.meta.frames,
        "cameras": session.rig.len(),
        "detections": session.detections.len(),
        "mocap_frames": session.mocap.len(),
        "objects": session.objects.keys().collect::<Vec<_>>(),
    });
    output.finish("gen-synthetic", &spec, Some(seed), results)
}

fn monotone(rows: &[StudyRow], slack: f64) -> bool {
    rows.windows(2).all(|w| w[1].mean >= w[0].mean - slack)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionStudyConfig {
    /// Scene size; its seed is replaced by the run seed.
    pub scene: StudySpec,
    pub markers: Vec<usize>,
    pub window: usize,
    pub stride: usize,
    pub draws: usize,
}

impl Default for OcclusionStudyConfig {
    fn default() -> Self {
        Self { scene: StudySpec::default(), markers: vec![4, 7, 10, 20, 40], window: 300, stride: 30, draws: 8 }
    }
}

pub fn simulate_occlusion(out: &Path, cfg: &OcclusionStudyConfig, seed: u64) -> Result<Metrics, PipelineError> {
    let cfg = OcclusionStudyConfig { scene: StudySpec { seed, ..cfg.scene.clone() }, ..cfg.clone() };
    if cfg.markers.is_empty() || cfg.markers.contains(&0) {
        return Err(SimulationError::InvalidSpec("marker counts must be positive".into()).into());
    }
    let mut output = OutputDir::create(out, Vec::new())?;
    let scene = study_scene(&cfg.scene)?;
    let rows = virtual_marker_study(&scene, &cfg.markers, cfg.window, cfg.stride, cfg.draws, seed)?;
    output.write_bytes(OCCLUSION_CSV, study_csv("size", &rows).as_bytes())?;
    let results = json!({ "rows": rows, "monotone": monotone(&rows, 0.0) });
    output.finish("simulate occlusion", &cfg, Some(seed), results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraStudyConfig {
    /// Scene size; its seed is replaced by the run seed.
    pub scene: StudySpec,
    /// Subset sizes; empty means every tenth camera count up to the full rig.
    pub sizes: Vec<usize>,
    pub samples: usize,
}

impl Default for CameraStudyConfig {
    fn default() -> Self {
        Self { scene: StudySpec::default(), sizes: Vec::new(), samples: 20 }
    }
}

pub fn simulate_cameras(out: &Path, cfg: &CameraStudyConfig, seed: u64) -> Result<Metrics, PipelineError> {
    let mut cfg = CameraStudyConfig { scene: StudySpec { seed, ..cfg.scene.clone() }, ..cfg.clone() };
    if cfg.sizes.is_empty() {
        let n = cfg.scene.cameras;
        cfg.sizes = (1..=n / 10).map(|k| 10 * k).collect();
        if cfg.sizes.last() != Some(&n) {
            cfg.sizes.push(n);
        }
    }
    let mut output = OutputDir::create(out, Vec::new())?;
    let scene = study_scene(&cfg.scene)?;
    let rows = camera_count_study(&scene, &target_cube_corners(), &cfg.sizes, cfg.samples, seed)?;
    output.write_bytes(CAMERAS_CSV, study_csv("size", &rows).as_bytes())?;
    let full = rows.iter().find(|r| r.size == cfg.scene.cameras).map(|r| r.mean);
    let results = json!({ "rows": rows, "full_rig_ratio": full, "monotone_2pct": monotone(&rows, 0.02) });
    output.finish("simulate cameras", &cfg, Some(seed), results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropRecoverConfig {
    pub frames: usize,
    pub rate_hz: f64,
    pub windows: Vec<usize>,
    pub placements: usize,
    /// Marker jitter of the wrist stream (m).
    pub marker_noise: f64,
    pub fill: FillConfig,
    pub fusion: FusionConfig,
}

impl Default for DropRecoverConfig {
    fn default() -> Self {
        Self {
            frames: 1800,
            rate_hz: 30.0,
            windows: vec![5, 15, 30, 60],
            placements: 8,
            marker_noise: 0.003,
            fill: FillConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

pub fn evaluate_drop_recover(out: &Path, cfg: &DropRecoverConfig, seed: u64) -> Result<Metrics, PipelineError> {
    let mut output = OutputDir::create(out, Vec::new())?;
    let carry = carry_sequence(cfg.frames, cfg.rate_hz, seed);
    let rows = drop_and_recover(&carry, &cfg.windows, cfg.placements, &cfg.fill)?;
    let mut csv = String::from("window,placements,fill_translation,fill_rotation_deg,baseline_translation,baseline_rotation_deg\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.window, r.placements, r.fill_translation, r.fill_rotation_deg, r.baseline_translation, r.baseline_rotation_deg
        ));
    }
    output.write_bytes(DROP_RECOVER_CSV, csv.as_bytes())?;

    let wrist = wrist_streams(cfg.frames, cfg.rate_hz, cfg.marker_noise, seed);
    let wrist_rows = wrist_drop_recover(&wrist.truth, &wrist.mocap, &wrist.marker, &cfg.windows, cfg.placements, &cfg.fusion)?;
    let mut csv = String::from("window,placements,fused_translation,mocap_translation\n");
    for r in &wrist_rows {
        csv.push_str(&format!("{},{},{},{}\n", r.window, r.placements, r.fused_translation, r.mocap_translation));
    }
    output.write_bytes(WRIST_RECOVER_CSV, csv.as_bytes())?;

    let fused = fuse_wrist(&wrist.marker, &wrist.mocap, &cfg.fusion)?;
    let positions = |s: &[crate::geometry::RigidTransform]| s.iter().map(|p| *p.translation()).collect::<Vec<_>>();
    let fused_jerk = mean_jerk(&positions(&fused.poses), cfg.rate_hz)?;
    let mocap_jerk = mean_jerk(&positions(&wrist.mocap), cfg.rate_hz)?;
    let fused_error = fused.poses.iter().zip(&wrist.truth).map(|(a, b)| a.translation_distance_to(b)).sum::<f64>() / cfg.frames as f64;
    let results = json!({
        "drop_recover": rows,
        "fill_to_baseline": rows.iter().map(|r| r.fill_translation / r.baseline_translation).collect::<Vec<_>>(),
        "wrist_recover": wrist_rows,
        "fused_jerk": fused_jerk,
        "mocap_jerk": mocap_jerk,
        "jerk_ratio": fused_jerk / mocap_jerk,
        "fused_wrist_error_m": fused_error,
    });
    output.finish("evaluate drop-recover", cfg, Some(seed), results)
}
