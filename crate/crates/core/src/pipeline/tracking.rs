//! `track-objects` and `fit-articulation`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{load_session, read_poses, stats, triangulate_session, Input, Metrics, ObjectPoseRecord, OutputDir, PipelineError, PoseRecord, POSES_FILE};
use crate::articulation::{fit_revolute, fit_sliding, part_state, JointSpec, PartObservationSet, ResidualThresholds, RevoluteConfig};
use crate::geometry::{MarkerCube, RigidTransform, CUBE_FACES};
use crate::multiview::{TriangulatedCorner, TriangulationConfig};
use crate::rigid::{cube_correspondence, kabsch, MarkerCorrespondence};
use crate::session::{config_hash, CaptureSession, ObjectModel, PartKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackObjectsConfig {
    pub triangulation: TriangulationConfig,
    /// Corners needed for a part pose.
    pub min_corners: usize,
    /// Poses whose corner fit RMS exceeds this are rejected (m).
    pub max_residual: f64,
    pub thresholds: ResidualThresholds,
}

impl Default for TrackObjectsConfig {
    fn default() -> Self {
        Self { triangulation: TriangulationConfig::default(), min_corners: 4, max_residual: 0.005, thresholds: pipeline_thresholds() }
    }
}

/// Residual tolerances for states of tracked parts. The translation residual
/// is taken at the object origin, where a degree of tracking error on a
/// tall object already moves it by over a centimetre.
pub fn pipeline_thresholds() -> ResidualThresholds {
    ResidualThresholds { translation: 0.03, ..ResidualThresholds::default() }
}

/// Pose of the object-canonical frame carried by a set of cubes, with the
/// per-coordinate RMS of the fit.
pub fn cube_pose(corners: &[&TriangulatedCorner], cubes: &[MarkerCube], min_corners: usize) -> Option<(RigidTransform, f64)> {
    let (canonical, observed, weights) = cube_correspondence(corners, cubes);
    if canonical.len() < min_corners.max(3) {
        return None;
    }
    let corr = MarkerCorrespondence::new(canonical, observed, weights).ok()?;
    let pose = kabsch(&corr).ok()?;
    Some((pose, corr.coordinate_rms(&pose)))
}

/// Joints of every part, base first (always `None`).
fn part_joints(model: &ObjectModel) -> Result<Vec<Option<JointSpec>>, PipelineError> {
    model.parts.iter().map(|p| p.joint().map_err(PipelineError::from)).collect()
}

/// Builds pose records for every object at every frame where its base is
/// observed.
fn track(
    session: &CaptureSession,
    corners: &[Vec<TriangulatedCorner>],
    cfg: &TrackObjectsConfig,
    hash: &str,
) -> Result<(Vec<ObjectPoseRecord>, BTreeMap<String, serde_json::Value>), PipelineError> {
    let mut records = Vec::new();
    let mut summary = BTreeMap::new();
    let joints: BTreeMap<&String, Vec<Option<JointSpec>>> =
        session.objects.iter().map(|(n, m)| Ok((n, part_joints(m)?))).collect::<Result<_, PipelineError>>()?;
    let mut residuals: BTreeMap<&String, Vec<f64>> = BTreeMap::new();
    let mut part_counts: BTreeMap<&String, Vec<usize>> = session.objects.iter().map(|(n, m)| (n, vec![0; m.parts.len()])).collect();
    let mut violations: BTreeMap<&String, usize> = BTreeMap::new();
    for (f, frame) in corners.iter().enumerate() {
        let refs: Vec<&TriangulatedCorner> = frame.iter().collect();
        for (name, model) in &session.objects {
            let poses: Vec<Option<(RigidTransform, f64)>> =
                model.parts.iter().map(|p| cube_pose(&refs, &p.cubes, cfg.min_corners).filter(|(_, rms)| *rms <= cfg.max_residual)).collect();
            for (k, p) in poses.iter().enumerate() {
                if let Some((_, rms)) = p {
                    part_counts.get_mut(name).expect("object listed")[k] += 1;
                    residuals.entry(name).or_default().push(*rms);
                }
            }
            let Some((base, _)) = poses[0] else { continue };
            let states = poses
                .iter()
                .zip(&joints[name])
                .enumerate()
                .map(|(k, (p, j))| {
                    if k == 0 {
                        return Some(0.0);
                    }
                    let ((pose, _), joint) = (p.as_ref()?, j.as_ref()?);
                    match part_state(&base, pose, joint, &cfg.thresholds) {
                        Ok(m) => Some(m.value),
                        Err(_) => {
                            *violations.entry(name).or_default() += 1;
                            None
                        }
                    }
                })
                .collect();
            records.push(ObjectPoseRecord {
                frame: f,
                object: name.clone(),
                l: (*base.translation()).into(),
                q: base.wxyz(),
                states,
                parts: poses.iter().map(|p| p.as_ref().map(|(t, _)| PoseRecord::from(t))).collect(),
                source: "tracked".into(),
                config_hash: hash.into(),
            });
        }
    }
    for (name, counts) in part_counts {
        summary.insert(
            name.clone(),
            json!({
                "frames_with_part": counts,
                "corner_rms_m": stats(residuals.get(name).map_or(&[][..], |v| &v[..])),
                "model_violations": violations.get(name).copied().unwrap_or(0),
            }),
        );
    }
    Ok((records, summary))
}

/// Errors of recorded base and part poses against the session truth.
fn pose_errors(session: &CaptureSession, records: &[ObjectPoseRecord]) -> Result<serde_json::Value, PipelineError> {
    let Some(truth) = &session.truth else { return Ok(serde_json::Value::Null) };
    let mut out = serde_json::Map::new();
    for (name, t) in &truth.objects {
        let (mut trans, mut rot, mut part_trans) = (Vec::new(), Vec::new(), Vec::new());
        for r in records.iter().filter(|r| &r.object == name && r.source == "tracked") {
            let base = r.base()?;
            let true_base = &t.poses[r.frame];
            trans.push(base.translation_distance_to(true_base));
            rot.push(base.rotation_angle_to(true_base).to_degrees());
            for (k, p) in r.parts.iter().enumerate().skip(1) {
                if let (Some(p), Some(Some(j))) = (p, t.joints.get(k - 1)) {
                    let true_part = true_base.compose(&j.transform(t.states[r.frame][k]));
                    part_trans.push(p.transform()?.translation_distance_to(&true_part));
                }
            }
        }
        out.insert(name.clone(), json!({ "base_translation_m": stats(&trans), "base_rotation_deg": stats(&rot), "part_translation_m": stats(&part_trans) }));
    }
    Ok(serde_json::Value::Object(out))
}

pub fn track_objects(session_dir: &Path, out: &Path, cfg: &TrackObjectsConfig) -> Result<Metrics, PipelineError> {
    let mut output = OutputDir::create(out, vec![Input::new("session", session_dir)])?;
    let session = load_session(session_dir)?;
    let (corners, failed) = triangulate_session(&session, &cfg.triangulation);
    let hash = config_hash(cfg);
    let (records, summary) = track(&session, &corners, cfg, &hash)?;
    output.write_jsonl(POSES_FILE, &records)?;
    let results = json!({
        "frames": session.meta.frames,
        "records": records.len(),
        "triangulated_corners": corners.iter().map(Vec::len).sum::<usize>(),
        "triangulation_failures": failed,
        "objects": summary,
        "truth": pose_errors(&session, &records)?,
    });
    output.finish("track-objects", cfg, None, results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitArticulationConfig {
    pub revolute: RevoluteConfig,
    pub thresholds: ResidualThresholds,
    /// Observed states fed to the joint fit, spread over the motion range.
    pub max_states: usize,
}

impl Default for FitArticulationConfig {
    fn default() -> Self {
        Self { revolute: RevoluteConfig::default(), thresholds: pipeline_thresholds(), max_states: 12 }
    }
}

/// Every fiducial corner of a part's cubes in the object-canonical frame.
fn part_points(cubes: &[MarkerCube]) -> Vec<Vector3<f64>> {
    cubes.iter().flat_map(|c| (0..CUBE_FACES).flat_map(move |f| c.host_corners(f))).collect()
}

/// Up to `count` entries of `rel` spread evenly over their motion
/// magnitude, smallest first.
fn spread_states(rel: &[RigidTransform], count: usize) -> Vec<RigidTransform> {
    let first = rel[0];
    let mut keyed: Vec<(f64, RigidTransform)> = rel.iter().map(|r| (r.rotation_angle_to(&first) + r.translation_distance_to(&first), *r)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = keyed.len();
    if n <= count {
        return keyed.into_iter().map(|(_, r)| r).collect();
    }
    let mut picks: Vec<usize> = (0..count).map(|i| i * (n - 1) / (count - 1).max(1)).collect();
    picks.dedup();
    picks.into_iter().map(|i| keyed[i].1).collect()
}

fn fit_part(kind: PartKind, obs: &PartObservationSet, cfg: &FitArticulationConfig) -> Result<(JointSpec, serde_json::Value), PipelineError> {
    match kind {
        PartKind::Revolute => {
            let fit = fit_revolute(obs, &cfg.revolute)?;
            let info = json!({ "objective_m2": fit.objective, "gradient_norm": fit.gradient_norm, "iterations": fit.iterations });
            Ok((fit.joint, info))
        }
        PartKind::Sliding => Ok((fit_sliding(obs)?, json!({}))),
        PartKind::Base => Err(PipelineError::Validation("base parts have no joint".into())),
    }
}

pub fn fit_articulation(session_dir: &Path, poses: &Path, out: &Path, cfg: &FitArticulationConfig) -> Result<Metrics, PipelineError> {
    let mut output = OutputDir::create(out, vec![Input::new("session", session_dir), Input::new("poses", poses)])?;
    let session = load_session(session_dir)?;
    let mut records = read_poses(poses)?;
    if cfg.max_states < 2 {
        return Err(PipelineError::Validation("max_states must be at least 2".into()));
    }
    let hash = config_hash(cfg);
    let mut results = serde_json::Map::new();
    let mut fitted: BTreeMap<String, Vec<Option<JointSpec>>> = BTreeMap::new();
    // A fitted axis may point opposite to the true one; truth comparisons flip it.
    let mut signs: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for (name, model) in &session.objects {
        let mut joints = vec![None; model.parts.len()];
        for (k, part) in model.parts.iter().enumerate().skip(1) {
            let rel: Vec<RigidTransform> = records
                .iter()
                .filter(|r| &r.object == name)
                .filter_map(|r| Some((r.base().ok()?, r.parts.get(k)?.as_ref()?.transform().ok()?)))
                .map(|(b, p)| b.inverse().compose(&p))
                .collect();
            if rel.len() < 2 {
                return Err(PipelineError::Numerical(format!("{name}/{}: observed in {} frames with its base", part.part, rel.len())));
            }
            let canonical = part_points(&part.cubes);
            let states: Vec<Vec<Vector3<f64>>> =
                spread_states(&rel, cfg.max_states).iter().map(|r| canonical.iter().map(|p| r.transform_point(p)).collect()).collect();
            let obs = PartObservationSet::new(states)?;
            let (joint, mut info) = fit_part(part.kind, &obs, cfg)?;
            info["frames"] = json!(rel.len());
            info["states_used"] = json!(obs.state_count());
            info["axis"] = json!(joint.axis().into_inner().as_slice());
            info["pivot"] = json!(joint.pivot().map(|p| p.as_slice().to_vec()));
            if let Some(Some(true_joint)) = session.truth.as_ref().and_then(|t| t.objects.get(name)).and_then(|t| t.joints.get(k - 1)) {
                let b = true_joint.axis().into_inner();
                let sign = if joint.axis().dot(&b) < 0.0 { -1.0 } else { 1.0 };
                let a = joint.axis().into_inner() * sign;
                signs.insert((name.clone(), k), sign);
                info["truth"] = json!({
                    "axis_error_deg": a.angle(&b).to_degrees(),
                    "pivot_line_distance_m": match (joint.pivot(), true_joint.pivot()) {
                        (Some(p), Some(q)) => json!((p - q - b * (p - q).dot(&b)).norm()),
                        _ => serde_json::Value::Null,
                    },
                });
            }
            results.insert(format!("{name}/{}", part.part), info);
            joints[k] = Some(joint);
        }
        fitted.insert(name.clone(), joints);
    }
    // States of every record under the fitted joints.
    let mut state_errors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut violations = 0usize;
    for r in &mut records {
        let joints = &fitted[&r.object];
        let base = r.base()?;
        let mut states = vec![Some(0.0)];
        for (k, joint) in joints.iter().enumerate().skip(1) {
            let s = match (joint, r.parts.get(k).copied().flatten()) {
                (Some(j), Some(p)) => match part_state(&base, &p.transform()?, j, &cfg.thresholds) {
                    Ok(m) => Some(m.value),
                    Err(_) => {
                        violations += 1;
                        None
                    }
                },
                _ => None,
            };
            if let (Some(s), Some(t), Some(sign)) = (s, session.truth.as_ref().and_then(|t| t.objects.get(&r.object)), signs.get(&(r.object.clone(), k))) {
                state_errors.entry(r.object.clone()).or_default().push((sign * s - t.states[r.frame][k]).abs().to_degrees());
            }
            states.push(s);
        }
        r.states = states;
        r.config_hash = hash.clone();
    }
    output.write_jsonl(POSES_FILE, &records)?;
    for (name, model) in &session.objects {
        let mut parts = model.parts.clone();
        for (p, j) in parts.iter_mut().zip(&fitted[name]) {
            if let Some(j) = j {
                p.axis = Some(j.axis().into_inner().into());
                p.pivot = j.pivot().map(|v| (*v).into());
            }
        }
        output.write_json(&format!("objects/{name}/parts.json"), &parts)?;
    }
    let results = json!({
        "parts": results,
        "records": records.len(),
        "model_violations": violations,
        "truth_state_error_deg": state_errors.iter().map(|(k, v)| (k.clone(), stats(v))).collect::<BTreeMap<_, _>>(),
    });
    output.finish("fit-articulation", cfg, None, results)
}
