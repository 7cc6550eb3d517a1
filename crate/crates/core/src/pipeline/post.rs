//! `postprocess`: world alignment of the mocap body, wrist fusion and gap
//! filling of object tracks.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::calibrate::{body_corners, load_body, load_hands};
use super::{
    load_session, read_poses, stats, triangulate_session, Input, Metrics, ObjectPoseRecord, OutputDir, PipelineError, PoseRecord, BODY_STREAM_FILE, POSES_FILE,
};
use crate::articulation::JointSpec;
use crate::geometry::RigidTransform;
use crate::kinematics::body::{LEFT_HAND, RIGHT_HAND};
use crate::kinematics::{fk_body, mocap_to_camera, wrist_frame, HandSide, HandSkeleton};
use crate::multiview::{TriangulatedCorner, TriangulationConfig};
use crate::postprocess::{
    baseline_interpolate, fill_object_gap, fuse_wrist, marker_weight, AnchorFlag, FillConfig, FillMethod, FusionConfig, TrackGap, WristSample,
};
use crate::rigid::kabsch_points;
use crate::session::{config_hash, read_json, CaptureSession, PartModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub triangulation: TriangulationConfig,
    pub fusion: FusionConfig,
    pub fill: FillConfig,
    /// Surface samples per object used to find the holding joint.
    pub surface_samples: usize,
    /// Body corners needed to solve the mocap-to-world alignment of a frame.
    pub min_alignment_corners: usize,
    /// Wrist marker corners needed for a marker wrist pose.
    pub min_wrist_corners: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            triangulation: TriangulationConfig::default(),
            fusion: FusionConfig::default(),
            fill: FillConfig::default(),
            surface_samples: 300,
            min_alignment_corners: 12,
            min_wrist_corners: 4,
        }
    }
}

/// One line of `body.jsonl`: world joint poses after fusion, the fused wrist
/// frames and the glove angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyStreamRecord {
    pub frame: usize,
    pub joints: Vec<PoseRecord>,
    pub left_wrist: PoseRecord,
    pub right_wrist: PoseRecord,
    pub left_hand: Vec<[f64; 3]>,
    pub right_hand: Vec<[f64; 3]>,
    pub left_flag: AnchorFlag,
    pub right_flag: AnchorFlag,
    /// Whether the world alignment was solved at this frame rather than interpolated.
    pub aligned: bool,
}

impl BodyStreamRecord {
    pub fn joint_poses(&self) -> Result<Vec<RigidTransform>, PipelineError> {
        self.joints.iter().map(PoseRecord::transform).collect()
    }
}

/// Fills `None` entries by interpolating between the nearest known
/// neighbours, holding the nearest one at the ends. `None` when nothing is
/// known.
pub fn fill_between<T: Copy>(stream: &[Option<T>], lerp: impl Fn(&T, &T, f64) -> T) -> Option<Vec<T>> {
    let known: Vec<usize> = (0..stream.len()).filter(|&i| stream[i].is_some()).collect();
    let (&first, &last) = (known.first()?, known.last()?);
    let mut out = Vec::with_capacity(stream.len());
    let mut next = 0;
    for (i, v) in stream.iter().enumerate() {
        if let Some(v) = v {
            out.push(*v);
            next += 1;
            continue;
        }
        let value = if i < first {
            stream[first].expect("known")
        } else if i > last {
            stream[last].expect("known")
        } else {
            let (a, b) = (known[next - 1], known[next]);
            lerp(&stream[a].expect("known"), &stream[b].expect("known"), (i - a) as f64 / (b - a) as f64)
        };
        out.push(value);
    }
    Some(out)
}

/// Joints of every part per object: from `objects/<name>/parts.json` next
/// to the poses when present, else from the session models.
pub fn load_joints(poses: &Path, session: &CaptureSession) -> Result<BTreeMap<String, Vec<Option<JointSpec>>>, PipelineError> {
    let dir = if poses.is_dir() { Some(poses) } else { poses.parent() };
    session
        .objects
        .iter()
        .map(|(name, model)| {
            let fitted = dir.map(|d| d.join("objects").join(name).join("parts.json")).filter(|p| p.is_file());
            let parts: Vec<PartModel> = match fitted {
                Some(p) => read_json(&p)?,
                None => model.parts.clone(),
            };
            if parts.len() != model.parts.len() {
                return Err(PipelineError::Validation(format!("{name}: {} fitted parts vs {} in the session", parts.len(), model.parts.len())));
            }
            let joints = parts.iter().map(|p| p.joint().map_err(PipelineError::from)).collect::<Result<_, _>>()?;
            Ok((name.clone(), joints))
        })
        .collect()
}

fn wrist_sample(skel: &HandSkeleton, first_id: u32, corners: &[TriangulatedCorner], min_corners: usize) -> Option<WristSample> {
    let (mut canonical, mut observed) = (Vec::new(), Vec::new());
    let (mut views, mut rms) = (0usize, 0.0);
    for c in corners {
        let Some(k) = c.marker_id.checked_sub(first_id).map(|k| k as usize) else { continue };
        if k < skel.markers().len() && c.corner_index < 4 {
            canonical.push(skel.markers()[k][c.corner_index as usize]);
            observed.push(c.position);
            views += c.n_views;
            rms += c.reprojection_rms;
        }
    }
    if canonical.len() < min_corners.max(3) {
        return None;
    }
    let pose = kabsch_points(&canonical, &observed).ok()?;
    let n = canonical.len() as f64;
    Some(WristSample { pose, weight: marker_weight((views as f64 / n).round() as usize, rms / n) })
}

struct ObjectFill {
    records: Vec<ObjectPoseRecord>,
    methods: Vec<serde_json::Value>,
}

fn fill_object(
    name: &str,
    records: &[&ObjectPoseRecord],
    joints: &[Vec<RigidTransform>],
    part_joints: &[Option<JointSpec>],
    surface: &[Vector3<f64>],
    cfg: &PostprocessConfig,
    hash: &str,
) -> Result<ObjectFill, PipelineError> {
    let n = joints.len();
    let mut base: Vec<Option<RigidTransform>> = vec![None; n];
    let mut tracked: Vec<Option<&ObjectPoseRecord>> = vec![None; n];
    for r in records {
        if r.frame >= n {
            return Err(PipelineError::Validation(format!("{name}: pose record at frame {} beyond {n} frames", r.frame)));
        }
        base[r.frame] = Some(r.base()?);
        tracked[r.frame] = Some(r);
    }
    let mut methods = Vec::new();
    let mut source: Vec<String> = tracked.iter().map(|_| "tracked".to_string()).collect();
    for gap in TrackGap::find(name, &base.clone()) {
        let fill = fill_object_gap(&gap, joints, &base, surface, &cfg.fill)?;
        let label = match fill.method {
            FillMethod::Empty => "empty",
            FillMethod::Static => "static",
            FillMethod::Attached { .. } => "attached",
            FillMethod::NoNearbyJoint => "interpolated",
            FillMethod::NoAnchor { .. } => "one_sided",
        };
        methods.push(json!({ "start": gap.start, "end": gap.end, "fill": fill.method }));
        for (t, pose) in (gap.start..gap.end).zip(&fill.poses) {
            base[t] = Some(*pose);
            source[t] = format!("filled:{label}");
        }
    }
    let parts = part_joints.len();
    let state_streams: Vec<Vec<f64>> = (0..parts)
        .map(|k| {
            let raw: Vec<Option<f64>> = tracked.iter().map(|r| r.and_then(|r| r.states.get(k).copied().flatten())).collect();
            fill_between(&raw, |a, b, t| a + (b - a) * t).unwrap_or_else(|| vec![0.0; n])
        })
        .collect();
    let records = (0..n)
        .filter_map(|t| base[t].map(|b| (t, b)))
        .map(|(t, b)| {
            let states: Vec<Option<f64>> = (0..parts).map(|k| Some(state_streams[k][t])).collect();
            let part_poses = (0..parts)
                .map(|k| match (&part_joints[k], tracked[t].and_then(|r| r.parts.get(k).copied().flatten())) {
                    _ if k == 0 => Some(PoseRecord::from(&b)),
                    (_, Some(p)) => Some(p),
                    (Some(j), None) => Some(PoseRecord::from(&b.compose(&j.transform(state_streams[k][t])))),
                    (None, None) => None,
                })
                .collect();
            ObjectPoseRecord {
                frame: t,
                object: name.to_string(),
                l: (*b.translation()).into(),
                q: b.wxyz(),
                states,
                parts: part_poses,
                source: source[t].clone(),
                config_hash: hash.to_string(),
            }
        })
        .collect();
    Ok(ObjectFill { records, methods })
}

pub fn postprocess(
    session_dir: &Path,
    poses: &Path,
    body_calibration: Option<&Path>,
    hand_calibration: Option<&Path>,
    out: &Path,
    cfg: &PostprocessConfig,
    seed: u64,
) -> Result<Metrics, PipelineError> {
    let mut inputs = vec![Input::new("session", session_dir), Input::new("poses", poses)];
    inputs.extend(body_calibration.map(|p| Input::new("body_calibration", p)));
    inputs.extend(hand_calibration.map(|p| Input::new("hand_calibration", p)));
    let mut output = OutputDir::create(out, inputs)?;
    let session = load_session(session_dir)?;
    let body = load_body(body_calibration, &session)?;
    let hands = load_hands(hand_calibration, &session)?;
    let records = read_poses(poses)?;
    let part_joints = load_joints(poses, &session)?;
    let (corners, _) = triangulate_session(&session, &cfg.triangulation);
    let n = session.meta.frames;
    let hash = config_hash(cfg);

    // Person-centric FK and the per-frame mocap-to-world alignment.
    let mut local = Vec::with_capacity(n);
    let mut mocap = Vec::with_capacity(n);
    let mut align: Vec<Option<RigidTransform>> = Vec::with_capacity(n);
    for f in 0..n {
        let m = session.mocap_at(f).ok_or_else(|| PipelineError::Validation(format!("no mocap frame for camera frame {f}")))?;
        let pose = fk_body(&body, &m.body_angles)?;
        let cams = body_corners(&session, &body, &corners[f]);
        let w = (cams.iter().flatten().count() >= cfg.min_alignment_corners.max(3)).then(|| mocap_to_camera(&pose.markers, &cams).ok()).flatten();
        align.push(w);
        local.push(pose.joints);
        mocap.push(m);
    }
    let aligned: Vec<bool> = align.iter().map(Option::is_some).collect();
    let world = fill_between(&align, |a, b, t| a.interpolate(b, t))
        .ok_or_else(|| PipelineError::Numerical("no frame has enough body corners to align mocap with the cameras".into()))?;
    let mut joints: Vec<Vec<RigidTransform>> = local.iter().zip(&world).map(|(js, w)| js.iter().map(|j| w.compose(j)).collect()).collect();

    // Wrist fusion.
    let layout = session.meta.markers;
    let mut fused = Vec::new();
    let mut mocap_wrists = Vec::new();
    for (side, joint, skel, first) in
        [(HandSide::Left, LEFT_HAND, &hands.left, layout.left_hand_first), (HandSide::Right, RIGHT_HAND, &hands.right, layout.right_hand_first)]
    {
        let frame = wrist_frame(side);
        let mocap_wrist: Vec<RigidTransform> = joints.iter().map(|j| j[joint].compose(&frame)).collect();
        let samples: Vec<Option<WristSample>> = corners.iter().map(|c| wrist_sample(skel, first, c, cfg.min_wrist_corners)).collect();
        let stream = fuse_wrist(&samples, &mocap_wrist, &cfg.fusion)?;
        let inv = frame.inverse();
        for (j, p) in joints.iter_mut().zip(&stream.poses) {
            j[joint] = p.compose(&inv);
        }
        mocap_wrists.push(mocap_wrist);
        fused.push(stream);
    }

    let body_records: Vec<BodyStreamRecord> = (0..n)
        .map(|f| BodyStreamRecord {
            frame: f,
            joints: joints[f].iter().map(PoseRecord::from).collect(),
            left_wrist: PoseRecord::from(&fused[0].poses[f]),
            right_wrist: PoseRecord::from(&fused[1].poses[f]),
            left_hand: mocap[f].left_hand.clone(),
            right_hand: mocap[f].right_hand.clone(),
            left_flag: fused[0].flags[f],
            right_flag: fused[1].flags[f],
            aligned: aligned[f],
        })
        .collect();
    output.write_jsonl(BODY_STREAM_FILE, &body_records)?;

    // Object gaps.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_records = Vec::new();
    let mut fills = serde_json::Map::new();
    for (name, model) in &session.objects {
        let mine: Vec<&ObjectPoseRecord> = records.iter().filter(|r| &r.object == name).collect();
        if mine.is_empty() {
            fills.insert(name.clone(), json!({ "tracked_frames": 0 }));
            continue;
        }
        let surface: Vec<Vector3<f64>> = model.mesh.sample_surface(cfg.surface_samples, &mut rng).iter().map(|s| s.position).collect();
        let filled = fill_object(name, &mine, &joints, &part_joints[name], &surface, cfg, &hash)?;
        fills.insert(name.clone(), json!({ "tracked_frames": mine.len(), "gaps": filled.methods }));
        out_records.extend(filled.records);
    }
    out_records.sort_by(|a, b| (a.frame, &a.object).cmp(&(b.frame, &b.object)));
    output.write_jsonl(POSES_FILE, &out_records)?;

    let flag_counts = |s: &[AnchorFlag]| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for f in s {
            *m.entry(serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()).or_default() += 1;
        }
        m
    };
    let mut results = json!({
        "frames": n,
        "aligned_frames": aligned.iter().filter(|a| **a).count(),
        "left_wrist_flags": flag_counts(&fused[0].flags),
        "right_wrist_flags": flag_counts(&fused[1].flags),
        "objects": fills,
    });
    if session.truth.is_some() {
        let fused: Vec<Vec<RigidTransform>> = fused.into_iter().map(|s| s.poses).collect();
        results["truth"] = truth_errors(&session, &joints, &fused, &mocap_wrists, &records, &out_records)?;
    }
    output.finish("postprocess", cfg, Some(seed), results)
}

fn truth_errors(
    session: &CaptureSession,
    joints: &[Vec<RigidTransform>],
    fused: &[Vec<RigidTransform>],
    mocap_wrists: &[Vec<RigidTransform>],
    tracked: &[ObjectPoseRecord],
    filled: &[ObjectPoseRecord],
) -> Result<serde_json::Value, PipelineError> {
    let truth = session.truth.as_ref().expect("checked by caller");
    let joint_err: Vec<f64> = joints.iter().zip(&truth.joints).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.translation_distance_to(y))).collect();
    let mut wrists = serde_json::Map::new();
    for (k, (side, joint)) in [("left", LEFT_HAND), ("right", RIGHT_HAND)].into_iter().enumerate() {
        let hs = if k == 0 { HandSide::Left } else { HandSide::Right };
        let true_wrist: Vec<RigidTransform> = truth.joints.iter().map(|j| j[joint].compose(&wrist_frame(hs))).collect();
        let err = |s: &[RigidTransform]| s.iter().zip(&true_wrist).map(|(a, b)| a.translation_distance_to(b)).collect::<Vec<_>>();
        wrists.insert(side.into(), json!({ "fused_m": stats(&err(&fused[k])), "mocap_m": stats(&err(&mocap_wrists[k])) }));
    }
    let mut dropped = serde_json::Map::new();
    for (name, &[a, b]) in &truth.dropped {
        let Some(t) = truth.objects.get(name) else { continue };
        let pose_at = |recs: &[ObjectPoseRecord], f: usize| -> Option<RigidTransform> {
            recs.iter().find(|r| r.frame == f && &r.object == name).and_then(|r| r.base().ok())
        };
        let fill_err: Vec<f64> = (a..b).filter_map(|f| pose_at(filled, f).map(|p| p.translation_distance_to(&t.poses[f]))).collect();
        let gap = TrackGap::new(name.as_str(), a, b, t.poses.len())?;
        let before = a.checked_sub(1).and_then(|f| pose_at(tracked, f));
        let after = pose_at(tracked, b);
        let lerp_err: Vec<f64> = baseline_interpolate(&gap, before.as_ref(), after.as_ref())
            .map(|ps| ps.iter().zip(a..b).map(|(p, f)| p.translation_distance_to(&t.poses[f])).collect())
            .unwrap_or_default();
        dropped.insert(name.clone(), json!({ "frames": [a, b], "fill_m": stats(&fill_err), "lerp_m": stats(&lerp_err) }));
    }
    Ok(json!({ "joint_position_m": stats(&joint_err), "wrist": wrists, "dropped": dropped }))
}
