//! `export-features` and `contacts`, both reading a postprocess output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::calibrate::load_hands;
use super::post::BodyStreamRecord;
use super::{load_session, read_poses, Input, Metrics, OutputDir, PipelineError, BODY_STREAM_FILE};
use crate::geometry::RigidTransform;
use crate::kinematics::body::{JOINT_NAMES, LEFT_FOOT, LEFT_HAND, LEFT_TOE, RIGHT_FOOT, RIGHT_HAND, RIGHT_TOE};
use crate::kinematics::hand::{FINGER_NAMES, SEGMENTS_PER_FINGER};
use crate::kinematics::{fk_hand, wrist_frame, HandSide, HandSkeleton};
use crate::representation::{
    build_features, compute_contacts, feature_dimension, write_features, ContactRecord, ContactTarget, FeatureConfig, FootPoint, Party, PartyStream,
    DEFAULT_CONTACT_THRESHOLD,
};
use crate::session::{read_jsonl, CaptureSession, HandPair};
use crate::simulation::mesh::SurfaceGrid;
use crate::state::BODY_JOINTS;

pub const FEATURES_FILE: &str = "features.bin";
pub const FEATURES_HEADER_FILE: &str = "features.json";
pub const CONTACTS_FILE: &str = "contacts.jsonl";

/// Heel on the sole, in the foot frame.
const HEEL: Vector3<f64> = Vector3::new(-0.04, 0.0, -0.08);
/// Toe tip on the sole, in the toe frame.
const TOE_TIP: Vector3<f64> = Vector3::new(0.05, 0.0, -0.01);

/// Body joints in the feature stream: every joint but the toes, which the
/// foot points cover.
pub fn feature_body_joints() -> Vec<usize> {
    (0..BODY_JOINTS).filter(|j| *j != LEFT_TOE && *j != RIGHT_TOE).collect()
}

/// Joint count of the exported stream: body joints plus every finger
/// segment of both hands.
pub fn feature_joint_count() -> usize {
    feature_body_joints().len() + 2 * FINGER_NAMES.len() * SEGMENTS_PER_FINGER
}

pub fn feature_joint_names() -> Vec<String> {
    let mut names: Vec<String> = feature_body_joints().iter().map(|&j| JOINT_NAMES[j].to_string()).collect();
    for side in ["left", "right"] {
        for f in FINGER_NAMES {
            names.extend((0..SEGMENTS_PER_FINGER).map(|k| format!("{side}_{f}_{k}")));
        }
    }
    names
}

fn read_body_stream(post: &Path) -> Result<Vec<BodyStreamRecord>, PipelineError> {
    let records: Vec<BodyStreamRecord> = read_jsonl(&super::artifact(post, BODY_STREAM_FILE))?;
    if records.iter().enumerate().any(|(i, r)| r.frame != i) {
        return Err(PipelineError::Validation("body.jsonl frames must be 0, 1, 2, ...".into()));
    }
    Ok(records)
}

/// World poses of finger segments: the wrist frame composed with the
/// accumulated glove rotation at each segment end.
fn finger_poses(skel: &HandSkeleton, wrist: &RigidTransform, angles: &[[f64; 3]]) -> Result<Vec<RigidTransform>, PipelineError> {
    let hand = fk_hand(skel, angles)?;
    Ok(hand.joints.iter().zip(&hand.rotations).map(|(p, r)| wrist.compose(&RigidTransform::new(*r, *p))).collect())
}

fn wrists(r: &BodyStreamRecord) -> Result<[RigidTransform; 2], PipelineError> {
    Ok([r.left_wrist.transform()?, r.right_wrist.transform()?])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportFeaturesConfig {
    /// Foot-contact height threshold (m).
    pub contact_height: f64,
    /// Foot-contact displacement per frame threshold (m).
    pub contact_speed: f64,
}

impl Default for ExportFeaturesConfig {
    fn default() -> Self {
        let f = FeatureConfig::with_feet(0, [0; 4]);
        Self { contact_height: f.contact_height, contact_speed: f.contact_speed }
    }
}

/// Feature layout for the exported joint order. Heel and toe points sit on
/// the sole, hanging off the foot joints with the toes held straight.
pub fn export_feature_config(session: &CaptureSession, cfg: &ExportFeaturesConfig) -> FeatureConfig {
    let body = feature_body_joints();
    let index = |j: usize| body.iter().position(|&b| b == j).expect("foot joint exported");
    let offsets = session.body.offsets();
    let point = |joint: usize, local: Vector3<f64>| FootPoint { joint: index(joint), local };
    FeatureConfig {
        root: 0,
        feet: [point(LEFT_FOOT, HEEL), point(LEFT_FOOT, offsets[LEFT_TOE] + TOE_TIP), point(RIGHT_FOOT, HEEL), point(RIGHT_FOOT, offsets[RIGHT_TOE] + TOE_TIP)],
        contact_height: cfg.contact_height,
        contact_speed: cfg.contact_speed,
    }
}

/// Joint poses per frame in the exported order.
pub fn feature_stream(records: &[BodyStreamRecord], hands: &HandPair) -> Result<Vec<Vec<RigidTransform>>, PipelineError> {
    let body = feature_body_joints();
    records
        .iter()
        .map(|r| {
            let joints = r.joint_poses()?;
            let [lw, rw] = wrists(r)?;
            let mut frame: Vec<RigidTransform> = body.iter().map(|&j| joints[j]).collect();
            frame.extend(finger_poses(&hands.left, &lw, &r.left_hand)?);
            frame.extend(finger_poses(&hands.right, &rw, &r.right_hand)?);
            Ok(frame)
        })
        .collect()
}

pub fn export_features(
    session_dir: &Path,
    post: &Path,
    hand_calibration: Option<&Path>,
    out: &Path,
    cfg: &ExportFeaturesConfig,
) -> Result<Metrics, PipelineError> {
    let mut inputs = vec![Input::new("session", session_dir), Input::new("postprocess", post)];
    inputs.extend(hand_calibration.map(|p| Input::new("hand_calibration", p)));
    let mut output = OutputDir::create(out, inputs)?;
    let session = load_session(session_dir)?;
    let hands = load_hands(hand_calibration, &session)?;
    let records = read_body_stream(post)?;
    let stream = feature_stream(&records, &hands)?;
    let features = build_features(&stream, &export_feature_config(&session, cfg))?;
    let mut bytes = Vec::new();
    let header =
        write_features(&mut bytes, &features, session.meta.camera_rate_hz, feature_joint_names()).map_err(|e| PipelineError::Validation(e.to_string()))?;
    output.write_bytes(FEATURES_FILE, &bytes)?;
    output.write_json(FEATURES_HEADER_FILE, &header)?;
    let contacts: [usize; 4] = std::array::from_fn(|k| features.iter().filter(|f| f.foot_contacts[k]).count());
    let results = json!({
        "frames": header.frames,
        "joints": header.joints,
        "dimension": header.dimension,
        "expected_dimension": feature_dimension(feature_joint_count()),
        "foot_contact_frames": contacts,
    });
    output.finish("export-features", cfg, None, results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactsConfig {
    /// Joint-to-surface distance counted as contact (m).
    pub threshold: f64,
    /// Cell size of the surface lookup grid (m).
    pub grid_cell: f64,
}

impl Default for ContactsConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_CONTACT_THRESHOLD, grid_cell: 0.05 }
    }
}

/// Hand points (wrist origin plus finger segment ends) and body joints other
/// than the hands, per frame.
pub fn contact_parties(
    joints: &[Vec<RigidTransform>],
    wrists: &[[RigidTransform; 2]],
    hand_angles: &[[&[[f64; 3]]; 2]],
    hands: &HandPair,
) -> Result<Vec<PartyStream>, PipelineError> {
    let mut left = Vec::with_capacity(joints.len());
    let mut right = Vec::with_capacity(joints.len());
    for (w, a) in wrists.iter().zip(hand_angles) {
        for (k, (skel, out)) in [(&hands.left, &mut left), (&hands.right, &mut right)].into_iter().enumerate() {
            let mut pts = vec![*w[k].translation()];
            pts.extend(fk_hand(skel, a[k])?.joints.iter().map(|p| w[k].transform_point(p)));
            out.push(pts);
        }
    }
    let body =
        joints.iter().map(|js| js.iter().enumerate().filter(|(j, _)| *j != LEFT_HAND && *j != RIGHT_HAND).map(|(_, p)| *p.translation()).collect()).collect();
    Ok(vec![
        PartyStream { party: Party::LeftHand, points: left },
        PartyStream { party: Party::RightHand, points: right },
        PartyStream { party: Party::Body, points: body },
    ])
}

/// Contact targets for every object part that has a mesh.
fn contact_targets(session: &CaptureSession, frames: usize, part_pose: impl Fn(&str, usize, usize) -> Option<RigidTransform>, cell: f64) -> Vec<ContactTarget> {
    let mut targets = Vec::new();
    for (name, model) in &session.objects {
        for k in 0..model.parts.len() {
            let Some(mesh) = model.part_mesh(k) else { continue };
            targets.push(ContactTarget {
                object: name.clone(),
                part: k,
                surface: SurfaceGrid::new(mesh.clone(), cell),
                poses: (0..frames).map(|f| part_pose(name, k, f)).collect(),
            });
        }
    }
    targets
}

type ContactKey = (usize, Party, String, usize);

fn contact_keys(records: &[ContactRecord]) -> BTreeSet<ContactKey> {
    records.iter().map(|r| (r.frame, r.party, r.object.clone(), r.part)).collect()
}

pub fn contacts(session_dir: &Path, post: &Path, hand_calibration: Option<&Path>, out: &Path, cfg: &ContactsConfig) -> Result<Metrics, PipelineError> {
    if !(cfg.threshold.is_finite() && cfg.threshold >= 0.0 && cfg.grid_cell.is_finite() && cfg.grid_cell > 0.0) {
        return Err(PipelineError::Validation("contact threshold must be >= 0 and grid_cell > 0".into()));
    }
    let mut inputs = vec![Input::new("session", session_dir), Input::new("postprocess", post)];
    inputs.extend(hand_calibration.map(|p| Input::new("hand_calibration", p)));
    let mut output = OutputDir::create(out, inputs)?;
    let session = load_session(session_dir)?;
    let hands = load_hands(hand_calibration, &session)?;
    let body = read_body_stream(post)?;
    let poses = read_poses(post)?;
    let n = body.len();
    let joints: Vec<Vec<RigidTransform>> = body.iter().map(BodyStreamRecord::joint_poses).collect::<Result<_, _>>()?;
    let wrist_poses: Vec<[RigidTransform; 2]> = body.iter().map(wrists).collect::<Result<_, _>>()?;
    let angles: Vec<[&[[f64; 3]]; 2]> = body.iter().map(|r| [&r.left_hand[..], &r.right_hand[..]]).collect();
    let parties = contact_parties(&joints, &wrist_poses, &angles, &hands)?;
    let by_key: BTreeMap<(&str, usize), &super::ObjectPoseRecord> = poses.iter().map(|r| ((r.object.as_str(), r.frame), r)).collect();
    let targets = contact_targets(
        &session,
        n,
        |name, k, f| by_key.get(&(name, f)).and_then(|r| r.parts.get(k).copied().flatten()).and_then(|p| p.transform().ok()),
        cfg.grid_cell,
    );
    let records = compute_contacts(&parties, &targets, cfg.threshold);
    output.write_jsonl(CONTACTS_FILE, &records)?;

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        let party = serde_json::to_value(r.party).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        *counts.entry(format!("{party}/{}/{}", r.object, r.part)).or_default() += 1;
    }
    let mut results = json!({ "frames": n, "records": records.len(), "per_pair": counts });
    if let Some(truth) = &session.truth {
        let true_wrists: Vec<[RigidTransform; 2]> =
            truth.joints.iter().map(|j| [j[LEFT_HAND].compose(&wrist_frame(HandSide::Left)), j[RIGHT_HAND].compose(&wrist_frame(HandSide::Right))]).collect();
        let parties = contact_parties(&truth.joints, &true_wrists, &angles, &truth.hands)?;
        let targets = contact_targets(
            &session,
            n,
            |name, k, f| {
                let t = truth.objects.get(name)?;
                let base = *t.poses.get(f)?;
                match k {
                    0 => Some(base),
                    _ => Some(base.compose(&t.joints.get(k - 1)?.as_ref()?.transform(t.states[f][k]))),
                }
            },
            cfg.grid_cell,
        );
        let expected = contact_keys(&compute_contacts(&parties, &targets, cfg.threshold));
        let found = contact_keys(&records);
        let hits = found.intersection(&expected).count();
        results["truth"] = json!({
            "true_contacts": expected.len(),
            "matched": hits,
            "precision": if found.is_empty() { 1.0 } else { hits as f64 / found.len() as f64 },
            "recall": if expected.is_empty() { 1.0 } else { hits as f64 / expected.len() as f64 },
        });
    }
    output.finish("contacts", cfg, None, results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::rotation_to_6d;

    #[test]
    fn exported_joint_count_gives_740_features() {
        assert_eq!(feature_joint_count(), 61);
        assert_eq!(feature_joint_names().len(), 61);
        assert_eq!(feature_dimension(feature_joint_count()), 740);
    }

    #[test]
    fn finger_frames_follow_the_wrist() {
        let skel = HandSkeleton::template(HandSide::Right);
        let angles = vec![[0.1, -0.2, 0.05]; 20];
        let wrist = RigidTransform::new(nalgebra::UnitQuaternion::from_euler_angles(0.3, -0.1, 1.2), Vector3::new(0.5, -0.2, 1.0));
        let local = finger_poses(&skel, &RigidTransform::identity(), &angles).unwrap();
        let world = finger_poses(&skel, &wrist, &angles).unwrap();
        for (l, w) in local.iter().zip(&world) {
            assert!((wrist.compose(l).translation() - w.translation()).norm() < 1e-12);
            let a = rotation_to_6d(&wrist.compose(l).matrix());
            let b = rotation_to_6d(&w.matrix());
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}
