//! Capture-session bundle: on-disk formats, load/save and provenance.
//!
//! Layout of a session directory:
//!
//! ```text
//! session.json            metadata, schema version, rates, marker id layout
//! cameras.json            [{id, K, R, t, width, height}]
//! detections.jsonl        {frame, camera_id, marker_id, corners: [[u,v]×4]}
//! mocap.jsonl             {frame, body_angles: 23×3, left_hand: 20×3, right_hand: 20×3}
//! body.json               initial body skeleton with marker layout
//! hands.json              initial left/right hand skeletons
//! hand_calibration.json   optional touch-protocol captures
//! objects/<name>/mesh.obj and parts.json, plus one OBJ per meshed part
//! truth.json              optional ground truth of generated sessions
//! ```
//!
//! Quaternions are always stored as `(w, x, y, z)`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::articulation::JointSpec;
use crate::geometry::{CameraModel, MarkerCube, Rig, RigidTransform};
use crate::kinematics::{BodySkeleton, CalibrationStructure, HandSkeleton, HandTouchStep};
use crate::multiview::CornerDetection;
use crate::simulation::mesh::Mesh;
use crate::state::{BODY_JOINTS, HAND_JOINTS};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("{path} line {line}: {message}")]
    CorruptStream { path: String, line: usize, message: String },
    #[error("invalid session: {0}")]
    Invalid(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SessionError {
    SessionError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the JSON serialization of a configuration value.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("configs serialize"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, SessionError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| SessionError::Parse { path: path.display().to_string(), message: e.to_string() })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), SessionError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Reads one record per line. Any unreadable line, including a truncated
/// last line, marks the stream as corrupt.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, SessionError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SessionError::CorruptStream {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), SessionError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// One camera in `cameras.json`: row-major intrinsics and world-to-camera
/// rotation, translation in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    std::array::from_fn(|i| m[(i / 3, i % 3)])
}

impl CameraRecord {
    pub fn from_camera(c: &CameraModel) -> Self {
        let e = c.extrinsics();
        Self { id: c.id(), k: row_major(c.intrinsics()), r: row_major(c.rotation_matrix()), t: (*e.translation()).into(), width: c.width(), height: c.height() }
    }

    pub fn to_camera(&self) -> Result<CameraModel, SessionError> {
        let k = Matrix3::from_row_slice(&self.k);
        let r = Matrix3::from_row_slice(&self.r);
        CameraModel::from_matrices(self.id, k, r, Vector3::from(self.t), self.width, self.height).map_err(|e| SessionError::Invalid(e.to_string()))
    }
}

pub fn rig_to_records(rig: &Rig) -> Vec<CameraRecord> {
    rig.cameras().iter().map(CameraRecord::from_camera).collect()
}

pub fn rig_from_records(records: &[CameraRecord]) -> Result<Rig, SessionError> {
    let cams = records.iter().map(CameraRecord::to_camera).collect::<Result<Vec<_>, _>>()?;
    Rig::new(cams).map_err(|e| SessionError::Invalid(e.to_string()))
}

/// One detected fiducial with its four corners in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerDetection {
    pub frame: u32,
    pub camera_id: u32,
    pub marker_id: u32,
    pub corners: [[f64; 2]; 4],
}

impl MarkerDetection {
    pub fn corner_detections(&self) -> impl Iterator<Item = CornerDetection> + '_ {
        self.corners.iter().enumerate().map(|(i, c)| CornerDetection {
            camera_id: self.camera_id,
            marker_id: self.marker_id,
            corner_index: i as u8,
            pixel: nalgebra::Vector2::new(c[0], c[1]),
            frame: self.frame,
        })
    }
}

/// Suit and glove angles at one mocap frame (scaled-axis radians).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MocapFrame {
    pub frame: u32,
    pub body_angles: Vec<[f64; 3]>,
    pub left_hand: Vec<[f64; 3]>,
    pub right_hand: Vec<[f64; 3]>,
}

/// Free-text description of an interval of camera frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// First marker id of each worn marker set. Body markers are numbered in
/// skeleton part order; each hand carries its skeleton's markers in order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerLayout {
    pub body_first: u32,
    pub left_hand_first: u32,
    pub right_hand_first: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub schema_version: u32,
    pub name: String,
    pub camera_rate_hz: f64,
    pub mocap_rate_hz: f64,
    /// Camera frames.
    pub frames: usize,
    /// Camera frames `[start, end)` of the range-of-motion segment.
    pub rom: [usize; 2],
    pub seed: u64,
    pub tool_version: String,
    pub markers: MarkerLayout,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl SessionMeta {
    /// Mocap frames per camera frame.
    pub fn mocap_ratio(&self) -> f64 {
        self.mocap_rate_hz / self.camera_rate_hz
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartKind {
    Base,
    Revolute,
    Sliding,
}

/// Entry of `parts.json`. Axis and pivot are filled in by articulation
/// fitting; the cube mounts are in the object frame at state zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartModel {
    pub part: String,
    pub kind: PartKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot: Option<[f64; 3]>,
    pub cubes: Vec<MarkerCube>,
    /// OBJ file of this part in the object directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
}

impl PartModel {
    pub fn joint(&self) -> Result<Option<JointSpec>, SessionError> {
        let bad = |e: crate::articulation::ArticulationError| SessionError::Invalid(format!("part {}: {e}", self.part));
        match (self.kind, self.axis, self.pivot) {
            (PartKind::Revolute, Some(a), Some(p)) => JointSpec::revolute(a.into(), p.into()).map(Some).map_err(bad),
            (PartKind::Sliding, Some(a), _) => JointSpec::sliding(a.into()).map(Some).map_err(bad),
            _ => Ok(None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel {
    pub mesh: Mesh,
    pub parts: Vec<PartModel>,
    /// Meshes referenced by parts, by file name.
    pub part_meshes: BTreeMap<String, Mesh>,
}

impl ObjectModel {
    /// Mesh of a part in the object frame; the whole mesh stands in for the
    /// base when it has none of its own.
    pub fn part_mesh(&self, index: usize) -> Option<&Mesh> {
        let part = self.parts.get(index)?;
        match &part.mesh {
            Some(name) => self.part_meshes.get(name),
            None if part.kind == PartKind::Base => Some(&self.mesh),
            None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPair {
    pub left: HandSkeleton,
    pub right: HandSkeleton,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandCalibrationData {
    pub structure: CalibrationStructure,
    pub left: Vec<HandTouchStep>,
    pub right: Vec<HandTouchStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    /// Joint of every non-base part, in part order.
    pub joints: Vec<Option<JointSpec>>,
    /// Base pose per camera frame.
    pub poses: Vec<RigidTransform>,
    /// Part states per camera frame, base first (always 0).
    pub states: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub body: BodySkeleton,
    pub hands: HandPair,
    /// Joint poses per camera frame.
    pub joints: Vec<Vec<RigidTransform>>,
    pub objects: BTreeMap<String, ObjectTruth>,
    /// Camera frames whose detections of each object were removed.
    #[serde(default)]
    pub dropped: BTreeMap<String, [usize; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureSession {
    pub meta: SessionMeta,
    pub rig: Rig,
    pub detections: Vec<MarkerDetection>,
    pub mocap: Vec<MocapFrame>,
    pub body: BodySkeleton,
    pub hands: HandPair,
    pub hand_calibration: Option<HandCalibrationData>,
    pub objects: BTreeMap<String, ObjectModel>,
    pub truth: Option<GroundTruth>,
}

/// Identifies what solved an artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn new<T: Serialize>(config: &T, seed: Option<u64>) -> Self {
        Self { tool_version: TOOL_VERSION.into(), config_hash: config_hash(config), seed }
    }
}

/// Checks frame ordering of the detection stream: frames never decrease
/// and each (camera, marker) pair appears at most once per frame.
pub fn check_detections(detections: &[MarkerDetection], path: &str) -> Result<(), SessionError> {
    let mut last: HashMap<(u32, u32), u32> = HashMap::new();
    let mut frame = 0;
    for (i, d) in detections.iter().enumerate() {
        let corrupt = |message: String| SessionError::CorruptStream { path: path.into(), line: i + 1, message };
        if d.frame < frame {
            return Err(corrupt(format!("frame {} after frame {frame}", d.frame)));
        }
        frame = d.frame;
        if let Some(prev) = last.insert((d.camera_id, d.marker_id), d.frame) {
            if prev >= d.frame {
                return Err(corrupt(format!("camera {} marker {} repeats frame {}", d.camera_id, d.marker_id, d.frame)));
            }
        }
        if d.corners.iter().flatten().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite corner".into()));
        }
    }
    Ok(())
}

pub fn check_mocap(mocap: &[MocapFrame], path: &str) -> Result<(), SessionError> {
    for (i, m) in mocap.iter().enumerate() {
        let corrupt = |message: String| SessionError::CorruptStream { path: path.into(), line: i + 1, message };
        if i > 0 && m.frame <= mocap[i - 1].frame {
            return Err(corrupt(format!("frame {} after frame {}", m.frame, mocap[i - 1].frame)));
        }
        if m.body_angles.len() != BODY_JOINTS || m.left_hand.len() != HAND_JOINTS || m.right_hand.len() != HAND_JOINTS {
            return Err(corrupt(format!(
                "angle counts {}/{}/{}, expected {BODY_JOINTS}/{HAND_JOINTS}/{HAND_JOINTS}",
                m.body_angles.len(),
                m.left_hand.len(),
                m.right_hand.len()
            )));
        }
        if m.body_angles.iter().chain(&m.left_hand).chain(&m.right_hand).flatten().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite angle".into()));
        }
    }
    Ok(())
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') && !name.starts_with('.')
}

impl CaptureSession {
    /// Cross-file consistency checks shared by load and save.
    pub fn validate(&self) -> Result<(), SessionError> {
        let m = &self.meta;
        if m.schema_version != SCHEMA_VERSION {
            return Err(SessionError::SchemaVersionMismatch { found: m.schema_version, expected: SCHEMA_VERSION });
        }
        if !(m.camera_rate_hz > 0.0 && m.mocap_rate_hz > 0.0 && m.camera_rate_hz.is_finite() && m.mocap_rate_hz.is_finite()) {
            return Err(SessionError::Invalid("frame rates must be positive".into()));
        }
        if m.rom[0] > m.rom[1] || m.rom[1] > m.frames {
            return Err(SessionError::Invalid(format!("rom range {:?} outside {} frames", m.rom, m.frames)));
        }
        check_detections(&self.detections, "detections.jsonl")?;
        check_mocap(&self.mocap, "mocap.jsonl")?;
        if let Some(d) = self.detections.iter().find(|d| self.rig.position(d.camera_id).is_none()) {
            return Err(SessionError::Invalid(format!("detection from unknown camera {}", d.camera_id)));
        }
        if let Some(d) = self.detections.iter().find(|d| d.frame as usize >= m.frames) {
            return Err(SessionError::Invalid(format!("detection at frame {} of {}", d.frame, m.frames)));
        }
        for (name, obj) in &self.objects {
            if !valid_name(name) {
                return Err(SessionError::Invalid(format!("object name {name:?}")));
            }
            if obj.parts.first().map(|p| p.kind) != Some(PartKind::Base) || obj.parts.iter().skip(1).any(|p| p.kind == PartKind::Base) {
                return Err(SessionError::Invalid(format!("object {name}: exactly one base part, listed first")));
            }
            for p in &obj.parts {
                p.joint()?;
                if let Some(file) = &p.mesh {
                    if !valid_name(file) || file == "mesh.obj" || file == "parts.json" || !obj.part_meshes.contains_key(file) {
                        return Err(SessionError::Invalid(format!("object {name}: part mesh {file:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), SessionError> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("session.json"), &self.meta)?;
        write_json(&dir.join("cameras.json"), &rig_to_records(&self.rig))?;
        write_jsonl(&dir.join("detections.jsonl"), &self.detections)?;
        write_jsonl(&dir.join("mocap.jsonl"), &self.mocap)?;
        write_json(&dir.join("body.json"), &self.body)?;
        write_json(&dir.join("hands.json"), &self.hands)?;
        if let Some(h) = &self.hand_calibration {
            write_json(&dir.join("hand_calibration.json"), h)?;
        }
        for (name, obj) in &self.objects {
            let od = dir.join("objects").join(name);
            fs::create_dir_all(&od).map_err(|e| io_err(&od, e))?;
            fs::write(od.join("mesh.obj"), obj.mesh.to_obj()).map_err(|e| io_err(&od, e))?;
            write_json(&od.join("parts.json"), &obj.parts)?;
            for (file, mesh) in &obj.part_meshes {
                fs::write(od.join(file), mesh.to_obj()).map_err(|e| io_err(&od, e))?;
            }
        }
        if let Some(t) = &self.truth {
            write_json(&dir.join("truth.json"), t)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SessionError> {
        let meta_path = dir.join("session.json");
        let raw: serde_json::Value = read_json(&meta_path)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(SessionError::SchemaVersionMismatch { found, expected: SCHEMA_VERSION });
        }
        let meta: SessionMeta =
            serde_json::from_value(raw).map_err(|e| SessionError::Parse { path: meta_path.display().to_string(), message: e.to_string() })?;
        let rig = rig_from_records(&read_json::<Vec<CameraRecord>>(&dir.join("cameras.json"))?)?;
        let optional = |file: &str| -> Option<PathBuf> { Some(dir.join(file)).filter(|p| p.exists()) };
        let mut objects = BTreeMap::new();
        let od = dir.join("objects");
        if od.is_dir() {
            let mut names: Vec<String> = fs::read_dir(&od)
                .map_err(|e| io_err(&od, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            for name in names {
                let path = od.join(&name);
                let read_mesh = |file: &str| -> Result<Mesh, SessionError> {
                    let p = path.join(file);
                    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    Mesh::from_obj(&text).map_err(|e| SessionError::Parse { path: p.display().to_string(), message: e.to_string() })
                };
                let parts: Vec<PartModel> = read_json(&path.join("parts.json"))?;
                let mut part_meshes = BTreeMap::new();
                for file in parts.iter().filter_map(|p| p.mesh.clone()) {
                    if !valid_name(&file) {
                        return Err(SessionError::Invalid(format!("object {name}: part mesh {file:?}")));
                    }
                    let mesh = read_mesh(&file)?;
                    part_meshes.insert(file, mesh);
                }
                objects.insert(name.clone(), ObjectModel { mesh: read_mesh("mesh.obj")?, parts, part_meshes });
            }
        }
        let session = Self {
            meta,
            rig,
            detections: read_jsonl(&dir.join("detections.jsonl"))?,
            mocap: read_jsonl(&dir.join("mocap.jsonl"))?,
            body: read_json(&dir.join("body.json"))?,
            hands: read_json(&dir.join("hands.json"))?,
            hand_calibration: optional("hand_calibration.json").map(|p| read_json(&p)).transpose()?,
            objects,
            truth: optional("truth.json").map(|p| read_json(&p)).transpose()?,
        };
        session.validate()?;
        Ok(session)
    }

    /// Corner detections of every marker, in file order.
    pub fn corner_detections(&self) -> Vec<CornerDetection> {
        self.detections.iter().flat_map(|d| d.corner_detections()).collect()
    }

    /// Mocap frame closest in time to a camera frame.
    pub fn mocap_at(&self, camera_frame: usize) -> Option<&MocapFrame> {
        let target = (camera_frame as f64 * self.meta.mocap_ratio()).round() as u32;
        let i = self.mocap.partition_point(|m| m.frame < target);
        let candidates = [i.checked_sub(1), Some(i)];
        candidates.into_iter().flatten().filter_map(|k| self.mocap.get(k)).min_by_key(|m| m.frame.abs_diff(target))
    }

    /// Marker ids of the body part markers, in skeleton order.
    pub fn body_marker_ids(&self) -> Vec<u32> {
        let n: usize = self.body.parts().iter().map(|p| p.markers.len()).sum();
        (0..n as u32).map(|k| self.meta.markers.body_first + k).collect()
    }
}

/// Files of a session directory that a verb reads, with their hashes, in
/// path order. Paths are relative to the session root.
pub fn input_digest(dir: &Path) -> Result<Vec<(String, String)>, SessionError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
            let p = entry.map_err(|e| io_err(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("walked from root").to_string_lossy().replace('\\', "/");
                let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
                out.push((rel, sha256_hex(&bytes)));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CUBE_FACES;
    use crate::kinematics::HandSide;

    pub(crate) fn small_session() -> CaptureSession {
        let rig = crate::simulation::generator::ring_rig(4, 3.0, 1).unwrap();
        let cube = MarkerCube::new(0, 0.06, RigidTransform::from_translation(Vector3::new(0.0, 0.0, 0.1))).unwrap();
        let mut parts = vec![PartModel { part: "body".into(), kind: PartKind::Base, axis: None, pivot: None, cubes: vec![cube.clone()], mesh: None }];
        parts.push(PartModel {
            part: "door".into(),
            kind: PartKind::Revolute,
            axis: Some([0.0, 0.0, 1.0]),
            pivot: Some([0.1, 0.2, 0.0]),
            cubes: vec![MarkerCube::new(1, 0.06, RigidTransform::identity()).unwrap()],
            mesh: Some("door.obj".into()),
        });
        let mesh = Mesh::cuboid(Vector3::new(0.1, 0.2, 0.3));
        let objects = BTreeMap::from([(
            "cabinet".to_string(),
            ObjectModel { mesh: mesh.clone(), parts, part_meshes: BTreeMap::from([("door.obj".to_string(), Mesh::cuboid(Vector3::repeat(0.01)))]) },
        )]);
        let ids: Vec<u32> = (0..CUBE_FACES).map(|f| cube.marker_id(f)).collect();
        let detections = (0..3u32)
            .flat_map(|f| {
                let ids = ids.clone();
                (0..2u32).map(move |c| MarkerDetection {
                    frame: f,
                    camera_id: c,
                    marker_id: ids[c as usize],
                    corners: [[1.0 / 3.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.1]],
                })
            })
            .collect();
        let mocap = (0..6u32)
            .map(|f| MocapFrame {
                frame: f,
                body_angles: vec![[0.1 * f as f64, 0.0, -0.2]; BODY_JOINTS],
                left_hand: vec![[0.0; 3]; HAND_JOINTS],
                right_hand: vec![[0.3, 0.1, 1e-17]; HAND_JOINTS],
            })
            .collect();
        CaptureSession {
            meta: SessionMeta {
                schema_version: SCHEMA_VERSION,
                name: "t".into(),
                camera_rate_hz: 30.0,
                mocap_rate_hz: 60.0,
                frames: 3,
                rom: [0, 2],
                seed: 5,
                tool_version: TOOL_VERSION.into(),
                markers: MarkerLayout { body_first: 100, left_hand_first: 200, right_hand_first: 210 },
                annotations: vec![Annotation { start: 0, end: 2, text: "open the door".into() }],
            },
            rig,
            detections,
            mocap,
            body: BodySkeleton::template(),
            hands: HandPair { left: HandSkeleton::template(HandSide::Left), right: HandSkeleton::template(HandSide::Right) },
            hand_calibration: None,
            objects,
            truth: None,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_session();
        s.save(dir.path()).unwrap();
        let l = CaptureSession::load(dir.path()).unwrap();
        assert_eq!(l.meta, s.meta);
        assert_eq!(l.detections, s.detections);
        assert_eq!(l.mocap, s.mocap);
        assert_eq!(l.body, s.body);
        assert_eq!(l.hands, s.hands);
        assert_eq!(l.objects, s.objects);
        assert_eq!(l.rig, s.rig);
        assert_eq!(CaptureSession::load(dir.path()).unwrap(), s);
        // Saving again gives identical bytes.
        let first = input_digest(dir.path()).unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(input_digest(dir.path()).unwrap(), first);
    }

    #[test]
    fn truncated_stream_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        small_session().save(dir.path()).unwrap();
        let p = dir.path().join("mocap.jsonl");
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() - 40]).unwrap();
        assert!(matches!(CaptureSession::load(dir.path()), Err(SessionError::CorruptStream { .. })));
    }

    #[test]
    fn non_monotone_stream_is_corrupt() {
        let mut s = small_session();
        s.mocap.swap(1, 2);
        assert!(matches!(s.validate(), Err(SessionError::CorruptStream { line: 3, .. })));
        let mut s = small_session();
        s.detections.swap(0, 3);
        assert!(matches!(s.validate(), Err(SessionError::CorruptStream { .. })));
        let mut s = small_session();
        let d = s.detections[0].clone();
        s.detections.insert(1, d);
        assert!(matches!(s.validate(), Err(SessionError::CorruptStream { .. })));
    }

    #[test]
    fn schema_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        small_session().save(dir.path()).unwrap();
        let p = dir.path().join("session.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        fs::write(&p, text).unwrap();
        assert_eq!(CaptureSession::load(dir.path()), Err(SessionError::SchemaVersionMismatch { found: 9, expected: SCHEMA_VERSION }));
    }

    #[test]
    fn camera_records_round_trip() {
        let rig = crate::simulation::generator::ring_rig(5, 3.0, 2).unwrap();
        let back = rig_from_records(&rig_to_records(&rig)).unwrap();
        for (a, b) in rig.cameras().iter().zip(back.cameras()) {
            let p = Vector3::new(0.2, -0.1, 1.0);
            assert!((a.project(&p).unwrap() - b.project(&p).unwrap()).norm() < 1e-9);
        }
        let json = serde_json::to_value(rig_to_records(&rig)).unwrap();
        assert_eq!(json[0]["K"].as_array().unwrap().len(), 9);
        let mut bad = rig_to_records(&rig);
        bad[0].r[0] = 2.0;
        assert!(rig_from_records(&bad).is_err());
    }

    #[test]
    fn invalid_objects_rejected() {
        let mut s = small_session();
        s.objects.get_mut("cabinet").unwrap().parts.swap(0, 1);
        assert!(matches!(s.validate(), Err(SessionError::Invalid(_))));
        let mut s = small_session();
        let obj = s.objects.remove("cabinet").unwrap();
        s.objects.insert("../evil".into(), obj);
        assert!(s.validate().is_err());
    }

    #[test]
    fn mocap_lookup_by_camera_frame() {
        let s = small_session();
        assert_eq!(s.mocap_at(2).unwrap().frame, 4);
        assert_eq!(s.mocap_at(50).unwrap().frame, 5);
    }
}
