//! Verbs behind the command line. Each one reads a session and a config,
//! writes artifacts into an output directory distinct from its inputs and
//! finishes with a `metrics.json` embedding inputs, config and seed.

pub mod calibrate;
pub mod export;
pub mod post;
pub mod studies;
pub mod tracking;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::articulation::ArticulationError;
use crate::geometry::{GeometryError, RigidTransform};
use crate::kinematics::KinematicsError;
use crate::multiview::{triangulate_all, MultiviewError, TriangulatedCorner, TriangulationConfig};
use crate::postprocess::PostprocessError;
use crate::representation::RepresentationError;
use crate::rigid::RigidError;
use crate::session::{config_hash, input_digest, read_jsonl, sha256_hex, CaptureSession, SessionError, TOOL_VERSION};
use crate::simulation::SimulationError;

pub const METRICS_FILE: &str = "metrics.json";
pub const POSES_FILE: &str = "poses.jsonl";
pub const BODY_STREAM_FILE: &str = "body.jsonl";
pub const BODY_CALIBRATION_FILE: &str = "body_calibration.json";
pub const HAND_CALIBRATION_FILE: &str = "hand_calibration.json";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl PipelineError {
    /// Process exit code: 2 for bad inputs, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Numerical(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Validation(_) => "validation",
            PipelineError::Numerical(_) => "numerical",
        }
    }
}

fn validation(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(e.to_string())
}

fn numerical(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Numerical(e.to_string())
}

impl From<SessionError> for PipelineError {
    fn from(e: SessionError) -> Self {
        validation(e)
    }
}

impl From<SimulationError> for PipelineError {
    fn from(e: SimulationError) -> Self {
        validation(e)
    }
}

impl From<GeometryError> for PipelineError {
    fn from(e: GeometryError) -> Self {
        validation(e)
    }
}

impl From<RigidError> for PipelineError {
    fn from(e: RigidError) -> Self {
        match e {
            RigidError::LengthMismatch { .. } => validation(e),
            _ => numerical(e),
        }
    }
}

impl From<MultiviewError> for PipelineError {
    fn from(e: MultiviewError) -> Self {
        match e {
            MultiviewError::MixedCorners | MultiviewError::Geometry(_) => validation(e),
            _ => numerical(e),
        }
    }
}

impl From<KinematicsError> for PipelineError {
    fn from(e: KinematicsError) -> Self {
        match e {
            KinematicsError::NonDecreasingLoss { .. } | KinematicsError::NonConvergence(_) | KinematicsError::NoVisibleMarkers | KinematicsError::Rigid(_) => {
                numerical(e)
            }
            _ => validation(e),
        }
    }
}

impl From<ArticulationError> for PipelineError {
    fn from(e: ArticulationError) -> Self {
        match e {
            ArticulationError::InvalidJoint(_) | ArticulationError::InvalidObservations(_) => validation(e),
            _ => numerical(e),
        }
    }
}

impl From<PostprocessError> for PipelineError {
    fn from(e: PostprocessError) -> Self {
        match e {
            PostprocessError::MissingBoundary => numerical(e),
            _ => validation(e),
        }
    }
}

impl From<RepresentationError> for PipelineError {
    fn from(e: RepresentationError) -> Self {
        validation(e)
    }
}

/// Pose in output files: translation `l` in meters and quaternion `q`
/// in (w, x, y, z) order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub l: [f64; 3],
    pub q: [f64; 4],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        Self { l: (*t.translation()).into(), q: t.wxyz() }
    }
}

impl PoseRecord {
    pub fn transform(&self) -> Result<RigidTransform, PipelineError> {
        RigidTransform::from_wxyz(self.q, self.l).map_err(validation)
    }
}

/// One line of `poses.jsonl`: the object's base pose at a camera frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPoseRecord {
    pub frame: usize,
    pub object: String,
    pub l: [f64; 3],
    /// (w, x, y, z).
    pub q: [f64; 4],
    /// Part states, base first; null where unknown.
    pub states: Vec<Option<f64>>,
    /// World pose of the object-canonical frame as carried by each part;
    /// null where the part was not observed.
    pub parts: Vec<Option<PoseRecord>>,
    /// `tracked` or the gap-filling method that produced the base pose.
    pub source: String,
    pub config_hash: String,
}

impl ObjectPoseRecord {
    pub fn base(&self) -> Result<RigidTransform, PipelineError> {
        PoseRecord { l: self.l, q: self.q }.transform()
    }
}

/// Hash and path of one file a verb read or wrote.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub verb: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub results: serde_json::Value,
}

/// A file or directory a verb reads, labelled by its role.
#[derive(Clone, Debug)]
pub struct Input {
    pub role: String,
    pub path: PathBuf,
}

impl Input {
    pub fn new(role: &str, path: &Path) -> Self {
        Self { role: role.into(), path: path.to_path_buf() }
    }

    fn digests(&self) -> Result<Vec<FileDigest>, PipelineError> {
        if self.path.is_dir() {
            Ok(input_digest(&self.path)?.into_iter().map(|(p, sha256)| FileDigest { path: format!("{}/{p}", self.role), sha256 }).collect())
        } else {
            let bytes = fs::read(&self.path).map_err(|e| validation(format!("{}: {e}", self.path.display())))?;
            let name = self.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(vec![FileDigest { path: format!("{}/{name}", self.role), sha256: sha256_hex(&bytes) }])
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf, PipelineError> {
    let abs = if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir().map_err(validation)?.join(p) };
    // Resolve what exists so symlinks and `..` compare correctly.
    let mut existing = abs.clone();
    let mut rest = Vec::new();
    while !existing.exists() {
        match (existing.file_name(), existing.parent()) {
            (Some(name), Some(parent)) => {
                rest.push(name.to_os_string());
                existing = parent.to_path_buf();
            }
            _ => break,
        }
    }
    let mut out = existing.canonicalize().unwrap_or(existing);
    for name in rest.into_iter().rev() {
        out.push(name);
    }
    Ok(out)
}

/// Output directory of one verb run. Files are written through it so the
/// metrics can list and hash them.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    inputs: Vec<Input>,
    written: Vec<String>,
}

impl OutputDir {
    /// Refuses output locations that overlap any input, then creates the
    /// directory.
    pub fn create(out: &Path, inputs: Vec<Input>) -> Result<Self, PipelineError> {
        let out_abs = absolute(out)?;
        for input in &inputs {
            if !input.path.exists() {
                return Err(validation(format!("{} input {} does not exist", input.role, input.path.display())));
            }
            let in_abs = absolute(&input.path)?;
            let in_dir = if in_abs.is_dir() { in_abs.clone() } else { in_abs.parent().map(Path::to_path_buf).unwrap_or_default() };
            if out_abs.starts_with(&in_dir) && (in_abs.is_dir() || out_abs == in_dir) || in_abs.starts_with(&out_abs) {
                return Err(validation(format!("output {} overlaps {} input {}", out.display(), input.role, input.path.display())));
            }
        }
        fs::create_dir_all(out).map_err(|e| validation(format!("{}: {e}", out.display())))?;
        Ok(Self { root: out.to_path_buf(), inputs, written: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.into());
        }
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| validation(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| validation(format!("{}: {e}", path.display())))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).map_err(validation)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), PipelineError> {
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).map_err(validation)?);
            text.push('\n');
        }
        self.write_bytes(name, text.as_bytes())
    }

    /// Records files written by other means (such as a saved session).
    pub fn adopt(&mut self, names: impl IntoIterator<Item = String>) {
        for n in names {
            self.record(&n);
        }
    }

    /// Writes `metrics.json` and returns it.
    pub fn finish<C: Serialize>(mut self, verb: &str, config: &C, seed: Option<u64>, results: serde_json::Value) -> Result<Metrics, PipelineError> {
        let mut inputs = Vec::new();
        for i in &self.inputs {
            inputs.extend(i.digests()?);
        }
        self.written.sort();
        let outputs = self
            .written
            .iter()
            .map(|name| {
                let bytes = fs::read(self.root.join(name)).map_err(|e| validation(format!("{name}: {e}")))?;
                Ok(FileDigest { path: name.clone(), sha256: sha256_hex(&bytes) })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let metrics = Metrics {
            verb: verb.into(),
            tool_version: TOOL_VERSION.into(),
            seed,
            config: serde_json::to_value(config).map_err(validation)?,
            config_hash: config_hash(config),
            inputs,
            outputs,
            results,
        };
        let mut text = serde_json::to_string_pretty(&metrics).map_err(validation)?;
        text.push('\n');
        let path = self.root.join(METRICS_FILE);
        fs::write(&path, text).map_err(|e| validation(format!("{}: {e}", path.display())))?;
        Ok(metrics)
    }
}

/// Parses a JSON config; missing fields take their defaults.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, PipelineError> {
    serde_json::from_str(text).map_err(|e| validation(format!("config: {e}")))
}

pub fn load_session(dir: &Path) -> Result<CaptureSession, PipelineError> {
    Ok(CaptureSession::load(dir)?)
}

/// Triangulated corners per camera frame. Corners seen by a single camera
/// are skipped; other failures are counted.
pub fn triangulate_session(session: &CaptureSession, cfg: &TriangulationConfig) -> (Vec<Vec<TriangulatedCorner>>, usize) {
    let batch = triangulate_all(&session.corner_detections(), &session.rig, cfg);
    let mut frames = vec![Vec::new(); session.meta.frames];
    for c in batch.corners {
        if let Some(slot) = frames.get_mut(c.frame as usize) {
            slot.push(c);
        }
    }
    let failed = batch.failures.iter().filter(|(_, e)| !matches!(e, MultiviewError::InsufficientViews(_))).count();
    (frames, failed)
}

/// Reads `poses.jsonl` from a file or from a directory holding one.
pub fn read_poses(path: &Path) -> Result<Vec<ObjectPoseRecord>, PipelineError> {
    let file = if path.is_dir() { path.join(POSES_FILE) } else { path.to_path_buf() };
    let records: Vec<ObjectPoseRecord> = read_jsonl(&file)?;
    for w in records.windows(2) {
        if (w[1].frame, &w[1].object) <= (w[0].frame, &w[0].object) {
            return Err(PipelineError::Validation(format!(
                "{}: records must be ordered by frame and object (frame {} {} after frame {} {})",
                file.display(),
                w[1].frame,
                w[1].object,
                w[0].frame,
                w[0].object
            )));
        }
    }
    Ok(records)
}

/// Resolves an artifact file given either the file or its directory.
pub fn artifact(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn stats(values: &[f64]) -> serde_json::Value {
    if values.is_empty() {
        return serde_json::json!({ "count": 0 });
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    serde_json::json!({ "count": values.len(), "mean": mean, "median": median, "max": max })
}
