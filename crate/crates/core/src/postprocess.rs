//! Sensor-fusion cleanup: wrist fusion, object gap filling, interpolation
//! baselines and jerk measurement.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;

/// Joint-to-surface distance under which a joint counts as holding an object (m).
pub const PROXIMITY_RADIUS: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("gap has no tracked boundary pose")]
    MissingBoundary,
    #[error("invalid gap: {0}")]
    InvalidGap(String),
    #[error("stream length mismatch: {0}")]
    LengthMismatch(String),
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("invalid rate {0} Hz")]
    InvalidRate(f64),
}

/// Missing stretch of a pose stream, half-open `[start, end)`. A gap with
/// `start == end` is empty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackGap {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

impl TrackGap {
    pub fn new(id: impl Into<String>, start: usize, end: usize, frames: usize) -> Result<Self, PostprocessError> {
        if start > end || end > frames {
            return Err(PostprocessError::InvalidGap(format!("[{start}, {end}) in a {frames}-frame stream")));
        }
        Ok(Self { id: id.into(), start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Maximal runs of `None` in a stream.
    pub fn find(id: &str, stream: &[Option<RigidTransform>]) -> Vec<TrackGap> {
        let mut gaps = Vec::new();
        let mut open = None;
        for (t, p) in stream.iter().enumerate() {
            match (p.is_none(), open) {
                (true, None) => open = Some(t),
                (false, Some(s)) => {
                    gaps.push(TrackGap { id: id.into(), start: s, end: t });
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(s) = open {
            gaps.push(TrackGap { id: id.into(), start: s, end: stream.len() });
        }
        gaps
    }
}

/// Marker-confidence weight in `[0, 1)`: `n/(n+3) · 1/(1+rms_px)`.
pub fn marker_weight(n_views: usize, reprojection_rms_px: f64) -> f64 {
    let n = n_views as f64;
    n / (n + 3.0) / (1.0 + reprojection_rms_px.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WristSample {
    pub pose: RigidTransform,
    /// Confidence in `[0, 1]`; 1 passes the marker pose through unchanged.
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Smoothing width (frames) applied to the marker-minus-mocap correction
    /// at zero confidence; it shrinks linearly to 0 at full confidence.
    pub kernel_sigma: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { kernel_sigma: 20.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorFlag {
    Tracked,
    /// Inside a tracking gap with anchors on both sides.
    Interpolated,
    /// Gap touching the sequence boundary; anchored on one side only.
    OneSided,
    /// No tracked frame anywhere: raw mocap.
    Unanchored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedStream {
    pub poses: Vec<RigidTransform>,
    pub flags: Vec<AnchorFlag>,
}

/// Weighted mean of transforms; quaternions are sign-aligned to the first.
fn mean_transform(items: impl Iterator<Item = (f64, RigidTransform)>) -> Option<RigidTransform> {
    let mut wsum = 0.0;
    let mut t = Vector3::zeros();
    let mut q = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    let mut reference: Option<Quaternion<f64>> = None;
    for (w, x) in items {
        let xq = *x.rotation().quaternion();
        let r = *reference.get_or_insert(xq);
        let sign = if r.dot(&xq) < 0.0 { -1.0 } else { 1.0 };
        q += xq * (w * sign);
        t += x.translation() * w;
        wsum += w;
    }
    (wsum > 0.0).then(|| RigidTransform::new(UnitQuaternion::new_normalize(q), t / wsum))
}

/// Fuses marker-tracked wrist poses with the mocap wrist. The correction
/// `mocap⁻¹ ∘ marker` is smoothed over tracked frames with a Gaussian whose
/// width shrinks with confidence, and is interpolated across tracking gaps.
pub fn fuse_wrist(marker: &[Option<WristSample>], mocap: &[RigidTransform], cfg: &FusionConfig) -> Result<FusedStream, PostprocessError> {
    if marker.len() != mocap.len() {
        return Err(PostprocessError::LengthMismatch(format!("{} marker frames vs {} mocap frames", marker.len(), mocap.len())));
    }
    if !mocap.iter().all(|p| p.is_finite()) || !marker.iter().flatten().all(|s| s.pose.is_finite() && s.weight.is_finite()) {
        return Err(PostprocessError::NonFinite("wrist streams"));
    }
    let n = mocap.len();
    let anchors: Vec<usize> = (0..n).filter(|&t| marker[t].is_some()).collect();
    let correction = |t: usize| mocap[t].inverse().compose(&marker[t].expect("anchor frame").pose);
    let raw: Vec<Option<RigidTransform>> = (0..n).map(|t| marker[t].map(|_| correction(t))).collect();
    let smoothed: Vec<Option<RigidTransform>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let sample = marker[t]?;
            let w = sample.weight.clamp(0.0, 1.0);
            let sigma = cfg.kernel_sigma * (1.0 - w);
            if sigma < 1e-9 {
                return raw[t];
            }
            let reach = (3.0 * sigma).ceil() as usize;
            let lo = t.saturating_sub(reach);
            let hi = (t + reach).min(n - 1);
            // The sample itself leads so the sign alignment is anchored on it.
            let others = (lo..=hi).filter(|&s| s != t).filter_map(|s| {
                raw[s].map(|c| {
                    let d = (s as f64 - t as f64) / sigma;
                    ((-0.5 * d * d).exp(), c)
                })
            });
            mean_transform(std::iter::once((1.0, raw[t].expect("anchor frame"))).chain(others))
        })
        .collect();
    let mut poses = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for t in 0..n {
        if let Some(sample) = marker[t] {
            if sample.weight >= 1.0 {
                poses.push(sample.pose);
            } else {
                poses.push(mocap[t].compose(&smoothed[t].expect("tracked frame")));
            }
            flags.push(AnchorFlag::Tracked);
            continue;
        }
        let next = anchors.partition_point(|&a| a < t);
        let before = next.checked_sub(1).map(|i| anchors[i]);
        let after = anchors.get(next).copied();
        let (c, flag) = match (before, after) {
            (Some(a), Some(b)) => {
                let alpha = (t - a) as f64 / (b - a) as f64;
                let ca = smoothed[a].expect("anchor");
                (ca.interpolate(&smoothed[b].expect("anchor"), alpha), AnchorFlag::Interpolated)
            }
            (Some(a), None) | (None, Some(a)) => (smoothed[a].expect("anchor"), AnchorFlag::OneSided),
            (None, None) => {
                poses.push(mocap[t]);
                flags.push(AnchorFlag::Unanchored);
                continue;
            }
        };
        poses.push(mocap[t].compose(&c));
        flags.push(flag);
    }
    Ok(FusedStream { poses, flags })
}

/// Lerp/slerp fill uniform in frame index between the poses just outside the gap.
pub fn baseline_interpolate(gap: &TrackGap, before: Option<&RigidTransform>, after: Option<&RigidTransform>) -> Result<Vec<RigidTransform>, PostprocessError> {
    let (Some(a), Some(b)) = (before, after) else {
        return Err(PostprocessError::MissingBoundary);
    };
    let span = (gap.len() + 1) as f64;
    Ok((1..=gap.len()).map(|k| a.interpolate(b, k as f64 / span)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FillConfig {
    pub proximity_radius: f64,
    /// Boundary poses closer than this in translation (m) and rotation (rad)
    /// mark the object as static.
    pub static_tolerance: f64,
}

impl Default for FillConfig {
    fn default() -> Self {
        Self { proximity_radius: PROXIMITY_RADIUS, static_tolerance: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum FillMethod {
    /// Empty gap; nothing filled.
    Empty,
    /// Object did not move across the gap.
    Static,
    /// Composed with a holding joint's motion.
    Attached { joint: usize },
    /// Lerp/slerp because no joint held the object at both boundaries.
    NoNearbyJoint,
    /// One-sided fill at a sequence boundary, attached to `joint` if any.
    NoAnchor { joint: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFill {
    pub poses: Vec<RigidTransform>,
    pub method: FillMethod,
}

/// Joint closest to the posed object surface, if within `radius`.
fn holding_joint(joints: &[RigidTransform], object: &RigidTransform, surface: &[Vector3<f64>], radius: f64) -> Option<usize> {
    let inv = object.inverse();
    joints
        .iter()
        .enumerate()
        .map(|(j, pose)| {
            let local = inv.transform_point(pose.translation());
            let d = surface.iter().map(|p| (p - local).norm()).fold(f64::INFINITY, f64::min);
            (j, d)
        })
        .filter(|(_, d)| *d <= radius)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
}

/// Fills an object gap by holding the object's transform relative to the
/// closest body joint, blended linearly between the two boundary estimates.
/// `joints[t][j]` is the world pose of joint `j` at frame `t`; `surface` is
/// sampled in the object frame.
pub fn fill_object_gap(
    gap: &TrackGap,
    joints: &[Vec<RigidTransform>],
    object: &[Option<RigidTransform>],
    surface: &[Vector3<f64>],
    cfg: &FillConfig,
) -> Result<GapFill, PostprocessError> {
    if joints.len() != object.len() {
        return Err(PostprocessError::LengthMismatch(format!("{} joint frames vs {} object frames", joints.len(), object.len())));
    }
    if gap.start > gap.end || gap.end > object.len() {
        return Err(PostprocessError::InvalidGap(format!("[{}, {})", gap.start, gap.end)));
    }
    if gap.is_empty() {
        return Ok(GapFill { poses: Vec::new(), method: FillMethod::Empty });
    }
    let b0 = gap.start.checked_sub(1).filter(|&t| object[t].is_some());
    let b1 = Some(gap.end).filter(|&t| t < object.len() && object[t].is_some());
    let hold = |b: usize| holding_joint(&joints[b], object[b].as_ref().expect("boundary"), surface, cfg.proximity_radius);
    let frames = gap.start..gap.end;
    match (b0, b1) {
        (None, None) => Err(PostprocessError::MissingBoundary),
        (Some(b), None) | (None, Some(b)) => {
            let pose = object[b].expect("boundary");
            let joint = hold(b);
            let poses = match joint {
                Some(j) => {
                    let rel = joints[b][j].inverse().compose(&pose);
                    frames.map(|t| joints[t][j].compose(&rel)).collect()
                }
                None => vec![pose; gap.len()],
            };
            Ok(GapFill { poses, method: FillMethod::NoAnchor { joint } })
        }
        (Some(a), Some(b)) => {
            let (pa, pb) = (object[a].expect("boundary"), object[b].expect("boundary"));
            if pa.translation_distance_to(&pb) <= cfg.static_tolerance && pa.rotation_angle_to(&pb) <= cfg.static_tolerance {
                return Ok(GapFill { poses: baseline_interpolate(gap, Some(&pa), Some(&pb))?, method: FillMethod::Static });
            }
            match (hold(a), hold(b)) {
                (Some(ja), Some(jb)) if ja == jb => {
                    let ra = joints[a][ja].inverse().compose(&pa);
                    let rb = joints[b][ja].inverse().compose(&pb);
                    let span = (b - a) as f64;
                    let poses = frames.map(|t| joints[t][ja].compose(&ra.interpolate(&rb, (t - a) as f64 / span))).collect();
                    Ok(GapFill { poses, method: FillMethod::Attached { joint: ja } })
                }
                _ => Ok(GapFill { poses: baseline_interpolate(gap, Some(&pa), Some(&pb))?, method: FillMethod::NoNearbyJoint }),
            }
        }
    }
}

/// Writes a fill into the stream.
pub fn apply_fill(stream: &mut [Option<RigidTransform>], gap: &TrackGap, fill: &GapFill) {
    for (slot, pose) in stream[gap.start..gap.end].iter_mut().zip(&fill.poses) {
        *slot = Some(*pose);
    }
}

/// Jerk magnitude from the four-point third difference; entry `i` is
/// centred between frames `i + 1` and `i + 2`.
pub fn jerk_profile(positions: &[Vector3<f64>], rate_hz: f64) -> Result<Vec<f64>, PostprocessError> {
    if positions.len() < 4 {
        return Err(PostprocessError::TooShort { needed: 4, got: positions.len() });
    }
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(PostprocessError::InvalidRate(rate_hz));
    }
    let h3 = rate_hz.powi(3);
    Ok(positions.windows(4).map(|w| ((w[3] - w[0]) - 3.0 * (w[2] - w[1])).norm() * h3).collect())
}

pub fn mean_jerk(positions: &[Vector3<f64>], rate_hz: f64) -> Result<f64, PostprocessError> {
    let j = jerk_profile(positions, rate_hz)?;
    Ok(j.iter().sum::<f64>() / j.len() as f64)
}

/// A tracked object moving with a body, with ground truth for every frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarrySequence {
    pub joints: Vec<Vec<RigidTransform>>,
    pub object: Vec<RigidTransform>,
    /// Object surface samples in the object frame.
    pub surface: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRecoverRow {
    pub window: usize,
    pub placements: usize,
    /// Mean errors over gap frames and placements (m, degrees).
    pub fill_translation: f64,
    pub fill_rotation_deg: f64,
    pub baseline_translation: f64,
    pub baseline_rotation_deg: f64,
}

/// Drops `window` frames at evenly spaced placements, recovers them with
/// [`fill_object_gap`] and the lerp/slerp baseline, and reports mean errors
/// against the original poses.
pub fn drop_and_recover(seq: &CarrySequence, windows: &[usize], placements: usize, cfg: &FillConfig) -> Result<Vec<DropRecoverRow>, PostprocessError> {
    let n = seq.object.len();
    if seq.joints.len() != n {
        return Err(PostprocessError::LengthMismatch(format!("{} joint frames vs {n} object frames", seq.joints.len())));
    }
    if placements == 0 {
        return Err(PostprocessError::InvalidGap("zero placements".into()));
    }
    let longest = windows.iter().copied().max().unwrap_or(0);
    if windows.contains(&0) || n < longest + 2 {
        return Err(PostprocessError::TooShort { needed: longest + 2, got: n });
    }
    windows
        .par_iter()
        .map(|&w| {
            // Placements share their centres across windows so error growth
            // reflects window length only.
            let usable = n - 2 - longest;
            let mut sums = [0.0; 4];
            for p in 0..placements {
                let centre = 1 + longest / 2 + usable * (2 * p + 1) / (2 * placements);
                let start = centre - w / 2;
                let gap = TrackGap::new("drop", start, start + w, n)?;
                let mut stream: Vec<Option<RigidTransform>> = seq.object.iter().copied().map(Some).collect();
                for s in &mut stream[gap.start..gap.end] {
                    *s = None;
                }
                let fill = fill_object_gap(&gap, &seq.joints, &stream, &seq.surface, cfg)?;
                let base = baseline_interpolate(&gap, stream[start - 1].as_ref(), stream[gap.end].as_ref())?;
                for (k, t) in (gap.start..gap.end).enumerate() {
                    let truth = &seq.object[t];
                    sums[0] += fill.poses[k].translation_distance_to(truth);
                    sums[1] += fill.poses[k].rotation_angle_to(truth).to_degrees();
                    sums[2] += base[k].translation_distance_to(truth);
                    sums[3] += base[k].rotation_angle_to(truth).to_degrees();
                }
            }
            let count = (w * placements) as f64;
            Ok(DropRecoverRow {
                window: w,
                placements,
                fill_translation: sums[0] / count,
                fill_rotation_deg: sums[1] / count,
                baseline_translation: sums[2] / count,
                baseline_rotation_deg: sums[3] / count,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WristRecoverRow {
    pub window: usize,
    pub placements: usize,
    /// Mean wrist position error over dropped frames (m).
    pub fused_translation: f64,
    pub mocap_translation: f64,
}

/// Drops marker tracking for `window` frames at evenly spaced placements,
/// fuses, and reports wrist errors against `truth` inside the drops.
pub fn wrist_drop_recover(
    truth: &[RigidTransform],
    mocap: &[RigidTransform],
    marker: &[Option<WristSample>],
    windows: &[usize],
    placements: usize,
    cfg: &FusionConfig,
) -> Result<Vec<WristRecoverRow>, PostprocessError> {
    let n = truth.len();
    if mocap.len() != n || marker.len() != n {
        return Err(PostprocessError::LengthMismatch(format!("{n} truth frames vs {} mocap and {} marker frames", mocap.len(), marker.len())));
    }
    if placements == 0 {
        return Err(PostprocessError::InvalidGap("zero placements".into()));
    }
    let longest = windows.iter().copied().max().unwrap_or(0);
    if windows.contains(&0) || n < longest + 2 {
        return Err(PostprocessError::TooShort { needed: longest + 2, got: n });
    }
    let usable = n - 2 - longest;
    let centres: Vec<usize> = (0..placements).map(|p| 1 + longest / 2 + usable * (2 * p + 1) / (2 * placements)).collect();
    windows
        .iter()
        .map(|&w| {
            let mut dropped = marker.to_vec();
            let mut frames = Vec::new();
            for &c in &centres {
                let start = c - w / 2;
                for t in start..start + w {
                    dropped[t] = None;
                    frames.push(t);
                }
            }
            frames.sort_unstable();
            frames.dedup();
            let fused = fuse_wrist(&dropped, mocap, cfg)?;
            let count = frames.len() as f64;
            let err = |s: &[RigidTransform]| frames.iter().map(|&t| s[t].translation_distance_to(&truth[t])).sum::<f64>() / count;
            Ok(WristRecoverRow { window: w, placements, fused_translation: err(&fused.poses), mocap_translation: err(mocap) })
        })
        .collect()
}
