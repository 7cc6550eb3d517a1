//! Joint fitting for articulated objects.
//!
//! A movable part is observed at several discrete states, with its marker
//! corners already mapped into the object-canonical frame. Sliding joints get a
//! closed-form axis from the corner displacements. Revolute joints minimize
//!
//! ```text
//! Σ_(t,t')∈P Σ_i ‖m_i(t') − T_(t→t')(a, Δs, p) · m_i(t)‖²
//! ```
//!
//! jointly over the axis `a`, the pivot `p` and one relative angle `Δs` per
//! state pair, with a Levenberg-Marquardt solver started from per-pair Kabsch
//! screw axes.
//!
//! Conventions: the axis sign makes the first observed motion positive, the
//! pivot is the point on the axis nearest the corner centroid, and part state
//! zero is the object-canonical placement of the part.

use nalgebra::{DMatrix, DVector, Matrix3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, RigidTransform};
use crate::rigid::{kabsch_points, RigidError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArticulationError {
    #[error("invalid joint: {0}")]
    InvalidJoint(String),
    #[error("invalid observations: {0}")]
    InvalidObservations(String),
    #[error("part does not move (max displacement {0:.2e} m)")]
    NoDisplacement(f64),
    #[error("sliding part rotates by {0:.3} deg between states")]
    RotationDetected(f64),
    #[error("largest relative rotation {0:.3} deg is below the 2 deg minimum")]
    InsufficientRotation(f64),
    #[error("optimizer stopped with gradient norm {0:.3e}")]
    NonConvergence(f64),
    #[error("part motion violates the joint model (translation {translation:.4} m, rotation {rotation_deg:.3} deg)")]
    ModelViolation { translation: f64, rotation_deg: f64 },
    #[error(transparent)]
    Rigid(#[from] RigidError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Sliding,
}

/// One degree-of-freedom joint in the object-canonical frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointSpecRepr", into = "JointSpecRepr")]
pub struct JointSpec {
    kind: JointKind,
    axis: Unit<Vector3<f64>>,
    pivot: Option<Vector3<f64>>,
}

#[derive(Serialize, Deserialize)]
struct JointSpecRepr {
    kind: JointKind,
    axis: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pivot: Option<[f64; 3]>,
}

impl TryFrom<JointSpecRepr> for JointSpec {
    type Error = ArticulationError;

    fn try_from(r: JointSpecRepr) -> Result<Self, Self::Error> {
        JointSpec::new(r.kind, Vector3::from(r.axis), r.pivot.map(Vector3::from))
    }
}

impl From<JointSpec> for JointSpecRepr {
    fn from(j: JointSpec) -> Self {
        JointSpecRepr { kind: j.kind, axis: j.axis.into_inner().into(), pivot: j.pivot.map(Into::into) }
    }
}

impl JointSpec {
    /// Validates a joint; `axis` must already be unit length within 1e-9.
    pub fn new(kind: JointKind, axis: Vector3<f64>, pivot: Option<Vector3<f64>>) -> Result<Self, ArticulationError> {
        if !axis.iter().all(|v| v.is_finite()) || (axis.norm() - 1.0).abs() > 1e-9 {
            return Err(ArticulationError::InvalidJoint(format!("axis norm {} is not 1", axis.norm())));
        }
        match (kind, &pivot) {
            (JointKind::Revolute, None) => return Err(ArticulationError::InvalidJoint("revolute joint needs a pivot".into())),
            (JointKind::Sliding, Some(_)) => return Err(ArticulationError::InvalidJoint("sliding joint has no pivot".into())),
            _ => {}
        }
        Ok(Self { kind, axis: Unit::new_unchecked(axis), pivot })
    }

    pub fn revolute(axis: Vector3<f64>, pivot: Vector3<f64>) -> Result<Self, ArticulationError> {
        Self::new(JointKind::Revolute, axis.normalize(), Some(pivot))
    }

    pub fn sliding(axis: Vector3<f64>) -> Result<Self, ArticulationError> {
        Self::new(JointKind::Sliding, axis.normalize(), None)
    }

    pub fn kind(&self) -> JointKind {
        self.kind
    }

    pub fn axis(&self) -> &Unit<Vector3<f64>> {
        &self.axis
    }

    pub fn pivot(&self) -> Option<&Vector3<f64>> {
        self.pivot.as_ref()
    }

    /// Part placement relative to the base at state `s`.
    pub fn transform(&self, s: f64) -> RigidTransform {
        match self.kind {
            JointKind::Revolute => RigidTransform::about_pivot(&self.axis, s, self.pivot.as_ref().expect("revolute joints carry a pivot")),
            JointKind::Sliding => RigidTransform::from_translation(self.axis.into_inner() * s),
        }
    }
}

/// Marker corners of one part in the object-canonical frame, per observed state.
#[derive(Clone, Debug, PartialEq)]
pub struct PartObservationSet {
    states: Vec<Vec<Vector3<f64>>>,
}

impl PartObservationSet {
    pub fn new(states: Vec<Vec<Vector3<f64>>>) -> Result<Self, ArticulationError> {
        if states.len() < 2 {
            return Err(ArticulationError::InvalidObservations(format!("{} states, need at least 2", states.len())));
        }
        let n = states[0].len();
        if n < 3 {
            return Err(ArticulationError::InvalidObservations(format!("{n} corners per state, need at least 3")));
        }
        if states.iter().any(|s| s.len() != n) {
            return Err(ArticulationError::InvalidObservations("corner count differs between states".into()));
        }
        if states.iter().flatten().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(ArticulationError::InvalidObservations("non-finite corner".into()));
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[Vec<Vector3<f64>>] {
        &self.states
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn corner_count(&self) -> usize {
        self.states[0].len()
    }

    /// Mean of all observed corners; fitted pivots are reported nearest to it.
    pub fn centroid(&self) -> Vector3<f64> {
        let n = (self.state_count() * self.corner_count()) as f64;
        self.states.iter().flatten().sum::<Vector3<f64>>() / n
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.state_count();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    }
}

/// Rotation above which a part is not considered purely sliding.
pub const SLIDING_MAX_ROTATION_DEG: f64 = 0.5;
/// Minimum corner displacement for an axis to be defined.
pub const MIN_DISPLACEMENT: f64 = 1e-3;
/// Minimum relative rotation for a revolute fit.
pub const REVOLUTE_MIN_ROTATION_DEG: f64 = 2.0;

fn mean_displacement(obs: &PartObservationSet, from: usize, to: usize) -> Vector3<f64> {
    let a = &obs.states[from];
    let b = &obs.states[to];
    a.iter().zip(b).map(|(p, q)| q - p).sum::<Vector3<f64>>() / a.len() as f64
}

/// Closed-form sliding axis: the normalized mean of corner displacements over
/// all state pairs, each pair sign-aligned with the first observed motion.
pub fn fit_sliding(obs: &PartObservationSet) -> Result<JointSpec, ArticulationError> {
    for k in 1..obs.state_count() {
        let t = kabsch_points(&obs.states[0], &obs.states[k])?;
        let deg = t.rotation_angle_to(&RigidTransform::identity()).to_degrees();
        if deg >= SLIDING_MAX_ROTATION_DEG {
            return Err(ArticulationError::RotationDetected(deg));
        }
    }
    let pairs = obs.pairs();
    let max_disp = pairs.iter().map(|&(i, j)| obs.states[i].iter().zip(&obs.states[j]).map(|(p, q)| (q - p).norm()).fold(0.0, f64::max)).fold(0.0, f64::max);
    if max_disp < MIN_DISPLACEMENT {
        return Err(ArticulationError::NoDisplacement(max_disp));
    }
    let reference =
        pairs.iter().map(|&(i, j)| mean_displacement(obs, i, j)).find(|d| d.norm() >= MIN_DISPLACEMENT).unwrap_or_else(|| mean_displacement(obs, 0, 1));
    let sum: Vector3<f64> = pairs
        .iter()
        .map(|&(i, j)| {
            let d = mean_displacement(obs, i, j);
            if d.dot(&reference) < 0.0 {
                -d
            } else {
                d
            }
        })
        .sum();
    JointSpec::sliding(sum)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairState {
    pub from: usize,
    pub to: usize,
    /// Rotation (radians, about the fitted axis) taking state `from` to state `to`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RevoluteFit {
    pub joint: JointSpec,
    pub pair_states: Vec<PairState>,
    /// Per-state angle relative to the first observed state.
    pub states: Vec<f64>,
    /// Objective over unordered state pairs (m²).
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevoluteConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for RevoluteConfig {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_tolerance: 1e-6 }
    }
}

/// Signed rotation angle of `q` about `axis` (twist component), in (−π, π].
pub fn twist_angle(q: &UnitQuaternion<f64>, axis: &Vector3<f64>) -> f64 {
    let v = q.imag();
    let mut angle = 2.0 * v.dot(axis).atan2(q.w);
    if angle > std::f64::consts::PI {
        angle -= std::f64::consts::TAU;
    } else if angle <= -std::f64::consts::PI {
        angle += std::f64::consts::TAU;
    }
    angle
}

fn tangent_basis(a: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = a.cross(&helper).normalize();
    let b2 = a.cross(&b1);
    (b1, b2)
}

/// Revolute objective `Σ_pairs Σ_i ‖m_i(to) − T(a, δ, p)·m_i(from)‖²`.
pub fn revolute_objective(obs: &PartObservationSet, axis: &Vector3<f64>, pivot: &Vector3<f64>, pairs: &[PairState]) -> f64 {
    let a = Unit::new_normalize(*axis);
    pairs
        .iter()
        .map(|ps| {
            let t = RigidTransform::about_pivot(&a, ps.delta, pivot);
            obs.states[ps.from].iter().zip(&obs.states[ps.to]).map(|(m, target)| (target - t.transform_point(m)).norm_squared()).sum::<f64>()
        })
        .sum()
}

struct Problem<'a> {
    obs: &'a PartObservationSet,
    pairs: Vec<(usize, usize)>,
}

impl Problem<'_> {
    fn residual_count(&self) -> usize {
        3 * self.obs.corner_count() * self.pairs.len()
    }

    fn residuals(&self, a: &Vector3<f64>, p: &Vector3<f64>, deltas: &[f64]) -> DVector<f64> {
        let mut r = DVector::zeros(self.residual_count());
        let au = Unit::new_unchecked(*a);
        let mut row = 0;
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            let rot = UnitQuaternion::from_axis_angle(&au, deltas[k]);
            for (m, target) in self.obs.states[i].iter().zip(&self.obs.states[j]) {
                let res = target - (rot * (m - p) + p);
                r.fixed_rows_mut::<3>(row).copy_from(&res);
                row += 3;
            }
        }
        r
    }

    /// Jacobian w.r.t. (axis tangent 2, pivot normal-plane 2, one delta per pair).
    fn jacobian(&self, a: &Vector3<f64>, p: &Vector3<f64>, deltas: &[f64]) -> DMatrix<f64> {
        let np = 4 + self.pairs.len();
        let mut jac = DMatrix::zeros(self.residual_count(), np);
        let (b1, b2) = tangent_basis(a);
        let au = Unit::new_unchecked(*a);
        let mut row = 0;
        for (k, &(i, _)) in self.pairs.iter().enumerate() {
            let d = deltas[k];
            let rot = UnitQuaternion::from_axis_angle(&au, d);
            let rmat = rot.to_rotation_matrix().into_inner();
            let (s, c) = d.sin_cos();
            for m in &self.obs.states[i] {
                let v = m - p;
                let rv = rmat * v;
                let d_delta = -a.cross(&rv);
                let d_axis = -(skew(&v) * (-s) + (Matrix3::identity() * a.dot(&v) + a * v.transpose()) * (1.0 - c));
                let d_pivot = rmat - Matrix3::identity();
                for r3 in 0..3 {
                    jac[(row + r3, 0)] = (d_axis * b1)[r3];
                    jac[(row + r3, 1)] = (d_axis * b2)[r3];
                    jac[(row + r3, 2)] = (d_pivot * b1)[r3];
                    jac[(row + r3, 3)] = (d_pivot * b2)[r3];
                    jac[(row + r3, 4 + k)] = d_delta[r3];
                }
                row += 3;
            }
        }
        jac
    }
}

/// Least-squares point closest to a set of lines `(point, unit direction)`;
/// `None` when the lines do not constrain any direction.
fn closest_point_to_lines(lines: &[(Vector3<f64>, Vector3<f64>)]) -> Option<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (c, d) in lines {
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * c;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return None;
    }
    svd.solve(&b, smax * 1e-6).ok()
}

/// Fits axis, pivot and pairwise relative angles of a revolute part.
pub fn fit_revolute(obs: &PartObservationSet, config: &RevoluteConfig) -> Result<RevoluteFit, ArticulationError> {
    let pairs = obs.pairs();
    let relative: Vec<RigidTransform> = pairs.iter().map(|&(i, j)| kabsch_points(&obs.states[i], &obs.states[j])).collect::<Result<_, _>>()?;
    let angles: Vec<f64> = relative.iter().map(|t| t.rotation_angle_to(&RigidTransform::identity())).collect();
    let (widest, max_angle) = angles.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).expect("at least one pair");
    if max_angle.to_degrees() < REVOLUTE_MIN_ROTATION_DEG {
        return Err(ArticulationError::InsufficientRotation(max_angle.to_degrees()));
    }

    let mut axis = relative[widest].rotation().axis().expect("rotation above threshold has an axis").into_inner();

    // Screw-axis points of every pair that rotates noticeably.
    let lines: Vec<(Vector3<f64>, Vector3<f64>)> = relative
        .iter()
        .zip(&angles)
        .filter(|(_, &ang)| ang > 1e-3)
        .filter_map(|(t, _)| {
            let a = t.rotation().axis()?.into_inner();
            let a = if a.dot(&axis) < 0.0 { -a } else { a };
            let tr = t.translation();
            let rhs = tr - a * a.dot(tr);
            let m = Matrix3::identity() - t.matrix();
            let svd = m.svd(true, true);
            let c = svd.solve(&rhs, svd.singular_values.max() * 1e-9).ok()?;
            Some((c, a))
        })
        .collect();
    let centroid = obs.centroid();
    let mut pivot = closest_point_to_lines(&lines).unwrap_or(centroid);
    let mut deltas: Vec<f64> = relative.iter().map(|t| twist_angle(t.rotation(), &axis)).collect();

    let problem = Problem { obs, pairs };
    let mut lambda = 1e-3;
    let mut r = problem.residuals(&axis, &pivot, &deltas);
    let mut cost = r.norm_squared();
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let jac = problem.jacobian(&axis, &pivot, &deltas);
        let jtr = jac.transpose() * &r;
        grad_norm = jtr.norm();
        if grad_norm < config.gradient_tolerance * 1e-6 {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let mut accepted = false;
        for _ in 0..20 {
            let mut damped = jtj.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let (b1, b2) = tangent_basis(&axis);
            let new_axis = (axis + b1 * step[0] + b2 * step[1]).normalize();
            let new_pivot = pivot + b1 * step[2] + b2 * step[3];
            let new_deltas: Vec<f64> = deltas.iter().enumerate().map(|(k, d)| d + step[4 + k]).collect();
            let new_r = problem.residuals(&new_axis, &new_pivot, &new_deltas);
            let new_cost = new_r.norm_squared();
            if new_cost <= cost {
                let small = step.norm() < 1e-15 || cost - new_cost <= 1e-16 * cost;
                axis = new_axis;
                pivot = new_pivot;
                deltas = new_deltas;
                r = new_r;
                cost = new_cost;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            let jac = problem.jacobian(&axis, &pivot, &deltas);
            grad_norm = (jac.transpose() * &r).norm();
            break;
        }
    }
    if grad_norm > config.gradient_tolerance {
        return Err(ArticulationError::NonConvergence(grad_norm));
    }

    // Gauge: pivot nearest the corner centroid; sign: first motion positive.
    pivot += axis * axis.dot(&(centroid - pivot));
    if let Some(first) = deltas.iter().find(|d| d.abs() > 1e-9) {
        if *first < 0.0 {
            axis = -axis;
            deltas.iter_mut().for_each(|d| *d = -*d);
        }
    }

    let pair_states: Vec<PairState> = problem.pairs.iter().zip(&deltas).map(|(&(from, to), &delta)| PairState { from, to, delta }).collect();
    let mut states = vec![0.0; obs.state_count()];
    for ps in pair_states.iter().filter(|ps| ps.from == 0) {
        states[ps.to] = ps.delta;
    }
    Ok(RevoluteFit { joint: JointSpec::revolute(axis, pivot)?, objective: cost, gradient_norm: grad_norm, iterations, pair_states, states })
}

/// Residual tolerances for [`part_state`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualThresholds {
    pub translation: f64,
    pub rotation: f64,
}

impl Default for ResidualThresholds {
    fn default() -> Self {
        Self { translation: 0.01, rotation: 5f64.to_radians() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartStateMeasurement {
    pub value: f64,
    /// Translation not explained by the joint (meters).
    pub residual_translation: f64,
    /// Rotation not explained by the joint (radians).
    pub residual_rotation: f64,
}

/// Extracts the scalar state of a part from the base and part poses, where
/// both are world poses of the object-canonical frame carried by each part.
pub fn part_state(
    base_pose: &RigidTransform,
    part_pose: &RigidTransform,
    joint: &JointSpec,
    thresholds: &ResidualThresholds,
) -> Result<PartStateMeasurement, ArticulationError> {
    let rel = base_pose.inverse().compose(part_pose);
    let a = joint.axis().into_inner();
    let m = match joint.kind() {
        JointKind::Revolute => {
            let value = twist_angle(rel.rotation(), &a);
            let expected = joint.transform(value);
            PartStateMeasurement { value, residual_translation: rel.translation_distance_to(&expected), residual_rotation: rel.rotation_angle_to(&expected) }
        }
        JointKind::Sliding => {
            let value = rel.translation().dot(&a);
            PartStateMeasurement {
                value,
                residual_translation: (rel.translation() - a * value).norm(),
                residual_rotation: rel.rotation_angle_to(&RigidTransform::identity()),
            }
        }
    };
    if m.residual_translation > thresholds.translation || m.residual_rotation > thresholds.rotation {
        return Err(ArticulationError::ModelViolation { translation: m.residual_translation, rotation_deg: m.residual_rotation.to_degrees() });
    }
    Ok(m)
}
