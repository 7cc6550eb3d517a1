//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{Unit, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use mfk::articulation::{fit_revolute, fit_sliding, part_state, JointSpec, PartObservationSet, ResidualThresholds, RevoluteConfig};
use mfk::geometry::{CameraModel, MarkerCube, Rig, RigidTransform};
use mfk::kinematics::body::{
    calibrate_body, max_offset_error, perturb_offsets, synthetic_rom, BodyCalibrationConfig, BodySkeleton, CALIBRATED_OFFSETS, LEFT_FOOT, LEFT_TOE, PELVIS,
    RIGHT_FOOT, RIGHT_TOE,
};
use mfk::kinematics::hand::{calibrate_hand, hand_protocol, synthetic_touches, CalibrationStructure, HandCalibrationConfig, HandSide, HandSkeleton};
use mfk::multiview::{triangulate, CornerDetection};
use mfk::pipeline::export::feature_joint_count;
use mfk::postprocess::{drop_and_recover, fuse_wrist, mean_jerk, wrist_drop_recover, FillConfig, FusionConfig};
use mfk::representation::{build_features, compute_contacts, feature_dimension, heading, ContactTarget, FeatureConfig, Party, PartyStream};
use mfk::simulation::generator::{body_motion, carry_sequence, joint_stream, target_mesh, wrist_streams};
use mfk::simulation::mesh::SurfaceGrid;
use mfk::state::HAND_JOINTS;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Unit::new_normalize(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
    let t = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    RigidTransform::new(UnitQuaternion::from_axis_angle(&axis, rng.random_range(-3.1..3.1)), t)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let noise = Normal::new(0.0, 0.001).unwrap();
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    let (mut rot, mut trans) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let n = rng.random_range(4..=12);
        let p: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
        let truth = random_transform(&mut rng);
        let q: Vec<_> = p.iter().map(|x| truth.transform_point(x)).collect();
        let t = mfk::rigid::kabsch_points(&p, &q).map_err(|e| e.to_string())?;
        worst_r = worst_r.max(t.rotation_angle_to(&truth));
        worst_t = worst_t.max(t.translation_distance_to(&truth));
        let noisy: Vec<_> = q.iter().map(|x| x + Vector3::from_fn(|_, _| noise.sample(&mut rng))).collect();
        let t = mfk::rigid::kabsch_points(&p, &noisy).map_err(|e| e.to_string())?;
        rot.push(t.rotation_angle_to(&truth).to_degrees());
        trans.push(t.translation_distance_to(&truth));
    }
    let (mr, mt) = (median(rot), median(trans));
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_r < 1e-9 && worst_t < 1e-9 && mr < 0.2 && mt < 0.002 && secs < 5.0,
        format!("noiseless max {worst_r:.1e} rad / {worst_t:.1e} m; 1 mm noise median {mr:.3} deg / {:.2} mm; {secs:.2} s", mt * 1e3),
    )
}

fn ring(n: usize) -> Rig {
    let cams = (0..n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            CameraModel::look_at(i as u32, 1000.0, 1280, 960, Vector3::new(2.0 * a.cos(), 2.0 * a.sin(), 2.0), Vector3::new(0.0, 0.0, 1.0), Vector3::z())
                .unwrap()
        })
        .collect();
    Rig::new(cams).unwrap()
}

fn detect(rig: &Rig, p: &Vector3<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<CornerDetection> {
    let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    rig.cameras()
        .iter()
        .map(|cam| {
            let mut pixel = cam.project(p).unwrap();
            if sigma > 0.0 {
                pixel += Vector2::new(normal.sample(rng), normal.sample(rng));
            }
            CornerDetection { camera_id: cam.id(), marker_id: 1, corner_index: 0, pixel, frame: 0 }
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let rig = ring(10);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let point = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.7..1.3));
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = point(&mut rng);
        let c = triangulate(&detect(&rig, &p, 0.0, &mut rng), &rig, &Default::default()).map_err(|e| e.to_string())?;
        worst = worst.max((c.position - p).norm());
    }
    let mut rms = 0.0;
    for _ in 0..1000 {
        let p = point(&mut rng);
        rms += triangulate(&detect(&rig, &p, 1.0, &mut rng), &rig, &Default::default()).map_err(|e| e.to_string())?.reprojection_rms;
    }
    rms /= 1000.0;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && (0.7..=1.3).contains(&rms) && secs < 30.0,
        format!("noiseless max {worst:.1e} m; 1 px, 10 cameras: mean RMS {rms:.3} px; {secs:.2} s"),
    )
}

fn door_corners() -> Vec<Vector3<f64>> {
    [Vector3::new(0.95, 0.05, 0.6), Vector3::new(0.8, 0.05, 1.3)]
        .iter()
        .enumerate()
        .flat_map(|(id, at)| {
            let cube = MarkerCube::new(id as u32, 0.06, RigidTransform::from_translation(*at)).unwrap();
            (0..3).flat_map(move |f| cube.host_corners(f))
        })
        .collect()
}

fn observe(joint: &JointSpec, states: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> PartObservationSet {
    let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let base = door_corners();
    let data = states
        .iter()
        .map(|&s| {
            let t = joint.transform(s);
            base.iter()
                .map(|p| {
                    let q = t.transform_point(p);
                    if sigma > 0.0 {
                        q + Vector3::from_fn(|_, _| normal.sample(rng))
                    } else {
                        q
                    }
                })
                .collect()
        })
        .collect();
    PartObservationSet::new(data).unwrap()
}

/// Distance between two pivot lines measured at `at`.
fn pivot_error(a: &JointSpec, b: &JointSpec, at: &Vector3<f64>) -> f64 {
    let foot = |j: &JointSpec| {
        let (u, p) = (j.axis().into_inner(), j.pivot().unwrap());
        p + u * u.dot(&(at - p))
    };
    (foot(a) - foot(b)).norm()
}

fn criterion_3() -> Outcome {
    let truth = JointSpec::revolute(Vector3::new(0.05, -0.1, 1.0), Vector3::new(0.5, 0.1, 0.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = RevoluteConfig::default();

    let states = [0.0, 25f64.to_radians(), 55f64.to_radians(), 80f64.to_radians()];
    let obs = observe(&truth, &states, 0.0, &mut rng);
    let fit = fit_revolute(&obs, &cfg).map_err(|e| e.to_string())?;
    let sign = fit.joint.axis().dot(truth.axis()).signum();
    let axis0 = (fit.joint.axis().into_inner() * sign).angle(truth.axis()).to_degrees();
    let pivot0 = pivot_error(&fit.joint, &truth, &obs.centroid());
    let state0 = fit.states.iter().zip(&states).map(|(s, t)| (s * sign - t).abs().to_degrees()).fold(0.0, f64::max);

    let normal = Normal::new(0.0, 0.01).unwrap();
    let (mut axis1, mut pivot1) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let states: Vec<f64> = (0..5).map(|k| (k as f64 * 20.0).to_radians() + normal.sample(&mut rng)).collect();
        let obs = observe(&truth, &states, 0.001, &mut rng);
        let fit = fit_revolute(&obs, &cfg).map_err(|e| e.to_string())?;
        let sign = fit.joint.axis().dot(truth.axis()).signum();
        axis1 = axis1.max((fit.joint.axis().into_inner() * sign).angle(truth.axis()).to_degrees());
        pivot1 = pivot1.max(pivot_error(&fit.joint, &truth, &obs.centroid()));
    }

    let slide = JointSpec::sliding(Vector3::new(0.3, 1.0, 0.2)).unwrap();
    let obs = observe(&slide, &[0.0, 0.12, 0.3, 0.05], 0.0, &mut rng);
    let slide_err = fit_sliding(&obs).map_err(|e| e.to_string())?.axis().angle(slide.axis());

    let th = ResidualThresholds::default();
    let mut round = 0.0f64;
    for _ in 0..500 {
        let base = random_transform(&mut rng);
        let s = rng.random_range(-3.0..3.0);
        let got = part_state(&base, &base.compose(&truth.transform(s)), &truth, &th).map_err(|e| e.to_string())?;
        round = round.max((got.value - s).abs());
        let s = rng.random_range(-0.5..0.5);
        let got = part_state(&base, &base.compose(&slide.transform(s)), &slide, &th).map_err(|e| e.to_string())?;
        round = round.max((got.value - s).abs());
    }
    check(
        axis0 < 0.01 && pivot0 < 1e-6 && state0 < 0.01 && axis1 < 0.5 && pivot1 < 3e-3 && slide_err < 1e-9 && round < 1e-6,
        format!(
            "noiseless axis {axis0:.1e} deg, pivot {pivot0:.1e} m, states {state0:.1e} deg; 1 mm worst of 100: axis {axis1:.3} deg, pivot {:.2} mm; sliding {slide_err:.1e} rad; part_state {round:.1e}",
            pivot1 * 1e3
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let truth = BodySkeleton::template();
    let cfg = BodyCalibrationConfig::default();
    let rom = synthetic_rom(&truth, 300, 0.0, 0.0, cfg.foot_band, 404);
    let init = perturb_offsets(&truth, &CALIBRATED_OFFSETS, 0.02, 405);
    let out = calibrate_body(&rom.frames, &init, &cfg).map_err(|e| e.to_string())?;
    let err = max_offset_error(&out.skeleton, &truth, &CALIBRATED_OFFSETS);
    let monotone = out.epoch_losses.windows(2).all(|w| w[1] <= w[0]);
    let secs = start.elapsed().as_secs_f64();
    let params = (cfg.lambda_body, cfg.lambda_foot, cfg.learning_rate, cfg.epochs);
    check(
        params == (100.0, 5000.0, 0.008, 50) && err < 0.003 && monotone && secs < 120.0,
        format!(
            "2 cm perturbation, 300 frames: max offset error {:.2} mm, loss non-increasing {monotone} ({:.2e} -> {:.2e}); {secs:.1} s",
            err * 1e3,
            out.epoch_losses[0],
            out.epoch_losses.last().unwrap()
        ),
    )
}

fn criterion_5() -> Outcome {
    let structure =
        CalibrationStructure::reference().transformed(&RigidTransform::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 0.4), Vector3::new(1.0, 0.5, 0.9)));
    let shift = RigidTransform::new(UnitQuaternion::from_euler_angles(0.03, -0.02, 0.04), Vector3::new(0.004, -0.003, 0.002));
    let init_for = |s: &HandSkeleton| s.with_markers(s.markers().iter().map(|m| m.map(|c| shift.transform_point(&c))).collect()).unwrap();
    let cfg = HandCalibrationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut scale_err = 0.0f64;
    for (k, side) in [HandSide::Right, HandSide::Left, HandSide::Right].into_iter().enumerate() {
        let base = HandSkeleton::template(side);
        let fingers: Vec<f64> = (0..5).map(|_| rng.random_range(0.85..=1.15)).collect();
        let truth = base.with_scales((0..HAND_JOINTS).map(|j| fingers[j / 4]).collect()).unwrap();
        let steps = synthetic_touches(&truth, &structure, &hand_protocol(side), 0.0, 0.0, 510 + k as u64);
        let out = calibrate_hand(&steps, &structure, &init_for(&base), &cfg).map_err(|e| e.to_string())?;
        for (f, want) in fingers.iter().enumerate() {
            scale_err = scale_err.max((out.skeleton.finger_scale(f) - want).abs());
        }
    }
    let mut residual = 0.0f64;
    for (k, side) in [HandSide::Left, HandSide::Right].into_iter().enumerate() {
        let base = HandSkeleton::template(side);
        let steps = synthetic_touches(&base, &structure, &hand_protocol(side), 0.002, 0.0005, 520 + k as u64);
        let out = calibrate_hand(&steps, &structure, &init_for(&base), &cfg).map_err(|e| e.to_string())?;
        residual = residual.max(out.tip_residual);
    }
    check(
        scale_err < 0.02 && residual < 0.012,
        format!("noiseless worst scale error {scale_err:.4}; 2 mm touch noise mean tip residual {:.2} mm", residual * 1e3),
    )
}

fn criterion_6() -> Outcome {
    let mut ratios = Vec::new();
    for seed in [601, 602, 603] {
        let carry = carry_sequence(900, 30.0, seed);
        for r in drop_and_recover(&carry, &[15, 30, 60], 8, &FillConfig::default()).map_err(|e| e.to_string())? {
            ratios.push(r.fill_translation / r.baseline_translation);
        }
    }
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);

    let wrist = wrist_streams(1800, 30.0, 0.003, 604);
    let fused = fuse_wrist(&wrist.marker, &wrist.mocap, &FusionConfig::default()).map_err(|e| e.to_string())?;
    let positions = |s: &[RigidTransform]| s.iter().map(|p| *p.translation()).collect::<Vec<_>>();
    let jf = mean_jerk(&positions(&fused.poses), 30.0).map_err(|e| e.to_string())?;
    let jm = mean_jerk(&positions(&wrist.mocap), 30.0).map_err(|e| e.to_string())?;
    let rows = wrist_drop_recover(&wrist.truth, &wrist.mocap, &wrist.marker, &[5, 15, 30, 60], 8, &FusionConfig::default()).map_err(|e| e.to_string())?;
    let joint_err = rows.iter().map(|r| r.fused_translation).fold(0.0, f64::max);
    check(
        worst_ratio < 1.0 / 3.0 && jf <= 1.2 * jm && joint_err <= 0.015,
        format!("fill/lerp worst {worst_ratio:.4} over gaps 15-60; jerk fused/mocap {:.3}; recovered wrist error worst {:.2} mm", jf / jm, joint_err * 1e3),
    )
}

fn mfk(args: &[&str], threads: Option<&str>) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfk"));
    cmd.args(args).env_remove("MFK_THREADS");
    if let Some(t) = threads {
        cmd.env("MFK_THREADS", t);
    }
    let o = cmd.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("mfk {}: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn json(p: &Path) -> Result<serde_json::Value, String> {
    serde_json::from_slice(&read(p)?).map_err(|e| e.to_string())
}

fn criterion_7(dir: &Path) -> Outcome {
    let start = Instant::now();
    let runs = [("a", None), ("b", Some("1"))];
    for (tag, threads) in runs {
        mfk(&["simulate", "cameras", "--seed", "7", "--out", path(&dir.join(format!("cameras_{tag}")))], threads)?;
        mfk(
            &["simulate", "occlusion", "--seed", "7", "--markers", "4,7,10,20,40", "--window", "300", "--out", path(&dir.join(format!("occlusion_{tag}")))],
            threads,
        )?;
    }
    let secs = start.elapsed().as_secs_f64() / runs.len() as f64;
    let mut same = true;
    for study in ["cameras", "occlusion"] {
        for file in [format!("{study}.csv"), "metrics.json".to_owned()] {
            same &= read(&dir.join(format!("{study}_a")).join(&file))? == read(&dir.join(format!("{study}_b")).join(&file))?;
        }
    }
    let cam = json(&dir.join("cameras_a/metrics.json"))?;
    let occ = json(&dir.join("occlusion_a/metrics.json"))?;
    let full = cam["results"]["full_rig_ratio"].as_f64().unwrap_or(f64::NAN);
    let cam_monotone = cam["results"]["monotone_2pct"] == true;
    let min_samples = cam["results"]["rows"].as_array().into_iter().flatten().filter_map(|r| r["samples"].as_u64()).min().unwrap_or(0);
    let ratios: Vec<f64> = occ["results"]["rows"].as_array().into_iter().flatten().filter_map(|r| r["mean"].as_f64()).collect();
    let occ_monotone = ratios.len() == 5 && ratios.windows(2).all(|w| w[1] >= w[0]);
    let scene = (&cam["config"]["scene"]["cameras"], &cam["config"]["scene"]["frames"]);
    check(
        full == 1.0 && cam_monotone && min_samples >= 20 && occ_monotone && same && secs < 300.0 && scene == (&70.into(), &7200.into()),
        format!(
            "70 cameras x 7200 frames: full-rig ratio {full}, camera curve monotone (2%) {cam_monotone}, {min_samples} samples per size; marker ratios {ratios:.3?}; reproducible {same}; {secs:.1} s per study pair"
        ),
    )
}

fn criterion_8() -> Outcome {
    let joints = feature_joint_count();
    let dim = feature_dimension(joints);
    let motion = body_motion(240, 30.0, 808);
    let stream = joint_stream(&BodySkeleton::template(), &motion);
    let cfg = FeatureConfig::with_feet(PELVIS, [LEFT_FOOT, LEFT_TOE, RIGHT_FOOT, RIGHT_TOE]);
    let feats = build_features(&stream, &cfg).map_err(|e| e.to_string())?;

    let g = RigidTransform::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 1.1), Vector3::new(2.5, -1.3, 0.0));
    let moved: Vec<Vec<_>> = stream.iter().map(|f| f.iter().map(|p| g.compose(p)).collect()).collect();
    let moved_feats = build_features(&moved, &cfg).map_err(|e| e.to_string())?;
    let equiv = feats
        .iter()
        .zip(&moved_feats)
        .flat_map(|(a, b)| a.to_vec().into_iter().zip(b.to_vec()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);

    let root0 = &stream[0][PELVIS];
    let start = Vector2::new(root0.translation().x, root0.translation().y);
    let rebuilt = mfk::representation::reconstruct_root(&feats, start, heading(root0));
    let round = rebuilt.iter().zip(&stream).take(feats.len()).map(|(r, f)| (r - f[PELVIS].translation()).norm()).fold(0.0, f64::max);

    let carry = carry_sequence(200, 30.0, 809);
    // Points scattered at 0 to 12 cm from the carried box surface.
    let mut rng = ChaCha8Rng::seed_from_u64(810);
    let points = carry
        .object
        .iter()
        .map(|pose| {
            (0..3)
                .map(|_| {
                    let s = carry.surface[rng.random_range(0..carry.surface.len())];
                    let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                    pose.transform_point(&(s + dir * rng.random_range(0.0..0.12)))
                })
                .collect()
        })
        .collect();
    let hand = PartyStream { party: Party::RightHand, points };
    let target = ContactTarget {
        object: "box".into(),
        part: 0,
        surface: SurfaceGrid::new(target_mesh(), 0.05),
        poses: carry.object.iter().copied().map(Some).collect(),
    };
    let thresholds = [0.0, 0.01, 0.02, 0.04, 0.08, 0.16];
    let sets: Vec<_> = thresholds.iter().map(|&t| compute_contacts(std::slice::from_ref(&hand), std::slice::from_ref(&target), t)).collect();
    let nested = sets.windows(2).all(|w| w[0].iter().all(|r| w[1].iter().any(|s| s.frame == r.frame && s.party == r.party && s.part == r.part)));
    let counts: Vec<usize> = sets.iter().map(Vec::len).collect();
    check(
        joints == 61 && dim == 740 && equiv < 1e-9 && round < 1e-6 && nested,
        format!("J={joints}, dimension {dim} from 1+2+1+3J+6J+3J+4; equivariance {equiv:.1e}; root round trip {round:.1e} m; contacts per threshold {counts:?} nested {nested}"),
    )
}

fn pipeline(root: &Path) -> Result<(), String> {
    let p = |n: &str| root.join(n).to_str().unwrap().to_owned();
    mfk(&["gen-synthetic", "--seed", "9", "--out", &p("session")], None)?;
    mfk(&["calibrate-body", "--session", &p("session"), "--out", &p("body")], None)?;
    mfk(&["calibrate-hand", "--session", &p("session"), "--out", &p("hand")], None)?;
    mfk(&["track-objects", "--session", &p("session"), "--out", &p("track")], None)?;
    mfk(&["fit-articulation", "--session", &p("session"), "--poses", &p("track"), "--out", &p("fit")], None)?;
    let post = [
        "postprocess",
        "--session",
        &p("session"),
        "--poses",
        &p("fit"),
        "--body-calibration",
        &p("body"),
        "--hand-calibration",
        &p("hand"),
        "--seed",
        "9",
        "--out",
        &p("post"),
    ];
    mfk(&post, None)?;
    mfk(&["export-features", "--session", &p("session"), "--post", &p("post"), "--hand-calibration", &p("hand"), "--out", &p("features")], None)?;
    mfk(&["contacts", "--session", &p("session"), "--post", &p("post"), "--hand-calibration", &p("hand"), "--out", &p("contacts")], None)
}

const STAGES: [&str; 8] = ["session", "body", "hand", "track", "fit", "post", "features", "contacts"];

fn criterion_9(dir: &Path) -> Outcome {
    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let mut differing = Vec::new();
    for stage in STAGES {
        if read(&a.join(stage).join("metrics.json"))? != read(&b.join(stage).join("metrics.json"))? {
            differing.push(stage);
        }
    }
    check(differing.is_empty(), format!("{} stages, metrics.json differing: {differing:?}", STAGES.len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: [Criterion; 9] = [
        ("rigid recovery", Box::new(criterion_1)),
        ("triangulation", Box::new(criterion_2)),
        ("articulation", Box::new(criterion_3)),
        ("body calibration", Box::new(criterion_4)),
        ("hand calibration", Box::new(criterion_5)),
        ("post-processing", Box::new(criterion_6)),
        ("simulation studies", Box::new(|| criterion_7(dir.path()))),
        ("representation", Box::new(criterion_8)),
        ("end-to-end determinism", Box::new(|| criterion_9(dir.path()))),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {}: {tag} {name}: {detail}", k + 1);
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
