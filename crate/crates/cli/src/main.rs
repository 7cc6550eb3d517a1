//! `mfk` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use mfk::pipeline::calibrate::{calibrate_body, calibrate_hand, CalibrateBodyConfig, CalibrateHandConfig};
use mfk::pipeline::export::{contacts, export_features, ContactsConfig, ExportFeaturesConfig};
use mfk::pipeline::post::{postprocess, PostprocessConfig};
use mfk::pipeline::studies::{
    evaluate_drop_recover, gen_synthetic, simulate_cameras, simulate_occlusion, CameraStudyConfig, DropRecoverConfig, OcclusionStudyConfig,
};
use mfk::pipeline::tracking::{fit_articulation, track_objects, FitArticulationConfig, TrackObjectsConfig};
use mfk::pipeline::{parse_config, Metrics, PipelineError, METRICS_FILE};
use mfk::simulation::capture::CaptureSpec;

const THREADS_VAR: &str = "MFK_THREADS";

#[derive(Parser)]
#[command(name = "mfk", version, about = "Marker and mocap capture processing")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// JSON config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must not overlap any input.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Verb {
    /// Solve body offsets from the range-of-motion segment.
    CalibrateBody {
        #[arg(long)]
        session: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Solve finger scales and offsets from the touch protocol.
    CalibrateHand {
        #[arg(long)]
        session: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-frame object and part poses from marker cubes.
    TrackObjects {
        #[arg(long)]
        session: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit part joints from tracked poses and re-estimate part states.
    FitArticulation {
        #[arg(long)]
        session: PathBuf,
        /// poses.jsonl or the directory holding it.
        #[arg(long)]
        poses: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// World-aligned body, fused wrists and gap-filled object tracks.
    Postprocess {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        body_calibration: Option<PathBuf>,
        #[arg(long)]
        hand_calibration: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Occlusion studies on the synthetic scene.
    Simulate {
        #[command(subcommand)]
        study: Study,
    },
    /// Motion features of a postprocess output.
    ExportFeatures {
        #[arg(long)]
        session: PathBuf,
        /// Postprocess output directory.
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        hand_calibration: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Hand and body contacts with object parts.
    Contacts {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        hand_calibration: Option<PathBuf>,
        /// Contact distance (m).
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluations against synthetic ground truth.
    Evaluate {
        #[command(subcommand)]
        evaluation: Evaluation,
    },
    /// Synthetic capture session with ground truth.
    GenSynthetic {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        cameras: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rig size.
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Subcommand)]
enum Study {
    /// Tracking success of virtual surface markers.
    Occlusion {
        /// Marker counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        markers: Option<Vec<usize>>,
        #[arg(long)]
        window: Option<usize>,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Detection ratio under random camera subsets.
    Cameras {
        /// Subset sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        samples: Option<usize>,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum Evaluation {
    /// Object gap filling and wrist fusion against lerp and raw mocap.
    DropRecover {
        /// Gap lengths in frames, comma separated.
        #[arg(long, value_delimiter = ',')]
        windows: Option<Vec<usize>>,
        #[arg(long)]
        placements: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config<T: DeserializeOwned + Default + Serialize>(path: Option<&Path>) -> Result<T, PipelineError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Validation(format!("{}: {e}", p.display())))?;
            parse_config(&text)
        }
        None => Ok(T::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn configure_threads() -> Result<(), PipelineError> {
    let Ok(value) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| PipelineError::Validation(format!("{THREADS_VAR} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| PipelineError::Validation(format!("thread pool: {e}")))
}

fn run(verb: Verb) -> Result<(Metrics, PathBuf), PipelineError> {
    let done = |m: Metrics, out: &Path| (m, out.join(METRICS_FILE));
    Ok(match verb {
        Verb::CalibrateBody { session, common } => {
            let cfg: CalibrateBodyConfig = load_config(common.config.as_deref())?;
            done(calibrate_body(&session, &common.out, &cfg)?, &common.out)
        }
        Verb::CalibrateHand { session, common } => {
            let cfg: CalibrateHandConfig = load_config(common.config.as_deref())?;
            done(calibrate_hand(&session, &common.out, &cfg)?, &common.out)
        }
        Verb::TrackObjects { session, common } => {
            let cfg: TrackObjectsConfig = load_config(common.config.as_deref())?;
            done(track_objects(&session, &common.out, &cfg)?, &common.out)
        }
        Verb::FitArticulation { session, poses, common } => {
            let cfg: FitArticulationConfig = load_config(common.config.as_deref())?;
            done(fit_articulation(&session, &poses, &common.out, &cfg)?, &common.out)
        }
        Verb::Postprocess { session, poses, body_calibration, hand_calibration, seed, common } => {
            let cfg: PostprocessConfig = load_config(common.config.as_deref())?;
            let m = postprocess(&session, &poses, body_calibration.as_deref(), hand_calibration.as_deref(), &common.out, &cfg, seed)?;
            done(m, &common.out)
        }
        Verb::ExportFeatures { session, post, hand_calibration, common } => {
            let cfg: ExportFeaturesConfig = load_config(common.config.as_deref())?;
            done(export_features(&session, &post, hand_calibration.as_deref(), &common.out, &cfg)?, &common.out)
        }
        Verb::Contacts { session, post, hand_calibration, threshold, common } => {
            let mut cfg: ContactsConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.threshold, threshold);
            done(contacts(&session, &post, hand_calibration.as_deref(), &common.out, &cfg)?, &common.out)
        }
        Verb::GenSynthetic { seed, frames, cameras, common } => {
            let mut spec: CaptureSpec = load_config(common.config.as_deref())?;
            set(&mut spec.frames, frames);
            set(&mut spec.cameras, cameras);
            done(gen_synthetic(&common.out, &spec, seed)?, &common.out)
        }
        Verb::Simulate { study: Study::Occlusion { markers, window, scene, common } } => {
            let mut cfg: OcclusionStudyConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.markers, markers);
            set(&mut cfg.window, window);
            set(&mut cfg.scene.cameras, scene.cameras);
            set(&mut cfg.scene.frames, scene.frames);
            done(simulate_occlusion(&common.out, &cfg, scene.seed)?, &common.out)
        }
        Verb::Simulate { study: Study::Cameras { sizes, samples, scene, common } } => {
            let mut cfg: CameraStudyConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.sizes, sizes);
            set(&mut cfg.samples, samples);
            set(&mut cfg.scene.cameras, scene.cameras);
            set(&mut cfg.scene.frames, scene.frames);
            done(simulate_cameras(&common.out, &cfg, scene.seed)?, &common.out)
        }
        Verb::Evaluate { evaluation: Evaluation::DropRecover { windows, placements, frames, seed, common } } => {
            let mut cfg: DropRecoverConfig = load_config(common.config.as_deref())?;
            set(&mut cfg.windows, windows);
            set(&mut cfg.placements, placements);
            set(&mut cfg.frames, frames);
            done(evaluate_drop_recover(&common.out, &cfg, seed)?, &common.out)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli.verb));
    match result {
        Ok((metrics, path)) => {
            println!("{}: wrote {}", metrics.verb, path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
