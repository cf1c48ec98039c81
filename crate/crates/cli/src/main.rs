//! Command line front end: simulate scenes, track, fit, evaluate, ablate and
//! export. Every command reads a JSON `PipelineConfig` (or the defaults) and
//! writes its results atomically under `--out`.
//!
//! Exit codes: 0 success, 2 invalid input, 3 pipeline failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contactcap::pipeline::{
    ablate_cameras, ablate_collision, evaluate, export_obj, fit, simulate, track, write_atomic, CameraAblationRow,
    PipelineConfig, PipelineOutput, Scene, Tracking,
};
use contactcap::meshfit::FitResult;
use contactcap::metrics::MetricsReport;
use contactcap::simulate::make_scenario_with;
use contactcap::{Error, Result};

#[derive(Parser)]
#[command(name = "contactcap", version, about = "Multi-view capture of two interacting subjects")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario, a camera rig and corrupted detections: scene.json.
    Simulate,
    /// Track both subjects through a scene: tracking.json.
    Track {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Fit bodies to tracked keypoints: fit.json.
    Fit {
        #[arg(long)]
        tracking: PathBuf,
    },
    /// Score a tracking and fit against the scene's ground truth: report.json, metrics.csv.
    Evaluate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        tracking: PathBuf,
        #[arg(long)]
        fit: PathBuf,
    },
    /// Camera-count or collision-loss ablation.
    Ablate {
        #[command(subcommand)]
        study: Study,
    },
    /// Posed capsule bodies as OBJ files with a JSON sidecar per frame.
    ExportObj {
        #[arg(long)]
        fit: PathBuf,
        /// Export only this frame.
        #[arg(long)]
        frame: Option<usize>,
    },
}

#[derive(Subcommand)]
enum Study {
    /// Tracking error per camera count on the configured scenario: cameras.csv.
    Cameras {
        #[arg(long, value_delimiter = ',', default_values_t = [6, 10, 16, 20])]
        counts: Vec<usize>,
    },
    /// Fits with and without the collision term: collision.csv, collision.json.
    Collision {
        #[arg(long)]
        scene: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn read_scene(path: &Path) -> Result<Scene> {
    let scene: Scene = read_json(path)?;
    scene.validate()?;
    Ok(scene)
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    let path = out.join(name);
    write_atomic(&path, contents.as_bytes())?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    match cli.command {
        Command::Simulate => {
            let sim = simulate(&config)?;
            write(out, "scene.json", &sim.scene.to_json()?)
        }
        Command::Track { scene } => {
            let tracking = track(&read_scene(&scene)?, &config)?;
            write(out, "tracking.json", &serde_json::to_string(&tracking)?)
        }
        Command::Fit { tracking } => {
            let tracking: Tracking = read_json(&tracking)?;
            let result = fit(&tracking, &config)?;
            write(out, "fit.json", &serde_json::to_string(&result)?)
        }
        Command::Evaluate { scene, tracking, fit } => {
            let scene = read_scene(&scene)?;
            let output = PipelineOutput { tracking: read_json(&tracking)?, fit: read_json(&fit)? };
            let report = evaluate(&output, &scene, &config)?;
            write(out, "report.json", &report.to_json()?)?;
            write(out, "metrics.csv", &format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()))
        }
        Command::Ablate { study: Study::Cameras { counts } } => {
            let scenario = make_scenario_with(
                config.scenario.kind,
                config.scenario.duration,
                config.scenario.fps,
                config.seed,
                &config.template(),
                config.contact_eps,
            )?;
            let rows = ablate_cameras(&scenario, &counts, &config)?;
            let mut csv = format!("{}\n", CameraAblationRow::CSV_HEADER);
            for r in &rows {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            write(out, "cameras.csv", &csv)
        }
        Command::Ablate { study: Study::Collision { scene } } => {
            let ablation = ablate_collision(&read_scene(&scene)?, &config)?;
            write(out, "collision.csv", &ablation.csv())?;
            write(out, "collision.json", &serde_json::to_string(&ablation.rows)?)
        }
        Command::ExportObj { fit, frame } => {
            let result: FitResult = read_json(&fit)?;
            let frames = result.params.first().map_or(0, Vec::len);
            if result.params.iter().any(|p| p.len() != frames) {
                return Err(Error::InvalidInput("subjects have different frame counts".into()));
            }
            let selected: Vec<usize> = match frame {
                Some(f) if f >= frames => {
                    return Err(Error::InvalidInput(format!("frame {f} out of range (0..{frames})")));
                }
                Some(f) => vec![f],
                None => (0..frames).collect(),
            };
            let template = config.template();
            for t in selected {
                let subjects: Vec<_> = result.params.iter().map(|p| p[t]).collect();
                write(out, &format!("frame_{t:05}.obj"), &export_obj(&template, &subjects)?)?;
                let contacts: Vec<_> = result.contacts.iter().map(|c| c.get(t).cloned().unwrap_or_default()).collect();
                let sidecar = serde_json::json!({ "frame": t, "params": subjects, "contacts": contacts });
                write(out, &format!("frame_{t:05}.json"), &serde_json::to_string(&sidecar)?)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
