//! Command-line front end: scene generation, two-stage training,
//! evaluation, and plot emission.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskplan::pipeline::{
    self, cmd_eval, cmd_plot, cmd_rft, cmd_sft, write_scenes, EvalOptions, PipelineError,
    RftOptions, RunConfig, SftOptions,
};
use maskplan::sim::Difficulty;

#[derive(Parser)]
#[command(name = "maskplan", about = "Masked-diffusion trajectory planner laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run-config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key: --set key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides: Result<Vec<(String, String)>, PipelineError> = self
            .set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| {
                        PipelineError::Config(format!("--set expects key=value, got `{kv}`"))
                    })
            })
            .collect();
        cfg.apply_overrides(&overrides?)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scene-set file (line-delimited JSON).
    GenScenes {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        difficulty: Difficulty,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Supervised fine-tuning on expert trajectories.
    Sft {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Reinforcement fine-tuning from an SFT checkpoint.
    Rft {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step metrics log (CSV).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a scene set.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        /// Sampling steps s.
        #[arg(long)]
        steps: Option<usize>,
        /// Apply the single refinement pass after sampling.
        #[arg(long, default_value = "on", value_parser = parse_on_off, action = clap::ArgAction::Set)]
        refine: bool,
        #[arg(long, default_value_t = 1)]
        samples_per_scene: usize,
        /// Output directory for report.json / report.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write wall-clock latency to latency.csv.
        #[arg(long)]
        measure_latency: bool,
    },
    /// Render SVG charts from metric logs and eval reports.
    Plot {
        /// Input files: SFT/RFT CSV logs, eval report JSONs, latency CSVs.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on|off, got `{other}`")),
    }
}

fn run() -> Result<(), PipelineError> {
    match Cli::parse().command {
        Cmd::GenScenes { config, count, difficulty, out, force } => {
            let cfg = config.resolve()?;
            let scenes = write_scenes(
                &out,
                count,
                difficulty,
                cfg.seed,
                cfg.horizon_s(),
                cfg.dt,
                &cfg.sim(),
                force,
            )?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Cmd::Sft { config, scenes, out, resume, log, max_epochs } => {
            let cfg = config.resolve()?;
            let outcome = cmd_sft(
                &cfg,
                &SftOptions {
                    scenes_path: &scenes,
                    out_ckpt: &out,
                    resume: resume.as_deref(),
                    log_path: log.as_deref(),
                    max_epochs_this_call: max_epochs,
                },
            )?;
            let last = outcome.rows.last();
            println!(
                "sft: {} epochs done, last gen loss {:.4}, checkpoint {}",
                outcome.epochs_done,
                last.map_or(f64::NAN, |r| r.gen_loss),
                out.display()
            );
        }
        Cmd::Rft { config, ckpt, scenes, out, metrics } => {
            let cfg = config.resolve()?;
            let outcome = cmd_rft(
                &cfg,
                &RftOptions {
                    sft_ckpt: &ckpt,
                    scenes_path: &scenes,
                    out_ckpt: &out,
                    metrics_path: metrics.as_deref(),
                },
            )?;
            println!(
                "rft: {} steps, best mean reward {:.4}, final {}, best {}",
                outcome.steps_done,
                outcome.best_mean_reward,
                out.display(),
                outcome.best_ckpt.display()
            );
        }
        Cmd::Eval { config, ckpt, scenes, steps, refine, samples_per_scene, out_dir, measure_latency } => {
            let cfg = config.resolve()?;
            let dir = out_dir.unwrap_or_else(pipeline::default_out_dir);
            std::fs::create_dir_all(&dir).map_err(|e| PipelineError::Io {
                path: dir.clone(),
                source: e,
            })?;
            let report_path = dir.join("report.json");
            let csv_path = dir.join("report.csv");
            let latency_path = dir.join("latency.csv");
            let (report, latency) = cmd_eval(
                &cfg,
                &EvalOptions {
                    ckpt: &ckpt,
                    scenes_path: &scenes,
                    steps: steps.unwrap_or(cfg.steps),
                    refine,
                    samples_per_scene,
                    out_report: Some(&report_path),
                    out_csv: Some(&csv_path),
                    out_latency: measure_latency.then_some(latency_path.as_path()),
                },
            )?;
            println!(
                "eval: {} scenes, mean score {:.4} (best-of-{} {:.4}){}",
                report.num_scenes,
                report.mean_pdms,
                report.samples_per_scene,
                report.mean_best_of_k,
                latency.map_or(String::new(), |l| format!(", median latency {:.3}s", l.median_s))
            );
        }
        Cmd::Plot { inputs, out_dir } => {
            let dir = out_dir.unwrap_or_else(pipeline::default_out_dir);
            let written = cmd_plot(&inputs, &dir)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
