//! Command line front end for the demonstration synthesis pipeline.
//!
//! Every subcommand reads the same flat config (file, then repeated
//! `--set key=value` flags, then `DEMOFORGE_OUT` / `DEMOFORGE_WORKERS`
//! environment overrides) and exits with 0 on success, 1 on configuration
//! errors, and 2 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use demoforge::pipeline::{
    ensure_generator, evaluate_from_config, generate_seed_set, generator_path, load_robot,
    load_seed_set, manifest_path, read_policy, read_scaling_csv, run_ablation,
    run_scaling_study, run_synthesis, train_policy_from_manifest, write_keys, write_policy,
    write_seed_set, write_success_plot, AblationVariant, PipelineConfig, PipelineError,
};
use demoforge::render::{write_frames_png, write_frames_raw, ViewSpan};
use demoforge::rng::{derive, tag};
use demoforge::trajectory::{expand_trajectory, write_trajectory, ExpansionOptions, PerturbationSpec};

#[derive(Parser)]
#[command(
    name = "demoforge",
    about = "Expand a handful of robot demonstrations into a large synthetic dataset",
    version
)]
struct Cli {
    /// Config file of `[section]` / `key = value` lines; defaults apply
    /// for every key the file omits.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set pipeline.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the config and print every effective key and the hash.
    ParseCheck,
    /// Script seed demonstrations into the configured seed directory.
    Seed,
    /// Expand one seed demonstration into perturbed variants on disk.
    Expand {
        /// Seed demonstration index.
        #[arg(long, default_value_t = 0)]
        demo: usize,
        /// Expansions to draw; defaults to the configured K.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Render a seed demonstration (robot-only, or the full scene).
    Render {
        /// Seed demonstration index.
        #[arg(long, default_value_t = 0)]
        demo: usize,
        /// Composite the scene instead of the robot-only layer.
        #[arg(long)]
        full: bool,
        /// Also write 8-bit PNG frames into this directory.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Train the video generator, or reuse a matching checkpoint.
    TrainGen,
    /// Expand every seed K times, generate frames, and index the dataset.
    Synthesize,
    /// Behavior-clone a policy from the synthesized dataset.
    TrainPolicy {
        /// Generated demonstrations to add on top of all seeds.
        #[arg(long, default_value_t = 0)]
        generated: usize,
        /// Checkpoint destination; defaults to `policy_<n>.ckpt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out a trained policy on freshly drawn scenes.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Train and evaluate policies across dataset sizes; write CSV + SVG.
    Scaling {
        /// Comma-separated generated-demonstration counts.
        #[arg(long)]
        sizes: Option<String>,
    },
    /// Measure one conditioning ablation variant.
    Ablate {
        /// One of: full, no_global_traj, short_window.
        #[arg(long)]
        variant: String,
    },
    /// Re-plot a scaling CSV as an SVG line chart.
    Plot {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>, PipelineError> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    PipelineError::Config(format!("--set needs KEY=VALUE, got `{s}`"))
                })
        })
        .collect()
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config `{}`: {e}", path.display()))
        })?,
        None => String::new(),
    };
    let sets = parse_sets(&cli.sets)?;
    PipelineConfig::load(&text, &sets, |k| std::env::var(k).ok())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli)?;
    if cfg.workers > 0 {
        // Ignore the error if a pool already exists (e.g. repeated calls
        // in one process); the configured size only applies to the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    match cli.command {
        Command::ParseCheck => {
            print!("{}", cfg.to_canonical());
            println!("config_hash = {}", cfg.config_hash());
        }
        Command::Seed => {
            let demos = generate_seed_set(&cfg)?;
            write_seed_set(&cfg.seeds_dir, &demos)?;
            println!(
                "wrote {} seed demonstrations to {}",
                demos.len(),
                cfg.seeds_dir.display()
            );
        }
        Command::Expand { demo, count } => {
            cfg.validate(true)?;
            let model = load_robot(&cfg)?;
            let demos = load_seed_set(&cfg.seeds_dir, &model)?;
            let sd = demos.get(demo).ok_or_else(|| {
                PipelineError::Config(format!("demo {demo} not in 0..{}", demos.len()))
            })?;
            let count = count.unwrap_or(cfg.k);
            let dir = cfg.output.join("expansions").join(format!("demo_{demo:03}"));
            std::fs::create_dir_all(&dir)?;
            for k in 1..=count {
                let spec = PerturbationSpec {
                    horizontal_bound: cfg.horizontal_bound,
                    vertical_bound: cfg.vertical_bound,
                    yaw_bound: cfg.yaw_bound,
                    rng_seed: derive(cfg.seed, &[tag::EXPANSION, demo as u64, k as u64]),
                };
                let opts = ExpansionOptions {
                    window: cfg.exp_window,
                    max_resamples: cfg.max_resamples,
                    v_max: cfg.v_max,
                };
                let expansion =
                    expand_trajectory(&sd.demo.trajectory, &sd.demo.keys, &spec, &model, &opts)?;
                std::fs::write(
                    dir.join(format!("exp_{k:02}.traj")),
                    write_trajectory(&expansion.trajectory),
                )?;
                write_keys(&dir.join(format!("exp_{k:02}.keys")), &expansion.keys)?;
                println!(
                    "expansion {k}: {} attempts, wrote {}",
                    expansion.attempts,
                    dir.join(format!("exp_{k:02}.traj")).display()
                );
            }
        }
        Command::Render { demo, full, png } => {
            cfg.validate(true)?;
            let model = load_robot(&cfg)?;
            let demos = load_seed_set(&cfg.seeds_dir, &model)?;
            let sd = demos.get(demo).ok_or_else(|| {
                PipelineError::Config(format!("demo {demo} not in 0..{}", demos.len()))
            })?;
            let seq = if full {
                demoforge::pipeline::render_full_views(&model, sd, &cfg.task, &cfg)?
            } else {
                demoforge::pipeline::render_motion_views(&model, &sd.demo.trajectory, &cfg)?
            };
            let dir = cfg.output.join("render");
            std::fs::create_dir_all(&dir)?;
            let kind = if full { "full" } else { "motion" };
            let raw = dir.join(format!("demo_{demo:03}_{kind}.fr32"));
            write_frames_raw(&raw, &seq)?;
            println!("wrote {} frames to {}", seq.frames.len(), raw.display());
            if let Some(png_dir) = png {
                let views: Vec<ViewSpan> = cfg
                    .cameras
                    .iter()
                    .map(|c| ViewSpan { name: c.to_string(), width: cfg.resolution })
                    .collect();
                write_frames_png(&png_dir, &seq, &views)?;
                println!("wrote PNG frames to {}", png_dir.display());
            }
        }
        Command::TrainGen => {
            cfg.validate(true)?;
            let model = load_robot(&cfg)?;
            let demos = load_seed_set(&cfg.seeds_dir, &model)?;
            let (trained, hash) = ensure_generator(&cfg, &model, &demos)?;
            println!("checkpoint {}", generator_path(&cfg).display());
            println!("sha256 {hash}");
            if let (Some(first), Some(last)) =
                (trained.loss_curve.first(), trained.loss_curve.last())
            {
                println!(
                    "loss {first:.6} -> {last:.6} over {} epochs",
                    trained.loss_curve.len()
                );
            }
        }
        Command::Synthesize => {
            let report = run_synthesis(&cfg)?;
            let generated = report
                .manifest
                .entries
                .iter()
                .filter(|e| e.provenance == demoforge::pipeline::Provenance::Generated)
                .count();
            println!(
                "manifest {} ({} entries: {} seed + {generated} generated)",
                manifest_path(&cfg.output).display(),
                report.manifest.entries.len(),
                report.manifest.entries.len() - generated,
            );
            println!("completed {} items, reused {}", report.completed, report.reused);
            for f in &report.failures {
                println!("skipped: {f}");
            }
        }
        Command::TrainPolicy { generated, out } => {
            let train_seed = derive(cfg.seed, &[tag::POLICY_INIT, generated as u64, 0]);
            let policy = train_policy_from_manifest(&cfg, generated, train_seed)?;
            let path = out.unwrap_or_else(|| cfg.output.join(format!("policy_{generated}.ckpt")));
            write_policy(&path, &policy)?;
            println!("wrote {}", path.display());
            if let (Some(first), Some(last)) =
                (policy.loss_curve.first(), policy.loss_curve.last())
            {
                println!("loss {first:.6} -> {last:.6} over {} epochs", policy.loss_curve.len());
            }
        }
        Command::Evaluate { policy } => {
            let model = read_policy(&policy)?;
            let report = evaluate_from_config(&cfg, &model, cfg.seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Scaling { sizes } => {
            let sizes = match sizes {
                Some(text) => text
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| {
                            PipelineError::Config(format!("bad size `{s}` in --sizes"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                None => cfg.scaling_sizes.clone(),
            };
            let rows = run_scaling_study(&cfg, &sizes)?;
            println!("generated,success_rate,mean_final_distance");
            for r in &rows {
                println!("{},{},{}", r.generated, r.success_rate, r.mean_final_distance);
            }
            println!(
                "wrote {} and {}",
                cfg.output.join("scaling.csv").display(),
                cfg.output.join("scaling.svg").display()
            );
        }
        Command::Ablate { variant } => {
            let variant: AblationVariant =
                variant.parse().map_err(PipelineError::Config)?;
            let row = run_ablation(&cfg, variant)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
        }
        Command::Plot { csv, out } => {
            let csv = csv.unwrap_or_else(|| cfg.output.join("scaling.csv"));
            let out = out.unwrap_or_else(|| cfg.output.join("scaling.svg"));
            let rows = read_scaling_csv(&csv)?;
            let points: Vec<(f64, f64)> =
                rows.iter().map(|r| (r.generated as f64, r.success_rate)).collect();
            write_success_plot(&out, "Policy success vs generated demonstrations", &points)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
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
