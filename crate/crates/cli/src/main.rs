use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bit_core::augment::AugmentationKind;
use bit_core::env::{agent_mask, BackgroundMode, BackgroundTier, PointMassEnv};
use bit_core::gradcheck::{format_report, gradcheck, GradcheckOptions};
use bit_core::trainer::{self, TrainOptions};
use bit_core::{checkpoint, image_io, plot, saliency, Ablation, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bit",
    version,
    about = "Transition-model representation learning for pixel-based control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
    Toy,
}

#[derive(clap::Args)]
struct Overrides {
    /// Loss-term variant.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Augmentation: overlay, conv, shift or none.
    #[arg(long)]
    aug: Option<AugmentationKind>,
    /// Overlay blend weight.
    #[arg(long)]
    aug_alpha: Option<f64>,
    /// Shift padding in pixels.
    #[arg(long)]
    aug_pad: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of environment steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Stop gradients from the transition heads at the pseudo action.
    #[arg(long)]
    detach_pseudo_action: bool,
}

impl Overrides {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(a) = self.ablation {
            config.ablation = a;
        }
        if let Some(k) = self.aug {
            config.aug.kind = k;
        }
        if let Some(a) = self.aug_alpha {
            config.aug.alpha = a;
        }
        if let Some(p) = self.aug_pad {
            config.aug.pad = p;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(n) = self.steps {
            config.total_env_steps = n;
        }
        if self.detach_pseudo_action {
            config.detach_pseudo_action = true;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration preset as JSON.
    Config {
        #[arg(long, value_enum, default_value = "smoke")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one agent.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Run directory (default: runs/<ablation>_seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the first N training frames as PNGs under <out>/frames.
        #[arg(long, default_value_t = 0)]
        dump_frames: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "clean,easy,hard")]
        backgrounds: Vec<BackgroundTier>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Evaluation seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every loss-term variant over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Train the full objective and the baseline under each augmentation.
    Augstudy {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = "runs/augstudy")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Encoder input-gradient map for one rendered observation.
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "clean")]
        background: BackgroundTier,
        #[arg(long)]
        out: PathBuf,
        /// Episode seed of the rendered observation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Median and min-max band of a logged metric across runs.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the analytic gradients on a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the backward-term sign in the analytic gradient.
        #[arg(long)]
        corrupt_bwd_sign: bool,
        /// Use the exact-prediction construction.
        #[arg(long)]
        perfect_prediction: bool,
    },
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn background_for(config: &RunConfig, tier: BackgroundTier) -> BackgroundMode {
    config
        .eval_backgrounds
        .iter()
        .copied()
        .find(|b| b.tier == tier)
        .unwrap_or(BackgroundMode::new(tier, 1000))
}

fn print_rows(rows: &[trainer::StudyRow]) {
    print!("{}", trainer::format_table(rows));
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Config { preset, out } => {
            let config = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Smoke => RunConfig::smoke(),
                Preset::Toy => RunConfig::toy(),
            };
            config.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            config,
            overrides,
            out,
            dump_frames,
            quiet,
        } => {
            let config = load_config(&config, &overrides)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", config.ablation, config.seed)));
            let options = TrainOptions {
                dump_frames,
                verbose: !quiet,
            };
            let outcome = trainer::train(&config, &dir, &options)?;
            println!("run directory: {}", outcome.run_dir.display());
            println!(
                "checkpoint: {} (sha256 {})",
                outcome.final_checkpoint.display(),
                outcome.checkpoint_hash
            );
            println!("wall time: {:.1}s", outcome.seconds);
        }
        Command::Eval {
            ckpt,
            backgrounds,
            episodes,
            seeds,
            out,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let config = ck.config.clone();
            let agent = ck.into_agent()?;
            let modes: Vec<BackgroundMode> = backgrounds.iter().map(|&t| background_for(&config, t)).collect();
            let report = trainer::evaluate(&agent, &config.env, &modes, episodes, &seeds)?;
            println!("{:<8} {:>10} {:>10} {:>9}", "bg", "mean", "std", "episodes");
            for b in &report.backgrounds {
                println!(
                    "{:<8} {:>10.3} {:>10.3} {:>9}",
                    b.background.tier, b.mean, b.std, b.episodes
                );
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Ablate {
            config,
            overrides,
            seeds,
            out,
            quiet,
        } => {
            let config = load_config(&config, &overrides)?;
            let seeds = trainer::seed_list(&config, seeds);
            let options = TrainOptions {
                verbose: !quiet,
                ..TrainOptions::default()
            };
            print_rows(&trainer::run_ablation_suite(&config, &seeds, &out, &options)?);
        }
        Command::Augstudy {
            config,
            overrides,
            seeds,
            out,
            quiet,
        } => {
            let config = load_config(&config, &overrides)?;
            let seeds = trainer::seed_list(&config, seeds);
            let options = TrainOptions {
                verbose: !quiet,
                ..TrainOptions::default()
            };
            print_rows(&trainer::run_augmentation_study(&config, &seeds, &out, &options)?);
        }
        Command::Saliency {
            ckpt,
            background,
            out,
            seed,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let config = ck.config.clone();
            let agent = ck.into_agent()?;
            let mut env = PointMassEnv::new(config.env.clone())?;
            let obs = env.reset(seed, background_for(&config, background));
            let map = saliency::saliency_map(&agent, &obs)?;
            let stem = format!("saliency_{background}");
            map.save(&out, &stem)?;
            let [_, h, w] = obs.shape();
            image_io::write_planar(
                &out.join(format!("observation_{background}.png")),
                w,
                h,
                obs.frame(obs.frame_count() - 1),
            )?;
            let state = env.ground_truth_state().context("environment has no state")?;
            let (inside, outside) = map.mean_inside_outside(&agent_mask(&state, h, w))?;
            println!("wrote {}/{stem}.png and .json", out.display());
            println!("mean saliency on agent sprite {inside:.4}, elsewhere {outside:.4}");
        }
        Command::Plot { runs, metric, out } => {
            let (table, table_path) = plot::plot_curves(&runs, &metric, &out)?;
            println!(
                "{} steps of `{}` from {} runs -> {} and {}",
                table.rows.len(),
                metric,
                runs.len(),
                out.display(),
                table_path.display()
            );
        }
        Command::Gradcheck {
            seed,
            corrupt_bwd_sign,
            perfect_prediction,
        } => {
            let report = gradcheck(&GradcheckOptions {
                seed,
                corrupt_bwd_sign,
                perfect_prediction,
                ..GradcheckOptions::default()
            })?;
            print!("{}", format_report(&report));
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
