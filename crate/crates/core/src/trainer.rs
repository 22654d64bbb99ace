//! Training loop, evaluation and the multi-run experiment protocols.
//!
//! Each environment step is followed (after warmup) by one iteration:
//! `omega` RL updates, then one representation update and one target
//! momentum update. Baseline runs skip the last two.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, RlReport};
use crate::augment::AugmentationKind;
use crate::bit_learner::BitLossReport;
use crate::checkpoint;
use crate::config::{Ablation, RunConfig};
use crate::env::{BackgroundMode, EnvConfig, PointMassEnv, ACTION_DIM};
use crate::error::{BitError, Result};
use crate::image_io;
use crate::observation::Observation;
use crate::replay::{ReplayBuffer, Transition};
use crate::seeding::{mix, stream};

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainRecord {
    Rl {
        iter: u64,
        env_step: usize,
        ablation: Ablation,
        #[serde(flatten)]
        report: RlReport,
    },
    Bit {
        iter: u64,
        env_step: usize,
        ablation: Ablation,
        #[serde(flatten)]
        report: BitLossReport,
    },
    Ema {
        iter: u64,
        env_step: usize,
        ablation: Ablation,
    },
    Episode {
        env_step: usize,
        ablation: Ablation,
        episode: u64,
        #[serde(rename = "return")]
        episode_return: f64,
    },
}

/// Episode-return statistics on one background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundStats {
    pub background: BackgroundMode,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub returns: Vec<f64>,
}

impl BackgroundStats {
    fn from_returns(background: BackgroundMode, seeds: Vec<u64>, returns: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&returns);
        BackgroundStats {
            background,
            mean,
            std,
            episodes: returns.len(),
            seeds,
            returns,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backgrounds: Vec<BackgroundStats>,
}

impl EvalReport {
    pub fn get(&self, tier: crate::env::BackgroundTier) -> Option<&BackgroundStats> {
        self.backgrounds.iter().find(|b| b.background.tier == tier)
    }

    /// Pools several reports background by background.
    pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| BitError::Argument("nothing to merge".into()))?;
        let mut backgrounds = Vec::new();
        for (i, b) in first.backgrounds.iter().enumerate() {
            let mut seeds = Vec::new();
            let mut returns = Vec::new();
            for r in reports {
                let other = r
                    .backgrounds
                    .get(i)
                    .filter(|o| o.background == b.background)
                    .ok_or_else(|| BitError::Argument("reports cover different backgrounds".into()))?;
                seeds.extend(&other.seeds);
                returns.extend(&other.returns);
            }
            backgrounds.push(BackgroundStats::from_returns(b.background, seeds, returns));
        }
        Ok(EvalReport { backgrounds })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs deterministic-action episodes for every background and seed.
/// Episode `k` of seed `s` starts from `mix(s, k)`. Never touches the agent's
/// parameters.
pub fn evaluate(
    agent: &Agent<f32>,
    env: &EnvConfig,
    backgrounds: &[BackgroundMode],
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if env.obs_shape() != agent.extractor().obs_shape() {
        return Err(BitError::Config(format!(
            "environment renders {:?} but the agent expects {:?}",
            env.obs_shape(),
            agent.extractor().obs_shape()
        )));
    }
    let mut sim = PointMassEnv::new(env.clone())?;
    let mut out = Vec::with_capacity(backgrounds.len());
    for &bg in backgrounds {
        let mut returns = Vec::with_capacity(episodes * seeds.len());
        for &seed in seeds {
            for k in 0..episodes {
                let mut obs = sim.reset(mix(seed, k as u64), bg);
                let mut total = 0.0;
                loop {
                    let a = agent.action_with_noise(&obs, None)?;
                    let step = sim.step(a)?;
                    total += step.reward;
                    obs = step.observation;
                    if step.done {
                        break;
                    }
                }
                returns.push(total);
            }
        }
        out.push(BackgroundStats::from_returns(bg, seeds.to_vec(), returns));
    }
    Ok(EvalReport { backgrounds: out })
}

/// Evaluation seeds used during training.
pub fn eval_seeds(config: &RunConfig) -> Vec<u64> {
    vec![mix(config.seed, 0xE7A1)]
}

/// One line of `eval_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub env_step: usize,
    pub ablation: Ablation,
    pub report: EvalReport,
    /// `eval_return_<background>` and `eval_std_<background>`.
    #[serde(flatten)]
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

impl EvalRecord {
    fn new(env_step: usize, ablation: Ablation, report: EvalReport) -> Self {
        let mut metrics = serde_json::Map::new();
        for b in &report.backgrounds {
            metrics.insert(format!("eval_return_{}", b.background.tier), b.mean.into());
            metrics.insert(format!("eval_std_{}", b.background.tier), b.std.into());
        }
        EvalRecord {
            env_step,
            ablation,
            report,
            metrics,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Write the first N training observations' newest frames as PNGs.
    pub dump_frames: usize,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub final_eval: Option<EvalReport>,
    pub seconds: f64,
}

struct Logger {
    out: BufWriter<File>,
}

impl Logger {
    fn create(path: &Path) -> Result<Self> {
        Ok(Logger {
            out: BufWriter::new(File::create(path)?),
        })
    }

    fn write<R: Serialize>(&mut self, record: &R) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{step}.bin"))
}

/// Trains one agent into `run_dir` (created if missing).
pub fn train(config: &RunConfig, run_dir: &Path, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(run_dir)?;
    config.save(&run_dir.join("config.json"))?;
    let mut train_log = Logger::create(&run_dir.join("train_log.jsonl"))?;
    let mut eval_log = Logger::create(&run_dir.join("eval_log.jsonl"))?;
    let frames_dir = run_dir.join("frames");
    if options.dump_frames > 0 {
        fs::create_dir_all(&frames_dir)?;
    }

    let ablation = config.ablation;
    let mut env = PointMassEnv::new(config.env.clone())?;
    let capacity = config
        .replay_capacity
        .min(config.total_env_steps.max(config.batch_size));
    let mut replay = ReplayBuffer::new(capacity, config.env.obs_shape(), mix(config.seed, 0x5A3))?;
    let mut agent = Agent::<f32>::new(config)?;
    let mut explore = stream(config.seed, "explore");
    let episode_root = mix(config.seed, 0xE915);

    let mut episode = 0u64;
    let mut obs = env.reset(mix(episode_root, episode), config.train_background);
    let mut episode_return = 0.0;
    let mut iter = 0u64;
    let mut final_eval = None;

    for step in 0..config.total_env_steps {
        let env_step = step + 1;
        if step < options.dump_frames {
            let [_, h, w] = obs.shape();
            let newest = obs.frame(obs.frame_count() - 1);
            image_io::write_planar(&frames_dir.join(format!("frame_{step:05}.png")), w, h, newest)?;
        }
        let action: [f32; ACTION_DIM] = if step < config.initial_collect {
            [explore.random_range(-1.0..=1.0), explore.random_range(-1.0..=1.0)]
        } else {
            agent.select_action(&obs, false)?
        };
        let outcome = env.step(action)?;
        episode_return += outcome.reward;
        replay.push(&Transition {
            obs: obs.clone(),
            action,
            reward: outcome.reward as f32,
            next_obs: outcome.observation.clone(),
            done: outcome.done && config.timeout_is_terminal,
        })?;
        if outcome.done {
            train_log.write(&TrainRecord::Episode {
                env_step,
                ablation,
                episode,
                episode_return,
            })?;
            episode += 1;
            episode_return = 0.0;
            obs = env.reset(mix(episode_root, episode), config.train_background);
        } else {
            obs = outcome.observation;
        }

        if env_step >= config.initial_collect {
            iter += 1;
            let result = run_iteration(config, &mut agent, &mut replay, &mut train_log, iter, env_step);
            if let Err(e) = result {
                train_log.flush()?;
                let dump = run_dir.join(format!("diverged_{env_step}.bin"));
                checkpoint::save(&dump, &agent, env_step)?;
                return Err(BitError::Divergence(format!(
                    "{e}; state written to {}",
                    dump.display()
                )));
            }
        }

        if config.eval_every > 0 && env_step % config.eval_every == 0 {
            let report = evaluate(
                &agent,
                &config.env,
                &config.eval_backgrounds,
                config.eval_episodes,
                &eval_seeds(config),
            )?;
            if options.verbose {
                let summary: Vec<String> = report
                    .backgrounds
                    .iter()
                    .map(|b| format!("{} {:.1}", b.background.tier, b.mean))
                    .collect();
                eprintln!(
                    "[{} seed {}] step {env_step}: {} ({:.0}s)",
                    ablation,
                    config.seed,
                    summary.join(", "),
                    started.elapsed().as_secs_f64()
                );
            }
            eval_log.write(&EvalRecord::new(env_step, ablation, report.clone()))?;
            eval_log.flush()?;
            final_eval = (env_step == config.total_env_steps).then_some(report);
        }
        if config.checkpoint_every > 0 && env_step % config.checkpoint_every == 0 && env_step != config.total_env_steps
        {
            checkpoint::save(&checkpoint_path(run_dir, env_step), &agent, env_step)?;
        }
    }
    train_log.flush()?;

    let final_checkpoint = checkpoint_path(run_dir, config.total_env_steps);
    checkpoint::save(&final_checkpoint, &agent, config.total_env_steps)?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        checkpoint_hash: checkpoint::file_hash(&final_checkpoint)?,
        final_checkpoint,
        final_eval,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn run_iteration(
    config: &RunConfig,
    agent: &mut Agent<f32>,
    replay: &mut ReplayBuffer,
    log: &mut Logger,
    iter: u64,
    env_step: usize,
) -> Result<()> {
    let ablation = config.ablation;
    for _ in 0..config.omega {
        let batch = replay.sample(config.batch_size)?;
        let report = agent.rl_update(&batch)?;
        log.write(&TrainRecord::Rl {
            iter,
            env_step,
            ablation,
            report,
        })?;
    }
    if ablation.uses_bit() {
        let batch = replay.sample(config.batch_size)?;
        let report = agent.bit_update(&batch)?;
        log.write(&TrainRecord::Bit {
            iter,
            env_step,
            ablation,
            report,
        })?;
        agent.ema_update()?;
        log.write(&TrainRecord::Ema {
            iter,
            env_step,
            ablation,
        })?;
    }
    Ok(())
}

/// Reads back a `train_log.jsonl`.
pub fn read_train_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(BitError::from))
        .collect()
}

/// Checks the per-iteration update order `[rl x omega, bit, ema]` (or
/// `[rl x omega]` for baseline runs) and returns `(rl, bit, ema)` counts.
pub fn verify_update_order(records: &[TrainRecord], omega: usize, uses_bit: bool) -> Result<(usize, usize, usize)> {
    let updates: Vec<&TrainRecord> = records
        .iter()
        .filter(|r| !matches!(r, TrainRecord::Episode { .. }))
        .collect();
    let per_iter = omega + if uses_bit { 2 } else { 0 };
    if !updates.len().is_multiple_of(per_iter) {
        return Err(BitError::Internal(format!(
            "{} update records is not a whole number of {per_iter}-record iterations",
            updates.len()
        )));
    }
    let (mut rl, mut bit, mut ema) = (0, 0, 0);
    for (k, chunk) in updates.chunks(per_iter).enumerate() {
        let expected_iter = k as u64 + 1;
        for (j, r) in chunk.iter().enumerate() {
            let (ok, it) = match r {
                TrainRecord::Rl { iter, .. } => {
                    rl += 1;
                    (j < omega, *iter)
                }
                TrainRecord::Bit { iter, .. } => {
                    bit += 1;
                    (uses_bit && j == omega, *iter)
                }
                TrainRecord::Ema { iter, .. } => {
                    ema += 1;
                    (uses_bit && j == omega + 1, *iter)
                }
                TrainRecord::Episode { .. } => unreachable!(),
            };
            if !ok || it != expected_iter {
                return Err(BitError::Internal(format!(
                    "iteration {expected_iter}: record {j} out of order ({r:?})"
                )));
            }
        }
    }
    Ok((rl, bit, ema))
}

/// One row of a multi-run comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub ablation: Ablation,
    pub aug: AugmentationKind,
    pub seeds: Vec<u64>,
    pub run_dirs: Vec<PathBuf>,
    /// Per-seed final evaluations.
    pub per_seed: Vec<EvalReport>,
    /// All seeds pooled.
    pub pooled: EvalReport,
}

impl StudyRow {
    /// Median across seeds of the per-seed mean return on `tier`.
    pub fn median_return(&self, tier: crate::env::BackgroundTier) -> f64 {
        let means: Vec<f64> = self
            .per_seed
            .iter()
            .filter_map(|r| r.get(tier).map(|b| b.mean))
            .collect();
        median(&means)
    }
}

/// Trains `config` once per seed under `out/<label>/seed_<s>` and evaluates
/// the final checkpoints on the configured backgrounds.
pub fn run_seeds(
    config: &RunConfig,
    label: &str,
    seeds: &[u64],
    out: &Path,
    options: &TrainOptions,
) -> Result<StudyRow> {
    let mut per_seed = Vec::new();
    let mut run_dirs = Vec::new();
    for &seed in seeds {
        let mut c = config.clone();
        c.seed = seed;
        let dir = out.join(label).join(format!("seed_{seed}"));
        let outcome = train(&c, &dir, options)?;
        let agent = checkpoint::load(&outcome.final_checkpoint)?.into_agent()?;
        let report = evaluate(&agent, &c.env, &c.eval_backgrounds, c.eval_episodes, &eval_seeds(&c))?;
        per_seed.push(report);
        run_dirs.push(dir);
    }
    Ok(StudyRow {
        label: label.to_string(),
        ablation: config.ablation,
        aug: config.aug.kind,
        seeds: seeds.to_vec(),
        run_dirs,
        pooled: EvalReport::merge(&per_seed)?,
        per_seed,
    })
}

/// Seeds `base.seed, base.seed + 1, ...`.
pub fn seed_list(base: &RunConfig, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base.seed + k).collect()
}

/// Every ablation variant with shared seeds.
pub fn run_ablation_suite(
    base: &RunConfig,
    seeds: &[u64],
    out: &Path,
    options: &TrainOptions,
) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut c = base.clone();
        c.ablation = ablation;
        rows.push(run_seeds(&c, ablation.name(), seeds, out, options)?);
    }
    write_study(out, "ablation", &rows)?;
    Ok(rows)
}

/// Full objective and baseline under overlay, convolution and no augmentation.
pub fn run_augmentation_study(
    base: &RunConfig,
    seeds: &[u64],
    out: &Path,
    options: &TrainOptions,
) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::new();
    for ablation in [Ablation::Full, Ablation::Baseline] {
        for kind in [
            AugmentationKind::Overlay,
            AugmentationKind::RandomConv,
            AugmentationKind::None,
        ] {
            let mut c = base.clone();
            c.ablation = ablation;
            c.aug.kind = kind;
            let label = format!("{}_{}", ablation.name(), kind.name());
            rows.push(run_seeds(&c, &label, seeds, out, options)?);
        }
    }
    write_study(out, "augmentation", &rows)?;
    Ok(rows)
}

/// Plain-text comparison table: one row per run group, `mean ± std` per
/// background over all pooled episodes.
pub fn format_table(rows: &[StudyRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut header = format!("{:<22}", "variant");
    for b in &first.pooled.backgrounds {
        header.push_str(&format!(" {:>20}", b.background.tier.name()));
    }
    let mut out = header + "\n";
    for row in rows {
        out.push_str(&format!("{:<22}", row.label));
        for b in &row.pooled.backgrounds {
            out.push_str(&format!(" {:>20}", format!("{:.2} ± {:.2}", b.mean, b.std)));
        }
        out.push('\n');
    }
    out
}

fn write_study(out: &Path, name: &str, rows: &[StudyRow]) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{name}_table.txt")), format_table(rows))?;
    fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

/// Mean cosine similarity between online features of each observation and
/// of its augmented view.
pub fn augmentation_cosine(agent: &Agent<f32>, observations: &[Observation], seed: u64) -> Result<f64> {
    let batch = Observation::stack(observations)?;
    let augmented = agent.augmenter().apply_batch(&batch, seed)?;
    let a = agent.encode(&batch)?;
    let b = agent.encode(&augmented)?;
    let d = a.dim(1);
    let mut total = 0.0;
    for (x, y) in a.data().chunks(d).zip(b.data().chunks(d)) {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum();
        let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|q| (*q as f64).powi(2)).sum::<f64>().sqrt();
        total += dot / (nx * ny).max(1e-12);
    }
    Ok(total / observations.len() as f64)
}

/// Observations from uniformly random rollouts, for held-out probes.
pub fn random_observations(
    env: &EnvConfig,
    background: BackgroundMode,
    count: usize,
    seed: u64,
) -> Result<Vec<Observation>> {
    let mut sim = PointMassEnv::new(env.clone())?;
    let mut rng = stream(seed, "probe");
    let mut out = Vec::with_capacity(count);
    let mut episode = 0u64;
    sim.reset(mix(seed, episode), background);
    while out.len() < count {
        let step = sim.step([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])?;
        out.push(step.observation);
        if step.done {
            episode += 1;
            sim.reset(mix(seed, episode), background);
        }
    }
    Ok(out)
}
