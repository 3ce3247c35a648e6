//! Training configuration (flat key=value text), sample windowing, and the
//! seeded training loop.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{PolicyNet, PolicyNetConfig, SequenceLayout, Variant};
use crate::error::{Error, Result};
use crate::policy::{
    bc_training_loss, ddpm_training_loss, NoiseRule, NoiseSchedule, Sample, SamplerOptions,
};
use crate::rng::{derive_rng, derive_rng_indexed, derive_seed};
use crate::tensor::Tensor;
use crate::toy::{apply_occlusion, DemoDataset, OcclusionConfig, Policy};

use super::optim::Adam;

const TAG_TRAIN: u64 = 0x7121;
const TAG_SHUFFLE: u64 = 0x51f1;
const TAG_OCCLUDE: u64 = 0x0cc1;
const TAG_EVAL: u64 = 0xe7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Bc,
    Ddp,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Bc => "bc",
            PolicyKind::Ddp => "ddp",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bc" => Ok(PolicyKind::Bc),
            "ddp" => Ok(PolicyKind::Ddp),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }
}

/// Everything needed to reproduce a run. Serialized into checkpoints and
/// metrics headers as flat `key = value` UTF-8 text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub policy: PolicyKind,
    pub variant: Variant,
    pub task: String,
    pub dataset: String,
    pub history: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model_dim: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub depth: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub noise_rule: NoiseRule,
    pub occlusion_rate: f64,
    pub exec_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub cond_dim: usize,
    pub k_needed: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            policy: PolicyKind::Ddp,
            variant: Variant::DMa,
            task: String::new(),
            dataset: String::new(),
            history: 5,
            horizon: 4,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            model_dim: 64,
            state_dim: 8,
            conv_width: 4,
            depth: 6,
            encoder_depth: 4,
            decoder_depth: 4,
            heads: 4,
            diffusion_steps: 16,
            beta_start: 1e-4,
            beta_end: 0.1,
            noise_rule: NoiseRule::Standard,
            occlusion_rate: 0.0,
            exec_steps: 1,
            eval_every: 0,
            eval_episodes: 20,
            obs_dim: 0,
            act_dim: 0,
            cond_dim: 0,
            k_needed: 3,
        }
    }
}

impl TrainConfig {
    /// Parse flat `key = value` text; unknown keys are rejected, missing
    /// keys keep their defaults. Lines starting with '#' are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Config(format!("line {}: {e}", lineno + 1));
            macro_rules! num {
                () => {
                    value.parse().map_err(|e| bad(format!("{key}: {e}")))?
                };
            }
            match key {
                "policy" => cfg.policy = value.parse()?,
                "variant" => cfg.variant = value.parse()?,
                "task" => cfg.task = value.to_string(),
                "dataset" => cfg.dataset = value.to_string(),
                "history" => cfg.history = num!(),
                "horizon" => cfg.horizon = num!(),
                "epochs" => cfg.epochs = num!(),
                "batch_size" => cfg.batch_size = num!(),
                "learning_rate" => cfg.learning_rate = num!(),
                "seed" => cfg.seed = num!(),
                "model_dim" => cfg.model_dim = num!(),
                "state_dim" => cfg.state_dim = num!(),
                "conv_width" => cfg.conv_width = num!(),
                "depth" => cfg.depth = num!(),
                "encoder_depth" => cfg.encoder_depth = num!(),
                "decoder_depth" => cfg.decoder_depth = num!(),
                "heads" => cfg.heads = num!(),
                "diffusion_steps" => cfg.diffusion_steps = num!(),
                "beta_start" => cfg.beta_start = num!(),
                "beta_end" => cfg.beta_end = num!(),
                "noise_rule" => cfg.noise_rule = value.parse()?,
                "occlusion_rate" => cfg.occlusion_rate = num!(),
                "exec_steps" => cfg.exec_steps = num!(),
                "eval_every" => cfg.eval_every = num!(),
                "eval_episodes" => cfg.eval_episodes = num!(),
                "obs_dim" => cfg.obs_dim = num!(),
                "act_dim" => cfg.act_dim = num!(),
                "cond_dim" => cfg.cond_dim = num!(),
                "k_needed" => cfg.k_needed = num!(),
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        Ok(cfg)
    }

    /// Canonical text form (fixed key order); `parse` round-trips it.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "policy = {}", self.policy.as_str());
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "history = {}", self.history);
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "model_dim = {}", self.model_dim);
        let _ = writeln!(s, "state_dim = {}", self.state_dim);
        let _ = writeln!(s, "conv_width = {}", self.conv_width);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "encoder_depth = {}", self.encoder_depth);
        let _ = writeln!(s, "decoder_depth = {}", self.decoder_depth);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "diffusion_steps = {}", self.diffusion_steps);
        let _ = writeln!(s, "beta_start = {}", self.beta_start);
        let _ = writeln!(s, "beta_end = {}", self.beta_end);
        let _ = writeln!(s, "noise_rule = {}", self.noise_rule.as_str());
        let _ = writeln!(s, "occlusion_rate = {}", self.occlusion_rate);
        let _ = writeln!(s, "exec_steps = {}", self.exec_steps);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "obs_dim = {}", self.obs_dim);
        let _ = writeln!(s, "act_dim = {}", self.act_dim);
        let _ = writeln!(s, "cond_dim = {}", self.cond_dim);
        let _ = writeln!(s, "k_needed = {}", self.k_needed);
        s
    }

    /// Fill dataset-derived fields (dims, task, cue length) from the data.
    pub fn resolved(&self, ds: &DemoDataset) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        cfg.obs_dim = ds.obs_dim;
        cfg.act_dim = ds.act_dim;
        cfg.cond_dim = ds.cond_dim;
        cfg.task = ds.task.clone();
        if let crate::toy::Task::DelayedCue { k_needed } = ds.task_enum()? {
            cfg.k_needed = k_needed;
        }
        Ok(cfg)
    }

    pub fn net_config(&self) -> Result<PolicyNetConfig> {
        if self.obs_dim == 0 || self.act_dim == 0 {
            return Err(Error::Config(
                "obs_dim/act_dim unset; resolve the config against a dataset first".into(),
            ));
        }
        Ok(PolicyNetConfig {
            variant: self.variant,
            model_dim: self.model_dim,
            depth: self.depth,
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            state_dim: self.state_dim,
            conv_width: self.conv_width,
            heads: self.heads,
            layout: SequenceLayout::new(self.history, self.horizon)?,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            cond_dim: self.cond_dim,
            diffusion_steps: self.diffusion_steps,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn task_enum(&self) -> Result<crate::toy::Task> {
        crate::toy::Task::from_name(&self.task, self.k_needed)
    }
}

/// One line per epoch, serialized as JSON. `wall_clock_s` is measured and
/// therefore excluded from reproducibility comparisons.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub eval_success: Option<f64>,
    pub wall_clock_s: f64,
    pub params: usize,
}

impl MetricsRecord {
    /// Copy with the measured wall clock zeroed, for determinism checks.
    pub fn deterministic_view(&self) -> MetricsRecord {
        MetricsRecord { wall_clock_s: 0.0, ..self.clone() }
    }
}

pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn metrics_from_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("bad metrics line: {e}")))
        })
        .collect()
}

/// Expand trajectories into (window, chunk) training pairs: the K-step
/// observation window is zero-padded before the episode start; only full
/// J-step action chunks are used.
pub fn build_samples(ds: &DemoDataset, history: usize, horizon: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for traj in &ds.trajectories {
        let steps = traj.steps();
        if steps < horizon {
            continue;
        }
        for e in 0..=steps - horizon {
            let mut window = Vec::with_capacity(history * ds.obs_dim);
            for k in 0..history {
                let idx = e as isize - (history as isize - 1) + k as isize;
                if idx < 0 {
                    window.extend(std::iter::repeat(0.0).take(ds.obs_dim));
                } else {
                    window.extend_from_slice(&traj.observations.row(idx as usize));
                }
            }
            let mut chunk = Vec::with_capacity(horizon * ds.act_dim);
            for j in 0..horizon {
                chunk.extend_from_slice(&traj.actions.row(e + j));
            }
            samples.push(Sample {
                obs: Tensor::new(vec![history, ds.obs_dim], window)?,
                action: Tensor::new(vec![horizon, ds.act_dim], chunk)?,
                cond: traj.conditioning.clone(),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(
            "dataset produced no training windows (trajectories shorter than the horizon?)".into(),
        ));
    }
    Ok(samples)
}

/// Result of a training run: the trained network, the per-epoch metrics and
/// the final state of the training rng stream.
pub struct TrainRun {
    pub cfg: TrainConfig,
    pub net: PolicyNet,
    pub metrics: Vec<MetricsRecord>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

/// Build a rollout policy for a trained network under its config.
pub fn make_policy<'a>(cfg: &TrainConfig, net: &'a PolicyNet) -> Result<Box<dyn Policy + 'a>> {
    match cfg.policy {
        PolicyKind::Bc => Ok(Box::new(crate::policy::BcPolicy { net, cond: None })),
        PolicyKind::Ddp => Ok(Box::new(crate::policy::DdpPolicy {
            net,
            sched: cfg.schedule()?,
            opts: SamplerOptions { rule: cfg.noise_rule },
            cond: None,
        })),
    }
}

/// Seeded success-rate evaluation of a trained network on its task.
pub fn evaluate(cfg: &TrainConfig, net: &PolicyNet, episodes: usize, seed: u64) -> Result<f64> {
    evaluate_with_occlusion(cfg, net, episodes, seed, 0.0)
}

pub fn evaluate_with_occlusion(
    cfg: &TrainConfig,
    net: &PolicyNet,
    episodes: usize,
    seed: u64,
    occlusion_rate: f64,
) -> Result<f64> {
    let policy = make_policy(cfg, net)?;
    let report = crate::toy::rollout_evaluate(
        policy.as_ref(),
        cfg.task_enum()?,
        episodes,
        seed,
        crate::toy::RolloutOptions { exec_steps: cfg.exec_steps, occlusion_rate },
    )?;
    Ok(report.success_rate)
}

/// Train a policy on an in-memory dataset. Fully deterministic given
/// (config, dataset): shuffling, noise draws and occlusion masks all come
/// from seed-derived streams.
pub fn train_on(cfg: &TrainConfig, ds: &DemoDataset) -> Result<TrainRun> {
    let cfg = cfg.resolved(ds)?;
    let net_cfg = cfg.net_config()?;
    let samples = build_samples(ds, cfg.history, cfg.horizon)?;
    let mut net = PolicyNet::new(net_cfg, cfg.seed)?;
    let mut adam = Adam::new(net.store());
    let sched = cfg.schedule()?;
    let occlusion = OcclusionConfig::new(cfg.occlusion_rate)?;
    let mut train_rng: ChaCha8Rng = derive_rng(cfg.seed, TAG_TRAIN);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();
    let param_count = net.count_parameters();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = derive_rng_indexed(cfg.seed, TAG_SHUFFLE, epoch as u64);
        fisher_yates(&mut order, &mut shuffle_rng);
        let mut occ_rng = derive_rng_indexed(cfg.seed, TAG_OCCLUDE, epoch as u64);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    if cfg.occlusion_rate > 0.0 {
                        Sample {
                            obs: apply_occlusion(&s.obs, occlusion, &mut occ_rng),
                            action: s.action.clone(),
                            cond: s.cond.clone(),
                        }
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let (loss, grads) = match cfg.policy {
                PolicyKind::Bc => bc_training_loss(&net, &batch)?,
                PolicyKind::Ddp => ddpm_training_loss(&net, &batch, &sched, &mut train_rng)?,
            };
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            adam.step(net.store_mut(), &grads, cfg.learning_rate)?;
            epoch_loss += loss;
            batches += 1;
        }

        let eval_success = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate(
                &cfg,
                &net,
                cfg.eval_episodes,
                derive_seed(cfg.seed, TAG_EVAL, epoch as u64),
            )?)
        } else {
            None
        };
        metrics.push(MetricsRecord {
            epoch,
            loss: epoch_loss / batches.max(1) as f64,
            eval_success,
            wall_clock_s: started.elapsed().as_secs_f64(),
            params: param_count,
        });
    }

    Ok(TrainRun {
        cfg,
        net,
        metrics,
        rng_seed: train_rng.get_seed(),
        rng_word_pos: train_rng.get_word_pos(),
    })
}

fn fisher_yates(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
