//! Synthetic imitation-learning tasks with scripted experts, demonstration
//! generation, occlusion augmentation and rollout evaluation.

pub mod data;
mod env;

pub use data::{load_dataset, save_dataset, DemoDataset, Trajectory, DATASET_MAGIC};
pub use env::{Task, ToyEnv};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_rng_indexed};
use crate::tensor::Tensor;

/// Per-coordinate random masking of observation vectors.
#[derive(Debug, Clone, Copy)]
pub struct OcclusionConfig {
    pub rate: f64,
}

impl OcclusionConfig {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("occlusion rate {rate} outside [0, 1]")));
        }
        Ok(OcclusionConfig { rate })
    }
}

/// Zero each coordinate independently with probability `rate`, drawing fresh
/// masks from `rng` per call. rate = 0 is the identity.
pub fn apply_occlusion(obs: &Tensor, cfg: OcclusionConfig, rng: &mut ChaCha8Rng) -> Tensor {
    if cfg.rate == 0.0 {
        return obs.clone();
    }
    let data = obs
        .data()
        .iter()
        .map(|&v| if rng.gen::<f64>() < cfg.rate { 0.0 } else { v })
        .collect();
    Tensor::new(obs.shape().to_vec(), data).unwrap()
}

fn expert_action(task: &Task, env: &ToyEnv, goal_choice: usize) -> Vec<f64> {
    match task {
        Task::MultimodalReach => {
            let goals = env::REACH_GOALS;
            let g = goals[goal_choice];
            let pos = env.position();
            let dx = g[0] - pos[0];
            let dy = g[1] - pos[1];
            let norm = (dx * dx + dy * dy).sqrt();
            let cap = env::REACH_STEP_MAX;
            if norm <= cap {
                vec![dx, dy]
            } else {
                vec![dx / norm * cap, dy / norm * cap]
            }
        }
        Task::DelayedCue { k_needed } => {
            if env.steps_taken() < *k_needed {
                vec![0.0]
            } else {
                let p = env.position()[0];
                let target = env.cue_target();
                vec![(target - p).clamp(-env::CUE_STEP_MAX, env::CUE_STEP_MAX)]
            }
        }
    }
}

fn generate(task: Task, n: usize, seed: u32) -> Result<DemoDataset> {
    let mut trajectories = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derive_rng_indexed(seed as u64, 0xDE40, i as u64);
        let mut env = ToyEnv::new(task);
        let mut obs = env.reset(&mut rng);
        let goal_choice = if matches!(task, Task::MultimodalReach) {
            rng.gen_range(0..2usize)
        } else {
            0
        };
        let mut observations = Vec::new();
        let mut actions = Vec::new();
        for _ in 0..env.horizon() {
            let act = expert_action(&task, &env, goal_choice);
            observations.push(obs.clone());
            actions.push(act.clone());
            obs = env.step(&act)?;
            if env.success() {
                break;
            }
        }
        if !env.success() {
            return Err(Error::Data(format!(
                "expert failed to reach success on trajectory {i} of task {}",
                task.name()
            )));
        }
        trajectories.push(Trajectory::from_steps(observations, actions, None, true)?);
    }
    Ok(DemoDataset {
        task: task.name().to_string(),
        seed,
        obs_dim: task.obs_dim(),
        act_dim: task.act_dim(),
        cond_dim: 0,
        trajectories,
    })
}

/// 2-D point mass with two goals; each demo picks a goal uniformly and the
/// scripted expert walks there with a bounded step.
pub fn gen_multimodal_reach(n: usize, seed: u32) -> Result<DemoDataset> {
    if n < 2 {
        return Err(Error::Config("multimodal-reach needs n >= 2".into()));
    }
    generate(Task::MultimodalReach, n, seed)
}

/// Cue-then-act task: the cue coordinate selects the target, is visible for
/// the first `k_needed` observations and zeroed afterwards; the position is
/// gated to zero while the cue shows, so acting on the cue requires history.
pub fn gen_delayed_cue(n: usize, k_needed: usize, seed: u32) -> Result<DemoDataset> {
    if k_needed < 2 {
        return Err(Error::Config("delayed-cue needs k_needed >= 2".into()));
    }
    generate(Task::DelayedCue { k_needed }, n, seed)
}

pub fn generate_dataset(task: Task, n: usize, seed: u32) -> Result<DemoDataset> {
    match task {
        Task::MultimodalReach => gen_multimodal_reach(n, seed),
        Task::DelayedCue { k_needed } => gen_delayed_cue(n, k_needed, seed),
    }
}

/// Uniform subsample of ceil(fraction * n) trajectories without replacement,
/// preserving the original order (fraction = 1 is the identity).
pub fn subsample_dataset(ds: &DemoDataset, fraction: f64, seed: u64) -> Result<DemoDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = ds.trajectories.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    if keep == 0 {
        return Err(Error::Data("subsample produced an empty dataset".into()));
    }
    let mut rng = derive_rng(seed, 0x50B5);
    let mut indices: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first `keep` entries are the sample.
    for i in 0..keep {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..keep].to_vec();
    chosen.sort_unstable();
    Ok(DemoDataset {
        task: ds.task.clone(),
        seed: ds.seed,
        obs_dim: ds.obs_dim,
        act_dim: ds.act_dim,
        cond_dim: ds.cond_dim,
        trajectories: chosen.iter().map(|&i| ds.trajectories[i].clone()).collect(),
    })
}

/// Anything that maps a K-step observation window to a J-step action chunk.
/// The rollout harness supplies a per-episode rng stream for stochastic
/// policies.
pub trait Policy {
    fn history(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn act(&self, window: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

/// Scripted reach expert usable as a rollout policy: walks to the nearest
/// goal. Succeeds from any start, with no hidden mode choice.
pub struct ReachExpertPolicy;

impl Policy for ReachExpertPolicy {
    fn history(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        Task::MultimodalReach.obs_dim()
    }

    fn act_dim(&self) -> usize {
        Task::MultimodalReach.act_dim()
    }

    fn act(&self, window: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let last = window.row(window.shape()[0] - 1);
        let (px, py) = (last[0], last[1]);
        let goals = env::REACH_GOALS;
        let d0 = (goals[0][0] - px).hypot(goals[0][1] - py);
        let d1 = (goals[1][0] - px).hypot(goals[1][1] - py);
        let g = if d0 <= d1 { goals[0] } else { goals[1] };
        let (dx, dy) = (g[0] - px, g[1] - py);
        let norm = dx.hypot(dy);
        let cap = env::REACH_STEP_MAX;
        let (ax, ay) = if norm <= cap { (dx, dy) } else { (dx / norm * cap, dy / norm * cap) };
        Tensor::new(vec![1, 2], vec![ax, ay])
    }
}

/// Uniform random actions in [-bound, bound]; the no-skill baseline.
pub struct RandomPolicy {
    pub history: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub bound: f64,
}

impl Policy for RandomPolicy {
    fn history(&self) -> usize {
        self.history
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn act(&self, _window: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n = self.horizon * self.act_dim;
        let data = (0..n).map(|_| rng.gen_range(-self.bound..self.bound)).collect();
        Tensor::new(vec![self.horizon, self.act_dim], data)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    /// Actions executed from each predicted chunk before re-planning.
    pub exec_steps: usize,
    /// Evaluation-time occlusion applied to observations before the policy
    /// sees them (0 disables).
    pub occlusion_rate: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions { exec_steps: 1, occlusion_rate: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct RolloutReport {
    pub success_rate: f64,
    pub episodes: Vec<EpisodeOutcome>,
}

/// Seeded receding-horizon evaluation: per episode the env is reset from an
/// episode-indexed stream, the policy sees the last K observations (zero
/// padded at the start) and the first `exec_steps` actions of each predicted
/// chunk are executed.
pub fn rollout_evaluate(
    policy: &dyn Policy,
    task: Task,
    episodes: usize,
    seed: u64,
    opts: RolloutOptions,
) -> Result<RolloutReport> {
    if episodes == 0 {
        return Err(Error::Config("rollout_evaluate needs episodes >= 1".into()));
    }
    if policy.obs_dim() != task.obs_dim() || policy.act_dim() != task.act_dim() {
        return Err(Error::Contract(format!(
            "policy dims (obs {}, act {}) do not match env dims (obs {}, act {})",
            policy.obs_dim(),
            policy.act_dim(),
            task.obs_dim(),
            task.act_dim()
        )));
    }
    let occ = OcclusionConfig::new(opts.occlusion_rate)?;
    let k = policy.history();
    let obs_dim = task.obs_dim();
    let mut outcomes = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut env_rng = derive_rng_indexed(seed, 0xE9, ep as u64);
        let mut policy_rng = derive_rng_indexed(seed, 0xB0, ep as u64);
        let mut occ_rng = derive_rng_indexed(seed, 0x0CC, ep as u64);
        let mut env = ToyEnv::new(task);
        let mut window: Vec<Vec<f64>> = vec![vec![0.0; obs_dim]; k];
        let mut obs = env.reset(&mut env_rng);
        let mut steps = 0;
        'episode: while steps < env.horizon() {
            let seen = apply_occlusion(
                &Tensor::new(vec![1, obs_dim], obs.clone())?,
                occ,
                &mut occ_rng,
            );
            window.remove(0);
            window.push(seen.data().to_vec());
            let win =
                Tensor::new(vec![k, obs_dim], window.iter().flatten().copied().collect())?;
            let chunk = policy.act(&win, &mut policy_rng)?;
            if chunk.rank() != 2 || chunk.shape()[1] != task.act_dim() {
                return Err(Error::Shape(format!(
                    "policy produced chunk {:?}, expected [J, {}]",
                    chunk.shape(),
                    task.act_dim()
                )));
            }
            let exec = opts.exec_steps.min(chunk.shape()[0]).max(1);
            for j in 0..exec {
                obs = env.step(&chunk.row(j))?;
                steps += 1;
                if env.success() || steps >= env.horizon() {
                    break 'episode;
                }
                if j + 1 < exec {
                    let seen = apply_occlusion(
                        &Tensor::new(vec![1, obs_dim], obs.clone())?,
                        occ,
                        &mut occ_rng,
                    );
                    window.remove(0);
                    window.push(seen.data().to_vec());
                }
            }
        }
        outcomes.push(EpisodeOutcome { success: env.success(), steps });
    }
    let successes = outcomes.iter().filter(|o| o.success).count();
    Ok(RolloutReport {
        success_rate: successes as f64 / episodes as f64,
        episodes: outcomes,
    })
}
