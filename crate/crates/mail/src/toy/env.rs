//! Deterministic toy environments; all randomness lives in reset.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const REACH_GOALS: [[f64; 2]; 2] = [[-1.0, 1.0], [1.0, 1.0]];
pub const REACH_STEP_MAX: f64 = 0.2;
pub const REACH_SUCCESS_RADIUS: f64 = 0.1;
pub const REACH_HORIZON: usize = 40;
const REACH_START_RANGE: f64 = 0.25;

pub const CUE_STEP_MAX: f64 = 0.25;
pub const CUE_SUCCESS_RADIUS: f64 = 0.1;
pub const CUE_HORIZON: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// 2-D point mass, two goals at (+-1, 1); success within 0.1 of either.
    MultimodalReach,
    /// 1-D position with a cue coordinate that selects the target and
    /// vanishes after `k_needed` steps; movement is gated until then.
    DelayedCue { k_needed: usize },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::MultimodalReach => "multimodal-reach",
            Task::DelayedCue { .. } => "delayed-cue",
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Task::MultimodalReach => 6, // position + both goal coordinates
            Task::DelayedCue { .. } => 2, // position + cue
        }
    }

    pub fn act_dim(&self) -> usize {
        match self {
            Task::MultimodalReach => 2,
            Task::DelayedCue { .. } => 1,
        }
    }

    /// Reconstruct the task (with its parameter) from a dataset header.
    pub fn from_name(name: &str, k_needed: usize) -> Result<Task> {
        match name {
            "multimodal-reach" => Ok(Task::MultimodalReach),
            "delayed-cue" => Ok(Task::DelayedCue { k_needed }),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Default cue length 3; the CLI overrides via --k-needed.
        Task::from_name(s, 3)
    }
}

#[derive(Debug, Clone)]
enum State {
    Reach { pos: [f64; 2] },
    Cue { pos: f64, target: f64 },
}

/// A toy environment instance. Transitions are deterministic given
/// (state, action); only reset draws randomness.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    task: Task,
    state: State,
    steps: usize,
}

impl ToyEnv {
    pub fn new(task: Task) -> Self {
        let state = match task {
            Task::MultimodalReach => State::Reach { pos: [0.0, 0.0] },
            Task::DelayedCue { .. } => State::Cue { pos: 0.0, target: 1.0 },
        };
        ToyEnv { task, state, steps: 0 }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.task.act_dim()
    }

    pub fn horizon(&self) -> usize {
        match self.task {
            Task::MultimodalReach => REACH_HORIZON,
            Task::DelayedCue { .. } => CUE_HORIZON,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub(crate) fn position(&self) -> [f64; 2] {
        match &self.state {
            State::Reach { pos } => *pos,
            State::Cue { pos, .. } => [*pos, 0.0],
        }
    }

    pub(crate) fn cue_target(&self) -> f64 {
        match &self.state {
            State::Cue { target, .. } => *target,
            State::Reach { .. } => 0.0,
        }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.steps = 0;
        self.state = match self.task {
            Task::MultimodalReach => State::Reach {
                pos: [
                    rng.gen_range(-REACH_START_RANGE..REACH_START_RANGE),
                    rng.gen_range(-REACH_START_RANGE..REACH_START_RANGE),
                ],
            },
            Task::DelayedCue { .. } => State::Cue {
                pos: 0.0,
                target: if rng.gen::<bool>() { 1.0 } else { -1.0 },
            },
        };
        self.observe()
    }

    /// Re-initialize from a recorded first observation (both tasks expose
    /// their full initial state there), enabling trajectory replay.
    pub fn reset_from_obs(&mut self, first_obs: &[f64]) -> Result<Vec<f64>> {
        if first_obs.len() != self.obs_dim() {
            return Err(Error::Shape(format!(
                "reset_from_obs: {} values for task {}",
                first_obs.len(),
                self.task.name()
            )));
        }
        self.steps = 0;
        self.state = match self.task {
            Task::MultimodalReach => State::Reach { pos: [first_obs[0], first_obs[1]] },
            Task::DelayedCue { .. } => {
                let cue = first_obs[1];
                if cue != 1.0 && cue != -1.0 {
                    return Err(Error::Data(format!(
                        "delayed-cue first observation must carry the cue, got {cue}"
                    )));
                }
                State::Cue { pos: first_obs[0], target: cue }
            }
        };
        Ok(self.observe())
    }

    pub fn observe(&self) -> Vec<f64> {
        match (&self.state, self.task) {
            (State::Reach { pos }, _) => vec![
                pos[0],
                pos[1],
                REACH_GOALS[0][0],
                REACH_GOALS[0][1],
                REACH_GOALS[1][0],
                REACH_GOALS[1][1],
            ],
            (State::Cue { pos, target }, Task::DelayedCue { k_needed }) => {
                let cue = if self.steps < k_needed { *target } else { 0.0 };
                vec![*pos, cue]
            }
            _ => unreachable!("state/task mismatch"),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != self.act_dim() {
            return Err(Error::Shape(format!(
                "action has {} coordinates, task {} expects {}",
                action.len(),
                self.task.name(),
                self.act_dim()
            )));
        }
        match (&mut self.state, self.task) {
            (State::Reach { pos }, _) => {
                let norm = action[0].hypot(action[1]);
                let scale = if norm > REACH_STEP_MAX { REACH_STEP_MAX / norm } else { 1.0 };
                pos[0] += action[0] * scale;
                pos[1] += action[1] * scale;
            }
            (State::Cue { pos, .. }, Task::DelayedCue { k_needed }) => {
                // Movement gate: actions are ignored while the cue shows, so
                // no policy can leak the cue into its position early.
                if self.steps >= k_needed {
                    *pos += action[0].clamp(-CUE_STEP_MAX, CUE_STEP_MAX);
                }
            }
            _ => unreachable!("state/task mismatch"),
        }
        self.steps += 1;
        Ok(self.observe())
    }

    pub fn success(&self) -> bool {
        match &self.state {
            State::Reach { pos } => REACH_GOALS.iter().any(|g| {
                (g[0] - pos[0]).hypot(g[1] - pos[1]) <= REACH_SUCCESS_RADIUS
            }),
            State::Cue { pos, target } => (pos - target).abs() <= CUE_SUCCESS_RADIUS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn reach_env_steps_are_bounded_and_deterministic() {
        let mut env = ToyEnv::new(Task::MultimodalReach);
        let mut rng = derive_rng(1, 1);
        let obs = env.reset(&mut rng);
        assert_eq!(obs.len(), 6);
        let before = env.position();
        env.step(&[10.0, 0.0]).unwrap();
        let after = env.position();
        assert!((after[0] - before[0] - REACH_STEP_MAX).abs() < 1e-12);

        // Same action sequence from the same state gives the same result.
        let mut a = ToyEnv::new(Task::MultimodalReach);
        let mut b = ToyEnv::new(Task::MultimodalReach);
        let mut r1 = derive_rng(2, 2);
        let mut r2 = derive_rng(2, 2);
        a.reset(&mut r1);
        b.reset(&mut r2);
        for _ in 0..5 {
            let oa = a.step(&[0.1, -0.05]).unwrap();
            let ob = b.step(&[0.1, -0.05]).unwrap();
            assert_eq!(oa, ob);
        }
    }

    #[test]
    fn cue_env_gates_movement_and_requires_correct_target() {
        let k = 3;
        let mut env = ToyEnv::new(Task::DelayedCue { k_needed: k });
        let mut rng = derive_rng(3, 3);
        let obs = env.reset(&mut rng);
        let target = obs[1];
        assert!(target == 1.0 || target == -1.0);
        // Actions during the cue phase are ignored.
        for _ in 0..k {
            env.step(&[0.25]).unwrap();
        }
        assert_eq!(env.position()[0], 0.0);
        // Moving to the wrong target is not success.
        for _ in 0..4 {
            env.step(&[-target * 0.25]).unwrap();
        }
        assert!(!env.success());
        // Reaching the cued target is.
        let mut env2 = ToyEnv::new(Task::DelayedCue { k_needed: k });
        env2.reset_from_obs(&[0.0, target]).unwrap();
        for _ in 0..k {
            env2.step(&[0.0]).unwrap();
        }
        for _ in 0..4 {
            env2.step(&[target * 0.25]).unwrap();
        }
        assert!(env2.success());
    }
}
