//! Self-describing binary container for demonstration datasets.
//!
//! Layout: magic "MAILDS1", then a header of the task name (u32 length +
//! UTF-8 bytes) and five little-endian u32s (n, obs_dim, act_dim, cond_dim,
//! seed), then per-trajectory records: steps u32, success u32, observation
//! payload, action payload and optional conditioning payload, all
//! little-endian f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toy::env::Task;

pub const DATASET_MAGIC: &[u8; 7] = b"MAILDS1";

/// One demonstration: per-step observation and action rows plus an optional
/// fixed conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Tensor,
    pub actions: Tensor,
    pub conditioning: Option<Tensor>,
    pub success: bool,
}

impl Trajectory {
    pub fn from_steps(
        observations: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        conditioning: Option<Tensor>,
        success: bool,
    ) -> Result<Self> {
        if observations.len() != actions.len() {
            return Err(Error::Data(format!(
                "trajectory with {} observations but {} actions",
                observations.len(),
                actions.len()
            )));
        }
        Ok(Trajectory {
            observations: Tensor::from_rows(&observations)?,
            actions: Tensor::from_rows(&actions)?,
            conditioning,
            success,
        })
    }

    pub fn steps(&self) -> usize {
        self.observations.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub task: String,
    pub seed: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub cond_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl DemoDataset {
    /// Reconstruct the task enum. For delayed-cue the cue length is read
    /// back from the recorded observations (steps with a visible cue).
    pub fn task_enum(&self) -> Result<Task> {
        let k_needed = if self.task == "delayed-cue" {
            let traj = self
                .trajectories
                .first()
                .ok_or_else(|| Error::Data("empty dataset".into()))?;
            (0..traj.steps()).take_while(|&s| traj.observations.at2(s, 1) != 0.0).count()
        } else {
            0
        };
        Task::from_name(&self.task, k_needed.max(2))
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps()).sum()
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn dataset_to_bytes(ds: &DemoDataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, ds.task.len() as u32);
    buf.extend_from_slice(ds.task.as_bytes());
    put_u32(&mut buf, ds.trajectories.len() as u32);
    put_u32(&mut buf, ds.obs_dim as u32);
    put_u32(&mut buf, ds.act_dim as u32);
    put_u32(&mut buf, ds.cond_dim as u32);
    put_u32(&mut buf, ds.seed);
    for traj in &ds.trajectories {
        let steps = traj.steps();
        if traj.observations.shape() != [steps, ds.obs_dim]
            || traj.actions.shape() != [steps, ds.act_dim]
        {
            return Err(Error::Data("trajectory dims do not match dataset header".into()));
        }
        put_u32(&mut buf, steps as u32);
        put_u32(&mut buf, traj.success as u32);
        put_f64s(&mut buf, traj.observations.data());
        put_f64s(&mut buf, traj.actions.data());
        match (&traj.conditioning, ds.cond_dim) {
            (Some(c), d) if c.numel() == d => put_f64s(&mut buf, c.data()),
            (None, 0) => {}
            _ => return Err(Error::Data("conditioning vector does not match cond_dim".into())),
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("dataset file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<DemoDataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(7)? != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic; expected MAILDS1".into()));
    }
    let name_len = r.u32()? as usize;
    let task = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("task name is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let obs_dim = r.u32()? as usize;
    let act_dim = r.u32()? as usize;
    let cond_dim = r.u32()? as usize;
    let seed = r.u32()?;
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let steps = r.u32()? as usize;
        let success = r.u32()? != 0;
        let obs = Tensor::new(vec![steps, obs_dim], r.f64s(steps * obs_dim)?)?;
        let act = Tensor::new(vec![steps, act_dim], r.f64s(steps * act_dim)?)?;
        let cond = if cond_dim > 0 {
            Some(Tensor::new(vec![cond_dim], r.f64s(cond_dim)?)?)
        } else {
            None
        };
        trajectories.push(Trajectory { observations: obs, actions: act, conditioning: cond, success });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after dataset payload".into()));
    }
    Ok(DemoDataset { task, seed, obs_dim, act_dim, cond_dim, trajectories })
}

/// Atomic write (temp file then rename).
pub fn save_dataset(ds: &DemoDataset, path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(ds)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DemoDataset> {
    dataset_from_bytes(&fs::read(path)?)
}
