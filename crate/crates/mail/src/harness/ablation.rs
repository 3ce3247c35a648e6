//! Evaluation-time occlusion sweeps, dataset-size sweeps, and export of the
//! pre-head latent representations (with an optional built-in 2-D PCA).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::arch::PolicyNet;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;
use crate::toy::{subsample_dataset, DemoDataset};

use super::train::{evaluate_with_occlusion, train_on, TrainConfig};

/// Success rate per occlusion rate, evaluated with observations masked at
/// evaluation time. Row order follows the requested rates.
pub fn run_occlusion_ablation(
    cfg: &TrainConfig,
    net: &PolicyNet,
    rates: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if rates.is_empty() {
        return Err(Error::Config("occlusion ablation needs at least one rate".into()));
    }
    rates
        .iter()
        .map(|&rate| Ok((rate, evaluate_with_occlusion(cfg, net, episodes, seed, rate)?)))
        .collect()
}

/// Train one model per dataset fraction (subsampled with a shared seed) and
/// evaluate each identically. Rows come back sorted by fraction ascending.
pub fn run_datasize_ablation(
    cfg: &TrainConfig,
    ds: &DemoDataset,
    fractions: &[f64],
    episodes: usize,
    eval_seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if fractions.is_empty() {
        return Err(Error::Config("datasize ablation needs at least one fraction".into()));
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset = subsample_dataset(ds, fraction, cfg.seed)?;
        let run = train_on(cfg, &subset)?;
        let success = evaluate_with_occlusion(&run.cfg, &run.net, episodes, eval_seed, 0.0)?;
        rows.push((fraction, success));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(rows)
}

/// Plot-ready two-column table, one `x,y` row per line after a header.
pub fn write_rate_table(path: &Path, x_name: &str, rows: &[(f64, f64)]) -> Result<()> {
    let mut text = format!("{x_name},success\n");
    for (x, y) in rows {
        text.push_str(&format!("{x},{y}\n"));
    }
    atomic_write(path, text.as_bytes())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LatentSummary {
    pub rows: usize,
    pub dim: usize,
    pub pca: Option<PcaSummary>,
}

#[derive(Debug, Clone)]
pub struct PcaSummary {
    pub path: PathBuf,
    pub explained: f64,
}

/// Run frozen forward passes over every trajectory step and write the
/// pre-head representation of the first action slot as comma-separated rows
/// (one row per step). With `pca_seed` set, a 2-D PCA projection of the
/// rows goes to `<out>.pca.csv`.
pub fn export_latents(
    cfg: &TrainConfig,
    net: &PolicyNet,
    ds: &DemoDataset,
    out: &Path,
    pca_seed: Option<u64>,
) -> Result<LatentSummary> {
    if ds.obs_dim != cfg.obs_dim || ds.act_dim != cfg.act_dim {
        return Err(Error::Contract(format!(
            "dataset dims (obs {}, act {}) do not match checkpoint dims (obs {}, act {})",
            ds.obs_dim, ds.act_dim, cfg.obs_dim, cfg.act_dim
        )));
    }
    let k = cfg.history;
    let query = Tensor::zeros(&[cfg.horizon, cfg.act_dim]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(ds.total_steps());
    for traj in &ds.trajectories {
        let steps = traj.steps();
        for e in 0..steps {
            let mut window = Vec::with_capacity(k * ds.obs_dim);
            for i in 0..k {
                let idx = e as isize - (k as isize - 1) + i as isize;
                if idx < 0 {
                    window.extend(std::iter::repeat(0.0).take(ds.obs_dim));
                } else {
                    window.extend_from_slice(&traj.observations.row(idx as usize));
                }
            }
            let win = Tensor::new(vec![k, ds.obs_dim], window)?;
            let (_, latent) =
                net.eval_forward_with_latent(&win, &query, 1, traj.conditioning.as_ref())?;
            rows.push(latent.row(0));
        }
    }
    let dim = cfg.model_dim;
    let mut text = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    atomic_write(out, text.as_bytes())?;

    let pca = if let Some(seed) = pca_seed {
        let (proj, explained) = pca_project_2d(&rows, seed)?;
        let mut text = String::new();
        for p in &proj {
            text.push_str(&format!("{},{}\n", p[0], p[1]));
        }
        let path = out.with_extension("pca.csv");
        atomic_write(&path, text.as_bytes())?;
        Some(PcaSummary { path, explained })
    } else {
        None
    };
    Ok(LatentSummary { rows: rows.len(), dim, pca })
}

/// Top-2 principal components by seeded power iteration with deflation.
/// Returns the projected rows and the fraction of variance explained.
pub fn pca_project_2d(rows: &[Vec<f64>], seed: u64) -> Result<(Vec<[f64; 2]>, f64)> {
    if rows.is_empty() {
        return Err(Error::Data("pca on an empty row set".into()));
    }
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    // Covariance (population).
    let mut cov = vec![0.0; dim * dim];
    for row in &centered {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += row[i] * row[j] / n;
            }
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut work = cov.clone();
    let mut rng = derive_rng(seed, 0x9CA);
    for _ in 0..2 {
        let (v, lambda) = power_iteration(&work, dim, &mut rng);
        // Deflate: work -= lambda * v v^T.
        for i in 0..dim {
            for j in 0..dim {
                work[i * dim + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    let proj = centered
        .iter()
        .map(|row| {
            let p0: f64 = row.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
            let p1: f64 = row.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
            [p0, p1]
        })
        .collect();
    let explained = if trace > 0.0 { (eigenvalues[0] + eigenvalues[1]) / trace } else { 0.0 };
    Ok((proj, explained))
}

fn power_iteration(
    matrix: &[f64],
    dim: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<f64>, f64) {
    use rand::Rng;
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                next[i] += matrix[i * dim + j] * v[j];
            }
        }
        lambda = next.iter().zip(&v).map(|(a, b)| a * b).sum();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break; // zero direction: matrix is (numerically) rank-deficient
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        v = next;
    }
    (v, lambda.max(0.0))
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
