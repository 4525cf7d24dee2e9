//! Evaluation reports, the entity-shuffle study and CSV export.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::Result;
use crate::model::Model;
use crate::objectives::{task_losses, EntropyMap};
use crate::scalar::Scalar;
use crate::taskgen::{shuffle_entities, task_rng, ClusterTask};
use crate::trainer::evaluate_tasks;

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
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

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_task: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub param_count: usize,
    pub wall_s: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,loss\n");
        for (i, l) in self.per_task.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }
}

pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    tasks: &[ClusterTask],
    batch_size: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let refs: Vec<&ClusterTask> = tasks.iter().collect();
    let per_task = evaluate_tasks(model, &refs, batch_size)?;
    let (mean, std) = mean_std(&per_task);
    Ok(EvalReport {
        per_task,
        mean,
        std,
        param_count: model.param_count(),
        wall_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShuffleRow {
    pub task: usize,
    pub mean_loss: f64,
    pub std: f64,
    pub rel_std: f64,
}

/// Loss of every task under `shuffles` random entity orders. Shuffle `s` of
/// task `i` is drawn from stream `i` of `seed`, so results do not depend on
/// thread scheduling.
pub fn shuffle_study<F: Scalar>(
    model: &Model<F>,
    tasks: &[ClusterTask],
    shuffles: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<ShuffleRow>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = task_rng(seed, i as u64);
            let copies: Vec<ClusterTask> = (0..shuffles)
                .map(|_| shuffle_entities(task, &mut rng))
                .collect();
            let refs: Vec<&ClusterTask> = copies.iter().collect();
            let losses = task_losses(model, &refs, batch_size)?;
            let (mean_loss, std) = mean_std(&losses);
            Ok(ShuffleRow {
                task: i,
                mean_loss,
                std,
                rel_std: std / mean_loss.abs(),
            })
        })
        .collect()
}

pub fn shuffle_csv(rows: &[ShuffleRow]) -> String {
    let mut s = String::from("task,mean_loss,std,rel_std\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.task, r.mean_loss, r.std, r.rel_std);
    }
    s
}

pub fn entropy_csv(grid: &[[f64; 2]], map: &EntropyMap) -> String {
    let mut s = String::from("x,y,entropy\n");
    for (p, h) in grid.iter().zip(&map.entropy) {
        let _ = writeln!(s, "{},{},{}", p[0], p[1], h);
    }
    s
}

/// Assignment-probability grid of one output cluster.
pub fn probability_csv(grid: &[[f64; 2]], map: &EntropyMap, cluster: usize) -> String {
    let mut s = String::from("x,y,prob\n");
    for (p, v) in grid.iter().zip(&map.probs[cluster]) {
        let _ = writeln!(s, "{},{},{}", p[0], p[1], v);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 1.0));
        assert_eq!(mean_std(&[5.0]).1, 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
