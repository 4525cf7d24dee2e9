//! Training objectives.
//!
//! Direct clustering scores per-entity cluster logits with cross-entropy
//! under the best relabeling of the ground truth, found by the Hungarian
//! method; the matching is treated as a constant when differentiating.
//! The parametrized task pools entity outputs into a mixture-of-Gaussians
//! parameter vector and scores the per-point negative log-likelihood.
//!
//! Both losses are means per point, so larger tasks do not carry more weight.

use std::f64::consts::PI;

use crate::array::Array;
use crate::assignment::{build_cluster_cost, hungarian_solve, log_sum_exp, CostMatrix};
use crate::batch::PopulationBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{forward_graph, ModelParams, ModelSpec, Readout, SetFunction};
use crate::scalar::Scalar;
use crate::taskgen::ClusterTask;

/// Bound on decoded log standard deviations.
pub const LOG_STD_CLAMP: f64 = 7.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Predicted cluster `k` explains ground-truth label `matched_perm[k]`.
    pub matched_perm: Vec<usize>,
    pub n_points: usize,
}

fn ensure_finite<F: Scalar>(a: &Array<F>, what: &str) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{what} contains non-finite values"
        )))
    }
}

/// Hungarian-matched mean cross-entropy of `logits: [K, N]`.
pub fn direct_clustering_loss<F: Scalar>(
    logits: &Array<F>,
    labels: &[usize],
) -> Result<LossReport> {
    ensure_finite(logits, "logits")?;
    let cost = build_cluster_cost(logits, labels)?;
    let res = hungarian_solve(&cost);
    Ok(LossReport {
        value: res.total_cost / labels.len() as f64,
        matched_perm: res.perm,
        n_points: labels.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoGParams {
    /// `[2, K]`.
    pub means: Array<f64>,
    /// `[2, K]`, already clamped.
    pub log_stds: Array<f64>,
    /// `[K]`, pre-softmax.
    pub logits_w: Array<f64>,
}

impl MoGParams {
    pub fn k(&self) -> usize {
        self.logits_w.len()
    }

    pub fn stds(&self) -> Array<f64> {
        self.log_stds.map(f64::exp)
    }

    pub fn weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(self.logits_w.data());
        self.logits_w
            .data()
            .iter()
            .map(|w| (w - lse).exp())
            .collect()
    }
}

/// Split a raw vector of length `5K` into `K × (mean₂, log_std₂, logit)`.
pub fn decode_mog(raw: &[f64]) -> Result<MoGParams> {
    if raw.is_empty() || !raw.len().is_multiple_of(5) {
        return Err(Error::Contract(format!(
            "mixture parameter vector must have length 5K, got {}",
            raw.len()
        )));
    }
    let k = raw.len() / 5;
    let c = |j: usize, off: usize| raw[5 * j + off];
    let mut means = Vec::with_capacity(2 * k);
    let mut log_stds = Vec::with_capacity(2 * k);
    for d in 0..2 {
        means.extend((0..k).map(|j| c(j, d)));
    }
    for d in 0..2 {
        log_stds.extend((0..k).map(|j| c(j, 2 + d).clamp(-LOG_STD_CLAMP, LOG_STD_CLAMP)));
    }
    Ok(MoGParams {
        means: Array::new(&[2, k], means)?,
        log_stds: Array::new(&[2, k], log_stds)?,
        logits_w: Array::new(&[k], (0..k).map(|j| c(j, 4)).collect())?,
    })
}

/// Mean per-point negative log-likelihood of `points: [2, N]`.
pub fn mog_nll<F: Scalar>(params: &MoGParams, points: &Array<F>) -> Result<f64> {
    let &[2, n] = points.shape() else {
        return Err(Error::shape("mog_nll", points.shape(), &[2, 0]));
    };
    if n == 0 {
        return Err(Error::Cardinality {
            task: 0,
            len: 0,
            max: 0,
        });
    }
    let k = params.k();
    let lse_w = log_sum_exp(params.logits_w.data());
    let (mu, ls) = (params.means.data(), params.log_stds.data());
    let p = points.data();
    let mut terms = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        let x = [p[i].f64(), p[n + i].f64()];
        for (j, t) in terms.iter_mut().enumerate() {
            let mut lp = params.logits_w.data()[j] - lse_w - (2.0 * PI).ln();
            for d in 0..2 {
                let z = (x[d] - mu[d * k + j]) * (-ls[d * k + j]).exp();
                lp -= 0.5 * z * z + ls[d * k + j];
            }
            *t = lp;
        }
        total -= log_sum_exp(&terms);
    }
    let nll = total / n as f64;
    if nll.is_finite() {
        Ok(nll)
    } else {
        Err(Error::Divergence(format!("mixture NLL is {nll}")))
    }
}

/// Masked mean over entities: `[B, d, N] → [B, d]`.
pub fn mean_pool_head<F: Scalar>(y: &PopulationBatch<F>) -> Result<Array<F>> {
    let mut g = Graph::new();
    let v = g.constant(y.values().clone());
    let m = g.masked_mean(v, y.lengths())?;
    Ok(g.value(m).clone())
}

/// Tasks padded into one batch, with their labels.
#[derive(Clone, Debug)]
pub struct TaskBatch<F> {
    pub x: PopulationBatch<F>,
    pub labels: Vec<Vec<usize>>,
}

impl<F: Scalar> TaskBatch<F> {
    pub fn from_tasks(tasks: &[&ClusterTask]) -> Result<Self> {
        let pts: Vec<Array<F>> = tasks.iter().map(|t| t.points.cast()).collect();
        let refs: Vec<&Array<F>> = pts.iter().collect();
        Ok(TaskBatch {
            x: PopulationBatch::from_sets(&refs)?,
            labels: tasks.iter().map(|t| t.labels_usize()).collect(),
        })
    }
}

/// Which loss a model is trained with; fixed by its readout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Direct,
    Mixture { k: usize },
}

impl Objective {
    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        match spec.readout {
            Readout::Entitywise => Ok(Objective::Direct),
            Readout::MeanPool if spec.d_out.is_multiple_of(5) => {
                Ok(Objective::Mixture { k: spec.d_out / 5 })
            }
            Readout::MeanPool => Err(Error::InvalidArgument(format!(
                "mixture head needs an output width divisible by 5, got {}",
                spec.d_out
            ))),
        }
    }
}

/// Batch loss `(1/B)·Σ_b loss_b` as a scalar node, plus every task's loss.
pub fn batch_loss<F: Scalar>(
    g: &mut Graph<F>,
    spec: &ModelSpec,
    params: &ModelParams<Var>,
    batch: &TaskBatch<F>,
) -> Result<(Var, Vec<f64>)> {
    let x = g.constant(batch.x.values().clone());
    let lengths = batch.x.lengths();
    let y = forward_graph(g, spec, params, x, lengths)?;
    match Objective::for_spec(spec)? {
        Objective::Direct => direct_loss_graph(g, y, &batch.labels, lengths),
        Objective::Mixture { .. } => {
            let raw = g.masked_mean(y, lengths)?;
            mog_nll_graph(g, raw, x, lengths)
        }
    }
}

fn cost_from_log_probs<F: Scalar>(
    lp: &[F],
    k: usize,
    n_stride: usize,
    labels: &[usize],
) -> Result<CostMatrix> {
    let mut costs = vec![0.0; k * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Contract(format!("label {l} out of range for K={k}")));
        }
        for kk in 0..k {
            costs[kk * k + l] -= lp[kk * n_stride + i].f64();
        }
    }
    CostMatrix::new(k, costs)
}

/// Graph form of [`direct_clustering_loss`] over `logits: [B, K, N]`.
pub fn direct_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    labels: &[Vec<usize>],
    lengths: &[usize],
) -> Result<(Var, Vec<f64>)> {
    let lsm = g.log_softmax(logits)?;
    let &[b, k, n] = g.shape(lsm) else {
        unreachable!("log_softmax output is rank 3")
    };
    if labels.len() != b || lengths.len() != b {
        return Err(Error::shape("direct loss", &[b], &[labels.len()]));
    }
    let values = g.value(lsm);
    ensure_finite(values, "logits")?;
    let mut entries = Vec::new();
    let mut per_task = Vec::with_capacity(b);
    for (bi, lab) in labels.iter().enumerate() {
        if lab.len() != lengths[bi] {
            return Err(Error::shape(
                "direct loss labels",
                &[lengths[bi]],
                &[lab.len()],
            ));
        }
        let base = bi * k * n;
        let cost = cost_from_log_probs(&values.data()[base..base + k * n], k, n, lab)?;
        let res = hungarian_solve(&cost);
        let owner = res.inverse();
        let nb = lab.len() as f64;
        per_task.push(res.total_cost / nb);
        let w = F::of(-1.0 / (nb * b as f64));
        entries.extend(
            lab.iter()
                .enumerate()
                .map(|(i, &l)| (base + owner[l] * n + i, w)),
        );
    }
    let loss = g.gather(lsm, entries)?;
    Ok((loss, per_task))
}

/// Graph form of the mixture NLL: `raw: [B, 5K]`, `points: [B, 2, N]`.
pub fn mog_nll_graph<F: Scalar>(
    g: &mut Graph<F>,
    raw: Var,
    points: Var,
    lengths: &[usize],
) -> Result<(Var, Vec<f64>)> {
    let &[b, d] = g.shape(raw) else {
        return Err(Error::shape("mog_nll", g.shape(raw), &[0, 0]));
    };
    if d == 0 || d % 5 != 0 {
        return Err(Error::Contract(format!(
            "mixture head width {d} is not a multiple of 5"
        )));
    }
    let k = d / 5;
    let r = g.reshape(raw, &[b, k, 5])?;
    let logit = g.slice(r, 2, 4, 1)?;
    let mut acc = g.log_softmax(logit)?;
    acc = g.shift(acc, F::of(-(2.0 * PI).ln()));
    for dim in 0..2 {
        let mu = g.slice(r, 2, dim, 1)?;
        let ls = g.slice(r, 2, 2 + dim, 1)?;
        let ls = g.clamp(ls, F::of(-LOG_STD_CLAMP), F::of(LOG_STD_CLAMP));
        let x = g.slice(points, 1, dim, 1)?;
        let diff = g.sub(x, mu)?;
        let neg = g.neg(ls);
        let inv_std = g.exp(neg);
        let z = g.mul(diff, inv_std)?;
        let z2 = g.mul(z, z)?;
        let half = g.scale(z2, F::of(-0.5));
        acc = g.add(acc, half)?;
        acc = g.sub(acc, ls)?;
    }
    let ll = g.logsumexp(acc)?;
    let mean_ll = g.masked_mean(ll, lengths)?;
    let per_task: Vec<f64> = g.value(mean_ll).data().iter().map(|v| -v.f64()).collect();
    if per_task.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("mixture NLL is not finite".into()));
    }
    let total = g.sum(mean_ll);
    let loss = g.scale(total, F::of(-1.0 / b as f64));
    Ok((loss, per_task))
}

/// Per-task losses of a model over tasks, evaluated in batches of at most
/// `batch_size` (smaller when the forward tape would get too large).
pub fn task_losses<F: Scalar>(
    model: &crate::model::Model<F>,
    tasks: &[&ClusterTask],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tasks.len());
    let mut rest = tasks;
    while !rest.is_empty() {
        let want = batch_size.max(1).min(rest.len());
        let n_max = rest[..want].iter().map(|t| t.len()).max().unwrap_or(1);
        let take = model
            .spec
            .eval_batch_limit(n_max, (F::BITS / 8) as usize, want);
        let (chunk, tail) = rest.split_at(take);
        rest = tail;
        let batch = TaskBatch::from_tasks(chunk)?;
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let (_, per) = batch_loss(&mut g, &model.spec, &p, &batch)?;
        out.extend(per);
    }
    Ok(out)
}

/// Probe grid, row-major with `y` as the outer index. A single-point axis
/// sits at the middle of the range.
pub fn grid_points(nx: usize, ny: usize, lo: f64, hi: f64) -> Vec<[f64; 2]> {
    let axis = |n: usize, i: usize| {
        if n <= 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    };
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| [axis(nx, i), axis(ny, j)]))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    /// Shannon entropy (nats) per probe.
    pub entropy: Vec<f64>,
    /// `probs[k][probe]`: softmax probability of cluster `k`.
    pub probs: Vec<Vec<f64>>,
}

/// For every probe `x*`, run the model on the task's points plus `x*`
/// (appended as the last entity) and read the cluster distribution at `x*`.
pub fn assignment_entropy_map<F: Scalar>(
    model: &impl SetFunction<F>,
    points: &Array<F>,
    grid: &[[f64; 2]],
    chunk: usize,
) -> Result<EntropyMap> {
    let &[2, n] = points.shape() else {
        return Err(Error::shape("entropy map points", points.shape(), &[2, 0]));
    };
    let k = model.d_out();
    let mut map = EntropyMap {
        entropy: Vec::with_capacity(grid.len()),
        probs: vec![Vec::with_capacity(grid.len()); k],
    };
    let m = n + 1;
    for probes in grid.chunks(chunk.max(1)) {
        let b = probes.len();
        let mut values = Vec::with_capacity(b * 2 * m);
        for probe in probes {
            for (d, &coord) in probe.iter().enumerate() {
                values.extend_from_slice(&points.data()[d * n..(d + 1) * n]);
                values.push(F::of(coord));
            }
        }
        let x = PopulationBatch::new(Array::new(&[b, 2, m], values)?, vec![m; b])?;
        let y = model.forward(&x)?;
        let yv = y.values();
        if y.features() != k {
            return Err(Error::shape("entropy map output", &[k], &[y.features()]));
        }
        let mut logits = vec![0.0; k];
        for bi in 0..b {
            for (kk, l) in logits.iter_mut().enumerate() {
                *l = yv.data()[(bi * k + kk) * m + n].f64();
            }
            let lse = log_sum_exp(&logits);
            let mut h = 0.0;
            for (kk, &l) in logits.iter().enumerate() {
                let lp = l - lse;
                let p = lp.exp();
                if p > 0.0 {
                    h -= p * lp;
                }
                map.probs[kk].push(p);
            }
            map.entropy.push(h.max(0.0));
        }
    }
    Ok(map)
}
