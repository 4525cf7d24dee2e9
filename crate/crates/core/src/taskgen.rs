//! Synthetic clustering tasks and their on-disk container.
//!
//! Two generators:
//!
//! * direct: `N ~ U{100..1000}` points in ℝ² from `K ~ U{3..10}` Gaussian
//!   clusters with standard-normal centers, inverse-Wishart(4, 0.05·I)
//!   covariances and uniform cluster assignment;
//! * param: `K = 4` isotropic clusters with σ = 0.3, centers `U(−4, 4)²`,
//!   `N ~ U{100..500}` and flat-Dirichlet mixture weights.
//!
//! Task `i` of a dataset is drawn from its own ChaCha8 stream
//! (`seed`, stream `i`), so any task can be regenerated independently.
//!
//! # File format
//!
//! All integers and floats little-endian.
//!
//! ```text
//! magic  b"SWRMDATA"            8 bytes
//! u32    format version (1)
//! u32    reserved (0)
//! u32    manifest length, then manifest as UTF-8 JSON
//! task_count records:
//!   u32 N, u32 K
//!   f32 × 2N   points, column-major (x0, y0, x1, y1, …)
//!   u16 × N    labels
//!   f32 × 2K   centers, column-major
//!   f32 × 4K   covariances, each 2×2 row-major
//!   f32 × K    mixture weights
//!   u32        CRC32 of the record bytes above
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"SWRMDATA";
pub const DATASET_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = "swarmset-taskgen/1";
pub const RNG_SCHEME: &str = "chacha8; seed=manifest.seed; stream=task index";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Direct,
    Param,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(TaskKind::Direct),
            "param" => Ok(TaskKind::Param),
            other => Err(Error::InvalidArgument(format!(
                "unknown task kind {other:?} (expected direct or param)"
            ))),
        }
    }
}

/// One clustering task with its generating mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTask {
    /// `[2, N]`.
    pub points: Array<f32>,
    pub labels: Vec<u16>,
    pub n_clust: usize,
    /// `[2, K]`.
    pub centers: Array<f32>,
    /// Row-major 2×2 covariance per cluster.
    pub covariances: Vec<[f32; 4]>,
    pub weights: Vec<f32>,
}

impl ClusterTask {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.labels.len(), self.n_clust);
        if self.points.shape() != [2, n] || self.centers.shape() != [2, k] {
            return Err(Error::Contract(format!(
                "task arrays disagree with N={n}, K={k}: points {:?}, centers {:?}",
                self.points.shape(),
                self.centers.shape()
            )));
        }
        if self.covariances.len() != k || self.weights.len() != k {
            return Err(Error::Contract(
                "one covariance and weight per cluster".into(),
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Contract(format!("label {l} out of range for K={k}")));
        }
        for cov in &self.covariances {
            if !is_spd(cov) {
                return Err(Error::Contract(format!("covariance {cov:?} is not SPD")));
            }
        }
        let total: f64 = self.weights.iter().map(|&w| w as f64).sum();
        if self.weights.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "weights must be a distribution (sum {total})"
            )));
        }
        Ok(())
    }
}

fn is_spd(c: &[f32; 4]) -> bool {
    let [a, b, b2, d] = c.map(f64::from);
    b == b2 && a > 0.0 && d > 0.0 && a * d - b * b > 0.0 && c.iter().all(|v| v.is_finite())
}

#[derive(Clone, Debug)]
pub struct DirectTaskConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub wishart_df: f64,
    /// Inverse-Wishart scale matrix is `scale · I`.
    pub wishart_scale: f64,
}

impl Default for DirectTaskConfig {
    fn default() -> Self {
        DirectTaskConfig {
            n_min: 100,
            n_max: 1000,
            k_min: 3,
            k_max: 10,
            wishart_df: 4.0,
            wishart_scale: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamTaskConfig {
    pub k: usize,
    pub sigma: f64,
    /// Centers are drawn from `U(−half_width, half_width)` per coordinate.
    pub half_width: f64,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for ParamTaskConfig {
    fn default() -> Self {
        ParamTaskConfig {
            k: 4,
            sigma: 0.3,
            half_width: 4.0,
            n_min: 100,
            n_max: 500,
        }
    }
}

/// Draw from the 2×2 inverse-Wishart distribution `IW(df, psi)` (row-major
/// `psi`) via a Bartlett decomposition of `Wishart(df, psi⁻¹)`.
pub fn sample_inverse_wishart_2d(rng: &mut impl Rng, df: f64, psi: [f64; 4]) -> [f64; 4] {
    let psi_inv = inv2(psi);
    // Lower Cholesky factor of psi⁻¹.
    let l11 = psi_inv[0].sqrt();
    let l21 = psi_inv[2] / l11;
    let l22 = (psi_inv[3] - l21 * l21).sqrt();
    let a11 = ChiSquared::new(df).expect("df > 0").sample(rng).sqrt();
    let a22 = ChiSquared::new(df - 1.0)
        .expect("df > 1")
        .sample(rng)
        .sqrt();
    let a21: f64 = rng.sample(StandardNormal);
    // B = L·A, lower triangular.
    let b11 = l11 * a11;
    let b21 = l21 * a11 + l22 * a21;
    let b22 = l22 * a22;
    let w = [b11 * b11, b11 * b21, b11 * b21, b21 * b21 + b22 * b22];
    inv2(w)
}

fn inv2(m: [f64; 4]) -> [f64; 4] {
    let det = m[0] * m[3] - m[1] * m[2];
    [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det]
}

fn gaussian_point(rng: &mut impl Rng, mean: [f64; 2], cov: &[f32; 4]) -> [f64; 2] {
    let [a, b, _, d] = cov.map(f64::from);
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (d - l21 * l21).max(0.0).sqrt();
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    [mean[0] + l11 * z1, mean[1] + l21 * z1 + l22 * z2]
}

fn assemble(
    points: Vec<[f64; 2]>,
    labels: Vec<u16>,
    centers: Vec<[f64; 2]>,
    covariances: Vec<[f32; 4]>,
    weights: Vec<f32>,
) -> ClusterTask {
    let n = points.len();
    let k = centers.len();
    let mut pts = Vec::with_capacity(2 * n);
    pts.extend(points.iter().map(|p| p[0] as f32));
    pts.extend(points.iter().map(|p| p[1] as f32));
    let mut ctr = Vec::with_capacity(2 * k);
    ctr.extend(centers.iter().map(|c| c[0] as f32));
    ctr.extend(centers.iter().map(|c| c[1] as f32));
    ClusterTask {
        points: Array::new(&[2, n], pts).expect("points shape"),
        labels,
        n_clust: k,
        centers: Array::new(&[2, k], ctr).expect("centers shape"),
        covariances,
        weights,
    }
}

/// Direct-clustering task. Also returns how many covariance draws were
/// rejected for not being positive definite after rounding to `f32`.
pub fn gen_direct_task_with(cfg: &DirectTaskConfig, rng: &mut impl Rng) -> (ClusterTask, u32) {
    let n = rng.random_range(cfg.n_min..=cfg.n_max);
    let k = rng.random_range(cfg.k_min..=cfg.k_max);
    let centers: Vec<[f64; 2]> = (0..k)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    let psi = [cfg.wishart_scale, 0.0, 0.0, cfg.wishart_scale];
    let mut rejected = 0;
    let covariances: Vec<[f32; 4]> = (0..k)
        .map(|_| loop {
            let s = sample_inverse_wishart_2d(rng, cfg.wishart_df, psi);
            let sym = 0.5 * (s[1] + s[2]);
            let c = [s[0] as f32, sym as f32, sym as f32, s[3] as f32];
            if is_spd(&c) {
                break c;
            }
            rejected += 1;
        })
        .collect();
    let labels: Vec<u16> = (0..n).map(|_| rng.random_range(0..k) as u16).collect();
    let points = labels
        .iter()
        .map(|&l| gaussian_point(rng, centers[l as usize], &covariances[l as usize]))
        .collect();
    let weights = vec![1.0 / k as f32; k];
    (
        assemble(points, labels, centers, covariances, weights),
        rejected,
    )
}

pub fn gen_direct_task(rng: &mut impl Rng) -> ClusterTask {
    gen_direct_task_with(&DirectTaskConfig::default(), rng).0
}

pub fn gen_param_task_with(cfg: &ParamTaskConfig, rng: &mut impl Rng) -> ClusterTask {
    let k = cfg.k;
    let side = Uniform::new(-cfg.half_width, cfg.half_width).expect("finite range");
    let centers: Vec<[f64; 2]> = (0..k)
        .map(|_| [side.sample(rng), side.sample(rng)])
        .collect();
    let n = rng.random_range(cfg.n_min..=cfg.n_max);
    // Flat Dirichlet: normalised unit-rate exponentials.
    let raw: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let var = (cfg.sigma * cfg.sigma) as f32;
    let cov = [var, 0.0, 0.0, var];
    let labels: Vec<u16> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = k - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick as u16
        })
        .collect();
    let points = labels
        .iter()
        .map(|&l| gaussian_point(rng, centers[l as usize], &cov))
        .collect();
    let weights = weights.iter().map(|&w| w as f32).collect();
    assemble(points, labels, centers, vec![cov; k], weights)
}

pub fn gen_param_task(rng: &mut impl Rng) -> ClusterTask {
    gen_param_task_with(&ParamTaskConfig::default(), rng)
}

/// Uniformly random reordering of a task's entities (points and labels move
/// together).
pub fn shuffle_entities(task: &ClusterTask, rng: &mut impl Rng) -> ClusterTask {
    let mut order: Vec<usize> = (0..task.len()).collect();
    order.shuffle(rng);
    permute_entities(task, &order)
}

/// New position `i` holds old entity `order[i]`. `order` may also select a
/// subset.
pub fn permute_entities(task: &ClusterTask, order: &[usize]) -> ClusterTask {
    let n = task.len();
    let p = task.points.data();
    let mut pts = Vec::with_capacity(2 * order.len());
    pts.extend(order.iter().map(|&i| p[i]));
    pts.extend(order.iter().map(|&i| p[n + i]));
    ClusterTask {
        points: Array::new(&[2, order.len()], pts).expect("points shape"),
        labels: order.iter().map(|&i| task.labels[i]).collect(),
        ..task.clone()
    }
}

/// Random stream of task `index` for a dataset generated from `seed`.
pub fn task_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub task_count: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub generator_version: String,
    pub task: TaskKind,
    pub rng: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.train_count + self.val_count != self.task_count {
            return Err(Error::Format(format!(
                "manifest split {} + {} does not add up to {} tasks",
                self.train_count, self.val_count, self.task_count
            )));
        }
        Ok(())
    }
}

/// Tasks `0..train_count` are the training split, the rest validation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tasks: Vec<ClusterTask>,
}

impl Dataset {
    pub fn train(&self) -> &[ClusterTask] {
        &self.tasks[..self.manifest.train_count]
    }

    pub fn val(&self) -> &[ClusterTask] {
        &self.tasks[self.manifest.train_count..]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenStats {
    pub rejected_covariances: u64,
}

/// Default validation share: one task in ten.
pub fn default_val_count(count: usize) -> usize {
    count / 10
}

pub fn generate_dataset(
    kind: TaskKind,
    count: usize,
    val_count: usize,
    seed: u64,
) -> Result<(Dataset, GenStats)> {
    if val_count > count {
        return Err(Error::InvalidArgument(format!(
            "validation count {val_count} exceeds task count {count}"
        )));
    }
    let mut stats = GenStats::default();
    let tasks = (0..count)
        .map(|i| {
            let mut rng = task_rng(seed, i as u64);
            match kind {
                TaskKind::Direct => {
                    let (t, r) = gen_direct_task_with(&DirectTaskConfig::default(), &mut rng);
                    stats.rejected_covariances += r as u64;
                    t
                }
                TaskKind::Param => gen_param_task(&mut rng),
            }
        })
        .collect();
    let manifest = DatasetManifest {
        seed,
        task_count: count,
        train_count: count - val_count,
        val_count,
        generator_version: GENERATOR_VERSION.to_string(),
        task: kind,
        rng: RNG_SCHEME.to_string(),
    };
    Ok((Dataset { manifest, tasks }, stats))
}

// ------------------------------------------------------------------ I/O

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: impl IntoIterator<Item = f32>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_task(task: &ClusterTask, out: &mut Vec<u8>) {
    let start = out.len();
    let (n, k) = (task.len(), task.n_clust);
    put_u32(out, n as u32);
    put_u32(out, k as u32);
    let p = task.points.data();
    put_f32s(out, (0..n).flat_map(|i| [p[i], p[n + i]]));
    for &l in &task.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    let c = task.centers.data();
    put_f32s(out, (0..k).flat_map(|j| [c[j], c[k + j]]));
    put_f32s(out, task.covariances.iter().flatten().copied());
    put_f32s(out, task.weights.iter().copied());
    let crc = crc32fast::hash(&out[start..]);
    put_u32(out, crc);
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.manifest.validate()?;
    if ds.tasks.len() != ds.manifest.task_count {
        return Err(Error::Contract(format!(
            "manifest lists {} tasks but {} are present",
            ds.manifest.task_count,
            ds.tasks.len()
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, 0);
    let manifest = serde_json::to_vec(&ds.manifest).map_err(|e| Error::Format(e.to_string()))?;
    put_u32(&mut out, manifest.len() as u32);
    out.extend_from_slice(&manifest);
    for task in &ds.tasks {
        encode_task(task, &mut out);
    }
    Ok(out)
}

/// Bounds-checked little-endian reader.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                what: what.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format(format!("{what} too large")))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn slice_from(&self, start: usize) -> &'a [u8] {
        &self.bytes[start..self.pos]
    }
}

fn decode_task(cur: &mut Cursor<'_>, index: usize) -> Result<ClusterTask> {
    let what = format!("task {index}");
    let start = cur.pos();
    let n = cur.u32(&what)? as usize;
    let k = cur.u32(&what)? as usize;
    // Reject absurd sizes before allocating.
    let needed = 8usize
        .saturating_add(n.saturating_mul(10))
        .saturating_add(k.saturating_mul(28))
        .saturating_add(4)
        .saturating_sub(8);
    if needed > cur.remaining() {
        return Err(Error::Truncated { what });
    }
    let inter = cur.f32s(2 * n, &what)?;
    let labels = (0..n).map(|_| cur.u16(&what)).collect::<Result<Vec<_>>>()?;
    let ctr = cur.f32s(2 * k, &what)?;
    let cov = cur.f32s(4 * k, &what)?;
    let weights = cur.f32s(k, &what)?;
    let body = cur.slice_from(start);
    let crc = cur.u32(&what)?;
    if crc32fast::hash(body) != crc {
        return Err(Error::Checksum { what });
    }
    let mut pts = Vec::with_capacity(2 * n);
    pts.extend((0..n).map(|i| inter[2 * i]));
    pts.extend((0..n).map(|i| inter[2 * i + 1]));
    let mut centers = Vec::with_capacity(2 * k);
    centers.extend((0..k).map(|j| ctr[2 * j]));
    centers.extend((0..k).map(|j| ctr[2 * j + 1]));
    Ok(ClusterTask {
        points: Array::new(&[2, n], pts)?,
        labels,
        n_clust: k,
        centers: Array::new(&[2, k], centers)?,
        covariances: cov
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect(),
        weights,
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor::new(bytes);
    if cur.take(8, "magic").ok() != Some(DATASET_MAGIC.as_slice()) {
        return Err(Error::BadMagic {
            expected: "dataset",
        });
    }
    let version = cur.u32("header")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let _reserved = cur.u32("header")?;
    let len = cur.u32("manifest length")? as usize;
    let manifest: DatasetManifest = serde_json::from_slice(cur.take(len, "manifest")?)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    manifest.validate()?;
    let tasks = (0..manifest.task_count)
        .map(|i| decode_task(&mut cur, i))
        .collect::<Result<Vec<_>>>()?;
    if cur.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after last task",
            cur.remaining()
        )));
    }
    Ok(Dataset { manifest, tasks })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
