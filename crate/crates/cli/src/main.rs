//! `swarmset` command-line tool.
//!
//! Exit codes: 0 ok, 2 I/O or file format, 3 bad arguments, 4 divergence,
//! 5 incompatible inputs.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use swarmset::checkpoint::{checkpoint_precision, load_checkpoint};
use swarmset::eval::{entropy_csv, evaluate, probability_csv, shuffle_csv, shuffle_study};
use swarmset::model::{Readout, DIRECT_CLUSTERS};
use swarmset::objectives::{assignment_entropy_map, grid_points};
use swarmset::taskgen::{
    default_val_count, generate_dataset, read_dataset, write_dataset, ParamTaskConfig,
};
use swarmset::trainer::{evaluate_tasks, train};
use swarmset::{ClusterTask, Dataset, Error, Model, ModelSpec, Scalar, TaskKind, TrainOptions};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 3,
            Failure::Core(e) => match e {
                Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Truncated { .. }
                | Error::Checksum { .. }
                | Error::Format(_) => 2,
                Error::InvalidArgument(_) => 3,
                Error::Divergence(_) => 4,
                Error::Incompatible(_)
                | Error::Shape { .. }
                | Error::Contract(_)
                | Error::Cardinality { .. } => 5,
            },
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "swarmset",
    version,
    about = "SWARM set-equivariant layers for amortized clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Direct,
    Param,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustering dataset.
    Gen {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validation tasks; defaults to a tenth of the count.
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-task loss of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
        /// Write per-task losses here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss spread under random entity orderings.
    ShuffleStudy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long, default_value_t = 1000)]
        shuffles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assignment entropy of a hypothetical extra point over a grid.
    EntropyMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long)]
        task_index: usize,
        /// Probe grid as COLSxROWS.
        #[arg(long, default_value = "100x100")]
        grid: String,
        /// Coordinate range as LO:HI, applied to both axes.
        #[arg(long, default_value = "-3:3", allow_hyphen_values = true)]
        range: String,
        /// Receives entropy.csv and prob_<k>.csv for every cluster.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("SWARMSET_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::usage(format!(
            "SWARMSET_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot size the thread pool: {e}")))
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Gen {
            task,
            count,
            seed,
            val_count,
            out,
        } => cmd_gen(task, count, seed, val_count, &out),
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            batch_size,
            out,
        } => {
            let ds = read_dataset(&dataset)?;
            dispatch(
                &checkpoint,
                |m| cmd_eval(m, &ds, split, batch_size, out.as_deref()),
                |m| cmd_eval(m, &ds, split, batch_size, out.as_deref()),
            )
        }
        Command::ShuffleStudy {
            checkpoint,
            dataset,
            split,
            tasks,
            shuffles,
            seed,
            batch_size,
            out,
        } => {
            let ds = read_dataset(&dataset)?;
            let args = ShuffleArgs {
                split,
                tasks,
                shuffles,
                seed,
                batch_size,
                out: &out,
            };
            dispatch(
                &checkpoint,
                |m| cmd_shuffle(m, &ds, &args),
                |m| cmd_shuffle(m, &ds, &args),
            )
        }
        Command::EntropyMap {
            checkpoint,
            dataset,
            split,
            task_index,
            grid,
            range,
            out_dir,
        } => {
            let (nx, ny) = parse_grid(&grid)?;
            let (lo, hi) = parse_range(&range)?;
            let ds = read_dataset(&dataset)?;
            let args = MapArgs {
                split,
                task_index,
                nx,
                ny,
                lo,
                hi,
                out_dir: &out_dir,
            };
            dispatch(
                &checkpoint,
                |m| cmd_entropy(m, &ds, &args),
                |m| cmd_entropy(m, &ds, &args),
            )
        }
    }
}

/// Load a checkpoint at its stored precision and hand the model on.
fn dispatch(
    path: &Path,
    f32_fn: impl FnOnce(Model<f32>) -> CliResult,
    f64_fn: impl FnOnce(Model<f64>) -> CliResult,
) -> CliResult {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    match checkpoint_precision(&bytes)? {
        32 => f32_fn(load_checkpoint::<f32>(path)?.model()),
        64 => f64_fn(load_checkpoint::<f64>(path)?.model()),
        bits => {
            Err(Error::Format(format!("checkpoint precision {bits} is neither 32 nor 64")).into())
        }
    }
}

/// Model shape dictated by the dataset kind.
fn head_for(kind: TaskKind) -> (usize, Readout) {
    match kind {
        TaskKind::Direct => (DIRECT_CLUSTERS, Readout::Entitywise),
        TaskKind::Param => (5 * ParamTaskConfig::default().k, Readout::MeanPool),
    }
}

fn check_compatible(spec: &ModelSpec, ds: &Dataset) -> CliResult {
    let (d_out, readout) = head_for(ds.manifest.task);
    if spec.d_in != 2 || spec.d_out != d_out || spec.readout != readout {
        return Err(Error::Incompatible(format!(
            "model (d_in {}, d_out {}, {:?} readout) does not fit a {:?} dataset (d_in 2, d_out {d_out}, {readout:?} readout)",
            spec.d_in, spec.d_out, spec.readout, ds.manifest.task
        ))
        .into());
    }
    Ok(())
}

fn split_of(ds: &Dataset, split: Split) -> CliResult<&[ClusterTask]> {
    let (tasks, name) = match split {
        Split::Train => (ds.train(), "train"),
        Split::Val => (ds.val(), "val"),
    };
    if tasks.is_empty() {
        return Err(Failure::usage(format!(
            "the {name} split of the dataset is empty"
        )));
    }
    Ok(tasks)
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn cmd_gen(
    task: TaskArg,
    count: usize,
    seed: u64,
    val_count: Option<usize>,
    out: &Path,
) -> CliResult {
    let kind = match task {
        TaskArg::Direct => TaskKind::Direct,
        TaskArg::Param => TaskKind::Param,
    };
    let val = val_count.unwrap_or_else(|| default_val_count(count));
    if val > count {
        return Err(Failure::usage(format!(
            "val-count {val} exceeds count {count}"
        )));
    }
    let (ds, stats) = generate_dataset(kind, count, val, seed)?;
    write_dataset(out, &ds)?;

    let m = &ds.manifest;
    println!("wrote {}", out.display());
    println!(
        "tasks: {} (train {}, val {})",
        m.task_count, m.train_count, m.val_count
    );
    if let (Some(lo), Some(hi)) = (
        ds.tasks.iter().map(ClusterTask::len).min(),
        ds.tasks.iter().map(ClusterTask::len).max(),
    ) {
        println!("points per task: {lo}..={hi}");
    }
    let mut hist = BTreeMap::new();
    for t in &ds.tasks {
        *hist.entry(t.n_clust).or_insert(0usize) += 1;
    }
    let hist: Vec<String> = hist.iter().map(|(k, c)| format!("{k}:{c}")).collect();
    println!("clusters per task: {}", hist.join(" "));
    if stats.rejected_covariances > 0 {
        println!("rejected covariance draws: {}", stats.rejected_covariances);
    }
    Ok(())
}

fn cmd_train(path: &Path) -> CliResult {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::parse(&text, base)?;
    let ds = read_dataset(&cfg.dataset)?;
    let (d_out, readout) = head_for(ds.manifest.task);
    let mut spec = ModelSpec::new(cfg.family, &cfg.arch, 2, d_out, readout)?;
    spec.pooling = cfg.pooling;
    match cfg.train.precision {
        64 => train_run::<f64>(&spec, &ds, &cfg),
        _ => train_run::<f32>(&spec, &ds, &cfg),
    }
}

fn train_run<F: Scalar>(spec: &ModelSpec, ds: &Dataset, cfg: &RunConfig) -> CliResult {
    let opts = TrainOptions {
        run_dir: Some(cfg.out_dir.clone()),
    };
    let outcome = train::<F>(spec, ds.train(), ds.val(), &cfg.train, &opts)?;
    let model = &outcome.state.model;
    let counted = model.param_count();
    if counted != spec.param_count() {
        return Err(Error::Contract(format!(
            "instantiated {counted} parameters, closed form gives {}",
            spec.param_count()
        ))
        .into());
    }
    println!("model: {} {}", spec.family.name(), spec.arch);
    println!("parameters: {counted}");
    println!("epochs: {}", outcome.metrics.len());
    if let Some(best) = &outcome.state.best {
        println!("best val loss: {:.6} (epoch {})", best.loss, best.epoch);
    }
    if !ds.val().is_empty() {
        let refs: Vec<&ClusterTask> = ds.val().iter().collect();
        let losses = evaluate_tasks(model, &refs, cfg.train.batch_size)?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        println!("final val loss: {mean:.6}");
    }
    println!("run directory: {}", cfg.out_dir.display());
    Ok(())
}

fn cmd_eval<F: Scalar>(
    model: Model<F>,
    ds: &Dataset,
    split: Split,
    batch: usize,
    out: Option<&Path>,
) -> CliResult {
    check_compatible(&model.spec, ds)?;
    let tasks = split_of(ds, split)?;
    let report = evaluate(&model, tasks, batch.max(1))?;
    if let Some(path) = out {
        write_file(path, &report.to_csv())?;
    }
    println!("tasks: {}", report.per_task.len());
    println!("loss: {:.6} ± {:.6}", report.mean, report.std);
    println!("mean loss exact: {}", report.mean);
    println!("parameters: {}", report.param_count);
    println!("wall time: {:.3} s", report.wall_s);
    Ok(())
}

struct ShuffleArgs<'a> {
    split: Split,
    tasks: usize,
    shuffles: usize,
    seed: u64,
    batch_size: usize,
    out: &'a Path,
}

fn cmd_shuffle<F: Scalar>(model: Model<F>, ds: &Dataset, a: &ShuffleArgs) -> CliResult {
    check_compatible(&model.spec, ds)?;
    if a.tasks == 0 || a.shuffles == 0 {
        return Err(Failure::usage("--tasks and --shuffles must be at least 1"));
    }
    let all = split_of(ds, a.split)?;
    if a.tasks > all.len() {
        eprintln!("note: split holds {} tasks, using all of them", all.len());
    }
    let tasks = &all[..a.tasks.min(all.len())];
    let rows = shuffle_study(&model, tasks, a.shuffles, a.seed, a.batch_size.max(1))?;
    write_file(a.out, &shuffle_csv(&rows))?;
    let rel: Vec<f64> = rows.iter().map(|r| r.rel_std).collect();
    println!("tasks: {}, shuffles per task: {}", rows.len(), a.shuffles);
    println!("median relative std: {:.3e}", swarmset::eval::median(&rel));
    println!(
        "max relative std: {:.3e}",
        rel.iter().copied().fold(0.0, f64::max)
    );
    Ok(())
}

struct MapArgs<'a> {
    split: Split,
    task_index: usize,
    nx: usize,
    ny: usize,
    lo: f64,
    hi: f64,
    out_dir: &'a Path,
}

fn cmd_entropy<F: Scalar>(model: Model<F>, ds: &Dataset, a: &MapArgs) -> CliResult {
    check_compatible(&model.spec, ds)?;
    if model.spec.readout != Readout::Entitywise {
        return Err(
            Error::Incompatible("entropy maps need a direct-clustering model".into()).into(),
        );
    }
    let tasks = split_of(ds, a.split)?;
    let task = tasks.get(a.task_index).ok_or_else(|| {
        Failure::usage(format!(
            "task index {} is out of range (split holds {} tasks)",
            a.task_index,
            tasks.len()
        ))
    })?;
    let grid = grid_points(a.nx, a.ny, a.lo, a.hi);
    let points = task.points.cast::<F>();
    let chunk = model
        .spec
        .eval_batch_limit(task.len() + 1, (F::BITS / 8) as usize, 256);
    let map = assignment_entropy_map(&model, &points, &grid, chunk)?;
    std::fs::create_dir_all(a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.to_path_buf(),
        source: e,
    })?;
    write_file(&a.out_dir.join("entropy.csv"), &entropy_csv(&grid, &map))?;
    for k in 0..map.probs.len() {
        write_file(
            &a.out_dir.join(format!("prob_{k}.csv")),
            &probability_csv(&grid, &map, k),
        )?;
    }
    let max_h = map.entropy.iter().copied().fold(0.0, f64::max);
    println!("probes: {}, clusters: {}", grid.len(), map.probs.len());
    println!("max entropy: {max_h:.6}");
    println!("output: {}", a.out_dir.display());
    Ok(())
}

fn parse_grid(s: &str) -> CliResult<(usize, usize)> {
    let bad = || {
        Failure::usage(format!(
            "--grid expects COLSxROWS with positive sizes, got {s:?}"
        ))
    };
    let (a, b) = s.split_once('x').ok_or_else(bad)?;
    let nx: usize = a.parse().map_err(|_| bad())?;
    let ny: usize = b.parse().map_err(|_| bad())?;
    if nx == 0 || ny == 0 {
        return Err(bad());
    }
    Ok((nx, ny))
}

fn parse_range(s: &str) -> CliResult<(f64, f64)> {
    let bad = || Failure::usage(format!("--range expects LO:HI with LO < HI, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_range_parsing() {
        assert_eq!(parse_grid("100x100").unwrap(), (100, 100));
        assert_eq!(parse_grid("1x3").unwrap(), (1, 3));
        assert!(parse_grid("0x3").is_err());
        assert!(parse_grid("10").is_err());
        assert_eq!(parse_range("-3:3").unwrap(), (-3.0, 3.0));
        assert!(parse_range("3:-3").is_err());
        assert!(parse_range("a:b").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kinds() {
        assert_eq!(Failure::usage("x").exit_code(), 3);
        assert_eq!(Failure::from(Error::Divergence("x".into())).exit_code(), 4);
        assert_eq!(
            Failure::from(Error::Incompatible("x".into())).exit_code(),
            5
        );
        assert_eq!(
            Failure::from(Error::Checksum { what: "x".into() }).exit_code(),
            2
        );
        assert_eq!(
            Failure::from(Error::InvalidArgument("x".into())).exit_code(),
            3
        );
    }
}
