//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use swarmset::model::ModelFamily;
use swarmset::swarm::PopulationPool;
use swarmset::TrainConfig;

use crate::Failure;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub family: ModelFamily,
    pub arch: String,
    pub pooling: PopulationPool,
    pub train: TrainConfig,
}

fn parse_pooling(s: &str) -> Result<PopulationPool, Failure> {
    match s {
        "mean" => Ok(PopulationPool::Mean),
        "causal_mean" | "causal" => Ok(PopulationPool::CausalMean),
        other => Err(Failure::usage(format!(
            "unknown pooling {other:?} (expected mean or causal_mean)"
        ))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, Failure> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Failure::usage(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, Failure> {
    v.parse()
        .map_err(|_| Failure::usage(format!("{key}: cannot parse {v:?} as a number")))
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, Failure> {
        let mut dataset = None;
        let mut out_dir = None;
        let mut family = None;
        let mut arch = None;
        let mut pooling = PopulationPool::Mean;
        let mut t = TrainConfig::default();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Failure::usage(format!(
                    "config line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let (key, v) = (key.trim(), value.trim());
            match key {
                "dataset" => dataset = Some(base.join(v)),
                "out_dir" => out_dir = Some(base.join(v)),
                "family" => family = Some(ModelFamily::from_str(v)?),
                "arch" => arch = Some(v.to_string()),
                "pooling" => pooling = parse_pooling(v)?,
                "batch_size" => t.batch_size = parse_num(key, v)?,
                "lr0" => t.lr0 = parse_num(key, v)?,
                "alpha" => t.alpha = parse_num(key, v)?,
                "beta" => t.beta = parse_num(key, v)?,
                "warmup_epochs" => t.warmup_epochs = parse_num(key, v)?,
                "max_epochs" => t.max_epochs = parse_num(key, v)?,
                "time_budget_s" => t.time_budget_s = Some(parse_num(key, v)?),
                "precision" => t.precision = parse_num(key, v)?,
                "seed" => t.seed = parse_num(key, v)?,
                "lr_drop_at" => t.lr_drop_at = Some(parse_num(key, v)?),
                "lr_drop_factor" => t.lr_drop_factor = parse_num(key, v)?,
                "shuffle_entities" => t.shuffle_entities = parse_bool(key, v)?,
                "record_wall_time" => t.record_wall_time = parse_bool(key, v)?,
                other => {
                    return Err(Failure::usage(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let missing = |k: &str| Failure::usage(format!("config is missing required key {k:?}"));
        let cfg = RunConfig {
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            out_dir: out_dir.ok_or_else(|| missing("out_dir"))?,
            family: family.ok_or_else(|| missing("family"))?,
            arch: arch.ok_or_else(|| missing("arch"))?,
            pooling,
            train: t,
        };
        cfg.train.validate()?;
        Ok(cfg)
    }
}
