//! Model families, architecture codes and a common forward interface.
//!
//! Codes are dash-separated positive integers: `H-T-L` for SWARM (hidden
//! width, iterations, layers) and `H-L` for the set-linear and sequence-LSTM
//! families.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::batch::PopulationBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{count_params, join, Tensors};
use crate::scalar::Scalar;
use crate::set_layers::{seq_lstm, set_linear, SeqLstmParams, SetLinearParams, SetPool};
use crate::swarm::{init_swarm, swarm_layer, PopulationPool, SwarmLayerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Swarm,
    SetLinear,
    SetLinearMax,
    SeqLstm,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Swarm => "swarm",
            ModelFamily::SetLinear => "setlinear",
            ModelFamily::SetLinearMax => "setlinear_max",
            ModelFamily::SeqLstm => "seqlstm",
        }
    }

    /// Whether outputs permute with the inputs.
    pub fn is_equivariant(self) -> bool {
        !matches!(self, ModelFamily::SeqLstm)
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swarm" => Ok(ModelFamily::Swarm),
            "setlinear" | "set_linear" => Ok(ModelFamily::SetLinear),
            "setlinear_max" | "set_linear_max" => Ok(ModelFamily::SetLinearMax),
            "seqlstm" | "seq_lstm" => Ok(ModelFamily::SeqLstm),
            other => Err(Error::InvalidArgument(format!(
                "unknown model family {other:?} (expected swarm, setlinear, setlinear_max or seqlstm)"
            ))),
        }
    }
}

/// How entity outputs become the model output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// One output column per entity (direct clustering logits).
    Entitywise,
    /// Masked mean over entities (mixture-parameter regression).
    MeanPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchCode {
    pub hidden: usize,
    /// SWARM only.
    pub iterations: Option<usize>,
    pub layers: usize,
}

impl ArchCode {
    pub fn parse(family: ModelFamily, code: &str) -> Result<Self> {
        let parts = code
            .split('-')
            .map(|p| match p.trim().parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => Err(Error::InvalidArgument(format!(
                    "architecture code {code:?}: {p:?} is not a positive integer"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        match (family, parts.as_slice()) {
            (ModelFamily::Swarm, &[h, t, l]) => Ok(ArchCode {
                hidden: h,
                iterations: Some(t),
                layers: l,
            }),
            (ModelFamily::Swarm, _) => Err(Error::InvalidArgument(format!(
                "SWARM architecture code {code:?} must have the form H-T-L"
            ))),
            (_, &[h, l]) => Ok(ArchCode {
                hidden: h,
                iterations: None,
                layers: l,
            }),
            (f, _) => Err(Error::InvalidArgument(format!(
                "{} architecture code {code:?} must have the form H-L",
                f.name()
            ))),
        }
    }
}

impl std::fmt::Display for ArchCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.iterations {
            Some(t) => write!(f, "{}-{}-{}", self.hidden, t, self.layers),
            None => write!(f, "{}-{}", self.hidden, self.layers),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub arch: ArchCode,
    pub d_in: usize,
    pub d_out: usize,
    pub readout: Readout,
    #[serde(default = "default_pooling")]
    pub pooling: PopulationPool,
}

fn default_pooling() -> PopulationPool {
    PopulationPool::Mean
}

/// Tape memory one evaluation batch may use. Forward passes keep every
/// intermediate, so large models on long populations are split into
/// smaller batches.
pub const EVAL_MEMORY_BYTES: usize = 512 << 20;

/// Output logits for direct clustering (maximum cluster count).
pub const DIRECT_CLUSTERS: usize = 10;

impl ModelSpec {
    pub fn new(
        family: ModelFamily,
        code: &str,
        d_in: usize,
        d_out: usize,
        readout: Readout,
    ) -> Result<Self> {
        let spec = ModelSpec {
            family,
            arch: ArchCode::parse(family, code)?,
            d_in,
            d_out,
            readout,
            pooling: PopulationPool::Mean,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.arch.hidden == 0 || self.arch.layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate model spec {self:?}"
            )));
        }
        if (self.family == ModelFamily::Swarm) != self.arch.iterations.is_some() {
            return Err(Error::InvalidArgument(format!(
                "architecture code {} does not fit family {}",
                self.arch,
                self.family.name()
            )));
        }
        Ok(())
    }

    /// `(d_x, d_y)` of each stacked layer for the SWARM and set-linear
    /// families: `d_in → H → … → H → d_out`.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let l = self.arch.layers;
        (0..l)
            .map(|i| {
                let dx = if i == 0 { self.d_in } else { self.arch.hidden };
                let dy = if i + 1 == l {
                    self.d_out
                } else {
                    self.arch.hidden
                };
                (dx, dy)
            })
            .collect()
    }

    /// Rough number of scalars a forward pass keeps on the tape per entity.
    /// Calibrated against measured peak memory of SWARM evaluation.
    pub fn tape_scalars_per_entity(&self) -> usize {
        let h = self.arch.hidden;
        let l = self.arch.layers;
        let io = self.d_in + 4 * self.d_out;
        match self.family {
            ModelFamily::Swarm => l * 20 * h * self.arch.iterations.unwrap_or(1) + io,
            ModelFamily::SetLinear | ModelFamily::SetLinearMax => l * 8 * h + io,
            ModelFamily::SeqLstm => l * 20 * h + io,
        }
    }

    /// Largest batch, at most `requested`, whose forward tape over
    /// populations of `n_max` entities stays within [`EVAL_MEMORY_BYTES`].
    /// Never below 1.
    pub fn eval_batch_limit(&self, n_max: usize, scalar_bytes: usize, requested: usize) -> usize {
        let per_task = self.tape_scalars_per_entity() * n_max.max(1) * scalar_bytes;
        (EVAL_MEMORY_BYTES / per_task.max(1)).clamp(1, requested.max(1))
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let h = self.arch.hidden;
        match self.family {
            ModelFamily::Swarm => self
                .layer_dims()
                .iter()
                .map(|&(dx, dy)| SwarmLayerParams::<Array<f32>>::param_count(dx, dy, h))
                .sum(),
            ModelFamily::SetLinear | ModelFamily::SetLinearMax => self
                .layer_dims()
                .iter()
                .map(|&(dx, dy)| 2 * dx * dy + dy)
                .sum(),
            ModelFamily::SeqLstm => {
                let first = 4 * h * (self.d_in + h + 1);
                let rest = (self.arch.layers - 1) * 4 * h * (2 * h + 1);
                first + rest + self.d_out * h + self.d_out
            }
        }
    }
}

/// Parameters of any family.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams<T> {
    Swarm(Vec<SwarmLayerParams<T>>),
    SetLinear(Vec<SetLinearParams<T>>),
    SeqLstm(SeqLstmParams<T>),
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        match self {
            ModelParams::Swarm(ls) => ModelParams::Swarm(ls.iter().map(|l| l.map(f)).collect()),
            ModelParams::SetLinear(ls) => {
                ModelParams::SetLinear(ls.iter().map(|l| l.map(f)).collect())
            }
            ModelParams::SeqLstm(p) => ModelParams::SeqLstm(p.map(f)),
        }
    }
}

impl<T> Tensors<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            ModelParams::Swarm(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    l.visit(&join(prefix, &format!("swarm{i}")), f);
                }
            }
            ModelParams::SetLinear(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    l.visit(&join(prefix, &format!("setlinear{i}")), f);
                }
            }
            ModelParams::SeqLstm(p) => p.visit(&join(prefix, "seqlstm"), f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        match self {
            ModelParams::Swarm(ls) => ls.iter_mut().for_each(|l| l.visit_mut(f)),
            ModelParams::SetLinear(ls) => ls.iter_mut().for_each(|l| l.visit_mut(f)),
            ModelParams::SeqLstm(p) => p.visit_mut(f),
        }
    }
}

/// A forward map from populations to per-entity outputs.
pub trait SetFunction<F: Scalar> {
    fn forward(&self, x: &PopulationBatch<F>) -> Result<PopulationBatch<F>>;
    fn d_out(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub spec: ModelSpec,
    pub params: ModelParams<Array<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let h = spec.arch.hidden;
        let params = match spec.family {
            ModelFamily::Swarm => {
                let t = spec.arch.iterations.expect("validated");
                ModelParams::Swarm(
                    spec.layer_dims()
                        .into_iter()
                        .map(|(dx, dy)| init_swarm(dx, dy, h, t, spec.pooling, rng))
                        .collect::<Result<_>>()?,
                )
            }
            ModelFamily::SetLinear | ModelFamily::SetLinearMax => ModelParams::SetLinear(
                spec.layer_dims()
                    .into_iter()
                    .map(|(dx, dy)| SetLinearParams::init(dx, dy, rng))
                    .collect(),
            ),
            ModelFamily::SeqLstm => ModelParams::SeqLstm(SeqLstmParams::init(
                spec.d_in,
                h,
                spec.arch.layers,
                spec.d_out,
                rng,
            )),
        };
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.params)
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> ModelParams<Var> {
        self.params.map(&mut |a| {
            if trainable {
                g.param(a.clone())
            } else {
                g.constant(a.clone())
            }
        })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            params: self.params.map(&mut |a| a.cast()),
        }
    }

    /// Array-only forward pass, `[B, d_in, N] → [B, d_out, N]` before the
    /// readout.
    pub fn entity_outputs(&self, x: &PopulationBatch<F>) -> Result<PopulationBatch<F>> {
        if x.features() != self.spec.d_in {
            return Err(Error::Incompatible(format!(
                "model expects {} input features, data has {}",
                self.spec.d_in,
                x.features()
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.values().clone());
        let y = forward_graph(&mut g, &self.spec, &p, xv, x.lengths())?;
        PopulationBatch::new(g.value(y).clone(), x.lengths().to_vec())
    }
}

impl<F: Scalar> SetFunction<F> for Model<F> {
    fn forward(&self, x: &PopulationBatch<F>) -> Result<PopulationBatch<F>> {
        self.entity_outputs(x)
    }

    fn d_out(&self) -> usize {
        self.spec.d_out
    }
}

/// Graph forward pass producing per-entity outputs `[B, d_out, N]`; the
/// readout is applied by the objective.
pub fn forward_graph<F: Scalar>(
    g: &mut Graph<F>,
    spec: &ModelSpec,
    params: &ModelParams<Var>,
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    match params {
        ModelParams::Swarm(layers) => {
            let mut y = x;
            for (i, layer) in layers.iter().enumerate() {
                if i > 0 {
                    y = g.relu(y);
                }
                y = swarm_layer(g, layer, y, lengths)?;
            }
            Ok(y)
        }
        ModelParams::SetLinear(layers) => {
            let pool = if spec.family == ModelFamily::SetLinearMax {
                SetPool::Max
            } else {
                SetPool::Mean
            };
            let mut y = x;
            for (i, layer) in layers.iter().enumerate() {
                if i > 0 {
                    y = g.relu(y);
                }
                y = set_linear(g, layer, y, lengths, pool)?;
            }
            Ok(y)
        }
        ModelParams::SeqLstm(p) => seq_lstm(g, p, x, lengths),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn codes_parse() {
        let c = ArchCode::parse(ModelFamily::Swarm, "192-10-1").unwrap();
        assert_eq!((c.hidden, c.iterations, c.layers), (192, Some(10), 1));
        let c = ArchCode::parse(ModelFamily::SetLinear, "64-6").unwrap();
        assert_eq!((c.hidden, c.iterations, c.layers), (64, None, 6));
        assert_eq!(c.to_string(), "64-6");
        assert!(ArchCode::parse(ModelFamily::SetLinear, "x-y").is_err());
        assert!(ArchCode::parse(ModelFamily::Swarm, "64-6").is_err());
        assert!(ArchCode::parse(ModelFamily::SeqLstm, "0-1").is_err());
    }

    #[test]
    fn analytic_counts_match_instantiated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (family, code) in [
            (ModelFamily::Swarm, "8-2-1"),
            (ModelFamily::Swarm, "6-3-3"),
            (ModelFamily::SetLinear, "16-4"),
            (ModelFamily::SetLinearMax, "5-1"),
            (ModelFamily::SeqLstm, "7-2"),
            (ModelFamily::SeqLstm, "4-1"),
        ] {
            for readout in [Readout::Entitywise, Readout::MeanPool] {
                let spec = ModelSpec::new(family, code, 2, 10, readout).unwrap();
                let m = Model::<f32>::init(&spec, &mut rng).unwrap();
                assert_eq!(m.param_count(), spec.param_count(), "{family:?} {code}");
            }
        }
    }

    #[test]
    fn swarm_single_layer_count_formula() {
        let spec =
            ModelSpec::new(ModelFamily::Swarm, "192-10-1", 2, 10, Readout::Entitywise).unwrap();
        let h = 192;
        assert_eq!(
            spec.param_count(),
            4 * (h * 2 + h * h + h * h + h) + (10 * 2 * h + 10)
        );
    }
}
