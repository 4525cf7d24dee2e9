//! Baseline set layers: the set-linear layer with mean or max pooling,
//! entity-wise maps, and a sequence LSTM that reads entities in storage
//! order (deliberately not permutation-equivariant).

use rand::Rng;

use crate::array::Array;
use crate::batch::PopulationBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{affine, bind_one, join, uniform_init, Tensors};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetPool {
    Mean,
    Max,
}

/// Set-linear layer `y_i = w_eq·x_i + w_neq·pool(x) + b`.
///
/// `w_eq` is the entity-wise map and `w_neq` acts on the pooled population.
/// For mean pooling this spans the same functions as the pairwise form
/// `Σ_k W_ik x_k` with `W_ii = A`, `W_ik = C` (`i ≠ k`) through
/// `w_eq = A − C`, `w_neq = N·C`, while staying independent of `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SetLinearParams<T> {
    pub w_eq: T,
    pub w_neq: T,
    pub b: T,
}

impl<T> SetLinearParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SetLinearParams<U> {
        SetLinearParams {
            w_eq: f(&self.w_eq),
            w_neq: f(&self.w_neq),
            b: f(&self.b),
        }
    }
}

impl<T> Tensors<T> for SetLinearParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "w_eq"), &self.w_eq);
        f(join(prefix, "w_neq"), &self.w_neq);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w_eq);
        f(&mut self.w_neq);
        f(&mut self.b);
    }
}

impl<F: Scalar> SetLinearParams<Array<F>> {
    pub fn init(d_x: usize, d_y: usize, rng: &mut impl Rng) -> Self {
        SetLinearParams {
            w_eq: uniform_init(rng, &[d_y, d_x], d_x),
            w_neq: uniform_init(rng, &[d_y, d_x], d_x),
            b: Array::zeros(&[d_y]),
        }
    }

    pub fn d_x(&self) -> usize {
        self.w_eq.dim(1)
    }

    pub fn d_y(&self) -> usize {
        self.w_eq.dim(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_y, d_x) = (self.d_y(), self.d_x());
        if self.w_neq.shape() != [d_y, d_x] || self.b.shape() != [d_y] {
            return Err(Error::shape(
                "set_linear params",
                &[d_y, d_x],
                self.w_neq.shape(),
            ));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> SetLinearParams<Var> {
        self.map(&mut |a| bind_one(g, a, trainable))
    }
}

/// Graph form of the set-linear layer over `x: [B, d_x, N]`.
pub fn set_linear<F: Scalar>(
    g: &mut Graph<F>,
    p: &SetLinearParams<Var>,
    x: Var,
    lengths: &[usize],
    pool: SetPool,
) -> Result<Var> {
    let d_x = g.shape(p.w_eq)[1];
    if g.shape(x).get(1) != Some(&d_x) {
        return Err(Error::shape("set_linear", &[d_x], g.shape(x)));
    }
    let pooled = match pool {
        SetPool::Mean => g.masked_mean(x, lengths)?,
        SetPool::Max => g.masked_max(x, lengths)?,
    };
    let b = lengths.len();
    let pooled = g.reshape(pooled, &[b, d_x, 1])?;
    let shared = g.linear(p.w_neq, pooled)?;
    let local = affine(g, p.w_eq, p.b, x)?;
    let y = g.add(local, shared)?;
    g.mask(y, lengths)
}

fn run<F: Scalar>(
    x: &PopulationBatch<F>,
    body: impl FnOnce(&mut Graph<F>, Var) -> Result<Var>,
) -> Result<PopulationBatch<F>> {
    let mut g = Graph::new();
    let xv = g.constant(x.values().clone());
    let y = body(&mut g, xv)?;
    PopulationBatch::new(g.value(y).clone(), x.lengths().to_vec())
}

pub fn set_linear_forward<F: Scalar>(
    params: &SetLinearParams<Array<F>>,
    x: &PopulationBatch<F>,
    pool: SetPool,
) -> Result<PopulationBatch<F>> {
    params.validate()?;
    run(x, |g, xv| {
        let p = params.bind(g, false);
        set_linear(g, &p, xv, x.lengths(), pool)
    })
}

/// Entity-wise ReLU; padding stays zero.
pub fn relu_layer<F: Scalar>(x: &PopulationBatch<F>) -> Result<PopulationBatch<F>> {
    run(x, |g, xv| {
        let r = g.relu(xv);
        g.mask(r, x.lengths())
    })
}

/// `y_i = w·x_i + b` for every entity.
pub fn entitywise_linear<F: Scalar>(
    w: &Array<F>,
    b: &Array<F>,
    x: &PopulationBatch<F>,
) -> Result<PopulationBatch<F>> {
    if w.rank() != 2 || b.shape() != [w.dim(0)] {
        return Err(Error::shape("entitywise_linear", w.shape(), b.shape()));
    }
    run(x, |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = affine(g, wv, bv, xv)?;
        g.mask(y, x.lengths())
    })
}

/// One unidirectional LSTM layer; gate rows ordered input, forget, output,
/// candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams<T> {
    pub w_x: T,
    pub w_h: T,
    pub b: T,
}

/// Stacked unidirectional LSTM over the entity axis plus an entity-wise
/// linear head on the top hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLstmParams<T> {
    pub layers: Vec<LstmLayerParams<T>>,
    pub out_w: T,
    pub out_b: T,
}

impl<T> SeqLstmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SeqLstmParams<U> {
        SeqLstmParams {
            layers: self
                .layers
                .iter()
                .map(|l| LstmLayerParams {
                    w_x: f(&l.w_x),
                    w_h: f(&l.w_h),
                    b: f(&l.b),
                })
                .collect(),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
        }
    }
}

impl<T> Tensors<T> for SeqLstmParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("lstm{i}"));
            f(join(&p, "w_x"), &l.w_x);
            f(join(&p, "w_h"), &l.w_h);
            f(join(&p, "b"), &l.b);
        }
        f(join(prefix, "out_w"), &self.out_w);
        f(join(prefix, "out_b"), &self.out_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for l in &mut self.layers {
            f(&mut l.w_x);
            f(&mut l.w_h);
            f(&mut l.b);
        }
        f(&mut self.out_w);
        f(&mut self.out_b);
    }
}

impl<F: Scalar> SeqLstmParams<Array<F>> {
    /// Uniform `±1/√fan_in` weights, zero biases except forget gate = 1.
    pub fn init(d_x: usize, hidden: usize, layers: usize, d_y: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..layers.max(1))
            .map(|i| {
                let d_in = if i == 0 { d_x } else { hidden };
                let mut b = Array::zeros(&[4 * hidden]);
                b.data_mut()[hidden..2 * hidden].fill(F::one());
                LstmLayerParams {
                    w_x: uniform_init(rng, &[4 * hidden, d_in], d_in),
                    w_h: uniform_init(rng, &[4 * hidden, hidden], hidden),
                    b,
                }
            })
            .collect();
        SeqLstmParams {
            layers,
            out_w: uniform_init(rng, &[d_y, hidden], hidden),
            out_b: Array::zeros(&[d_y]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Err(Error::Contract(
                "sequence LSTM needs at least one layer".into(),
            ));
        };
        let h = first.w_h.dim(1);
        let mut d_in = first.w_x.dim(1);
        for l in &self.layers {
            if l.w_x.shape() != [4 * h, d_in]
                || l.w_h.shape() != [4 * h, h]
                || l.b.shape() != [4 * h]
            {
                return Err(Error::shape(
                    "seq_lstm params",
                    &[4 * h, d_in],
                    l.w_x.shape(),
                ));
            }
            d_in = h;
        }
        if self.out_w.rank() != 2
            || self.out_w.dim(1) != h
            || self.out_b.shape() != [self.out_w.dim(0)]
        {
            return Err(Error::shape("seq_lstm head", &[h], self.out_w.shape()));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> SeqLstmParams<Var> {
        self.map(&mut |a| bind_one(g, a, trainable))
    }
}

/// Graph form of the sequence LSTM. Each task is scanned from entity 0 to
/// `N_max − 1`; because the scan is causal, padding after a task's last
/// entity cannot affect its valid outputs, which are finally masked.
pub fn seq_lstm<F: Scalar>(
    g: &mut Graph<F>,
    p: &SeqLstmParams<Var>,
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    let n = *g
        .shape(x)
        .get(2)
        .ok_or_else(|| Error::shape("seq_lstm", g.shape(x), &[0, 0, 0]))?;
    let mut seq = x;
    for layer in &p.layers {
        let hidden = g.shape(layer.w_h)[1];
        let xin = affine(g, layer.w_x, layer.b, seq)?;
        let mut state: Option<(Var, Var)> = None;
        let mut hs = Vec::with_capacity(n);
        for t in 0..n {
            let mut pre = g.slice(xin, 2, t, 1)?;
            if let Some((h, _)) = state {
                let rec = g.linear(layer.w_h, h)?;
                pre = g.add(pre, rec)?;
            }
            let hc = g.lstm_cell(pre, state.map(|(_, c)| c), None)?;
            let h = g.slice(hc, 1, 0, hidden)?;
            let c = g.slice(hc, 1, hidden, hidden)?;
            hs.push(h);
            state = Some((h, c));
        }
        seq = g.concat(&hs, 2)?;
    }
    let y = affine(g, p.out_w, p.out_b, seq)?;
    g.mask(y, lengths)
}

pub fn seq_lstm_forward<F: Scalar>(
    params: &SeqLstmParams<Array<F>>,
    x: &PopulationBatch<F>,
) -> Result<PopulationBatch<F>> {
    params.validate()?;
    run(x, |g, xv| {
        let p = params.bind(g, false);
        seq_lstm(g, &p, xv, x.lengths())
    })
}
