//! SWARM cells and layers.
//!
//! A SWARM cell is an LSTM cell whose gates see, besides the entity input
//! `x_i` and its own hidden state `h_i`, a population input `p_i` pooled
//! from the hidden states of all entities:
//!
//! ```text
//! g_i = σ(W_gx x_i + W_gh h_i + W_gp p_i + b_g)   for g ∈ {input, forget, output}
//! u_i = tanh(W_ux x_i + W_uh h_i + W_up p_i + b_u)
//! c_i ← f_i ∘ c_i + i_i ∘ u_i,   h_i ← o_i ∘ tanh(c_i)
//! ```
//!
//! A SWARM layer runs the cell `T` times over the whole population from a
//! zero state, re-presenting the same `x` each time, and maps `concat(h, c)`
//! through a shared entity-wise linear head. All entities update
//! synchronously: `p` is pooled from the state entering the iteration.

use rand::Rng;

use crate::array::Array;
use crate::batch::PopulationBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{affine, bind_one, join, uniform_init, Tensors};
use crate::scalar::Scalar;

/// Population function feeding the gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationPool {
    /// Masked mean over all entities of the task.
    Mean,
    /// Mean over strictly preceding entities; makes the layer autoregressive.
    CausalMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

/// Cell weights. Gate matrices are stacked row-wise in the order of
/// [`Gate`], so `w_x` is `[4H, d_x]`, `w_h` and `w_p` are `[4H, H]` and `b`
/// is `[4H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwarmCellParams<T> {
    pub w_x: T,
    pub w_h: T,
    pub w_p: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwarmLayerParams<T> {
    pub cell: SwarmCellParams<T>,
    /// `[d_y, 2H]`, applied to `concat(h, c)`.
    pub out_w: T,
    pub out_b: T,
    pub iterations: usize,
    pub pooling: PopulationPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwarmState<T> {
    pub h: T,
    pub c: T,
}

impl<T> SwarmCellParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SwarmCellParams<U> {
        SwarmCellParams {
            w_x: f(&self.w_x),
            w_h: f(&self.w_h),
            w_p: f(&self.w_p),
            b: f(&self.b),
        }
    }
}

impl<T> SwarmLayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SwarmLayerParams<U> {
        SwarmLayerParams {
            cell: self.cell.map(f),
            out_w: f(&self.out_w),
            out_b: f(&self.out_b),
            iterations: self.iterations,
            pooling: self.pooling,
        }
    }
}

impl<T> Tensors<T> for SwarmLayerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "cell.w_x"), &self.cell.w_x);
        f(join(prefix, "cell.w_h"), &self.cell.w_h);
        f(join(prefix, "cell.w_p"), &self.cell.w_p);
        f(join(prefix, "cell.b"), &self.cell.b);
        f(join(prefix, "out_w"), &self.out_w);
        f(join(prefix, "out_b"), &self.out_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.cell.w_x);
        f(&mut self.cell.w_h);
        f(&mut self.cell.w_p);
        f(&mut self.cell.b);
        f(&mut self.out_w);
        f(&mut self.out_b);
    }
}

impl<F: Scalar> SwarmCellParams<Array<F>> {
    pub fn hidden(&self) -> usize {
        self.w_h.dim(1)
    }

    pub fn d_x(&self) -> usize {
        self.w_x.dim(1)
    }

    /// Row block of one gate inside the stacked matrices.
    pub fn gate_rows(&self, gate: Gate) -> std::ops::Range<usize> {
        let h = self.hidden();
        gate as usize * h..(gate as usize + 1) * h
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.w_h.dim(1);
        let d_x = self.w_x.dim(1);
        let ok = self.w_x.shape() == [4 * h, d_x]
            && self.w_h.shape() == [4 * h, h]
            && self.w_p.shape() == [4 * h, h]
            && self.b.shape() == [4 * h];
        if !ok {
            return Err(Error::shape(
                "swarm cell params",
                &[4 * h, h],
                self.w_p.shape(),
            ));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> SwarmCellParams<Var> {
        self.map(&mut |a| bind_one(g, a, trainable))
    }
}

impl<F: Scalar> SwarmLayerParams<Array<F>> {
    pub fn hidden(&self) -> usize {
        self.cell.hidden()
    }

    pub fn d_x(&self) -> usize {
        self.cell.d_x()
    }

    pub fn d_y(&self) -> usize {
        self.out_w.dim(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        if self.iterations == 0 {
            return Err(Error::Contract(
                "a SWARM layer needs at least one iteration".into(),
            ));
        }
        let h = self.hidden();
        if self.out_w.rank() != 2
            || self.out_w.dim(1) != 2 * h
            || self.out_b.shape() != [self.d_y()]
        {
            return Err(Error::shape(
                "swarm output head",
                &[self.d_y(), 2 * h],
                self.out_w.shape(),
            ));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> SwarmLayerParams<Var> {
        self.map(&mut |a| bind_one(g, a, trainable))
    }

    /// Scalar count: `4·(H·d_x + H² + H² + H) + d_y·2H + d_y`.
    pub fn param_count(d_x: usize, d_y: usize, hidden: usize) -> usize {
        4 * (hidden * d_x + 2 * hidden * hidden + hidden) + d_y * 2 * hidden + d_y
    }
}

/// Fresh layer: weights `U(±1/√fan_in)`, biases zero except the forget gate
/// bias, which starts at 1.
pub fn init_swarm<F: Scalar>(
    d_x: usize,
    d_y: usize,
    hidden: usize,
    iterations: usize,
    pooling: PopulationPool,
    rng: &mut impl Rng,
) -> Result<SwarmLayerParams<Array<F>>> {
    if d_x == 0 || d_y == 0 || hidden == 0 || iterations == 0 {
        return Err(Error::InvalidArgument(format!(
            "SWARM dims must be positive (d_x={d_x}, d_y={d_y}, H={hidden}, T={iterations})"
        )));
    }
    let mut b = Array::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].fill(F::one());
    Ok(SwarmLayerParams {
        cell: SwarmCellParams {
            w_x: uniform_init(rng, &[4 * hidden, d_x], d_x),
            w_h: uniform_init(rng, &[4 * hidden, hidden], hidden),
            w_p: uniform_init(rng, &[4 * hidden, hidden], hidden),
            b,
        },
        out_w: uniform_init(rng, &[d_y, 2 * hidden], 2 * hidden),
        out_b: Array::zeros(&[d_y]),
        iterations,
        pooling,
    })
}

/// `W_x·x_i + b` for every entity; constant across iterations.
pub fn input_projection<F: Scalar>(
    g: &mut Graph<F>,
    cell: &SwarmCellParams<Var>,
    x: Var,
) -> Result<Var> {
    let d_x = g.shape(cell.w_x)[1];
    if g.shape(x).len() != 3 || g.shape(x)[1] != d_x {
        return Err(Error::shape("swarm input", &[d_x], g.shape(x)));
    }
    affine(g, cell.w_x, cell.b, x)
}

/// Population term `p` for each entity, shaped for broadcasting against
/// `[B, H, N]`.
fn population<F: Scalar>(
    g: &mut Graph<F>,
    h: Var,
    pooling: PopulationPool,
    lengths: &[usize],
) -> Result<Var> {
    match pooling {
        PopulationPool::Mean => {
            let hidden = g.shape(h)[1];
            let p = g.masked_mean(h, lengths)?;
            g.reshape(p, &[lengths.len(), hidden, 1])
        }
        PopulationPool::CausalMean => g.causal_mean(h, lengths),
    }
}

/// One synchronous cell update of every entity.
///
/// `x_proj` is [`input_projection`] of the input. `state == None` stands for
/// the zero state, where the recurrent and population terms vanish. Returns
/// the new state and `concat(h, c)` as `[B, 2H, N]`.
pub fn cell_step<F: Scalar>(
    g: &mut Graph<F>,
    cell: &SwarmCellParams<Var>,
    x_proj: Var,
    state: Option<&SwarmState<Var>>,
    pooling: PopulationPool,
    lengths: &[usize],
) -> Result<(SwarmState<Var>, Var)> {
    let hidden = g.shape(cell.w_h)[1];
    let pre = match state {
        None => x_proj,
        Some(s) => {
            let rec = g.linear(cell.w_h, s.h)?;
            let p = population(g, s.h, pooling, lengths)?;
            let pop = g.linear(cell.w_p, p)?;
            let pre = g.add(x_proj, rec)?;
            g.add(pre, pop)?
        }
    };
    let hc = g.lstm_cell(pre, state.map(|s| s.c), Some(lengths))?;
    let h = g.slice(hc, 1, 0, hidden)?;
    let c = g.slice(hc, 1, hidden, hidden)?;
    Ok((SwarmState { h, c }, hc))
}

/// Graph form of a SWARM layer over `x: [B, d_x, N]`, giving `[B, d_y, N]`.
pub fn swarm_layer<F: Scalar>(
    g: &mut Graph<F>,
    p: &SwarmLayerParams<Var>,
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    if p.iterations == 0 {
        return Err(Error::Contract(
            "a SWARM layer needs at least one iteration".into(),
        ));
    }
    let x_proj = input_projection(g, &p.cell, x)?;
    let mut state = None;
    let mut hc = x_proj;
    for _ in 0..p.iterations {
        let (next, out) = cell_step(g, &p.cell, x_proj, state.as_ref(), p.pooling, lengths)?;
        state = Some(next);
        hc = out;
    }
    let y = affine(g, p.out_w, p.out_b, hc)?;
    g.mask(y, lengths)
}

/// Layers applied in sequence with a ReLU between consecutive layers.
pub fn swarm_stack<F: Scalar>(
    g: &mut Graph<F>,
    layers: &[SwarmLayerParams<Var>],
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    let mut y = x;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            y = g.relu(y);
        }
        y = swarm_layer(g, layer, y, lengths)?;
    }
    Ok(y)
}

/// Apply one cell update to an explicit state (array form).
pub fn swarm_cell_step<F: Scalar>(
    cell: &SwarmCellParams<Array<F>>,
    x: &PopulationBatch<F>,
    state: &SwarmState<Array<F>>,
    pooling: PopulationPool,
) -> Result<SwarmState<Array<F>>> {
    cell.validate()?;
    let expect = [x.batch_size(), cell.hidden(), x.n_max()];
    if state.h.shape() != expect || state.c.shape() != expect {
        return Err(Error::shape("swarm state", &expect, state.h.shape()));
    }
    let mut g = Graph::new();
    let cp = cell.bind(&mut g, false);
    let xv = g.constant(x.values().clone());
    let s = SwarmState {
        h: g.constant(state.h.clone()),
        c: g.constant(state.c.clone()),
    };
    let x_proj = input_projection(&mut g, &cp, xv)?;
    let (next, _) = cell_step(&mut g, &cp, x_proj, Some(&s), pooling, x.lengths())?;
    Ok(SwarmState {
        h: g.value(next.h).clone(),
        c: g.value(next.c).clone(),
    })
}

pub fn swarm_layer_forward<F: Scalar>(
    params: &SwarmLayerParams<Array<F>>,
    x: &PopulationBatch<F>,
) -> Result<PopulationBatch<F>> {
    swarm_stack_forward(std::slice::from_ref(params), x)
}

pub fn swarm_stack_forward<F: Scalar>(
    layers: &[SwarmLayerParams<Array<F>>],
    x: &PopulationBatch<F>,
) -> Result<PopulationBatch<F>> {
    let mut d = x.features();
    for l in layers {
        l.validate()?;
        if l.d_x() != d {
            return Err(Error::shape("swarm stack", &[d], &[l.d_x()]));
        }
        d = l.d_y();
    }
    let mut g = Graph::new();
    let bound: Vec<_> = layers.iter().map(|l| l.bind(&mut g, false)).collect();
    let xv = g.constant(x.values().clone());
    let y = swarm_stack(&mut g, &bound, xv, x.lengths())?;
    PopulationBatch::new(g.value(y).clone(), x.lengths().to_vec())
}
