//! Parameter structures are generic over their tensor slot: `Array<F>` when
//! stored, [`Var`](crate::Var) once bound into a [`Graph`](crate::Graph).
//! Every structure visits its tensors in one fixed order, which is the order
//! used by the optimizer and the checkpoint format.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::array::Array;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub trait Tensors<T> {
    /// Visit `(name, tensor)` pairs in canonical order.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T));

    fn tensors(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Total number of scalars held by a stored parameter structure.
pub fn count_params<F: Scalar>(p: &impl Tensors<Array<F>>) -> usize {
    p.tensors().iter().map(|a| a.len()).sum()
}

/// Bind every tensor as a trainable leaf (or a constant) of `g`.
pub(crate) fn bind_one<F: Scalar>(g: &mut Graph<F>, a: &Array<F>, trainable: bool) -> Var {
    if trainable {
        g.param(a.clone())
    } else {
        g.constant(a.clone())
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` entries.
pub(crate) fn uniform_init<F: Scalar>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
) -> Array<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array::from_fn(shape, |_| F::of(dist.sample(rng)))
}

/// Shared entity-wise affine map `w·x_i + b` over `[B,K,N]`.
pub(crate) fn affine<F: Scalar>(g: &mut Graph<F>, w: Var, b: Var, x: Var) -> crate::Result<Var> {
    let d = g.shape(b)[0];
    let y = g.linear(w, x)?;
    let b3 = g.reshape(b, &[1, d, 1])?;
    g.add(y, b3)
}
