//! Shared helpers for the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarmset::params::Tensors;
use swarmset::{Array, Graph, PopulationBatch, Result, Scalar, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_array<F: Scalar>(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Array<F> {
    Array::from_fn(shape, |_| F::of(rng.random_range(-scale..scale)))
}

/// Random batch with the given cardinalities; padding is filled with large
/// junk so leaks show up.
pub fn random_batch<F: Scalar>(
    rng: &mut impl Rng,
    d: usize,
    lengths: &[usize],
) -> PopulationBatch<F> {
    let n_max = *lengths.iter().max().unwrap();
    let sets: Vec<Array<F>> = lengths
        .iter()
        .map(|&n| uniform_array(rng, &[d, n], 1.5))
        .collect();
    let refs: Vec<&Array<F>> = sets.iter().collect();
    let mut b = PopulationBatch::from_sets(&refs).unwrap();
    assert_eq!(b.n_max(), n_max);
    b.fill_padding(|| F::of(1e3));
    b
}

pub fn random_perm(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Column `j` of `[D, N]` becomes column `perm[j]`'s data: out[:, j] = x[:, perm[j]].
pub fn permute_columns<F: Scalar>(x: &Array<F>, perm: &[usize]) -> Array<F> {
    let (d, n) = (x.dim(0), x.dim(1));
    Array::from_fn(&[d, n], |idx| {
        let (r, c) = (idx / n, idx % n);
        x.data()[r * n + perm[c]]
    })
}

/// Relative error with a floor on the magnitude so that tiny gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences (step 1e-5) for every entry of every tensor in `params`.
/// Returns the worst relative error.
pub fn grad_check<P, B>(
    params: &P,
    bind: impl Fn(&mut Graph<f64>, &P, bool) -> B,
    loss: impl Fn(&mut Graph<f64>, &B) -> Result<Var>,
) -> f64
where
    P: Tensors<Array<f64>> + Clone,
    B: Tensors<Var>,
{
    let eval = |p: &P| -> f64 {
        let mut g = Graph::new();
        let vars = bind(&mut g, p, false);
        let l = loss(&mut g, &vars).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars = bind(&mut g, params, true);
    let l = loss(&mut g, &vars).unwrap();
    g.backward(l).unwrap();
    let analytic: Vec<Array<f64>> = vars
        .tensors()
        .into_iter()
        .map(|&v| g.grad_or_zeros(v))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let sizes: Vec<usize> = params.tensors().iter().map(|a| a.len()).collect();
    for (ti, &size) in sizes.iter().enumerate() {
        for e in 0..size {
            let nudge = |delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut(&mut |a| {
                    if k == ti {
                        a.data_mut()[e] += delta;
                    }
                    k += 1;
                });
                eval(&p)
            };
            let numeric = (nudge(h) - nudge(-h)) / (2.0 * h);
            let err = rel_err(analytic[ti].data()[e], numeric);
            assert!(
                err.is_finite(),
                "non-finite gradient check at tensor {ti} entry {e}"
            );
            worst = worst.max(err);
        }
    }
    worst
}

/// `Σ r ⊙ y` for a fixed random `r`, a generic scalar probe of `y`.
pub fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = uniform_array::<f64>(&mut rng(seed), &shape, 1.0);
    let rv = g.constant(r);
    let prod = g.mul(y, rv)?;
    Ok(g.sum(prod))
}

/// A plain list of tensors as a parameter structure, for checking single ops.
#[derive(Clone, Debug)]
pub struct TensorList<T>(pub Vec<T>);

impl<T> Tensors<T> for TensorList<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, a) in self.0.iter().enumerate() {
            f(format!("{prefix}{i}"), a);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.0.iter_mut().for_each(f);
    }
}

impl<T> std::ops::Index<usize> for TensorList<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

pub fn bind_list(
    g: &mut Graph<f64>,
    p: &TensorList<Array<f64>>,
    trainable: bool,
) -> TensorList<Var> {
    TensorList(
        p.0.iter()
            .map(|a| {
                if trainable {
                    g.param(a.clone())
                } else {
                    g.constant(a.clone())
                }
            })
            .collect(),
    )
}
