//! Padded batches of variable-cardinality entity sets.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::check_lengths;
use crate::scalar::Scalar;

/// A batch of entity sets stored as `[B, D, N_max]` plus the true
/// cardinality of every task.
///
/// Constructors zero the padding. Code that fills padding with other values
/// (tests do) must not change any masked result.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationBatch<F> {
    values: Array<F>,
    lengths: Vec<usize>,
}

impl<F: Scalar> PopulationBatch<F> {
    /// Wrap `values` of shape `[B, D, N_max]`. Padding is left untouched.
    pub fn new(values: Array<F>, lengths: Vec<usize>) -> Result<Self> {
        let &[b, _, n] = values.shape() else {
            return Err(Error::shape("population batch", values.shape(), &[0, 0, 0]));
        };
        check_lengths(&lengths, b, n)?;
        Ok(PopulationBatch { values, lengths })
    }

    /// Stack per-task `[D, N_b]` arrays, padding with zeros to the largest
    /// `N_b`.
    pub fn from_sets(sets: &[&Array<F>]) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Contract("population batch needs at least one task".into()))?;
        let d = first.dim(0);
        let n_max = sets.iter().map(|s| s.dim(1)).max().unwrap_or(0);
        let mut values = Array::zeros(&[sets.len(), d, n_max]);
        let mut lengths = Vec::with_capacity(sets.len());
        for (b, set) in sets.iter().enumerate() {
            if set.rank() != 2 || set.dim(0) != d {
                return Err(Error::shape("population batch", first.shape(), set.shape()));
            }
            let n = set.dim(1);
            for di in 0..d {
                let dst = (b * d + di) * n_max;
                values.data_mut()[dst..dst + n].copy_from_slice(&set.data()[di * n..(di + 1) * n]);
            }
            lengths.push(n);
        }
        Self::new(values, lengths)
    }

    pub fn values(&self) -> &Array<F> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array<F> {
        &mut self.values
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn batch_size(&self) -> usize {
        self.values.dim(0)
    }

    pub fn features(&self) -> usize {
        self.values.dim(1)
    }

    pub fn n_max(&self) -> usize {
        self.values.dim(2)
    }

    /// Task `b` as a `[D, N_b]` array without padding.
    pub fn task(&self, b: usize) -> Array<F> {
        let (d, n_max, n) = (self.features(), self.n_max(), self.lengths[b]);
        let mut data = Vec::with_capacity(d * n);
        for di in 0..d {
            let row = (b * d + di) * n_max;
            data.extend_from_slice(&self.values.data()[row..row + n]);
        }
        Array::new(&[d, n], data).expect("task slice shape")
    }

    /// Overwrite every padding slot with values from `fill`.
    pub fn fill_padding(&mut self, mut fill: impl FnMut() -> F) {
        let (b, d, n) = (self.batch_size(), self.features(), self.n_max());
        for bi in 0..b {
            for di in 0..d {
                let row = (bi * d + di) * n;
                for slot in &mut self.values.data_mut()[row + self.lengths[bi]..row + n] {
                    *slot = fill();
                }
            }
        }
    }

    /// Reorder the entities of task `b` so that new position `i` holds old
    /// entity `perm[i]`.
    pub fn permute_task(&mut self, b: usize, perm: &[usize]) {
        let (d, n_max) = (self.features(), self.n_max());
        assert_eq!(perm.len(), self.lengths[b], "permutation length");
        for di in 0..d {
            let row = (b * d + di) * n_max;
            let old: Vec<F> = self.values.data()[row..row + perm.len()].to_vec();
            for (i, &p) in perm.iter().enumerate() {
                self.values.data_mut()[row + i] = old[p];
            }
        }
    }
}
