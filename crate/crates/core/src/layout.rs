//! How a linear layer's weights are cut into groups and subsets.
//!
//! Weights are stored `d_in × d_out` (activations multiply on the left).
//! Groups are formed from `G` consecutive weights of the output-major
//! traversal, so with `G = d_in` every group is exactly one output channel.
//! `N_G` consecutive groups form a subset that shares one `V`; the last
//! subset may hold fewer groups.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSize {
    Fixed(usize),
    /// One group per output channel.
    Channel,
}

impl GroupSize {
    pub fn resolve(self, d_in: usize) -> usize {
        match self {
            GroupSize::Fixed(g) => g,
            GroupSize::Channel => d_in,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub rows: usize,
    pub cols: usize,
    pub group: usize,
    pub groups_per_subset: usize,
}

impl LayerLayout {
    pub fn new(rows: usize, cols: usize, group_size: GroupSize, groups_per_subset: usize) -> Result<Self> {
        let group = group_size.resolve(rows);
        if group == 0 || groups_per_subset == 0 {
            return Err(Error::InvalidConfig("group size and groups per subset must be positive".into()));
        }
        if !(rows * cols).is_multiple_of(group) {
            return Err(Error::InvalidConfig(format!("{rows}x{cols} layer is not divisible into groups of {group}")));
        }
        Ok(Self { rows, cols, group, groups_per_subset })
    }

    pub fn num_weights(&self) -> usize {
        self.rows * self.cols
    }

    pub fn num_groups(&self) -> usize {
        self.num_weights() / self.group
    }

    pub fn num_subsets(&self) -> usize {
        self.num_groups().div_ceil(self.groups_per_subset)
    }

    pub fn subset_groups(&self, subset: usize) -> Range<usize> {
        let start = subset * self.groups_per_subset;
        start..(start + self.groups_per_subset).min(self.num_groups())
    }

    /// Row-major offset in the `rows × cols` matrix of weight `k` of `group`.
    #[inline]
    pub fn weight_offset(&self, group: usize, k: usize) -> usize {
        let t = group * self.group + k;
        let (col, row) = (t / self.rows, t % self.rows);
        row * self.cols + col
    }

    /// Group owning the row-major offset `flat`.
    #[inline]
    pub fn group_of(&self, flat: usize) -> usize {
        let (row, col) = (flat / self.cols, flat % self.cols);
        (col * self.rows + row) / self.group
    }

    /// Weights of `groups` laid out as a `groups × G` matrix.
    pub fn gather(&self, w: &Tensor, groups: Range<usize>) -> Tensor {
        let n = groups.len();
        let mut out = Vec::with_capacity(n * self.group);
        for gi in groups {
            for k in 0..self.group {
                out.push(w.data()[self.weight_offset(gi, k)]);
            }
        }
        Tensor::new(vec![n, self.group], out).expect("gather shape")
    }

    /// Inverse of [`LayerLayout::gather`] over all groups.
    pub fn scatter(&self, grouped: &[f64]) -> Tensor {
        let mut out = vec![0.0; self.num_weights()];
        for gi in 0..self.num_groups() {
            for k in 0..self.group {
                out[self.weight_offset(gi, k)] = grouped[gi * self.group + k];
            }
        }
        Tensor::new(vec![self.rows, self.cols], out).expect("scatter shape")
    }
}
