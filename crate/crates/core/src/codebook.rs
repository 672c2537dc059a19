//! Codebook parameters and their reparameterization.
//!
//! For one subset of `N_G` groups the learned leaves are `S̄` (rank × N_G),
//! `V̄` (rank × N_Q) and `B̄` (N_G). They map to
//!
//! - `S = tanh(S̄) · h`, with `h` the half-range `(max − min) / 2` of each group,
//! - `V = tanh(V̄)`,
//! - `B′ = tanh(B̄) · h`, and `B` = the element of `C′ = SᵀV` picked by
//!   quantizing `B′` against it,
//!
//! and the codebook is `C = SᵀV − B`. Because `B` is an element of its
//! `C′` row, every row of `C` contains an exact zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::layout::GroupSize;
use crate::math::{self, ARTANH_CLAMP, CODEWORD_EPS};
use crate::quantizer::SortedCodebook;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub bits: u32,
    pub group_size: GroupSize,
    pub rank: usize,
    pub groups_per_subset: usize,
    pub eps: f64,
    pub dq_bits_s: u32,
    pub dq_bits_v: u32,
    pub dq_group: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Freeze `S₁`, `V₁` and `B̄` at their initial values.
    pub fix_rank1: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            group_size: GroupSize::Fixed(128),
            rank: 2,
            groups_per_subset: 32,
            eps: CODEWORD_EPS,
            dq_bits_s: 4,
            dq_bits_v: 8,
            dq_group: 16,
            epochs: 10,
            batch: 4,
            lr: 0.01,
            seed: 0,
            fix_rank1: false,
        }
    }
}

impl QuantConfig {
    /// Number of codewords per row, `2^bits`.
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(2..=8).contains(&self.bits) {
            return bad("bits must be in 2..=8");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if self.groups_per_subset == 0 || self.dq_group == 0 || self.batch == 0 {
            return bad("groups per subset, dq group and batch must be positive");
        }
        if matches!(self.group_size, GroupSize::Fixed(0)) {
            return bad("group size must be positive");
        }
        if !(2..=8).contains(&self.dq_bits_s) || !(2..=8).contains(&self.dq_bits_v) {
            return bad("double-quantization bits must be in 2..=8");
        }
        if !(self.eps > 0.0) || !self.lr.is_finite() || self.lr < 0.0 {
            return bad("eps must be positive and lr finite and non-negative");
        }
        Ok(())
    }

    /// Whether `V₁` is the implicit uniform grid rather than a stored row.
    pub fn implicit_v1(&self) -> bool {
        self.fix_rank1
    }
}

/// `[−1, −1 + 2/(N_Q − 1), …, 1]`.
pub fn uniform_qps(levels: usize) -> Vec<f64> {
    let n = (levels - 1) as f64;
    (0..levels).map(|k| (2.0 * k as f64 - n) / n).collect()
}

/// `C[i][k] = Σ_r S[r][i]·V[r][k] − B[i]`.
pub fn build_codebook(s: &Tensor, v: &Tensor, b: &[f64]) -> Result<Tensor> {
    let (rank, groups) = s.dims2("build_codebook")?;
    let (rank_v, _) = v.dims2("build_codebook")?;
    if rank != rank_v || b.len() != groups {
        return Err(Error::ShapeMismatch {
            op: "build_codebook",
            detail: format!("S {:?}, V {:?}, B {}", s.shape(), v.shape(), b.len()),
        });
    }
    let mut c = tensor::matmul(&tensor::transpose(s)?, v)?;
    let nq = v.shape()[1];
    for (i, &bi) in b.iter().enumerate() {
        for x in &mut c.data_mut()[i * nq..(i + 1) * nq] {
            *x -= bi;
        }
    }
    Ok(c)
}

/// `S[i] = tanh(S̄[i]) · coefficient[i]`.
pub fn reparam_scale(sbar_row: &[f64], coefficients: &[f64]) -> Vec<f64> {
    sbar_row.iter().zip(coefficients).map(|(&s, &h)| math::tanh(s) * h).collect()
}

/// `V = tanh(V̄)`.
pub fn reparam_qps(vbar: &Tensor) -> Tensor {
    vbar.map(math::tanh)
}

/// `artanh(value / coefficient)` with the ratio clamped to
/// `±(1 − 1e-7)`; a zero coefficient maps to 0.
pub fn invert_reparam(value: f64, coefficient: f64) -> f64 {
    if coefficient == 0.0 {
        return 0.0;
    }
    math::atanh((value / coefficient).clamp(-ARTANH_CLAMP, ARTANH_CLAMP))
}

/// For each group, the element of `C′ = SᵀV` chosen by quantizing `B′`
/// against that row.
pub fn substitute_offset(bprime: &[f64], s: &Tensor, v: &Tensor, eps: f64) -> Result<Vec<f64>> {
    let cp = build_codebook(s, v, &vec![0.0; bprime.len()])?;
    bprime
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let book = SortedCodebook::new(cp.row(i), eps)?;
            Ok(cp.at(i, book.perm()[book.index_of(b)]))
        })
        .collect()
}

/// Learnable state of one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookParams {
    pub sbar: Tensor,
    pub vbar: Tensor,
    pub bbar: Tensor,
    pub w_min: Vec<f64>,
    pub w_max: Vec<f64>,
}

/// Quantities derived from [`CodebookParams`] for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Derived {
    pub s: Tensor,
    pub v: Tensor,
    pub bprime: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Tensor,
}

impl CodebookParams {
    /// Half-range coefficient of each group.
    pub fn coefficients(&self) -> Vec<f64> {
        self.w_min.iter().zip(&self.w_max).map(|(lo, hi)| (hi - lo) / 2.0).collect()
    }

    pub fn rank(&self) -> usize {
        self.sbar.shape()[0]
    }

    pub fn groups(&self) -> usize {
        self.sbar.shape()[1]
    }

    pub fn levels(&self) -> usize {
        self.vbar.shape()[1]
    }

    pub fn derive_s(&self) -> Tensor {
        let coef = self.coefficients();
        let (rank, groups) = (self.rank(), self.groups());
        let mut data = Vec::with_capacity(rank * groups);
        for r in 0..rank {
            data.extend(reparam_scale(self.sbar.row(r), &coef));
        }
        Tensor::matrix(rank, groups, data).expect("S shape")
    }

    /// `V`, with row 1 pinned to the uniform grid when `implicit_v1`.
    pub fn derive_v(&self, implicit_v1: bool) -> Tensor {
        let mut v = reparam_qps(&self.vbar);
        if implicit_v1 {
            let nq = self.levels();
            v.data_mut()[..nq].copy_from_slice(&uniform_qps(nq));
        }
        v
    }

    pub fn derive_bprime(&self) -> Vec<f64> {
        reparam_scale(self.bbar.data(), &self.coefficients())
    }

    pub fn derive(&self, cfg: &QuantConfig) -> Result<Derived> {
        let s = self.derive_s();
        let v = self.derive_v(cfg.implicit_v1());
        let bprime = self.derive_bprime();
        let b = substitute_offset(&bprime, &s, &v, cfg.eps)?;
        let c = build_codebook(&s, &v, &b)?;
        Ok(Derived { s, v, bprime, b, c })
    }
}
