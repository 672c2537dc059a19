//! Starting values for the codebook parameters.
//!
//! Rank 1 comes from a clip search per group: the clipped range's
//! half-width becomes `S₁` and its negated midpoint `B′`, with `V₁` the
//! uniform grid. Higher ranks start with `S_r = 0`, so the initial codebook
//! is exactly the rank-1 one; `V₂` holds normalized Gaussian quantiles and
//! `V_r` for `r ≥ 3` small sorted uniform draws.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::codebook::{invert_reparam, uniform_qps, CodebookParams, QuantConfig};
use crate::math::{normal_quantile, ARTANH_CLAMP};
use crate::quantizer::SortedCodebook;
use crate::tensor::Tensor;
use crate::Result;

/// Shrink factors `1.00, 0.99, …, 0.30`.
pub fn alpha_grid() -> impl Iterator<Item = f64> + Clone {
    (30..=100).rev().map(|k| k as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipChoice {
    pub alpha: f64,
    pub s1: f64,
    pub bprime: f64,
    /// Squared quantization error of the group at the chosen `alpha`.
    pub sse: f64,
}

/// Rank-1 codebook `S₁·grid − B` for a given clip, after the offset has
/// been snapped onto the grid so the row contains zero.
pub fn rank1_codebook(s1: f64, bprime: f64, levels: usize, eps: f64) -> Result<SortedCodebook> {
    let cp: Vec<f64> = uniform_qps(levels).iter().map(|v| s1 * v).collect();
    let raw = SortedCodebook::new(&cp, eps)?;
    let b = cp[raw.perm()[raw.index_of(bprime)]];
    let row: Vec<f64> = cp.iter().map(|c| c - b).collect();
    SortedCodebook::new(&row, eps)
}

pub fn group_sse(group: &[f64], book: &SortedCodebook) -> f64 {
    group
        .iter()
        .map(|&w| {
            let e = w - book.quantize(w);
            e * e
        })
        .sum()
}

/// Clip search for one group; the first `alpha` reaching the minimum wins.
///
/// `B′` is `−mid`, limited to the open range its reparameterization can
/// reach, which only matters for groups that do not straddle zero.
pub fn clip_search_init(group: &[f64], bits: u32, eps: f64) -> Result<ClipChoice> {
    let (lo, hi) = min_max(group);
    let mid = (hi + lo) / 2.0;
    let half = (hi - lo) / 2.0;
    if half == 0.0 {
        return Ok(ClipChoice { alpha: 1.0, s1: 0.0, bprime: -lo, sse: 0.0 });
    }
    // B′ = tanh(B̄)·half cannot reach past ±half.
    let bprime = (-mid).clamp(-half * ARTANH_CLAMP, half * ARTANH_CLAMP);
    let levels = 1usize << bits;
    let mut best: Option<ClipChoice> = None;
    for alpha in alpha_grid() {
        let s1 = alpha * half;
        let book = rank1_codebook(s1, bprime, levels, eps)?;
        let sse = group_sse(group, &book);
        if best.is_none_or(|b| sse < b.sse) {
            best = Some(ClipChoice { alpha, s1, bprime, sse });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

pub fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `Φ⁻¹((k − 0.5)/n)` for `k = 1..n`, divided by the largest magnitude.
pub fn gaussian_qps(levels: usize) -> Vec<f64> {
    let q: Vec<f64> = (1..=levels).map(|k| normal_quantile((k as f64 - 0.5) / levels as f64)).collect();
    let m = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    q.iter().map(|v| v / m).collect()
}

/// Initial parameters of one subset; `groups` is `N_G × G`.
///
/// Returns the chosen shrink factor of every group next to the parameters.
pub fn init_params(groups: &Tensor, cfg: &QuantConfig, rng: &mut impl Rng) -> Result<(CodebookParams, Vec<f64>)> {
    let (ng, _) = groups.dims2("init_params")?;
    let nq = cfg.levels();
    let rank = cfg.rank;
    let mut w_min = Vec::with_capacity(ng);
    let mut w_max = Vec::with_capacity(ng);
    let mut s1 = Vec::with_capacity(ng);
    let mut bprime = Vec::with_capacity(ng);
    let mut alphas = Vec::with_capacity(ng);
    for g in 0..ng {
        let row = groups.row(g);
        let (lo, hi) = min_max(row);
        let choice = clip_search_init(row, cfg.bits, cfg.eps)?;
        w_min.push(lo);
        w_max.push(hi);
        s1.push(choice.s1);
        bprime.push(choice.bprime);
        alphas.push(choice.alpha);
    }
    let coef: Vec<f64> = w_min.iter().zip(&w_max).map(|(lo, hi)| (hi - lo) / 2.0).collect();

    let mut sbar = vec![0.0; rank * ng];
    for g in 0..ng {
        sbar[g] = invert_reparam(s1[g], coef[g]);
    }
    let mut v = Vec::with_capacity(rank * nq);
    v.extend(uniform_qps(nq));
    if rank >= 2 {
        v.extend(gaussian_qps(nq));
    }
    for _ in 2..rank {
        let mut row: Vec<f64> = (0..nq).map(|_| rng.random_range(-0.1..0.1)).collect();
        row.sort_by(f64::total_cmp);
        v.extend(row);
    }
    let vbar = v.iter().map(|&x| invert_reparam(x, 1.0)).collect();
    let bbar = bprime.iter().zip(&coef).map(|(&b, &h)| invert_reparam(b, h)).collect();
    let params = CodebookParams {
        sbar: Tensor::matrix(rank, ng, sbar)?,
        vbar: Tensor::matrix(rank, nq, vbar)?,
        bbar: Tensor::vector(bbar),
        w_min,
        w_max,
    };
    Ok((params, alphas))
}
