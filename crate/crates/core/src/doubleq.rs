//! Uniform re-quantization of the learned `S` and `V` values.
//!
//! Values are cut into consecutive chunks of `dq_group`. Each chunk stores
//! a binary16 `scale`, an integer zero-code and one code per value:
//!
//! ```text
//! value = scale · (code − zero) / (2^bits − 1) · 2
//! ```
//!
//! The range of a chunk is `α·[min, max]` widened to contain 0, with `α`
//! grid-searched to minimize the chunk's reconstruction error.

use alloc::vec::Vec;

use half::f16;

use crate::codebook::{uniform_qps, CodebookParams, QuantConfig};
use crate::init::{alpha_grid, min_max};
use crate::math::{self, CODEWORD_EPS};
use crate::quantizer::SortedCodebook;
use crate::storage::{ArtifactHeader, SubsetArtifact};
use crate::tensor::Tensor;
use crate::Result;

/// Parameters of one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DqGroup {
    /// binary16 bit pattern.
    pub scale: u16,
    pub zero: u32,
}

impl DqGroup {
    pub fn scale(&self) -> f64 {
        f16::from_bits(self.scale).to_f64()
    }
}

#[inline]
pub fn dq_value(scale: f64, code: u32, zero: u32, bits: u32) -> f64 {
    let n = ((1u32 << bits) - 1) as f64;
    scale * (code as f64 - zero as f64) / n * 2.0
}

/// Encodes `values` with a fixed `alpha`.
pub fn encode_with_alpha(values: &[f64], bits: u32, alpha: f64) -> (DqGroup, Vec<u32>) {
    let n = (1u32 << bits) - 1;
    let (lo, hi) = min_max(values);
    let lo = (alpha * lo).min(0.0);
    let hi = (alpha * hi).max(0.0);
    let scale = f16::from_f64((hi - lo) / 2.0);
    let s = scale.to_f64();
    if !(s > 0.0) || !s.is_finite() {
        return (DqGroup { scale: f16::ZERO.to_bits(), zero: 0 }, alloc::vec![0; values.len()]);
    }
    let step = 2.0 * s / n as f64;
    let zero = math::round(-lo / step).clamp(0.0, n as f64) as u32;
    let codes = values.iter().map(|&v| math::round(v / step + zero as f64).clamp(0.0, n as f64) as u32).collect();
    (DqGroup { scale: scale.to_bits(), zero }, codes)
}

pub fn decode_group(group: DqGroup, codes: &[u32], bits: u32) -> Vec<f64> {
    let s = group.scale();
    codes.iter().map(|&c| dq_value(s, c, group.zero, bits)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DqChoice {
    pub alpha: f64,
    pub group: DqGroup,
    pub codes: Vec<u32>,
    pub sse: f64,
}

/// Exhaustive search over the shrink grid; earliest minimum wins.
pub fn grid_search_dq(values: &[f64], bits: u32) -> DqChoice {
    let mut best: Option<DqChoice> = None;
    for alpha in alpha_grid() {
        let (group, codes) = encode_with_alpha(values, bits, alpha);
        let sse = values.iter().zip(decode_group(group, &codes, bits)).map(|(v, d)| (v - d) * (v - d)).sum();
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(DqChoice { alpha, group, codes, sse });
        }
    }
    best.expect("grid is non-empty")
}

/// A double-quantized flat sequence of values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DqSection {
    pub groups: Vec<DqGroup>,
    pub codes: Vec<u32>,
}

impl DqSection {
    pub fn empty() -> Self {
        Self { groups: Vec::new(), codes: Vec::new() }
    }

    pub fn encode(values: &[f64], bits: u32, chunk: usize) -> Self {
        let mut out = Self::empty();
        for part in values.chunks(chunk) {
            let c = grid_search_dq(part, bits);
            out.groups.push(c.group);
            out.codes.extend(c.codes);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn decode(&self, bits: u32, chunk: usize) -> Vec<f64> {
        self.codes.chunks(chunk).zip(&self.groups).flat_map(|(codes, &g)| decode_group(g, codes, bits)).collect()
    }
}

/// Rebuilds `S` (rank × groups) from its stored form.
pub fn reconstruct_s(s1: &[u16], s_dq: &DqSection, rank: usize, bits: u32, chunk: usize) -> Result<Tensor> {
    let mut data: Vec<f64> = s1.iter().map(|&h| f16::from_bits(h).to_f64()).collect();
    if rank > 1 {
        data.extend(s_dq.decode(bits, chunk));
    }
    Tensor::matrix(rank, s1.len(), data)
}

/// Rebuilds `V` (rank × levels); a missing first row is the uniform grid.
pub fn reconstruct_v(v_dq: &DqSection, rank: usize, levels: usize, bits: u32, chunk: usize) -> Result<Tensor> {
    let stored = v_dq.decode(bits, chunk);
    let mut data = Vec::with_capacity(rank * levels);
    if stored.len() == (rank - 1) * levels {
        data.extend(uniform_qps(levels));
    }
    data.extend(stored);
    Tensor::matrix(rank, levels, data)
}

/// Deployable form of one subset's learned parameters.
///
/// `groups` (`N_G × G`) are the full-precision weights; their indices are
/// recomputed against the reconstructed codebook. Deployed codebooks always
/// use the default gap [`CODEWORD_EPS`], which the file format assumes.
pub fn apply_dq(p: &CodebookParams, groups: &Tensor, cfg: &QuantConfig) -> Result<SubsetArtifact> {
    let s = p.derive_s();
    let v = p.derive_v(cfg.implicit_v1());
    let (rank, ng) = (p.rank(), p.groups());
    let s1: Vec<u16> = s.row(0).iter().map(|&x| f16::from_f64(x).to_bits()).collect();
    let s_dq =
        if rank > 1 { DqSection::encode(&s.data()[ng..], cfg.dq_bits_s, cfg.dq_group) } else { DqSection::empty() };
    let v_start = if cfg.implicit_v1() { p.levels() } else { 0 };
    let v_dq = DqSection::encode(&v.data()[v_start..], cfg.dq_bits_v, cfg.dq_group);

    let s_hat = reconstruct_s(&s1, &s_dq, rank, cfg.dq_bits_s, cfg.dq_group)?;
    let v_hat = reconstruct_v(&v_dq, rank, p.levels(), cfg.dq_bits_v, cfg.dq_group)?;
    let cp = crate::codebook::build_codebook(&s_hat, &v_hat, &alloc::vec![0.0; ng])?;
    let bprime = p.derive_bprime();
    let mut b_idx = Vec::with_capacity(ng);
    for (g, &b) in bprime.iter().enumerate() {
        let book = SortedCodebook::new(cp.row(g), CODEWORD_EPS)?;
        b_idx.push(book.index_of(b) as u32);
    }
    let mut sub = SubsetArtifact { s1, s_dq, v_dq, b_idx, z: Vec::new() };
    let books = sub.codebooks(&ArtifactHeader::from_config(cfg))?;
    let gsize = groups.shape()[1];
    sub.z.reserve(ng * gsize);
    for (g, book) in books.iter().enumerate() {
        sub.z.extend(groups.row(g).iter().map(|&w| book.index_of(w) as u32));
    }
    Ok(sub)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_levels_reconstruct_exactly() {
        let c = grid_search_dq(&[0.0, 1.0, 2.0, 3.0], 2);
        assert_eq!(c.sse, 0.0);
        assert_eq!(c.alpha, 1.0);
        assert_eq!(decode_group(c.group, &c.codes, 2), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_groups() {
        for v in [0.5, -0.25, 0.0, 3.0] {
            let c = grid_search_dq(&[v; 16], 4);
            assert_eq!(c.sse, 0.0, "{v}");
        }
    }

    #[test]
    fn value_formula_order() {
        assert_eq!(dq_value(1.5, 3, 1, 2), 1.5 * 2.0 / 3.0 * 2.0);
        assert_eq!(dq_value(1.0, 0, 0, 4), 0.0);
    }

    #[test]
    fn section_chunks() {
        let vals: Vec<f64> = (0..37).map(|k| (k as f64 * 0.37).sin()).collect();
        let s = DqSection::encode(&vals, 8, 16);
        assert_eq!(s.groups.len(), 3);
        let back = s.decode(8, 16);
        assert_eq!(back.len(), 37);
        for (a, b) in vals.iter().zip(&back) {
            assert!((a - b).abs() < 0.01);
        }
    }
}
