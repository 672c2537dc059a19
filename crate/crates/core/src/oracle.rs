//! Randomized equivalence check of the segmented quantizer against the
//! brute-force nearest-codeword oracle.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codebook::build_codebook;
use crate::math::CODEWORD_EPS;
use crate::quantizer::{oracle_quantize, SortedCodebook};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub weight: f64,
    pub codebook: Vec<f64>,
    pub segmented: f64,
    pub oracle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzOutcome {
    pub cases: usize,
    /// Cases whose weight sat exactly between two codewords.
    pub midpoints: usize,
    pub mismatches: usize,
    pub first: Option<Mismatch>,
}

/// A random low-rank codebook row `Σ_r S_r·V_r − B` with `B` one of its
/// own entries, so the row contains zero.
fn random_row(rng: &mut ChaCha8Rng, bits: u32, rank: usize) -> Result<Vec<f64>> {
    let nq = 1usize << bits;
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let s = Tensor::matrix(rank, 1, (0..rank).map(|_| unit.sample(rng)).collect())?;
    let v = Tensor::matrix(rank, nq, (0..rank * nq).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let cp = build_codebook(&s, &v, &[0.0])?;
    let b = cp.data()[rng.random_range(0..nq)];
    Ok(cp.data().iter().map(|c| c - b).collect())
}

/// Runs `cases` comparisons over every bit width in {2, 3, 4} and rank in
/// {1, 2, 3}, with a share of weights placed on codewords and midpoints.
pub fn fuzz_quantizer(cases: usize, seed: u64, stop_at_first: bool) -> Result<FuzzOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FuzzOutcome { cases: 0, midpoints: 0, mismatches: 0, first: None };
    let configs: Vec<(u32, usize)> = [2u32, 3, 4].iter().flat_map(|&b| [1usize, 2, 3].map(|r| (b, r))).collect();
    for case in 0..cases {
        let (bits, rank) = configs[case % configs.len()];
        let row = random_row(&mut rng, bits, rank)?;
        let book = SortedCodebook::new(&row, CODEWORD_EPS)?;
        let c = book.values();
        let lo = c[0];
        let hi = c[c.len() - 1];
        let pad = 0.25 * (hi - lo) + 1e-3;
        let w = match rng.random_range(0..10) {
            0 | 1 => {
                let k = rng.random_range(0..c.len() - 1);
                out.midpoints += 1;
                (c[k] + c[k + 1]) / 2.0
            }
            2 => c[rng.random_range(0..c.len())],
            _ => rng.random_range(lo - pad..hi + pad),
        };
        let seg = book.quantize(w);
        let ora = oracle_quantize(w, c)?;
        out.cases += 1;
        if seg.to_bits() != ora.to_bits() {
            out.mismatches += 1;
            if out.first.is_none() {
                out.first = Some(Mismatch { weight: w, codebook: c.to_vec(), segmented: seg, oracle: ora });
            }
            if stop_at_first {
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_fuzz_is_clean() {
        let out = fuzz_quantizer(2000, 7, false).unwrap();
        assert_eq!(out.mismatches, 0, "{:?}", out.first);
        assert!(out.midpoints > 100);
    }
}
