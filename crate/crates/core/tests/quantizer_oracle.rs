//! The segmented quantizer against an independent nearest-codeword search.

use lcq_core::math::CODEWORD_EPS;
use lcq_core::quantizer::{quantize_segmented, SortedCodebook};
use lcq_core::Tensor;
use proptest::prelude::*;

/// Nearest codeword of a sorted row; a weight at the midpoint of two
/// neighbours, up to rounding at the scale of those codewords, takes the
/// one at an even 1-based position.
fn reference(w: f64, sorted: &[f64]) -> f64 {
    let mut best = 0;
    for j in 1..sorted.len() {
        if (w - sorted[j]).abs() < (w - sorted[best]).abs() {
            best = j;
        }
    }
    for (lo, hi) in [(best.wrapping_sub(1), best), (best, best + 1)] {
        if lo == usize::MAX || hi >= sorted.len() {
            continue;
        }
        let (a, b) = ((w - sorted[lo]).abs(), (w - sorted[hi]).abs());
        if w > sorted[lo]
            && w < sorted[hi]
            && (a - b).abs() <= 1e-12 * sorted[lo].abs().max(sorted[hi].abs()).max(sorted[hi] - sorted[lo])
        {
            return if (lo + 1) % 2 == 0 { sorted[lo] } else { sorted[hi] };
        }
    }
    sorted[best]
}

/// A zero-containing row `s·v − b` with `b` one of the `s·v` entries.
fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    (prop_oneof![Just(4usize), Just(8), Just(16)], 1usize..=3)
        .prop_flat_map(|(nq, rank)| {
            (proptest::collection::vec(-2.0f64..2.0, rank), proptest::collection::vec(-1.0f64..1.0, rank * nq), 0..nq)
        })
        .prop_map(|(s, v, pick)| {
            let nq = v.len() / s.len();
            let cp: Vec<f64> = (0..nq).map(|q| s.iter().enumerate().map(|(r, sr)| sr * v[r * nq + q]).sum()).collect();
            let b = cp[pick];
            cp.iter().map(|c| c - b).collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_reference_on_random_weights(row in row_strategy(), t in -0.5f64..1.5) {
        let book = SortedCodebook::new(&row, CODEWORD_EPS).unwrap();
        let c = book.values();
        let w = c[0] + t * (c[c.len() - 1] - c[0]);
        prop_assert_eq!(book.quantize(w).to_bits(), reference(w, c).to_bits());
    }

    #[test]
    fn matches_reference_on_midpoints(row in row_strategy(), k in any::<prop::sample::Index>()) {
        let book = SortedCodebook::new(&row, CODEWORD_EPS).unwrap();
        let c = book.values();
        let k = k.index(c.len() - 1);
        let w = (c[k] + c[k + 1]) / 2.0;
        prop_assert_eq!(book.quantize(w).to_bits(), reference(w, c).to_bits());
    }

    #[test]
    fn every_row_keeps_an_exact_zero(row in row_strategy()) {
        let book = SortedCodebook::new(&row, CODEWORD_EPS).unwrap();
        prop_assert!(book.values().contains(&0.0));
        prop_assert_eq!(book.quantize(0.0), 0.0);
    }

    #[test]
    fn codewords_are_fixed_points(row in row_strategy()) {
        let book = SortedCodebook::new(&row, CODEWORD_EPS).unwrap();
        for &c in book.values() {
            prop_assert_eq!(book.quantize(c).to_bits(), c.to_bits());
        }
    }
}

#[test]
fn midpoints_of_the_two_bit_grid() {
    let book = SortedCodebook::new(&[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0], CODEWORD_EPS).unwrap();
    let c = book.values().to_vec();
    let got: Vec<f64> = c.windows(2).map(|p| book.quantize((p[0] + p[1]) / 2.0)).collect();
    assert_eq!(got, vec![-1.0 / 3.0, -1.0 / 3.0, 1.0]);
}

#[test]
fn whole_matrix_uses_its_group_rows() {
    let rows = [vec![-0.5, 0.0, 0.5, 1.0], vec![-3.0, -1.0, 0.0, 2.0]];
    let books: Vec<SortedCodebook> = rows.iter().map(|r| SortedCodebook::new(r, CODEWORD_EPS).unwrap()).collect();
    let w = Tensor::matrix(2, 3, vec![0.2, 0.9, -2.0, 0.2, 0.9, -2.0]).unwrap();
    let q = quantize_segmented(&w, &books).unwrap();
    assert_eq!(q.data(), &[0.0, 1.0, -0.5, 0.0, 0.0, -1.0]);
}
