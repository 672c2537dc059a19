//! Clip search, double quantization and storage accounting against
//! independently written references.

use half::f16;
use lcq_core::codebook::QuantConfig;
use lcq_core::doubleq::{decode_group, grid_search_dq, DqSection};
use lcq_core::init::{clip_search_init, gaussian_qps};
use lcq_core::storage::{account, ArtifactHeader, LayerShape};
use proptest::prelude::*;

fn shrink_factors() -> Vec<f64> {
    (0..=70).map(|k| (100 - k) as f64 / 100.0).collect()
}

/// `(alpha, sse)` of the best asymmetric uniform encoding of `values`.
fn reference_dq(values: &[f64], bits: u32) -> (f64, f64) {
    let n = ((1u64 << bits) - 1) as f64;
    let lo0 = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best = (f64::NAN, f64::INFINITY);
    for a in shrink_factors() {
        let lo = (a * lo0).min(0.0);
        let hi = (a * hi0).max(0.0);
        let s = f16::from_f64((hi - lo) / 2.0).to_f64();
        let sse: f64 = if s > 0.0 {
            let step = 2.0 * s / n;
            let z = (-lo / step).round().clamp(0.0, n);
            values
                .iter()
                .map(|v| {
                    let q = (v / step + z).round().clamp(0.0, n);
                    let d = v - s * (q - z) / n * 2.0;
                    d * d
                })
                .sum()
        } else {
            values.iter().map(|v| v * v).sum()
        };
        if sse < best.1 {
            best = (a, sse);
        }
    }
    best
}

/// Nearest entry of a sorted row; exact ties go to the even 1-based position.
fn nearest(w: f64, c: &[f64]) -> f64 {
    let mut best = 0;
    for j in 1..c.len() {
        let (d, e) = ((w - c[j]).abs(), (w - c[best]).abs());
        if d < e || (d == e && j % 2 == 1) {
            best = j;
        }
    }
    c[best]
}

/// Error of a group under the zero-inclusive rank-1 codebook at each shrink
/// factor; returns the per-factor errors.
fn reference_clip(group: &[f64], bits: u32) -> Vec<(f64, f64)> {
    let nq = 1usize << bits;
    let lo = group.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let half = (hi - lo) / 2.0;
    let bprime = -(hi + lo) / 2.0;
    shrink_factors()
        .into_iter()
        .map(|a| {
            let cp: Vec<f64> =
                (0..nq).map(|k| a * half * ((2 * k) as f64 - (nq - 1) as f64) / (nq - 1) as f64).collect();
            let b = nearest(bprime, &cp);
            let c: Vec<f64> = cp.iter().map(|x| x - b).collect();
            (a, group.iter().map(|&w| (w - nearest(w, &c)).powi(2)).sum())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn dq_search_is_the_grid_argmin(
        values in proptest::collection::vec(-3.0f64..3.0, 1..=16),
        bits in prop_oneof![Just(4u32), Just(8)],
    ) {
        let got = grid_search_dq(&values, bits);
        let (alpha, sse) = reference_dq(&values, bits);
        prop_assert_eq!(got.alpha, alpha);
        prop_assert_eq!(got.sse.to_bits(), sse.to_bits());
        let decoded = decode_group(got.group, &got.codes, bits);
        let re: f64 = values.iter().zip(&decoded).map(|(v, d)| (v - d) * (v - d)).sum();
        prop_assert_eq!(re.to_bits(), sse.to_bits());
    }

    #[test]
    fn dq_sections_round_trip_their_codes(values in proptest::collection::vec(-1.0f64..1.0, 1..60)) {
        let sec = DqSection::encode(&values, 8, 16);
        prop_assert_eq!(sec.groups.len(), values.len().div_ceil(16));
        let dec = sec.decode(8, 16);
        prop_assert_eq!(dec.len(), values.len());
        for (v, d) in values.iter().zip(&dec) {
            prop_assert!((v - d).abs() <= 2.0_f64 / 255.0 * 1.01);
        }
    }

    #[test]
    fn clip_search_matches_reference(
        centre in -0.5f64..0.5,
        offsets in proptest::collection::vec(-1.0f64..1.0, 8..64),
        bits in 2u32..=4,
    ) {
        // Keep the group straddling zero so the offset is reachable.
        let mut group: Vec<f64> = offsets.iter().map(|o| 0.5 * centre + o).collect();
        group.push(-1.2);
        group.push(1.2);
        let got = clip_search_init(&group, bits, 1e-6).unwrap();
        let table = reference_clip(&group, bits);
        let min = table.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        let at = table.iter().find(|t| t.0 == got.alpha).unwrap().1;
        prop_assert!((got.sse - at).abs() <= 1e-9 * (1.0 + at));
        prop_assert!(got.sse <= min * (1.0 + 1e-9) + 1e-12);
    }
}

#[test]
fn two_bit_gaussian_points() {
    let q = gaussian_qps(4);
    // Φ⁻¹(0.375) / Φ⁻¹(0.875)
    let inner = 0.318_639_363_964_375_1 / 1.150_349_380_376_008_3;
    assert!((q[1] + inner).abs() < 1e-12 && (q[2] - inner).abs() < 1e-12);
    assert!((q[0] + 1.0).abs() < 1e-12 && (q[3] - 1.0).abs() < 1e-12);
}

/// Bits of a model with every layer split into full subsets.
fn reference_bits(weights: u64, b: u64, g: u64, ng: u64, rank: u64, levels: u64) -> u64 {
    let groups = weights / g;
    let subsets = groups.div_ceil(ng);
    let dq = |values: u64, bits: u64| values * bits + values.div_ceil(16) * (16 + bits);
    weights * b + groups * (16 + b) + subsets * (dq((rank - 1) * ng, 4) + dq(rank * levels, 8))
}

#[test]
fn accountant_matches_reference_totals() {
    let shapes = [(4096usize, 4096usize, 4usize), (4096, 11008, 1), (11008, 4096, 1)];
    let layers: Vec<LayerShape> = shapes
        .iter()
        .flat_map(|&(r, c, k)| (0..k).map(move |i| LayerShape { name: format!("l{r}x{c}.{i}"), rows: r, cols: c }))
        .collect();
    let weights: u64 = layers.iter().map(|l| (l.rows * l.cols) as u64).sum();
    for (bits, rank, want) in [(2u32, 1usize, 0.134), (2, 2, 0.138), (3, 1, 0.197), (3, 2, 0.202)] {
        let cfg = QuantConfig { bits, rank, ..QuantConfig::default() };
        let acc = account(&ArtifactHeader::from_config(&cfg), &layers, false).unwrap();
        assert_eq!(acc.weights, weights);
        assert_eq!(acc.payload_bits, reference_bits(weights, bits as u64, 128, 32, rank as u64, 1 << bits));
        assert!((acc.retention_rate() - want).abs() <= 0.003, "{bits} {rank} {}", acc.retention_rate());
    }
}
