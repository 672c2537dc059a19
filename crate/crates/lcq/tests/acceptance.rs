//! Acceptance suite: one test and one report line per criterion.
//!
//! Each test writes `criterion NN PASS|FAIL <name>: <measurements>` to
//! stderr before asserting, so the report survives output capture.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use half::f16;
use lcq::files;
use lcq::lcqt;
use lcq_core::block::{gen_calibration, BlockWeights, CalibrationSet, SyntheticShape};
use lcq_core::codebook::QuantConfig;
use lcq_core::doubleq::grid_search_dq;
use lcq_core::math::CODEWORD_EPS;
use lcq_core::oracle::fuzz_quantizer;
use lcq_core::quantizer::SortedCodebook;
use lcq_core::storage::{account, pack_indices, unpack_indices, ArtifactHeader, LayerShape, QuantArtifact};
use lcq_core::trainer::{
    block_loss, deploy_block, deployed_weights, loss_gradcheck, quantize_model, GradcheckSettings, ModelResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {id:02} {verdict} {name}: {detail}");
}

/// Runs of one seed under the configurations compared below.
struct SeedRuns {
    stack: Vec<BlockWeights>,
    calib: CalibrationSet,
    default: ModelResult,
    default_time: Duration,
    rank1: ModelResult,
    rank3: ModelResult,
    fixed: ModelResult,
    /// Per block: loss of the trained parameters redeployed with 4-bit `V`.
    v4_loss: Vec<f64>,
}

fn total_final(r: &ModelResult) -> f64 {
    r.blocks.iter().map(|b| b.report.final_loss).sum()
}

fn runs() -> &'static [SeedRuns] {
    static RUNS: OnceLock<Vec<SeedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..SEEDS)
            .map(|seed| {
                let (stack, calib) = gen_calibration(seed, SyntheticShape::default()).unwrap();
                let base = QuantConfig { seed, ..QuantConfig::default() };
                let t = Instant::now();
                let default = quantize_model(&stack, &calib, &base).unwrap();
                let default_time = t.elapsed();
                let with = |rank: usize, fix_rank1: bool| {
                    quantize_model(&stack, &calib, &QuantConfig { rank, fix_rank1, ..base.clone() }).unwrap()
                };
                let v4 = QuantConfig { dq_bits_v: 4, ..base.clone() };
                let v4_header = ArtifactHeader::from_config(&v4);
                let v4_loss = default
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(b, res)| {
                        let layers = deploy_block(&stack[b], &res.params, &v4, b).unwrap();
                        let wq = deployed_weights(&v4_header, &layers).unwrap();
                        block_loss(&stack[b], &wq, &res.calib, &res.targets).unwrap()
                    })
                    .collect();
                SeedRuns {
                    rank1: with(1, false),
                    rank3: with(3, false),
                    fixed: with(2, true),
                    stack,
                    calib,
                    default,
                    default_time,
                    v4_loss,
                }
            })
            .collect()
    })
}

#[test]
fn criterion_01_quantizer_oracle_equivalence() {
    let t = Instant::now();
    let out = fuzz_quantizer(100_000, 2024, false).unwrap();
    let elapsed = t.elapsed();
    let pass = out.mismatches == 0 && out.cases == 100_000 && elapsed < Duration::from_secs(10);
    report(
        1,
        "quantizer oracle equivalence",
        pass,
        &format!(
            "{} cases ({} midpoints), {} mismatches, {:.2?} (limit 10 s)",
            out.cases, out.midpoints, out.mismatches, elapsed
        ),
    );
    assert!(pass, "{:?}", out.first);
}

#[test]
fn criterion_02_tie_rule() {
    let book = SortedCodebook::new(&[-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0], CODEWORD_EPS).unwrap();
    let c = book.values().to_vec();
    let got: Vec<f64> = c.windows(2).map(|p| book.quantize((p[0] + p[1]) / 2.0)).collect();
    let want: Vec<f64> = vec![-1.0 / 3.0, -1.0 / 3.0, 1.0];
    let pass = got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
    report(2, "tie rule", pass, &format!("midpoints map to {got:?}, expected {want:?} exactly"));
    assert!(pass);
}

#[test]
fn criterion_03_gradient_fidelity() {
    let t = Instant::now();
    let settings = GradcheckSettings::default();
    let out = loss_gradcheck(0, &settings).unwrap();
    let elapsed = t.elapsed();
    let pass = out.points == 100 && out.max_rel_error < 1e-4 && elapsed < Duration::from_secs(60);
    report(
        3,
        "gradient fidelity",
        pass,
        &format!(
            "{} points, {} coordinates (S {} V {} B {}), step {:e}, max relative error {:.3e} (limit 1e-4), {:.2?} (limit 60 s)",
            out.points, out.coordinates, out.per_kind[0], out.per_kind[1], out.per_kind[2], settings.step, out.max_rel_error, elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_optimization_improvement() {
    let runs = runs();
    let ratios: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.default.blocks.iter().map(|b| b.report.final_loss / b.report.initial_loss))
        .collect();
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    let best = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let total: Duration = runs.iter().map(|r| r.default_time).sum();
    let meeting = ratios.iter().filter(|&&q| q <= 0.5).count();
    let pass = meeting == ratios.len() && total < Duration::from_secs(600);
    report(
        4,
        "optimization improvement",
        pass,
        &format!(
            "final/initial over {} blocks in [{best:.3}, {worst:.3}], {meeting} at or below 0.5; default runs took {:.1?} (limit 600 s)",
            ratios.len(),
            total
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_rank_benefit() {
    let runs = runs();
    let two_vs_one = runs.iter().filter(|r| total_final(&r.default) <= total_final(&r.rank1)).count();
    let three_vs_two = runs.iter().filter(|r| total_final(&r.rank3) <= total_final(&r.default)).count();
    let pass = two_vs_one >= 8 && three_vs_two >= 7;
    report(
        5,
        "rank benefit",
        pass,
        &format!("rank 2 <= rank 1 on {two_vs_one}/10 seeds (need 8), rank 3 <= rank 2 on {three_vs_two}/10 (need 7)"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_learn_vs_fix() {
    let runs = runs();
    let wins = runs.iter().filter(|r| total_final(&r.default) <= total_final(&r.fixed)).count();
    let pass = wins >= 8;
    report(6, "learn vs fix", pass, &format!("learned rank-1 terms <= frozen on {wins}/10 seeds (need 8)"));
    assert!(pass);
}

#[test]
fn criterion_07_zero_inclusion() {
    let runs = runs();
    let mut steps = 0;
    let mut during = 0;
    let mut deployed = 0;
    for r in runs {
        for b in &r.default.blocks {
            steps += b.report.steps;
            during += b.report.zero_violations;
            deployed += b.report.deployed_zero_violations;
        }
    }
    // Rows of the stored artifacts, decoded from bytes.
    let mut rows = 0;
    let mut stored = 0;
    for r in runs {
        let a = QuantArtifact::from_bytes(&r.default.artifact.to_bytes().unwrap()).unwrap();
        for sub in a.layers.iter().flat_map(|l| &l.subsets) {
            for book in sub.codebooks(&a.header).unwrap() {
                rows += 1;
                stored += usize::from(!book.values().contains(&0.0));
            }
        }
    }
    let pass = during == 0 && deployed == 0 && stored == 0;
    report(
        7,
        "zero inclusion",
        pass,
        &format!(
            "rows without 0.0: {during} across {steps} optimizer steps, {deployed} after double quantization, {stored} of {rows} stored rows"
        ),
    );
    assert!(pass);
}

/// `(alpha, sse)` of the exhaustive search over the shrink grid.
fn reference_dq(values: &[f64], bits: u32) -> (f64, f64) {
    let n = ((1u64 << bits) - 1) as f64;
    let lo0 = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best = (f64::NAN, f64::INFINITY);
    for k in 0..=70 {
        let a = (100 - k) as f64 / 100.0;
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
                    (v - s * (q - z) / n * 2.0).powi(2)
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

#[test]
fn criterion_08_double_quantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = 0;
    for i in 0..10_000 {
        let len = rng.random_range(1..=16);
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let shift = if i % 3 == 0 { rng.random_range(-1.0..1.0) * scale } else { 0.0 };
        let values: Vec<f64> = (0..len).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect();
        let bits = if i % 2 == 0 { 4 } else { 8 };
        let got = grid_search_dq(&values, bits);
        let (alpha, sse) = reference_dq(&values, bits);
        exact += usize::from(got.alpha == alpha && got.sse.to_bits() == sse.to_bits());
    }

    let runs = runs();
    let mut worst_rise = f64::NEG_INFINITY;
    let mut over = 0;
    let mut blocks = 0;
    let mut v4_worse = 0;
    for r in runs {
        let (mut rise8, mut rise4) = (0.0, 0.0);
        for (b, l4) in r.default.blocks.iter().zip(&r.v4_loss) {
            let rise = b.report.final_loss / b.report.trained_loss - 1.0;
            worst_rise = worst_rise.max(rise);
            over += usize::from(rise > 0.05);
            blocks += 1;
            rise8 += b.report.final_loss - b.report.trained_loss;
            rise4 += l4 - b.report.trained_loss;
        }
        v4_worse += usize::from(rise4 > rise8);
    }
    let pass = exact == 10_000 && over == 0 && v4_worse >= 8;
    report(
        8,
        "double-quantization optimality",
        pass,
        &format!(
            "grid argmin exact on {exact}/10000 groups; 4/8-bit rise worst {:+.2}% with {over}/{blocks} blocks above +5%; \
             4-bit V rises more than 8-bit V on {v4_worse}/10 seeds (need 8)",
            100.0 * worst_rise
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_retention_rates() {
    // A 4096-wide block with an 11008-wide feed-forward layer.
    let mut layers: Vec<LayerShape> =
        (0..4).map(|i| LayerShape { name: format!("attn.{i}"), rows: 4096, cols: 4096 }).collect();
    layers.push(LayerShape { name: "fc1".into(), rows: 4096, cols: 11008 });
    layers.push(LayerShape { name: "fc2".into(), rows: 11008, cols: 4096 });
    let mut rates = Vec::new();
    let mut within = true;
    for (bits, rank, want) in [(2u32, 1usize, 0.134), (2, 2, 0.138), (3, 1, 0.197), (3, 2, 0.202)] {
        let cfg = QuantConfig { bits, rank, ..QuantConfig::default() };
        let rate = account(&ArtifactHeader::from_config(&cfg), &layers, false).unwrap().retention_rate();
        within &= (rate - want).abs() <= 0.003;
        rates.push(format!("W{bits} N_D={rank} {rate:.4} (want {want}±0.003)"));
    }

    let mut sizes = Vec::new();
    let mut sizes_match = true;
    let r = &runs()[0];
    for (label, res, implicit) in [
        ("rank 2", &r.default, false),
        ("rank 1", &r.rank1, false),
        ("rank 3", &r.rank3, false),
        ("fixed", &r.fixed, true),
    ] {
        let a = &res.artifact;
        let shapes: Vec<LayerShape> =
            a.layers.iter().map(|l| LayerShape { name: l.name.clone(), rows: l.rows, cols: l.cols }).collect();
        let acc = account(&a.header, &shapes, implicit).unwrap();
        let bytes = a.to_bytes().unwrap().len() as u64;
        sizes_match &= bytes == acc.file_bytes;
        sizes.push(format!("{label} {bytes}/{}", acc.file_bytes));
    }
    let pass = within && sizes_match;
    report(
        9,
        "retention rates",
        pass,
        &format!("{}; file bytes vs accountant: {}", rates.join(", "), sizes.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_10_roundtrips() {
    let r = &runs()[0];
    let mut lcq1_ok = true;
    let mut dequant_ok = true;
    for res in [&r.default, &r.rank1, &r.rank3, &r.fixed] {
        let bytes = res.artifact.to_bytes().unwrap();
        let back = QuantArtifact::from_bytes(&bytes).unwrap();
        lcq1_ok &= back.to_bytes().unwrap() == bytes && back == res.artifact;
        for (b, block) in res.blocks.iter().enumerate() {
            for (k, w) in block.deployed.iter().enumerate() {
                let layer = &back.layers[6 * b + k];
                let d = back.dequantize(layer).unwrap();
                dequant_ok &=
                    d.shape() == w.shape() && d.data().iter().zip(w.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            }
        }
    }

    let model = lcqt::encode(&files::model_tensors(&r.stack).unwrap()).unwrap();
    let calib = lcqt::encode(&files::calib_tensors(&r.calib)).unwrap();
    let lcqt_ok = [&model, &calib].iter().all(|bytes| lcqt::encode(&lcqt::decode(bytes).unwrap()).unwrap() == **bytes)
        && files::model_from_tensors(lcqt::decode(&model).unwrap()).unwrap() == r.stack
        && files::calib_from_tensors(lcqt::decode(&calib).unwrap()).unwrap().fp == r.calib.fp;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut packed_ok = 0;
    for _ in 0..100_000 {
        let bits = rng.random_range(1..=8u32);
        let len = rng.random_range(0..48);
        let z: Vec<u32> = (0..len).map(|_| rng.random_range(0..1u32 << bits)).collect();
        let p = pack_indices(&z, bits).unwrap();
        packed_ok += usize::from(unpack_indices(&p, bits, len).unwrap() == z);
    }
    let pass = lcq1_ok && lcqt_ok && dequant_ok && packed_ok == 100_000;
    report(
        10,
        "roundtrips",
        pass,
        &format!(
            "LCQ1 bit-identical {lcq1_ok}, LCQT bit-identical {lcqt_ok}, pack/unpack identity on {packed_ok}/100000, \
             dequantized file weights bit-exact {dequant_ok}"
        ),
    );
    assert!(pass);
}
