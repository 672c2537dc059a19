//! Subcommands of the `lcq` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lcq_core::block::{gen_calibration, SyntheticShape};
use lcq_core::codebook::QuantConfig;
use lcq_core::layout::GroupSize;
use lcq_core::oracle::fuzz_quantizer;
use lcq_core::storage::{account, Accounting, LayerShape, QuantArtifact, HEADER_BYTES};
use lcq_core::trainer::{evaluate_artifact, loss_gradcheck, quantize_model, GradcheckSettings};

use crate::error::{Error, Result};
use crate::files;

#[derive(Debug, Parser)]
#[command(name = "lcq", version, about = "Low-rank codebook weight quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic model and calibration set.
    Gen(GenArgs),
    /// Quantize a model block by block and write an LCQ1 artifact.
    Quantize(QuantizeArgs),
    /// Print initial and final reconstruction loss per block as CSV.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Describe an artifact: header, retention rate, layer sizes.
    Inspect(InspectArgs),
    /// Fuzz the segmented quantizer against the brute-force one.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 256)]
    pub ff_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Model path followed by calibration path.
    #[arg(long, num_args = 2, value_names = ["MODEL", "CALIB"], required = true)]
    pub out: Vec<PathBuf>,
}

fn parse_group_size(s: &str) -> std::result::Result<GroupSize, String> {
    if s == "channel" {
        return Ok(GroupSize::Channel);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(GroupSize::Fixed(n)),
        _ => Err(format!("expected a positive integer or \"channel\", got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub bits: u32,
    /// Weights per group, or "channel" for one group per output row.
    #[arg(long, default_value = "128", value_parser = parse_group_size)]
    pub group_size: GroupSize,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    /// Groups sharing one set of quantization points.
    #[arg(long, default_value_t = 32)]
    pub ng: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 4)]
    pub dq_bits_s: u32,
    #[arg(long, default_value_t = 8)]
    pub dq_bits_v: u32,
    #[arg(long, default_value_t = 16)]
    pub dq_group: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the rank-1 scale, points and offset at their initial values.
    #[arg(long)]
    pub fix_rank1: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV of mean loss and learning rate.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

impl QuantizeArgs {
    pub fn config(&self) -> QuantConfig {
        QuantConfig {
            bits: self.bits,
            group_size: self.group_size,
            rank: self.rank,
            groups_per_subset: self.ng,
            dq_bits_s: self.dq_bits_s,
            dq_bits_v: self.dq_bits_v,
            dq_group: self.dq_group,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            fix_rank1: self.fix_rank1,
            ..QuantConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub artifact: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    /// Write every stored scale `S` to this CSV.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 100_000)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Quantize(a) => quantize(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Inspect(a) => inspect(&a, out),
        Command::Oracle(a) => oracle(&a, out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn gen(a: &GenArgs) -> Result<()> {
    let shape = SyntheticShape {
        samples: a.samples,
        seq_len: a.seq_len,
        dim: a.dim,
        ff_dim: a.ff_dim,
        heads: a.heads,
        blocks: a.blocks,
    };
    let (stack, calib) = gen_calibration(a.seed, shape)?;
    files::save_model(&a.out[0], &stack)?;
    files::save_calib(&a.out[1], &calib)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn quantize(a: &QuantizeArgs, out: &mut impl Write) -> Result<()> {
    let cfg = a.config();
    let stack = files::load_model(&a.model)?;
    let calib = files::load_calib(&a.calib)?;
    let res = quantize_model(&stack, &calib, &cfg)?;
    files::write_artifact(&a.out, &res.artifact)?;
    if let Some(path) = &a.trace {
        let mut w = csv_writer(path)?;
        w.write_record(["epoch", "mean_loss", "lr"])?;
        let stats = res.blocks.iter().flat_map(|b| &b.report.trace);
        for (epoch, s) in stats.enumerate() {
            w.serialize((epoch, s.mean_loss, s.lr))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    for (b, r) in res.blocks.iter().enumerate() {
        let r = &r.report;
        writeln!(out, "block {b}: initial {:.6e} final {:.6e}", r.initial_loss, r.final_loss).map_err(stdout_err)?;
    }
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let stack = files::load_model(&a.model)?;
    let calib = files::load_calib(&a.calib)?;
    let artifact = files::read_artifact(&a.artifact)?;
    let losses = evaluate_artifact(&stack, &calib, &artifact)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["block", "initial_loss", "final_loss"])?;
    for (b, (initial, fin)) in losses.into_iter().enumerate() {
        w.serialize((b, initial, fin))?;
    }
    w.flush().map_err(stdout_err)
}

fn gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> Result<()> {
    let settings = GradcheckSettings { points: a.points, ..GradcheckSettings::default() };
    let res = loss_gradcheck(a.seed, &settings)?;
    writeln!(
        out,
        "points {} coordinates {} (S {} V {} B {}) max relative error {:.3e}",
        res.points, res.coordinates, res.per_kind[0], res.per_kind[1], res.per_kind[2], res.max_rel_error
    )
    .map_err(stdout_err)?;
    // Written so that a NaN error also fails.
    if res.max_rel_error.partial_cmp(&a.tolerance).is_none_or(|o| o.is_gt()) {
        return Err(Error::Numerical(format!(
            "gradient check failed: relative error {:.3e} above {:.3e}",
            res.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

/// Storage totals of an artifact, reading whether `V₁` is stored off the
/// size of its first subset.
pub fn artifact_accounting(artifact: &QuantArtifact) -> Result<Accounting> {
    let h = &artifact.header;
    let implicit = artifact
        .layers
        .iter()
        .flat_map(|l| l.subsets.first())
        .next()
        .is_some_and(|s| s.v_dq.len() == (h.rank - 1) * h.levels);
    let shapes: Vec<LayerShape> =
        artifact.layers.iter().map(|l| LayerShape { name: l.name.clone(), rows: l.rows, cols: l.cols }).collect();
    Ok(account(h, &shapes, implicit)?)
}

fn inspect(a: &InspectArgs, out: &mut impl Write) -> Result<()> {
    let artifact = files::read_artifact(&a.artifact)?;
    let h = &artifact.header;
    let acc = artifact_accounting(&artifact)?;
    let group = match h.group_size {
        GroupSize::Fixed(n) => n.to_string(),
        GroupSize::Channel => "channel".into(),
    };
    let mut w = csv::Writer::from_writer(&mut *out);
    w.write_record(["field", "value"])?;
    for (k, v) in [
        ("bits", h.bits.to_string()),
        ("group_size", group),
        ("rank", h.rank.to_string()),
        ("groups_per_subset", h.groups_per_subset.to_string()),
        ("dq_bits_s", h.dq_bits_s.to_string()),
        ("dq_bits_v", h.dq_bits_v.to_string()),
        ("dq_group", h.dq_group.to_string()),
        ("layers", artifact.layers.len().to_string()),
        ("weights", acc.weights.to_string()),
        ("payload_bits", acc.payload_bits.to_string()),
        ("file_bytes", acc.file_bytes.to_string()),
        ("retention_rate", format!("{:.4}", acc.retention_rate())),
    ] {
        w.write_record([k, v.as_str()])?;
    }
    w.flush().map_err(stdout_err)?;
    drop(w);
    writeln!(out).map_err(stdout_err)?;

    let mut w = csv::Writer::from_writer(&mut *out);
    w.write_record(["layer", "rows", "cols", "subsets", "payload_bits", "bytes"])?;
    for l in &artifact.layers {
        let shape = [LayerShape { name: l.name.clone(), rows: l.rows, cols: l.cols }];
        let implicit = l.subsets.first().is_some_and(|s| s.v_dq.len() == (h.rank - 1) * h.levels);
        let one = account(h, &shape, implicit)?;
        w.serialize((
            &l.name,
            l.rows,
            l.cols,
            l.subsets.len(),
            one.payload_bits,
            one.file_bytes - HEADER_BYTES as u64,
        ))?;
    }
    w.flush().map_err(stdout_err)?;

    if let Some(path) = &a.stats {
        let mut w = csv_writer(path)?;
        w.write_record(["layer", "subset", "group", "rank", "s"])?;
        for l in &artifact.layers {
            for (si, sub) in l.subsets.iter().enumerate() {
                let s = sub.s(h)?;
                for r in 0..h.rank {
                    for (g, v) in s.row(r).iter().enumerate() {
                        w.serialize((&l.name, si, g, r + 1, v))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn oracle(a: &OracleArgs, out: &mut impl Write) -> Result<()> {
    let res = fuzz_quantizer(a.cases, a.seed, true)?;
    writeln!(out, "cases {} midpoints {} mismatches {}", res.cases, res.midpoints, res.mismatches)
        .map_err(stdout_err)?;
    if let Some(m) = res.first {
        return Err(Error::Numerical(format!(
            "quantizer mismatch at weight {:?}: segmented {:?}, brute force {:?}, codebook {:?}",
            m.weight, m.segmented, m.oracle, m.codebook
        )));
    }
    Ok(())
}
