//! Block reconstruction objective, AdamW with cosine decay, and the
//! block-by-block quantization pipeline.
//!
//! The loss of one sample is
//!
//! ```text
//! ‖h(X̃, W_Q) − h(X^fp, W)‖² + ‖h(X̃, W_Q) − h(X̃, W)‖²
//! ```
//!
//! with `X^fp` propagated through full-precision blocks and `X̃` through the
//! deployed quantized ones.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::block::{
    block_forward, block_graph, gen_calibration, BlockNodes, BlockWeights, CalibrationSet, SyntheticShape, LAYER_NAMES,
};
use crate::codebook::{CodebookParams, QuantConfig};
use crate::doubleq::apply_dq;
use crate::gradcheck::{finite_diff_check_coords, FnPair, ScalarFunction};
use crate::graph::{Graph, NodeId};
use crate::init::init_params;
use crate::layout::{GroupSize, LayerLayout};
use crate::math;
use crate::quantizer::{quantize_segmented, sort_rows, Emit, QuantAnchor, QuantizeNode, ValueLayout};
use crate::storage::{ArtifactHeader, LayerArtifact, QuantArtifact};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `0.5·lr₀·(1 + cos(π·t/T))`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + math::cos(core::f64::consts::PI * t as f64 / total as f64))
}

/// AdamW moments and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Steps taken so far.
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], lr0: f64, total_steps: usize) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        cosine_lr(self.lr0, self.step, self.total_steps)
    }

    /// One update. Entries whose mask is 0 are left untouched.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], masks: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                detail: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        let lr = self.lr();
        self.step += 1;
        let t = self.step as f64;
        let (c1, c2) = (1.0 - math::pow(self.beta1, t), 1.0 - math::pow(self.beta2, t));
        for (k, p) in params.iter_mut().enumerate() {
            let (g, m, v) = (&grads[k], &mut self.m[k], &mut self.v[k]);
            let mask = masks.get(k).and_then(|m| m.as_ref());
            for i in 0..p.len() {
                if mask.is_some_and(|m| m.data()[i] == 0.0) {
                    continue;
                }
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let x = &mut p.data_mut()[i];
                *x -= lr * self.weight_decay * *x;
                *x -= lr * (mi / c1) / (math::sqrt(vi / c2) + self.eps);
            }
        }
        Ok(())
    }
}

/// Learned parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub layout: LayerLayout,
    pub subsets: Vec<CodebookParams>,
}

impl LayerParams {
    pub fn subset_weights(&self, w: &Tensor, subset: usize) -> Tensor {
        self.layout.gather(w, self.layout.subset_groups(subset))
    }
}

pub fn layer_layout(w: &Tensor, cfg: &QuantConfig) -> Result<LayerLayout> {
    let (rows, cols) = w.dims2("layer")?;
    LayerLayout::new(rows, cols, cfg.group_size, cfg.groups_per_subset)
}

/// Clip-search initialization of every subset of the block's six layers.
pub fn init_block(w: &BlockWeights, cfg: &QuantConfig, rng: &mut impl Rng) -> Result<Vec<LayerParams>> {
    let mut out = Vec::with_capacity(6);
    for lw in &w.linear {
        let layout = layer_layout(lw, cfg)?;
        let mut subsets = Vec::with_capacity(layout.num_subsets());
        for si in 0..layout.num_subsets() {
            let groups = layout.gather(lw, layout.subset_groups(si));
            subsets.push(init_params(&groups, cfg, rng)?.0);
        }
        out.push(LayerParams { layout, subsets });
    }
    Ok(out)
}

/// `W_Q` for the current parameters, before double quantization.
pub fn quantized_weights(w: &BlockWeights, params: &[LayerParams], cfg: &QuantConfig) -> Result<[Tensor; 6]> {
    let mut out = Vec::with_capacity(6);
    for (lw, lp) in w.linear.iter().zip(params) {
        let mut rows = Vec::new();
        for p in &lp.subsets {
            rows.extend_from_slice(p.derive(cfg)?.c.data());
        }
        let codebook = Tensor::matrix(lp.layout.num_groups(), cfg.levels(), rows)?;
        let books = sort_rows(&codebook, cfg.eps)?;
        let grouped = lp.layout.gather(lw, 0..lp.layout.num_groups());
        let q = quantize_segmented(&grouped, &books)?;
        out.push(lp.layout.scatter(q.data()));
    }
    Ok(out.try_into().expect("six layers"))
}

/// Number of sorted codebook rows lacking an exact zero.
pub fn zero_violations(params: &[LayerParams], cfg: &QuantConfig) -> Result<usize> {
    let mut bad = 0;
    for lp in params {
        for p in &lp.subsets {
            let c = p.derive(cfg)?.c;
            bad += sort_rows(&c, cfg.eps)?.iter().filter(|b| !b.values().contains(&0.0)).count();
        }
    }
    Ok(bad)
}

/// Full-precision block outputs that serve as loss targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub fp: Vec<Tensor>,
    pub quant: Vec<Tensor>,
}

impl Targets {
    pub fn new(w: &BlockWeights, calib: &CalibrationSet) -> Result<Self> {
        Ok(Self {
            fp: calib.fp.iter().map(|x| block_forward(x, w)).collect::<Result<_>>()?,
            quant: calib.quant.iter().map(|x| block_forward(x, w)).collect::<Result<_>>()?,
        })
    }
}

fn sample_loss(y: &Tensor, t_fp: &Tensor, t_q: &Tensor) -> f64 {
    let a: f64 = y.data().iter().zip(t_fp.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    let b: f64 = y.data().iter().zip(t_q.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    a + b
}

/// Block loss summed over all samples for fixed quantized weights.
pub fn block_loss(w: &BlockWeights, wq: &[Tensor; 6], calib: &CalibrationSet, targets: &Targets) -> Result<f64> {
    let qw = w.with_linear(wq.clone());
    let mut total = 0.0;
    for (i, x) in calib.quant.iter().enumerate() {
        let y = block_forward(x, &qw)?;
        total += sample_loss(&y, &targets.fp[i], &targets.quant[i]);
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("block loss {total}")));
    }
    Ok(total)
}

/// Graph handles for one subset's leaves.
#[derive(Debug, Clone, Copy)]
struct Leaves {
    sbar: NodeId,
    vbar: NodeId,
    bbar: NodeId,
}

/// A quantizer node with its two inputs.
#[derive(Debug, Clone, Copy)]
struct QuantSite {
    node: NodeId,
    values: NodeId,
    codebook: NodeId,
}

struct WeightGraph {
    linear: [NodeId; 6],
    leaves: Vec<Leaves>,
    sites: Vec<QuantSite>,
}

/// Appends the parameter → `W_Q` computation for all six layers.
fn build_weights(
    g: &mut Graph,
    w: &BlockWeights,
    params: &[LayerParams],
    cfg: &QuantConfig,
    anchors: Option<&[Rc<QuantAnchor>]>,
) -> Result<WeightGraph> {
    let nq = cfg.levels();
    let mut leaves = Vec::new();
    let mut sites = Vec::new();
    let mut next_anchor = 0usize;
    let mut node = |layout: ValueLayout, emit: Emit| {
        let n = QuantizeNode::new(layout, cfg.eps, emit);
        let n = match anchors {
            Some(a) => n.anchored(a[next_anchor].clone()),
            None => n,
        };
        next_anchor += 1;
        n.boxed()
    };
    let mut linear = Vec::with_capacity(6);
    for (lw, lp) in w.linear.iter().zip(params) {
        let mut books = Vec::with_capacity(lp.subsets.len());
        for p in &lp.subsets {
            let (rank, ng) = (p.rank(), p.groups());
            let coef = p.coefficients();
            let sbar = g.param("sbar", p.sbar.clone());
            let vbar = g.param("vbar", p.vbar.clone());
            let bbar = g.param("bbar", p.bbar.clone().reshaped(&[ng, 1])?);
            leaves.push(Leaves { sbar, vbar, bbar });

            let coef_rows = g.constant(Tensor::matrix(rank, ng, coef.repeat(rank))?);
            let ts = g.tanh(sbar)?;
            let s = g.mul(ts, coef_rows)?;
            let mut v = g.tanh(vbar)?;
            if cfg.implicit_v1() {
                let mut mask = vec![1.0; rank * nq];
                mask[..nq].iter_mut().for_each(|m| *m = 0.0);
                let mut grid = vec![0.0; rank * nq];
                grid[..nq].copy_from_slice(&crate::codebook::uniform_qps(nq));
                let mask = g.constant(Tensor::matrix(rank, nq, mask)?);
                let grid = g.constant(Tensor::matrix(rank, nq, grid)?);
                let vm = g.mul(v, mask)?;
                v = g.add(vm, grid)?;
            }
            let st = g.transpose(s)?;
            let cp = g.matmul(st, v)?;
            let coef_col = g.constant(Tensor::matrix(ng, 1, coef)?);
            let tb = g.tanh(bbar)?;
            let bprime = g.mul(tb, coef_col)?;
            let b = g.custom_op(&[bprime, cp], node(ValueLayout::PerRow, Emit::Raw))?;
            sites.push(QuantSite { node: b, values: bprime, codebook: cp });
            let bb = g.broadcast(b, &[ng, nq])?;
            books.push(g.sub(cp, bb)?);
        }
        let codebook = if books.len() == 1 { books[0] } else { g.concat_rows(&books)? };
        let wc = g.constant(lw.clone());
        let q = g.custom_op(&[wc, codebook], node(ValueLayout::Layer(lp.layout), Emit::Sorted))?;
        sites.push(QuantSite { node: q, values: wc, codebook });
        linear.push(q);
    }
    Ok(WeightGraph { linear: linear.try_into().expect("six layers"), leaves, sites })
}

/// Appends the summed loss of `samples`; returns it and each sample's loss node.
fn build_loss(
    g: &mut Graph,
    w: &BlockWeights,
    wg: &WeightGraph,
    calib: &CalibrationSet,
    targets: &Targets,
    samples: &[usize],
) -> Result<(NodeId, Vec<NodeId>)> {
    let p = BlockNodes::with_linear(g, w, wg.linear);
    let mut per = Vec::with_capacity(samples.len());
    for &i in samples {
        let x = g.constant(calib.quant[i].clone());
        let y = block_graph(g, x, &p, w.heads)?;
        let tf = g.constant(targets.fp[i].clone());
        let tq = g.constant(targets.quant[i].clone());
        let d1 = g.sub(y, tf)?;
        let d2 = g.sub(y, tq)?;
        let l1 = g.squared_norm(d1)?;
        let l2 = g.squared_norm(d2)?;
        per.push(g.add(l1, l2)?);
    }
    let mut total = per[0];
    for &l in &per[1..] {
        total = g.add(total, l)?;
    }
    Ok((total, per))
}

/// Flat list of all leaves, `[S̄, V̄, B̄]` per subset in layer order.
fn leaf_tensors(params: &[LayerParams]) -> Vec<Tensor> {
    params
        .iter()
        .flat_map(|lp| lp.subsets.iter())
        .flat_map(|p| [p.sbar.clone(), p.vbar.clone(), p.bbar.clone()])
        .collect()
}

fn set_leaf_tensors(params: &mut [LayerParams], flat: &[Tensor]) {
    let mut it = flat.iter();
    for p in params.iter_mut().flat_map(|lp| lp.subsets.iter_mut()) {
        p.sbar.data_mut().copy_from_slice(it.next().expect("sbar").data());
        p.vbar.data_mut().copy_from_slice(it.next().expect("vbar").data());
        p.bbar.data_mut().copy_from_slice(it.next().expect("bbar").data());
    }
}

/// Update masks: with frozen rank 1, row 1 of `S̄`, `V̄` and all of `B̄`.
fn leaf_masks(params: &[LayerParams], cfg: &QuantConfig) -> Vec<Option<Tensor>> {
    if !cfg.fix_rank1 {
        return vec![None; 3 * params.iter().map(|l| l.subsets.len()).sum::<usize>()];
    }
    let mut out = Vec::new();
    for p in params.iter().flat_map(|lp| lp.subsets.iter()) {
        for (t, cols) in [(&p.sbar, p.groups()), (&p.vbar, p.levels())] {
            let mut m = Tensor::filled(t.shape(), 1.0);
            m.data_mut()[..cols].iter_mut().for_each(|x| *x = 0.0);
            out.push(Some(m));
        }
        out.push(Some(Tensor::zeros(p.bbar.shape())));
    }
    out
}

/// Loss and gradient with respect to every leaf for `samples`.
fn loss_and_grads(
    w: &BlockWeights,
    params: &[LayerParams],
    cfg: &QuantConfig,
    calib: &CalibrationSet,
    targets: &Targets,
    samples: &[usize],
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut g = Graph::new();
    let wg = build_weights(&mut g, w, params, cfg, None)?;
    let (loss, per) = build_loss(&mut g, w, &wg, calib, targets, samples)?;
    let ids: Vec<NodeId> = wg.leaves.iter().flat_map(|l| [l.sbar, l.vbar, l.bbar]).collect();
    let mut grads = g.backward(loss, &ids)?;
    for (k, gr) in grads.iter_mut().enumerate() {
        if k % 3 == 2 {
            let n = gr.len();
            *gr = core::mem::replace(gr, Tensor::zeros(&[0])).reshaped(&[n])?;
        }
    }
    let losses = per.iter().map(|&l| g.value(l).data()[0]).collect();
    Ok((losses, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's final step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub params: Vec<LayerParams>,
    pub trace: Vec<EpochStats>,
    pub steps: usize,
    /// Codebook rows found without an exact zero after any step.
    pub zero_violations: usize,
}

/// Trains the leaves of one block from `init`.
pub fn optimize_block(
    w: &BlockWeights,
    calib: &CalibrationSet,
    targets: &Targets,
    init: Vec<LayerParams>,
    cfg: &QuantConfig,
    initial_loss: f64,
    rng: &mut impl Rng,
) -> Result<Optimized> {
    let n = calib.len();
    if n == 0 {
        return Err(Error::InvalidConfig("calibration set is empty".into()));
    }
    let per_sample0 = initial_loss / n as f64;
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let mut params = init;
    let mut leaves = leaf_tensors(&params);
    let masks = leaf_masks(&params, cfg);
    let mut opt = OptimizerState::new(&leaves, cfg.lr, cfg.epochs * steps_per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut zero_bad = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut losses = vec![0.0; n];
        let mut lr = opt.lr();
        for batch in order.chunks(cfg.batch) {
            let (batch_losses, mut grads) = loss_and_grads(w, &params, cfg, calib, targets, batch)?;
            for (&i, &l) in batch.iter().zip(&batch_losses) {
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("sample {i} at step {}", opt.step)));
                }
                if l > 1e3 * per_sample0 && per_sample0 > 0.0 {
                    return Err(Error::Divergence { step: opt.step, loss: l, initial: per_sample0 });
                }
                losses[i] = l;
            }
            for (gr, m) in grads.iter_mut().zip(&masks) {
                if let Some(m) = m {
                    *gr = gr.zip_map(m, "mask", |a, b| a * b)?;
                }
            }
            lr = opt.lr();
            opt.update(&mut leaves, &grads, &masks)?;
            set_leaf_tensors(&mut params, &leaves);
            zero_bad += zero_violations(&params, cfg)?;
        }
        let mean_loss = losses.iter().sum::<f64>() / n as f64;
        trace.push(EpochStats { epoch, mean_loss, lr });
    }
    Ok(Optimized { params, trace, steps: opt.step, zero_violations: zero_bad })
}

/// Double-quantizes a block's parameters into stored layers.
pub fn deploy_block(
    w: &BlockWeights,
    params: &[LayerParams],
    cfg: &QuantConfig,
    block_index: usize,
) -> Result<Vec<LayerArtifact>> {
    let mut layers = Vec::with_capacity(6);
    for (k, (lw, lp)) in w.linear.iter().zip(params).enumerate() {
        let subsets = lp
            .subsets
            .iter()
            .enumerate()
            .map(|(si, p)| apply_dq(p, &lp.subset_weights(lw, si), cfg))
            .collect::<Result<_>>()?;
        layers.push(LayerArtifact {
            name: format!("block{block_index}.{}", LAYER_NAMES[k]),
            rows: lp.layout.rows,
            cols: lp.layout.cols,
            subsets,
        });
    }
    Ok(layers)
}

/// Deployed `W_Q` of a block, decoded from its stored layers.
pub fn deployed_weights(header: &ArtifactHeader, layers: &[LayerArtifact]) -> Result<[Tensor; 6]> {
    let art = QuantArtifact { header: *header, layers: Vec::new() };
    let out: Vec<Tensor> = layers.iter().map(|l| art.dequantize(l)).collect::<Result<_>>()?;
    out.try_into().map_err(|_| Error::Artifact("a block has six layers".into()))
}

/// Rows without an exact zero in the deployed codebooks.
pub fn deployed_zero_violations(header: &ArtifactHeader, layers: &[LayerArtifact]) -> Result<usize> {
    let mut bad = 0;
    for sub in layers.iter().flat_map(|l| &l.subsets) {
        bad += sub.codebooks(header)?.iter().filter(|b| !b.values().contains(&0.0)).count();
    }
    Ok(bad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    /// Loss at the clip-search initialization.
    pub initial_loss: f64,
    /// Loss after training, before double quantization.
    pub trained_loss: f64,
    /// Loss of the deployed weights.
    pub final_loss: f64,
    pub trace: Vec<EpochStats>,
    pub steps: usize,
    pub zero_violations: usize,
    pub deployed_zero_violations: usize,
    /// Training ended above the initial loss and was rolled back.
    pub reverted: bool,
}

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub report: BlockReport,
    pub params: Vec<LayerParams>,
    pub layers: Vec<LayerArtifact>,
    pub deployed: [Tensor; 6],
    /// Features entering the block.
    pub calib: CalibrationSet,
    pub targets: Targets,
}

/// Initializes, trains and deploys one block on `calib`.
pub fn quantize_block(
    w: &BlockWeights,
    calib: &CalibrationSet,
    cfg: &QuantConfig,
    block_index: usize,
    rng: &mut impl Rng,
) -> Result<BlockResult> {
    cfg.validate()?;
    w.validate()?;
    let targets = Targets::new(w, calib)?;
    let init = init_block(w, cfg, rng)?;
    let initial_loss = block_loss(w, &quantized_weights(w, &init, cfg)?, calib, &targets)?;
    let opt = optimize_block(w, calib, &targets, init.clone(), cfg, initial_loss, rng)?;
    let mut trained_loss = block_loss(w, &quantized_weights(w, &opt.params, cfg)?, calib, &targets)?;
    let reverted = trained_loss > initial_loss;
    let params = if reverted {
        trained_loss = initial_loss;
        init
    } else {
        opt.params
    };
    let header = ArtifactHeader::from_config(cfg);
    let layers = deploy_block(w, &params, cfg, block_index)?;
    let deployed = deployed_weights(&header, &layers)?;
    let final_loss = block_loss(w, &deployed, calib, &targets)?;
    let report = BlockReport {
        initial_loss,
        trained_loss,
        final_loss,
        trace: opt.trace,
        steps: opt.steps,
        zero_violations: opt.zero_violations,
        deployed_zero_violations: deployed_zero_violations(&header, &layers)?,
        reverted,
    };
    Ok(BlockResult { report, params, layers, deployed, calib: calib.clone(), targets })
}

/// Feeds both feature variants through a finished block.
pub fn propagate(w: &BlockWeights, deployed: &[Tensor; 6], calib: &CalibrationSet) -> Result<CalibrationSet> {
    let qw = w.with_linear(deployed.clone());
    Ok(CalibrationSet {
        fp: calib.fp.iter().map(|x| block_forward(x, w)).collect::<Result<_>>()?,
        quant: calib.quant.iter().map(|x| block_forward(x, &qw)).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone)]
pub struct ModelResult {
    pub artifact: QuantArtifact,
    pub blocks: Vec<BlockResult>,
}

/// Quantizes `stack` block by block, propagating features with the
/// deployed weights.
pub fn quantize_model(stack: &[BlockWeights], calib: &CalibrationSet, cfg: &QuantConfig) -> Result<ModelResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut artifact = QuantArtifact::new(ArtifactHeader::from_config(cfg));
    let mut feats = calib.clone();
    let mut blocks = Vec::with_capacity(stack.len());
    for (b, w) in stack.iter().enumerate() {
        let res = quantize_block(w, &feats, cfg, b, &mut rng)?;
        feats = propagate(w, &res.deployed, &feats)?;
        artifact.layers.extend(res.layers.iter().cloned());
        blocks.push(res);
    }
    Ok(ModelResult { artifact, blocks })
}

/// Per-block `(initial, final)` loss of a stored artifact: initial from the
/// clip-search start, final from the artifact's own weights.
pub fn evaluate_artifact(
    stack: &[BlockWeights],
    calib: &CalibrationSet,
    artifact: &QuantArtifact,
) -> Result<Vec<(f64, f64)>> {
    let h = &artifact.header;
    let cfg = QuantConfig {
        bits: h.bits,
        group_size: h.group_size,
        rank: 1,
        groups_per_subset: h.groups_per_subset,
        ..QuantConfig::default()
    };
    let mut feats = calib.clone();
    let mut out = Vec::with_capacity(stack.len());
    for (b, w) in stack.iter().enumerate() {
        let layers: Vec<LayerArtifact> = LAYER_NAMES
            .iter()
            .map(|n| {
                artifact
                    .layer(&format!("block{b}.{n}"))
                    .cloned()
                    .ok_or_else(|| Error::Artifact(format!("missing layer block{b}.{n}")))
            })
            .collect::<Result<_>>()?;
        let deployed = deployed_weights(h, &layers)?;
        let targets = Targets::new(w, &feats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = init_block(w, &cfg, &mut rng)?;
        let initial = block_loss(w, &quantized_weights(w, &init, &cfg)?, &feats, &targets)?;
        let fin = block_loss(w, &deployed, &feats, &targets)?;
        out.push((initial, fin));
        feats = propagate(w, &deployed, &feats)?;
    }
    Ok(out)
}

/// Settings of the finite-difference check of the block loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSettings {
    pub points: usize,
    pub step: f64,
    pub shape: SyntheticShape,
    pub group: usize,
    pub groups_per_subset: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            points: 100,
            step: 1e-6,
            shape: SyntheticShape { samples: 2, seq_len: 8, dim: 16, ff_dim: 32, heads: 2, blocks: 1 },
            group: 16,
            groups_per_subset: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOutcome {
    pub points: usize,
    pub coordinates: usize,
    /// Coordinates checked in `S̄`, `V̄` and `B̄`.
    pub per_kind: [usize; 3],
    pub max_rel_error: f64,
}

/// Compares the analytic loss gradient against central differences at
/// seeded random points, up to one `S̄`, `V̄` and `B̄` coordinate per point.
///
/// Differences are taken of the loss with every quantizer decision frozen
/// at the point and each step replaced by its straight-through linear
/// surrogate; that function is smooth and its gradient at the point is
/// exactly the straight-through gradient.
pub fn loss_gradcheck(seed: u64, settings: &GradcheckSettings) -> Result<GradcheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, 0.6).expect("valid normal");
    let mut worst = 0.0f64;
    let mut coords_checked = 0;
    let mut by_kind = [0usize; 3];
    for point in 0..settings.points {
        let (stack, mut calib) = gen_calibration(rng.random(), settings.shape)?;
        let w = &stack[0];
        for x in &mut calib.quant {
            x.data_mut().iter_mut().for_each(|v| *v += 0.05 * spread.sample(&mut rng));
        }
        let cfg = QuantConfig {
            bits: 2 + (point % 2) as u32,
            rank: 1 + point % 3,
            group_size: GroupSize::Fixed(settings.group),
            groups_per_subset: settings.groups_per_subset,
            ..QuantConfig::default()
        };
        let mut params = init_block(w, &cfg, &mut rng)?;
        for p in params.iter_mut().flat_map(|l| l.subsets.iter_mut()) {
            p.sbar.data_mut().iter_mut().for_each(|v| *v = spread.sample(&mut rng));
            p.bbar.data_mut().iter_mut().for_each(|v| *v = spread.sample(&mut rng));
            let nq = p.levels();
            let mut v: Vec<f64> = (0..p.vbar.len()).map(|_| spread.sample(&mut rng)).collect();
            v.chunks_mut(nq).for_each(|r| r.sort_by(f64::total_cmp));
            p.vbar.data_mut().copy_from_slice(&v);
        }
        let targets = Targets::new(w, &calib)?;
        let samples: Vec<usize> = (0..calib.len()).collect();

        // Anchors from one plain forward pass at the point.
        let mut g = Graph::new();
        let wg = build_weights(&mut g, w, &params, &cfg, None)?;
        let anchors: Vec<Rc<QuantAnchor>> = wg
            .sites
            .iter()
            .map(|s| {
                let node = g.custom::<QuantizeNode>(s.node).expect("quantizer node");
                Rc::new(node.capture_anchor(g.value(s.values), g.value(s.codebook)))
            })
            .collect();

        let base = leaf_tensors(&params);
        let sizes: Vec<usize> = base.iter().map(|t| t.len()).collect();
        let flat = Tensor::vector(base.iter().flat_map(|t| t.data().iter().copied()).collect());
        let unflatten = |x: &Tensor| {
            let mut out = Vec::with_capacity(base.len());
            let mut at = 0;
            for (t, &n) in base.iter().zip(&sizes) {
                out.push(Tensor::new(t.shape().to_vec(), x.data()[at..at + n].to_vec()).expect("leaf shape"));
                at += n;
            }
            out
        };
        let template = params.clone();
        let mut f = FnPair {
            value: |x: &Tensor| {
                let mut p = template.clone();
                set_leaf_tensors(&mut p, &unflatten(x));
                let mut g = Graph::new();
                let wg = build_weights(&mut g, w, &p, &cfg, Some(&anchors))?;
                let (loss, _) = build_loss(&mut g, w, &wg, &calib, &targets, &samples)?;
                Ok(g.value(loss).data()[0])
            },
            gradient: |x: &Tensor| {
                let mut p = template.clone();
                set_leaf_tensors(&mut p, &unflatten(x));
                let (_, grads) = loss_and_grads(w, &p, &cfg, &calib, &targets, &samples)?;
                Ok(Tensor::vector(grads.iter().flat_map(|t| t.data().iter().copied()).collect()))
            },
        };

        // One coordinate of each leaf kind, drawn among those a central
        // difference can resolve. The loss carries a few ulps of rounding
        // noise, so a difference over `2·step` is only trusted once the
        // gradient moves the loss by some 1e5 ulps; tiny components
        // relative to the largest are skipped as well.
        let analytic = f.gradient(&flat)?;
        let loss = f.value(&flat)?;
        let noise_floor = 1e5 * f64::EPSILON * loss.abs() / settings.step;
        let floor = (1e-4 * analytic.data().iter().fold(0.0f64, |m, g| m.max(g.abs()))).max(noise_floor);
        let mut kinds: [Vec<usize>; 3] = Default::default();
        let mut at = 0;
        for (leaf, &n) in sizes.iter().enumerate() {
            kinds[leaf % 3].extend((at..at + n).filter(|&k| analytic.data()[k].abs() >= floor));
            at += n;
        }
        let mut coords = Vec::with_capacity(3);
        for (kind, pool) in kinds.iter().enumerate() {
            if let Some(&k) = pool.get(rng.random_range(0..pool.len().max(1))) {
                coords.push(k);
                by_kind[kind] += 1;
            }
        }
        worst = worst.max(finite_diff_check_coords(&mut f, &flat, settings.step, &coords)?);
        coords_checked += coords.len();
    }
    Ok(GradcheckOutcome {
        points: settings.points,
        coordinates: coords_checked,
        per_kind: by_kind,
        max_rel_error: worst,
    })
}
