//! The toy transformer block whose output reconstruction drives training,
//! and seeded synthetic weights and calibration inputs.
//!
//! Pre-norm layout, no attention mask, no linear biases:
//!
//! ```text
//! Y₁ = X + MHA(LN₁(X)) · W_o
//! Y  = Y₁ + GELU(LN₂(Y₁) · W_fc1) · W_fc2
//! ```

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, NodeId};
use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Names of the six quantized matrices, in storage order.
pub const LAYER_NAMES: [&str; 6] = ["qproj", "kproj", "vproj", "oproj", "fc1", "fc2"];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// `[W_q, W_k, W_v, W_o, W_fc1, W_fc2]`.
    pub linear: [Tensor; 6],
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub heads: usize,
}

impl BlockWeights {
    pub fn dim(&self) -> usize {
        self.linear[0].shape()[0]
    }

    pub fn ff_dim(&self) -> usize {
        self.linear[4].shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, dff) = (self.dim(), self.ff_dim());
        let want = [[d, d], [d, d], [d, d], [d, d], [d, dff], [dff, d]];
        for (k, (w, s)) in self.linear.iter().zip(want).enumerate() {
            if w.shape() != s {
                return Err(Error::ShapeMismatch {
                    op: "block",
                    detail: format!("{} has shape {:?}, expected {:?}", LAYER_NAMES[k], w.shape(), s),
                });
            }
        }
        for t in [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias] {
            if t.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "block",
                    detail: format!("layer-norm length {} != {d}", t.len()),
                });
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidConfig(format!("dimension {d} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    /// Same block with the six matrices replaced.
    pub fn with_linear(&self, linear: [Tensor; 6]) -> Self {
        Self { linear, ..self.clone() }
    }
}

/// Graph handles for a block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub linear: [NodeId; 6],
    pub ln1: (NodeId, NodeId),
    pub ln2: (NodeId, NodeId),
}

impl BlockNodes {
    /// Registers the layer-norm parameters as constants next to the given
    /// linear nodes.
    pub fn with_linear(g: &mut Graph, w: &BlockWeights, linear: [NodeId; 6]) -> Self {
        Self {
            linear,
            ln1: (g.constant(w.ln1_gain.clone()), g.constant(w.ln1_bias.clone())),
            ln2: (g.constant(w.ln2_gain.clone()), g.constant(w.ln2_bias.clone())),
        }
    }

    pub fn constants(g: &mut Graph, w: &BlockWeights) -> Self {
        let linear = core::array::from_fn(|k| g.constant(w.linear[k].clone()));
        Self::with_linear(g, w, linear)
    }
}

/// Appends `h(x)` to the graph.
pub fn block_graph(g: &mut Graph, x: NodeId, p: &BlockNodes, heads: usize) -> Result<NodeId> {
    let (_, d) = g.value(x).dims2("block")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!("dimension {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let [wq, wk, wv, wo, fc1, fc2] = p.linear;

    let h = g.layer_norm(x, p.ln1.0, p.ln1.1)?;
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let scale = 1.0 / math::sqrt(dh as f64);
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (a, b) = (head * dh, (head + 1) * dh);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.softmax(scores)?;
        outs.push(g.matmul(probs, vh)?);
    }
    let attn = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let attn = g.matmul(attn, wo)?;
    let y1 = g.add(x, attn)?;

    let h2 = g.layer_norm(y1, p.ln2.0, p.ln2.1)?;
    let f = g.matmul(h2, fc1)?;
    let f = g.gelu(f)?;
    let f = g.matmul(f, fc2)?;
    g.add(y1, f)
}

/// Evaluates `h(x, w)` without recording gradients.
pub fn block_forward(x: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let p = BlockNodes::constants(&mut g, w);
    let y = block_graph(&mut g, xi, &p, w.heads)?;
    Ok(g.value(y).clone())
}

/// Calibration features: `fp` propagated through full-precision blocks,
/// `quant` through quantized ones. Equal at the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub fp: Vec<Tensor>,
    pub quant: Vec<Tensor>,
}

impl CalibrationSet {
    pub fn from_inputs(inputs: Vec<Tensor>) -> Self {
        Self { quant: inputs.clone(), fp: inputs }
    }

    pub fn len(&self) -> usize {
        self.fp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fp.is_empty()
    }
}

/// Sizes of a synthetic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticShape {
    pub samples: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for SyntheticShape {
    fn default() -> Self {
        Self { samples: 16, seq_len: 64, dim: 64, ff_dim: 256, heads: 2, blocks: 2 }
    }
}

/// One synthetic weight: `0.95·N(0, 0.02²) + 0.05·N(0, 0.1²)`.
fn mixture_sample(rng: &mut ChaCha8Rng, core: &Normal<f64>, tail: &Normal<f64>) -> f64 {
    if rng.random::<f64>() < 0.05 {
        tail.sample(rng)
    } else {
        core.sample(rng)
    }
}

/// Deterministic weights and calibration inputs from `seed`.
pub fn gen_calibration(seed: u64, shape: SyntheticShape) -> Result<(Vec<BlockWeights>, CalibrationSet)> {
    let SyntheticShape { samples, seq_len, dim, ff_dim, heads, blocks } = shape;
    if dim == 0 || ff_dim == 0 || seq_len == 0 || heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidConfig(format!("invalid synthetic shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let core = Normal::new(0.0, 0.02).expect("valid normal");
    let tail = Normal::new(0.0, 0.1).expect("valid normal");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let matrix = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        let data = (0..r * c).map(|_| mixture_sample(rng, &core, &tail)).collect();
        Tensor::matrix(r, c, data).expect("matrix shape")
    };
    let mut stack = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let linear = [
            matrix(&mut rng, dim, dim),
            matrix(&mut rng, dim, dim),
            matrix(&mut rng, dim, dim),
            matrix(&mut rng, dim, dim),
            matrix(&mut rng, dim, ff_dim),
            matrix(&mut rng, ff_dim, dim),
        ];
        let mut ln = || {
            let gain = Tensor::vector((0..dim).map(|_| 1.0 + 0.05 * unit.sample(&mut rng)).collect());
            let bias = Tensor::vector((0..dim).map(|_| 0.02 * unit.sample(&mut rng)).collect());
            (gain, bias)
        };
        let (ln1_gain, ln1_bias) = ln();
        let (ln2_gain, ln2_bias) = ln();
        stack.push(BlockWeights { linear, ln1_gain, ln1_bias, ln2_gain, ln2_bias, heads });
    }
    let inputs = (0..samples)
        .map(|_| {
            let data = (0..seq_len * dim).map(|_| unit.sample(&mut rng)).collect();
            Tensor::matrix(seq_len, dim, data).expect("input shape")
        })
        .collect();
    Ok((stack, CalibrationSet::from_inputs(inputs)))
}
