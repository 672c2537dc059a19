//! Segmented quantization with straight-through gradients.
//!
//! A codebook row is sorted ascending and its adjacent gaps are widened to
//! at least `ε`. A weight `w` is then quantized as
//!
//! ```text
//! Q(w) = c₁ + Σₖ (cₖ₊₁ − cₖ) · χₖ(clip((w − cₖ) / (cₖ₊₁ − cₖ), 0, 1))
//! ```
//!
//! where `χₖ` is a unit step at 0.5 that sends exact midpoints to the
//! codeword at the even (1-based) sorted position. Because the active steps
//! always form a prefix, the sum telescopes to a single codeword and the
//! forward pass returns that codeword directly, bit for bit.
//!
//! Backward treats each step as the identity on `[0, 1]` and zero outside;
//! all other terms are differentiated exactly.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::any::Any;

use crate::graph::CustomOp;
use crate::layout::LayerLayout;
use crate::math::{next_down, next_up};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Relative tolerance, in units of the segment's magnitude, within which a
/// weight counts as an exact midpoint.
pub const TIE_BAND: f64 = 4.0 * f64::EPSILON;

/// Half-width of the midpoint band of `x` on the segment `[lo, hi]`.
///
/// A rounded midpoint `(lo + hi) / 2` can sit an ulp of the endpoints away
/// from the true centre, which is a large step in `x` when the segment is
/// narrow compared to its distance from zero.
#[inline]
pub fn tie_band(lo: f64, hi: f64) -> f64 {
    let gap = hi - lo;
    TIE_BAND * lo.abs().max(hi.abs()).max(gap) / gap
}

/// One codebook row, sorted ascending with every gap at least `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedCodebook {
    values: Vec<f64>,
    /// Original column of each sorted position.
    perm: Vec<usize>,
    /// Column whose value determines each sorted position after clamping.
    driver: Vec<usize>,
}

impl SortedCodebook {
    /// Sorts `row` (stable, ties by column) and widens gaps below `eps`.
    ///
    /// Clamping works outward from the first exact zero when the row has
    /// one, so that codeword is never moved.
    pub fn new(row: &[f64], eps: f64) -> Result<Self> {
        if row.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss(format!("codebook row {row:?}")));
        }
        let mut perm: Vec<usize> = (0..row.len()).collect();
        perm.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        // -0.0 sorts before 0.0 under total_cmp; both count as zero.
        let mut values: Vec<f64> = perm.iter().map(|&j| row[j]).collect();
        let mut driver = perm.clone();
        let anchor = values.iter().position(|&v| v == 0.0).unwrap_or(0);
        for k in anchor + 1..values.len() {
            let lo = values[k - 1];
            if values[k] - lo < eps {
                let mut v = lo + eps;
                while v - lo < eps {
                    v = next_up(v);
                }
                values[k] = v;
                driver[k] = driver[k - 1];
            }
        }
        for k in (0..anchor).rev() {
            let hi = values[k + 1];
            if hi - values[k] < eps {
                let mut v = hi - eps;
                while hi - v < eps {
                    v = next_down(v);
                }
                values[k] = v;
                driver[k] = driver[k + 1];
            }
        }
        Ok(Self { values, perm, driver })
    }

    /// Wraps values that are already strictly ascending.
    pub fn from_sorted(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnsortedCodebook { row: 0 });
        }
        let perm: Vec<usize> = (0..values.len()).collect();
        Ok(Self { driver: perm.clone(), perm, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn driver(&self) -> &[usize] {
        &self.driver
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sorted position selected for `w`: the number of active steps.
    #[inline]
    pub fn index_of(&self, w: f64) -> usize {
        let c = &self.values;
        let mut m = 0;
        for k in 0..c.len() - 1 {
            let x = (w - c[k]) / (c[k + 1] - c[k]);
            if step(x, k + 1, tie_band(c[k], c[k + 1])) {
                m += 1;
            } else {
                // Later steps see an even smaller argument.
                break;
            }
        }
        m
    }

    #[inline]
    pub fn quantize(&self, w: f64) -> f64 {
        self.values[self.index_of(w)]
    }
}

/// The step `χₖ` with its midpoint parity rule; `k` is 1-based and `band`
/// comes from [`tie_band`].
#[inline]
pub fn step(x: f64, k: usize, band: f64) -> bool {
    let x = x.clamp(0.0, 1.0);
    if (x - 0.5).abs() <= band {
        k % 2 == 1
    } else {
        x > 0.5
    }
}

/// Sorted, clamped codebooks for every row of `codebook`.
pub fn sort_rows(codebook: &Tensor, eps: f64) -> Result<Vec<SortedCodebook>> {
    let (rows, _) = codebook.dims2("sort_rows")?;
    (0..rows).map(|r| SortedCodebook::new(codebook.row(r), eps)).collect()
}

fn check_rows(w: &Tensor, books: &[SortedCodebook]) -> Result<(usize, usize)> {
    let (rows, cols) = w.dims2("quantize")?;
    if rows != books.len() {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            detail: format!("{rows} weight rows vs {} codebook rows", books.len()),
        });
    }
    Ok((rows, cols))
}

/// Quantizes each row of `w` (`N_G × G`) against its codebook row.
pub fn quantize_segmented(w: &Tensor, books: &[SortedCodebook]) -> Result<Tensor> {
    let (rows, cols) = check_rows(w, books)?;
    let mut out = Vec::with_capacity(rows * cols);
    for (r, book) in books.iter().enumerate() {
        out.extend(w.row(r).iter().map(|&v| book.quantize(v)));
    }
    Tensor::matrix(rows, cols, out)
}

/// Quantization indices into the sorted codebook rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<u32>,
}

impl IndexMatrix {
    pub fn dequantize(&self, books: &[SortedCodebook]) -> Tensor {
        let data = self
            .indices
            .chunks(self.cols.max(1))
            .zip(books)
            .flat_map(|(row, book)| row.iter().map(|&z| book.values()[z as usize]))
            .collect();
        Tensor::matrix(self.rows, self.cols, data).expect("index matrix shape")
    }
}

pub fn quantize_indices(w: &Tensor, books: &[SortedCodebook]) -> Result<IndexMatrix> {
    let (rows, cols) = check_rows(w, books)?;
    let mut indices = Vec::with_capacity(rows * cols);
    for (r, book) in books.iter().enumerate() {
        indices.extend(w.row(r).iter().map(|&v| book.index_of(v) as u32));
    }
    Ok(IndexMatrix { rows, cols, indices })
}

/// Brute-force nearest codeword with midpoint ties sent to the even
/// (1-based) sorted position. Independent of the segmented form.
pub fn oracle_quantize(w: f64, row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let dist = |j: usize| (w - sorted[j]).abs();
    let mut best = 0;
    for j in 1..sorted.len() {
        if dist(j) < dist(best) {
            best = j;
        }
    }
    for nb in [best.wrapping_sub(1), best + 1] {
        if nb >= sorted.len() {
            continue;
        }
        let (a, b) = (dist(best), dist(nb));
        let (lo, hi) = if nb < best { (nb, best) } else { (best, nb) };
        // Only a weight strictly between the pair can sit at their midpoint.
        let between = w > sorted[lo] && w < sorted[hi];
        let scale = sorted[lo].abs().max(sorted[hi].abs()).max(sorted[hi] - sorted[lo]);
        if between && (a - b).abs() <= 2.0 * TIE_BAND * scale {
            let even = if (lo + 1) % 2 == 0 { lo } else { hi };
            return Ok(sorted[even]);
        }
    }
    Ok(sorted[best])
}

/// How the quantizer maps a value element to its codebook row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueLayout {
    /// Element `i` of a column vector uses row `i`.
    PerRow,
    /// A full layer matrix grouped by [`LayerLayout`].
    Layer(LayerLayout),
}

impl ValueLayout {
    #[inline]
    fn row_of(&self, flat: usize) -> usize {
        match self {
            ValueLayout::PerRow => flat,
            ValueLayout::Layer(l) => l.group_of(flat),
        }
    }
}

/// What the quantizer emits for the selected sorted slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emit {
    /// The clamped sorted codeword.
    Sorted,
    /// The unclamped entry of the codebook column occupying that slot.
    /// Used for the offset substitution so the result is an exact element
    /// of the input row.
    Raw,
}

/// Frozen branch decisions of one quantizer evaluation.
///
/// Evaluating with an anchor replaces every step by its first-order
/// straight-through surrogate `χ⁰ + m⁰ (x − x⁰)` and fixes the sort order
/// and clamping choices, giving a smooth function whose derivative at the
/// anchor point is exactly the straight-through gradient. Finite
/// differences against it validate the analytic backward.
#[derive(Debug, Clone)]
pub struct QuantAnchor {
    driver: Vec<Vec<usize>>,
    offset: Vec<Vec<f64>>,
    x0: Vec<f64>,
    chi0: Vec<bool>,
}

/// Straight-through quantizer node: inputs `[values, codebook]`.
pub struct QuantizeNode {
    layout: ValueLayout,
    eps: f64,
    emit: Emit,
    anchor: Option<Rc<QuantAnchor>>,
    books: Vec<SortedCodebook>,
}

impl QuantizeNode {
    pub fn new(layout: ValueLayout, eps: f64, emit: Emit) -> Self {
        Self { layout, eps, emit, anchor: None, books: Vec::new() }
    }

    pub fn anchored(mut self, anchor: Rc<QuantAnchor>) -> Self {
        self.anchor = Some(anchor);
        self
    }

    pub fn boxed(self) -> Box<dyn CustomOp> {
        Box::new(self)
    }

    /// Sorted codebooks from the most recent forward pass.
    pub fn books(&self) -> &[SortedCodebook] {
        &self.books
    }

    /// Captures the branch decisions at the last forward pass.
    pub fn capture_anchor(&self, values: &Tensor, codebook: &Tensor) -> QuantAnchor {
        let nq = self.books.first().map_or(0, |b| b.len());
        let segs = nq.saturating_sub(1);
        let mut x0 = Vec::with_capacity(values.len() * segs);
        let mut chi0 = Vec::with_capacity(values.len() * segs);
        for (flat, &w) in values.data().iter().enumerate() {
            let c = self.books[self.layout.row_of(flat)].values();
            for k in 0..segs {
                let x = (w - c[k]) / (c[k + 1] - c[k]);
                x0.push(x);
                chi0.push(step(x, k + 1, tie_band(c[k], c[k + 1])));
            }
        }
        let offset = self
            .books
            .iter()
            .enumerate()
            .map(|(r, b)| b.values.iter().zip(&b.driver).map(|(v, &d)| v - codebook.at(r, d)).collect())
            .collect();
        QuantAnchor { driver: self.books.iter().map(|b| b.driver.clone()).collect(), offset, x0, chi0 }
    }

    fn check(&self, values: &Tensor, codebook: &Tensor) -> Result<(usize, usize)> {
        let (rows, nq) = codebook.dims2("quantize")?;
        let ok = match self.layout {
            ValueLayout::PerRow => values.len() == rows,
            ValueLayout::Layer(l) => values.shape() == [l.rows, l.cols] && l.num_groups() == rows,
        };
        if !ok || nq == 0 {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                detail: format!("values {:?} vs codebook {:?}", values.shape(), codebook.shape()),
            });
        }
        Ok((rows, nq))
    }

    fn surrogate(&self, anchor: &QuantAnchor, values: &Tensor, codebook: &Tensor) -> Result<Tensor> {
        let (rows, nq) = self.check(values, codebook)?;
        let rebuilt: Vec<Vec<f64>> = (0..rows)
            .map(|r| (0..nq).map(|k| codebook.at(r, anchor.driver[r][k]) + anchor.offset[r][k]).collect())
            .collect();
        let segs = nq - 1;
        let mut out = Vec::with_capacity(values.len());
        for (flat, &w) in values.data().iter().enumerate() {
            let c = &rebuilt[self.layout.row_of(flat)];
            let mut q = c[0];
            for k in 0..segs {
                let at = flat * segs + k;
                let x = (w - c[k]) / (c[k + 1] - c[k]);
                let x0 = anchor.x0[at];
                let mask = if (0.0..=1.0).contains(&x0) { 1.0 } else { 0.0 };
                let chi = if anchor.chi0[at] { 1.0 } else { 0.0 };
                q += (c[k + 1] - c[k]) * (chi + mask * (x - x0));
            }
            out.push(q);
        }
        Tensor::new(values.shape().to_vec(), out)
    }
}

impl CustomOp for QuantizeNode {
    fn name(&self) -> &'static str {
        "ste_quantize"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (values, codebook) = (inputs[0], inputs[1]);
        self.check(values, codebook)?;
        if let Some(anchor) = self.anchor.clone() {
            return self.surrogate(&anchor, values, codebook);
        }
        self.books = sort_rows(codebook, self.eps)?;
        let mut out = Vec::with_capacity(values.len());
        for (flat, &w) in values.data().iter().enumerate() {
            let r = self.layout.row_of(flat);
            let book = &self.books[r];
            let m = book.index_of(w);
            out.push(match self.emit {
                Emit::Sorted => book.values[m],
                Emit::Raw => codebook.at(r, book.perm[m]),
            });
        }
        Tensor::new(values.shape().to_vec(), out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        if self.anchor.is_some() {
            return Err(Error::InvalidConfig("anchored quantizer nodes are forward-only".into()));
        }
        let (values, codebook) = (inputs[0], inputs[1]);
        let (_, nq) = codebook.dims2("quantize")?;
        let mut dw = if needs[0] { Some(vec![0.0; values.len()]) } else { None };
        let mut dc = vec![0.0; codebook.len()];
        let mut dsorted = vec![0.0; nq];
        for (flat, (&w, &u)) in values.data().iter().zip(grad.data()).enumerate() {
            if u == 0.0 {
                continue;
            }
            let r = self.layout.row_of(flat);
            let book = &self.books[r];
            let c = &book.values;
            dsorted.iter_mut().for_each(|v| *v = 0.0);
            dsorted[0] = 1.0;
            let mut dwv = 0.0;
            for k in 0..nq - 1 {
                let x = (w - c[k]) / (c[k + 1] - c[k]);
                if step(x, k + 1, tie_band(c[k], c[k + 1])) {
                    dsorted[k + 1] += 1.0;
                    dsorted[k] -= 1.0;
                }
                if (0.0..=1.0).contains(&x) {
                    // d/dw [gap · x] = 1, d/dcₖ = x − 1, d/dcₖ₊₁ = −x
                    dwv += 1.0;
                    dsorted[k] += x - 1.0;
                    dsorted[k + 1] -= x;
                }
            }
            if let Some(dw) = dw.as_mut() {
                dw[flat] += u * dwv;
            }
            for (k, &d) in dsorted.iter().enumerate() {
                if d != 0.0 {
                    dc[r * nq + book.driver[k]] += u * d;
                }
            }
        }
        Ok(vec![
            match dw {
                Some(d) => Some(Tensor::new(values.shape().to_vec(), d)?),
                None => None,
            },
            if needs[1] { Some(Tensor::new(codebook.shape().to_vec(), dc)?) } else { None },
        ])
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
