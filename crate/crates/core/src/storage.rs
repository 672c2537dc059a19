//! Packed indices, the quantized-artifact model, its `LCQ1` byte layout,
//! and exact storage accounting.
//!
//! All integers are little-endian. The file is
//!
//! ```text
//! "LCQ1" u32:version
//! u32 × 9: bits, group size (0xFFFFFFFF = per channel), rank, groups per
//!          subset, levels, dq bits S, dq bits V, dq group, layer count
//! per layer:  u32 name length, UTF-8 name, u32 rows, u32 cols, u32 subsets
//! per subset: S₁   u32 count, count × binary16
//!             S dq section, V dq section
//!             B    u32 count, packed at `bits`
//!             Z    u32 count, packed at `bits`
//! dq section: u32 values, u32 groups, groups × binary16 scales,
//!             zero-codes packed at dq bits, codes packed at dq bits
//! ```
//!
//! A V section holding `(rank − 1) · levels` values means the first row is
//! the implicit uniform grid.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::codebook::{build_codebook, QuantConfig};
use crate::doubleq::{reconstruct_s, reconstruct_v, DqGroup, DqSection};
use crate::layout::{GroupSize, LayerLayout};
use crate::math::CODEWORD_EPS;
use crate::quantizer::SortedCodebook;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LCQ1";
pub const VERSION: u32 = 1;
pub const CHANNEL_SENTINEL: u32 = u32::MAX;
/// Magic, version and the nine header words.
pub const HEADER_BYTES: usize = 4 + 4 + 9 * 4;

/// Packs each index into `bits` bits, least significant first.
pub fn pack_indices(z: &[u32], bits: u32) -> Result<Vec<u8>> {
    if !(1..=32).contains(&bits) {
        return Err(Error::InvalidConfig(format!("cannot pack at {bits} bits")));
    }
    let mut out = alloc::vec![0u8; (z.len() * bits as usize).div_ceil(8)];
    let mut pos = 0usize;
    for &v in z {
        if bits < 32 && v >> bits != 0 {
            return Err(Error::IndexOutOfRange { index: v, bits });
        }
        for b in 0..bits {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_indices`] for `n` indices.
pub fn unpack_indices(bytes: &[u8], bits: u32, n: usize) -> Result<Vec<u32>> {
    let need = (n * bits as usize).div_ceil(8);
    if bytes.len() < need {
        return Err(Error::Format { offset: bytes.len(), reason: format!("need {need} bytes of packed indices") });
    }
    let mut out = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        let mut v = 0u32;
        for b in 0..bits {
            v |= (((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << b;
            pos += 1;
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArtifactHeader {
    pub bits: u32,
    pub group_size: GroupSize,
    pub rank: usize,
    pub groups_per_subset: usize,
    pub levels: usize,
    pub dq_bits_s: u32,
    pub dq_bits_v: u32,
    pub dq_group: usize,
}

impl ArtifactHeader {
    pub fn from_config(cfg: &QuantConfig) -> Self {
        Self {
            bits: cfg.bits,
            group_size: cfg.group_size,
            rank: cfg.rank,
            groups_per_subset: cfg.groups_per_subset,
            levels: cfg.levels(),
            dq_bits_s: cfg.dq_bits_s,
            dq_bits_v: cfg.dq_bits_v,
            dq_group: cfg.dq_group,
        }
    }

    pub fn layout(&self, rows: usize, cols: usize) -> Result<LayerLayout> {
        LayerLayout::new(rows, cols, self.group_size, self.groups_per_subset)
    }
}

/// Stored form of one subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetArtifact {
    /// binary16 bit patterns of `S₁`.
    pub s1: Vec<u16>,
    /// Rows 2.. of `S`, flattened row-major.
    pub s_dq: DqSection,
    /// Stored rows of `V`, flattened row-major.
    pub v_dq: DqSection,
    /// Sorted position of `B` in each row of `SᵀV`.
    pub b_idx: Vec<u32>,
    /// Weight indices into the sorted codebook rows, group by group.
    pub z: Vec<u32>,
}

impl SubsetArtifact {
    pub fn groups(&self) -> usize {
        self.s1.len()
    }

    pub fn s(&self, h: &ArtifactHeader) -> Result<Tensor> {
        reconstruct_s(&self.s1, &self.s_dq, h.rank, h.dq_bits_s, h.dq_group)
    }

    pub fn v(&self, h: &ArtifactHeader) -> Result<Tensor> {
        reconstruct_v(&self.v_dq, h.rank, h.levels, h.dq_bits_v, h.dq_group)
    }

    /// Sorted, gap-clamped codebook rows `C = SᵀV − B`.
    pub fn codebooks(&self, h: &ArtifactHeader) -> Result<Vec<SortedCodebook>> {
        let ng = self.groups();
        let cp = build_codebook(&self.s(h)?, &self.v(h)?, &alloc::vec![0.0; ng])?;
        let mut books = Vec::with_capacity(ng);
        for g in 0..ng {
            let raw = SortedCodebook::new(cp.row(g), CODEWORD_EPS)?;
            let k = self.b_idx[g] as usize;
            if k >= raw.len() {
                return Err(Error::IndexOutOfRange { index: self.b_idx[g], bits: h.bits });
            }
            let b = cp.at(g, raw.perm()[k]);
            let row: Vec<f64> = cp.row(g).iter().map(|c| c - b).collect();
            books.push(SortedCodebook::new(&row, CODEWORD_EPS)?);
        }
        Ok(books)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerArtifact {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub subsets: Vec<SubsetArtifact>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantArtifact {
    pub header: ArtifactHeader,
    pub layers: Vec<LayerArtifact>,
}

impl QuantArtifact {
    pub fn new(header: ArtifactHeader) -> Self {
        Self { header, layers: Vec::new() }
    }

    /// `W_Q` of one layer rebuilt from its stored codebooks and indices.
    pub fn dequantize(&self, layer: &LayerArtifact) -> Result<Tensor> {
        let layout = self.header.layout(layer.rows, layer.cols)?;
        let mut grouped = Vec::with_capacity(layout.num_weights());
        for sub in &layer.subsets {
            let books = sub.codebooks(&self.header)?;
            for (g, book) in books.iter().enumerate() {
                for &z in &sub.z[g * layout.group..(g + 1) * layout.group] {
                    let v = *book
                        .values()
                        .get(z as usize)
                        .ok_or(Error::IndexOutOfRange { index: z, bits: self.header.bits })?;
                    grouped.push(v);
                }
            }
        }
        if grouped.len() != layout.num_weights() {
            return Err(Error::Artifact(format!(
                "layer {} holds {} of {} weights",
                layer.name,
                grouped.len(),
                layout.num_weights()
            )));
        }
        Ok(layout.scatter(&grouped))
    }

    pub fn layer(&self, name: &str) -> Option<&LayerArtifact> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(h.bits);
        w.u32(match h.group_size {
            GroupSize::Fixed(g) => to_u32(g)?,
            GroupSize::Channel => CHANNEL_SENTINEL,
        });
        for v in [h.rank, h.groups_per_subset, h.levels] {
            w.u32(to_u32(v)?);
        }
        w.u32(h.dq_bits_s);
        w.u32(h.dq_bits_v);
        w.u32(to_u32(h.dq_group)?);
        w.u32(to_u32(self.layers.len())?);
        for layer in &self.layers {
            w.u32(to_u32(layer.name.len())?);
            w.0.extend_from_slice(layer.name.as_bytes());
            w.u32(to_u32(layer.rows)?);
            w.u32(to_u32(layer.cols)?);
            w.u32(to_u32(layer.subsets.len())?);
            for sub in &layer.subsets {
                w.u32(to_u32(sub.s1.len())?);
                for &s in &sub.s1 {
                    w.0.extend_from_slice(&s.to_le_bytes());
                }
                w.dq(&sub.s_dq, h.dq_bits_s)?;
                w.dq(&sub.v_dq, h.dq_bits_v)?;
                w.packed(&sub.b_idx, h.bits)?;
                w.packed(&sub.z, h.bits)?;
            }
        }
        Ok(w.0)
    }

    /// Parses and validates an `LCQ1` byte stream.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, reason: format!("bad magic {magic:?}") });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: at, reason: format!("unsupported version {version}") });
        }
        let at = r.pos;
        let bits = r.u32()?;
        if !(1..=16).contains(&bits) {
            return Err(Error::Format { offset: at, reason: format!("bits {bits} out of range") });
        }
        let at = r.pos;
        let group_size = match r.u32()? {
            CHANNEL_SENTINEL => GroupSize::Channel,
            0 => return Err(Error::Format { offset: at, reason: "zero group size".into() }),
            g => GroupSize::Fixed(g as usize),
        };
        let at = r.pos;
        let rank = r.u32()? as usize;
        let groups_per_subset = r.u32()? as usize;
        let levels = r.u32()? as usize;
        if rank == 0 || groups_per_subset == 0 || levels != 1usize << bits {
            return Err(Error::Format {
                offset: at,
                reason: format!("rank {rank}, groups {groups_per_subset}, levels {levels} inconsistent"),
            });
        }
        let at = r.pos;
        let dq_bits_s = r.u32()?;
        let dq_bits_v = r.u32()?;
        let dq_group = r.u32()? as usize;
        if !(1..=16).contains(&dq_bits_s) || !(1..=16).contains(&dq_bits_v) || dq_group == 0 {
            return Err(Error::Format { offset: at, reason: "invalid double-quantization header".into() });
        }
        let header =
            ArtifactHeader { bits, group_size, rank, groups_per_subset, levels, dq_bits_s, dq_bits_v, dq_group };
        let layer_count = r.u32()? as usize;
        let mut layers = Vec::new();
        for _ in 0..layer_count {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = core::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format { offset: at, reason: "layer name is not UTF-8".into() })?
                .into();
            let at = r.pos;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n_subsets = r.u32()? as usize;
            let layout = header.layout(rows, cols).map_err(|e| Error::Format { offset: at, reason: format!("{e}") })?;
            if n_subsets != layout.num_subsets() {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("{n_subsets} subsets, layout needs {}", layout.num_subsets()),
                });
            }
            let mut subsets = Vec::with_capacity(n_subsets);
            for si in 0..n_subsets {
                let ng = layout.subset_groups(si).len();
                let at = r.pos;
                let n = r.u32()? as usize;
                if n != ng {
                    return Err(Error::Format { offset: at, reason: format!("S1 holds {n} values, expected {ng}") });
                }
                let mut s1 = Vec::with_capacity(ng);
                for _ in 0..ng {
                    s1.push(u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes")));
                }
                let s_dq = r.dq(dq_bits_s, dq_group, &[(rank - 1) * ng])?;
                let v_dq = r.dq(dq_bits_v, dq_group, &[rank * levels, (rank - 1) * levels])?;
                let b_idx = r.packed(bits, ng)?;
                let z = r.packed(bits, ng * layout.group)?;
                subsets.push(SubsetArtifact { s1, s_dq, v_dq, b_idx, z });
            }
            layers.push(LayerArtifact { name, rows, cols, subsets });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, reason: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Self { header, layers })
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{v} does not fit in u32")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn packed(&mut self, z: &[u32], bits: u32) -> Result<()> {
        self.u32(to_u32(z.len())?);
        self.0.extend(pack_indices(z, bits)?);
        Ok(())
    }

    fn dq(&mut self, s: &DqSection, bits: u32) -> Result<()> {
        self.u32(to_u32(s.codes.len())?);
        self.u32(to_u32(s.groups.len())?);
        for g in &s.groups {
            self.0.extend_from_slice(&g.scale.to_le_bytes());
        }
        let zeros: Vec<u32> = s.groups.iter().map(|g| g.zero).collect();
        self.0.extend(pack_indices(&zeros, bits)?);
        self.0.extend(pack_indices(&s.codes, bits)?);
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn packed(&mut self, bits: u32, expected: usize) -> Result<Vec<u32>> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n != expected {
            return Err(Error::Format { offset: at, reason: format!("{n} packed indices, expected {expected}") });
        }
        let bytes = self.take((n * bits as usize).div_ceil(8))?;
        unpack_indices(bytes, bits, n)
    }

    fn dq(&mut self, bits: u32, chunk: usize, allowed: &[usize]) -> Result<DqSection> {
        let at = self.pos;
        let values = self.u32()? as usize;
        let groups = self.u32()? as usize;
        if !allowed.contains(&values) || groups != values.div_ceil(chunk) {
            return Err(Error::Format {
                offset: at,
                reason: format!("dq section with {values} values in {groups} groups"),
            });
        }
        let mut scales = Vec::with_capacity(groups);
        for _ in 0..groups {
            scales.push(u16::from_le_bytes(self.take(2)?.try_into().expect("two bytes")));
        }
        let zeros = unpack_indices(self.take((groups * bits as usize).div_ceil(8))?, bits, groups)?;
        let codes = unpack_indices(self.take((values * bits as usize).div_ceil(8))?, bits, values)?;
        let groups = scales.into_iter().zip(zeros).map(|(scale, zero)| DqGroup { scale, zero }).collect();
        Ok(DqSection { groups, codes })
    }
}

/// Shape of one quantized layer, for accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Exact bit and byte totals of a model's stored quantization state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accounting {
    /// Payload bits: indices, codebook parameters and dq metadata.
    pub payload_bits: u64,
    /// Full-precision weight count.
    pub weights: u64,
    /// Bytes of the `LCQ1` file, framing and padding included.
    pub file_bytes: u64,
}

impl Accounting {
    /// Payload bits over 16 bits per weight.
    pub fn retention_rate(&self) -> f64 {
        self.payload_bits as f64 / (16.0 * self.weights as f64)
    }
}

fn dq_cost(values: usize, bits: u32, chunk: usize) -> (u64, u64) {
    let groups = values.div_ceil(chunk);
    let payload = (values * bits as usize + groups * (16 + bits as usize)) as u64;
    let file = 8 + 2 * groups + (groups * bits as usize).div_ceil(8) + (values * bits as usize).div_ceil(8);
    (payload, file as u64)
}

/// Storage totals for layers of the given shapes; `implicit_v1` leaves the
/// first `V` row out of storage.
pub fn account(h: &ArtifactHeader, layers: &[LayerShape], implicit_v1: bool) -> Result<Accounting> {
    let b = h.bits as usize;
    let v_rows = if implicit_v1 { h.rank - 1 } else { h.rank };
    let mut acc = Accounting { payload_bits: 0, weights: 0, file_bytes: HEADER_BYTES as u64 };
    for layer in layers {
        let layout = h.layout(layer.rows, layer.cols)?;
        acc.weights += layout.num_weights() as u64;
        acc.file_bytes += (4 + layer.name.len() + 12) as u64;
        for si in 0..layout.num_subsets() {
            let ng = layout.subset_groups(si).len();
            let nz = ng * layout.group;
            let (s_bits, s_file) = dq_cost((h.rank - 1) * ng, h.dq_bits_s, h.dq_group);
            let (v_bits, v_file) = dq_cost(v_rows * h.levels, h.dq_bits_v, h.dq_group);
            acc.payload_bits += (nz * b + ng * (16 + b)) as u64 + s_bits + v_bits;
            acc.file_bytes += (4 + 2 * ng) as u64
                + s_file
                + v_file
                + (4 + (ng * b).div_ceil(8)) as u64
                + (4 + (nz * b).div_ceil(8)) as u64;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_packing() {
        assert_eq!(pack_indices(&[3, 0, 1, 2], 2).unwrap(), alloc::vec![0x93]);
        assert_eq!(pack_indices(&[0; 8], 3).unwrap().len(), 3);
        assert_eq!(pack_indices(&[4], 2), Err(Error::IndexOutOfRange { index: 4, bits: 2 }));
        assert_eq!(unpack_indices(&[0x93], 2, 4).unwrap(), alloc::vec![3, 0, 1, 2]);
    }

    #[test]
    fn empty_model_is_header_only() {
        let a = QuantArtifact::new(ArtifactHeader::from_config(&QuantConfig::default()));
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(QuantArtifact::from_bytes(&bytes).unwrap(), a);
        let acc = account(&a.header, &[], false).unwrap();
        assert_eq!(acc.file_bytes, HEADER_BYTES as u64);
    }

    #[test]
    fn bad_magic_and_truncation_name_offsets() {
        let a = QuantArtifact::new(ArtifactHeader::from_config(&QuantConfig::default()));
        let mut bytes = a.to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(QuantArtifact::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(QuantArtifact::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let good = a.to_bytes().unwrap();
        assert!(matches!(QuantArtifact::from_bytes(&good[..20]), Err(Error::Format { offset: 20, .. })));
    }
}
