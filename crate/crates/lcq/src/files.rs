//! On-disk model, calibration and artifact files.
//!
//! A model file is an `LCQT` container with `heads` (u8 scalar) and, for
//! every block `b`, `block{b}.{qproj,kproj,vproj,oproj,fc1,fc2}` and
//! `block{b}.ln{1,2}.{gain,bias}` as f64 tensors. A calibration file holds
//! `x.{i}` (`seq_len × dim`, f64) for each sample.

use std::collections::HashMap;
use std::path::Path;

use lcq_core::block::{BlockWeights, CalibrationSet, LAYER_NAMES};
use lcq_core::storage::QuantArtifact;
use lcq_core::Tensor;

use crate::error::{Error, Result};
use crate::lcqt::{self, NamedTensor, TensorData};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_artifact(path: &Path, artifact: &QuantArtifact) -> Result<()> {
    write_bytes(path, &artifact.to_bytes()?)
}

pub fn read_artifact(path: &Path) -> Result<QuantArtifact> {
    Ok(QuantArtifact::from_bytes(&read_bytes(path)?)?)
}

fn tensor(name: String, t: &Tensor) -> NamedTensor {
    NamedTensor::f64(name, t.shape(), t.data().to_vec())
}

pub fn model_tensors(stack: &[BlockWeights]) -> Result<Vec<NamedTensor>> {
    let heads = stack.first().map_or(1, |b| b.heads);
    let heads = u8::try_from(heads).map_err(|_| Error::usage("at most 255 heads can be stored"))?;
    let mut out = vec![NamedTensor { name: "heads".into(), dims: vec![], data: TensorData::U8(vec![heads]) }];
    for (b, w) in stack.iter().enumerate() {
        for (k, name) in LAYER_NAMES.iter().enumerate() {
            out.push(tensor(format!("block{b}.{name}"), &w.linear[k]));
        }
        out.push(tensor(format!("block{b}.ln1.gain"), &w.ln1_gain));
        out.push(tensor(format!("block{b}.ln1.bias"), &w.ln1_bias));
        out.push(tensor(format!("block{b}.ln2.gain"), &w.ln2_gain));
        out.push(tensor(format!("block{b}.ln2.bias"), &w.ln2_bias));
    }
    Ok(out)
}

fn index(tensors: Vec<NamedTensor>) -> HashMap<String, NamedTensor> {
    tensors.into_iter().map(|t| (t.name.clone(), t)).collect()
}

fn take(map: &mut HashMap<String, NamedTensor>, name: &str) -> Result<Tensor> {
    let t = map.remove(name).ok_or_else(|| Error::usage(format!("missing tensor {name}")))?;
    let dims = t.dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::new(dims, t.data.to_f64())?)
}

pub fn model_from_tensors(tensors: Vec<NamedTensor>) -> Result<Vec<BlockWeights>> {
    let mut map = index(tensors);
    let heads = match map.remove("heads").map(|t| t.data) {
        Some(TensorData::U8(v)) if v.len() == 1 => v[0] as usize,
        _ => return Err(Error::usage("model file lacks a u8 `heads` scalar")),
    };
    let mut stack = Vec::new();
    while map.contains_key(&format!("block{}.qproj", stack.len())) {
        let b = stack.len();
        let mut linear = Vec::with_capacity(6);
        for name in LAYER_NAMES {
            linear.push(take(&mut map, &format!("block{b}.{name}"))?);
        }
        let w = BlockWeights {
            linear: linear.try_into().expect("six layers"),
            ln1_gain: take(&mut map, &format!("block{b}.ln1.gain"))?,
            ln1_bias: take(&mut map, &format!("block{b}.ln1.bias"))?,
            ln2_gain: take(&mut map, &format!("block{b}.ln2.gain"))?,
            ln2_bias: take(&mut map, &format!("block{b}.ln2.bias"))?,
            heads,
        };
        w.validate()?;
        stack.push(w);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::usage(format!("unexpected tensor {extra} in model file")));
    }
    Ok(stack)
}

pub fn calib_tensors(calib: &CalibrationSet) -> Vec<NamedTensor> {
    calib.fp.iter().enumerate().map(|(i, x)| tensor(format!("x.{i}"), x)).collect()
}

pub fn calib_from_tensors(tensors: Vec<NamedTensor>) -> Result<CalibrationSet> {
    let n = tensors.len();
    let mut map = index(tensors);
    let inputs = (0..n).map(|i| take(&mut map, &format!("x.{i}"))).collect::<Result<Vec<_>>>()?;
    if inputs.is_empty() {
        return Err(Error::usage("calibration file holds no samples"));
    }
    Ok(CalibrationSet::from_inputs(inputs))
}

pub fn save_model(path: &Path, stack: &[BlockWeights]) -> Result<()> {
    write_bytes(path, &lcqt::encode(&model_tensors(stack)?)?)
}

pub fn load_model(path: &Path) -> Result<Vec<BlockWeights>> {
    model_from_tensors(lcqt::decode(&read_bytes(path)?)?)
}

pub fn save_calib(path: &Path, calib: &CalibrationSet) -> Result<()> {
    write_bytes(path, &lcqt::encode(&calib_tensors(calib))?)
}

pub fn load_calib(path: &Path) -> Result<CalibrationSet> {
    calib_from_tensors(lcqt::decode(&read_bytes(path)?)?)
}
