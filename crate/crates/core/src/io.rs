//! The `.rvgg` weight container.
//!
//! Layout:
//!
//! ```text
//! "RVGG" | version: u32 LE | header_len: u32 LE | header (JSON, header_len bytes)
//! | zero padding to a 64-byte file offset | payload
//! ```
//!
//! The header holds the model spec, mode, dtype and a tensor manifest. Manifest offsets are
//! relative to the payload start, multiples of 64, and every tensor is stored as raw
//! little-endian scalars with zero padding between tensors.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{Layer, LayerKind, Mode, Model, ModelSpec};
use crate::block::RepVggBlock;
use crate::error::{Error, Result};
use crate::reparam::FusedConv;
use crate::tensor::{BnParams, ConvParams, DType, Linear, Scalar, Tensor4};

pub const MAGIC: &[u8; 4] = b"RVGG";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the payload start.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub mode: Mode,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn named_tensors<T: Scalar>(model: &Model<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match &layer.kind {
            LayerKind::Train(b) => {
                for (tag, conv) in [("conv3", b.conv3()), ("conv1", b.conv1())] {
                    let k = conv.kernel();
                    out.push((format!("layers.{i}.{tag}.weight"), k.shape().to_vec(), k.data()));
                }
                for (tag, bn) in [("bn3", Some(b.bn3())), ("bn1", Some(b.bn1())), ("bn_id", b.bn_id())] {
                    let Some(bn) = bn else { continue };
                    let c = vec![bn.channels()];
                    out.push((format!("layers.{i}.{tag}.running_mean"), c.clone(), bn.mean()));
                    out.push((format!("layers.{i}.{tag}.running_var"), c.clone(), bn.var()));
                    out.push((format!("layers.{i}.{tag}.weight"), c.clone(), bn.gamma()));
                    out.push((format!("layers.{i}.{tag}.bias"), c, bn.beta()));
                }
            }
            LayerKind::Deploy(f) => {
                let k = f.conv().kernel();
                out.push((format!("layers.{i}.conv.weight"), k.shape().to_vec(), k.data()));
                out.push((format!("layers.{i}.conv.bias"), vec![f.bias().len()], f.bias()));
            }
        }
    }
    let h = model.head();
    out.push(("head.weight".into(), vec![h.out_features(), h.in_features()], h.weight()));
    out.push(("head.bias".into(), vec![h.out_features()], h.bias()));
    out
}

/// Serializes `model` to the container format.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let size = T::DTYPE.size_bytes();
    let tensors = named_tensors(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        let length = data.len() * size;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            length,
        });
        offset = align(offset + length);
    }
    let header = Header {
        spec: model.spec().clone(),
        mode: model.mode(),
        dtype: T::DTYPE,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format("header", e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::format("header_length", "header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(align(PREAMBLE + json.len()) + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(align(out.len()), 0);
    let payload_start = out.len();
    for ((_, _, data), entry) in tensors.iter().zip(&header.tensors) {
        out.resize(payload_start + entry.offset, 0);
        for &v in data.iter() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

/// Parses and validates the preamble and header, returning the header and the payload offset.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("magic", "file does not start with \"RVGG\""));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::format("version", "file truncated inside the preamble"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("header_length", format!("{header_len} bytes exceed the file size {}", bytes.len())))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| Error::format("header", e.to_string()))?;
    let payload_start = align(header_end);
    if payload_start > bytes.len() {
        return Err(Error::format("payload", "file truncated before the payload"));
    }
    let payload_len = bytes.len() - payload_start;
    let size = header.dtype.size_bytes();
    let mut spans: Vec<(usize, usize, usize)> = Vec::with_capacity(header.tensors.len());
    for (i, t) in header.tensors.iter().enumerate() {
        let field = |f: &str| format!("tensors[{i}].{f}");
        if t.offset % ALIGN != 0 {
            return Err(Error::format(field("offset"), format!("{} is not {ALIGN}-byte aligned", t.offset)));
        }
        let elems = t.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if elems.and_then(|e| e.checked_mul(size)) != Some(t.length) {
            return Err(Error::format(field("length"), format!("{} bytes do not match shape {:?}", t.length, t.shape)));
        }
        match t.offset.checked_add(t.length) {
            Some(end) if end <= payload_len => spans.push((t.offset, end, i)),
            _ => {
                return Err(Error::format(
                    field("offset"),
                    format!("{}+{} is outside the {payload_len}-byte payload", t.offset, t.length),
                ))
            }
        }
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::format(
                format!("tensors[{}].offset", pair[1].2),
                format!("overlaps tensors[{}]", pair[0].2),
            ));
        }
    }
    Ok((header, payload_start))
}

struct Payload<'a, T> {
    bytes: &'a [u8],
    index: HashMap<&'a str, &'a TensorEntry>,
    _t: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar> Payload<'a, T> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let t = self
            .index
            .get(name)
            .ok_or_else(|| Error::format("tensors", format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::format(
                format!("{name}.shape"),
                format!("{:?}, expected {shape:?}", t.shape),
            ));
        }
        let size = T::DTYPE.size_bytes();
        Ok(self.bytes[t.offset..t.offset + t.length].chunks_exact(size).map(T::read_le).collect())
    }

    fn tensor4(&self, name: &str, shape: [usize; 4]) -> Result<Tensor4<T>> {
        Tensor4::new(shape, self.take(name, &shape)?)
    }

    fn bn(&self, prefix: &str, c: usize, eps: f64) -> Result<BnParams<T>> {
        let get = |f: &str| self.take(&format!("{prefix}.{f}"), &[c]);
        BnParams::new(get("running_mean")?, get("running_var")?, get("weight")?, get("bias")?, eps)
    }
}

/// Deserializes a model; fails unless the stored dtype is `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let (header, payload_start) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::format("dtype", format!("file stores {}, requested {}", header.dtype, T::DTYPE)));
    }
    let payload = Payload::<T> {
        bytes: &bytes[payload_start..],
        index: header.tensors.iter().map(|t| (t.name.as_str(), t)).collect(),
        _t: std::marker::PhantomData,
    };
    if payload.index.len() != header.tensors.len() {
        return Err(Error::format("tensors", "duplicate tensor names"));
    }
    let spec = &header.spec;
    let eps = spec.bn_eps();
    let mut expected = 2;
    let mut layers = Vec::new();
    for (i, l) in spec.layer_plan().into_iter().enumerate() {
        let cin_g = l.c_in / l.groups;
        let kind = match header.mode {
            Mode::Train => {
                let p = format!("layers.{i}");
                let conv3 = ConvParams::new(
                    payload.tensor4(&format!("{p}.conv3.weight"), [l.c_out, cin_g, 3, 3])?,
                    None,
                    l.stride,
                    1,
                    l.groups,
                )?;
                let conv1 = ConvParams::new(
                    payload.tensor4(&format!("{p}.conv1.weight"), [l.c_out, cin_g, 1, 1])?,
                    None,
                    l.stride,
                    0,
                    l.groups,
                )?;
                let bn3 = payload.bn(&format!("{p}.bn3"), l.c_out, eps)?;
                let bn1 = payload.bn(&format!("{p}.bn1"), l.c_out, eps)?;
                let bn_id = if l.has_identity {
                    Some(payload.bn(&format!("{p}.bn_id"), l.c_out, eps)?)
                } else {
                    None
                };
                expected += if l.has_identity { 14 } else { 10 };
                LayerKind::Train(RepVggBlock::new(conv3, bn3, conv1, bn1, bn_id)?)
            }
            Mode::Deploy => {
                let p = format!("layers.{i}.conv");
                let kernel = payload.tensor4(&format!("{p}.weight"), [l.c_out, cin_g, 3, 3])?;
                let bias = payload.take(&format!("{p}.bias"), &[l.c_out])?;
                expected += 2;
                LayerKind::Deploy(FusedConv::new(ConvParams::new(kernel, Some(bias), l.stride, 1, l.groups)?)?)
            }
        };
        layers.push(Layer {
            index: l.index,
            stage: l.stage,
            kind,
        });
    }
    let (fin, k) = (spec.feature_width(), spec.num_classes());
    let head = Linear::new(payload.take("head.weight", &[k, fin])?, payload.take("head.bias", &[k])?, fin, k)?;
    if header.tensors.len() != expected {
        return Err(Error::format(
            "tensors",
            format!("{} entries, the spec needs {expected}", header.tensors.len()),
        ));
    }
    Model::from_parts(header.spec, header.mode, layers, head)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    from_bytes(&std::fs::read(path)?)
}
