//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        b"IPCK"
//! version      u32 = 1
//! dtype        u8   4 (f32) or 8 (f64)
//! layout       u8   0 = row-major weights of shape out_dim x in_dim
//! layer_count  u32
//! encoder_end  u32
//! classes      u32
//! init_scale   f64
//! seed_count   u32, then seed_count x u64
//! per layer    u8 kind (0 linear, 1 batchnorm, 2 relu) followed by
//!              linear: u32 in_dim, u32 out_dim | batchnorm: u32 dim, u8 affine | relu: u32 dim
//! flags        u8   bit 0: initial snapshot present, bit 1: mask present
//! params       per layer: linear weight, bias; batchnorm [gamma, beta,] running mean, running var
//! snapshot     same layout as params, when flagged
//! mask         f64 target ratio, then per linear layer a bitmap of ceil(n/8) bytes, LSB first
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{LayerParams, ModelState};
use crate::nn::spec::{LayerSpec, NetworkSpec};
use crate::nn::tensor::Tensor;
use crate::prune::PruneMask;
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 4] = b"IPCK";
pub const FORMAT_VERSION: u32 = 1;
const LAYOUT_ROW_MAJOR: u8 = 0;

pub fn to_bytes<T: Scalar>(model: &ModelState<T>) -> Vec<u8> {
    let spec = model.spec();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.push(LAYOUT_ROW_MAJOR);
    put_u32(&mut out, spec.layers().len());
    put_u32(&mut out, spec.encoder_end());
    put_u32(&mut out, spec.output_classes());
    out.extend_from_slice(&model.init_scale().to_le_bytes());
    put_u32(&mut out, model.seeds().len());
    for s in model.seeds() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for layer in spec.layers() {
        match *layer {
            LayerSpec::Linear { in_dim, out_dim } => {
                out.push(0);
                put_u32(&mut out, in_dim);
                put_u32(&mut out, out_dim);
            }
            LayerSpec::BatchNorm { dim, affine } => {
                out.push(1);
                put_u32(&mut out, dim);
                out.push(affine as u8);
            }
            LayerSpec::Relu { dim } => {
                out.push(2);
                put_u32(&mut out, dim);
            }
        }
    }
    let flags = model.init_snapshot().is_some() as u8 | ((model.mask().is_some() as u8) << 1);
    out.push(flags);
    write_params(&mut out, model.params());
    if let Some(snap) = model.init_snapshot() {
        write_params(&mut out, snap);
    }
    if let Some(mask) = model.mask() {
        out.extend_from_slice(&mask.target_ratio().to_le_bytes());
        for m in mask.layers().iter().flatten() {
            let mut bytes = vec![0u8; m.keep.len().div_ceil(8)];
            for (i, _) in m.keep.iter().enumerate().filter(|(_, &k)| k) {
                bytes[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&bytes);
        }
    }
    out
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let dtype =
        DType::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
    if r.u8()? != LAYOUT_ROW_MAJOR {
        return Err(Error::Checkpoint("unknown weight layout".into()));
    }
    let layer_count = r.u32()? as usize;
    let encoder_end = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let init_scale = r.f64()?;
    let seed_count = r.u32()? as usize;
    let seeds = (0..seed_count)
        .map(|_| r.u64())
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        layers.push(match r.u8()? {
            0 => LayerSpec::Linear {
                in_dim: r.u32()? as usize,
                out_dim: r.u32()? as usize,
            },
            1 => LayerSpec::BatchNorm {
                dim: r.u32()? as usize,
                affine: r.u8()? != 0,
            },
            2 => LayerSpec::Relu {
                dim: r.u32()? as usize,
            },
            k => return Err(Error::Checkpoint(format!("unknown layer kind {k}"))),
        });
    }
    let spec = NetworkSpec::new(layers, encoder_end, classes)
        .map_err(|e| Error::Checkpoint(format!("invalid network header: {e}")))?;
    let flags = r.u8()?;
    let params = read_params::<T>(&mut r, &spec, dtype)?;
    let snapshot = if flags & 1 != 0 {
        Some(read_params::<T>(&mut r, &spec, dtype)?)
    } else {
        None
    };
    let mask = if flags & 2 != 0 {
        let ratio = r.f64()?;
        let mut keep_layers = Vec::with_capacity(spec.layers().len());
        for layer in spec.layers() {
            keep_layers.push(match *layer {
                LayerSpec::Linear { in_dim, out_dim } => {
                    let n = in_dim * out_dim;
                    let bits = r.take(n.div_ceil(8))?;
                    Some((0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect())
                }
                _ => None,
            });
        }
        Some(PruneMask::from_layers(&spec, keep_layers, ratio)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    ModelState::from_parts(spec, params, snapshot, mask, init_scale, seeds)
}

pub fn save_checkpoint<T: Scalar>(model: &ModelState<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn write_params<T: Scalar>(out: &mut Vec<u8>, params: &[LayerParams<T>]) {
    let mut put = |vals: &[T]| vals.iter().for_each(|v| v.write_le(out));
    for p in params {
        match p {
            LayerParams::Linear { weight, bias } => {
                put(weight.values());
                put(bias.values());
            }
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                if let (Some(g), Some(b)) = (gamma, beta) {
                    put(g.values());
                    put(b.values());
                }
                put(running_mean);
                put(running_var);
            }
            LayerParams::Relu => {}
        }
    }
}

fn read_params<T: Scalar>(
    r: &mut Reader<'_>,
    spec: &NetworkSpec,
    dtype: DType,
) -> Result<Vec<LayerParams<T>>> {
    let mut out = Vec::with_capacity(spec.layers().len());
    for layer in spec.layers() {
        out.push(match *layer {
            LayerSpec::Linear { in_dim, out_dim } => LayerParams::Linear {
                weight: Tensor::new(vec![out_dim, in_dim], r.floats(in_dim * out_dim, dtype)?)?,
                bias: Tensor::new(vec![out_dim], r.floats(out_dim, dtype)?)?,
            },
            LayerSpec::BatchNorm { dim, affine } => {
                let (gamma, beta) = if affine {
                    (
                        Some(Tensor::new(vec![dim], r.floats(dim, dtype)?)?),
                        Some(Tensor::new(vec![dim], r.floats(dim, dtype)?)?),
                    )
                } else {
                    (None, None)
                };
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean: r.floats(dim, dtype)?,
                    running_var: r.floats(dim, dtype)?,
                }
            }
            LayerSpec::Relu { .. } => LayerParams::Relu,
        });
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn floats<T: Scalar>(&mut self, n: usize, dtype: DType) -> Result<Vec<T>> {
        let w = dtype.byte_width();
        let raw = self.take(n * w)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| match dtype {
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect())
    }
}
