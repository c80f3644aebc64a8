//! Little-endian binary checkpoints.
//!
//! ```text
//! magic    8 bytes   "TCNVCKPT"
//! version  u32       1
//! seed     u64
//! input    u8 tag    0 = maps: u32 maps, u32 width, u32 height
//!                    1 = flat: u32 size
//! count    u32       number of layers
//! layer    u8 tag, then
//!   1 conv     u32 d, in_maps, out_maps, pad, stride, in_w, in_h
//!              f32 × d·d·S·T kernel (layout of Tensor4)
//!              f32 × T bias
//!              ceil(d·d·S / 8) bytes pattern bitmap, bit k = mask[k], LSB first,
//!              mask index (s·d + i)·d + j; unused high bits are zero
//!   2 maxpool  u32 window, stride, maps, in_w, in_h
//!   3 relu
//!   4 fc       u32 out, u32 in, f32 × out·in weights (row-major), f32 × out bias
//!   5 softmax_xent
//! ```
//!
//! Loading rebuilds the network through [`Network::new`], so shape chaining and
//! the zero-at-masked-positions invariant are re-checked.

use std::fs;
use std::path::Path;

use super::{ConvLayer, FcLayer, Layer, Network, PoolLayer, Shape};
use crate::error::{Error, Result};
use crate::lowering::{ConvGeometry, SparsityPatternSet};
use crate::tensor::{Matrix, Tensor4};

const MAGIC: &[u8; 8] = b"TCNVCKPT";
const VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_FC: u8 = 4;
const TAG_SOFTMAX: u8 = 5;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn write_checkpoint(net: &Network) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u64(net.rng_seed());
    match net.input_shape() {
        Shape::Maps { maps, width, height } => {
            w.u8(0);
            w.u32(maps);
            w.u32(width);
            w.u32(height);
        }
        Shape::Flat(n) => {
            w.u8(1);
            w.u32(n);
        }
    }
    w.u32(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                let g = &c.geometry;
                w.u8(TAG_CONV);
                for v in [g.d, g.in_maps, g.out_maps, g.pad, g.stride, g.in_w, g.in_h] {
                    w.u32(v);
                }
                w.f32s(c.kernel.data());
                w.f32s(&c.bias);
                let mut bits = vec![0u8; c.pattern.total().div_ceil(8)];
                for (k, &live) in c.pattern.masks().iter().enumerate() {
                    if live {
                        bits[k / 8] |= 1 << (k % 8);
                    }
                }
                w.0.extend_from_slice(&bits);
            }
            Layer::MaxPool(p) => {
                w.u8(TAG_POOL);
                for v in [p.window, p.stride, p.maps, p.in_w, p.in_h] {
                    w.u32(v);
                }
            }
            Layer::Relu => w.u8(TAG_RELU),
            Layer::FullyConnected(f) => {
                w.u8(TAG_FC);
                w.u32(f.weights.rows());
                w.u32(f.weights.cols());
                w.f32s(f.weights.data());
                w.f32s(&f.bias);
            }
            Layer::SoftmaxXent => w.u8(TAG_SOFTMAX),
        }
    }
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("checkpoint truncated: need {} bytes, {} remain", n, self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, "parameter plane too large"))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format(0, "not a thinconv checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let seed = r.u64()?;
    let at = r.pos as u64;
    let input = match r.u8()? {
        0 => Shape::Maps {
            maps: r.u32()?,
            width: r.u32()?,
            height: r.u32()?,
        },
        1 => Shape::Flat(r.u32()?),
        t => return Err(Error::format(at, format!("unknown input tag {t}"))),
    };
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        let at = r.pos as u64;
        let bad = |e: Error| Error::format(at, format!("layer {idx}: {e}"));
        let layer = match r.u8()? {
            TAG_CONV => {
                let mut v = [0usize; 7];
                for x in v.iter_mut() {
                    *x = r.u32()?;
                }
                let geometry = ConvGeometry::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]).map_err(bad)?;
                let (d, s, t) = (v[0], v[1], v[2]);
                let kernel = Tensor4::from_vec(d, s, t, r.f32s(d * d * s * t)?).map_err(bad)?;
                let bias = r.f32s(t)?;
                let nbits = d * d * s;
                let bits_at = r.pos as u64;
                let bits = r.take(nbits.div_ceil(8))?;
                let masks: Vec<bool> = (0..nbits).map(|k| bits[k / 8] >> (k % 8) & 1 == 1).collect();
                if nbits % 8 != 0 && bits[nbits / 8] >> (nbits % 8) != 0 {
                    return Err(Error::format(bits_at, "pattern bitmap has stray high bits"));
                }
                let pattern = SparsityPatternSet::from_masks(d, s, masks).map_err(bad)?;
                Layer::Conv(ConvLayer {
                    geometry,
                    kernel,
                    bias,
                    pattern,
                })
            }
            TAG_POOL => Layer::MaxPool(PoolLayer {
                window: r.u32()?,
                stride: r.u32()?,
                maps: r.u32()?,
                in_w: r.u32()?,
                in_h: r.u32()?,
            }),
            TAG_RELU => Layer::Relu,
            TAG_FC => {
                let out = r.u32()?;
                let inp = r.u32()?;
                let weights = Matrix::from_vec(out, inp, r.f32s(out * inp)?).map_err(bad)?;
                let bias = r.f32s(out)?;
                Layer::FullyConnected(FcLayer { weights, bias })
            }
            TAG_SOFTMAX => Layer::SoftmaxXent,
            t => return Err(Error::format(at, format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last layer"));
    }
    Network::new(input, layers, seed).map_err(|e| Error::format(0, format!("invalid network: {e}")))
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let bytes = fs::read(path.as_ref()).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::input(format!("checkpoint {} not found", path.as_ref().display()))
        } else {
            Error::Io(e)
        }
    })?;
    read_checkpoint(&bytes)
}
