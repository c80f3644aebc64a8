//! Reduction of generalized convolution, dense or group-sparse, to one GEMM.
//!
//! Output location `(x, y)` reads input `U(x·stride + i − pad, y·stride + j − pad, s)`
//! for every kernel offset `(i, j)` kept alive in the pattern `Q_s` of input map
//! `s`; samples outside the input read as zero. No kernel flip is applied.
//!
//! Both lowered factors share one row/column key: the live `(s, i, j)` triples in
//! s-major order, row-major over `(i, j)` within each map. A thinned pattern
//! therefore removes columns from the filter matrix and the matching rows from
//! the patch matrix, and the product shrinks by `d²S / Σ|Q_s|`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix, Tensor3, Tensor4};

/// Shape and sampling parameters of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub d: usize,
    pub in_maps: usize,
    pub out_maps: usize,
    pub pad: usize,
    pub stride: usize,
    pub in_w: usize,
    pub in_h: usize,
}

impl ConvGeometry {
    pub fn new(
        d: usize,
        in_maps: usize,
        out_maps: usize,
        pad: usize,
        stride: usize,
        in_w: usize,
        in_h: usize,
    ) -> Result<Self> {
        if d.is_multiple_of(2) {
            return Err(Error::dim(format!("kernel side must be odd, got {d}")));
        }
        if stride == 0 {
            return Err(Error::dim("stride must be at least 1"));
        }
        for (name, extent) in [("width", in_w), ("height", in_h)] {
            let span = extent + 2 * pad;
            if span < d {
                return Err(Error::dim(format!(
                    "padded input {name} {span} smaller than kernel {d}"
                )));
            }
            if !(span - d).is_multiple_of(stride) {
                return Err(Error::dim(format!(
                    "input {name} {extent} with pad {pad} does not tile kernel {d} at stride {stride}"
                )));
            }
        }
        Ok(ConvGeometry {
            d,
            in_maps,
            out_maps,
            pad,
            stride,
            in_w,
            in_h,
        })
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.d) / self.stride + 1
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.d) / self.stride + 1
    }

    pub fn in_plane(&self) -> usize {
        self.in_w * self.in_h
    }

    pub fn out_plane(&self) -> usize {
        self.out_w() * self.out_h()
    }

    fn check_input(&self, u: &Tensor3) -> Result<()> {
        if u.width() != self.in_w || u.height() != self.in_h || u.maps() != self.in_maps {
            return Err(Error::dim(format!(
                "input {}x{}x{} does not match geometry {}x{}x{}",
                u.width(),
                u.height(),
                u.maps(),
                self.in_w,
                self.in_h,
                self.in_maps
            )));
        }
        Ok(())
    }

    fn check_kernel(&self, k: &Tensor4) -> Result<()> {
        if k.d() != self.d || k.in_maps() != self.in_maps || k.out_maps() != self.out_maps {
            return Err(Error::dim(format!(
                "kernel {}x{}x{}x{} does not match geometry d={} S={} T={}",
                k.d(),
                k.d(),
                k.in_maps(),
                k.out_maps(),
                self.d,
                self.in_maps,
                self.out_maps
            )));
        }
        Ok(())
    }

    fn check_pattern(&self, q: &SparsityPatternSet) -> Result<()> {
        if q.d() != self.d || q.in_maps() != self.in_maps {
            return Err(Error::dim(format!(
                "pattern d={} S={} does not match geometry d={} S={}",
                q.d(),
                q.in_maps(),
                self.d,
                self.in_maps
            )));
        }
        Ok(())
    }
}

/// One kernel group coordinate. Field order gives the canonical key ordering.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
pub struct GroupCoord {
    pub s: usize,
    pub i: usize,
    pub j: usize,
}

/// Per-input-map `d × d` masks; `true` keeps the offset alive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPatternSet {
    d: usize,
    in_maps: usize,
    masks: Vec<bool>,
}

impl SparsityPatternSet {
    pub fn full(d: usize, in_maps: usize) -> Self {
        SparsityPatternSet {
            d,
            in_maps,
            masks: vec![true; d * d * in_maps],
        }
    }

    pub fn empty(d: usize, in_maps: usize) -> Self {
        SparsityPatternSet {
            d,
            in_maps,
            masks: vec![false; d * d * in_maps],
        }
    }

    /// Masks laid out `[(s * d + i) * d + j]`.
    pub fn from_masks(d: usize, in_maps: usize, masks: Vec<bool>) -> Result<Self> {
        if masks.len() != d * d * in_maps {
            return Err(Error::dim(format!(
                "pattern d={} S={} needs {} mask bits, got {}",
                d,
                in_maps,
                d * d * in_maps,
                masks.len()
            )));
        }
        Ok(SparsityPatternSet { d, in_maps, masks })
    }

    /// The same `d × d` mask replicated over every input map.
    pub fn replicated(d: usize, in_maps: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != d * d {
            return Err(Error::dim(format!(
                "single mask for d={} needs {} bits, got {}",
                d,
                d * d,
                mask.len()
            )));
        }
        let masks = (0..in_maps).flat_map(|_| mask.iter().copied()).collect();
        Ok(SparsityPatternSet { d, in_maps, masks })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    pub fn masks(&self) -> &[bool] {
        &self.masks
    }

    #[inline]
    pub fn is_live(&self, s: usize, i: usize, j: usize) -> bool {
        self.masks[(s * self.d + i) * self.d + j]
    }

    pub fn set(&mut self, s: usize, i: usize, j: usize, live: bool) {
        self.masks[(s * self.d + i) * self.d + j] = live;
    }

    /// `|Q_s|`.
    pub fn count(&self, s: usize) -> usize {
        let n = self.d * self.d;
        self.masks[s * n..(s + 1) * n].iter().filter(|&&b| b).count()
    }

    /// `Σ_s |Q_s|`.
    pub fn live(&self) -> usize {
        self.masks.iter().filter(|&&b| b).count()
    }

    pub fn total(&self) -> usize {
        self.masks.len()
    }

    /// `τ = Σ_s |Q_s| / (d²S)`.
    pub fn density(&self) -> f64 {
        if self.masks.is_empty() {
            return 0.0;
        }
        self.live() as f64 / self.total() as f64
    }

    /// Input maps whose whole pattern is empty.
    pub fn dead_maps(&self) -> Vec<usize> {
        (0..self.in_maps).filter(|&s| self.count(s) == 0).collect()
    }

    /// Live coordinates in canonical key order.
    pub fn keys(&self) -> Vec<GroupCoord> {
        let d = self.d;
        let mut out = Vec::with_capacity(self.live());
        for s in 0..self.in_maps {
            for i in 0..d {
                for j in 0..d {
                    if self.is_live(s, i, j) {
                        out.push(GroupCoord { s, i, j });
                    }
                }
            }
        }
        out
    }
}

/// Thinned filter matrix, `T × Σ|Q_s|`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMatrix {
    pub inner: Matrix,
    pub column_key: Vec<GroupCoord>,
}

/// Thinned patch matrix, `Σ|Q_s| × W''H''`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub inner: Matrix,
    pub row_key: Vec<GroupCoord>,
}

/// Reference evaluation by nested loops over the live pattern (f64 accumulation).
pub fn conv_direct(
    u: &Tensor3,
    k: &Tensor4,
    geom: &ConvGeometry,
    q: &SparsityPatternSet,
) -> Result<Tensor3> {
    geom.check_input(u)?;
    geom.check_kernel(k)?;
    geom.check_pattern(q)?;
    let (ow, oh) = (geom.out_w(), geom.out_h());
    let mut v = Tensor3::zeros(ow, oh, geom.out_maps);
    for t in 0..geom.out_maps {
        for x in 0..ow {
            for y in 0..oh {
                let mut acc = 0.0f64;
                for s in 0..geom.in_maps {
                    for i in 0..geom.d {
                        for j in 0..geom.d {
                            if !q.is_live(s, i, j) {
                                continue;
                            }
                            let ix = (x * geom.stride + i) as isize - geom.pad as isize;
                            let iy = (y * geom.stride + j) as isize - geom.pad as isize;
                            if ix < 0 || iy < 0 || ix >= geom.in_w as isize || iy >= geom.in_h as isize
                            {
                                continue;
                            }
                            let kv = k.data()[k.index(i, j, s, t)] as f64;
                            let uv = u.data()[u.index(ix as usize, iy as usize, s)] as f64;
                            acc += kv * uv;
                        }
                    }
                }
                let idx = v.index(x, y, t);
                v.data_mut()[idx] = acc as f32;
            }
        }
    }
    Ok(v)
}

/// Row `t` is `K(i, j, s, t)` over the live keys.
pub fn pack_filters(k: &Tensor4, q: &SparsityPatternSet) -> Result<FilterMatrix> {
    if q.d() != k.d() || q.in_maps() != k.in_maps() {
        return Err(Error::dim(format!(
            "pattern d={} S={} does not match kernel d={} S={}",
            q.d(),
            q.in_maps(),
            k.d(),
            k.in_maps()
        )));
    }
    let keys = q.keys();
    let cols = keys.len();
    let mut data = Vec::with_capacity(k.out_maps() * cols);
    for t in 0..k.out_maps() {
        data.extend(keys.iter().map(|c| k.data()[k.index(c.i, c.j, c.s, t)]));
    }
    Ok(FilterMatrix {
        inner: Matrix::from_vec(k.out_maps(), cols, data)?,
        column_key: keys,
    })
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `off`.
#[inline]
fn valid_range(out: usize, extent: usize, off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride)
    };
    let hi = if extent + pad > off {
        ((extent + pad - off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Gather one example's patches into `out` rows (`row_stride` apart), starting at
/// column `col_offset`. Map `s` of the example begins at `input[s * map_stride]`.
pub(crate) fn gather_patches(
    geom: &ConvGeometry,
    keys: &[GroupCoord],
    input: &[f32],
    map_stride: usize,
    out: &mut [f32],
    row_stride: usize,
    col_offset: usize,
) {
    let (ow, oh) = (geom.out_w(), geom.out_h());
    let (in_w, in_h, pad, stride) = (geom.in_w, geom.in_h, geom.pad, geom.stride);
    for (r, key) in keys.iter().enumerate() {
        let dst = &mut out[r * row_stride + col_offset..r * row_stride + col_offset + ow * oh];
        let plane = &input[key.s * map_stride..key.s * map_stride + in_w * in_h];
        let (xlo, xhi) = valid_range(ow, in_w, key.i, pad, stride);
        let (ylo, yhi) = valid_range(oh, in_h, key.j, pad, stride);
        dst[..xlo * oh].fill(0.0);
        dst[xhi * oh..].fill(0.0);
        for x in xlo..xhi {
            let row = &mut dst[x * oh..(x + 1) * oh];
            let ix = x * stride + key.i - pad;
            let src = &plane[ix * in_h..(ix + 1) * in_h];
            row[..ylo].fill(0.0);
            row[yhi..].fill(0.0);
            if ylo < yhi {
                let iy0 = ylo * stride + key.j - pad;
                if stride == 1 {
                    row[ylo..yhi].copy_from_slice(&src[iy0..iy0 + (yhi - ylo)]);
                } else {
                    for (k, y) in (ylo..yhi).enumerate() {
                        row[y] = src[iy0 + k * stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_patches`]: accumulates patch rows back onto the input grid.
pub(crate) fn scatter_patches(
    geom: &ConvGeometry,
    keys: &[GroupCoord],
    patches: &[f32],
    row_stride: usize,
    col_offset: usize,
    grad: &mut [f32],
    map_stride: usize,
) {
    let (ow, oh) = (geom.out_w(), geom.out_h());
    let (in_w, in_h, pad, stride) = (geom.in_w, geom.in_h, geom.pad, geom.stride);
    for (r, key) in keys.iter().enumerate() {
        let src = &patches[r * row_stride + col_offset..r * row_stride + col_offset + ow * oh];
        let plane = &mut grad[key.s * map_stride..key.s * map_stride + in_w * in_h];
        let (xlo, xhi) = valid_range(ow, in_w, key.i, pad, stride);
        let (ylo, yhi) = valid_range(oh, in_h, key.j, pad, stride);
        if ylo >= yhi {
            continue;
        }
        for x in xlo..xhi {
            let row = &src[x * oh..(x + 1) * oh];
            let ix = x * stride + key.i - pad;
            let dst = &mut plane[ix * in_h..(ix + 1) * in_h];
            let iy0 = ylo * stride + key.j - pad;
            for (k, y) in (ylo..yhi).enumerate() {
                dst[iy0 + k * stride] += row[y];
            }
        }
    }
}

pub fn im2col(u: &Tensor3, geom: &ConvGeometry, q: &SparsityPatternSet) -> Result<PatchMatrix> {
    geom.check_input(u)?;
    geom.check_pattern(q)?;
    let keys = q.keys();
    let cols = geom.out_plane();
    let mut inner = Matrix::zeros(keys.len(), cols);
    gather_patches(geom, &keys, u.data(), geom.in_plane(), inner.data_mut(), cols, 0);
    Ok(PatchMatrix {
        inner,
        row_key: keys,
    })
}

/// Patch matrix for a batch stored map-major across examples: map `s` of
/// example `n` is the plane at `(s * batch + n) * W'H'`. Columns are
/// example-major, `n * W''H'' + l`.
pub(crate) fn im2col_batch(
    input: &[f32],
    batch: usize,
    geom: &ConvGeometry,
    keys: &[GroupCoord],
) -> Matrix {
    let plane = geom.in_plane();
    let l = geom.out_plane();
    let cols = batch * l;
    let mut out = Matrix::zeros(keys.len(), cols);
    for n in 0..batch {
        gather_patches(geom, keys, &input[n * plane..], batch * plane, out.data_mut(), cols, n * l);
    }
    out
}

/// Adjoint of [`im2col_batch`].
pub(crate) fn col2im_batch(
    patches: &Matrix,
    batch: usize,
    geom: &ConvGeometry,
    keys: &[GroupCoord],
) -> Vec<f32> {
    let plane = geom.in_plane();
    let l = geom.out_plane();
    let mut grad = vec![0.0; geom.in_maps * batch * plane];
    for n in 0..batch {
        scatter_patches(
            geom,
            keys,
            patches.data(),
            patches.cols(),
            n * l,
            &mut grad[n * plane..],
            batch * plane,
        );
    }
    grad
}

/// Fast path: `reshape(F · im2col(U))`.
pub fn conv_lowered(
    u: &Tensor3,
    f: &FilterMatrix,
    geom: &ConvGeometry,
    q: &SparsityPatternSet,
) -> Result<Tensor3> {
    let keys = q.keys();
    if f.column_key != keys {
        return Err(Error::Consistency(format!(
            "filter matrix has {} columns keyed differently from the {} live pattern groups",
            f.column_key.len(),
            keys.len()
        )));
    }
    if f.inner.rows() != geom.out_maps {
        return Err(Error::dim(format!(
            "filter matrix has {} rows, geometry has {} output maps",
            f.inner.rows(),
            geom.out_maps
        )));
    }
    let p = im2col(u, geom, q)?;
    if p.row_key != f.column_key {
        return Err(Error::Consistency("patch rows and filter columns disagree".into()));
    }
    let mut out = vec![0.0; geom.out_maps * geom.out_plane()];
    gemm(f.inner.view(), p.inner.view(), 0.0, &mut out);
    Tensor3::from_vec(geom.out_w(), geom.out_h(), geom.out_maps, out)
}

/// Exact adjoint of [`im2col`].
pub fn col2im_backward(
    dp: &Matrix,
    geom: &ConvGeometry,
    q: &SparsityPatternSet,
) -> Result<Tensor3> {
    geom.check_pattern(q)?;
    let keys = q.keys();
    if dp.rows() != keys.len() || dp.cols() != geom.out_plane() {
        return Err(Error::dim(format!(
            "patch gradient {}x{} does not match {}x{}",
            dp.rows(),
            dp.cols(),
            keys.len(),
            geom.out_plane()
        )));
    }
    let mut du = Tensor3::zeros(geom.in_w, geom.in_h, geom.in_maps);
    let plane = geom.in_plane();
    scatter_patches(geom, &keys, dp.data(), dp.cols(), 0, du.data_mut(), plane);
    Ok(du)
}

/// `d²S / Σ|Q_s|`.
pub fn theoretical_speedup(q: &SparsityPatternSet) -> Result<f64> {
    let live = q.live();
    if live == 0 {
        return Err(Error::UndefinedSpeedup);
    }
    Ok(q.total() as f64 / live as f64)
}
