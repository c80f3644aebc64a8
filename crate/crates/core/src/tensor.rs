//! Dense row-major containers and the GEMM everything else funnels into.
//!
//! Layouts are fixed so the lowering code can address raw buffers directly:
//!
//! * [`Matrix`]: `data[r * cols + c]`.
//! * [`Tensor3`]: map-major planes, `data[(s * width + x) * height + y]`. Each
//!   input map is one contiguous `width × height` plane, and within a plane
//!   `x` is the row index and `y` the column index.
//! * [`Tensor4`]: kernel `K(i, j, s, t)` stored at
//!   `data[((t * in_maps + s) * d + i) * d + j]`, so output map `t` owns one
//!   contiguous run of `d·d·S` values and the dense filter matrix is a pure
//!   reshape of the buffer.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Result<f32> {
        self.check(r, c)?;
        Ok(self.data[r * self.cols + c])
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) -> Result<()> {
        self.check(r, c)?;
        self.data[r * self.cols + c] = v;
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub(crate) fn view(&self) -> MatView<'_> {
        MatView::new(&self.data, self.rows, self.cols)
    }

    fn check(&self, r: usize, c: usize) -> Result<()> {
        if r >= self.rows || c >= self.cols {
            return Err(Error::Index(format!(
                "({}, {}) outside {}x{} matrix",
                r, c, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Borrowed strided matrix operand for [`gemm`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatView {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = a · b + beta · out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, beta: f32, out: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.fill(0.0);
        } else {
            out.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the views cover exactly `rows × cols` elements at the given
    // strides (checked by construction and the asserts above), and `out` is
    // a distinct, correctly sized row-major buffer.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(a.view(), b.view(), 0.0, &mut out.data);
    Ok(out)
}

/// Stack of `maps` planes, each `width × height`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    width: usize,
    height: usize,
    maps: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(width: usize, height: usize, maps: usize) -> Self {
        Tensor3 {
            width,
            height,
            maps,
            data: vec![0.0; width * height * maps],
        }
    }

    pub fn from_vec(width: usize, height: usize, maps: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * maps {
            return Err(Error::dim(format!(
                "tensor {}x{}x{} needs {} values, got {}",
                width,
                height,
                maps,
                width * height * maps,
                data.len()
            )));
        }
        Ok(Tensor3 {
            width,
            height,
            maps,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn maps(&self) -> usize {
        self.maps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, s: usize) -> usize {
        (s * self.width + x) * self.height + y
    }

    pub fn get(&self, x: usize, y: usize, s: usize) -> Result<f32> {
        self.check(x, y, s)?;
        Ok(self.data[self.index(x, y, s)])
    }

    pub fn set(&mut self, x: usize, y: usize, s: usize, v: f32) -> Result<()> {
        self.check(x, y, s)?;
        let idx = self.index(x, y, s);
        self.data[idx] = v;
        Ok(())
    }

    pub fn plane(&self, s: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[s * n..(s + 1) * n]
    }

    /// Reshape to `maps × (width·height)`.
    pub fn into_matrix(self) -> Matrix {
        Matrix {
            rows: self.maps,
            cols: self.width * self.height,
            data: self.data,
        }
    }

    pub fn from_matrix(m: Matrix, width: usize, height: usize) -> Result<Self> {
        if m.cols != width * height {
            return Err(Error::dim(format!(
                "cannot view {}x{} matrix as {}x{} planes",
                m.rows, m.cols, width, height
            )));
        }
        Ok(Tensor3 {
            width,
            height,
            maps: m.rows,
            data: m.data,
        })
    }

    fn check(&self, x: usize, y: usize, s: usize) -> Result<()> {
        if x >= self.width || y >= self.height || s >= self.maps {
            return Err(Error::Index(format!(
                "({}, {}, {}) outside {}x{}x{} tensor",
                x, y, s, self.width, self.height, self.maps
            )));
        }
        Ok(())
    }
}

/// Square odd convolution kernel `K(i, j, s, t)` of size `d × d × S × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    d1: usize,
    d2: usize,
    in_maps: usize,
    out_maps: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(d: usize, in_maps: usize, out_maps: usize) -> Result<Self> {
        Self::with_shape(d, d, in_maps, out_maps, None)
    }

    /// Rejects anything but square kernels with odd side.
    pub fn with_shape(
        d1: usize,
        d2: usize,
        in_maps: usize,
        out_maps: usize,
        data: Option<Vec<f32>>,
    ) -> Result<Self> {
        if d1 != d2 {
            return Err(Error::dim(format!("kernel must be square, got {}x{}", d1, d2)));
        }
        if d1.is_multiple_of(2) {
            return Err(Error::dim(format!("kernel side must be odd, got {}", d1)));
        }
        let len = d1 * d2 * in_maps * out_maps;
        let data = match data {
            Some(v) if v.len() != len => {
                return Err(Error::dim(format!(
                    "kernel {}x{}x{}x{} needs {} values, got {}",
                    d1,
                    d2,
                    in_maps,
                    out_maps,
                    len,
                    v.len()
                )))
            }
            Some(v) => v,
            None => vec![0.0; len],
        };
        Ok(Tensor4 {
            d1,
            d2,
            in_maps,
            out_maps,
            data,
        })
    }

    pub fn from_vec(d: usize, in_maps: usize, out_maps: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_shape(d, d, in_maps, out_maps, Some(data))
    }

    pub fn d(&self) -> usize {
        self.d1
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    pub fn out_maps(&self) -> usize {
        self.out_maps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, s: usize, t: usize) -> usize {
        ((t * self.in_maps + s) * self.d1 + i) * self.d2 + j
    }

    /// Distance between `K(i,j,s,t)` and `K(i,j,s,t+1)`.
    #[inline]
    pub fn group_stride(&self) -> usize {
        self.in_maps * self.d1 * self.d2
    }

    pub fn get(&self, i: usize, j: usize, s: usize, t: usize) -> Result<f32> {
        self.check(i, j, s, t)?;
        Ok(self.data[self.index(i, j, s, t)])
    }

    pub fn set(&mut self, i: usize, j: usize, s: usize, t: usize, v: f32) -> Result<()> {
        self.check(i, j, s, t)?;
        let idx = self.index(i, j, s, t);
        self.data[idx] = v;
        Ok(())
    }

    /// Dense `T × d²S` filter matrix (pure reshape).
    pub fn into_matrix(self) -> Matrix {
        Matrix {
            rows: self.out_maps,
            cols: self.d1 * self.d2 * self.in_maps,
            data: self.data,
        }
    }

    pub fn from_matrix(m: Matrix, d: usize, in_maps: usize) -> Result<Self> {
        if m.cols != d * d * in_maps {
            return Err(Error::dim(format!(
                "cannot view {}x{} matrix as {}x{}x{} kernels",
                m.rows, m.cols, d, d, in_maps
            )));
        }
        Self::with_shape(d, d, in_maps, m.rows, Some(m.data))
    }

    fn check(&self, i: usize, j: usize, s: usize, t: usize) -> Result<()> {
        if i >= self.d1 || j >= self.d2 || s >= self.in_maps || t >= self.out_maps {
            return Err(Error::Index(format!(
                "({}, {}, {}, {}) outside {}x{}x{}x{} kernel",
                i, j, s, t, self.d1, self.d2, self.in_maps, self.out_maps
            )));
        }
        Ok(())
    }
}
