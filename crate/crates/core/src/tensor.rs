//! Dense row-major `f64` tensors.
//!
//! Every reduction runs in a fixed index order, so results are bitwise
//! reproducible. The matrix kernels use an `i-k-j` loop: each output element
//! still accumulates its products in ascending `t`, starting from zero, which
//! is exactly the order of the textbook triple loop.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

/// Binary and unary elementwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Max,
    Relu,
    Scale,
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &x| acc.max(x.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "max", f64::max)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Geometry(format!(
                "{op} expects a 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Applies `op` elementwise. `Relu` ignores `rhs`; `Scale` requires a scalar.
pub fn elementwise(op: ElemOp, lhs: &Tensor, rhs: Operand<'_>) -> Result<Tensor> {
    match (op, rhs) {
        (ElemOp::Relu, _) => Ok(lhs.relu()),
        (ElemOp::Scale, Operand::Scalar(s)) => Ok(lhs.scale(s)),
        (ElemOp::Scale, Operand::Tensor(_)) => Err(Error::InvalidArgument(
            "scale takes a scalar operand".into(),
        )),
        (ElemOp::Add, Operand::Tensor(b)) => lhs.add(b),
        (ElemOp::Sub, Operand::Tensor(b)) => lhs.sub(b),
        (ElemOp::Mul, Operand::Tensor(b)) => lhs.mul(b),
        (ElemOp::Max, Operand::Tensor(b)) => lhs.maximum(b),
        (ElemOp::Add, Operand::Scalar(s)) => Ok(lhs.map(|x| x + s)),
        (ElemOp::Sub, Operand::Scalar(s)) => Ok(lhs.map(|x| x - s)),
        (ElemOp::Mul, Operand::Scalar(s)) => Ok(lhs.map(|x| x * s)),
        (ElemOp::Max, Operand::Scalar(s)) => Ok(lhs.map(|x| x.max(s))),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &a_it) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_it * b_tj;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let a_ti = a[t * m + i];
            let b_row = &b[t * n..(t + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ti * b_tj;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums combined in a fixed
/// order: deterministic, but not the sequential summation order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c = a · b`, summing over the inner index in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm_nn(m, k, n, &a.data, &b.data, &mut c);
    Tensor::new(vec![m, n], c)
}

/// Geometry of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, channels, height, width] = input[..] else {
            return Err(Error::Geometry(format!(
                "conv2d input must be [N,C,H,W], got {input:?}"
            )));
        };
        let [filters, kc, kh, kw] = kernel[..] else {
            return Err(Error::Geometry(format!(
                "conv2d kernel must be [F,C,kh,kw], got {kernel:?}"
            )));
        };
        if kc != channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d stride must be >= 1".into()));
        }
        if kh == 0 || kw == 0 || kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(Error::Geometry(format!(
                "kernel {kh}x{kw} does not fit input {height}x{width} with padding {pad}"
            )));
        }
        Ok(ConvGeometry {
            batch,
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    /// Rows of the unfolded patch matrix: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Unfolds one image into `[C·kh·kw, H'·W']`, zero where the window hits padding.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + di) as isize - self.pad as isize;
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + dj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.out_pixels();
        let mut row = 0;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + di) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + dj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                plane[iy as usize * self.width + ix as usize] +=
                                    src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Cross-correlation with zero padding (no kernel flip).
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, pad)?;
    let (t, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![0.0; g.batch * g.filters * p];
    let mut cols = vec![0.0; t * p];
    for n in 0..g.batch {
        g.im2col(&input.data[n * g.image_len()..(n + 1) * g.image_len()], &mut cols);
        gemm_nn(
            g.filters,
            t,
            p,
            &kernel.data,
            &cols,
            &mut out[n * g.filters * p..(n + 1) * g.filters * p],
        );
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

/// Gradients of [`conv2d`] with respect to its kernel and (optionally) its input.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, pad)?;
    if grad_out.shape != g.output_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: grad_out.shape.clone(),
            rhs: g.output_shape().to_vec(),
        });
    }
    let (t, p, f) = (g.patch_len(), g.out_pixels(), g.filters);
    let mut grad_kernel = vec![0.0; f * t];
    let mut grad_input = need_input_grad.then(|| vec![0.0; input.len()]);
    let mut cols = vec![0.0; t * p];
    let mut dcols = vec![0.0; t * p];
    for n in 0..g.batch {
        let dout = &grad_out.data[n * f * p..(n + 1) * f * p];
        g.im2col(&input.data[n * g.image_len()..(n + 1) * g.image_len()], &mut cols);
        // dK[f, t] += Σ_p dOut[f, p] · cols[t, p]
        for (fi, dk_row) in grad_kernel.chunks_exact_mut(t).enumerate() {
            let d_row = &dout[fi * p..(fi + 1) * p];
            for (ti, dk) in dk_row.iter_mut().enumerate() {
                *dk += dot(d_row, &cols[ti * p..(ti + 1) * p]);
            }
        }
        if let Some(gi) = grad_input.as_mut() {
            dcols.fill(0.0);
            // dCols[t, p] = Σ_f K[f, t] · dOut[f, p]
            gemm_tn(t, f, p, &kernel.data, dout, &mut dcols);
            g.col2im(&dcols, &mut gi[n * g.image_len()..(n + 1) * g.image_len()]);
        }
    }
    Ok((
        Tensor::new(kernel.shape.clone(), grad_kernel)?,
        grad_input
            .map(|gi| Tensor::new(input.shape.clone(), gi))
            .transpose()?,
    ))
}
