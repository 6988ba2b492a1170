//! Numeric kernels behind the graph ops. Callers validate shapes; kernels assume them.

use super::Tensor;

/// `c = a·b + beta·c` for strided row/column layouts (`m×k` times `k×n`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k) and `b` (k×n);
    // `c` is a dense m×n row-major block checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> ((usize, usize), (isize, isize)) {
    if transposed {
        ((cols, rows), (1, cols as isize))
    } else {
        ((rows, cols), (cols as isize, 1))
    }
}

/// `op(a)·op(b)` where `op` optionally transposes a 2-D operand.
pub(crate) fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let ((m, k), sa) = strides(a.shape[0], a.shape[1], ta);
    let ((k2, n), sb) = strides(b.shape[0], b.shape[1], tb);
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, sa, &b.data, sb, 0.0, &mut out);
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn conv_out_dim(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 || w_shape[2] != w_shape[3] {
            return None;
        }
        if x_shape[1] != w_shape[1] {
            return None;
        }
        let k = w_shape[2];
        Some(ConvGeometry {
            batch: x_shape[0],
            in_c: x_shape[1],
            in_h: x_shape[2],
            in_w: x_shape[3],
            out_c: w_shape[0],
            k,
            stride,
            pad,
            out_h: conv_out_dim(x_shape[2], k, stride, pad)?,
            out_w: conv_out_dim(x_shape[3], k, stride, pad)?,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.out_h, self.out_w]
    }

    fn patch_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn patch_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    /// Source pixel for patch row `(c, ki, kj)` at output `(oh, ow)`.
    #[inline]
    fn source(&self, ki: usize, kj: usize, oh: usize, ow: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
        let iw = (ow * self.stride + kj) as isize - self.pad as isize;
        if ih < 0 || iw < 0 || ih >= self.in_h as isize || iw >= self.in_w as isize {
            None
        } else {
            Some((ih as usize, iw as usize))
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n_cols = self.patch_cols();
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oh in 0..self.out_h {
                        for ow in 0..self.out_w {
                            dst[oh * self.out_w + ow] = match self.source(ki, kj, oh, ow) {
                                Some((ih, iw)) => x[(c * self.in_h + ih) * self.in_w + iw],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], x: &mut [f64]) {
        let n_cols = self.patch_cols();
        for c in 0..self.in_c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oh in 0..self.out_h {
                        for ow in 0..self.out_w {
                            if let Some((ih, iw)) = self.source(ki, kj, oh, ow) {
                                x[(c * self.in_h + ih) * self.in_w + iw] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x [B,C,H,W]` with `w [O,C,k,k]`.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, geo: &ConvGeometry) -> Tensor {
    let (pr, pc) = (geo.patch_rows(), geo.patch_cols());
    let mut cols = vec![0.0; pr * pc];
    let mut out = vec![0.0; geo.batch * geo.out_plane()];
    for b in 0..geo.batch {
        geo.im2col(&x.data[b * geo.in_plane()..(b + 1) * geo.in_plane()], &mut cols);
        let dst = &mut out[b * geo.out_plane()..(b + 1) * geo.out_plane()];
        gemm(
            geo.out_c,
            pr,
            pc,
            &w.data,
            (pr as isize, 1),
            &cols,
            (pc as isize, 1),
            0.0,
            dst,
        );
    }
    Tensor::from_parts(geo.out_shape(), out)
}

/// Adjoint of `conv2d` in its input argument: maps `g [B,O,Ho,Wo]` to `[B,C,H,W]`.
pub(crate) fn conv2d_input_grad(g: &Tensor, w: &Tensor, geo: &ConvGeometry) -> Tensor {
    let (pr, pc) = (geo.patch_rows(), geo.patch_cols());
    let mut cols = vec![0.0; pr * pc];
    let mut out = vec![0.0; geo.batch * geo.in_plane()];
    for b in 0..geo.batch {
        let gb = &g.data[b * geo.out_plane()..(b + 1) * geo.out_plane()];
        // cols = wᵀ · g_b
        gemm(
            pr,
            geo.out_c,
            pc,
            &w.data,
            (1, pr as isize),
            gb,
            (pc as isize, 1),
            0.0,
            &mut cols,
        );
        geo.col2im_add(&cols, &mut out[b * geo.in_plane()..(b + 1) * geo.in_plane()]);
    }
    Tensor::from_parts(vec![geo.batch, geo.in_c, geo.in_h, geo.in_w], out)
}

/// Adjoint of `conv2d` in its filter argument: `Σ_b g_b · im2col(x_b)ᵀ`.
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, geo: &ConvGeometry) -> Tensor {
    let (pr, pc) = (geo.patch_rows(), geo.patch_cols());
    let mut cols = vec![0.0; pr * pc];
    let mut out = vec![0.0; geo.out_c * pr];
    for b in 0..geo.batch {
        geo.im2col(&x.data[b * geo.in_plane()..(b + 1) * geo.in_plane()], &mut cols);
        let gb = &g.data[b * geo.out_plane()..(b + 1) * geo.out_plane()];
        gemm(
            geo.out_c,
            pc,
            pr,
            gb,
            (pc as isize, 1),
            &cols,
            (1, pc as isize),
            1.0,
            &mut out,
        );
    }
    Tensor::from_parts(vec![geo.out_c, geo.in_c, geo.k, geo.k], out)
}

/// Number of elements per channel slot when axis 1 is the channel axis.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let channels = shape[1];
    let inner: usize = shape[2..].iter().product();
    (outer, channels, inner)
}

pub(crate) fn bias_add(x: &Tensor, bias: &Tensor) -> Tensor {
    let (outer, channels, inner) = channel_layout(&x.shape);
    let mut out = x.data.clone();
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            for v in &mut out[base..base + inner] {
                *v += bias.data[c];
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

pub(crate) fn channel_sum(x: &Tensor) -> Tensor {
    let (outer, channels, inner) = channel_layout(&x.shape);
    let mut out = vec![0.0; channels];
    for o in 0..outer {
        for (c, acc) in out.iter_mut().enumerate() {
            let base = (o * channels + c) * inner;
            *acc += x.data[base..base + inner].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![channels], out)
}

pub(crate) fn channel_broadcast(bias: &Tensor, shape: &[usize]) -> Tensor {
    let (outer, channels, inner) = channel_layout(shape);
    let mut out = Vec::with_capacity(outer * channels * inner);
    for _ in 0..outer {
        for c in 0..channels {
            out.extend(std::iter::repeat_n(bias.data[c], inner));
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().expect("last-axis op on scalar");
    let outer = if n == 0 { 0 } else { shape.iter().product::<usize>() / n };
    (outer, n)
}

pub(crate) fn reduce_last(x: &Tensor, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (outer, n) = last_axis(&x.shape);
    let data = (0..outer).map(|r| f(&x.data[r * n..(r + 1) * n])).collect();
    Tensor::from_parts(x.shape[..x.shape.len() - 1].to_vec(), data)
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn broadcast_last(x: &Tensor, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(x.data.len() * n);
    for &v in &x.data {
        data.extend(std::iter::repeat_n(v, n));
    }
    let mut shape = x.shape.clone();
    shape.push(n);
    Tensor::from_parts(shape, data)
}

pub(crate) fn slice_last(x: &Tensor, start: usize, end: usize) -> Tensor {
    let (outer, n) = last_axis(&x.shape);
    let width = end - start;
    let mut data = Vec::with_capacity(outer * width);
    for r in 0..outer {
        data.extend_from_slice(&x.data[r * n + start..r * n + end]);
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = width;
    Tensor::from_parts(shape, data)
}

pub(crate) fn pad_last(x: &Tensor, start: usize, total: usize) -> Tensor {
    let (outer, width) = last_axis(&x.shape);
    let mut data = vec![0.0; outer * total];
    for r in 0..outer {
        data[r * total + start..r * total + start + width].copy_from_slice(&x.data[r * width..(r + 1) * width]);
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = total;
    Tensor::from_parts(shape, data)
}
