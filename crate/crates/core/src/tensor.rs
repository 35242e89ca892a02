//! Dense row-major `f32` tensors and the numeric kernels the autodiff tape
//! is built on.
//!
//! Storage is reference counted so cloning a tensor (binding a parameter to
//! the tape, snapshotting a model) is cheap; mutation goes through
//! [`Tensor::data_mut`], which copies on write when the buffer is shared.

use std::fmt;
use std::sync::Arc;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            numel_of(shape),
            data.len(),
            "shape {shape:?} does not match buffer of {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new(shape, vec![value; numel_of(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a 4-d tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f32 {
        // f64 accumulation keeps large reductions stable and order independent
        // enough for the loss values we report.
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn mean(&self) -> f32 {
        self.sum() / self.numel() as f32
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes"
        );
        Tensor::new(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, dim, inner) = split_axis(&self.shape, axis);
        assert!(start + len <= dim, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, out)
    }

    /// Adjoint of [`Tensor::narrow`]: embed into zeros of extent `total` along `axis`.
    pub fn pad_narrow(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let (outer, len, inner) = split_axis(&self.shape, axis);
        assert!(start + len <= total);
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = total;
        Tensor::new(&shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let (outer, _, inner) = split_axis(first, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let (po, pd, pi) = split_axis(p.shape(), axis);
                assert!(po == outer && pi == inner, "concat shape mismatch");
                let base = o * pd * pi;
                out.extend_from_slice(&p.data()[base..base + pd * pi]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor::new(&shape, out)
    }

    /// Numpy-style broadcast (right aligned) to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let strides = broadcast_strides(&self.shape, shape);
        let (outer, inner, run) = split_inner_run(shape, &strides);
        let mut out = Vec::with_capacity(numel_of(shape));
        for_each_index(
            outer,
            |_, src| match run {
                Run::Contiguous => out.extend_from_slice(&self.data[src..src + inner]),
                Run::Repeated => out.extend(std::iter::repeat(self.data[src]).take(inner)),
            },
            &strides[..outer.len()],
        );
        Tensor::new(shape, out)
    }

    /// Adjoint of [`Tensor::broadcast_to`]: sum over the broadcast axes.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let strides = broadcast_strides(shape, &self.shape);
        let (outer, inner, run) = split_inner_run(&self.shape, &strides);
        let mut acc = vec![0.0f64; numel_of(shape)];
        for_each_index(
            outer,
            |linear, dst| {
                let src = &self.data[linear * inner..(linear + 1) * inner];
                match run {
                    Run::Contiguous => {
                        for (a, &v) in acc[dst..dst + inner].iter_mut().zip(src) {
                            *a += v as f64;
                        }
                    }
                    Run::Repeated => acc[dst] += src.iter().map(|&v| v as f64).sum::<f64>(),
                }
            },
            &strides[..outer.len()],
        );
        Tensor::new(shape, acc.into_iter().map(|v| v as f32).collect())
    }

    pub fn transpose2(&self) -> Tensor {
        let (m, n) = match self.shape[..] {
            [m, n] => (m, n),
            _ => panic!("transpose2 on shape {:?}", self.shape),
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = match self.shape[..] {
            [m, k] => (m, k),
            _ => panic!("matmul lhs shape {:?}", self.shape),
        };
        let (k2, n) = match rhs.shape[..] {
            [k2, n] => (k2, n),
            _ => panic!("matmul rhs shape {:?}", rhs.shape),
        };
        assert_eq!(k, k2, "matmul inner dims");
        let out = gemm(
            m,
            k,
            n,
            MatRef::row_major(self.data(), k),
            MatRef::row_major(rhs.data(), n),
        );
        Tensor::new(&[m, n], out)
    }

    /// Nearest-neighbour 2x upsampling (each entry becomes a 2x2 block).
    pub fn upsample2x(&self) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for x in 0..ow {
                    dst[y * ow + x] = row[x / 2];
                }
            }
        }
        Tensor::new(&[n, c, oh, ow], out)
    }

    /// 2x2 average pooling. Panics on odd spatial extents; callers validate.
    pub fn downsample2x(&self) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "downsample2x needs even extents");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &self.data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let a = src[2 * y * w + 2 * x];
                    let b = src[2 * y * w + 2 * x + 1];
                    let c2 = src[(2 * y + 1) * w + 2 * x];
                    let d = src[(2 * y + 1) * w + 2 * x + 1];
                    dst[y * ow + x] = ((a + b) + (c2 + d)) * 0.25;
                }
            }
        }
        Tensor::new(&[n, c, oh, ow], out)
    }

    /// Stride-1 "same" convolution (cross-correlation) with an odd square
    /// kernel. `self` is `[N, C, H, W]`, `weight` is `[Co, C, k, k]`.
    pub fn conv2d(&self, weight: &Tensor) -> Tensor {
        let (n, c, h, w) = self.dims4();
        let (co, ci, k, _) = weight.dims4();
        assert_eq!(c, ci, "conv2d channel mismatch");
        let hw = h * w;
        let rows = c * k * k;
        let cols = im2col(self, k);
        let out2 = gemm(
            co,
            rows,
            n * hw,
            MatRef::row_major(weight.data(), rows),
            MatRef::row_major(&cols, n * hw),
        );
        Tensor::new(&[n, co, h, w], channel_major_to_nchw(&out2, n, co, hw))
    }

    /// Gradient of [`Tensor::conv2d`] with respect to its input, given the
    /// output gradient `self` (`[N, Co, H, W]`).
    pub fn conv2d_input_grad(&self, weight: &Tensor) -> Tensor {
        let (n, co, h, w) = self.dims4();
        let (co2, ci, k, _) = weight.dims4();
        assert_eq!(co, co2, "conv2d_input_grad channel mismatch");
        let hw = h * w;
        let rows = ci * k * k;
        let g2 = nchw_to_channel_major(self.data(), n, co, hw);
        // cols = W^T g
        let cols = gemm(
            rows,
            co,
            n * hw,
            MatRef::col_major(weight.data(), rows),
            MatRef::row_major(&g2, n * hw),
        );
        Tensor::new(&[n, ci, h, w], col2im(&cols, n, ci, h, w, k))
    }

    /// Gradient of [`Tensor::conv2d`] with respect to its weight: `input`
    /// is `[N, C, H, W]` and `self` is the output gradient `[N, Co, H, W]`.
    pub fn conv2d_weight_grad(&self, input: &Tensor, k: usize) -> Tensor {
        let (n, co, h, w) = self.dims4();
        let (n2, ci, h2, w2) = input.dims4();
        assert!(n == n2 && h == h2 && w == w2, "conv2d_weight_grad shape mismatch");
        let hw = h * w;
        let rows = ci * k * k;
        let g2 = nchw_to_channel_major(self.data(), n, co, hw);
        let cols = im2col(input, k);
        // dW = g cols^T
        let dw = gemm(
            co,
            n * hw,
            rows,
            MatRef::row_major(&g2, n * hw),
            MatRef::col_major(&cols, n * hw),
        );
        Tensor::new(&[co, ci, k, k], dw)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Strides into a `small` tensor when iterating over the broadcast `big`
/// shape; broadcast axes get stride zero.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    assert!(small.len() <= big.len(), "cannot broadcast {small:?} to {big:?}");
    let pad = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        let d = small[i];
        let bd = big[i + pad];
        assert!(
            d == bd || d == 1,
            "cannot broadcast {small:?} to {big:?}"
        );
        strides[i + pad] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

#[derive(Clone, Copy)]
enum Run {
    /// Source offsets advance with the destination.
    Contiguous,
    /// One source value covers the whole run.
    Repeated,
}

/// Splits `shape` into outer axes and a trailing run of `inner` elements
/// whose source offsets are either contiguous or constant.
fn split_inner_run<'s>(shape: &'s [usize], strides: &[usize]) -> (&'s [usize], usize, Run) {
    let rank = shape.len();
    let zero_run = (0..rank).rev().take_while(|&a| strides[a] == 0 || shape[a] == 1).count();
    let mut expected = 1;
    let mut contiguous_run = 0;
    for a in (0..rank).rev() {
        if shape[a] != 1 && strides[a] != expected {
            break;
        }
        expected *= shape[a];
        contiguous_run += 1;
    }
    let (k, run) = if zero_run >= contiguous_run {
        (rank - zero_run, Run::Repeated)
    } else {
        (rank - contiguous_run, Run::Contiguous)
    };
    (&shape[..k], numel_of(&shape[k..]), run)
}

/// Walks every index of `shape` in row-major order, passing the linear index
/// and the offset obtained from `strides`.
fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, usize), strides: &[usize]) {
    let total = numel_of(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let mut linear = 0usize;
    loop {
        // innermost axis as a tight loop
        let stride = strides[last];
        for i in 0..shape[last] {
            f(linear, offset + i * stride);
            linear += 1;
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            offset -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f32],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Logical matrix stored row major with leading dimension `ld`.
    fn row_major(data: &'a [f32], ld: usize) -> Self {
        Self {
            data,
            row_stride: ld as isize,
            col_stride: 1,
        }
    }

    /// Logical matrix whose storage is the row-major transpose, i.e. the
    /// logical element (i, j) lives at `data[j * ld + i]`.
    fn col_major(data: &'a [f32], ld: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: ld as isize,
        }
    }
}

/// `a (m x k) * b (k x n)` as a fresh row-major buffer.
fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>) -> Vec<f32> {
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    assert!(max_offset(m, k, a) < a.data.len());
    assert!(max_offset(k, n, b) < b.data.len());
    let mut out = Vec::<f32>::with_capacity(m * n);
    // SAFETY: the operand extents were checked against their slices above,
    // `out` has capacity for m * n values and is a fresh allocation, and with
    // beta = 0 sgemm writes every element of C without reading it.
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
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        out.set_len(m * n);
    }
    out
}

fn max_offset(rows: usize, cols: usize, m: MatRef<'_>) -> usize {
    (rows - 1) * m.row_stride as usize + (cols - 1) * m.col_stride as usize
}

/// Unfolds `[N, C, H, W]` into `[C*k*k, N*H*W]` with zero padding k/2.
fn im2col(x: &Tensor, k: usize) -> Vec<f32> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let pad = (k / 2) as isize;
    let cols_n = n * hw;
    if k == 1 {
        return nchw_to_channel_major(x.data(), n, c, hw);
    }
    let mut cols = vec![0.0; c * k * k * cols_n];
    let data = x.data();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for img in 0..n {
                    let src = &data[(img * c + ci) * hw..(img * c + ci + 1) * hw];
                    let dst = &mut dst_row[img * hw..(img + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        if x0 < x1 {
                            let s0 = (x0 as isize + dx) as usize;
                            drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `[C*k*k, N*H*W]` back, summing overlaps.
fn col2im(cols: &[f32], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let hw = h * w;
    let cols_n = n * hw;
    if k == 1 {
        return channel_major_to_nchw(cols, n, c, hw);
    }
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for img in 0..n {
                    let src = &src_row[img * hw..(img + 1) * hw];
                    let dst = &mut out[(img * c + ci) * hw..(img * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        let srow = &src[y * w..(y + 1) * w];
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        for x in x0..x1 {
                            drow[(x as isize + dx) as usize] += srow[x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, HW]` -> `[C, N*HW]`
fn nchw_to_channel_major(data: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    if n == 1 {
        return data[..c * hw].to_vec();
    }
    let mut out = vec![0.0; n * c * hw];
    for img in 0..n {
        for ch in 0..c {
            let src = &data[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            out[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N*HW]` -> `[N, C, HW]`
fn channel_major_to_nchw(data: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    if n == 1 {
        return data[..c * hw].to_vec();
    }
    let mut out = vec![0.0; n * c * hw];
    for ch in 0..c {
        for img in 0..n {
            let src = &data[ch * n * hw + img * hw..ch * n * hw + (img + 1) * hw];
            out[(img * c + ch) * hw..(img * c + ch + 1) * hw].copy_from_slice(src);
        }
    }
    out
}
