//! 2-D convolution and its adjoint over `[N, C, H, W]` batches.
//!
//! Both directions go through im2col/col2im and the GEMM kernels. Work is
//! split per sample; kernel gradients are reduced over samples in index order
//! so results do not depend on the worker count.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Tensor, TensorError};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Number of worker threads used by the convolution kernels (min 1).
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, TensorError> {
    if stride == 0 {
        return Err(TensorError::Dimension("stride must be ≥ 1".into()));
    }
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(TensorError::Dimension(format!(
            "padded size {padded} smaller than kernel {kernel}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(TensorError::Dimension(format!(
            "(size {size} + 2·{pad} − {kernel}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, TensorError> {
    let out = (size as i64 - 1) * stride as i64 - 2 * pad as i64 + kernel as i64;
    if size == 0 || stride == 0 || out <= 0 {
        return Err(TensorError::Dimension(format!(
            "transposed conv output size {out} is not positive"
        )));
    }
    Ok(out as usize)
}

/// Geometry of a forward convolution `[c_in, h, w] → [c_out, h_out, w_out]`.
/// A transposed convolution reuses the geometry of the conv it is adjoint to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: conv_out_size(h, kh, stride, pad)?,
            w_out: conv_out_size(w, kw, stride, pad)?,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }

    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let p = self.out_pixels();
        for c in 0..self.c_in {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.w_out..(oy + 1) * self.w_out];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `image`.
    fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let p = self.out_pixels();
        for c in 0..self.c_in {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[oy * self.w_out..(oy + 1) * self.w_out];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Runs `f` for every sample index and returns the results in index order.
fn per_sample<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = threads().min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|wkr| scope.spawn(move || (wkr * chunk..((wkr + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("conv worker panicked"))
            .collect()
    })
}

fn sum_in_order(parts: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut total = vec![0f32; len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Forward convolution. `x` is `[n, c_in, h, w]`, `k` is `[c_out, c_in, kh, kw]`.
pub(crate) fn conv_forward(x: &[f32], k: &[f32], n: usize, g: &ConvGeom) -> Vec<f32> {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let parts = per_sample(n, |s| {
        let mut cols = vec![0f32; pl * p];
        g.im2col(&x[s * g.in_len()..(s + 1) * g.in_len()], &mut cols);
        let mut out = vec![0f32; g.out_len()];
        gemm_nn(g.c_out, pl, p, k, &cols, &mut out);
        out
    });
    parts.concat()
}

/// Gradients of the forward convolution w.r.t. input and kernel.
pub(crate) fn conv_backward(
    x: &[f32],
    k: &[f32],
    dout: &[f32],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let parts = per_sample(n, |s| {
        let dout_s = &dout[s * g.out_len()..(s + 1) * g.out_len()];
        let dk = need_dk.then(|| {
            let mut cols = vec![0f32; pl * p];
            g.im2col(&x[s * g.in_len()..(s + 1) * g.in_len()], &mut cols);
            let mut dk = vec![0f32; g.c_out * pl];
            gemm_nt(g.c_out, p, pl, dout_s, &cols, &mut dk);
            dk
        });
        let dx = need_dx.then(|| {
            let mut dcols = vec![0f32; pl * p];
            gemm_tn(pl, g.c_out, p, k, dout_s, &mut dcols);
            let mut dx = vec![0f32; g.in_len()];
            g.col2im(&dcols, &mut dx);
            dx
        });
        (dx, dk)
    });
    let (dxs, dks): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dx = need_dx.then(|| dxs.into_iter().flatten().collect::<Vec<_>>().concat());
    let dk = need_dk.then(|| sum_in_order(dks.into_iter().flatten().collect(), g.c_out * pl));
    (dx, dk)
}

/// Transposed convolution: the adjoint of the conv described by `g`, mapping
/// `[n, g.c_out, g.h_out, g.w_out] → [n, g.c_in, g.h, g.w]`. The kernel layout
/// `[g.c_out, g.c_in, kh, kw]` is shared with that conv.
pub(crate) fn conv_transpose_forward(y: &[f32], k: &[f32], n: usize, g: &ConvGeom) -> Vec<f32> {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let parts = per_sample(n, |s| {
        let mut cols = vec![0f32; pl * p];
        gemm_tn(pl, g.c_out, p, k, &y[s * g.out_len()..(s + 1) * g.out_len()], &mut cols);
        let mut out = vec![0f32; g.in_len()];
        g.col2im(&cols, &mut out);
        out
    });
    parts.concat()
}

pub(crate) fn conv_transpose_backward(
    y: &[f32],
    k: &[f32],
    dout: &[f32],
    n: usize,
    g: &ConvGeom,
    need_dy: bool,
    need_dk: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let parts = per_sample(n, |s| {
        let mut cols = vec![0f32; pl * p];
        g.im2col(&dout[s * g.in_len()..(s + 1) * g.in_len()], &mut cols);
        let dy = need_dy.then(|| {
            let mut dy = vec![0f32; g.out_len()];
            gemm_nn(g.c_out, pl, p, k, &cols, &mut dy);
            dy
        });
        let dk = need_dk.then(|| {
            let mut dk = vec![0f32; g.c_out * pl];
            gemm_nt(
                g.c_out,
                p,
                pl,
                &y[s * g.out_len()..(s + 1) * g.out_len()],
                &cols,
                &mut dk,
            );
            dk
        });
        (dy, dk)
    });
    let (dys, dks): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dy = need_dy.then(|| dys.into_iter().flatten().collect::<Vec<_>>().concat());
    let dk = need_dk.then(|| sum_in_order(dks.into_iter().flatten().collect(), g.c_out * pl));
    (dy, dk)
}

/// Splits a `[c, h, w]` or `[n, c, h, w]` shape into `(n, c, h, w)`.
pub(crate) fn batch_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(TensorError::Dimension(format!(
            "expected [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [a, b, kh, kw] => Ok((a, b, kh, kw)),
        _ => Err(TensorError::Dimension(format!("kernel must be rank 4, got {shape:?}"))),
    }
}

fn with_batch_shape(input_shape: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if input_shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

/// Cross-correlation with zero padding; no kernel flip.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
    let (n, c, h, w) = batch_dims(input.shape())?;
    let (c_out, c_in, kh, kw) = kernel_dims(kernels.shape())?;
    if c != c_in {
        return Err(TensorError::Dimension(format!(
            "input has {c} channels but kernels expect {c_in}"
        )));
    }
    let g = ConvGeom::new(c_in, h, w, c_out, kh, kw, stride, pad)?;
    let out = conv_forward(input.data(), kernels.data(), n, &g);
    Tensor::new(&with_batch_shape(input.shape(), n, c_out, g.h_out, g.w_out), out)
}

/// Transposed convolution with kernels laid out `[c_in, c_out, kh, kw]`.
pub fn conv2d_transpose(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor, TensorError> {
    let (n, c, h, w) = batch_dims(input.shape())?;
    let (c_in, c_out, kh, kw) = kernel_dims(kernels.shape())?;
    if c != c_in {
        return Err(TensorError::Dimension(format!(
            "input has {c} channels but kernels expect {c_in}"
        )));
    }
    let g = transpose_geom(c_in, h, w, c_out, kh, kw, stride, pad)?;
    let out = conv_transpose_forward(input.data(), kernels.data(), n, &g);
    Tensor::new(&with_batch_shape(input.shape(), n, c_out, g.h, g.w), out)
}

/// Geometry of the forward conv whose adjoint maps `[c_in, h, w]` up.
pub(crate) fn transpose_geom(
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, TensorError> {
    let big_h = conv_transpose_out_size(h, kh, stride, pad)?;
    let big_w = conv_transpose_out_size(w, kw, stride, pad)?;
    let g = ConvGeom::new(c_out, big_h, big_w, c_in, kh, kw, stride, pad)?;
    debug_assert_eq!((g.h_out, g.w_out), (h, w));
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.0; 4]);
    }

    #[test]
    fn box_kernel_sums() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn no_kernel_flip() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn size_formulas() {
        assert_eq!(conv_out_size(256, 4, 2, 1).unwrap(), 128);
        assert_eq!(conv_transpose_out_size(128, 4, 2, 1).unwrap(), 256);
        assert!(conv_out_size(5, 4, 2, 1).is_err());
        assert!(conv_transpose_out_size(1, 1, 1, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 1), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn transpose_scatter_of_single_pixel() {
        let x = Tensor::full(&[1, 1, 1], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d_transpose(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn down_then_up_restores_size() {
        let mut size = 4;
        while size <= 256 {
            let down = conv_out_size(size, 4, 2, 1).unwrap();
            assert_eq!(conv_transpose_out_size(down, 4, 2, 1).unwrap(), size);
            size *= 2;
        }
    }

    #[test]
    fn threaded_results_match_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::normal(&[5, 3, 8, 8], 1.0, &mut rng);
        let k = Tensor::normal(&[4, 3, 4, 4], 1.0, &mut rng);
        let g = ConvGeom::new(3, 8, 8, 4, 4, 4, 2, 1).unwrap();
        let y = conv_forward(x.data(), k.data(), 5, &g);
        let dout: Vec<f32> = y.iter().map(|v| v.sin()).collect();
        let seq = conv_backward(x.data(), k.data(), &dout, 5, &g, true, true);
        set_threads(3);
        let par_y = conv_forward(x.data(), k.data(), 5, &g);
        let par = conv_backward(x.data(), k.data(), &dout, 5, &g, true, true);
        set_threads(1);
        assert_eq!(y, par_y);
        assert_eq!(seq, par);
    }
}
