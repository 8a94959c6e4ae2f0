//! 2-D convolution via im2col + GEMM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Element, Op, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Symmetric zero padding of `(K-1)·dilation/2` per side; odd kernels only.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: Padding::Same,
        }
    }

    pub fn valid(stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            padding: Padding::Valid,
        }
    }
}

/// Span of a dilated kernel along one axis.
pub fn receptive_field(kernel: usize, dilation: usize) -> usize {
    kernel + (kernel - 1) * (dilation - 1)
}

pub fn conv_output_len(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let pad = match spec.padding {
        Padding::Same => (kernel - 1) * spec.dilation / 2,
        Padding::Valid => 0,
    };
    let span = receptive_field(kernel, spec.dilation);
    (input + 2 * pad)
        .checked_sub(span)
        .map(|r| r / spec.stride + 1)
}

/// Resolved sizes of one conv application.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Self> {
        let (&[n, c, h, w], &[o, ci, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OIKK kernel, got {input:?} and {kernel:?}"
            )));
        };
        if c != ci {
            return Err(Error::shape(format!(
                "conv2d: input {input:?} has {c} channels but kernel {kernel:?} expects {ci}"
            )));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::arg(format!(
                "conv2d: stride ({}) and dilation ({}) must be positive",
                spec.stride, spec.dilation
            )));
        }
        let (pad_h, pad_w) = match spec.padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::arg(format!(
                        "conv2d: same padding needs an odd kernel, got {kh}x{kw}"
                    )));
                }
                ((kh - 1) * spec.dilation / 2, (kw - 1) * spec.dilation / 2)
            }
            Padding::Valid => (0, 0),
        };
        let too_small = || {
            Error::shape(format!(
                "conv2d: input {input:?} smaller than dilated kernel {kernel:?} (dilation {})",
                spec.dilation
            ))
        };
        let oh = conv_output_len(h, kh, spec).ok_or_else(too_small)?;
        let ow = conv_output_len(w, kw, spec).ok_or_else(too_small)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride: spec.stride,
            dilation: spec.dilation,
            pad_h,
            pad_w,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let shift = kj * self.dilation;
        let lo = if self.pad_w > shift {
            (self.pad_w - shift).div_ceil(self.stride)
        } else {
            0
        };
        let hi = (self.w + self.pad_w)
            .checked_sub(shift)
            .map_or(0, |span| span.div_ceil(self.stride))
            .min(self.ow);
        (lo.min(hi), hi)
    }

    /// Walks the column matrix one `(row, oy)` segment at a time. `f` gets
    /// the segment's offset in the column matrix, the valid column range and,
    /// when the input row exists, the input offset of the first valid tap.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, (usize, usize), Option<usize>)) {
        let cols = self.col_cols();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.oh {
                        let seg = row * cols + oy * self.ow;
                        let iy = (oy * self.stride + ki * self.dilation) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            f(seg, (0, 0), None);
                            continue;
                        }
                        let ix = lo * self.stride + kj * self.dilation - self.pad_w;
                        f(seg, (lo, hi), Some((ch * self.h + iy as usize) * self.w + ix));
                    }
                }
            }
        }
    }

    fn im2col<E: Element>(&self, image: &[E], col: &mut [E]) {
        let (ow, stride) = (self.ow, self.stride);
        self.for_each_segment(|seg, (lo, hi), src| {
            let dst = &mut col[seg..seg + ow];
            dst[..lo].fill(E::zero());
            dst[hi..].fill(E::zero());
            if let Some(src) = src {
                let n = hi - lo;
                if stride == 1 {
                    dst[lo..hi].copy_from_slice(&image[src..src + n]);
                } else {
                    for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                        *d = image[src + k * stride];
                    }
                }
            } else {
                dst.fill(E::zero());
            }
        });
    }

    fn col2im<E: Element>(&self, col: &[E], image: &mut [E]) {
        let stride = self.stride;
        self.for_each_segment(|seg, (lo, hi), src| {
            if let Some(src) = src {
                let from = &col[seg + lo..seg + hi];
                if stride == 1 {
                    image[src..src + from.len()].iter_mut().zip(from).for_each(|(d, &v)| *d += v);
                } else {
                    for (k, &v) in from.iter().enumerate() {
                        image[src + k * stride] += v;
                    }
                }
            }
        });
    }
}

/// `dst += w · src`, elementwise.
#[inline]
fn axpy<E: Element>(w: E, src: &[E], dst: &mut [E]) {
    let n = dst.len().min(src.len());
    let (dst, src) = (&mut dst[..n], &src[..n]);
    let mut dc = dst.chunks_exact_mut(8);
    let mut sc = src.chunks_exact(8);
    for (d, s) in (&mut dc).zip(&mut sc) {
        for i in 0..8 {
            d[i] += w * s[i];
        }
    }
    for (d, &s) in dc.into_remainder().iter_mut().zip(sc.remainder()) {
        *d += w * s;
    }
}

/// Dot product with eight independent partial sums (vectorizable, and the
/// summation order is fixed).
#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut lanes = [E::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = E::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail += x * y;
    }
    lanes.iter().copied().sum::<E>() + tail
}

impl ConvGeometry {
    /// Stride-1 convolutions are computed tap by tap on contiguous row
    /// segments instead of through a column matrix.
    fn direct(&self) -> bool {
        self.stride == 1
    }

    /// `f(kernel_index, in_offset, out_offset, len)` for every tap and
    /// output row with a non-empty valid segment, covering all channels
    /// (`kernel_index` excludes the output channel).
    #[inline]
    fn for_each_row_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        // output rows outermost: every channel's row stays cache-resident
        // while all taps accumulate into it
        for oy in 0..self.oh {
            for ch in 0..self.c {
                for ki in 0..self.kh {
                    let iy = (oy + ki * self.dilation) as isize - self.pad_h as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    let row = (ch * self.h + iy as usize) * self.w;
                    for kj in 0..self.kw {
                        let (lo, hi) = self.valid_cols(kj);
                        if lo == hi {
                            continue;
                        }
                        let tap = (ch * self.kh + ki) * self.kw + kj;
                        f(tap, row + lo + kj * self.dilation - self.pad_w, oy * self.ow + lo, hi - lo);
                    }
                }
            }
        }
    }

    fn direct_forward<E: Element>(&self, image: &[E], kernel: &[E], out: &mut [E]) {
        let (rows, cols) = (self.col_rows(), self.col_cols());
        self.for_each_row_tap(|tap, src, dst, len| {
            let x = &image[src..src + len];
            for o in 0..self.o {
                let base = o * cols + dst;
                axpy(kernel[o * rows + tap], x, &mut out[base..base + len]);
            }
        });
    }

    fn direct_kernel_grad<E: Element>(&self, image: &[E], grad_out: &[E], dk: &mut [E]) {
        let (rows, cols) = (self.col_rows(), self.col_cols());
        self.for_each_row_tap(|tap, src, dst, len| {
            let x = &image[src..src + len];
            for o in 0..self.o {
                let base = o * cols + dst;
                dk[o * rows + tap] += dot(x, &grad_out[base..base + len]);
            }
        });
    }

    fn direct_input_grad<E: Element>(&self, kernel: &[E], grad_out: &[E], dx: &mut [E]) {
        let (rows, cols) = (self.col_rows(), self.col_cols());
        self.for_each_row_tap(|tap, src, dst, len| {
            let d = &mut dx[src..src + len];
            for o in 0..self.o {
                let base = o * cols + dst;
                axpy(kernel[o * rows + tap], &grad_out[base..base + len], d);
            }
        });
    }
}

impl<E: Element> Tensor<E> {
    /// NCHW × OIKK convolution with optional per-output-channel bias.
    pub fn conv2d(&self, kernel: &Tensor<E>, bias: Option<&Tensor<E>>, spec: ConvSpec) -> Result<Tensor<E>> {
        let g = ConvGeometry::new(self.shape(), kernel.shape(), spec)?;
        if let Some(b) = bias {
            if b.numel() != g.o {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} does not match {} output channels",
                    b.shape(),
                    g.o
                )));
            }
        }
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let in_chunk = g.c * g.h * g.w;
        let out_chunk = g.o * cols;
        let mut out = vec![E::zero(); g.n * out_chunk];
        let x = self.data();
        let k = kernel.data();
        let b = bias.map(|b| b.data());
        out.par_chunks_mut(out_chunk)
            .enumerate()
            .for_each_init(
                || vec![E::zero(); if g.direct() { 0 } else { rows * cols }],
                |col, (img, dst)| {
                    let image = &x[img * in_chunk..(img + 1) * in_chunk];
                    if g.direct() {
                        g.direct_forward(image, k, dst);
                    } else {
                        g.im2col(image, col);
                        E::gemm(g.o, rows, cols, k, (rows, 1), col, (cols, 1), E::zero(), dst);
                    }
                    if let Some(b) = b {
                        for (oc, plane) in dst.chunks_mut(cols).enumerate() {
                            plane.iter_mut().for_each(|v| *v += b[oc]);
                        }
                    }
                },
            );
        Ok(Tensor::from_op(
            out,
            vec![g.n, g.o, g.oh, g.ow],
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.cloned(),
                spec: g,
            },
        ))
    }
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`, each only when
/// the matching flag is set.
/// Gradients for the input, kernel and bias; each only when requested.
type ConvGrads<E> = (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>);

pub(crate) fn conv2d_backward<E: Element>(
    g: &ConvGeometry,
    input: &[E],
    kernel: &[E],
    grad_out: &[E],
    want: (bool, bool, bool),
) -> ConvGrads<E> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_chunk = g.c * g.h * g.w;
    let out_chunk = g.o * cols;
    let (want_x, want_k, want_b) = want;

    #[allow(clippy::type_complexity)]
    let per_image: Vec<(Option<Vec<E>>, Option<Vec<E>>)> = (0..g.n)
        .into_par_iter()
        .map(|img| {
            let dy = &grad_out[img * out_chunk..(img + 1) * out_chunk];
            let image = &input[img * in_chunk..(img + 1) * in_chunk];
            let dk = want_k.then(|| {
                let mut acc = vec![E::zero(); g.o * rows];
                if g.direct() {
                    g.direct_kernel_grad(image, dy, &mut acc);
                } else {
                    let mut col = vec![E::zero(); rows * cols];
                    g.im2col(image, &mut col);
                    // dK = dY · colᵀ
                    E::gemm(g.o, cols, rows, dy, (cols, 1), &col, (1, cols), E::zero(), &mut acc);
                }
                acc
            });
            let dx = want_x.then(|| {
                let mut img_grad = vec![E::zero(); in_chunk];
                if g.direct() {
                    g.direct_input_grad(kernel, dy, &mut img_grad);
                } else {
                    let mut dcol = vec![E::zero(); rows * cols];
                    // dcol = Kᵀ · dY
                    E::gemm(rows, g.o, cols, kernel, (1, rows), dy, (cols, 1), E::zero(), &mut dcol);
                    g.col2im(&dcol, &mut img_grad);
                }
                img_grad
            });
            (dx, dk)
        })
        .collect();

    let d_input = want_x.then(|| {
        let mut v = Vec::with_capacity(g.n * in_chunk);
        for (dx, _) in &per_image {
            v.extend_from_slice(dx.as_ref().expect("input grad computed"));
        }
        v
    });
    let d_kernel = want_k.then(|| {
        let mut acc = vec![E::zero(); g.o * rows];
        for (_, dk) in &per_image {
            let dk = dk.as_ref().expect("kernel grad computed");
            acc.iter_mut().zip(dk).for_each(|(a, &b)| *a += b);
        }
        acc
    });
    let d_bias = want_b.then(|| {
        let mut acc = vec![E::zero(); g.o];
        for img in 0..g.n {
            for (oc, a) in acc.iter_mut().enumerate() {
                let base = img * out_chunk + oc * cols;
                *a += grad_out[base..base + cols].iter().copied().sum::<E>();
            }
        }
        acc
    });
    (d_input, d_kernel, d_bias)
}
