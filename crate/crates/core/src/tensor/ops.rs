use serde::{Deserialize, Serialize};

use super::{numel, strides, Element, Op, Tensor};
use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Which axes a global pool collapses on an NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolOver {
    /// `[N,C,H,W] -> [N,C,1,1]`
    Spatial,
    /// `[N,C,H,W] -> [N,1,H,W]`
    Channel,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<E: Element>(x: E) -> E {
    let half = E::lit(0.5);
    let inner = E::lit(GELU_C) * (x + E::lit(GELU_A) * x * x * x);
    half * x * (E::one() + inner.tanh())
}

pub(crate) fn gelu_grad<E: Element>(x: E) -> E {
    let half = E::lit(0.5);
    let inner = E::lit(GELU_C) * (x + E::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = E::lit(GELU_C) * (E::one() + E::lit(3.0 * GELU_A) * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * dinner
}

pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// Output shape of a same-rank broadcast, or an error naming both shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cannot broadcast {a:?} with {b:?}: ranks differ"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Visits a same-rank broadcast as contiguous runs of the output. For each
/// run, `f(out_pos, bases, steps, len)` gets every source's starting offset
/// and its step within the run (1, or 0 for a broadcast axis). Axes that
/// broadcast alike are merged first, so runs are as long as possible.
pub(crate) fn broadcast_runs<const K: usize>(
    out_shape: &[usize],
    srcs: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K], [usize; K], usize),
) {
    // (size, which sources are full along it), innermost last
    let mut dims: Vec<(usize, [bool; K])> = Vec::new();
    for (ax, &d) in out_shape.iter().enumerate() {
        if d == 1 {
            continue;
        }
        let full = srcs.map(|s| s[ax] == d);
        match dims.last_mut() {
            Some((size, prev)) if *prev == full => *size *= d,
            _ => dims.push((d, full)),
        }
    }
    if numel(out_shape) == 0 {
        return;
    }
    let Some(&(len, inner_full)) = dims.last() else {
        f(0, [0; K], [0; K], 1);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    // per-source strides along the merged outer axes
    let mut strides = vec![[0usize; K]; outer.len()];
    let mut acc = inner_full.map(|full| if full { len } else { 1 });
    for (j, &(size, full)) in outer.iter().enumerate().rev() {
        for k in 0..K {
            if full[k] {
                strides[j][k] = acc[k];
                acc[k] *= size;
            }
        }
    }
    let steps = inner_full.map(usize::from);
    let mut idx = vec![0usize; outer.len()];
    let mut bases = [0usize; K];
    let mut pos = 0;
    loop {
        f(pos, bases, steps, len);
        pos += len;
        let mut ax = outer.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            for k in 0..K {
                bases[k] += strides[ax][k];
            }
            if idx[ax] < outer[ax].0 {
                break;
            }
            for k in 0..K {
                bases[k] -= strides[ax][k] * idx[ax];
            }
            idx[ax] = 0;
        }
    }
}

/// `f(a[i], b[j])` over the broadcast of `a` and `b` into `out_shape`.
pub(crate) fn broadcast_zip<E: Copy, T: Clone>(
    a: &[E],
    a_shape: &[usize],
    b: &[E],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(E, E) -> T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(numel(out_shape));
    broadcast_runs(out_shape, [a_shape, b_shape], |_, [ia, ib], steps, len| match steps {
        [1, 1] => out.extend(a[ia..ia + len].iter().zip(&b[ib..ib + len]).map(|(&x, &y)| f(x, y))),
        [1, 0] => out.extend(a[ia..ia + len].iter().map(|&x| f(x, b[ib]))),
        [0, 1] => out.extend(b[ib..ib + len].iter().map(|&y| f(a[ia], y))),
        _ => out.extend(std::iter::repeat_n(f(a[ia], b[ib]), len)),
    });
    out
}

fn check_axis(rank: usize, axis: usize, what: &str) -> Result<()> {
    if axis >= rank {
        return Err(Error::shape(format!(
            "{what}: axis {axis} out of range for rank {rank}"
        )));
    }
    Ok(())
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<E: Element> Tensor<E> {
    fn binary(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Result<(Vec<E>, Vec<usize>)> {
        if self.shape() == other.shape() {
            let data = self
                .data()
                .iter()
                .zip(other.data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok((data, self.shape().to_vec()));
        }
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let data = broadcast_zip(self.data(), self.shape(), other.data(), other.shape(), &shape, f);
        Ok((data, shape))
    }

    /// Elementwise sum with same-rank broadcasting over size-1 axes.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (data, shape) = self.binary(other, |a, b| a + b)?;
        Ok(Tensor::from_op(data, shape, Op::Add(self.clone(), other.clone())))
    }

    /// Elementwise product with same-rank broadcasting over size-1 axes.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (data, shape) = self.binary(other, |a, b| a * b)?;
        Ok(Tensor::from_op(data, shape, Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    /// `[m,k] × [k,n] -> [m,n]`
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape(format!("matmul: cannot multiply {a:?} by {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![E::zero(); m * n];
        E::gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), E::zero(), &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    /// `[B,m,k] × [B,k,n] -> [B,m,n]`
    pub fn batch_matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(Error::shape(format!(
                "batch_matmul: cannot multiply {a:?} by {b:?}"
            )));
        }
        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
        let mut out = vec![E::zero(); bs * m * n];
        for i in 0..bs {
            E::gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &other.data()[i * k * n..(i + 1) * k * n],
                (n, 1),
                E::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![bs, m, n],
            Op::BatchMatMul(self.clone(), other.clone()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} has {} elements, {:?} needs {}",
                self.shape(),
                self.numel(),
                shape,
                numel(shape)
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "permute: {axes:?} is not a permutation of {rank} axes"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::Permute(self.clone(), axes.to_vec()),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<E>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Repeats size-1 axes up to `shape` (same rank).
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let out = broadcast_shape(self.shape(), shape)?;
        if out != shape {
            return Err(Error::shape(format!(
                "expand: cannot expand {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(numel(shape));
        broadcast_runs(shape, [self.shape()], |_, [i], [step], len| {
            if step == 1 {
                data.extend_from_slice(&src[i..i + len]);
            } else {
                data.extend(std::iter::repeat_n(src[i], len));
            }
        });
        Ok(Tensor::from_op(data, out, Op::Expand(self.clone())))
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat: no tensors given"))?;
        check_axis(first.rank(), axis, "concat")?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {:?} is incompatible with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(data, shape, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        check_axis(self.rank(), axis, "narrow")?;
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::shape(format!(
                "narrow: range {start}..{} out of bounds for axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (outer, _, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    pub fn activation(&self, kind: Activation) -> Tensor<E> {
        let data = self
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(E::zero()),
                Activation::Gelu => gelu(x),
                Activation::Sigmoid => sigmoid(x),
            })
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Activation(self.clone(), kind))
    }

    pub fn relu(&self) -> Tensor<E> {
        self.activation(Activation::Relu)
    }

    pub fn gelu(&self) -> Tensor<E> {
        self.activation(Activation::Gelu)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.activation(Activation::Sigmoid)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        check_axis(self.rank(), axis, "softmax")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(E::neg_infinity(), E::max);
                let mut sum = E::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Softmax(self.clone(), axis),
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both of
    /// the last axis' length).
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if gamma.numel() != d || beta.numel() != d {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match last dim {d}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let mut normalized = vec![E::zero(); x.len()];
        let mut rstd = vec![E::zero(); rows];
        let mut out = vec![E::zero(); x.len()];
        let dn = E::lit(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<E>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let rs = E::one() / (var + E::lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let nh = (row[j] - mean) * rs;
                normalized[r * d + j] = nh;
                out[r * d + j] = nh * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                normalized,
                rstd,
            },
        ))
    }

    /// Global average or max pooling on an NCHW tensor.
    pub fn pool_global(&self, kind: PoolKind, over: PoolOver) -> Result<Tensor<E>> {
        let &[n, c, h, w] = self.shape() else {
            return Err(Error::shape(format!(
                "pool_global expects NCHW, got {:?}",
                self.shape()
            )));
        };
        let x = self.data();
        let hw = h * w;
        let (out_shape, groups, members): (Vec<usize>, usize, usize) = match over {
            PoolOver::Spatial => (vec![n, c, 1, 1], n * c, hw),
            PoolOver::Channel => (vec![n, 1, h, w], n * hw, c),
        };
        // Flat index of member `m` of group `g`.
        let index = |g: usize, m: usize| match over {
            PoolOver::Spatial => g * hw + m,
            PoolOver::Channel => (g / hw) * c * hw + m * hw + g % hw,
        };
        let mut out = vec![E::zero(); groups];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Avg => {
                let count = E::lit(members as f64);
                for (g, o) in out.iter_mut().enumerate() {
                    *o = (0..members).map(|m| x[index(g, m)]).sum::<E>() / count;
                }
            }
            PoolKind::Max => {
                argmax.reserve(groups);
                for (g, o) in out.iter_mut().enumerate() {
                    let mut best = index(g, 0);
                    for m in 1..members {
                        let i = index(g, m);
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    *o = x[best];
                    argmax.push(best);
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            out_shape,
            Op::Pool {
                input: self.clone(),
                kind,
                over,
                argmax,
            },
        ))
    }

    /// Inverted dropout: in training, zero each element with probability `p`
    /// and scale survivors by `1/(1-p)`. Outside training this returns `self`.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut SeededRng) -> Result<Tensor<E>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = E::lit(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.numel())
            .map(|_| if rng.bernoulli(p) { E::zero() } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Dropout(self.clone(), mask),
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)` for
    /// `[N,C]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<E>> {
        let &[n, c] = self.shape() else {
            return Err(Error::shape(format!(
                "cross_entropy expects [N,C] logits, got {:?}",
                self.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.data();
        let mut probs = vec![E::zero(); n * c];
        let mut total = 0.0f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let sum: E = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / sum;
            }
            let log_sum = sum.ln() + max;
            total += (log_sum - row[label]).as_f64();
        }
        let loss = E::lit(total / n as f64);
        Ok(Tensor::from_op(
            vec![loss],
            Vec::new(),
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of all elements (accumulated in f64) as a scalar.
    pub fn sum(&self) -> Tensor<E> {
        let s: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(vec![E::lit(s)], Vec::new(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<E> {
        let s: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(
            vec![E::lit(s / self.numel() as f64)],
            Vec::new(),
            Op::Mean(self.clone()),
        )
    }

    /// Row-wise argmax of a `[N,C]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let &[_, c] = self.shape() else {
            return Err(Error::shape(format!(
                "argmax_rows expects [N,C], got {:?}",
                self.shape()
            )));
        };
        Ok(self
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
            })
            .collect())
    }
}

pub(crate) fn permute_data<E: Copy>(src: &[E], shape: &[usize], axes: &[usize]) -> Vec<E> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
