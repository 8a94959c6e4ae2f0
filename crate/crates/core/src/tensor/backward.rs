//! Vector-Jacobian products for every recorded op.

use super::conv::conv2d_backward;
use super::ops::{broadcast_runs, broadcast_zip, gelu_grad, permute_data, split_axis, Activation, PoolKind};
use super::{Element, Op, Tensor};

/// Sums `grad` (shaped like the broadcast output) back onto `target`'s shape.
fn unbroadcast<E: Element>(grad: &[E], out_shape: &[usize], target: &[usize]) -> Vec<E> {
    if out_shape == target {
        return grad.to_vec();
    }
    let mut acc = vec![E::zero(); target.iter().product()];
    broadcast_runs(out_shape, [target], |pos, [t], [step], len| {
        let g = &grad[pos..pos + len];
        if step == 1 {
            acc[t..t + len].iter_mut().zip(g).for_each(|(a, &v)| *a += v);
        } else {
            acc[t] += g.iter().copied().sum::<E>();
        }
    });
    acc
}

/// Gradients with respect to each parent of `out`, given `d(loss)/d(out)`.
pub(crate) fn backward<E: Element>(op: &Op<E>, out: &Tensor<E>, g: &[E]) -> Vec<(Tensor<E>, Vec<E>)> {
    let out_shape = out.shape();
    match op {
        Op::Add(a, b) => {
            let mut v = Vec::with_capacity(2);
            if a.requires_grad() {
                v.push((a.clone(), unbroadcast(g, out_shape, a.shape())));
            }
            if b.requires_grad() {
                v.push((b.clone(), unbroadcast(g, out_shape, b.shape())));
            }
            v
        }
        Op::Mul(a, b) => {
            let mut v = Vec::with_capacity(2);
            if a.requires_grad() {
                let full = broadcast_zip(g, out_shape, b.data(), b.shape(), out_shape, |gv, bv| gv * bv);
                v.push((a.clone(), unbroadcast(&full, out_shape, a.shape())));
            }
            if b.requires_grad() {
                let full = broadcast_zip(g, out_shape, a.data(), a.shape(), out_shape, |gv, av| gv * av);
                v.push((b.clone(), unbroadcast(&full, out_shape, b.shape())));
            }
            v
        }
        Op::Scale(a, c) => vec![(a.clone(), g.iter().map(|&v| v * *c).collect())],
        Op::MatMul(a, b) => {
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut v = Vec::with_capacity(2);
            if a.requires_grad() {
                // dA = dC · Bᵀ
                let mut da = vec![E::zero(); m * k];
                E::gemm(m, n, k, g, (n, 1), b.data(), (1, n), E::zero(), &mut da);
                v.push((a.clone(), da));
            }
            if b.requires_grad() {
                // dB = Aᵀ · dC
                let mut db = vec![E::zero(); k * n];
                E::gemm(k, m, n, a.data(), (1, k), g, (n, 1), E::zero(), &mut db);
                v.push((b.clone(), db));
            }
            v
        }
        Op::BatchMatMul(a, b) => {
            let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
            let mut v = Vec::with_capacity(2);
            if a.requires_grad() {
                let mut da = vec![E::zero(); bs * m * k];
                for i in 0..bs {
                    E::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        (n, 1),
                        &b.data()[i * k * n..(i + 1) * k * n],
                        (1, n),
                        E::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                v.push((a.clone(), da));
            }
            if b.requires_grad() {
                let mut db = vec![E::zero(); bs * k * n];
                for i in 0..bs {
                    E::gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        (1, k),
                        &g[i * m * n..(i + 1) * m * n],
                        (n, 1),
                        E::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                v.push((b.clone(), db));
            }
            v
        }
        Op::Reshape(a) => vec![(a.clone(), g.to_vec())],
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            vec![(a.clone(), permute_data(g, out_shape, &inverse))]
        }
        Op::Expand(a) => vec![(a.clone(), unbroadcast(g, out_shape, a.shape()))],
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let mut grads: Vec<Vec<E>> = parts.iter().map(|p| Vec::with_capacity(p.numel())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (p, pg) in parts.iter().zip(grads.iter_mut()) {
                    let chunk = p.shape()[*axis] * inner;
                    pg.extend_from_slice(&g[pos..pos + chunk]);
                    pos += chunk;
                }
            }
            parts
                .iter()
                .cloned()
                .zip(grads)
                .filter(|(p, _)| p.requires_grad())
                .collect()
        }
        Op::Narrow { input, axis, start } => {
            let (outer, dim, inner) = split_axis(input.shape(), *axis);
            let len = out_shape[*axis];
            let mut dx = vec![E::zero(); input.numel()];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                let src = o * len * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(input.clone(), dx)]
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            spec,
        } => {
            let want_b = bias.as_ref().is_some_and(|b| b.requires_grad());
            let (dx, dk, db) = conv2d_backward(
                spec,
                input.data(),
                kernel.data(),
                g,
                (input.requires_grad(), kernel.requires_grad(), want_b),
            );
            let mut v = Vec::with_capacity(3);
            if let Some(dx) = dx {
                v.push((input.clone(), dx));
            }
            if let Some(dk) = dk {
                v.push((kernel.clone(), dk));
            }
            if let (Some(db), Some(b)) = (db, bias) {
                v.push((b.clone(), db));
            }
            v
        }
        Op::Activation(a, kind) => {
            let x = a.data();
            let y = out.data();
            let dx = match kind {
                Activation::Relu => x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > E::zero() { gv } else { E::zero() })
                    .collect(),
                Activation::Sigmoid => y
                    .iter()
                    .zip(g)
                    .map(|(&yv, &gv)| gv * yv * (E::one() - yv))
                    .collect(),
                Activation::Gelu => x.iter().zip(g).map(|(&xv, &gv)| gv * gelu_grad(xv)).collect(),
            };
            vec![(a.clone(), dx)]
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = split_axis(out_shape, *axis);
            let y = out.data();
            let mut dx = vec![E::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: E = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![(a.clone(), dx)]
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            normalized,
            rstd,
        } => {
            let d = gamma.numel();
            let rows = input.numel() / d;
            let gm = gamma.data();
            let dn = E::lit(d as f64);
            let mut v = Vec::with_capacity(3);
            if input.requires_grad() {
                let mut dx = vec![E::zero(); input.numel()];
                for r in 0..rows {
                    let span = r * d..(r + 1) * d;
                    let (gr, nr) = (&g[span.clone()], &normalized[span.clone()]);
                    let dxhat: Vec<E> = gr.iter().zip(gm).map(|(&a, &b)| a * b).collect();
                    let mean_d = dxhat.iter().copied().sum::<E>() / dn;
                    let mean_dn = dxhat.iter().zip(nr).map(|(&a, &b)| a * b).sum::<E>() / dn;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_d - nr[j] * mean_dn);
                    }
                }
                v.push((input.clone(), dx));
            }
            if gamma.requires_grad() {
                let mut dg = vec![E::zero(); d];
                for (i, (&gv, &nv)) in g.iter().zip(normalized).enumerate() {
                    dg[i % d] += gv * nv;
                }
                v.push((gamma.clone(), dg));
            }
            if beta.requires_grad() {
                let mut db = vec![E::zero(); d];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % d] += gv;
                }
                v.push((beta.clone(), db));
            }
            v
        }
        Op::Pool {
            input,
            kind,
            over,
            argmax,
        } => {
            let mut dx = vec![E::zero(); input.numel()];
            match kind {
                PoolKind::Max => {
                    for (&i, &gv) in argmax.iter().zip(g) {
                        dx[i] += gv;
                    }
                }
                PoolKind::Avg => {
                    let s = input.shape();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    match over {
                        super::PoolOver::Spatial => {
                            let inv = E::one() / E::lit(hw as f64);
                            for (i, d) in dx.iter_mut().enumerate() {
                                *d = g[i / hw] * inv;
                            }
                        }
                        super::PoolOver::Channel => {
                            let inv = E::one() / E::lit(c as f64);
                            for (i, d) in dx.iter_mut().enumerate() {
                                let (img, pix) = (i / (c * hw), i % hw);
                                *d = g[img * hw + pix] * inv;
                            }
                        }
                    }
                }
            }
            vec![(input.clone(), dx)]
        }
        Op::Dropout(a, mask) => vec![(a.clone(), g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect())],
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = logits.shape()[1];
            let scale = g[0] / E::lit(labels.len() as f64);
            let mut dx: Vec<E> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                dx[r * c + l] -= scale;
            }
            vec![(logits.clone(), dx)]
        }
        Op::Sum(a) => vec![(a.clone(), vec![g[0]; a.numel()])],
        Op::Mean(a) => {
            let v = g[0] / E::lit(a.numel() as f64);
            vec![(a.clone(), vec![v; a.numel()])]
        }
    }
}
