use super::gradcheck::ScalarFunction;
use super::*;
use crate::rng::SeededRng;

fn t(data: &[f32], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.symmetric(1.0) as f32)
}

/// Random values bounded away from zero, for checks through ReLU kinks.
fn random_away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = 0.1 + 0.9 * rng.uniform();
        (if rng.bernoulli(0.5) { v } else { -v }) as f32
    })
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn conv_all_ones_center_is_nine() {
    let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
    let k = Tensor::full(&[1, 1, 3, 3], 1.0f32);
    let y = x.conv2d(&k, None, ConvSpec::same(1)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[4], 9.0);
    assert_eq!(y.data()[0], 4.0);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = SeededRng::new(3);
    let x = random(&[2, 1, 5, 4], &mut rng);
    let k = t(&[1.0], &[1, 1, 1, 1]);
    let y = x.conv2d(&k, None, ConvSpec::same(1)).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn receptive_field_of_dilated_kernel() {
    assert_eq!(receptive_field(3, 5), 11);
    assert_eq!(receptive_field(3, 1), 3);
}

#[test]
fn conv_same_padding_preserves_dims_for_all_dilations() {
    let mut rng = SeededRng::new(4);
    let x = random(&[1, 2, 13, 11], &mut rng);
    for d in 1..=5 {
        let k = random(&[3, 2, 3, 3], &mut rng);
        let y = x.conv2d(&k, None, ConvSpec::same(d)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 13, 11], "dilation {d}");
    }
}

#[test]
fn conv_errors() {
    let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
    let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
    let err = x.conv2d(&k, None, ConvSpec::same(1)).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    let k = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
    for spec in [
        ConvSpec { stride: 0, dilation: 1, padding: Padding::Same },
        ConvSpec { stride: 1, dilation: 0, padding: Padding::Same },
    ] {
        assert!(matches!(x.conv2d(&k, None, spec), Err(crate::Error::InvalidArgument(_))));
    }
}

#[test]
fn conv_strided_valid_matches_direct_sum() {
    let mut rng = SeededRng::new(5);
    let x = random(&[1, 2, 6, 6], &mut rng);
    let k = random(&[3, 2, 2, 2], &mut rng);
    let b = random(&[3], &mut rng);
    let y = x.conv2d(&k, Some(&b), ConvSpec::valid(2)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = b.data()[o];
                for c in 0..2 {
                    for i in 0..2 {
                        for j in 0..2 {
                            s += x.data()[(c * 6 + oy * 2 + i) * 6 + ox * 2 + j]
                                * k.data()[((o * 2 + c) * 2 + i) * 2 + j];
                        }
                    }
                }
                let got = y.data()[(o * 3 + oy) * 3 + ox];
                assert!((got - s).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn matmul_examples() {
    let a = t(&[1., 2., 3., 4.], &[2, 2]);
    let ones = t(&[1., 1.], &[2, 1]);
    assert_eq!(a.matmul(&ones).unwrap().data(), &[3., 7.]);
    let eye = t(&[1., 0., 0., 1.], &[2, 2]);
    assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    let z = Tensor::<f32>::zeros(&[3, 2]);
    assert!(z.matmul(&a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.matmul(&z).is_err());
}

#[test]
fn softmax_examples() {
    let s = t(&[0., 0., 0., 0.], &[4]).softmax(0).unwrap();
    assert!(close(s.data(), &[0.25; 4], 1e-7));
    let s = t(&[1000., 1000.], &[2]).softmax(0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = Tensor::new(vec![0.0f64, 3f64.ln()], &[2]).unwrap().softmax(0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_on_inner_axis() {
    let mut rng = SeededRng::new(6);
    let x = Tensor::from_fn(&[3, 5, 4], |_| rng.symmetric(5.0) as f32);
    let s = x.softmax(1).unwrap();
    for o in 0..3 {
        for i in 0..4 {
            let sum: f32 = (0..5).map(|j| s.data()[o * 20 + j * 4 + i]).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn activation_examples() {
    let x = t(&[-1., 2., 0.], &[3]);
    assert_eq!(x.relu().data(), &[0., 2., 0.]);
    assert_eq!(x.sigmoid().data()[2], 0.5);
    assert_eq!(x.gelu().data()[2], 0.0);
    let big = t(&[-80., 80.], &[2]).sigmoid();
    assert!(big.data().iter().all(|v| v.is_finite()));
}

#[test]
fn layer_norm_examples() {
    let ones = t(&[1., 1.], &[2]);
    let zeros = t(&[0., 0.], &[2]);
    let y = t(&[1., 3.], &[1, 2]).layer_norm(&ones, &zeros, 0.0).unwrap();
    assert_eq!(y.data(), &[-1., 1.]);
    let y = t(&[5., 5., 5.], &[1, 3])
        .layer_norm(&t(&[1., 1., 1.], &[3]), &t(&[0., 0., 0.], &[3]), 1e-5)
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let beta = t(&[0.5, -2.], &[2]);
    let y = t(&[1., 7., -3., 4.], &[2, 2]).layer_norm(&zeros, &beta, 1e-5).unwrap();
    assert_eq!(y.data(), &[0.5, -2., 0.5, -2.]);
}

#[test]
fn pool_examples() {
    let x = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
    let avg = x.pool_global(PoolKind::Avg, PoolOver::Spatial).unwrap();
    let max = x.pool_global(PoolKind::Max, PoolOver::Spatial).unwrap();
    assert_eq!((avg.data()[0], max.data()[0]), (2.5, 4.0));
    assert_eq!(avg.shape(), &[1, 1, 1, 1]);

    let c = Tensor::full(&[2, 3, 2, 2], 0.7f32);
    for kind in [PoolKind::Avg, PoolKind::Max] {
        for over in [PoolOver::Spatial, PoolOver::Channel] {
            let p = c.pool_global(kind, over).unwrap();
            assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        }
    }
    let ch = c.pool_global(PoolKind::Avg, PoolOver::Channel).unwrap();
    assert_eq!(ch.shape(), &[2, 1, 2, 2]);

    let dup = t(&[1., 4., 3., 4.], &[1, 1, 2, 2]);
    assert_eq!(dup.pool_global(PoolKind::Max, PoolOver::Spatial).unwrap().data()[0], 4.0);
}

#[test]
fn dropout_examples() {
    let mut rng = SeededRng::new(9);
    let x = random(&[10, 10], &mut rng);
    let y = x.dropout(0.3, false, &mut rng).unwrap();
    assert_eq!(y.data(), x.data());
    let y = x.dropout(0.0, true, &mut rng).unwrap();
    assert_eq!(y.data(), x.data());
    assert!(x.dropout(1.0, true, &mut rng).is_err());

    let ones = Tensor::full(&[1_000_000], 1.0f32);
    let y = ones.dropout(0.3, true, &mut rng).unwrap();
    let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 1e6;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");
}

#[test]
fn concat_examples() {
    let mut rng = SeededRng::new(10);
    let a = random(&[2, 64], &mut rng);
    assert_eq!(Tensor::concat(std::slice::from_ref(&a), 1).unwrap().data(), a.data());
    let b = random(&[2, 64], &mut rng);
    let ab = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
    assert_eq!(ab.shape(), &[2, 128]);
    assert_eq!(ab.narrow(1, 0, 64).unwrap().data(), a.data());
    assert_eq!(ab.narrow(1, 64, 64).unwrap().data(), b.data());

    let branches: Vec<Tensor> = [64, 32, 16, 8, 4]
        .iter()
        .map(|&c| Tensor::zeros(&[1, c, 2, 2]))
        .collect();
    assert_eq!(Tensor::concat(&branches, 1).unwrap().shape()[1], 124);
    assert!(Tensor::concat(&[a, Tensor::zeros(&[3, 64])], 1).is_err());
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::<f64>::zeros(&[3, 8]);
    let l = uniform.cross_entropy(&[0, 4, 7]).unwrap().item().unwrap();
    assert!((l - 8f64.ln()).abs() < 1e-12);

    let confident = t(&[50., 0., 0., 0., 50., 0.], &[2, 3]);
    let l = confident.cross_entropy(&[0, 1]).unwrap().item().unwrap();
    assert!((0.0..1e-12).contains(&l));

    let x = t(&[0.3, -1.2, 2.0, 0.5, 0.1, -0.4], &[2, 3]);
    let shifted = x.add(&Tensor::full(&[2, 3], 17.0)).unwrap();
    let (a, b) = (
        x.cross_entropy(&[2, 0]).unwrap().item().unwrap(),
        shifted.cross_entropy(&[2, 0]).unwrap().item().unwrap(),
    );
    assert!((a - b).abs() < 1e-5);
    assert!(x.cross_entropy(&[3, 0]).is_err());
}

#[test]
fn backward_square_sum_and_unused_param() {
    let x = Tensor::parameter(vec![1.0f32, -2.0, 3.0], &[3]).unwrap();
    let unused = Tensor::parameter(vec![5.0f32], &[1]).unwrap();
    let _ = unused.scale(2.0);
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    assert_eq!(unused.grad().unwrap_or(vec![0.0]), vec![0.0]);
}

#[test]
fn backward_accumulates_until_zero_grad() {
    let x = Tensor::parameter(vec![2.0f32], &[1]).unwrap();
    x.scale(3.0).sum().backward().unwrap();
    x.scale(3.0).sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::parameter(vec![1.0f32, 2.0], &[2]).unwrap();
    assert!(x.scale(2.0).backward().is_err());
}

#[test]
fn backward_through_shared_subexpression() {
    // y = (x·x) + x, used twice: d/dx sum(2y) = 2(2x + 1)
    let x = Tensor::parameter(vec![0.5f64, -1.0], &[2]).unwrap();
    let y = x.mul(&x).unwrap().add(&x).unwrap();
    y.add(&y).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, -2.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = SeededRng::new(77);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        x.conv2d(&k, None, ConvSpec::same(2)).unwrap().relu().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;
const POINTS: u64 = 10;

/// Defines a [`ScalarFunction`] whose body is generic over the element type.
macro_rules! scalar_fn {
    ($name:ident, |$x:ident: $e:ident| $body:expr) => {
        struct $name;
        impl ScalarFunction for $name {
            fn eval<$e: Element>(&self, $x: &Tensor<$e>) -> crate::Result<Tensor<$e>> {
                $body
            }
        }
    };
}

/// Constants defined in f32 and widened exactly, so both precisions see the
/// same function.
fn consts<E: Element>(shape: &[usize], f: impl Fn(usize) -> f32) -> Tensor<E> {
    Tensor::from_fn(shape, |i| E::lit(f(i) as f64))
}

/// Fixed pseudo-random weights in [0.5, 1.5) so `sum(w ⊙ y)` exercises every output.
fn weights<E: Element>(shape: &[usize]) -> Tensor<E> {
    consts(shape, |i| 0.5 + ((i as u64).wrapping_mul(2654435761) % 1000) as f32 / 1000.0)
}

/// Runs `finite_diff_check` at ten seeded random f32 points.
fn gradcheck_op<F: ScalarFunction>(name: &str, shape: &[usize], avoid_zero: bool, f: F) {
    for seed in 0..POINTS {
        let mut rng = SeededRng::derived(1234, &[crate::rng::label_key(name), seed]);
        let point = if avoid_zero {
            random_away_from_zero(shape, &mut rng)
        } else {
            random(shape, &mut rng)
        };
        let report = finite_diff_check(&f, &point, EPS).unwrap();
        assert!(
            report.max_relative_error < TOL,
            "{name} seed {seed}: {report:?}"
        );
    }
}

#[test]
fn gradcheck_linear_is_exact() {
    scalar_fn!(Linear, |x: E| Ok(x.mul(&weights(&[6]))?.sum()));
    let mut rng = SeededRng::new(1);
    let p = random(&[6], &mut rng);
    let r = finite_diff_check(&Linear, &p, EPS).unwrap();
    assert!(r.max_relative_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_matmul() {
    scalar_fn!(F, |x: E| Ok(x.matmul(&weights(&[4, 3]))?.mul(&weights(&[2, 3]))?.sum()));
    gradcheck_op("matmul", &[2, 4], false, F);
    scalar_fn!(G, |x: E| Ok(weights::<E>(&[3, 2]).matmul(x)?.mul(&weights(&[3, 4]))?.sum()));
    gradcheck_op("matmul_rhs", &[2, 4], false, G);
}

#[test]
fn gradcheck_batch_matmul_both_sides() {
    scalar_fn!(F, |x: E| {
        let xt = x.transpose_last()?;
        Ok(x.batch_matmul(&xt)?.mul(&weights(&[2, 3, 3]))?.sum())
    });
    gradcheck_op("bmm", &[2, 3, 4], false, F);
}

#[test]
fn gradcheck_conv_relu_sum() {
    scalar_fn!(Input, |x: E| {
        let k = consts(&[2, 2, 3, 3], |i| 0.1 + 0.5 * (i as f32 * 1.37).sin());
        let b = consts(&[2], |i| [0.05, -0.02][i]);
        Ok(x.conv2d(&k, Some(&b), ConvSpec::same(2))?.relu().sum())
    });
    // Resample until no pre-activation sits within reach of the ReLU kink.
    for seed in 0..POINTS {
        let point = (0u64..)
            .map(|attempt| random(&[1, 2, 5, 5], &mut SeededRng::derived(77, &[seed, attempt])))
            .find(|p| {
                let k = consts::<f32>(&[2, 2, 3, 3], |i| 0.1 + 0.5 * (i as f32 * 1.37).sin());
                let b = consts::<f32>(&[2], |i| [0.05, -0.02][i]);
                let z = p.conv2d(&k, Some(&b), ConvSpec::same(2)).unwrap();
                z.data().iter().all(|v| v.abs() > 0.05)
            })
            .unwrap();
        let r = finite_diff_check(&Input, &point, EPS).unwrap();
        assert!(r.max_relative_error < TOL, "conv_input seed {seed}: {r:?}");
    }
    scalar_fn!(Kernel, |k: E| {
        let x = consts(&[2, 2, 5, 5], |i| ((i * 7 % 11) as f32 - 5.0) / 5.0);
        Ok(x.conv2d(k, None, ConvSpec::same(1))?.mul(&weights(&[2, 2, 5, 5]))?.sum())
    });
    gradcheck_op("conv_kernel", &[2, 2, 3, 3], false, Kernel);
    scalar_fn!(Strided, |x: E| {
        let k = consts(&[3, 2, 2, 2], |i| (i as f32 * 0.37).sin());
        Ok(x.conv2d(&k, None, ConvSpec::valid(2))?.mul(&weights(&[1, 3, 3, 3]))?.sum())
    });
    gradcheck_op("conv_strided", &[1, 2, 6, 6], false, Strided);
    scalar_fn!(Bias, |b: E| {
        let x = consts(&[2, 1, 4, 4], |i| (i as f32 * 0.21).cos());
        let k = consts(&[3, 1, 3, 3], |i| (i as f32 * 0.13).sin());
        Ok(x.conv2d(&k, Some(b), ConvSpec::same(3))?.mul(&weights(&[2, 3, 4, 4]))?.sum())
    });
    gradcheck_op("conv_bias", &[3], false, Bias);
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    scalar_fn!(Ce, |x: E| x.scale(E::lit(2.0)).cross_entropy(&[1, 4, 0]));
    gradcheck_op("cross_entropy", &[3, 5], false, Ce);
    scalar_fn!(Sm, |x: E| Ok(x.softmax(1)?.mul(&weights(&[3, 4]))?.sum()));
    gradcheck_op("softmax", &[3, 4], false, Sm);
    scalar_fn!(Sm0, |x: E| Ok(x.softmax(0)?.mul(&weights(&[3, 4]))?.sum()));
    gradcheck_op("softmax_axis0", &[3, 4], false, Sm0);
}

#[test]
fn gradcheck_activations() {
    scalar_fn!(Relu, |x: E| Ok(x.relu().mul(&weights(&[12]))?.sum()));
    gradcheck_op("relu", &[12], true, Relu);
    scalar_fn!(Gelu, |x: E| Ok(x.gelu().mul(&weights(&[12]))?.sum()));
    gradcheck_op("gelu", &[12], false, Gelu);
    scalar_fn!(Sigmoid, |x: E| Ok(x.sigmoid().mul(&weights(&[12]))?.sum()));
    gradcheck_op("sigmoid", &[12], false, Sigmoid);
}

#[test]
fn gradcheck_layer_norm() {
    scalar_fn!(Input, |x: E| {
        let g = consts(&[5], |i| 0.5 + i as f32 * 0.2);
        let b = consts(&[5], |i| i as f32 * 0.1);
        Ok(x.layer_norm(&g, &b, 1e-5)?.mul(&weights(&[3, 5]))?.sum())
    });
    gradcheck_op("layer_norm_x", &[3, 5], false, Input);
    scalar_fn!(Gamma, |g: E| {
        let x = consts(&[3, 5], |i| ((i * 5 % 7) as f32 - 3.0) / 2.0);
        let b = consts(&[5], |i| i as f32 * 0.1);
        Ok(x.layer_norm(g, &b, 1e-5)?.mul(&weights(&[3, 5]))?.sum())
    });
    gradcheck_op("layer_norm_gamma", &[5], false, Gamma);
    scalar_fn!(Beta, |b: E| {
        let x = consts(&[3, 5], |i| ((i * 5 % 7) as f32 - 3.0) / 2.0);
        let g = consts(&[5], |i| 1.0 - i as f32 * 0.1);
        Ok(x.layer_norm(&g, b, 1e-5)?.mul(&weights(&[3, 5]))?.sum())
    });
    gradcheck_op("layer_norm_beta", &[5], false, Beta);
}

#[test]
fn gradcheck_pools() {
    scalar_fn!(AvgS, |x: E| Ok(x.pool_global(PoolKind::Avg, PoolOver::Spatial)?.mul(&weights(&[2, 3, 1, 1]))?.sum()));
    scalar_fn!(MaxS, |x: E| Ok(x.pool_global(PoolKind::Max, PoolOver::Spatial)?.mul(&weights(&[2, 3, 1, 1]))?.sum()));
    scalar_fn!(AvgC, |x: E| Ok(x.pool_global(PoolKind::Avg, PoolOver::Channel)?.mul(&weights(&[2, 1, 2, 2]))?.sum()));
    scalar_fn!(MaxC, |x: E| Ok(x.pool_global(PoolKind::Max, PoolOver::Channel)?.mul(&weights(&[2, 1, 2, 2]))?.sum()));
    gradcheck_op("avg_pool_spatial", &[2, 3, 2, 2], false, AvgS);
    gradcheck_op("avg_pool_channel", &[2, 3, 2, 2], false, AvgC);
    // Max pooling is only differentiable away from ties, so use distinct
    // values spaced far wider than eps.
    for seed in 0..POINTS {
        let mut rng = SeededRng::new(500 + seed);
        let mut levels: Vec<f32> = (0..24).map(|i| i as f32 * 0.05 - 0.6).collect();
        rng.shuffle(&mut levels);
        let point = Tensor::new(levels, &[2, 3, 2, 2]).unwrap();
        for r in [
            finite_diff_check(&MaxS, &point, EPS).unwrap(),
            finite_diff_check(&MaxC, &point, EPS).unwrap(),
        ] {
            assert!(r.max_relative_error < TOL, "max pool seed {seed}: {r:?}");
        }
    }
}

#[test]
fn gradcheck_broadcast_and_shape_ops() {
    scalar_fn!(Gate, |x: E| {
        let gate = x.narrow(2, 0, 1)?.sigmoid();
        let bias = consts(&[1, 3, 1], |i| i as f32);
        Ok(x.mul(&gate)?.add(&bias)?.mul(&weights(&[2, 3, 4]))?.sum())
    });
    gradcheck_op("broadcast_mul", &[2, 3, 4], false, Gate);
    scalar_fn!(Perm, |x: E| Ok(x.permute(&[2, 0, 1])?.mul(&weights(&[4, 2, 3]))?.sum()));
    gradcheck_op("permute", &[2, 3, 4], false, Perm);
    scalar_fn!(Expand, |x: E| {
        let e = x.expand(&[2, 2, 4])?;
        Ok(Tensor::concat(&[e, x.clone()], 0)?.scale(E::lit(0.5)).mul(&weights(&[3, 2, 4]))?.mean())
    });
    gradcheck_op("expand_concat", &[1, 2, 4], false, Expand);
    scalar_fn!(Reshape, |x: E| Ok(x.reshape(&[4, 3])?.matmul(&weights(&[3, 2]))?.sum()));
    gradcheck_op("reshape", &[2, 6], false, Reshape);
}

#[test]
fn gradcheck_dropout_fixed_mask() {
    scalar_fn!(Drop, |x: E| {
        let mut rng = SeededRng::new(5);
        Ok(x.dropout(0.3, true, &mut rng)?.mul(&weights(&[20]))?.sum())
    });
    gradcheck_op("dropout", &[20], false, Drop);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn concat_then_narrow_is_bit_exact(a in proptest::collection::vec(-1e3f32..1e3, 6),
                                           b in proptest::collection::vec(-1e3f32..1e3, 9)) {
            let ta = Tensor::new(a.clone(), &[2, 3, 1]).unwrap();
            let tb = Tensor::new(b.clone(), &[3, 3, 1]).unwrap();
            let joined = Tensor::concat(&[ta, tb], 0).unwrap();
            prop_assert_eq!(joined.narrow(0, 0, 2).unwrap().to_vec(), a);
            prop_assert_eq!(joined.narrow(0, 2, 3).unwrap().to_vec(), b);
        }

        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50f32..50.0, 1..16)) {
            let n = v.len();
            let s = Tensor::new(v, &[n]).unwrap().softmax(0).unwrap();
            let sum: f32 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn inference_dropout_is_identity(v in proptest::collection::vec(-1e3f32..1e3, 1..64), seed in any::<u64>()) {
            let n = v.len();
            let x = Tensor::new(v, &[n]).unwrap();
            let y = x.dropout(0.5, false, &mut SeededRng::new(seed)).unwrap();
            prop_assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    /// Naive reference convolution in f64: `(y, dx, dk, db)` for output
    /// cotangent `dy`.
    #[allow(clippy::type_complexity)]
    fn reference_conv(
        x: &[f64],
        xs: [usize; 4],
        k: &[f64],
        ks: [usize; 4],
        b: &[f64],
        spec: ConvSpec,
        dy: Option<&[f64]>,
    ) -> (Vec<f64>, [usize; 4], Vec<f64>, Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = xs;
        let [o, _, kh, kw] = ks;
        let (ph, pw) = match spec.padding {
            Padding::Same => ((kh - 1) * spec.dilation / 2, (kw - 1) * spec.dilation / 2),
            Padding::Valid => (0, 0),
        };
        let oh = (h + 2 * ph - (kh - 1) * spec.dilation - 1) / spec.stride + 1;
        let ow = (w + 2 * pw - (kw - 1) * spec.dilation - 1) / spec.stride + 1;
        let mut y = vec![0.0; n * o * oh * ow];
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        let mut db = vec![0.0; o];
        for ni in 0..n {
            for oi in 0..o {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let yi = ((ni * o + oi) * oh + yy) * ow + xx;
                        let g = dy.map_or(0.0, |d| d[yi]);
                        let mut acc = b[oi];
                        db[oi] += g;
                        for ci in 0..c {
                            for a in 0..kh {
                                for bb in 0..kw {
                                    let iy = (yy * spec.stride + a * spec.dilation) as isize - ph as isize;
                                    let ix = (xx * spec.stride + bb * spec.dilation) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * w + ix as usize;
                                    let ki = ((oi * c + ci) * kh + a) * kw + bb;
                                    acc += k[ki] * x[xi];
                                    dx[xi] += k[ki] * g;
                                    dk[ki] += x[xi] * g;
                                }
                            }
                        }
                        y[yi] = acc;
                    }
                }
            }
        }
        (y, [n, o, oh, ow], dx, dk, db)
    }

    fn conv_case() -> impl Strategy<Value = ([usize; 4], [usize; 4], ConvSpec, u64)> {
        (1usize..3, 1usize..4, 1usize..4, 0usize..2, 1usize..3, 1usize..4, any::<bool>(), any::<u64>()).prop_flat_map(
            |(n, c, o, khalf, stride, dilation, same, seed)| {
                let k = 2 * khalf + 1;
                let span = (k - 1) * dilation + 1;
                (span..span + 6, span..span + 6).prop_map(move |(h, w)| {
                    let spec = if same && stride == 1 {
                        ConvSpec::same(dilation)
                    } else {
                        ConvSpec { stride, dilation, padding: Padding::Valid }
                    };
                    ([n, c, h, w], [o, c, k, k], spec, seed)
                })
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn conv_matches_naive_reference((xs, ks, spec, seed) in conv_case()) {
            let mut rng = SeededRng::new(seed);
            let x: Tensor<f64> = Tensor::from_fn(&xs, |_| rng.symmetric(1.0)).with_requires_grad(true);
            let k: Tensor<f64> = Tensor::from_fn(&ks, |_| rng.symmetric(1.0)).with_requires_grad(true);
            let b: Tensor<f64> = Tensor::from_fn(&[ks[0]], |_| rng.symmetric(1.0)).with_requires_grad(true);
            let y = x.conv2d(&k, Some(&b), spec).unwrap();
            let dy: Tensor<f64> = Tensor::from_fn(y.shape(), |_| rng.symmetric(1.0));
            y.mul(&dy).unwrap().sum().backward().unwrap();
            let (ry, rs, rdx, rdk, rdb) = reference_conv(x.data(), xs, k.data(), ks, b.data(), spec, Some(dy.data()));
            prop_assert_eq!(y.shape(), &rs[..]);
            let near = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-10);
            prop_assert!(near(y.data(), &ry));
            prop_assert!(near(&x.grad().unwrap(), &rdx));
            prop_assert!(near(&k.grad().unwrap(), &rdk));
            prop_assert!(near(&b.grad().unwrap(), &rdb));
        }

        #[test]
        fn broadcast_mul_matches_index_arithmetic(
            dims in proptest::collection::vec((1usize..4, any::<bool>(), any::<bool>()), 1..5),
            seed in any::<u64>(),
        ) {
            let out: Vec<usize> = dims.iter().map(|d| d.0).collect();
            let sa: Vec<usize> = dims.iter().map(|&(d, ka, _)| if ka { d } else { 1 }).collect();
            let sb: Vec<usize> = dims.iter().map(|&(d, _, kb)| if kb { d } else { 1 }).collect();
            let target: Vec<usize> = out.iter().zip(&sa).zip(&sb).map(|((_, &a), &b)| a.max(b)).collect();
            let mut rng = SeededRng::new(seed);
            let a: Tensor<f64> = Tensor::from_fn(&sa, |_| rng.symmetric(1.0)).with_requires_grad(true);
            let b: Tensor<f64> = Tensor::from_fn(&sb, |_| rng.symmetric(1.0)).with_requires_grad(true);
            let y = a.mul(&b).unwrap();
            prop_assert_eq!(y.shape(), &target[..]);
            let g: Tensor<f64> = Tensor::from_fn(&target, |_| rng.symmetric(1.0));
            y.mul(&g).unwrap().sum().backward().unwrap();
            // reference via explicit multi-index arithmetic
            let flat = |shape: &[usize], idx: &[usize]| {
                idx.iter().zip(shape).fold(0, |acc, (&i, &d)| acc * d + if d == 1 { 0 } else { i })
            };
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            let total: usize = target.iter().product();
            for lin in 0..total {
                let mut idx = vec![0; target.len()];
                let mut r = lin;
                for ax in (0..target.len()).rev() {
                    idx[ax] = r % target[ax];
                    r /= target[ax];
                }
                let (ia, ib) = (flat(&sa, &idx), flat(&sb, &idx));
                prop_assert_eq!(y.data()[lin], a.data()[ia] * b.data()[ib]);
                ga[ia] += g.data()[lin] * b.data()[ib];
                gb[ib] += g.data()[lin] * a.data()[ia];
            }
            let near = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(x, y)| (x - y).abs() < 1e-12);
            prop_assert!(near(&a.grad().unwrap(), &ga));
            prop_assert!(near(&b.grad().unwrap(), &gb));
        }
    }
}
