mod common;

use common::{project, random, ParamFn, StoreLoss};
use ewastenet::deit::{deit_forward, encoder_block, init_backbone, multi_head_attention, patch_embed, DeiTConfig};
use ewastenet::params::{Initializer, ParamStore};
use ewastenet::tensor::finite_diff_check_at;
use ewastenet::{Element, Result, Tensor};
use proptest::prelude::*;

fn toy() -> DeiTConfig {
    DeiTConfig {
        patch_size: 8,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2.0,
        input_channels: 3,
        image_h: 16,
        image_w: 16,
    }
}

fn backbone(cfg: &DeiTConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    init_backbone(&mut s, "bb", cfg, &Initializer::new(seed)).unwrap();
    s
}

/// Makes every tensor non-trivial so gradients reach all paths.
fn perturbed(store: &mut ParamStore, seed: u64) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for (i, name) in names.iter().enumerate() {
        let t = store.get(name).unwrap();
        let noise = random::<f32>(t.shape(), seed + i as u64, 0.3);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        store.set_data(name, data).unwrap();
    }
}

#[test]
fn patch_counts_follow_image_and_patch_size() {
    let mut cfg = DeiTConfig {
        image_h: 384,
        image_w: 384,
        patch_size: 16,
        ..DeiTConfig::default()
    };
    assert_eq!(cfg.num_patches(), 576);
    cfg = DeiTConfig::default();
    assert_eq!(cfg.num_patches(), 64);
    assert_eq!(cfg.num_tokens(), 66);
}

#[test]
fn indivisible_image_is_rejected_with_divisor() {
    let cfg = DeiTConfig {
        image_h: 60,
        ..DeiTConfig::default()
    };
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("patch_size 8"), "{err}");
    let store = backbone(&toy(), 1);
    let img = Tensor::<f32>::zeros(&[1, 3, 12, 16]);
    let err = patch_embed(&img, &toy(), &store.scope("bb")).unwrap_err().to_string();
    assert!(err.contains("patch size 8"), "{err}");
}

#[test]
fn zero_image_with_zero_bias_embeds_to_zero() {
    let store = backbone(&toy(), 2);
    let img = Tensor::<f32>::zeros(&[2, 3, 16, 16]);
    let e = patch_embed(&img, &toy(), &store.scope("bb")).unwrap();
    assert_eq!(e.shape(), &[2, 4, 16]);
    assert!(e.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_token_attention_is_the_value_projection() {
    let cfg = toy();
    let mut store = backbone(&cfg, 3);
    perturbed(&mut store, 10);
    let p = store.scope("bb.block0.attn");
    let x = random::<f32>(&[2, 1, 16], 4, 1.0);
    let out = multi_head_attention(&x, &p, 2).unwrap().output;

    // value projection = columns [2D, 3D) of the fused qkv weight, then proj
    let (w, b) = (p.get("qkv.weight").unwrap().data(), p.get("qkv.bias").unwrap().data());
    let (pw, pb) = (p.get("proj.weight").unwrap().data(), p.get("proj.bias").unwrap().data());
    for n in 0..2 {
        let xs = &x.data()[n * 16..(n + 1) * 16];
        let v: Vec<f64> = (0..16)
            .map(|j| b[32 + j] as f64 + (0..16).map(|i| xs[i] as f64 * w[i * 48 + 32 + j] as f64).sum::<f64>())
            .collect();
        for j in 0..16 {
            let want = pb[j] as f64 + (0..16).map(|i| v[i] * pw[i * 16 + j] as f64).sum::<f64>();
            let got = out.data()[n * 16 + j] as f64;
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = toy();
    let mut store = backbone(&cfg, 5);
    perturbed(&mut store, 20);
    let x = random::<f32>(&[3, 6, 16], 6, 2.0);
    let w = multi_head_attention(&x, &store.scope("bb.block0.attn"), 2).unwrap().weights;
    assert_eq!(w.shape(), &[6, 6, 6]);
    for row in w.data().chunks(6) {
        assert!(row.iter().all(|&v| v >= 0.0));
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn blocks_are_permutation_equivariant() {
    let cfg = toy();
    let mut store = backbone(&cfg, 7);
    perturbed(&mut store, 30);
    let (t, d) = (5, 16);
    let x = random::<f32>(&[1, t, d], 8, 1.0);
    let perm = [3, 0, 4, 1, 2];
    let permute = |a: &[f32]| -> Vec<f32> { perm.iter().flat_map(|&i| a[i * d..(i + 1) * d].to_vec()).collect() };
    let xp = Tensor::new(permute(x.data()), &[1, t, d]).unwrap();
    let p = store.scope("bb.block0");
    let y = encoder_block(&x, &p, 2).unwrap();
    let yp = encoder_block(&xp, &p, 2).unwrap();
    for (a, b) in permute(y.data()).iter().zip(yp.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn zero_block_is_identity() {
    let cfg = toy();
    let mut store = backbone(&cfg, 9);
    let names: Vec<String> = store.names().filter(|n| n.starts_with("bb.block0")).map(String::from).collect();
    for n in names {
        let len = store.get(&n).unwrap().numel();
        store.set_data(&n, vec![0.0; len]).unwrap();
    }
    let x = random::<f32>(&[2, 4, 16], 10, 1.0);
    let y = encoder_block(&x, &store.scope("bb.block0"), 2).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

#[test]
fn forward_shape_and_identical_rows() {
    let cfg = toy();
    let store = backbone(&cfg, 11);
    let one = random::<f32>(&[1, 3, 16, 16], 12, 1.0);
    let batch = Tensor::concat(&[one.clone(), one], 0).unwrap();
    let f = deit_forward(&batch, &cfg, &store.scope("bb")).unwrap();
    assert_eq!(f.shape(), &[2, 16]);
    assert_eq!(f.data()[..16], f.data()[16..]);
}

#[test]
fn channel_mismatch_is_an_error() {
    let cfg = toy();
    let store = backbone(&cfg, 13);
    let img = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
    let err = deit_forward(&img, &cfg, &store.scope("bb")).unwrap_err().to_string();
    assert!(err.contains("3 input channels"), "{err}");
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let cfg = DeiTConfig::default();
    let store = backbone(&cfg, 14);
    // 12·D² + 13·D per block, plus patch embedding, tokens and final norm
    let d = 64;
    let expected = (d * 3 * 64 + d) + 2 * d + 66 * d + 4 * (12 * d * d + 13 * d) + 2 * d;
    assert_eq!(expected, 216_768);
    assert_eq!(cfg.param_count(), expected);
    assert_eq!(store.count(), (expected, 0));
}

#[test]
fn depth_adds_a_fixed_amount_per_block() {
    let base = DeiTConfig::default();
    let deeper = DeiTConfig { depth: 8, ..base.clone() };
    let per_block = 12 * 64 * 64 + 13 * 64;
    assert_eq!(backbone(&deeper, 1).count().0 - backbone(&base, 1).count().0, 4 * per_block);
}

/// Coordinates with a non-degenerate gradient. The key bias adds the same
/// constant to every score of a softmax row, so its true gradient is exactly
/// zero; those coordinates are checked for (near) zero gradient instead.
fn informative_coords(name: &str, numel: usize, d: usize) -> (Vec<usize>, Vec<usize>) {
    if name.ends_with("attn.qkv.bias") {
        (0..numel).partition(|&i| i < d || i >= 2 * d)
    } else {
        ((0..numel).collect(), Vec::new())
    }
}

/// Composite networks are checked in f64: at eps = 1e-3 the O(eps²)
/// truncation term of the central difference alone exceeds 1e-3 relative on
/// low-magnitude coordinates.
const EPS: f64 = 1e-5;

fn check_param<L: StoreLoss>(store: &ParamStore, name: &str, loss: &L, every: usize) {
    let t = store.get(name).unwrap();
    let (coords, degenerate) = informative_coords(name, t.numel(), 16);
    let coords: Vec<usize> = coords.into_iter().step_by(every).collect();
    let f = ParamFn {
        store,
        name: name.to_string(),
        loss,
    };
    let t = &t.cast::<f64>();
    let r = finite_diff_check_at(&f, t, EPS, &coords).unwrap();
    assert!(r.max_relative_error < 1e-3, "{name}: {r:?}");
    if !degenerate.is_empty() {
        let r = finite_diff_check_at(&f, t, EPS, &degenerate).unwrap();
        assert!(r.max_absolute_error < 1e-5, "{name}: {r:?}");
    }
}

struct BlockLoss;

impl StoreLoss for BlockLoss {
    fn loss<E: Element>(&self, s: &ParamStore<E>) -> Result<Tensor<E>> {
        let x = random::<E>(&[2, 3, 16], 40, 1.0);
        project(&encoder_block(&x, &s.scope("bb.block0"), 2)?, 41)
    }
}

#[test]
fn encoder_block_gradients_match_finite_differences() {
    let mut store = backbone(&toy(), 15);
    perturbed(&mut store, 50);
    for name in store.names().filter(|n| n.starts_with("bb.block0")) {
        check_param(&store, name, &BlockLoss, 1);
    }
}

struct BackboneLoss;

impl StoreLoss for BackboneLoss {
    fn loss<E: Element>(&self, s: &ParamStore<E>) -> Result<Tensor<E>> {
        let img = random::<E>(&[2, 3, 16, 16], 60, 1.0);
        project(&deit_forward(&img, &toy(), &s.scope("bb"))?, 61)
    }
}

#[test]
fn full_backbone_gradients_match_finite_differences() {
    let mut store = backbone(&toy(), 16);
    perturbed(&mut store, 70);
    for name in store.names() {
        let every = 1 + store.get(name).unwrap().numel() / 24;
        check_param(&store, name, &BackboneLoss, every);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_count_is_patches_plus_two(p in 1usize..6, gh in 1usize..6, gw in 1usize..6, heads in 1usize..4) {
        let cfg = DeiTConfig {
            patch_size: p,
            image_h: p * gh,
            image_w: p * gw,
            embed_dim: 4 * heads,
            num_heads: heads,
            depth: 1,
            ..DeiTConfig::default()
        };
        prop_assert!(cfg.validate().is_ok());
        prop_assert_eq!(cfg.num_tokens(), gh * gw + 2);
        let store = backbone(&cfg, 1);
        prop_assert_eq!(store.get("bb.pos_embed").unwrap().shape(), &[1, gh * gw + 2, 4 * heads]);
        prop_assert_eq!(store.count().0, cfg.param_count());
    }
}
