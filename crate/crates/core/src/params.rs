//! Named, hierarchically scoped parameter storage.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::rng::{label_key, SeededRng};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param<E: Element = f32> {
    pub tensor: Tensor<E>,
    pub frozen: bool,
    /// Constants (e.g. Sobel kernels) can never be unfrozen.
    pub constant: bool,
}

/// Every tensor of a model, keyed by dot-separated name
/// (`edge.deit.block0.attn.qkv.weight`). Iteration order is lexicographic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element = f32> {
    params: BTreeMap<String, Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<E>, shape: &[usize], frozen: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::arg(format!("parameter {name} defined twice")));
        }
        let tensor = Tensor::new(data, shape)?.with_requires_grad(!frozen);
        self.params.insert(
            name,
            Param {
                tensor,
                frozen,
                constant: false,
            },
        );
        Ok(())
    }

    /// Inserts a tensor that is frozen for good.
    pub fn insert_constant(&mut self, name: impl Into<String>, data: Vec<E>, shape: &[usize]) -> Result<()> {
        let name = name.into();
        self.insert(name.clone(), data, shape, true)?;
        self.params.get_mut(&name).expect("just inserted").constant = true;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<E>> {
        self.params.get(name)
    }

    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a, E> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<E>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Replaces a tensor's values, keeping its shape and frozen flag. Any
    /// accumulated gradient is dropped along with the old leaf.
    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if data.len() != p.tensor.numel() {
            return Err(Error::shape(format!(
                "{name}: {} values for shape {:?}",
                data.len(),
                p.tensor.shape()
            )));
        }
        p.tensor = Tensor::new(data, p.tensor.shape())?.with_requires_grad(!p.frozen);
        Ok(())
    }

    /// Swaps in an externally built tensor of the same shape, e.g. a leaf
    /// under finite-difference perturbation.
    pub fn replace(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if tensor.shape() != p.tensor.shape() {
            return Err(Error::shape(format!(
                "{name}: replacement shape {:?} differs from {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    /// Freezes or unfreezes every tensor whose name starts with `prefix`.
    /// Returns how many tensors changed. Constants stay frozen.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut changed = 0;
        for (name, p) in self.params.iter_mut() {
            if !name.starts_with(prefix) || p.frozen == frozen || p.constant {
                continue;
            }
            p.frozen = frozen;
            p.tensor = p.tensor.with_requires_grad(!frozen);
            changed += 1;
        }
        changed
    }

    pub fn zero_grad(&self) {
        for p in self.params.values() {
            p.tensor.zero_grad();
        }
    }

    /// `(trainable, frozen)` element counts.
    pub fn count(&self) -> (usize, usize) {
        self.params.values().fold((0, 0), |(t, f), p| {
            if p.frozen {
                (t, f + p.tensor.numel())
            } else {
                (t + p.tensor.numel(), f)
            }
        })
    }

    /// Element count of everything under `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast::<F>().with_requires_grad(!p.frozen),
                            frozen: p.frozen,
                            constant: p.constant,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Same names, shapes and flags as `other`, values compared bitwise.
    pub fn bit_identical(&self, other: &ParamStore<E>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.frozen == b.frozen
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// A view of the store under a name prefix.
#[derive(Clone)]
pub struct Scope<'a, E: Element> {
    store: &'a ParamStore<E>,
    prefix: String,
}

impl<'a, E: Element> Scope<'a, E> {
    pub fn get(&self, name: &str) -> Result<&'a Tensor<E>> {
        self.store.get(&format!("{}.{name}", self.prefix))
    }

    pub fn sub(&self, name: &str) -> Scope<'a, E> {
        Scope {
            store: self.store,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `x·W + b` over the last axis of `x`, for `weight` `[in,out]` and `bias` `[out]`.
    pub fn linear(&self, name: &str, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = self.get(&format!("{name}.weight"))?;
        let b = self.get(&format!("{name}.bias"))?;
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let last = *x.shape().last().unwrap_or(&0);
        if last != din {
            return Err(Error::shape(format!(
                "{}.{name}: input {:?} does not match weight {:?}",
                self.prefix,
                x.shape(),
                w.shape()
            )));
        }
        let rows = x.numel() / din;
        let y = x
            .reshape(&[rows, din])?
            .matmul(w)?
            .add(&b.reshape(&[1, dout])?)?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = dout;
        y.reshape(&shape)
    }
}

/// Deterministic initializers. Each tensor draws from its own stream keyed by
/// `(seed, name)`, so values do not depend on construction order.
pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> SeededRng {
        SeededRng::derived(self.seed, &[label_key(name)])
    }

    /// Normal(0, std) truncated to ±2 std.
    pub fn trunc_normal(&self, name: &str, n: usize, std: f64) -> Vec<f32> {
        let mut rng = self.rng(name);
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng.as_rng());
                if v.abs() <= 2.0 * std {
                    break v as f32;
                }
            })
            .collect()
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&self, name: &str, n: usize, fan_in: usize) -> Vec<f32> {
        let mut rng = self.rng(name);
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.symmetric(bound) as f32).collect()
    }

    pub fn linear(&self, store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<()> {
        let w = self.fan_in_uniform(&format!("{name}.weight"), din * dout, din);
        store.insert(format!("{name}.weight"), w, &[din, dout], false)?;
        store.insert(format!("{name}.bias"), vec![0.0; dout], &[dout], false)
    }

    pub fn conv(&self, store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize) -> Result<()> {
        let fan_in = in_c * k * k;
        let w = self.fan_in_uniform(&format!("{name}.weight"), out_c * fan_in, fan_in);
        store.insert(format!("{name}.weight"), w, &[out_c, in_c, k, k], false)?;
        store.insert(format!("{name}.bias"), vec![0.0; out_c], &[out_c], false)
    }

    pub fn layer_norm(&self, store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
        store.insert(format!("{name}.gamma"), vec![1.0; d], &[d], false)?;
        store.insert(format!("{name}.beta"), vec![0.0; d], &[d], false)
    }
}
