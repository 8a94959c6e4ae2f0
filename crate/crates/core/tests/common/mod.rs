#![allow(dead_code)]

use ewastenet::params::ParamStore;
use ewastenet::rng::SeededRng;
use ewastenet::tensor::ScalarFunction;
use ewastenet::{Element, Result, Tensor};

/// A scalar loss over a whole parameter store, evaluable at any precision.
pub trait StoreLoss {
    fn loss<E: Element>(&self, store: &ParamStore<E>) -> Result<Tensor<E>>;
}

/// Views one named tensor of a store as the free variable of `loss`.
pub struct ParamFn<'a, L> {
    pub store: &'a ParamStore,
    pub name: String,
    pub loss: &'a L,
}

impl<L: StoreLoss> ScalarFunction for ParamFn<'_, L> {
    fn eval<E: Element>(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut s = self.store.cast::<E>();
        s.replace(&self.name, x.clone())?;
        self.loss.loss(&s)
    }
}

/// Fixed pseudo-random weights in [-1, 1] for projecting outputs to a scalar.
pub fn probe<E: Element>(shape: &[usize], seed: u64) -> Tensor<E> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| E::lit(rng.symmetric(1.0)))
}

pub fn random<E: Element>(shape: &[usize], seed: u64, bound: f64) -> Tensor<E> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| E::lit(rng.symmetric(bound)))
}

/// `Σ out ⊙ probe`, a scalar with a dense upstream gradient.
pub fn project<E: Element>(out: &Tensor<E>, seed: u64) -> Result<Tensor<E>> {
    Ok(out.mul(&probe(out.shape(), seed))?.sum())
}
