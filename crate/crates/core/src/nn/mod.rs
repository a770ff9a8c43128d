//! Named parameters, the [`Module`] visitor trait and the basic layers.

mod layers;

pub use layers::{Conv2d, GroupNorm, Linear};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A trainable tensor with a unique dotted path name.
#[derive(Clone, Debug)]
pub struct Param<E: Element = f32> {
    name: String,
    value: Tensor<E>,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Self {
            name: name.into(),
            value: value.detach().requires_grad(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<Tensor<E>> {
        self.value.grad()
    }

    pub fn is_trainable(&self) -> bool {
        self.value.is_tracked()
    }

    /// Frozen parameters are plain constants: forward passes through them
    /// record no graph and allocate no gradient buffers.
    pub fn set_trainable(&mut self, trainable: bool) {
        let detached = self.value.detach();
        self.value = if trainable { detached.requires_grad() } else { detached };
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    pub(crate) fn take_grad(&self) -> Option<Vec<E>> {
        self.value.take_grad()
    }

    pub(crate) fn data_mut(&mut self) -> &mut Vec<E> {
        self.value.data_mut()
    }

    /// Replaces the values, keeping shape and trainability.
    pub fn assign(&mut self, values: &[E]) -> Result<()> {
        if values.len() != self.value.numel() {
            return Err(Error::Data(format!(
                "parameter {} holds {} values, got {}",
                self.name,
                self.value.numel(),
                values.len()
            )));
        }
        self.data_mut().copy_from_slice(values);
        Ok(())
    }
}

/// Anything that owns parameters.
pub trait Module<E: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>));

    fn parameters(&self) -> Vec<&Param<E>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().numel());
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.set_trainable(trainable));
    }

    fn zero_grad(&self) {
        self.visit(&mut |p| p.zero_grad());
    }

    /// SHA-256 over parameter names, shapes and values; the identity used to
    /// prove a backbone stayed frozen and to key feature caches.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |p| {
            h.update(p.name().as_bytes());
            for d in p.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value().data() {
                h.update(v.as_f64().to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

/// Seeded source for parameter initialization. Parameters are drawn in
/// construction order, so a config plus a seed fixes every weight.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform<E: Element>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<E> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    pub fn uniform<E: Element>(&mut self, shape: Vec<usize>, bound: f64) -> Tensor<E> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| E::from_f64(self.rng.random_range(-bound..=bound)))
            .collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }
}
