use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{splitmix64, stable_hash, ParamId, ParamStore, Result, Scalar, Tensor};

/// Registers parameters with seeded initial values. Each parameter draws
/// from its own stream keyed by `(seed, name)`, so adding or removing a
/// component leaves every other initial value unchanged.
pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    seed: u64,
    std: f64,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, std: f64) -> Self {
        Self { store, seed, std }
    }

    fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ stable_hash(name)))
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.normal_around(name, shape, 0.0)
    }

    /// `center + normal(0, std)` entrywise.
    pub fn normal_around(&mut self, name: impl Into<String>, shape: &[usize], center: f64) -> Result<ParamId> {
        let name = name.into();
        let mut rng = self.stream(&name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(center + self.std * rng.sample::<f64, _>(StandardNormal))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape.to_vec(), T::of(value)), true)
    }
}
