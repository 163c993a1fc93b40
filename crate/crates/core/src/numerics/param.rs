use super::{Rng, Tensor};

/// A named model weight.
///
/// Names are unique within a model and double as checkpoint keys and as the
/// identity the tape uses to map gradients back to weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::full(shape, 1.0))
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = std * rng.normal());
        Self::new(name, t)
    }

    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.uniform_in(-bound, bound));
        Self::new(name, t)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    fn checksum(&self) -> u64 {
        super::checksum(self.params().into_iter().map(|p| &p.value))
    }
}
