//! Parameter storage, exact gradients for the fixed layer set, optimizers,
//! finite-difference checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, TensorRecord};
pub use gradcheck::{gradcheck, GradcheckReport, ParamError, Probe};
pub use optim::{OptimizerKind, OptimizerState};

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zeros,
}

/// Named dense tensors plus a global step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub(crate) tensors: Vec<Tensor>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter name `{name}`")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` has shape {shape:?} but {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { tensor: name.to_string() });
        }
        let id = self.tensors.len();
        self.tensors.push(Tensor { name: name.to_string(), shape: shape.to_vec(), values });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add_init(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; numel],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.add(name, shape, values)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|i| ParamId(*i))
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].values
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { values: self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect() }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.tensors.iter().find(|t| t.values.iter().any(|v| !v.is_finite())) {
            Some(t) => Err(Error::NonFinite { tensor: t.name.clone() }),
            None => Ok(()),
        }
    }
}

/// Gradient accumulators shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn by_index(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clear(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.values.iter()
    }
}

/// Reproducible parameter RNG.
pub fn param_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_9A2A)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", &[2], vec![1.0, 2.0]).unwrap();
        assert!(s.add("w", &[1], vec![0.0]).is_err());
        assert!(s.add("v", &[3], vec![0.0]).is_err());
        assert!(s.add("nan", &[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn fan_in_init_is_seeded_and_bounded() {
        let build = |seed| {
            let mut rng = param_rng(seed);
            let mut s = ParamStore::new();
            s.add_init("w", &[8, 4], Init::FanIn(4), &mut rng).unwrap();
            s.add_init("b", &[8], Init::FanIn(4), &mut rng).unwrap();
            s
        };
        let (a, b, c) = (build(1), build(1), build(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        for t in a.tensors() {
            assert!(t.values.iter().all(|v| v.is_finite() && v.abs() <= 0.5));
        }
    }
}
