//! Named learnable tensors with gradient slots.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{named_rng, next_range};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

// Inherent float math is std-only; route through the trait otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// One learnable tensor and its accumulated gradient (identical dims).
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// A map of named learnable tensors.
///
/// Names are unique; iteration order is lexicographic, which keeps
/// checkpoints and gradient reports deterministic. Weight entries are
/// initialised uniformly in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` from a
/// stream keyed by `(seed, name)`; bias-like entries start at zero.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name: {name}")));
        }
        let grad = Tensor::zeros(value.dims().to_vec());
        self.entries.insert(
            name.to_string(),
            ParamEntry { value, grad },
        );
        Ok(())
    }

    /// Registers a weight initialised uniformly by fan-in.
    pub fn register_weight(&mut self, name: &str, dims: Vec<usize>, fan_in: usize) -> Result<()> {
        if fan_in == 0 {
            return Err(Error::Config(format!("{name}: fan_in must be >= 1")));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = named_rng(self.seed, name);
        let n: usize = dims.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| sc(next_range(&mut rng, -bound, bound)))
            .collect();
        self.insert(name, Tensor::new(dims, data)?)
    }

    /// Registers a zero-initialised entry (biases, positional encodings).
    pub fn register_zeros(&mut self, name: &str, dims: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(dims))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Lookup {
                name: name.to_string(),
            })
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Lookup {
                name: name.to_string(),
            })
    }

    /// Replaces a value; dims must match the registered shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| Error::Lookup {
            name: name.to_string(),
        })?;
        if entry.value.dims() != value.dims() {
            return Err(Error::Shape {
                op: "set_value",
                detail: format!(
                    "{name}: stored dims {:?} vs new dims {:?}",
                    entry.value.dims(),
                    value.dims()
                ),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &[T]) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| Error::Lookup {
            name: name.to_string(),
        })?;
        if entry.grad.numel() != delta.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                detail: format!(
                    "{name}: grad has {} elements, delta has {}",
                    entry.grad.numel(),
                    delta.len()
                ),
            });
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta) {
            *g += *d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            for g in entry.grad.data_mut() {
                *g = T::zero();
            }
        }
    }

    /// One plain gradient-descent step: `value -= lr * grad`.
    pub fn sgd_step(&mut self, lr: T) {
        for entry in self.entries.values_mut() {
            let grads = entry.grad.data().to_vec();
            for (v, g) in entry.value.data_mut().iter_mut().zip(grads) {
                *v = *v - lr * g;
            }
        }
    }

    /// Adds seeded uniform noise in `[-scale, scale)` to every entry.
    ///
    /// Gradient checks evaluate here: structured zeros (zero biases fed
    /// by zero inputs) would otherwise put ReLU arguments exactly on
    /// the kink, where central differences disagree with the chosen
    /// subgradient.
    pub fn jitter(&mut self, scale: f64) {
        let seed = self.seed;
        for (name, entry) in self.entries.iter_mut() {
            let mut rng = named_rng(seed, &alloc::format!("jitter.{name}"));
            for v in entry.value.data_mut() {
                *v += sc::<T>(next_range(&mut rng, -scale, scale));
            }
        }
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Shape of the universal learnable primitive: two linear layers with a
/// ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FcBlockSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl FcBlockSpec {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        FcBlockSpec {
            in_dim,
            hidden_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!(
                "fc block dims must be >= 1, got {}x{}x{}",
                self.in_dim, self.hidden_dim, self.out_dim
            )));
        }
        Ok(())
    }
}

/// Registers `{prefix}.w1/b1/w2/b2` for an FC block.
pub fn register_fc_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    spec: FcBlockSpec,
) -> Result<()> {
    spec.validate()?;
    store.register_weight(
        &format!("{prefix}.w1"),
        alloc::vec![spec.hidden_dim, spec.in_dim],
        spec.in_dim,
    )?;
    store.register_weight(
        &format!("{prefix}.w2"),
        alloc::vec![spec.out_dim, spec.hidden_dim],
        spec.hidden_dim,
    )?;
    if spec.bias {
        store.register_zeros(&format!("{prefix}.b1"), alloc::vec![spec.hidden_dim])?;
        store.register_zeros(&format!("{prefix}.b2"), alloc::vec![spec.out_dim])?;
    }
    Ok(())
}
