//! Named parameter storage with matching gradient slots.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal { std: f64 },
    /// Normal with std `sqrt(2 / fan_in)`.
    FanIn { fan_in: usize },
    /// Identity matrix embedded in a `[C, C, 1, 1]` or `[C, C]` weight.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self { name: name.into(), shape: shape.into(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

static REVISIONS: AtomicU64 = AtomicU64::new(0);

fn next_revision() -> u64 {
    REVISIONS.fetch_add(1, Ordering::Relaxed)
}

/// Ordered parameter map. Iteration order is insertion order and never
/// depends on the seed.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    revision: u64,
}

impl<T: PartialEq> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new(), revision: next_revision() }
    }

    /// Process-unique tag, renewed whenever values may have changed.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Materializes `specs` with values drawn from a generator seeded by `seed`.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let value = sample(spec, &mut rng)?;
            store.insert(spec.name.clone(), value)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.revision = next_revision();
        self.index.insert(name.clone(), self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry { name, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.grad)
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let e = &mut self.entries[i];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` is {:?}, replacement is {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        self.revision = next_revision();
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = *self.index.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.revision = next_revision();
        Ok(&mut self.entries[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.revision = next_revision();
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Overwrites every gradient slot: parameters reached by the backward
    /// sweep get its gradient, all others get zero.
    pub fn set_grads(&mut self, grads: &Gradients<T>) -> Result<()> {
        self.zero_grads();
        for (name, g) in grads.params() {
            let i = *self.index.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            let e = &mut self.entries[i];
            if e.grad.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for `{name}` has shape {:?}", g.shape())));
            }
            e.grad = g.clone();
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), grad: e.grad.cast() })
                .collect(),
            index: self.index.clone(),
            revision: next_revision(),
        }
    }

    /// Checks that this store has exactly the parameters in `specs`, in any
    /// order, with matching shapes. Reports the first discrepancy.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.index.get(&spec.name) {
                None => {
                    return Err(Error::ParamMismatch(format!("missing parameter `{}`", spec.name)))
                }
                Some(&i) if self.entries[i].value.shape() != spec.shape.as_slice() => {
                    return Err(Error::ParamMismatch(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        self.entries[i].value.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.entries.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.entries.iter().find(|e| !known.contains(e.name.as_str())) {
                return Err(Error::ParamMismatch(format!("unexpected parameter `{}`", extra.name)));
            }
        }
        Ok(())
    }
}

fn sample<T: Element>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let n = spec.numel();
    let data: Vec<T> = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Constant(c) => vec![T::of(c); n],
        Init::TruncNormal { std } => {
            let dist = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
            (0..n)
                .map(|_| loop {
                    let v: f64 = dist.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break T::of(v);
                    }
                })
                .collect()
        }
        Init::FanIn { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
            (0..n).map(|_| T::of(dist.sample(rng))).collect()
        }
        Init::Identity => {
            let c = spec.shape[0];
            if spec.shape.len() < 2 || spec.shape[1] != c || n != c * c {
                return Err(Error::shape(format!(
                    "identity init needs a square weight, `{}` is {:?}",
                    spec.name, spec.shape
                )));
            }
            (0..n).map(|i| if i / c == i % c { T::one() } else { T::zero() }).collect()
        }
    };
    Tensor::from_vec(spec.shape.clone(), data)
}
