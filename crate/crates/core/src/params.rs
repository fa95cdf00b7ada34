//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Uniform in `(-range, range)`.
    Weight,
    /// Starts at 1.
    LayerNormGain,
    /// Starts at 0.
    LayerNormBias,
    /// Bias of a skip-gate preactivation; starts at 1 so every step survives.
    GateBias,
}

#[derive(Clone, Debug)]
struct Entry<F> {
    name: String,
    kind: ParamKind,
    value: Tensor<F>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a zero-filled parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, shape: Vec<usize>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let value = match kind {
            ParamKind::LayerNormGain | ParamKind::GateBias => Tensor::filled(shape, F::one()),
            _ => Tensor::zeros(shape),
        };
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Uniform `(-range, range)` for weights, 1 for gains and gate biases,
    /// 0 for layer-norm biases. Draw order follows registration order.
    pub fn init_uniform(&mut self, range: f64, rng: &mut impl Rng) {
        let dist = Uniform::new(-range, range);
        for e in &mut self.entries {
            match e.kind {
                ParamKind::Weight => {
                    for v in e.value.data_mut() {
                        let mut x = dist.sample(rng);
                        while x == -range {
                            x = dist.sample(rng);
                        }
                        *v = F::of(x);
                    }
                }
                ParamKind::LayerNormGain | ParamKind::GateBias => {
                    e.value.data_mut().iter_mut().for_each(|v| *v = F::one())
                }
                ParamKind::LayerNormBias => e.value.data_mut().iter_mut().for_each(|v| *v = F::zero()),
            }
        }
    }

    /// Converts every value to another scalar type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
