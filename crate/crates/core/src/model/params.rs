use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DiffTensor, Gradients, Real, Tape, Var};

/// Storage slot inside a [`ParamStore`]. Aliased names share one id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Coarse grouping used by the parameter audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    Positional,
    Attention,
    Ffn,
    Norms,
    Head,
    BytepoolEmbedder,
    BytepoolDecoder,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Embedding,
        Component::Positional,
        Component::Attention,
        Component::Ffn,
        Component::Norms,
        Component::Head,
        Component::BytepoolEmbedder,
        Component::BytepoolDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::Positional => "positional",
            Component::Attention => "attention",
            Component::Ffn => "ffn",
            Component::Norms => "norms",
            Component::Head => "head",
            Component::BytepoolEmbedder => "bytepool_embedder",
            Component::BytepoolDecoder => "bytepool_decoder",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub tensor: DiffTensor<T>,
    pub component: Component,
    /// Whether decoupled weight decay applies (false for norms, biases, embedding tables).
    pub decay: bool,
}

/// Named parameters. Tying is realized by pointing several names at one
/// storage slot, so updating through any name is visible through all of them.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<ParamEntry<T>>,
    names: Vec<(String, ParamId)>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: DiffTensor<T>,
        component: Component,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.clone(),
            tensor: tensor.with_grad(),
            component,
            decay,
        });
        self.index.insert(name.clone(), id);
        self.names.push((name, id));
        Ok(id)
    }

    /// Registers `name` as another handle on existing storage.
    pub fn alias(&mut self, name: impl Into<String>, target: ParamId) -> Result<()> {
        let name = name.into();
        if target.0 >= self.entries.len() {
            return Err(Error::Index(format!("no storage slot {}", target.0)));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        self.index.insert(name.clone(), target);
        self.names.push((name, target));
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&DiffTensor<T>> {
        self.id(name).map(|id| &self.entries[id.0].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffTensor<T>> {
        let id = self.id(name)?;
        Some(&mut self.entries[id.0].tensor)
    }

    pub fn tensor(&self, id: ParamId) -> &DiffTensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut DiffTensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    /// Unique storage slots, in creation order.
    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    /// Every registered name (canonical and alias) in registration order.
    pub fn names(&self) -> &[(String, ParamId)] {
        &self.names
    }

    pub fn storage_count(&self) -> usize {
        self.entries.len()
    }

    /// Scalar count over unique storage.
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Puts a parameter on the tape (once per tape per slot).
    pub fn var<'a>(&'a self, tape: &mut Tape<'a, T>, id: ParamId) -> Result<Var> {
        let t = &self.entries[id.0].tensor;
        tape.param_leaf(id.0, t.shape(), t.values(), true)
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Adds `scale · ∂loss/∂param` from a backward pass into stored gradients.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, scale: T) -> Result<()> {
        for (slot, g) in grads.slot_grads() {
            let entry = self
                .entries
                .get_mut(slot)
                .ok_or_else(|| Error::Index(format!("gradient for unknown slot {slot}")))?;
            if scale == T::one() {
                entry.tensor.accumulate_grad(g)?;
            } else {
                let scaled: Vec<T> = g.iter().map(|&v| v * scale).collect();
                entry.tensor.accumulate_grad(&scaled)?;
            }
        }
        Ok(())
    }
}

/// Deterministic initializer shared by every model constructor.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn normal<T: Real>(&mut self, shape: Vec<usize>, std: f64) -> DiffTensor<T> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let values = (0..n).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect();
        DiffTensor::new(shape, values).expect("shape matches generated values")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_share_storage() {
        let mut s = ParamStore::<f32>::new();
        let id = s
            .insert("emb", DiffTensor::zeros(vec![2, 2]), Component::Embedding, false)
            .unwrap();
        s.alias("head", id).unwrap();
        s.get_mut("head").unwrap().values_mut()[0] = 3.0;
        assert_eq!(s.get("emb").unwrap().values()[0], 3.0);
        assert_eq!(s.storage_count(), 1);
        assert_eq!(s.num_params(), 4);
        assert_eq!(s.names().len(), 2);
        assert!(s.alias("emb", id).is_err());
        assert!(s.alias("x", ParamId(9)).is_err());
    }
}
