//! Named parameter storage and the small layers shared by every block.

use std::collections::HashMap;

use denviscom_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Checkpoint partition a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Pos,
    TrunkBlocks,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Pos => 1,
            ParamGroup::TrunkBlocks => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Encoder),
            1 => Some(ParamGroup::Pos),
            2 => Some(ParamGroup::TrunkBlocks),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Parameters in registration order, addressable by id or by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Replaces values by name; every name must already exist with the same shape.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        for (name, value) in values {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
            let slot = self.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { tape, vars }
    }

    /// Every parameter as a constant except `id`, which is bound to `var`.
    pub fn bind_replacing<'t>(&self, tape: &'t Tape, id: ParamId, var: Var<'t>) -> Bound<'t> {
        let mut bound = self.bind(tape, false);
        bound.vars[id.0] = var;
        bound
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Seeded initializer used while registering parameters.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.random_range(lo..hi))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Standard deviation for weights in the attention/SSM trunk.
pub const TRUNK_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, group: ParamGroup, in_f: usize, out_f: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, init.normal(&[out_f, in_f], TRUNK_INIT_STD));
        let bias = Some(store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_f])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(p.get(self.weight), self.bias.map(|b| p.get(b)))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(p.get(self.gamma), p.get(self.beta), self.eps)?)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), ParamGroup::TrunkBlocks, dim, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), ParamGroup::TrunkBlocks, hidden, dim),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(p, x)?.gelu()?;
        self.fc2.forward(p, h)
    }
}

/// Pre-norm residual wrapper around an MLP: `x + mlp(norm(x))`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualMlp {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl ResidualMlp {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, ratio: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), ParamGroup::TrunkBlocks, dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, ratio),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.mlp.forward(p, self.norm.forward(p, x)?)?;
        Ok(x.add(h)?)
    }
}
