//! Named, ordered storage for trainable parameters.
//!
//! Every model tensor lives in one [`ParamStore`]; architecture structs hold
//! [`ParamId`] handles into it. The fixed insertion order gives the
//! optimizer, the gradient clipper, checkpoint serialization, and the
//! finite-difference checker one canonical enumeration of parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Tape, Tensor};

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
struct Param {
    name: String,
    tensor: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a tensor under `name`; it is marked trainable.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_grad(),
        });
        id
    }

    /// Registers a tensor filled with N(0, std^2) draws.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| normal(rng) * std).collect();
        self.add(name, Tensor::new(shape, data).expect("valid shape"))
    }

    /// Registers an all-zero tensor.
    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Registers an all-one tensor (layer-norm gains).
    pub fn add_ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(
            name,
            Tensor::new(shape, vec![1.0; numel]).expect("valid shape"),
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Looks a parameter up by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params
            .iter_mut()
            .map(|p| (p.name.as_str(), &mut p.tensor))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter as a tape leaf without touching the store,
    /// so concurrent readers can bind the same frozen weights. The returned
    /// binding maps [`ParamId`] to tape [`NodeId`].
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            ids: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Like [`ParamStore::bind`] but records each node id on the tensor via
    /// [`Tape::watch`], enabling [`ParamStore::accumulate_grads`].
    pub fn bind_mut(&mut self, tape: &mut Tape) -> Binding {
        Binding {
            ids: self
                .params
                .iter_mut()
                .map(|p| tape.watch(&mut p.tensor))
                .collect(),
        }
    }

    /// Pulls gradients recorded on `tape` back into every parameter's own
    /// grad buffer. Requires a prior [`ParamStore::bind_mut`] on this tape.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for p in &mut self.params {
            // Parameters the loss never touched simply have no gradient.
            let _ = p.tensor.accumulate_grad_from(tape);
        }
    }

    /// Clears all gradient buffers.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

/// Tape node ids for a bound parameter store, indexed by [`ParamId`].
pub struct Binding {
    ids: Vec<NodeId>,
}

impl std::ops::Index<ParamId> for Binding {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.ids[id.0]
    }
}

/// Standard normal draw via Box-Muller, which depends only on the ChaCha
/// stream and so stays stable across `rand` upgrades.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}
