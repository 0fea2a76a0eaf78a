//! Named parameter tree, construction scopes and per-forward sessions.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Shape, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-b, b)` with `b = 1 / sqrt(fan_in)`.
    FanIn {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub init: Init,
    value: Tensor,
    grad: Option<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// Every trainable tensor and running statistic of a model, addressed by a
/// unique dotted name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    names: BTreeMap<String, ()>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim_name(&mut self, name: &str) {
        assert!(
            self.names.insert(name.to_string(), ()).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers
            .iter()
            .position(|b| b.name == name)
            .map(BufferId)
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape(),
                rhs: value.shape(),
            });
        }
        p.value = value.detach();
        Ok(())
    }

    pub fn set_buffer(&mut self, id: BufferId, data: Vec<f64>) -> Result<()> {
        let b = &mut self.buffers[id.0];
        if data.len() != b.data.len() {
            return Err(Error::invalid(
                "set_buffer",
                format!(
                    "{} expects {} values, got {}",
                    b.name,
                    b.data.len(),
                    data.len()
                ),
            ));
        }
        b.data = data;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Applies buffer updates and stores leaf gradients gathered during a
    /// forward session.
    pub fn absorb(&mut self, outcome: SessionOutcome, grads: Option<&Gradients>) {
        for (id, data) in outcome.buffer_updates {
            self.buffers[id.0].data = data;
        }
        if let Some(grads) = grads {
            for (id, leaf) in outcome.leaves {
                let g = grads
                    .get(&leaf)
                    .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
                self.params[id.0].grad = Some(g);
            }
        }
    }
}

/// Construction scope: hands out dotted names and draws initial values.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.path(name);
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&mut self, name: &str, shape: Shape, init: Init) -> ParamId {
        let full = self.path(name);
        self.store.claim_name(&full);
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::FanIn { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let rng = &mut *self.rng;
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
        };
        self.store.params.push(Param {
            name: full,
            init,
            value,
            grad: None,
        });
        ParamId(self.store.params.len() - 1)
    }

    pub fn buffer(&mut self, name: &str, shape: Shape, fill: f64) -> BufferId {
        let full = self.path(name);
        self.store.claim_name(&full);
        let len = shape.iter().product();
        self.store.buffers.push(Buffer {
            name: full,
            shape,
            data: vec![fill; len],
        });
        BufferId(self.store.buffers.len() - 1)
    }
}

/// Kind of compute accounted by the cost counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    MatMul,
}

/// Multiply-accumulates attributed to one layer invocation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: LayerKind,
    pub macs: u64,
}

/// State of one forward pass: the tape (if gradients are wanted), the
/// train/eval switch, pending running-statistic updates and the optional
/// multiply-accumulate counter.
pub struct Session<'a> {
    store: &'a ParamStore,
    tape: Option<Tape>,
    train: bool,
    leaves: RefCell<HashMap<ParamId, Tensor>>,
    buffer_updates: RefCell<Vec<(BufferId, Vec<f64>)>>,
    costs: Option<RefCell<Vec<LayerCost>>>,
}

/// What a session leaves behind for [`ParamStore::absorb`].
pub struct SessionOutcome {
    leaves: Vec<(ParamId, Tensor)>,
    buffer_updates: Vec<(BufferId, Vec<f64>)>,
}

impl<'a> Session<'a> {
    /// Inference: no tape, running statistics.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::build(store, None, false)
    }

    /// Training: parameters become leaves of `tape`, batch statistics are used.
    pub fn train(store: &'a ParamStore, tape: &Tape) -> Self {
        Self::build(store, Some(tape.clone()), true)
    }

    /// Gradient-tracked forward in inference mode.
    pub fn eval_with_tape(store: &'a ParamStore, tape: &Tape) -> Self {
        Self::build(store, Some(tape.clone()), false)
    }

    /// Inference forward that records per-layer multiply-accumulates.
    pub fn counting(store: &'a ParamStore) -> Self {
        let mut s = Self::build(store, None, false);
        s.costs = Some(RefCell::new(Vec::new()));
        s
    }

    fn build(store: &'a ParamStore, tape: Option<Tape>, train: bool) -> Self {
        Session {
            store,
            tape,
            train,
            leaves: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            costs: None,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.tape.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The parameter as seen by this forward pass: a tape leaf when
    /// recording (one leaf per parameter, reused), else the raw value.
    pub fn param(&self, id: ParamId) -> Result<Tensor> {
        let value = self.store.param(id).value();
        let Some(tape) = &self.tape else {
            return Ok(value.clone());
        };
        let mut leaves = self.leaves.borrow_mut();
        if let Some(leaf) = leaves.get(&id) {
            return Ok(leaf.clone());
        }
        let leaf = tape.leaf(value)?;
        leaves.insert(id, leaf.clone());
        Ok(leaf)
    }

    pub fn buffer(&self, id: BufferId) -> Vec<f64> {
        let pending = self.buffer_updates.borrow();
        if let Some((_, data)) = pending.iter().rev().find(|(b, _)| *b == id) {
            return data.clone();
        }
        self.store.buffer(id).data.clone()
    }

    pub fn update_buffer(&self, id: BufferId, data: Vec<f64>) {
        self.buffer_updates.borrow_mut().push((id, data));
    }

    pub fn add_cost(&self, layer: &str, kind: LayerKind, macs: u64) {
        if let Some(costs) = &self.costs {
            costs.borrow_mut().push(LayerCost {
                layer: layer.to_string(),
                kind,
                macs,
            });
        }
    }

    pub fn costs(&self) -> Vec<LayerCost> {
        self.costs
            .as_ref()
            .map(|c| c.borrow().clone())
            .unwrap_or_default()
    }

    pub fn finish(self) -> SessionOutcome {
        let mut leaves: Vec<(ParamId, Tensor)> = self.leaves.into_inner().into_iter().collect();
        leaves.sort_by_key(|(id, _)| *id);
        SessionOutcome {
            leaves,
            buffer_updates: self.buffer_updates.into_inner(),
        }
    }
}
