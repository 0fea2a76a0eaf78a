use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use super::precision::{round_in_place, should_check_finite};
use super::{numel, Shape, Tensor};
use crate::error::{Error, Result};

/// Maps the upstream gradient (and which inputs need one) to per-input
/// gradients, aligned with the op's input order.
pub(crate) type BackwardFn =
    Box<dyn FnOnce(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + 'static>;

struct Node {
    kind: &'static str,
    /// `None` for operands that were constants when the op was recorded.
    inputs: Vec<Option<usize>>,
    shape: Shape,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeState {
    nodes: Vec<Node>,
    consumed: bool,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    tape: Arc<Mutex<TapeState>>,
    id: usize,
}

/// Ordered record of differentiable operations; recording order is a
/// topological order.
#[derive(Clone, Default)]
pub struct Tape {
    state: Arc<Mutex<TapeState>>,
}

fn lock(state: &Mutex<TapeState>) -> MutexGuard<'_, TapeState> {
    state.lock().unwrap_or_else(|e| e.into_inner())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn from_node(node: &NodeRef) -> Self {
        Tape {
            state: Arc::clone(&node.tape),
        }
    }

    /// Registers `value` as a gradient-tracked leaf on this tape.
    pub fn leaf(&self, value: &Tensor) -> Result<Tensor> {
        let mut state = lock(&self.state);
        if state.consumed {
            return Err(Error::TapeConsumed);
        }
        let id = state.nodes.len();
        state.nodes.push(Node {
            kind: "leaf",
            inputs: Vec::new(),
            shape: value.shape,
            backward: None,
        });
        Ok(Tensor {
            shape: value.shape,
            data: value.data_arc(),
            node: Some(NodeRef {
                tape: Arc::clone(&self.state),
                id,
            }),
        })
    }

    pub fn len(&self) -> usize {
        lock(&self.state).nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        lock(&self.state).consumed
    }

    /// Op kinds recorded so far, in recording order (leaves excluded).
    pub fn recorded_kinds(&self) -> Vec<&'static str> {
        lock(&self.state)
            .nodes
            .iter()
            .filter(|n| n.backward.is_some())
            .map(|n| n.kind)
            .collect()
    }

    /// Reverse sweep from a `(1,1,1,1)` root. Consumes the tape.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.shape != [1, 1, 1, 1] {
            return Err(Error::NonScalarRoot(root.shape));
        }
        let root_node = root.node.as_ref().ok_or(Error::NotRecorded)?;
        if !Arc::ptr_eq(&root_node.tape, &self.state) {
            return Err(Error::MixedTapes);
        }
        let mut nodes = {
            let mut state = lock(&self.state);
            if state.consumed {
                return Err(Error::TapeConsumed);
            }
            state.consumed = true;
            std::mem::take(&mut state.nodes)
        };

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root_node.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for id in (0..=root_node.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                debug_assert_eq!(g.len(), numel(&node.shape));
                leaves.insert(id, (node.shape, g));
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.kind);
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(grad)) = (input, grad) else {
                    continue;
                };
                match &mut grads[*input] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&grad) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients {
            tape: Arc::clone(&self.state),
            leaves,
        })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    tape: Arc<Mutex<TapeState>>,
    leaves: HashMap<usize, (Shape, Vec<f64>)>,
}

impl Gradients {
    /// Gradient for a leaf of this tape; `None` if the leaf was unreachable
    /// from the root.
    pub fn get(&self, leaf: &Tensor) -> Option<Tensor> {
        let node = leaf.node.as_ref()?;
        if !Arc::ptr_eq(&node.tape, &self.tape) {
            return None;
        }
        self.leaves
            .get(&node.id)
            .map(|(shape, g)| Tensor::from_parts(*shape, g.clone()))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Wraps a freshly computed op result: applies the engine precision, checks
/// finiteness, and records the backward rule when any input is on a tape.
pub(crate) fn record(
    kind: &'static str,
    shape: Shape,
    mut data: Vec<f64>,
    inputs: &[&Tensor],
    backward: BackwardFn,
) -> Result<Tensor> {
    debug_assert_eq!(data.len(), numel(&shape), "{kind}");
    round_in_place(&mut data);
    if should_check_finite() && data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: kind });
    }

    let mut tape: Option<&Arc<Mutex<TapeState>>> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match tape {
                None => tape = Some(&node.tape),
                Some(existing) if !Arc::ptr_eq(existing, &node.tape) => {
                    return Err(Error::MixedTapes)
                }
                Some(_) => {}
            }
        }
    }
    let Some(tape) = tape else {
        return Ok(Tensor::from_parts(shape, data));
    };

    let mut state = lock(tape);
    if state.consumed {
        return Err(Error::TapeConsumed);
    }
    let id = state.nodes.len();
    state.nodes.push(Node {
        kind,
        inputs: inputs
            .iter()
            .map(|t| t.node.as_ref().map(|n| n.id))
            .collect(),
        shape,
        backward: Some(backward),
    });
    drop(state);
    Ok(Tensor {
        shape,
        data: Arc::new(data),
        node: Some(NodeRef {
            tape: Arc::clone(tape),
            id,
        }),
    })
}
