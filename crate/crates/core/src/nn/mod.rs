//! Parameterized layers, parameter storage, compute accounting and
//! checkpoints.

pub mod checkpoint;
mod layers;
mod params;

pub use checkpoint::Checkpoint;
pub use layers::{
    BatchNorm2d, Conv2d, ConvBnRelu, ConvSpec, LayerNorm2d, Mlp2, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use params::{
    Buffer, BufferId, Builder, Init, LayerCost, LayerKind, Param, ParamId, ParamStore, Session,
    SessionOutcome,
};

/// Parameter and multiply-accumulate totals for one forward pass.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostReport {
    pub params: usize,
    pub macs: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn new(store: &ParamStore, layers: Vec<LayerCost>) -> Self {
        CostReport {
            params: store.num_params(),
            macs: layers.iter().map(|l| l.macs).sum(),
            layers,
        }
    }
}
