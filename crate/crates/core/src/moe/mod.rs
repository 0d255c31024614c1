//! The MoE feed-forward replacement: per-pool token-choice routers,
//! dropless or capacity-limited dispatch, the generalist path, combine
//! rule, and auxiliary losses.

mod dispatch;
mod layer;
mod losses;
mod router;

pub use dispatch::{capacity_limit, dispatch_capacity, dispatch_dropless, DispatchPlan, DispatchSlot};
pub use layer::{LayerTrace, MoeForward, MoeLayer, PoolReport, PoolState, PoolTrace};
pub use losses::{lb_loss, lb_loss_from_mean_probs, z_loss};
pub use router::{
    route_topk, routing_stats, select_topk, update_loss_free_bias, RouterAffinities, RouterState,
    RoutingOutcome, RoutingStats,
};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum MoeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot activate k={k} experts from a pool of n={n}")]
    ActiveAboveTotal { k: usize, n: usize },
    #[error("layer spec/state mismatch: {0}")]
    StateMismatch(String),
}
