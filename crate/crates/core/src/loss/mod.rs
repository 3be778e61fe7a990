//! The DM-Count objective.

pub mod dmcount;
pub mod sinkhorn;

pub use dmcount::{counting_loss, dm_count_loss, ot_loss, ot_loss_with_plan, tv_loss, DmCountLoss, DmCountWeights, LossValue, OtSettings};
pub use sinkhorn::{sinkhorn, sinkhorn_with_gradient, CostMatrix, TransportPlan, TransportProblem};
