//! Block-causal velocity-field prior over latent sequences, the
//! conditional Flow Matching loss, and the stage-2 joint objective.

mod dit;
mod stage2;

pub use dit::{
    build_visible_set, BlockVisibility, FlowPrior, PriorConfig, StreamSpec, VisibleSet,
};
pub use stage2::{stage2_loss_graph, FmNodes, Stage2Nodes, Stage2Parts, Stage2Weights};
