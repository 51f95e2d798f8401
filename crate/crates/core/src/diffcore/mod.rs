//! Dense arrays, the reverse-mode tape, the AdamW update, and the
//! checkpoint format shared by both training stages.

pub mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub use optim::{clip_scale, AdamW, Bindings, Param, ParamSet};
pub use tape::{rope_tables, Graph, NodeId};
pub use tensor::Tensor;
