//! The learnable core and the differentiation machinery it trains with.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod net;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, BlockCheck, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId, PROB_FLOOR};
pub use net::{
    floored_probs, BoundingDist, Canvas, Model, ModelConfig, Slot, Visibility, VisualContext,
};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{softmax_rows, Tensor};
