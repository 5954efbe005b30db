//! Differentiable computation substrate: parameters, a reverse-mode tape,
//! recurrent and convolutional layers, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport};
pub use graph::{Fault, Graph, NodeId};
pub use layers::{Conv1d, GruCell, GruStack, Linear};
pub use params::{Gradients, Mat, ParamId, ParamStore, ParamTensor, RngState};
