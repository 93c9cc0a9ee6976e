pub mod ablation;
pub mod cfm;
pub mod checkpoint;
pub mod csm;
pub mod data;
pub mod episodic;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod pseudo_mask;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
