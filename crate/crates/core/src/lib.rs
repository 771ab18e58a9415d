//! Dual-pixel defocus deblurring with a windowed-attention transformer
//! front end and cascaded dynamic multi-scale reconstruction.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod persist;
pub mod tensor;
pub mod train;

pub use autodiff::{GradFault, Gradients, Graph, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{Ctx, Dmtnet};
pub use params::{Init, ParamSpec, ParamStore};
pub use tensor::{DType, Element, Tensor};
