//! Attention-Zoom: a spatial attention layer that gates a feature map with a
//! learned, thresholded attention map, zooms it by zero insertion and mixes the
//! result with an enhancement convolution, together with the small tensor and
//! autodiff engine, backbones, training loop and interpretability tools around it.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type. Training, data loading and visualization run
//! in `f64`.

pub mod attzoom;
pub mod autodiff;
pub mod backbones;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod interpret;
pub mod optim;
pub mod scalar;
pub mod search;
pub mod tensor;
pub mod train;

pub use attzoom::{AttZoomConfig, AttZoomLayer, AttentionRecord};
pub use autodiff::{Graph, NodeId, ParamStore};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvSpec, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore64 = ParamStore<f64>;
