pub mod attention;
pub mod attribution;
pub mod error;
pub mod forecast;
pub mod graph;
pub mod pipeline;
pub mod scalar;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type SpatialGraph = graph::SpatialGraph<f64>;
pub type NormalizedAdjacency = graph::NormalizedAdjacency<f64>;
pub type FlowTensor = forecast::FlowTensor<f64>;
pub type Model = forecast::BiTransGcn<f64>;
pub type Checkpoint = forecast::Checkpoint<f64>;
