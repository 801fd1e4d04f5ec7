pub mod autograd;
pub mod dataio;
pub mod cfilter;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod roadnet;
pub mod swin;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use metrics::{BinaryMask, ConfusionCounts, Scores};
pub use params::{LayerParams, ParamKind, ParamStore, Session};
pub use rng::{Purpose, Rng};
pub use roadnet::{Ablation, NetworkConfig, RoadNet};
pub use tensor::{DType, Scalar, Tensor};
