//! Fixed-topology network: sinc front-end, dilated 1-D convolutions, max
//! pooling, ReLU, batch normalization and a time-averaged softmax output.

pub mod layers;
pub mod model;

pub use layers::{BnMode, ConvShape, Tensor};
pub use model::{
    batch_xent, normalize_frame, ForwardCache, GroupInfo, GroupKind, Gradients, LayerSpec, LhucSite,
    Model, ModelSpec,
};
