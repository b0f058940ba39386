//! RepVGG: training-time multi-branch blocks, their exact conversion into plain 3x3 conv
//! stacks, the reference kernels both run on, and analytic cost models.

pub mod analysis;
pub mod arch;
pub mod bench;
pub mod block;
pub mod error;
pub mod io;
pub mod reparam;
pub mod tensor;
pub mod trainer;
pub mod winograd;

pub use arch::{build_spec, forward, forward_with, instantiate, ConvAlgo, Mode, Model, ModelSpec, Preset, Variant};
pub use block::{block_forward_deploy, block_forward_train, RepVggBlock};
pub use error::{Error, Result};
pub use reparam::{convert_block, convert_model, fuse_bn, identity_to_1x1, pad_1x1_to_3x3, FusedConv};
pub use tensor::{BnParams, ConvParams, DType, Scalar, Tensor4};
