pub mod compose;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod image;
pub mod masks;
pub mod metrics;
pub mod netpbm;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod seed;
pub mod transformer;
pub mod vq;

pub use error::{Error, Result};
pub use image::Image;
pub use masks::{build_pyramid, downsample_mask, generate_mask, MaskGrid, MaskKind, MaskPyramid};
pub use vq::{encode_full, lookup, quantize, train_vq, Codebook, TokenGrid, VqConfig, VqModel};
