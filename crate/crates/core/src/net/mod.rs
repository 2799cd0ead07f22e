//! Siamese U-Net with hand-written reverse-mode gradients.

mod checkpoint;
mod config;
mod layers;
mod scalar;
mod tensor;
mod unet;

pub(crate) use checkpoint::{check_header, read_network, BlobReader, BlobWriter};
pub use checkpoint::{decode_network, encode_network, load_network, save_network, NETWORK_FORMAT_VERSION};
pub use config::{FeatureMode, ModelConfig, FULL_WIDTHS};
pub use layers::{BatchNorm2d, Buffer, Conv2d, ConvTranspose2d, Param};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{ForwardCache, SiameseUnet};
