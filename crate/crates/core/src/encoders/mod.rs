//! Text and image branches. Both end in an FC projection to a shared
//! embedding width.

mod image;
mod text;

pub use image::{leaf_batch, stack_images, FeatureExtractor, ImageEncoder, ImageEncoderConfig, IMAGE_PREFIX};
pub use text::{token_keep_mask, TextEncoder, TextEncoderConfig, TEXT_PREFIX};
