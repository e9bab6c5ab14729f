//! On-disk data model shared by every pipeline stage.

mod image;
mod manifest;
mod tensor;

pub use self::image::{load_png, pad_and_resize, Image};
pub use self::manifest::{DatasetManifest, ManifestRow, Split};
pub use self::tensor::{decode, encode, read_tensor, write_tensor, Tensor};
