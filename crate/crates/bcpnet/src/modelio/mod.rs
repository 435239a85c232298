//! Persistence and exchange: the binary weights file, the text run
//! configuration, and PNG image/label I/O.

mod image;
mod runconfig;
mod weights;

pub use image::{
    class_palette, read_image, read_label_png, write_label_png, write_rgb_png, CITYSCAPES_CLASSES,
};
pub use runconfig::RunConfig;
pub use weights::{load_weights, save_weights, FORMAT_VERSION, MAGIC};
