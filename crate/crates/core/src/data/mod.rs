//! Image I/O, preprocessing, manifests and the synthetic dataset.

pub mod manifest;
pub mod png_io;
pub mod preprocess;
pub mod synth;

pub use manifest::{write_dataset, Manifest, ManifestEntry, Split};
pub use png_io::{load_image, load_mask, save_image, save_mask};
pub use preprocess::{
    draw_scale, multiscale_resize, pad_to_square_resize, resize_sample, restore_original, stack, PadInfo, SegSample, SCALES,
};
pub use synth::{synth_dataset, synth_sample};
