//! Files: weights, images, datasets and run manifests.

pub mod manifest;
pub mod pnm;
pub mod synth;
pub mod weights;

pub use manifest::RunManifest;
pub use pnm::{read_image, write_image, Raster};
pub use synth::{generate_samples, generate_synthetic, load_dataset, write_dataset, SynthConfig};
pub use weights::WeightFile;
