//! Manifests, protocols, sampling, augmentation, query selection and the
//! synthetic corpus.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod naming;
pub mod protocol;
pub mod query;
pub mod sampler;
pub mod synth;

pub use augment::{augment, AugmentPolicy};
pub use image::{decode_ppm, load_image};
pub use manifest::{manifest_root, Manifest, SampleRecord, View};
pub use naming::{format_image_name, parse_image_name, ImageName};
pub use protocol::{build_protocol, ProtocolName, ProtocolSplit};
pub use query::{hog_descriptor, select_queries};
pub use sampler::pk_sample;
pub use synth::{generate_synthetic, synthesize, SynthConfig};
