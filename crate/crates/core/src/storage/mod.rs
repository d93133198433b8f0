//! On-disk formats shared with the activation extractor and the runtime.

mod activations;
mod bundle;

pub use activations::{
    decode_activations, encode_activations, open_activations, read_activations,
    write_activations, write_activations_to, ActivationHeader, ActivationReader,
    ACTIVATION_FORMAT_VERSION, ACTIVATION_MAGIC,
};
pub use bundle::{
    decode_bundle, encode_bundle, load_bundle, manifest_for, read_manifest, save_bundle, BlobRef,
    BundleManifest, ProfileEntry, BUNDLE_MAGIC,
};
