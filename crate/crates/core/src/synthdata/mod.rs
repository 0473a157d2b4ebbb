//! Synthetic two-modality subjects, random deformations, and volume files.

mod dataset;
mod generate;
mod io;

pub use dataset::{load_pair, make_dataset, read_manifest, split_sizes, DatasetConfig, ManifestRecord, Split, MANIFEST_FILE};
pub use generate::{
    random_svf, render_modality, synth_anatomy, synth_subject, AnatomyConfig, DeformConfig, ModalityConfig,
    RegistrationPair, SubjectSample, SynthConfig, MAX_ANATOMY_RETRIES, MAX_SVF_RETRIES,
};
pub use io::{read_field, read_labels, read_volume, write_field, write_labels, write_volume, FIELD_AXES, HEADER_BYTES, VOLUME_MAGIC};
