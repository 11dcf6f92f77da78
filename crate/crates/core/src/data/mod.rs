//! Volumes, the MVOL container, manifests, slice batching and synthetic
//! phantom pairs.

mod dataset;
pub mod mvol;
pub mod pgm;
pub mod synth;
mod volume;

pub use dataset::{
    batch_order, crop, make_batches, pad_reflect, padded_size, split_subjects, subject_records,
    Batch, Manifest, ManifestEntry, SliceSet, SplitSpec, SubjectVolume,
};
pub use mvol::{load_labels, load_volume, save_labels, save_volume};
pub use pgm::{import_pgm_stack, write_pgm8};
pub use synth::{synth_generate, synth_record, write_dataset, SynthParams, SynthRecord};
pub use volume::{central_slices, denormalize, normalize_01, NormRecord, Volume};
