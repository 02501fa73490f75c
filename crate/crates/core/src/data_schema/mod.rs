//! Domain types, file formats, and the synthetic study generator.

mod io;
mod synth;
mod types;
mod validate;

pub use io::{
    load_dataset, load_fixations, load_heatmap, load_image, load_mask, load_sample, load_transcript, save_fixations,
    save_heatmap, save_image, save_mask, save_sample, save_transcript, HeatmapMeta,
};
pub(crate) use io::{read_json, write_json};
pub use synth::{corpus_seeds, synth_corpus, synth_sample, SynthConfig};
pub use types::{
    AnatomicMaskSet, Anatomy, BinaryMask, CxrImage, Fixation, GazeSample, Heatmap, HeatmapRole, Label, Sentence,
    Setting, Transcript, PATCH_SIZE,
};
pub use validate::{validate_sample, Violation};
