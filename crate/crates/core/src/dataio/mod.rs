//! Reading and writing datasets.
//!
//! On disk a dataset is `<root>/annotations/<video>.txt` plus
//! `<root>/images/<video>/<frame>.jpg` (or `.png`), where frames are numbered
//! from 1 and zero-padded to five digits. An annotation file starts with a
//! comma-separated header of AU names followed by one row per frame of
//! comma-separated labels: `1` present, `0` absent, `-1` unknown.

mod annotations;
mod batch;
mod images;
mod index;
mod synthetic;

pub use annotations::{parse_annotation_text, parse_annotations, AnnotationFile};
pub use batch::{batch_iter, batch_sizes, epoch_order, ordered_batches, Batch, BatchIter};
pub use images::{find_frame_image, frame_stem, load_image};
pub use index::{build_index, build_index_from, DatasetIndex, Entry, LabelCounts, Policy};
pub use synthetic::{
    au_region, default_prevalence, draw_labels, generate_synthetic, render_sample, Region, SyntheticSpec,
    SYNTH_VIDEO,
};
