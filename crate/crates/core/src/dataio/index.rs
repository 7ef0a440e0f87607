use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::annotations::parse_annotations;
use super::images::find_frame_image;
use crate::error::{Error, Result};
use crate::objective::{ClassWeights, LabelVector};

/// What to do with a frame that has some, but not all, labels set to `-1`.
/// Frames whose labels are all `-1` are always excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Keep the frame; the loss ignores the invalid entries.
    #[default]
    Mask,
    /// Exclude the frame.
    Drop,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Policy::Mask),
            "drop" => Ok(Policy::Drop),
            other => Err(Error::Config(format!("unknown label policy {other:?} (expected mask or drop)"))),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Mask => "mask",
            Policy::Drop => "drop",
        })
    }
}

impl Policy {
    pub fn admits(self, labels: &LabelVector) -> bool {
        !labels.all_invalid() && (self == Policy::Mask || !labels.has_invalid())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub image: PathBuf,
    pub labels: LabelVector,
}

/// Per-AU tallies over the valid (non `-1`) labels of a set of entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub totals: Vec<u64>,
    pub positives: Vec<u64>,
}

impl LabelCounts {
    pub fn tally<'a>(num_aus: usize, labels: impl IntoIterator<Item = &'a LabelVector>) -> Self {
        let mut counts = LabelCounts {
            totals: vec![0; num_aus],
            positives: vec![0; num_aus],
        };
        for row in labels {
            for i in 0..num_aus {
                if let Some(positive) = row.get(i) {
                    counts.totals[i] += 1;
                    counts.positives[i] += u64::from(positive);
                }
            }
        }
        counts
    }
}

/// The ordered list of usable training frames.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    au_names: Vec<String>,
    entries: Vec<Entry>,
    counts: LabelCounts,
    policy: Policy,
}

impl DatasetIndex {
    /// Builds an index from explicit entries, applying `policy`.
    pub fn from_entries(au_names: Vec<String>, entries: Vec<Entry>, policy: Policy) -> Result<Self> {
        for e in &entries {
            if e.labels.len() != au_names.len() {
                return Err(Error::Dataset(format!(
                    "{}: {} labels for {} AUs",
                    e.image.display(),
                    e.labels.len(),
                    au_names.len()
                )));
            }
        }
        let entries: Vec<Entry> = entries.into_iter().filter(|e| policy.admits(&e.labels)).collect();
        if entries.is_empty() {
            return Err(Error::Dataset("no usable frames".into()));
        }
        let counts = LabelCounts::tally(au_names.len(), entries.iter().map(|e| &e.labels));
        Ok(DatasetIndex {
            au_names,
            entries,
            counts,
            policy,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn au_names(&self) -> &[String] {
        &self.au_names
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    /// Frames with a valid label, per AU.
    pub fn totals(&self) -> &[u64] {
        &self.counts.totals
    }

    pub fn positives(&self) -> &[u64] {
        &self.counts.positives
    }

    pub fn counts(&self) -> &LabelCounts {
        &self.counts
    }

    pub fn labels(&self) -> Vec<LabelVector> {
        self.entries.iter().map(|e| e.labels.clone()).collect()
    }

    pub fn class_weights(&self) -> Result<ClassWeights> {
        ClassWeights::from_counts(self.counts.totals.clone(), self.counts.positives.clone(), &self.au_names)
    }

    /// Splits off the last `val_len` entries as a held-out set. Both halves
    /// keep the order and policy of `self`.
    pub fn split_tail(&self, val_len: usize) -> Result<(DatasetIndex, DatasetIndex)> {
        if val_len == 0 || val_len >= self.len() {
            return Err(Error::Dataset(format!(
                "cannot hold out {val_len} of {} frames",
                self.len()
            )));
        }
        let cut = self.len() - val_len;
        let part = |entries: &[Entry]| {
            DatasetIndex::from_entries(self.au_names.clone(), entries.to_vec(), self.policy)
        };
        Ok((part(&self.entries[..cut])?, part(&self.entries[cut..])?))
    }

    /// The first `n` entries.
    pub fn head(&self, n: usize) -> Result<DatasetIndex> {
        DatasetIndex::from_entries(
            self.au_names.clone(),
            self.entries[..n.min(self.len())].to_vec(),
            self.policy,
        )
    }
}

/// Indexes `<root>/annotations/*.txt` against `<root>/images/<video>/`.
pub fn build_index(root: &Path, policy: Policy) -> Result<DatasetIndex> {
    build_index_from(&root.join("annotations"), &root.join("images"), policy)
}

/// Pairs every annotated frame with its image. Videos are visited in file
/// name order and frames in row order; frames without an image are skipped
/// with a warning.
pub fn build_index_from(annotation_dir: &Path, image_dir: &Path, policy: Policy) -> Result<DatasetIndex> {
    let mut files: Vec<PathBuf> = fs::read_dir(annotation_dir)
        .map_err(|e| Error::io(annotation_dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(annotation_dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt") && p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "no annotation files in {}",
            annotation_dir.display()
        )));
    }

    let mut au_names: Option<Vec<String>> = None;
    let mut entries = Vec::new();
    let mut missing = 0usize;
    for file in &files {
        let annotations = parse_annotations(file)?;
        match &au_names {
            None => au_names = Some(annotations.header.clone()),
            Some(names) if *names != annotations.header => {
                return Err(Error::Dataset(format!(
                    "{}: header differs from the first annotation file",
                    file.display()
                )));
            }
            Some(_) => {}
        }
        let video_dir = image_dir.join(&annotations.video);
        for (frame, labels) in annotations.frames() {
            if !policy.admits(labels) {
                continue;
            }
            match find_frame_image(&video_dir, frame) {
                Some(image) => entries.push(Entry {
                    image,
                    labels: labels.clone(),
                }),
                None => {
                    missing += 1;
                    log::warn!(
                        "{}: no image for frame {frame}, skipping",
                        video_dir.display()
                    );
                }
            }
        }
    }
    if missing > 0 {
        log::warn!("skipped {missing} annotated frames without images");
    }
    DatasetIndex::from_entries(au_names.unwrap_or_default(), entries, policy)
}
