//! A labelled-pattern stand-in for a real AU dataset: every AU owns a
//! bright rectangle at a fixed spot, and a sample shows the rectangles of
//! its active AUs on a noisy gray background.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::AnnotationFile;
use super::images::frame_stem;
use crate::error::{Error, Result};
use crate::exec;
use crate::objective::LabelVector;
use crate::{DEFAULT_AU_NAMES, NUM_AUS};

/// Name of the single pseudo-video a synthetic dataset contains.
pub const SYNTH_VIDEO: &str = "synth";

const BACKGROUND: f64 = 0.5;
const FOREGROUND: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub count: usize,
    pub seed: u64,
    /// Bernoulli rate of each AU.
    pub prevalence: Vec<f64>,
    /// Standard deviation of the per-pixel gray noise, in `[0, 1]` units.
    pub noise: f64,
}

impl SyntheticSpec {
    /// Default size 112, prevalences evenly spaced from 0.05 to 0.5, noise 0.1.
    pub fn new(count: usize, seed: u64) -> Self {
        SyntheticSpec {
            image_size: 112,
            count,
            seed,
            prevalence: default_prevalence(),
            noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("image size {} is below 32", self.image_size)));
        }
        if self.count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if self.prevalence.len() != NUM_AUS {
            return Err(Error::Config(format!(
                "{} prevalences given, expected {NUM_AUS}",
                self.prevalence.len()
            )));
        }
        if let Some(p) = self.prevalence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("prevalence {p} is outside (0, 1)")));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise level {} is invalid", self.noise)));
        }
        Ok(())
    }
}

pub fn default_prevalence() -> Vec<f64> {
    (0..NUM_AUS)
        .map(|i| 0.05 + 0.45 * i as f64 / (NUM_AUS - 1) as f64)
        .collect()
}

/// Axis-aligned pixel rectangle, `x`/`y` being its top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// Where AU `au` is drawn. The image is cut into a 4x3 grid with one cell
/// per AU; even AUs get a horizontal bar, odd AUs a vertical one, centred
/// in the cell.
pub fn au_region(image_size: usize, au: usize) -> Region {
    assert!(au < NUM_AUS, "AU index {au} out of range");
    let (cell_w, cell_h) = (image_size / 4, image_size / 3);
    let (col, row) = (au % 4, au / 4);
    let (width, height) = if au.is_multiple_of(2) {
        (cell_w * 3 / 5, (cell_h / 4).max(1))
    } else {
        ((cell_w / 4).max(1), cell_h * 3 / 5)
    };
    Region {
        x: col * cell_w + (cell_w - width) / 2,
        y: row * cell_h + (cell_h - height) / 2,
        width,
        height,
    }
}

/// The labels a spec produces, without rendering anything.
pub fn draw_labels(spec: &SyntheticSpec) -> Vec<LabelVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|_| {
            let values = spec
                .prevalence
                .iter()
                .map(|&p| i8::from(rng.random_bool(p)))
                .collect();
            LabelVector::new(values).expect("binary labels are valid")
        })
        .collect()
}

/// Renders sample `sample` of `spec` with the given labels. Noise comes from
/// a stream of its own, so samples can be rendered in any order.
pub fn render_sample(spec: &SyntheticSpec, sample: usize, labels: &LabelVector) -> GrayImage {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(sample as u64 + 1);
    let noise = Normal::new(0.0, spec.noise).expect("validated noise level");
    let active: Vec<Region> = (0..NUM_AUS)
        .filter(|&i| labels.get(i) == Some(true))
        .map(|i| au_region(size, i))
        .collect();
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let base = if active.iter().any(|r| r.contains(x, y)) {
            FOREGROUND
        } else {
            BACKGROUND
        };
        let v = if spec.noise > 0.0 {
            base + noise.sample(&mut rng)
        } else {
            base
        };
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Writes `annotations/synth.txt` and `images/synth/NNNNN.png` under
/// `out_dir` and returns the annotations.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<AnnotationFile> {
    spec.validate()?;
    let annotation_dir = out_dir.join("annotations");
    let image_dir = out_dir.join("images").join(SYNTH_VIDEO);
    for dir in [&annotation_dir, &image_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let labels = draw_labels(spec);
    let written = exec::map(spec.count, |k| {
        let path = image_dir.join(format!("{}.png", frame_stem(k + 1)));
        render_sample(spec, k, &labels[k])
            .save(&path)
            .map_err(|source| Error::Image { path, source })
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;

    let annotations = AnnotationFile {
        video: SYNTH_VIDEO.to_string(),
        header: DEFAULT_AU_NAMES.iter().map(|s| s.to_string()).collect(),
        rows: labels,
    };
    annotations.write(&annotation_dir.join(format!("{SYNTH_VIDEO}.txt")))?;
    Ok(annotations)
}
