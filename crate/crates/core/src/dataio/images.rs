use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a JPEG or PNG into an `[S, S, 3]` RGB tensor with values in
/// `[0, 1]`, bilinearly resampled when the stored size differs from `size`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rgb = decoded.to_rgb8();
    let s = size as u32;
    if rgb.dimensions() != (s, s) {
        rgb = image::imageops::resize(&rgb, s, s, FilterType::Triangle);
    }
    let data = rgb.as_raw().iter().map(|&p| f32::from(p) / 255.0).collect();
    Tensor::new(vec![size, size, 3], data)
}

/// File name of a 1-based frame: `00001`, `00002`, ...
pub fn frame_stem(frame: usize) -> String {
    format!("{frame:05}")
}

/// Finds the image of a frame, preferring `.jpg` over `.png`.
pub fn find_frame_image(video_dir: &Path, frame: usize) -> Option<PathBuf> {
    let stem = frame_stem(frame);
    ["jpg", "png"]
        .iter()
        .map(|ext| video_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}
