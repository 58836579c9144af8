//! Saliency overlays for a checkpoint and an input image.

use std::path::Path;

use comface_core::saliency::{model_saliency, overlay, SaliencyMap};

use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::io;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Computes the Eigen-CAM map of `image` under `checkpoint` and writes an
/// overlay PNG at the input's resolution.
pub fn saliency_overlay(checkpoint: &Path, image: &Path, out: &Path, alpha: f64) -> Result<SaliencyMap> {
    let model = Checkpoint::load(checkpoint)?.model;
    let original = io::read_png(image)?;
    let [h, w] = model.config.input_size;
    let input = original.resized(h, w);
    let map = model_saliency(&model, &input)?;
    let blended = overlay(&map, &original, alpha)?;
    io::write_png(out, &blended)?;
    Ok(map)
}
