//! Synthetic scenes, netpbm I/O, and evaluation metrics.

pub mod bench;
pub mod metrics;
pub mod netpbm;
pub mod scene;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use bench::{bench_fps, BenchReport};
pub use metrics::ConfusionMatrix;
pub use scene::{generate_scene, Dataset, SceneSpec, Shape, ShapeKind, SyntheticDataset};

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{} bytes for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// One class id per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Format(format!(
                "{} bytes for a {width}×{height} label map",
                data.len()
            )));
        }
        Ok(LabelMap { width, height, data })
    }
}

/// Per-channel mean pixel value over a set of images.
pub fn channel_mean<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<[f32; 3]> {
    let mut sum = [0f64; 3];
    let mut n = 0u64;
    for img in images {
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
            }
        }
        n += (img.width * img.height) as u64;
    }
    if n == 0 {
        return Err(Error::Empty("channel mean of no pixels".into()));
    }
    Ok(sum.map(|s| (s / n as f64) as f32))
}

/// Scale applied after mean subtraction when feeding images to the network.
pub const PIXEL_SCALE: f32 = 1.0 / 64.0;

/// Planar `(pixel − mean)·PIXEL_SCALE` values of an image.
pub fn normalize_image(img: &RgbImage, mean: [f32; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.data.len());
    for c in 0..3 {
        out.extend(img.data.chunks_exact(3).map(|px| (px[c] as f32 - mean[c]) * PIXEL_SCALE));
    }
    out
}

/// Stacks normalized images into an `N×3×H×W` tensor.
pub fn images_to_tensor(images: &[&RgbImage], mean: [f32; 3]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("no images to batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::Format("images in a batch differ in size".into()));
        }
        data.extend(normalize_image(img, mean));
    }
    Tensor::from_vec(vec![images.len(), 3, h, w], data)
}
