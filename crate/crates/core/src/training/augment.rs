//! Random scale, crop and horizontal flip applied jointly to an image and
//! its labels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_image, LabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::ops::loss::IGNORE_LABEL;
use crate::ops::resample::bilinear_resize;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            flip_prob: 0.5,
            scale_range: (0.5, 2.0),
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("augment", format!("scale range {:?}", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("augment", format!("flip probability {}", self.flip_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub params: AugmentParams,
    pub crop_h: usize,
    pub crop_w: usize,
    /// Per-channel mean subtracted before any geometry.
    pub mean: [f32; 3],
}

/// One random draw, shared by an image and its labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

fn scaled(extent: usize, scale: f64) -> usize {
    ((extent as f64 * scale).round() as usize).max(1)
}

/// Extents after scaling, before padding.
pub fn scaled_extents(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (scaled(h, scale), scaled(w, scale))
}

pub fn sample_draw(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut impl Rng) -> AugmentDraw {
    let (lo, hi) = cfg.params.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let (sh, sw) = scaled_extents(h, w, scale);
    let crop_y = rng.random_range(0..=sh.max(cfg.crop_h) - cfg.crop_h);
    let crop_x = rng.random_range(0..=sw.max(cfg.crop_w) - cfg.crop_w);
    let flip = rng.random_bool(cfg.params.flip_prob);
    AugmentDraw {
        scale,
        flip,
        crop_y,
        crop_x,
    }
}

/// The draw that leaves an image of the crop size untouched.
pub fn identity_draw() -> AugmentDraw {
    AugmentDraw {
        scale: 1.0,
        flip: false,
        crop_y: 0,
        crop_x: 0,
    }
}

fn nearest_resize(planes: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let src = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let ys: Vec<usize> = (0..oh).map(|y| src(y, oh, h)).collect();
    let xs: Vec<usize> = (0..ow).map(|x| src(x, ow, w)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for &y in &ys {
            out.extend(xs.iter().map(|&x| planes[(ch * h + y) * w + x]));
        }
    }
    out
}

/// Applies scale, pad-and-crop and flip to `c` planes of `h×w`. Regions of
/// the crop outside the scaled image take `fill`.
#[allow(clippy::too_many_arguments)]
pub fn transform_planes(
    planes: &[f32],
    c: usize,
    h: usize,
    w: usize,
    draw: &AugmentDraw,
    crop: (usize, usize),
    interp: Interp,
    fill: f32,
) -> Result<Vec<f32>> {
    if planes.len() != c * h * w || h == 0 || w == 0 {
        return Err(Error::shape("augment", format!("{} values for {c}×{h}×{w}", planes.len())));
    }
    let (sh, sw) = scaled_extents(h, w, draw.scale);
    let (ch, cw) = crop;
    if draw.crop_y + ch > sh.max(ch) || draw.crop_x + cw > sw.max(cw) {
        return Err(Error::invalid("augment", "crop window leaves the padded image"));
    }
    let resized = if (sh, sw) == (h, w) {
        planes.to_vec()
    } else {
        match interp {
            Interp::Nearest => nearest_resize(planes, c, h, w, sh, sw),
            Interp::Bilinear => {
                let t = Tensor::from_vec(vec![1, c, h, w], planes.to_vec())?;
                bilinear_resize(&t, sh, sw)?.into_data()
            }
        }
    };
    let mut out = vec![fill; c * ch * cw];
    for k in 0..c {
        for y in 0..ch {
            let sy = draw.crop_y + y;
            if sy >= sh {
                break;
            }
            for x in 0..cw {
                let sx = draw.crop_x + x;
                if sx >= sw {
                    break;
                }
                let dx = if draw.flip { cw - 1 - x } else { x };
                out[(k * ch + y) * cw + dx] = resized[(k * sh + sy) * sw + sx];
            }
        }
    }
    Ok(out)
}

/// Returns `3×crop_h×crop_w` normalized image planes and the matching labels.
/// Padding is the mean for the image (zero after subtraction) and the ignore
/// label for the labels.
pub fn apply_draw(
    img: &RgbImage,
    labels: &LabelMap,
    draw: &AugmentDraw,
    cfg: &AugmentConfig,
) -> Result<(Vec<f32>, Vec<u8>)> {
    if (img.width, img.height) != (labels.width, labels.height) {
        return Err(Error::shape("augment", "image and labels differ in extent"));
    }
    let (h, w) = (img.height, img.width);
    let crop = (cfg.crop_h, cfg.crop_w);
    let image = transform_planes(&normalize_image(img, cfg.mean), 3, h, w, draw, crop, Interp::Bilinear, 0.0)?;
    let lab: Vec<f32> = labels.data.iter().map(|&l| l as f32).collect();
    let lab = transform_planes(&lab, 1, h, w, draw, crop, Interp::Nearest, IGNORE_LABEL as f32)?;
    Ok((image, lab.into_iter().map(|v| v as u8).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(crop: usize) -> AugmentConfig {
        AugmentConfig {
            params: AugmentParams::default(),
            crop_h: crop,
            crop_w: crop,
            mean: [10.0, 20.0, 30.0],
        }
    }

    fn sample(n: usize) -> (RgbImage, LabelMap) {
        let data = (0..n * n * 3).map(|i| (i * 37 % 251) as u8).collect();
        let labels = (0..n * n).map(|i| (i % 4) as u8).collect();
        (RgbImage::new(n, n, data).unwrap(), LabelMap::new(n, n, labels).unwrap())
    }

    #[test]
    fn identity_draw_only_subtracts_mean() {
        let (img, lab) = sample(8);
        let c = cfg(8);
        let (x, y) = apply_draw(&img, &lab, &identity_draw(), &c).unwrap();
        assert_eq!(x, normalize_image(&img, c.mean));
        assert_eq!(y, lab.data);
    }

    #[test]
    fn double_flip_restores() {
        let planes: Vec<f32> = (0..2 * 3 * 5).map(|v| v as f32).collect();
        let flip = AugmentDraw {
            flip: true,
            ..identity_draw()
        };
        let once = transform_planes(&planes, 2, 3, 5, &flip, (3, 5), Interp::Bilinear, 0.0).unwrap();
        assert_ne!(once, planes);
        let twice = transform_planes(&once, 2, 3, 5, &flip, (3, 5), Interp::Bilinear, 0.0).unwrap();
        assert_eq!(twice, planes);
    }

    #[test]
    fn doubling_scale_extents() {
        assert_eq!(scaled_extents(32, 32, 2.0), (64, 64));
        let (img, lab) = sample(32);
        let draw = AugmentDraw {
            scale: 2.0,
            ..identity_draw()
        };
        let (_, y) = apply_draw(&img, &lab, &draw, &cfg(64)).unwrap();
        // Nearest upsampling by two repeats every label in a 2×2 block.
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(y[r * 64 + c], lab.data[(r / 2) * 32 + c / 2]);
            }
        }
    }

    #[test]
    fn small_scale_pads_with_ignore() {
        let (img, lab) = sample(16);
        let draw = AugmentDraw {
            scale: 0.5,
            ..identity_draw()
        };
        let (x, y) = apply_draw(&img, &lab, &draw, &cfg(16)).unwrap();
        assert_eq!(y[15 * 16 + 15], IGNORE_LABEL);
        assert_eq!(x[15 * 16 + 15], 0.0);
        assert_ne!(y[0], IGNORE_LABEL);
    }

    #[test]
    fn draws_stay_inside_padded_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(24);
        let (img, lab) = sample(32);
        for _ in 0..200 {
            let d = sample_draw(&c, 32, 32, &mut rng);
            assert!((0.5..=2.0).contains(&d.scale));
            apply_draw(&img, &lab, &d, &c).unwrap();
        }
    }
}
