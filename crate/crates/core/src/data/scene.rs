//! Procedural scenes of flat-colored shapes over a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelMap, RgbImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Background plus one class per entry of `kinds`.
    pub num_classes: usize,
    /// Shape drawn for class `i + 1`.
    pub kinds: Vec<ShapeKind>,
    /// Shape half-extent as a fraction of the smaller image side.
    pub scale_range: (f64, f64),
    /// Inclusive bounds on the number of shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Per-pixel noise half-width as a fraction of the 0..255 range.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            num_classes: 4,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle],
            scale_range: (0.1, 0.35),
            shapes_per_image: (1, 3),
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("scene_spec", "zero classes"));
        }
        if self.num_classes > 255 {
            return Err(Error::invalid("scene_spec", "class ids must fit below the ignore label"));
        }
        if self.kinds.len() + 1 < self.num_classes {
            return Err(Error::invalid(
                "scene_spec",
                format!("{} shape kinds for {} foreground classes", self.kinds.len(), self.num_classes - 1),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene_spec", "empty image"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("scene_spec", format!("scale range {:?}", self.scale_range)));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(Error::invalid("scene_spec", "shape count bounds reversed"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("scene_spec", format!("noise {}", self.noise)));
        }
        Ok(())
    }
}

/// One shape in pixel coordinates. `size` is the half-extent: half the
/// side for rectangles (scaled by `aspect` vertically), the radius for disks
/// and the circumradius for triangles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u8,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub aspect: f64,
    pub angle: f64,
    pub color: [u8; 3],
}

impl Shape {
    /// Whether the point lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.size && dy.abs() <= self.size * self.aspect,
            ShapeKind::Disk => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Triangle => {
                let v: [(f64, f64); 3] = std::array::from_fn(|i| {
                    let a = self.angle + i as f64 * std::f64::consts::TAU / 3.0;
                    (self.size * a.cos(), self.size * a.sin())
                });
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
                let s = [side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0])];
                s.iter().all(|&d| d >= 0.0) || s.iter().all(|&d| d <= 0.0)
            }
        }
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [90, 90, 90],
    [210, 70, 60],
    [60, 170, 80],
    [70, 100, 215],
    [220, 200, 60],
    [170, 80, 200],
    [60, 200, 200],
    [230, 140, 40],
];

/// Base color of a class. Classes past the palette get a hashed color.
pub fn class_color(class: u8) -> [u8; 3] {
    match PALETTE.get(class as usize) {
        Some(&c) => c,
        None => {
            let h = (class as u32).wrapping_mul(2_654_435_761);
            [(h >> 8) as u8, (h >> 16) as u8, (h >> 24) as u8]
        }
    }
}

const COLOR_JITTER: i32 = 20;

/// Labels of a scene: each pixel takes the class of the last shape covering
/// its center, or 0.
pub fn render_labels(width: usize, height: usize, shapes: &[Shape]) -> LabelMap {
    let mut data = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(s) = shapes.iter().rev().find(|s| s.contains(px, py)) {
                data[y * width + x] = s.class;
            }
        }
    }
    LabelMap { width, height, data }
}

/// Paints shapes back to front over `background`, adding uniform noise of
/// half-width `noise · 255` to every channel.
pub fn render(
    width: usize,
    height: usize,
    background: [u8; 3],
    shapes: &[Shape],
    noise: f64,
    rng: &mut impl Rng,
) -> (RgbImage, LabelMap) {
    let labels = render_labels(width, height, shapes);
    let amp = noise * 255.0;
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let base = shapes
                .iter()
                .rev()
                .find(|s| s.contains(px, py))
                .map_or(background, |s| s.color);
            for c in base {
                let n = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
                data.push((c as f64 + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    (RgbImage { width, height, data }, labels)
}

fn jitter(base: [u8; 3], rng: &mut impl Rng) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0, 255) as u8)
}

/// The shapes of scene `index`, back to front.
pub fn scene_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    let count = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    if spec.num_classes < 2 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let class = rng.random_range(1..spec.num_classes) as u8;
            let size = rng.random_range(spec.scale_range.0..=spec.scale_range.1) * side;
            Shape {
                kind: spec.kinds[class as usize - 1],
                class,
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                size,
                aspect: rng.random_range(0.6..=1.6),
                angle: rng.random_range(0.0..std::f64::consts::TAU),
                color: jitter(class_color(class), rng),
            }
        })
        .collect()
}

/// Scene `index` of `spec`. A pure function of its arguments.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(RgbImage, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let shapes = scene_shapes(spec, &mut rng);
    let background = jitter(class_color(0), &mut rng);
    Ok(render(spec.width, spec.height, background, &shapes, spec.noise, &mut rng))
}

/// Indexed source of labelled images.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> Result<(RgbImage, LabelMap)>;
}

/// A contiguous range of scene indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub start: u64,
    pub len: usize,
}

impl SyntheticDataset {
    pub fn new(spec: SceneSpec, start: u64, len: usize) -> Result<Self> {
        spec.validate()?;
        Ok(SyntheticDataset { spec, start, len })
    }

    /// Training and held-out splits over adjacent index ranges.
    pub fn splits(spec: &SceneSpec, train: usize, val: usize) -> Result<(Self, Self)> {
        Ok((
            Self::new(spec.clone(), 0, train)?,
            Self::new(spec.clone(), train as u64, val)?,
        ))
    }
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.len
    }

    fn get(&self, index: usize) -> Result<(RgbImage, LabelMap)> {
        if index >= self.len {
            return Err(Error::invalid("dataset", format!("index {index} of {}", self.len)));
        }
        generate_scene(&self.spec, self.start + index as u64)
    }
}

impl<D: Dataset + ?Sized> Dataset for &D {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn get(&self, index: usize) -> Result<(RgbImage, LabelMap)> {
        (**self).get(index)
    }
}

/// Pairs held in memory, e.g. loaded from disk.
impl Dataset for Vec<(RgbImage, LabelMap)> {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn get(&self, index: usize) -> Result<(RgbImage, LabelMap)> {
        self.as_slice()
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid("dataset", format!("index {index} of {}", <[_]>::len(self))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shapes_is_background() {
        let spec = SceneSpec {
            shapes_per_image: (0, 0),
            ..SceneSpec::default()
        };
        let (_, labels) = generate_scene(&spec, 3).unwrap();
        assert!(labels.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn deterministic_per_index() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 5).unwrap());
        assert_ne!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 6).unwrap());
    }

    #[test]
    fn covering_disk_labels_everything() {
        let (w, h) = (20, 12);
        let diag = ((w * w + h * h) as f64).sqrt();
        let disk = Shape {
            kind: ShapeKind::Disk,
            class: 2,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            size: diag + 1.0,
            aspect: 1.0,
            angle: 0.0,
            color: [1, 2, 3],
        };
        let labels = render_labels(w, h, &[disk]);
        assert!(labels.data.iter().all(|&l| l == 2));
    }

    #[test]
    fn later_shapes_occlude() {
        let big = Shape {
            kind: ShapeKind::Rectangle,
            class: 1,
            cx: 8.0,
            cy: 8.0,
            size: 8.0,
            aspect: 1.0,
            angle: 0.0,
            color: [0; 3],
        };
        let small = Shape {
            kind: ShapeKind::Disk,
            class: 3,
            size: 2.0,
            ..big
        };
        let labels = render_labels(16, 16, &[big, small]);
        assert_eq!(labels.data[8 * 16 + 8], 3);
        assert_eq!(labels.data[0], 1);
        let labels = render_labels(16, 16, &[small, big]);
        assert!(labels.data.iter().all(|&l| l == 1));
    }

    #[test]
    fn triangle_contains_center_not_far_corner() {
        let t = Shape {
            kind: ShapeKind::Triangle,
            class: 1,
            cx: 0.0,
            cy: 0.0,
            size: 1.0,
            aspect: 1.0,
            angle: 0.3,
            color: [0; 3],
        };
        assert!(t.contains(0.0, 0.0));
        assert!(!t.contains(0.9, 0.9));
        assert!(!t.contains(-0.9, -0.9));
    }

    #[test]
    fn zero_classes_rejected() {
        let spec = SceneSpec {
            num_classes: 0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&spec, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let (train, val) = SyntheticDataset::splits(&SceneSpec::default(), 10, 4).unwrap();
        assert_eq!(train.start + train.len as u64, val.start);
        assert_eq!(val.get(0).unwrap(), generate_scene(&SceneSpec::default(), 10).unwrap());
        assert!(val.get(4).is_err());
    }
}
