//! Procedurally generated source/target domain pair.

mod io;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::detector::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub use io::{read_dataset, read_ppm, write_dataset, write_pgm, write_ppm};

/// Base hues (degrees) of the per-class colour families.
pub const FAMILY_HUES: [f64; 3] = [0.0, 120.0, 240.0];

/// Shape drawn for each class: disk, square, triangle, cycling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    pub fn of_class(class: usize) -> Shape {
        [Shape::Disk, Shape::Square, Shape::Triangle][class % 3]
    }

    /// Fraction of the bounding box the shape covers.
    pub fn fill_ratio(self) -> f64 {
        match self {
            Shape::Disk => std::f64::consts::FRAC_PI_4,
            Shape::Square => 1.0,
            Shape::Triangle => 0.5,
        }
    }
}

pub fn family_hue(class: usize, classes: usize) -> f64 {
    if classes <= FAMILY_HUES.len() {
        FAMILY_HUES[class]
    } else {
        360.0 * class as f64 / classes as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Random hue offset of an object around its family hue, degrees.
    pub hue_jitter: f64,
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    /// Per-pixel noise of objects and background.
    pub grain: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            classes: 3,
            min_objects: 1,
            max_objects: 4,
            min_size: 12.0,
            max_size: 28.0,
            hue_jitter: 15.0,
            texture: 0.06,
            grain: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.classes == 0 {
            return Err(Error::invalid("scene needs a size and at least one class"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("scene.min_objects exceeds scene.max_objects"));
        }
        if !(self.min_size >= 5.0 && self.min_size <= self.max_size) {
            return Err(Error::invalid(
                "scene sizes need 5 <= min_size <= max_size",
            ));
        }
        if self.max_size > self.width.min(self.height) as f64 {
            return Err(Error::invalid("scene.max_size exceeds the image"));
        }
        Ok(())
    }
}

/// Pixelwise covariate shift applied to target images.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftConfig {
    pub fog_intensity: f64,
    pub fog_color: [f64; 3],
    pub noise_sigma: f64,
    /// Rotation about the grey axis, degrees.
    pub hue_rotation: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            fog_intensity: 0.5,
            fog_color: [0.75, 0.75, 0.75],
            noise_sigma: 0.03,
            hue_rotation: 20.0,
        }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        ShiftConfig {
            fog_intensity: 0.0,
            fog_color: [1.0; 3],
            noise_sigma: 0.0,
            hue_rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fog_intensity)
            || self.fog_color.iter().any(|c| !(0.0..=1.0).contains(c))
            || !(self.noise_sigma >= 0.0)
            || !self.hue_rotation.is_finite()
        {
            return Err(Error::invalid(
                "shift needs fog in [0, 1], colour in [0, 1] and noise >= 0",
            ));
        }
        Ok(())
    }
}

/// One image with its objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue (degrees) and saturation of an RGB triple.
pub fn hue_saturation(rgb: [f64; 3]) -> (f64, f64) {
    let max = rgb.iter().copied().fold(f64::MIN, f64::max);
    let min = rgb.iter().copied().fold(f64::MAX, f64::min);
    let delta = max - min;
    if max <= 0.0 || delta <= 0.0 {
        return (0.0, 0.0);
    }
    let [r, g, b] = rgb;
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h, delta / max)
}

/// Whether a pixel belongs to the colour family of `class`.
pub fn in_family(rgb: [f64; 3], class: usize, classes: usize, tolerance: f64) -> bool {
    let (h, s) = hue_saturation(rgb);
    let d = (h - family_hue(class, classes)).rem_euclid(360.0);
    s >= 0.3 && d.min(360.0 - d) <= tolerance
}

fn covers(shape: Shape, (x0, y0, w, h): (f64, f64, f64, f64), px: f64, py: f64) -> bool {
    match shape {
        Shape::Disk => {
            let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
            let (dx, dy) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        Shape::Square => px >= x0 && px <= x0 + w && py >= y0 && py <= y0 + h,
        Shape::Triangle => {
            // apex at top centre, base along the bottom edge
            if py < y0 || py > y0 + h {
                return false;
            }
            let half = (py - y0) / h * w / 2.0;
            let cx = x0 + w / 2.0;
            px >= cx - half && px <= cx + half
        }
    }
}

/// Draws a scene: a textured grey background with non-overlapping coloured
/// shapes, one shape and colour family per class, and tight pixel boxes.
pub fn generate_scene(rng: &mut impl Rng, config: &SceneConfig, id: impl Into<String>) -> Result<Sample> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let mut pixels = vec![0.0; 3 * w * h];
    let base = rng.random_range(0.35..0.65);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.05..0.3);
            (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..std::f64::consts::TAU), config.texture)
        })
        .collect();
    let grain = Normal::new(0.0, config.grain.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                pixels[c * w * h + y * w + x] = base + t + tint[c] + grain.sample(rng);
            }
        }
    }

    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..config.classes);
        let shape = Shape::of_class(class);
        let mut placed = None;
        for _ in 0..100 {
            let bw = rng.random_range(config.min_size..=config.max_size);
            let bh = match shape {
                Shape::Disk => bw,
                _ => (bw * rng.random_range(0.8..1.25)).clamp(config.min_size, config.max_size),
            };
            let x0 = rng.random_range(0.0..=(w as f64 - bw));
            let y0 = rng.random_range(0.0..=(h as f64 - bh));
            let Some(tight) = tight_box(shape, (x0, y0, bw, bh), w, h) else {
                continue;
            };
            let padded = BBox {
                x_min: tight.x_min - 1.0,
                y_min: tight.y_min - 1.0,
                x_max: tight.x_max + 1.0,
                y_max: tight.y_max + 1.0,
            };
            if annotations.iter().all(|a| crate::detector::iou(&a.bbox, &padded) == 0.0) && tight.area() >= 16.0 {
                placed = Some(((x0, y0, bw, bh), tight));
                break;
            }
        }
        let Some((geom, tight)) = placed else {
            log::debug!("scene placement exhausted after {} objects", annotations.len());
            break;
        };
        let hue = family_hue(class, config.classes) + rng.random_range(-config.hue_jitter..=config.hue_jitter);
        let rgb = hsv_to_rgb(hue, rng.random_range(0.6..0.9), rng.random_range(0.65..0.95));
        for y in tight.y_min as usize..tight.y_max as usize {
            for x in tight.x_min as usize..tight.x_max as usize {
                if covers(shape, geom, x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, &v) in rgb.iter().enumerate() {
                        pixels[c * w * h + y * w + x] = v + grain.sample(rng);
                    }
                }
            }
        }
        annotations.push(Annotation { bbox: tight, category: class });
    }
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        id: id.into(),
        image: Tensor::new(&[3, h, w], pixels)?,
        annotations,
    })
}

/// Tight integer box of the pixels whose centres a shape covers.
fn tight_box(shape: Shape, geom: (f64, f64, f64, f64), w: usize, h: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let xs = geom.0.floor().max(0.0) as usize..((geom.0 + geom.2).ceil() as usize).min(w);
    let ys = geom.1.floor().max(0.0) as usize..((geom.1 + geom.3).ceil() as usize).min(h);
    for y in ys {
        for x in xs.clone() {
            if covers(shape, geom, x as f64 + 0.5, y as f64 + 0.5) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 < x1 && y0 < y1).then(|| BBox {
        x_min: x0 as f64,
        y_min: y0 as f64,
        x_max: x1 as f64,
        y_max: y1 as f64,
    })
}

/// Rotation matrix about the grey axis `(1, 1, 1)`.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [
        [c + a, a - b, a + b],
        [a + b, c + a, a - b],
        [a - b, a + b, c + a],
    ]
}

/// `(1 - fog) * hue_rotate(x) + fog * fog_color`, plus Gaussian noise,
/// clipped to `[0, 1]`. Boxes are untouched.
pub fn apply_shift(sample: &Sample, shift: &ShiftConfig, rng: &mut impl Rng) -> Result<Sample> {
    shift.validate()?;
    let &[3, h, w] = sample.image.shape() else {
        return Err(Error::shape("sample image must be [3, H, W]"));
    };
    let plane = h * w;
    let m = hue_matrix(shift.hue_rotation);
    let noise = Normal::new(0.0, shift.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let src = sample.image.data();
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        let px = [src[p], src[plane + p], src[2 * plane + p]];
        for c in 0..3 {
            let rotated = if shift.hue_rotation == 0.0 {
                px[c]
            } else {
                (m[c][0] * px[0] + m[c][1] * px[1] + m[c][2] * px[2]).clamp(0.0, 1.0)
            };
            out[c * plane + p] =
                (1.0 - shift.fog_intensity) * rotated + shift.fog_intensity * shift.fog_color[c];
        }
    }
    if shift.noise_sigma > 0.0 {
        for v in &mut out {
            *v += noise.sample(rng);
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        id: sample.id.clone(),
        image: Tensor::new(&[3, h, w], out)?,
        annotations: sample.annotations.clone(),
    })
}

/// Rounds every value to the nearest multiple of 1/255.
pub fn quantize(image: &Tensor) -> Tensor {
    let data = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Tensor::with_empty(image.shape(), data).expect("same shape")
}

/// Sizes of the four generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_train: 200,
            source_test: 100,
            target_train: 200,
            target_test: 100,
        }
    }
}

/// All generated splits; images are quantised to 8 bits.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source_train: Vec<Sample>,
    pub source_test: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_test: Vec<Sample>,
}

/// Split directories under a dataset root, in [`DomainPair`] field order.
pub const SPLITS: [&str; 4] = ["source/train", "source/test", "target/train", "target/test"];

pub fn generate_domains(
    scene: &SceneConfig,
    shift: &ShiftConfig,
    data: &DataConfig,
    seed: u64,
) -> Result<DomainPair> {
    let split = |n: usize, purpose: Purpose, prefix: &str, shift_purpose: Option<Purpose>| {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}_{i:04}");
                let mut r = rng::stream(seed, purpose, i as u64);
                let mut s = generate_scene(&mut r, scene, id)?;
                if let Some(sp) = shift_purpose {
                    s = apply_shift(&s, shift, &mut rng::stream(seed, sp, i as u64))?;
                }
                s.image = quantize(&s.image);
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(DomainPair {
        source_train: split(data.source_train, Purpose::SourceScene, "src", None)?,
        source_test: split(data.source_test, Purpose::SourceTestScene, "srctest", None)?,
        target_train: split(data.target_train, Purpose::TargetScene, "tgt", Some(Purpose::Shift))?,
        target_test: split(data.target_test, Purpose::TargetTestScene, "tgttest", Some(Purpose::TestShift))?,
    })
}

/// Target-domain training images whose annotations can only be reached
/// through [`UnlabeledDataset::labels`], which counts every access.
#[derive(Debug)]
pub struct UnlabeledDataset {
    samples: Vec<Sample>,
    label_reads: AtomicUsize,
}

impl UnlabeledDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        UnlabeledDataset {
            samples,
            label_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.samples[i].image
    }

    pub fn id(&self, i: usize) -> &str {
        &self.samples[i].id
    }

    pub fn images(&self) -> impl Iterator<Item = &Tensor> {
        self.samples.iter().map(|s| &s.image)
    }

    /// Ground truth, for evaluation only.
    pub fn labels(&self, i: usize) -> &[Annotation] {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.samples[i].annotations
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for hue in [0.0, 45.0, 120.0, 200.0, 300.0] {
            let (h, s) = hue_saturation(hsv_to_rgb(hue, 0.7, 0.8));
            assert!((h - hue).abs() < 1e-9 && (s - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn hue_matrix_keeps_grey_and_composes() {
        let m = hue_matrix(73.0);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let full = hue_matrix(120.0);
        // a 120 degree turn permutes the primaries
        assert!((full[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_fills_half_its_box() {
        let geom = (0.0, 0.0, 40.0, 40.0);
        let inside = (0..40 * 40)
            .filter(|i| covers(Shape::Triangle, geom, (i % 40) as f64 + 0.5, (i / 40) as f64 + 0.5))
            .count();
        assert!((inside as f64 / 1600.0 - 0.5).abs() < 0.03);
    }
}
