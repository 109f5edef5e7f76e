//! Deterministic localized-glyph images and training-time augmentation.
//!
//! Every image shares the same kind of class-independent noisy background;
//! class identity lives only in small binary glyphs stamped at jittered
//! part locations. Part 0 carries a glyph shared by all classes of a family,
//! the remaining parts carry class-specific glyphs, so a model has to look
//! at the right place to tell sibling classes apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{from_u8, Dataset, Sample};
use crate::error::{Error, Result};

/// Part anchors as fractions of the image side; with a 4×4 patch grid these
/// are patch centers, so a glyph with small jitter stays inside one patch.
const ANCHORS: [[f64; 2]; 4] = [[0.375, 0.375], [0.625, 0.625], [0.625, 0.375], [0.375, 0.625]];

const GLYPH_ON: u8 = 250;
const GLYPH_OFF: u8 = 10;
const BACKGROUND: u8 = 110;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub test_images_per_class: usize,
    pub image_size: usize,
    pub glyph_size: usize,
    pub num_parts: usize,
    /// Maximum landmark displacement from its anchor, in pixels.
    pub jitter: usize,
    /// Half-width of the uniform background noise, in 8-bit levels.
    pub noise: u8,
    /// Classes per family; part 0's glyph is shared within a family.
    pub classes_per_family: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            images_per_class: 64,
            test_images_per_class: 16,
            image_size: 32,
            glyph_size: 6,
            num_parts: 2,
            jitter: 1,
            noise: 40,
            classes_per_family: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_parts == 0 {
            return Err(Error::config("synthetic", "need at least one class and one part"));
        }
        if self.num_parts > ANCHORS.len() {
            return Err(Error::config(
                "synthetic.num_parts",
                format!("at most {} parts are supported", ANCHORS.len()),
            ));
        }
        if self.glyph_size == 0 || self.glyph_size + 2 * self.jitter > self.image_size / 2 {
            return Err(Error::config(
                "synthetic.glyph_size",
                format!(
                    "glyph {} with jitter {} does not fit a {}px image",
                    self.glyph_size, self.jitter, self.image_size
                ),
            ));
        }
        if self.classes_per_family == 0 {
            return Err(Error::config("synthetic.classes_per_family", "must be positive"));
        }
        Ok(())
    }

    pub fn family_of(&self, class: usize) -> usize {
        class / self.classes_per_family
    }

    pub fn num_families(&self) -> usize {
        self.num_classes.div_ceil(self.classes_per_family)
    }

    /// Glyph bitmaps; index `[part][id]` where `id` is the family for part 0
    /// and the class otherwise.
    pub fn glyphs(&self, seed: u64) -> Vec<Vec<Vec<bool>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let cells = self.glyph_size * self.glyph_size;
        (0..self.num_parts)
            .map(|part| {
                let count = if part == 0 {
                    self.num_families()
                } else {
                    self.num_classes
                };
                let mut set: Vec<Vec<bool>> = Vec::with_capacity(count);
                while set.len() < count {
                    let g: Vec<bool> = (0..cells).map(|_| rng.random_bool(0.5)).collect();
                    let on = g.iter().filter(|&&b| b).count();
                    // reject near-blank glyphs and exact repeats
                    if on >= cells / 4 && on <= 3 * cells / 4 && !set.contains(&g) {
                        set.push(g);
                    }
                }
                set
            })
            .collect()
    }

    fn glyph_for<'a>(&self, glyphs: &'a [Vec<Vec<bool>>], part: usize, class: usize) -> &'a [bool] {
        let id = if part == 0 { self.family_of(class) } else { class };
        &glyphs[part][id]
    }

    /// Per-image layout drawn independently of the class: top-left glyph corners.
    fn layout(&self, rng: &mut ChaCha8Rng) -> Vec<[usize; 2]> {
        let size = self.image_size as f64;
        let half = self.glyph_size as f64 / 2.0;
        (0..self.num_parts)
            .map(|p| {
                let [ax, ay] = ANCHORS[p];
                let j = self.jitter as i64;
                let dx = rng.random_range(-j..=j);
                let dy = rng.random_range(-j..=j);
                let hi = (self.image_size - self.glyph_size) as i64;
                let x = ((ax * size - half).round() as i64 + dx).clamp(0, hi) as usize;
                let y = ((ay * size - half).round() as i64 + dy).clamp(0, hi) as usize;
                [x, y]
            })
            .collect()
    }

    /// Renders image `index` of `split` as class `class`. The background and
    /// part layout depend only on `(seed, split, index)`.
    pub fn render(
        &self,
        glyphs: &[Vec<Vec<bool>>],
        seed: u64,
        split: Split,
        index: usize,
        class: usize,
    ) -> (Vec<u8>, Vec<[f64; 2]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tag = match split {
            Split::Train => 0u64,
            Split::Test => 1u64 << 40,
        };
        rng.set_stream(tag | index as u64);
        let size = self.image_size;
        let mut pixels: Vec<u8> = (0..size * size)
            .map(|_| {
                let n = self.noise as i32;
                (BACKGROUND as i32 + rng.random_range(-n..=n)).clamp(0, 255) as u8
            })
            .collect();
        let layout = self.layout(&mut rng);
        let g = self.glyph_size;
        let mut landmarks = Vec::with_capacity(self.num_parts);
        for (part, &[x0, y0]) in layout.iter().enumerate() {
            let glyph = self.glyph_for(glyphs, part, class);
            for gy in 0..g {
                for gx in 0..g {
                    pixels[(y0 + gy) * size + x0 + gx] =
                        if glyph[gy * g + gx] { GLYPH_ON } else { GLYPH_OFF };
                }
            }
            let c = (g as f64 - 1.0) / 2.0;
            landmarks.push([x0 as f64 + c, y0 as f64 + c]);
        }
        (pixels, landmarks)
    }

    /// Glyph bounding boxes `(x0, y0, side)` of image `index`.
    pub fn glyph_boxes(&self, seed: u64, split: Split, index: usize) -> Vec<(usize, usize, usize)> {
        let glyphs = self.glyphs(seed);
        let (_, landmarks) = self.render(&glyphs, seed, split, index, 0);
        let c = (self.glyph_size as f64 - 1.0) / 2.0;
        landmarks
            .iter()
            .map(|[x, y]| ((x - c) as usize, (y - c) as usize, self.glyph_size))
            .collect()
    }

    pub fn generate(&self, seed: u64, split: Split) -> Result<Dataset> {
        self.validate()?;
        let glyphs = self.glyphs(seed);
        let per_class = match split {
            Split::Train => self.images_per_class,
            Split::Test => self.test_images_per_class,
        };
        let samples = (0..per_class * self.num_classes)
            .map(|i| {
                let class = i % self.num_classes;
                let (pixels, landmarks) = self.render(&glyphs, seed, split, i, class);
                Sample {
                    image: pixels.into_iter().map(from_u8).collect(),
                    label: class,
                    family: Some(self.family_of(class)),
                    landmarks,
                }
            })
            .collect();
        Ok(Dataset {
            image_size: self.image_size,
            channels: 1,
            class_names: (0..self.num_classes)
                .map(|c| format!("family{}_species{c}", self.family_of(c)))
                .collect(),
            samples,
        })
    }
}

/// One draw of the augmentation: horizontal flip, then a square crop of side
/// `scale · size` at `(x0, y0)` resampled back to `size`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub crop_side: f64,
    pub x0: f64,
    pub y0: f64,
}

/// Crop side range as a fraction of the image side.
pub const CROP_SCALE: (f64, f64) = (0.8, 1.0);

impl AugmentParams {
    pub fn identity(size: usize) -> Self {
        Self {
            flip: false,
            crop_side: size as f64,
            x0: 0.0,
            y0: 0.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, size: usize) -> Self {
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
        let side = scale * size as f64;
        let slack = size as f64 - side;
        Self {
            flip,
            crop_side: side,
            x0: rng.random_range(0.0..=slack),
            y0: rng.random_range(0.0..=slack),
        }
    }

    /// Maps a pixel-index landmark through the transform.
    pub fn map_point(&self, [x, y]: [f64; 2], size: usize) -> [f64; 2] {
        let s = size as f64;
        let x = if self.flip { s - 1.0 - x } else { x };
        let ratio = s / self.crop_side;
        [
            (x + 0.5 - self.x0) * ratio - 0.5,
            (y + 0.5 - self.y0) * ratio - 0.5,
        ]
    }
}

/// Applies `params` to a channel-major image with bilinear resampling.
pub fn augment_with(
    image: &[f64],
    landmarks: &[[f64; 2]],
    channels: usize,
    size: usize,
    params: &AugmentParams,
) -> (Vec<f64>, Vec<[f64; 2]>) {
    let plane = size * size;
    let flipped: Vec<f64> = if params.flip {
        (0..channels * plane)
            .map(|i| {
                let (c, r) = (i / plane, i % plane);
                let (y, x) = (r / size, r % size);
                image[c * plane + y * size + (size - 1 - x)]
            })
            .collect()
    } else {
        image.to_vec()
    };
    let step = params.crop_side / size as f64;
    let sample = |c: usize, sx: f64, sy: f64| -> f64 {
        let max = (size - 1) as f64;
        let (sx, sy) = (sx.clamp(0.0, max), sy.clamp(0.0, max));
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let at = |x: usize, y: usize| flipped[c * plane + y * size + x];
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
            + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
    };
    let mut out = Vec::with_capacity(channels * plane);
    for c in 0..channels {
        for y in 0..size {
            let sy = params.y0 + (y as f64 + 0.5) * step - 0.5;
            for x in 0..size {
                let sx = params.x0 + (x as f64 + 0.5) * step - 0.5;
                out.push(sample(c, sx, sy));
            }
        }
    }
    let marks = landmarks.iter().map(|&p| params.map_point(p, size)).collect();
    (out, marks)
}

/// Random flip and resized crop drawn from `seed`.
pub fn augment(
    image: &[f64],
    landmarks: &[[f64; 2]],
    channels: usize,
    size: usize,
    seed: u64,
) -> (Vec<f64>, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(&mut rng, size);
    augment_with(image, landmarks, channels, size, &params)
}
