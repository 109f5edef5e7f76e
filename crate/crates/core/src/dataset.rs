//! Labelled image sets and their on-disk layout: a directory holding
//! `manifest.json` plus one PNG per image.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Channel-major pixels in `[0, 1]`, `channels × size × size`.
    pub image: Vec<f64>,
    pub label: usize,
    pub family: Option<usize>,
    /// Part landmarks `(x, y)` in pixel-index coordinates.
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    file: String,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<usize>,
    #[serde(default)]
    landmarks: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_size: usize,
    channels: usize,
    #[serde(default)]
    class_names: Vec<String>,
    items: Vec<ManifestItem>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn families(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.family).collect()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Stacks the selected images into `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            let s = self.samples.get(i).ok_or(Error::OutOfRange {
                index: i,
                limit: self.len(),
            })?;
            data.extend_from_slice(&s.image);
        }
        Tensor::new(
            &[indices.len(), self.channels, self.image_size, self.image_size],
            data,
        )
    }

    pub fn all_images(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        let side = self.image_size as u32;
        let mut items = Vec::with_capacity(self.len());
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("images/{i:05}.png");
            let bytes: Vec<u8> = s.image.iter().map(|&v| to_u8(v)).collect();
            match self.channels {
                1 => GrayImage::from_raw(side, side, bytes)
                    .expect("buffer size matches")
                    .save(dir.join(&file))?,
                3 => {
                    let plane = self.image_size * self.image_size;
                    let interleaved = (0..plane)
                        .flat_map(|p| [bytes[p], bytes[plane + p], bytes[2 * plane + p]])
                        .collect();
                    RgbImage::from_raw(side, side, interleaved)
                        .expect("buffer size matches")
                        .save(dir.join(&file))?
                }
                c => return Err(Error::Data(format!("cannot write {c}-channel images"))),
            }
            items.push(ManifestItem {
                file,
                label: s.label,
                family: s.family,
                landmarks: s.landmarks.clone(),
            });
        }
        let manifest = Manifest {
            image_size: self.image_size,
            channels: self.channels,
            class_names: self.class_names.clone(),
            items,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.channels != 1 && manifest.channels != 3 {
            return Err(Error::Data(format!(
                "unsupported channel count {}",
                manifest.channels
            )));
        }
        let side = manifest.image_size as u32;
        let mut samples = Vec::with_capacity(manifest.items.len());
        for item in manifest.items {
            let img = ImageReader::open(dir.join(&item.file))?.decode()?;
            let img = if img.width() != side || img.height() != side {
                img.resize_exact(side, side, image::imageops::FilterType::Triangle)
            } else {
                img
            };
            let image = if manifest.channels == 1 {
                img.to_luma8().into_raw().into_iter().map(from_u8).collect()
            } else {
                let rgb = img.to_rgb8().into_raw();
                (0..3)
                    .flat_map(|c| {
                        rgb.iter()
                            .skip(c)
                            .step_by(3)
                            .map(|&v| from_u8(v))
                            .collect::<Vec<_>>()
                    })
                    .collect()
            };
            samples.push(Sample {
                image,
                label: item.label,
                family: item.family,
                landmarks: item.landmarks,
            });
        }
        Ok(Self {
            image_size: manifest.image_size,
            channels: manifest.channels,
            class_names: manifest.class_names,
            samples,
        })
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}
