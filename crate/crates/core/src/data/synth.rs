//! Synthetic paired fundus/OCT data with planted class patterns.
//!
//! Fundus: normal eyes carry a bright disk; dry and wet eyes carry the same
//! ring. OCT: wet eyes carry a bright horizontal bar; normal and dry eyes carry
//! the same stripe patch. Each modality alone therefore confuses two classes,
//! while the pair identifies all three.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{save_image, Image};
use super::manifest::{write_manifest, BBox, Class, EyeRecord, ImageRef, Split};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_NAME: &str = "manifest.csv";
const BACKGROUND: f64 = 0.5;
const PATTERN_GAIN: f32 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Eyes per class over all splits.
    pub eyes_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Inclusive range of OCT images for eyes that have OCT.
    pub oct_per_eye: (usize, usize),
    /// Fraction of eyes with no OCT image at all.
    pub oct_missing_frac: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            eyes_per_class: 50,
            val_per_class: 10,
            test_per_class: 10,
            image_size: 64,
            oct_per_eye: (1, 2),
            oct_missing_frac: 0.3,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.val_per_class + self.test_per_class > self.eyes_per_class {
            return Err(Error::config(format!(
                "{} val + {} test eyes exceed {} eyes per class",
                self.val_per_class, self.test_per_class, self.eyes_per_class
            )));
        }
        if self.image_size < 32 {
            return Err(Error::config(format!(
                "image size {} is below 32",
                self.image_size
            )));
        }
        let (lo, hi) = self.oct_per_eye;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!("bad OCT-per-eye range {lo}..={hi}")));
        }
        if !(0.0..=1.0).contains(&self.oct_missing_frac) {
            return Err(Error::config(format!(
                "OCT missing fraction {} outside [0, 1]",
                self.oct_missing_frac
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "bad noise sigma {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.test_per_class {
            Split::Test
        } else if index < self.test_per_class + self.val_per_class {
            Split::Val
        } else {
            Split::Train
        }
    }
}

fn noise_image<R: Rng>(channels: usize, size: usize, sigma: f64, rng: &mut R) -> Image {
    let data = if sigma > 0.0 {
        let normal = Normal::new(BACKGROUND, sigma).expect("validated sigma");
        (0..channels * size * size)
            .map(|_| normal.sample(rng) as f32)
            .collect()
    } else {
        vec![BACKGROUND as f32; channels * size * size]
    };
    Image::new(channels, size, size, data).expect("non-empty geometry")
}

fn add_where(img: &mut Image, inside: impl Fn(usize, usize) -> bool) {
    let (h, w) = (img.height, img.width);
    for c in 0..img.channels {
        let plane = img.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                if inside(x, y) {
                    plane[y * w + x] += PATTERN_GAIN;
                }
            }
        }
    }
}

fn clamp(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Renders one fundus image: a filled disk for normal eyes, a ring otherwise.
pub fn fundus_image<R: Rng>(class: Class, size: usize, sigma: f64, rng: &mut R) -> (Image, BBox) {
    let mut img = noise_image(3, size, sigma, rng);
    let r = size / 8;
    let cx = rng.random_range(r..size - r);
    let cy = rng.random_range(r..size - r);
    let (rf, thick) = (r as f64, (size as f64 / 32.0).max(1.0));
    let dist = |x: usize, y: usize| {
        ((x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2)).sqrt()
    };
    if class == Class::Normal {
        add_where(&mut img, |x, y| dist(x, y) <= rf);
    } else {
        add_where(&mut img, |x, y| {
            let d = dist(x, y);
            d <= rf && d > rf - thick
        });
    }
    clamp(&mut img);
    let bbox = BBox {
        x0: cx - r,
        y0: cy - r,
        x1: (cx + r).min(size - 1),
        y1: (cy + r).min(size - 1),
    };
    (img, bbox)
}

/// Renders one OCT B-scan: a full-width bar for wet eyes, a stripe patch otherwise.
pub fn oct_image<R: Rng>(class: Class, size: usize, sigma: f64, rng: &mut R) -> (Image, BBox) {
    let mut img = noise_image(1, size, sigma, rng);
    let bbox = if class == Class::WetAmd {
        let bar = size / 16;
        let y0 = rng.random_range(0..=size - bar);
        add_where(&mut img, |_, y| (y0..y0 + bar).contains(&y));
        BBox {
            x0: 0,
            y0,
            x1: size - 1,
            y1: y0 + bar - 1,
        }
    } else {
        let patch = size / 4;
        let x0 = rng.random_range(0..=size - patch);
        let y0 = rng.random_range(0..=size - patch);
        add_where(&mut img, |x, y| {
            (x0..x0 + patch).contains(&x)
                && (y0..y0 + patch).contains(&y)
                && ((x - x0) / 2) % 2 == 0
        });
        BBox {
            x0,
            y0,
            x1: x0 + patch - 1,
            y1: y0 + patch - 1,
        }
    };
    clamp(&mut img);
    (img, bbox)
}

/// Writes images and `manifest.csv` under `out_dir`, returning the records.
///
/// Output bytes depend only on the configuration.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<EyeRecord>> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::new();
    for class in Class::ALL {
        for i in 0..cfg.eyes_per_class {
            let eye_id = format!("{}-{i:04}", class.as_str());
            let eye_index = (class.index() * cfg.eyes_per_class + i) as u64;
            let mut r = rng::stream(cfg.seed, "synth.eye", eye_index);
            let n_oct = if r.random_bool(cfg.oct_missing_frac) {
                0
            } else {
                r.random_range(cfg.oct_per_eye.0..=cfg.oct_per_eye.1)
            };
            let (fundus, fbox) = fundus_image(class, cfg.image_size, cfg.noise_sigma, &mut r);
            let fpath = format!("images/{eye_id}.fundus.ppm");
            save_image(&out_dir.join(&fpath), &fundus)?;
            let mut octs = Vec::new();
            for k in 0..n_oct {
                let (oct, obox) = oct_image(class, cfg.image_size, cfg.noise_sigma, &mut r);
                let opath = format!("images/{eye_id}.oct{k}.pgm");
                save_image(&out_dir.join(&opath), &oct)?;
                octs.push(ImageRef {
                    path: opath,
                    bbox: Some(obox),
                });
            }
            records.push(EyeRecord {
                eye_id,
                class,
                split: cfg.split_of(i),
                fundus: vec![ImageRef {
                    path: fpath,
                    bbox: Some(fbox),
                }],
                oct: octs,
            });
        }
    }
    write_manifest(&records, &out_dir.join(MANIFEST_NAME))?;
    Ok(records)
}
