//! In-memory dataset of preprocessed images and batch assembly.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use super::augment::augment;
use super::image::{load_image, Image};
use super::manifest::{load_manifest, Class, EyeRecord, ImageRef, Split};
use super::pairing::{strict_pairs, TrainingPair};
use super::preprocess::{normalize, preprocess_fundus, preprocess_oct};
use crate::error::{Error, Result};
use crate::net::Modality;
use crate::rng;
use crate::tensor::{Real, Tensor};

/// One model input: a fundus image, an OCT image, or a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub eye_id: String,
    pub class: Class,
    pub fundus: Option<ImageRef>,
    pub oct: Option<ImageRef>,
}

impl From<&TrainingPair> for Sample {
    fn from(p: &TrainingPair) -> Self {
        Sample {
            eye_id: p.fundus_eye.clone(),
            class: p.class,
            fundus: Some(p.fundus.clone()),
            oct: Some(p.oct.clone()),
        }
    }
}

/// Evaluation instances of a split: strict pairs for the two-stream model,
/// every image of the modality otherwise.
pub fn eval_samples(records: &[EyeRecord], split: Split, modality: Modality) -> Vec<Sample> {
    match modality {
        Modality::Multimodal => strict_pairs(records, split)
            .iter()
            .map(Sample::from)
            .collect(),
        Modality::Fundus | Modality::Oct => single_samples(records, split, modality),
    }
}

/// Every image of one modality in a split.
pub fn single_samples(records: &[EyeRecord], split: Split, modality: Modality) -> Vec<Sample> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        let images = if modality == Modality::Fundus {
            &r.fundus
        } else {
            &r.oct
        };
        for img in images {
            let (fundus, oct) = if modality == Modality::Fundus {
                (Some(img.clone()), None)
            } else {
                (None, Some(img.clone()))
            };
            out.push(Sample {
                eye_id: r.eye_id.clone(),
                class: r.class,
                fundus,
                oct,
            });
        }
    }
    out
}

/// A stacked, normalized batch.
pub struct Batch<T: Real> {
    pub fundus: Option<Tensor<T>>,
    pub oct: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

/// Manifest records plus every referenced image, preprocessed once.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<EyeRecord>,
    images: HashMap<String, Image>,
    image_size: usize,
}

impl Dataset {
    /// Loads a manifest; image paths resolve against its directory.
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Dataset::from_records(&root, records)
    }

    pub fn from_records(root: &Path, records: Vec<EyeRecord>) -> Result<Self> {
        check_split_hygiene(&records)?;
        let mut images = HashMap::new();
        let mut size = None;
        for r in &records {
            let all = r
                .fundus
                .iter()
                .map(|i| (true, i))
                .chain(r.oct.iter().map(|i| (false, i)));
            for (is_fundus, img) in all {
                let raw = load_image(&root.join(&img.path))?;
                if raw.height != raw.width {
                    return Err(Error::dim(format!("{} is not square", img.path)));
                }
                if *size.get_or_insert(raw.height) != raw.height {
                    return Err(Error::dim(format!(
                        "{} is {}px, other images are {}px",
                        img.path,
                        raw.height,
                        size.unwrap_or_default()
                    )));
                }
                let pre = if is_fundus {
                    preprocess_fundus(&raw)?
                } else {
                    preprocess_oct(&raw)?
                };
                images.insert(img.path.clone(), pre);
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            records,
            images,
            image_size: size.unwrap_or(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[EyeRecord] {
        &self.records
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn record(&self, eye_id: &str) -> Option<&EyeRecord> {
        self.records.iter().find(|r| r.eye_id == eye_id)
    }

    /// Preprocessed image in `[0, 1]`.
    pub fn image(&self, path: &str) -> Result<&Image> {
        self.images
            .get(path)
            .ok_or_else(|| Error::config(format!("image {path} is not in the dataset")))
    }

    /// Assembles a batch. With `augment_key = Some((seed, epoch, first))`,
    /// sample `i` is augmented from stream index `(epoch, first + i)`.
    pub fn batch<T: Real>(
        &self,
        samples: &[Sample],
        augment_key: Option<(u64, usize, usize)>,
    ) -> Result<Batch<T>> {
        if samples.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let stack =
            |pick: fn(&Sample) -> Option<&ImageRef>, tag: &str| -> Result<Option<Tensor<T>>> {
                let refs: Option<Vec<&ImageRef>> = samples.iter().map(pick).collect();
                let Some(refs) = refs else {
                    if samples.iter().any(|s| pick(s).is_some()) {
                        return Err(Error::config(format!(
                            "batch mixes samples with and without {tag}"
                        )));
                    }
                    return Ok(None);
                };
                let mut items = Vec::with_capacity(refs.len());
                for (i, r) in refs.iter().enumerate() {
                    let img = self.image(&r.path)?;
                    let img = match augment_key {
                        Some((seed, epoch, first)) => {
                            let index = ((epoch as u64) << 32) | (first + i) as u64;
                            augment(img, &mut rng::stream(seed, tag, index))
                        }
                        None => img.clone(),
                    };
                    items.push(normalize(&img)?.to_tensor::<T>());
                }
                Tensor::stack(&items).map(Some)
            };
        Ok(Batch {
            fundus: stack(|s| s.fundus.as_ref(), "augment.fundus")?,
            oct: stack(|s| s.oct.as_ref(), "augment.oct")?,
            labels: samples.iter().map(|s| s.class.index()).collect(),
        })
    }
}

/// Rejects eye ids or image files shared between splits.
pub fn check_split_hygiene(records: &[EyeRecord]) -> Result<()> {
    let mut eyes: BTreeMap<&str, Split> = BTreeMap::new();
    let mut files: BTreeMap<&str, Split> = BTreeMap::new();
    for r in records {
        if let Some(prev) = eyes.insert(&r.eye_id, r.split) {
            if prev != r.split {
                return Err(Error::Split(format!(
                    "eye {} appears in {prev} and {}",
                    r.eye_id, r.split
                )));
            }
        }
        for img in r.fundus.iter().chain(&r.oct) {
            if let Some(prev) = files.insert(&img.path, r.split) {
                if prev != r.split {
                    return Err(Error::Split(format!(
                        "image {} appears in {prev} and {}",
                        img.path, r.split
                    )));
                }
            }
        }
    }
    Ok(())
}
