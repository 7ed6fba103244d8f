//! Fundus/OCT pairing: strict same-eye pairs and loose same-class pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Class, EyeRecord, ImageRef, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOrigin {
    Strict,
    Loose,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub fundus: ImageRef,
    pub oct: ImageRef,
    pub class: Class,
    pub fundus_eye: String,
    pub oct_eye: String,
    pub origin: PairOrigin,
}

/// Every fundus x OCT combination from the same eye, in manifest order.
pub fn strict_pairs(records: &[EyeRecord], split: Split) -> Vec<TrainingPair> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        for f in &r.fundus {
            for o in &r.oct {
                out.push(TrainingPair {
                    fundus: f.clone(),
                    oct: o.clone(),
                    class: r.class,
                    fundus_eye: r.eye_id.clone(),
                    oct_eye: r.eye_id.clone(),
                    origin: PairOrigin::Strict,
                });
            }
        }
    }
    out
}

/// Size of the loose pair space of one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LooseCount {
    pub class: Class,
    pub fundus: usize,
    pub oct: usize,
    pub pairs: usize,
}

/// Per-class `|F_c| * |O_c|` over the given split. Warns for classes with no pairs.
pub fn loose_pairs_count(records: &[EyeRecord], split: Split) -> Vec<LooseCount> {
    let counts = super::manifest::image_counts(records, split);
    Class::ALL
        .iter()
        .map(|&class| {
            let (fundus, oct) = counts[class.index()];
            if fundus * oct == 0 {
                log::warn!("class {class} has {fundus} fundus and {oct} OCT images in {split}, no loose pairs");
            }
            LooseCount {
                class,
                fundus,
                oct,
                pairs: fundus * oct,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairPool {
    Strict,
    Loose,
}

/// Per-epoch pair sampler over the training split.
///
/// Loose epochs are one shuffled pass over the training fundus images, each
/// paired with an OCT image drawn uniformly from its class. Strict epochs are a
/// shuffled pass over the same-eye pairs.
#[derive(Clone, Debug)]
pub struct PairSampler {
    pool: PairPool,
    seed: u64,
    fundus: Vec<(ImageRef, Class, String)>,
    oct_by_class: [Vec<(ImageRef, String)>; 3],
    strict: Vec<TrainingPair>,
}

impl PairPool {
    pub fn as_str(self) -> &'static str {
        match self {
            PairPool::Strict => "strict",
            PairPool::Loose => "loose",
        }
    }
}

impl std::fmt::Display for PairPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PairPool {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "strict" => Ok(PairPool::Strict),
            "loose" => Ok(PairPool::Loose),
            other => Err(format!(
                "unknown pairing {other:?}, expected strict or loose"
            )),
        }
    }
}

impl PairSampler {
    /// Fails unless `split` is the training split.
    pub fn new(records: &[EyeRecord], split: Split, pool: PairPool, seed: u64) -> Result<Self> {
        if split != Split::Train {
            return Err(Error::Split(format!(
                "pair sampling is restricted to the train split, got {split}"
            )));
        }
        let train: Vec<&EyeRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
        let mut fundus = Vec::new();
        let mut oct_by_class: [Vec<(ImageRef, String)>; 3] = Default::default();
        for r in &train {
            fundus.extend(
                r.fundus
                    .iter()
                    .map(|f| (f.clone(), r.class, r.eye_id.clone())),
            );
            oct_by_class[r.class.index()]
                .extend(r.oct.iter().map(|o| (o.clone(), r.eye_id.clone())));
        }
        if pool == PairPool::Loose {
            loose_pairs_count(records, Split::Train);
        }
        let strict = strict_pairs(records, Split::Train);
        if pool == PairPool::Strict && strict.is_empty() {
            log::warn!("no strict pairs in the train split");
        }
        Ok(PairSampler {
            pool,
            seed,
            fundus,
            oct_by_class,
            strict,
        })
    }

    pub fn pool(&self) -> PairPool {
        self.pool
    }

    /// Pairs of one epoch; deterministic in `(seed, epoch)`.
    pub fn epoch(&self, epoch: usize) -> Vec<TrainingPair> {
        let mut order_rng = rng::stream(self.seed, "pairs.order", epoch as u64);
        match self.pool {
            PairPool::Strict => {
                let mut pairs = self.strict.clone();
                pairs.shuffle(&mut order_rng);
                pairs
            }
            PairPool::Loose => {
                let mut draw_rng = rng::stream(self.seed, "pairs.draw", epoch as u64);
                let mut order: Vec<usize> = (0..self.fundus.len()).collect();
                order.shuffle(&mut order_rng);
                order
                    .into_iter()
                    .filter_map(|i| {
                        let (f, class, eye) = &self.fundus[i];
                        let pool = &self.oct_by_class[class.index()];
                        if pool.is_empty() {
                            return None;
                        }
                        let (o, oct_eye) = &pool[draw_rng.random_range(0..pool.len())];
                        Some(TrainingPair {
                            fundus: f.clone(),
                            oct: o.clone(),
                            class: *class,
                            fundus_eye: eye.clone(),
                            oct_eye: oct_eye.clone(),
                            origin: PairOrigin::Loose,
                        })
                    })
                    .collect()
            }
        }
    }
}
