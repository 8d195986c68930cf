//! Two-stage group masking.
//!
//! Masked units are sampled at k-mer granularity (the teacher's tokens) and
//! then expanded to the k character positions each unit covers (the
//! student's tokens). Because whole units are masked, no character of a
//! masked unit can ever reach the student's visible pathway.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{HadError, Result};
use crate::rng::{self, Rng};

/// Number of units masked for `n_units` at `ratio`: round-half-up, at least
/// one whenever `ratio > 0`.
pub fn mask_count(n_units: usize, ratio: f64) -> usize {
    if ratio <= 0.0 || n_units == 0 {
        return 0;
    }
    let raw = (ratio * n_units as f64 + 0.5).floor() as usize;
    raw.clamp(1, n_units)
}

/// Uniformly samples a sorted set of masked unit indices.
pub fn sample_kmer_mask(n_units: usize, ratio: f64, rng_seed: u64) -> Vec<usize> {
    sample_kmer_mask_with(n_units, ratio, &mut rng::from_seed(rng_seed))
}

pub fn sample_kmer_mask_with(n_units: usize, ratio: f64, rng: &mut Rng) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&ratio), "mask ratio must lie in [0, 1]");
    let count = mask_count(n_units, ratio);
    // partial Fisher-Yates; uniform over subsets of size `count`
    let mut pool: Vec<usize> = (0..n_units).collect();
    for i in 0..count {
        let j = rng.random_range(i..n_units);
        pool.swap(i, j);
    }
    let mut picked = pool[..count].to_vec();
    picked.sort_unstable();
    picked
}

pub fn expand_mask_to_char(kmer_set: &[usize], k: usize) -> Vec<usize> {
    kmer_set
        .iter()
        .flat_map(|&j| (j * k)..(j * k + k))
        .collect()
}

/// Masked and visible index sets at both granularities. All four lists are
/// sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub len: usize,
    pub k: usize,
    pub masked_kmer: Vec<usize>,
    pub visible_kmer: Vec<usize>,
    pub masked_char: Vec<usize>,
    pub visible_char: Vec<usize>,
}

impl MaskPlan {
    pub fn from_masked_units(len: usize, k: usize, mut masked_kmer: Vec<usize>) -> Result<Self> {
        if k == 0 || len % k != 0 {
            return Err(HadError::LengthNotDivisible { len, k });
        }
        let n_units = len / k;
        masked_kmer.sort_unstable();
        masked_kmer.dedup();
        if let Some(&bad) = masked_kmer.iter().find(|&&j| j >= n_units) {
            return Err(HadError::PositionOutOfRange {
                pos: bad,
                max_len: n_units,
            });
        }
        let mut is_masked = vec![false; n_units];
        for &j in &masked_kmer {
            is_masked[j] = true;
        }
        let visible_kmer: Vec<usize> = (0..n_units).filter(|&j| !is_masked[j]).collect();
        let masked_char = expand_mask_to_char(&masked_kmer, k);
        let visible_char = expand_mask_to_char(&visible_kmer, k);
        Ok(MaskPlan {
            len,
            k,
            masked_kmer,
            visible_kmer,
            masked_char,
            visible_char,
        })
    }

    /// A plan with nothing masked.
    pub fn all_visible(len: usize, k: usize) -> Result<Self> {
        Self::from_masked_units(len, k, Vec::new())
    }

    pub fn n_units(&self) -> usize {
        self.len / self.k
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MaskPlanRecord::from(self)).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: MaskPlanRecord =
            serde_json::from_str(s).map_err(|e| HadError::Config(format!("mask plan: {e}")))?;
        Self::from_masked_units(rec.len, rec.k, rec.masked_kmer)
    }
}

pub fn build_mask_plan(len: usize, k: usize, ratio: f64, rng_seed: u64) -> Result<MaskPlan> {
    build_mask_plan_with(len, k, ratio, &mut rng::from_seed(rng_seed))
}

pub fn build_mask_plan_with(len: usize, k: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if k == 0 || len % k != 0 {
        return Err(HadError::LengthNotDivisible { len, k });
    }
    let masked = sample_kmer_mask_with(len / k, ratio, rng);
    MaskPlan::from_masked_units(len, k, masked)
}

/// Serialized form; character sets are derived on load.
#[derive(Debug, Serialize, Deserialize)]
struct MaskPlanRecord {
    #[serde(rename = "L")]
    len: usize,
    k: usize,
    masked_kmer: Vec<usize>,
}

impl From<&MaskPlan> for MaskPlanRecord {
    fn from(p: &MaskPlan) -> Self {
        MaskPlanRecord {
            len: p.len,
            k: p.k,
            masked_kmer: p.masked_kmer.clone(),
        }
    }
}

impl Serialize for MaskPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskPlanRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = MaskPlanRecord::deserialize(d)?;
        MaskPlan::from_masked_units(rec.len, rec.k, rec.masked_kmer).map_err(serde::de::Error::custom)
    }
}
