//! Staged sampling range `S = s_max / stage` and the intra-personal pair sampler.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::synth::{alpha_to_millis, millis_to_alpha, DatasetManifest, EditSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub s_max: f64,
    /// Last epoch (1-based, inclusive) of each stage.
    pub boundaries: Vec<u32>,
}

impl Default for CurriculumSchedule {
    /// `s_max = 10` with stage ends at epochs 3, 6, 9 and 12.
    fn default() -> Self {
        Self { s_max: 10.0, boundaries: vec![3, 6, 9, 12] }
    }
}

impl CurriculumSchedule {
    /// A single stage: `S = s_max` for every epoch up to `epochs`.
    pub fn constant(s_max: f64, epochs: u32) -> Self {
        Self { s_max, boundaries: vec![epochs] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_max.is_finite() && self.s_max > 0.0) {
            return Err(config_err!("s_max must be positive, got {}", self.s_max));
        }
        if self.boundaries.is_empty() || self.boundaries[0] == 0 {
            return Err(config_err!("curriculum boundaries must be non-empty and start at epoch >= 1"));
        }
        if self.boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err!("curriculum boundaries must be strictly increasing: {:?}", self.boundaries));
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn last_epoch(&self) -> u32 {
        self.boundaries.last().copied().unwrap_or(0)
    }

    /// 1-based stage containing `epoch`.
    pub fn stage(&self, epoch: u32) -> Result<usize> {
        if epoch == 0 {
            return Err(config_err!("epochs are numbered from 1"));
        }
        self.boundaries
            .iter()
            .position(|&b| epoch <= b)
            .map(|i| i + 1)
            .ok_or_else(|| config_err!("epoch {epoch} is past the last curriculum boundary {}", self.last_epoch()))
    }
}

/// The sampling range for `epoch`.
pub fn current_range(schedule: &CurriculumSchedule, epoch: u32) -> Result<f64> {
    schedule.validate()?;
    Ok(schedule.s_max / schedule.stage(epoch)? as f64)
}

/// How `(alpha_x, alpha_y)` is drawn once the range is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// Distance uniform over admissible grid distances, then a uniform pair at that distance.
    #[default]
    UniformDistance,
    /// Uniform over all admissible ordered pairs.
    UniformPair,
}

/// Two images of one identity differing along one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacePair {
    pub identity_seed: u64,
    pub attribute: String,
    pub alpha_x: f64,
    pub alpha_y: f64,
}

impl FacePair {
    /// `alpha_y - alpha_x`.
    pub fn signed_delta(&self) -> f64 {
        millis_to_alpha(alpha_to_millis(self.alpha_y) - alpha_to_millis(self.alpha_x))
    }

    pub fn spec_x(&self) -> EditSpec {
        EditSpec { identity_seed: self.identity_seed, attribute: self.attribute.clone(), alpha: self.alpha_x }
    }

    pub fn spec_y(&self) -> EditSpec {
        EditSpec { identity_seed: self.identity_seed, attribute: self.attribute.clone(), alpha: self.alpha_y }
    }
}

/// Grid pairs bucketed by distance, so each draw is O(log grid).
#[derive(Debug, Clone)]
pub struct PairSampler {
    grid: Vec<i64>,
    mode: PairSampling,
    /// Distinct positive distances in thousandths, ascending.
    distances: Vec<i64>,
    /// Index pairs `(i, j)`, `i < j`, with `grid[j] - grid[i] == distances[k]`.
    buckets: Vec<Vec<(u32, u32)>>,
    /// `cumulative[k]` = number of unordered pairs with distance `<= distances[k]`.
    cumulative: Vec<usize>,
}

impl PairSampler {
    pub fn new(alpha_grid: &[f64], mode: PairSampling) -> Result<Self> {
        let grid: Vec<i64> = alpha_grid.iter().map(|&a| alpha_to_millis(a)).collect();
        if grid.len() < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err!("alpha grid needs two or more strictly increasing points"));
        }
        let mut all: Vec<(i64, u32, u32)> = Vec::new();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                all.push((grid[j] - grid[i], i as u32, j as u32));
            }
        }
        all.sort_unstable();
        let mut distances = Vec::new();
        let mut buckets: Vec<Vec<(u32, u32)>> = Vec::new();
        for (d, i, j) in all {
            if distances.last() != Some(&d) {
                distances.push(d);
                buckets.push(Vec::new());
            }
            buckets.last_mut().expect("bucket").push((i, j));
        }
        let cumulative = buckets
            .iter()
            .scan(0usize, |acc, b| {
                *acc += b.len();
                Some(*acc)
            })
            .collect();
        Ok(Self { grid, mode, distances, buckets, cumulative })
    }

    pub fn mode(&self) -> PairSampling {
        self.mode
    }

    /// Number of distinct distances in `(0, range]`.
    pub fn admissible_distances(&self, range: f64) -> usize {
        let limit = libm::floor(range * 1000.0 + 1e-6) as i64;
        self.distances.partition_point(|&d| d <= limit)
    }

    /// An ordered `(alpha_x, alpha_y)` with `0 < |alpha_y - alpha_x| <= range`.
    pub fn sample_alphas<R: Rng + ?Sized>(&self, range: f64, rng: &mut R) -> Result<(f64, f64)> {
        let k = self.admissible_distances(range);
        if k == 0 {
            return Err(config_err!("no grid pair lies within range {range}; the grid step must not exceed it"));
        }
        let (bucket, within) = match self.mode {
            PairSampling::UniformDistance => {
                let b = rng.gen_range(0..k);
                (b, rng.gen_range(0..self.buckets[b].len()))
            }
            PairSampling::UniformPair => {
                let r = rng.gen_range(0..self.cumulative[k - 1]);
                let b = self.cumulative.partition_point(|&c| c <= r);
                let start = if b == 0 { 0 } else { self.cumulative[b - 1] };
                (b, r - start)
            }
        };
        let (i, j) = self.buckets[bucket][within];
        let (lo, hi) = (millis_to_alpha(self.grid[i as usize]), millis_to_alpha(self.grid[j as usize]));
        Ok(if rng.gen_bool(0.5) { (lo, hi) } else { (hi, lo) })
    }
}

/// One pair from `identities` x `manifest.attribute_catalog` within `range`.
pub fn sample_pair<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    sampler: &PairSampler,
    range: f64,
    rng: &mut R,
) -> Result<FacePair> {
    if manifest.identities.is_empty() || manifest.attribute_catalog.is_empty() {
        return Err(config_err!("manifest has no identities or no attributes"));
    }
    let identity_seed = manifest.identities[rng.gen_range(0..manifest.identities.len())];
    pair_for_identity(manifest, sampler, identity_seed, range, rng)
}

fn pair_for_identity<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    sampler: &PairSampler,
    identity_seed: u64,
    range: f64,
    rng: &mut R,
) -> Result<FacePair> {
    let attribute = manifest.attribute_catalog[rng.gen_range(0..manifest.attribute_catalog.len())].clone();
    let (alpha_x, alpha_y) = sampler.sample_alphas(range, rng)?;
    Ok(FacePair { identity_seed, attribute, alpha_x, alpha_y })
}

/// `n` pairs at the range for `epoch`. Identities are distinct whenever the pool
/// has at least `n` of them.
pub fn build_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    schedule: &CurriculumSchedule,
    epoch: u32,
    n: usize,
    sampler: &PairSampler,
    rng: &mut R,
) -> Result<Vec<FacePair>> {
    let range = current_range(schedule, epoch)?;
    build_batch_at(manifest, range, n, sampler, rng)
}

/// [`build_batch`] with an explicit range.
pub fn build_batch_at<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    range: f64,
    n: usize,
    sampler: &PairSampler,
    rng: &mut R,
) -> Result<Vec<FacePair>> {
    let pool = &manifest.identities;
    if pool.is_empty() || manifest.attribute_catalog.is_empty() {
        return Err(config_err!("manifest has no identities or no attributes"));
    }
    let ids: Vec<u64> = if n <= pool.len() {
        index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    ids.into_iter().map(|id| pair_for_identity(manifest, sampler, id, range, rng)).collect()
}
