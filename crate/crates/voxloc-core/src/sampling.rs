//! Pretext-task batch construction: slice sorting and slice-pair rotation.
//!
//! Both samplers draw everything from a caller-owned RNG, so batches are
//! reproducible per seed. Batches are plain owned data and safe to hand
//! across threads; use one seeded sampler RNG per worker.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{incircle_mask, rotate_slice, slice_at, Slice2D, Volume3D};

/// Slice-index distribution along the slicing axis, parameterized in units
/// of the slicing extent `l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SliceDist {
    /// Uniform over `[0, l)`.
    Uniform,
    /// Normal with mean `mean_frac·l` and standard deviation `std_frac·l`.
    Normal { mean_frac: f32, std_frac: f32 },
}

/// Optional batch augmentations. Rotation-based augmentations are excluded
/// while training the rotation loss, so only flips (applied identically to
/// both channels of a pair) and a global intensity jitter are available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flips: bool,
    /// Half-width of a multiplicative intensity jitter: each slice (or pair,
    /// synchronized) is scaled by `1 + U(−j, j)`.
    pub intensity_jitter: f32,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flips: false,
            intensity_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub slice_dist: SliceDist,
    /// Half-width `s` of the neighbor offset distribution `U(−s, s)`.
    pub sigma_halfwidth: usize,
    /// Rotation angle table `A`, degrees, distinct entries.
    pub angles_deg: Vec<f32>,
    pub axis: usize,
    /// Apply the incircle mask to sorting slices (rotation pairs are always
    /// masked; the mask is what makes non-quarter-turn rotations fair).
    pub mask_slices: bool,
    pub augment: Augment,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArg(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.angles_deg.is_empty() {
            return Err(Error::InvalidArg("angle table must be nonempty".into()));
        }
        for (i, a) in self.angles_deg.iter().enumerate() {
            for b in &self.angles_deg[i + 1..] {
                if a == b {
                    return Err(Error::InvalidArg(format!("duplicate angle {a} in table")));
                }
            }
        }
        if self.axis > 2 {
            return Err(Error::InvalidArg(format!("axis {} out of range", self.axis)));
        }
        if let SliceDist::Normal { std_frac, .. } = self.slice_dist {
            if std_frac <= 0.0 {
                return Err(Error::InvalidArg("std_frac must be > 0".into()));
            }
        }
        Ok(())
    }

    /// The paper-style default table: seven angles, 30° apart, spanning ±90°.
    pub fn default_angles() -> Vec<f32> {
        vec![-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0]
    }
}

/// A sorting pretext batch: slices of one volume plus their rank labels.
#[derive(Debug, Clone)]
pub struct SortBatch {
    pub slices: Vec<Slice2D>,
    /// Rank of each slice (0 = smallest source index); a permutation.
    pub ranks: Vec<usize>,
    /// Source slice indices, aligned with `slices`.
    pub indices: Vec<usize>,
}

/// A rotation pretext batch: masked (reference, rotated neighbor) pairs and
/// the index of the applied angle.
#[derive(Debug, Clone)]
pub struct RotBatch {
    pub pairs: Vec<(Slice2D, Slice2D)>,
    pub labels: Vec<usize>,
}

/// Ranks of the given values: smallest value gets rank 0. Values must be
/// distinct.
pub fn ranks_of(values: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by_key(|&i| values[i]);
    let mut ranks = vec![0usize; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank;
    }
    ranks
}

/// One draw from `P_η(l)`, rounded to an integer and clamped to `[0, l−1]`.
fn draw_index<R: Rng>(dist: SliceDist, l: usize, rng: &mut R) -> usize {
    let raw = match dist {
        SliceDist::Uniform => rng.random_range(0.0..l as f32),
        SliceDist::Normal { mean_frac, std_frac } => {
            let normal = Normal::new(mean_frac * l as f32, std_frac * l as f32)
                .expect("validated std_frac");
            normal.sample(rng)
        }
    };
    (raw.round().max(0.0) as usize).min(l - 1)
}

fn apply_jitter<R: Rng>(slice: &mut Slice2D, jitter: f32, factor: Option<f32>, rng: &mut R) -> f32 {
    let f = factor.unwrap_or_else(|| 1.0 + rng.random_range(-jitter..=jitter));
    for v in &mut slice.data {
        *v *= f;
    }
    f
}

fn flip_slice(slice: &mut Slice2D, horizontal: bool, vertical: bool) {
    let (h, w) = (slice.height, slice.width);
    if horizontal {
        for r in 0..h {
            slice.data[r * w..(r + 1) * w].reverse();
        }
    }
    if vertical {
        for r in 0..h / 2 {
            for c in 0..w {
                slice.data.swap(r * w + c, (h - 1 - r) * w + c);
            }
        }
    }
}

/// Draws a sorting batch: distinct slice indices from `P_η`, rank labels,
/// optionally masked slices.
pub fn sample_sort_batch<R: Rng>(
    vol: &Volume3D,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SortBatch> {
    cfg.validate()?;
    let l = vol.extent(cfg.axis);
    if l < cfg.batch_size {
        return Err(Error::InvalidArg(format!(
            "slicing extent {l} smaller than batch size {}",
            cfg.batch_size
        )));
    }
    let mut indices: Vec<usize> = Vec::with_capacity(cfg.batch_size);
    let mut attempts = 0usize;
    while indices.len() < cfg.batch_size {
        attempts += 1;
        if attempts > 10_000 * cfg.batch_size {
            return Err(Error::InvalidArg(
                "slice distribution too concentrated to draw distinct indices".into(),
            ));
        }
        let idx = draw_index(cfg.slice_dist, l, rng);
        if !indices.contains(&idx) {
            indices.push(idx);
        }
    }
    let ranks = ranks_of(&indices);
    let mut slices = Vec::with_capacity(cfg.batch_size);
    for &idx in &indices {
        let mut s = slice_at(vol, cfg.axis, idx)?;
        if cfg.mask_slices {
            s = incircle_mask(&s);
        }
        if cfg.augment.flips {
            let horizontal = rng.random_bool(0.5);
            let vertical = rng.random_bool(0.5);
            flip_slice(&mut s, horizontal, vertical);
        }
        if cfg.augment.intensity_jitter > 0.0 {
            apply_jitter(&mut s, cfg.augment.intensity_jitter, None, rng);
        }
        slices.push(s);
    }
    Ok(SortBatch {
        slices,
        ranks,
        indices,
    })
}

/// Builds one (reference, rotated neighbor) pair with both channels masked.
///
/// `neighbor = clamp(eta + sigma, 0, l−1)`; the neighbor is rotated by
/// `angles_deg[class_idx]` before masking.
pub fn build_rot_pair(
    vol: &Volume3D,
    axis: usize,
    eta: usize,
    sigma: i64,
    class_idx: usize,
    angles_deg: &[f32],
) -> Result<(Slice2D, Slice2D)> {
    if class_idx >= angles_deg.len() {
        return Err(Error::LabelOutOfRange {
            label: class_idx,
            num_classes: angles_deg.len(),
        });
    }
    let l = vol.extent(axis) as i64;
    let neighbor = (eta as i64 + sigma).clamp(0, l - 1) as usize;
    let reference = incircle_mask(&slice_at(vol, axis, eta)?);
    let rotated = incircle_mask(&rotate_slice(
        &slice_at(vol, axis, neighbor)?,
        angles_deg[class_idx],
    ));
    Ok((reference, rotated))
}

/// Draws a rotation batch: nearby slice pairs with a uniformly chosen angle
/// class applied to the second channel.
pub fn sample_rot_batch<R: Rng>(
    vol: &Volume3D,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<RotBatch> {
    cfg.validate()?;
    let l = vol.extent(cfg.axis);
    if l < 2 {
        return Err(Error::InvalidArg(format!(
            "need at least 2 slices along axis {}, got {l}",
            cfg.axis
        )));
    }
    let s = cfg.sigma_halfwidth as i64;
    let num_classes = cfg.angles_deg.len();
    let mut pairs = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let eta = draw_index(cfg.slice_dist, l, rng);
        let sigma = rng.random_range(-s..=s);
        let class_idx = rng.random_range(0..num_classes);
        let (mut reference, mut rotated) =
            build_rot_pair(vol, cfg.axis, eta, sigma, class_idx, &cfg.angles_deg)?;
        if cfg.augment.flips {
            let horizontal = rng.random_bool(0.5);
            let vertical = rng.random_bool(0.5);
            flip_slice(&mut reference, horizontal, vertical);
            flip_slice(&mut rotated, horizontal, vertical);
        }
        if cfg.augment.intensity_jitter > 0.0 {
            let f = apply_jitter(&mut reference, cfg.augment.intensity_jitter, None, rng);
            apply_jitter(&mut rotated, cfg.augment.intensity_jitter, Some(f), rng);
        }
        pairs.push((reference, rotated));
        labels.push(class_idx);
    }
    Ok(RotBatch { pairs, labels })
}
