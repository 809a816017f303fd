//! Synthetic test volumes with known ground truth.
//!
//! A phantom is Gaussian background noise plus a centered, axis-aligned
//! holder cylinder of slightly elevated intensity, plus one ellipsoidal
//! object at a seeded random position. The object interior carries oriented
//! stripes whose orientation and phase drift monotonically with the axis-0
//! index, so slice order is predictable and in-plane rotation is detectable
//! from the object only:
//!
//! - the stripe waveform is chiral (`sin v + ½·sin 2v`), which breaks the
//!   180° symmetry of a plain grating and keeps ±90° rotations apart;
//! - the orientation ramp spans a fixed global range, so one scoring
//!   function orders slices consistently across phantoms;
//! - the holder radius defaults to half the in-plane extent, which makes the
//!   cylinder fill the incircle of every axis-aligned view: after masking it
//!   is a flat pedestal and solves neither pretext task.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{BBox3D, Volume3D};

/// Intensity of the holder cylinder above the zero background.
const HOLDER_AMPLITUDE: f32 = 0.1;
/// Mean intensity of the object interior above the background.
const OBJECT_BASE: f32 = 0.15;
/// Peak-to-mean amplitude of the object texture.
const OBJECT_AMPLITUDE: f32 = 0.3;
/// Stripe orientation ramps over this range (degrees) across the object.
const ORIENT_START_DEG: f32 = -45.0;
const ORIENT_END_DEG: f32 = 45.0;
/// Phase advance per slice along axis 0, in radians.
const PHASE_RATE: f32 = 0.45;
/// Object radii jitter multiplier range (shrink only, keeps the fit check
/// deterministic).
const RADIUS_JITTER_LO: f32 = 0.9;

/// Parameters of a generated phantom.
#[derive(Debug, Clone, Copy)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    /// Object diameter as a fraction of each extent, in (0,1).
    pub object_extent_frac: f32,
    pub noise_sigma: f32,
    /// Holder cylinder radius as a fraction of the smaller in-plane extent,
    /// in (0,1). At the default 0.5 the cylinder fills the incircle of every
    /// axis-aligned view.
    pub holder_radius_frac: f32,
    /// Stripe frequency in cycles per voxel.
    pub texture_freq: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            extents: [64, 64, 64],
            object_extent_frac: 0.7,
            noise_sigma: 0.05,
            holder_radius_frac: 0.5,
            texture_freq: 0.16,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&d| d < 32) {
            return Err(Error::InvalidArg(format!(
                "phantom extents must be >= 32, got {:?}",
                self.extents
            )));
        }
        for (name, frac) in [
            ("object_extent_frac", self.object_extent_frac),
            ("holder_radius_frac", self.holder_radius_frac),
        ] {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(Error::InvalidArg(format!("{name} must be in (0,1), got {frac}")));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArg("noise_sigma must be >= 0".into()));
        }
        if self.texture_freq <= 0.0 {
            return Err(Error::InvalidArg("texture_freq must be > 0".into()));
        }
        // The object must fit with a one-voxel margin even at maximal radius.
        for (axis, &d) in self.extents.iter().enumerate() {
            if self.object_extent_frac * d as f32 + 2.0 > d as f32 {
                return Err(Error::InvalidArg(format!(
                    "object of fraction {} exceeds volume bounds on axis {axis} (extent {d})",
                    self.object_extent_frac
                )));
            }
        }
        Ok(())
    }
}

/// Generates a phantom plus the tight bounding box of its object voxels.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume3D, BBox3D)> {
    let (vol, bbox, _) = gen_phantom_labeled(spec)?;
    Ok((vol, bbox))
}

/// Like [`gen_phantom`] but also returns the per-voxel object labels the
/// generator used, for oracle checks against the returned box.
pub fn gen_phantom_labeled(spec: &PhantomSpec) -> Result<(Volume3D, BBox3D, Vec<bool>)> {
    spec.validate()?;
    let [d0, d1, d2] = spec.extents;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Object geometry first, then the noise buffer, so both depend only on
    // the seed and not on each other.
    let mut radii = [0.0f32; 3];
    let mut center = [0.0f32; 3];
    for a in 0..3 {
        let jitter = rng.random_range(RADIUS_JITTER_LO..=1.0);
        radii[a] = spec.object_extent_frac * spec.extents[a] as f32 / 2.0 * jitter;
        let lo = radii[a] + 1.0;
        let hi = spec.extents[a] as f32 - radii[a] - 1.0;
        center[a] = rng.random_range(lo..=hi);
    }
    let phase0 = rng.random_range(0.0..std::f32::consts::TAU);

    let mut data = vec![0.0f32; d0 * d1 * d2];
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma)
            .map_err(|e| Error::InvalidArg(format!("bad noise sigma: {e}")))?;
        for v in &mut data {
            *v = normal.sample(&mut rng);
        }
    }

    // Holder cylinder along axis 0.
    let holder_r2 = {
        let r = spec.holder_radius_frac * d1.min(d2) as f32;
        r * r
    };
    let c1 = (d1 as f32 - 1.0) * 0.5;
    let c2 = (d2 as f32 - 1.0) * 0.5;
    for j in 0..d1 {
        let dy = j as f32 - c1;
        for k in 0..d2 {
            let dx = k as f32 - c2;
            if dy * dy + dx * dx <= holder_r2 {
                let base = j * d2 + k;
                for i in 0..d0 {
                    data[i * d1 * d2 + base] += HOLDER_AMPLITUDE;
                }
            }
        }
    }

    // Textured ellipsoid.
    let mut mask = vec![false; d0 * d1 * d2];
    let obj_lo0 = center[0] - radii[0];
    let obj_span0 = 2.0 * radii[0];
    let k_tex = std::f32::consts::TAU * spec.texture_freq;
    for i in 0..d0 {
        let zi = (i as f32 - center[0]) / radii[0];
        if zi.abs() > 1.0 {
            continue;
        }
        let t = ((i as f32 - obj_lo0) / obj_span0).clamp(0.0, 1.0);
        let theta = (ORIENT_START_DEG + (ORIENT_END_DEG - ORIENT_START_DEG) * t).to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let phase = phase0 + PHASE_RATE * (i as f32 - center[0]);
        let zsq = zi * zi;
        for j in 0..d1 {
            let yj = (j as f32 - center[1]) / radii[1];
            let partial = zsq + yj * yj;
            if partial > 1.0 {
                continue;
            }
            for k in 0..d2 {
                let xk = (k as f32 - center[2]) / radii[2];
                if partial + xk * xk > 1.0 {
                    continue;
                }
                let u = (j as f32 - center[1]) * cos_t + (k as f32 - center[2]) * sin_t;
                let v = k_tex * u + phase;
                let tex = v.sin() + 0.5 * (2.0 * v).sin();
                let idx = (i * d1 + j) * d2 + k;
                data[idx] += OBJECT_BASE + OBJECT_AMPLITUDE * tex;
                mask[idx] = true;
            }
        }
    }

    let bbox = tight_box(&mask, spec.extents).ok_or_else(|| {
        Error::InvalidArg("phantom object produced no voxels (extents too small?)".into())
    })?;
    let vol = Volume3D::new(spec.extents, data)?;
    Ok((vol, bbox, mask))
}

/// Tight half-open box over true entries of a voxel mask.
pub fn tight_box(mask: &[bool], shape: [usize; 3]) -> Option<BBox3D> {
    let [d0, d1, d2] = shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                if mask[(i * d1 + j) * d2 + k] {
                    any = true;
                    let here = [i, j, k];
                    for a in 0..3 {
                        lo[a] = lo[a].min(here[a]);
                        hi[a] = hi[a].max(here[a] + 1);
                    }
                }
            }
        }
    }
    if any {
        Some(BBox3D {
            axes: [[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]],
        })
    } else {
        None
    }
}
