//! Volume representation, slicing, in-plane rotation, and downscaling.
//!
//! A [`Volume3D`] is a dense row-major f32 grid; axis 0 is the default
//! slicing axis and axis 2 varies fastest in memory. All operations here are
//! pure functions of their inputs and safe to call concurrently on shared
//! read-only volumes.

pub mod io;
pub mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 3D scalar grid, the unit of ingestion, slicing, and cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "zero extent in volume shape {shape:?}"
            )));
        }
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} implies {expected} voxels, buffer has {}",
                data.len()
            )));
        }
        Ok(Volume3D { shape, data })
    }

    pub fn constant(shape: [usize; 3], value: f32) -> Result<Self> {
        let n = shape[0]
            .checked_mul(shape[1])
            .and_then(|p| p.checked_mul(shape[2]))
            .ok_or_else(|| Error::InvalidShape(format!("shape {shape:?} overflows")))?;
        Volume3D::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }
}

/// A 2D cross-section copied out of a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Slice2D {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} slice needs {} values, buffer has {}",
                height * width,
                data.len()
            )));
        }
        Ok(Slice2D {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Slice2D {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// Axis-aligned box of half-open voxel intervals `[lo, hi)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox3D {
    pub axes: [[usize; 2]; 3],
}

impl BBox3D {
    pub fn new(axes: [[usize; 2]; 3]) -> Result<Self> {
        for (axis, [lo, hi]) in axes.iter().enumerate() {
            if lo >= hi {
                return Err(Error::InvalidShape(format!(
                    "empty interval [{lo},{hi}) on axis {axis}"
                )));
            }
        }
        Ok(BBox3D { axes })
    }

    /// Full-volume box for the given shape.
    pub fn full(shape: [usize; 3]) -> Self {
        BBox3D {
            axes: [[0, shape[0]], [0, shape[1]], [0, shape[2]]],
        }
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.axes[axis][1] - self.axes[axis][0]
    }

    pub fn num_voxels(&self) -> usize {
        (0..3).map(|a| self.extent(a)).product()
    }

    /// Checks the box lies inside a volume of the given shape.
    pub fn validate_within(&self, shape: [usize; 3]) -> Result<()> {
        for axis in 0..3 {
            if self.axes[axis][1] > shape[axis] {
                return Err(Error::InvalidShape(format!(
                    "interval {:?} exceeds extent {} on axis {axis}",
                    self.axes[axis], shape[axis]
                )));
            }
        }
        Ok(())
    }

    /// Expands by `margin` voxels per side, clamped to the volume bounds.
    pub fn expanded(&self, margin: usize, shape: [usize; 3]) -> BBox3D {
        let mut axes = self.axes;
        for a in 0..3 {
            axes[a][0] = axes[a][0].saturating_sub(margin);
            axes[a][1] = (axes[a][1] + margin).min(shape[a]);
        }
        BBox3D { axes }
    }
}

/// Copies the 2D cross-section at `index` along `axis`.
///
/// The remaining axes keep their relative order: axis 0 yields `(d1, d2)`
/// slices, axis 1 `(d0, d2)`, axis 2 `(d0, d1)`.
pub fn slice_at(vol: &Volume3D, axis: usize, index: usize) -> Result<Slice2D> {
    if axis > 2 {
        return Err(Error::InvalidArg(format!("axis {axis} out of range")));
    }
    let [d0, d1, d2] = vol.shape();
    let extent = vol.extent(axis);
    if index >= extent {
        return Err(Error::IndexOutOfRange {
            axis,
            index,
            extent,
        });
    }
    let slice = match axis {
        0 => {
            let start = index * d1 * d2;
            Slice2D::new(d1, d2, vol.data()[start..start + d1 * d2].to_vec())?
        }
        1 => {
            let mut data = Vec::with_capacity(d0 * d2);
            for i in 0..d0 {
                let start = (i * d1 + index) * d2;
                data.extend_from_slice(&vol.data()[start..start + d2]);
            }
            Slice2D::new(d0, d2, data)?
        }
        _ => {
            let mut data = Vec::with_capacity(d0 * d1);
            for i in 0..d0 {
                for j in 0..d1 {
                    data.push(vol.at(i, j, index));
                }
            }
            Slice2D::new(d0, d1, data)?
        }
    };
    Ok(slice)
}

/// Exact sine/cosine for a rotation angle in degrees.
///
/// Quarter-turn multiples snap to ±1/0 so lattice-aligned rotations reduce to
/// exact index remapping (the bilinear weights degenerate to 1).
fn sin_cos_deg(angle_deg: f32) -> (f64, f64) {
    let turned = (angle_deg as f64).rem_euclid(360.0);
    if turned == 0.0 {
        (0.0, 1.0)
    } else if turned == 90.0 {
        (1.0, 0.0)
    } else if turned == 180.0 {
        (0.0, -1.0)
    } else if turned == 270.0 {
        (-1.0, 0.0)
    } else {
        let rad = turned.to_radians();
        (rad.sin(), rad.cos())
    }
}

/// Rotates a slice about its geometric center `((h−1)/2, (w−1)/2)`.
///
/// Positive angles turn counter-clockwise in the (x right, y up) frame;
/// sampling is bilinear and out-of-support samples fill with zero. The
/// output has the same extents as the input.
pub fn rotate_slice(s: &Slice2D, angle_deg: f32) -> Slice2D {
    let (h, w) = (s.height, s.width);
    let (sin_a, cos_a) = sin_cos_deg(angle_deg);
    let cy = (h as f64 - 1.0) * 0.5;
    let cx = (w as f64 - 1.0) * 0.5;
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        let dy = r as f64 - cy;
        for c in 0..w {
            let dx = c as f64 - cx;
            // Inverse rotation: destination pixel pulls from the source.
            let sx = cos_a * dx + sin_a * dy + cx;
            let sy = -sin_a * dx + cos_a * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let v00 = s.data[y0 * w + x0] as f64;
            let v10 = s.data[y0 * w + x1] as f64;
            let v01 = s.data[y1 * w + x0] as f64;
            let v11 = s.data[y1 * w + x1] as f64;
            let top = v00 * (1.0 - fx) + v10 * fx;
            let bottom = v01 * (1.0 - fx) + v11 * fx;
            out[r * w + c] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
    Slice2D {
        height: h,
        width: w,
        data: out,
    }
}

/// Zeroes everything outside the largest centered circle that fits.
///
/// Values at distance greater than `min(h,w)/2` from the center are set to
/// zero; the inside is untouched, so the mask is idempotent.
pub fn incircle_mask(s: &Slice2D) -> Slice2D {
    let (h, w) = (s.height, s.width);
    let cy = (h as f64 - 1.0) * 0.5;
    let cx = (w as f64 - 1.0) * 0.5;
    let radius = h.min(w) as f64 / 2.0;
    let r2 = radius * radius;
    let mut out = s.data.clone();
    for r in 0..h {
        let dy = r as f64 - cy;
        for c in 0..w {
            let dx = c as f64 - cx;
            if dy * dy + dx * dx > r2 {
                out[r * w + c] = 0.0;
            }
        }
    }
    Slice2D {
        height: h,
        width: w,
        data: out,
    }
}

/// Mean-pools `factor³` blocks; extents not divisible by `factor` are
/// edge-padded (the last voxel repeats).
pub fn downscale(vol: &Volume3D, factor: usize) -> Result<Volume3D> {
    if factor == 0 {
        return Err(Error::InvalidArg("downscale factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let [d0, d1, d2] = vol.shape();
    let out_shape = [d0.div_ceil(factor), d1.div_ceil(factor), d2.div_ceil(factor)];
    let mut data = Vec::with_capacity(out_shape.iter().product());
    let inv = 1.0 / (factor * factor * factor) as f32;
    for oi in 0..out_shape[0] {
        for oj in 0..out_shape[1] {
            for ok in 0..out_shape[2] {
                let mut acc = 0.0f32;
                for bi in 0..factor {
                    let i = (oi * factor + bi).min(d0 - 1);
                    for bj in 0..factor {
                        let j = (oj * factor + bj).min(d1 - 1);
                        for bk in 0..factor {
                            let k = (ok * factor + bk).min(d2 - 1);
                            acc += vol.at(i, j, k);
                        }
                    }
                }
                data.push(acc * inv);
            }
        }
    }
    Volume3D::new(out_shape, data)
}
