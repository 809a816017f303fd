//! Lossless cropping and storage-reduction accounting.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{BBox3D, Volume3D};

/// Storage accounting for one crop. Byte counts are payload bytes
/// (4 per voxel); the reduction fraction is exactly `1 − after/before`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReductionReport {
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub reduction_fraction: f64,
    pub bbox_used: BBox3D,
    pub margin: usize,
}

/// Cuts the sub-volume under `bbox` expanded by `margin` voxels per side
/// (clamped to the volume). Retained voxels are copied bit-exactly.
pub fn crop(vol: &Volume3D, bbox: &BBox3D, margin: usize) -> Result<Volume3D> {
    bbox.validate_within(vol.shape())?;
    let used = bbox.expanded(margin, vol.shape());
    let [i_r, j_r, k_r] = used.axes;
    let shape = [i_r[1] - i_r[0], j_r[1] - j_r[0], k_r[1] - k_r[0]];
    let mut data = Vec::with_capacity(shape.iter().product());
    for i in i_r[0]..i_r[1] {
        for j in j_r[0]..j_r[1] {
            let row = vol.index(i, j, k_r[0]);
            data.extend_from_slice(&vol.data()[row..row + shape[2]]);
        }
    }
    Volume3D::new(shape, data)
}

/// Accounts for a crop of `before` into `after` under `bbox` + `margin`.
pub fn reduction_report(
    before: &Volume3D,
    after: &Volume3D,
    bbox: &BBox3D,
    margin: usize,
) -> ReductionReport {
    let bytes_before = before.num_voxels() as u64 * 4;
    let bytes_after = after.num_voxels() as u64 * 4;
    ReductionReport {
        bytes_before,
        bytes_after,
        reduction_fraction: 1.0 - bytes_after as f64 / bytes_before as f64,
        bbox_used: bbox.expanded(margin, before.shape()),
        margin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(shape: [usize; 3]) -> Volume3D {
        let n = shape.iter().product();
        Volume3D::new(shape, (0..n).map(|v| v as f32 * 0.25).collect()).unwrap()
    }

    #[test]
    fn full_box_crop_is_identity_and_idempotent() {
        let vol = numbered([6, 6, 6]);
        let full = BBox3D::full(vol.shape());
        let once = crop(&vol, &full, 0).unwrap();
        assert_eq!(once, vol);
        let twice = crop(&once, &BBox3D::full(once.shape()), 0).unwrap();
        assert_eq!(twice, once);
        let report = reduction_report(&vol, &once, &full, 0);
        assert_eq!(report.reduction_fraction, 0.0);
    }

    #[test]
    fn half_extent_crop_keeps_an_eighth() {
        let vol = numbered([8, 8, 8]);
        let bbox = BBox3D::new([[0, 4], [0, 4], [0, 4]]).unwrap();
        let cropped = crop(&vol, &bbox, 0).unwrap();
        assert_eq!(cropped.num_voxels() * 8, vol.num_voxels());
        let report = reduction_report(&vol, &cropped, &bbox, 0);
        assert_eq!(report.reduction_fraction, 0.875);
        assert_eq!(report.bytes_before, 8 * 8 * 8 * 4);
        assert_eq!(report.bytes_after, 4 * 4 * 4 * 4);
    }

    #[test]
    fn cropped_voxels_match_source_exactly() {
        let vol = numbered([5, 7, 6]);
        let bbox = BBox3D::new([[1, 4], [2, 6], [0, 5]]).unwrap();
        let cropped = crop(&vol, &bbox, 0).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..5 {
                    assert_eq!(
                        cropped.at(i, j, k),
                        vol.at(i + 1, j + 2, k),
                        "voxel ({i},{j},{k})"
                    );
                }
            }
        }
    }

    #[test]
    fn margin_expands_and_clamps() {
        let vol = numbered([8, 8, 8]);
        let bbox = BBox3D::new([[1, 3], [6, 8], [0, 2]]).unwrap();
        let cropped = crop(&vol, &bbox, 2).unwrap();
        assert_eq!(cropped.shape(), [5, 4, 4]); // [0,5) × [4,8) × [0,4)
        let report = reduction_report(&vol, &cropped, &bbox, 2);
        assert_eq!(report.bbox_used.axes, [[0, 5], [4, 8], [0, 4]]);
        assert_eq!(report.margin, 2);
    }

    #[test]
    fn reduction_fraction_equals_extent_ratio_product() {
        let vol = numbered([10, 8, 6]);
        let bbox = BBox3D::new([[2, 7], [0, 4], [1, 4]]).unwrap();
        let cropped = crop(&vol, &bbox, 0).unwrap();
        let report = reduction_report(&vol, &cropped, &bbox, 0);
        let ratio = (5 * 4 * 3) as f64 / (10 * 8 * 6) as f64;
        assert_eq!(report.reduction_fraction, 1.0 - ratio);
    }
}
