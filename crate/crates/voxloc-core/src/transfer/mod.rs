//! Zero-label transfer from the pretext nets to 3D bounding boxes.
//!
//! Two routes:
//!
//! - **Embedding clustering**: superpixel embeddings from the sorting trunk
//!   are standardized and clustered with DBSCAN; large dense clusters are
//!   background, everything else (including noise) is object; object cells
//!   vote a box. A logistic-regression linear classifier can be fit on the
//!   cluster labels to score new embeddings.
//! - **Uncertainty estimation**: the rotation net probes every slice along
//!   each axis with known applied angles; the mean probability assigned to
//!   the applied class forms a per-axis certainty profile, and thresholding
//!   the smoothed profiles yields the box.

pub mod dbscan;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::models::{embed, forward_rot, RotNet, SortNet, PATCH};
use crate::sampling::{build_rot_pair, RotBatch};
use crate::tape::Tape;
use crate::volume::{BBox3D, Volume3D};

pub use dbscan::{dbscan, NOISE};

/// Where one embedding vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub volume_id: usize,
    pub axis: usize,
    pub slice_index: usize,
    pub grid_row: usize,
    pub grid_col: usize,
}

/// A bag of superpixel embeddings with per-vector provenance.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    pub dim: usize,
    vectors: Vec<f32>,
    provenance: Vec<Provenance>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Self {
        EmbeddingSet {
            dim,
            vectors: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn push(&mut self, vector: &[f32], provenance: Provenance) {
        assert_eq!(vector.len(), self.dim, "embedding dimension mismatch");
        self.vectors.extend_from_slice(vector);
        self.provenance.push(provenance);
    }

    pub fn extend(&mut self, other: &EmbeddingSet) {
        assert_eq!(self.dim, other.dim);
        self.vectors.extend_from_slice(&other.vectors);
        self.provenance.extend_from_slice(&other.provenance);
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors_flat(&self) -> &[f32] {
        &self.vectors
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.provenance[i]
    }
}

/// Embeds every slice of a volume along `axis` into superpixel vectors.
pub fn embed_volume(
    net: &SortNet,
    vol: &Volume3D,
    axis: usize,
    volume_id: usize,
    mask_slices: bool,
) -> Result<EmbeddingSet> {
    let extent = vol.extent(axis);
    let per_slice: Vec<(usize, Vec<usize>, Vec<f32>)> = (0..extent)
        .into_par_iter()
        .map(|idx| {
            let mut s = crate::volume::slice_at(vol, axis, idx)?;
            if mask_slices {
                s = crate::volume::incircle_mask(&s);
            }
            let (shape, fmap, _) = embed(net, &s)?;
            Ok((idx, shape, fmap))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = EmbeddingSet::new(crate::models::EMBED_DIM);
    for (idx, shape, fmap) in per_slice {
        let (c, gh, gw) = (shape[0], shape[1], shape[2]);
        for gr in 0..gh {
            for gc in 0..gw {
                let mut v = Vec::with_capacity(c);
                for ch in 0..c {
                    v.push(fmap[(ch * gh + gr) * gw + gc]);
                }
                set.push(
                    &v,
                    Provenance {
                        volume_id,
                        axis,
                        slice_index: idx,
                        grid_row: gr,
                        grid_col: gc,
                    },
                );
            }
        }
    }
    Ok(set)
}

/// Per-dimension zero mean, unit variance (variance floor 1e-8), so a fixed
/// DBSCAN `eps` is meaningful across backbones and training states.
pub fn standardize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidArg(format!(
            "standardize needs at least 2 vectors, got {n}"
        )));
    }
    let d = set.dim;
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(set.vector(i)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for (j, &v) in set.vector(i).iter().enumerate() {
            let diff = v as f64 - mean[j];
            var[j] += diff * diff;
        }
    }
    for v in &mut var {
        *v = (*v / n as f64).max(1e-8);
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut out = EmbeddingSet::new(d);
    for i in 0..n {
        let v: Vec<f32> = set
            .vector(i)
            .iter()
            .enumerate()
            .map(|(j, &x)| ((x as f64 - mean[j]) * scale[j]) as f32)
            .collect();
        out.push(&v, set.provenance(i));
    }
    Ok(out)
}

/// Binary object/background labels derived from cluster structure.
#[derive(Debug, Clone)]
pub struct LabelOutcome {
    /// True = object, false = background.
    pub object: Vec<bool>,
    /// Set when no cluster was dense enough and everything became object.
    pub degenerate: bool,
}

/// Marks members of any cluster holding at least `dense_fraction·N` points
/// as background; everything else, noise included, becomes object.
pub fn label_background(labels: &[i32], dense_fraction: f64) -> Result<LabelOutcome> {
    if !(dense_fraction > 0.0 && dense_fraction <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "dense_fraction must be in (0,1], got {dense_fraction}"
        )));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArg("no cluster labels".into()));
    }
    let max_label = labels.iter().copied().max().unwrap_or(NOISE);
    let mut sizes = vec![0usize; (max_label.max(0) as usize) + 1];
    for &l in labels {
        if l >= 0 {
            sizes[l as usize] += 1;
        }
    }
    let threshold = dense_fraction * n as f64;
    let dense: Vec<bool> = sizes.iter().map(|&s| s as f64 >= threshold).collect();
    let object: Vec<bool> = labels
        .iter()
        .map(|&l| l < 0 || !dense[l as usize])
        .collect();
    let object_count = object.iter().filter(|&&o| o).count();
    if object_count == 0 {
        return Err(Error::NoObject(
            "every superpixel fell into a dense background cluster".into(),
        ));
    }
    Ok(LabelOutcome {
        degenerate: object_count == n,
        object,
    })
}

/// Logistic-regression linear classifier over embeddings.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub weight: Vec<f32>,
    pub bias: f32,
}

/// Fits logistic regression by full-batch gradient descent, stopping at
/// gradient norm below 1e-5 or 10⁴ iterations.
pub fn train_linear_classifier(set: &EmbeddingSet, labels: &[bool]) -> Result<LinearClassifier> {
    let n = set.len();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "train_linear_classifier",
            detail: format!("{n} vectors vs {} labels", labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass(format!(
            "{n_pos} positives out of {n}"
        )));
    }
    let d = set.dim;
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let lr = 0.5f64;
    for _ in 0..10_000 {
        let mut gw = vec![0.0f64; d];
        let mut gb = 0.0f64;
        for i in 0..n {
            let x = set.vector(i);
            let mut z = b;
            for (wj, &xj) in w.iter().zip(x) {
                z += wj * xj as f64;
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if labels[i] { 1.0 } else { 0.0 };
            for (g, &xj) in gw.iter_mut().zip(x) {
                *g += err * xj as f64;
            }
            gb += err;
        }
        let inv_n = 1.0 / n as f64;
        let mut norm2 = 0.0f64;
        for g in &mut gw {
            *g *= inv_n;
            norm2 += *g * *g;
        }
        gb *= inv_n;
        norm2 += gb * gb;
        if norm2.sqrt() < 1e-5 {
            break;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * g;
        }
        b -= lr * gb;
    }
    if !w.iter().all(|v| v.is_finite()) || !b.is_finite() {
        return Err(Error::InvalidArg("classifier diverged".into()));
    }
    Ok(LinearClassifier {
        weight: w.iter().map(|&v| v as f32).collect(),
        bias: b as f32,
    })
}

/// Pre-sigmoid margins of the classifier on each embedding.
pub fn predict(clf: &LinearClassifier, set: &EmbeddingSet) -> Vec<f32> {
    (0..set.len())
        .map(|i| {
            let mut z = clf.bias;
            for (w, &x) in clf.weight.iter().zip(set.vector(i)) {
                z += w * x;
            }
            z
        })
        .collect()
}

/// Tight box over object superpixels' voxel footprints.
///
/// Each grid cell spans a `PATCH`×`PATCH` input patch; the slicing-axis
/// bound is the min/max slice index containing any object cell.
pub fn bbox_from_superpixels(
    object: &[bool],
    set: &EmbeddingSet,
    vol_shape: [usize; 3],
) -> Result<BBox3D> {
    if object.len() != set.len() {
        return Err(Error::ShapeMismatch {
            op: "bbox_from_superpixels",
            detail: format!("{} flags vs {} vectors", object.len(), set.len()),
        });
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..set.len() {
        if !object[i] {
            continue;
        }
        any = true;
        let p = set.provenance(i);
        let (row_axis, col_axis) = match p.axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let spans = [
            (p.axis, p.slice_index, p.slice_index + 1),
            (row_axis, p.grid_row * PATCH, (p.grid_row + 1) * PATCH),
            (col_axis, p.grid_col * PATCH, (p.grid_col + 1) * PATCH),
        ];
        for (axis, s_lo, s_hi) in spans {
            lo[axis] = lo[axis].min(s_lo);
            hi[axis] = hi[axis].max(s_hi.min(vol_shape[axis]));
        }
    }
    if !any {
        return Err(Error::NoObject("no object superpixels".into()));
    }
    BBox3D::new([[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]])
}

/// Per-slice mean correct-class probability along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbProfile {
    pub axis: usize,
    pub values: Vec<f32>,
}

/// Writes a profile as CSV: header `axis,index,prob`, six decimal places.
pub fn write_profile_csv(profile: &ProbProfile, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "axis,index,prob")?;
    for (i, v) in profile.values.iter().enumerate() {
        writeln!(out, "{},{},{:.6}", profile.axis, i, v)?;
    }
    out.flush()?;
    Ok(())
}

/// Probes every slice along `axis` with known applied rotations and records
/// the mean softmax probability of the applied class.
///
/// For each slice index, `trials` pairs are built against the neighbor at
/// `clamp(index + sigma_offset)` with angles cycling through `probe_angles`.
/// Slices are processed as an order-preserving parallel map.
pub fn rotation_certainty_profile(
    net: &RotNet,
    vol: &Volume3D,
    axis: usize,
    probe_angles: &[f32],
    sigma_offset: i64,
    trials: usize,
) -> Result<ProbProfile> {
    let extent = vol.extent(axis);
    if extent < 2 {
        return Err(Error::InvalidArg(format!(
            "axis {axis} has extent {extent}, need at least 2 slices"
        )));
    }
    if probe_angles.is_empty() || trials == 0 {
        return Err(Error::InvalidArg("need at least one probe angle and trial".into()));
    }
    let table = net.angles_deg();
    let classes: Vec<usize> = probe_angles
        .iter()
        .map(|a| {
            table
                .iter()
                .position(|t| t == a)
                .ok_or_else(|| Error::InvalidArg(format!("probe angle {a} not in the net's table")))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = net.num_classes();
    let values: Vec<f32> = (0..extent)
        .into_par_iter()
        .map(|idx| {
            let mut pairs = Vec::with_capacity(trials);
            let mut labels = Vec::with_capacity(trials);
            for t in 0..trials {
                let class_idx = classes[t % classes.len()];
                pairs.push(build_rot_pair(vol, axis, idx, sigma_offset, class_idx, table)?);
                labels.push(class_idx);
            }
            let batch = RotBatch {
                pairs,
                labels: labels.clone(),
            };
            let mut tape = Tape::new();
            let fwd = forward_rot(&mut tape, net, &batch)?;
            let logits = tape.value(fwd.output);
            let mut acc = 0.0f64;
            for (row, &label) in labels.iter().enumerate() {
                let probs = softmax(&logits[row * k..(row + 1) * k]);
                acc += probs[label] as f64;
            }
            Ok((acc / trials as f64) as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbProfile { axis, values })
}

/// Centered moving average; the window is truncated at the edges.
pub fn smooth_profile(values: &[f32], window: usize) -> Vec<f32> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let sum: f32 = values[lo..hi].iter().sum();
            sum / (hi - lo) as f32
        })
        .collect()
}

/// Longest contiguous run with value ≥ `tau`, as a half-open interval.
/// Earliest run wins ties.
pub fn longest_run_at_or_above(values: &[f32], tau: f32) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v >= tau {
            start.get_or_insert(i);
        } else if let Some(s) = start.take() {
            if best.map_or(true, |(bs, be)| i - s > be - bs) {
                best = Some((s, i));
            }
        }
    }
    if let Some(s) = start {
        let n = values.len();
        if best.map_or(true, |(bs, be)| n - s > be - bs) {
            best = Some((s, n));
        }
    }
    best
}

/// Thresholds the three smoothed certainty profiles into a box.
pub fn bbox_from_profiles(
    profiles: &[ProbProfile; 3],
    tau: f32,
    smooth_window: usize,
) -> Result<BBox3D> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArg(format!("tau must be in (0,1), got {tau}")));
    }
    if smooth_window == 0 || smooth_window % 2 == 0 {
        return Err(Error::InvalidArg(format!(
            "smooth_window must be odd and >= 1, got {smooth_window}"
        )));
    }
    let mut axes = [[0usize, 0usize]; 3];
    let mut seen = [false; 3];
    for profile in profiles {
        if profile.axis > 2 || seen[profile.axis] {
            return Err(Error::InvalidArg(format!(
                "profiles must cover axes 0,1,2 exactly once (axis {})",
                profile.axis
            )));
        }
        seen[profile.axis] = true;
        let smoothed = smooth_profile(&profile.values, smooth_window);
        let (lo, hi) = longest_run_at_or_above(&smoothed, tau).ok_or_else(|| {
            Error::NoObject(format!(
                "no certainty above tau={tau} on axis {}",
                profile.axis
            ))
        })?;
        axes[profile.axis] = [lo, hi];
    }
    BBox3D::new(axes)
}

/// Intersection-over-union of two boxes.
pub fn iou3d(a: &BBox3D, b: &BBox3D) -> f64 {
    let mut inter = 1usize;
    for axis in 0..3 {
        let lo = a.axes[axis][0].max(b.axes[axis][0]);
        let hi = a.axes[axis][1].min(b.axes[axis][1]);
        if lo >= hi {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.num_voxels() + b.num_voxels() - inter;
    inter as f64 / union as f64
}

/// Absolute endpoint errors between two boxes, in voxels.
#[derive(Debug, Clone, Copy)]
pub struct BBoxError {
    /// Mean of |Δlo| and |Δhi| per axis.
    pub per_axis: [f64; 3],
    /// Mean over all six interval endpoints.
    pub mean: f64,
}

pub fn bbox_abs_error(a: &BBox3D, b: &BBox3D) -> BBoxError {
    let mut per_axis = [0.0f64; 3];
    let mut total = 0.0f64;
    for axis in 0..3 {
        let dlo = (a.axes[axis][0] as f64 - b.axes[axis][0] as f64).abs();
        let dhi = (a.axes[axis][1] as f64 - b.axes[axis][1] as f64).abs();
        per_axis[axis] = (dlo + dhi) / 2.0;
        total += dlo + dhi;
    }
    BBoxError {
        per_axis,
        mean: total / 6.0,
    }
}

/// Tuning knobs for the clustering route.
#[derive(Debug, Clone)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
    pub dense_fraction: f64,
    pub axis: usize,
    pub mask_slices: bool,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            eps: 0.5,
            min_pts: 8,
            dense_fraction: 0.2,
            axis: 0,
            mask_slices: true,
        }
    }
}

/// Full clustering route on one volume: embed → standardize → DBSCAN →
/// background labeling → box.
pub fn cluster_localize(
    net: &SortNet,
    vol: &Volume3D,
    params: &ClusterParams,
) -> Result<(BBox3D, LabelOutcome, EmbeddingSet)> {
    let set = embed_volume(net, vol, params.axis, 0, params.mask_slices)?;
    let standardized = standardize(&set)?;
    let labels = dbscan(
        standardized.vectors_flat(),
        standardized.dim,
        params.eps,
        params.min_pts,
    );
    let outcome = label_background(&labels, params.dense_fraction)?;
    let bbox = bbox_from_superpixels(&outcome.object, &standardized, vol.shape())?;
    Ok((bbox, outcome, standardized))
}

/// Tuning knobs for the uncertainty route.
#[derive(Debug, Clone)]
pub struct UncertaintyParams {
    /// Angles to probe; `None` probes the net's whole table once per slice.
    pub probe_angles: Option<Vec<f32>>,
    pub sigma_offset: i64,
    pub tau: f32,
    pub smooth_window: usize,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        UncertaintyParams {
            probe_angles: None,
            sigma_offset: 2,
            tau: 0.5,
            smooth_window: 5,
        }
    }
}

/// Full uncertainty route: three per-axis certainty profiles, thresholded
/// into a box.
pub fn uncertainty_localize(
    net: &RotNet,
    vol: &Volume3D,
    params: &UncertaintyParams,
) -> Result<(BBox3D, [ProbProfile; 3])> {
    let angles = params
        .probe_angles
        .clone()
        .unwrap_or_else(|| net.angles_deg().to_vec());
    let trials = angles.len();
    let mut profiles = Vec::with_capacity(3);
    for axis in 0..3 {
        profiles.push(rotation_certainty_profile(
            net,
            vol,
            axis,
            &angles,
            params.sigma_offset,
            trials,
        )?);
    }
    let profiles: [ProbProfile; 3] = profiles.try_into().expect("three profiles");
    let bbox = bbox_from_profiles(&profiles, params.tau, params.smooth_window)?;
    Ok((bbox, profiles))
}
