//! The two convolutional model heads.
//!
//! Both share a 4-stage backbone (3×3 conv, relu, 2× max pool per stage,
//! channels 16/32/64/64) ending in a 64-dim embedding by global average
//! pooling. The sorting head maps the embedding to one scalar score; the
//! rotation head to one logit per angle class. Inputs must have spatial
//! extents divisible by 16 so the four pooling stages divide evenly.
//!
//! Forward passes are pure functions of parameters and input; many threads
//! may run inference against one parameter set. Training mutates parameters
//! single-threaded.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{load_checkpoint_into, read_checkpoint_meta, save_checkpoint};
use crate::error::{Error, Result};
use crate::sampling::{RotBatch, SortBatch};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::volume::Slice2D;

/// Backbone stage output channels.
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 64];
/// Embedding dimension (the last stage's channel count).
pub const EMBED_DIM: usize = 64;
/// Total spatial downsampling: one 2× pool per stage.
pub const PATCH: usize = 16;

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: Tensor,
    bias: Tensor,
}

/// Shared convolutional trunk.
#[derive(Debug, Clone)]
pub struct Backbone {
    in_channels: usize,
    blocks: Vec<ConvBlock>,
}

fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("consistent shape").with_requires_grad()
}

impl Backbone {
    fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(STAGE_CHANNELS.len());
        let mut c_in = in_channels;
        for &c_out in &STAGE_CHANNELS {
            let weight = kaiming(vec![c_out, c_in, 3, 3], c_in * 9, rng);
            let bias = Tensor::zeros(vec![c_out]).with_requires_grad();
            blocks.push(ConvBlock { weight, bias });
            c_in = c_out;
        }
        Backbone { in_channels, blocks }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &b.weight));
            out.push((format!("conv{}.bias", i + 1), &b.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias])
            .collect()
    }

    /// Registers all parameters on the tape, in `named_params` order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| [tape.leaf(&b.weight), tape.leaf(&b.bias)])
            .collect()
    }

    /// Runs the trunk; returns the pre-pooling feature map and the pooled
    /// embedding.
    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for i in 0..self.blocks.len() {
            h = tape.conv2d(h, bound[2 * i], bound[2 * i + 1], 1, 1)?;
            h = tape.relu(h);
            h = tape.maxpool2d(h, 2)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        Ok((h, pooled))
    }
}

fn check_spatial(h: usize, w: usize, op: &'static str) -> Result<()> {
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("spatial extents {h}x{w} must be positive multiples of {PATCH}"),
        });
    }
    Ok(())
}

/// Scoring network for the sorting pretext: 1-channel trunk plus a linear
/// head producing one comparable scalar per slice.
#[derive(Debug, Clone)]
pub struct SortNet {
    pub backbone: Backbone,
    head_weight: Tensor,
    head_bias: Tensor,
}

/// Classification network for the rotation pretext: 2-channel trunk plus a
/// linear head producing one logit per angle class.
///
/// The net carries its angle table; checkpoints store only parameters, so
/// loading takes the table again and checks it against the stored head.
#[derive(Debug, Clone)]
pub struct RotNet {
    pub backbone: Backbone,
    head_weight: Tensor,
    head_bias: Tensor,
    angles_deg: Vec<f32>,
}

/// Forward results carry the parameter vars (in `named_params` order) so the
/// training loop can read gradients after backward.
pub struct Forward {
    pub output: Var,
    pub param_vars: Vec<Var>,
}

impl SortNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(1, &mut rng);
        let head_weight = kaiming(vec![1, EMBED_DIM], EMBED_DIM, &mut rng);
        let head_bias = Tensor::zeros(vec![1]).with_requires_grad();
        SortNet {
            backbone,
            head_weight,
            head_bias,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_params();
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.named_params(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut net = SortNet::new(0);
        let mut params: Vec<(String, &mut Tensor)> = Vec::new();
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, tensor) in names.into_iter().zip(net.params_mut()) {
            params.push((name, tensor));
        }
        load_checkpoint_into(&mut params, path)?;
        Ok(net)
    }
}

impl RotNet {
    pub fn new(seed: u64, angles_deg: Vec<f32>) -> Self {
        assert!(!angles_deg.is_empty(), "angle table must be nonempty");
        let num_classes = angles_deg.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(2, &mut rng);
        let head_weight = kaiming(vec![num_classes, EMBED_DIM], EMBED_DIM, &mut rng);
        let head_bias = Tensor::zeros(vec![num_classes]).with_requires_grad();
        RotNet {
            backbone,
            head_weight,
            head_bias,
            angles_deg,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn angles_deg(&self) -> &[f32] {
        &self.angles_deg
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_params();
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.backbone.params_mut();
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.named_params(), path)
    }

    /// Loads a rotation checkpoint. The stored head must have one logit per
    /// entry of `angles_deg`; a sorting checkpoint is rejected by its
    /// 1-channel first-stage weight shape.
    pub fn load(path: &Path, angles_deg: Vec<f32>) -> Result<Self> {
        let metas = read_checkpoint_meta(path)?;
        let head = metas
            .iter()
            .find(|m| m.name == "head.weight")
            .ok_or_else(|| Error::BadHeader("checkpoint has no head.weight".into()))?;
        if head.shape != [angles_deg.len(), EMBED_DIM] {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                detail: format!(
                    "stored head.weight {:?} does not fit {} angle classes",
                    head.shape,
                    angles_deg.len()
                ),
            });
        }
        let mut net = RotNet::new(0, angles_deg);
        let mut params: Vec<(String, &mut Tensor)> = Vec::new();
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (name, tensor) in names.into_iter().zip(net.params_mut()) {
            params.push((name, tensor));
        }
        load_checkpoint_into(&mut params, path)?;
        Ok(net)
    }
}

fn batch_tensor(slices: &[&Slice2D], op: &'static str) -> Result<(Vec<usize>, Vec<f32>)> {
    let (h, w) = (slices[0].height, slices[0].width);
    check_spatial(h, w, op)?;
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.height != h || s.width != w {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("mixed slice extents {h}x{w} vs {}x{}", s.height, s.width),
            });
        }
        data.extend_from_slice(&s.data);
    }
    Ok((vec![slices.len(), 1, h, w], data))
}

/// Scores a sorting batch: output shape `[bs, 1]`.
pub fn forward_sort(tape: &mut Tape, net: &SortNet, batch: &SortBatch) -> Result<Forward> {
    if batch.slices.is_empty() {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    let refs: Vec<&Slice2D> = batch.slices.iter().collect();
    let (shape, data) = batch_tensor(&refs, "forward_sort")?;
    let x = tape.leaf_from(shape, data, false);
    let mut param_vars = net.backbone.bind(tape);
    let head_w = tape.leaf(&net.head_weight);
    let head_b = tape.leaf(&net.head_bias);
    let (_, pooled) = net.backbone.forward(tape, &param_vars, x)?;
    let scores = tape.linear(pooled, head_w, head_b)?;
    param_vars.push(head_w);
    param_vars.push(head_b);
    Ok(Forward {
        output: scores,
        param_vars,
    })
}

/// Classifies a rotation batch: output shape `[bs, |A|]`.
pub fn forward_rot(tape: &mut Tape, net: &RotNet, batch: &RotBatch) -> Result<Forward> {
    if batch.pairs.is_empty() {
        return Err(Error::InvalidArg("empty batch".into()));
    }
    let refs: Vec<&Slice2D> = batch.pairs.iter().map(|(a, _)| a).collect();
    let rots: Vec<&Slice2D> = batch.pairs.iter().map(|(_, b)| b).collect();
    let (shape_a, data_a) = batch_tensor(&refs, "forward_rot")?;
    let (shape_b, data_b) = batch_tensor(&rots, "forward_rot")?;
    let a = tape.leaf_from(shape_a, data_a, false);
    let b = tape.leaf_from(shape_b, data_b, false);
    let x = tape.concat_channels(a, b)?;
    let mut param_vars = net.backbone.bind(tape);
    let head_w = tape.leaf(&net.head_weight);
    let head_b = tape.leaf(&net.head_bias);
    let (_, pooled) = net.backbone.forward(tape, &param_vars, x)?;
    let logits = tape.linear(pooled, head_w, head_b)?;
    param_vars.push(head_w);
    param_vars.push(head_b);
    Ok(Forward {
        output: logits,
        param_vars,
    })
}

/// Embeds one slice with the sorting trunk.
///
/// Returns the pre-pooling feature map (shape `[64, H/16, W/16]`, one
/// 64-dim "superpixel" per 16×16 input patch) and the pooled 64-vector.
pub fn embed(net: &SortNet, slice: &Slice2D) -> Result<(Vec<usize>, Vec<f32>, Vec<f32>)> {
    check_spatial(slice.height, slice.width, "embed")?;
    let mut tape = Tape::new();
    let x = tape.leaf_from(
        vec![1, 1, slice.height, slice.width],
        slice.data.clone(),
        false,
    );
    let bound = net.backbone.bind(&mut tape);
    let (fmap, pooled) = net.backbone.forward(&mut tape, &bound, x)?;
    let s = tape.shape(fmap).to_vec();
    Ok((
        vec![s[1], s[2], s[3]],
        tape.value(fmap).to_vec(),
        tape.value(pooled).to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SamplerConfig;

    fn flat_slice(h: usize, w: usize, value: f32) -> Slice2D {
        Slice2D::new(h, w, vec![value; h * w]).unwrap()
    }

    fn textured_slice(h: usize, w: usize, seed: u32) -> Slice2D {
        let data: Vec<f32> = (0..h * w)
            .map(|i| ((i as f32 + seed as f32) * 0.13).sin())
            .collect();
        Slice2D::new(h, w, data).unwrap()
    }

    fn sort_batch(slices: Vec<Slice2D>) -> SortBatch {
        let n = slices.len();
        SortBatch {
            slices,
            ranks: (0..n).collect(),
            indices: (0..n).collect(),
        }
    }

    #[test]
    fn identical_slices_get_identical_scores() {
        let net = SortNet::new(3);
        let s = textured_slice(32, 32, 5);
        let batch = sort_batch(vec![s.clone(), textured_slice(32, 32, 9), s]);
        let mut tape = Tape::new();
        let fwd = forward_sort(&mut tape, &net, &batch).unwrap();
        let scores = tape.value(fwd.output);
        assert_eq!(tape.shape(fwd.output), &[3, 1]);
        assert_eq!(scores[0], scores[2]);
        assert_ne!(scores[0], scores[1]);
    }

    #[test]
    fn sort_output_shape_bs12() {
        let net = SortNet::new(1);
        let slices = (0..12).map(|i| textured_slice(32, 32, i)).collect();
        let mut tape = Tape::new();
        let fwd = forward_sort(&mut tape, &net, &sort_batch(slices)).unwrap();
        assert_eq!(tape.shape(fwd.output), &[12, 1]);
    }

    #[test]
    fn rot_logits_shape_and_row_permutation() {
        let net = RotNet::new(2, SamplerConfig::default_angles());
        let pairs: Vec<(Slice2D, Slice2D)> = (0..4)
            .map(|i| (textured_slice(32, 32, i), textured_slice(32, 32, i + 100)))
            .collect();
        let batch = RotBatch {
            pairs: pairs.clone(),
            labels: vec![0, 1, 2, 3],
        };
        let mut tape = Tape::new();
        let fwd = forward_rot(&mut tape, &net, &batch).unwrap();
        assert_eq!(tape.shape(fwd.output), &[4, 7]);
        let logits = tape.value(fwd.output).to_vec();

        let permuted = RotBatch {
            pairs: vec![
                pairs[2].clone(),
                pairs[0].clone(),
                pairs[3].clone(),
                pairs[1].clone(),
            ],
            labels: vec![2, 0, 3, 1],
        };
        let mut tape2 = Tape::new();
        let fwd2 = forward_rot(&mut tape2, &net, &permuted).unwrap();
        let logits2 = tape2.value(fwd2.output);
        for (new_row, &old_row) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(
                &logits2[new_row * 7..(new_row + 1) * 7],
                &logits[old_row * 7..(old_row + 1) * 7]
            );
        }
    }

    #[test]
    fn mixed_extents_rejected() {
        let net = SortNet::new(0);
        let batch = sort_batch(vec![flat_slice(32, 32, 1.0), flat_slice(48, 48, 1.0)]);
        let mut tape = Tape::new();
        assert!(forward_sort(&mut tape, &net, &batch).is_err());
    }

    #[test]
    fn embed_grid_and_pooled_mean() {
        let net = SortNet::new(4);
        let s = textured_slice(64, 64, 2);
        let (shape, fmap, pooled) = embed(&net, &s).unwrap();
        assert_eq!(shape, vec![EMBED_DIM, 4, 4]);
        // Pooled vector equals the mean of the 16 spatial vectors.
        for c in 0..EMBED_DIM {
            let mean: f32 = (0..16).map(|p| fmap[c * 16 + p]).sum::<f32>() / 16.0;
            assert!((mean - pooled[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_constant_zero_input_is_position_invariant() {
        let net = SortNet::new(8);
        let (shape, fmap, _) = embed(&net, &flat_slice(64, 64, 0.0)).unwrap();
        let positions = shape[1] * shape[2];
        for c in 0..shape[0] {
            let first = fmap[c * positions];
            for p in 1..positions {
                assert_eq!(fmap[c * positions + p], first);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = SortNet::new(6);
        let batch = sort_batch(vec![textured_slice(32, 32, 1), textured_slice(32, 32, 2)]);
        let run = || {
            let mut tape = Tape::new();
            let fwd = forward_sort(&mut tape, &net, &batch).unwrap();
            tape.value(fwd.output).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn param_count_is_seed_independent() {
        assert_eq!(SortNet::new(0).num_params(), SortNet::new(99).num_params());
        assert_eq!(
            RotNet::new(0, SamplerConfig::default_angles()).num_params(),
            RotNet::new(123, SamplerConfig::default_angles()).num_params()
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let net = RotNet::new(11, SamplerConfig::default_angles());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rot.vckp");
        net.save(&path).unwrap();
        let loaded = RotNet::load(&path, SamplerConfig::default_angles()).unwrap();
        assert_eq!(loaded.num_classes(), 7);
        let batch = RotBatch {
            pairs: vec![(textured_slice(32, 32, 3), textured_slice(32, 32, 4))],
            labels: vec![0],
        };
        let mut t1 = Tape::new();
        let a = forward_rot(&mut t1, &net, &batch).unwrap();
        let mut t2 = Tape::new();
        let b = forward_rot(&mut t2, &loaded, &batch).unwrap();
        assert_eq!(t1.value(a.output), t2.value(b.output));
    }

    #[test]
    fn sort_checkpoint_rejected_by_rot_loader() {
        let net = SortNet::new(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sort.vckp");
        net.save(&path).unwrap();
        let err = RotNet::load(&path, SamplerConfig::default_angles()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn checkpoint_byte_length_audit() {
        let net = SortNet::new(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sort.vckp");
        net.save(&path).unwrap();
        let metas = crate::checkpoint::read_checkpoint_meta(&path).unwrap();
        let header = serde_json::to_string(&metas).unwrap();
        let expected = 6 + header.len() + 1 + 4 * net.num_params();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
    }

    #[test]
    fn untrained_rot_accuracy_is_chance() {
        use rand::SeedableRng;
        let spec = crate::volume::phantom::PhantomSpec {
            seed: 77,
            extents: [48, 64, 64],
            ..Default::default()
        };
        let (vol, _) = crate::volume::phantom::gen_phantom(&spec).unwrap();
        let net = RotNet::new(13, SamplerConfig::default_angles());
        let cfg = SamplerConfig {
            batch_size: 10,
            slice_dist: crate::sampling::SliceDist::Uniform,
            sigma_halfwidth: 3,
            angles_deg: SamplerConfig::default_angles(),
            axis: 0,
            mask_slices: true,
            augment: Default::default(),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(55);
        let mut correct = 0usize;
        let mut total = 0usize;
        for _ in 0..15 {
            let batch = crate::sampling::sample_rot_batch(&vol, &cfg, &mut rng).unwrap();
            let mut tape = Tape::new();
            let fwd = forward_rot(&mut tape, &net, &batch).unwrap();
            let logits = tape.value(fwd.output);
            for (row, &label) in batch.labels.iter().enumerate() {
                let row_logits = &logits[row * 7..(row + 1) * 7];
                let argmax = row_logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == label {
                    correct += 1;
                }
                total += 1;
            }
        }
        let accuracy = correct as f64 / total as f64;
        let p = 1.0 / 7.0;
        let sd = (p * (1.0 - p) / total as f64).sqrt();
        assert!(
            (accuracy - p).abs() < 5.0 * sd + 0.02,
            "accuracy {accuracy} vs chance {p}"
        );
    }
}
