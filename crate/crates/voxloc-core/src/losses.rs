//! Pretext losses and evaluation metrics.
//!
//! The two losses are differentiable tape operations; the metrics
//! (mean displacement, AUROC) are pure functions of plain buffers.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Pairwise margin ranking loss over unordered pairs, recorded on the tape.
///
/// Zero iff every higher-ranked slice outscores every lower-ranked one by at
/// least `margin`.
pub fn margin_ranking_loss(
    tape: &mut Tape,
    scores: Var,
    ranks: &[usize],
    margin: f32,
) -> Result<Var> {
    tape.margin_ranking(scores, ranks, margin)
}

/// Mean negative log-likelihood of the labels under a softmax over logits.
pub fn rotation_nll(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_nll(logits, labels)
}

/// Ranks induced by ascending scores (ties broken by index).
fn score_ranks(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0usize; scores.len()];
    for (rank, &i) in order.iter().enumerate() {
        ranks[i] = rank;
    }
    ranks
}

/// Mean absolute distance between the score-induced order and the true
/// ranks: `(1/bs)·Σ |y_i − ξ_i|` with `ξ` the ascending-score rank.
pub fn mean_displacement(scores: &[f32], ranks: &[usize]) -> Result<f32> {
    if scores.len() != ranks.len() {
        return Err(Error::ShapeMismatch {
            op: "mean_displacement",
            detail: format!("{} scores vs {} ranks", scores.len(), ranks.len()),
        });
    }
    validate_permutation(ranks)?;
    let predicted = score_ranks(scores);
    let total: f64 = predicted
        .iter()
        .zip(ranks)
        .map(|(&p, &y)| (p as f64 - y as f64).abs())
        .sum();
    Ok((total / scores.len() as f64) as f32)
}

/// Softmax over one row of logits.
pub fn softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let denom: f32 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counted half (Mann–Whitney U
/// normalization).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auroc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!(
            "{n_pos} positives, {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks for ties, 1-based.
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn validate_permutation(ranks: &[usize]) -> Result<()> {
    let n = ranks.len();
    let mut seen = vec![false; n];
    for &r in ranks {
        if r >= n || seen[r] {
            return Err(Error::InvalidRanks {
                len: n,
                detail: format!("rank {r} invalid or repeated"),
            });
        }
        seen[r] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent double-loop oracle for the pairwise margin loss.
    fn margin_oracle(scores: &[f32], ranks: &[usize], margin: f32) -> f32 {
        let n = scores.len();
        let mut total = 0.0f32;
        for i in 0..n {
            for j in 0..n {
                if i >= j {
                    continue;
                }
                let sign = (ranks[j] as i64 - ranks[i] as i64).signum() as f32;
                let term = margin - sign * (scores[j] - scores[i]);
                if term > 0.0 {
                    total += term;
                }
            }
        }
        total
    }

    fn loss_value(scores: &[f32], ranks: &[usize], margin: f32) -> f32 {
        let mut tape = Tape::new();
        let v = tape.leaf_from(vec![scores.len()], scores.to_vec(), false);
        let loss = margin_ranking_loss(&mut tape, v, ranks, margin).unwrap();
        tape.scalar(loss).unwrap()
    }

    #[test]
    fn margin_loss_matches_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(2..=6);
            let scores: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut indices: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                indices.swap(i, rng.random_range(0..=i));
            }
            let got = loss_value(&scores, &indices, 0.1);
            let want = margin_oracle(&scores, &indices, 0.1);
            assert_eq!(got, want, "scores {scores:?} ranks {indices:?}");
        }
    }

    #[test]
    fn margin_loss_invariant_to_score_shift() {
        let scores = [0.3f32, -0.7, 1.1, 0.05];
        let ranks = [2usize, 0, 3, 1];
        let base = loss_value(&scores, &ranks, 0.1);
        let shifted: Vec<f32> = scores.iter().map(|s| s + 0.5).collect();
        let moved = loss_value(&shifted, &ranks, 0.1);
        assert!((base - moved).abs() < 1e-5, "{base} vs {moved}");
    }

    #[test]
    fn widening_a_violating_gap_decreases_loss() {
        // Item 1 outranks item 0 but trails in score: raising its score
        // strictly decreases the loss until the margin is met.
        let ranks = [0usize, 1];
        let base = loss_value(&[0.5, 0.0], &ranks, 0.1);
        let better = loss_value(&[0.5, 0.3], &ranks, 0.1);
        let met = loss_value(&[0.5, 0.7], &ranks, 0.1);
        assert!(base > better && better > met);
        assert_eq!(met, 0.0);
    }

    #[test]
    fn displacement_examples() {
        assert_eq!(
            mean_displacement(&[0.1, 0.2, 0.3], &[0, 1, 2]).unwrap(),
            0.0
        );
        // Reversed order at bs = 4: (3+1+1+3)/4 = 2.0
        assert_eq!(
            mean_displacement(&[0.4, 0.3, 0.2, 0.1], &[0, 1, 2, 3]).unwrap(),
            2.0
        );
    }

    #[test]
    fn displacement_random_baseline_matches_closed_form() {
        // E[mean displacement] for a random ranking is (bs²−1)/(3·bs).
        let bs = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let trials = 100_000;
        let mut acc = 0.0f64;
        let ranks: Vec<usize> = (0..bs).collect();
        for _ in 0..trials {
            let scores: Vec<f32> = (0..bs).map(|_| rng.random::<f32>()).collect();
            acc += mean_displacement(&scores, &ranks).unwrap() as f64;
        }
        let got = acc / trials as f64;
        let want = ((bs * bs - 1) as f64) / (3.0 * bs as f64);
        assert!((got - want).abs() < 0.05, "{got} vs {want}");
    }

    #[test]
    fn displacement_invariant_under_monotone_transform() {
        let scores = [0.4f32, -1.0, 0.2, 2.0, 0.9];
        let ranks = [3usize, 0, 4, 1, 2];
        let base = mean_displacement(&scores, &ranks).unwrap();
        let warped: Vec<f32> = scores.iter().map(|s| (s * 2.0).exp()).collect();
        assert_eq!(base, mean_displacement(&warped, &ranks).unwrap());
    }

    #[test]
    fn displacement_symmetry_under_reversal() {
        let scores = [0.4f32, -1.0, 0.2, 2.0];
        let ranks = [3usize, 0, 2, 1];
        let reversed_ranks: Vec<usize> = ranks.iter().map(|&r| 3 - r).collect();
        let negated: Vec<f32> = scores.iter().map(|s| -s).collect();
        assert_eq!(
            mean_displacement(&scores, &ranks).unwrap(),
            mean_displacement(&negated, &reversed_ranks).unwrap()
        );
    }

    #[test]
    fn nll_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, k) = (5, 7);
        let logits: Vec<f32> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut tape = Tape::new();
        let v = tape.leaf_from(vec![n, k], logits.clone(), false);
        let loss = rotation_nll(&mut tape, v, &labels).unwrap();
        let got = tape.scalar(loss).unwrap();
        let mut want = 0.0f32;
        for i in 0..n {
            let p = softmax(&logits[i * k..(i + 1) * k]);
            want += -p[labels[i]].ln();
        }
        want /= n as f32;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn nll_saturated_and_nonnegative() {
        let mut tape = Tape::new();
        let mut logits = vec![0.0f32; 7];
        logits[3] = 20.0;
        let v = tape.leaf_from(vec![1, 7], logits, false);
        let loss = rotation_nll(&mut tape, v, &[3]).unwrap();
        let val = tape.scalar(loss).unwrap();
        assert!(val >= 0.0 && val < 1e-6, "{val}");
    }

    /// Quadratic pair-counting AUROC oracle.
    fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auroc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.5, 0.4], &[true, true]),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn auroc_matches_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let n = 50;
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..10) as f64) / 10.0)
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let got = auroc(&scores, &labels).unwrap();
            let want = auroc_oracle(&scores, &labels);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let scores = [0.1f64, 0.7, 0.3, 0.9, 0.5];
        let labels = [false, true, false, true, true];
        let base = auroc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        assert_eq!(base, auroc(&warped, &labels).unwrap());
    }
}
