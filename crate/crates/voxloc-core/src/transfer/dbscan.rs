//! Density-based clustering with noise detection.
//!
//! Standard semantics: a core point has at least `min_pts` neighbors within
//! `eps` (Euclidean, self included); clusters grow by density-reachability;
//! border points go to the first cluster that claims them; everything else
//! is noise (label −1). The scan visits points in index order and expands
//! breadth-first, so output is deterministic.

use std::collections::VecDeque;

pub const NOISE: i32 = -1;
const UNCLASSIFIED: i32 = -2;

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn region_query(points: &[f32], dim: usize, n: usize, p: usize, eps2: f64) -> Vec<usize> {
    let anchor = &points[p * dim..(p + 1) * dim];
    (0..n)
        .filter(|&q| dist2(anchor, &points[q * dim..(q + 1) * dim]) <= eps2)
        .collect()
}

/// Clusters `n` points of dimension `dim` stored row-major in `points`.
///
/// Returns one label per point: `0, 1, …` for clusters in discovery order,
/// [`NOISE`] for outliers.
pub fn dbscan(points: &[f32], dim: usize, eps: f64, min_pts: usize) -> Vec<i32> {
    assert!(dim > 0 && eps > 0.0 && min_pts >= 1, "invalid dbscan parameters");
    assert_eq!(points.len() % dim, 0, "ragged point matrix");
    let n = points.len() / dim;
    let eps2 = eps * eps;
    let mut labels = vec![UNCLASSIFIED; n];
    let mut cluster = 0i32;
    for p in 0..n {
        if labels[p] != UNCLASSIFIED {
            continue;
        }
        let neighbors = region_query(points, dim, n, p, eps2);
        if neighbors.len() < min_pts {
            labels[p] = NOISE;
            continue;
        }
        labels[p] = cluster;
        let mut queue: VecDeque<usize> = neighbors.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            if labels[q] == NOISE {
                labels[q] = cluster; // border point, first claim wins
                continue;
            }
            if labels[q] != UNCLASSIFIED {
                continue;
            }
            labels[q] = cluster;
            let reach = region_query(points, dim, n, q, eps2);
            if reach.len() >= min_pts {
                queue.extend(reach);
            }
        }
        cluster += 1;
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent reference: distance matrix, explicit core set, connected
    /// components over cores, then border assignment by cluster order.
    fn dbscan_reference(points: &[f32], dim: usize, eps: f64, min_pts: usize) -> Vec<i32> {
        let n = points.len() / dim;
        let eps2 = eps * eps;
        let mut within = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                within[i][j] = dist2(
                    &points[i * dim..(i + 1) * dim],
                    &points[j * dim..(j + 1) * dim],
                ) <= eps2;
            }
        }
        let core: Vec<bool> = (0..n)
            .map(|i| (0..n).filter(|&j| within[i][j]).count() >= min_pts)
            .collect();
        // Components of the core graph, rooted in index order.
        let mut labels = vec![NOISE; n];
        let mut cluster = 0i32;
        for start in 0..n {
            if !core[start] || labels[start] != NOISE {
                continue;
            }
            let mut stack = vec![start];
            labels[start] = cluster;
            while let Some(c) = stack.pop() {
                for next in 0..n {
                    if core[next] && within[c][next] && labels[next] == NOISE {
                        labels[next] = cluster;
                        stack.push(next);
                    }
                }
            }
            cluster += 1;
        }
        // Borders: non-core within eps of a core, lowest cluster id claims.
        for i in 0..n {
            if core[i] || labels[i] != NOISE {
                continue;
            }
            let mut best: Option<i32> = None;
            for j in 0..n {
                if core[j] && within[i][j] {
                    best = Some(match best {
                        Some(b) => b.min(labels[j]),
                        None => labels[j],
                    });
                }
            }
            if let Some(b) = best {
                labels[i] = b;
            }
        }
        labels
    }

    /// Checks two labelings are equal up to a bijective cluster renaming,
    /// with identical noise sets.
    fn equivalent_up_to_relabeling(a: &[i32], b: &[i32]) -> bool {
        if a.len() != b.len() {
            return false;
        }
        let mut fwd = std::collections::HashMap::new();
        let mut rev = std::collections::HashMap::new();
        for (&x, &y) in a.iter().zip(b) {
            if (x == NOISE) != (y == NOISE) {
                return false;
            }
            if x == NOISE {
                continue;
            }
            if *fwd.entry(x).or_insert(y) != y || *rev.entry(y).or_insert(x) != x {
                return false;
            }
        }
        true
    }

    fn blob(center: &[f32], spread: f32, count: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut out = Vec::new();
        for _ in 0..count {
            for &c in center {
                out.push(c + rng.random_range(-spread..spread));
            }
        }
        out
    }

    #[test]
    fn two_separated_blobs_form_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = blob(&[0.0, 0.0], 0.2, 20, &mut rng);
        points.extend(blob(&[10.0, 10.0], 0.2, 20, &mut rng));
        let labels = dbscan(&points, 2, 1.0, 4);
        assert!(labels.iter().all(|&l| l != NOISE));
        let clusters: std::collections::BTreeSet<i32> = labels.iter().copied().collect();
        assert_eq!(clusters.len(), 2);
        assert!(labels[..20].iter().all(|&l| l == labels[0]));
        assert!(labels[20..].iter().all(|&l| l == labels[20]));
    }

    #[test]
    fn isolated_point_is_noise() {
        let points = vec![0.0f32, 0.0, 0.1, 0.0, 0.0, 0.1, 50.0, 50.0];
        let labels = dbscan(&points, 2, 1.0, 2);
        assert_eq!(labels[3], NOISE);
        assert!(labels[..3].iter().all(|&l| l == 0));
    }

    #[test]
    fn matches_reference_on_random_point_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..30 {
            let dim = rng.random_range(2..=5);
            let n = rng.random_range(20..=200);
            let points: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let eps = rng.random_range(0.3..1.2);
            let min_pts = rng.random_range(2..=6);
            let got = dbscan(&points, dim, eps, min_pts);
            let want = dbscan_reference(&points, dim, eps, min_pts);
            assert!(
                equivalent_up_to_relabeling(&got, &want),
                "case {case}: dim={dim} n={n} eps={eps} min_pts={min_pts}\n{got:?}\n{want:?}"
            );
        }
    }

    #[test]
    fn noise_set_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 60;
        let dim = 3;
        let points: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let base = dbscan(&points, dim, 0.5, 4);

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = vec![0.0f32; n * dim];
        for (new_i, &old_i) in perm.iter().enumerate() {
            shuffled[new_i * dim..(new_i + 1) * dim]
                .copy_from_slice(&points[old_i * dim..(old_i + 1) * dim]);
        }
        let permuted = dbscan(&shuffled, dim, 0.5, 4);
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert_eq!(
                base[old_i] == NOISE,
                permuted[new_i] == NOISE,
                "noise flag changed under permutation at {old_i}"
            );
        }
    }

    #[test]
    fn well_separated_clusters_invariant_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut points = blob(&[0.0, 0.0, 0.0], 0.3, 15, &mut rng);
        points.extend(blob(&[8.0, 0.0, 0.0], 0.3, 15, &mut rng));
        points.extend(blob(&[0.0, 8.0, 0.0], 0.3, 15, &mut rng));
        points.extend(vec![30.0, 30.0, 30.0]); // one outlier
        let n = 46;
        let dim = 3;
        let base = dbscan(&points, dim, 1.0, 4);

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = vec![0.0f32; n * dim];
        for (new_i, &old_i) in perm.iter().enumerate() {
            shuffled[new_i * dim..(new_i + 1) * dim]
                .copy_from_slice(&points[old_i * dim..(old_i + 1) * dim]);
        }
        let permuted = dbscan(&shuffled, dim, 1.0, 4);
        let unshuffled: Vec<i32> = {
            let mut out = vec![0i32; n];
            for (new_i, &old_i) in perm.iter().enumerate() {
                out[old_i] = permuted[new_i];
            }
            out
        };
        assert!(equivalent_up_to_relabeling(&base, &unshuffled));
    }
}
