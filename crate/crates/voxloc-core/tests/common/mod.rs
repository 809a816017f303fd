//! Shared test oracles.
//!
//! The finite-difference gradient check here is the independent oracle for
//! every differentiable tape operation: it never touches the backward pass,
//! only repeated forward evaluations with perturbed leaf data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxloc_core::tape::{Tape, Var};

/// Central-difference step mandated by the checks.
pub const FD_H: f32 = 1e-3;

/// Relative-error floor sized for single-precision forward noise: the f32
/// loss quantization puts ~1e-4 of absolute noise on each finite
/// difference, so elements whose true gradient is below this floor are
/// compared against it instead of their own magnitude.
pub const REL_FLOOR: f32 = 0.05;

/// Builds a loss from registered leaves. Called many times with perturbed
/// data, so it must be a pure function of the leaf buffers.
pub type BuildLoss = dyn Fn(&mut Tape, &[Var]) -> Var;

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `leaves`: (shape, data, requires_grad) triples registered in order.
/// `targets`: (leaf index, element index) pairs to check; leaves named there
/// must require gradients.
pub fn finite_diff_check(
    leaves: &[(Vec<usize>, Vec<f32>, bool)],
    targets: &[(usize, usize)],
    build: &BuildLoss,
) -> FdReport {
    let run = |data_override: Option<(usize, usize, f32)>| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves
            .iter()
            .enumerate()
            .map(|(li, (shape, data, rg))| {
                let mut data = data.clone();
                if let Some((l, e, v)) = data_override {
                    if l == li {
                        data[e] = v;
                    }
                }
                tape.leaf_from(shape.clone(), data, *rg)
            })
            .collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };

    let (mut tape, vars, loss) = run(None);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<f32> = targets
        .iter()
        .map(|&(l, e)| tape.grad(vars[l])[e])
        .collect();

    let mut max_rel_err = 0.0f64;
    for (t, &(l, e)) in targets.iter().enumerate() {
        let base = leaves[l].1[e];
        let (tp, _, lp) = run(Some((l, e, base + FD_H)));
        let plus = tp.scalar(lp).expect("scalar loss");
        let (tm, _, lm) = run(Some((l, e, base - FD_H)));
        let minus = tm.scalar(lm).expect("scalar loss");
        let fd = (plus as f64 - minus as f64) / (2.0 * FD_H as f64);
        let a = analytic[t] as f64;
        let denom = a.abs().max(fd.abs()).max(REL_FLOOR as f64);
        max_rel_err = max_rel_err.max((a - fd).abs() / denom);
    }
    FdReport {
        max_rel_err,
        checked: targets.len(),
    }
}

/// All (leaf, element) pairs of one leaf.
pub fn all_elements(leaf: usize, leaves: &[(Vec<usize>, Vec<f32>, bool)]) -> Vec<(usize, usize)> {
    (0..leaves[leaf].1.len()).map(|e| (leaf, e)).collect()
}

pub fn randn_vec(n: usize, std: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * std * 1.7).collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
