//! Central finite-difference validation of recorded gradients.
//!
//! The analytic gradient comes from the tape's `f32` backward pass; the
//! reference comes from a full `f64` re-evaluation of the tape with one leaf
//! element perturbed at a time. Perturbations that change a branch decision
//! of a kink operation (relu, leaky_relu, clamp, round) are reported as
//! nondifferentiable points rather than failures.

use super::{SampleGrid, Tape, Var};
use crate::error::Result;
use std::collections::HashMap;

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: Var,
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Element indices where the check point sits on a kink or inside a
    /// straight-through region; excluded from `max_rel_err`.
    pub nondifferentiable: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub step: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn nondifferentiable_count(&self) -> usize {
        self.leaves.iter().map(|l| l.nondifferentiable.len()).sum()
    }
}

/// Check d(loss)/d(leaf) for each listed leaf against central differences.
/// Runs the tape's backward pass as a side effect.
pub fn grad_check(
    tape: &mut Tape,
    loss: Var,
    leaves: &[Var],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    tape.backward(loss)?;
    let base = tape.replay_f64(&HashMap::new());
    let base_kink = base.kink;
    let mut reports = Vec::with_capacity(leaves.len());
    for &leaf in leaves {
        let analytic: Vec<f64> = tape
            .grad(leaf)
            .map(|g| g.iter().map(|&v| v as f64).collect())
            .unwrap_or_else(|| vec![0.0; tape.data(leaf).len()]);
        let point: Vec<f64> = tape.data(leaf).iter().map(|&v| v as f64).collect();
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        let mut nondiff = Vec::new();
        for i in 0..point.len() {
            let mut plus = point.clone();
            plus[i] += step;
            let mut minus = point.clone();
            minus[i] -= step;
            let mut ov = HashMap::new();
            ov.insert(leaf.0, plus);
            let ep = tape.replay_f64(&ov);
            ov.insert(leaf.0, minus);
            let em = tape.replay_f64(&ov);
            let fd = (ep.values[loss.0][0] - em.values[loss.0][0]) / (2.0 * step);
            let a = analytic[i];
            let denom = a.abs().max(fd.abs());
            let rel = if denom < 1e-8 {
                (a - fd).abs()
            } else {
                (a - fd).abs() / denom
            };
            if rel > tol && (ep.branch_hash != em.branch_hash || base_kink || ep.kink || em.kink) {
                nondiff.push(i);
                continue;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        reports.push(LeafReport {
            leaf,
            max_rel_err: max_rel,
            worst_index: worst,
            nondifferentiable: nondiff,
        });
    }
    Ok(GradCheckReport {
        leaves: reports,
        step,
        tol,
    })
}

/// Run every differentiable tape operation through [`grad_check`] on at
/// least three seeded shapes each. Returns one named report per (op,
/// shape) pair; kink inputs are chosen away from branch points.
pub fn standard_op_checks(step: f64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::rng::rng_for;
    use rand::Rng;
    use std::rc::Rc;

    // interior values in (0.1, 0.9): away from relu/clamp kinks and
    // round_ste half-integers
    fn fill(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| 0.1 + 0.8 * rng.gen::<f32>()).collect()
    }

    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut run = |name: String,
                   build: &mut dyn FnMut(&mut Tape) -> Result<(Var, Vec<Var>)>|
     -> Result<()> {
        let mut tape = Tape::new();
        let (y, leaves) = build(&mut tape)?;
        // reduce to a scalar with fixed random weights so every output
        // element contributes a distinct gradient path
        let shape = tape.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let mut wrng = rng_for(0xC0FFEE, "gradcheck-weights", &[n as u64]);
        let w = tape.constant((0..n).map(|_| 0.5 + wrng.gen::<f32>()).collect(), &shape)?;
        let p = tape.mul(y, w)?;
        let loss = tape.sum(p)?;
        let report = grad_check(&mut tape, loss, &leaves, step, tol)?;
        out.push((name, report));
        Ok(())
    };

    for (si, seed) in [11u64, 22, 33].into_iter().enumerate() {
        let mut rng = rng_for(seed, "gradcheck-inputs", &[]);
        let dims = [2 + si, 3, 4 + si]; // varied small sizes per seed
        let (a, b, c) = (dims[0], dims[1], dims[2]);
        let tag = |op: &str| format!("{op}#{si}");

        macro_rules! leafed {
            ($t:expr, $rng:expr, $shape:expr) => {{
                let sh: &[usize] = $shape;
                let n: usize = sh.iter().product();
                $t.leaf(fill($rng, n), sh, true)?
            }};
        }

        run(tag("add"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            let y = leafed!(t, &mut rng, &[a, b]);
            Ok((t.add(x, y)?, vec![x, y]))
        })?;
        run(tag("sub"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            let y = leafed!(t, &mut rng, &[a, b]);
            Ok((t.sub(x, y)?, vec![x, y]))
        })?;
        run(tag("mul"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            let y = leafed!(t, &mut rng, &[a, b]);
            Ok((t.mul(x, y)?, vec![x, y]))
        })?;
        run(tag("add_scalar"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            Ok((t.add_scalar(x, 0.37)?, vec![x]))
        })?;
        run(tag("mul_scalar"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            Ok((t.mul_scalar(x, -1.3)?, vec![x]))
        })?;
        run(tag("matmul"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            let y = leafed!(t, &mut rng, &[b, c]);
            Ok((t.matmul(x, y)?, vec![x, y]))
        })?;
        run(tag("conv2d"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, 2, 4 + si, 4 + si]);
            let w = leafed!(t, &mut rng, &[3, 2, 3, 3]);
            Ok((t.conv2d(x, w, 1 + si % 2, 1)?, vec![x, w]))
        })?;
        run(tag("transpose_conv2d"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, 3, 3 + si, 3 + si]);
            let w = leafed!(t, &mut rng, &[3, 2, 3, 3]);
            Ok((t.transpose_conv2d(x, w, 2, 1)?, vec![x, w]))
        })?;
        run(tag("relu"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            let x2 = t.add_scalar(x, -0.5)?; // mixed signs, away from 0
            Ok((t.relu(x2)?, vec![x]))
        })?;
        run(tag("leaky_relu"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            let x2 = t.add_scalar(x, -0.5)?;
            Ok((t.leaky_relu(x2, 0.2)?, vec![x]))
        })?;
        run(tag("sigmoid"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            Ok((t.sigmoid(x)?, vec![x]))
        })?;
        run(tag("mean"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            Ok((t.mean(x)?, vec![x]))
        })?;
        run(tag("sum"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            Ok((t.sum(x)?, vec![x]))
        })?;
        run(tag("reshape"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]);
            Ok((t.reshape(x, &[b, a])?, vec![x]))
        })?;
        run(tag("broadcast_scale"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, b, 4, 4]);
            let s = leafed!(t, &mut rng, &[b]);
            Ok((t.broadcast_scale(x, s, 1)?, vec![x, s]))
        })?;
        run(tag("bias_add"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, b, 4, 4]);
            let bb = leafed!(t, &mut rng, &[b]);
            Ok((t.bias_add(x, bb, 1)?, vec![x, bb]))
        })?;
        run(tag("avg_pool2d"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, 2, 4 + 2 * si, 4 + 2 * si]);
            Ok((t.avg_pool2d(x, 2)?, vec![x]))
        })?;
        run(tag("nearest_upsample2d"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, 2, 3 + si, 3 + si]);
            Ok((t.nearest_upsample2d(x, 2)?, vec![x]))
        })?;
        run(tag("clamp"), &mut |t| {
            let x = leafed!(t, &mut rng, &[a, b]); // interior of [0,1]
            Ok((t.clamp(x, 0.0, 1.0)?, vec![x]))
        })?;
        run(tag("round_ste"), &mut |t| {
            // straight-through region: true derivative is 0, surrogate 1;
            // all points are marked nondifferentiable, none may fail
            let x = leafed!(t, &mut rng, &[a, b]);
            Ok((t.round_ste(x)?, vec![x]))
        })?;
        run(tag("sample_bilinear"), &mut |t| {
            let (h, w) = (4 + si, 5 + si);
            let mut grng = rng_for(seed, "gradcheck-grid", &[]);
            let coords: Vec<(f32, f32)> = (0..h * w)
                .map(|_| {
                    (
                        grng.gen::<f32>() * (h as f32 - 1.2) + 0.1,
                        grng.gen::<f32>() * (w as f32 - 1.2) + 0.1,
                    )
                })
                .collect();
            let grid = Rc::new(SampleGrid::from_source_coords(
                h,
                w,
                h,
                w,
                coords.into_iter(),
            ));
            let x = leafed!(t, &mut rng, &[1, 3, h, w]);
            Ok((t.sample_bilinear(x, grid)?, vec![x]))
        })?;
        run(tag("block_dct8"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, 1 + si % 2, 8, 8]);
            Ok((t.block_dct8(x, si % 2 == 1)?, vec![x]))
        })?;
        run(tag("bce_with_logits"), &mut |t| {
            let x = leafed!(t, &mut rng, &[1, a]);
            let logits = t.add_scalar(x, -0.5)?;
            let targets: Vec<f32> = (0..a).map(|i| (i % 2) as f32).collect();
            let tv = t.constant(targets, &[1, a])?;
            Ok((t.bce_with_logits(logits, tv)?, vec![x]))
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn seeded(len: usize, seed: u64) -> Vec<f32> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32
            })
            .collect()
    }

    #[test]
    fn sum_has_exact_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(seeded(6, 1), &[6], true).unwrap();
        let l = t.sum(x).unwrap();
        let rep = grad_check(&mut t, l, &[x], 1e-3, 1e-3).unwrap();
        assert!(rep.max_rel_err() < 1e-10);
    }

    #[test]
    fn sigmoid_matmul_composite_passes() {
        let mut t = Tape::new();
        let x = t.leaf(seeded(8, 2), &[2, 4], true).unwrap();
        let w = t.leaf(seeded(12, 3), &[4, 3], true).unwrap();
        let y = t.matmul(x, w).unwrap();
        let s = t.sigmoid(y).unwrap();
        let l = t.mean(s).unwrap();
        let rep = grad_check(&mut t, l, &[x, w], 1e-3, 1e-3).unwrap();
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err());
    }

    #[test]
    fn standard_suite_passes_and_runs_quickly() {
        let t0 = std::time::Instant::now();
        let reports = standard_op_checks(1e-3, 1e-3).unwrap();
        assert!(reports.len() >= 3 * 23, "got {} reports", reports.len());
        for (name, rep) in &reports {
            assert!(rep.passed(), "{name}: max rel err {}", rep.max_rel_err());
        }
        assert!(t0.elapsed().as_secs() < 60);
    }

    #[test]
    fn clamp_saturated_point_reports_nondifferentiable() {
        let mut t = Tape::new();
        // 2.0 is saturated at the clamp's upper bound: straight-through
        // backward says 1, the true derivative is 0.
        let x = t.leaf(vec![2.0, 0.3], &[2], true).unwrap();
        let c = t.clamp(x, 0.0, 1.0).unwrap();
        let l = t.sum(c).unwrap();
        let rep = grad_check(&mut t, l, &[x], 1e-3, 1e-3).unwrap();
        assert!(rep.leaves[0].nondifferentiable.contains(&0));
        assert!(!rep.leaves[0].nondifferentiable.contains(&1));
        assert!(rep.passed());
    }
}
