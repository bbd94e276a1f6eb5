//! Central finite-difference gradient checking for the loss terms.
//!
//! The harness perturbs every coordinate of every input batch and compares
//! the numeric gradient against the analytic one, reporting the maximum
//! per-coordinate relative error. Inputs under a stop-gradient contract are
//! checked differently: their analytic gradient must be identically zero,
//! not finite-difference-consistent.

use crate::codebook::Codebook;
use crate::error::Result;
use crate::losses::{self, Batch, LossName, LossTerm};
use crate::numerics::{self, SeededRng};

/// How one input of a loss operation participates in the check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradMode {
    /// Compare analytic vs central finite differences.
    Check,
    /// Stop-gradient contract: analytic gradient must be exactly zero.
    AssertZero,
}

/// Default central-difference step.
pub const DEFAULT_H: f64 = 1e-5;

const REL_FLOOR: f64 = 1e-8;

/// Maximum relative error between analytic and numeric gradients over all
/// coordinates of all `Check` inputs. `AssertZero` inputs contribute
/// |analytic|/1e-8 so any gradient leak blows past every tolerance.
pub fn gradcheck<F>(f: F, inputs: &[Batch], modes: &[GradMode], h: f64) -> Result<f64>
where
    F: Fn(&[Batch]) -> Result<LossTerm>,
{
    assert_eq!(inputs.len(), modes.len());
    let base = f(inputs)?;
    assert_eq!(
        base.grads.len(),
        inputs.len(),
        "loss term must report one gradient batch per input"
    );

    let mut max_rel = 0.0f64;
    for (b, mode) in modes.iter().enumerate() {
        match mode {
            GradMode::AssertZero => {
                for row in &base.grads[b] {
                    for &g in row {
                        max_rel = max_rel.max(g.abs() / REL_FLOOR);
                    }
                }
            }
            GradMode::Check => {
                for r in 0..inputs[b].len() {
                    for c in 0..inputs[b][r].len() {
                        let mut plus = inputs.to_vec();
                        plus[b][r][c] += h;
                        let mut minus = inputs.to_vec();
                        minus[b][r][c] -= h;
                        let numeric = (f(&plus)?.value - f(&minus)?.value) / (2.0 * h);
                        let analytic = base.grads[b][r][c];
                        let rel = (analytic - numeric).abs()
                            / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
                        max_rel = max_rel.max(rel);
                    }
                }
            }
        }
    }
    Ok(max_rel)
}

/// One entry of the fixed-seed verification suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: LossName,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Per-term tolerance: quadratic terms are checked at 1e-6, smooth
/// non-softmax terms at 1e-5, softmax-based terms at 1e-4.
pub fn tolerance_for(name: LossName) -> f64 {
    match name {
        LossName::Recon | LossName::Orth | LossName::Vq => 1e-6,
        LossName::Uni | LossName::Cuni | LossName::Align => 1e-5,
        LossName::Cm | LossName::Cctr => 1e-4,
    }
}

fn unit_batch(rng: &mut SeededRng, n: usize, dim: usize) -> Batch {
    (0..n)
        .map(|_| numerics::l2_normalize(&rng.normal_vec(dim)).unwrap())
        .collect()
}

fn suite_codebook(k: usize, dim: usize, seed: u64) -> Codebook {
    let mut rng = SeededRng::new(seed);
    let entries = unit_batch(&mut rng, k, dim);
    Codebook::from_entries(entries, 0.99).unwrap()
}

/// Run all eight terms at `points` seeded random points each, optionally
/// corrupting one term's analytic gradient (test hook for the failure
/// path).
pub fn run_suite(points: usize, sabotage: Option<LossName>) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(8);
    for name in LossName::ALL {
        let mut max_err = 0.0f64;
        for p in 0..points as u64 {
            let seed = 1000 * (name.index() as u64 + 1) + p;
            let err = check_term_at(name, seed, sabotage == Some(name))?;
            max_err = max_err.max(err);
        }
        let tolerance = tolerance_for(name);
        out.push(SuiteEntry {
            name,
            max_rel_err: max_err,
            tolerance,
            pass: max_err < tolerance,
        });
    }
    Ok(out)
}

/// Wrap a term constructor so one gradient coordinate is corrupted.
fn corrupt(term: LossTerm) -> LossTerm {
    let mut term = term;
    if let Some(first) = term
        .grads
        .iter_mut()
        .flat_map(|b| b.iter_mut())
        .flat_map(|r| r.iter_mut())
        .next()
    {
        *first += 0.1;
    }
    term
}

fn check_term_at(name: LossName, seed: u64, sabotaged: bool) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let maybe_corrupt = move |t: LossTerm| if sabotaged { corrupt(t) } else { t };

    match name {
        LossName::Align => {
            let t = unit_batch(&mut rng, 4, 8);
            let a = unit_batch(&mut rng, 4, 8);
            gradcheck(
                |ins| losses::info_nce(&ins[0], &ins[1], 0.07).map(&maybe_corrupt),
                &[t, a],
                &[GradMode::Check, GradMode::Check],
                DEFAULT_H,
            )
        }
        LossName::Recon => {
            let x: Batch = (0..3).map(|_| rng.normal_vec(6)).collect();
            let xh: Batch = (0..3).map(|_| rng.normal_vec(6)).collect();
            gradcheck(
                |ins| {
                    let term = losses::recon_batch(&x, &ins[0])?;
                    Ok(maybe_corrupt(term))
                },
                &[xh],
                &[GradMode::Check],
                DEFAULT_H,
            )
        }
        LossName::Orth => {
            let s = unit_batch(&mut rng, 4, 6);
            let p = unit_batch(&mut rng, 4, 6);
            gradcheck(
                |ins| losses::orth_loss(&ins[0], &ins[1]).map(&maybe_corrupt),
                &[s, p],
                &[GradMode::Check, GradMode::Check],
                DEFAULT_H,
            )
        }
        LossName::Uni => {
            let b = unit_batch(&mut rng, 5, 8);
            gradcheck(
                |ins| losses::uniform_loss(&ins[0]).map(&maybe_corrupt),
                &[b],
                &[GradMode::Check],
                DEFAULT_H,
            )
        }
        LossName::Vq => {
            let z = unit_batch(&mut rng, 3, 6);
            let zq = unit_batch(&mut rng, 3, 6);
            gradcheck(
                |ins| losses::commit_loss(&ins[0], &ins[1], 0.25).map(&maybe_corrupt),
                &[z, zq],
                &[GradMode::Check, GradMode::AssertZero],
                DEFAULT_H,
            )
        }
        LossName::Cm => {
            let cb = suite_codebook(4, 3, seed.wrapping_mul(31) + 7);
            let a = unit_batch(&mut rng, 6, 3); // N=3, m=2
            let t = unit_batch(&mut rng, 6, 3);
            gradcheck(
                |ins| losses::cmcm_loss(&ins[0], &ins[1], 2, &cb).map(&maybe_corrupt),
                &[a, t],
                &[GradMode::Check, GradMode::Check],
                DEFAULT_H,
            )
        }
        LossName::Cctr => {
            let cb = suite_codebook(20, 4, seed.wrapping_mul(17) + 3);
            let z = unit_batch(&mut rng, 3, 4);
            gradcheck(
                |ins| losses::code_contrastive_batch(&cb, &ins[0]).map(&maybe_corrupt),
                &[z],
                &[GradMode::Check],
                DEFAULT_H,
            )
        }
        LossName::Cuni => {
            let entries = unit_batch(&mut rng, 6, 3);
            gradcheck(
                |ins| losses::code_uniform_rows(&ins[0]).map(&maybe_corrupt),
                &[entries],
                &[GradMode::Check],
                DEFAULT_H,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_all_terms_pass() {
        let entries = run_suite(10, None).unwrap();
        assert_eq!(entries.len(), 8);
        for e in &entries {
            assert!(
                e.pass,
                "{} failed gradcheck: {} >= {}",
                e.name, e.max_rel_err, e.tolerance
            );
        }
    }

    #[test]
    fn sabotage_hook_fails_named_term_only() {
        let entries = run_suite(3, Some(LossName::Orth)).unwrap();
        for e in &entries {
            if e.name == LossName::Orth {
                assert!(!e.pass, "sabotaged term must fail");
            } else {
                assert!(e.pass, "{} should still pass", e.name);
            }
        }
    }

    #[test]
    fn recon_single_point_under_1e6() {
        let mut rng = SeededRng::new(77);
        let x = rng.normal_vec(5);
        let xh: Batch = vec![rng.normal_vec(5)];
        let err = gradcheck(
            |ins| losses::recon_loss(&x, &ins[0][0]),
            &[xh],
            &[GradMode::Check],
            DEFAULT_H,
        )
        .unwrap();
        assert!(err < 1e-6, "recon gradcheck err {err}");
    }

    #[test]
    fn commit_stop_grad_detected_if_leaked() {
        // a deliberately wrong term that leaks gradient into the quantized arg
        let z = vec![vec![1.0, 2.0]];
        let zq = vec![vec![0.5, 0.5]];
        let err = gradcheck(
            |ins| {
                let mut t = losses::commit_loss(&ins[0], &ins[1], 1.0)?;
                t.grads[1][0][0] = 0.3; // leak
                Ok(t)
            },
            &[z, zq],
            &[GradMode::Check, GradMode::AssertZero],
            DEFAULT_H,
        )
        .unwrap();
        assert!(err > 1.0, "leak must blow the tolerance, got {err}");
    }
}
