//! The eight training-loss terms with analytic gradients.
//!
//! Every operation returns a [`LossTerm`]: the scalar value plus gradients
//! for each input batch, in the operation's documented input order. All
//! gradients are exact and verified against central finite differences by
//! the [`crate::gradcheck`] harness.
//!
//! Conventions shared by the pairwise potentials (`uniform_loss`,
//! `code_uniform_loss`): ordered pairs i != j, normalized by N(N-1).
//! Softmax-style terms are computed with logsumexp stabilization.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::numerics;

/// A batch of row vectors.
pub type Batch = Vec<Vec<f64>>;

/// Loss-term identity. The declaration order fixes the CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossName {
    Align,
    Recon,
    Orth,
    Uni,
    Vq,
    Cm,
    Cctr,
    Cuni,
}

impl LossName {
    pub const ALL: [LossName; 8] = [
        LossName::Align,
        LossName::Recon,
        LossName::Orth,
        LossName::Uni,
        LossName::Vq,
        LossName::Cm,
        LossName::Cctr,
        LossName::Cuni,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossName::Align => "align",
            LossName::Recon => "recon",
            LossName::Orth => "orth",
            LossName::Uni => "uni",
            LossName::Vq => "vq",
            LossName::Cm => "cm",
            LossName::Cctr => "cctr",
            LossName::Cuni => "cuni",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|n| n == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<LossName> {
        Self::ALL.iter().copied().find(|n| n.as_str() == s)
    }
}

impl std::fmt::Display for LossName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluated loss term: value plus gradients per input batch.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub name: LossName,
    pub value: f64,
    /// Parallel to the operation's input batches; shapes match the inputs.
    pub grads: Vec<Batch>,
}

fn zeros_like(b: &[Vec<f64>]) -> Batch {
    b.iter().map(|r| vec![0.0; r.len()]).collect()
}

fn check_batch_pair(context: &'static str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::BatchMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(Error::DimMismatch {
                context,
                expected: x.len(),
                got: y.len(),
            });
        }
    }
    Ok(())
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ── InfoNCE alignment (input order: shared_t, shared_a) ─────────────

/// Symmetric InfoNCE between paired batches of quantized shared embeddings.
/// Each direction anchors one side and softmaxes dot-product similarities
/// over the other side's batch; negatives are the j != i batch entries.
/// Total = mean-over-batch of each direction, summed over both directions.
pub fn info_nce(shared_t: &Batch, shared_a: &Batch, eta: f64) -> Result<LossTerm> {
    if eta <= 0.0 {
        return Err(Error::NonPositiveTemperature(eta));
    }
    if shared_t.is_empty() {
        return Err(Error::EmptyInput("info_nce: empty batch"));
    }
    check_batch_pair("info_nce", shared_t, shared_a)?;
    let n = shared_t.len();
    let dim = shared_t[0].len();

    // s[i][j] = t_i . a_j
    let sim: Vec<Vec<f64>> = shared_t
        .iter()
        .map(|t| shared_a.iter().map(|a| numerics::dot(t, a)).collect())
        .collect();

    let mut value = 0.0;
    let mut grad_t = vec![vec![0.0; dim]; n];
    let mut grad_a = vec![vec![0.0; dim]; n];

    // direction T -> A: anchor t_i, candidates a_j (row softmax)
    for i in 0..n {
        let logits: Vec<f64> = sim[i].iter().map(|s| s / eta).collect();
        let lse = logsumexp(&logits);
        value += (lse - logits[i]) / n as f64;
        for j in 0..n {
            let coeff = ((logits[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / (n as f64 * eta);
            for d in 0..dim {
                grad_t[i][d] += coeff * shared_a[j][d];
                grad_a[j][d] += coeff * shared_t[i][d];
            }
        }
    }
    // direction A -> T: anchor a_i, candidates t_j (column softmax)
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| sim[j][i] / eta).collect();
        let lse = logsumexp(&logits);
        value += (lse - logits[i]) / n as f64;
        for j in 0..n {
            let coeff = ((logits[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / (n as f64 * eta);
            for d in 0..dim {
                grad_a[i][d] += coeff * shared_t[j][d];
                grad_t[j][d] += coeff * shared_a[i][d];
            }
        }
    }

    Ok(LossTerm {
        name: LossName::Align,
        value,
        grads: vec![grad_t, grad_a],
    })
}

// ── Reconstruction (input order: x_hat) ─────────────────────────────

/// Squared L2 reconstruction error for one sample; gradient w.r.t. x_hat.
pub fn recon_loss(x: &[f64], x_hat: &[f64]) -> Result<LossTerm> {
    if x.len() != x_hat.len() {
        return Err(Error::DimMismatch {
            context: "recon_loss",
            expected: x.len(),
            got: x_hat.len(),
        });
    }
    let value: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let grad: Vec<f64> = x.iter().zip(x_hat).map(|(a, b)| 2.0 * (b - a)).collect();
    Ok(LossTerm {
        name: LossName::Recon,
        value,
        grads: vec![vec![grad]],
    })
}

/// Mean squared L2 reconstruction error over a batch.
pub fn recon_batch(xs: &Batch, x_hats: &Batch) -> Result<LossTerm> {
    check_batch_pair("recon_batch", xs, x_hats)?;
    if xs.is_empty() {
        return Err(Error::EmptyInput("recon_batch: empty batch"));
    }
    let n = xs.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(xs.len());
    for (x, xh) in xs.iter().zip(x_hats) {
        value += x.iter().zip(xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        grads.push(x.iter().zip(xh).map(|(a, b)| 2.0 * (b - a) / n).collect());
    }
    Ok(LossTerm {
        name: LossName::Recon,
        value,
        grads: vec![grads],
    })
}

// ── Orthogonality (input order: shared, specific) ───────────────────

/// (1/N) sum of squared inner products between paired shared and specific
/// embeddings.
pub fn orth_loss(shared: &Batch, specific: &Batch) -> Result<LossTerm> {
    check_batch_pair("orth_loss", shared, specific)?;
    if shared.is_empty() {
        return Err(Error::EmptyInput("orth_loss: empty batch"));
    }
    let n = shared.len() as f64;
    let mut value = 0.0;
    let mut grad_s = Vec::with_capacity(shared.len());
    let mut grad_p = Vec::with_capacity(shared.len());
    for (s, p) in shared.iter().zip(specific) {
        let ip = numerics::dot(s, p);
        value += ip * ip / n;
        grad_s.push(p.iter().map(|pi| 2.0 * ip * pi / n).collect());
        grad_p.push(s.iter().map(|si| 2.0 * ip * si / n).collect());
    }
    Ok(LossTerm {
        name: LossName::Orth,
        value,
        grads: vec![grad_s, grad_p],
    })
}

// ── Uniformity (input order: specific) ──────────────────────────────

/// Log of the mean Gaussian potential over ordered pairs i != j.
/// Shared by `uniform_loss` (rows = specific embeddings) and
/// `code_uniform_loss` (rows = codebook entries).
fn log_mean_gaussian_potential(rows: &Batch) -> (f64, Batch) {
    let n = rows.len();
    let dim = rows[0].len();
    let mut neg_d2 = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                neg_d2.push(-numerics::sq_dist(&rows[i], &rows[j]).unwrap());
            }
        }
    }
    let lse = logsumexp(&neg_d2);
    let value = lse - ((n * (n - 1)) as f64).ln();

    let mut grads = vec![vec![0.0; dim]; n];
    let mut idx = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // softmax weight of the ordered pair (i, j); the mirrored pair
            // (j, i) carries the same weight, so each unordered pair acts
            // twice on row i
            let w = (neg_d2[idx] - lse).exp();
            for d in 0..dim {
                grads[i][d] += -4.0 * w * (rows[i][d] - rows[j][d]);
            }
            idx += 1;
        }
    }
    (value, grads)
}

/// Uniformity objective on quantized specific embeddings: log averaged
/// Gaussian potential, maximal (= 0) when all points coincide.
pub fn uniform_loss(specific: &Batch) -> Result<LossTerm> {
    if specific.len() < 2 {
        return Err(Error::BatchTooSmall {
            need: 2,
            got: specific.len(),
        });
    }
    check_batch_pair("uniform_loss", specific, specific)?;
    let (value, grads) = log_mean_gaussian_potential(specific);
    Ok(LossTerm {
        name: LossName::Uni,
        value,
        grads: vec![grads],
    })
}

// ── Commitment (input order: z, z_quantized) ────────────────────────

/// beta * mean squared distance between encoder output z and its quantized
/// counterpart, with a stop-gradient on the quantized side: the gradient
/// flows only to z, the z_q gradient is identically zero.
pub fn commit_loss(z: &Batch, zq: &Batch, beta: f64) -> Result<LossTerm> {
    check_batch_pair("commit_loss", z, zq)?;
    if z.is_empty() {
        return Err(Error::EmptyInput("commit_loss: empty batch"));
    }
    let n = z.len() as f64;
    let mut value = 0.0;
    let mut grad_z = Vec::with_capacity(z.len());
    for (zi, qi) in z.iter().zip(zq) {
        value += beta * zi.iter().zip(qi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        grad_z.push(
            zi.iter()
                .zip(qi)
                .map(|(a, b)| 2.0 * beta * (a - b) / n)
                .collect(),
        );
    }
    Ok(LossTerm {
        name: LossName::Vq,
        value,
        grads: vec![grad_z, zeros_like(zq)],
    })
}

// ── Cross-modal code matching (input order: sub_a, sub_t) ───────────

/// Softmin codevector-assignment distribution of one sub-vector,
/// in log space.
fn log_softmin(cb: &Codebook, z: &[f64]) -> Result<Vec<f64>> {
    let logits: Vec<f64> = cb
        .entries()
        .iter()
        .map(|e| numerics::sq_dist(z, e).map(|d| -d))
        .collect::<Result<_>>()?;
    let lse = logsumexp(&logits);
    Ok(logits.iter().map(|l| l - lse).collect())
}

/// Cross-modal code matching over paired sub-vector batches.
///
/// Rows are sample-major (row i*m + h is sample i, slot h). For each anchor
/// sub-vector the symmetrized cross-entropy score S_code against every
/// same-slot candidate of the other modality feeds a softmax contrast with
/// the positive at the paired sample, averaged over N*m anchors.
pub fn cmcm_loss(sub_a: &Batch, sub_t: &Batch, m: usize, cb: &Codebook) -> Result<LossTerm> {
    if sub_a.len() != sub_t.len() {
        return Err(Error::BatchMismatch {
            left: sub_a.len(),
            right: sub_t.len(),
        });
    }
    if m == 0 || sub_a.is_empty() || sub_a.len() % m != 0 {
        return Err(Error::BatchMismatch {
            left: sub_a.len(),
            right: m,
        });
    }
    let n = sub_a.len() / m;
    let k = cb.len();
    let dim = cb.dim();

    // log assignment distributions per row
    let log_pa: Vec<Vec<f64>> = sub_a.iter().map(|z| log_softmin(cb, z)).collect::<Result<_>>()?;
    let log_pt: Vec<Vec<f64>> = sub_t.iter().map(|z| log_softmin(cb, z)).collect::<Result<_>>()?;
    let pa: Vec<Vec<f64>> = log_pa
        .iter()
        .map(|r| r.iter().map(|l| l.exp()).collect())
        .collect();
    let pt: Vec<Vec<f64>> = log_pt
        .iter()
        .map(|r| r.iter().map(|l| l.exp()).collect())
        .collect();

    let row = |i: usize, h: usize| i * m + h;
    let s_code = |ra: usize, rt: usize| -> f64 {
        let mut s = 0.0;
        for c in 0..k {
            s += pa[ra][c] * log_pt[rt][c] + pt[rt][c] * log_pa[ra][c];
        }
        s
    };

    let norm = 1.0 / (n as f64 * m as f64);
    let mut value = 0.0;
    let mut grad_a = vec![vec![0.0; dim]; sub_a.len()];
    let mut grad_t = vec![vec![0.0; dim]; sub_t.len()];

    for h in 0..m {
        for i in 0..n {
            let ra = row(i, h);
            let s_row: Vec<f64> = (0..n).map(|j| s_code(ra, row(j, h))).collect();
            let lse = logsumexp(&s_row);
            value += norm * (lse - s_row[i]);

            for j in 0..n {
                let rt = row(j, h);
                let coeff = norm * ((s_row[j] - lse).exp() - if i == j { 1.0 } else { 0.0 });
                if coeff == 0.0 {
                    continue;
                }
                // dS/d(anchor a): sum_k P^A_k (g_k - gbar) * 2(e_k - a),
                // g_k = logP^T_k + P^T_k / P^A_k, so gbar = sum_k P^A_k logP^T_k + 1
                let gbar_a: f64 = (0..k).map(|c| pa[ra][c] * log_pt[rt][c]).sum::<f64>() + 1.0;
                for c in 0..k {
                    let g = log_pt[rt][c] + pt[rt][c] / pa[ra][c];
                    let w = coeff * pa[ra][c] * (g - gbar_a) * 2.0;
                    let e = cb.entry(c);
                    for d in 0..dim {
                        grad_a[ra][d] += w * (e[d] - sub_a[ra][d]);
                    }
                }
                // symmetric term for the candidate t
                let gbar_t: f64 = (0..k).map(|c| pt[rt][c] * log_pa[ra][c]).sum::<f64>() + 1.0;
                for c in 0..k {
                    let g = log_pa[ra][c] + pa[ra][c] / pt[rt][c];
                    let w = coeff * pt[rt][c] * (g - gbar_t) * 2.0;
                    let e = cb.entry(c);
                    for d in 0..dim {
                        grad_t[rt][d] += w * (e[d] - sub_t[rt][d]);
                    }
                }
            }
        }
    }

    Ok(LossTerm {
        name: LossName::Cm,
        value,
        grads: vec![grad_a, grad_t],
    })
}

// ── Codevector contrastive regularizer (input order: subvec) ────────

const CCTR_MIN_K: usize = 10;

/// Ratio of the mean distance to the closest 10% of codevectors over the
/// sum of distances to the furthest 50%, for one sub-vector. Gradients go
/// to the sub-vector only; the codebook is EMA-updated, never
/// gradient-updated.
pub fn code_contrastive_loss(cb: &Codebook, subvec: &[f64]) -> Result<LossTerm> {
    code_contrastive_batch(cb, &vec![subvec.to_vec()])
}

/// Batch form of [`code_contrastive_loss`], averaged over sub-vectors.
pub fn code_contrastive_batch(cb: &Codebook, subvecs: &Batch) -> Result<LossTerm> {
    let k = cb.len();
    if k < CCTR_MIN_K {
        return Err(Error::CodebookTooSmall {
            need: CCTR_MIN_K,
            got: k,
        });
    }
    if subvecs.is_empty() {
        return Err(Error::EmptyInput("code_contrastive: empty batch"));
    }
    let n_pos = (k / 10).max(1);
    let n_neg = k / 2;
    let n = subvecs.len() as f64;
    let dim = cb.dim();

    let mut value = 0.0;
    let mut grads = Vec::with_capacity(subvecs.len());
    for z in subvecs {
        if z.len() != dim {
            return Err(Error::DimMismatch {
                context: "code_contrastive",
                expected: dim,
                got: z.len(),
            });
        }
        let mut dists: Vec<(f64, usize)> = cb
            .entries()
            .iter()
            .enumerate()
            .map(|(c, e)| (numerics::sq_dist(z, e).unwrap().sqrt(), c))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let pos = &dists[..n_pos];
        let neg = &dists[k - n_neg..];
        let m_pos: f64 = pos.iter().map(|(d, _)| d).sum::<f64>() / n_pos as f64;
        let d_neg: f64 = neg.iter().map(|(d, _)| d).sum();
        value += m_pos / d_neg / n;

        // d||z - e||/dz = (z - e)/||z - e||
        let unit_sum = |set: &[(f64, usize)]| -> Vec<f64> {
            let mut u = vec![0.0; dim];
            for &(d, c) in set {
                if d < 1e-12 {
                    continue;
                }
                let e = cb.entry(c);
                for t in 0..dim {
                    u[t] += (z[t] - e[t]) / d;
                }
            }
            u
        };
        let u_pos = unit_sum(pos);
        let u_neg = unit_sum(neg);
        let g: Vec<f64> = (0..dim)
            .map(|t| {
                ((u_pos[t] / n_pos as f64) * d_neg - m_pos * u_neg[t]) / (d_neg * d_neg) / n
            })
            .collect();
        grads.push(g);
    }

    Ok(LossTerm {
        name: LossName::Cctr,
        value,
        grads: vec![grads],
    })
}

// ── Codevector uniformity (input order: entries) ────────────────────

/// Uniformity of the codebook itself: log mean Gaussian potential over
/// ordered entry pairs. The gradient w.r.t. entries is exposed for the
/// trainer's post-EMA nudge and for diagnostics.
pub fn code_uniform_loss(cb: &Codebook) -> Result<LossTerm> {
    if cb.len() < 2 {
        return Err(Error::CodebookTooSmall {
            need: 2,
            got: cb.len(),
        });
    }
    code_uniform_rows(&cb.entries().to_vec())
}

/// [`code_uniform_loss`] on free rows (no unit-norm constraint); this is the
/// function the analytic gradient differentiates.
pub fn code_uniform_rows(rows: &Batch) -> Result<LossTerm> {
    if rows.len() < 2 {
        return Err(Error::CodebookTooSmall {
            need: 2,
            got: rows.len(),
        });
    }
    let (value, grads) = log_mean_gaussian_potential(rows);
    Ok(LossTerm {
        name: LossName::Cuni,
        value,
        grads: vec![grads],
    })
}
