//! A single learnable codebook: EMA updates, dead-codevector reinitialization,
//! usage tracking, and binary persistence.
//!
//! Codevectors are unit-norm at all times. The codebook never receives
//! gradients; it evolves through [`Codebook::ema_update`] and
//! [`Codebook::reinit_dead`] only.

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{self, SeededRng};

const MAGIC: &[u8; 4] = b"CBCB";
const VERSION: u32 = 1;

/// Guard below which f/N is not evaluated.
const COUNT_GUARD: f64 = 1e-12;

/// Entries whose reinit decay falls below this are left untouched.
const REINIT_SKIP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// K unit-norm codevectors of dimension `dim`.
    entries: Vec<Vec<f64>>,
    /// EMA cluster mass N_k.
    counts: Vec<f64>,
    /// EMA cluster sums f_k.
    sums: Vec<Vec<f64>>,
    /// EMA-smoothed average batch usage share, drives reinitialization decay.
    usage_accum: Vec<f64>,
    gamma: f64,
    step: u64,
    dim: usize,
}

/// Usage over one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UsageStats {
    /// Fraction of entries hit at least once, in [0, 1].
    pub usage_rate: f64,
    /// exp(entropy) of the empirical assignment distribution, in [1, K].
    pub perplexity: f64,
}

impl Codebook {
    /// Initialize entries from l2-normalized k-means centroids of `samples`.
    /// All accumulators start at zero.
    pub fn init_kmeans(
        samples: &[Vec<f64>],
        k: usize,
        gamma: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("codebook init: no samples"));
        }
        let centroids = numerics::kmeans(samples, k, rng, 100)?;
        let dim = centroids[0].len();
        let mut entries = Vec::with_capacity(k);
        for c in centroids {
            match numerics::l2_normalize(&c) {
                Ok(e) => entries.push(e),
                // degenerate centroid (symmetric cancellation): seed randomly
                Err(Error::ZeroVector { .. }) => {
                    entries.push(numerics::l2_normalize(&rng.normal_vec(dim))?)
                }
                Err(e) => return Err(e),
            }
        }
        Ok(Self {
            counts: vec![0.0; k],
            sums: vec![vec![0.0; dim]; k],
            usage_accum: vec![0.0; k],
            entries,
            gamma,
            step: 0,
            dim,
        })
    }

    /// Build directly from unit-norm entries (tests, toy setups).
    pub fn from_entries(entries: Vec<Vec<f64>>, gamma: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("codebook: no entries"));
        }
        let dim = entries[0].len();
        let entries = entries
            .iter()
            .map(|e| numerics::l2_normalize(e))
            .collect::<Result<Vec<_>>>()?;
        let k = entries.len();
        Ok(Self {
            entries,
            counts: vec![0.0; k],
            sums: vec![vec![0.0; dim]; k],
            usage_accum: vec![0.0; k],
            gamma,
            step: 0,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k]
    }

    pub fn usage_accum(&self) -> &[f64] {
        &self.usage_accum
    }

    /// Index and squared distance of the closest entry; ties break to the
    /// smallest index.
    pub fn nearest(&self, z: &[f64]) -> Result<(usize, f64)> {
        if z.len() != self.dim {
            return Err(Error::DimMismatch {
                context: "codebook nearest",
                expected: self.dim,
                got: z.len(),
            });
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.entries.iter().enumerate() {
            let d = numerics::sq_dist(z, e)?;
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        Ok((best, best_d))
    }

    /// One EMA step. `assignments[k]` holds the vectors assigned to entry k
    /// this batch; entries with an empty cluster are untouched (no count
    /// decay — recovery of dead entries is reinit_dead's job).
    pub fn ema_update(&mut self, assignments: &[Vec<Vec<f64>>]) -> Result<()> {
        if assignments.len() != self.entries.len() {
            return Err(Error::DimMismatch {
                context: "ema_update buckets",
                expected: self.entries.len(),
                got: assignments.len(),
            });
        }
        let g = self.gamma;
        for (k, cluster) in assignments.iter().enumerate() {
            if cluster.is_empty() {
                continue;
            }
            let mut sum = vec![0.0; self.dim];
            for z in cluster {
                if z.len() != self.dim {
                    return Err(Error::DimMismatch {
                        context: "ema_update vector",
                        expected: self.dim,
                        got: z.len(),
                    });
                }
                for (s, x) in sum.iter_mut().zip(z) {
                    *s += x;
                }
            }
            self.counts[k] = g * self.counts[k] + (1.0 - g) * cluster.len() as f64;
            for (f, s) in self.sums[k].iter_mut().zip(&sum) {
                *f = g * *f + (1.0 - g) * s;
            }
            if self.counts[k] > COUNT_GUARD {
                let raw: Vec<f64> = self.sums[k].iter().map(|f| f / self.counts[k]).collect();
                if let Ok(e) = numerics::l2_normalize(&raw) {
                    self.entries[k] = e;
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Pull unused and low-used entries toward random batch feature anchors.
    ///
    /// The per-entry decay is `exp(-usage_accum_k * K * 10/(1-gamma) - 1e-3)`:
    /// ~1 for entries with no accumulated usage, vanishing for active ones.
    /// `batch_assign_counts[k]` is the number of assignments entry k received
    /// this batch; the usage accumulator is EMA-smoothed with the codebook's
    /// gamma.
    pub fn reinit_dead(
        &mut self,
        batch_features: &[Vec<f64>],
        batch_assign_counts: &[f64],
        rng: &mut SeededRng,
    ) -> Result<()> {
        if batch_features.is_empty() {
            return Err(Error::EmptyInput("reinit_dead: no batch features"));
        }
        let k_total = self.entries.len();
        if batch_assign_counts.len() != k_total {
            return Err(Error::DimMismatch {
                context: "reinit_dead counts",
                expected: k_total,
                got: batch_assign_counts.len(),
            });
        }
        let total: f64 = batch_assign_counts.iter().sum();
        let g = self.gamma;
        // the EMA seeds from the first observed batch; an all-zero
        // accumulator means nothing has been observed yet
        let unseeded = self.usage_accum.iter().all(|&u| u == 0.0);
        for (acc, &c) in self.usage_accum.iter_mut().zip(batch_assign_counts) {
            let share = if total > 0.0 { c / total } else { 0.0 };
            *acc = if unseeded {
                share
            } else {
                g * *acc + (1.0 - g) * share
            };
        }
        // anchors are drawn for every entry so the rng stream does not
        // depend on the usage pattern
        let anchors: Vec<usize> = (0..k_total).map(|_| rng.index(batch_features.len())).collect();
        let scale = k_total as f64 * 10.0 / (1.0 - g);
        for k in 0..k_total {
            let alpha = (-(self.usage_accum[k] * scale) - 1e-3).exp();
            if alpha < REINIT_SKIP {
                continue;
            }
            let anchor = &batch_features[anchors[k]];
            if anchor.len() != self.dim {
                return Err(Error::DimMismatch {
                    context: "reinit_dead anchor",
                    expected: self.dim,
                    got: anchor.len(),
                });
            }
            let blended: Vec<f64> = self.entries[k]
                .iter()
                .zip(anchor)
                .map(|(e, a)| (1.0 - alpha) * e + alpha * a)
                .collect();
            if let Ok(e) = numerics::l2_normalize(&blended) {
                self.entries[k] = e;
            }
        }
        Ok(())
    }

    /// Small additive move of every entry against `grads`, renormalized.
    /// Carries the codevector-uniformity regularizer onto the EMA-owned
    /// entries.
    pub fn nudge_entries(&mut self, grads: &[Vec<f64>], step_size: f64) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::DimMismatch {
                context: "nudge_entries",
                expected: self.entries.len(),
                got: grads.len(),
            });
        }
        for (e, g) in self.entries.iter_mut().zip(grads) {
            let moved: Vec<f64> = e.iter().zip(g).map(|(ei, gi)| ei - step_size * gi).collect();
            if let Ok(n) = numerics::l2_normalize(&moved) {
                *e = n;
            }
        }
        Ok(())
    }

    /// Usage rate and perplexity of an assignment stream.
    pub fn usage_stats(&self, eval_assignments: &[usize]) -> Result<UsageStats> {
        if eval_assignments.is_empty() {
            return Err(Error::EmptyInput("usage_stats: no assignments"));
        }
        let k = self.entries.len();
        let mut counts = vec![0usize; k];
        for &a in eval_assignments {
            if a >= k {
                return Err(Error::DimMismatch {
                    context: "usage_stats index",
                    expected: k,
                    got: a,
                });
            }
            counts[a] += 1;
        }
        let hit = counts.iter().filter(|&&c| c > 0).count();
        let total = eval_assignments.len() as f64;
        let entropy: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum();
        Ok(UsageStats {
            usage_rate: hit as f64 / k as f64,
            perplexity: entropy.exp(),
        })
    }

    // ── Persistence ─────────────────────────────────────────────────

    /// Append the codebook container to `w`. Entries are stored as f32;
    /// accumulators keep full f64 precision.
    pub fn write_to(&self, w: &mut Writer) {
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(self.entries.len() as u32);
        w.u32(self.dim as u32);
        w.f64(self.gamma);
        w.u64(self.step);
        for e in &self.entries {
            w.f32_slice(e);
        }
        w.f64_slice(&self.counts);
        for f in &self.sums {
            w.f64_slice(f);
        }
        w.f64_slice(&self.usage_accum);
    }

    pub fn save(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_to(&mut w);
        w.into_bytes()
    }

    pub fn read_from(r: &mut Reader) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if k == 0 || dim == 0 {
            return Err(Error::CorruptContainer(format!(
                "codebook with K={k}, dim={dim}"
            )));
        }
        let gamma = r.f64()?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::CorruptContainer(format!("gamma {gamma} not in (0,1)")));
        }
        let step = r.u64()?;
        let mut entries = Vec::with_capacity(k);
        for _ in 0..k {
            entries.push(r.f32_vec(dim)?);
        }
        let counts = r.f64_vec(k)?;
        let mut sums = Vec::with_capacity(k);
        for _ in 0..k {
            sums.push(r.f64_vec(dim)?);
        }
        let usage_accum = r.f64_vec(k)?;
        Ok(Self {
            entries,
            counts,
            sums,
            usage_accum,
            gamma,
            step,
            dim,
        })
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let cb = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(cb)
    }

    /// Round entries to their 32-bit stored representation, so in-memory
    /// state matches exactly what a save/load cycle yields.
    pub fn round_to_storage(&mut self) {
        for e in &mut self.entries {
            for x in e.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        numerics::l2_normalize(v).unwrap()
    }

    fn basis_codebook() -> Codebook {
        Codebook::from_entries(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]],
            0.99,
        )
        .unwrap()
    }

    #[test]
    fn init_two_point_masses() {
        let mut samples = Vec::new();
        for _ in 0..8 {
            samples.push(vec![2.0, 0.0]);
            samples.push(vec![0.0, 3.0]);
        }
        let cb = Codebook::init_kmeans(&samples, 2, 0.99, &mut SeededRng::new(1)).unwrap();
        let mut es = cb.entries().to_vec();
        es.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((es[0][1] - 1.0).abs() < 1e-9);
        assert!((es[1][0] - 1.0).abs() < 1e-9);
        assert_eq!(cb.step(), 0);
        assert!(cb.counts.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn init_k1_is_global_mean() {
        let samples = vec![vec![1.0, 1.0], vec![3.0, 1.0]];
        let cb = Codebook::init_kmeans(&samples, 1, 0.99, &mut SeededRng::new(1)).unwrap();
        let expect = unit(&[2.0, 1.0]);
        for (a, b) in cb.entry(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_init_beats_random_subset_init() {
        // 200 random unit 8-D samples, K=16: quantization MSE of the k-means
        // initialized book must not exceed a random-subset initialization.
        let mut rng = SeededRng::new(42);
        let samples: Vec<Vec<f64>> = (0..200).map(|_| unit(&rng.normal_vec(8))).collect();
        let cb = Codebook::init_kmeans(&samples, 16, 0.99, &mut SeededRng::new(5)).unwrap();

        let mse = |entries: &[Vec<f64>]| -> f64 {
            samples
                .iter()
                .map(|s| {
                    entries
                        .iter()
                        .map(|e| numerics::sq_dist(s, e).unwrap())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / samples.len() as f64
        };

        let mut pick = SeededRng::new(6);
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        pick.shuffle(&mut idx);
        let random_init: Vec<Vec<f64>> = idx[..16].iter().map(|&i| samples[i].clone()).collect();

        assert!(
            mse(cb.entries()) <= mse(&random_init) + 1e-12,
            "kmeans init mse {} vs random init {}",
            mse(cb.entries()),
            mse(&random_init)
        );
    }

    #[test]
    fn nearest_identity_and_hand_case() {
        let cb = basis_codebook();
        let (i, d) = cb.nearest(&[0.0, -1.0]).unwrap();
        assert_eq!((i, d), (3, 0.0));
        let (i, d) = cb.nearest(&[0.9, 0.1]).unwrap();
        assert_eq!(i, 0);
        assert!((d - 0.02).abs() < 1e-12);
    }

    #[test]
    fn nearest_tie_breaks_to_smallest_index() {
        let cb = basis_codebook();
        // equidistant from entries 0 and 1
        let (i, _) = cb.nearest(&unit(&[1.0, 1.0])).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn nearest_matches_linear_scan_oracle() {
        let mut rng = SeededRng::new(17);
        let entries: Vec<Vec<f64>> = (0..32).map(|_| unit(&rng.normal_vec(6))).collect();
        let cb = Codebook::from_entries(entries.clone(), 0.99).unwrap();
        for _ in 0..1000 {
            let q = rng.normal_vec(6);
            let (got, _) = cb.nearest(&q).unwrap();
            let mut want = 0;
            let mut want_d = f64::INFINITY;
            for (k, e) in entries.iter().enumerate() {
                let d: f64 = q.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < want_d {
                    want_d = d;
                    want = k;
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ema_single_step_closed_form() {
        let mut cb = basis_codebook();
        let mut buckets = vec![Vec::new(); 4];
        buckets[2] = vec![vec![2.0, 0.0]];
        cb.ema_update(&buckets).unwrap();
        assert!((cb.counts[2] - 0.01).abs() < 1e-15);
        assert!((cb.sums[2][0] - 0.02).abs() < 1e-15);
        assert!((cb.sums[2][1] - 0.0).abs() < 1e-15);
        // f/N = [2, 0] -> normalized [1, 0]
        assert!((cb.entry(2)[0] - 1.0).abs() < 1e-12);
        assert!(cb.entry(2)[1].abs() < 1e-12);
        assert_eq!(cb.step(), 1);
        // untouched entries keep zero accumulators
        assert_eq!(cb.counts[0], 0.0);
    }

    #[test]
    fn ema_no_assignments_only_steps() {
        let mut cb = basis_codebook();
        let before = cb.clone();
        cb.ema_update(&vec![Vec::new(); 4]).unwrap();
        assert_eq!(cb.entries, before.entries);
        assert_eq!(cb.counts, before.counts);
        assert_eq!(cb.step(), before.step() + 1);
    }

    #[test]
    fn ema_constant_input_converges() {
        let mut cb = basis_codebook();
        let v = unit(&[0.6, -0.8]);
        let mut buckets = vec![Vec::new(); 4];
        buckets[1] = vec![v.clone()];
        for _ in 0..1000 {
            cb.ema_update(&buckets).unwrap();
        }
        let d = numerics::sq_dist(cb.entry(1), &v).unwrap().sqrt();
        assert!(d < 1e-3, "residual {d} after 1000 steps");
    }

    #[test]
    fn entries_unit_norm_after_updates() {
        let mut rng = SeededRng::new(8);
        let mut cb = basis_codebook();
        for _ in 0..50 {
            let mut buckets = vec![Vec::new(); 4];
            for _ in 0..6 {
                let z = unit(&rng.normal_vec(2));
                let (k, _) = cb.nearest(&z).unwrap();
                buckets[k].push(z);
            }
            cb.ema_update(&buckets).unwrap();
            let feats: Vec<Vec<f64>> = (0..4).map(|_| unit(&rng.normal_vec(2))).collect();
            let counts: Vec<f64> = buckets.iter().map(|b| b.len() as f64).collect();
            cb.reinit_dead(&feats, &counts, &mut rng).unwrap();
            for e in cb.entries() {
                assert!((numerics::norm(e) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reinit_alpha_limits() {
        let mut cb = basis_codebook();
        // entry 0 heavily used, entry 1 never used
        cb.usage_accum = vec![0.25, 0.0, 0.25, 0.25];
        let before = cb.entries.clone();
        let feats = vec![unit(&[0.3, 0.95]); 3];
        // counts keep the same usage pattern after smoothing
        cb.reinit_dead(&feats, &[10.0, 0.0, 10.0, 10.0], &mut SeededRng::new(3))
            .unwrap();
        // high-usage entries untouched
        for k in [0usize, 2, 3] {
            assert_eq!(cb.entries[k], before[k], "active entry {k} moved");
        }
        // dead entry lands next to the anchor (alpha = exp(-1e-3))
        let d = numerics::sq_dist(cb.entry(1), &feats[0]).unwrap().sqrt();
        assert!(d < 5e-3, "dead entry distance to anchor {d}");
    }

    #[test]
    fn reinit_two_population_simulation() {
        // 25% of entries starved for 200 batches: starved entries travel,
        // fed entries stay put.
        let mut rng = SeededRng::new(21);
        let entries: Vec<Vec<f64>> = (0..16).map(|_| unit(&rng.normal_vec(4))).collect();
        let mut cb = Codebook::from_entries(entries.clone(), 0.99).unwrap();
        let mut counts = vec![0.0; 16];
        for k in 0..12 {
            counts[k] = 5.0;
        }
        for _ in 0..200 {
            let feats: Vec<Vec<f64>> = (0..8).map(|_| unit(&rng.normal_vec(4))).collect();
            cb.reinit_dead(&feats, &counts, &mut rng).unwrap();
        }
        for k in 0..12 {
            let moved = numerics::sq_dist(cb.entry(k), &entries[k]).unwrap().sqrt();
            assert!(moved < 1e-6, "fed entry {k} moved {moved}");
        }
        for k in 12..16 {
            let moved = numerics::sq_dist(cb.entry(k), &entries[k]).unwrap().sqrt();
            assert!(moved >= 0.1, "starved entry {k} only moved {moved}");
        }
    }

    #[test]
    fn usage_stats_examples() {
        let cb = Codebook::from_entries(vec![vec![1.0, 0.0]; 8], 0.99).unwrap();
        let uniform: Vec<usize> = (0..8).collect();
        let s = cb.usage_stats(&uniform).unwrap();
        assert!((s.usage_rate - 1.0).abs() < 1e-12);
        assert!((s.perplexity - 8.0).abs() < 1e-9);

        let s = cb.usage_stats(&[3; 100]).unwrap();
        assert!((s.usage_rate - 0.125).abs() < 1e-12);
        assert!((s.perplexity - 1.0).abs() < 1e-9);

        let cb4 = Codebook::from_entries(vec![vec![1.0, 0.0]; 4], 0.99).unwrap();
        let s = cb4.usage_stats(&[0, 0, 1, 1]).unwrap();
        assert!((s.usage_rate - 0.5).abs() < 1e-12);
        assert!((s.perplexity - 2.0).abs() < 1e-9);
    }

    #[test]
    fn usage_stats_empty_rejected() {
        let cb = basis_codebook();
        assert!(matches!(cb.usage_stats(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = SeededRng::new(4);
        let samples: Vec<Vec<f64>> = (0..64).map(|_| rng.normal_vec(6)).collect();
        let mut cb = Codebook::init_kmeans(&samples, 8, 0.99, &mut rng).unwrap();
        let mut buckets = vec![Vec::new(); 8];
        buckets[3] = vec![unit(&rng.normal_vec(6))];
        cb.ema_update(&buckets).unwrap();

        let bytes = cb.save();
        let loaded = Codebook::load(&bytes).unwrap();
        // accumulators and metadata survive exactly
        assert_eq!(loaded.counts, cb.counts);
        assert_eq!(loaded.sums, cb.sums);
        assert_eq!(loaded.usage_accum, cb.usage_accum);
        assert_eq!(loaded.step, cb.step);
        assert_eq!(loaded.gamma, cb.gamma);
        // entries survive at their 32-bit storage precision
        let mut rounded = cb.clone();
        rounded.round_to_storage();
        assert_eq!(loaded.entries, rounded.entries);
        // a second cycle is exact in every field
        assert_eq!(Codebook::load(&loaded.save()).unwrap(), loaded);
        assert_eq!(loaded.save(), bytes);
    }

    #[test]
    fn load_rejects_truncated_and_bad_magic() {
        let cb = basis_codebook();
        let bytes = cb.save();
        assert!(matches!(
            Codebook::load(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptContainer(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Codebook::load(&bad),
            Err(Error::CorruptContainer(_))
        ));
    }
}
