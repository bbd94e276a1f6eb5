//! Synthetic multimodal data with a known shared/specific factorization.
//!
//! Each concept owns a fixed shared latent s; every sample additionally
//! draws per-modality specific latents u. Observations are linear mixes
//! x = A s + B u + noise. Modality 0 is text-like: its B is zero, so text
//! observations carry shared semantics only.

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of concepts C.
    pub concepts: usize,
    /// Shared latent dimension p.
    pub shared_dim: usize,
    /// Specific latent dimension q.
    pub spec_dim: usize,
    /// Modality count; modality 0 is text-like.
    pub n_modalities: usize,
    /// Observation dimension per modality.
    pub obs_dim: usize,
    /// Observation noise sigma.
    pub noise: f64,
    pub samples_per_concept: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            concepts: 16,
            shared_dim: 8,
            spec_dim: 4,
            n_modalities: 3,
            obs_dim: 32,
            noise: 0.05,
            samples_per_concept: 64,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concepts == 0
            || self.shared_dim == 0
            || self.spec_dim == 0
            || self.obs_dim == 0
            || self.samples_per_concept == 0
        {
            return Err(Error::InvalidSpec("all counts must be >= 1".into()));
        }
        if self.n_modalities < 2 {
            return Err(Error::InvalidSpec(
                "need text plus at least one other modality".into(),
            ));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::InvalidSpec(format!("noise {} < 0", self.noise)));
        }
        if self.obs_dim < self.shared_dim {
            return Err(Error::InvalidSpec(
                "obs_dim must be >= shared_dim for identifiable mixing".into(),
            ));
        }
        Ok(())
    }
}

/// One aligned tuple: the same concept observed by every modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub concept: u32,
    /// Per-modality specific latents (all-zero for text).
    pub u: Vec<Vec<f64>>,
    /// Per-modality observations.
    pub x: Vec<Vec<f64>>,
}

/// Row-major obs_dim x in_dim mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mixing {
    fn random(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
        Self { rows, cols, data }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// Fixed shared latent per concept.
    pub shared_latents: Vec<Vec<f64>>,
    /// Per-modality shared mixing A (obs x p).
    pub mixing_a: Vec<Mixing>,
    /// Per-modality specific mixing B (obs x q); zero for text.
    pub mixing_b: Vec<Mixing>,
    /// Concept-major sample order: concept c, sample j at c*spc + j.
    pub samples: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_index(&self, concept: usize, j: usize) -> usize {
        concept * self.spec.samples_per_concept + j
    }

    /// Observations of one modality, in sample order.
    pub fn observations(&self, modality: usize) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.x[modality].clone()).collect()
    }

    pub fn concepts_of_samples(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.concept).collect()
    }

    /// Specific latents of one modality, in sample order.
    pub fn specific_latents(&self, modality: usize) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.u[modality].clone()).collect()
    }
}

/// Deterministically generate the dataset from its spec.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);

    let shared_latents: Vec<Vec<f64>> = (0..spec.concepts)
        .map(|_| rng.normal_vec(spec.shared_dim))
        .collect();

    let a_scale = 1.0 / (spec.shared_dim as f64).sqrt();
    let b_scale = 1.0 / (spec.spec_dim as f64).sqrt();
    let mut mixing_a = Vec::with_capacity(spec.n_modalities);
    let mut mixing_b = Vec::with_capacity(spec.n_modalities);
    for m in 0..spec.n_modalities {
        mixing_a.push(Mixing::random(spec.obs_dim, spec.shared_dim, a_scale, &mut rng));
        mixing_b.push(if m == 0 {
            Mixing::zeros(spec.obs_dim, spec.spec_dim)
        } else {
            Mixing::random(spec.obs_dim, spec.spec_dim, b_scale, &mut rng)
        });
    }

    let mut samples = Vec::with_capacity(spec.concepts * spec.samples_per_concept);
    for c in 0..spec.concepts {
        let s = &shared_latents[c];
        for _ in 0..spec.samples_per_concept {
            let mut u = Vec::with_capacity(spec.n_modalities);
            let mut x = Vec::with_capacity(spec.n_modalities);
            for m in 0..spec.n_modalities {
                let um = if m == 0 {
                    vec![0.0; spec.spec_dim]
                } else {
                    rng.normal_vec(spec.spec_dim)
                };
                let mut xm = mixing_a[m].apply(s);
                for (xi, bi) in xm.iter_mut().zip(mixing_b[m].apply(&um)) {
                    *xi += bi;
                }
                for xi in xm.iter_mut() {
                    *xi += spec.noise * rng.normal();
                }
                u.push(um);
                x.push(xm);
            }
            samples.push(SyntheticSample {
                concept: c as u32,
                u,
                x,
            });
        }
    }

    Ok(SyntheticDataset {
        spec: spec.clone(),
        shared_latents,
        mixing_a,
        mixing_b,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            concepts: 4,
            shared_dim: 3,
            spec_dim: 2,
            n_modalities: 3,
            obs_dim: 8,
            noise: 0.0,
            samples_per_concept: 5,
            seed: 11,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_concept_differs_only_through_specific_mixing() {
        let ds = generate(&small_spec()).unwrap();
        let (i, j) = (ds.sample_index(2, 0), ds.sample_index(2, 1));
        // sigma = 0: text observations of one concept are identical (B = 0)
        assert_eq!(ds.samples[i].x[0], ds.samples[j].x[0]);
        // non-text observations differ exactly by B(u_i - u_j)
        let du: Vec<f64> = ds.samples[i].u[1]
            .iter()
            .zip(&ds.samples[j].u[1])
            .map(|(a, b)| a - b)
            .collect();
        let expect = ds.mixing_b[1].apply(&du);
        for ((xi, xj), e) in ds.samples[i].x[1].iter().zip(&ds.samples[j].x[1]).zip(&expect) {
            assert!((xi - xj - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_b_makes_same_concept_identical() {
        let ds = generate(&small_spec()).unwrap();
        for c in 0..4 {
            let base = &ds.samples[ds.sample_index(c, 0)].x[0];
            for j in 1..5 {
                assert_eq!(&ds.samples[ds.sample_index(c, j)].x[0], base);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec();
        s.noise = -0.1;
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
        let mut s = small_spec();
        s.concepts = 0;
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
        let mut s = small_spec();
        s.n_modalities = 1;
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn empirical_covariance_matches_closed_form() {
        // Monte-Carlo over many concepts/samples vs A A^T + B B^T + sigma^2 I
        // shared latents are fixed per concept, so the shared part of the
        // covariance averages over concepts; use many concepts
        let spec = SyntheticSpec {
            concepts: 2000,
            shared_dim: 3,
            spec_dim: 2,
            n_modalities: 2,
            obs_dim: 4,
            noise: 0.1,
            samples_per_concept: 5,
            seed: 5,
        };
        let ds = generate(&spec).unwrap();
        let m = 1usize;
        let n = ds.len();
        let d = spec.obs_dim;

        let mut mean = vec![0.0; d];
        for s in &ds.samples {
            for (mi, xi) in mean.iter_mut().zip(&s.x[m]) {
                *mi += xi / n as f64;
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for s in &ds.samples {
            for r in 0..d {
                for c in 0..d {
                    cov[r][c] += (s.x[m][r] - mean[r]) * (s.x[m][c] - mean[c]) / n as f64;
                }
            }
        }

        let closed = |r: usize, c: usize| -> f64 {
            let a = &ds.mixing_a[m];
            let b = &ds.mixing_b[m];
            let mut v = 0.0;
            for t in 0..a.cols {
                v += a.data[r * a.cols + t] * a.data[c * a.cols + t];
            }
            for t in 0..b.cols {
                v += b.data[r * b.cols + t] * b.data[c * b.cols + t];
            }
            if r == c {
                v += spec.noise * spec.noise;
            }
            v
        };

        let mut max_err = 0.0f64;
        for r in 0..d {
            for c in 0..d {
                max_err = max_err.max((cov[r][c] - closed(r, c)).abs());
            }
        }
        assert!(max_err < 0.1, "covariance max abs error {max_err}");
    }
}
