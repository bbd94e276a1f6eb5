//! Compositional (partitioned) quantization: a d-dimensional embedding is
//! sliced into m contiguous sub-vectors of dimension d* = d/m, each
//! unit-normalized and quantized independently against one codebook. The
//! representable set grows to K^m code combinations.

use crate::codebook::Codebook;
use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics;

const MAGIC: &[u8; 4] = b"CBQZ";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionalQuantizer {
    pub codebook: Codebook,
    /// Number of sub-vector slots.
    pub m: usize,
    /// Full embedding dimension, m * codebook.dim().
    pub d: usize,
}

/// Result of quantizing one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    /// Selected entry per slot.
    pub codes: Vec<usize>,
    /// Concatenation of the selected unit codevectors (dim d).
    pub quantized: Vec<f64>,
    /// Sum over slots of the squared distance between the normalized
    /// sub-vector and its codevector.
    pub commit_sq_dist: f64,
}

/// Batch output: per-sample results plus the per-entry lists of normalized
/// sub-vectors needed by the codebook EMA step.
#[derive(Debug, Clone)]
pub struct QuantizeBatch {
    pub results: Vec<QuantizeResult>,
    /// assignments[k] = normalized sub-vectors assigned to entry k.
    pub assignments: Vec<Vec<Vec<f64>>>,
    /// Normalized sub-vectors in input order (sample-major, then slot).
    pub normalized_slots: Vec<Vec<f64>>,
}

impl CompositionalQuantizer {
    pub fn new(codebook: Codebook, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("quantizer: m must be >= 1".into()));
        }
        let d = codebook.dim() * m;
        Ok(Self { codebook, m, d })
    }

    pub fn sub_dim(&self) -> usize {
        self.codebook.dim()
    }

    /// Slice `z` into m sub-vectors and unit-normalize each.
    pub fn normalize_slots(&self, z: &[f64]) -> Result<Vec<Vec<f64>>> {
        if z.len() != self.d {
            return Err(Error::DimMismatch {
                context: "quantize input",
                expected: self.d,
                got: z.len(),
            });
        }
        let ds = self.sub_dim();
        (0..self.m)
            .map(|h| numerics::l2_normalize(&z[h * ds..(h + 1) * ds]))
            .collect()
    }

    pub fn quantize(&self, z: &[f64]) -> Result<QuantizeResult> {
        let slots = self.normalize_slots(z)?;
        self.quantize_slots(&slots)
    }

    /// Quantize already-normalized sub-vectors.
    pub fn quantize_slots(&self, slots: &[Vec<f64>]) -> Result<QuantizeResult> {
        let mut codes = Vec::with_capacity(self.m);
        let mut quantized = Vec::with_capacity(self.d);
        let mut commit = 0.0;
        for s in slots {
            let (k, dist) = self.codebook.nearest(s)?;
            codes.push(k);
            quantized.extend_from_slice(self.codebook.entry(k));
            commit += dist;
        }
        Ok(QuantizeResult {
            codes,
            quantized,
            commit_sq_dist: commit,
        })
    }

    /// Quantize a batch and collect per-entry assignment lists for
    /// [`Codebook::ema_update`].
    pub fn quantize_batch(&self, zs: &[Vec<f64>]) -> Result<QuantizeBatch> {
        let mut results = Vec::with_capacity(zs.len());
        let mut assignments = vec![Vec::new(); self.codebook.len()];
        let mut normalized_slots = Vec::with_capacity(zs.len() * self.m);
        for z in zs {
            let slots = self.normalize_slots(z)?;
            let r = self.quantize_slots(&slots)?;
            for (slot, &code) in slots.iter().zip(&r.codes) {
                assignments[code].push(slot.clone());
            }
            normalized_slots.extend(slots);
            results.push(r);
        }
        Ok(QuantizeBatch {
            results,
            assignments,
            normalized_slots,
        })
    }

    /// Representable code combinations K^m, saturating at u128::MAX.
    pub fn capacity(&self) -> u128 {
        let k = self.codebook.len() as u128;
        let mut out: u128 = 1;
        for _ in 0..self.m {
            out = match out.checked_mul(k) {
                Some(v) => v,
                None => return u128::MAX,
            };
        }
        out
    }

    /// Number of distinct code tuples produced over `zs`.
    pub fn distinct_outputs(&self, zs: &[Vec<f64>]) -> Result<usize> {
        let mut seen = std::collections::BTreeSet::new();
        for z in zs {
            seen.insert(self.quantize(z)?.codes);
        }
        Ok(seen.len())
    }

    // ── Persistence ─────────────────────────────────────────────────

    pub fn write_to(&self, w: &mut Writer) {
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(self.m as u32);
        w.u32(self.d as u32);
        self.codebook.write_to(w);
    }

    pub fn save(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_to(&mut w);
        w.into_bytes()
    }

    pub fn read_from(r: &mut Reader) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let m = r.u32()? as usize;
        let d = r.u32()? as usize;
        let codebook = Codebook::read_from(r)?;
        if m == 0 || d != m * codebook.dim() {
            return Err(Error::CorruptContainer(format!(
                "quantizer m={m}, d={d} inconsistent with codebook dim {}",
                codebook.dim()
            )));
        }
        Ok(Self { codebook, m, d })
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let q = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(q)
    }
}

/// The codebook pairing used by one alignment path: every modality shares a
/// single universal quantizer; each non-text modality additionally owns a
/// specific quantizer. Text carries shared semantics only.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityCodebookSet {
    pub shared: CompositionalQuantizer,
    /// (modality id, quantizer) for each non-text modality.
    pub specific: Vec<(u8, CompositionalQuantizer)>,
}

impl ModalityCodebookSet {
    pub fn specific_for(&self, modality: u8) -> Option<&CompositionalQuantizer> {
        self.specific
            .iter()
            .find(|(m, _)| *m == modality)
            .map(|(_, q)| q)
    }

    pub fn specific_for_mut(&mut self, modality: u8) -> Option<&mut CompositionalQuantizer> {
        self.specific
            .iter_mut()
            .find(|(m, _)| *m == modality)
            .map(|(_, q)| q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn unit(v: &[f64]) -> Vec<f64> {
        numerics::l2_normalize(v).unwrap()
    }

    fn two_entry_quantizer() -> CompositionalQuantizer {
        let cb = Codebook::from_entries(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0.99).unwrap();
        CompositionalQuantizer::new(cb, 2).unwrap()
    }

    #[test]
    fn quantize_exact_match() {
        let q = two_entry_quantizer();
        let r = q.quantize(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(r.codes, vec![0, 1]);
        assert_eq!(r.quantized, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(r.commit_sq_dist.abs() < 1e-12);
    }

    #[test]
    fn quantize_per_slot_nearest() {
        let q = two_entry_quantizer();
        let r = q.quantize(&[0.9, 0.1, 0.2, 0.8]).unwrap();
        assert_eq!(r.codes, vec![0, 1]);
    }

    #[test]
    fn quantize_dim_mismatch() {
        let q = two_entry_quantizer();
        assert!(matches!(
            q.quantize(&[1.0, 0.0, 0.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = SeededRng::new(10);
        let entries: Vec<Vec<f64>> = (0..16).map(|_| unit(&rng.normal_vec(4))).collect();
        let cb = Codebook::from_entries(entries.clone(), 0.99).unwrap();
        let q = CompositionalQuantizer::new(cb, 3).unwrap();
        for _ in 0..500 {
            let z = rng.normal_vec(12);
            let r = q.quantize(&z).unwrap();
            for h in 0..3 {
                let slot = unit(&z[h * 4..(h + 1) * 4]);
                let mut want = 0;
                let mut want_d = f64::INFINITY;
                for (k, e) in entries.iter().enumerate() {
                    let d = numerics::sq_dist(&slot, e).unwrap();
                    if d < want_d {
                        want_d = d;
                        want = k;
                    }
                }
                assert_eq!(r.codes[h], want, "slot {h}");
            }
        }
    }

    #[test]
    fn quantize_idempotent() {
        let mut rng = SeededRng::new(12);
        let entries: Vec<Vec<f64>> = (0..8).map(|_| unit(&rng.normal_vec(4))).collect();
        let q =
            CompositionalQuantizer::new(Codebook::from_entries(entries, 0.99).unwrap(), 2).unwrap();
        for _ in 0..50 {
            let z = rng.normal_vec(8);
            let once = q.quantize(&z).unwrap();
            let twice = q.quantize(&once.quantized).unwrap();
            assert_eq!(once.quantized, twice.quantized);
            assert!(twice.commit_sq_dist < 1e-12);
        }
    }

    #[test]
    fn batch_matches_loop() {
        let mut rng = SeededRng::new(13);
        let q = two_entry_quantizer();
        let zs: Vec<Vec<f64>> = (0..20).map(|_| rng.normal_vec(4)).collect();
        let batch = q.quantize_batch(&zs).unwrap();
        for (z, r) in zs.iter().zip(&batch.results) {
            assert_eq!(*r, q.quantize(z).unwrap());
        }
        // every assigned vector is the normalized slot of some input
        let total: usize = batch.assignments.iter().map(|a| a.len()).sum();
        assert_eq!(total, zs.len() * q.m);
        for (k, bucket) in batch.assignments.iter().enumerate() {
            for v in bucket {
                assert_eq!(q.codebook.nearest(v).unwrap().0, k);
            }
        }
    }

    #[test]
    fn batch_empty_and_identical() {
        let q = two_entry_quantizer();
        let batch = q.quantize_batch(&[]).unwrap();
        assert!(batch.results.is_empty());
        assert!(batch.assignments.iter().all(|a| a.is_empty()));

        let zs = vec![vec![0.7, 0.3, 0.8, 0.2]; 5];
        let batch = q.quantize_batch(&zs).unwrap();
        for r in &batch.results {
            assert_eq!(r.codes, batch.results[0].codes);
        }
    }

    #[test]
    fn capacity_values() {
        let cb2 = Codebook::from_entries(vec![vec![1.0], vec![-1.0]], 0.99).unwrap();
        let q = CompositionalQuantizer::new(cb2, 3).unwrap();
        assert_eq!(q.capacity(), 8);

        let cb1 = Codebook::from_entries(vec![vec![1.0]], 0.99).unwrap();
        let q = CompositionalQuantizer::new(cb1, 7).unwrap();
        assert_eq!(q.capacity(), 1);

        // paper-scale configuration saturates the sentinel
        let mut rng = SeededRng::new(1);
        let entries: Vec<Vec<f64>> = (0..1024).map(|_| unit(&rng.normal_vec(8))).collect();
        let q = CompositionalQuantizer::new(Codebook::from_entries(entries, 0.99).unwrap(), 128)
            .unwrap();
        assert_eq!(q.capacity(), u128::MAX);
    }

    #[test]
    fn distinct_outputs_enumeration() {
        let q = two_entry_quantizer();
        // all 4 slot-wise combinations of the two entries
        let mut zs = Vec::new();
        for a in [[1.0, 0.0], [0.0, 1.0]] {
            for b in [[1.0, 0.0], [0.0, 1.0]] {
                zs.push([a, b].concat());
            }
        }
        assert_eq!(q.distinct_outputs(&zs).unwrap(), 4);
        assert_eq!(q.distinct_outputs(&vec![zs[0].clone(); 9]).unwrap(), 1);
    }

    #[test]
    fn compositional_beats_standard_vq_capacity() {
        // K=3, m=2 versus standard VQ (m=1) with the same codebook budget
        let mut rng = SeededRng::new(77);
        let sub_entries: Vec<Vec<f64>> = (0..3).map(|_| unit(&rng.normal_vec(2))).collect();
        let comp = CompositionalQuantizer::new(
            Codebook::from_entries(sub_entries.clone(), 0.99).unwrap(),
            2,
        )
        .unwrap();
        let full_entries: Vec<Vec<f64>> = (0..3).map(|_| unit(&rng.normal_vec(4))).collect();
        let std_vq =
            CompositionalQuantizer::new(Codebook::from_entries(full_entries, 0.99).unwrap(), 1)
                .unwrap();

        let mut zs = Vec::new();
        for a in &sub_entries {
            for b in &sub_entries {
                zs.push([a.clone(), b.clone()].concat());
            }
        }
        assert_eq!(comp.distinct_outputs(&zs).unwrap(), 9);
        assert!(std_vq.distinct_outputs(&zs).unwrap() <= 3);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = SeededRng::new(3);
        let entries: Vec<Vec<f64>> = (0..8).map(|_| unit(&rng.normal_vec(4))).collect();
        let mut q =
            CompositionalQuantizer::new(Codebook::from_entries(entries, 0.99).unwrap(), 4).unwrap();
        q.codebook.round_to_storage();
        let bytes = q.save();
        let loaded = CompositionalQuantizer::load(&bytes).unwrap();
        assert_eq!(loaded, q);
        assert_eq!(loaded.save(), bytes);
    }

    #[test]
    fn load_rejects_garbage() {
        assert!(matches!(
            CompositionalQuantizer::load(b"CBQZgarbage"),
            Err(Error::CorruptContainer(_))
        ));
    }
}
