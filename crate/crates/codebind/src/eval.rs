//! Evaluation: cross-modal retrieval, zero-shot prototype classification,
//! linear probes, similarity statistics, fine-grained intra-modal retrieval,
//! and codebook usage diagnostics.
//!
//! All protocols run on quantized embeddings. Cross-modal work uses shared
//! embeddings only; specific embeddings enter through the probes, the
//! similarity report, and the concatenated fine-grained retrieval.

use crate::codebook::UsageStats;
use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::numerics::{self, SeededRng};
use crate::quantizer::ModalityCodebookSet;
use crate::synth::SyntheticDataset;
use std::collections::BTreeMap;

/// Quantized (and pre-quantization) embeddings of one modality over a
/// dataset, in sample order.
#[derive(Debug, Clone)]
pub struct ModalityEmbeddings {
    pub modality: u8,
    /// Slot-normalized continuous embeddings (quantizer inputs).
    pub shared_zn: Vec<Vec<f64>>,
    pub shared_q: Vec<Vec<f64>>,
    pub shared_codes: Vec<Vec<usize>>,
    pub spec_zn: Option<Vec<Vec<f64>>>,
    pub spec_q: Option<Vec<Vec<f64>>>,
    pub spec_codes: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct DatasetEmbeddings {
    pub concepts: Vec<u32>,
    pub per_modality: Vec<ModalityEmbeddings>,
}

/// Embed every sample of every modality.
pub fn embed_dataset(
    model: &Model,
    set: &ModalityCodebookSet,
    ds: &SyntheticDataset,
) -> Result<DatasetEmbeddings> {
    let mut per_modality = Vec::with_capacity(ds.spec.n_modalities);
    for m in 0..ds.spec.n_modalities {
        let xs = ds.observations(m);
        let trace = model::forward_batch(model, set, m as u8, &xs, None)?;
        let spec = trace.spec.as_ref();
        per_modality.push(ModalityEmbeddings {
            modality: m as u8,
            shared_zn: trace.shared.zn.clone(),
            shared_q: trace.shared.quantized(),
            shared_codes: trace.shared.results.iter().map(|r| r.codes.clone()).collect(),
            spec_zn: spec.map(|s| s.zn.clone()),
            spec_q: spec.map(|s| s.quantized()),
            spec_codes: spec.map(|s| s.results.iter().map(|r| r.codes.clone()).collect()),
        });
    }
    Ok(DatasetEmbeddings {
        concepts: ds.concepts_of_samples(),
        per_modality,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = numerics::norm(a);
    let nb = numerics::norm(b);
    if na < 1e-30 || nb < 1e-30 {
        return 0.0;
    }
    numerics::dot(a, b) / (na * nb)
}

/// Rank gallery items by cosine similarity (descending, index tie-break)
/// and return the gallery indices in rank order.
fn rank_by_cosine(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (cosine(query, g), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Exact-index recall@K: query i is a hit when gallery item i ranks in the
/// top K. Queries and gallery are paired by position.
pub fn retrieval_recall(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if queries.len() != gallery.len() {
        return Err(Error::BatchMismatch {
            left: queries.len(),
            right: gallery.len(),
        });
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("retrieval: no queries"));
    }
    let mut hits = vec![0usize; ks.len()];
    for (i, q) in queries.iter().enumerate() {
        let ranked = rank_by_cosine(q, gallery);
        let pos = ranked.iter().position(|&g| g == i).unwrap();
        for (ki, &k) in ks.iter().enumerate() {
            if pos < k {
                hits[ki] += 1;
            }
        }
    }
    Ok(hits
        .iter()
        .map(|&h| h as f64 / queries.len() as f64)
        .collect())
}

/// Argmax-cosine classification against per-concept prototypes.
pub fn zero_shot(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    prototypes: &BTreeMap<u32, Vec<f64>>,
) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("zero_shot: no embeddings"));
    }
    for l in labels {
        if !prototypes.contains_key(l) {
            return Err(Error::MissingPrototype(*l));
        }
    }
    let protos: Vec<(&u32, &Vec<f64>)> = prototypes.iter().collect();
    let mut correct = 0usize;
    for (e, l) in embeddings.iter().zip(labels) {
        let mut best = 0usize;
        let mut best_s = f64::NEG_INFINITY;
        for (i, (_, p)) in protos.iter().enumerate() {
            let s = cosine(e, p);
            if s > best_s {
                best_s = s;
                best = i;
            }
        }
        if *protos[best].0 == *l {
            correct += 1;
        }
    }
    Ok(correct as f64 / embeddings.len() as f64)
}

/// Multinomial logistic regression on frozen embeddings: gradient descent
/// on the train split, accuracy on the held-out split.
pub fn linear_probe(
    embeddings: &[Vec<f64>],
    labels: &[u32],
    heldout_fraction: f64,
    rng: &mut SeededRng,
) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::BatchMismatch {
            left: embeddings.len(),
            right: labels.len(),
        });
    }
    let classes = match labels.iter().max() {
        Some(&m) => m as usize + 1,
        None => return Err(Error::EmptyInput("linear_probe: no samples")),
    };
    {
        let mut seen = vec![false; classes];
        for &l in labels {
            seen[l as usize] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::DegenerateLabels("need at least 2 classes"));
        }
    }

    let n = embeddings.len();
    let dim = embeddings[0].len();
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_test = ((n as f64 * heldout_fraction) as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = idx.split_at(n_test);

    let mut w = vec![vec![0.0; dim]; classes];
    let mut b = vec![0.0; classes];
    let lr = 1.0;
    let l2 = 1e-4;
    for _ in 0..250 {
        let mut gw = vec![vec![0.0; dim]; classes];
        let mut gb = vec![0.0; classes];
        for &i in train_idx {
            let x = &embeddings[i];
            let mut logits: Vec<f64> = (0..classes)
                .map(|c| numerics::dot(&w[c], x) + b[c])
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (c, l) in logits.iter_mut().enumerate() {
                let p = (*l - m).exp() / sum;
                let coeff = p - if c == labels[i] as usize { 1.0 } else { 0.0 };
                for (g, xi) in gw[c].iter_mut().zip(x) {
                    *g += coeff * xi;
                }
                gb[c] += coeff;
            }
        }
        let scale = lr / train_idx.len() as f64;
        for c in 0..classes {
            for (wi, gi) in w[c].iter_mut().zip(&gw[c]) {
                *wi -= scale * gi + lr * l2 * *wi;
            }
            b[c] -= scale * gb[c];
        }
    }

    let mut correct = 0usize;
    for &i in test_idx {
        let x = &embeddings[i];
        let mut best = 0usize;
        let mut best_l = f64::NEG_INFINITY;
        for c in 0..classes {
            let l = numerics::dot(&w[c], x) + b[c];
            if l > best_l {
                best_l = l;
                best = c;
            }
        }
        if best == labels[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_idx.len() as f64)
}

/// Cluster true specific latents into attribute labels with seeded k-means.
pub fn attribute_labels(latents: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Result<Vec<u32>> {
    let centroids = numerics::kmeans(latents, k, rng, 100)?;
    latents
        .iter()
        .map(|u| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = numerics::sq_dist(u, centroid)?;
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            Ok(best as u32)
        })
        .collect()
}

/// Per-class similarity aggregates over paired shared/specific embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityStats {
    /// Mean pairwise cosine among shared embeddings within a class.
    pub intra_shared: f64,
    /// Mean pairwise cosine among specific embeddings within a class.
    pub intra_specific: f64,
    /// Mean |cosine| between each sample's shared and specific embedding.
    pub inter_shared_specific: f64,
}

pub fn similarity_stats(
    shared: &[Vec<f64>],
    specific: &[Vec<f64>],
    labels: &[u32],
) -> Result<SimilarityStats> {
    if shared.len() != specific.len() || shared.len() != labels.len() {
        return Err(Error::BatchMismatch {
            left: shared.len(),
            right: specific.len(),
        });
    }
    if shared.is_empty() {
        return Err(Error::EmptyInput("similarity_stats: no samples"));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }

    let mut intra_shared = Vec::new();
    let mut intra_specific = Vec::new();
    let mut inter = Vec::new();
    for members in by_class.values() {
        let mut s_acc = Vec::new();
        let mut p_acc = Vec::new();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                s_acc.push(cosine(&shared[i], &shared[j]));
                p_acc.push(cosine(&specific[i], &specific[j]));
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                1.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        intra_shared.push(mean(&s_acc));
        intra_specific.push(mean(&p_acc));
        let i_acc: Vec<f64> = members
            .iter()
            .map(|&i| cosine(&shared[i], &specific[i]).abs())
            .collect();
        inter.push(mean(&i_acc));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SimilarityStats {
        intra_shared: mean(&intra_shared),
        intra_specific: mean(&intra_specific),
        inter_shared_specific: mean(&inter),
    })
}

/// Fine-grained intra-modal top-10 recall computed three ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcatRecall {
    pub shared_only: f64,
    pub specific_only: f64,
    pub concatenated: f64,
}

/// Hit@10 rate on fine-grained labels: a query scores when any of its top-10
/// gallery neighbours (self excluded) carries the same label.
pub fn concat_retrieval(
    shared: &[Vec<f64>],
    specific: &[Vec<f64>],
    fine_labels: &[u32],
) -> Result<ConcatRecall> {
    if shared.len() != specific.len() || shared.len() != fine_labels.len() {
        return Err(Error::BatchMismatch {
            left: shared.len(),
            right: specific.len(),
        });
    }
    if shared.len() < 2 {
        return Err(Error::BatchTooSmall {
            need: 2,
            got: shared.len(),
        });
    }
    let concat: Vec<Vec<f64>> = shared
        .iter()
        .zip(specific)
        .map(|(s, p)| {
            let mut v = s.clone();
            v.extend_from_slice(p);
            v
        })
        .collect();

    let hit_rate = |embs: &[Vec<f64>]| -> f64 {
        let n = embs.len();
        let mut hits = 0usize;
        for i in 0..n {
            let ranked = rank_by_cosine(&embs[i], embs);
            let mut taken = 0;
            for &j in &ranked {
                if j == i {
                    continue;
                }
                if fine_labels[j] == fine_labels[i] {
                    hits += 1;
                    break;
                }
                taken += 1;
                if taken >= 10 {
                    break;
                }
            }
        }
        hits as f64 / n as f64
    };

    Ok(ConcatRecall {
        shared_only: hit_rate(shared),
        specific_only: hit_rate(specific),
        concatenated: hit_rate(&concat),
    })
}

// ── Report assembly ─────────────────────────────────────────────────

/// Usage/perplexity plus retrieval and zero-shot numbers logged at the
/// in-loop evaluation cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreMetrics {
    /// ("shared" or "spec<modality>", stats), fixed order.
    pub usage: Vec<(String, UsageStats)>,
    /// target -> text (recall@1, recall@10)
    pub recall_tgt2txt: (f64, f64),
    /// text -> target
    pub recall_txt2tgt: (f64, f64),
    pub zero_shot_acc: f64,
}

/// Full evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub core: CoreMetrics,
    pub probe_shared_concept: f64,
    pub probe_specific_concept: f64,
    pub probe_shared_attr: f64,
    pub probe_specific_attr: f64,
    pub similarity: SimilarityStats,
    pub fine_grained: ConcatRecall,
}

/// Number of attribute clusters for probe labels.
pub const ATTRIBUTE_CLUSTERS: usize = 4;

fn eval_rng(ds: &SyntheticDataset, salt: u64) -> SeededRng {
    // evaluation randomness derives from the dataset seed only, so a
    // checkpoint can be re-evaluated without the training seed
    SeededRng::new(ds.spec.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// The target modality is the last one; modality 0 is text.
pub fn target_modality(ds: &SyntheticDataset) -> usize {
    ds.spec.n_modalities - 1
}

/// Full report: core metrics plus probes, similarity, fine-grained recall.
pub fn evaluate(
    model: &Model,
    set: &ModalityCodebookSet,
    ds: &SyntheticDataset,
) -> Result<EvalReport> {
    let emb = embed_dataset(model, set, ds)?;
    let core = core_from(set, ds, &emb)?;
    let tgt = target_modality(ds);
    let tgt_emb = &emb.per_modality[tgt];
    let spec_q = tgt_emb
        .spec_q
        .as_ref()
        .ok_or(Error::MissingSpecific)?;

    let attrs = attribute_labels(
        &ds.specific_latents(tgt),
        ATTRIBUTE_CLUSTERS,
        &mut eval_rng(ds, 1),
    )?;

    let probe = |feat: &Vec<Vec<f64>>, labels: &Vec<u32>, salt: u64| -> Result<f64> {
        linear_probe(feat, labels, 0.25, &mut eval_rng(ds, salt))
    };
    let concepts = emb.concepts.clone();
    let probe_shared_concept = probe(&tgt_emb.shared_q, &concepts, 2)?;
    let probe_specific_concept = probe(spec_q, &concepts, 3)?;
    let probe_shared_attr = probe(&tgt_emb.shared_q, &attrs, 4)?;
    let probe_specific_attr = probe(spec_q, &attrs, 5)?;

    let similarity = similarity_stats(&tgt_emb.shared_q, spec_q, &concepts)?;

    let fine: Vec<u32> = concepts
        .iter()
        .zip(&attrs)
        .map(|(&c, &a)| c * ATTRIBUTE_CLUSTERS as u32 + a)
        .collect();
    let fine_grained = concat_retrieval(&tgt_emb.shared_q, spec_q, &fine)?;

    Ok(EvalReport {
        core,
        probe_shared_concept,
        probe_specific_concept,
        probe_shared_attr,
        probe_specific_attr,
        similarity,
        fine_grained,
    })
}

/// Core metrics only (the cheap subset logged during training).
pub fn evaluate_core(
    model: &Model,
    set: &ModalityCodebookSet,
    ds: &SyntheticDataset,
) -> Result<CoreMetrics> {
    let emb = embed_dataset(model, set, ds)?;
    core_from(set, ds, &emb)
}

fn core_from(
    set: &ModalityCodebookSet,
    ds: &SyntheticDataset,
    emb: &DatasetEmbeddings,
) -> Result<CoreMetrics> {
    let tgt = target_modality(ds);

    let mut usage = Vec::new();
    let shared_assign: Vec<usize> = emb
        .per_modality
        .iter()
        .flat_map(|m| m.shared_codes.iter().flatten().copied())
        .collect();
    usage.push((
        "shared".to_string(),
        set.shared.codebook.usage_stats(&shared_assign)?,
    ));
    for m in &emb.per_modality {
        if let Some(codes) = &m.spec_codes {
            let assign: Vec<usize> = codes.iter().flatten().copied().collect();
            let q = set
                .specific_for(m.modality)
                .ok_or(Error::IncompleteTrace("missing specific quantizer"))?;
            usage.push((format!("spec{}", m.modality), q.codebook.usage_stats(&assign)?));
        }
    }

    let spc = ds.spec.samples_per_concept;
    let tuple_idx: Vec<usize> = (0..ds.spec.concepts).map(|c| c * spc).collect();
    let pick = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        tuple_idx.iter().map(|&i| rows[i].clone()).collect()
    };
    let q_tgt = pick(&emb.per_modality[tgt].shared_q);
    let q_txt = pick(&emb.per_modality[0].shared_q);
    let t2x = retrieval_recall(&q_tgt, &q_txt, &[1, 10])?;
    let x2t = retrieval_recall(&q_txt, &q_tgt, &[1, 10])?;

    let mut protos: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (e, &c) in emb.per_modality[0].shared_q.iter().zip(&emb.concepts) {
        let p = protos.entry(c).or_insert_with(|| vec![0.0; e.len()]);
        for (pi, ei) in p.iter_mut().zip(e) {
            *pi += ei;
        }
        *counts.entry(c).or_insert(0) += 1;
    }
    for (c, p) in protos.iter_mut() {
        let n = counts[c] as f64;
        p.iter_mut().for_each(|v| *v /= n);
    }
    let zs = zero_shot(&emb.per_modality[tgt].shared_q, &emb.concepts, &protos)?;

    Ok(CoreMetrics {
        usage,
        recall_tgt2txt: (t2x[0], t2x[1]),
        recall_txt2tgt: (x2t[0], x2t[1]),
        zero_shot_acc: zs,
    })
}
