//! The multi-path alignment training loop.
//!
//! Per step: forward all modalities on an aligned batch, evaluate the
//! eight-term objective, rebalance weights, backpropagate with
//! straight-through quantization, EMA-update every codebook from the
//! batch assignments, apply the codevector-uniformity nudge, reinitialize
//! dead codevectors, and append one metrics CSV row.
//!
//! The run is fully deterministic: (seed, config) fixes the dataset, the
//! parameter trajectory, and the metrics CSV byte for byte. Named rng
//! substreams are forked in a fixed order so toggling one consumer (e.g.
//! reinitialization) does not shift the others.

use crate::balancer::{AdaptiveBalancer, ManualWeights};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::eval::{self, CoreMetrics, DatasetEmbeddings, EvalReport};
use crate::losses::{self, LossName, LossTerm};
use crate::model::{
    self, Checkpoint, Model, ModelConfig, ModalityGradIn, ModalityTrace,
};
use crate::numerics::{self, SeededRng};
use crate::quantizer::{CompositionalQuantizer, ModalityCodebookSet};
use crate::synth::{self, SyntheticDataset, SyntheticSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    /// InfoNCE temperature.
    pub eta: f64,
    /// Commitment beta (the vq weight scales on top of it).
    pub beta: f64,
    /// EMA decay for codebook counts, sums, and usage.
    pub gamma: f64,
    pub k_shared: usize,
    pub k_spec: usize,
    pub d: usize,
    pub m: usize,
    pub hidden: usize,
    /// Concepts per batch; one fresh aligned tuple is drawn per concept.
    pub batch_concepts: usize,
    pub adaptive: bool,
    /// Manual lambda table, used when `adaptive` is false.
    pub manual: Vec<(LossName, f64)>,
    pub enabled: [bool; 8],
    pub reinit: bool,
    pub eval_every: usize,
    pub balancer_decay: f64,
    pub balancer_interval: u64,
    pub balancer_interval_step: u64,
    pub synth: SyntheticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 2000,
            lr: 5e-4,
            eta: 0.07,
            beta: 1.0,
            gamma: 0.99,
            k_shared: 64,
            k_spec: 16,
            d: 64,
            m: 8,
            hidden: 64,
            batch_concepts: 16,
            adaptive: true,
            manual: default_manual_table(),
            enabled: [true; 8],
            reinit: true,
            eval_every: 200,
            balancer_decay: 0.99,
            balancer_interval: 1,
            balancer_interval_step: 1,
            synth: SyntheticSpec::default(),
        }
    }
}

/// Fixed lambda table for manual-weight mode (depth-style preset).
pub fn default_manual_table() -> Vec<(LossName, f64)> {
    vec![
        (LossName::Recon, 1.0),
        (LossName::Orth, 0.1),
        (LossName::Uni, 1.0),
        (LossName::Vq, 1000.0),
        (LossName::Cm, 0.1),
        (LossName::Cctr, 0.01),
        (LossName::Cuni, 0.01),
    ]
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.d == 0 || self.m == 0 || self.d % self.m != 0 {
            return Err(Error::Config(format!(
                "d={} must be a positive multiple of m={}",
                self.d, self.m
            )));
        }
        if self.k_shared == 0 || self.k_spec == 0 || self.hidden == 0 {
            return Err(Error::Config("codebook sizes and hidden dim must be >= 1".into()));
        }
        if self.enabled[LossName::Cctr.index()] && (self.k_shared < 10 || self.k_spec < 10) {
            return Err(Error::Config(
                "cctr requires every codebook to have at least 10 entries".into(),
            ));
        }
        if self.batch_concepts < 2 {
            return Err(Error::Config("batch must cover at least 2 concepts".into()));
        }
        if self.batch_concepts > self.synth.concepts {
            return Err(Error::Config(format!(
                "batch_concepts {} exceeds concepts {}",
                self.batch_concepts, self.synth.concepts
            )));
        }
        if self.eta <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.eta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} not in (0,1)", self.gamma)));
        }
        if self.lr <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config("lr and beta must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Test hooks. `zero_grad_terms` keeps the named terms' values and weights
/// but suppresses their gradient contribution.
#[derive(Debug, Clone, Default)]
pub struct TrainHooks {
    pub zero_grad_terms: Vec<LossName>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final state, rounded to 32-bit storage (identical to what a
    /// save/load cycle yields).
    pub checkpoint: Checkpoint,
    pub metrics_csv: String,
    /// Full evaluation of the rounded final state.
    pub report: EvalReport,
    pub dataset: SyntheticDataset,
    /// Final-state embeddings of the whole dataset.
    pub embeddings: DatasetEmbeddings,
}

/// Alignment paths: the target modality against text and every bridge,
/// plus bridge-internal alignment against text.
pub fn alignment_paths(n_modalities: usize) -> Vec<(usize, usize)> {
    let tgt = n_modalities - 1;
    let mut paths = vec![(tgt, 0)];
    for b in 1..tgt {
        paths.push((tgt, b));
    }
    for b in 1..tgt {
        paths.push((b, 0));
    }
    paths
}

// ── Codebook initialization ─────────────────────────────────────────

/// Slot-normalized sub-vectors of the projection outputs, bypassing any
/// quantizer (used before the codebooks exist).
fn projection_slots(
    model: &Model,
    modality: usize,
    xs: &[Vec<f64>],
    specific: bool,
    m: usize,
) -> Result<Vec<Vec<f64>>> {
    let head = &model.heads[modality];
    let proj = if specific {
        head.spec_proj.as_ref().ok_or(Error::MissingSpecific)?
    } else {
        &head.shared_proj
    };
    let ds = model.d / m;
    let mut out = Vec::with_capacity(xs.len() * m);
    for x in xs {
        let (h, _) = head.encoder.forward(x)?;
        let (u, _) = proj.forward(&h)?;
        let z = numerics::l2_normalize(&u)?;
        for s in 0..m {
            out.push(numerics::l2_normalize(&z[s * ds..(s + 1) * ds])?);
        }
    }
    Ok(out)
}

fn init_subset(ds: &SyntheticDataset, modality: usize) -> Vec<Vec<f64>> {
    // stratified subset: up to 512 samples spread over all concepts
    let spc = ds.spec.samples_per_concept;
    let per = (512 / ds.spec.concepts).clamp(1, spc);
    let mut xs = Vec::new();
    for c in 0..ds.spec.concepts {
        for j in 0..per {
            xs.push(ds.samples[ds.sample_index(c, j)].x[modality].clone());
        }
    }
    xs
}

/// K-means initialization: the shared codebook from text sub-vectors, each
/// specific codebook from its own modality's sub-vectors.
pub fn init_codebooks(
    model: &Model,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<ModalityCodebookSet> {
    let text_slots = projection_slots(model, 0, &init_subset(ds, 0), false, cfg.m)?;
    let shared_cb = Codebook::init_kmeans(&text_slots, cfg.k_shared, cfg.gamma, rng)?;
    let shared = CompositionalQuantizer::new(shared_cb, cfg.m)?;

    let mut specific = Vec::new();
    for modality in 1..ds.spec.n_modalities {
        let slots = projection_slots(model, modality, &init_subset(ds, modality), true, cfg.m)?;
        let cb = Codebook::init_kmeans(&slots, cfg.k_spec, cfg.gamma, rng)?;
        specific.push((modality as u8, CompositionalQuantizer::new(cb, cfg.m)?));
    }
    Ok(ModalityCodebookSet { shared, specific })
}

// ── Per-step loss assembly ──────────────────────────────────────────

struct ComputedTerms {
    values: [f64; 8],
    /// (path, term): grads[0] -> first modality's shared quantized (scaled
    /// by 1/sqrt(m)), grads[1] -> second's.
    align: Vec<((usize, usize), LossTerm)>,
    /// (modality, term): grads[0] -> d_xhat.
    recon: Vec<(usize, LossTerm)>,
    /// (modality, term): grads to quantized shared / specific.
    orth: Vec<(usize, LossTerm)>,
    /// (modality, term): grads to quantized specific.
    uni: Vec<(usize, LossTerm)>,
    /// ((modality, is_specific), term): grads[0] -> that path's zn.
    vq: Vec<((usize, bool), LossTerm)>,
    /// (path, term): sub-vector grads -> shared zn rows of both modalities.
    cm: Vec<((usize, usize), LossTerm)>,
    /// ((modality, is_specific), term): sub-vector grads -> that path's zn.
    cctr: Vec<((usize, bool), LossTerm)>,
    /// (codebook tag, term): entry grads for the post-EMA nudge. Tag None =
    /// shared, Some(modality) = that specific codebook.
    cuni: Vec<(Option<u8>, LossTerm)>,
}

fn shared_sub_rows(trace: &ModalityTrace) -> Vec<Vec<f64>> {
    trace.shared.slots.iter().flatten().cloned().collect()
}

fn spec_sub_rows(trace: &ModalityTrace) -> Option<Vec<Vec<f64>>> {
    trace
        .spec
        .as_ref()
        .map(|s| s.slots.iter().flatten().cloned().collect())
}

fn scale_rows(rows: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|v| v * s).collect())
        .collect()
}

fn compute_terms(
    traces: &[ModalityTrace],
    set: &ModalityCodebookSet,
    cfg: &TrainConfig,
    paths: &[(usize, usize)],
) -> Result<ComputedTerms> {
    let inv_sqrt_m = 1.0 / (cfg.m as f64).sqrt();
    let mut values = [0.0; 8];

    // align: mean of symmetric InfoNCE over alignment paths, on
    // unit-normalized quantized shared embeddings
    let mut align = Vec::new();
    for &(a, b) in paths {
        let qa = scale_rows(&traces[a].shared.quantized(), inv_sqrt_m);
        let qb = scale_rows(&traces[b].shared.quantized(), inv_sqrt_m);
        align.push(((a, b), losses::info_nce(&qa, &qb, cfg.eta)?));
    }
    values[LossName::Align.index()] =
        align.iter().map(|(_, t)| t.value).sum::<f64>() / align.len() as f64;

    // recon / orth / uni over non-text modalities
    let mut recon = Vec::new();
    let mut orth = Vec::new();
    let mut uni = Vec::new();
    for (mi, trace) in traces.iter().enumerate() {
        let Some(spec) = &trace.spec else { continue };
        recon.push((
            mi,
            losses::recon_batch(&trace.x, trace.x_hat.as_ref().ok_or(Error::IncompleteTrace(
                "non-text trace without reconstruction",
            ))?)?,
        ));
        orth.push((
            mi,
            losses::orth_loss(&trace.shared.quantized(), &spec.quantized())?,
        ));
        uni.push((mi, losses::uniform_loss(&spec.quantized())?));
    }
    let mean = |ts: &[(usize, LossTerm)]| -> f64 {
        ts.iter().map(|(_, t)| t.value).sum::<f64>() / ts.len().max(1) as f64
    };
    values[LossName::Recon.index()] = mean(&recon);
    values[LossName::Orth.index()] = mean(&orth);
    values[LossName::Uni.index()] = mean(&uni);

    // commitment over every (modality, path) component
    let mut vq = Vec::new();
    for (mi, trace) in traces.iter().enumerate() {
        vq.push((
            (mi, false),
            losses::commit_loss(&trace.shared.zn, &trace.shared.quantized(), cfg.beta)?,
        ));
        if let Some(spec) = &trace.spec {
            vq.push((
                (mi, true),
                losses::commit_loss(&spec.zn, &spec.quantized(), cfg.beta)?,
            ));
        }
    }
    values[LossName::Vq.index()] =
        vq.iter().map(|(_, t)| t.value).sum::<f64>() / vq.len() as f64;

    // cross-modal code matching on shared sub-vectors, per path
    let mut cm = Vec::new();
    for &(a, b) in paths {
        cm.push((
            (a, b),
            losses::cmcm_loss(
                &shared_sub_rows(&traces[a]),
                &shared_sub_rows(&traces[b]),
                cfg.m,
                &set.shared.codebook,
            )?,
        ));
    }
    values[LossName::Cm.index()] =
        cm.iter().map(|(_, t)| t.value).sum::<f64>() / cm.len() as f64;

    // codevector contrastive per (modality, codebook) group; skipped when a
    // codebook is below the percentile minimum (only reachable with the
    // term disabled)
    let mut cctr = Vec::new();
    let mut cctr_ok = true;
    for (mi, trace) in traces.iter().enumerate() {
        match losses::code_contrastive_batch(&set.shared.codebook, &shared_sub_rows(trace)) {
            Ok(t) => cctr.push(((mi, false), t)),
            Err(Error::CodebookTooSmall { .. }) => cctr_ok = false,
            Err(e) => return Err(e),
        }
        if let Some(rows) = spec_sub_rows(trace) {
            let cb = &set
                .specific_for(mi as u8)
                .ok_or(Error::IncompleteTrace("missing specific quantizer"))?
                .codebook;
            match losses::code_contrastive_batch(cb, &rows) {
                Ok(t) => cctr.push(((mi, true), t)),
                Err(Error::CodebookTooSmall { .. }) => cctr_ok = false,
                Err(e) => return Err(e),
            }
        }
    }
    values[LossName::Cctr.index()] = if cctr_ok && !cctr.is_empty() {
        cctr.iter().map(|(_, t)| t.value).sum::<f64>() / cctr.len() as f64
    } else {
        0.0
    };
    if !cctr_ok {
        cctr.clear();
    }

    // codevector uniformity per codebook
    let mut cuni = Vec::new();
    cuni.push((None, losses::code_uniform_loss(&set.shared.codebook)?));
    for (m, q) in &set.specific {
        cuni.push((Some(*m), losses::code_uniform_loss(&q.codebook)?));
    }
    values[LossName::Cuni.index()] =
        cuni.iter().map(|(_, t)| t.value).sum::<f64>() / cuni.len() as f64;

    Ok(ComputedTerms {
        values,
        align,
        recon,
        orth,
        uni,
        vq,
        cm,
        cctr,
        cuni,
    })
}

fn add_rows(dst: &mut [Vec<f64>], src: &[Vec<f64>], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
}

fn add_sub_rows(dst: &mut [Vec<f64>], rows: &[Vec<f64>], m: usize, ds: usize, scale: f64) {
    for (r, row) in rows.iter().enumerate() {
        let (sample, slot) = (r / m, r % m);
        for (t, g) in row.iter().enumerate() {
            dst[sample][slot * ds + t] += scale * g;
        }
    }
}

/// Weighted gradient routing into the per-modality accumulators and the
/// per-codebook entry-nudge buffers.
#[allow(clippy::too_many_arguments)]
fn route_gradients(
    computed: &ComputedTerms,
    weights: &[f64; 8],
    hooks: &TrainHooks,
    cfg: &TrainConfig,
    gins: &mut [ModalityGradIn],
    cuni_nudge: &mut Vec<(Option<u8>, Vec<Vec<f64>>)>,
) {
    let m = cfg.m;
    let ds = cfg.d / cfg.m;
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let active = |n: LossName| -> f64 {
        if hooks.zero_grad_terms.contains(&n) {
            0.0
        } else {
            weights[n.index()]
        }
    };

    let w = active(LossName::Align);
    if w > 0.0 {
        let s = w / computed.align.len() as f64 * inv_sqrt_m;
        for ((a, b), term) in &computed.align {
            add_rows(&mut gins[*a].shared.d_quantized, &term.grads[0], s);
            add_rows(&mut gins[*b].shared.d_quantized, &term.grads[1], s);
        }
    }

    let w = active(LossName::Recon);
    if w > 0.0 {
        let s = w / computed.recon.len().max(1) as f64;
        for (mi, term) in &computed.recon {
            add_rows(gins[*mi].d_xhat.as_mut().unwrap(), &term.grads[0], s);
        }
    }

    let w = active(LossName::Orth);
    if w > 0.0 {
        let s = w / computed.orth.len().max(1) as f64;
        for (mi, term) in &computed.orth {
            add_rows(&mut gins[*mi].shared.d_quantized, &term.grads[0], s);
            add_rows(
                &mut gins[*mi].spec.as_mut().unwrap().d_quantized,
                &term.grads[1],
                s,
            );
        }
    }

    let w = active(LossName::Uni);
    if w > 0.0 {
        let s = w / computed.uni.len().max(1) as f64;
        for (mi, term) in &computed.uni {
            add_rows(
                &mut gins[*mi].spec.as_mut().unwrap().d_quantized,
                &term.grads[0],
                s,
            );
        }
    }

    let w = active(LossName::Vq);
    if w > 0.0 {
        let s = w / computed.vq.len() as f64;
        for ((mi, is_spec), term) in &computed.vq {
            let path = if *is_spec {
                &mut gins[*mi].spec.as_mut().unwrap().d_zn
            } else {
                &mut gins[*mi].shared.d_zn
            };
            add_rows(path, &term.grads[0], s);
        }
    }

    let w = active(LossName::Cm);
    if w > 0.0 {
        let s = w / computed.cm.len() as f64;
        for ((a, b), term) in &computed.cm {
            add_sub_rows(&mut gins[*a].shared.d_zn, &term.grads[0], m, ds, s);
            add_sub_rows(&mut gins[*b].shared.d_zn, &term.grads[1], m, ds, s);
        }
    }

    let w = active(LossName::Cctr);
    if w > 0.0 && !computed.cctr.is_empty() {
        let s = w / computed.cctr.len() as f64;
        for ((mi, is_spec), term) in &computed.cctr {
            let path = if *is_spec {
                &mut gins[*mi].spec.as_mut().unwrap().d_zn
            } else {
                &mut gins[*mi].shared.d_zn
            };
            add_sub_rows(path, &term.grads[0], m, ds, s);
        }
    }

    let w = active(LossName::Cuni);
    if w > 0.0 {
        let s = 1.0 / computed.cuni.len() as f64;
        for (tag, term) in &computed.cuni {
            cuni_nudge.push((*tag, scale_rows(&term.grads[0], s)));
        }
    }
}

// ── The loop ────────────────────────────────────────────────────────

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

fn csv_header(set: &ModalityCodebookSet) -> String {
    let mut cols: Vec<String> = vec!["step".into()];
    for n in LossName::ALL {
        cols.push(n.as_str().into());
    }
    for n in LossName::ALL {
        cols.push(format!("w_{n}"));
    }
    cols.push("usage_shared".into());
    cols.push("ppl_shared".into());
    for (m, _) in &set.specific {
        cols.push(format!("usage_spec{m}"));
        cols.push(format!("ppl_spec{m}"));
    }
    cols.extend(
        [
            "recall1_tgt2txt",
            "recall10_tgt2txt",
            "recall1_txt2tgt",
            "recall10_txt2tgt",
            "zero_shot",
        ]
        .map(String::from),
    );
    cols.join(",") + "\n"
}

fn csv_row(
    step: usize,
    values: &[f64; 8],
    weights: &[f64; 8],
    core: Option<&CoreMetrics>,
    n_eval_cols: usize,
) -> String {
    let mut cols: Vec<String> = vec![step.to_string()];
    cols.extend(values.iter().map(|v| fmt(*v)));
    cols.extend(weights.iter().map(|v| fmt(*v)));
    match core {
        Some(c) => cols.extend(core_metric_fields(c)),
        None => cols.extend(std::iter::repeat(String::new()).take(n_eval_cols)),
    }
    cols.join(",") + "\n"
}

/// Formatted eval columns of one core-metrics block, in CSV order.
pub fn core_metric_fields(c: &CoreMetrics) -> Vec<String> {
    let mut cols = Vec::new();
    for (_, stats) in &c.usage {
        cols.push(fmt(stats.usage_rate));
        cols.push(fmt(stats.perplexity));
    }
    cols.push(fmt(c.recall_tgt2txt.0));
    cols.push(fmt(c.recall_tgt2txt.1));
    cols.push(fmt(c.recall_txt2tgt.0));
    cols.push(fmt(c.recall_txt2tgt.1));
    cols.push(fmt(c.zero_shot_acc));
    cols
}

pub fn train(cfg: &TrainConfig, hooks: &TrainHooks) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = synth::generate(&cfg.synth)?;
    let n_mod = cfg.synth.n_modalities;

    let mut root = SeededRng::new(cfg.seed);
    let mut rng_model = root.fork();
    let mut rng_kmeans = root.fork();
    let mut rng_batch = root.fork();
    let mut rng_reinit = root.fork();

    let model_cfg = ModelConfig {
        obs_dim: cfg.synth.obs_dim,
        hidden: cfg.hidden,
        d: cfg.d,
        n_modalities: n_mod,
        text_modality: 0,
    };
    let mut model = Model::new(&model_cfg, &mut rng_model);
    let mut set = init_codebooks(&model, &ds, cfg, &mut rng_kmeans)?;
    let mut balancer = AdaptiveBalancer::new(
        cfg.balancer_decay,
        cfg.balancer_interval,
        cfg.balancer_interval_step,
    );
    let manual = ManualWeights::new(&cfg.manual);
    let paths = alignment_paths(n_mod);

    let mut csv = csv_header(&set);
    let n_eval_cols = 2 * (1 + set.specific.len()) + 5;

    for step in 1..=cfg.steps {
        // aligned batch: a shuffled draw of concepts, one fresh tuple each
        let mut concepts: Vec<usize> = (0..cfg.synth.concepts).collect();
        rng_batch.shuffle(&mut concepts);
        concepts.truncate(cfg.batch_concepts);
        let tuple_idx: Vec<usize> = concepts
            .iter()
            .map(|&c| ds.sample_index(c, rng_batch.index(cfg.synth.samples_per_concept)))
            .collect();

        let mut traces = Vec::with_capacity(n_mod);
        for modality in 0..n_mod {
            let xs: Vec<Vec<f64>> = tuple_idx
                .iter()
                .map(|&i| ds.samples[i].x[modality].clone())
                .collect();
            traces.push(model::forward_batch(&model, &set, modality as u8, &xs, None)?);
        }

        let computed = compute_terms(&traces, &set, cfg, &paths)?;

        // balancer sees the enabled terms' values each step
        if cfg.enabled[LossName::Align.index()] && cfg.adaptive {
            let observed: Vec<(LossName, f64)> = LossName::ALL
                .iter()
                .filter(|n| cfg.enabled[n.index()])
                .map(|n| (*n, computed.values[n.index()]))
                .collect();
            balancer.step(&observed)?;
        }
        let mut weights = [0.0; 8];
        for n in LossName::ALL {
            if cfg.enabled[n.index()] {
                weights[n.index()] = if cfg.adaptive {
                    balancer.weight(n)
                } else {
                    manual.weight(n)
                };
            }
        }

        let mut gins: Vec<ModalityGradIn> = traces
            .iter()
            .map(|t| ModalityGradIn::zeros_for(t, cfg.d))
            .collect();
        let mut cuni_nudge = Vec::new();
        route_gradients(&computed, &weights, hooks, cfg, &mut gins, &mut cuni_nudge);

        let mut grads = model.zero_grads();
        for (trace, gin) in traces.iter().zip(&gins) {
            model::backward_batch(&model, trace, gin, true, &mut grads)?;
        }
        model.apply_sgd(&grads, cfg.lr)?;

        // EMA codebook updates from this batch's assignments
        apply_codebook_updates(&mut set, &traces, cfg, &cuni_nudge, &mut rng_reinit)?;

        // metrics row; the final step's row is appended after rounding so
        // its eval columns match exactly what a reloaded checkpoint yields
        if step < cfg.steps {
            let core = if step % cfg.eval_every == 0 {
                Some(eval::evaluate_core(&model, &set, &ds)?)
            } else {
                None
            };
            csv.push_str(&csv_row(
                step,
                &computed.values,
                &weights,
                core.as_ref(),
                n_eval_cols,
            ));
        } else {
            let mut ckpt = Checkpoint { model, set };
            ckpt.round_to_storage();
            let report = eval::evaluate(&ckpt.model, &ckpt.set, &ds)?;
            let embeddings = eval::embed_dataset(&ckpt.model, &ckpt.set, &ds)?;
            csv.push_str(&csv_row(
                step,
                &computed.values,
                &weights,
                Some(&report.core),
                n_eval_cols,
            ));
            return Ok(TrainOutcome {
                checkpoint: ckpt,
                metrics_csv: csv,
                report,
                dataset: ds,
                embeddings,
            });
        }
    }

    // steps == 0: initialization state, empty metrics body
    let mut ckpt = Checkpoint { model, set };
    ckpt.round_to_storage();
    let report = eval::evaluate(&ckpt.model, &ckpt.set, &ds)?;
    let embeddings = eval::embed_dataset(&ckpt.model, &ckpt.set, &ds)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics_csv: csv,
        report,
        dataset: ds,
        embeddings,
    })
}

/// EMA update, codevector-uniformity nudge, and dead-entry reinitialization
/// for every codebook, from one batch's traces.
fn apply_codebook_updates(
    set: &mut ModalityCodebookSet,
    traces: &[ModalityTrace],
    cfg: &TrainConfig,
    cuni_nudge: &[(Option<u8>, Vec<Vec<f64>>)],
    rng_reinit: &mut SeededRng,
) -> Result<()> {
    // gather (features, per-entry buckets) per codebook, in fixed order:
    // shared first, then specific by modality
    struct BatchFeed {
        buckets: Vec<Vec<Vec<f64>>>,
        features: Vec<Vec<f64>>,
    }
    let feed = |k: usize| BatchFeed {
        buckets: vec![Vec::new(); k],
        features: Vec::new(),
    };
    let mut shared_feed = feed(set.shared.codebook.len());
    let mut spec_feeds: Vec<(u8, BatchFeed)> = set
        .specific
        .iter()
        .map(|(m, q)| (*m, feed(q.codebook.len())))
        .collect();

    for trace in traces {
        for (slots, result) in trace.shared.slots.iter().zip(&trace.shared.results) {
            for (slot, &code) in slots.iter().zip(&result.codes) {
                debug_assert_eq!(
                    set.shared.codebook.nearest(slot)?.0,
                    code,
                    "EMA fed a vector the quantizer did not assign"
                );
                shared_feed.buckets[code].push(slot.clone());
                shared_feed.features.push(slot.clone());
            }
        }
        if let Some(spec) = &trace.spec {
            let (_, f) = spec_feeds
                .iter_mut()
                .find(|(m, _)| *m == trace.modality)
                .ok_or(Error::IncompleteTrace("missing specific feed"))?;
            for (slots, result) in spec.slots.iter().zip(&spec.results) {
                for (slot, &code) in slots.iter().zip(&result.codes) {
                    f.buckets[code].push(slot.clone());
                    f.features.push(slot.clone());
                }
            }
        }
    }

    set.shared.codebook.ema_update(&shared_feed.buckets)?;
    for (m, f) in &spec_feeds {
        set.specific_for_mut(*m)
            .unwrap()
            .codebook
            .ema_update(&f.buckets)?;
    }

    for (tag, grads) in cuni_nudge {
        let w_cuni = 1.0; // scaling folded into grads by the router
        let step_size = cfg.lr * w_cuni;
        match tag {
            None => set.shared.codebook.nudge_entries(grads, step_size)?,
            Some(m) => set
                .specific_for_mut(*m)
                .ok_or(Error::IncompleteTrace("nudge for unknown codebook"))?
                .codebook
                .nudge_entries(grads, step_size)?,
        }
    }

    if cfg.reinit {
        let counts: Vec<f64> = shared_feed.buckets.iter().map(|b| b.len() as f64).collect();
        set.shared
            .codebook
            .reinit_dead(&shared_feed.features, &counts, rng_reinit)?;
        for (m, f) in &spec_feeds {
            let counts: Vec<f64> = f.buckets.iter().map(|b| b.len() as f64).collect();
            set.specific_for_mut(*m)
                .unwrap()
                .codebook
                .reinit_dead(&f.features, &counts, rng_reinit)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            seed: 3,
            steps,
            synth: SyntheticSpec {
                concepts: 4,
                samples_per_concept: 8,
                ..SyntheticSpec::default()
            },
            batch_concepts: 4,
            d: 16,
            m: 2,
            hidden: 16,
            k_shared: 16,
            k_spec: 12,
            eval_every: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = tiny_config(0);
        let out = train(&cfg, &TrainHooks::default()).unwrap();
        // header only, no data rows
        assert_eq!(out.metrics_csv.lines().count(), 1);

        // the checkpoint equals the (rounded) initialization
        let ds = synth::generate(&cfg.synth).unwrap();
        let mut root = SeededRng::new(cfg.seed);
        let mut rng_model = root.fork();
        let mut rng_kmeans = root.fork();
        let mut model = Model::new(
            &ModelConfig {
                obs_dim: cfg.synth.obs_dim,
                hidden: cfg.hidden,
                d: cfg.d,
                n_modalities: cfg.synth.n_modalities,
                text_modality: 0,
            },
            &mut rng_model,
        );
        let set = init_codebooks(&model, &ds, &cfg, &mut rng_kmeans).unwrap();
        model.round_to_storage();
        assert_eq!(out.checkpoint.model, model);
        let _ = set;
    }

    #[test]
    fn same_seed_bit_identical() {
        let cfg = tiny_config(12);
        let a = train(&cfg, &TrainHooks::default()).unwrap();
        let b = train(&cfg, &TrainHooks::default()).unwrap();
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(a.checkpoint.save(), b.checkpoint.save());
    }

    #[test]
    fn disabled_term_matches_zero_grad_hook() {
        // disabling a loss must equal keeping it with gradients zeroed
        let mut cfg = tiny_config(10);
        cfg.enabled[LossName::Orth.index()] = false;
        let disabled = train(&cfg, &TrainHooks::default()).unwrap();

        let mut cfg_on = tiny_config(10);
        cfg_on.enabled[LossName::Orth.index()] = true;
        let hooked = train(
            &cfg_on,
            &TrainHooks {
                zero_grad_terms: vec![LossName::Orth],
            },
        )
        .unwrap();
        assert_eq!(disabled.checkpoint.save(), hooked.checkpoint.save());
    }

    #[test]
    fn disabled_term_reports_value_with_zero_weight() {
        let mut cfg = tiny_config(3);
        cfg.enabled[LossName::Uni.index()] = false;
        let out = train(&cfg, &TrainHooks::default()).unwrap();
        let lines: Vec<&str> = out.metrics_csv.lines().collect();
        let header: Vec<&str> = lines[0].split(',').collect();
        let row: Vec<&str> = lines[1].split(',').collect();
        let vi = header.iter().position(|h| *h == "uni").unwrap();
        let wi = header.iter().position(|h| *h == "w_uni").unwrap();
        let value: f64 = row[vi].parse().unwrap();
        let weight: f64 = row[wi].parse().unwrap();
        assert!(value != 0.0, "uni value should still be reported");
        assert_eq!(weight, 0.0);
    }

    #[test]
    fn align_improves_over_training() {
        let mut cfg = tiny_config(120);
        cfg.lr = 5e-3;
        let out = train(&cfg, &TrainHooks::default()).unwrap();
        let lines: Vec<&str> = out.metrics_csv.lines().collect();
        let align_at = |line: &str| -> f64 { line.split(',').nth(1).unwrap().parse().unwrap() };
        let early = align_at(lines[5]);
        let late = align_at(lines[lines.len() - 1]);
        assert!(
            late < early,
            "align loss should fall: early {early}, late {late}"
        );
    }
}
