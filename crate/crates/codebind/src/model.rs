//! Toy encoders, shared/specific projection heads, reconstruction decoders,
//! and the end-to-end differentiable forward/backward pass.
//!
//! Quantization sits between the projection heads and every loss that
//! consumes quantized embeddings. Gradients cross it straight-through: the
//! gradient arriving at a quantized vector is copied to the normalized
//! sub-vectors unchanged, while the normalization Jacobians (full-vector
//! and per-slot) are applied exactly. Codebooks never receive gradients.

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{self, SeededRng};
use crate::quantizer::{CompositionalQuantizer, ModalityCodebookSet, QuantizeResult};

// ── Dense nets ──────────────────────────────────────────────────────

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y[r] = numerics::dot(row, x);
        }
        y
    }

    /// A^T y.
    pub fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut x = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                x[c] += row[c] * y[r];
            }
        }
        x
    }

    /// self += y x^T.
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                row[c] += y[r] * x[c];
            }
        }
    }
}

/// Fully connected net: tanh on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub dims: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer activations cached by a forward pass (a_0 = input).
#[derive(Debug, Clone)]
pub struct DenseCache {
    activations: Vec<Vec<f64>>,
}

/// Parameter gradients with the same shape as a [`DenseNet`].
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl DenseNet {
    /// Xavier-uniform weights, zero biases.
    pub fn xavier(dims: &[usize], rng: &mut SeededRng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data.iter_mut() {
                *v = rng.uniform_sym(limit);
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch {
                context: "densenet input",
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(x.to_vec());
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            let mut z = self.weights[l].matvec(&a);
            for (zi, bi) in z.iter_mut().zip(&self.biases[l]) {
                *zi += bi;
            }
            if l < self.n_layers() - 1 {
                for zi in z.iter_mut() {
                    *zi = zi.tanh();
                }
            }
            activations.push(z.clone());
            a = z;
        }
        let out = a;
        Ok((out, DenseCache { activations }))
    }

    /// Accumulate parameter gradients for one sample and return dL/d(input).
    pub fn backward(&self, cache: &DenseCache, d_out: &[f64], grads: &mut DenseGrads) -> Vec<f64> {
        let nl = self.n_layers();
        let mut d = d_out.to_vec();
        for l in (0..nl).rev() {
            if l < nl - 1 {
                // tanh'(z) = 1 - tanh(z)^2, and activations hold tanh(z)
                for (di, ai) in d.iter_mut().zip(&cache.activations[l + 1]) {
                    *di *= 1.0 - ai * ai;
                }
            }
            grads.weights[l].add_outer(&d, &cache.activations[l]);
            for (gb, di) in grads.biases[l].iter_mut().zip(&d) {
                *gb += di;
            }
            d = self.weights[l].tmatvec(&d);
        }
        d
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads {
            weights: self
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn write_to(&self, w: &mut Writer) {
        w.u32(self.dims.len() as u32);
        for &d in &self.dims {
            w.u32(d as u32);
        }
        for l in 0..self.n_layers() {
            w.f32_slice(&self.weights[l].data);
            w.f32_slice(&self.biases[l]);
        }
    }

    fn read_from(r: &mut Reader) -> Result<Self> {
        let nd = r.u32()? as usize;
        if !(2..=64).contains(&nd) {
            return Err(Error::CorruptContainer(format!("densenet with {nd} dims")));
        }
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            dims.push(r.u32()? as usize);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..nd - 1 {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let data = r.f32_vec(rows * cols)?;
            weights.push(Matrix { rows, cols, data });
            biases.push(r.f32_vec(rows)?);
        }
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    /// Round all parameters to their 32-bit stored representation.
    pub fn round_to_storage(&mut self) {
        for w in &mut self.weights {
            for v in w.data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        for b in &mut self.biases {
            for v in b.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// p <- p - lr * g, elementwise.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd_step",
            left: params.len(),
            right: grads.len(),
        });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

fn sgd_net(net: &mut DenseNet, grads: &DenseGrads, lr: f64) -> Result<()> {
    for (w, g) in net.weights.iter_mut().zip(&grads.weights) {
        sgd_step(&mut w.data, &g.data, lr)?;
    }
    for (b, g) in net.biases.iter_mut().zip(&grads.biases) {
        sgd_step(b, g, lr)?;
    }
    Ok(())
}

// ── Modality heads and the model ────────────────────────────────────

/// Encoder plus projection heads for one modality. Text modalities have no
/// specific projection: they carry shared semantics only.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityHead {
    pub modality: u8,
    pub encoder: DenseNet,
    pub shared_proj: DenseNet,
    pub spec_proj: Option<DenseNet>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    /// Embedding dimension of shared and specific components.
    pub d: usize,
    pub n_modalities: usize,
    /// Modality id treated as text (shared-only, no reconstruction).
    pub text_modality: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub heads: Vec<ModalityHead>,
    /// Reconstruction decoder per modality (None for text).
    pub decoders: Vec<Option<DenseNet>>,
    pub d: usize,
}

impl Model {
    pub fn new(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let enc_dims = [cfg.obs_dim, cfg.hidden, cfg.hidden, cfg.hidden];
        let proj_dims = [cfg.hidden, cfg.d];
        let dec_dims = [2 * cfg.d, cfg.hidden, cfg.obs_dim];
        let mut heads = Vec::new();
        let mut decoders = Vec::new();
        for m in 0..cfg.n_modalities as u8 {
            let is_text = m == cfg.text_modality;
            heads.push(ModalityHead {
                modality: m,
                encoder: DenseNet::xavier(&enc_dims, rng),
                shared_proj: DenseNet::xavier(&proj_dims, rng),
                spec_proj: (!is_text).then(|| DenseNet::xavier(&proj_dims, rng)),
            });
            decoders.push((!is_text).then(|| DenseNet::xavier(&dec_dims, rng)));
        }
        Self {
            heads,
            decoders,
            d: cfg.d,
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            heads: self
                .heads
                .iter()
                .map(|h| HeadGrads {
                    encoder: h.encoder.zero_grads(),
                    shared_proj: h.shared_proj.zero_grads(),
                    spec_proj: h.spec_proj.as_ref().map(|n| n.zero_grads()),
                })
                .collect(),
            decoders: self
                .decoders
                .iter()
                .map(|d| d.as_ref().map(|n| n.zero_grads()))
                .collect(),
        }
    }

    pub fn apply_sgd(&mut self, grads: &ModelGrads, lr: f64) -> Result<()> {
        for (h, g) in self.heads.iter_mut().zip(&grads.heads) {
            sgd_net(&mut h.encoder, &g.encoder, lr)?;
            sgd_net(&mut h.shared_proj, &g.shared_proj, lr)?;
            if let (Some(net), Some(gn)) = (h.spec_proj.as_mut(), g.spec_proj.as_ref()) {
                sgd_net(net, gn, lr)?;
            }
        }
        for (d, g) in self.decoders.iter_mut().zip(&grads.decoders) {
            if let (Some(net), Some(gn)) = (d.as_mut(), g.as_ref()) {
                sgd_net(net, gn, lr)?;
            }
        }
        Ok(())
    }

    /// Round all parameters to their 32-bit stored representation, matching
    /// the state a save/load cycle produces.
    pub fn round_to_storage(&mut self) {
        for h in &mut self.heads {
            h.encoder.round_to_storage();
            h.shared_proj.round_to_storage();
            if let Some(n) = h.spec_proj.as_mut() {
                n.round_to_storage();
            }
        }
        for d in self.decoders.iter_mut().flatten() {
            d.round_to_storage();
        }
    }

    // flat parameter access, used by finite-difference tests
    fn visit_nets(&self) -> Vec<&DenseNet> {
        let mut nets = Vec::new();
        for h in &self.heads {
            nets.push(&h.encoder);
            nets.push(&h.shared_proj);
            if let Some(n) = &h.spec_proj {
                nets.push(n);
            }
        }
        for d in self.decoders.iter().flatten() {
            nets.push(d);
        }
        nets
    }

    pub(crate) fn visit_nets_mut(&mut self) -> Vec<&mut DenseNet> {
        let mut nets = Vec::new();
        for h in &mut self.heads {
            nets.push(&mut h.encoder);
            nets.push(&mut h.shared_proj);
            if let Some(n) = h.spec_proj.as_mut() {
                nets.push(n);
            }
        }
        for d in self.decoders.iter_mut().flatten() {
            nets.push(d);
        }
        nets
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for net in self.visit_nets() {
            for w in &net.weights {
                out.extend_from_slice(&w.data);
            }
            for b in &net.biases {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for net in self.visit_nets_mut() {
            for w in &mut net.weights {
                let n = w.data.len();
                w.data.copy_from_slice(&flat[i..i + n]);
                i += n;
            }
            for b in &mut net.biases {
                let n = b.len();
                b.copy_from_slice(&flat[i..i + n]);
                i += n;
            }
        }
        assert_eq!(i, flat.len());
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub encoder: DenseGrads,
    pub shared_proj: DenseGrads,
    pub spec_proj: Option<DenseGrads>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub heads: Vec<HeadGrads>,
    pub decoders: Vec<Option<DenseGrads>>,
}

impl ModelGrads {
    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let push = |g: &DenseGrads, out: &mut Vec<f64>| {
            for w in &g.weights {
                out.extend_from_slice(&w.data);
            }
            for b in &g.biases {
                out.extend_from_slice(b);
            }
        };
        for h in &self.heads {
            push(&h.encoder, &mut out);
            push(&h.shared_proj, &mut out);
            if let Some(g) = &h.spec_proj {
                push(g, &mut out);
            }
        }
        for d in self.decoders.iter().flatten() {
            push(d, &mut out);
        }
        out
    }
}

// ── Forward traces ──────────────────────────────────────────────────

/// Everything the backward pass needs for one projection path of a batch.
#[derive(Debug, Clone)]
pub struct PathTrace {
    pub proj_cache: Vec<DenseCache>,
    /// Projection outputs (pre-normalization).
    pub u: Vec<Vec<f64>>,
    /// Full-vector normalized embeddings.
    pub z_full: Vec<Vec<f64>>,
    /// Per-sample slot-normalized sub-vectors (m per sample).
    pub slots: Vec<Vec<Vec<f64>>>,
    /// Concatenated slot-normalized vectors (the quantizer input space).
    pub zn: Vec<Vec<f64>>,
    pub results: Vec<QuantizeResult>,
}

impl PathTrace {
    pub fn quantized(&self) -> Vec<Vec<f64>> {
        self.results.iter().map(|r| r.quantized.clone()).collect()
    }
}

/// Forward trace of one modality over a batch.
#[derive(Debug, Clone)]
pub struct ModalityTrace {
    pub modality: u8,
    pub x: Vec<Vec<f64>>,
    pub enc_cache: Vec<DenseCache>,
    pub h: Vec<Vec<f64>>,
    pub shared: PathTrace,
    pub spec: Option<PathTrace>,
    pub dec_cache: Option<Vec<DenseCache>>,
    pub x_hat: Option<Vec<Vec<f64>>>,
}

/// Optional per-sample code override: quantized vectors are built from these
/// codes instead of nearest-neighbor lookup (used to freeze the discrete
/// choice for finite-difference verification).
#[derive(Debug, Clone)]
pub struct FrozenCodes {
    pub shared: Vec<Vec<usize>>,
    pub spec: Option<Vec<Vec<usize>>>,
}

fn forward_path(
    proj: &DenseNet,
    quant: &CompositionalQuantizer,
    h: &[Vec<f64>],
    frozen: Option<&Vec<Vec<usize>>>,
) -> Result<PathTrace> {
    let mut proj_cache = Vec::with_capacity(h.len());
    let mut us = Vec::with_capacity(h.len());
    let mut z_fulls = Vec::with_capacity(h.len());
    let mut slots_all = Vec::with_capacity(h.len());
    let mut zns = Vec::with_capacity(h.len());
    let mut results = Vec::with_capacity(h.len());
    for (i, hi) in h.iter().enumerate() {
        let (u, cache) = proj.forward(hi)?;
        let z_full = numerics::l2_normalize(&u)?;
        let slots = quant.normalize_slots(&z_full)?;
        let zn: Vec<f64> = slots.iter().flatten().copied().collect();
        let r = match frozen {
            None => quant.quantize_slots(&slots)?,
            Some(codes) => {
                let codes = codes[i].clone();
                let mut quantized = Vec::with_capacity(quant.d);
                let mut commit = 0.0;
                for (slot, &k) in slots.iter().zip(&codes) {
                    quantized.extend_from_slice(quant.codebook.entry(k));
                    commit += numerics::sq_dist(slot, quant.codebook.entry(k))?;
                }
                QuantizeResult {
                    codes,
                    quantized,
                    commit_sq_dist: commit,
                }
            }
        };
        proj_cache.push(cache);
        us.push(u);
        z_fulls.push(z_full);
        slots_all.push(slots);
        zns.push(zn);
        results.push(r);
    }
    Ok(PathTrace {
        proj_cache,
        u: us,
        z_full: z_fulls,
        slots: slots_all,
        zn: zns,
        results,
    })
}

/// Forward one modality over a batch: encode, project, normalize, quantize,
/// and (for non-text modalities) reconstruct from the concatenated
/// quantized embedding.
pub fn forward_batch(
    model: &Model,
    set: &ModalityCodebookSet,
    modality: u8,
    xs: &[Vec<f64>],
    frozen: Option<&FrozenCodes>,
) -> Result<ModalityTrace> {
    let head = &model.heads[modality as usize];
    let mut enc_cache = Vec::with_capacity(xs.len());
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        let (h, cache) = head.encoder.forward(x)?;
        enc_cache.push(cache);
        hs.push(h);
    }

    let shared = forward_path(
        &head.shared_proj,
        &set.shared,
        &hs,
        frozen.map(|f| &f.shared),
    )?;

    let spec = match (&head.spec_proj, set.specific_for(modality)) {
        (Some(proj), Some(quant)) => Some(forward_path(
            proj,
            quant,
            &hs,
            frozen.and_then(|f| f.spec.as_ref()),
        )?),
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::IncompleteTrace(
                "modality has a specific head but no specific codebook",
            ))
        }
    };

    let (dec_cache, x_hat) = match (&model.decoders[modality as usize], &spec) {
        (Some(dec), Some(sp)) => {
            let mut caches = Vec::with_capacity(xs.len());
            let mut outs = Vec::with_capacity(xs.len());
            for i in 0..xs.len() {
                let mut joint = shared.results[i].quantized.clone();
                joint.extend_from_slice(&sp.results[i].quantized);
                let (out, cache) = dec.forward(&joint)?;
                caches.push(cache);
                outs.push(out);
            }
            (Some(caches), Some(outs))
        }
        _ => (None, None),
    };

    Ok(ModalityTrace {
        modality,
        x: xs.to_vec(),
        enc_cache,
        h: hs,
        shared,
        spec,
        dec_cache,
        x_hat,
    })
}

/// Reconstruct one sample from a trace that has both quantized components.
pub fn reconstruct(decoder: &DenseNet, trace: &ModalityTrace, i: usize) -> Result<Vec<f64>> {
    let spec = trace.spec.as_ref().ok_or(Error::MissingSpecific)?;
    let mut joint = trace.shared.results[i].quantized.clone();
    joint.extend_from_slice(&spec.results[i].quantized);
    Ok(decoder.forward(&joint)?.0)
}

// ── Backward ────────────────────────────────────────────────────────

/// Gradients flowing into one projection path, accumulated by the caller
/// from the loss terms.
#[derive(Debug, Clone)]
pub struct PathGradIn {
    /// dL/d(quantized embedding); crosses the quantizer straight-through.
    pub d_quantized: Vec<Vec<f64>>,
    /// dL/d(slot-normalized embedding); from losses consuming the
    /// continuous sub-vectors (commitment, code matching, codevector
    /// contrastive).
    pub d_zn: Vec<Vec<f64>>,
}

impl PathGradIn {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            d_quantized: vec![vec![0.0; d]; n],
            d_zn: vec![vec![0.0; d]; n],
        }
    }
}

/// Gradients flowing into one modality's trace.
#[derive(Debug, Clone)]
pub struct ModalityGradIn {
    pub shared: PathGradIn,
    pub spec: Option<PathGradIn>,
    /// dL/d(x_hat) for the reconstruction loss.
    pub d_xhat: Option<Vec<Vec<f64>>>,
}

impl ModalityGradIn {
    pub fn zeros_for(trace: &ModalityTrace, d: usize) -> Self {
        let n = trace.x.len();
        Self {
            shared: PathGradIn::zeros(n, d),
            spec: trace.spec.as_ref().map(|_| PathGradIn::zeros(n, d)),
            d_xhat: trace
                .x_hat
                .as_ref()
                .map(|xh| xh.iter().map(|r| vec![0.0; r.len()]).collect()),
        }
    }
}

/// Jacobian-transpose of v -> v/||v|| applied to an incoming gradient.
fn normalize_backward(raw: &[f64], normalized: &[f64], d_norm: &[f64]) -> Vec<f64> {
    let len = numerics::norm(raw);
    let radial = numerics::dot(d_norm, normalized);
    normalized
        .iter()
        .zip(d_norm)
        .map(|(n, g)| (g - radial * n) / len)
        .collect()
}

fn backward_path(
    proj: &DenseNet,
    trace: &PathTrace,
    grad_in: &PathGradIn,
    straight_through: bool,
    proj_grads: &mut DenseGrads,
    d_h: &mut [Vec<f64>],
) {
    let n = trace.u.len();
    let m = trace.slots[0].len();
    let ds = trace.slots[0][0].len();
    for i in 0..n {
        // total gradient on the slot-normalized embedding
        let mut d_zn = grad_in.d_zn[i].clone();
        if straight_through {
            for (g, q) in d_zn.iter_mut().zip(&grad_in.d_quantized[i]) {
                *g += q;
            }
        }
        // per-slot normalization Jacobian back to the full-normalized vector
        let mut d_zfull = vec![0.0; trace.z_full[i].len()];
        for h in 0..m {
            let raw = &trace.z_full[i][h * ds..(h + 1) * ds];
            let slot_grad = &d_zn[h * ds..(h + 1) * ds];
            let back = normalize_backward(raw, &trace.slots[i][h], slot_grad);
            d_zfull[h * ds..(h + 1) * ds].copy_from_slice(&back);
        }
        // full-vector normalization Jacobian back to the projection output
        let d_u = normalize_backward(&trace.u[i], &trace.z_full[i], &d_zfull);
        let d_hi = proj.backward(&trace.proj_cache[i], &d_u, proj_grads);
        for (a, b) in d_h[i].iter_mut().zip(&d_hi) {
            *a += b;
        }
    }
}

/// Reverse pass for one modality. Quantized-side gradients cross the
/// quantizer straight-through when `straight_through` is set and are
/// dropped otherwise (the frozen-codes verification mode). Codebook
/// entries receive no gradients in either mode.
pub fn backward_batch(
    model: &Model,
    trace: &ModalityTrace,
    grad_in: &ModalityGradIn,
    straight_through: bool,
    grads: &mut ModelGrads,
) -> Result<()> {
    let mi = trace.modality as usize;
    let head = &model.heads[mi];
    let n = trace.x.len();
    let mut d_h = vec![vec![0.0; head.encoder.out_dim()]; n];

    // reconstruction gradient: through the decoder into both quantized parts
    let mut shared_in = grad_in.shared.clone();
    let mut spec_in = grad_in.spec.clone();
    if let Some(d_xhat) = &grad_in.d_xhat {
        let dec = model.decoders[mi].as_ref().ok_or(Error::IncompleteTrace(
            "reconstruction gradient for a decoder-less modality",
        ))?;
        let caches = trace
            .dec_cache
            .as_ref()
            .ok_or(Error::IncompleteTrace("missing decoder cache"))?;
        let dec_grads = grads.decoders[mi]
            .as_mut()
            .ok_or(Error::IncompleteTrace("missing decoder grad slot"))?;
        let spec_grad = spec_in
            .as_mut()
            .ok_or(Error::IncompleteTrace("reconstruction without specific path"))?;
        let d = model.d;
        for i in 0..n {
            let d_joint = dec.backward(&caches[i], &d_xhat[i], dec_grads);
            for t in 0..d {
                shared_in.d_quantized[i][t] += d_joint[t];
                spec_grad.d_quantized[i][t] += d_joint[d + t];
            }
        }
    }

    backward_path(
        &head.shared_proj,
        &trace.shared,
        &shared_in,
        straight_through,
        &mut grads.heads[mi].shared_proj,
        &mut d_h,
    );
    if let (Some(proj), Some(sp_trace), Some(sp_in)) =
        (&head.spec_proj, &trace.spec, spec_in.as_ref())
    {
        backward_path(
            proj,
            sp_trace,
            sp_in,
            straight_through,
            grads.heads[mi].spec_proj.as_mut().unwrap(),
            &mut d_h,
        );
    }
    for i in 0..n {
        head.encoder
            .backward(&trace.enc_cache[i], &d_h[i], &mut grads.heads[mi].encoder);
    }
    Ok(())
}

// ── Checkpoint (model + codebook set) ───────────────────────────────

const MAGIC: &[u8; 4] = b"CBMD";
const VERSION: u32 = 1;

/// A trained model together with its quantizer set.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub set: ModalityCodebookSet,
}

impl Checkpoint {
    pub fn save(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(self.model.d as u32);
        w.u32(self.model.heads.len() as u32);
        for (head, dec) in self.model.heads.iter().zip(&self.model.decoders) {
            w.u8(head.modality);
            w.u8(if head.spec_proj.is_some() { 1 } else { 0 });
            head.encoder.write_to(&mut w);
            head.shared_proj.write_to(&mut w);
            if let Some(p) = &head.spec_proj {
                p.write_to(&mut w);
            }
            if let Some(d) = dec {
                d.write_to(&mut w);
            }
        }
        self.set.shared.write_to(&mut w);
        w.u32(self.set.specific.len() as u32);
        for (m, q) in &self.set.specific {
            w.u8(*m);
            q.write_to(&mut w);
        }
        w.into_bytes()
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let d = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        if n_heads == 0 || n_heads > 255 {
            return Err(Error::CorruptContainer(format!("{n_heads} heads")));
        }
        let mut heads = Vec::with_capacity(n_heads);
        let mut decoders = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let modality = r.u8()?;
            let has_spec = r.u8()? != 0;
            let encoder = DenseNet::read_from(&mut r)?;
            let shared_proj = DenseNet::read_from(&mut r)?;
            let spec_proj = if has_spec {
                Some(DenseNet::read_from(&mut r)?)
            } else {
                None
            };
            let decoder = if has_spec {
                Some(DenseNet::read_from(&mut r)?)
            } else {
                None
            };
            heads.push(ModalityHead {
                modality,
                encoder,
                shared_proj,
                spec_proj,
            });
            decoders.push(decoder);
        }
        let shared = CompositionalQuantizer::read_from(&mut r)?;
        let n_spec = r.u32()? as usize;
        let mut specific = Vec::with_capacity(n_spec);
        for _ in 0..n_spec {
            let m = r.u8()?;
            specific.push((m, CompositionalQuantizer::read_from(&mut r)?));
        }
        r.finish()?;
        Ok(Self {
            model: Model { heads, decoders, d },
            set: ModalityCodebookSet { shared, specific },
        })
    }

    /// Round every parameter and codevector to 32-bit storage precision.
    pub fn round_to_storage(&mut self) {
        self.model.round_to_storage();
        self.set.shared.codebook.round_to_storage();
        for (_, q) in &mut self.set.specific {
            q.codebook.round_to_storage();
        }
    }
}
