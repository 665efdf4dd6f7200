//! Dual-branch hierarchical classifier with feature apportionment.
//!
//! The model maps a `g × d0` feature grid through a position-wise backbone
//! into two branches. The **parent** branch classifies {Neg, GS, CSN} from a
//! global max-pool over positions. The **child** branch runs only on batch
//! positions whose parent label is CSN: it gathers the parent branch's
//! pre-pool features at those positions, squashes them through a sigmoid
//! into a gate, and multiplies the gate onto its own features before its
//! max-pool and head — apportioning parent evidence onto the child decision.
//! Disabling apportionment replaces the gate with ones (the ablation arm).
//!
//! Training uses hand-rolled backprop (verified against finite differences),
//! Adam with per-epoch learning-rate decay, inverted dropout at the pooled
//! features, class-frequency loss weights, and fixed-sample batching: every
//! batch carries one of three fixed CSN prototypes in slot 0, excluded from
//! the loss, so the child branch always has work. Everything is seeded and
//! single-threaded; identical seeds give bit-identical parameters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::synthgen::{Class5, ParentLabel, ToyDataset, ToySample};

/// Adam moment decay and stabilizer constants.
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

/// A dense tensor with an explicit shape, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    fn check(&self, name: &str) -> Result<()> {
        let len: usize = self.shape.iter().product();
        if len != self.data.len() {
            return Err(Error::validation(format!(
                "{name}: shape {:?} implies {len} values, found {}",
                self.shape,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{name}: non-finite weight")));
        }
        Ok(())
    }
}

/// PReLU with the given negative slope.
#[inline]
fn prelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// PReLU derivative recovered from the activation value (the activation
/// preserves sign for positive slopes; the kink at zero takes the `1` side).
#[inline]
fn prelu_deriv(activated: f64, slope: f64) -> f64 {
    if activated >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Numerically stable softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Batch layout
// ---------------------------------------------------------------------------

/// A batch of samples plus the CSN index list the child branch runs on.
#[derive(Debug)]
pub struct BatchLayout<'a> {
    samples: Vec<&'a ToySample>,
    csn_indices: Vec<usize>,
}

impl<'a> BatchLayout<'a> {
    /// Training batch: slot 0 must hold a fixed CSN sample.
    pub fn new_training(samples: Vec<&'a ToySample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("batch is empty"));
        }
        if !samples[0].is_fixed || samples[0].parent_label != ParentLabel::Csn {
            return Err(Error::validation("slot 0 must hold a fixed CSN sample"));
        }
        let labels: Vec<ParentLabel> = samples.iter().map(|s| s.parent_label).collect();
        let csn_indices = build_csn_index_list(&labels, true)?;
        Ok(BatchLayout { samples, csn_indices })
    }

    /// Inference batch: one sample with the CSN list forced to `[0]`, so the
    /// child branch always runs and gates with the sample's own features.
    pub fn singleton(sample: &'a ToySample) -> Self {
        BatchLayout { samples: vec![sample], csn_indices: vec![0] }
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// Number of child-branch rows.
    pub fn m(&self) -> usize {
        self.csn_indices.len()
    }

    pub fn samples(&self) -> &[&'a ToySample] {
        &self.samples
    }

    pub fn csn_indices(&self) -> &[usize] {
        &self.csn_indices
    }
}

/// Positions whose parent label is CSN; with `fixed_in_slot0`, slot 0 is
/// included regardless (fixed samples are CSN by construction).
pub fn build_csn_index_list(labels: &[ParentLabel], fixed_in_slot0: bool) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::validation("label list is empty"));
    }
    let mut indices = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == ParentLabel::Csn || (i == 0 && fixed_in_slot0) {
            indices.push(i);
        }
    }
    if indices.is_empty() {
        return Err(Error::validation(
            "batch has no CSN sample; every batch needs at least one",
        ));
    }
    Ok(indices)
}

/// Inverse-frequency class weights `δ_k = (N_T/n_k) / Σ_j (N_T/n_j)`.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::validation("class_weights needs at least one class"));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::validation(format!("class {k} has zero count")));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / total).collect())
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Adam first/second moments for every trainable tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    /// Completed update steps.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub m_slope: f64,
    pub v_slope: f64,
}

/// All model weights. Tensors are row-major with explicit shapes; the
/// architecture flags ride along so a serialized model is self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub d0: usize,
    pub d1: usize,
    pub d2: usize,
    pub prelu_slope: f64,
    pub dropout_rate: f64,
    /// Whether the child branch multiplies the sigmoid gate (true) or ones.
    pub apportionment: bool,
    pub backbone_w: Tensor,
    pub backbone_b: Tensor,
    pub parent_w: Tensor,
    pub parent_b: Tensor,
    pub parent_head_w: Tensor,
    pub parent_head_b: Tensor,
    pub child_w: Tensor,
    pub child_b: Tensor,
    pub child_head_w: Tensor,
    pub child_head_b: Tensor,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adam: Option<AdamState>,
}

impl ModelParams {
    /// Glorot-uniform initialization (`limit = √(6/(fan_in+fan_out))`),
    /// zero biases. Weight matrices draw in a fixed order: backbone,
    /// parent transform, parent head, child transform, child head.
    pub fn init(d0: usize, d1: usize, d2: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
        if d0 == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::validation("model dims must be positive"));
        }
        let mut glorot = |fan_in: usize, fan_out: usize| -> Tensor {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
            Tensor { shape: vec![fan_in, fan_out], data }
        };
        Ok(ModelParams {
            d0,
            d1,
            d2,
            prelu_slope: 0.25,
            dropout_rate: cfg.dropout_rate,
            apportionment: cfg.apportionment,
            backbone_w: glorot(d0, d1),
            backbone_b: Tensor::zeros(vec![d1]),
            parent_w: glorot(d1, d2),
            parent_b: Tensor::zeros(vec![d2]),
            parent_head_w: glorot(d2, 3),
            parent_head_b: Tensor::zeros(vec![3]),
            child_w: glorot(d1, d2),
            child_b: Tensor::zeros(vec![d2]),
            child_head_w: glorot(d2, 3),
            child_head_b: Tensor::zeros(vec![3]),
            adam: None,
        })
    }

    fn tensor_names() -> [&'static str; 10] {
        [
            "backbone_w",
            "backbone_b",
            "parent_w",
            "parent_b",
            "parent_head_w",
            "parent_head_b",
            "child_w",
            "child_b",
            "child_head_w",
            "child_head_b",
        ]
    }

    /// All trainable tensors in the canonical order shared with
    /// [`GradientSet::tensors`] and the optimizer state.
    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.backbone_w,
            &self.backbone_b,
            &self.parent_w,
            &self.parent_b,
            &self.parent_head_w,
            &self.parent_head_b,
            &self.child_w,
            &self.child_b,
            &self.child_head_w,
            &self.child_head_b,
        ]
    }

    /// Mutable view of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.backbone_w,
            &mut self.backbone_b,
            &mut self.parent_w,
            &mut self.parent_b,
            &mut self.parent_head_w,
            &mut self.parent_head_b,
            &mut self.child_w,
            &mut self.child_b,
            &mut self.child_head_w,
            &mut self.child_head_b,
        ]
    }

    /// Shape and finiteness checks across all tensors.
    pub fn check(&self) -> Result<()> {
        let (d0, d1, d2) = (self.d0, self.d1, self.d2);
        let expect: [Vec<usize>; 10] = [
            vec![d0, d1],
            vec![d1],
            vec![d1, d2],
            vec![d2],
            vec![d2, 3],
            vec![3],
            vec![d1, d2],
            vec![d2],
            vec![d2, 3],
            vec![3],
        ];
        for ((t, name), shape) in self.tensors().iter().zip(Self::tensor_names()).zip(expect) {
            t.check(name)?;
            if t.shape != shape {
                return Err(Error::validation(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape
                )));
            }
        }
        if !self.prelu_slope.is_finite() || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("bad prelu slope or dropout rate"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<ModelParams> {
        let p: ModelParams = serde_json::from_str(text)?;
        p.check()?;
        Ok(p)
    }
}

/// Gradients for every trainable tensor, in [`ModelParams::tensors`] order,
/// plus the (optional) PReLU slope gradient.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
    pub prelu_slope: f64,
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Public forward outputs (see module docs for the data flow).
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// `N × 3` parent-class logits, row-major.
    pub parent_logits: Vec<f64>,
    /// `m × 3` child-class logits for the CSN rows, row-major.
    pub child_logits: Vec<f64>,
    /// `N × d2` max-pooled parent features (before dropout).
    pub phi_p: Vec<f64>,
    /// `m × d2` max-pooled gated child features (before dropout).
    pub phi_c: Vec<f64>,
    /// `m × g × d2` gate values (all ones when apportionment is off).
    pub gate: Vec<f64>,
}

/// Everything backprop needs from the forward pass.
struct ForwardCache {
    n: usize,
    m: usize,
    g: usize,
    /// Backbone activations, `N × g × d1`.
    f: Vec<f64>,
    /// Parent-branch activations (pre-pool), `N × g × d2`.
    fp: Vec<f64>,
    /// Child-branch activations (pre-gate), `m × g × d2`.
    fc: Vec<f64>,
    gate: Vec<f64>,
    phi_p: Vec<f64>,
    argmax_p: Vec<usize>,
    mask_p: Vec<f64>,
    phi_c: Vec<f64>,
    argmax_c: Vec<usize>,
    mask_c: Vec<f64>,
    parent_logits: Vec<f64>,
    child_logits: Vec<f64>,
    /// Dropped pooled features actually fed to the heads.
    phi_p_in: Vec<f64>,
    phi_c_in: Vec<f64>,
}

/// Max-pool over the position axis of a `g × d` block starting at `base`
/// (stride `d`), writing `d` maxima and their argmax positions.
fn gmp(
    values: &[f64],
    base: usize,
    g: usize,
    d: usize,
    out: &mut [f64],
    arg: &mut [usize],
) {
    for c in 0..d {
        let mut best_r = 0usize;
        let mut best = values[base + c];
        for r in 1..g {
            let v = values[base + r * d + c];
            if v > best {
                best = v;
                best_r = r;
            }
        }
        out[c] = best;
        arg[c] = best_r;
    }
}

fn forward_cached(
    batch: &BatchLayout,
    params: &ModelParams,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache> {
    params.check()?;
    let n = batch.n();
    let m = batch.m();
    if m == 0 {
        return Err(Error::validation("batch has no CSN rows"));
    }
    let g = batch.samples[0].features.len();
    let (d0, d1, d2) = (params.d0, params.d1, params.d2);
    for s in batch.samples() {
        if s.features.len() != g || s.features.iter().any(|row| row.len() != d0) {
            return Err(Error::validation(format!(
                "sample {} does not match model input shape {g}x{d0}",
                s.id
            )));
        }
    }
    let slope = params.prelu_slope;

    // Backbone: F[i, r, :] = PReLU(x · W_b + b_b).
    let mut f = vec![0.0; n * g * d1];
    for (i, s) in batch.samples().iter().enumerate() {
        for r in 0..g {
            let x = &s.features[r];
            let out = &mut f[(i * g + r) * d1..(i * g + r + 1) * d1];
            out.copy_from_slice(&params.backbone_b.data);
            for (j, &xv) in x.iter().enumerate() {
                let wrow = &params.backbone_w.data[j * d1..(j + 1) * d1];
                for (o, wv) in out.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
            for o in out.iter_mut() {
                *o = prelu(*o, slope);
            }
        }
    }

    // Parent branch (all rows): F_p = PReLU(F · W_p + b_p).
    let mut fp = vec![0.0; n * g * d2];
    for ir in 0..n * g {
        let frow = &f[ir * d1..(ir + 1) * d1];
        let out = &mut fp[ir * d2..(ir + 1) * d2];
        out.copy_from_slice(&params.parent_b.data);
        for (k, &fv) in frow.iter().enumerate() {
            let wrow = &params.parent_w.data[k * d2..(k + 1) * d2];
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += fv * wv;
            }
        }
        for o in out.iter_mut() {
            *o = prelu(*o, slope);
        }
    }

    // Parent pooling and head.
    let mut phi_p = vec![0.0; n * d2];
    let mut argmax_p = vec![0usize; n * d2];
    for i in 0..n {
        let (lo, hi) = (i * d2, (i + 1) * d2);
        gmp(&fp, i * g * d2, g, d2, &mut phi_p[lo..hi], &mut argmax_p[lo..hi]);
    }

    // Inverted dropout at the pooled features, training only.
    let rate = params.dropout_rate;
    let mut mask_p = vec![1.0; n * d2];
    let mut mask_c = vec![1.0; m * d2];
    if training && rate > 0.0 {
        let rng = rng.ok_or_else(|| {
            Error::validation("training-mode forward with dropout needs an rng")
        })?;
        let keep_scale = 1.0 / (1.0 - rate);
        for v in mask_p.iter_mut() {
            *v = if rng.gen::<f64>() < rate { 0.0 } else { keep_scale };
        }
        for v in mask_c.iter_mut() {
            *v = if rng.gen::<f64>() < rate { 0.0 } else { keep_scale };
        }
    }

    let mut phi_p_in = vec![0.0; n * d2];
    for i in 0..n * d2 {
        phi_p_in[i] = phi_p[i] * mask_p[i];
    }

    let mut parent_logits = vec![0.0; n * 3];
    for i in 0..n {
        let row = &phi_p_in[i * d2..(i + 1) * d2];
        let out = &mut parent_logits[i * 3..(i + 1) * 3];
        out.copy_from_slice(&params.parent_head_b.data);
        for (c, &pv) in row.iter().enumerate() {
            let wrow = &params.parent_head_w.data[c * 3..(c + 1) * 3];
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += pv * wv;
            }
        }
    }

    // Grasper: gather pre-pool parent features at the CSN rows, squash into
    // the gate (or ones when apportionment is disabled).
    let mut gate = vec![1.0; m * g * d2];
    if params.apportionment {
        for (j, &i) in batch.csn_indices().iter().enumerate() {
            for rc in 0..g * d2 {
                let v = fp[i * g * d2 + rc];
                gate[j * g * d2 + rc] = 1.0 / (1.0 + (-v).exp());
            }
        }
    }

    // Child branch on CSN rows: F_c = PReLU(F[ℓ] · W_c + b_c), gated.
    let mut fc = vec![0.0; m * g * d2];
    for (j, &i) in batch.csn_indices().iter().enumerate() {
        for r in 0..g {
            let frow = &f[(i * g + r) * d1..(i * g + r + 1) * d1];
            let out = &mut fc[(j * g + r) * d2..(j * g + r + 1) * d2];
            out.copy_from_slice(&params.child_b.data);
            for (k, &fv) in frow.iter().enumerate() {
                let wrow = &params.child_w.data[k * d2..(k + 1) * d2];
                for (o, wv) in out.iter_mut().zip(wrow) {
                    *o += fv * wv;
                }
            }
            for o in out.iter_mut() {
                *o = prelu(*o, slope);
            }
        }
    }
    let mut fr = vec![0.0; m * g * d2];
    for idx in 0..m * g * d2 {
        fr[idx] = gate[idx] * fc[idx];
    }

    let mut phi_c = vec![0.0; m * d2];
    let mut argmax_c = vec![0usize; m * d2];
    for j in 0..m {
        let (lo, hi) = (j * d2, (j + 1) * d2);
        gmp(&fr, j * g * d2, g, d2, &mut phi_c[lo..hi], &mut argmax_c[lo..hi]);
    }
    let mut phi_c_in = vec![0.0; m * d2];
    for i in 0..m * d2 {
        phi_c_in[i] = phi_c[i] * mask_c[i];
    }

    let mut child_logits = vec![0.0; m * 3];
    for j in 0..m {
        let row = &phi_c_in[j * d2..(j + 1) * d2];
        let out = &mut child_logits[j * 3..(j + 1) * 3];
        out.copy_from_slice(&params.child_head_b.data);
        for (c, &pv) in row.iter().enumerate() {
            let wrow = &params.child_head_w.data[c * 3..(c + 1) * 3];
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += pv * wv;
            }
        }
    }

    Ok(ForwardCache {
        n,
        m,
        g,
        f,
        fp,
        fc,
        gate,
        phi_p,
        argmax_p,
        mask_p,
        phi_c,
        argmax_c,
        mask_c,
        parent_logits,
        child_logits,
        phi_p_in,
        phi_c_in,
    })
}

/// Runs the model forward. In training mode with a positive dropout rate the
/// rng supplies the dropout masks (drawn parent-then-child, row-major).
pub fn forward(
    batch: &BatchLayout,
    params: &ModelParams,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutputs> {
    let cache = forward_cached(batch, params, training, rng)?;
    Ok(ForwardOutputs {
        parent_logits: cache.parent_logits,
        child_logits: cache.child_logits,
        phi_p: cache.phi_p,
        phi_c: cache.phi_c,
        gate: cache.gate,
    })
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// Options threaded through loss/backprop.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackpropOptions {
    /// Treat the gate as a constant in the backward pass (no child-loss
    /// gradient into parent-branch weights).
    pub gate_stop_gradient: bool,
}

/// Weighted cross-entropy over both branches plus full backprop.
///
/// The parent term averages `δ_p[label]·(−log softmax)` over non-fixed
/// samples; the child term averages over non-fixed CSN rows; the two add
/// with equal weight. Fixed samples contribute to neither. Runs its own
/// forward pass (training mode draws dropout masks from `rng`).
pub fn loss_and_grads(
    batch: &BatchLayout,
    params: &ModelParams,
    delta_p: &[f64],
    delta_c: &[f64],
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
    opts: &BackpropOptions,
) -> Result<(f64, GradientSet)> {
    if delta_p.len() != 3 || delta_c.len() != 3 {
        return Err(Error::validation("class weight vectors must have length 3"));
    }
    let cache = forward_cached(batch, params, training, rng)?;
    let (n, m, g) = (cache.n, cache.m, cache.g);
    let (d1, d2) = (params.d1, params.d2);
    let slope = params.prelu_slope;

    // Contributing rows: non-fixed for the parent, non-fixed CSN (with a
    // child label) for the child.
    let parent_rows: Vec<usize> =
        (0..n).filter(|&i| !batch.samples()[i].is_fixed).collect();
    let child_rows: Vec<usize> = batch
        .csn_indices()
        .iter()
        .enumerate()
        .filter(|(_, &i)| {
            let s = batch.samples()[i];
            !s.is_fixed && s.child_label.is_some()
        })
        .map(|(j, _)| j)
        .collect();

    // Loss values and logit-level gradients.
    let mut loss = 0.0;
    let mut d_parent_logits = vec![0.0; n * 3];
    if !parent_rows.is_empty() {
        let scale = 1.0 / parent_rows.len() as f64;
        for &i in &parent_rows {
            let y = batch.samples()[i].parent_label.index();
            let sm = softmax(&cache.parent_logits[i * 3..(i + 1) * 3]);
            loss += -delta_p[y] * sm[y].max(f64::MIN_POSITIVE).ln() * scale;
            for t in 0..3 {
                let indicator = if t == y { 1.0 } else { 0.0 };
                d_parent_logits[i * 3 + t] = scale * delta_p[y] * (sm[t] - indicator);
            }
        }
    }
    let mut d_child_logits = vec![0.0; m * 3];
    if !child_rows.is_empty() {
        let scale = 1.0 / child_rows.len() as f64;
        for &j in &child_rows {
            let i = batch.csn_indices()[j];
            let y = batch.samples()[i].child_label.expect("filtered").index();
            let sm = softmax(&cache.child_logits[j * 3..(j + 1) * 3]);
            loss += -delta_c[y] * sm[y].max(f64::MIN_POSITIVE).ln() * scale;
            for t in 0..3 {
                let indicator = if t == y { 1.0 } else { 0.0 };
                d_child_logits[j * 3 + t] = scale * delta_c[y] * (sm[t] - indicator);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::numerical("loss is not finite"));
    }

    // Backward. Gradient tensors in ModelParams::tensors order.
    let mut grads: Vec<Tensor> =
        params.tensors().iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
    let [g_backbone_w, g_backbone_b, g_parent_w, g_parent_b, g_parent_head_w, g_parent_head_b, g_child_w, g_child_b, g_child_head_w, g_child_head_b] =
        grads.as_mut_slice()
    else {
        unreachable!("ten tensors");
    };
    let mut g_slope = 0.0;

    // Heads.
    let mut d_phi_p_in = vec![0.0; n * d2];
    for i in 0..n {
        for t in 0..3 {
            let dz = d_parent_logits[i * 3 + t];
            if dz == 0.0 {
                continue;
            }
            g_parent_head_b.data[t] += dz;
            for c in 0..d2 {
                g_parent_head_w.data[c * 3 + t] += cache.phi_p_in[i * d2 + c] * dz;
                d_phi_p_in[i * d2 + c] += params.parent_head_w.data[c * 3 + t] * dz;
            }
        }
    }
    let mut d_phi_c_in = vec![0.0; m * d2];
    for j in 0..m {
        for t in 0..3 {
            let dz = d_child_logits[j * 3 + t];
            if dz == 0.0 {
                continue;
            }
            g_child_head_b.data[t] += dz;
            for c in 0..d2 {
                g_child_head_w.data[c * 3 + t] += cache.phi_c_in[j * d2 + c] * dz;
                d_phi_c_in[j * d2 + c] += params.child_head_w.data[c * 3 + t] * dz;
            }
        }
    }

    // Dropout and max-pool: route to the argmax positions.
    let mut d_fp = vec![0.0; n * g * d2];
    for i in 0..n {
        for c in 0..d2 {
            let d_phi = d_phi_p_in[i * d2 + c] * cache.mask_p[i * d2 + c];
            if d_phi != 0.0 {
                let r = cache.argmax_p[i * d2 + c];
                d_fp[(i * g + r) * d2 + c] += d_phi;
            }
        }
    }
    let mut d_fr = vec![0.0; m * g * d2];
    for j in 0..m {
        for c in 0..d2 {
            let d_phi = d_phi_c_in[j * d2 + c] * cache.mask_c[j * d2 + c];
            if d_phi != 0.0 {
                let r = cache.argmax_c[j * d2 + c];
                d_fr[(j * g + r) * d2 + c] += d_phi;
            }
        }
    }

    // Gate product: d_fc through the gate values; d_gate feeds the parent
    // branch at the gathered rows (unless stopped or disabled).
    let mut d_fc = vec![0.0; m * g * d2];
    for idx in 0..m * g * d2 {
        d_fc[idx] = d_fr[idx] * cache.gate[idx];
    }
    if params.apportionment && !opts.gate_stop_gradient {
        for (j, &i) in batch.csn_indices().iter().enumerate() {
            for rc in 0..g * d2 {
                let idx = j * g * d2 + rc;
                let gate = cache.gate[idx];
                let d_gate = d_fr[idx] * cache.fc[idx];
                d_fp[i * g * d2 + rc] += d_gate * gate * (1.0 - gate);
            }
        }
    }

    // Parent transform backward (into backbone grad and W_p).
    let mut d_f = vec![0.0; n * g * d1];
    for ir in 0..n * g {
        let frow = &cache.f[ir * d1..(ir + 1) * d1];
        for c in 0..d2 {
            let up = d_fp[ir * d2 + c];
            if up == 0.0 {
                continue;
            }
            let act = cache.fp[ir * d2 + c];
            if act < 0.0 {
                // activated = slope·pre ⇒ pre = act/slope.
                g_slope += (act / slope) * up;
            }
            let dpre = up * prelu_deriv(act, slope);
            g_parent_b.data[c] += dpre;
            for k in 0..d1 {
                g_parent_w.data[k * d2 + c] += frow[k] * dpre;
                d_f[ir * d1 + k] += params.parent_w.data[k * d2 + c] * dpre;
            }
        }
    }

    // Child transform backward (rows ℓ_CSN only).
    for (j, &i) in batch.csn_indices().iter().enumerate() {
        for r in 0..g {
            let ir = i * g + r;
            let jr = j * g + r;
            let frow = &cache.f[ir * d1..(ir + 1) * d1];
            for c in 0..d2 {
                let up = d_fc[jr * d2 + c];
                if up == 0.0 {
                    continue;
                }
                let act = cache.fc[jr * d2 + c];
                if act < 0.0 {
                    g_slope += (act / slope) * up;
                }
                let dpre = up * prelu_deriv(act, slope);
                g_child_b.data[c] += dpre;
                for k in 0..d1 {
                    g_child_w.data[k * d2 + c] += frow[k] * dpre;
                    d_f[ir * d1 + k] += params.child_w.data[k * d2 + c] * dpre;
                }
            }
        }
    }

    // Backbone backward.
    for (i, s) in batch.samples().iter().enumerate() {
        for r in 0..g {
            let ir = i * g + r;
            let x = &s.features[r];
            for k in 0..d1 {
                let up = d_f[ir * d1 + k];
                if up == 0.0 {
                    continue;
                }
                let act = cache.f[ir * d1 + k];
                if act < 0.0 {
                    g_slope += (act / slope) * up;
                }
                let dpre = up * prelu_deriv(act, slope);
                g_backbone_b.data[k] += dpre;
                for (j, &xv) in x.iter().enumerate() {
                    g_backbone_w.data[j * d1 + k] += xv * dpre;
                }
            }
        }
    }

    Ok((loss, GradientSet { tensors: grads, prelu_slope: g_slope }))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    /// Per-epoch multiplicative decay: epoch `e` uses `lr · decay^e`.
    pub lr_decay: f64,
    pub seed: u64,
    /// Hidden width of the backbone output.
    pub d1: usize,
    /// Width of each branch (pooled feature length).
    pub d2: usize,
    pub dropout_rate: f64,
    /// Feature apportionment (the sigmoid gate); false is the ablation arm.
    pub apportionment: bool,
    /// Learn the PReLU slope instead of keeping it at 0.25.
    pub learn_prelu: bool,
    /// Stop the child-loss gradient at the gate.
    pub gate_stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-4,
            lr_decay: 0.96,
            seed: 0,
            d1: 16,
            d2: 8,
            dropout_rate: 0.5,
            apportionment: true,
            learn_prelu: false,
            gate_stop_gradient: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size must be >= 2 (fixed + regular)"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::validation(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::validation(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.d1 == 0 || self.d2 == 0 {
            return Err(Error::validation("d1 and d2 must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// One epoch's summary in the training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Five-way micro accuracy on the regular pool.
    pub acc_micro: f64,
    /// Five-way macro accuracy on the regular pool.
    pub acc_macro: f64,
}

/// Parent and child class weights implied by a dataset's regular-pool
/// counts: parent over {Neg, GS, CSN-pooled}, child over {C, SS, NoA}.
pub fn dataset_weights(ds: &ToyDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let get = |k: &str| -> usize { ds.class_counts.get(k).copied().unwrap_or(0) };
    let (c, ss, noa) = (get("C"), get("SS"), get("NoA"));
    let parent = class_weights(&[get("Neg"), get("GS"), c + ss + noa])?;
    let child = class_weights(&[c, ss, noa])?;
    Ok((parent, child))
}

/// Trains the classifier on a toy dataset.
///
/// Each batch holds one randomly chosen fixed sample in slot 0 plus
/// `batch_size − 1` shuffled regular samples; the trailing partial batch of
/// each epoch is dropped. Deterministic per seed: two runs produce
/// bit-identical parameters.
pub fn train(ds: &ToyDataset, cfg: &TrainConfig) -> Result<(ModelParams, Vec<HistoryRow>)> {
    cfg.validate()?;
    ds.check()?;
    if ds.fixed.len() != 3 {
        return Err(Error::validation(format!(
            "training needs exactly 3 fixed samples, found {}",
            ds.fixed.len()
        )));
    }
    for (name, &count) in ds.class_counts.iter() {
        if count == 0 {
            return Err(Error::validation(format!("class {name} has no samples")));
        }
    }
    let per_batch = cfg.batch_size - 1;
    if ds.samples.len() < per_batch {
        return Err(Error::validation(format!(
            "dataset has {} regular samples; batches need {per_batch}",
            ds.samples.len()
        )));
    }
    let (delta_p, delta_c) = dataset_weights(ds)?;
    let opts = BackpropOptions { gate_stop_gradient: cfg.gate_stop_gradient };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(ds.d0(), cfg.d1, cfg.d2, cfg, &mut rng)?;
    let n_tensors = params.tensors().len();
    let mut adam = AdamState {
        t: 0,
        m: params.tensors().iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
        v: params.tensors().iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
        m_slope: 0.0,
        v_slope: 0.0,
    };

    let mut order: Vec<usize> = (0..ds.samples.len()).collect();
    let batches_per_epoch = ds.samples.len() / per_batch;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr_epoch = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for b in 0..batches_per_epoch {
            let fixed_idx = rng.gen_range(0..ds.fixed.len());
            let mut samples: Vec<&ToySample> = Vec::with_capacity(cfg.batch_size);
            samples.push(&ds.fixed[fixed_idx]);
            for &k in &order[b * per_batch..(b + 1) * per_batch] {
                samples.push(&ds.samples[k]);
            }
            let batch = BatchLayout::new_training(samples)?;
            let (loss, grads) = loss_and_grads(
                &batch,
                &params,
                &delta_p,
                &delta_c,
                true,
                Some(&mut rng),
                &opts,
            )
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::numerical(format!(
                    "training aborted at epoch {epoch}, batch {b}: {msg}"
                )),
                other => other,
            })?;
            loss_sum += loss;

            // Adam step at the epoch's learning rate.
            adam.t += 1;
            let t = adam.t as f64;
            let bias1 = 1.0 - ADAM_BETA1.powf(t);
            let bias2 = 1.0 - ADAM_BETA2.powf(t);
            let tensors = params.tensors_mut();
            for idx in 0..n_tensors {
                let gdata = &grads.tensors[idx].data;
                let m = &mut adam.m[idx].data;
                let v = &mut adam.v[idx].data;
                let p = &mut tensors[idx].data;
                for e in 0..p.len() {
                    m[e] = ADAM_BETA1 * m[e] + (1.0 - ADAM_BETA1) * gdata[e];
                    v[e] = ADAM_BETA2 * v[e] + (1.0 - ADAM_BETA2) * gdata[e] * gdata[e];
                    let m_hat = m[e] / bias1;
                    let v_hat = v[e] / bias2;
                    p[e] -= lr_epoch * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            if cfg.learn_prelu {
                let gs = grads.prelu_slope;
                adam.m_slope = ADAM_BETA1 * adam.m_slope + (1.0 - ADAM_BETA1) * gs;
                adam.v_slope = ADAM_BETA2 * adam.v_slope + (1.0 - ADAM_BETA2) * gs * gs;
                let m_hat = adam.m_slope / bias1;
                let v_hat = adam.v_slope / bias2;
                params.prelu_slope -= lr_epoch * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }

        // Epoch summary: mean batch loss plus five-way accuracy on the
        // regular pool (eval mode; consumes no randomness).
        let mut confusion = vec![vec![0usize; 5]; 5];
        for s in &ds.samples {
            let out = predict(s, &params)?;
            confusion[s.class5().index()][out.label.index()] += 1;
        }
        let (acc_micro, acc_macro) = accuracy(&confusion)?;
        history.push(HistoryRow {
            epoch,
            loss: loss_sum / batches_per_epoch as f64,
            acc_micro,
            acc_macro,
        });
    }

    params.adam = Some(adam);
    Ok((params, history))
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Everything a single-sample inference produces.
#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub label: Class5,
    /// Softmax probability of the deciding branch's argmax.
    pub confidence: f64,
    pub parent_logits: Vec<f64>,
    pub child_logits: Vec<f64>,
    pub phi_p: Vec<f64>,
    pub phi_c: Vec<f64>,
}

/// Classifies one sample (dropout disabled, CSN list forced to `[0]`).
///
/// Routing: parent argmax decides Neg/GS directly; a CSN parent defers to
/// the child argmax over {C, SS, NoA}. Confidence is the deciding branch's
/// max softmax probability.
pub fn predict(sample: &ToySample, params: &ModelParams) -> Result<PredictOutput> {
    let batch = BatchLayout::singleton(sample);
    let out = forward(&batch, params, false, None)?;
    let parent_sm = softmax(&out.parent_logits);
    let parent_idx = argmax(&parent_sm);
    let child_sm = softmax(&out.child_logits);
    let child_idx = argmax(&child_sm);
    let (label, confidence) = match parent_idx {
        0 => (Class5::Neg, parent_sm[parent_idx]),
        1 => (Class5::Gs, parent_sm[parent_idx]),
        _ => (
            match child_idx {
                0 => Class5::C,
                1 => Class5::Ss,
                _ => Class5::NoA,
            },
            child_sm[child_idx],
        ),
    };
    Ok(PredictOutput {
        label,
        confidence,
        parent_logits: out.parent_logits,
        child_logits: out.child_logits,
        phi_p: out.phi_p,
        phi_c: out.phi_c,
    })
}

/// Serializes training history as CSV (`epoch, loss, acc_micro, acc_macro`).
pub fn history_to_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,loss,acc_micro,acc_macro\n");
    for row in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.loss, row.acc_micro, row.acc_macro
        ));
    }
    out
}
