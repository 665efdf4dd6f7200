//! Segmentation losses with analytic gradients.
//!
//! The family centers on an instance-structural similarity (ISS) term: for
//! images that contain instances, windowed structural similarity is averaged
//! over per-instance box crops; for background-only images it is the minimum
//! over a grid of patches. The combined objective adds focal loss (`fiss`)
//! and optionally Dice (`compound`). Plain Dice, focal, Tversky, and a
//! whole-image SSIM loss round out the set so loss-landscape sweeps can
//! compare behaviors.
//!
//! Every loss returns its value together with `∂loss/∂p` per pixel, and
//! [`fd_gradient_check`] verifies those gradients against central finite
//! differences. [`direct_fit`] optimizes a per-pixel logit map against any
//! of the losses by plain gradient descent — a minimal stand-in for training
//! a segmentation network.
//!
//! The structural-similarity statistics follow the product form
//! `(2μ_aμ_b+c1)(2σ_aσ_b+c2) / ((μ_a²+μ_b²+c1)(σ_a²+σ_b²+c2))` computed over
//! sliding uniform windows; a covariance variant (`2σ_ab+c2` in the second
//! factor, as in classic SSIM) and a whole-map global-moments mode are
//! available behind flags.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{connected_components, crop_padded, padding_offset, Box4, InstanceSet};
use crate::pixmap::Pixmap;
use crate::synthgen::SceneSample;

/// Clamp bound for probabilities inside logarithms.
const PROB_EPS: f64 = 1e-7;
/// Below this, a window's standard deviation is treated as zero when
/// dividing (the σ-direction subgradient of a constant window is zero).
const SIGMA_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Structural-similarity parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    /// Side of the square sliding window; odd, at least 3.
    pub window: usize,
    /// Mean-term stabilizer (0.01² for unit dynamic range).
    pub c1: f64,
    /// Deviation-term stabilizer (0.03² for unit dynamic range).
    pub c2: f64,
    /// Number of background patches; a perfect square arranged as a grid.
    pub lambda_patches: usize,
    /// Use the covariance `2σ_ab + c2` in the second factor instead of the
    /// product `2σ_aσ_b + c2`.
    pub covariance_mode: bool,
    /// Compute statistics over the whole map as a single window instead of
    /// sliding windows.
    pub global_moments: bool,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            c1: 1e-4,
            c2: 9e-4,
            lambda_patches: 4,
            covariance_mode: false,
            global_moments: false,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::validation(format!(
                "ssim window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::validation("ssim stabilizers c1 and c2 must be positive"));
        }
        let root = (self.lambda_patches as f64).sqrt().round() as usize;
        if self.lambda_patches == 0 || root * root != self.lambda_patches {
            return Err(Error::validation(format!(
                "lambda_patches must be a perfect square >= 1, got {}",
                self.lambda_patches
            )));
        }
        Ok(())
    }

    fn patch_grid(&self) -> usize {
        (self.lambda_patches as f64).sqrt().round() as usize
    }
}

/// Focal-loss parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    /// Foreground weight; background pixels get `1 - alpha_f`.
    pub alpha_f: f64,
    /// Focusing exponent.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha_f: 0.25, gamma: 2.0 }
    }
}

/// Every knob the loss family exposes, bundled for dispatch by [`LossId`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Dice smoothing constant.
    pub dice_smooth: f64,
    /// Tversky false-positive weight.
    pub tversky_alpha: f64,
    /// Tversky false-negative weight.
    pub tversky_beta: f64,
    /// Tversky smoothing constant (denominator only).
    pub tversky_smooth: f64,
    pub focal: FocalParams,
    pub ssim: SsimParams,
    /// Weight of the focal term in the combined loss.
    pub fiss_alpha: f64,
    /// Weight of the instance-structural term in the combined loss.
    pub fiss_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_smooth: 1.0,
            tversky_alpha: 0.7,
            tversky_beta: 0.3,
            tversky_smooth: 1.0,
            focal: FocalParams::default(),
            ssim: SsimParams::default(),
            fiss_alpha: 1.0,
            fiss_beta: 1.0,
        }
    }
}

/// A loss value with its per-pixel gradient `∂loss/∂p`.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Pixmap,
}

impl LossResult {
    fn check_finite(self, what: &str) -> Result<LossResult> {
        if !self.value.is_finite() {
            return Err(Error::numerical(format!("{what} produced non-finite value")));
        }
        Ok(self)
    }
}

/// Identifies one member of the loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossId {
    Dice,
    Focal,
    Tversky,
    /// Whole-image windowed structural-similarity loss (1 − similarity).
    Ssim,
    /// Instance-structural similarity loss.
    Iss,
    /// Focal + instance-structural.
    Fiss,
    /// Dice + focal + instance-structural.
    Compound,
}

impl LossId {
    pub const ALL: [LossId; 7] = [
        LossId::Dice,
        LossId::Focal,
        LossId::Tversky,
        LossId::Ssim,
        LossId::Iss,
        LossId::Fiss,
        LossId::Compound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossId::Dice => "dice",
            LossId::Focal => "focal",
            LossId::Tversky => "tversky",
            LossId::Ssim => "ssim",
            LossId::Iss => "iss",
            LossId::Fiss => "fiss",
            LossId::Compound => "compound",
        }
    }
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<LossId> {
        match s {
            "dice" => Ok(LossId::Dice),
            "focal" => Ok(LossId::Focal),
            "tversky" => Ok(LossId::Tversky),
            "ssim" => Ok(LossId::Ssim),
            "iss" => Ok(LossId::Iss),
            "fiss" => Ok(LossId::Fiss),
            "compound" => Ok(LossId::Compound),
            other => Err(Error::validation(format!(
                "unknown loss '{other}' (expected one of dice, focal, tversky, ssim, iss, fiss, compound)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise losses
// ---------------------------------------------------------------------------

fn require_same_shape(p: &Pixmap, g: &Pixmap) -> Result<()> {
    p.require_same_shape(g, "prediction vs ground truth")
}

/// Soft Dice loss `1 − (2Σpg + smooth)/(Σp + Σg + smooth)`.
pub fn dice_loss(p: &Pixmap, g: &Pixmap, smooth: f64) -> Result<LossResult> {
    require_same_shape(p, g)?;
    if !(smooth >= 0.0) {
        return Err(Error::validation(format!("dice smooth must be >= 0, got {smooth}")));
    }
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        inter += pv * gv;
        sum_p += pv;
        sum_g += gv;
    }
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_g + smooth;
    if den == 0.0 {
        return Err(Error::numerical("dice denominator is zero (empty maps, smooth 0)"));
    }
    let value = 1.0 - num / den;
    let mut gradient = Pixmap::zeros(p.width(), p.height())?;
    let den2 = den * den;
    for (dst, &gv) in gradient.data_mut().iter_mut().zip(g.data()) {
        *dst = -(2.0 * gv * den - num) / den2;
    }
    LossResult { value, gradient }.check_finite("dice_loss")
}

/// Focal loss: mean over pixels of `−α_t (1 − p_t)^γ log(p_t)` with
/// `p_t = p` on foreground and `1 − p` on background. Probabilities are
/// clamped to `[1e−7, 1 − 1e−7]` before the logarithm; pixels where the
/// clamp is active contribute zero gradient.
pub fn focal_loss(p: &Pixmap, g: &Pixmap, params: &FocalParams) -> Result<LossResult> {
    require_same_shape(p, g)?;
    let FocalParams { alpha_f, gamma } = *params;
    if !(0.0..=1.0).contains(&alpha_f) || !(gamma >= 0.0) {
        return Err(Error::validation(format!(
            "focal parameters out of range: alpha_f {alpha_f}, gamma {gamma}"
        )));
    }
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut gradient = Pixmap::zeros(p.width(), p.height())?;
    for (i, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
        let clamped = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let fg = gv >= 0.5;
        let (pt, at) = if fg { (clamped, alpha_f) } else { (1.0 - clamped, 1.0 - alpha_f) };
        let one_minus = 1.0 - pt;
        value += -at * one_minus.powf(gamma) * pt.ln();
        // dterm/dpt; the γ(1−p_t)^{γ−1} factor vanishes identically at γ=0.
        let d_dpt = if gamma == 0.0 {
            -at * (1.0 / pt)
        } else {
            -at * (-gamma * one_minus.powf(gamma - 1.0) * pt.ln() + one_minus.powf(gamma) / pt)
        };
        let clamp_active = pv < PROB_EPS || pv > 1.0 - PROB_EPS;
        let d_dp = if clamp_active {
            0.0
        } else if fg {
            d_dpt
        } else {
            -d_dpt
        };
        gradient.data_mut()[i] = d_dp / n;
    }
    LossResult { value: value / n, gradient }.check_finite("focal_loss")
}

/// Tversky loss `1 − Σpg / (Σpg + α·Σp(1−g) + β·Σ(1−p)g + smooth)`.
pub fn tversky_loss(
    p: &Pixmap,
    g: &Pixmap,
    alpha_t: f64,
    beta_t: f64,
    smooth: f64,
) -> Result<LossResult> {
    require_same_shape(p, g)?;
    if !(alpha_t >= 0.0) || !(beta_t >= 0.0) || !(smooth >= 0.0) {
        return Err(Error::validation(format!(
            "tversky parameters must be >= 0: alpha {alpha_t}, beta {beta_t}, smooth {smooth}"
        )));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fnn = 0.0;
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        tp += pv * gv;
        fp += pv * (1.0 - gv);
        fnn += (1.0 - pv) * gv;
    }
    let den = tp + alpha_t * fp + beta_t * fnn + smooth;
    if den == 0.0 {
        return Err(Error::numerical("tversky denominator is zero"));
    }
    let value = 1.0 - tp / den;
    let mut gradient = Pixmap::zeros(p.width(), p.height())?;
    let den2 = den * den;
    for (dst, &gv) in gradient.data_mut().iter_mut().zip(g.data()) {
        // d(tp)/dp = g; d(den)/dp = g + α(1−g) − βg.
        let dden = gv + alpha_t * (1.0 - gv) - beta_t * gv;
        *dst = -(gv * den - tp * dden) / den2;
    }
    LossResult { value, gradient }.check_finite("tversky_loss")
}

// ---------------------------------------------------------------------------
// Structural similarity
// ---------------------------------------------------------------------------

/// Summed-area table with an extra zero row/column for O(1) window sums.
struct Integral {
    w: usize,
    table: Vec<f64>,
}

impl Integral {
    fn build(map: &Pixmap, f: impl Fn(usize) -> f64) -> Integral {
        let (w, h) = (map.width(), map.height());
        let mut table = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y * w + x);
                table[(y + 1) * (w + 1) + (x + 1)] = table[y * (w + 1) + (x + 1)] + row;
            }
        }
        Integral { w: w + 1, table }
    }

    /// Sum over the inclusive pixel rectangle `[x0, x1] × [y0, y1]`.
    #[inline]
    fn rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let (x1, y1) = (x1 + 1, y1 + 1);
        self.table[y1 * self.w + x1] - self.table[y0 * self.w + x1]
            - self.table[y1 * self.w + x0]
            + self.table[y0 * self.w + x0]
    }
}

/// One window's similarity and the partials needed for the chain rule.
struct WindowTerm {
    s: f64,
    d_mu_a: f64,
    d_sigma_a: f64,
    /// Coefficient of `(b_x − μ_b)/k²` (covariance mode only).
    d_cov: f64,
    mu_a: f64,
    mu_b: f64,
    sigma_a: f64,
}

fn window_term(
    mu_a: f64,
    sigma_a: f64,
    mu_b: f64,
    sigma_b: f64,
    cov_ab: f64,
    params: &SsimParams,
) -> WindowTerm {
    let (c1, c2) = (params.c1, params.c2);
    let n1 = 2.0 * mu_a * mu_b + c1;
    let n2 = if params.covariance_mode { 2.0 * cov_ab + c2 } else { 2.0 * sigma_a * sigma_b + c2 };
    let d1 = mu_a * mu_a + mu_b * mu_b + c1;
    let d2 = sigma_a * sigma_a + sigma_b * sigma_b + c2;
    let t = n1 * n2;
    let u = d1 * d2;
    let s = t / u;
    let u2 = u * u;
    let d_mu_a = (2.0 * mu_b * n2 * u - t * 2.0 * mu_a * d2) / u2;
    let d_sigma_a = if params.covariance_mode {
        (-t * 2.0 * sigma_a * d1) / u2
    } else {
        (n1 * 2.0 * sigma_b * u - t * 2.0 * sigma_a * d1) / u2
    };
    let d_cov = if params.covariance_mode { 2.0 * n1 / u } else { 0.0 };
    WindowTerm { s, d_mu_a, d_sigma_a, d_cov, mu_a, mu_b, sigma_a }
}

/// Mean windowed structural similarity of `a` and `b`, with the gradient
/// with respect to `a` when requested. Statistics use uniform windows and
/// population standard deviations.
fn ssim_eval(
    a: &Pixmap,
    b: &Pixmap,
    params: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Pixmap>)> {
    params.validate()?;
    a.require_same_shape(b, "ssim inputs")?;
    let (w, h) = (a.width(), a.height());
    let k = params.window;
    if !params.global_moments && (w < k || h < k) {
        return Err(Error::validation(format!(
            "map {w}x{h} is smaller than the {k}x{k} ssim window; pad first"
        )));
    }

    let ia = Integral::build(a, |i| a.data()[i]);
    let iaa = Integral::build(a, |i| a.data()[i] * a.data()[i]);
    let ib = Integral::build(b, |i| b.data()[i]);
    let ibb = Integral::build(b, |i| b.data()[i] * b.data()[i]);
    let iab = if params.covariance_mode {
        Some(Integral::build(a, |i| a.data()[i] * b.data()[i]))
    } else {
        None
    };

    // Window geometry: either every sliding k×k position, or one window
    // spanning the whole map (global moments).
    let (win_w, win_h, pos_w, pos_h) = if params.global_moments {
        (w, h, 1usize, 1usize)
    } else {
        (k, k, w - k + 1, h - k + 1)
    };
    let inv_k2 = 1.0 / (win_w * win_h) as f64;
    let positions = (pos_w * pos_h) as f64;

    let mut total = 0.0;
    let mut grad = if want_grad { Some(Pixmap::zeros(w, h)?) } else { None };

    for wy in 0..pos_h {
        for wx in 0..pos_w {
            let (x1, y1) = (wx + win_w - 1, wy + win_h - 1);
            let sum_a = ia.rect(wx, wy, x1, y1);
            let sum_aa = iaa.rect(wx, wy, x1, y1);
            let sum_b = ib.rect(wx, wy, x1, y1);
            let sum_bb = ibb.rect(wx, wy, x1, y1);
            let mu_a = sum_a * inv_k2;
            let mu_b = sum_b * inv_k2;
            let var_a = (sum_aa * inv_k2 - mu_a * mu_a).max(0.0);
            let var_b = (sum_bb * inv_k2 - mu_b * mu_b).max(0.0);
            let sigma_a = var_a.sqrt();
            let sigma_b = var_b.sqrt();
            let cov_ab = match &iab {
                Some(t) => t.rect(wx, wy, x1, y1) * inv_k2 - mu_a * mu_b,
                None => 0.0,
            };
            let term = window_term(mu_a, sigma_a, mu_b, sigma_b, cov_ab, params);
            total += term.s;

            if let Some(gmap) = grad.as_mut() {
                // Chain rule into each pixel of this window. σ-direction
                // contributions vanish for (numerically) constant windows.
                let coef_mu = term.d_mu_a * inv_k2;
                let coef_sigma = if term.sigma_a > SIGMA_EPS {
                    term.d_sigma_a * inv_k2 / term.sigma_a
                } else {
                    0.0
                };
                let coef_cov = term.d_cov * inv_k2;
                for y in wy..=y1 {
                    for x in wx..=x1 {
                        let av = a.get(x, y);
                        let bv = b.get(x, y);
                        let mut d = coef_mu + coef_sigma * (av - term.mu_a);
                        if params.covariance_mode {
                            d += coef_cov * (bv - term.mu_b);
                        }
                        let cell = gmap.idx(x, y);
                        gmap.data_mut()[cell] += d;
                    }
                }
            }
        }
    }

    let value = total / positions;
    if let Some(gmap) = grad.as_mut() {
        for v in gmap.data_mut() {
            *v /= positions;
        }
    }
    Ok((value, grad))
}

/// Mean structural similarity of `a` and `b` over sliding windows.
///
/// Both orders give the same value (the statistics enter symmetrically).
pub fn windowed_ssim(a: &Pixmap, b: &Pixmap, params: &SsimParams) -> Result<f64> {
    ssim_eval(a, b, params, false).map(|(v, _)| v)
}

/// Whole-image structural-similarity loss `1 − windowed_ssim(p, g)`.
pub fn ssim_loss(p: &Pixmap, g: &Pixmap, params: &SsimParams) -> Result<LossResult> {
    let (value, grad) = ssim_eval(p, g, params, true)?;
    let mut gradient = grad.expect("requested");
    for v in gradient.data_mut() {
        *v = -*v;
    }
    LossResult { value: 1.0 - value, gradient }.check_finite("ssim_loss")
}

// ---------------------------------------------------------------------------
// Instance-structural similarity
// ---------------------------------------------------------------------------

/// The two mutually exclusive similarity readings of an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssComponents {
    /// Mean over ground-truth instances of windowed similarity on the
    /// instance's box crop. Present iff the image has instances.
    pub iss_p: Option<f64>,
    /// Minimum over the patch grid of windowed similarity. Present iff the
    /// image has no instances.
    pub iss_n: Option<f64>,
}

/// The λ patch boxes of a map as a √λ×√λ grid in row-major order. Uneven
/// dimensions make the trailing patches one pixel larger.
fn patch_boxes(w: usize, h: usize, grid: usize) -> Vec<Box4> {
    let mut boxes = Vec::with_capacity(grid * grid);
    let xs: Vec<usize> = (0..=grid).map(|k| k * w / grid).collect();
    let ys: Vec<usize> = (0..=grid).map(|k| k * h / grid).collect();
    for gy in 0..grid {
        for gx in 0..grid {
            boxes.push((xs[gx], ys[gy], xs[gx + 1] - 1, ys[gy + 1] - 1));
        }
    }
    boxes
}

/// Evaluates similarity on a padded crop of `p` and `g`, optionally with the
/// gradient mapped back to `p`'s coordinates (accumulated into `grad_acc`
/// scaled by `grad_scale`).
fn crop_similarity(
    p: &Pixmap,
    g: &Pixmap,
    bx: Box4,
    params: &SsimParams,
    grad_acc: Option<(&mut Pixmap, f64)>,
) -> Result<f64> {
    let crop_p = crop_padded(p, bx, params.window)?;
    let crop_g = crop_padded(g, bx, params.window)?;
    let want_grad = grad_acc.is_some();
    let (value, grad) = ssim_eval(&crop_p, &crop_g, params, want_grad)?;
    if let Some((acc, scale)) = grad_acc {
        let grad = grad.expect("requested");
        let (x0, y0, x1, y1) = bx;
        let (off_x, off_y) = padding_offset(bx, params.window);
        // Only crop pixels sourced from `p` carry gradient; padding is
        // constant zero.
        for y in y0..=y1 {
            for x in x0..=x1 {
                let cell = acc.idx(x, y);
                acc.data_mut()[cell] += scale * grad.get(off_x + (x - x0), off_y + (y - y0));
            }
        }
    }
    Ok(value)
}

/// Computes the instance similarity (mean over instance crops) or, for
/// background-only images, the patch similarity (min over the patch grid).
/// Exactly one of the two fields is present.
pub fn iss_components(
    p: &Pixmap,
    g: &Pixmap,
    instances: &InstanceSet,
    params: &SsimParams,
) -> Result<IssComponents> {
    let (value, _, is_instance) = iss_eval(p, g, instances, params, false)?;
    Ok(if is_instance {
        IssComponents { iss_p: Some(value), iss_n: None }
    } else {
        IssComponents { iss_p: None, iss_n: Some(value) }
    })
}

/// Shared ISS engine: returns (similarity, gradient of similarity wrt p,
/// whether the instance branch applied).
fn iss_eval(
    p: &Pixmap,
    g: &Pixmap,
    instances: &InstanceSet,
    params: &SsimParams,
    want_grad: bool,
) -> Result<(f64, Option<Pixmap>, bool)> {
    params.validate()?;
    require_same_shape(p, g)?;
    if instances.width() != g.width() || instances.height() != g.height() {
        return Err(Error::validation("instance set shape does not match ground truth"));
    }

    if instances.n() > 0 {
        // Instance branch: unweighted mean over instance box crops.
        let n = instances.n() as f64;
        let mut grad = if want_grad { Some(Pixmap::zeros(p.width(), p.height())?) } else { None };
        let mut total = 0.0;
        for &bx in instances.boxes() {
            let acc = grad.as_mut().map(|gmap| (&mut *gmap, 1.0 / n));
            total += crop_similarity(p, g, bx, params, acc)?;
        }
        Ok((total / n, grad, true))
    } else {
        // Background branch: min over the patch grid; the subgradient is
        // routed to the argmin patch alone (lowest index on ties).
        let boxes = patch_boxes(p.width(), p.height(), params.patch_grid());
        let mut best = f64::INFINITY;
        let mut best_box = boxes[0];
        for &bx in &boxes {
            let v = crop_similarity(p, g, bx, params, None)?;
            if v < best {
                best = v;
                best_box = bx;
            }
        }
        let grad = if want_grad {
            let mut gmap = Pixmap::zeros(p.width(), p.height())?;
            crop_similarity(p, g, best_box, params, Some((&mut gmap, 1.0)))?;
            Some(gmap)
        } else {
            None
        };
        Ok((best, grad, false))
    }
}

/// Instance-structural similarity loss: `1 − iss_p` for images with
/// instances, `1 − iss_n` for background-only images.
pub fn iss_loss(
    p: &Pixmap,
    g: &Pixmap,
    instances: &InstanceSet,
    params: &SsimParams,
) -> Result<LossResult> {
    let (similarity, grad, _) = iss_eval(p, g, instances, params, true)?;
    let mut gradient = grad.expect("requested");
    for v in gradient.data_mut() {
        *v = -*v;
    }
    LossResult { value: 1.0 - similarity, gradient }.check_finite("iss_loss")
}

/// Combined focal + instance-structural loss
/// `alpha·focal(p, g) + beta·iss_loss(p, g)`.
pub fn fiss_loss(
    p: &Pixmap,
    g: &Pixmap,
    instances: &InstanceSet,
    alpha: f64,
    beta: f64,
    focal: &FocalParams,
    ssim: &SsimParams,
) -> Result<LossResult> {
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::validation("fiss weights must be finite"));
    }
    let f = focal_loss(p, g, focal)?;
    let i = iss_loss(p, g, instances, ssim)?;
    let mut gradient = f.gradient;
    for (dst, &iv) in gradient.data_mut().iter_mut().zip(i.gradient.data()) {
        *dst = alpha * *dst + beta * iv;
    }
    LossResult { value: alpha * f.value + beta * i.value, gradient }.check_finite("fiss_loss")
}

/// Compound loss: Dice + the combined focal/instance-structural loss.
pub fn compound_dl_fiss(
    p: &Pixmap,
    g: &Pixmap,
    instances: &InstanceSet,
    cfg: &LossConfig,
) -> Result<LossResult> {
    let d = dice_loss(p, g, cfg.dice_smooth)?;
    let f = fiss_loss(p, g, instances, cfg.fiss_alpha, cfg.fiss_beta, &cfg.focal, &cfg.ssim)?;
    let mut gradient = d.gradient;
    for (dst, &fv) in gradient.data_mut().iter_mut().zip(f.gradient.data()) {
        *dst += fv;
    }
    LossResult { value: d.value + f.value, gradient }.check_finite("compound_dl_fiss")
}

/// Evaluates any loss in the family under one configuration.
///
/// `instances` must be the connected components of `g`; only the
/// instance-aware losses consult it.
pub fn evaluate(
    loss: LossId,
    p: &Pixmap,
    g: &Pixmap,
    instances: &InstanceSet,
    cfg: &LossConfig,
) -> Result<LossResult> {
    match loss {
        LossId::Dice => dice_loss(p, g, cfg.dice_smooth),
        LossId::Focal => focal_loss(p, g, &cfg.focal),
        LossId::Tversky => tversky_loss(p, g, cfg.tversky_alpha, cfg.tversky_beta, cfg.tversky_smooth),
        LossId::Ssim => ssim_loss(p, g, &cfg.ssim),
        LossId::Iss => iss_loss(p, g, instances, &cfg.ssim),
        LossId::Fiss => {
            fiss_loss(p, g, instances, cfg.fiss_alpha, cfg.fiss_beta, &cfg.focal, &cfg.ssim)
        }
        LossId::Compound => compound_dl_fiss(p, g, instances, cfg),
    }
}

// ---------------------------------------------------------------------------
// Verification and fitting
// ---------------------------------------------------------------------------

/// Verifies the analytic gradient of `loss` against central finite
/// differences at `n_coords` randomly chosen pixels.
///
/// Returns the maximum relative error `|a − fd| / max(|a|, |fd|, 1e−8)`.
/// The prediction should be interior-valued (roughly `(0.01, 0.99)`) so the
/// focal clamp and other kinks stay inactive.
pub fn fd_gradient_check(
    loss: LossId,
    p: &Pixmap,
    g: &Pixmap,
    instances: &InstanceSet,
    cfg: &LossConfig,
    h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::validation(format!("fd step must be positive and finite, got {h}")));
    }
    if n_coords == 0 {
        return Err(Error::validation("fd check needs at least one coordinate"));
    }
    let analytic = evaluate(loss, p, g, instances, cfg)?;

    let mut coords: Vec<usize> = (0..p.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(n_coords.min(p.len()));

    let mut work = p.clone();
    let mut max_err = 0.0f64;
    for &i in &coords {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + h;
        let plus = evaluate(loss, &work, g, instances, cfg)?.value;
        work.data_mut()[i] = orig - h;
        let minus = evaluate(loss, &work, g, instances, cfg)?.value;
        work.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic.gradient.data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Soft Dice coefficient `2Σpg / (Σp + Σg)`; 1.0 when both maps are empty.
fn soft_dice(p: &Pixmap, g: &Pixmap) -> f64 {
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        inter += pv * gv;
        sum += pv + gv;
    }
    if sum == 0.0 {
        1.0
    } else {
        2.0 * inter / sum
    }
}

/// Fits a per-pixel logit map to the scene's ground truth by gradient
/// descent on the chosen loss through a sigmoid.
///
/// Logits start at zero (probability 0.5 everywhere). Returns the final
/// probability map and the soft-Dice trace: entry 0 is the baseline before
/// any update, followed by one entry per step (`steps + 1` entries total).
/// A non-finite loss aborts with a numerical error naming the step. The
/// `_seed` parameter is reserved for randomized initializations; the
/// zero-init used here draws nothing.
pub fn direct_fit(
    scene: &SceneSample,
    loss: LossId,
    steps: usize,
    learning_rate: f64,
    _seed: u64,
    cfg: &LossConfig,
) -> Result<(Pixmap, Vec<f64>)> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::validation(format!(
            "learning rate must be positive and finite, got {learning_rate}"
        )));
    }
    let g = &scene.mask;
    let instances = &scene.instances;
    let (w, h) = (g.width(), g.height());

    let mut logits = Pixmap::zeros(w, h)?;
    let mut probs = Pixmap::filled(w, h, 0.5)?;
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(soft_dice(&probs, g));

    for step in 0..steps {
        let result = evaluate(loss, &probs, g, instances, cfg).map_err(|e| match e {
            Error::Numerical(msg) => {
                Error::numerical(format!("direct_fit diverged at step {step}: {msg}"))
            }
            other => other,
        })?;
        if !result.value.is_finite() {
            return Err(Error::numerical(format!(
                "direct_fit diverged at step {step}: loss is not finite"
            )));
        }
        for i in 0..logits.data().len() {
            let pv = probs.data()[i];
            let grad_z = result.gradient.data()[i] * pv * (1.0 - pv);
            logits.data_mut()[i] -= learning_rate * grad_z;
        }
        for i in 0..probs.data().len() {
            let z = logits.data()[i];
            probs.data_mut()[i] = 1.0 / (1.0 + (-z).exp());
        }
        trace.push(soft_dice(&probs, g));
    }
    Ok((probs, trace))
}

/// Convenience: rebuilds instance labels for a mask and evaluates a loss.
pub fn evaluate_on_mask(loss: LossId, p: &Pixmap, g: &Pixmap, cfg: &LossConfig) -> Result<LossResult> {
    let instances = connected_components(g, 0.5);
    evaluate(loss, p, g, &instances, cfg)
}
