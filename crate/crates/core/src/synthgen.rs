//! Synthetic data generators.
//!
//! Two families of data feed the rest of the crate:
//!
//! * **Disc scenes** — binary masks of rasterized discs plus a lightly noisy
//!   grayscale rendering. A base scene acts as ground truth and a displaced
//!   copy as a "prediction", which is how the loss-landscape sweeps probe
//!   loss behavior as overlap degrades.
//! * **Hierarchical toy datasets** — per-sample feature grids (`g` positions
//!   by `d0` channels) with a two-level label: parent in {Neg, GS, CSN} and,
//!   for CSN only, a child in {C, SS, NoA}. Class signatures live at a few
//!   active positions so that max-pooling over positions is meaningful, and
//!   an optional label-noise pass flips child labels while recording the
//!   generator-known truth flag.
//!
//! Also provided: min-max normalization and randomized image augmentation
//! (hue rotation, flips, brightness).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{connected_components, InstanceSet, InstanceSummary};
use crate::pixmap::{Pixmap, RgbMap};

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

/// Parent-level class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParentLabel {
    Neg,
    #[serde(rename = "GS")]
    Gs,
    #[serde(rename = "CSN")]
    Csn,
}

impl ParentLabel {
    /// Logit index: Neg = 0, GS = 1, CSN = 2.
    pub fn index(self) -> usize {
        match self {
            ParentLabel::Neg => 0,
            ParentLabel::Gs => 1,
            ParentLabel::Csn => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParentLabel::Neg => "Neg",
            ParentLabel::Gs => "GS",
            ParentLabel::Csn => "CSN",
        }
    }
}

/// Child-level class, present only under the CSN parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChildLabel {
    C,
    #[serde(rename = "SS")]
    Ss,
    NoA,
}

impl ChildLabel {
    /// Logit index: C = 0, SS = 1, NoA = 2.
    pub fn index(self) -> usize {
        match self {
            ChildLabel::C => 0,
            ChildLabel::Ss => 1,
            ChildLabel::NoA => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ChildLabel> {
        match i {
            0 => Some(ChildLabel::C),
            1 => Some(ChildLabel::Ss),
            2 => Some(ChildLabel::NoA),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChildLabel::C => "C",
            ChildLabel::Ss => "SS",
            ChildLabel::NoA => "NoA",
        }
    }

    pub const ALL: [ChildLabel; 3] = [ChildLabel::C, ChildLabel::Ss, ChildLabel::NoA];
}

/// Flattened five-way class used for end-to-end accuracy bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class5 {
    Neg,
    #[serde(rename = "GS")]
    Gs,
    C,
    #[serde(rename = "SS")]
    Ss,
    NoA,
}

impl Class5 {
    /// Dense index: Neg=0, GS=1, C=2, SS=3, NoA=4.
    pub fn index(self) -> usize {
        match self {
            Class5::Neg => 0,
            Class5::Gs => 1,
            Class5::C => 2,
            Class5::Ss => 3,
            Class5::NoA => 4,
        }
    }

    /// Combines a parent label with an optional child label.
    pub fn from_parts(parent: ParentLabel, child: Option<ChildLabel>) -> Class5 {
        match (parent, child) {
            (ParentLabel::Neg, _) => Class5::Neg,
            (ParentLabel::Gs, _) => Class5::Gs,
            (ParentLabel::Csn, Some(ChildLabel::C)) => Class5::C,
            (ParentLabel::Csn, Some(ChildLabel::Ss)) => Class5::Ss,
            // A CSN sample with no child label should not occur; fold it
            // onto NoA so accuracy bookkeeping stays total.
            (ParentLabel::Csn, _) => Class5::NoA,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class5::Neg => "Neg",
            Class5::Gs => "GS",
            Class5::C => "C",
            Class5::Ss => "SS",
            Class5::NoA => "NoA",
        }
    }

    pub const ALL: [Class5; 5] = [Class5::Neg, Class5::Gs, Class5::C, Class5::Ss, Class5::NoA];
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Standardizes by mean/std, then min-max rescales to `[0, 1]`.
///
/// A constant input (zero standard deviation) maps to an all-zeros map: the
/// standardization step is undefined there and zeros are the documented
/// degenerate result.
pub fn normalize(image: &Pixmap) -> Pixmap {
    let n = image.len() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Pixmap::zeros(image.width(), image.height()).expect("same valid dims");
    }
    let standardized: Vec<f64> = image.data().iter().map(|v| (v - mean) / std).collect();
    let lo = standardized.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = standardized.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = standardized.iter().map(|v| (v - lo) / span).collect();
    Pixmap::from_vec(image.width(), image.height(), data).expect("same valid dims")
}

// ---------------------------------------------------------------------------
// Disc scenes
// ---------------------------------------------------------------------------

/// Specification of a disc scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Discs as `(center_x, center_y, radius)` in pixel units.
    pub objects: Vec<(f64, f64, f64)>,
    /// Seed for the grayscale rendering noise.
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::validation(format!(
                "scene must be at least 16x16, got {}x{}",
                self.width, self.height
            )));
        }
        for &(cx, cy, r) in &self.objects {
            if !(cx.is_finite() && cy.is_finite() && r.is_finite()) {
                return Err(Error::validation("disc parameters must be finite"));
            }
            if r < 1.0 {
                return Err(Error::validation(format!("disc radius must be >= 1, got {r}")));
            }
            if cx < 0.0 || cx >= self.width as f64 || cy < 0.0 || cy >= self.height as f64 {
                return Err(Error::validation(format!(
                    "disc center ({cx}, {cy}) outside {}x{} image",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Object size regime by ground-truth area ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    /// `gtr <= 0.20`
    Small,
    /// `0.20 < gtr < 0.50`
    Middle,
    /// `gtr >= 0.50`
    Large,
}

impl SizeClass {
    /// Classifies a ground-truth area ratio.
    pub fn from_gtr(gtr: f64) -> SizeClass {
        if gtr <= 0.20 {
            SizeClass::Small
        } else if gtr < 0.50 {
            SizeClass::Middle
        } else {
            SizeClass::Large
        }
    }
}

/// A rendered disc scene.
#[derive(Debug, Clone)]
pub struct SceneSample {
    /// Noisy grayscale rendering in `[0, 1]`.
    pub image: Pixmap,
    /// Binary union mask of all discs (1 = foreground).
    pub mask: Pixmap,
    /// Connected components of the mask.
    pub instances: InstanceSet,
    /// Foreground pixel count / total pixel count.
    pub gtr: f64,
    /// Size regime implied by `gtr`.
    pub size_class: SizeClass,
}

/// JSON metadata accompanying a scene on disk.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneMeta {
    pub spec: SceneSpec,
    pub gtr: f64,
    pub size_class: SizeClass,
    pub instances: InstanceSummary,
}

/// Rasterizes the union mask: pixel `(x, y)` is foreground iff its center
/// lies within some disc (no anti-aliasing). Out-of-frame disc portions are
/// clipped by construction.
fn rasterize(width: usize, height: usize, objects: &[(f64, f64, f64)]) -> Pixmap {
    let mut mask = Pixmap::zeros(width, height).expect("validated dims");
    for &(cx, cy, r) in objects {
        let r2 = r * r;
        // Only scan the disc's bounding rows/cols, clipped to the frame.
        let x_min = ((cx - r).floor().max(0.0)) as usize;
        let x_max = ((cx + r).ceil().min(width as f64 - 1.0)) as usize;
        let y_min = ((cy - r).floor().max(0.0)) as usize;
        let y_max = ((cy + r).ceil().min(height as f64 - 1.0)) as usize;
        if (cx + r) < 0.0 || (cy + r) < 0.0 || (cx - r) > width as f64 || (cy - r) > height as f64 {
            continue;
        }
        for y in y_min..=y_max {
            let dy = y as f64 - cy;
            for x in x_min..=x_max {
                let dx = x as f64 - cx;
                if dx * dx + dy * dy <= r2 {
                    mask.set(x, y, 1.0);
                }
            }
        }
    }
    mask
}

/// Builds a sample from an already-rasterized mask.
fn sample_from_mask(mask: Pixmap, seed: u64) -> SceneSample {
    let instances = connected_components(&mask, 0.5);
    let fg = mask.count_at_least(0.5);
    let gtr = fg as f64 / mask.len() as f64;
    let size_class = SizeClass::from_gtr(gtr);

    // Grayscale rendering: bright discs on a dark ground plus mild Gaussian
    // noise, clipped to [0, 1]. The mask, not the image, is authoritative.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Pixmap::zeros(mask.width(), mask.height()).expect("valid dims");
    for (dst, &m) in image.data_mut().iter_mut().zip(mask.data()) {
        let base = if m >= 0.5 { 0.85 } else { 0.15 };
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.05;
        *dst = (base + noise).clamp(0.0, 1.0);
    }

    SceneSample { image, mask, instances, gtr, size_class }
}

/// Renders a disc scene: union mask, instance labeling, GTR, and a noisy
/// grayscale image.
pub fn circle_scene(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let mask = rasterize(spec.width, spec.height, &spec.objects);
    Ok(sample_from_mask(mask, spec.seed))
}

/// Renders the scene with every disc center shifted by `offset` pixels.
///
/// Radii are unchanged; discs pushed past the frame are clipped. Centers are
/// allowed to leave the frame here (unlike [`circle_scene`], which requires
/// in-bounds centers), because displacement sweeps intentionally slide
/// objects out of view.
pub fn displaced_scene(base: &SceneSpec, offset: (f64, f64)) -> Result<SceneSample> {
    base.validate()?;
    if !(offset.0.is_finite() && offset.1.is_finite()) {
        return Err(Error::validation("displacement offset must be finite"));
    }
    let objects: Vec<(f64, f64, f64)> =
        base.objects.iter().map(|&(cx, cy, r)| (cx + offset.0, cy + offset.1, r)).collect();
    let mask = rasterize(base.width, base.height, &objects);
    Ok(sample_from_mask(mask, base.seed.wrapping_add(1)))
}

// ---------------------------------------------------------------------------
// Hierarchical toy datasets
// ---------------------------------------------------------------------------

/// Per-class sample counts for the regular training pool (the three fixed
/// samples are emitted on top of these).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    #[serde(rename = "Neg")]
    pub neg: usize,
    #[serde(rename = "GS")]
    pub gs: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "SS")]
    pub ss: usize,
    #[serde(rename = "NoA")]
    pub noa: usize,
}

impl Default for ClassCounts {
    /// Desk-scale counts preserving the default imbalance ratios
    /// NoA : SS : C : GS : Neg ≈ 10401 : 1066 : 818 : 2223 : 8605.
    fn default() -> Self {
        ClassCounts { neg: 172, gs: 44, c: 16, ss: 21, noa: 208 }
    }
}

/// Configuration of the toy hierarchical generator.
///
/// Every sample is a `g × d0` feature grid of Gaussian noise with class
/// signatures added on top:
///
/// * Neg/GS samples carry their parent signature on **every** position.
/// * CSN samples carry the shared CSN component plus their child signature
///   on `active_positions` randomly chosen positions.
/// * Optionally (`background_parent_mix`), the remaining positions of a CSN
///   sample carry Neg- or GS-like background content, and (`echo_rate` /
///   `echo_strength`) any background position of any sample may carry a
///   scaled copy of a random child signature — distractors that make the
///   child task genuinely contextual. Both extensions default to off, which
///   leaves the plain signature-plus-noise layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub counts: ClassCounts,
    /// Number of feature positions (max-pool axis).
    pub g: usize,
    /// Channels per position.
    pub d0: usize,
    /// Amplitude of the Neg/GS parent signatures.
    pub strength_parent: f64,
    /// Amplitude of the shared CSN component.
    pub strength_common: f64,
    /// Amplitude of the child signatures.
    pub strength_child: f64,
    /// Standard deviation of the per-feature Gaussian noise.
    pub noise_sigma: f64,
    /// Positions per CSN sample that carry the lesion signature.
    pub active_positions: usize,
    /// Scale of echoed child signatures on background positions.
    pub echo_strength: f64,
    /// Probability that a background position carries an echo.
    pub echo_rate: f64,
    /// Whether CSN background positions carry Neg/GS content.
    pub background_parent_mix: bool,
    /// Seed for the class signatures (the "world"), independent of the
    /// per-dataset sampling seed.
    pub signature_seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            counts: ClassCounts::default(),
            g: 8,
            d0: 16,
            strength_parent: 1.0,
            strength_common: 1.0,
            strength_child: 1.0,
            noise_sigma: 0.3,
            active_positions: 2,
            echo_strength: 0.0,
            echo_rate: 0.0,
            background_parent_mix: false,
            signature_seed: 0,
        }
    }
}

impl HierarchyConfig {
    fn validate(&self) -> Result<()> {
        let counts = [
            ("Neg", self.counts.neg),
            ("GS", self.counts.gs),
            ("C", self.counts.c),
            ("SS", self.counts.ss),
            ("NoA", self.counts.noa),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::validation(format!("class {name} has count 0")));
            }
        }
        if self.g == 0 || self.d0 == 0 {
            return Err(Error::validation("feature dims g and d0 must be positive"));
        }
        if self.active_positions == 0 || self.active_positions > self.g {
            return Err(Error::validation(format!(
                "active_positions must be in 1..={}, got {}",
                self.g, self.active_positions
            )));
        }
        for (name, v) in [
            ("strength_parent", self.strength_parent),
            ("strength_common", self.strength_common),
            ("strength_child", self.strength_child),
            ("noise_sigma", self.noise_sigma),
            ("echo_strength", self.echo_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.echo_rate) {
            return Err(Error::validation(format!(
                "echo_rate must be in [0, 1], got {}",
                self.echo_rate
            )));
        }
        Ok(())
    }
}

/// One toy sample: a feature grid plus hierarchical labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySample {
    pub id: String,
    /// `g` rows of `d0` channels.
    pub features: Vec<Vec<f64>>,
    pub parent_label: ParentLabel,
    /// Present iff `parent_label` is CSN.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub child_label: Option<ChildLabel>,
    pub is_fixed: bool,
    /// Generator-known truth flag: true when the child label was flipped by
    /// the label-noise pass.
    #[serde(default)]
    pub is_mislabeled: bool,
}

impl ToySample {
    /// Five-way class implied by the stored (possibly flipped) labels.
    pub fn class5(&self) -> Class5 {
        Class5::from_parts(self.parent_label, self.child_label)
    }
}

/// A generated toy dataset: regular pool plus the three fixed samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDataset {
    /// Regular training pool.
    pub samples: Vec<ToySample>,
    /// Exactly three fixed CSN samples, one per child class.
    pub fixed: Vec<ToySample>,
    /// Regular-pool counts by class name, consistent with `samples`.
    #[serde(rename = "counts")]
    pub class_counts: BTreeMap<String, usize>,
    /// The label-noise rate the pool was generated with.
    pub noise_rate: f64,
}

impl ToyDataset {
    /// Positions per sample (`g`).
    pub fn g(&self) -> usize {
        self.samples.first().or(self.fixed.first()).map_or(0, |s| s.features.len())
    }

    /// Channels per position (`d0`).
    pub fn d0(&self) -> usize {
        self.samples
            .first()
            .or(self.fixed.first())
            .and_then(|s| s.features.first())
            .map_or(0, |row| row.len())
    }

    /// Recomputes regular-pool class counts from the stored samples.
    pub fn recount(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            Class5::ALL.iter().map(|c| (c.name().to_string(), 0)).collect();
        for s in &self.samples {
            *counts.get_mut(s.class5().name()).expect("all five keys present") += 1;
        }
        counts
    }

    /// Serializes to the canonical dataset JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses the canonical dataset JSON and checks structural invariants.
    pub fn from_json(text: &str) -> Result<ToyDataset> {
        let ds: ToyDataset = serde_json::from_str(text)?;
        ds.check()?;
        Ok(ds)
    }

    /// Structural invariants: consistent feature shapes, child labels present
    /// iff CSN, fixed samples are CSN, counts match the pool.
    pub fn check(&self) -> Result<()> {
        let g = self.g();
        let d0 = self.d0();
        if g == 0 || d0 == 0 {
            return Err(Error::validation("dataset has no samples"));
        }
        for s in self.samples.iter().chain(&self.fixed) {
            if s.features.len() != g || s.features.iter().any(|r| r.len() != d0) {
                return Err(Error::validation(format!("sample {} has inconsistent shape", s.id)));
            }
            let is_csn = s.parent_label == ParentLabel::Csn;
            if is_csn != s.child_label.is_some() {
                return Err(Error::validation(format!(
                    "sample {}: child label must be present iff parent is CSN",
                    s.id
                )));
            }
        }
        for f in &self.fixed {
            if f.parent_label != ParentLabel::Csn || !f.is_fixed {
                return Err(Error::validation(format!(
                    "fixed sample {} must be a CSN sample flagged fixed",
                    f.id
                )));
            }
        }
        if self.recount() != self.class_counts {
            return Err(Error::validation("class_counts inconsistent with samples"));
        }
        Ok(())
    }
}

/// Generates a toy hierarchical dataset.
///
/// `seed` drives sampling; the class signatures come from
/// `cfg.signature_seed`, so several datasets can share one "world". With
/// probability `noise_rate` a regular CSN sample's child label is flipped to
/// one of the other two child classes and its `is_mislabeled` flag set. The
/// three fixed samples are never flipped. Identical `(cfg, seed,
/// noise_rate)` reproduce the dataset byte for byte.
pub fn hierarchy_dataset(cfg: &HierarchyConfig, seed: u64, noise_rate: f64) -> Result<ToyDataset> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::validation(format!("noise_rate must be in [0, 1), got {noise_rate}")));
    }

    let (g, d0) = (cfg.g, cfg.d0);
    let mut world = ChaCha8Rng::seed_from_u64(cfg.signature_seed);
    let mut draw_sig = |scale: f64| -> Vec<Vec<f64>> {
        (0..g)
            .map(|_| (0..d0).map(|_| world.sample::<f64, _>(StandardNormal) * scale).collect())
            .collect()
    };
    let sig_neg = draw_sig(cfg.strength_parent);
    let sig_gs = draw_sig(cfg.strength_parent);
    let sig_common = draw_sig(cfg.strength_common);
    let sig_child: Vec<Vec<Vec<f64>>> = (0..3).map(|_| draw_sig(cfg.strength_child)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let emit = |rng: &mut ChaCha8Rng,
                    parent: ParentLabel,
                    child: Option<ChildLabel>|
     -> Vec<Vec<f64>> {
        let mut x: Vec<Vec<f64>> = (0..g)
            .map(|_| {
                (0..d0).map(|_| rng.sample::<f64, _>(StandardNormal) * cfg.noise_sigma).collect()
            })
            .collect();
        let mut active = vec![false; g];
        if parent == ParentLabel::Csn {
            let mut positions: Vec<usize> = (0..g).collect();
            positions.shuffle(rng);
            for &p in positions.iter().take(cfg.active_positions) {
                active[p] = true;
            }
        }
        for i in 0..g {
            if active[i] {
                let c = child.expect("CSN sample has a child").index();
                for j in 0..d0 {
                    x[i][j] += sig_common[i][j] + sig_child[c][i][j];
                }
            } else {
                match parent {
                    ParentLabel::Neg => {
                        for j in 0..d0 {
                            x[i][j] += sig_neg[i][j];
                        }
                    }
                    ParentLabel::Gs => {
                        for j in 0..d0 {
                            x[i][j] += sig_gs[i][j];
                        }
                    }
                    ParentLabel::Csn => {
                        if cfg.background_parent_mix {
                            let base =
                                if rng.gen::<f64>() < 0.5 { &sig_neg } else { &sig_gs };
                            for j in 0..d0 {
                                x[i][j] += base[i][j];
                            }
                        }
                    }
                }
                if cfg.echo_rate > 0.0 && rng.gen::<f64>() < cfg.echo_rate {
                    let c = rng.gen_range(0..3usize);
                    for j in 0..d0 {
                        x[i][j] += cfg.echo_strength * sig_child[c][i][j];
                    }
                }
            }
        }
        x
    };

    // Fixed samples first: one prototype per child class.
    let mut fixed = Vec::with_capacity(3);
    for (k, child) in ChildLabel::ALL.iter().enumerate() {
        let features = emit(&mut rng, ParentLabel::Csn, Some(*child));
        fixed.push(ToySample {
            id: format!("f{k}"),
            features,
            parent_label: ParentLabel::Csn,
            child_label: Some(*child),
            is_fixed: true,
            is_mislabeled: false,
        });
    }

    // Regular pool in a fixed class order.
    let plan: [(ParentLabel, Option<ChildLabel>, usize); 5] = [
        (ParentLabel::Neg, None, cfg.counts.neg),
        (ParentLabel::Gs, None, cfg.counts.gs),
        (ParentLabel::Csn, Some(ChildLabel::C), cfg.counts.c),
        (ParentLabel::Csn, Some(ChildLabel::Ss), cfg.counts.ss),
        (ParentLabel::Csn, Some(ChildLabel::NoA), cfg.counts.noa),
    ];
    let mut samples = Vec::new();
    for (parent, child, count) in plan {
        for _ in 0..count {
            let features = emit(&mut rng, parent, child);
            samples.push(ToySample {
                id: format!("s{:05}", samples.len()),
                features,
                parent_label: parent,
                child_label: child,
                is_fixed: false,
                is_mislabeled: false,
            });
        }
    }

    // Label-noise pass over regular CSN samples only.
    if noise_rate > 0.0 {
        for s in &mut samples {
            if s.parent_label != ParentLabel::Csn {
                continue;
            }
            if rng.gen::<f64>() < noise_rate {
                let current = s.child_label.expect("CSN sample has a child");
                let others: Vec<ChildLabel> =
                    ChildLabel::ALL.iter().copied().filter(|c| *c != current).collect();
                s.child_label = Some(others[rng.gen_range(0..2usize)]);
                s.is_mislabeled = true;
            }
        }
    }

    let mut ds = ToyDataset { samples, fixed, class_counts: BTreeMap::new(), noise_rate };
    ds.class_counts = ds.recount();
    ds.check()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Grayscale or RGB image for augmentation.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    Gray(Pixmap),
    Rgb(RgbMap),
}

/// Augmentation parameter ranges. A range of zero disables that transform
/// (and consumes no randomness for it).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Hue shift is uniform in `[-hue_max, hue_max]`, applied as a rotation
    /// of `Δ·360°` in HSV hue. RGB images only.
    pub hue_max: f64,
    /// Probability of each of the horizontal and vertical flips.
    pub flip_prob: f64,
    /// Brightness shift is uniform in `(0, brightness_max)`.
    pub brightness_max: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { hue_max: 0.15, flip_prob: 0.5, brightness_max: 0.15 }
    }
}

impl AugmentParams {
    /// Degenerate parameters that make `augment` the identity.
    pub fn disabled() -> Self {
        AugmentParams { hue_max: 0.0, flip_prob: 0.0, brightness_max: 0.0 }
    }
}

/// Applies randomized hue rotation (RGB only), horizontal/vertical flips,
/// and a positive brightness shift, clipping the result to `[0, 1]`.
///
/// Transforms draw from `rng` in a fixed order (hue, flip-h, flip-v,
/// brightness); disabled transforms draw nothing.
pub fn augment(image: &ImageData, rng: &mut ChaCha8Rng, params: &AugmentParams) -> ImageData {
    let mut out = image.clone();

    if params.hue_max > 0.0 {
        if let ImageData::Rgb(img) = &mut out {
            let delta = rng.gen_range(-params.hue_max..=params.hue_max);
            let degrees = delta * 360.0;
            for px in img.data_mut() {
                *px = rotate_hue(*px, degrees);
            }
        }
    }

    if params.flip_prob > 0.0 {
        if rng.gen::<f64>() < params.flip_prob {
            flip_horizontal(&mut out);
        }
        if rng.gen::<f64>() < params.flip_prob {
            flip_vertical(&mut out);
        }
    }

    if params.brightness_max > 0.0 {
        let delta = rng.gen::<f64>() * params.brightness_max;
        match &mut out {
            ImageData::Gray(img) => {
                for v in img.data_mut() {
                    *v += delta;
                }
            }
            ImageData::Rgb(img) => {
                for px in img.data_mut() {
                    for c in px.iter_mut() {
                        *c += delta;
                    }
                }
            }
        }
    }

    clip_unit(&mut out);
    out
}

fn clip_unit(image: &mut ImageData) {
    match image {
        ImageData::Gray(img) => {
            for v in img.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        ImageData::Rgb(img) => {
            for px in img.data_mut() {
                for c in px.iter_mut() {
                    *c = c.clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn flip_horizontal(image: &mut ImageData) {
    match image {
        ImageData::Gray(img) => {
            let (w, h) = (img.width(), img.height());
            for y in 0..h {
                for x in 0..w / 2 {
                    let a = img.get(x, y);
                    let b = img.get(w - 1 - x, y);
                    img.set(x, y, b);
                    img.set(w - 1 - x, y, a);
                }
            }
        }
        ImageData::Rgb(img) => {
            let (w, h) = (img.width(), img.height());
            for y in 0..h {
                for x in 0..w / 2 {
                    let a = img.get(x, y);
                    let b = img.get(w - 1 - x, y);
                    img.set(x, y, b);
                    img.set(w - 1 - x, y, a);
                }
            }
        }
    }
}

fn flip_vertical(image: &mut ImageData) {
    match image {
        ImageData::Gray(img) => {
            let (w, h) = (img.width(), img.height());
            for y in 0..h / 2 {
                for x in 0..w {
                    let a = img.get(x, y);
                    let b = img.get(x, h - 1 - y);
                    img.set(x, y, b);
                    img.set(x, h - 1 - y, a);
                }
            }
        }
        ImageData::Rgb(img) => {
            let (w, h) = (img.width(), img.height());
            for y in 0..h / 2 {
                for x in 0..w {
                    let a = img.get(x, y);
                    let b = img.get(x, h - 1 - y);
                    img.set(x, y, b);
                    img.set(x, h - 1 - y, a);
                }
            }
        }
    }
}

/// Rotates a pixel's hue by `degrees` via RGB → HSV → RGB.
fn rotate_hue(px: [f64; 3], degrees: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(px);
    let h = (h + degrees).rem_euclid(360.0);
    hsv_to_rgb(h, s, v)
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
