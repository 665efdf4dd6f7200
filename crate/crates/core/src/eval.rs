//! Segmentation, classification, and detection metrics, the two-stage
//! pipeline harness, and a rank-sum significance test.
//!
//! The two-stage harness mirrors the full recognition flow: a probability
//! map per scene is thresholded, split into connected components, filtered
//! for tiny fragments, and each surviving segment's bounding box is handed
//! to a pluggable [`InstanceClassifier`]. The resulting detection records
//! are scored with VOC-style average precision at a configurable IoU
//! threshold, alongside a global Dice score and a 5-class confusion matrix.
//!
//! [`rank_sum_test`] is a two-sided Mann-Whitney U test with midranks: exact
//! by enumeration for pooled sizes up to 12, normal approximation with tie
//! and continuity corrections above that.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::hier::{predict, ModelParams};
use crate::instances::{connected_components, Box4};
use crate::pixmap::Pixmap;
use crate::synthgen::{circle_scene, Class5, HierarchyConfig, ParentLabel, SceneSpec, ToySample};

/// Classes that detection records may carry (everything except Neg).
pub const DETECTION_CLASSES: [Class5; 4] = [Class5::Gs, Class5::C, Class5::Ss, Class5::NoA];

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

/// Dice coefficient `2|P∩G| / (|P| + |G|)` of two binary masks (values are
/// binarized at 0.5). Two empty masks agree perfectly and score 1.0.
pub fn dice_score(p: &Pixmap, g: &Pixmap) -> Result<f64> {
    p.require_same_shape(g, "dice_score")?;
    let mut inter = 0usize;
    let mut p_sum = 0usize;
    let mut g_sum = 0usize;
    for (pv, gv) in p.data().iter().zip(g.data()) {
        let pb = *pv >= 0.5;
        let gb = *gv >= 0.5;
        inter += (pb && gb) as usize;
        p_sum += pb as usize;
        g_sum += gb as usize;
    }
    if p_sum + g_sum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_sum + g_sum) as f64)
}

/// Intersection-over-union of two boxes on inclusive pixel bounds.
pub fn box_iou(a: Box4, b: Box4) -> f64 {
    let area = |(x0, y0, x1, y1): Box4| -> f64 {
        ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64
    };
    let ix0 = a.0.max(b.0);
    let iy0 = a.1.max(b.1);
    let ix1 = a.2.min(b.2);
    let iy1 = a.3.min(b.3);
    if ix1 < ix0 || iy1 < iy0 {
        return 0.0;
    }
    let inter = area((ix0, iy0, ix1, iy1));
    inter / (area(a) + area(b) - inter)
}

/// Micro and macro accuracy from a square confusion matrix
/// (`confusion[truth][predicted]`).
///
/// Micro is the diagonal sum over the total; macro averages per-class recall
/// over classes that have at least one true sample.
pub fn accuracy(confusion: &[Vec<usize>]) -> Result<(f64, f64)> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|row| row.len() != k) {
        return Err(Error::validation("confusion matrix must be square and non-empty"));
    }
    let total: usize = confusion.iter().map(|row| row.iter().sum::<usize>()).sum();
    if total == 0 {
        return Err(Error::validation("confusion matrix is empty"));
    }
    let diag: usize = (0..k).map(|i| confusion[i][i]).sum();
    let micro = diag as f64 / total as f64;
    let mut recalls = Vec::new();
    for i in 0..k {
        let support: usize = confusion[i].iter().sum();
        if support > 0 {
            recalls.push(confusion[i][i] as f64 / support as f64);
        }
    }
    let macro_acc = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok((micro, macro_acc))
}

// ---------------------------------------------------------------------------
// Detection records and average precision
// ---------------------------------------------------------------------------

/// One detected instance: a classified bounding box with the deciding
/// branch's softmax confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: String,
    #[serde(rename = "box")]
    pub bx: Box4,
    pub cls: Class5,
    pub confidence: f64,
}

/// One ground-truth instance for detection scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub scene_id: String,
    #[serde(rename = "box")]
    pub bx: Box4,
    pub cls: Class5,
}

/// Average precision for one class at the given IoU threshold: predictions
/// sorted by confidence (ties keep insertion order) are greedily matched to
/// the highest-IoU unmatched ground truth in their scene, and the exact area
/// under the precision envelope is returned. `None` when the class has no
/// ground truths (undefined, excluded from the mean).
pub fn average_precision(
    preds: &[DetectionRecord],
    gts: &[GtBox],
    cls: Class5,
    iou_thresh: f64,
) -> Result<Option<f64>> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::validation(format!(
            "iou threshold must be in (0, 1], got {iou_thresh}"
        )));
    }
    if preds.iter().any(|r| !r.confidence.is_finite()) {
        return Err(Error::validation("non-finite confidence in detection records"));
    }
    let class_gts: Vec<&GtBox> = gts.iter().filter(|g| g.cls == cls).collect();
    if class_gts.is_empty() {
        return Ok(None);
    }
    let mut class_preds: Vec<&DetectionRecord> = preds.iter().filter(|r| r.cls == cls).collect();
    class_preds.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite"));

    let n_gt = class_gts.len();
    let mut matched = vec![false; n_gt];
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(class_preds.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for pred in &class_preds {
        let mut best: Option<(usize, f64)> = None;
        for (slot, gt) in class_gts.iter().enumerate() {
            if matched[slot] || gt.scene_id != pred.scene_id {
                continue;
            }
            let iou = box_iou(gt.bx, pred.bx);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((slot, iou));
            }
        }
        if let Some((slot, _)) = best {
            matched[slot] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // Exact area under the all-points precision envelope.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (recall, _) = points[i];
        if recall > prev_recall {
            let envelope = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    Ok(Some(ap))
}

/// Mean average precision over the requested classes that appear in the
/// ground truths, plus the per-class breakdown. No scored class → 0.0.
pub fn map50(
    preds: &[DetectionRecord],
    gts: &[GtBox],
    classes: &[Class5],
    iou_thresh: f64,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut ap_per_class = BTreeMap::new();
    for &cls in classes {
        if let Some(ap) = average_precision(preds, gts, cls, iou_thresh)? {
            ap_per_class.insert(cls.name().to_string(), ap);
        }
    }
    let map = if ap_per_class.is_empty() {
        0.0
    } else {
        ap_per_class.values().sum::<f64>() / ap_per_class.len() as f64
    };
    Ok((map, ap_per_class))
}

// ---------------------------------------------------------------------------
// Two-stage pipeline
// ---------------------------------------------------------------------------

/// One ground-truth instance inside a scene: its box, class, and the feature
/// grid that the model-backed classifier consumes (may be empty when only
/// geometric scoring is needed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtInstance {
    #[serde(rename = "box")]
    pub bx: Box4,
    pub cls: Class5,
    pub features: Vec<Vec<f64>>,
}

/// One scene of the evaluation set: the binary ground-truth mask, the
/// segmentation probability map under test, and the ground-truth instances.
#[derive(Debug, Clone)]
pub struct TwoStageScene {
    pub scene_id: String,
    pub gt_mask: Pixmap,
    pub seg_map: Pixmap,
    pub gts: Vec<GtInstance>,
}

/// Stage-2 plug point: classify the segment in `bx` of `scene`, returning a
/// class and the deciding confidence. Errors are counted by the harness and
/// the segment is dropped.
pub trait InstanceClassifier {
    fn classify(&self, scene: &TwoStageScene, bx: Box4) -> Result<(Class5, f64)>;
}

/// Index and IoU of the ground-truth instance best overlapping `bx`, if any
/// overlaps at all.
fn best_gt(scene: &TwoStageScene, bx: Box4) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, gt) in scene.gts.iter().enumerate() {
        let iou = box_iou(gt.bx, bx);
        if iou > 0.0 && best.map_or(true, |(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best
}

/// Perfect stage-2: answers with the overlapping ground truth's class at
/// confidence 1.0. Errors when the segment overlaps nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleClassifier;

impl InstanceClassifier for OracleClassifier {
    fn classify(&self, scene: &TwoStageScene, bx: Box4) -> Result<(Class5, f64)> {
        let (i, _) = best_gt(scene, bx).ok_or_else(|| {
            Error::validation("segment overlaps no ground-truth instance")
        })?;
        Ok((scene.gts[i].cls, 1.0))
    }
}

/// Model-backed stage-2: feeds the overlapping ground truth's feature grid
/// through a trained classifier.
#[derive(Debug, Clone, Copy)]
pub struct ModelClassifier<'a> {
    pub params: &'a ModelParams,
}

impl InstanceClassifier for ModelClassifier<'_> {
    fn classify(&self, scene: &TwoStageScene, bx: Box4) -> Result<(Class5, f64)> {
        let (i, _) = best_gt(scene, bx).ok_or_else(|| {
            Error::validation("segment overlaps no ground-truth instance")
        })?;
        let gt = &scene.gts[i];
        if gt.features.is_empty() {
            return Err(Error::validation("ground-truth instance carries no features"));
        }
        let sample = ToySample {
            id: format!("{}#{}", scene.scene_id, i),
            features: gt.features.clone(),
            parent_label: ParentLabel::Neg,
            child_label: None,
            is_fixed: false,
            is_mislabeled: false,
        };
        let out = predict(&sample, self.params)?;
        Ok((out.label, out.confidence))
    }
}

/// Aggregate metrics of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Global Dice over all scenes' pixels.
    pub dice: f64,
    pub acc_micro: f64,
    pub acc_macro: f64,
    pub ap_per_class: BTreeMap<String, f64>,
    pub map: f64,
    /// 5×5 counts, `confusion[truth][predicted]` in Class5 index order.
    pub confusion: Vec<Vec<usize>>,
    /// Segments dropped because the classifier returned an error.
    #[serde(default)]
    pub n_classifier_failures: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Runs the full two-stage pipeline over a scene set.
///
/// Each scene's probability map is binarized at 0.5, connected components
/// below `min_area` pixels are discarded, and every surviving segment is
/// classified. Segments the classifier errors on are dropped and counted;
/// segments predicted Neg are dropped silently (background, not instances
/// of interest). The
/// confusion matrix pairs each classified segment with its best-IoU ground
/// truth at `iou_thresh` or better; detection records are scored with mAP
/// over the non-Neg classes present in the ground truths.
pub fn run_two_stage(
    scenes: &[TwoStageScene],
    classifier: &dyn InstanceClassifier,
    min_area: usize,
    iou_thresh: f64,
) -> Result<(Vec<DetectionRecord>, EvalReport)> {
    if scenes.is_empty() {
        return Err(Error::validation("evaluation needs at least one scene"));
    }
    let mut records = Vec::new();
    let mut confusion = vec![vec![0usize; 5]; 5];
    let mut n_fail = 0usize;
    let mut inter = 0usize;
    let mut p_sum = 0usize;
    let mut g_sum = 0usize;

    for scene in scenes {
        scene.seg_map.require_same_shape(&scene.gt_mask, "run_two_stage")?;
        for (pv, gv) in scene.seg_map.data().iter().zip(scene.gt_mask.data()) {
            let pb = *pv >= 0.5;
            let gb = *gv >= 0.5;
            inter += (pb && gb) as usize;
            p_sum += pb as usize;
            g_sum += gb as usize;
        }
        let inst = connected_components(&scene.seg_map, 0.5).filter_tiny(min_area);
        for &bx in inst.boxes() {
            let (cls, confidence) = match classifier.classify(scene, bx) {
                Ok(out) => out,
                Err(_) => {
                    n_fail += 1;
                    continue;
                }
            };
            if let Some((gi, iou)) = best_gt(scene, bx) {
                if iou >= iou_thresh {
                    confusion[scene.gts[gi].cls.index()][cls.index()] += 1;
                }
            }
            if cls == Class5::Neg {
                continue;
            }
            records.push(DetectionRecord {
                scene_id: scene.scene_id.clone(),
                bx,
                cls,
                confidence,
            });
        }
    }

    let dice = if p_sum + g_sum == 0 { 1.0 } else { 2.0 * inter as f64 / (p_sum + g_sum) as f64 };
    let gts: Vec<GtBox> = scenes
        .iter()
        .flat_map(|s| {
            s.gts.iter().map(|g| GtBox {
                scene_id: s.scene_id.clone(),
                bx: g.bx,
                cls: g.cls,
            })
        })
        .collect();
    let (map, ap_per_class) = map50(&records, &gts, &DETECTION_CLASSES, iou_thresh)?;
    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let (acc_micro, acc_macro) = if total > 0 { accuracy(&confusion)? } else { (0.0, 0.0) };

    let report = EvalReport {
        dice,
        acc_micro,
        acc_macro,
        ap_per_class,
        map,
        confusion,
        n_classifier_failures: n_fail,
    };
    Ok((records, report))
}

// ---------------------------------------------------------------------------
// Synthetic evaluation scenes
// ---------------------------------------------------------------------------

/// Builds a deterministic scene set for end-to-end evaluation: each scene
/// holds 2–4 non-overlapping discs rasterized into a ground-truth mask (the
/// probability map under test starts as a perfect copy). Instances cycle
/// through the non-Neg classes and carry feature grids drawn from `cfg`'s
/// signature world, so a model trained on the same config can classify them.
pub fn synthetic_scenes(
    n_scenes: usize,
    cfg: &HierarchyConfig,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Vec<TwoStageScene>> {
    use crate::synthgen::{hierarchy_dataset, ClassCounts};

    if n_scenes == 0 {
        return Err(Error::validation("scene count must be positive"));
    }
    if width < 32 || height < 32 {
        return Err(Error::validation("scenes must be at least 32x32"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = width.min(height) as f64;

    // Pass 1: geometry and classes for every scene.
    struct PlannedScene {
        scene_id: String,
        mask: Pixmap,
        boxes: Vec<Box4>,
        classes: Vec<Class5>,
    }
    let mut planned = Vec::with_capacity(n_scenes);
    let mut class_cursor = 0usize;
    let mut needed: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..n_scenes {
        let target = rng.gen_range(2..=4usize);
        let mut objects: Vec<(f64, f64, f64)> = Vec::new();
        for _ in 0..target {
            // Rejection placement: discs stay inside the frame and apart.
            for _attempt in 0..100 {
                let r = rng.gen_range(min_dim / 12.0..min_dim / 6.0);
                let cx = rng.gen_range(r + 2.0..width as f64 - r - 2.0);
                let cy = rng.gen_range(r + 2.0..height as f64 - r - 2.0);
                let clear = objects.iter().all(|&(ox, oy, or)| {
                    let d2 = (cx - ox) * (cx - ox) + (cy - oy) * (cy - oy);
                    d2.sqrt() >= r + or + 4.0
                });
                if clear {
                    objects.push((cx, cy, r));
                    break;
                }
            }
        }
        let spec = SceneSpec { width, height, objects, seed: seed.wrapping_add(i as u64) };
        let sample = circle_scene(&spec)?;
        let boxes = sample.instances.boxes().to_vec();
        let classes: Vec<Class5> = boxes
            .iter()
            .map(|_| {
                let cls = DETECTION_CLASSES[class_cursor % DETECTION_CLASSES.len()];
                class_cursor += 1;
                *needed.entry(cls.name()).or_insert(0) += 1;
                cls
            })
            .collect();
        planned.push(PlannedScene {
            scene_id: format!("scene{i:03}"),
            mask: sample.mask,
            boxes,
            classes,
        });
    }

    // Pass 2: one feature grid per instance, drawn from the signature world.
    let get = |name: &str| needed.get(name).copied().unwrap_or(0).max(1);
    let feature_cfg = HierarchyConfig {
        counts: ClassCounts {
            neg: 1,
            gs: get("GS"),
            c: get("C"),
            ss: get("SS"),
            noa: get("NoA"),
        },
        ..cfg.clone()
    };
    let pool = hierarchy_dataset(&feature_cfg, seed.wrapping_add(0x9E37_79B9), 0.0)?;
    let mut by_class: BTreeMap<usize, Vec<Vec<Vec<f64>>>> = BTreeMap::new();
    for s in pool.samples.iter().rev() {
        by_class.entry(s.class5().index()).or_default().push(s.features.clone());
    }

    let mut scenes = Vec::with_capacity(n_scenes);
    for plan in planned {
        let mut gts = Vec::with_capacity(plan.boxes.len());
        for (&bx, &cls) in plan.boxes.iter().zip(&plan.classes) {
            let features = by_class
                .get_mut(&cls.index())
                .and_then(|v| v.pop())
                .ok_or_else(|| Error::validation("feature pool exhausted"))?;
            gts.push(GtInstance { bx, cls, features });
        }
        scenes.push(TwoStageScene {
            scene_id: plan.scene_id,
            gt_mask: plan.mask.clone(),
            seg_map: plan.mask,
            gts,
        });
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// Serialization helpers
// ---------------------------------------------------------------------------

/// Detection records as JSON lines, one record per line.
pub fn records_to_jsonl(records: &[DetectionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSON-lines detection records, rejecting Neg-class entries.
pub fn records_from_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("record line {}: {e}", i + 1)))?;
        if r.cls == Class5::Neg {
            return Err(Error::validation(format!(
                "record line {}: Neg is not a detection class",
                i + 1
            )));
        }
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::validation(format!(
                "record line {}: confidence {} outside [0, 1]",
                i + 1,
                r.confidence
            )));
        }
        records.push(r);
    }
    Ok(records)
}

/// Confusion matrix as CSV with class-name headers and row labels.
pub fn confusion_to_csv(confusion: &[Vec<usize>]) -> Result<String> {
    if confusion.len() != 5 || confusion.iter().any(|r| r.len() != 5) {
        return Err(Error::validation("confusion CSV expects a 5x5 matrix"));
    }
    let mut out = String::from("truth");
    for cls in Class5::ALL {
        out.push(',');
        out.push_str(cls.name());
    }
    out.push('\n');
    for (i, cls) in Class5::ALL.iter().enumerate() {
        out.push_str(cls.name());
        for v in &confusion[i] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Rank-sum test
// ---------------------------------------------------------------------------

/// How [`rank_sum_test_mode`] computes its p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankSumMode {
    /// Exact for pooled sizes ≤ 12, approximate above.
    Auto,
    Exact,
    Approximate,
}

/// Two-sided Mann-Whitney U test (see [`rank_sum_test_mode`] with `Auto`).
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<f64> {
    rank_sum_test_mode(a, b, RankSumMode::Auto)
}

/// Midranks of the pooled values (average rank across ties, 1-based).
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let n = pooled.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Positions i..=j share the value; each gets the mean rank.
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Mann-Whitney U p-value for two independent samples.
///
/// Ties are handled with midranks. The exact mode enumerates every
/// assignment of the pooled values to the two groups and counts assignments
/// whose centered U statistic is at least as extreme as observed; the
/// approximate mode uses the normal approximation with tie and continuity
/// corrections. Identical pooled values give p = 1.0.
pub fn rank_sum_test_mode(a: &[f64], b: &[f64], mode: RankSumMode) -> Result<f64> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::validation(format!(
            "rank-sum test needs at least 3 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::validation("rank-sum test: non-finite value"));
    }
    let n_a = a.len();
    let n_b = b.len();
    let n = n_a + n_b;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    if pooled.iter().all(|&v| v == pooled[0]) {
        return Ok(1.0);
    }
    let ranks = midranks(&pooled);
    let r_a: f64 = ranks[..n_a].iter().sum();
    let u_a = r_a - (n_a * (n_a + 1)) as f64 / 2.0;
    let nm = (n_a * n_b) as f64;
    let u_min = u_a.min(nm - u_a);

    let exact = match mode {
        RankSumMode::Exact => true,
        RankSumMode::Approximate => false,
        RankSumMode::Auto => n <= 12,
    };
    if exact {
        // Enumerate every choice of n_a pooled positions for group a.
        let mut extreme = 0usize;
        let mut total = 0usize;
        let mut combo: Vec<usize> = (0..n_a).collect();
        loop {
            total += 1;
            let r: f64 = combo.iter().map(|&i| ranks[i]).sum();
            let u = r - (n_a * (n_a + 1)) as f64 / 2.0;
            if u.min(nm - u) <= u_min + 1e-9 {
                extreme += 1;
            }
            // Advance to the next combination in lexicographic order.
            let mut k = n_a;
            loop {
                if k == 0 {
                    return Ok(extreme as f64 / total as f64);
                }
                k -= 1;
                if combo[k] < n - (n_a - k) {
                    combo[k] += 1;
                    for j in k + 1..n_a {
                        combo[j] = combo[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    // Normal approximation with tie correction.
    let mean_u = nm / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let var_u = nm / 12.0 * (nf + 1.0 - tie_term / (nf * (nf - 1.0)));
    if var_u <= 0.0 {
        return Ok(1.0);
    }
    let z = (u_min - mean_u + 0.5) / var_u.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((2.0 * normal.cdf(z)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier::TrainConfig;
    use crate::losses::{dice_loss, direct_fit, LossConfig, LossId};
    use crate::synthgen::{hierarchy_dataset, ClassCounts};

    fn mask_from(rows: &[&str]) -> Pixmap {
        let h = rows.len();
        let w = rows[0].len();
        let mut m = Pixmap::zeros(w, h).unwrap();
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                if ch == '#' {
                    m.set(x, y, 1.0);
                }
            }
        }
        m
    }

    // --- dice score ---

    #[test]
    fn dice_identical_and_disjoint() {
        let a = mask_from(&["##..", "##..", "....", "...."]);
        let b = mask_from(&["..##", "..##", "....", "...."]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_hand_case_half() {
        // |P∩G| = 2, |P| = |G| = 4 → 2·2 / 8 = 0.5.
        let p = mask_from(&["####", "....", "....", "...."]);
        let g = mask_from(&["..##", "##..", "....", "...."]);
        assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn dice_empty_masks_agree() {
        let e = Pixmap::zeros(4, 4).unwrap();
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        let other = Pixmap::zeros(3, 4).unwrap();
        assert!(dice_score(&e, &other).is_err());
    }

    #[test]
    fn dice_score_complements_dice_loss_at_zero_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut p = Pixmap::zeros(9, 7).unwrap();
            let mut g = Pixmap::zeros(9, 7).unwrap();
            for v in p.data_mut() {
                *v = if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 };
            }
            for v in g.data_mut() {
                *v = if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 };
            }
            if p.data().iter().chain(g.data()).all(|&v| v == 0.0) {
                continue;
            }
            let score = dice_score(&p, &g).unwrap();
            let loss = dice_loss(&p, &g, 0.0).unwrap().value;
            assert!((score - (1.0 - loss)).abs() < 1e-12);
        }
    }

    // --- box iou ---

    #[test]
    fn iou_identical_disjoint_and_offset() {
        let a = (2, 3, 5, 7);
        assert_eq!(box_iou(a, a), 1.0);
        assert_eq!(box_iou(a, (10, 3, 12, 7)), 0.0);
        // 2×2 boxes offset by half their width: 2 / 6.
        let got = box_iou((0, 0, 1, 1), (1, 0, 2, 1));
        assert!((got - 1.0 / 3.0).abs() < 1e-15);
    }

    /// Counts pixels inside an inclusive box on an actual grid.
    fn rasterized_iou(a: Box4, b: Box4) -> f64 {
        let w = a.2.max(b.2) + 1;
        let h = a.3.max(b.3) + 1;
        let mut inter = 0usize;
        let mut union = 0usize;
        for y in 0..h {
            for x in 0..w {
                let in_a = x >= a.0 && x <= a.2 && y >= a.1 && y <= a.3;
                let in_b = x >= b.0 && x <= b.2 && y >= b.1 && y <= b.3;
                inter += (in_a && in_b) as usize;
                union += (in_a || in_b) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_matches_pixel_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| -> Box4 {
                let x0 = rng.gen_range(0..12);
                let y0 = rng.gen_range(0..12);
                (x0, y0, x0 + rng.gen_range(0..6), y0 + rng.gen_range(0..6))
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(box_iou(a, b), rasterized_iou(a, b));
        }
    }

    // --- accuracy ---

    #[test]
    fn accuracy_diagonal_and_hand_case() {
        let diag = vec![vec![3, 0], vec![0, 7]];
        assert_eq!(accuracy(&diag).unwrap(), (1.0, 1.0));
        // Truth counts (90, 10), predictions all class 0.
        let skew = vec![vec![90, 0], vec![10, 0]];
        let (micro, macro_) = accuracy(&skew).unwrap();
        assert!((micro - 0.9).abs() < 1e-12);
        assert!((macro_ - 0.5).abs() < 1e-12);
    }

    #[test]
    fn accuracy_micro_equals_macro_when_balanced() {
        let c = vec![vec![8, 2], vec![2, 8]];
        let (micro, macro_) = accuracy(&c).unwrap();
        assert!((micro - macro_).abs() < 1e-12);
    }

    #[test]
    fn accuracy_skips_empty_classes_and_validates() {
        let c = vec![vec![5, 0, 0], vec![1, 4, 0], vec![0, 0, 0]];
        let (_, macro_) = accuracy(&c).unwrap();
        assert!((macro_ - (1.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!(accuracy(&[]).is_err());
        assert!(accuracy(&[vec![1, 2]]).is_err());
        assert!(accuracy(&[vec![0]]).is_err());
    }

    // --- average precision ---

    fn rec(scene: &str, bx: Box4, cls: Class5, conf: f64) -> DetectionRecord {
        DetectionRecord { scene_id: scene.into(), bx, cls, confidence: conf }
    }

    fn gt(scene: &str, bx: Box4, cls: Class5) -> GtBox {
        GtBox { scene_id: scene.into(), bx, cls }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![gt("a", (0, 0, 9, 9), Class5::C), gt("b", (5, 5, 14, 14), Class5::C)];
        let preds = vec![
            rec("a", (0, 0, 9, 9), Class5::C, 0.9),
            rec("b", (5, 5, 14, 14), Class5::C, 0.8),
        ];
        let ap = average_precision(&preds, &gts, Class5::C, 0.5).unwrap().unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn no_predictions_scores_zero_and_no_gts_is_absent() {
        let gts = vec![gt("a", (0, 0, 9, 9), Class5::Ss)];
        assert_eq!(average_precision(&[], &gts, Class5::Ss, 0.5).unwrap(), Some(0.0));
        assert_eq!(average_precision(&[], &gts, Class5::C, 0.5).unwrap(), None);
    }

    #[test]
    fn hand_case_hit_then_miss_vs_miss_then_hit() {
        let gts = vec![gt("a", (0, 0, 9, 9), Class5::NoA)];
        let hit = rec("a", (0, 0, 9, 9), Class5::NoA, 0.0);
        let miss = rec("a", (30, 30, 39, 39), Class5::NoA, 0.0);

        let mut first_hit = vec![hit.clone(), miss.clone()];
        first_hit[0].confidence = 0.9;
        first_hit[1].confidence = 0.8;
        let ap = average_precision(&first_hit, &gts, Class5::NoA, 0.5).unwrap().unwrap();
        assert_eq!(ap, 1.0);

        let mut first_miss = vec![miss, hit];
        first_miss[0].confidence = 0.9;
        first_miss[1].confidence = 0.8;
        let ap = average_precision(&first_miss, &gts, Class5::NoA, 0.5).unwrap().unwrap();
        assert_eq!(ap, 0.5);
    }

    /// Independent AP oracle: re-matches each confidence prefix from scratch
    /// and integrates the envelope by brute-force maxima.
    fn brute_force_ap(preds: &[DetectionRecord], gts: &[GtBox], cls: Class5, thresh: f64) -> Option<f64> {
        let class_gts: Vec<&GtBox> = gts.iter().filter(|g| g.cls == cls).collect();
        if class_gts.is_empty() {
            return None;
        }
        let mut sorted: Vec<&DetectionRecord> = preds.iter().filter(|r| r.cls == cls).collect();
        sorted.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let match_prefix = |k: usize| -> (f64, f64) {
            let mut used = vec![false; class_gts.len()];
            let mut tp = 0usize;
            for pred in &sorted[..k] {
                let mut best: Option<(usize, f64)> = None;
                for (slot, g) in class_gts.iter().enumerate() {
                    if used[slot] || g.scene_id != pred.scene_id {
                        continue;
                    }
                    let iou = box_iou(g.bx, pred.bx);
                    if iou >= thresh && best.map_or(true, |(_, bi)| iou > bi) {
                        best = Some((slot, iou));
                    }
                }
                if let Some((slot, _)) = best {
                    used[slot] = true;
                    tp += 1;
                }
            }
            (tp as f64 / class_gts.len() as f64, tp as f64 / k as f64)
        };
        let points: Vec<(f64, f64)> = (1..=sorted.len()).map(match_prefix).collect();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..points.len() {
            if points[i].0 > prev {
                let env = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
                ap += (points[i].0 - prev) * env;
                prev = points[i].0;
            }
        }
        Some(ap)
    }

    fn random_micro_instance(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<DetectionRecord>, Vec<GtBox>) {
        let scenes = ["s0", "s1"];
        let mk_box = |rng: &mut ChaCha8Rng| -> Box4 {
            let x0 = rng.gen_range(0..10);
            let y0 = rng.gen_range(0..10);
            (x0, y0, x0 + rng.gen_range(2..8), y0 + rng.gen_range(2..8))
        };
        let n_gt = rng.gen_range(1..=3);
        let gts: Vec<GtBox> = (0..n_gt)
            .map(|_| gt(scenes[rng.gen_range(0..2)], mk_box(rng), Class5::Gs))
            .collect();
        let n_pred = rng.gen_range(0..=6);
        let preds: Vec<DetectionRecord> = (0..n_pred)
            .map(|_| {
                // Half the predictions hover near a GT box, half are random.
                let bx = if rng.gen::<bool>() && !gts.is_empty() {
                    let base = gts[rng.gen_range(0..gts.len())].bx;
                    let dx = rng.gen_range(0..3);
                    (base.0 + dx, base.1, base.2 + dx, base.3)
                } else {
                    mk_box(rng)
                };
                rec(scenes[rng.gen_range(0..2)], bx, Class5::Gs, rng.gen_range(0.0..1.0))
            })
            .collect();
        (preds, gts)
    }

    #[test]
    fn ap_matches_brute_force_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..200 {
            let (preds, gts) = random_micro_instance(&mut rng);
            let fast = average_precision(&preds, &gts, Class5::Gs, 0.5).unwrap();
            let slow = brute_force_ap(&preds, &gts, Class5::Gs, 0.5);
            match (fast, slow) {
                (Some(f), Some(s)) => assert!((f - s).abs() < 1e-12, "case {i}: {f} vs {s}"),
                (None, None) => {}
                other => panic!("case {i}: presence mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn ap_invariant_under_monotone_confidence_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (mut preds, gts) = random_micro_instance(&mut rng);
            let before = average_precision(&preds, &gts, Class5::Gs, 0.5).unwrap();
            for p in preds.iter_mut() {
                p.confidence = 0.1 + 0.8 * p.confidence * p.confidence;
            }
            let after = average_precision(&preds, &gts, Class5::Gs, 0.5).unwrap();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn duplicate_matched_prediction_cannot_raise_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (mut preds, gts) = random_micro_instance(&mut rng);
            let before = average_precision(&preds, &gts, Class5::Gs, 0.5).unwrap();
            // Duplicate the box of some existing prediction at the bottom of
            // the ranking: it can only match an already-taken GT.
            if preds.is_empty() {
                continue;
            }
            let lowest = preds
                .iter()
                .map(|p| p.confidence)
                .fold(f64::INFINITY, f64::min);
            let mut dup = preds[rng.gen_range(0..preds.len())].clone();
            dup.confidence = lowest / 2.0;
            preds.push(dup);
            let after = average_precision(&preds, &gts, Class5::Gs, 0.5).unwrap();
            assert!(after.unwrap() <= before.unwrap() + 1e-15);
        }
    }

    // --- map50 ---

    #[test]
    fn map_is_mean_of_present_class_aps() {
        let gts = vec![
            gt("a", (0, 0, 9, 9), Class5::C),
            gt("a", (20, 0, 29, 9), Class5::Ss),
            gt("b", (0, 0, 9, 9), Class5::Ss),
        ];
        let preds = vec![
            rec("a", (0, 0, 9, 9), Class5::C, 0.9),
            rec("a", (20, 0, 29, 9), Class5::Ss, 0.8),
        ];
        let (map, per_class) = map50(&preds, &gts, &DETECTION_CLASSES, 0.5).unwrap();
        // C: perfect → 1.0. SS: one of two GTs found → AP 0.5. NoA/GS absent.
        assert_eq!(per_class.len(), 2);
        let compose = (per_class["C"] + per_class["SS"]) / 2.0;
        assert_eq!(map, compose);
        let ap_c = average_precision(&preds, &gts, Class5::C, 0.5).unwrap().unwrap();
        let ap_ss = average_precision(&preds, &gts, Class5::Ss, 0.5).unwrap().unwrap();
        assert_eq!(per_class["C"], ap_c);
        assert_eq!(per_class["SS"], ap_ss);
        assert_eq!(map, (ap_c + ap_ss) / 2.0);
    }

    #[test]
    fn single_class_map_equals_its_ap() {
        let gts = vec![gt("a", (0, 0, 9, 9), Class5::NoA)];
        let preds = vec![rec("a", (1, 0, 10, 9), Class5::NoA, 0.7)];
        let (map, per_class) = map50(&preds, &gts, &DETECTION_CLASSES, 0.5).unwrap();
        assert_eq!(per_class.len(), 1);
        assert_eq!(map, per_class["NoA"]);
    }

    // --- two-stage pipeline ---

    fn oracle_scene_set(n: usize, seed: u64) -> Vec<TwoStageScene> {
        let cfg = HierarchyConfig { g: 4, d0: 6, ..HierarchyConfig::default() };
        synthetic_scenes(n, &cfg, seed, 96, 96).unwrap()
    }

    #[test]
    fn oracle_pipeline_is_perfect() {
        let scenes = oracle_scene_set(20, 10);
        let (records, report) = run_two_stage(&scenes, &OracleClassifier, 100, 0.5).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.dice, 1.0);
        assert_eq!(report.acc_micro, 1.0);
        assert_eq!(report.acc_macro, 1.0);
        assert_eq!(report.n_classifier_failures, 0);
        for (i, row) in report.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(v, 0, "off-diagonal confusion at ({i}, {j})");
                }
            }
        }
        let n_gts: usize = scenes.iter().map(|s| s.gts.len()).sum();
        assert_eq!(records.len(), n_gts);
    }

    #[test]
    fn empty_seg_maps_give_zero_records_and_zero_map() {
        let mut scenes = oracle_scene_set(3, 11);
        for s in scenes.iter_mut() {
            s.seg_map = Pixmap::zeros(s.seg_map.width(), s.seg_map.height()).unwrap();
        }
        let (records, report) = run_two_stage(&scenes, &OracleClassifier, 100, 0.5).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.map, 0.0);
        assert!(report.dice < 1.0);
        assert_eq!(report.acc_micro, 0.0);
    }

    #[test]
    fn record_count_equals_surviving_instance_count() {
        for seed in [12, 13, 14] {
            let scenes = oracle_scene_set(5, seed);
            let (records, _) = run_two_stage(&scenes, &OracleClassifier, 100, 0.5).unwrap();
            let expected: usize = scenes
                .iter()
                .map(|s| connected_components(&s.seg_map, 0.5).filter_tiny(100).n())
                .sum();
            assert_eq!(records.len(), expected);
        }
    }

    struct FailingClassifier;
    impl InstanceClassifier for FailingClassifier {
        fn classify(&self, _: &TwoStageScene, _: Box4) -> Result<(Class5, f64)> {
            Err(Error::validation("deliberate failure"))
        }
    }

    struct NegClassifier;
    impl InstanceClassifier for NegClassifier {
        fn classify(&self, _: &TwoStageScene, _: Box4) -> Result<(Class5, f64)> {
            Ok((Class5::Neg, 0.7))
        }
    }

    #[test]
    fn classifier_failures_are_counted_neg_drops_are_not() {
        let scenes = oracle_scene_set(4, 15);
        let n_inst: usize = scenes
            .iter()
            .map(|s| connected_components(&s.seg_map, 0.5).filter_tiny(100).n())
            .sum();

        let (records, report) = run_two_stage(&scenes, &FailingClassifier, 100, 0.5).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.n_classifier_failures, n_inst);

        let (records, report) = run_two_stage(&scenes, &NegClassifier, 100, 0.5).unwrap();
        assert!(records.is_empty());
        assert_eq!(report.n_classifier_failures, 0);
        // Neg predictions still register as classification errors.
        let neg_col: usize = report.confusion.iter().map(|r| r[0]).sum();
        assert_eq!(neg_col, n_inst);
    }

    #[test]
    fn model_classifier_runs_end_to_end_and_is_deterministic() {
        let cfg = HierarchyConfig {
            counts: ClassCounts { neg: 10, gs: 8, c: 6, ss: 6, noa: 8 },
            g: 4,
            d0: 6,
            ..HierarchyConfig::default()
        };
        let ds = hierarchy_dataset(&cfg, 20, 0.0).unwrap();
        let tc = TrainConfig { epochs: 3, seed: 21, d1: 8, d2: 4, ..TrainConfig::default() };
        let (params, _) = crate::hier::train(&ds, &tc).unwrap();
        let scenes = synthetic_scenes(6, &cfg, 22, 96, 96).unwrap();
        let classifier = ModelClassifier { params: &params };
        let (r1, rep1) = run_two_stage(&scenes, &classifier, 100, 0.5).unwrap();
        let (r2, rep2) = run_two_stage(&scenes, &classifier, 100, 0.5).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(rep1.to_json().unwrap(), rep2.to_json().unwrap());
        assert!((0.0..=1.0).contains(&rep1.map));
    }

    #[test]
    fn pipeline_with_fitted_masks_stays_consistent() {
        // Degrade one scene's map through an actual optimization run and
        // check the Dice drop is reflected while the report stays valid.
        let mut scenes = oracle_scene_set(2, 16);
        let spec = SceneSpec {
            width: 96,
            height: 96,
            objects: vec![(30.0, 30.0, 12.0), (66.0, 60.0, 14.0)],
            seed: 3,
        };
        let scene = circle_scene(&spec).unwrap();
        let (probs, _) =
            direct_fit(&scene, LossId::Dice, 40, 2.0, 0, &LossConfig::default()).unwrap();
        scenes[0].seg_map = probs;
        scenes[0].gt_mask = scene.mask.clone();
        scenes[0].gts = vec![
            GtInstance { bx: (18, 18, 42, 42), cls: Class5::Gs, features: vec![] },
            GtInstance { bx: (52, 46, 80, 74), cls: Class5::C, features: vec![] },
        ];
        let (_, report) = run_two_stage(&scenes, &OracleClassifier, 50, 0.5).unwrap();
        assert!(report.dice > 0.0 && report.dice <= 1.0);
        assert!(report.map <= 1.0);
    }

    // --- serialization ---

    #[test]
    fn records_round_trip_jsonl() {
        let records = vec![
            rec("scene000", (3, 4, 10, 12), Class5::Gs, 0.75),
            rec("scene001", (0, 0, 5, 5), Class5::NoA, 1.0),
        ];
        let text = records_to_jsonl(&records).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["scene_id"], "scene000");
        assert_eq!(first["cls"], "GS");
        assert_eq!(first["box"][2], 10);
        let back = records_from_jsonl(&text).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn jsonl_rejects_neg_and_bad_confidence() {
        let neg = r#"{"scene_id":"a","box":[0,0,1,1],"cls":"Neg","confidence":0.5}"#;
        assert!(records_from_jsonl(neg).is_err());
        let wild = r#"{"scene_id":"a","box":[0,0,1,1],"cls":"GS","confidence":1.5}"#;
        assert!(records_from_jsonl(wild).is_err());
        assert!(records_from_jsonl("not json\n").is_err());
        assert_eq!(records_from_jsonl("\n\n").unwrap().len(), 0);
    }

    #[test]
    fn confusion_csv_layout() {
        let mut confusion = vec![vec![0usize; 5]; 5];
        confusion[1][1] = 4;
        confusion[2][4] = 1;
        let csv = confusion_to_csv(&confusion).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "truth,Neg,GS,C,SS,NoA");
        assert_eq!(lines[2], "GS,0,4,0,0,0");
        assert_eq!(lines[3], "C,0,0,0,0,1");
        assert_eq!(lines.len(), 6);
        assert!(confusion_to_csv(&[vec![1]]).is_err());
    }

    // --- rank-sum test ---

    #[test]
    fn identical_samples_give_p_one() {
        let a = [2.0, 2.0, 2.0];
        assert_eq!(rank_sum_test(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn separated_triples_give_exact_tenth() {
        let p = rank_sum_test(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert!((p - 0.1).abs() < 1e-12);
    }

    /// Independent oracle: enumerates group assignments and computes U by
    /// direct pairwise comparison (no midranks).
    fn permutation_oracle(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let n = pooled.len();
        let n_a = a.len();
        let pairwise_u = |xs: &[f64], ys: &[f64]| -> f64 {
            let mut u = 0.0;
            for &x in xs {
                for &y in ys {
                    if x > y {
                        u += 1.0;
                    } else if x == y {
                        u += 0.5;
                    }
                }
            }
            u
        };
        let u_obs = pairwise_u(a, b);
        let nm = (n_a * (n - n_a)) as f64;
        let stat_obs = u_obs.min(nm - u_obs);
        let mut extreme = 0usize;
        let mut total = 0usize;
        // Iterate subsets of size n_a via bitmasks, small n only.
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n_a {
                continue;
            }
            let xs: Vec<f64> =
                (0..n).filter(|i| mask & (1 << i) != 0).map(|i| pooled[i]).collect();
            let ys: Vec<f64> =
                (0..n).filter(|i| mask & (1 << i) == 0).map(|i| pooled[i]).collect();
            let u = pairwise_u(&xs, &ys);
            if u.min(nm - u) <= stat_obs + 1e-9 {
                extreme += 1;
            }
            total += 1;
        }
        extreme as f64 / total as f64
    }

    #[test]
    fn exact_mode_matches_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let n_a = rng.gen_range(3..=5);
            let n_b = rng.gen_range(3..=5);
            // Coarse grid so ties actually occur.
            let a: Vec<f64> = (0..n_a).map(|_| rng.gen_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..n_b).map(|_| rng.gen_range(0..6) as f64).collect();
            let fast = rank_sum_test_mode(&a, &b, RankSumMode::Exact).unwrap();
            let slow = permutation_oracle(&a, &b);
            assert!((fast - slow).abs() < 1e-12, "{a:?} vs {b:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn exact_and_approximate_agree_at_pool_size_twelve() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let exact = rank_sum_test_mode(&a, &b, RankSumMode::Exact).unwrap();
            let approx = rank_sum_test_mode(&a, &b, RankSumMode::Approximate).unwrap();
            assert!(
                (exact - approx).abs() < 0.02,
                "exact {exact} vs approx {approx} for {a:?} {b:?}"
            );
        }
    }

    #[test]
    fn auto_mode_switches_on_pool_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(
            rank_sum_test(&a, &b).unwrap(),
            rank_sum_test_mode(&a, &b, RankSumMode::Exact).unwrap()
        );
        let big_a: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
        let big_b: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(
            rank_sum_test(&big_a, &big_b).unwrap(),
            rank_sum_test_mode(&big_a, &big_b, RankSumMode::Approximate).unwrap()
        );
    }

    #[test]
    fn rank_sum_validates_inputs() {
        assert!(rank_sum_test(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(rank_sum_test(&[1.0, 2.0, f64::NAN], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn rank_sum_detects_strong_separation() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..20).map(|i| 100.0 + i as f64).collect();
        let p = rank_sum_test(&a, &b).unwrap();
        assert!(p < 1e-6, "p = {p}");
        // Same distribution → comfortably non-significant.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let d: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!(rank_sum_test(&c, &d).unwrap() > 0.01);
    }

    // --- synthetic scenes ---

    #[test]
    fn synthetic_scenes_are_deterministic_and_well_formed() {
        let cfg = HierarchyConfig { g: 4, d0: 6, ..HierarchyConfig::default() };
        let a = synthetic_scenes(5, &cfg, 40, 96, 96).unwrap();
        let b = synthetic_scenes(5, &cfg, 40, 96, 96).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.scene_id, y.scene_id);
            assert_eq!(x.gt_mask.data(), y.gt_mask.data());
            assert_eq!(x.gts.len(), y.gts.len());
            for (gx, gy) in x.gts.iter().zip(&y.gts) {
                assert_eq!(gx.bx, gy.bx);
                assert_eq!(gx.cls, gy.cls);
                assert_eq!(gx.features, gy.features);
            }
        }
        for scene in &a {
            assert!(!scene.gts.is_empty());
            let inst = connected_components(&scene.gt_mask, 0.5);
            assert_eq!(inst.n(), scene.gts.len());
            for gt in &scene.gts {
                assert_ne!(gt.cls, Class5::Neg);
                assert_eq!(gt.features.len(), 4);
                assert_eq!(gt.features[0].len(), 6);
            }
        }
        let c = synthetic_scenes(5, &cfg, 41, 96, 96).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.gt_mask.data() != y.gt_mask.data()));
    }
}
