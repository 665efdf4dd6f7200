//! Implementations of the `glomkit` subcommands.
//!
//! Each command resolves its configuration (JSON file over defaults), runs
//! one core pipeline stage, writes its artifacts into the output directory,
//! and finishes with a `manifest.json` recording the command name, toolkit
//! version, seed, fully resolved configuration, and the list of files
//! written. Nothing here depends on wall-clock time, so identical
//! invocations produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use glomkit_core::eval::{
    run_two_stage, synthetic_scenes, GtBox, InstanceClassifier, ModelClassifier, OracleClassifier,
};
use glomkit_core::hier::{history_to_csv, train as train_model, ModelParams, TrainConfig};
use glomkit_core::losses::{direct_fit, evaluate, fd_gradient_check, LossConfig, LossId};
use glomkit_core::pixmap::Pixmap;
use glomkit_core::synthgen::{
    circle_scene, displaced_scene, hierarchy_dataset, HierarchyConfig, SceneMeta, SceneSpec,
    ToyDataset,
};
use glomkit_core::uncertainty::reconstitute as reconstitute_dataset;
use glomkit_core::Error;

use crate::{CliError, CliResult, CommonArgs};

/// Run manifest written alongside every command's outputs.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: Value,
    outputs: Vec<String>,
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config: Value,
    outputs: Vec<String>,
) -> CliResult<()> {
    let manifest =
        Manifest { command, version: env!("CARGO_PKG_VERSION"), seed, config, outputs };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n";
    fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

/// Loads `path` as JSON, or falls back to `T::default()` when no config was
/// given. File and parse errors surface as core IO/JSON errors (exit 2).
fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text).map_err(Error::from)?)
        }
        None => Ok(T::default()),
    }
}

/// Like [`load_config`] but for commands that cannot run on defaults.
fn require_config<T: DeserializeOwned>(path: &Option<PathBuf>, command: &str) -> CliResult<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text).map_err(Error::from)?)
        }
        None => Err(CliError::Usage(format!("{command} requires --config, see --help"))),
    }
}

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_text(out: &Path, name: &str, text: &str) -> CliResult<()> {
    fs::write(out.join(name), text)?;
    Ok(())
}

fn config_value<T: Serialize>(cfg: &T) -> CliResult<Value> {
    Ok(serde_json::to_value(cfg).map_err(Error::from)?)
}

/// Pixel-wise IoU of two probability maps binarized at 0.5. Two empty masks
/// count as IoU 1.
fn mask_iou(a: &Pixmap, b: &Pixmap) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&pa, &pb) in a.data().iter().zip(b.data()) {
        let fa = pa >= 0.5;
        let fb = pb >= 0.5;
        if fa && fb {
            inter += 1;
        }
        if fa || fb {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn parse_loss(name: &str) -> CliResult<LossId> {
    name.parse::<LossId>().map_err(|e| CliError::Usage(e.to_string()))
}

// ---------------------------------------------------------------------------
// gen

/// Config for `gen`. `kind` selects the artifact family:
/// `"dataset"` (feature-vector dataset), `"scenes"` (detection scenes with
/// ground-truth boxes), or `"scene"` (a single disc scene).
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub kind: String,
    pub hierarchy: HierarchyConfig,
    pub noise_rate: f64,
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<(f64, f64, f64)>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            kind: "dataset".to_string(),
            hierarchy: HierarchyConfig::default(),
            noise_rate: 0.0,
            n_scenes: 8,
            width: 128,
            height: 128,
            objects: vec![(32.0, 32.0, 14.0), (88.0, 56.0, 18.0), (60.0, 96.0, 12.0)],
        }
    }
}

pub fn gen(common: &CommonArgs) -> CliResult<()> {
    let cfg: GenConfig = load_config(&common.config)?;
    ensure_out_dir(&common.out)?;
    let mut outputs = Vec::new();
    match cfg.kind.as_str() {
        "dataset" => {
            let ds = hierarchy_dataset(&cfg.hierarchy, common.seed, cfg.noise_rate)?;
            write_text(&common.out, "dataset.json", &ds.to_json()?)?;
            outputs.push("dataset.json".to_string());
        }
        "scenes" => {
            let scenes =
                synthetic_scenes(cfg.n_scenes, &cfg.hierarchy, common.seed, cfg.width, cfg.height)?;
            let mut gts = Vec::new();
            for scene in &scenes {
                let name = format!("{}_mask.pgm", scene.scene_id);
                scene.gt_mask.write_pgm(&common.out.join(&name))?;
                outputs.push(name);
                for gt in &scene.gts {
                    gts.push(GtBox {
                        scene_id: scene.scene_id.clone(),
                        bx: gt.bx,
                        cls: gt.cls,
                    });
                }
            }
            let mut jsonl = String::new();
            for gt in &gts {
                jsonl.push_str(&serde_json::to_string(&gt).map_err(Error::from)?);
                jsonl.push('\n');
            }
            write_text(&common.out, "gts.jsonl", &jsonl)?;
            outputs.push("gts.jsonl".to_string());
        }
        "scene" => {
            let spec = SceneSpec {
                width: cfg.width,
                height: cfg.height,
                objects: cfg.objects.clone(),
                seed: common.seed,
            };
            let sample = circle_scene(&spec)?;
            sample.image.write_pgm(&common.out.join("image.pgm"))?;
            sample.mask.write_pgm(&common.out.join("mask.pgm"))?;
            let meta = SceneMeta {
                spec,
                gtr: sample.gtr,
                size_class: sample.size_class,
                instances: sample.instances.summary(),
            };
            let text = serde_json::to_string_pretty(&meta).map_err(Error::from)? + "\n";
            write_text(&common.out, "meta.json", &text)?;
            outputs.extend(["image.pgm", "mask.pgm", "meta.json"].map(String::from));
        }
        other => {
            return Err(Error::validation(format!(
                "unknown gen kind {other:?}; expected \"dataset\", \"scenes\", or \"scene\""
            ))
            .into())
        }
    }
    write_manifest(&common.out, "gen", common.seed, config_value(&cfg)?, outputs)
}

// ---------------------------------------------------------------------------
// loss-sweep

/// Config for `loss-sweep`: the grid of target ratios and displacements, the
/// losses to evaluate, and the scene size.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSweepConfig {
    pub gtr_list: Vec<f64>,
    pub displacements: Vec<f64>,
    pub losses: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub loss_params: LossConfig,
}

impl Default for LossSweepConfig {
    fn default() -> Self {
        LossSweepConfig {
            gtr_list: vec![0.06, 0.30, 0.60],
            displacements: (0..=10).map(|i| (2 * i) as f64).collect(),
            losses: LossId::ALL.iter().map(|l| l.name().to_string()).collect(),
            width: 128,
            height: 128,
            loss_params: LossConfig::default(),
        }
    }
}

impl LossSweepConfig {
    /// Grid problems are invocation mistakes, so they map to exit 1.
    fn validate(&self) -> CliResult<Vec<LossId>> {
        if self.width < 32 || self.height < 32 {
            return Err(CliError::Usage(format!(
                "sweep scenes must be at least 32x32, got {}x{}",
                self.width, self.height
            )));
        }
        if self.gtr_list.is_empty() {
            return Err(CliError::Usage("gtr_list must not be empty".to_string()));
        }
        for &gtr in &self.gtr_list {
            if !gtr.is_finite() || gtr <= 0.0 || gtr >= 1.0 {
                return Err(CliError::Usage(format!(
                    "target ratios must lie strictly between 0 and 1, got {gtr}"
                )));
            }
        }
        if self.displacements.is_empty() {
            return Err(CliError::Usage("displacements must not be empty".to_string()));
        }
        for &d in &self.displacements {
            if !d.is_finite() || d < 0.0 {
                return Err(CliError::Usage(format!(
                    "displacements must be finite and non-negative, got {d}"
                )));
            }
        }
        if self.losses.is_empty() {
            return Err(CliError::Usage("losses must not be empty".to_string()));
        }
        self.losses.iter().map(|name| parse_loss(name)).collect()
    }
}

/// One precomputed grid point: the displaced prediction, the reference, and
/// their mask IoU.
struct GridPoint {
    gtr: f64,
    displacement: f64,
    iou: f64,
    pred: Pixmap,
    scene: glomkit_core::synthgen::SceneSample,
}

pub fn loss_sweep(common: &CommonArgs) -> CliResult<()> {
    let cfg: LossSweepConfig = load_config(&common.config)?;
    let losses = cfg.validate()?;
    ensure_out_dir(&common.out)?;

    let (w, h) = (cfg.width, cfg.height);
    let mut grid = Vec::new();
    for &gtr in &cfg.gtr_list {
        // Single disc, centered, sized so the foreground fraction equals gtr.
        let radius = (gtr * (w * h) as f64 / std::f64::consts::PI).sqrt();
        let spec = SceneSpec {
            width: w,
            height: h,
            objects: vec![(w as f64 / 2.0, h as f64 / 2.0, radius)],
            seed: common.seed,
        };
        let base = circle_scene(&spec)?;
        for &d in &cfg.displacements {
            let displaced = displaced_scene(&spec, (d, 0.0))?;
            let iou = mask_iou(&displaced.mask, &base.mask);
            grid.push(GridPoint {
                gtr,
                displacement: d,
                iou,
                pred: displaced.mask,
                scene: base.clone(),
            });
        }
    }

    let mut csv = String::from("loss_id,gtr,displacement,iou,value\n");
    for loss in &losses {
        for point in &grid {
            let result = evaluate(
                *loss,
                &point.pred,
                &point.scene.mask,
                &point.scene.instances,
                &cfg.loss_params,
            )?;
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                loss.name(),
                point.gtr,
                point.displacement,
                point.iou,
                result.value
            ));
        }
    }
    write_text(&common.out, "sweep.csv", &csv)?;
    write_manifest(
        &common.out,
        "loss-sweep",
        common.seed,
        config_value(&cfg)?,
        vec!["sweep.csv".to_string()],
    )
}

// ---------------------------------------------------------------------------
// fit-mask

/// Config for `fit-mask`: scene geometry plus the optimizer settings used to
/// fit a probability map to the scene's mask.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitMaskConfig {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<(f64, f64, f64)>,
    pub loss: String,
    pub steps: usize,
    pub learning_rate: f64,
    pub loss_params: LossConfig,
}

impl Default for FitMaskConfig {
    fn default() -> Self {
        FitMaskConfig {
            width: 128,
            height: 128,
            objects: vec![(32.0, 32.0, 14.0), (88.0, 56.0, 18.0), (60.0, 96.0, 12.0)],
            loss: "compound".to_string(),
            steps: 400,
            learning_rate: 800.0,
            loss_params: LossConfig::default(),
        }
    }
}

pub fn fit_mask(common: &CommonArgs) -> CliResult<()> {
    let cfg: FitMaskConfig = load_config(&common.config)?;
    let loss = parse_loss(&cfg.loss)?;
    ensure_out_dir(&common.out)?;
    let spec = SceneSpec {
        width: cfg.width,
        height: cfg.height,
        objects: cfg.objects.clone(),
        seed: common.seed,
    };
    let scene = circle_scene(&spec)?;
    let (probs, trace) = direct_fit(
        &scene,
        loss,
        cfg.steps,
        cfg.learning_rate,
        common.seed,
        &cfg.loss_params,
    )?;

    probs.write_raw_f64(&common.out.join("probs.f64"))?;
    probs.write_pgm(&common.out.join("probs.pgm"))?;
    scene.image.write_pgm(&common.out.join("image.pgm"))?;
    scene.mask.write_pgm(&common.out.join("mask.pgm"))?;
    let mut csv = String::from("step,dice\n");
    for (step, dice) in trace.iter().enumerate() {
        csv.push_str(&format!("{step},{dice}\n"));
    }
    write_text(&common.out, "trace.csv", &csv)?;

    let outputs = ["probs.f64", "probs.f64.json", "probs.pgm", "image.pgm", "mask.pgm", "trace.csv"]
        .map(String::from)
        .to_vec();
    write_manifest(&common.out, "fit-mask", common.seed, config_value(&cfg)?, outputs)
}

// ---------------------------------------------------------------------------
// train

/// Config for `train`: dataset generation parameters plus the trainer
/// settings. `--seed` controls dataset sampling; the optimizer's own seed
/// lives in `train.seed`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCliConfig {
    pub hierarchy: HierarchyConfig,
    pub noise_rate: f64,
    pub train: TrainConfig,
}

pub fn train(common: &CommonArgs, no_apportionment: bool) -> CliResult<()> {
    let mut cfg: TrainCliConfig = load_config(&common.config)?;
    if no_apportionment {
        cfg.train.apportionment = false;
    }
    ensure_out_dir(&common.out)?;
    let ds = hierarchy_dataset(&cfg.hierarchy, common.seed, cfg.noise_rate)?;
    let (params, history) = train_model(&ds, &cfg.train)?;

    write_text(&common.out, "dataset.json", &ds.to_json()?)?;
    write_text(&common.out, "model.json", &params.to_json()?)?;
    write_text(&common.out, "history.csv", &history_to_csv(&history))?;

    let outputs = ["dataset.json", "model.json", "history.csv"].map(String::from).to_vec();
    write_manifest(&common.out, "train", common.seed, config_value(&cfg)?, outputs)
}

// ---------------------------------------------------------------------------
// reconstitute

/// Config for `reconstitute`: where to read the dataset and the trained
/// model. Both are required, so this command insists on `--config`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstituteConfig {
    pub dataset: PathBuf,
    pub model: PathBuf,
}

pub fn reconstitute(common: &CommonArgs, threshold: f64) -> CliResult<()> {
    if !threshold.is_finite() {
        return Err(CliError::Usage(format!("--threshold must be finite, got {threshold}")));
    }
    let cfg: ReconstituteConfig = require_config(&common.config, "reconstitute")?;
    ensure_out_dir(&common.out)?;
    let ds = ToyDataset::from_json(&fs::read_to_string(&cfg.dataset)?)?;
    let params = ModelParams::from_json(&fs::read_to_string(&cfg.model)?)?;
    let (cleaned, report) = reconstitute_dataset(&ds, &params, threshold)?;

    write_text(&common.out, "d_c.json", &cleaned.to_json()?)?;
    write_text(&common.out, "report.json", &report.to_json()?)?;

    let mut config = config_value(&cfg)?;
    config
        .as_object_mut()
        .expect("config structs serialize to objects")
        .insert("threshold".to_string(), json!(threshold));
    let outputs = ["d_c.json", "report.json"].map(String::from).to_vec();
    write_manifest(&common.out, "reconstitute", common.seed, config, outputs)
}

// ---------------------------------------------------------------------------
// eval

/// Config for `eval`: evaluation-set geometry and, optionally, a trained
/// model to use as the stage-2 classifier (the label oracle runs otherwise).
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCliConfig {
    pub model: Option<PathBuf>,
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub hierarchy: HierarchyConfig,
    pub min_area: usize,
}

impl Default for EvalCliConfig {
    fn default() -> Self {
        EvalCliConfig {
            model: None,
            n_scenes: 20,
            width: 96,
            height: 96,
            hierarchy: HierarchyConfig::default(),
            min_area: 100,
        }
    }
}

pub fn eval(common: &CommonArgs, iou: f64) -> CliResult<()> {
    if !iou.is_finite() || iou <= 0.0 || iou > 1.0 {
        return Err(CliError::Usage(format!("--iou must lie in (0, 1], got {iou}")));
    }
    let cfg: EvalCliConfig = load_config(&common.config)?;
    ensure_out_dir(&common.out)?;
    let scenes = synthetic_scenes(cfg.n_scenes, &cfg.hierarchy, common.seed, cfg.width, cfg.height)?;

    let params = match &cfg.model {
        Some(path) => Some(ModelParams::from_json(&fs::read_to_string(path)?)?),
        None => None,
    };
    let oracle = OracleClassifier;
    let model_classifier = params.as_ref().map(|p| ModelClassifier { params: p });
    let classifier: &dyn InstanceClassifier = match &model_classifier {
        Some(mc) => mc,
        None => &oracle,
    };

    let (records, report) = run_two_stage(&scenes, classifier, cfg.min_area, iou)?;

    let mut gts_jsonl = String::new();
    for scene in &scenes {
        for gt in &scene.gts {
            let row = GtBox { scene_id: scene.scene_id.clone(), bx: gt.bx, cls: gt.cls };
            gts_jsonl.push_str(&serde_json::to_string(&row).map_err(Error::from)?);
            gts_jsonl.push('\n');
        }
    }
    write_text(&common.out, "records.jsonl", &glomkit_core::eval::records_to_jsonl(&records)?)?;
    write_text(&common.out, "gts.jsonl", &gts_jsonl)?;
    write_text(&common.out, "report.json", &report.to_json()?)?;
    write_text(
        &common.out,
        "confusion.csv",
        &glomkit_core::eval::confusion_to_csv(&report.confusion)?,
    )?;

    let mut config = config_value(&cfg)?;
    config
        .as_object_mut()
        .expect("config structs serialize to objects")
        .insert("iou".to_string(), json!(iou));
    let outputs =
        ["records.jsonl", "gts.jsonl", "report.json", "confusion.csv"].map(String::from).to_vec();
    write_manifest(&common.out, "eval", common.seed, config, outputs)
}

// ---------------------------------------------------------------------------
// gradcheck

/// Config for `gradcheck`: which seeds to probe, how many coordinates per
/// check, scene size, and the pass tolerance on the max relative error.
#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    pub n_coords: usize,
    pub width: usize,
    pub height: usize,
    pub tolerance: f64,
    pub loss_params: LossConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: vec![20, 21, 22],
            n_coords: 25,
            width: 16,
            height: 16,
            tolerance: 1e-3,
            loss_params: LossConfig::default(),
        }
    }
}

/// Summary written to `gradcheck.json`.
#[derive(Debug, Serialize)]
struct GradcheckReport {
    h: f64,
    tolerance: f64,
    max_error: std::collections::BTreeMap<String, f64>,
    pass: bool,
}

pub fn gradcheck(common: &CommonArgs, h: f64) -> CliResult<()> {
    if !h.is_finite() || h <= 0.0 {
        return Err(CliError::Usage(format!("--h must be positive and finite, got {h}")));
    }
    let cfg: GradcheckConfig = load_config(&common.config)?;
    if cfg.seeds.is_empty() {
        return Err(Error::validation("gradcheck needs at least one seed").into());
    }
    if !(cfg.tolerance.is_finite() && cfg.tolerance > 0.0) {
        return Err(Error::validation("tolerance must be positive and finite").into());
    }
    ensure_out_dir(&common.out)?;

    let (w, h_px) = (cfg.width, cfg.height);
    let min_dim = w.min(h_px) as f64;
    // Two disjoint discs so the instance-level terms see real boxes.
    let objects = vec![
        (w as f64 / 3.2, h_px as f64 / 3.2, min_dim / 5.0),
        (w as f64 * 2.0 / 3.0, h_px as f64 * 2.0 / 3.0, min_dim / 4.5),
    ];

    let mut max_error = std::collections::BTreeMap::new();
    for &loss in &LossId::ALL {
        let mut worst = 0.0f64;
        for &seed in &cfg.seeds {
            let spec = SceneSpec { width: w, height: h_px, objects: objects.clone(), seed };
            let scene = circle_scene(&spec)?;
            // Interior-valued prediction keeps clamps and min-kinks inactive.
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(7));
            let mut p = Pixmap::zeros(w, h_px)?;
            for v in p.data_mut() {
                *v = rng.gen_range(0.05..0.95);
            }
            let err = fd_gradient_check(
                loss,
                &p,
                &scene.mask,
                &scene.instances,
                &cfg.loss_params,
                h,
                cfg.n_coords,
                seed,
            )?;
            worst = worst.max(err);
        }
        println!("{}: max relative error {worst:.3e}", loss.name());
        max_error.insert(loss.name().to_string(), worst);
    }

    let pass = max_error.values().all(|e| e.is_finite() && *e < cfg.tolerance);
    let report = GradcheckReport { h, tolerance: cfg.tolerance, max_error, pass };
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    write_text(&common.out, "gradcheck.json", &text)?;

    let mut config = config_value(&cfg)?;
    config
        .as_object_mut()
        .expect("config structs serialize to objects")
        .insert("h".to_string(), json!(h));
    write_manifest(
        &common.out,
        "gradcheck",
        common.seed,
        config,
        vec!["gradcheck.json".to_string()],
    )?;

    if !report.pass {
        let (name, err) = report
            .max_error
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("max_error covers every loss");
        return Err(Error::numerical(format!(
            "gradient check failed: {name} max relative error {err:.3e} exceeds tolerance {}",
            report.tolerance
        ))
        .into());
    }
    Ok(())
}
