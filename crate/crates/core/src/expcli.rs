//! Experiment orchestration: the JSON experiment configuration,
//! content-addressed run directories, and the six pipeline commands —
//! `gen`, `train`, `eval`, `confusions`, `increment`, `report` — that the
//! command-line binary dispatches to.
//!
//! Layout produced under the configured output directory:
//!
//! ```text
//! <out_dir>/
//!   data/
//!     pretrain/  images/*.png  annotations.json  recipe.json
//!     test/      images/*.png  annotations.json  recipe.json
//!   runs/
//!     <hash12>/  config.json  checkpoint.ckpt  report.json
//!                confusion.csv  log.jsonl  record.json  [plan.json]
//! ```
//!
//! Each run directory is a self-contained reproduction unit. Its name is
//! the first 12 hex digits of the SHA-256 of `config.json` (the exact
//! effective configuration, seed and manifest included), and re-running
//! the same configuration reproduces `checkpoint.ckpt`, `report.json`,
//! `log.jsonl`, and `confusion.csv` byte for byte. `record.json` carries
//! timestamps and wall-clock duration and is the only file expected to
//! differ between identical reruns.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_model, save_model};
use crate::complosses::{LossWeights, SmoothingMode, SmoothingPolicy};
use crate::compspace::{CompositionSpace, Manifest, SplitSpec};
use crate::error::{Error, Result};
use crate::evalkit::{ConfusionMatrix, Detection, EvalParams, EvalReport, IouSweep};
use crate::incrementer::{
    build_increment_set, mine_confusions, model_confusions, run_increment, ConfusedPair,
    IncrementConfig, PromptComponents, Regime, ReportDeltas,
};
use crate::scenegen::{generate_dataset, load_dataset, write_dataset, Dataset, SceneSpec};
use crate::seeds::derive_seed;
use crate::tokenmodel::Model;
use crate::trainer::{evaluate_model, train, TrainConfig, TrainLog, TrainMask};

// ---------------------------------------------------------------------------
// configuration sections
// ---------------------------------------------------------------------------

/// Dataset generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub scene: SceneSpec,
    /// Instances per pretraining composition.
    pub pretrain_shots: usize,
    /// Instances per composition in the test set (which covers every
    /// composition).
    pub test_shots: usize,
    /// Instances per newly added composition in an increment round.
    pub increment_shots: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            pretrain_shots: 10,
            test_shots: 60,
            increment_shots: 10,
        }
    }
}

/// Optimization parameters; the run seed is supplied separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub bg_ratio: f64,
    pub match_iou: f64,
    pub max_grad_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            bg_ratio: d.bg_ratio,
            match_iou: d.match_iou,
            max_grad_norm: d.max_grad_norm,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            bg_ratio: self.bg_ratio,
            match_iou: self.match_iou,
            max_grad_norm: self.max_grad_norm,
            seed,
        }
    }
}

/// Target-assignment probabilities, without the mode (which lives next to
/// it in [`LossSection`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub p_c: f64,
    pub p_o: f64,
    pub p_a: f64,
    pub epsilon: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let d = SmoothingPolicy::default();
        Self {
            p_c: d.p_c,
            p_o: d.p_o,
            p_a: d.p_a,
            epsilon: d.epsilon,
        }
    }
}

/// Loss configuration: smoothing mode, target policy, and term weights.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub mode: SmoothingMode,
    pub policy: PolicySection,
    pub weights: LossWeights,
}

impl LossSection {
    pub fn smoothing_policy(&self) -> SmoothingPolicy {
        SmoothingPolicy {
            mode: self.mode,
            p_c: self.policy.p_c,
            p_o: self.policy.p_o,
            p_a: self.policy.p_a,
            epsilon: self.policy.epsilon,
        }
    }
}

/// Evaluation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub nms_iou: f64,
    pub sweep: IouSweep,
    /// Detector score below which raw detections are discarded.
    pub score_threshold: f64,
    /// IoU at which a surviving detection is matched to a ground-truth box
    /// when tabulating confusions.
    pub confusion_match_iou: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalParams::default();
        Self {
            nms_iou: d.nms_iou,
            sweep: d.sweep,
            score_threshold: 0.1,
            confusion_match_iou: 0.5,
        }
    }
}

impl EvalSection {
    pub fn params(&self) -> EvalParams {
        EvalParams {
            nms_iou: self.nms_iou,
            sweep: self.sweep,
        }
    }
}

/// Increment-round parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncrementSection {
    /// Row-normalized confusion rate at or above which a pair is mined.
    pub mining_threshold: f64,
    pub regime: Regime,
    pub components: PromptComponents,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for IncrementSection {
    fn default() -> Self {
        Self {
            mining_threshold: 0.2,
            regime: Regime::PromptOnly,
            components: PromptComponents::Both,
            epochs: 4000,
            lr: 15.0,
        }
    }
}

/// The complete experiment configuration, loaded from a single JSON
/// document. Relative `manifest` and `out_dir` paths resolve against the
/// directory containing the configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Embedding width of the token model.
    pub dim: usize,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub increment: IncrementSection,
}

impl Default for ExpConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            dim: 64,
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            eval: EvalSection::default(),
            increment: IncrementSection::default(),
        }
    }
}

impl ExpConfig {
    /// Reads and validates a configuration file, resolving relative paths
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: ExpConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if config.manifest.is_relative() {
            config.manifest = base.join(&config.manifest);
        }
        if config.out_dir.is_relative() {
            config.out_dir = base.join(&config.out_dir);
        }
        config.validate()?;
        Ok(config)
    }

    /// Checks every invariant that does not need the datasets on disk.
    pub fn validate(&self) -> Result<()> {
        if !self.manifest.is_file() {
            return Err(Error::Config(format!(
                "manifest {} does not exist",
                self.manifest.display()
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        self.resolve_manifest()?;
        self.train.to_config(self.seed).validate()?;
        self.loss.weights.validate()?;
        self.loss.smoothing_policy().validate()?;
        if !(0.0 < self.increment.mining_threshold && self.increment.mining_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "mining_threshold {} outside (0, 1]",
                self.increment.mining_threshold
            )));
        }
        Ok(())
    }

    /// Loads the manifest file and resolves it to a space and split.
    pub fn resolve_manifest(&self) -> Result<(Manifest, CompositionSpace, SplitSpec)> {
        let text = fs::read_to_string(&self.manifest)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", self.manifest.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse {}: {e}", self.manifest.display())))?;
        let (space, split) = manifest.resolve()?;
        Ok((manifest, space, split))
    }

    /// Directory a named dataset lives in.
    pub fn data_dir(&self, name: &str) -> PathBuf {
        self.out_dir.join("data").join(name)
    }

    /// Directory holding all run directories.
    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }
}

// ---------------------------------------------------------------------------
// component toggles (ablation grid)
// ---------------------------------------------------------------------------

/// The three independently switchable components. All off is the plain
/// auxiliary-token baseline; all on is the full anticipation stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub smoothing: bool,
    pub separation: bool,
    pub decorrelation: bool,
}

impl Toggles {
    pub fn baseline() -> Self {
        Self {
            smoothing: false,
            separation: false,
            decorrelation: false,
        }
    }

    pub fn full() -> Self {
        Self {
            smoothing: true,
            separation: true,
            decorrelation: true,
        }
    }

    /// Stable human-readable label; distinct for each of the 8 combinations.
    pub fn variant_label(&self) -> String {
        if *self == Self::baseline() {
            return "csp-baseline".to_string();
        }
        if *self == Self::full() {
            return "full-ca".to_string();
        }
        let mut parts = Vec::new();
        if self.smoothing {
            parts.push("smoothing");
        }
        if self.separation {
            parts.push("separation");
        }
        if self.decorrelation {
            parts.push("decorrelation");
        }
        parts.join("+")
    }

    /// Applies the toggles to the configured loss section: disabled
    /// components have their weights zeroed (or the smoothing mode dropped
    /// to one-hot targets).
    pub fn apply(&self, loss: &LossSection) -> (SmoothingPolicy, LossWeights) {
        let mut policy = loss.smoothing_policy();
        if !self.smoothing {
            policy.mode = SmoothingMode::None;
        }
        let w = &loss.weights;
        let weights = LossWeights {
            lambda1: if self.separation { w.lambda1 } else { 0.0 },
            lambda2: if self.separation { w.lambda2 } else { 0.0 },
            lambda3: if self.separation { w.lambda3 } else { 0.0 },
            lambda_h: if self.decorrelation { w.lambda_h } else { 0.0 },
        };
        (policy, weights)
    }

    /// Index of this combination in the 8-row grid (for stable ordering).
    pub fn grid_index(&self) -> usize {
        (self.smoothing as usize) << 2 | (self.separation as usize) << 1
            | self.decorrelation as usize
    }
}

// ---------------------------------------------------------------------------
// run records and snapshots
// ---------------------------------------------------------------------------

/// What kind of pipeline step produced a run directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Train,
    Increment,
}

/// The exact effective configuration of one run; `config.json` in the run
/// directory. Hashing this document names the directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub kind: RunKind,
    /// Grid label for training runs; `regime/components` for increments.
    pub variant: String,
    pub toggles: Toggles,
    pub seed: u64,
    /// Hash of the source training run (increment runs only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source_run: Option<String>,
    /// The increment plan executed (increment runs only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub plan: Option<IncrementPlan>,
    pub manifest: Manifest,
    pub config: ExpConfig,
}

/// Pointers to everything one run produced; `record.json` in the run
/// directory. The only file that may differ between byte-identical reruns
/// (it holds timestamps and wall-clock duration).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub manifest: Manifest,
    /// File names relative to the run directory.
    pub checkpoint: String,
    pub report: String,
    pub confusion: String,
    pub log: String,
    /// Milliseconds since the Unix epoch at completion time.
    pub created_unix_ms: u128,
    pub wall_ms: f64,
}

fn now_unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// First 12 hex digits of the SHA-256 of a serialized snapshot.
pub fn config_hash(snapshot: &RunSnapshot) -> Result<String> {
    let bytes = serde_json::to_vec(snapshot)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect::<String>()[..12].to_string())
}

fn write_pretty_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))
}

/// One JSON line per epoch: the epoch index plus the mean loss breakdown.
fn write_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut out = String::new();
    for note in &log.notes {
        out.push_str(&serde_json::to_string(&serde_json::json!({ "note": note }))?);
        out.push('\n');
    }
    for (epoch, b) in log.epochs.iter().enumerate() {
        let line = serde_json::json!({
            "epoch": epoch,
            "classification": b.classification,
            "l_distance": b.l_distance,
            "l_a": b.l_a,
            "l_o": b.l_o,
            "l_hsic": b.l_hsic,
            "total": b.total,
        });
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Creates the run directory for a snapshot, refusing to clobber an
/// existing one unless `force`. Returns `(hash, dir)`.
fn claim_run_dir(config: &ExpConfig, snapshot: &RunSnapshot, force: bool) -> Result<(String, PathBuf)> {
    let hash = config_hash(snapshot)?;
    let dir = config.runs_dir().join(&hash);
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "run {} already exists at {}; pass --force to overwrite",
                hash,
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    write_pretty_json(snapshot, &dir.join("config.json"))?;
    Ok((hash, dir))
}

/// Loads `record.json` and `config.json` from a run directory.
pub fn load_run(dir: &Path) -> Result<(RunRecord, RunSnapshot)> {
    let record: RunRecord = read_json(&dir.join("record.json"))?;
    let snapshot: RunSnapshot = read_json(&dir.join("config.json"))?;
    if config_hash(&snapshot)? != record.config_hash {
        return Err(Error::Config(format!(
            "run {} is corrupt: config.json does not hash to {}",
            dir.display(),
            record.config_hash
        )));
    }
    Ok((record, snapshot))
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Provenance note written next to each generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub name: String,
    pub seed: u64,
    pub shots: usize,
    pub compositions: Vec<String>,
    pub scene: SceneSpec,
    pub images: usize,
    pub instances: usize,
    /// SHA-256 over every image's raw RGB bytes followed by
    /// `annotations.json`; regeneration must reproduce it exactly.
    pub content_sha256: String,
}

/// Instance and image counts from one `gen` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSummary {
    pub pretrain: DatasetRecipe,
    pub test: DatasetRecipe,
}

fn dataset_content_hash(dataset: &Dataset, annotations_json: &[u8]) -> String {
    let mut hasher = Sha256::new();
    for image in &dataset.images {
        hasher.update(image.pixels());
    }
    hasher.update(annotations_json);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_named_dataset(
    config: &ExpConfig,
    space: &CompositionSpace,
    name: &str,
    compositions: &[usize],
    shots: usize,
    seed: u64,
    force: bool,
) -> Result<DatasetRecipe> {
    let dir = config.data_dir(name);
    if dir.join("annotations.json").exists() && !force {
        return Err(Error::Config(format!(
            "dataset already exists at {}; pass --force to regenerate",
            dir.display()
        )));
    }
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let dataset = generate_dataset(space, compositions, shots, &config.dataset.scene, seed)?;
    write_dataset(&dataset, space, &dir)?;
    let annotations = fs::read(dir.join("annotations.json"))?;
    let recipe = DatasetRecipe {
        name: name.to_string(),
        seed,
        shots,
        compositions: compositions
            .iter()
            .map(|&c| space.composition_name(c))
            .collect::<Result<Vec<_>>>()?,
        scene: config.dataset.scene.clone(),
        images: dataset.images.len(),
        instances: dataset.annotations.len(),
        content_sha256: dataset_content_hash(&dataset, &annotations),
    };
    write_pretty_json(&recipe, &dir.join("recipe.json"))?;
    Ok(recipe)
}

/// Generates the pretraining and test datasets on disk.
///
/// The pretraining set covers the manifest's pretraining compositions at
/// `pretrain_shots` instances each; the test set covers every composition
/// at `test_shots` each.
pub fn cmd_gen(config: &ExpConfig, force: bool) -> Result<GenSummary> {
    let (_, space, split) = config.resolve_manifest()?;
    let pretrain_comps: Vec<usize> = split.pretrain().collect();
    let pretrain = write_named_dataset(
        config,
        &space,
        "pretrain",
        &pretrain_comps,
        config.dataset.pretrain_shots,
        derive_seed(config.seed, "data-pretrain"),
        force,
    )?;
    let test = write_named_dataset(
        config,
        &space,
        "test",
        &space.all_compositions(),
        config.dataset.test_shots,
        derive_seed(config.seed, "data-test"),
        force,
    )?;
    Ok(GenSummary { pretrain, test })
}

fn load_named_dataset(config: &ExpConfig, space: &CompositionSpace, name: &str) -> Result<Dataset> {
    let dir = config.data_dir(name);
    if !dir.join("annotations.json").exists() {
        return Err(Error::Config(format!(
            "dataset {} missing at {}; run `gen` first",
            name,
            dir.display()
        )));
    }
    load_dataset(&dir, space)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Options of one `train` invocation.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub toggles: Toggles,
    /// Seeds to run; one run directory each. Empty means the config seed.
    pub seeds: Vec<u64>,
    pub force: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            toggles: Toggles::full(),
            seeds: Vec::new(),
            force: false,
        }
    }
}

/// Trains one model per requested seed with the chosen component toggles,
/// evaluates it on the test set, and writes one run directory per seed.
pub fn cmd_train(config: &ExpConfig, opts: &TrainOptions) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let (manifest, space, split) = config.resolve_manifest()?;
    let train_data = load_named_dataset(config, &space, "pretrain")?;
    let test_data = load_named_dataset(config, &space, "test")?;
    let class_list = space.all_compositions();
    let (policy, weights) = opts.toggles.apply(&config.loss);
    let seeds: Vec<u64> = if opts.seeds.is_empty() {
        vec![config.seed]
    } else {
        opts.seeds.clone()
    };

    let mut records = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let snapshot = RunSnapshot {
            kind: RunKind::Train,
            variant: opts.toggles.variant_label(),
            toggles: opts.toggles,
            seed,
            source_run: None,
            plan: None,
            manifest: manifest.clone(),
            config: config.clone(),
        };
        let (hash, dir) = claim_run_dir(config, &snapshot, opts.force)?;

        let mut model = Model::new(space.clone(), config.dim, seed)?;
        let train_cfg = config.train.to_config(seed);
        let log = train(
            &mut model,
            &train_data,
            &class_list,
            &policy,
            &weights,
            &TrainMask::AllTokens,
            &train_cfg,
        )?;
        let report = evaluate_model(
            &model,
            &test_data,
            &split,
            &class_list,
            &config.eval.params(),
            config.eval.score_threshold,
        )?;
        let confusions = model_confusions(
            &model,
            &test_data,
            &class_list,
            &config.eval.params(),
            config.eval.score_threshold,
            config.eval.confusion_match_iou,
        )?;

        save_model(&model, &manifest, &dir.join("checkpoint.ckpt"))?;
        write_pretty_json(&report, &dir.join("report.json"))?;
        confusions.write_csv(&space, &dir.join("confusion.csv"))?;
        write_train_log(&log, &dir.join("log.jsonl"))?;
        let record = RunRecord {
            kind: RunKind::Train,
            config_hash: hash,
            variant: snapshot.variant.clone(),
            seed,
            manifest: manifest.clone(),
            checkpoint: "checkpoint.ckpt".into(),
            report: "report.json".into(),
            confusion: "confusion.csv".into(),
            log: "log.jsonl".into(),
            created_unix_ms: now_unix_ms(),
            wall_ms: log.wall_ms,
        };
        write_pretty_json(&record, &dir.join("record.json"))?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// One externally supplied detection, as read from a detections JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub bbox: [f64; 4],
    pub category_id: usize,
    pub score: f64,
}

/// Options of one `eval` invocation.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Dataset directory (`annotations.json` + `images/`).
    pub data_dir: PathBuf,
    /// Score these detections instead of running the model.
    pub detections: Option<PathBuf>,
    /// Write the report here as pretty JSON.
    pub out: Option<PathBuf>,
}

/// Scores a checkpoint (or an externally supplied detections file) against
/// a dataset, under the manifest embedded in the checkpoint.
pub fn cmd_eval(config: &ExpConfig, opts: &EvalOptions) -> Result<EvalReport> {
    let (model, manifest) = load_model(&opts.checkpoint, None)?;
    let (space, split) = manifest.resolve()?;
    let dataset = load_dataset(&opts.data_dir, &space)?;
    let class_list = space.all_compositions();
    let report = match &opts.detections {
        Some(path) => {
            let records: Vec<DetectionRecord> = read_json(path)?;
            let detections: Vec<Detection> = records
                .into_iter()
                .map(|r| Detection {
                    image_id: r.image_id,
                    bbox: r.bbox,
                    composition: r.category_id,
                    score: r.score,
                })
                .collect();
            let ground_truth = crate::trainer::dataset_ground_truth(&dataset);
            crate::evalkit::nms_map(
                &detections,
                &ground_truth,
                &space,
                &split,
                &config.eval.params(),
            )?
        }
        None => evaluate_model(
            &model,
            &dataset,
            &split,
            &class_list,
            &config.eval.params(),
            config.eval.score_threshold,
        )?,
    };
    if let Some(out) = &opts.out {
        write_pretty_json(&report, out)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// confusions
// ---------------------------------------------------------------------------

/// One mined pair in an increment plan, by composition name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanPair {
    pub underperformer: String,
    pub distractor: String,
    pub rate: f64,
}

/// One pair selected for prompting, with its initialization text.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanPrompt {
    pub target: String,
    pub distractor: String,
    pub rate: f64,
    pub init_text: String,
}

/// The auditable handoff between `confusions` and `increment`: every mined
/// pair, the subset selected for prompting, and the tuning setup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IncrementPlan {
    pub source_run: String,
    pub threshold: f64,
    pub components: PromptComponents,
    pub regime: Regime,
    pub mined: Vec<PlanPair>,
    pub selected: Vec<PlanPrompt>,
    pub notes: Vec<String>,
}

impl IncrementPlan {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Options of one `confusions` invocation.
#[derive(Debug, Clone)]
pub struct ConfusionsOptions {
    /// Run directory of the training run to mine.
    pub run: PathBuf,
    /// Overrides the configured mining threshold.
    pub threshold: Option<f64>,
    /// Where to write the plan (default: `plan.json` inside the run).
    pub out: Option<PathBuf>,
}

/// Mines the confusion matrix of a training run into an increment plan.
/// An empty plan (with a warning note) is written when nothing clears the
/// threshold.
pub fn cmd_confusions(opts: &ConfusionsOptions) -> Result<IncrementPlan> {
    let (record, snapshot) = load_run(&opts.run)?;
    let (space, split) = record.manifest.resolve()?;
    let matrix = ConfusionMatrix::read_csv(&space, &opts.run.join(&record.confusion))?;
    let threshold = opts
        .threshold
        .unwrap_or(snapshot.config.increment.mining_threshold);
    let mined_pairs = mine_confusions(&matrix, threshold)?;
    let components = snapshot.config.increment.components;
    let regime = snapshot.config.increment.regime;

    let mined = mined_pairs
        .iter()
        .map(|p| {
            Ok(PlanPair {
                underperformer: space.composition_name(p.underperformer)?,
                distractor: space.composition_name(p.distractor)?,
                rate: p.rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut notes = Vec::new();
    let mut selected = Vec::new();
    if mined_pairs.is_empty() {
        notes.push(format!(
            "warning: no confusion rate reaches threshold {threshold}; plan is empty"
        ));
    } else {
        match build_increment_set(&mined_pairs, &split) {
            Ok((kept, set_notes)) => {
                notes.extend(set_notes);
                for p in kept {
                    let target = space.composition_name(p.underperformer)?;
                    let distractor = space.composition_name(p.distractor)?;
                    let init_text = components.text(&target, &distractor);
                    selected.push(PlanPrompt {
                        target,
                        distractor,
                        rate: p.rate,
                        init_text,
                    });
                }
            }
            Err(Error::EmptyInput(msg)) => {
                notes.push(format!("warning: {msg}"));
            }
            Err(e) => return Err(e),
        }
    }
    let plan = IncrementPlan {
        source_run: record.config_hash.clone(),
        threshold,
        components,
        regime,
        mined,
        selected,
        notes,
    };
    let out = opts.out.clone().unwrap_or_else(|| opts.run.join("plan.json"));
    write_pretty_json(&plan, &out)?;
    Ok(plan)
}

// ---------------------------------------------------------------------------
// increment
// ---------------------------------------------------------------------------

/// Options of one `increment` invocation.
#[derive(Debug, Clone, Default)]
pub struct IncrementOptions {
    /// Source training run directory.
    pub run: PathBuf,
    /// Plan file produced by `confusions`.
    pub plan: PathBuf,
    pub regime: Option<Regime>,
    pub components: Option<PromptComponents>,
    /// Seed for the round (default: the source run's seed).
    pub seed: Option<u64>,
    /// Overrides the configured increment epoch budget.
    pub epochs: Option<usize>,
    /// Overrides the configured increment learning rate.
    pub lr: Option<f64>,
    pub force: bool,
}

/// The before/after comparison written as an increment run's `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementReport {
    pub added: Vec<String>,
    pub before: EvalReport,
    pub after: EvalReport,
    pub deltas: ReportDeltas,
    pub notes: Vec<String>,
}

impl IncrementReport {
    /// Arrow-style delta lines, one metric per row.
    pub fn delta_table(&self) -> String {
        fn row(name: &str, before: Option<f64>, after: Option<f64>) -> String {
            match (before, after) {
                (Some(b), Some(a)) => {
                    format!("{name:<22} {b:>6.1} -> {a:>6.1}  ({:+.1})\n", a - b)
                }
                _ => format!("{name:<22}    n/a\n"),
            }
        }
        let mut out = String::new();
        out.push_str(&row(
            "pretrain mAP",
            self.before.map_pretrain,
            self.after.map_pretrain,
        ));
        out.push_str(&row(
            "increment mAP",
            self.before.map_increment,
            self.after.map_increment,
        ));
        out.push_str(&row(
            "unseen mAP",
            self.before.map_unseen,
            self.after.map_unseen,
        ));
        out.push_str(&row(
            "overall mAP",
            self.before.map_overall,
            self.after.map_overall,
        ));
        out.push_str(&row(
            "HM pre/inc/unseen",
            self.before.hm_pretrain_increment_unseen,
            self.after.hm_pretrain_increment_unseen,
        ));
        out
    }
}

/// Appends `extra`'s images and annotations onto `base`, reindexing ids.
pub fn merge_datasets(base: &Dataset, extra: &Dataset) -> Dataset {
    let mut images = base.images.clone();
    let mut annotations = base.annotations.clone();
    let image_offset = images.len();
    let ann_offset = annotations.len();
    images.extend(extra.images.iter().cloned());
    for (k, a) in extra.annotations.iter().enumerate() {
        let mut a = a.clone();
        a.id = ann_offset + k;
        a.image_id += image_offset;
        annotations.push(a);
    }
    Dataset { images, annotations }
}

/// Executes an increment plan against a training run's checkpoint: builds
/// contrastive prompts for the selected pairs, tunes under the chosen
/// regime on revisited pretraining data plus fresh shots of the added
/// compositions, and writes a new run directory with before/after reports.
pub fn cmd_increment(opts: &IncrementOptions) -> Result<(RunRecord, IncrementReport)> {
    let (record, snapshot) = load_run(&opts.run)?;
    let mut config = snapshot.config.clone();
    if let Some(epochs) = opts.epochs {
        config.increment.epochs = epochs;
    }
    if let Some(lr) = opts.lr {
        config.increment.lr = lr;
    }
    let config = &config;
    let plan: IncrementPlan = read_json(&opts.plan)?;
    let mut plan = plan;
    if let Some(regime) = opts.regime {
        plan.regime = regime;
    }
    if let Some(components) = opts.components {
        plan.components = components;
        for p in &mut plan.selected {
            p.init_text = components.text(&p.target, &p.distractor);
        }
    }
    if plan.is_empty() {
        return Err(Error::EmptyInput(
            "increment plan selects no pair; nothing to do".into(),
        ));
    }

    let (model, manifest) = load_model(&opts.run.join(&record.checkpoint), Some(&record.manifest))?;
    let mut model = model;
    let (space, split) = manifest.resolve()?;
    let class_list = space.all_compositions();
    let pairs: Vec<ConfusedPair> = plan
        .selected
        .iter()
        .map(|p| {
            Ok(ConfusedPair {
                underperformer: space.parse_composition(&p.target)?,
                distractor: space.parse_composition(&p.distractor)?,
                rate: p.rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = opts.seed.unwrap_or(record.seed);

    let inc_snapshot = RunSnapshot {
        kind: RunKind::Increment,
        variant: format!(
            "{}/{}",
            serde_json::to_value(plan.regime)?.as_str().unwrap_or("regime"),
            serde_json::to_value(plan.components)?
                .as_str()
                .unwrap_or("components"),
        ),
        toggles: snapshot.toggles,
        seed,
        source_run: Some(record.config_hash.clone()),
        plan: Some(plan.clone()),
        manifest: manifest.clone(),
        config: config.clone(),
    };
    let (hash, dir) = claim_run_dir(config, &inc_snapshot, opts.force)?;

    // Revisit the pretraining data at full size plus fresh shots of the
    // compositions being added.
    let pretrain_data = load_named_dataset(config, &space, "pretrain")?;
    let test_data = load_named_dataset(config, &space, "test")?;
    let added: Vec<usize> = pairs.iter().map(|p| p.underperformer).collect();
    let fresh = generate_dataset(
        &space,
        &added,
        config.dataset.increment_shots,
        &config.dataset.scene,
        derive_seed(seed, "data-increment"),
    )?;
    let union = merge_datasets(&pretrain_data, &fresh);

    let (mut policy, weights) = snapshot.toggles.apply(&config.loss);
    // Increment rounds always tune against one-hot targets. Smoothing exists
    // to pre-position classes that have no data yet; the added classes now
    // have labeled shots, and partial-credit targets would teach their
    // prompts to fire on same-part instances of other classes, stealing
    // those boxes under class-agnostic suppression.
    policy.mode = SmoothingMode::None;
    let mut train_cfg = config.train.to_config(seed);
    train_cfg.epochs = config.increment.epochs;
    train_cfg.lr = config.increment.lr;
    let inc_cfg = IncrementConfig {
        components: plan.components,
        regime: plan.regime,
        policy,
        weights,
        train: train_cfg,
        eval: config.eval.params(),
        score_threshold: config.eval.score_threshold,
    };
    let (new_split, outcome) =
        run_increment(&mut model, &split, &pairs, &union, &test_data, &inc_cfg)?;

    let confusions = model_confusions(
        &model,
        &test_data,
        &class_list,
        &config.eval.params(),
        config.eval.score_threshold,
        config.eval.confusion_match_iou,
    )?;
    let new_manifest = Manifest::new(&space, &new_split)?;
    save_model(&model, &new_manifest, &dir.join("checkpoint.ckpt"))?;
    let report = IncrementReport {
        added: added
            .iter()
            .map(|&c| space.composition_name(c))
            .collect::<Result<Vec<_>>>()?,
        deltas: crate::incrementer::report_deltas(&outcome.before, &outcome.after),
        before: outcome.before,
        after: outcome.after,
        notes: outcome.notes,
    };
    write_pretty_json(&report, &dir.join("report.json"))?;
    confusions.write_csv(&space, &dir.join("confusion.csv"))?;
    write_train_log(&outcome.log, &dir.join("log.jsonl"))?;
    write_pretty_json(&plan, &dir.join("plan.json"))?;
    let out_record = RunRecord {
        kind: RunKind::Increment,
        config_hash: hash,
        variant: inc_snapshot.variant.clone(),
        seed,
        manifest: new_manifest,
        checkpoint: "checkpoint.ckpt".into(),
        report: "report.json".into(),
        confusion: "confusion.csv".into(),
        log: "log.jsonl".into(),
        created_unix_ms: now_unix_ms(),
        wall_ms: outcome.log.wall_ms,
    };
    write_pretty_json(&out_record, &dir.join("record.json"))?;
    Ok((out_record, report))
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Options of one `report` invocation.
#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub runs: Vec<PathBuf>,
    pub out_csv: Option<PathBuf>,
    pub out_text: Option<PathBuf>,
}

/// Rendered aggregate tables; text and CSV hold identical numbers.
#[derive(Debug, Clone)]
pub struct ReportTables {
    pub text: String,
    pub csv: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_cell(values: &[f64]) -> String {
    if values.is_empty() {
        return "n/a".to_string();
    }
    let (mean, std) = mean_std(values);
    format!("{mean:.2} ± {std:.2}")
}

struct VariantMetrics {
    variant: String,
    grid_index: usize,
    seeds: Vec<u64>,
    columns: Vec<(&'static str, Vec<f64>)>,
}

fn push_metric(columns: &mut [(&'static str, Vec<f64>)], name: &str, value: Option<f64>) {
    if let (Some(v), Some(slot)) = (value, columns.iter_mut().find(|(n, _)| *n == name)) {
        slot.1.push(v);
    }
}

/// Aggregates run directories into per-variant mean ± std tables: one
/// table for training runs (the component ablation grid) and one for
/// increment runs (before/after deltas). All runs must share one manifest.
pub fn cmd_report(opts: &ReportOptions) -> Result<ReportTables> {
    if opts.runs.is_empty() {
        return Err(Error::EmptyInput("report needs at least one run".into()));
    }
    let mut manifest_json: Option<String> = None;
    let mut train_groups: Vec<VariantMetrics> = Vec::new();
    let mut inc_groups: Vec<VariantMetrics> = Vec::new();

    for dir in &opts.runs {
        let (record, snapshot) = load_run(dir)?;
        // The increment phase legitimately extends the split, so compare
        // spaces and pretraining sets, not whole manifests.
        let key = serde_json::to_string(&(
            snapshot.manifest.attribute_names(),
            snapshot.manifest.object_names(),
            snapshot.manifest.pretrain_names(),
        ))?;
        match &manifest_json {
            None => manifest_json = Some(key),
            Some(existing) if *existing != key => {
                return Err(Error::Validation(format!(
                    "run {} uses a different manifest than the first run; \
                     refusing to aggregate mixed protocols",
                    dir.display()
                )));
            }
            _ => {}
        }
        match record.kind {
            RunKind::Train => {
                let report: EvalReport = read_json(&dir.join(&record.report))?;
                let group = match train_groups.iter_mut().find(|g| g.variant == record.variant)
                {
                    Some(g) => g,
                    None => {
                        train_groups.push(VariantMetrics {
                            variant: record.variant.clone(),
                            grid_index: snapshot.toggles.grid_index(),
                            seeds: Vec::new(),
                            columns: vec![
                                ("seen", Vec::new()),
                                ("unseen", Vec::new()),
                                ("hm", Vec::new()),
                                ("overall", Vec::new()),
                            ],
                        });
                        train_groups.last_mut().unwrap()
                    }
                };
                group.seeds.push(record.seed);
                push_metric(&mut group.columns, "seen", report.map_seen);
                push_metric(&mut group.columns, "unseen", report.map_unseen);
                push_metric(&mut group.columns, "hm", report.hm_seen_unseen);
                push_metric(&mut group.columns, "overall", report.map_overall);
            }
            RunKind::Increment => {
                let report: IncrementReport = read_json(&dir.join(&record.report))?;
                let group = match inc_groups.iter_mut().find(|g| g.variant == record.variant) {
                    Some(g) => g,
                    None => {
                        inc_groups.push(VariantMetrics {
                            variant: record.variant.clone(),
                            grid_index: 0,
                            seeds: Vec::new(),
                            columns: vec![
                                ("pretrain_before", Vec::new()),
                                ("pretrain_after", Vec::new()),
                                ("increment_before", Vec::new()),
                                ("increment_after", Vec::new()),
                                ("unseen_after", Vec::new()),
                                ("hm3_after", Vec::new()),
                            ],
                        });
                        inc_groups.last_mut().unwrap()
                    }
                };
                group.seeds.push(record.seed);
                push_metric(
                    &mut group.columns,
                    "pretrain_before",
                    report.before.map_pretrain,
                );
                push_metric(
                    &mut group.columns,
                    "pretrain_after",
                    report.after.map_pretrain,
                );
                push_metric(
                    &mut group.columns,
                    "increment_before",
                    report.before.map_increment,
                );
                push_metric(
                    &mut group.columns,
                    "increment_after",
                    report.after.map_increment,
                );
                push_metric(&mut group.columns, "unseen_after", report.after.map_unseen);
                push_metric(
                    &mut group.columns,
                    "hm3_after",
                    report.after.hm_pretrain_increment_unseen,
                );
            }
        }
    }
    train_groups.sort_by_key(|g| g.grid_index);
    inc_groups.sort_by(|a, b| a.variant.cmp(&b.variant));

    let mut text = String::new();
    let mut csv = String::new();
    if !train_groups.is_empty() {
        text.push_str("component grid (test set, mean ± std over seeds)\n");
        text.push_str(&format!(
            "{:<28} {:>5} {:>16} {:>16} {:>16} {:>16}\n",
            "variant", "runs", "seen", "unseen", "hm", "overall"
        ));
        csv.push_str("kind,variant,runs,metric,mean,std\n");
        for g in &train_groups {
            text.push_str(&format!("{:<28} {:>5}", g.variant, g.seeds.len()));
            for (_, values) in &g.columns {
                text.push_str(&format!(" {:>16}", fmt_cell(values)));
            }
            text.push('\n');
            for (name, values) in &g.columns {
                if values.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(values);
                csv.push_str(&format!(
                    "train,{},{},{},{:.2},{:.2}\n",
                    g.variant,
                    g.seeds.len(),
                    name,
                    mean,
                    std
                ));
            }
        }
    }
    if !inc_groups.is_empty() {
        if !text.is_empty() {
            text.push('\n');
        }
        if csv.is_empty() {
            csv.push_str("kind,variant,runs,metric,mean,std\n");
        }
        text.push_str("increment rounds (test set, mean ± std over seeds)\n");
        text.push_str(&format!(
            "{:<24} {:>5} {:>16} {:>16} {:>16} {:>16} {:>16} {:>16}\n",
            "variant", "runs", "pre before", "pre after", "inc before", "inc after", "unseen",
            "hm3"
        ));
        for g in &inc_groups {
            text.push_str(&format!("{:<24} {:>5}", g.variant, g.seeds.len()));
            for (_, values) in &g.columns {
                text.push_str(&format!(" {:>16}", fmt_cell(values)));
            }
            text.push('\n');
            for (name, values) in &g.columns {
                if values.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(values);
                csv.push_str(&format!(
                    "increment,{},{},{},{:.2},{:.2}\n",
                    g.variant,
                    g.seeds.len(),
                    name,
                    mean,
                    std
                ));
            }
        }
    }
    let tables = ReportTables { text, csv };
    if let Some(path) = &opts.out_text {
        fs::write(path, &tables.text)?;
    }
    if let Some(path) = &opts.out_csv {
        fs::write(path, &tables.csv)?;
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch_config(root: &Path) -> ExpConfig {
        let manifest = Manifest::color_shape_default();
        let manifest_path = root.join("manifest.json");
        write_pretty_json(&manifest, &manifest_path).unwrap();
        ExpConfig {
            manifest: manifest_path,
            out_dir: root.join("out"),
            seed: 0,
            dim: 16,
            dataset: DatasetSection {
                pretrain_shots: 2,
                test_shots: 2,
                increment_shots: 2,
                ..DatasetSection::default()
            },
            train: TrainSection {
                epochs: 3,
                ..TrainSection::default()
            },
            increment: IncrementSection {
                epochs: 2,
                ..IncrementSection::default()
            },
            ..ExpConfig::default()
        }
    }

    fn temp_root(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "expcli-test-{tag}-{}",
            std::process::id()
        ));
        if dir.exists() {
            fs::remove_dir_all(&dir).unwrap();
        }
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn test_gen_writes_exact_instance_counts() {
        let root = temp_root("gen");
        let config = scratch_config(&root);
        let summary = cmd_gen(&config, false).unwrap();
        assert_eq!(summary.pretrain.instances, 6 * 2);
        assert_eq!(summary.test.instances, 18 * 2);
        // refuses to overwrite without force
        assert!(cmd_gen(&config, false).is_err());
        let again = cmd_gen(&config, true).unwrap();
        assert_eq!(
            summary.pretrain.content_sha256,
            again.pretrain.content_sha256
        );
        assert_eq!(summary.test.content_sha256, again.test.content_sha256);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn test_train_run_directory_is_complete_and_rerun_identical() {
        let root = temp_root("train");
        let config = scratch_config(&root);
        cmd_gen(&config, false).unwrap();
        let records = cmd_train(&config, &TrainOptions::default()).unwrap();
        assert_eq!(records.len(), 1);
        let record = &records[0];
        let dir = config.runs_dir().join(&record.config_hash);
        for name in [
            "config.json",
            "checkpoint.ckpt",
            "report.json",
            "confusion.csv",
            "log.jsonl",
            "record.json",
        ] {
            assert!(dir.join(name).exists(), "{name} missing");
        }
        // same config + seed → same hash → refuses without force
        assert!(cmd_train(&config, &TrainOptions::default()).is_err());
        let ckpt_before = fs::read(dir.join("checkpoint.ckpt")).unwrap();
        let report_before = fs::read(dir.join("report.json")).unwrap();
        let opts = TrainOptions {
            force: true,
            ..TrainOptions::default()
        };
        cmd_train(&config, &opts).unwrap();
        assert_eq!(ckpt_before, fs::read(dir.join("checkpoint.ckpt")).unwrap());
        assert_eq!(report_before, fs::read(dir.join("report.json")).unwrap());
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn test_toggle_labels_are_distinct_and_complete() {
        let mut labels = std::collections::BTreeSet::new();
        for s in [false, true] {
            for p in [false, true] {
                for d in [false, true] {
                    let t = Toggles {
                        smoothing: s,
                        separation: p,
                        decorrelation: d,
                    };
                    labels.insert(t.variant_label());
                }
            }
        }
        assert_eq!(labels.len(), 8);
        assert!(labels.contains("csp-baseline"));
        assert!(labels.contains("full-ca"));
    }

    #[test]
    fn test_toggles_zero_disabled_terms() {
        let loss = LossSection::default();
        let (policy, weights) = Toggles::baseline().apply(&loss);
        assert_eq!(policy.mode, SmoothingMode::None);
        assert_eq!(weights.lambda1, 0.0);
        assert_eq!(weights.lambda_h, 0.0);
        let (policy, weights) = Toggles::full().apply(&loss);
        assert_eq!(policy.mode, SmoothingMode::Compositional);
        assert_eq!(weights.lambda1, loss.weights.lambda1);
        assert_eq!(weights.lambda_h, loss.weights.lambda_h);
    }

    #[test]
    fn test_eval_accepts_external_detections() {
        let root = temp_root("eval");
        let config = scratch_config(&root);
        cmd_gen(&config, false).unwrap();
        let records = cmd_train(&config, &TrainOptions::default()).unwrap();
        let run_dir = config.runs_dir().join(&records[0].config_hash);
        // perfect detections copied from ground truth → 100 everywhere
        let (_, space, _) = config.resolve_manifest().unwrap();
        let test_data = load_dataset(&config.data_dir("test"), &space).unwrap();
        let detections: Vec<DetectionRecord> = test_data
            .annotations
            .iter()
            .map(|a| DetectionRecord {
                image_id: a.image_id,
                bbox: a.bbox.to_xywh(),
                category_id: a.composition,
                score: 1.0,
            })
            .collect();
        let det_path = root.join("detections.json");
        write_pretty_json(&detections, &det_path).unwrap();
        let report = cmd_eval(
            &config,
            &EvalOptions {
                checkpoint: run_dir.join("checkpoint.ckpt"),
                data_dir: config.data_dir("test"),
                detections: Some(det_path),
                out: Some(root.join("report.json")),
            },
        )
        .unwrap();
        assert_eq!(report.map_overall, Some(100.0));
        assert_eq!(report.map_unseen, Some(100.0));
        let round: EvalReport = read_json(&root.join("report.json")).unwrap();
        assert_eq!(round.map_overall, Some(100.0));
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn test_confusions_threshold_above_one_yields_empty_plan() {
        let root = temp_root("confusions");
        let config = scratch_config(&root);
        cmd_gen(&config, false).unwrap();
        let records = cmd_train(&config, &TrainOptions::default()).unwrap();
        let run_dir = config.runs_dir().join(&records[0].config_hash);
        let plan = cmd_confusions(&ConfusionsOptions {
            run: run_dir.clone(),
            threshold: Some(1.0),
            out: None,
        })
        .unwrap();
        // threshold 1.0 is the maximum; an untrained 3-epoch model will not
        // produce a fully deterministic wrong prediction at rate 1.0 for
        // every composition, but the plan file must exist either way
        assert!(run_dir.join("plan.json").exists());
        let loaded: IncrementPlan = read_json(&run_dir.join("plan.json")).unwrap();
        assert_eq!(loaded, plan);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn test_report_single_run_renders_all_views() {
        let root = temp_root("report");
        let config = scratch_config(&root);
        cmd_gen(&config, false).unwrap();
        let records = cmd_train(&config, &TrainOptions::default()).unwrap();
        let run_dir = config.runs_dir().join(&records[0].config_hash);
        let tables = cmd_report(&ReportOptions {
            runs: vec![run_dir],
            out_csv: Some(root.join("report.csv")),
            out_text: Some(root.join("report.txt")),
        })
        .unwrap();
        assert!(tables.text.contains("full-ca"));
        assert!(tables.csv.starts_with("kind,variant,runs,metric,mean,std"));
        assert_eq!(fs::read_to_string(root.join("report.txt")).unwrap(), tables.text);
        assert_eq!(fs::read_to_string(root.join("report.csv")).unwrap(), tables.csv);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn test_config_file_round_trip_and_relative_paths() {
        let root = temp_root("config");
        let manifest = Manifest::color_shape_default();
        write_pretty_json(&manifest, &root.join("manifest.json")).unwrap();
        fs::write(
            root.join("exp.json"),
            r#"{"manifest": "manifest.json", "out_dir": "scratch", "dim": 8}"#,
        )
        .unwrap();
        let config = ExpConfig::from_file(&root.join("exp.json")).unwrap();
        assert_eq!(config.manifest, root.join("manifest.json"));
        assert_eq!(config.out_dir, root.join("scratch"));
        assert_eq!(config.dim, 8);
        assert_eq!(config.dataset.pretrain_shots, 10);
        // unknown keys are rejected
        fs::write(root.join("bad.json"), r#"{"manifst": "x"}"#).unwrap();
        assert!(ExpConfig::from_file(&root.join("bad.json")).is_err());
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn test_merge_datasets_reindexes_ids() {
        let space = CompositionSpace::color_shape_default();
        let spec = SceneSpec::default();
        let a = generate_dataset(&space, &[0, 1], 2, &spec, 1).unwrap();
        let b = generate_dataset(&space, &[2], 2, &spec, 2).unwrap();
        let merged = merge_datasets(&a, &b);
        assert_eq!(merged.images.len(), a.images.len() + b.images.len());
        assert_eq!(
            merged.annotations.len(),
            a.annotations.len() + b.annotations.len()
        );
        for (k, ann) in merged.annotations.iter().enumerate() {
            assert_eq!(ann.id, k);
            assert!(ann.image_id < merged.images.len());
        }
        // every original annotation of `b` survives with shifted image id
        let shifted = &merged.annotations[a.annotations.len()..];
        for (orig, new) in b.annotations.iter().zip(shifted) {
            assert_eq!(orig.composition, new.composition);
            assert_eq!(new.image_id, orig.image_id + a.images.len());
        }
    }
}
