//! Experiment orchestration over a shared results directory.
//!
//! Two experiment families are driven from one [`SweepConfig`]:
//!
//! * the **information-imbalance sweep** — caption richness k = 1..5 crossed
//!   with embedding dimension, learning rate, and seed ([`run_sweep`]);
//! * the **caption-presence-bias experiment** — one factor word forced into
//!   every caption ([`run_presence_bias`]).
//!
//! Everything is cached by config hash: datasets and finished runs are
//! detected on disk and never recomputed. Several worker processes may point
//! at the same results directory; they partition the pending runs through
//! exclusive claim files and each run's artifacts are committed with an
//! atomic rename, so a crashed or concurrent worker can never leave a
//! half-written record behind.

pub mod report;
pub mod stats;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias::{self, IdealVectors, MoadResult};
use crate::clip::{self, checkpoint, DualEncoder, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::gap::{self, GapReport};
use crate::mad::{
    self, CaptionPolicy, Factor, MadDatasetConfig, MadSplitView, ALL_FACTORS,
};
use crate::store::{
    make_paired, write_embedding_set, EmbeddingSet, GroupIndex, MetricsConfig, Modality,
};
use crate::zeroshot::{self, EvalReport};

/// The learning rates every configuration is trained with before selection.
pub const DEFAULT_LEARNING_RATES: [f64; 3] = [5e-4, 5e-5, 1e-5];

/// Name of the per-run completion marker (the full record).
pub const RECORD_FILE: &str = "record.json";
/// Name of the per-run failure marker.
pub const ERROR_FILE: &str = "error.json";
/// Per-run subdirectory holding the encoded test split.
pub const EMBEDDINGS_DIR: &str = "embeddings";

/// Everything the sweep and presence-bias runners need.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Caption richness values for the information-imbalance axis.
    pub k_values: Vec<u8>,
    pub embed_dims: Vec<usize>,
    pub seeds: Vec<u64>,
    pub learning_rates: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Transformer depth/width of the towers; defaults match the full-scale
    /// model, tests shrink them.
    pub layers: usize,
    pub width: usize,
    /// Digit corpus passed through to dataset generation.
    pub mnist_source: String,
    /// Root of the results tree (`datasets/`, `runs/` and reports live here).
    pub out_dir: PathBuf,
    /// Marks the CI-scale preset built by [`SweepConfig::reduced`].
    pub reduced_preset: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            k_values: vec![1, 2, 3, 4, 5],
            embed_dims: vec![16, 64, 256],
            seeds: vec![0, 1, 2],
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            n_train: 60_000,
            n_test: 10_000,
            epochs: 200,
            batch_size: 128,
            layers: 6,
            width: 256,
            mnist_source: "builtin".into(),
            out_dir: PathBuf::from("results"),
            reduced_preset: false,
        }
    }
}

impl SweepConfig {
    /// The CI-scale preset: one embedding dimension and learning rate,
    /// 10k training samples, 30 epochs, three seeds. Small enough for a
    /// CPU afternoon while preserving the qualitative trends.
    pub fn reduced(out_dir: impl Into<PathBuf>) -> Self {
        SweepConfig {
            embed_dims: vec![64],
            learning_rates: vec![5e-4],
            n_train: 10_000,
            n_test: 2_000,
            epochs: 30,
            out_dir: out_dir.into(),
            reduced_preset: true,
            ..SweepConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty()
            || self.embed_dims.is_empty()
            || self.seeds.is_empty()
            || self.learning_rates.is_empty()
        {
            return Err(Error::InvalidArgument(
                "k_values, embed_dims, seeds and learning_rates must be non-empty".into(),
            ));
        }
        if let Some(k) = self.k_values.iter().find(|&&k| k > 5) {
            return Err(Error::InvalidArgument(format!(
                "k = {k} attribute words requested but only 5 exist"
            )));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::InvalidArgument("output directory is empty".into()));
        }
        // Shape problems (width vs heads, epochs vs warmup, ...) surface
        // through the model and trainer validators with real messages.
        self.model_config(self.embed_dims[0]).validate()?;
        self.train_config(self.learning_rates[0], self.seeds[0])
            .validate()?;
        for &n in &[self.n_train, self.n_test] {
            if n == 0 {
                return Err(Error::InvalidArgument(
                    "dataset sizes must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Model shape for one run; everything but depth, width and embedding
    /// dimension stays at the defaults.
    pub fn model_config(&self, embed_dim: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            width: self.width,
            embed_dim,
            ..ModelConfig::default()
        }
    }

    /// Trainer settings for one run. The warm-up shrinks with very short
    /// schedules so it always stays below the epoch count.
    pub fn train_config(&self, learning_rate: f64, seed: u64) -> TrainConfig {
        let default_warmup = TrainConfig::default().warmup_epochs;
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_epochs: default_warmup.min(self.epochs.saturating_sub(1)),
            learning_rate,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Dataset recipe for one run.
    pub fn dataset_config(&self, policy: CaptionPolicy, seed: u64) -> MadDatasetConfig {
        MadDatasetConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            policy,
            seed,
            mnist_source: self.mnist_source.clone(),
        }
    }

    fn datasets_root(&self) -> PathBuf {
        self.out_dir.join("datasets")
    }

    fn runs_root(&self) -> PathBuf {
        self.out_dir.join("runs")
    }
}

/// What distinguishes one run from every other: exactly one of `k` /
/// `always_factor` is set, matching the two experiment families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSetting {
    pub k: Option<u8>,
    pub always_factor: Option<String>,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl RunSetting {
    /// The caption policy this setting trains under.
    pub fn policy(&self) -> Result<CaptionPolicy> {
        match (self.k, &self.always_factor) {
            (Some(k), None) => Ok(CaptionPolicy::InformationImbalance { k }),
            (None, Some(name)) => Ok(CaptionPolicy::PresenceBias {
                always_factor: Factor::from_name(name)?,
            }),
            _ => Err(Error::InvalidArgument(
                "run setting must carry exactly one of k / always_factor".into(),
            )),
        }
    }

    /// Human-readable prefix of the run directory name.
    fn slug(&self) -> String {
        let head = match (self.k, &self.always_factor) {
            (Some(k), _) => format!("ii-k{k}"),
            (_, Some(f)) => format!("pb-{f}"),
            _ => "run".into(),
        };
        format!(
            "{head}-d{}-lr{:e}-s{}",
            self.embed_dim, self.learning_rate, self.seed
        )
    }
}

/// Full artifact of one finished run. `checkpoint` and the embedding
/// directories are relative to the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: RunSetting,
    /// Dataset directory name under `datasets/`.
    pub dataset: String,
    pub gap: GapReport,
    /// For imbalance runs: digit groups vs pooled attribute groups. For
    /// presence runs: the always-present factor vs all others pooled.
    pub moad_img: MoadResult,
    pub moad_txt: MoadResult,
    /// Zero-shot and ideal-word accuracies on the test split.
    pub eval: EvalReport,
    /// Selection criterion evaluated on the held-out tenth of the train
    /// split; learning-rate selection compares this.
    pub val_selection_score: f64,
    pub final_train_loss: f64,
    pub checkpoint: String,
    pub wall_seconds: f64,
}

/// How one requested run ended up.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    /// Executed by this process in this call.
    Computed,
    /// A finished record already existed.
    Cached,
    /// A failure marker exists; the message is the recorded error.
    Failed(String),
}

/// One row of a [`run_sweep`]/[`run_presence_bias`] summary.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub setting: RunSetting,
    pub dir: PathBuf,
    pub status: RunStatus,
}

// ---------------------------------------------------------------------------
// Config hashing and cache keys

fn short_hash(payload: &[u8]) -> String {
    let digest = Sha256::digest(payload);
    let mut out = String::with_capacity(16);
    for byte in &digest[..8] {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Cache directory name for a dataset recipe.
pub fn dataset_key(cfg: &MadDatasetConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)
        .map_err(|e| Error::InvalidArgument(format!("unserializable dataset config: {e}")))?;
    Ok(format!("mad-{}", short_hash(json.as_bytes())))
}

/// Cache directory name for a run: every input that can change its outputs
/// (dataset recipe, model shape, trainer settings) feeds the hash.
pub fn run_key(
    dataset: &MadDatasetConfig,
    model: &ModelConfig,
    train: &TrainConfig,
    setting: &RunSetting,
) -> Result<String> {
    #[derive(Serialize)]
    struct Key<'a> {
        dataset: &'a MadDatasetConfig,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    let json = serde_json::to_string(&Key {
        dataset,
        model,
        train,
    })
    .map_err(|e| Error::InvalidArgument(format!("unserializable run key: {e}")))?;
    Ok(format!("{}-{}", setting.slug(), short_hash(json.as_bytes())))
}

// ---------------------------------------------------------------------------
// Atomic filesystem plumbing

/// Write `bytes` to `path` through a temporary file and rename, so readers
/// never observe a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Exclusive claim on a run directory; the file is removed on drop so a
/// panicking worker releases the run. Claims left by dead processes are
/// detected through their recorded pid.
struct Claim {
    path: PathBuf,
}

impl Claim {
    /// File name, inside the run directory.
    const FILE: &'static str = "claim";

    fn try_take(run_dir: &Path) -> Result<Option<Claim>> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(Self::FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Some(Claim { path }))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// A claim whose recorded process no longer exists is stale and may be
    /// removed; unreadable claims count as stale.
    fn is_stale(run_dir: &Path) -> bool {
        let path = run_dir.join(Self::FILE);
        match fs::read_to_string(&path) {
            Ok(text) => match text.trim().parse::<u32>() {
                Ok(pid) => !Path::new(&format!("/proc/{pid}")).exists(),
                Err(_) => true,
            },
            // Vanished between the existence check and here: not stale,
            // just gone (the owner finished or released it).
            Err(_) => false,
        }
    }

    fn remove_stale(run_dir: &Path) {
        let _ = fs::remove_file(run_dir.join(Self::FILE));
    }
}

impl Drop for Claim {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Datasets

/// Generate (or reuse) the dataset for `dcfg` under the results tree and
/// return its directory. Concurrent workers may race to build the same
/// dataset; the build happens in a scratch directory that is renamed into
/// place, and the loser simply adopts the winner's copy.
pub fn ensure_dataset(root: &SweepConfig, dcfg: &MadDatasetConfig) -> Result<PathBuf> {
    let dir = root.datasets_root().join(dataset_key(dcfg)?);
    if dir.join("meta.json").exists() {
        return Ok(dir);
    }
    let scratch = dir.with_extension(format!("building.{}", std::process::id()));
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    mad::generate_dataset(dcfg, &scratch)?;
    match fs::rename(&scratch, &dir) {
        Ok(()) => Ok(dir),
        Err(_) if dir.join("meta.json").exists() => {
            // Another worker won the race; discard our copy.
            let _ = fs::remove_dir_all(&scratch);
            Ok(dir)
        }
        Err(e) => Err(Error::io(&dir, e)),
    }
}

// ---------------------------------------------------------------------------
// Run enumeration

/// All information-imbalance runs of a config, in deterministic order
/// (k, then embed_dim, then learning rate, then seed).
pub fn sweep_runs(cfg: &SweepConfig) -> Vec<RunSetting> {
    let mut runs = Vec::new();
    for &k in &cfg.k_values {
        for &embed_dim in &cfg.embed_dims {
            for &learning_rate in &cfg.learning_rates {
                for &seed in &cfg.seeds {
                    runs.push(RunSetting {
                        k: Some(k),
                        always_factor: None,
                        embed_dim,
                        learning_rate,
                        seed,
                    });
                }
            }
        }
    }
    runs
}

/// Factors whose caption presence is manipulated by the bias experiment.
pub const PRESENCE_FACTORS: [Factor; 2] = [Factor::Digit, Factor::Color];

/// All presence-bias runs: one model per (always-present factor, seed) at
/// the first embedding dimension and learning rate of the config.
pub fn presence_runs(cfg: &SweepConfig) -> Vec<RunSetting> {
    let embed_dim = cfg.embed_dims[0];
    let learning_rate = cfg.learning_rates[0];
    let mut runs = Vec::new();
    for factor in PRESENCE_FACTORS {
        for &seed in &cfg.seeds {
            runs.push(RunSetting {
                k: None,
                always_factor: Some(factor.name().to_string()),
                embed_dim,
                learning_rate,
                seed,
            });
        }
    }
    runs
}

// ---------------------------------------------------------------------------
// Execution

/// Run every information-imbalance setting that is not already on disk.
/// Blocks until all runs are settled (finished, failed, or finished by a
/// concurrent worker). Failures are recorded per-run and do not abort the
/// remaining runs. Finishes by refreshing `aggregate.csv` at the results
/// root over everything settled so far.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let outcomes = execute_runs(cfg, &sweep_runs(cfg))?;
    refresh_aggregate(cfg, &outcomes)?;
    Ok(outcomes)
}

/// Same contract as [`run_sweep`] for the presence-bias experiment.
pub fn run_presence_bias(cfg: &SweepConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let outcomes = execute_runs(cfg, &presence_runs(cfg))?;
    refresh_aggregate(cfg, &outcomes)?;
    Ok(outcomes)
}

/// Rewrite the results-root aggregate unless nothing finished at all.
fn refresh_aggregate(cfg: &SweepConfig, outcomes: &[RunOutcome]) -> Result<()> {
    if outcomes
        .iter()
        .all(|o| matches!(o.status, RunStatus::Failed(_)))
    {
        return Ok(());
    }
    report::write_aggregate(cfg)?;
    Ok(())
}

fn execute_runs(cfg: &SweepConfig, runs: &[RunSetting]) -> Result<Vec<RunOutcome>> {
    fs::create_dir_all(cfg.runs_root()).map_err(|e| Error::io(cfg.runs_root(), e))?;
    fs::create_dir_all(cfg.datasets_root()).map_err(|e| Error::io(cfg.datasets_root(), e))?;

    // Resolve every run's directory up front so waiting and reporting agree.
    let mut dirs = Vec::with_capacity(runs.len());
    for setting in runs {
        let dcfg = cfg.dataset_config(setting.policy()?, setting.seed);
        let key = run_key(
            &dcfg,
            &cfg.model_config(setting.embed_dim),
            &cfg.train_config(setting.learning_rate, setting.seed),
            setting,
        )?;
        dirs.push(cfg.runs_root().join(key));
    }

    let mut computed = vec![false; runs.len()];
    loop {
        let mut waiting = 0usize;
        for (i, (setting, dir)) in runs.iter().zip(&dirs).enumerate() {
            if dir.join(RECORD_FILE).exists() || dir.join(ERROR_FILE).exists() {
                continue;
            }
            match Claim::try_take(dir)? {
                Some(claim) => {
                    execute_one(cfg, setting, dir)?;
                    computed[i] = true;
                    drop(claim);
                }
                None => {
                    if Claim::is_stale(dir) {
                        eprintln!(
                            "[harness] removing stale claim in {}",
                            dir.file_name().unwrap_or_default().to_string_lossy()
                        );
                        Claim::remove_stale(dir);
                        // Re-attempted on the next pass.
                    }
                    waiting += 1;
                }
            }
        }
        if waiting == 0 {
            break;
        }
        eprintln!("[harness] waiting for {waiting} run(s) owned by other workers");
        std::thread::sleep(std::time::Duration::from_secs(5));
    }

    Ok(runs
        .iter()
        .zip(&dirs)
        .zip(computed)
        .map(|((setting, dir), computed)| {
            let status = if let Ok(text) = fs::read_to_string(dir.join(ERROR_FILE)) {
                RunStatus::Failed(
                    serde_json::from_str::<serde_json::Value>(&text)
                        .ok()
                        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(String::from))
                        .unwrap_or(text),
                )
            } else if computed {
                RunStatus::Computed
            } else {
                RunStatus::Cached
            };
            RunOutcome {
                setting: setting.clone(),
                dir: dir.clone(),
                status,
            }
        })
        .collect())
}

/// Execute one claimed run; an execution error becomes the run's failure
/// marker instead of propagating (only I/O trouble writing the marker
/// itself aborts).
fn execute_one(cfg: &SweepConfig, setting: &RunSetting, dir: &Path) -> Result<()> {
    eprintln!("[harness] {}: starting", setting.slug());
    let started = Instant::now();
    match run_one(cfg, setting, dir) {
        Ok(record) => {
            eprintln!(
                "[harness] {}: done in {:.0}s (train loss {:.4}, digit acc {:.3})",
                setting.slug(),
                started.elapsed().as_secs_f64(),
                record.final_train_loss,
                record.eval.digit_accuracy
            );
            Ok(())
        }
        Err(e) => {
            eprintln!("[harness] {}: FAILED: {e}", setting.slug());
            let marker = serde_json::json!({
                "setting": setting,
                "error": e.to_string(),
            });
            write_atomic(
                &dir.join(ERROR_FILE),
                serde_json::to_string_pretty(&marker)
                    .unwrap_or_else(|_| "{}".into())
                    .as_bytes(),
            )
        }
    }
}

/// Train, evaluate and persist one run into `dir`; the record lands last so
/// its presence marks completion.
fn run_one(cfg: &SweepConfig, setting: &RunSetting, dir: &Path) -> Result<RunRecord> {
    let started = Instant::now();
    let policy = setting.policy()?;
    let dcfg = cfg.dataset_config(policy, setting.seed);
    let dataset_dir = ensure_dataset(cfg, &dcfg)?;
    let dataset = mad::load_dataset(&dataset_dir)?;

    // Hold out the trailing tenth of the train split for lr selection.
    let train = dataset.train();
    let n_val = (train.n() / 10).max(1).min(train.n() - 1);
    let n_in = train.n() - n_val;
    let (train_in, val) = split_view(&train, n_in);

    let mcfg = cfg.model_config(setting.embed_dim);
    let tcfg = cfg.train_config(setting.learning_rate, setting.seed);
    let (model, log) = clip::train(
        train_in.images,
        train_in.captions.as_flattened(),
        &mcfg,
        &tcfg,
    )?;
    checkpoint::save(dir, &model, Some(&log))?;

    // Everything downstream consumes embeddings.
    let txt_in = encode_texts(&model, &train_in, "train-in")?;
    let val_img = encode_images(&model, &val, "val")?;
    let test = dataset.test();
    let test_img = encode_images(&model, &test, "test")?;
    let test_txt = encode_texts(&model, &test, "test")?;

    let prompts = encode_prompts(&model)?;
    let ideals = ideal_words(&txt_in)?;

    let val_eval = evaluate_split(&val_img, &prompts, &ideals)?;
    let eval = evaluate_split(&test_img, &prompts, &ideals)?;

    let metrics_cfg = MetricsConfig::default();
    let pairs = make_paired(test_img.clone(), test_txt.clone())?;
    let gap = gap::gap_report(&pairs, &metrics_cfg)?;
    let (moad_img, moad_txt) = match &policy {
        CaptionPolicy::InformationImbalance { .. } => {
            let img = standard_moad(&test_img, &metrics_cfg)?;
            let txt = standard_moad(&test_txt, &metrics_cfg)?;
            (img, txt)
        }
        CaptionPolicy::PresenceBias { always_factor } => {
            let img = presence_moad(&test_img, *always_factor, &metrics_cfg)?;
            let txt = presence_moad(&test_txt, *always_factor, &metrics_cfg)?;
            (img, txt)
        }
    };

    write_embedding_set(&test_img, &dir.join(EMBEDDINGS_DIR).join("test-images"))?;
    write_embedding_set(&test_txt, &dir.join(EMBEDDINGS_DIR).join("test-texts"))?;

    let record = RunRecord {
        setting: setting.clone(),
        dataset: dataset_dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned(),
        gap,
        moad_img,
        moad_txt,
        eval,
        val_selection_score: val_eval.selection_score(),
        final_train_loss: log.final_loss(),
        checkpoint: checkpoint::CHECKPOINT_FILE.to_string(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::InvalidArgument(format!("unserializable record: {e}")))?;
    write_atomic(&dir.join(RECORD_FILE), json.as_bytes())?;
    Ok(record)
}

/// Load the full record of a finished run directory.
pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RECORD_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("bad record: {e}")))
}

/// All finished records under the config's runs directory, sorted by
/// directory name for determinism.
pub fn load_all_records(cfg: &SweepConfig) -> Result<Vec<(PathBuf, RunRecord)>> {
    let root = cfg.runs_root();
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&root) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RECORD_FILE).exists())
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&root, e)),
    };
    dirs.sort();
    dirs.into_iter()
        .map(|dir| load_record(&dir).map(|r| (dir, r)))
        .collect()
}

// ---------------------------------------------------------------------------
// Per-run evaluation plumbing

fn split_view<'a>(view: &MadSplitView<'a>, n_head: usize) -> (MadSplitView<'a>, MadSplitView<'a>) {
    let head = MadSplitView {
        images: &view.images[..n_head * mad::IMG_BYTES],
        factors: &view.factors[..n_head],
        captions: &view.captions[..n_head],
    };
    let tail = MadSplitView {
        images: &view.images[n_head * mad::IMG_BYTES..],
        factors: &view.factors[n_head..],
        captions: &view.captions[n_head..],
    };
    (head, tail)
}

fn factor_labels(view: &MadSplitView<'_>) -> Result<Vec<serde_json::Value>> {
    view.factors
        .iter()
        .map(|f| {
            serde_json::to_value(f)
                .map_err(|e| Error::InvalidArgument(format!("unserializable factors: {e}")))
        })
        .collect()
}

/// Encode a dataset split's images into a labeled, normalized embedding
/// set (`split` only names the source for diagnostics).
pub fn encode_images(
    model: &DualEncoder<f32>,
    view: &MadSplitView<'_>,
    split: &str,
) -> Result<EmbeddingSet> {
    let data = model.encode_images(view.images)?;
    EmbeddingSet::new(
        data,
        Modality::Image,
        true,
        Some(factor_labels(view)?),
        format!("encoded {split} images"),
    )
}

/// Encode a dataset split's captions; see [`encode_images`].
pub fn encode_texts(
    model: &DualEncoder<f32>,
    view: &MadSplitView<'_>,
    split: &str,
) -> Result<EmbeddingSet> {
    let data = model.encode_texts(view.captions.as_flattened())?;
    EmbeddingSet::new(
        data,
        Modality::Text,
        true,
        Some(factor_labels(view)?),
        format!("encoded {split} captions"),
    )
}

/// One prompt embedding set per factor, in [`ALL_FACTORS`] order.
fn encode_prompts(model: &DualEncoder<f32>) -> Result<Vec<(Factor, EmbeddingSet)>> {
    ALL_FACTORS
        .iter()
        .map(|&factor| {
            let tokens = zeroshot::task_prompt_tokens(factor)?;
            let data = model.encode_texts(&tokens)?;
            let set = EmbeddingSet::new(
                data,
                Modality::Text,
                true,
                None,
                format!("{} class prompts", factor.name()),
            )?;
            Ok((factor, set))
        })
        .collect()
}

/// Ideal-word directions per factor from reference text embeddings. Digit
/// directions marginalize over pooled attribute values; attribute
/// directions marginalize over digits. Factors whose classes are not all
/// present in the reference rows are skipped (only relevant at toy scale).
fn ideal_words(texts: &EmbeddingSet) -> Result<Vec<(Factor, IdealVectors)>> {
    let digit_groups = mad::factor_groups(texts, Factor::Digit)?;
    let pooled = mad::pooled_attribute_groups(texts)?;
    let mut out = Vec::new();
    for &factor in &ALL_FACTORS {
        let groups = mad::factor_groups(texts, factor)?;
        if groups.len() != factor.values().len() {
            continue;
        }
        let marginal = if factor == Factor::Digit {
            &pooled
        } else {
            &digit_groups
        };
        out.push((factor, bias::ideal_vectors(texts, &groups, marginal)?));
    }
    Ok(out)
}

/// Zero-shot accuracies for every factor plus the mean ideal-word accuracy.
fn evaluate_split(
    images: &EmbeddingSet,
    prompts: &[(Factor, EmbeddingSet)],
    ideals: &[(Factor, IdealVectors)],
) -> Result<EvalReport> {
    let mut digit_accuracy = 0.0;
    let mut attribute_accuracies = std::collections::BTreeMap::new();
    for (factor, prompt_set) in prompts {
        let acc = zeroshot::zero_shot_accuracy(images, prompt_set, factor.name())?;
        if *factor == Factor::Digit {
            digit_accuracy = acc;
        } else {
            attribute_accuracies.insert(factor.name().to_string(), acc);
        }
    }
    if ideals.is_empty() {
        return Err(Error::InvalidArgument(
            "no factor had full class coverage for ideal words".into(),
        ));
    }
    let mut ideal_sum = 0.0;
    for (factor, ideal) in ideals {
        ideal_sum += zeroshot::ideal_word_accuracy(images, ideal, factor.name())?;
    }
    EvalReport::new(
        digit_accuracy,
        attribute_accuracies,
        ideal_sum / ideals.len() as f64,
    )
}

/// Drop groups too small to contribute within-group pairs; the bias
/// metrics need two samples per group. A no-op at real dataset sizes,
/// only tiny splits produce singleton classes.
fn pair_capable(groups: &GroupIndex, n_rows: usize) -> Result<GroupIndex> {
    let kept: Vec<(String, Vec<usize>)> = groups
        .iter()
        .filter(|(_, idx)| idx.len() >= 2)
        .map(|(label, idx)| (label.to_string(), idx.to_vec()))
        .collect();
    GroupIndex::new(kept, n_rows)
}

/// Full evaluation of a trained model: ideal-word directions come from the
/// `reference` split's captions, zero-shot and ideal-word accuracies are
/// measured on the `images` split.
pub fn evaluate_on(
    model: &DualEncoder<f32>,
    reference: &MadSplitView<'_>,
    images: &MadSplitView<'_>,
) -> Result<EvalReport> {
    let texts = encode_texts(model, reference, "reference")?;
    let ideals = ideal_words(&texts)?;
    let prompts = encode_prompts(model)?;
    let image_set = encode_images(model, images, "eval")?;
    evaluate_split(&image_set, &prompts, &ideals)
}

/// MOAD proper: digit groups against pooled attribute groups.
pub fn standard_moad(set: &EmbeddingSet, cfg: &MetricsConfig) -> Result<MoadResult> {
    let objects = pair_capable(&mad::factor_groups(set, Factor::Digit)?, set.n())?;
    let attributes = pair_capable(&mad::pooled_attribute_groups(set)?, set.n())?;
    bias::moad(set, &objects, &attributes, cfg)
}

/// Presence-bias MOAD: the always-present factor's groups against every
/// other factor's values pooled into one grouping.
pub fn presence_moad(
    set: &EmbeddingSet,
    always: Factor,
    cfg: &MetricsConfig,
) -> Result<MoadResult> {
    let target = pair_capable(&mad::factor_groups(set, always)?, set.n())?;
    let others = pair_capable(&pooled_groups_excluding(set, always)?, set.n())?;
    bias::factor_moad(set, &target, &others, cfg)
}

/// Pool every factor except `exclude` into one value-per-group index;
/// factor words are globally unique so the labels cannot collide.
pub fn pooled_groups_excluding(set: &EmbeddingSet, exclude: Factor) -> Result<GroupIndex> {
    let labels = set.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("embedding set carries no factor labels".into())
    })?;
    let parsed: Vec<mad::LatentFactors> = labels
        .iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value(v.clone()).map_err(|e| {
                Error::InvalidArgument(format!("label record {i} is not a factor record: {e}"))
            })
        })
        .collect::<Result<_>>()?;
    let kept: Vec<Factor> = ALL_FACTORS.into_iter().filter(|f| *f != exclude).collect();
    let mut groups: Vec<(String, Vec<usize>)> = kept
        .iter()
        .flat_map(|f| f.values().iter().map(|w| (w.to_string(), Vec::new())))
        .collect();
    for (i, f) in parsed.iter().enumerate() {
        for factor in &kept {
            let word = factor.word_of(f);
            let slot = groups
                .iter_mut()
                .find(|(label, _)| label == word)
                .expect("value table covers every word");
            slot.1.push(i);
        }
    }
    groups.retain(|(_, idx)| !idx.is_empty());
    GroupIndex::new(groups, set.n())
}
