//! `mmgap` — command-line front end for the multimodal gap toolkit.
//!
//! Every subcommand is a thin wrapper over the library: dataset
//! generation, contrastive training, embedding export, gap/bias metrics,
//! dimension ablation, zero-shot evaluation, the 2-D toy experiment, the
//! full sweep runners and report emission.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mmgap_core::ablation::{ablation_sweep, Evaluator};
use mmgap_core::clip::{self, checkpoint, ModelConfig, TrainConfig};
use mmgap_core::gap;
use mmgap_core::harness::{self, report, RunStatus, SweepConfig};
use mmgap_core::mad::{self, CaptionPolicy, Factor, MadDataset, MadDatasetConfig};
use mmgap_core::store::{make_paired, read_embedding_set, write_embedding_set, MetricsConfig};
use mmgap_core::toy::{self, ToyConfig, ToyPairMultiset, ToySetting};

#[derive(Parser)]
#[command(
    name = "mmgap",
    about = "Measure and manipulate the modality gap of two-tower contrastive models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file for the subcommand (fields depend on the command).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a morphologically varied digit dataset with captions.
    #[command(name = "mad-gen")]
    MadGen(MadGenArgs),
    /// Train a two-tower contrastive model on a generated dataset.
    #[command(name = "train")]
    Train(TrainArgs),
    /// Encode a dataset split with a trained model and store the embeddings.
    #[command(name = "embed")]
    Embed(EmbedArgs),
    /// Gap and bias metrics over stored image/text embeddings.
    #[command(name = "metrics")]
    Metrics(PairArgs),
    /// Successive dimension ablation over stored embeddings.
    #[command(name = "ablate")]
    Ablate(AblateArgs),
    /// Zero-shot and ideal-word accuracy of a trained model.
    #[command(name = "zeroshot")]
    Zeroshot(ZeroshotArgs),
    /// Grid-search the 2-D toy contrastive problem on the unit circle.
    #[command(name = "toy2d")]
    Toy2d(ToyArgs),
    /// Run the caption-richness sweep (trains one model per setting).
    #[command(name = "sweep")]
    Sweep(SweepArgs),
    /// Run the caption-presence-bias experiment.
    #[command(name = "presence-bias")]
    PresenceBias(SweepArgs),
    /// Render CSV tables and SVG figures from a finished results directory.
    #[command(name = "report")]
    Report(ReportArgs),
}

#[derive(Args)]
struct MadGenArgs {
    /// Attribute words per caption (information-imbalance policy).
    #[arg(long, conflicts_with = "always_factor")]
    k: Option<u8>,
    /// Factor whose word appears in every caption (presence-bias policy).
    #[arg(long)]
    always_factor: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `mad-gen`.
    #[arg(long)]
    dataset: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Run directory or checkpoint file from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Args)]
struct PairArgs {
    /// Stored image-embedding directory.
    #[arg(long)]
    images: PathBuf,
    /// Stored text-embedding directory.
    #[arg(long)]
    texts: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    pair: PairArgs,
    /// Number of gap dimensions to remove, one at a time.
    #[arg(long, default_value_t = 16)]
    max_k: usize,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Image split to evaluate (ideal words always come from the train
    /// split's captions).
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, value_enum, default_value_t = ToySettingArg::Mismatch)]
    setting: ToySettingArg,
    /// Grid resolution in degrees (must divide 360).
    #[arg(long, default_value_t = 6)]
    resolution: u32,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Replace the duplicated matched pair of the mismatched multiset with
    /// a second cross pair.
    #[arg(long)]
    variant_mismatch: bool,
    /// Also search at the standard temperature triple and report which, if
    /// any, lands on the reference optimum.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Use the CI-scale preset (small dataset, short schedule).
    #[arg(long)]
    reduced: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory written by `sweep`/`presence-bias`.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToySettingArg {
    Perfect,
    Mismatch,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MadGen(args) => cmd_mad_gen(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Embed(args) => cmd_embed(&cli, args),
        Command::Metrics(args) => cmd_metrics(&cli, args),
        Command::Ablate(args) => cmd_ablate(&cli, args),
        Command::Zeroshot(args) => cmd_zeroshot(&cli, args),
        Command::Toy2d(args) => cmd_toy2d(&cli, args),
        Command::Sweep(args) => cmd_sweep(&cli, args, false),
        Command::PresenceBias(args) => cmd_sweep(&cli, args, true),
        Command::Report(args) => cmd_report(&cli, args),
    }
}

/// Load the `--config` JSON into `T`, or fall back to its default.
fn load_config<T: DeserializeOwned + Default>(cli: &Cli) -> Result<T> {
    match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
        }
        None => Ok(T::default()),
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .context("this command needs --out <dir>")
}

/// Print a serializable result to stdout and, when `--out` names a `.json`
/// path, also write it there.
fn emit_json<T: Serialize>(cli: &Cli, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(path) = &cli.out {
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn load_split<'a>(dataset: &'a MadDataset, split: Split) -> mad::MadSplitView<'a> {
    match split {
        Split::Train => dataset.train(),
        Split::Test => dataset.test(),
    }
}

fn cmd_mad_gen(cli: &Cli, args: &MadGenArgs) -> Result<()> {
    let mut cfg: MadDatasetConfig = load_config(cli)?;
    if let Some(k) = args.k {
        cfg.policy = CaptionPolicy::InformationImbalance { k };
    }
    if let Some(name) = &args.always_factor {
        cfg.policy = CaptionPolicy::PresenceBias {
            always_factor: Factor::from_name(name)?,
        };
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = require_out(cli)?;
    let meta = mad::generate_dataset(&cfg, out)?;
    println!(
        "wrote {} train + {} test samples to {}",
        meta.n_train,
        meta.n_test,
        out.display()
    );
    Ok(())
}

/// `train --config` layout: model and trainer sections, both optional.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSpec {
    model: ModelConfig,
    train: TrainConfig,
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let spec: TrainSpec = load_config(cli)?;
    let mut tcfg = spec.train;
    if let Some(seed) = cli.seed {
        tcfg.seed = seed;
    }
    let out = require_out(cli)?;
    let dataset = mad::load_dataset(&args.dataset)?;
    let train = dataset.train();
    eprintln!(
        "training on {} samples ({} epochs, dim {})",
        train.n(),
        tcfg.epochs,
        spec.model.embed_dim
    );
    let captions: Vec<u8> = train.captions.iter().flatten().copied().collect();
    let (model, log) = clip::train(train.images, &captions, &spec.model, &tcfg)?;
    fs::create_dir_all(out)?;
    let path = checkpoint::save(out, &model, Some(&log))?;
    println!(
        "saved {} (final training loss {:.4})",
        path.display(),
        log.final_loss()
    );
    Ok(())
}

fn cmd_embed(cli: &Cli, args: &EmbedArgs) -> Result<()> {
    let out = require_out(cli)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let dataset = mad::load_dataset(&args.dataset)?;
    let view = load_split(&dataset, args.split);
    let name = match args.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let images = harness::encode_images(&model, &view, name)?;
    let texts = harness::encode_texts(&model, &view, name)?;
    write_embedding_set(&images, &out.join("images"))?;
    write_embedding_set(&texts, &out.join("texts"))?;
    println!(
        "wrote {} embedding pairs of dim {} to {}",
        images.n(),
        images.dim(),
        out.display()
    );
    Ok(())
}

/// Output of `metrics`: the gap report plus, when the stored labels carry
/// factor records, the object/attribute bias of each modality.
#[derive(Serialize)]
struct MetricsOutput {
    gap: gap::GapReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    moad_img: Option<mmgap_core::bias::MoadResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    moad_txt: Option<mmgap_core::bias::MoadResult>,
}

fn cmd_metrics(cli: &Cli, args: &PairArgs) -> Result<()> {
    let mut cfg: MetricsConfig = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.rng_seed = seed;
    }
    let images = read_embedding_set(&args.images)?;
    let texts = read_embedding_set(&args.texts)?;
    let moad_img = harness::standard_moad(&images, &cfg).ok();
    let moad_txt = harness::standard_moad(&texts, &cfg).ok();
    let pairs = make_paired(images, texts)?;
    let output = MetricsOutput {
        gap: gap::gap_report(&pairs, &cfg)?,
        moad_img,
        moad_txt,
    };
    emit_json(cli, &output)
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let cfg: MetricsConfig = load_config(cli)?;
    let out = require_out(cli)?;
    let images = read_embedding_set(&args.pair.images)?;
    let texts = read_embedding_set(&args.pair.texts)?;
    let pairs = make_paired(images, texts)?;
    if args.max_k >= pairs.dim() {
        bail!(
            "--max-k {} must stay below the embedding dimension {}",
            args.max_k,
            pairs.dim()
        );
    }
    let evaluators = [
        Evaluator::new("l2m", |p, _| Ok(gap::l2m(p))),
        Evaluator::new("rmg", {
            let cfg = cfg.clone();
            move |p, _| gap::rmg(p, &cfg)
        }),
    ];
    let curve = ablation_sweep(&pairs, &evaluators, args.max_k, &cfg)?;
    fs::create_dir_all(out)?;
    let csv_path = out.join("ablation.csv");
    fs::write(&csv_path, curve.to_csv())?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_zeroshot(cli: &Cli, args: &ZeroshotArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let dataset = mad::load_dataset(&args.dataset)?;
    let reference = dataset.train();
    let images = load_split(&dataset, args.split);
    let eval = harness::evaluate_on(&model, &reference, &images)?;
    emit_json(cli, &eval)
}

fn cmd_toy2d(cli: &Cli, args: &ToyArgs) -> Result<()> {
    let mut cfg: ToyConfig = load_config(cli)?;
    // Explicit flags override the config file.
    cfg.resolution_degrees = args.resolution;
    cfg.temperature = args.temperature;
    cfg.setting = match (args.setting, args.variant_mismatch) {
        (ToySettingArg::Perfect, _) => ToySetting::Perfect,
        (ToySettingArg::Mismatch, false) => ToySetting::Mismatch,
        (ToySettingArg::Mismatch, true) => {
            ToySetting::Custom(ToyPairMultiset::mismatch_variant().pairs().to_vec())
        }
    };
    let optimum = toy::grid_search(&cfg)?;
    emit_json(cli, &optimum)?;

    if let Some(out) = &cli.out {
        if out.extension().is_none() {
            fs::create_dir_all(out)?;
            let json = serde_json::to_string_pretty(&optimum)?;
            fs::write(out.join("toy2d.json"), json)?;
            let title = match cfg.setting {
                ToySetting::Perfect => "Toy optimum, matched pairs",
                _ => "Toy optimum, mismatched pairs",
            };
            let figure = report::toy_figure(
                title,
                optimum.angles.to_array(),
                optimum.loss,
                optimum.matched_gap,
            );
            fs::write(out.join("toy2d.svg"), figure)?;
            println!("wrote {}", out.join("toy2d.svg").display());
        }
    }

    if args.sweep {
        let entries = toy::temperature_sweep(
            args.resolution,
            &toy::SWEEP_TEMPERATURES,
            args.variant_mismatch,
        )?;
        for entry in &entries {
            let c = entry.optimum.canonical_angles;
            println!(
                "tau={:<5} canonical=[{}, {}, {}, {}] gap={:.4} reference={}",
                entry.temperature,
                c.x1,
                c.x2,
                c.y1,
                c.y2,
                entry.optimum.matched_gap,
                if entry.reproduces_reference { "yes" } else { "no" }
            );
        }
        if let Some(out) = &cli.out {
            if out.extension().is_none() {
                let json = serde_json::to_string_pretty(&entries)?;
                fs::write(out.join("toy2d-sweep.json"), json)?;
            }
        }
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs, presence: bool) -> Result<()> {
    let mut cfg: SweepConfig = if args.reduced {
        let out = cli
            .out
            .as_deref()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("results"));
        SweepConfig::reduced(out)
    } else {
        load_config(cli)?
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    let outcomes = if presence {
        harness::run_presence_bias(&cfg)?
    } else {
        harness::run_sweep(&cfg)?
    };
    let mut failed = 0usize;
    for outcome in &outcomes {
        let name = outcome
            .dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        match &outcome.status {
            RunStatus::Computed => println!("{name}: computed"),
            RunStatus::Cached => println!("{name}: cached"),
            RunStatus::Failed(msg) => {
                failed += 1;
                println!("{name}: FAILED ({msg})");
            }
        }
    }
    println!(
        "{} run(s) settled in {}",
        outcomes.len(),
        cfg.out_dir.display()
    );
    if failed > 0 {
        bail!("{failed} run(s) failed; see error.json in their run directories");
    }
    Ok(())
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let mut cfg: SweepConfig = load_config(cli)?;
    if let Some(results) = &args.results {
        cfg.out_dir = results.clone();
    }
    let out = require_out(cli)?;
    if out == cfg.out_dir {
        bail!("the report directory must differ from the results directory");
    }
    let files = report::emit_report(&cfg, out)?;
    for file in &files.files {
        println!("wrote {}", file.display());
    }
    for (k, score) in &files.silhouettes {
        println!("modality silhouette at k={k}: {score:.3}");
    }
    Ok(())
}
