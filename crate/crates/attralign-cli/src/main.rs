//! Command-line frontend: synthetic data generation, training, retrieval
//! evaluation, description parsing, surrogate inspection, and gradient
//! checks.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use attralign::data::{gen_synthetic, write_jsonl, Dataset, SyntheticSpec};
use attralign::encoder::Model;
use attralign::error::Error as LibError;
use attralign::eval::{
    attribute_retrieve, build_probe_cases, mean_ap, probe_malpositioned, rank_gallery,
    recall_at_k, RankingResult,
};
use attralign::sampler::{k_reciprocal_sample, SamplerInput};
use attralign::textparse::TextPipeline;
use attralign::trainer::{encode_record, fit, metrics_csv, Checkpoint, TrainConfig};
use attralign::types::{AttributeCategory, EmbeddingRecord, Modality};

#[derive(Parser)]
#[command(
    name = "attralign",
    about = "Attribute-aligned person search: train, evaluate, parse, inspect",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val dataset pair from a spec file.
    GenData {
        /// TOML file with the synthetic spec fields.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for train.jsonl and val.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and write a checkpoint plus metric CSV.
    Train {
        /// TOML file mirroring the training config fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Metric CSV path (default: <out>.metrics.csv).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        assets: AssetArgs,
    },
    /// Evaluate a checkpoint: Recall@K, mAP, malpositioned probe accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Attribute-term weight of the combined score.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        ablate: Option<Ablation>,
        /// Number of malpositioned probe cases.
        #[arg(long, default_value_t = 200)]
        probe_cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also run one attribute-phrase retrieval query.
        #[arg(long)]
        attr_phrase: Option<String>,
        /// Directory for metrics.csv and summary.json.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        assets: AssetArgs,
    },
    /// Parse a description: tokens, chunks, category assignments, scores.
    Parse {
        #[arg(long)]
        text: String,
        #[arg(long)]
        theta: Option<f64>,
        #[command(flatten)]
        assets: AssetArgs,
    },
    /// Dump the mined surrogate-positive sets per category as JSON.
    InspectSurrogates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        assets: AssetArgs,
    },
    /// Run the finite-difference gradient suites; nonzero exit on failure.
    GradCheck,
}

#[derive(Args)]
struct AssetArgs {
    /// Word-vector file (default: embedded curated store).
    #[arg(long)]
    wordvecs: Option<PathBuf>,
    /// Attribute dictionary file (default: embedded).
    #[arg(long)]
    dictionary: Option<PathBuf>,
    /// Word-class lexicon file (default: embedded).
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    GlobalOnly,
    Full,
}

enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => format!("usage: {m}"),
            CliError::Data(m) => format!("data: {m}"),
            CliError::Check(m) => format!("check: {m}"),
        }
    }
}

impl From<LibError> for CliError {
    fn from(e: LibError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's rich help on stdout for --help/--version
            if e.use_stderr() {
                let first = e.to_string().lines().next().unwrap_or("bad arguments").to_string();
                eprintln!("error: usage: {first}");
                std::process::exit(1);
            }
            e.print().ok();
            std::process::exit(0);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            std::process::exit(e.code());
        }
    }
}

fn load_pipeline(assets: &AssetArgs, theta: f64) -> Result<TextPipeline, CliError> {
    use attralign::textparse::{AttributeDictionary, Lexicon, WordVectorStore};
    let store = match &assets.wordvecs {
        Some(path) => WordVectorStore::from_path(path)?,
        None => WordVectorStore::embedded_default(),
    };
    let dict = match &assets.dictionary {
        Some(path) => AttributeDictionary::from_path(path, &store)?,
        None => AttributeDictionary::embedded_default(&store),
    };
    let lexicon = match &assets.lexicon {
        Some(path) => Lexicon::from_path(path)?,
        None => Lexicon::embedded_default(),
    };
    Ok(TextPipeline {
        store,
        dict,
        lexicon,
        theta,
    })
}

fn load_split(data: &Path, split: Split, pipeline: &TextPipeline) -> Result<Dataset, CliError> {
    let file = match split {
        Split::Train => data.join("train.jsonl"),
        Split::Val => data.join("val.jsonl"),
    };
    if !file.exists() {
        return Err(CliError::Data(format!("{} not found", file.display())));
    }
    Ok(Dataset::from_path(&file, pipeline)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| CliError::Data(format!("{}: {e}", spec.display())))?;
            let spec: SyntheticSpec =
                toml::from_str(&text).map_err(|e| CliError::Data(format!("bad spec: {e}")))?;
            let data = gen_synthetic(&spec)?;
            std::fs::create_dir_all(&out)?;
            write_jsonl(&out.join("train.jsonl"), &data.train)?;
            write_jsonl(&out.join("val.jsonl"), &data.val)?;
            println!(
                "wrote {} train and {} val records to {}",
                data.train.len(),
                data.val.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            metrics,
            seed,
            epochs,
            learning_rate,
            batch_size,
            k,
            assets,
        } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                    toml::from_str::<TrainConfig>(&text)
                        .map_err(|e| CliError::Data(format!("bad config: {e}")))?
                }
                None => TrainConfig::default(),
            };
            // flags take precedence over the file
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            cfg.validate()?;
            let pipeline = load_pipeline(&assets, cfg.theta)?;
            let train = load_split(&data, Split::Train, &pipeline)?;
            let val = load_split(&data, Split::Val, &pipeline)?;
            let result = fit(&train, &val, &cfg)?;
            result.checkpoint.save(&out)?;
            let metrics_path = metrics.unwrap_or_else(|| {
                let mut p = out.as_os_str().to_owned();
                p.push(".metrics.csv");
                PathBuf::from(p)
            });
            std::fs::write(&metrics_path, metrics_csv(&result.metrics))?;
            println!(
                "trained {} epochs, best val R@1 {} at epoch {}; checkpoint {}",
                result.metrics.len(),
                result.best_val_r1,
                result.best_epoch,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            split,
            lambda,
            ablate,
            probe_cases,
            seed,
            attr_phrase,
            out_dir,
            assets,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let pipeline = load_pipeline(&assets, ckpt.config.theta)?;
            let dataset = load_split(&data, split, &pipeline)?;
            let lambda = match (ablate, lambda) {
                (Some(Ablation::GlobalOnly), Some(l)) if l != 0.0 => {
                    return Err(CliError::Usage(
                        "--ablate global-only requires --lambda 0".into(),
                    ))
                }
                (Some(Ablation::GlobalOnly), _) => 0.0,
                (_, Some(l)) => l,
                (None, None) | (Some(Ablation::Full), None) => ckpt.config.eval_lambda,
            };
            let strip_attrs = ablate == Some(Ablation::GlobalOnly);
            let report = evaluate(
                &ckpt.model,
                &ckpt.config,
                &dataset,
                &pipeline,
                lambda,
                strip_attrs,
                probe_cases,
                seed,
            )?;
            for (name, k, value) in &report.rows {
                match k {
                    Some(k) => println!("{name}@{k} {value}"),
                    None => println!("{name} {value}"),
                }
            }
            if let Some(phrase) = attr_phrase {
                let parsed = pipeline.parse(&phrase);
                let category = parsed
                    .phrases
                    .iter()
                    .find_map(|p| p.category)
                    .ok_or_else(|| {
                        CliError::Data(format!("phrase '{phrase}' maps to no category"))
                    })?;
                let gallery: Vec<_> = dataset.visual().cloned().collect();
                let result = attribute_retrieve(
                    &phrase,
                    &gallery,
                    &ckpt.model,
                    &pipeline,
                    category,
                    ckpt.config.zero_norm,
                )?;
                println!(
                    "attr_retrieve category={category} candidates={} r1={} map={}",
                    result.ranking.ranked().len(),
                    result.r1.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                    result.ap.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                );
            }
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                let mut csv = String::from("metric,k,value\n");
                for (name, k, value) in &report.rows {
                    csv.push_str(&format!(
                        "{},{},{}\n",
                        name,
                        k.map(|k| k.to_string()).unwrap_or_default(),
                        value
                    ));
                }
                std::fs::write(dir.join("metrics.csv"), csv)?;
                let summary = serde_json::json!({
                    "lambda": lambda,
                    "split": match split { Split::Train => "train", Split::Val => "val" },
                    "queries": report.queries,
                    "gallery": report.gallery,
                    "recall": {"1": report.r1, "5": report.r5, "10": report.r10},
                    "map": report.map,
                    "probe_accuracy": report.probe_accuracy,
                });
                std::fs::write(
                    dir.join("summary.json"),
                    serde_json::to_string_pretty(&summary).expect("summary serializes"),
                )?;
            }
            Ok(())
        }
        Command::Parse {
            text,
            theta,
            assets,
        } => {
            let pipeline =
                load_pipeline(&assets, theta.unwrap_or(attralign::textparse::DEFAULT_THETA))?;
            let out = pipeline.parse(&text);
            println!("tokens: {}", out.sentence_tokens.join(" "));
            for phrase in &out.phrases {
                match phrase.category {
                    Some(cat) => println!(
                        "chunk [{}] -> {cat} (score {:.4})",
                        phrase.tokens.join(" "),
                        phrase.score
                    ),
                    None => println!("chunk [{}] -> unassigned", phrase.tokens.join(" ")),
                }
            }
            for cat in AttributeCategory::ALL {
                if let Some(tokens) = out.category_tokens(cat) {
                    println!("{cat}: {}", tokens.join(" "));
                }
            }
            Ok(())
        }
        Command::InspectSurrogates {
            ckpt,
            data,
            split,
            k,
            assets,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let pipeline = load_pipeline(&assets, ckpt.config.theta)?;
            let dataset = load_split(&data, split, &pipeline)?;
            let k = k.unwrap_or(ckpt.config.k);
            let mut out = serde_json::Map::new();
            for cat in AttributeCategory::ALL {
                let mut visual = Vec::new();
                let mut textual = Vec::new();
                for (idx, rec) in dataset.records().iter().enumerate() {
                    let encoded = encode_record(&ckpt.model, rec, &ckpt.config)?;
                    if let Some(e) = encoded.attr(cat) {
                        match rec.modality {
                            Modality::Visual => visual.push((idx, e.clone())),
                            Modality::Textual => textual.push((idx, e.clone())),
                        }
                    }
                }
                if visual.is_empty() || textual.is_empty() {
                    out.insert(cat.key().to_string(), serde_json::json!({}));
                    continue;
                }
                let surrogates = k_reciprocal_sample(&SamplerInput::new(visual, textual, k)?)?;
                out.insert(
                    cat.key().to_string(),
                    serde_json::to_value(&surrogates).expect("sets serialize"),
                );
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::Value::Object(out))
                    .expect("json serializes")
            );
            Ok(())
        }
        Command::GradCheck => {
            let report = attralign::check::run_grad_checks()?;
            for suite in &report.suites {
                println!(
                    "{}: {} (max rel err {:.3e} over {} checks, tolerance {:.0e})",
                    suite.name,
                    if suite.passed() { "PASS" } else { "FAIL" },
                    suite.max_rel_err,
                    suite.checks,
                    suite.tolerance
                );
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Check("gradient check failed".into()))
            }
        }
    }
}

struct EvalReport {
    rows: Vec<(&'static str, Option<usize>, f64)>,
    queries: usize,
    gallery: usize,
    r1: f64,
    r5: f64,
    r10: f64,
    map: f64,
    probe_accuracy: f64,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &Model,
    cfg: &TrainConfig,
    dataset: &Dataset,
    pipeline: &TextPipeline,
    lambda: f64,
    strip_attrs: bool,
    probe_count: usize,
    seed: u64,
) -> Result<EvalReport, CliError> {
    let maybe_strip = |rec: EmbeddingRecord| -> Result<EmbeddingRecord, CliError> {
        if !strip_attrs {
            return Ok(rec);
        }
        Ok(EmbeddingRecord::new(
            rec.person_id,
            rec.modality,
            rec.global.clone(),
            Default::default(),
        )?)
    };
    let gallery: Vec<EmbeddingRecord> = dataset
        .visual()
        .map(|r| maybe_strip(encode_record(model, r, cfg)?))
        .collect::<Result<_, CliError>>()?;
    let queries: Vec<EmbeddingRecord> = dataset
        .textual()
        .map(|r| maybe_strip(encode_record(model, r, cfg)?))
        .collect::<Result<_, CliError>>()?;
    if gallery.is_empty() || queries.is_empty() {
        return Err(CliError::Data(
            "evaluation needs both visual and textual records".into(),
        ));
    }
    let gallery_ids: Vec<u32> = gallery.iter().map(|g| g.person_id).collect();
    let rankings: Vec<RankingResult> = queries
        .iter()
        .enumerate()
        .map(|(qi, q)| Ok(rank_gallery(qi, q, &gallery, lambda, cfg.zero_norm)?))
        .collect::<Result<_, CliError>>()?;
    let relevant: Vec<BTreeSet<u32>> = queries
        .iter()
        .map(|q| BTreeSet::from([q.person_id]))
        .collect();
    let r1 = recall_at_k(&rankings, &gallery_ids, &relevant, 1);
    let r5 = recall_at_k(&rankings, &gallery_ids, &relevant, 5);
    let r10 = recall_at_k(&rankings, &gallery_ids, &relevant, 10);
    let map = mean_ap(&rankings, &gallery_ids, &relevant)?;

    let visual: Vec<_> = dataset.visual().collect();
    let textual: Vec<_> = dataset.textual().collect();
    let cases = build_probe_cases(&visual, &textual, probe_count, seed);
    let probe_accuracy = probe_malpositioned(&cases, model, pipeline, cfg, lambda, seed)?;

    Ok(EvalReport {
        rows: vec![
            ("R", Some(1), r1),
            ("R", Some(5), r5),
            ("R", Some(10), r10),
            ("mAP", None, map),
            ("probe_accuracy", None, probe_accuracy),
        ],
        queries: queries.len(),
        gallery: gallery.len(),
        r1,
        r5,
        r10,
        map,
        probe_accuracy,
    })
}
