use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use nla_slr::config::load_config;
use nla_slr::error::{Error, Result};
use nla_slr::eval::{
    build_report, partition_report, predict_many, Crops, EvalReport, InferenceSetup,
    PartitionThresholds,
};
use nla_slr::glosslex::{language_aware_soft_label, load_word_vectors};
use nla_slr::model::{export_inference, load_checkpoint, save_checkpoint};
use nla_slr::synthdata::{generate_dataset, load_dataset, save_dataset, SynthSpec};
use nla_slr::trainer::{train, TrainConfig, TrainOutput};

#[derive(Parser)]
#[command(
    name = "nla-slr",
    version,
    about = "Sign recognition with gloss-aware soft labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.tnc and metrics.csv into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run single-threaded.
        #[arg(long)]
        reproducible: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
        crops: u8,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the smoothed label of one gloss.
    InspectLabels {
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        gloss: String,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Split test instances into confusable subsets using a baseline report.
    VisignPartition {
        #[arg(long)]
        baseline_report: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 0.5)]
        similarity: f64,
    },
    /// Export a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep only the backbone and the inference classifiers.
        #[arg(long)]
        inference_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[derive(Serialize)]
struct LabelEntry<'a> {
    gloss: &'a str,
    similarity: f64,
    prob: f64,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    error: String,
    epoch: usize,
    batch: usize,
    samples: &'a [String],
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: SynthSpec = load_config(&spec)?;
            let ds = generate_dataset(&spec)?;
            save_dataset(&ds, &out)?;
            log::info!(
                "wrote {} train / {} dev / {} test samples to {}",
                ds.train.len(),
                ds.dev.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            reproducible,
        } => {
            let mut cfg: TrainConfig = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if reproducible {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(1)
                    .build_global()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            }
            let ds = load_dataset(&data)?;
            let result = train(&cfg, &ds, Some(TrainOutput { dir: &out }), |_| {});
            if let Err(Error::NonFiniteLoss {
                epoch,
                batch,
                samples,
            }) = &result
            {
                let dump = NonFiniteDump {
                    error: "non-finite loss".into(),
                    epoch: *epoch,
                    batch: *batch,
                    samples,
                };
                let path = out.join("nonfinite.json");
                if let Err(e) = write_json(&path, &dump) {
                    log::error!("could not write diagnostic dump: {e}");
                } else {
                    log::error!("diagnostic dump written to {}", path.display());
                }
            }
            result?;
        }
        Command::Eval {
            checkpoint,
            data,
            crops,
            report,
            split,
        } => {
            let (model, meta) = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data)?;
            if meta.glosses != ds.lexicon.glosses() {
                return Err(Error::Data(
                    "checkpoint and dataset vocabularies differ".into(),
                ));
            }
            let crops = Crops::from_count(crops as usize)?;
            let setup = InferenceSetup {
                heatmap: meta.heatmap,
                long_len: model.config().vknet.inputs.long_len,
                precision: meta.precision,
                batch_size: 16,
            };
            let samples = ds.split(&split)?;
            let preds = predict_many(&model, samples, crops, &setup)?;
            let r = build_report(
                preds,
                samples,
                &ds.classes,
                &ds.lexicon,
                crops,
                PartitionThresholds::default(),
            )?;
            for (k, v) in &r.per_instance_topk {
                log::info!(
                    "per-instance top-{k}: {v:.4}, per-class: {:.4}",
                    r.per_class_topk[k]
                );
            }
            write_json(&report, &r)?;
        }
        Command::InspectLabels {
            lexicon,
            gloss,
            epsilon,
            tau,
        } => {
            let lex = load_word_vectors(&lexicon)?;
            let b = lex.index_of(&gloss)?;
            let label = language_aware_soft_label(&lex, b, epsilon, tau)?;
            let entries: Vec<LabelEntry> = lex
                .glosses()
                .iter()
                .enumerate()
                .map(|(i, g)| LabelEntry {
                    gloss: g,
                    similarity: lex.similarity(b, i),
                    prob: label.probs[i],
                })
                .collect();
            let out = serde_json::json!({
                "gloss": gloss,
                "epsilon": epsilon,
                "tau": tau,
                "labels": entries,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&out).expect("serializable")
            );
        }
        Command::VisignPartition {
            baseline_report,
            lexicon,
            out,
            delta,
            similarity,
        } => {
            let baseline: EvalReport = read_json(&baseline_report)?;
            let lex = load_word_vectors(&lexicon)?;
            let p = partition_report(&baseline, &lex, PartitionThresholds { delta, similarity })?;
            log::info!("subset sizes: {:?}", p.counts);
            write_json(&out, &p)?;
        }
        Command::Export {
            checkpoint,
            inference_only,
            out,
        } => {
            if !inference_only {
                return Err(Error::Config(
                    "only --inference-only export is supported".into(),
                ));
            }
            let (model, meta) = load_checkpoint(&checkpoint)?;
            let (model, meta) = export_inference(&model, &meta)?;
            save_checkpoint(&out, &model, &meta)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
