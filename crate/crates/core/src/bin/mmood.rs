use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmood::detect::{self, ScoreKind};
use mmood::harness::{
    self, ExperimentConfig, ExperimentData, SweepParam, Threshold,
};
use mmood::scenarios::{self, DatasetManifest, PairedDataset};
use mmood::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mmood", version, about = "Weakly supervised multi-modal OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the synthetic corpus and scenario pools and write them as manifests.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, calibrate and evaluate one run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the decision threshold of a checkpoint on held-out ID data.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config used to rebuild data; defaults to the checkpoint's snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the balanced test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "calibrate", required_unless_present = "calibrate")]
        delta: Option<f64>,
        #[arg(long)]
        calibrate: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per parameter value and tabulate the results.
    Sweep {
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated values; defaults to the standard grid.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Option<Vec<f64>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild histogram and metric data files from a run's scores.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Param {
    Lambda,
    Margin,
}

impl From<Param> for SweepParam {
    fn from(p: Param) -> Self {
        match p {
            Param::Lambda => SweepParam::Lambda,
            Param::Margin => SweepParam::Margin,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(explicit: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    explicit.unwrap_or_else(|| config.resolved_output_dir())
}

fn checkpoint_config(ckpt: &harness::Checkpoint, explicit: Option<&Path>) -> Result<ExperimentConfig> {
    match (explicit, &ckpt.config) {
        (Some(p), _) => ExperimentConfig::load(p),
        (None, Some(c)) => Ok(c.clone()),
        (None, None) => Err(Error::Config("checkpoint has no config snapshot; pass --config".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir(out, &cfg);
            fs::create_dir_all(&dir)?;
            let corpus = scenarios::generate_synthetic_corpus(&cfg.data.synthetic, cfg.seed)?;
            scenarios::write_corpus_manifest(&corpus.id_train, &dir.join("id_train.tsv"))?;
            scenarios::write_corpus_manifest(&corpus.id_test, &dir.join("id_test.tsv"))?;
            scenarios::write_corpus_manifest(&corpus.external, &dir.join("external.tsv"))?;
            let data = ExperimentData::build(&cfg)?;
            let manifest = |source: &str| DatasetManifest { source: source.into(), seed: Some(cfg.seed), params: BTreeMap::new() };
            for (sc, pool) in &data.ood_pools {
                let ds = PairedDataset::new(pool.clone(), manifest(sc.as_str()))?;
                scenarios::write_scenario_manifest(&ds, &dir.join(format!("train_ood_{sc}.tsv")))?;
            }
            scenarios::write_scenario_manifest(&data.test, &dir.join("test_split.tsv"))?;
            println!(
                "wrote corpus ({} train / {} test / {} external) and scenario pools to {}",
                corpus.id_train.len(),
                corpus.id_test.len(),
                corpus.external.len(),
                dir.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out_dir(out, &cfg);
            let summary = harness::run_experiment(&cfg, &dir)?;
            let losses = summary.log.epoch_losses();
            for (e, l) in losses.iter().enumerate() {
                println!("epoch {e}: mean loss {l:.6}");
            }
            for k in ScoreKind::ALL {
                let title = format!("{} (delta = {:.6})", k.as_str(), summary.evaluation.deltas[&k]);
                println!("{}", summary.evaluation.report(k).to_table(&title));
            }
            println!("artifacts in {}", dir.display());
        }
        Command::Calibrate { checkpoint, config, out } => {
            let ckpt = harness::load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let data = ExperimentData::build(&cfg)?;
            let mut result = BTreeMap::new();
            let scored = harness::evaluate(
                &ckpt.model,
                &data.test,
                Threshold::Calibrate { samples: &data.calibration, target: cfg.calibration_target },
                cfg.histogram_bins,
            )?;
            for (k, c) in &scored.calibration {
                println!("{}: delta = {:.6} ({} ID samples, target {})", k.as_str(), c.delta, c.calibration_size, c.target_id_fraction);
                result.insert(k.as_str(), c.clone());
            }
            let dir = out_dir(out, &cfg);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("calibration.json"), serde_json::to_string_pretty(&result)?)?;
        }
        Command::Eval { checkpoint, delta, calibrate, config, out } => {
            let ckpt = harness::load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(&ckpt, config.as_deref())?;
            let data = ExperimentData::build(&cfg)?;
            let threshold = match (delta, calibrate) {
                (Some(d), false) => Threshold::Fixed(d),
                _ => Threshold::Calibrate { samples: &data.calibration, target: cfg.calibration_target },
            };
            let eval = harness::evaluate(&ckpt.model, &data.test, threshold, cfg.histogram_bins)?;
            let dir = out_dir(out, &cfg);
            harness::write_evaluation(&eval, &dir)?;
            for k in ScoreKind::ALL {
                println!("{}", eval.report(k).to_table(&format!("{} (delta = {:.6})", k.as_str(), eval.deltas[&k])));
            }
        }
        Command::Sweep { param, values, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let param = SweepParam::from(param);
            let values = values.unwrap_or_else(|| param.grid().to_vec());
            let table = harness::ablation_sweep(&cfg, param, &values)?;
            let dir = out_dir(out, &cfg);
            fs::create_dir_all(&dir)?;
            let text = table.to_table();
            fs::write(dir.join(format!("sweep_{}.txt", param.as_str())), &text)?;
            fs::write(dir.join(format!("sweep_{}.json", param.as_str())), serde_json::to_string_pretty(&table)?)?;
            print!("{text}");
        }
        Command::Plot { run, bins } => {
            let scores = harness::read_scores_tsv(&fs::read_to_string(run.join("scores.tsv"))?)?;
            let thresholds = fs::read_to_string(run.join("thresholds.tsv"))?;
            let mut deltas = BTreeMap::new();
            for (i, line) in thresholds.lines().enumerate().skip(1) {
                let bad = |reason: String| Error::Manifest { line: i + 1, reason };
                let (name, value) = line.split_once('\t').ok_or_else(|| bad("expected 2 columns".into()))?;
                let kind = ScoreKind::ALL
                    .into_iter()
                    .find(|k| k.as_str() == name)
                    .ok_or_else(|| bad(format!("unknown score {name:?}")))?;
                deltas.insert(kind, value.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            }
            let unified = *deltas
                .get(&ScoreKind::Unified)
                .ok_or_else(|| Error::InvalidArgument("thresholds.tsv has no unified threshold".into()))?;
            let hist = detect::score_histograms(&scores, bins, unified)?;
            fs::write(run.join("histograms.tsv"), hist.to_tsv())?;
            let mut reports = BTreeMap::new();
            for (k, d) in &deltas {
                reports.insert(k.as_str(), detect::metrics_report(&scores, *k, *d)?);
            }
            fs::write(run.join("metrics.json"), serde_json::to_string_pretty(&reports["unified"].groups)?)?;
            println!("wrote histograms.tsv and metrics.json to {}", run.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
