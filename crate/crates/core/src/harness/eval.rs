use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{save_checkpoint, train, ExperimentConfig, ExperimentData, TrainingLog};
use crate::detect::{self, DetectionScore, MetricsReport, ScoreHistograms, ScoreKind, ThresholdCalibration, GROUPS};
use crate::error::{Error, Result};
use crate::model::{BatchInputs, WoodModel};
use crate::par;
use crate::scenarios::{PairedDataset, PairedSample};

pub const LAMBDA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const MARGIN_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

const SCORE_CHUNK: usize = 256;

/// How the decision threshold is obtained.
#[derive(Debug, Clone, Copy)]
pub enum Threshold<'a> {
    /// A fixed `δ` shared by every scoring rule.
    Fixed(f64),
    /// Calibrate `δ` per scoring rule on ID samples.
    Calibrate { samples: &'a [PairedSample], target: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: Vec<DetectionScore>,
    pub calibration: BTreeMap<ScoreKind, ThresholdCalibration>,
    pub deltas: BTreeMap<ScoreKind, f64>,
    pub reports: BTreeMap<ScoreKind, MetricsReport>,
    pub histograms: ScoreHistograms,
}

impl Evaluation {
    pub fn report(&self, kind: ScoreKind) -> &MetricsReport {
        &self.reports[&kind]
    }

    /// One line per sample: `scenario  ood_flag  p_bc  p_cl  p_ood`.
    pub fn scores_tsv(&self) -> String {
        let mut out = String::from("scenario\tood_flag\tp_bc\tp_cl\tp_ood\n");
        for s in &self.scores {
            let _ = writeln!(out, "{}\t{}\t{:?}\t{:?}\t{:?}", s.scenario, s.ood_flag as u8, s.p_bc, s.p_cl, s.p_ood);
        }
        out
    }

    /// `score_kind  delta` rows for histogram threshold markers.
    pub fn thresholds_tsv(&self) -> String {
        let mut out = String::from("score\tdelta\n");
        for (k, d) in &self.deltas {
            let _ = writeln!(out, "{}\t{d:?}", k.as_str());
        }
        out
    }
}

/// Parses the output of [`Evaluation::scores_tsv`].
pub fn read_scores_tsv(text: &str) -> Result<Vec<DetectionScore>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |reason: String| Error::Manifest { line: i + 1, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 columns, found {}", cols.len())));
        }
        let num = |c: &str| c.parse::<f64>().map_err(|e| bad(format!("{c:?}: {e}")));
        let scenario = cols[0].parse().map_err(|e: Error| bad(e.to_string()))?;
        let flag = match cols[1] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("bad ood flag {other:?}"))),
        };
        let s = DetectionScore::new(num(cols[2])?, num(cols[3])?, flag, scenario).map_err(|e| bad(e.to_string()))?;
        out.push(s);
    }
    Ok(out)
}

/// Per-sample `(p_bc, p_cl)` in sample order.
pub(crate) fn score_samples(model: &WoodModel, samples: &[PairedSample]) -> Result<Vec<(f64, f64)>> {
    let chunks: Vec<&[PairedSample]> = samples.chunks(SCORE_CHUNK).collect();
    let scored = par::map_slice(&chunks, |chunk| -> Result<Vec<(f64, f64)>> {
        let (p_bc, p_cl) = model.score(&BatchInputs::from_samples(*chunk)?)?;
        Ok(p_bc.iter().copied().zip(p_cl.iter().copied()).collect())
    });
    let mut out = Vec::with_capacity(samples.len());
    for chunk in scored {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Scores `test`, thresholds every scoring rule and reports per-group metrics.
pub fn evaluate(model: &WoodModel, test: &PairedDataset, threshold: Threshold<'_>, bins: usize) -> Result<Evaluation> {
    let scores: Vec<DetectionScore> = score_samples(model, &test.samples)?
        .into_iter()
        .zip(&test.samples)
        .map(|((p_bc, p_cl), s)| DetectionScore::new(p_bc, p_cl, s.ood_flag, s.scenario))
        .collect::<Result<_>>()?;

    let mut calibration = BTreeMap::new();
    let mut deltas = BTreeMap::new();
    match threshold {
        Threshold::Fixed(delta) => {
            if !(0.0..=1.0).contains(&delta) {
                return Err(Error::invalid(format!("delta must lie in [0, 1], got {delta}")));
            }
            for k in ScoreKind::ALL {
                deltas.insert(k, delta);
            }
        }
        Threshold::Calibrate { samples, target } => {
            let cal: Vec<DetectionScore> = score_samples(model, samples)?
                .into_iter()
                .map(|(p_bc, p_cl)| DetectionScore::new(p_bc, p_cl, false, crate::scenarios::Scenario::Id))
                .collect::<Result<_>>()?;
            for k in ScoreKind::ALL {
                let ids: Vec<f64> = cal.iter().map(|s| s.id_score(k)).collect();
                let c = detect::calibrate_threshold(&ids, target)?;
                deltas.insert(k, c.delta);
                calibration.insert(k, c);
            }
        }
    }
    let mut reports = BTreeMap::new();
    for k in ScoreKind::ALL {
        reports.insert(k, detect::metrics_report(&scores, k, deltas[&k])?);
    }
    let histograms = detect::score_histograms(&scores, bins, deltas[&ScoreKind::Unified])?;
    Ok(Evaluation { scores, calibration, deltas, reports, histograms })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Margin,
}

impl SweepParam {
    pub fn grid(self) -> &'static [f64] {
        match self {
            SweepParam::Lambda => &LAMBDA_GRID,
            SweepParam::Margin => &MARGIN_GRID,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Margin => "margin",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "margin" | "m" => Ok(SweepParam::Margin),
            other => Err(Error::invalid(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Rows are parameter values; columns are Acc / Recall / Prec. / F1 per group.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>8}", self.param.as_str());
        for g in GROUPS {
            let _ = write!(out, " | {g:^31}");
        }
        out.push('\n');
        let _ = write!(out, "{:>8}", "");
        for _ in GROUPS {
            let _ = write!(out, " | {:>6} {:>7} {:>7} {:>7}", "Accy", "Recall", "Prec.", "F1");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:>8}", row.value);
            for g in GROUPS {
                let m = &row.report.groups[g];
                let _ = write!(out, " | {:>6.1} {:>7.1} {:>7.1} {:>7.1}", m.accuracy, m.recall, m.precision, m.f1);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per value on shared data and reports the unified score
/// at each model's calibrated threshold. Runs are independent and execute in
/// parallel.
pub fn ablation_sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    for &v in values {
        let ok = match param {
            SweepParam::Lambda => (0.0..=1.0).contains(&v),
            SweepParam::Margin => (0.0..=2.0).contains(&v),
        };
        if !ok {
            return Err(Error::invalid(format!("{} value {v} out of range", param.as_str())));
        }
    }
    let data = ExperimentData::build(config)?;
    let rows = par::map_slice(values, |&value| -> Result<SweepRow> {
        let mut cfg = config.clone();
        match param {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Margin => cfg.margin = value,
        }
        let out = train(&cfg, &data, None)?;
        let eval = evaluate(
            &out.model,
            &data.test,
            Threshold::Calibrate { samples: &data.calibration, target: cfg.calibration_target },
            cfg.histogram_bins,
        )?;
        Ok(SweepRow { value, report: eval.reports[&ScoreKind::Unified].clone() })
    });
    Ok(SweepTable { param, rows: rows.into_iter().collect::<Result<_>>()? })
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub model: WoodModel,
    pub log: TrainingLog,
    pub evaluation: Evaluation,
}

/// Trains, calibrates and evaluates, writing every artifact into `dir`:
/// `config.toml`, `train_log.jsonl`, `model.ckpt`, `calibration.json`,
/// `metrics.json`, `metrics_ablations.json`, `metrics.txt`, `scores.tsv`,
/// `histograms.tsv` and `thresholds.tsv`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;
    let data = ExperimentData::build(config)?;
    let mut log_file = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
    let out = train(config, &data, Some(&mut log_file))?;
    drop(log_file);
    save_checkpoint(&out.model, Some(config), config.epochs, &out.log.epoch_losses(), &dir.join("model.ckpt"))?;
    let evaluation = evaluate(
        &out.model,
        &data.test,
        Threshold::Calibrate { samples: &data.calibration, target: config.calibration_target },
        config.histogram_bins,
    )?;
    write_evaluation(&evaluation, dir)?;
    Ok(RunSummary { model: out.model, log: out.log, evaluation })
}

/// Writes the evaluation artifacts listed in [`run_experiment`].
pub fn write_evaluation(eval: &Evaluation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("calibration.json"), serde_json::to_string_pretty(&eval.calibration)?)?;
    let unified = &eval.reports[&ScoreKind::Unified];
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&unified.groups)?)?;
    let ablations: BTreeMap<&str, &MetricsReport> = eval.reports.iter().map(|(k, r)| (k.as_str(), r)).collect();
    fs::write(dir.join("metrics_ablations.json"), serde_json::to_string_pretty(&ablations)?)?;
    let mut table = String::new();
    for (k, r) in &eval.reports {
        table.push_str(&r.to_table(&format!("{} (delta = {:.6})", k.as_str(), eval.deltas[k])));
        table.push('\n');
    }
    fs::write(dir.join("metrics.txt"), table)?;
    fs::write(dir.join("scores.tsv"), eval.scores_tsv())?;
    fs::write(dir.join("histograms.tsv"), eval.histograms.to_tsv())?;
    fs::write(dir.join("thresholds.tsv"), eval.thresholds_tsv())?;
    Ok(())
}
