//! Unified OOD scoring, threshold calibration, decisions and metrics.
//!
//! A pair counts as ID only when both the classifier and the contrastive
//! score vouch for it, so the unified OOD score is `1 - p_bc * p_cl`. The
//! threshold `δ` is placed on the combined ID score `p_bc * p_cl` such that a
//! target fraction of ID calibration pairs lies at or above it; a sample is
//! OOD when `p_ood > 1 - δ`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenarios::Scenario;

/// Minimum number of ID scores accepted by [`calibrate_threshold`].
pub const MIN_CALIBRATION: usize = 20;

pub fn unified_score(p_bc: f64, p_cl: f64) -> Result<f64> {
    for (name, p) in [("p_bc", p_bc), ("p_cl", p_cl)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
        }
    }
    Ok(1.0 - p_bc * p_cl)
}

/// Which probability a detector reads as its ID confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `p_bc * p_cl`.
    Unified,
    /// `p_cl` alone (contrastive-only ablation).
    ContrastiveOnly,
    /// `p_bc` alone (classifier-only ablation).
    ClassifierOnly,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Unified, ScoreKind::ContrastiveOnly, ScoreKind::ClassifierOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Unified => "unified",
            ScoreKind::ContrastiveOnly => "contrastive_only",
            ScoreKind::ClassifierOnly => "classifier_only",
        }
    }
}

/// Scores of one evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub p_bc: f64,
    pub p_cl: f64,
    pub p_ood: f64,
    pub ood_flag: bool,
    pub scenario: Scenario,
}

impl DetectionScore {
    pub fn new(p_bc: f64, p_cl: f64, ood_flag: bool, scenario: Scenario) -> Result<Self> {
        Ok(Self { p_bc, p_cl, p_ood: unified_score(p_bc, p_cl)?, ood_flag, scenario })
    }

    /// ID confidence under a scoring rule; higher means more ID-like.
    pub fn id_score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Unified => self.p_bc * self.p_cl,
            ScoreKind::ContrastiveOnly => self.p_cl,
            ScoreKind::ClassifierOnly => self.p_bc,
        }
    }

    /// OOD score under a scoring rule: `1 - id_score`.
    pub fn ood_score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Unified => self.p_ood,
            _ => 1.0 - self.id_score(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub delta: f64,
    pub target_id_fraction: f64,
    pub calibration_size: usize,
    pub method: String,
}

/// Lower empirical `(1 - target)`-quantile of the ID scores: the order
/// statistic at index `floor((1 - target) (n - 1))` of the ascending sort.
/// At least `target` of the scores are then `>= δ`.
pub fn calibrate_threshold(id_scores: &[f64], target: f64) -> Result<ThresholdCalibration> {
    if id_scores.len() < MIN_CALIBRATION {
        return Err(Error::InsufficientSamples { needed: MIN_CALIBRATION, available: id_scores.len() });
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid(format!("calibration target must lie in (0, 1), got {target}")));
    }
    if id_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration scores"));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((1.0 - target) * (sorted.len() - 1) as f64).floor() as usize;
    Ok(ThresholdCalibration {
        delta: sorted[idx],
        target_id_fraction: target,
        calibration_size: sorted.len(),
        method: "lower empirical quantile".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Id,
    Ood,
}

/// OOD iff `p_ood > 1 - δ`, i.e. the combined ID score falls below `δ`.
pub fn decide(p_ood: f64, delta: f64) -> Decision {
    if p_ood > 1.0 - delta {
        Decision::Ood
    } else {
        Decision::Id
    }
}

/// Thresholds an ID-confidence score directly: OOD iff `id_score < δ`.
pub fn decide_id_score(id_score: f64, delta: f64) -> Decision {
    if id_score < delta {
        Decision::Ood
    } else {
        Decision::Id
    }
}

/// Confusion counts with OOD as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
}

pub fn confusion_metrics(decisions: &[Decision], truths: &[bool]) -> Result<ConfusionMetrics> {
    if decisions.len() != truths.len() {
        return Err(Error::LengthMismatch { left: decisions.len(), right: truths.len() });
    }
    if decisions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut c = Confusion::default();
    for (&d, &is_ood) in decisions.iter().zip(truths) {
        match (d == Decision::Ood, is_ood) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(ConfusionMetrics {
        accuracy: 100.0 * ratio(c.tp + c.tn, c.total()),
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
        counts: c,
    })
}

/// Exact AUROC via the Mann-Whitney rank statistic; ties count one half.
/// `truths[i]` marks sample `i` as OOD (positive).
pub fn auroc(p_ood: &[f64], truths: &[bool]) -> Result<f64> {
    if p_ood.len() != truths.len() {
        return Err(Error::LengthMismatch { left: p_ood.len(), right: truths.len() });
    }
    if p_ood.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let n_pos = truths.iter().filter(|&&t| t).count() as u64;
    let n_neg = truths.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auroc needs both OOD and ID samples"));
    }
    let mut order: Vec<usize> = (0..p_ood.len()).collect();
    order.sort_by(|&a, &b| p_ood[a].total_cmp(&p_ood[b]));
    // Twice the positive rank sum, kept integral: a tie group spanning ranks
    // lo..=hi contributes (lo + hi) per positive member.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p_ood[order[j + 1]] == p_ood[order[i]] {
            j += 1;
        }
        let positives = order[i..=j].iter().filter(|&&k| truths[k]).count() as u64;
        twice_rank_sum += positives * ((i + 1) + (j + 1)) as u64;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Normalized histogram over `[0, 1]` with equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub group: String,
    pub metric: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mass: Vec<f64>,
}

pub fn histogram(group: &str, metric: &str, scores: &[f64], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::invalid("histograms need at least two bins"));
    }
    if scores.is_empty() {
        return Err(Error::invalid(format!("histogram group {group:?} is empty")));
    }
    let mut counts = vec![0usize; bins];
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("score {s} outside [0, 1]")));
        }
        counts[((s * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mass = counts.iter().map(|&c| c as f64 / scores.len() as f64).collect();
    Ok(Histogram { group: group.into(), metric: metric.into(), edges, counts, mass })
}

/// Histogram panels for the contrastive, classifier and combined scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub histograms: Vec<Histogram>,
    /// Threshold marker position on the combined score axis.
    pub threshold: f64,
}

pub const HISTOGRAM_METRICS: [&str; 3] = ["p_cl", "p_bc", "combined"];

/// Builds per-group histograms of `p_cl`, `p_bc` and `p_bc * p_cl`.
pub fn score_histograms(scores: &[DetectionScore], bins: usize, threshold: f64) -> Result<ScoreHistograms> {
    let mut groups: BTreeMap<Scenario, Vec<&DetectionScore>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.scenario).or_default().push(s);
    }
    let mut histograms = Vec::new();
    for (scenario, members) in &groups {
        for metric in HISTOGRAM_METRICS {
            let values: Vec<f64> = members
                .iter()
                .map(|s| match metric {
                    "p_cl" => s.p_cl,
                    "p_bc" => s.p_bc,
                    _ => s.id_score(ScoreKind::Unified),
                })
                .collect();
            histograms.push(histogram(scenario.as_str(), metric, &values, bins)?);
        }
    }
    Ok(ScoreHistograms { histograms, threshold })
}

impl ScoreHistograms {
    /// `group  metric  bin_left  bin_right  mass` rows under a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tmetric\tbin_left\tbin_right\tmass\n");
        for h in &self.histograms {
            for (i, m) in h.mass.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", h.group, h.metric, h.edges[i], h.edges[i + 1], m);
            }
        }
        out
    }
}

/// Metrics of one evaluation group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub auroc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl GroupMetrics {
    pub fn from_parts(m: &ConfusionMetrics, auroc: f64) -> Self {
        Self {
            accuracy: m.accuracy,
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
            auroc,
            tp: m.counts.tp,
            fp: m.counts.fp,
            tn: m.counts.tn,
            fn_: m.counts.fn_,
        }
    }
}

/// Group names in report order.
pub const GROUPS: [&str; 4] = ["s1+id", "s2+id", "s3+id", "overall"];

/// Per-group metrics: each OOD scenario joined with all ID samples, plus
/// everything together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub groups: BTreeMap<String, GroupMetrics>,
}

/// Computes [`MetricsReport`] for one scoring rule at threshold `delta`.
pub fn metrics_report(scores: &[DetectionScore], kind: ScoreKind, delta: f64) -> Result<MetricsReport> {
    let mut groups = BTreeMap::new();
    for (name, scenario) in GROUPS.iter().zip([Some(Scenario::S1), Some(Scenario::S2), Some(Scenario::S3), None]) {
        let members: Vec<&DetectionScore> = scores
            .iter()
            .filter(|s| s.scenario == Scenario::Id || scenario.is_none_or(|sc| s.scenario == sc))
            .collect();
        let decisions: Vec<Decision> = members
            .iter()
            .map(|s| match kind {
                ScoreKind::Unified => decide(s.p_ood, delta),
                _ => decide_id_score(s.id_score(kind), delta),
            })
            .collect();
        let truths: Vec<bool> = members.iter().map(|s| s.ood_flag).collect();
        let ood: Vec<f64> = members.iter().map(|s| s.ood_score(kind)).collect();
        let cm = confusion_metrics(&decisions, &truths)?;
        groups.insert(name.to_string(), GroupMetrics::from_parts(&cm, auroc(&ood, &truths)?));
    }
    Ok(MetricsReport { groups })
}

impl MetricsReport {
    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.get(name)
    }

    /// Fixed-width table: one column block per group, `Accy / Recall / Prec. / F1`.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let header = ["Scenario 1+ID", "Scenario 2+ID", "Scenario 3+ID", "Overall (ID+OOD)"];
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:<8}", "");
        for h in header {
            let _ = write!(out, "| {h:^31} ");
        }
        let _ = writeln!(out, "|");
        let _ = write!(out, "{:<8}", "");
        for _ in header {
            let _ = write!(out, "| {:>6} {:>7} {:>7} {:>7} ", "Accy", "Recall", "Prec.", "F1");
        }
        let _ = writeln!(out, "|");
        let _ = write!(out, "{:<8}", "");
        for g in GROUPS {
            let m = &self.groups[g];
            let _ = write!(out, "| {:>6.1} {:>7.1} {:>7.1} {:>7.1} ", m.accuracy, m.recall, m.precision, m.f1);
        }
        let _ = writeln!(out, "|");
        let _ = write!(out, "{:<8}", "AUROC");
        for g in GROUPS {
            let _ = write!(out, "| {:>31.4} ", self.groups[g].auroc);
        }
        let _ = writeln!(out, "|");
        out
    }
}
