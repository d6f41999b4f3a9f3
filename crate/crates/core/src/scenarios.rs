//! Paired image/text datasets, the three OOD scenario generators, training
//! batch assembly and the synthetic desk-scale corpus.
//!
//! Scenario 1 misaligns pairs across categories, scenario 2 draws aligned
//! pairs from a shifted external domain, scenario 3 corrupts images with
//! Gaussian noise while keeping their captions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEATURE_PREFIX: &str = "feat:";

/// Raw content of one side of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Synthetic feature tensor (flattened).
    Features(Vec<f64>),
    /// Path to an image file.
    File(String),
    /// Caption text.
    Text(String),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Features(_) => "features",
            Payload::File(_) => "file",
            Payload::Text(_) => "text",
        }
    }

    fn encode_cell(&self) -> Result<String> {
        match self {
            Payload::Features(v) => {
                let body: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                Ok(format!("{FEATURE_PREFIX}{}", body.join(",")))
            }
            Payload::File(s) | Payload::Text(s) => {
                if s.contains(['\t', '\n', '\r']) {
                    return Err(Error::invalid(format!("payload {s:?} contains tab or newline")));
                }
                Ok(s.clone())
            }
        }
    }

    fn decode_cell(cell: &str, as_text: bool) -> std::result::Result<Self, String> {
        if let Some(body) = cell.strip_prefix(FEATURE_PREFIX) {
            let v = body
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|e| format!("bad feature value {x:?}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            return Ok(Payload::Features(v));
        }
        Ok(if as_text { Payload::Text(cell.to_owned()) } else { Payload::File(cell.to_owned()) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Id,
    S1,
    S2,
    S3,
}

impl Scenario {
    pub const OOD: [Scenario; 3] = [Scenario::S1, Scenario::S2, Scenario::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Id => "id",
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::S3 => "s3",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(Scenario::Id),
            "s1" => Ok(Scenario::S1),
            "s2" => Ok(Scenario::S2),
            "s3" => Ok(Scenario::S3),
            other => Err(Error::invalid(format!("unknown scenario {other:?}"))),
        }
    }
}

/// One (image, text) record.
///
/// `origin_id` is unique within a dataset. `image_origin` / `text_origin`
/// name the source pairs each side came from; they differ only for
/// scenario-1 swaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub image: Payload,
    pub text: Payload,
    pub category: String,
    pub text_category: String,
    pub ood_flag: bool,
    pub scenario: Scenario,
    pub origin_id: String,
    pub image_origin: String,
    pub text_origin: String,
}

impl PairedSample {
    /// An in-distribution, correctly aligned pair.
    pub fn aligned(origin_id: String, image: Payload, text: Payload, category: String) -> Self {
        Self {
            image,
            text,
            text_category: category.clone(),
            category,
            ood_flag: false,
            scenario: Scenario::Id,
            image_origin: origin_id.clone(),
            text_origin: origin_id.clone(),
            origin_id,
        }
    }

    pub fn is_consistent(&self) -> bool {
        (self.scenario == Scenario::Id) == !self.ood_flag
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub samples: Vec<PairedSample>,
    pub manifest: DatasetManifest,
}

impl PairedDataset {
    pub fn new(samples: Vec<PairedSample>, manifest: DatasetManifest) -> Result<Self> {
        let ds = Self { samples, manifest };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.origin_id.as_str()) {
                return Err(Error::invalid(format!("duplicate origin_id {:?}", s.origin_id)));
            }
            if !s.is_consistent() {
                return Err(Error::invalid(format!("sample {:?}: scenario/ood flag disagree", s.origin_id)));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<&str> {
        let set: std::collections::BTreeSet<&str> = self.samples.iter().map(|s| s.category.as_str()).collect();
        set.into_iter().collect()
    }

    /// Samples belonging to one scenario group.
    pub fn scenario(&self, scenario: Scenario) -> impl Iterator<Item = &PairedSample> {
        self.samples.iter().filter(move |s| s.scenario == scenario)
    }
}

fn check_count(needed: usize, available: usize) -> Result<()> {
    if needed > available {
        return Err(Error::InsufficientSamples { needed, available });
    }
    Ok(())
}

/// Scenario 1: images paired with captions from a different category.
///
/// Draws `count` pairs (balanced across categories) and shifts captions by
/// the largest category's size over the category-grouped list, which yields a
/// cross-category derangement whenever no category holds more than half of
/// the draw.
pub fn make_scenario1(dataset: &PairedDataset, count: usize, rng: &mut impl Rng) -> Result<Vec<PairedSample>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        groups.entry(s.category.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("scenario 1 needs at least two categories"));
    }
    check_count(count, dataset.len())?;
    if count == 0 {
        return Ok(Vec::new());
    }

    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    for g in &mut groups {
        g.shuffle(rng);
    }
    groups.shuffle(rng);
    let mut picked: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    let mut taken = 0;
    let mut depth = 0;
    while taken < count {
        for (g, dst) in groups.iter().zip(picked.iter_mut()) {
            if taken < count && depth < g.len() {
                dst.push(g[depth]);
                taken += 1;
            }
        }
        depth += 1;
    }
    let largest = picked.iter().map(Vec::len).max().unwrap_or(0);
    if 2 * largest > count {
        return Err(Error::invalid(format!(
            "no cross-category derangement of {count} pairs: one category supplies {largest}"
        )));
    }
    let order: Vec<usize> = picked.into_iter().flatten().collect();
    let out = (0..count)
        .map(|i| {
            let img = &dataset.samples[order[i]];
            let txt = &dataset.samples[order[(i + largest) % count]];
            PairedSample {
                image: img.image.clone(),
                text: txt.text.clone(),
                category: img.category.clone(),
                text_category: txt.text_category.clone(),
                ood_flag: true,
                scenario: Scenario::S1,
                origin_id: format!("s1:{}~{}", img.image_origin, txt.text_origin),
                image_origin: img.image_origin.clone(),
                text_origin: txt.text_origin.clone(),
            }
        })
        .collect();
    Ok(out)
}

fn relabel(src: &PairedSample, scenario: Scenario) -> PairedSample {
    PairedSample {
        ood_flag: true,
        scenario,
        origin_id: format!("{scenario}:{}", src.origin_id),
        ..src.clone()
    }
}

/// Scenario 2: aligned pairs sampled from a foreign-domain corpus.
pub fn make_scenario2(external: &PairedDataset, count: usize, rng: &mut impl Rng) -> Result<Vec<PairedSample>> {
    if external.is_empty() {
        return Err(Error::InsufficientSamples { needed: count.max(1), available: 0 });
    }
    check_count(count, external.len())?;
    let mut idx = index::sample(rng, external.len(), count).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| relabel(&external.samples[i], Scenario::S2)).collect())
}

/// Scenario 3: i.i.d. Gaussian noise on every image feature; captions untouched.
pub fn make_scenario3(
    dataset: &PairedDataset,
    count: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Vec<PairedSample>> {
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be positive, got {noise_std}")));
    }
    check_count(count, dataset.len())?;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut idx = index::sample(rng, dataset.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| {
            let src = &dataset.samples[i];
            let Payload::Features(clean) = &src.image else {
                return Err(Error::invalid(format!(
                    "scenario 3 needs feature image payloads, sample {:?} has {}",
                    src.origin_id,
                    src.image.kind()
                )));
            };
            let mut out = relabel(src, Scenario::S3);
            out.image = Payload::Features(clean.iter().map(|x| x + noise.sample(rng)).collect());
            Ok(out)
        })
        .collect()
}

/// How the OOD budget of a batch is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodBudget {
    /// `ood_fraction` of the batch per scenario.
    PerScenario,
    /// `ood_fraction` of the batch across all scenarios.
    Total,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub samples: Vec<PairedSample>,
    pub id_indices: Vec<usize>,
    pub ood_indices: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// OOD samples per batch and batches per epoch for the given pool sizes.
pub fn ood_per_batch(
    id_pool: usize,
    active_scenarios: usize,
    batch_size: usize,
    ood_fraction: f64,
    budget: OodBudget,
) -> Result<(usize, usize)> {
    if !(0.0..0.5).contains(&ood_fraction) {
        return Err(Error::invalid(format!("ood_fraction must lie in [0, 0.5), got {ood_fraction}")));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut k = 0;
    if ood_fraction > 0.0 {
        if active_scenarios == 0 {
            return Err(Error::InsufficientSamples { needed: 1, available: 0 });
        }
        let scale = match budget {
            OodBudget::PerScenario => active_scenarios as f64,
            OodBudget::Total => 1.0,
        };
        k = round_half_up(batch_size as f64 * ood_fraction * scale);
    }
    let batches = |k: usize| if k >= batch_size { 0 } else { id_pool / (batch_size - k) };
    let mut b = batches(k);
    // Every scenario appears at least once per epoch.
    if ood_fraction > 0.0 && b > 0 && b * k < active_scenarios {
        k = active_scenarios.div_ceil(b);
        b = batches(k);
    }
    if b == 0 {
        return Err(Error::InsufficientSamples { needed: batch_size.saturating_sub(k).max(1), available: id_pool });
    }
    Ok((k, b))
}

/// One epoch of training batches.
///
/// Each batch holds `batch_size - K` fresh ID samples and `K` OOD samples
/// whose scenarios rotate so that every scenario pool is drawn evenly across
/// the epoch. OOD pools are cycled in a shuffled order when exhausted.
pub fn assemble_training_batches(
    id_pool: &[PairedSample],
    ood_pools: &BTreeMap<Scenario, Vec<PairedSample>>,
    batch_size: usize,
    ood_fraction: f64,
    budget: OodBudget,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingBatch>> {
    let active: Vec<(&Scenario, &Vec<PairedSample>)> = ood_pools.iter().filter(|(_, p)| !p.is_empty()).collect();
    let (k, n_batches) = ood_per_batch(id_pool.len(), active.len(), batch_size, ood_fraction, budget)?;

    let mut id_order: Vec<usize> = (0..id_pool.len()).collect();
    id_order.shuffle(rng);
    let mut ood_orders: Vec<Vec<usize>> = active
        .iter()
        .map(|(_, p)| {
            let mut o: Vec<usize> = (0..p.len()).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    let mut cursors = vec![0usize; active.len()];
    let mut slot = 0usize;

    let n_id = batch_size - k;
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut samples: Vec<PairedSample> =
            id_order[b * n_id..(b + 1) * n_id].iter().map(|&i| id_pool[i].clone()).collect();
        for _ in 0..k {
            let s = slot % active.len();
            slot += 1;
            if cursors[s] == ood_orders[s].len() {
                ood_orders[s].shuffle(rng);
                cursors[s] = 0;
            }
            samples.push(active[s].1[ood_orders[s][cursors[s]]].clone());
            cursors[s] += 1;
        }
        samples.shuffle(rng);
        let id_indices = (0..samples.len()).filter(|&i| !samples[i].ood_flag).collect();
        let ood_indices = (0..samples.len()).filter(|&i| samples[i].ood_flag).collect();
        out.push(TrainingBatch { samples, id_indices, ood_indices });
    }
    Ok(out)
}

/// Balanced evaluation split: equal shares of ID and each OOD scenario,
/// truncated to the smallest pool.
pub fn make_test_split(
    id_test: &[PairedSample],
    s1: &[PairedSample],
    s2: &[PairedSample],
    s3: &[PairedSample],
) -> Result<PairedDataset> {
    let pools = [id_test, s1, s2, s3];
    if pools.iter().any(|p| p.is_empty()) {
        return Err(Error::InsufficientSamples { needed: 1, available: 0 });
    }
    let per_group = pools.iter().map(|p| p.len()).min().unwrap_or(0);
    let samples: Vec<PairedSample> = pools.iter().flat_map(|p| p[..per_group].iter().cloned()).collect();
    let mut params = BTreeMap::new();
    params.insert("per_group".to_owned(), per_group.to_string());
    for (name, p) in ["id", "s1", "s2", "s3"].iter().zip(pools) {
        params.insert(format!("pool_{name}"), p.len().to_string());
    }
    PairedDataset::new(samples, DatasetManifest { source: "test-split".into(), seed: None, params })
}

/// Parameters of the synthetic paired-modality corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_categories: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub external_per_category: usize,
    /// Standard deviation of category means in latent space.
    pub category_spread: f64,
    /// Within-category latent standard deviation.
    pub within_std: f64,
    /// Approximate standard deviation of clean feature entries per unit of
    /// latent scale; mixing-matrix entries are `N(0, feature_scale² / latent_dim)`.
    pub feature_scale: f64,
    /// Independent per-modality feature noise.
    pub modality_noise: f64,
    /// Length of the joint latent translation applied to the external domain.
    pub domain_shift: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_categories: 6,
            latent_dim: 8,
            image_dim: 32,
            text_dim: 32,
            train_per_category: 400,
            test_per_category: 120,
            external_per_category: 120,
            category_spread: 1.0,
            within_std: 0.35,
            feature_scale: 1.0,
            modality_noise: 0.05,
            domain_shift: 1.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::invalid("synthetic corpus needs at least two categories"));
        }
        if [self.latent_dim, self.image_dim, self.text_dim, self.train_per_category].contains(&0) {
            return Err(Error::invalid("synthetic corpus dimensions and sizes must be positive"));
        }
        let scales = [self.category_spread, self.within_std, self.feature_scale, self.modality_noise, self.domain_shift];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || self.category_spread == 0.0 || self.feature_scale == 0.0 {
            return Err(Error::invalid("synthetic corpus scales must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic_corpus`].
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub id_train: PairedDataset,
    pub id_test: PairedDataset,
    pub external: PairedDataset,
    /// Latent-space translation of the external domain.
    pub latent_shift: Vec<f64>,
    /// Expected displacement of the external image-feature mean (`A · shift`).
    pub image_shift: Vec<f64>,
    /// Expected displacement of the external text-feature mean (`B · shift`).
    pub text_shift: Vec<f64>,
    /// Latent-to-image mixing matrix, row-major `image_dim x latent_dim`.
    pub image_mixing: Vec<f64>,
    /// Latent-to-text mixing matrix, row-major `text_dim x latent_dim`.
    pub text_mixing: Vec<f64>,
}

/// Class-conditional Gaussian latents mapped into two modalities by fixed
/// random linear maps. The external corpus shares the category structure but
/// every latent is translated by one common vector, so its pairs remain
/// aligned while the domain moves.
pub fn generate_synthetic_corpus(config: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let l = config.latent_dim;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mixing = |rows: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let scale = config.feature_scale / (l as f64).sqrt();
        (0..rows * l).map(|_| std_normal.sample(rng) * scale).collect()
    };
    let a = mixing(config.image_dim, &mut rng);
    let b = mixing(config.text_dim, &mut rng);
    let means: Vec<Vec<f64>> = (0..config.n_categories)
        .map(|_| (0..l).map(|_| std_normal.sample(&mut rng) * config.category_spread).collect())
        .collect();
    let dir: Vec<f64> = (0..l).map(|_| std_normal.sample(&mut rng)).collect();
    let dir_norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let shift: Vec<f64> = dir.iter().map(|x| x / dir_norm * config.domain_shift).collect();

    let apply = |m: &[f64], z: &[f64]| -> Vec<f64> { m.chunks(l).map(|row| row.iter().zip(z).map(|(p, q)| p * q).sum()).collect() };

    let draw = |prefix: &str, per_cat: usize, shifted: bool, rng: &mut ChaCha8Rng| -> Result<PairedDataset> {
        let mut samples = Vec::with_capacity(per_cat * config.n_categories);
        for i in 0..per_cat {
            for (c, mu) in means.iter().enumerate() {
                let z: Vec<f64> = (0..l)
                    .map(|j| {
                        let base = mu[j] + if shifted { shift[j] } else { 0.0 };
                        base + config.within_std * std_normal.sample(rng)
                    })
                    .collect();
                let mut noisy = |m: &[f64]| -> Vec<f64> {
                    apply(m, &z).into_iter().map(|x| x + config.modality_noise * std_normal.sample(rng)).collect()
                };
                let img = noisy(&a);
                let txt = noisy(&b);
                let cat = if shifted { format!("ext-c{c}") } else { format!("c{c}") };
                samples.push(PairedSample::aligned(
                    format!("{prefix}-{:06}", i * config.n_categories + c),
                    Payload::Features(img),
                    Payload::Features(txt),
                    cat,
                ));
            }
        }
        let mut params = BTreeMap::new();
        params.insert("per_category".into(), per_cat.to_string());
        params.insert("config".into(), serde_json::to_string(config)?);
        PairedDataset::new(samples, DatasetManifest { source: format!("synthetic:{prefix}"), seed: Some(seed), params })
    };
    let id_train = draw("id", config.train_per_category, false, &mut rng)?;
    let id_test = draw("idt", config.test_per_category, false, &mut rng)?;
    let external = draw("ext", config.external_per_category, true, &mut rng)?;
    Ok(SyntheticCorpus {
        id_train,
        id_test,
        external,
        image_shift: apply(&a, &shift),
        text_shift: apply(&b, &shift),
        latent_shift: shift,
        image_mixing: a,
        text_mixing: b,
    })
}

/// Reads a corpus manifest: `image_path<TAB>caption<TAB>category`, no header.
/// Rows get origin ids `row-<line>`.
pub fn read_corpus_manifest(path: &Path) -> Result<PairedDataset> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Manifest { line: i + 1, reason: format!("expected 3 columns, got {}", cols.len()) });
        }
        let bad = |reason: String| Error::Manifest { line: i + 1, reason };
        let image = Payload::decode_cell(cols[0], false).map_err(bad)?;
        let text = Payload::decode_cell(cols[1], true).map_err(bad)?;
        samples.push(PairedSample::aligned(format!("row-{:06}", i + 1), image, text, cols[2].to_owned()));
    }
    PairedDataset::new(
        samples,
        DatasetManifest { source: path.display().to_string(), seed: None, params: BTreeMap::new() },
    )
}

pub fn write_corpus_manifest(dataset: &PairedDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in &dataset.samples {
        check_cell(&s.category)?;
        writeln!(w, "{}\t{}\t{}", s.image.encode_cell()?, s.text.encode_cell()?, s.category)?;
    }
    w.flush()?;
    Ok(())
}

fn check_cell(s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r', '~']) {
        return Err(Error::invalid(format!("cell {s:?} contains a reserved character")));
    }
    Ok(())
}

/// Writes `image_path, caption, category, scenario, origin_id` rows.
///
/// A misaligned pair stores `imagecat~textcat` in the category column; its
/// origin id already encodes both source ids.
pub fn write_scenario_manifest(dataset: &PairedDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in &dataset.samples {
        check_cell(&s.category)?;
        check_cell(&s.text_category)?;
        if s.origin_id.contains(['\t', '\n']) {
            return Err(Error::invalid(format!("origin id {:?} contains tab or newline", s.origin_id)));
        }
        let category = if s.category == s.text_category {
            s.category.clone()
        } else {
            format!("{}~{}", s.category, s.text_category)
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            s.image.encode_cell()?,
            s.text.encode_cell()?,
            category,
            s.scenario,
            s.origin_id
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenario_manifest(path: &Path) -> Result<PairedDataset> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest { line: i + 1, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 columns, got {}", cols.len())));
        }
        let image = Payload::decode_cell(cols[0], false).map_err(bad)?;
        let text = Payload::decode_cell(cols[1], true).map_err(bad)?;
        let (category, text_category) = match cols[2].split_once('~') {
            Some((a, b)) => (a.to_owned(), b.to_owned()),
            None => (cols[2].to_owned(), cols[2].to_owned()),
        };
        let scenario: Scenario = cols[3].parse().map_err(|e: Error| bad(e.to_string()))?;
        let origin_id = cols[4].to_owned();
        let bare = match scenario {
            Scenario::Id => origin_id.as_str(),
            s => origin_id.strip_prefix(&format!("{s}:")).unwrap_or(&origin_id),
        };
        let (image_origin, text_origin) = match bare.split_once('~') {
            Some((a, b)) => (a.to_owned(), b.to_owned()),
            None => (bare.to_owned(), bare.to_owned()),
        };
        samples.push(PairedSample {
            image,
            text,
            category,
            text_category,
            ood_flag: scenario != Scenario::Id,
            scenario,
            origin_id,
            image_origin,
            text_origin,
        });
    }
    PairedDataset::new(
        samples,
        DatasetManifest { source: path.display().to_string(), seed: None, params: BTreeMap::new() },
    )
}
