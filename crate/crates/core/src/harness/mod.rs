//! Experiment configuration, data preparation, training, evaluation,
//! checkpoints and ablation sweeps.

mod checkpoint;
mod eval;
mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::MIN_CALIBRATION;
use crate::error::{Error, Result};
use crate::model::{EncoderKind, EncoderObjective, ModelSpec, Objective};
use crate::scenarios::{
    self, DatasetManifest, OodBudget, PairedDataset, PairedSample, Payload, Scenario, SyntheticConfig,
};

pub use checkpoint::{load_checkpoint, probe_batch, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use eval::{
    ablation_sweep, evaluate, read_scores_tsv, run_experiment, write_evaluation, Evaluation, RunSummary, SweepParam, SweepRow, SweepTable, Threshold,
    LAMBDA_GRID, MARGIN_GRID,
};
pub use train::{train, Adam, StepRecord, StepSchedule, TrainOutcome, TrainingLog};

/// Stream used for calibration holdout, external split and scenario pools.
const SPLIT_STREAM: u64 = 4;

/// Environment variable overriding [`ExperimentConfig::output_dir`].
pub const OUT_DIR_ENV: &str = "MMOOD_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub encoder_hidden: usize,
    pub trainable_encoders: bool,
    pub embedding_dim: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::TwoLayer,
            encoder_hidden: 64,
            trainable_encoders: true,
            embedding_dim: 512,
            head_hidden: vec![1024, 512, 256],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between decays; `None` decays every third of the run.
    pub step_epochs: Option<usize>,
    pub decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_epochs: None, decay: 0.5 }
    }
}

/// Pre-built corpus manifests used instead of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPaths {
    pub id_train: PathBuf,
    pub id_test: PathBuf,
    pub external: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    pub manifests: Option<ManifestPaths>,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub margin: f64,
    pub lambda: f64,
    pub gate_l1_weight: f64,
    pub encoder_objective: EncoderObjective,
    pub batch_size: usize,
    pub epochs: usize,
    pub ood_fraction: f64,
    pub ood_budget: OodBudget,
    pub noise_std: f64,
    pub calibration_target: f64,
    pub calibration_fraction: f64,
    pub histogram_bins: usize,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            margin: 0.2,
            lambda: 0.8,
            gate_l1_weight: 1.0,
            encoder_objective: EncoderObjective::Joint,
            batch_size: 128,
            epochs: 5,
            ood_fraction: 0.01,
            ood_budget: OodBudget::PerScenario,
            noise_std: 0.3,
            calibration_target: 0.95,
            calibration_fraction: 0.1,
            histogram_bins: 20,
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn objective(&self) -> Objective {
        Objective {
            margin: self.margin,
            lambda: self.lambda,
            gate_l1_weight: self.gate_l1_weight,
            encoder_objective: self.encoder_objective,
        }
    }

    pub fn model_spec(&self, image_input_dim: usize, text_input_dim: usize) -> ModelSpec {
        ModelSpec {
            image_input_dim,
            text_input_dim,
            embedding_dim: self.model.embedding_dim,
            encoder: self.model.encoder,
            encoder_hidden: self.model.encoder_hidden,
            trainable_encoders: self.model.trainable_encoders,
            head_hidden: self.model.head_hidden.clone(),
        }
    }

    /// Output directory, honoring [`OUT_DIR_ENV`].
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        crate::losses::validate_margin(self.margin).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if !(self.gate_l1_weight >= 0.0 && self.gate_l1_weight.is_finite()) {
            return bad(format!("gate_l1_weight must be finite and nonnegative, got {}", self.gate_l1_weight));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(0.0..0.5).contains(&self.ood_fraction) {
            return bad(format!("ood_fraction must lie in [0, 0.5), got {}", self.ood_fraction));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be positive, got {}", self.noise_std));
        }
        if !(self.calibration_target > 0.0 && self.calibration_target < 1.0) {
            return bad(format!("calibration_target must lie in (0, 1), got {}", self.calibration_target));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return bad(format!("calibration_fraction must lie in (0, 1), got {}", self.calibration_fraction));
        }
        if self.histogram_bins < 2 {
            return bad("histogram_bins must be at least 2".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", o.learning_rate));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(o.decay > 0.0 && o.decay <= 1.0) {
            return bad(format!("schedule decay must lie in (0, 1], got {}", o.decay));
        }
        if o.step_epochs == Some(0) {
            return bad("step_epochs must be positive".into());
        }
        self.model_spec(1, 1).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.data.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Data pools for one run, fully determined by the config and seed.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// ID training samples (calibration holdout removed).
    pub id_pool: Vec<PairedSample>,
    /// ID samples held out for threshold calibration.
    pub calibration: Vec<PairedSample>,
    /// Labeled OOD training samples per scenario.
    pub ood_pools: BTreeMap<Scenario, Vec<PairedSample>>,
    /// Balanced evaluation split.
    pub test: PairedDataset,
    pub image_dim: usize,
    pub text_dim: usize,
}

fn feature_dim(p: &Payload) -> Result<usize> {
    match p {
        Payload::Features(v) => Ok(v.len()),
        other => Err(Error::invalid(format!("toy encoders need feature payloads, found {}", other.kind()))),
    }
}

fn dataset(samples: Vec<PairedSample>, source: &str, seed: u64) -> Result<PairedDataset> {
    PairedDataset::new(samples, DatasetManifest { source: source.into(), seed: Some(seed), params: BTreeMap::new() })
}

impl ExperimentData {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let (id_train, id_test, external) = match &config.data.manifests {
            Some(m) => (
                scenarios::read_corpus_manifest(&m.id_train)?,
                scenarios::read_corpus_manifest(&m.id_test)?,
                scenarios::read_corpus_manifest(&m.external)?,
            ),
            None => {
                let c = scenarios::generate_synthetic_corpus(&config.data.synthetic, config.seed)?;
                (c.id_train, c.id_test, c.external)
            }
        };
        let first = id_train.samples.first().ok_or(Error::InsufficientSamples { needed: 1, available: 0 })?;
        let (image_dim, text_dim) = (feature_dim(&first.image)?, feature_dim(&first.text)?);

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SPLIT_STREAM);
        let seed = config.seed;

        let mut train = id_train.samples;
        train.shuffle(&mut rng);
        let n_cal = (config.calibration_fraction * train.len() as f64).round() as usize;
        if n_cal < MIN_CALIBRATION {
            return Err(Error::InsufficientSamples { needed: MIN_CALIBRATION, available: n_cal });
        }
        let id_pool = train.split_off(n_cal);
        let calibration = train;
        let pool_ds = dataset(id_pool.clone(), "id-pool", seed)?;

        let mut ext = external.samples;
        ext.shuffle(&mut rng);
        let ext_test = ext.split_off(ext.len() / 2);
        let ext_train = dataset(ext, "external-train", seed)?;
        let ext_test = dataset(ext_test, "external-test", seed)?;

        let mut ood_pools = BTreeMap::new();
        if config.ood_fraction > 0.0 {
            let n_ood = ((config.ood_fraction * id_pool.len() as f64).round() as usize).max(2);
            ood_pools.insert(Scenario::S1, scenarios::make_scenario1(&pool_ds, n_ood, &mut rng)?);
            ood_pools.insert(Scenario::S2, scenarios::make_scenario2(&ext_train, n_ood, &mut rng)?);
            ood_pools.insert(Scenario::S3, scenarios::make_scenario3(&pool_ds, n_ood, config.noise_std, &mut rng)?);
        }

        let mut test_id = id_test.samples;
        test_id.shuffle(&mut rng);
        let per_group = test_id.len().min(ext_test.len());
        let test_id_ds = dataset(test_id.clone(), "id-test", seed)?;
        let mut t1 = scenarios::make_scenario1(&test_id_ds, per_group, &mut rng)?;
        let mut t2 = scenarios::make_scenario2(&ext_test, per_group, &mut rng)?;
        let mut t3 = scenarios::make_scenario3(&test_id_ds, per_group, config.noise_std, &mut rng)?;
        for pool in [&mut t1, &mut t2, &mut t3] {
            pool.shuffle(&mut rng);
        }
        let test = scenarios::make_test_split(&test_id, &t1, &t2, &t3)?;
        Ok(Self { id_pool, calibration, ood_pools, test, image_dim, text_dim })
    }

    pub fn model_spec(&self, config: &ExperimentConfig) -> ModelSpec {
        config.model_spec(self.image_dim, self.text_dim)
    }
}
