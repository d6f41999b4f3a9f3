use std::io::Write;

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentData, OptimizerConfig};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{BatchInputs, Dense, ModelGrads, WoodModel};
use crate::scenarios;

const BATCH_STREAM: u64 = 3;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(model: &WoodModel, cfg: &OptimizerConfig) -> Self {
        let zeros: Vec<Dense> = model.layers().iter().map(|(_, l)| Dense::zeros(l.inputs(), l.outputs())).collect();
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every trainable layer.
    pub fn step(&mut self, model: &mut WoodModel, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mask = model.trainable_mask();
        for (i, p) in model.layers_mut().into_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let g = &grads.layers[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let update = |p: &mut f64, m: &mut f64, v: &mut f64, &g: &f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut p.weight).and(&mut m.weight).and(&mut v.weight).and(&g.weight).for_each(update);
            Zip::from(&mut p.bias).and(&mut m.bias).and(&mut v.bias).and(&g.bias).for_each(update);
        }
    }
}

/// Stepped learning-rate schedule: `lr * decay^(epoch / step_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub step_epochs: usize,
    pub decay: f64,
}

impl StepSchedule {
    pub fn from_config(cfg: &OptimizerConfig, epochs: usize) -> Self {
        let step_epochs = cfg.step_epochs.unwrap_or_else(|| epochs.div_ceil(3)).max(1);
        Self { base: cfg.learning_rate, step_epochs, decay: cfg.decay }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.base * self.decay.powi((epoch / self.step_epochs) as i32)
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub n_ood: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
}

impl TrainingLog {
    /// Mean total loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.steps.last().map_or(0, |s| s.epoch + 1);
        (0..epochs)
            .map(|e| {
                let totals: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(|s| s.loss.total).collect();
                totals.iter().sum::<f64>() / totals.len().max(1) as f64
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: WoodModel,
    pub log: TrainingLog,
}

/// Joint training of encoders, gates and classifier on the full objective.
///
/// Each step record is written to `sink` as one JSON line as soon as it is
/// produced. A non-finite loss or parameter aborts with
/// [`Error::Divergence`] after its record has been written.
pub fn train(config: &ExperimentConfig, data: &ExperimentData, mut sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = WoodModel::new(data.model_spec(config), config.objective(), config.seed)?;
    let mut adam = Adam::new(&model, &config.optimizer);
    let schedule = StepSchedule::from_config(&config.optimizer, config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BATCH_STREAM);

    let mut log = TrainingLog::default();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let lr = schedule.lr(epoch);
        let batches = scenarios::assemble_training_batches(
            &data.id_pool,
            &data.ood_pools,
            config.batch_size,
            config.ood_fraction,
            config.ood_budget,
            &mut rng,
        )?;
        for batch in &batches {
            let inputs = BatchInputs::from_samples(&batch.samples)?;
            let (loss, grads, _) = match model.loss_and_grads(&inputs) {
                Err(Error::NonFinite(_) | Error::DegenerateEmbedding) => {
                    return Err(Error::Divergence { epoch, step });
                }
                r => r?,
            };
            let record = StepRecord { epoch, step, lr, batch_size: batch.len(), n_ood: batch.ood_indices.len(), loss };
            if let Some(w) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            log.steps.push(record);
            let grads_finite = grads.layers.iter().all(Dense::is_finite);
            if !loss.is_finite() || !grads_finite {
                return Err(Error::Divergence { epoch, step });
            }
            adam.step(&mut model, &grads, lr);
            if !model.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { model, log })
}
