//! Pre-training loop: Adam with linear warmup and cosine decay, global
//! gradient-norm clipping, a task-level train/validation split, and
//! best-validation checkpointing.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::data::{DatasetView, InMemoryDataset};
use crate::model::Transformer;
use crate::seed::SeedStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Prompts per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Global L2 clip on the gradient; 0 disables clipping.
    pub grad_clip: f64,
    /// Validation cadence in steps.
    pub eval_interval: usize,
    /// Fraction of tasks held out for validation (split over tasks, never
    /// over examples within a task).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 3e-4,
            warmup_steps: 1000,
            total_steps: 20_000,
            grad_clip: 1.0,
            eval_interval: 500,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.total_steps == 0
            || self.eval_interval == 0
            || self.learning_rate <= 0.0
        {
            return Err(Error::Config("training hyperparameters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One row of the emitted loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub best_val: f64,
    pub best_step: usize,
    pub steps_run: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps.saturating_sub(cfg.warmup_steps)).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Assemble a packed token/target batch from record indices.
fn make_batch(
    data: &InMemoryDataset,
    view: DatasetView,
    idx: &[usize],
    seq: usize,
) -> (Array2<f32>, Array2<f32>) {
    let d = data.layout.token_dim();
    let mut tokens = Array2::zeros((idx.len() * seq, d));
    let mut targets = Array2::zeros((idx.len(), 2));
    for (b, &i) in idx.iter().enumerate() {
        let rec = &data.records[i];
        let toks = data.tokens_of(rec, view);
        for s in 0..seq {
            let mut row = tokens.row_mut(b * seq + s);
            for (j, v) in row.iter_mut().enumerate() {
                *v = toks[s * d + j];
            }
        }
        targets[(b, 0)] = rec.target[0];
        targets[(b, 1)] = rec.target[1];
    }
    (tokens, targets)
}

/// Validation MSE over a record index set, in fixed-size forward batches.
fn validation_mse(
    model: &Transformer<f32>,
    data: &InMemoryDataset,
    view: DatasetView,
    idx: &[usize],
    seq: usize,
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(256) {
        let (tokens, targets) = make_batch(data, view, chunk, seq);
        let loss = model.batch_loss(tokens.view(), chunk.len(), seq, targets.view())?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Minimize the empirical per-symbol MSE over the dataset. The model is
/// left at the best-validation parameters (final parameters when no
/// validation split exists).
pub fn train(
    model: &mut Transformer<f32>,
    data: &InMemoryDataset,
    view: DatasetView,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let seq = data.seq_len(view);
    if seq > model.config().max_seq_len || data.layout.token_dim() != model.config().token_dim {
        return Err(Error::Layout("model shape does not match dataset layout".into()));
    }

    // Task-level split: the highest-index tasks become validation.
    let num_tasks = data.spec.num_tasks;
    let val_tasks = ((num_tasks as f64) * cfg.val_fraction).floor() as usize;
    let val_start = (num_tasks - val_tasks) as u32;
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (i, rec) in data.records.iter().enumerate() {
        if rec.task_index >= val_start {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training split has {} prompts, batch needs {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }

    let n_params = model.param_count();
    let mut grads = vec![0f32; n_params];
    let mut m = vec![0f64; n_params];
    let mut v = vec![0f64; n_params];
    let mut curve = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0usize;
    let mut best_params: Option<Vec<f32>> = None;
    let shuffle_root = SeedStream::root(cfg.seed).child("train-shuffle");

    let mut step = 0usize;
    let mut epoch = 0u64;
    let mut train_loss_acc = 0.0;
    let mut train_loss_n = 0usize;
    'outer: loop {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_root.child_idx("epoch", epoch).rng());
        epoch += 1;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                break;
            }
            let (tokens, targets) = make_batch(data, view, chunk, seq);
            grads.fill(0.0);
            let loss =
                model.loss_and_grad(tokens.view(), chunk.len(), seq, targets.view(), &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            train_loss_acc += loss;
            train_loss_n += 1;

            // Global-norm clip.
            if cfg.grad_clip > 0.0 {
                let norm: f64 = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let scale = (cfg.grad_clip / norm) as f32;
                    for g in grads.iter_mut() {
                        *g *= scale;
                    }
                }
            }

            // Adam step.
            let lr = lr_at(cfg, step);
            let t = (step + 1) as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let params = model.params_mut();
            for i in 0..n_params {
                let g = grads[i] as f64;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                params[i] -= update as f32;
            }
            step += 1;

            if step % cfg.eval_interval == 0 || step == cfg.total_steps {
                let val = validation_mse(model, data, view, &val_idx, seq)?;
                let train_mse = train_loss_acc / train_loss_n.max(1) as f64;
                train_loss_acc = 0.0;
                train_loss_n = 0;
                curve.push(CurvePoint { step, train_mse, val_mse: val });
                let score = if val.is_nan() { train_mse } else { val };
                if score < best_val {
                    best_val = score;
                    best_step = step;
                    best_params = Some(model.params().to_vec());
                }
            }
            if step >= cfg.total_steps {
                break 'outer;
            }
        }
    }

    if let Some(best) = best_params {
        model.params_mut().copy_from_slice(&best);
    }
    Ok(TrainReport { curve, best_val, best_step, steps_run: step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::DeploymentConfig;
    use crate::data::{generate_dataset, DatasetSpec};
    use crate::frame::{ConstellationId, PilotPolicy};
    use crate::model::ModelConfig;
    use crate::prompt::LAYOUT_VERSION;
    use crate::quant::{Bits, INF_BITS};

    fn small_spec(tasks: usize, examples: usize) -> DatasetSpec {
        DatasetSpec {
            deployment: DeploymentConfig::desk_scale(),
            t_p: 4,
            k_max: 2,
            noise_power: crate::channel::noise_power_for_snr(
                &DeploymentConfig::desk_scale(),
                24.0,
                2000,
                &mut SeedStream::root(1).rng(),
            ),
            constellation_set: vec![ConstellationId::Bpsk, ConstellationId::Qam4],
            assignment_policy: PilotPolicy::MixedReuse,
            bits_mix: vec![Bits::Finite(4), INF_BITS],
            num_tasks: tasks,
            examples_per_task: examples,
            master_seed: 5,
            layout_version: LAYOUT_VERSION.to_string(),
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig { warmup_steps: 10, total_steps: 110, ..Default::default() };
        assert!(lr_at(&cfg, 0) < lr_at(&cfg, 9));
        assert!((lr_at(&cfg, 9) - cfg.learning_rate).abs() < 1e-4 * cfg.learning_rate);
        assert!(lr_at(&cfg, 60) < lr_at(&cfg, 10));
        assert!(lr_at(&cfg, 109) < 1e-3 * cfg.learning_rate + 1e-12);
    }

    #[test]
    fn zero_readout_step_zero_loss_near_unit() {
        // A zero-output model scores E|x|^2 = 1 on unit-energy symbols.
        let spec = small_spec(16, 8);
        let data = generate_dataset(&spec).unwrap();
        let layout = spec.prompt_layout();
        let cfg = ModelConfig::desk(layout.token_dim(), layout.seq_len());
        let mut model = Transformer::<f32>::init(cfg, 3).unwrap();
        model.zero_readout();
        let idx: Vec<usize> = (0..data.records.len()).collect();
        let mse = validation_mse(&model, &data, DatasetView::Full, &idx, layout.seq_len()).unwrap();
        assert!((mse - 1.0).abs() < 0.05, "zero-model MSE {mse}");
    }

    #[test]
    fn short_training_reduces_loss() {
        let spec = small_spec(48, 16);
        let data = generate_dataset(&spec).unwrap();
        let layout = spec.prompt_layout();
        let cfg = ModelConfig {
            num_layers: 1,
            embed_dim: 32,
            num_heads: 2,
            max_seq_len: layout.seq_len(),
            token_dim: layout.token_dim(),
            ffn_mult: 2,
        };
        let mut model = Transformer::<f32>::init(cfg, 4).unwrap();
        let tc = TrainConfig {
            batch_size: 64,
            total_steps: 500,
            warmup_steps: 50,
            eval_interval: 100,
            seed: 6,
            ..Default::default()
        };
        let idx: Vec<usize> = (0..data.records.len()).collect();
        let before = validation_mse(&model, &data, DatasetView::Full, &idx, layout.seq_len()).unwrap();
        let report = train(&mut model, &data, DatasetView::Full, &tc).unwrap();
        let after = report.curve.last().unwrap().train_mse;
        assert!(after < before, "train loss {after} vs initial {before}");
        assert_eq!(report.steps_run, 500);
    }

    #[test]
    fn training_deterministic() {
        let spec = small_spec(16, 8);
        let data = generate_dataset(&spec).unwrap();
        let layout = spec.prompt_layout();
        let cfg = ModelConfig {
            num_layers: 1,
            embed_dim: 16,
            num_heads: 2,
            max_seq_len: layout.seq_len(),
            token_dim: layout.token_dim(),
            ffn_mult: 2,
        };
        let tc = TrainConfig {
            batch_size: 32,
            total_steps: 60,
            warmup_steps: 10,
            eval_interval: 20,
            val_fraction: 0.2,
            seed: 7,
            ..Default::default()
        };
        let mut a = Transformer::<f32>::init(cfg, 8).unwrap();
        let mut b = Transformer::<f32>::init(cfg, 8).unwrap();
        let ra = train(&mut a, &data, DatasetView::Full, &tc).unwrap();
        let rb = train(&mut b, &data, DatasetView::Full, &tc).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra.curve, rb.curve);
    }

    #[test]
    fn rejects_mismatched_model() {
        let spec = small_spec(8, 4);
        let data = generate_dataset(&spec).unwrap();
        let cfg = ModelConfig::desk(3, 4); // wrong token_dim/seq
        let mut model = Transformer::<f32>::init(cfg, 9).unwrap();
        let tc = TrainConfig { batch_size: 8, total_steps: 10, ..Default::default() };
        assert!(train(&mut model, &data, DatasetView::Full, &tc).is_err());
    }
}
