//! MSE training with Adam and Spearman-maximizing checkpoint selection.
//!
//! A run walks seeded shuffled mini-batches (the last partial batch of an
//! epoch is kept), takes one Adam step per batch with dropout active, and
//! every `eval_every` steps scores the dev set with dropout off. The
//! returned checkpoint is the one maximizing dev Spearman, ties broken by
//! the earliest step. Everything is a pure function of (data, config,
//! seed), so reruns are bit-identical.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Checkpoint, DataError, Sample};
use crate::metrics::{self, MetricsError};
use crate::model::{backward, Gradients, ModelConfig, ModelError, ModelParams};

/// Optimization hyperparameters for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 256,
            max_steps: 2000,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Steps needed to sweep `n_samples` for `epochs` epochs at `batch_size`.
pub fn steps_for_epochs(n_samples: usize, batch_size: usize, epochs: u64) -> u64 {
    (n_samples.div_ceil(batch_size.max(1)) as u64) * epochs
}

/// Where a training run starts from.
#[derive(Debug, Clone)]
pub enum TrainInit {
    /// Fresh random parameters from this seed.
    Scratch { init_seed: u64 },
    /// Continue from an existing checkpoint (layout must match the config).
    WarmStart(Box<Checkpoint>),
}

/// Mean squared error over a prediction/target batch.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    if preds.len() != targets.len() {
        return Err(TrainError::LengthMismatch {
            left: preds.len(),
            right: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(TrainError::LengthMismatch { left: 0, right: 0 });
    }
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64)
}

/// Adam moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with the standard defaults (0.9, 0.999, 1e-8).
    pub fn new(param_len: usize) -> Self {
        Self {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update in place: biased first/second moments, bias correction,
/// then `p -= lr * m_hat / (sqrt(v_hat) + eps)` per parameter.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch {
            params: params.len(),
            grads: grads.len(),
            state: state.m.len(),
        });
    }
    state.t += 1;
    let bias1 = 1.0 - state.beta1.powi(state.t as i32);
    let bias2 = 1.0 - state.beta2.powi(state.t as i32);
    for ((p, &g), (m, v)) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// One evaluation row of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Mean batch loss since the previous evaluation; absent at step 0.
    pub train_loss: Option<f64>,
    /// Absent when the dev predictions were constant.
    pub dev_spearman: Option<f64>,
    pub dev_mse: f64,
}

/// All evaluations of a run plus the index of the selected checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
    pub best_index: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EvalRecord {
        &self.records[self.best_index]
    }

    /// Emit the history as CSV (step, train_loss, dev_spearman, dev_mse).
    pub fn write_csv(&self, path: &Path, overwrite: bool) -> Result<(), TrainError> {
        let file = crate::io_util::create_file(path, overwrite)?;
        let mut writer = csv::Writer::from_writer(file);
        for record in &self.records {
            writer
                .serialize(record)
                .map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Serves seeded shuffled index batches; reshuffles at each epoch boundary
/// and keeps the final partial batch of an epoch.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: usize::MAX, // force a shuffle on first use
        }
    }

    fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let batch = &self.order[self.pos..end];
        self.pos = end;
        batch
    }
}

fn dev_eval(
    params: &ModelParams,
    config: &ModelConfig,
    dev: &[Sample],
    dev_targets: &[f64],
) -> Result<(Option<f64>, f64), TrainError> {
    let scores = metrics::score_samples(params, config, dev)?;
    let mse = mse_loss(&scores, dev_targets)?;
    let spearman = match metrics::spearman(dev_targets, &scores) {
        Ok(rho) => Some(rho),
        Err(MetricsError::ConstantVector) => None,
        Err(other) => return Err(other.into()),
    };
    Ok((spearman, mse))
}

/// Train on `train_set`, selecting the checkpoint that maximizes dev
/// Spearman (earliest step wins ties).
pub fn train(
    init: TrainInit,
    model_config: &ModelConfig,
    train_set: &[Sample],
    dev_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    model_config.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset { which: "train" });
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyDataset { which: "dev" });
    }
    for sample in train_set {
        if sample.target.is_none() {
            return Err(MetricsError::MissingTarget(sample.sample_id.clone()).into());
        }
    }
    let mut dev_targets = Vec::with_capacity(dev_set.len());
    for sample in dev_set {
        dev_targets.push(
            sample
                .target_value()
                .ok_or_else(|| MetricsError::MissingTarget(sample.sample_id.clone()))?,
        );
    }

    let (mut params, provenance) = match init {
        TrainInit::Scratch { init_seed } => (
            ModelParams::init(model_config, init_seed),
            "scratch".to_string(),
        ),
        TrainInit::WarmStart(ckpt) => {
            crate::model::ensure_config_match(&ckpt.params, model_config)?;
            let provenance = format!("{}+fine-tuned", ckpt.provenance);
            (ckpt.params, provenance)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params.len());
    let mut batches = BatchStream::new(train_set.len());
    let mut history = TrainHistory {
        records: Vec::new(),
        best_index: 0,
    };

    let mut best_params = params.clone();
    let mut record_eval = |params: &ModelParams,
                           best_params: &mut ModelParams,
                           history: &mut TrainHistory,
                           step: u64,
                           train_loss: Option<f64>|
     -> Result<(), TrainError> {
        let (dev_spearman, dev_mse) = dev_eval(params, model_config, dev_set, &dev_targets)?;
        history.records.push(EvalRecord {
            step,
            train_loss,
            dev_spearman,
            dev_mse,
        });
        let current = history.records.len() - 1;
        let best_so_far = history.records[history.best_index].dev_spearman;
        let improved = match (dev_spearman, best_so_far) {
            (Some(new), Some(best)) => new > best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if current == 0 || improved {
            history.best_index = current;
            *best_params = params.clone();
        }
        Ok(())
    };

    record_eval(&params, &mut best_params, &mut history, 0, None)?;

    let mut batch_buf: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    for step in 1..=cfg.max_steps {
        let indices = batches.next_batch(cfg.batch_size, &mut rng);
        batch_buf.clear();
        batch_buf.extend(indices.iter().map(|&i| train_set[i].clone()));

        let (loss, grads) = backward(&params, model_config, &batch_buf, &mut rng)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
        loss_sum += loss;
        loss_count += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let train_loss = (loss_count > 0).then(|| loss_sum / loss_count as f64);
            record_eval(&params, &mut best_params, &mut history, step, train_loss)?;
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    let best = history.best();
    let checkpoint = Checkpoint {
        params: best_params,
        config: *model_config,
        step: best.step,
        dev_spearman: best.dev_spearman,
        provenance,
    };
    Ok((checkpoint, history))
}

/// The tuning grid: every learning rate crossed with every label budget.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub label_counts: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-4, 1e-5, 1e-6],
            label_counts: vec![0, 5, 10, 20],
        }
    }
}

/// One grid cell's selected-checkpoint metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridRow {
    pub lr: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub spearman_dev: Option<f64>,
    pub spearman_test: Option<f64>,
    pub mse_dev: f64,
    pub mse_test: f64,
}

/// Grid outcome: per-cell rows plus the dev-Spearman-maximizing cell.
#[derive(Debug)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub selected: usize,
    pub best_checkpoint: Checkpoint,
}

impl GridResult {
    /// Emit the result table as CSV with exactly the columns
    /// lr, K, spearman_dev, spearman_test, mse_dev, mse_test.
    pub fn write_csv(&self, path: &Path, overwrite: bool) -> Result<(), TrainError> {
        let file = crate::io_util::create_file(path, overwrite)?;
        let mut writer = csv::Writer::from_writer(file);
        for row in &self.rows {
            writer
                .serialize(row)
                .map_err(|e| TrainError::Io(std::io::Error::other(e)))?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Emit rows plus the selected index as JSON.
    pub fn write_json(&self, path: &Path, overwrite: bool) -> Result<(), TrainError> {
        #[derive(Serialize)]
        struct GridJson<'a> {
            rows: &'a [GridRow],
            selected: usize,
        }
        let mut file = crate::io_util::create_file(path, overwrite)?;
        serde_json::to_writer_pretty(
            &mut file,
            &GridJson {
                rows: &self.rows,
                selected: self.selected,
            },
        )
        .map_err(std::io::Error::from)?;
        file.write_all(b"\n")?;
        Ok(())
    }
}

/// Run `train` for every grid cell with shared seeds and pick the cell
/// whose selected checkpoint maximizes dev Spearman.
pub fn grid_search(
    grid: &GridSpec,
    base_config: &ModelConfig,
    base_train: &TrainConfig,
    init_seed: u64,
    train_set: &[Sample],
    dev_set: &[Sample],
    test_set: &[Sample],
) -> Result<GridResult, TrainError> {
    if grid.learning_rates.is_empty() || grid.label_counts.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut rows = Vec::new();
    let mut best: Option<(usize, Checkpoint)> = None;
    for &lr in &grid.learning_rates {
        for &k in &grid.label_counts {
            let model_config = ModelConfig {
                num_labels: k,
                ..*base_config
            };
            let train_config = TrainConfig {
                learning_rate: lr,
                ..*base_train
            };
            let (checkpoint, history) = train(
                TrainInit::Scratch { init_seed },
                &model_config,
                train_set,
                dev_set,
                &train_config,
            )?;
            let best_record = history.best();
            let test_report = metrics::evaluate(&checkpoint, test_set)?;
            rows.push(GridRow {
                lr,
                k,
                spearman_dev: best_record.dev_spearman,
                spearman_test: test_report.spearman,
                mse_dev: best_record.dev_mse,
                mse_test: test_report.mse,
            });
            let candidate_rho = best_record.dev_spearman;
            let improved = match &best {
                None => true,
                Some((index, _)) => match (candidate_rho, rows[*index].spearman_dev) {
                    (Some(new), Some(old)) => new > old,
                    (Some(_), None) => true,
                    (None, _) => false,
                },
            };
            if improved {
                best = Some((rows.len() - 1, checkpoint));
            }
        }
    }
    let (selected, best_checkpoint) = best.expect("grid has at least one cell");
    Ok(GridResult {
        rows,
        selected,
        best_checkpoint,
    })
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("{which} dataset is empty")]
    EmptyDataset { which: &'static str },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("shape mismatch: params {params}, grads {grads}, optimizer state {state}")]
    ShapeMismatch {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("grid has no cells")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
