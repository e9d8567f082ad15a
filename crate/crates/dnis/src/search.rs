//! The DNIS optimizer: soft selection layer over feature blocks, bi-level
//! training with one-step lookahead, first/second-order hypergradients,
//! row-wise gradient normalization, clipping, and early stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::DimMask;
use crate::corpus::{
    BatchStream, BlockingScheme, CorpusError, FeatureVocabulary, InteractionTable, MappedTable,
    TaskKind,
};
use crate::lfm::arch::{backward, forward};
use crate::lfm::{
    adam_step, mean_loss, sgd_step, AdamState, AlphaRef, DenseMoments, GradientSet, LfmError,
    Matrix, Model, ModelConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Lfm(#[from] LfmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("non-finite {kind} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        kind: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("validation set is empty after vocabulary mapping")]
    EmptyValidation,
    #[error("training set is empty after vocabulary mapping")]
    EmptyTrain,
}

/// The L x K soft selection matrix, clipped to [0,1] after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSelectionLayer {
    pub values: Matrix,
}

impl SoftSelectionLayer {
    /// All-ones initialization.
    pub fn ones(l: usize, k: usize) -> SoftSelectionLayer {
        SoftSelectionLayer {
            values: Matrix::filled(l, k, 1.0),
        }
    }

    pub fn as_ref<'a>(&'a self, blocks: &'a BlockingScheme) -> AlphaRef<'a> {
        AlphaRef {
            alpha: &self.values,
            block_of: &blocks.block_of,
        }
    }

    /// Mean selection value per block row.
    pub fn block_means(&self) -> Vec<f64> {
        (0..self.values.rows)
            .map(|r| self.values.row(r).iter().sum::<f64>() / self.values.cols as f64)
            .collect()
    }
}

/// Entrywise min(max(a, 0), 1).
pub fn clip_alpha(alpha: &mut SoftSelectionLayer) {
    for v in &mut alpha.values.data {
        *v = v.clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperOrder {
    First,
    Second,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Virtual-step learning rate; defaults to lr_theta when absent.
    pub xi: Option<f64>,
    pub lr_theta: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub order: HyperOrder,
    pub eps_g: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            xi: None,
            lr_theta: 0.001,
            lr_alpha: 0.01,
            batch_size: 4096,
            order: HyperOrder::First,
            eps_g: 1e-7,
            patience: 3,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn xi(&self) -> f64 {
        self.xi.unwrap_or(self.lr_theta)
    }
}

/// One training-log line: step/epoch counters, batch losses, and the current
/// mean selection value per block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub alpha_block_means: Vec<f64>,
}

/// Full optimizer state; `fit` returns the best-validation snapshot of the
/// model and selection layer together with final counters and the log.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub alpha: SoftSelectionLayer,
    pub opt_theta: AdamState,
    pub opt_alpha: DenseMoments,
    pub epoch: usize,
    pub step: usize,
    pub best_val_loss: f64,
    pub patience_used: usize,
    pub log: Vec<LogRecord>,
    pub train_seconds: f64,
}

/// Plain one-step SGD copy of the model (Adam is not used for the lookahead).
pub fn virtual_step(
    model: &Model,
    grads: &GradientSet,
    xi: f64,
) -> Result<Model, LfmError> {
    let mut lookahead = model.clone();
    sgd_step(&mut lookahead, grads, xi)?;
    Ok(lookahead)
}

/// Hypergradient of the validation loss with respect to the selection layer.
///
/// First order: the exact alpha-gradient of the validation loss at the
/// looked-ahead parameters. Second order additionally subtracts
/// xi * (mixed second derivative of the training loss) applied to the
/// validation parameter gradient, approximated by a symmetric
/// finite-difference Hessian-vector product.
pub fn hypergradient(
    model: &Model,
    alpha: &SoftSelectionLayer,
    blocks: &BlockingScheme,
    train_batch: &crate::corpus::Batch,
    val_batch: &crate::corpus::Batch,
    cfg: &SearchConfig,
) -> Result<Matrix, SearchError> {
    let aref = alpha.as_ref(blocks);
    let xi = cfg.xi();

    let train_fwd = forward(model, train_batch, Some(aref))?;
    let train_grads = backward(model, train_batch, &train_fwd, Some(aref))?;
    let lookahead = virtual_step(model, &train_grads, xi)?;

    let val_fwd = forward(&lookahead, val_batch, Some(aref))?;
    let val_grads = backward(&lookahead, val_batch, &val_fwd, Some(aref))?;
    let first = val_grads.alpha.clone().expect("alpha context supplied");
    if matches!(cfg.order, HyperOrder::First) || xi == 0.0 {
        return Ok(first);
    }

    // v = grad of L_val with respect to the looked-ahead parameters.
    let vnorm2: f64 = val_grads
        .embed_rows
        .values()
        .flatten()
        .chain(val_grads.dense.iter().flatten())
        .map(|g| g * g)
        .sum::<f64>()
        + val_grads.linear_rows.values().map(|g| g * g).sum::<f64>();
    let vnorm = vnorm2.sqrt();
    if vnorm == 0.0 {
        return Ok(first);
    }
    let eps = 0.01 / vnorm;

    // Theta +- eps*v around the ORIGINAL parameters.
    let mut plus = model.clone();
    sgd_step(&mut plus, &val_grads, -eps)?;
    let mut minus = model.clone();
    sgd_step(&mut minus, &val_grads, eps)?;

    let gp = {
        let fwd = forward(&plus, train_batch, Some(aref))?;
        backward(&plus, train_batch, &fwd, Some(aref))?
            .alpha
            .unwrap()
    };
    let gm = {
        let fwd = forward(&minus, train_batch, Some(aref))?;
        backward(&minus, train_batch, &fwd, Some(aref))?
            .alpha
            .unwrap()
    };

    let mut out = first;
    for i in 0..out.data.len() {
        out.data[i] -= xi * (gp.data[i] - gm.data[i]) / (2.0 * eps);
    }
    Ok(out)
}

/// Row-wise gradient normalization: each row divided by its mean absolute
/// value plus eps_g. Zero rows stay zero.
pub fn normalize_rowwise(g: &Matrix, eps_g: f64) -> Matrix {
    let mut out = Matrix::zeros(g.rows, g.cols);
    for r in 0..g.rows {
        let row = g.row(r);
        let mean_abs = row.iter().map(|v| v.abs()).sum::<f64>() / g.cols as f64;
        let denom = mean_abs + eps_g;
        let dst = out.row_mut(r);
        for (d, &s) in dst.iter_mut().zip(row) {
            *d = s / denom;
        }
    }
    out
}

enum StopDecision {
    Improved,
    Wait,
    Stop,
}

struct EarlyStopper {
    best: f64,
    patience: usize,
    used: usize,
}

impl EarlyStopper {
    fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            best: f64::INFINITY,
            patience,
            used: 0,
        }
    }
    fn observe(&mut self, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.used = 0;
            StopDecision::Improved
        } else {
            self.used += 1;
            if self.used >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}

/// Mean loss of the current (model, alpha) over a whole mapped table, in
/// fixed batch order.
pub fn full_loss(
    model: &Model,
    alpha: Option<AlphaRef<'_>>,
    table: &MappedTable,
    batch_size: usize,
) -> Result<f64, LfmError> {
    let n = table.len();
    let mut acc = 0.0;
    let mut row = 0;
    while row < n {
        let end = (row + batch_size).min(n);
        let rows: Vec<usize> = (row..end).collect();
        let batch = table.batch_of(&rows);
        let fwd = forward(model, &batch, alpha)?;
        acc += mean_loss(&fwd.preds, &batch.labels, model.task)? * batch.len() as f64;
        row = end;
    }
    Ok(acc / n as f64)
}

/// Adam update of a free-standing dense tensor (used for alpha).
pub fn adam_step_tensor(
    values: &mut [f64],
    grads: &[f64],
    moments: &mut DenseMoments,
    lr: f64,
) {
    moments.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(moments.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(moments.t as i32);
    for i in 0..values.len() {
        moments.m[i] = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        moments.v[i] = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let mhat = moments.m[i] / bc1;
        let vhat = moments.v[i] / bc2;
        values[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// Bi-level DNIS training over pre-mapped tables. `mask` restricts baseline
/// runs to a fixed per-block dimension budget; DNIS runs pass None.
#[allow(clippy::too_many_arguments)]
pub fn fit_mapped(
    train: &MappedTable,
    val: &MappedTable,
    blocks: &BlockingScheme,
    task: TaskKind,
    model_cfg: &ModelConfig,
    cfg: &SearchConfig,
    mask: Option<&DimMask>,
) -> Result<TrainState, SearchError> {
    if train.is_empty() {
        return Err(SearchError::EmptyTrain);
    }
    if val.is_empty() {
        return Err(SearchError::EmptyValidation);
    }
    let started = Instant::now();
    let n_features = blocks.block_of.len();
    let l = blocks.block_count;
    let mut model = Model::init(n_features, train.field_count, task, model_cfg);
    model.warm_start_bias(&train.labels);
    if let Some(mask) = mask {
        mask.zero_embedding(&mut model.embed);
    }
    let mut alpha = SoftSelectionLayer::ones(l, model_cfg.k);
    let mut opt_theta = AdamState::for_model(&model);
    let mut opt_alpha = DenseMoments {
        m: vec![0.0; l * model_cfg.k],
        v: vec![0.0; l * model_cfg.k],
        t: 0,
    };
    let search_alpha = cfg.lr_alpha > 0.0;

    // Validation batches cycle independently of epochs.
    let mut val_stream = if search_alpha {
        Some(BatchStream::new(
            val.clone(),
            cfg.batch_size,
            cfg.seed.wrapping_add(0x5eed_a1fa),
            true,
        )?)
    } else {
        None
    };

    let mut stopper = EarlyStopper::new(cfg.patience.max(1));
    let mut best: Option<(Model, SoftSelectionLayer)> = None;
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;
    let mut patience_used = 0usize;

    'epochs: for ep in 0..cfg.max_epochs {
        epoch = ep;
        let stream = BatchStream::new(
            train.clone(),
            cfg.batch_size,
            cfg.seed.wrapping_add(ep as u64),
            false,
        )?;
        for batch in stream {
            step += 1;
            let aref = alpha.as_ref(blocks);
            // (a) Adam-update theta on the training batch.
            let fwd = forward(&model, &batch, Some(aref))?;
            let train_loss = mean_loss(&fwd.preds, &batch.labels, task)?;
            if !train_loss.is_finite() {
                return Err(SearchError::NonFiniteLoss {
                    kind: "train",
                    epoch: ep,
                    step,
                });
            }
            let mut grads = backward(&model, &batch, &fwd, Some(aref))?;
            if let Some(mask) = mask {
                mask.mask_grads(&mut grads);
            }
            adam_step(&mut opt_theta, &mut model, &grads, cfg.lr_theta)?;

            let mut val_batch_loss = None;
            if search_alpha {
                // (b) hypergradient on the next validation batch.
                let val_batch = val_stream.as_mut().unwrap().next().expect("cycling stream");
                let g = hypergradient(&model, &alpha, blocks, &batch, &val_batch, cfg)?;
                // (c) row-wise normalization.
                let g_norm = normalize_rowwise(&g, cfg.eps_g);
                // (d) Adam-update alpha, then clip into [0,1].
                adam_step_tensor(
                    &mut alpha.values.data,
                    &g_norm.data,
                    &mut opt_alpha,
                    cfg.lr_alpha,
                );
                clip_alpha(&mut alpha);
                let vf = forward(&model, &val_batch, Some(alpha.as_ref(blocks)))?;
                val_batch_loss = Some(mean_loss(&vf.preds, &val_batch.labels, task)?);
            }
            log.push(LogRecord {
                step,
                epoch: ep,
                train_loss,
                val_loss: val_batch_loss,
                alpha_block_means: alpha.block_means(),
            });
        }

        // Epoch-end full-validation loss drives early stopping.
        let val_loss = full_loss(&model, Some(alpha.as_ref(blocks)), val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(SearchError::NonFiniteLoss {
                kind: "validation",
                epoch: ep,
                step,
            });
        }
        log.push(LogRecord {
            step,
            epoch: ep,
            train_loss: f64::NAN,
            val_loss: Some(val_loss),
            alpha_block_means: alpha.block_means(),
        });
        match stopper.observe(val_loss) {
            StopDecision::Improved => {
                best = Some((model.clone(), alpha.clone()));
                patience_used = 0;
            }
            StopDecision::Wait => patience_used = stopper.used,
            StopDecision::Stop => {
                patience_used = stopper.used;
                break 'epochs;
            }
        }
    }

    let (best_model, best_alpha) = best.unwrap_or((model, alpha));
    Ok(TrainState {
        model: best_model,
        alpha: best_alpha,
        opt_theta,
        opt_alpha,
        epoch,
        step,
        best_val_loss: stopper.best,
        patience_used,
        log,
        train_seconds: started.elapsed().as_secs_f64(),
    })
}

/// DNIS training from raw tables: maps both splits against the vocabulary,
/// then runs `fit_mapped`.
pub fn fit(
    train: &InteractionTable,
    val: &InteractionTable,
    vocab: &FeatureVocabulary,
    blocks: &BlockingScheme,
    model_cfg: &ModelConfig,
    cfg: &SearchConfig,
) -> Result<TrainState, SearchError> {
    let train_mapped = MappedTable::from_table(train, vocab);
    let val_mapped = MappedTable::from_table(val, vocab);
    fit_mapped(
        &train_mapped,
        &val_mapped,
        blocks,
        train.task,
        model_cfg,
        cfg,
        None,
    )
}
