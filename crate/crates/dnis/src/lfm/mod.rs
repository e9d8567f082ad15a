//! Dense tensor math with hand-written gradients: embedding lookup, the
//! interaction architectures, losses, and the Adam optimizer.
//!
//! Everything here is f64 and uses a fixed left-to-right summation order per
//! batch, so identical inputs give bit-identical outputs.

pub mod arch;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, TaskKind};

#[derive(Debug, Error)]
pub enum LfmError {
    #[error("feature id {id} out of range (N={n})")]
    IdOutOfRange { id: u32, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} outside {task:?} domain")]
    BadLabel { label: f64, task: TaskKind },
    #[error("architecture {arch} requires {need} fields, batch has {got}")]
    FieldCount {
        arch: Architecture,
        need: usize,
        got: usize,
    },
    #[error("checkpoint file corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }
    pub fn filled(rows: usize, cols: usize, v: f64) -> Matrix {
        Matrix {
            data: vec![v; rows * cols],
            rows,
            cols,
        }
    }
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Dense N x K trainable embedding matrix E.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Matrix,
}

impl EmbeddingMatrix {
    pub fn n(&self) -> usize {
        self.values.rows
    }
    pub fn k(&self) -> usize {
        self.values.cols
    }
    pub fn row(&self, i: u32) -> &[f64] {
        self.values.row(i as usize)
    }

    /// Small uniform initialization, as is conventional for embedding tables;
    /// rows only grow once training actually touches them.
    pub fn init(n: usize, k: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
        let _ = k;
        let bound = 0.01;
        let data = (0..n * k).map(|_| rng.random_range(-bound..bound)).collect();
        EmbeddingMatrix {
            values: Matrix {
                data,
                rows: n,
                cols: k,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Mf,
    Fm,
    Mlp,
    NeuMf,
    DeepFmLite,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Mf => "mf",
            Architecture::Fm => "fm",
            Architecture::Mlp => "mlp",
            Architecture::NeuMf => "neumf",
            Architecture::DeepFmLite => "deepfm-lite",
        }
    }
    pub fn from_tag(s: &str) -> Option<Architecture> {
        match s {
            "mf" => Some(Architecture::Mf),
            "fm" => Some(Architecture::Fm),
            "mlp" => Some(Architecture::Mlp),
            "neumf" => Some(Architecture::NeuMf),
            "deepfm-lite" => Some(Architecture::DeepFmLite),
            _ => None,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Architecture::from_tag(s).ok_or_else(|| format!("unknown architecture {s:?}"))
    }
}

/// Fully-connected layer, weights stored out_dim x in_dim row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Kaiming-uniform: U(+-sqrt(6/in_dim)), zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Dense {
        let bound = (6.0 / in_dim as f64).sqrt();
        Dense {
            w: (0..out_dim * in_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// y = W x + b for a batch of n inputs (x is n*in_dim), relu optional.
    pub fn forward(&self, x: &[f64], n: usize, relu: bool) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.in_dim);
        let mut out = vec![0.0; n * self.out_dim];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let oi = &mut out[i * self.out_dim..(i + 1) * self.out_dim];
            for (o, ov) in oi.iter_mut().enumerate() {
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.b[o];
                for (wv, xv) in wrow.iter().zip(xi) {
                    acc += wv * xv;
                }
                *ov = if relu { acc.max(0.0) } else { acc };
            }
        }
        out
    }

    /// Backprop through y = relu?(W x + b) given dL/dy, cached inputs and
    /// outputs. Accumulates into dw/db, returns dL/dx.
    pub fn backward(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        n: usize,
        relu: bool,
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Vec<f64> {
        let mut dx = vec![0.0; n * self.in_dim];
        for i in 0..n {
            let xi = &x[i * self.in_dim..(i + 1) * self.in_dim];
            let dxi = &mut dx[i * self.in_dim..(i + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let mut g = dy[i * self.out_dim + o];
                if relu && y[i * self.out_dim + o] <= 0.0 {
                    g = 0.0;
                }
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                let wrow = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                let dwrow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
                for j in 0..self.in_dim {
                    dwrow[j] += g * xi[j];
                    dxi[j] += g * wrow[j];
                }
            }
        }
        dx
    }
}

/// Interaction-layer parameters theta for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum InteractionParams {
    /// Global bias only.
    Mf { bias: Vec<f64> },
    /// Global bias + per-feature linear weights.
    Fm { bias: Vec<f64>, linear: Vec<f64> },
    /// Tower over the concatenated embeddings, last layer linear to a scalar.
    Mlp { tower: Vec<Dense> },
    /// GMF element-product branch + ReLU tower branch into a joint linear head.
    NeuMf { tower: Vec<Dense>, head: Dense },
    /// FM output + tower-over-concatenation output sharing embeddings.
    DeepFmLite {
        bias: Vec<f64>,
        linear: Vec<f64>,
        tower: Vec<Dense>,
    },
}

impl InteractionParams {
    /// Dense parameter tensors in a fixed order (sparse FM linear excluded).
    pub fn dense_tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match self {
            InteractionParams::Mf { bias } => out.push(bias),
            InteractionParams::Fm { bias, .. } => out.push(bias),
            InteractionParams::Mlp { tower } => {
                for d in tower {
                    out.push(&d.w);
                    out.push(&d.b);
                }
            }
            InteractionParams::NeuMf { tower, head } => {
                for d in tower {
                    out.push(&d.w);
                    out.push(&d.b);
                }
                out.push(&head.w);
                out.push(&head.b);
            }
            InteractionParams::DeepFmLite { bias, tower, .. } => {
                out.push(bias);
                for d in tower {
                    out.push(&d.w);
                    out.push(&d.b);
                }
            }
        }
        out
    }

    pub fn dense_tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        match self {
            InteractionParams::Mf { bias } => out.push(bias),
            InteractionParams::Fm { bias, .. } => out.push(bias),
            InteractionParams::Mlp { tower } => {
                for d in tower {
                    out.push(&mut d.w);
                    out.push(&mut d.b);
                }
            }
            InteractionParams::NeuMf { tower, head } => {
                for d in tower {
                    out.push(&mut d.w);
                    out.push(&mut d.b);
                }
                out.push(&mut head.w);
                out.push(&mut head.b);
            }
            InteractionParams::DeepFmLite { bias, tower, .. } => {
                out.push(bias);
                for d in tower {
                    out.push(&mut d.w);
                    out.push(&mut d.b);
                }
            }
        }
        out
    }

    pub fn linear(&self) -> Option<&[f64]> {
        match self {
            InteractionParams::Fm { linear, .. }
            | InteractionParams::DeepFmLite { linear, .. } => Some(linear),
            _ => None,
        }
    }

    pub fn linear_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            InteractionParams::Fm { linear, .. }
            | InteractionParams::DeepFmLite { linear, .. } => Some(linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub task: TaskKind,
    pub embed: EmbeddingMatrix,
    pub params: InteractionParams,
    pub field_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub k: usize,
    /// Hidden sizes of the ReLU tower for MLP/NeuMF/DeepFM-lite.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Architecture, k: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            arch,
            k,
            hidden: vec![64, 32],
            seed,
        }
    }
}

impl Model {
    pub fn init(n_features: usize, field_count: usize, task: TaskKind, cfg: &ModelConfig) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed = EmbeddingMatrix::init(n_features, cfg.k, &mut rng);
        let k = cfg.k;
        let m = field_count;
        let params = match cfg.arch {
            Architecture::Mf => InteractionParams::Mf { bias: vec![0.0] },
            Architecture::Fm => InteractionParams::Fm {
                bias: vec![0.0],
                linear: vec![0.0; n_features],
            },
            Architecture::Mlp => InteractionParams::Mlp {
                tower: build_tower(m * k, &cfg.hidden, 1, &mut rng),
            },
            Architecture::NeuMf => {
                let tower = build_hidden_tower(2 * k, &cfg.hidden, &mut rng);
                let joint = k + cfg.hidden.last().copied().unwrap_or(2 * k);
                let head = Dense::init(joint, 1, &mut rng);
                InteractionParams::NeuMf { tower, head }
            }
            Architecture::DeepFmLite => InteractionParams::DeepFmLite {
                bias: vec![0.0],
                linear: vec![0.0; n_features],
                tower: build_tower(m * k, &cfg.hidden, 1, &mut rng),
            },
        };
        Model {
            arch: cfg.arch,
            task,
            embed,
            params,
            field_count,
        }
    }

    pub fn n(&self) -> usize {
        self.embed.n()
    }
    pub fn k(&self) -> usize {
        self.embed.k()
    }

    /// Warm-start the output bias at the base rate of the labels (mean for
    /// rating, base-rate logit for CTR) so early training does not spend its
    /// gradient budget crawling toward a constant offset.
    pub fn warm_start_bias(&mut self, labels: &[f64]) {
        if labels.is_empty() {
            return;
        }
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        let base = match self.task {
            TaskKind::Rating => mean,
            TaskKind::Ctr | TaskKind::Implicit => {
                let p = mean.clamp(1e-6, 1.0 - 1e-6);
                (p / (1.0 - p)).ln()
            }
        };
        match &mut self.params {
            InteractionParams::Mf { bias }
            | InteractionParams::Fm { bias, .. }
            | InteractionParams::DeepFmLite { bias, .. } => bias[0] = base,
            InteractionParams::Mlp { tower } => {
                if let Some(last) = tower.last_mut() {
                    last.b[0] = base;
                }
            }
            InteractionParams::NeuMf { head, .. } => head.b[0] = base,
        }
    }
}

/// Hidden ReLU layers followed by a linear output layer.
fn build_tower(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut ChaCha8Rng) -> Vec<Dense> {
    let mut layers = Vec::new();
    let mut d = in_dim;
    for &h in hidden {
        layers.push(Dense::init(d, h, rng));
        d = h;
    }
    layers.push(Dense::init(d, out_dim, rng));
    layers
}

/// ReLU layers only, no output head.
fn build_hidden_tower(in_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Vec<Dense> {
    let mut layers = Vec::new();
    let mut d = in_dim;
    for &h in hidden {
        layers.push(Dense::init(d, h, rng));
        d = h;
    }
    layers
}

/// Soft selection layer seen by the forward/backward pass: the L x K scaling
/// matrix plus the feature-to-block map.
#[derive(Debug, Clone, Copy)]
pub struct AlphaRef<'a> {
    pub alpha: &'a Matrix,
    pub block_of: &'a [u32],
}

/// Gradients of the mean batch loss. Embedding (and FM linear) gradients are
/// sparse: only rows touched by the batch carry an entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub embed_rows: BTreeMap<u32, Vec<f64>>,
    pub linear_rows: BTreeMap<u32, f64>,
    pub dense: Vec<Vec<f64>>,
    pub alpha: Option<Matrix>,
}

impl GradientSet {
    pub fn check_finite(&self) -> Result<(), LfmError> {
        let all_finite = self
            .embed_rows
            .values()
            .flatten()
            .chain(self.dense.iter().flatten())
            .chain(self.alpha.iter().flat_map(|a| a.data.iter()))
            .all(|v| v.is_finite())
            && self.linear_rows.values().all(|v| v.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(LfmError::NonFinite("gradients".into()))
        }
    }
}

/// Per-instance loss.
pub fn loss(pred: f64, label: f64, task: TaskKind) -> Result<f64, LfmError> {
    if !pred.is_finite() || !label.is_finite() {
        return Err(LfmError::NonFinite("loss inputs".into()));
    }
    match task {
        TaskKind::Rating => {
            if !(1.0..=5.0).contains(&label) {
                return Err(LfmError::BadLabel { label, task });
            }
            let d = pred - label;
            Ok(d * d)
        }
        TaskKind::Ctr | TaskKind::Implicit => {
            if label != 0.0 && label != 1.0 {
                return Err(LfmError::BadLabel { label, task });
            }
            // BCE on sigmoid(pred), stabilized in logit form.
            Ok(pred.max(0.0) - pred * label + (-pred.abs()).exp().ln_1p())
        }
    }
}

pub fn mean_loss(preds: &[f64], labels: &[f64], task: TaskKind) -> Result<f64, LfmError> {
    debug_assert_eq!(preds.len(), labels.len());
    let mut acc = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        acc += loss(p, y, task)?;
    }
    Ok(acc / preds.len() as f64)
}

/// d(mean loss)/d(pred_i), in logit space for ctr.
pub fn loss_grad(preds: &[f64], labels: &[f64], task: TaskKind) -> Vec<f64> {
    let n = preds.len() as f64;
    preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| match task {
            TaskKind::Rating => 2.0 * (p - y) / n,
            TaskKind::Ctr | TaskKind::Implicit => (sigmoid(p) - y) / n,
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-instance M x K embedding block, scaled by feature values (Eq. form:
/// row m of instance i is value * E[id]).
pub fn embed_lookup(embed: &EmbeddingMatrix, batch: &Batch) -> Result<Vec<f64>, LfmError> {
    let k = embed.k();
    let mut out = vec![0.0; batch.ids.len() * k];
    for (j, (&id, &value)) in batch.ids.iter().zip(&batch.values).enumerate() {
        if id as usize >= embed.n() {
            return Err(LfmError::IdOutOfRange {
                id,
                n: embed.n(),
            });
        }
        let row = embed.row(id);
        let dst = &mut out[j * k..(j + 1) * k];
        for (d, &s) in dst.iter_mut().zip(row) {
            *d = value * s;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Lazily-advanced per-row moments for sparse tables: only rows that receive a
/// gradient advance their step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: Vec<u64>,
    pub width: usize,
}

impl RowMoments {
    fn new(rows: usize, width: usize) -> RowMoments {
        RowMoments {
            m: vec![0.0; rows * width],
            v: vec![0.0; rows * width],
            t: vec![0; rows],
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub embed: RowMoments,
    pub linear: Option<RowMoments>,
    pub dense: Vec<DenseMoments>,
}

impl AdamState {
    pub fn for_model(model: &Model) -> AdamState {
        AdamState {
            embed: RowMoments::new(model.n(), model.k()),
            linear: model.params.linear().map(|l| RowMoments::new(l.len(), 1)),
            dense: model
                .params
                .dense_tensors()
                .iter()
                .map(|t| DenseMoments {
                    m: vec![0.0; t.len()],
                    v: vec![0.0; t.len()],
                    t: 0,
                })
                .collect(),
        }
    }
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// Bias-corrected Adam step over model parameters. Sparse tables update only
/// the rows present in `grads`.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut Model,
    grads: &GradientSet,
    lr: f64,
) -> Result<(), LfmError> {
    grads.check_finite()?;
    let k = model.k();
    for (&row, g) in &grads.embed_rows {
        let r = row as usize;
        if g.len() != k {
            return Err(LfmError::ShapeMismatch(format!(
                "embedding gradient width {} != K {}",
                g.len(),
                k
            )));
        }
        state.embed.t[r] += 1;
        let t = state.embed.t[r];
        adam_update(
            model.embed.values.row_mut(r),
            g,
            &mut state.embed.m[r * k..(r + 1) * k],
            &mut state.embed.v[r * k..(r + 1) * k],
            t,
            lr,
        );
    }
    if !grads.linear_rows.is_empty() {
        let moments = state.linear.as_mut().ok_or_else(|| {
            LfmError::ShapeMismatch("linear gradients for a model without linear terms".into())
        })?;
        let linear = model.params.linear_mut().unwrap();
        for (&row, &g) in &grads.linear_rows {
            let r = row as usize;
            moments.t[r] += 1;
            let t = moments.t[r];
            adam_update(
                &mut linear[r..r + 1],
                &[g],
                &mut moments.m[r..r + 1],
                &mut moments.v[r..r + 1],
                t,
                lr,
            );
        }
    }
    let mut tensors = model.params.dense_tensors_mut();
    if tensors.len() != grads.dense.len() {
        return Err(LfmError::ShapeMismatch(format!(
            "{} dense gradient tensors for {} parameters",
            grads.dense.len(),
            tensors.len()
        )));
    }
    for (tensor, (g, mom)) in tensors
        .iter_mut()
        .zip(grads.dense.iter().zip(&mut state.dense))
    {
        if tensor.len() != g.len() {
            return Err(LfmError::ShapeMismatch("dense tensor/gradient".into()));
        }
        mom.t += 1;
        adam_update(tensor, g, &mut mom.m, &mut mom.v, mom.t, lr);
    }
    Ok(())
}

/// Plain SGD: theta <- theta - lr * g over exactly the entries in `grads`.
pub fn sgd_step(model: &mut Model, grads: &GradientSet, lr: f64) -> Result<(), LfmError> {
    grads.check_finite()?;
    let k = model.k();
    for (&row, g) in &grads.embed_rows {
        let dst = model.embed.values.row_mut(row as usize);
        for (d, &gv) in dst.iter_mut().zip(g) {
            *d -= lr * gv;
        }
        debug_assert_eq!(g.len(), k);
    }
    if !grads.linear_rows.is_empty() {
        let linear = model.params.linear_mut().ok_or_else(|| {
            LfmError::ShapeMismatch("linear gradients for a model without linear terms".into())
        })?;
        for (&row, &g) in &grads.linear_rows {
            linear[row as usize] -= lr * g;
        }
    }
    for (tensor, g) in model.params.dense_tensors_mut().iter_mut().zip(&grads.dense) {
        for (d, &gv) in tensor.iter_mut().zip(g) {
            *d -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(ids: Vec<u32>, values: Vec<f64>, labels: Vec<f64>, m: usize) -> Batch {
        Batch {
            ids,
            values,
            labels,
            field_count: m,
        }
    }

    fn embed_2x2(rows: &[[f64; 2]]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            values: Matrix {
                data: rows.iter().flatten().copied().collect(),
                rows: rows.len(),
                cols: 2,
            },
        }
    }

    #[test]
    fn lookup_identity_scaling_and_annihilation() {
        let e = embed_2x2(&[[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 2.0]]);
        let b = batch(vec![3], vec![1.0], vec![0.0], 1);
        assert_eq!(embed_lookup(&e, &b).unwrap(), vec![1.0, 2.0]);
        let b = batch(vec![3], vec![0.0], vec![0.0], 1);
        assert_eq!(embed_lookup(&e, &b).unwrap(), vec![0.0, 0.0]);
        let b = batch(vec![3], vec![2.0], vec![0.0], 1);
        assert_eq!(embed_lookup(&e, &b).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn lookup_rejects_out_of_range_id() {
        let e = embed_2x2(&[[1.0, 2.0]]);
        let b = batch(vec![5], vec![1.0], vec![0.0], 1);
        assert!(matches!(
            embed_lookup(&e, &b),
            Err(LfmError::IdOutOfRange { id: 5, n: 1 })
        ));
    }

    #[test]
    fn lookup_is_linear_in_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = EmbeddingMatrix::init(6, 4, &mut rng);
        let c = 3.75;
        let b1 = batch(vec![2, 5], vec![1.0, 1.0], vec![0.0], 2);
        let bc = batch(vec![2, 5], vec![c, c], vec![0.0], 2);
        let x1 = embed_lookup(&e, &b1).unwrap();
        let xc = embed_lookup(&e, &bc).unwrap();
        for (a, b) in x1.iter().zip(&xc) {
            assert!((a * c - b).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(loss(3.0, 3.0, TaskKind::Rating).unwrap(), 0.0);
        let l1 = loss(0.0, 1.0, TaskKind::Ctr).unwrap();
        let l0 = loss(0.0, 0.0, TaskKind::Ctr).unwrap();
        assert!((l1 - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l1, l0);
    }

    #[test]
    fn loss_rejects_out_of_domain_labels() {
        assert!(loss(1.0, 7.0, TaskKind::Rating).is_err());
        assert!(loss(1.0, 0.5, TaskKind::Ctr).is_err());
    }

    #[test]
    fn adam_first_step_is_sign_of_gradient() {
        let cfg = ModelConfig::new(Architecture::Mf, 2, 1);
        let mut model = Model::init(2, 2, TaskKind::Rating, &cfg);
        let mut state = AdamState::for_model(&model);
        let before = model.embed.values.data.clone();
        let mut grads = GradientSet::default();
        grads.embed_rows.insert(0, vec![0.2, -0.4]);
        grads.dense = vec![vec![0.0]];
        adam_step(&mut state, &mut model, &grads, 0.001).unwrap();
        let after = &model.embed.values.data;
        // Bias-corrected first step ~ -lr*sign(g).
        assert!((after[0] - (before[0] - 0.001)).abs() < 1e-7);
        assert!((after[1] - (before[1] + 0.001)).abs() < 1e-7);
        // Untouched row unchanged.
        assert_eq!(&after[2..4], &before[2..4]);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_close_and_decays_moments() {
        let cfg = ModelConfig::new(Architecture::Mf, 2, 1);
        let mut model = Model::init(1, 2, TaskKind::Rating, &cfg);
        let mut state = AdamState::for_model(&model);
        let mut grads = GradientSet::default();
        grads.embed_rows.insert(0, vec![1.0, 1.0]);
        grads.dense = vec![vec![0.0]];
        adam_step(&mut state, &mut model, &grads, 0.001).unwrap();
        let m_before = state.embed.m[0];
        let snapshot = model.clone();
        grads.embed_rows.insert(0, vec![0.0, 0.0]);
        adam_step(&mut state, &mut model, &grads, 0.0).unwrap();
        assert_eq!(model, snapshot); // lr=0: parameters unchanged
        assert!((state.embed.m[0] - ADAM_BETA1 * m_before).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = ModelConfig::new(Architecture::Fm, 4, 7);
        let run = || {
            let mut model = Model::init(5, 2, TaskKind::Ctr, &cfg);
            let mut state = AdamState::for_model(&model);
            for step in 0..10 {
                let mut grads = GradientSet::default();
                grads.embed_rows.insert(step % 5, vec![0.1; 4]);
                grads.linear_rows.insert(step % 5, 0.3);
                grads.dense = vec![vec![0.05]];
                adam_step(&mut state, &mut model, &grads, 0.01).unwrap();
            }
            model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let cfg = ModelConfig::new(Architecture::Mf, 2, 1);
        let mut model = Model::init(1, 2, TaskKind::Rating, &cfg);
        let mut state = AdamState::for_model(&model);
        let mut grads = GradientSet::default();
        grads.embed_rows.insert(0, vec![f64::NAN, 0.0]);
        grads.dense = vec![vec![0.0]];
        assert!(adam_step(&mut state, &mut model, &grads, 0.001).is_err());
    }

    #[test]
    fn sgd_step_with_zero_rate_is_identity() {
        let cfg = ModelConfig::new(Architecture::Mf, 2, 1);
        let mut model = Model::init(3, 2, TaskKind::Rating, &cfg);
        let snapshot = model.clone();
        let mut grads = GradientSet::default();
        grads.embed_rows.insert(1, vec![5.0, -5.0]);
        grads.dense = vec![vec![2.0]];
        sgd_step(&mut model, &grads, 0.0).unwrap();
        assert_eq!(model, snapshot);
    }
}
