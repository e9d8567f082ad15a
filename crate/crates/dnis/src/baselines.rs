//! Comparison methods: uniform grid search, random descending block schemes,
//! the frequency-heuristic scheme, and one-shot magnitude pruning. All of them
//! reuse the same trainer as the searched runs, with the selection layer
//! frozen and a per-block column mask applied.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{BlockingScheme, FeatureVocabulary, MappedTable, TaskKind};
use crate::dimscheme::{prune_to_cr, CooEmbedding, DimError, MergedEmbedding};
use crate::lfm::{EmbeddingMatrix, GradientSet, ModelConfig};
use crate::search::{fit_mapped, SearchConfig, SearchError, TrainState};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("candidate dimension list is empty")]
    EmptyDims,
    #[error("scheme inconsistent with blocking: {0}")]
    InconsistentScheme(String),
    #[error("temperature {0} outside (0, 1]")]
    BadTemperature(f64),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Dim(#[from] DimError),
}

/// One dimension for every feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformScheme {
    pub k: usize,
}

/// Per-block dimension counts, nonincreasing from the most to the least
/// frequent block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDimScheme {
    dims: Vec<usize>,
}

impl BlockDimScheme {
    pub fn new(dims: Vec<usize>) -> Result<BlockDimScheme, BaselineError> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(BaselineError::InconsistentScheme(
                "dimensions must be nonempty and positive".into(),
            ));
        }
        if dims.windows(2).any(|w| w[0] < w[1]) {
            return Err(BaselineError::InconsistentScheme(format!(
                "dimensions {dims:?} are not nonincreasing"
            )));
        }
        Ok(BlockDimScheme { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
}

/// Restriction of each feature block to its first k_l embedding columns.
/// Masked columns are zeroed at init and receive zero gradient, so they stay
/// exactly zero through training.
#[derive(Debug, Clone)]
pub struct DimMask {
    keep: Vec<usize>,
    block_of: Vec<u32>,
    k: usize,
}

impl DimMask {
    pub fn uniform(
        scheme: UniformScheme,
        blocks: &BlockingScheme,
        k: usize,
    ) -> Result<DimMask, BaselineError> {
        DimMask::new(vec![scheme.k; blocks.block_count], blocks, k)
    }

    pub fn from_scheme(
        scheme: &BlockDimScheme,
        blocks: &BlockingScheme,
        k: usize,
    ) -> Result<DimMask, BaselineError> {
        DimMask::new(scheme.dims.clone(), blocks, k)
    }

    fn new(keep: Vec<usize>, blocks: &BlockingScheme, k: usize) -> Result<DimMask, BaselineError> {
        if keep.len() != blocks.block_count {
            return Err(BaselineError::InconsistentScheme(format!(
                "{} block dimensions for {} blocks",
                keep.len(),
                blocks.block_count
            )));
        }
        if let Some(&bad) = keep.iter().find(|&&d| d == 0 || d > k) {
            return Err(BaselineError::InconsistentScheme(format!(
                "block dimension {bad} outside 1..={k}"
            )));
        }
        Ok(DimMask {
            keep,
            block_of: blocks.block_of.clone(),
            k,
        })
    }

    /// Kept-column count for a feature id.
    pub fn keep_of(&self, id: u32) -> usize {
        self.keep[self.block_of[id as usize] as usize]
    }

    pub fn zero_embedding(&self, embed: &mut EmbeddingMatrix) {
        for i in 0..embed.n() {
            let keep = self.keep[self.block_of[i] as usize];
            for v in &mut embed.values.row_mut(i)[keep..] {
                *v = 0.0;
            }
        }
    }

    pub fn mask_grads(&self, grads: &mut GradientSet) {
        for (&id, row) in grads.embed_rows.iter_mut() {
            let keep = self.keep[self.block_of[id as usize] as usize];
            for v in &mut row[keep..self.k] {
                *v = 0.0;
            }
        }
    }
}

/// Frozen-selection training under a column mask: the shared trainer with
/// lr_alpha forced to zero.
pub fn train_masked(
    train: &MappedTable,
    val: &MappedTable,
    blocks: &BlockingScheme,
    task: TaskKind,
    model_cfg: &ModelConfig,
    cfg: &SearchConfig,
    mask: &DimMask,
) -> Result<TrainState, BaselineError> {
    let frozen = SearchConfig {
        lr_alpha: 0.0,
        ..cfg.clone()
    };
    Ok(fit_mapped(train, val, blocks, task, model_cfg, &frozen, Some(mask))?)
}

/// Default grid: 4 to K with a stride of 4 (16 candidates at K=64).
pub fn default_grid_dims(k: usize) -> Vec<usize> {
    (1..).map(|i| 4 * i).take_while(|&d| d <= k).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GridEntry {
    pub k: usize,
    pub val_loss: f64,
}

pub struct GridSearchResult {
    pub best_k: usize,
    pub best: TrainState,
    pub table: Vec<GridEntry>,
}

/// Train one model per candidate uniform dimension and keep the one with the
/// lowest validation loss. The full per-dimension table is retained.
pub fn grid_search(
    dims: &[usize],
    train: &MappedTable,
    val: &MappedTable,
    blocks: &BlockingScheme,
    task: TaskKind,
    model_cfg: &ModelConfig,
    cfg: &SearchConfig,
) -> Result<GridSearchResult, BaselineError> {
    if dims.is_empty() {
        return Err(BaselineError::EmptyDims);
    }
    let mut best: Option<(usize, TrainState)> = None;
    let mut table = Vec::with_capacity(dims.len());
    for &d in dims {
        let mask = DimMask::uniform(UniformScheme { k: d }, blocks, model_cfg.k)?;
        let state = train_masked(train, val, blocks, task, model_cfg, cfg, &mask)?;
        table.push(GridEntry {
            k: d,
            val_loss: state.best_val_loss,
        });
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| state.best_val_loss < b.best_val_loss);
        if better {
            best = Some((d, state));
        }
    }
    let (best_k, best) = best.unwrap();
    Ok(GridSearchResult { best_k, best, table })
}

/// `count` schemes of L i.i.d. uniform draws from {1..K}, each sorted
/// descending. Deterministic per seed.
pub fn random_descending_schemes(
    count: usize,
    l: usize,
    k: usize,
    seed: u64,
) -> Vec<BlockDimScheme> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut dims: Vec<usize> = (0..l).map(|_| rng.random_range(1..=k)).collect();
            dims.sort_unstable_by(|a, b| b.cmp(a));
            BlockDimScheme { dims }
        })
        .collect()
}

/// Frequency-heuristic dimensions from block mean frequencies:
/// k_l = clamp(round(K * (eta_l / eta_1)^t), 1, K).
pub fn mde_scheme_from_means(
    means: &[f64],
    k: usize,
    t: f64,
) -> Result<BlockDimScheme, BaselineError> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(BaselineError::BadTemperature(t));
    }
    let top = means[0];
    let dims = means
        .iter()
        .map(|&m| {
            let frac = (m / top).powf(t);
            ((k as f64 * frac).round() as usize).clamp(1, k)
        })
        .collect();
    BlockDimScheme::new(dims)
}

pub fn mde_scheme(
    blocks: &BlockingScheme,
    vocab: &FeatureVocabulary,
    k: usize,
    t: f64,
) -> Result<BlockDimScheme, BaselineError> {
    mde_scheme_from_means(&blocks.mean_frequencies(vocab), k, t)
}

/// The 16-configuration sweep for the frequency heuristic: eight temperatures
/// crossed with two base dimensions (K and K/2).
pub fn mde_configs(k: usize) -> Vec<(f64, usize)> {
    let temps = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
    let bases = [k, (k / 2).max(1)];
    bases
        .iter()
        .flat_map(|&b| temps.iter().map(move |&t| (t, b)))
        .collect()
}

/// One-shot global magnitude pruning of a trained full-dimension embedding:
/// keeps the largest-magnitude entries to hit target_cr. No selection-layer
/// merge is involved.
pub fn magnitude_prune(
    embed: &EmbeddingMatrix,
    target_cr: f64,
) -> Result<CooEmbedding, BaselineError> {
    let merged = MergedEmbedding {
        values: embed.values.clone(),
    };
    Ok(prune_to_cr(&merged, target_cr)?)
}
