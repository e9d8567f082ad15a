//! Run configuration, manifests, and the orchestration behind the CLI
//! subcommands: prepare data, train, prune, evaluate, sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    default_grid_dims, grid_search, mde_configs, mde_scheme, random_descending_schemes,
    train_masked, DimMask, UniformScheme,
};
use crate::corpus::{
    build_vocabulary, load_interactions, make_blocks, save_vocabulary, split, BlockPolicy,
    BlockingScheme, DatasetFormat, FeatureVocabulary, LoadOptions, MappedTable, TaskKind,
};
use crate::dimscheme::{
    derive_scheme, merge, prune_threshold, prune_to_cr, save_coo, CooEmbedding,
    MixedDimensionScheme, COO_HEADER_BYTES, COO_TRIPLET_BYTES,
};
use crate::evalkit::{task_metrics, MetricReport};
use crate::lfm::arch::forward;
use crate::lfm::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::lfm::{Architecture, Model, ModelConfig};
use crate::search::{fit_mapped, SearchConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Epsilon(f64),
    TargetCr(f64),
}

fn default_k() -> usize {
    64
}
fn default_split() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}
fn default_min_count() -> u64 {
    1
}
fn default_num_buckets() -> u32 {
    32
}
fn default_policy() -> BlockPolicy {
    BlockPolicy::EqualMass
}

/// One experiment's full configuration. A JSON file on disk; CLI flags
/// override individual fields, and the effective config is echoed into the
/// run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub format: DatasetFormat,
    pub arch: Architecture,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Feature block count; defaults to 10 for rating-style data, 6 for
    /// CTR-style data.
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default = "default_policy")]
    pub block_policy: BlockPolicy,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    #[serde(default = "default_num_buckets")]
    pub num_buckets: u32,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub row_limit: Option<usize>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub prune: Option<PruneMode>,
}

impl RunConfig {
    pub fn block_count(&self) -> usize {
        self.blocks.unwrap_or(match self.format {
            DatasetFormat::MovielensCsv => 10,
            DatasetFormat::CriteoTsv => 6,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.arch, self.k, self.search.seed);
        if let Some(h) = &self.hidden {
            cfg.hidden = h.clone();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.exists() {
            bail!("dataset path {} does not exist", self.dataset.display());
        }
        if self.k < 1 {
            bail!("base dimension k must be >= 1");
        }
        if self.block_count() < 1 {
            bail!("block count must be >= 1");
        }
        match self.prune {
            Some(PruneMode::Epsilon(e)) if !(e >= 0.0) => bail!("epsilon must be >= 0"),
            Some(PruneMode::TargetCr(c)) if !(c >= 1.0) => bail!("target CR must be >= 1"),
            _ => Ok(()),
        }
    }
}

/// Stable hex digest of the canonical JSON serialization.
pub fn config_digest(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub digest: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub artifacts: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(manifest)?)
        .with_context(|| format!("writing {}", path.display()))
}

/// Loaded, split, and id-mapped data ready for training.
pub struct PreparedData {
    pub vocab: FeatureVocabulary,
    pub blocks: BlockingScheme,
    pub train: MappedTable,
    pub val: MappedTable,
    pub test: MappedTable,
    pub task: TaskKind,
    pub field_count: usize,
}

/// Load the dataset, split it, and build the vocabulary and feature blocks
/// from the training split (feature frequency is a training-set statistic).
pub fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let opts = LoadOptions {
        row_limit: cfg.row_limit,
        ..Default::default()
    };
    let table = load_interactions(&cfg.dataset, cfg.format, &opts)
        .with_context(|| format!("loading {}", cfg.dataset.display()))?;
    let (train, val, test) = split(&table, cfg.split, cfg.split_seed)?;
    let vocab = build_vocabulary(&train, cfg.min_count, cfg.num_buckets)?;
    let blocks = make_blocks(&vocab, cfg.block_count(), cfg.block_policy)?;
    let task = table.task;
    let field_count = table.field_count;
    Ok(PreparedData {
        train: MappedTable::from_table(&train, &vocab),
        val: MappedTable::from_table(&val, &vocab),
        test: MappedTable::from_table(&test, &vocab),
        vocab,
        blocks,
        task,
        field_count,
    })
}

/// Batched predictions over a whole table in fixed order.
pub fn predict_all(
    model: &Model,
    alpha: Option<crate::lfm::AlphaRef<'_>>,
    table: &MappedTable,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut preds = Vec::with_capacity(table.len());
    let mut row = 0;
    while row < table.len() {
        let end = (row + batch_size).min(table.len());
        let rows: Vec<usize> = (row..end).collect();
        let batch = table.batch_of(&rows);
        preds.extend(forward(model, &batch, alpha)?.preds);
        row = end;
    }
    Ok(preds)
}

fn eval_metrics(
    model: &Model,
    alpha: Option<crate::lfm::AlphaRef<'_>>,
    table: &MappedTable,
    task: TaskKind,
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    let preds = predict_all(model, alpha, table, batch_size)?;
    Ok(task_metrics(&preds, &table.labels, task)?)
}

fn dense_coo_bytes(n: usize, k: usize) -> usize {
    COO_HEADER_BYTES + COO_TRIPLET_BYTES * n * k
}

pub struct TrainOutput {
    pub state: TrainState,
    pub report: MetricReport,
}

/// Train, then write checkpoint, vocabulary, training log, report, and
/// manifest into `out`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data = prepare(cfg)?;
    let model_cfg = cfg.model_config();
    let state = fit_mapped(
        &data.train,
        &data.val,
        &data.blocks,
        data.task,
        &model_cfg,
        &cfg.search,
        None,
    )?;

    let ckpt = Checkpoint {
        model: state.model.clone(),
        alpha: state.alpha.values.clone(),
        block_of: data.blocks.block_of.clone(),
    };
    save_checkpoint(&ckpt, &out.join("checkpoint.bin"))?;
    save_vocabulary(&data.vocab, &out.join("vocab.bin"))?;

    let mut log = String::new();
    for rec in &state.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    fs::write(out.join("train_log.jsonl"), log)?;

    let metrics = eval_metrics(
        &state.model,
        Some(state.alpha.as_ref(&data.blocks)),
        &data.test,
        data.task,
        cfg.search.batch_size,
    )?;
    let (n, k) = (state.model.n(), state.model.k());
    let report = MetricReport::new(
        data.task,
        metrics,
        n * k,
        dense_coo_bytes(n, k),
        1.0,
        state.train_seconds,
        cfg.search.seed,
        config_digest(cfg),
    )?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_manifest(
        out,
        &Manifest {
            digest: config_digest(cfg),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.search.seed,
            config: cfg.clone(),
            artifacts: vec![
                "checkpoint.bin".into(),
                "vocab.bin".into(),
                "train_log.jsonl".into(),
                "report.json".into(),
            ],
        },
    )?;
    Ok(TrainOutput { state, report })
}

/// Per-block summary of the derived scheme: how many features keep how many
/// dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: usize,
    pub features: usize,
    pub mean_kept: f64,
    /// hist[d] = number of features in this block keeping exactly d columns.
    pub hist: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub n: usize,
    pub k: usize,
    pub nnz: usize,
    pub compression_rate: f64,
    pub per_block: Vec<BlockSummary>,
}

pub fn summarize_scheme(
    scheme: &MixedDimensionScheme,
    coo: &CooEmbedding,
    block_of: &[u32],
    block_count: usize,
) -> SchemeSummary {
    let k = scheme.k;
    let mut per_block: Vec<BlockSummary> = (0..block_count)
        .map(|b| BlockSummary {
            block: b,
            features: 0,
            mean_kept: 0.0,
            hist: vec![0; k + 1],
        })
        .collect();
    for (i, dims) in scheme.dims.iter().enumerate() {
        let b = &mut per_block[block_of[i] as usize];
        b.features += 1;
        b.mean_kept += dims.len() as f64;
        b.hist[dims.len()] += 1;
    }
    for b in &mut per_block {
        if b.features > 0 {
            b.mean_kept /= b.features as f64;
        }
    }
    SchemeSummary {
        n: coo.n,
        k,
        nnz: coo.nnz(),
        compression_rate: coo.compression_rate(),
        per_block,
    }
}

pub struct PruneOutput {
    pub coo: CooEmbedding,
    pub summary: SchemeSummary,
    pub report: MetricReport,
}

/// Merge the checkpoint's selection layer into its embedding, prune by
/// threshold or to a target compression rate, and write COO + scheme summary
/// + report into `out`.
pub fn run_prune(
    cfg: &RunConfig,
    ckpt_path: &Path,
    mode: PruneMode,
    out: &Path,
) -> Result<PruneOutput> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = prepare(cfg)?;
    if ckpt.block_of != data.blocks.block_of {
        bail!("checkpoint blocking does not match the configured dataset");
    }
    let merged = merge(&ckpt.model.embed, &ckpt.alpha, &data.blocks)?;
    let coo = match mode {
        PruneMode::Epsilon(e) => prune_threshold(&merged, e),
        PruneMode::TargetCr(c) => prune_to_cr(&merged, c)?,
    };
    save_coo(&coo, &out.join("embedding.coo"))?;
    let scheme = derive_scheme(&coo);
    let summary = summarize_scheme(
        &scheme,
        &coo,
        &data.blocks.block_of,
        data.blocks.block_count,
    );
    fs::write(
        out.join("scheme_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    // Evaluate with the pruned merged matrix; the selection layer is already
    // folded in, so no alpha is applied.
    let mut pruned_model = ckpt.model.clone();
    pruned_model.embed = scheme.to_embedding();
    let metrics = eval_metrics(
        &pruned_model,
        None,
        &data.test,
        data.task,
        cfg.search.batch_size,
    )?;
    let report = MetricReport::new(
        data.task,
        metrics,
        coo.nnz(),
        coo.storage_bytes(),
        coo.compression_rate().max(1.0),
        0.0,
        cfg.search.seed,
        config_digest(cfg),
    )?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_manifest(
        out,
        &Manifest {
            digest: config_digest(cfg),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.search.seed,
            config: cfg.clone(),
            artifacts: vec![
                "embedding.coo".into(),
                "scheme_summary.json".into(),
                "report.json".into(),
            ],
        },
    )?;
    Ok(PruneOutput { coo, summary, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<SplitName, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?} (train|val|test)")),
        }
    }
}

/// Evaluate a checkpoint (embedding + selection layer) or a pruned COO file
/// (paired with the checkpoint for interaction parameters) on one split.
pub fn run_eval(
    cfg: &RunConfig,
    ckpt_path: &Path,
    coo_path: Option<&Path>,
    split_name: SplitName,
    out: &Path,
) -> Result<MetricReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let data = prepare(cfg)?;
    if ckpt.block_of != data.blocks.block_of {
        bail!("checkpoint blocking does not match the configured dataset");
    }
    let table = match split_name {
        SplitName::Train => &data.train,
        SplitName::Val => &data.val,
        SplitName::Test => &data.test,
    };
    let (metrics, value_params, coo_bytes, cr) = match coo_path {
        None => {
            let aref = crate::lfm::AlphaRef {
                alpha: &ckpt.alpha,
                block_of: &data.blocks.block_of,
            };
            let m = eval_metrics(&ckpt.model, Some(aref), table, data.task, cfg.search.batch_size)?;
            let (n, k) = (ckpt.model.n(), ckpt.model.k());
            (m, n * k, dense_coo_bytes(n, k), 1.0)
        }
        Some(p) => {
            let coo = crate::dimscheme::load_coo(p)?;
            if coo.n != ckpt.model.n() || coo.k != ckpt.model.k() {
                bail!("COO shape does not match the checkpoint");
            }
            let mut model = ckpt.model.clone();
            model.embed = derive_scheme(&coo).to_embedding();
            let m = eval_metrics(&model, None, table, data.task, cfg.search.batch_size)?;
            (
                m,
                coo.nnz(),
                coo.storage_bytes(),
                coo.compression_rate().max(1.0),
            )
        }
    };
    let report = MetricReport::new(
        data.task,
        metrics,
        value_params,
        coo_bytes,
        cr,
        0.0,
        cfg.search.seed,
        config_digest(cfg),
    )?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    L,
    Cr,
    Baseline,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<SweepAxis, String> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepAxis::K),
            "l" => Ok(SweepAxis::L),
            "cr" => Ok(SweepAxis::Cr),
            "baseline" => Ok(SweepAxis::Baseline),
            other => Err(format!("unknown sweep axis {other:?} (k|l|cr|baseline)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub report: MetricReport,
}

fn write_sweep(out: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(rows)?)?;
    let mut text = String::new();
    for row in rows {
        text.push_str(&row.report.text_row(&row.axis_value));
        text.push('\n');
    }
    fs::write(out.join("sweep.txt"), text)?;
    Ok(())
}

/// Run one training (or pruning) per axis value with a shared seed and write
/// the aggregated table. A failing child aborts the sweep, preserving the
/// rows completed so far.
pub fn run_sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one axis value");
    }
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    let finish = |rows: &[SweepRow]| write_sweep(out, rows);

    match axis {
        SweepAxis::K | SweepAxis::L => {
            for v in values {
                let parsed: usize = v
                    .parse()
                    .with_context(|| format!("axis value {v:?} is not an integer"))?;
                let mut child = cfg.clone();
                match axis {
                    SweepAxis::K => child.k = parsed,
                    _ => child.blocks = Some(parsed),
                }
                let sub = out.join(format!("{}={parsed}", if axis == SweepAxis::K { "k" } else { "l" }));
                let res = run_train(&child, &sub);
                match res {
                    Ok(o) => rows.push(SweepRow {
                        axis_value: v.clone(),
                        report: o.report,
                    }),
                    Err(e) => {
                        finish(&rows)?;
                        return Err(e.context(format!("sweep child {v} failed")));
                    }
                }
            }
        }
        SweepAxis::Cr => {
            // Train once, then prune at each compression rate.
            let train_dir = out.join("base");
            let base = run_train(cfg, &train_dir)?;
            let _ = base;
            for v in values {
                let cr: f64 = v
                    .parse()
                    .with_context(|| format!("axis value {v:?} is not a number"))?;
                let sub = out.join(format!("cr={v}"));
                let res = run_prune(
                    cfg,
                    &train_dir.join("checkpoint.bin"),
                    PruneMode::TargetCr(cr),
                    &sub,
                );
                match res {
                    Ok(o) => rows.push(SweepRow {
                        axis_value: v.clone(),
                        report: o.report,
                    }),
                    Err(e) => {
                        finish(&rows)?;
                        return Err(e.context(format!("sweep child cr={v} failed")));
                    }
                }
            }
        }
        SweepAxis::Baseline => {
            for v in values {
                let sub = out.join(format!("baseline={v}"));
                let res = run_baseline(cfg, v, &sub);
                match res {
                    Ok(report) => rows.push(SweepRow {
                        axis_value: v.clone(),
                        report,
                    }),
                    Err(e) => {
                        finish(&rows)?;
                        return Err(e.context(format!("sweep child baseline={v} failed")));
                    }
                }
            }
        }
    }
    finish(&rows)?;
    Ok(rows)
}

/// Train one comparison method on the same splits/seed/architecture as the
/// searched runs and report its test metrics.
pub fn run_baseline(cfg: &RunConfig, name: &str, out: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let data = prepare(cfg)?;
    let model_cfg = cfg.model_config();

    let (state, value_params): (TrainState, usize) = match name {
        "dnis" => {
            let s = fit_mapped(
                &data.train,
                &data.val,
                &data.blocks,
                data.task,
                &model_cfg,
                &cfg.search,
                None,
            )?;
            let params = s.model.n() * s.model.k();
            (s, params)
        }
        "grid" => {
            let dims = default_grid_dims(cfg.k);
            let res = grid_search(
                &dims,
                &data.train,
                &data.val,
                &data.blocks,
                data.task,
                &model_cfg,
                &cfg.search,
            )?;
            let params = res.best.model.n() * res.best_k;
            (res.best, params)
        }
        "random" => {
            let schemes = random_descending_schemes(
                16,
                data.blocks.block_count,
                cfg.k,
                cfg.search.seed,
            );
            let mut best: Option<(TrainState, usize)> = None;
            for scheme in &schemes {
                let mask = DimMask::from_scheme(scheme, &data.blocks, cfg.k)?;
                let s = train_masked(
                    &data.train,
                    &data.val,
                    &data.blocks,
                    data.task,
                    &model_cfg,
                    &cfg.search,
                    &mask,
                )?;
                let params = scheme_params(&data.blocks, scheme.dims());
                if best
                    .as_ref()
                    .is_none_or(|(b, _)| s.best_val_loss < b.best_val_loss)
                {
                    best = Some((s, params));
                }
            }
            best.unwrap()
        }
        "mde" => {
            let mut best: Option<(TrainState, usize)> = None;
            for (t, base_k) in mde_configs(cfg.k) {
                let scheme = mde_scheme(&data.blocks, &data.vocab, base_k, t)?;
                let mask = DimMask::from_scheme(&scheme, &data.blocks, cfg.k)?;
                let s = train_masked(
                    &data.train,
                    &data.val,
                    &data.blocks,
                    data.task,
                    &model_cfg,
                    &cfg.search,
                    &mask,
                )?;
                let params = scheme_params(&data.blocks, scheme.dims());
                if best
                    .as_ref()
                    .is_none_or(|(b, _)| s.best_val_loss < b.best_val_loss)
                {
                    best = Some((s, params));
                }
            }
            best.unwrap()
        }
        other => bail!("unknown baseline {other:?} (grid|random|mde|dnis)"),
    };

    let metrics = eval_metrics(
        &state.model,
        Some(state.alpha.as_ref(&data.blocks)),
        &data.test,
        data.task,
        cfg.search.batch_size,
    )?;
    let dense = state.model.n() * state.model.k();
    let report = MetricReport::new(
        data.task,
        metrics,
        value_params,
        COO_HEADER_BYTES + COO_TRIPLET_BYTES * value_params,
        dense as f64 / value_params as f64,
        state.train_seconds,
        cfg.search.seed,
        config_digest(cfg),
    )?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    save_checkpoint(
        &Checkpoint {
            model: state.model.clone(),
            alpha: state.alpha.values.clone(),
            block_of: data.blocks.block_of.clone(),
        },
        &out.join("checkpoint.bin"),
    )?;
    Ok(report)
}

/// Value-parameter count of a per-block scheme: sum over blocks of
/// (features in block) * k_l.
fn scheme_params(blocks: &BlockingScheme, dims: &[usize]) -> usize {
    let mut per_block = vec![0usize; blocks.block_count];
    for &b in &blocks.block_of {
        per_block[b as usize] += 1;
    }
    per_block
        .iter()
        .zip(dims)
        .map(|(&count, &k)| count * k)
        .sum()
}

/// Train a uniform-dimension model (used by sweep smoke paths and tests).
pub fn train_uniform(
    cfg: &RunConfig,
    data: &PreparedData,
    k: usize,
) -> Result<TrainState> {
    let mask = DimMask::uniform(UniformScheme { k }, &data.blocks, cfg.k)?;
    Ok(train_masked(
        &data.train,
        &data.val,
        &data.blocks,
        data.task,
        &cfg.model_config(),
        &cfg.search,
        &mask,
    )?)
}
