//! Interaction log ingestion, feature vocabulary, frequency-sorted feature
//! blocking, and deterministic mini-batch streaming.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no rows parsed from {0}")]
    Empty(String),
    #[error("{count} malformed lines exceed tolerance {tolerance} (first: line {first_line}: {first_reason})")]
    Malformed {
        count: usize,
        tolerance: usize,
        first_line: usize,
        first_reason: String,
    },
    #[error("unknown dataset format {0:?}")]
    UnknownFormat(String),
    #[error("invalid split ratios {0:?}: {1}")]
    BadRatios([f64; 3], String),
    #[error("invalid block count L={l} for N={n} features")]
    BadBlockCount { l: usize, n: usize },
    #[error("table is empty")]
    EmptyTable,
    #[error("batch_size must be >= 1")]
    BadBatchSize,
    #[error("vocabulary file corrupt: {0}")]
    VocabCorrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Rating,
    Ctr,
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    MovielensCsv,
    CriteoTsv,
}

impl std::str::FromStr for DatasetFormat {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, CorpusError> {
        match s {
            "movielens-csv" => Ok(DatasetFormat::MovielensCsv),
            "criteo-tsv" => Ok(DatasetFormat::CriteoTsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// One raw field entry before vocabulary mapping.
#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Cat(String),
    Num(f64),
    Missing,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub tokens: Vec<Token>,
    pub label: f64,
}

/// Parsed interaction log: one row per instance, M field entries each.
#[derive(Debug, Clone)]
pub struct InteractionTable {
    pub rows: Vec<Row>,
    pub field_count: usize,
    pub task: TaskKind,
    /// Malformed input lines skipped during parsing (within tolerance).
    pub skipped_lines: usize,
}

impl InteractionTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub row_limit: Option<usize>,
    /// Maximum number of malformed lines tolerated before erroring out.
    pub malformed_tolerance: usize,
}

pub fn load_interactions(
    path: &Path,
    format: DatasetFormat,
    opts: &LoadOptions,
) -> Result<InteractionTable, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let mut malformed = 0usize;
    let mut first_bad: Option<(usize, String)> = None;
    let task = match format {
        DatasetFormat::MovielensCsv => TaskKind::Rating,
        DatasetFormat::CriteoTsv => TaskKind::Ctr,
    };
    for (lineno, line) in reader.lines().enumerate() {
        if let Some(limit) = opts.row_limit {
            if rows.len() >= limit {
                break;
            }
        }
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, format) {
            Ok(Some(row)) => rows.push(row),
            Ok(None) => {} // header
            Err(reason) => {
                malformed += 1;
                if first_bad.is_none() {
                    first_bad = Some((lineno + 1, reason));
                }
            }
        }
    }
    if malformed > opts.malformed_tolerance {
        let (first_line, first_reason) = first_bad.unwrap();
        return Err(CorpusError::Malformed {
            count: malformed,
            tolerance: opts.malformed_tolerance,
            first_line,
            first_reason,
        });
    }
    if rows.is_empty() {
        return Err(CorpusError::Empty(path.display().to_string()));
    }
    let field_count = match format {
        DatasetFormat::MovielensCsv => 2,
        DatasetFormat::CriteoTsv => 39,
    };
    Ok(InteractionTable {
        rows,
        field_count,
        task,
        skipped_lines: malformed,
    })
}

fn parse_line(line: &str, format: DatasetFormat) -> Result<Option<Row>, String> {
    match format {
        DatasetFormat::MovielensCsv => {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() < 3 {
                return Err(format!("expected >=3 comma fields, got {}", parts.len()));
            }
            // Header detection: non-numeric first field.
            if parts[0].parse::<i64>().is_err() {
                return Ok(None);
            }
            let rating: f64 = parts[2]
                .trim()
                .parse()
                .map_err(|_| format!("bad rating {:?}", parts[2]))?;
            if !rating.is_finite() || !(1.0..=5.0).contains(&rating) {
                return Err(format!("rating {rating} outside [1,5]"));
            }
            Ok(Some(Row {
                tokens: vec![
                    Token::Cat(parts[0].trim().to_string()),
                    Token::Cat(parts[1].trim().to_string()),
                ],
                label: rating,
            }))
        }
        DatasetFormat::CriteoTsv => {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 40 {
                return Err(format!("expected 40 tab fields, got {}", parts.len()));
            }
            let label: f64 = parts[0]
                .trim()
                .parse()
                .map_err(|_| format!("bad label {:?}", parts[0]))?;
            if label != 0.0 && label != 1.0 {
                return Err(format!("ctr label {label} not in {{0,1}}"));
            }
            let mut tokens = Vec::with_capacity(39);
            for part in &parts[1..14] {
                if part.is_empty() {
                    tokens.push(Token::Missing);
                } else {
                    let v: f64 = part
                        .trim()
                        .parse()
                        .map_err(|_| format!("bad integer field {part:?}"))?;
                    if !v.is_finite() {
                        return Err(format!("non-finite numeric field {part:?}"));
                    }
                    tokens.push(Token::Num(v));
                }
            }
            for part in &parts[14..40] {
                if part.is_empty() {
                    tokens.push(Token::Missing);
                } else {
                    tokens.push(Token::Cat(part.to_string()));
                }
            }
            Ok(Some(Row { tokens, label }))
        }
    }
}

/// Discrete key of a feature inside its field after preprocessing.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKey {
    Cat(String),
    /// log2 bucket index of a numerical value.
    Bucket(u32),
    Oov,
    Missing,
}

/// Contiguous feature id space over all fields, with training-split frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVocabulary {
    pub field_count: usize,
    /// record i describes feature id i
    entries: Vec<(u32, FeatureKey)>,
    index: HashMap<(u32, FeatureKey), u32>,
    pub frequency: Vec<u64>,
    pub num_buckets: u32,
}

impl FeatureVocabulary {
    pub fn feature_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, id: u32) -> &(u32, FeatureKey) {
        &self.entries[id as usize]
    }

    pub fn id_of(&self, field: u32, key: &FeatureKey) -> Option<u32> {
        self.index.get(&(field, key.clone())).copied()
    }

    /// Map a raw token to its feature id; unseen categorical tokens fall back
    /// to the field's OOV feature when one exists.
    pub fn map_token(&self, field: u32, token: &Token) -> Option<u32> {
        let key = self.key_for(token);
        self.id_of(field, &key)
            .or_else(|| self.id_of(field, &FeatureKey::Oov))
    }

    pub fn key_for(&self, token: &Token) -> FeatureKey {
        match token {
            Token::Cat(s) => FeatureKey::Cat(s.clone()),
            Token::Num(v) => FeatureKey::Bucket(log2_bucket(*v, self.num_buckets)),
            Token::Missing => FeatureKey::Missing,
        }
    }
}

pub fn log2_bucket(v: f64, num_buckets: u32) -> u32 {
    let b = (1.0 + v.max(0.0)).log2().floor() as u32;
    b.min(num_buckets.saturating_sub(1))
}

pub fn build_vocabulary(
    table: &InteractionTable,
    min_count: u64,
    num_buckets: u32,
) -> Result<FeatureVocabulary, CorpusError> {
    if table.is_empty() {
        return Err(CorpusError::EmptyTable);
    }
    let m = table.field_count;
    // Raw counts per (field, key).
    let mut counts: HashMap<(u32, FeatureKey), u64> = HashMap::new();
    for row in &table.rows {
        for (f, tok) in row.tokens.iter().enumerate() {
            let key = match tok {
                Token::Cat(s) => FeatureKey::Cat(s.clone()),
                Token::Num(v) => FeatureKey::Bucket(log2_bucket(*v, num_buckets)),
                Token::Missing => FeatureKey::Missing,
            };
            *counts.entry((f as u32, key)).or_insert(0) += 1;
        }
    }
    // Collapse rare features into one OOV per field.
    let mut merged: HashMap<(u32, FeatureKey), u64> = HashMap::new();
    for ((field, key), c) in counts {
        if c < min_count && matches!(key, FeatureKey::Cat(_)) {
            *merged.entry((field, FeatureKey::Oov)).or_insert(0) += c;
        } else {
            *merged.entry((field, key)).or_insert(0) += c;
        }
    }
    let mut keys: Vec<((u32, FeatureKey), u64)> = merged.into_iter().collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0));
    let mut entries = Vec::with_capacity(keys.len());
    let mut frequency = Vec::with_capacity(keys.len());
    let mut index = HashMap::with_capacity(keys.len());
    for (i, ((field, key), c)) in keys.into_iter().enumerate() {
        index.insert((field, key.clone()), i as u32);
        entries.push((field, key));
        frequency.push(c);
    }
    Ok(FeatureVocabulary {
        field_count: m,
        entries,
        index,
        frequency,
        num_buckets,
    })
}

const VOCAB_MAGIC: &[u8; 8] = b"DNISVOC1";

pub fn save_vocabulary(vocab: &FeatureVocabulary, path: &Path) -> Result<(), CorpusError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(VOCAB_MAGIC);
    buf.extend_from_slice(&(vocab.feature_count() as u64).to_le_bytes());
    buf.extend_from_slice(&(vocab.field_count as u64).to_le_bytes());
    buf.extend_from_slice(&vocab.num_buckets.to_le_bytes());
    for (id, (field, key)) in vocab.entries.iter().enumerate() {
        buf.extend_from_slice(&field.to_le_bytes());
        match key {
            FeatureKey::Cat(s) => {
                buf.push(0);
                buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                buf.extend_from_slice(s.as_bytes());
            }
            FeatureKey::Bucket(b) => {
                buf.push(1);
                buf.extend_from_slice(&b.to_le_bytes());
            }
            FeatureKey::Oov => buf.push(2),
            FeatureKey::Missing => buf.push(3),
        }
        buf.extend_from_slice(&vocab.frequency[id].to_le_bytes());
    }
    let mut file = File::create(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(&buf).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_vocabulary(path: &Path) -> Result<FeatureVocabulary, CorpusError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    let mut cur = Cursor::new(&buf);
    let magic = cur.take_bytes(8)?;
    if magic != VOCAB_MAGIC {
        return Err(CorpusError::VocabCorrupt("bad magic".into()));
    }
    let n = cur.take_u64()? as usize;
    let m = cur.take_u64()? as usize;
    let num_buckets = cur.take_u32()?;
    let mut entries = Vec::with_capacity(n);
    let mut frequency = Vec::with_capacity(n);
    let mut index = HashMap::with_capacity(n);
    for i in 0..n {
        let field = cur.take_u32()?;
        let tag = cur.take_bytes(1)?[0];
        let key = match tag {
            0 => {
                let len = cur.take_u32()? as usize;
                let bytes = cur.take_bytes(len)?;
                FeatureKey::Cat(
                    String::from_utf8(bytes.to_vec())
                        .map_err(|_| CorpusError::VocabCorrupt("invalid utf8 token".into()))?,
                )
            }
            1 => FeatureKey::Bucket(cur.take_u32()?),
            2 => FeatureKey::Oov,
            3 => FeatureKey::Missing,
            t => return Err(CorpusError::VocabCorrupt(format!("bad key tag {t}"))),
        };
        let freq = cur.take_u64()?;
        index.insert((field, key.clone()), i as u32);
        entries.push((field, key));
        frequency.push(freq);
    }
    if cur.pos != buf.len() {
        return Err(CorpusError::VocabCorrupt("trailing bytes".into()));
    }
    Ok(FeatureVocabulary {
        field_count: m,
        entries,
        index,
        frequency,
        num_buckets,
    })
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }
    pub fn take_bytes(&mut self, n: usize) -> Result<&'a [u8], CorpusError> {
        if self.pos + n > self.buf.len() {
            return Err(CorpusError::VocabCorrupt("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn take_u32(&mut self) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }
    pub fn take_u64(&mut self) -> Result<u64, CorpusError> {
        Ok(u64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }
}

pub fn split(
    table: &InteractionTable,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(InteractionTable, InteractionTable, InteractionTable), CorpusError> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| x <= 0.0) {
        return Err(CorpusError::BadRatios(r, "all ratios must be positive".into()));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(r, "ratios must sum to 1".into()));
    }
    let n = table.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let c1 = (n as f64 * r[0]).round() as usize;
    let c2 = c1 + (n as f64 * r[1]).round() as usize;
    let c1 = c1.min(n);
    let c2 = c2.min(n);
    let take = |range: &[usize]| InteractionTable {
        rows: range.iter().map(|&i| table.rows[i].clone()).collect(),
        field_count: table.field_count,
        task: table.task,
        skipped_lines: 0,
    };
    let (train, val, test) = (take(&idx[..c1]), take(&idx[c1..c2]), take(&idx[c2..]));
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(CorpusError::BadRatios(r, "each split must be nonempty".into()));
    }
    Ok((train, val, test))
}

/// Frequency-descending contiguous partition of the feature ids into L blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockingScheme {
    pub block_count: usize,
    /// feature id -> block index in [0, L)
    pub block_of: Vec<u32>,
    /// feature ids sorted by (descending frequency, ascending id), block-contiguous
    pub sorted_ids: Vec<u32>,
    /// boundaries into sorted_ids: block l spans [bounds[l], bounds[l+1])
    pub bounds: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockPolicy {
    EqualMass,
    EqualCount,
}

impl fmt::Display for BlockPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockPolicy::EqualMass => write!(f, "equal-mass"),
            BlockPolicy::EqualCount => write!(f, "equal-count"),
        }
    }
}

pub fn make_blocks(
    vocab: &FeatureVocabulary,
    l: usize,
    policy: BlockPolicy,
) -> Result<BlockingScheme, CorpusError> {
    let n = vocab.feature_count();
    if l < 1 || l > n {
        return Err(CorpusError::BadBlockCount { l, n });
    }
    let mut sorted_ids: Vec<u32> = (0..n as u32).collect();
    sorted_ids.sort_by_key(|&i| (std::cmp::Reverse(vocab.frequency[i as usize]), i));

    let mut bounds = Vec::with_capacity(l + 1);
    bounds.push(0usize);
    match policy {
        BlockPolicy::EqualCount => {
            let base = n / l;
            let rem = n % l;
            let mut pos = 0;
            for b in 0..l {
                pos += base + usize::from(b < rem);
                bounds.push(pos);
            }
        }
        BlockPolicy::EqualMass => {
            let total: u64 = vocab.frequency.iter().sum();
            let mut cum = 0u64;
            let mut pos = 0usize;
            for b in 0..l - 1 {
                let target = (total as f64) * ((b + 1) as f64) / (l as f64);
                // Each remaining block must keep at least one feature.
                let max_pos = n - (l - b - 1);
                loop {
                    if pos >= max_pos {
                        break;
                    }
                    cum += vocab.frequency[sorted_ids[pos] as usize];
                    pos += 1;
                    if (cum as f64) >= target && pos > bounds[b] {
                        break;
                    }
                }
                // Guarantee nonempty block even if target already exceeded.
                if pos == bounds[b] {
                    cum += vocab.frequency[sorted_ids[pos] as usize];
                    pos += 1;
                }
                bounds.push(pos);
            }
            bounds.push(n);
        }
    }
    let mut block_of = vec![0u32; n];
    for b in 0..l {
        for &id in &sorted_ids[bounds[b]..bounds[b + 1]] {
            block_of[id as usize] = b as u32;
        }
    }
    Ok(BlockingScheme {
        block_count: l,
        block_of,
        sorted_ids,
        bounds,
    })
}

impl BlockingScheme {
    /// Mean feature frequency per block, in block order.
    pub fn mean_frequencies(&self, vocab: &FeatureVocabulary) -> Vec<f64> {
        (0..self.block_count)
            .map(|b| {
                let ids = &self.sorted_ids[self.bounds[b]..self.bounds[b + 1]];
                let s: u64 = ids.iter().map(|&i| vocab.frequency[i as usize]).sum();
                s as f64 / ids.len() as f64
            })
            .collect()
    }
}

/// A mini-batch in id/value form. `ids` and `values` are row-major
/// batch_size x field_count.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub values: Vec<f64>,
    pub labels: Vec<f64>,
    pub field_count: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Table rows resolved against a vocabulary. Rows containing a token that maps
/// to no feature (unseen with no OOV fallback) are dropped and counted.
#[derive(Debug, Clone)]
pub struct MappedTable {
    pub ids: Vec<u32>,
    pub values: Vec<f64>,
    pub labels: Vec<f64>,
    pub field_count: usize,
    pub dropped_rows: usize,
}

impl MappedTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_table(table: &InteractionTable, vocab: &FeatureVocabulary) -> MappedTable {
        let m = table.field_count;
        let mut ids = Vec::with_capacity(table.len() * m);
        let mut values = Vec::with_capacity(table.len() * m);
        let mut labels = Vec::with_capacity(table.len());
        let mut dropped = 0usize;
        'rows: for row in &table.rows {
            let mut row_ids = Vec::with_capacity(m);
            for (f, tok) in row.tokens.iter().enumerate() {
                match vocab.map_token(f as u32, tok) {
                    Some(id) => row_ids.push(id),
                    None => {
                        dropped += 1;
                        continue 'rows;
                    }
                }
            }
            ids.extend_from_slice(&row_ids);
            values.extend(std::iter::repeat(1.0).take(m));
            labels.push(row.label);
        }
        MappedTable {
            ids,
            values,
            labels,
            field_count: m,
            dropped_rows: dropped,
        }
    }

    pub fn batch_of(&self, rows: &[usize]) -> Batch {
        let m = self.field_count;
        let mut ids = Vec::with_capacity(rows.len() * m);
        let mut values = Vec::with_capacity(rows.len() * m);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            ids.extend_from_slice(&self.ids[r * m..(r + 1) * m]);
            values.extend_from_slice(&self.values[r * m..(r + 1) * m]);
            labels.push(self.labels[r]);
        }
        Batch {
            ids,
            values,
            labels,
            field_count: m,
        }
    }

    /// One batch over all rows, in storage order.
    pub fn full_batch(&self) -> Batch {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batch_of(&rows)
    }
}

/// Seeded epoch-permutation batch stream over a mapped table.
pub struct BatchStream {
    table: MappedTable,
    batch_size: usize,
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    cursor: usize,
    cycle: bool,
}

pub fn batches(
    table: &InteractionTable,
    vocab: &FeatureVocabulary,
    batch_size: usize,
    seed: u64,
    cycle: bool,
) -> Result<BatchStream, CorpusError> {
    let mapped = MappedTable::from_table(table, vocab);
    BatchStream::new(mapped, batch_size, seed, cycle)
}

impl BatchStream {
    pub fn new(
        table: MappedTable,
        batch_size: usize,
        seed: u64,
        cycle: bool,
    ) -> Result<BatchStream, CorpusError> {
        if batch_size < 1 {
            return Err(CorpusError::BadBatchSize);
        }
        if table.is_empty() {
            return Err(CorpusError::EmptyTable);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..table.len()).collect();
        perm.shuffle(&mut rng);
        Ok(BatchStream {
            table,
            batch_size,
            rng,
            perm,
            cursor: 0,
            cycle,
        })
    }

    pub fn table(&self) -> &MappedTable {
        &self.table
    }

    /// True right after an epoch boundary (next batch starts a fresh epoch).
    pub fn at_epoch_start(&self) -> bool {
        self.cursor == 0
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.perm.len() {
            if !self.cycle {
                return None;
            }
            self.perm.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.perm.len());
        let batch = self.table.batch_of(&self.perm[self.cursor..end]);
        self.cursor = end;
        if self.cursor >= self.perm.len() && self.cycle {
            self.perm.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        Some(batch)
    }
}
