//! Merging the soft selection layer into the embedding matrix, threshold and
//! compression-rate pruning, the discrete mixed dimension scheme (D, V), and
//! COO persistence.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{BlockingScheme, Cursor};
use crate::lfm::{EmbeddingMatrix, Matrix};

#[derive(Debug, Error)]
pub enum DimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target compression rate {0} must be >= 1")]
    BadCompressionRate(f64),
    #[error("feature id {id} out of range (N={n})")]
    IdOutOfRange { id: u32, n: usize },
    #[error("COO file corrupt: {0}")]
    Corrupt(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// N x K output embedding: each row of E scaled by its block's selection row.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedEmbedding {
    pub values: Matrix,
}

pub fn merge(
    embed: &EmbeddingMatrix,
    alpha: &Matrix,
    blocks: &BlockingScheme,
) -> Result<MergedEmbedding, DimError> {
    let (n, k) = (embed.n(), embed.k());
    if alpha.cols != k {
        return Err(DimError::ShapeMismatch(format!(
            "alpha has {} columns, embedding K={k}",
            alpha.cols
        )));
    }
    if blocks.block_of.len() != n || blocks.block_count != alpha.rows {
        return Err(DimError::ShapeMismatch(format!(
            "blocks cover {} features / {} blocks, expected {n} / {}",
            blocks.block_of.len(),
            blocks.block_count,
            alpha.rows
        )));
    }
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let arow = alpha.row(blocks.block_of[i] as usize);
        let src = embed.values.row(i);
        let dst = out.row_mut(i);
        for j in 0..k {
            dst[j] = src[j] * arow[j];
        }
    }
    Ok(MergedEmbedding { values: out })
}

/// Sparse matrix in coordinate form. Values are kept at full precision in
/// memory; the file format stores them as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct CooEmbedding {
    pub rows: Vec<u32>,
    pub cols: Vec<u16>,
    pub values: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

pub const COO_HEADER_BYTES: usize = 8 + 8 + 4 + 8;
pub const COO_TRIPLET_BYTES: usize = 4 + 2 + 4;

impl CooEmbedding {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }
    /// On-disk size in bytes: 10 per triplet plus the header.
    pub fn storage_bytes(&self) -> usize {
        COO_HEADER_BYTES + COO_TRIPLET_BYTES * self.nnz()
    }
    /// Dense value-parameter count over pruned count.
    pub fn compression_rate(&self) -> f64 {
        (self.n * self.k) as f64 / self.nnz() as f64
    }
}

/// Eq.-style threshold pruning: entries with |value| < eps are dropped, the
/// rest kept verbatim. Exact zeros never enter the COO support.
pub fn prune_threshold(merged: &MergedEmbedding, eps: f64) -> CooEmbedding {
    let m = &merged.values;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut values = Vec::new();
    for r in 0..m.rows {
        for c in 0..m.cols {
            let v = m.data[r * m.cols + c];
            if v != 0.0 && v.abs() >= eps {
                rows.push(r as u32);
                cols.push(c as u16);
                values.push(v);
            }
        }
    }
    CooEmbedding {
        rows,
        cols,
        values,
        n: m.rows,
        k: m.cols,
    }
}

/// The smallest magnitude quantile eps such that threshold pruning keeps at
/// most floor(N*K/target_cr) entries, up to ties at the cut.
pub fn threshold_for_cr(merged: &MergedEmbedding, target_cr: f64) -> Result<f64, DimError> {
    if !(target_cr >= 1.0) {
        return Err(DimError::BadCompressionRate(target_cr));
    }
    let budget = ((merged.values.rows * merged.values.cols) as f64 / target_cr).floor() as usize;
    if budget == 0 {
        return Ok(f64::INFINITY);
    }
    let mut mags: Vec<f64> = merged
        .values
        .data
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| v.abs())
        .collect();
    if mags.len() <= budget {
        return Ok(0.0);
    }
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(mags[budget - 1])
}

/// Prune to an exact nnz budget for the target compression rate. Ties at the
/// magnitude cut resolve by (row, col) lexical order.
pub fn prune_to_cr(merged: &MergedEmbedding, target_cr: f64) -> Result<CooEmbedding, DimError> {
    if !(target_cr >= 1.0) {
        return Err(DimError::BadCompressionRate(target_cr));
    }
    let m = &merged.values;
    let budget = ((m.rows * m.cols) as f64 / target_cr).floor() as usize;
    // Entries in (row, col) order; stable sort keeps that order inside
    // magnitude tie-groups.
    let mut entries: Vec<(u32, u16, f64)> = Vec::new();
    for r in 0..m.rows {
        for c in 0..m.cols {
            let v = m.data[r * m.cols + c];
            if v != 0.0 {
                entries.push((r as u32, c as u16, v));
            }
        }
    }
    entries.sort_by(|a, b| b.2.abs().partial_cmp(&a.2.abs()).unwrap());
    entries.truncate(budget);
    entries.sort_by_key(|e| (e.0, e.1));
    Ok(CooEmbedding {
        rows: entries.iter().map(|e| e.0).collect(),
        cols: entries.iter().map(|e| e.1).collect(),
        values: entries.iter().map(|e| e.2).collect(),
        n: m.rows,
        k: m.cols,
    })
}

/// Per-feature dimension index vectors d_i (sorted, 0-based) and value
/// vectors v_i.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedDimensionScheme {
    pub dims: Vec<Vec<u16>>,
    pub values: Vec<Vec<f64>>,
    pub k: usize,
}

pub fn derive_scheme(coo: &CooEmbedding) -> MixedDimensionScheme {
    let mut dims = vec![Vec::new(); coo.n];
    let mut values = vec![Vec::new(); coo.n];
    for ((&r, &c), &v) in coo.rows.iter().zip(&coo.cols).zip(&coo.values) {
        dims[r as usize].push(c);
        values[r as usize].push(v);
    }
    MixedDimensionScheme {
        dims,
        values,
        k: coo.k,
    }
}

impl MixedDimensionScheme {
    pub fn feature_count(&self) -> usize {
        self.dims.len()
    }

    /// Kept-dimension count per feature.
    pub fn dims_per_feature(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.len()).collect()
    }

    /// Scatter one feature's (d_i, v_i) into a dense K vector.
    pub fn densify_one(&self, id: u32, out: &mut [f64]) -> Result<(), DimError> {
        if id as usize >= self.dims.len() {
            return Err(DimError::IdOutOfRange {
                id,
                n: self.dims.len(),
            });
        }
        out.fill(0.0);
        let i = id as usize;
        for (&c, &v) in self.dims[i].iter().zip(&self.values[i]) {
            out[c as usize] = v;
        }
        Ok(())
    }

    /// Dense K-vectors for a batch of feature ids, row-major.
    pub fn densify(&self, ids: &[u32]) -> Result<Vec<f64>, DimError> {
        let mut out = vec![0.0; ids.len() * self.k];
        for (j, &id) in ids.iter().enumerate() {
            self.densify_one(id, &mut out[j * self.k..(j + 1) * self.k])?;
        }
        Ok(out)
    }

    /// Reconstitute the full N x K embedding matrix (zeros off-support), so
    /// pruned models feed unmodified interaction layers.
    pub fn to_embedding(&self) -> EmbeddingMatrix {
        let n = self.dims.len();
        let mut m = Matrix::zeros(n, self.k);
        for i in 0..n {
            let row = m.row_mut(i);
            for (&c, &v) in self.dims[i].iter().zip(&self.values[i]) {
                row[c as usize] = v;
            }
        }
        EmbeddingMatrix { values: m }
    }
}

const COO_MAGIC: &[u8; 8] = b"DNISCOO1";

pub fn save_coo(coo: &CooEmbedding, path: &Path) -> Result<(), DimError> {
    let mut buf = Vec::with_capacity(coo.storage_bytes());
    buf.extend_from_slice(COO_MAGIC);
    buf.extend_from_slice(&(coo.n as u64).to_le_bytes());
    buf.extend_from_slice(&(coo.k as u32).to_le_bytes());
    buf.extend_from_slice(&(coo.nnz() as u64).to_le_bytes());
    for ((&r, &c), &v) in coo.rows.iter().zip(&coo.cols).zip(&coo.values) {
        buf.extend_from_slice(&r.to_le_bytes());
        buf.extend_from_slice(&c.to_le_bytes());
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = File::create(path).map_err(|e| DimError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(&buf).map_err(|e| DimError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_coo(path: &Path) -> Result<CooEmbedding, DimError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| DimError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    let mut cur = Cursor::new(&buf);
    let corrupt = |m: &str| DimError::Corrupt(m.to_string());
    let magic = cur.take_bytes(8).map_err(|_| corrupt("truncated header"))?;
    if magic != COO_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let n = cur.take_u64().map_err(|_| corrupt("truncated header"))? as usize;
    let k = cur.take_u32().map_err(|_| corrupt("truncated header"))? as usize;
    let nnz = cur.take_u64().map_err(|_| corrupt("truncated header"))? as usize;
    if buf.len() != COO_HEADER_BYTES + COO_TRIPLET_BYTES * nnz {
        return Err(corrupt("length does not match nnz"));
    }
    let mut rows = Vec::with_capacity(nnz);
    let mut cols = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    let mut prev: Option<(u32, u16)> = None;
    for _ in 0..nnz {
        let r = cur.take_u32().map_err(|_| corrupt("truncated triplet"))?;
        let c = u16::from_le_bytes(
            cur.take_bytes(2)
                .map_err(|_| corrupt("truncated triplet"))?
                .try_into()
                .unwrap(),
        );
        let v = f32::from_le_bytes(
            cur.take_bytes(4)
                .map_err(|_| corrupt("truncated triplet"))?
                .try_into()
                .unwrap(),
        );
        if r as usize >= n || c as usize >= k {
            return Err(corrupt("triplet index out of range"));
        }
        if let Some(p) = prev {
            if (r, c) <= p {
                return Err(corrupt("triplets not sorted (row, col) ascending"));
            }
        }
        prev = Some((r, c));
        rows.push(r);
        cols.push(c);
        values.push(v as f64);
    }
    Ok(CooEmbedding {
        rows,
        cols,
        values,
        n,
        k,
    })
}
