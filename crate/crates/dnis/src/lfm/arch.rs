//! Forward and backward passes for the interaction architectures G.
//!
//! The backward pass produces exact analytic gradients of the mean batch loss
//! with respect to touched embedding rows, interaction parameters, and (when a
//! soft selection context is supplied) the selection rows.

use std::collections::BTreeMap;

use crate::corpus::Batch;
use crate::lfm::{
    embed_lookup, loss_grad, AlphaRef, Architecture, GradientSet, InteractionParams, LfmError,
    Matrix, Model,
};

#[derive(Debug, Clone)]
enum ArchCache {
    Mf,
    Fm {
        sums: Vec<f64>,
    },
    Mlp {
        acts: Vec<Vec<f64>>,
    },
    NeuMf {
        acts: Vec<Vec<f64>>,
        joint: Vec<f64>,
    },
    DeepFm {
        sums: Vec<f64>,
        acts: Vec<Vec<f64>>,
    },
}

/// Cached forward context for one batch; required by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub preds: Vec<f64>,
    /// value-scaled embedding rows before soft selection, n*m*k
    pub x_pre: Vec<f64>,
    /// embedding block fed to the interaction layers (after soft selection)
    pub x: Vec<f64>,
    cache: ArchCache,
}

fn check_fields(model: &Model, batch: &Batch) -> Result<(), LfmError> {
    if batch.field_count != model.field_count {
        return Err(LfmError::ShapeMismatch(format!(
            "batch has {} fields, model expects {}",
            batch.field_count, model.field_count
        )));
    }
    let need_two = matches!(model.arch, Architecture::Mf | Architecture::NeuMf);
    if need_two && batch.field_count != 2 {
        return Err(LfmError::FieldCount {
            arch: model.arch,
            need: 2,
            got: batch.field_count,
        });
    }
    Ok(())
}

/// Elementwise product of each embedding row with its block's selection row.
pub fn apply_soft_selection(
    x: &[f64],
    ids: &[u32],
    k: usize,
    alpha: AlphaRef<'_>,
) -> Result<Vec<f64>, LfmError> {
    let mut out = vec![0.0; x.len()];
    for (j, &id) in ids.iter().enumerate() {
        let block = alpha.block_of[id as usize] as usize;
        if block >= alpha.alpha.rows {
            return Err(LfmError::ShapeMismatch(format!(
                "block index {block} out of range (L={})",
                alpha.alpha.rows
            )));
        }
        let arow = alpha.alpha.row(block);
        let src = &x[j * k..(j + 1) * k];
        let dst = &mut out[j * k..(j + 1) * k];
        for i in 0..k {
            dst[i] = src[i] * arow[i];
        }
    }
    Ok(out)
}

pub fn forward(
    model: &Model,
    batch: &Batch,
    alpha: Option<AlphaRef<'_>>,
) -> Result<ForwardPass, LfmError> {
    check_fields(model, batch)?;
    let n = batch.len();
    let m = batch.field_count;
    let k = model.k();
    let x_pre = embed_lookup(&model.embed, batch)?;
    let x = match alpha {
        Some(a) => apply_soft_selection(&x_pre, &batch.ids, k, a)?,
        None => x_pre.clone(),
    };

    let (preds, cache) = match (&model.params, model.arch) {
        (InteractionParams::Mf { bias }, _) => {
            let mut preds = Vec::with_capacity(n);
            for i in 0..n {
                let u = &x[i * 2 * k..i * 2 * k + k];
                let v = &x[i * 2 * k + k..(i + 1) * 2 * k];
                let mut dot = bias[0];
                for (a, b) in u.iter().zip(v) {
                    dot += a * b;
                }
                preds.push(dot);
            }
            (preds, ArchCache::Mf)
        }
        (InteractionParams::Fm { bias, linear }, _) => {
            let (preds, sums) = fm_part(&x, batch, n, m, k, bias[0], linear);
            (preds, ArchCache::Fm { sums })
        }
        (InteractionParams::Mlp { tower }, _) => {
            let acts = tower_forward(tower, &x, n);
            let preds = acts.last().unwrap().clone();
            (preds, ArchCache::Mlp { acts })
        }
        (InteractionParams::NeuMf { tower, head }, _) => {
            let acts = hidden_forward(tower, &x, n);
            let h_last = acts.last().map(|a| a.len() / n).unwrap_or(2 * k);
            let mlp_out = acts.last().cloned().unwrap_or_else(|| x.clone());
            let mut joint = vec![0.0; n * (k + h_last)];
            for i in 0..n {
                let u = &x[i * 2 * k..i * 2 * k + k];
                let v = &x[i * 2 * k + k..(i + 1) * 2 * k];
                let dst = &mut joint[i * (k + h_last)..(i + 1) * (k + h_last)];
                for j in 0..k {
                    dst[j] = u[j] * v[j];
                }
                dst[k..].copy_from_slice(&mlp_out[i * h_last..(i + 1) * h_last]);
            }
            let preds = head.forward(&joint, n, false);
            (preds, ArchCache::NeuMf { acts, joint })
        }
        (InteractionParams::DeepFmLite { bias, linear, tower }, _) => {
            let (fm_preds, sums) = fm_part(&x, batch, n, m, k, bias[0], linear);
            let acts = tower_forward(tower, &x, n);
            let preds = fm_preds
                .iter()
                .zip(acts.last().unwrap())
                .map(|(a, b)| a + b)
                .collect();
            (preds, ArchCache::DeepFm { sums, acts })
        }
    };
    Ok(ForwardPass {
        preds,
        x_pre,
        x,
        cache,
    })
}

/// FM score per instance via the sum-of-squares identity, returning the
/// per-dimension sums S for reuse in the backward pass.
fn fm_part(
    x: &[f64],
    batch: &Batch,
    n: usize,
    m: usize,
    k: usize,
    bias: f64,
    linear: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut preds = Vec::with_capacity(n);
    let mut sums = vec![0.0; n * k];
    for i in 0..n {
        let mut acc = bias;
        for f in 0..m {
            let j = i * m + f;
            acc += linear[batch.ids[j] as usize] * batch.values[j];
        }
        let srow = &mut sums[i * k..(i + 1) * k];
        let mut sq = 0.0;
        for f in 0..m {
            let row = &x[(i * m + f) * k..(i * m + f + 1) * k];
            for (s, &v) in srow.iter_mut().zip(row) {
                *s += v;
                sq += v * v;
            }
        }
        let s2: f64 = srow.iter().map(|s| s * s).sum();
        preds.push(acc + 0.5 * (s2 - sq));
    }
    (preds, sums)
}

/// Hidden ReLU layers + linear output layer; returns every layer's output.
fn tower_forward(tower: &[crate::lfm::Dense], x: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(tower.len());
    let mut cur = x;
    let mut owned;
    for (li, layer) in tower.iter().enumerate() {
        let relu = li + 1 < tower.len();
        owned = layer.forward(cur, n, relu);
        acts.push(owned);
        cur = acts.last().unwrap();
    }
    acts
}

/// ReLU layers only (NeuMF branch).
fn hidden_forward(tower: &[crate::lfm::Dense], x: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(tower.len());
    let mut cur = x;
    let mut owned;
    for layer in tower {
        owned = layer.forward(cur, n, true);
        acts.push(owned);
        cur = acts.last().unwrap();
    }
    acts
}

/// Gradients of the mean batch loss. `alpha` must match the forward call.
pub fn backward(
    model: &Model,
    batch: &Batch,
    fwd: &ForwardPass,
    alpha: Option<AlphaRef<'_>>,
) -> Result<GradientSet, LfmError> {
    check_fields(model, batch)?;
    let n = batch.len();
    let m = batch.field_count;
    let k = model.k();
    let dpred = loss_grad(&fwd.preds, &batch.labels, model.task);

    // dL/dx (post-selection embedding block) plus dense parameter grads.
    let mut dx = vec![0.0; n * m * k];
    let mut dense: Vec<Vec<f64>> = model
        .params
        .dense_tensors()
        .iter()
        .map(|t| vec![0.0; t.len()])
        .collect();
    let mut linear_rows: BTreeMap<u32, f64> = BTreeMap::new();

    match (&model.params, &fwd.cache) {
        (InteractionParams::Mf { .. }, ArchCache::Mf) => {
            for i in 0..n {
                let g = dpred[i];
                dense[0][0] += g;
                let (left, right) = dx[i * 2 * k..(i + 1) * 2 * k].split_at_mut(k);
                let u = &fwd.x[i * 2 * k..i * 2 * k + k];
                let v = &fwd.x[i * 2 * k + k..(i + 1) * 2 * k];
                for j in 0..k {
                    left[j] += g * v[j];
                    right[j] += g * u[j];
                }
            }
        }
        (InteractionParams::Fm { .. }, ArchCache::Fm { sums }) => {
            fm_backward(batch, &fwd.x, sums, &dpred, n, m, k, &mut dx, &mut dense[0], &mut linear_rows);
        }
        (InteractionParams::Mlp { tower }, ArchCache::Mlp { acts }) => {
            let dy: Vec<f64> = dpred.clone();
            let dinput = tower_backward(tower, &fwd.x, acts, &dy, n, &mut dense, 0);
            dx.copy_from_slice(&dinput);
        }
        (InteractionParams::NeuMf { tower, head }, ArchCache::NeuMf { acts, joint }) => {
            let h_last = if acts.is_empty() { 2 * k } else { acts.last().unwrap().len() / n };
            let joint_dim = k + h_last;
            // Head is linear; its grads go after the tower tensors.
            let head_slot = tower.len() * 2;
            let head_out = vec![0.0; n]; // output cache unused without relu
            let djoint = {
                let (a, b) = dense.split_at_mut(head_slot + 1);
                head.backward(joint, &head_out, &dpred, n, false, &mut a[head_slot], &mut b[0])
            };
            // Split djoint into the GMF part and the tower part.
            let mut dgmf = vec![0.0; n * k];
            let mut dtop = vec![0.0; n * h_last];
            for i in 0..n {
                dgmf[i * k..(i + 1) * k]
                    .copy_from_slice(&djoint[i * joint_dim..i * joint_dim + k]);
                dtop[i * h_last..(i + 1) * h_last]
                    .copy_from_slice(&djoint[i * joint_dim + k..(i + 1) * joint_dim]);
            }
            // GMF branch: gmf_j = u_j * v_j.
            for i in 0..n {
                let (left, right) = dx[i * 2 * k..(i + 1) * 2 * k].split_at_mut(k);
                let u = &fwd.x[i * 2 * k..i * 2 * k + k];
                let v = &fwd.x[i * 2 * k + k..(i + 1) * 2 * k];
                for j in 0..k {
                    left[j] += dgmf[i * k + j] * v[j];
                    right[j] += dgmf[i * k + j] * u[j];
                }
            }
            // Tower branch (all-ReLU).
            let dinput = hidden_backward(tower, &fwd.x, acts, &dtop, n, &mut dense, 0);
            for (a, b) in dx.iter_mut().zip(&dinput) {
                *a += b;
            }
        }
        (InteractionParams::DeepFmLite { tower, .. }, ArchCache::DeepFm { sums, acts }) => {
            fm_backward(batch, &fwd.x, sums, &dpred, n, m, k, &mut dx, &mut dense[0], &mut linear_rows);
            let dinput = tower_backward(tower, &fwd.x, acts, &dpred, n, &mut dense, 1);
            for (a, b) in dx.iter_mut().zip(&dinput) {
                *a += b;
            }
        }
        _ => {
            return Err(LfmError::ShapeMismatch(
                "forward cache does not match model architecture".into(),
            ))
        }
    }

    // Chain dx back through the soft selection layer into E (and alpha).
    let mut embed_rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut dalpha = alpha.map(|a| Matrix::zeros(a.alpha.rows, a.alpha.cols));
    for (j, (&id, &value)) in batch.ids.iter().zip(&batch.values).enumerate() {
        let dxj = &dx[j * k..(j + 1) * k];
        let erow = embed_rows.entry(id).or_insert_with(|| vec![0.0; k]);
        match alpha {
            Some(a) => {
                let arow = a.alpha.row(a.block_of[id as usize] as usize);
                let da = dalpha.as_mut().unwrap();
                let darow = da.row_mut(a.block_of[id as usize] as usize);
                let pre = &fwd.x_pre[j * k..(j + 1) * k];
                for i in 0..k {
                    erow[i] += dxj[i] * arow[i] * value;
                    darow[i] += dxj[i] * pre[i];
                }
            }
            None => {
                for i in 0..k {
                    erow[i] += dxj[i] * value;
                }
            }
        }
    }

    Ok(GradientSet {
        embed_rows,
        linear_rows,
        dense,
        alpha: dalpha,
    })
}

#[allow(clippy::too_many_arguments)]
fn fm_backward(
    batch: &Batch,
    x: &[f64],
    sums: &[f64],
    dpred: &[f64],
    n: usize,
    m: usize,
    k: usize,
    dx: &mut [f64],
    dbias: &mut [f64],
    linear_rows: &mut BTreeMap<u32, f64>,
) {
    for i in 0..n {
        let g = dpred[i];
        dbias[0] += g;
        for f in 0..m {
            let j = i * m + f;
            *linear_rows.entry(batch.ids[j]).or_insert(0.0) += g * batch.values[j];
        }
        let srow = &sums[i * k..(i + 1) * k];
        for f in 0..m {
            let j = i * m + f;
            let row = &x[j * k..(j + 1) * k];
            let drow = &mut dx[j * k..(j + 1) * k];
            for d in 0..k {
                drow[d] += g * (srow[d] - row[d]);
            }
        }
    }
}

/// Backward through hidden-ReLU + linear-output tower; dense grads land in
/// slots [offset, offset + 2*len) as (w, b) pairs in layer order.
fn tower_backward(
    tower: &[crate::lfm::Dense],
    x: &[f64],
    acts: &[Vec<f64>],
    dtop: &[f64],
    n: usize,
    dense: &mut [Vec<f64>],
    offset: usize,
) -> Vec<f64> {
    let mut dy = dtop.to_vec();
    for li in (0..tower.len()).rev() {
        let relu = li + 1 < tower.len();
        let input = if li == 0 { x } else { &acts[li - 1] };
        let (dw, db) = {
            let (a, b) = dense.split_at_mut(offset + 2 * li + 1);
            (&mut a[offset + 2 * li], &mut b[0])
        };
        dy = tower[li].backward(input, &acts[li], &dy, n, relu, dw, db);
    }
    dy
}

/// Same but every layer is ReLU (NeuMF branch tower).
fn hidden_backward(
    tower: &[crate::lfm::Dense],
    x: &[f64],
    acts: &[Vec<f64>],
    dtop: &[f64],
    n: usize,
    dense: &mut [Vec<f64>],
    offset: usize,
) -> Vec<f64> {
    let mut dy = dtop.to_vec();
    for li in (0..tower.len()).rev() {
        let input = if li == 0 { x } else { &acts[li - 1] };
        let (dw, db) = {
            let (a, b) = dense.split_at_mut(offset + 2 * li + 1);
            (&mut a[offset + 2 * li], &mut b[0])
        };
        dy = tower[li].backward(input, &acts[li], &dy, n, true, dw, db);
    }
    dy
}
