//! Binary checkpoint files: model parameters, the soft selection layer, and
//! the feature-to-block map, as named little-endian tensors. Round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::{Cursor, TaskKind};
use crate::lfm::{
    Architecture, Dense, EmbeddingMatrix, InteractionParams, LfmError, Matrix, Model,
};

const CKPT_MAGIC: &[u8; 8] = b"DNISCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// L x K soft selection values (all-ones for plain-trained models).
    pub alpha: Matrix,
    pub block_of: Vec<u32>,
}

#[derive(Debug, Clone)]
enum TensorData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, dims: &[u64], data: &TensorData) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(match data {
        TensorData::F64(_) => 0,
        TensorData::U32(_) => 1,
    });
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match data {
        TensorData::F64(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), LfmError> {
    let model = &ckpt.model;
    let mut tensors: Vec<(String, Vec<u64>, TensorData)> = Vec::new();
    tensors.push((
        "embed".into(),
        vec![model.n() as u64, model.k() as u64],
        TensorData::F64(model.embed.values.data.clone()),
    ));
    tensors.push((
        "alpha".into(),
        vec![ckpt.alpha.rows as u64, ckpt.alpha.cols as u64],
        TensorData::F64(ckpt.alpha.data.clone()),
    ));
    tensors.push((
        "block_of".into(),
        vec![ckpt.block_of.len() as u64],
        TensorData::U32(ckpt.block_of.clone()),
    ));
    let push_tower = |tensors: &mut Vec<(String, Vec<u64>, TensorData)>, tower: &[Dense]| {
        for (i, layer) in tower.iter().enumerate() {
            tensors.push((
                format!("tower.{i}.w"),
                vec![layer.out_dim as u64, layer.in_dim as u64],
                TensorData::F64(layer.w.clone()),
            ));
            tensors.push((
                format!("tower.{i}.b"),
                vec![layer.out_dim as u64],
                TensorData::F64(layer.b.clone()),
            ));
        }
    };
    match &model.params {
        InteractionParams::Mf { bias } => {
            tensors.push(("bias".into(), vec![1], TensorData::F64(bias.clone())));
        }
        InteractionParams::Fm { bias, linear } => {
            tensors.push(("bias".into(), vec![1], TensorData::F64(bias.clone())));
            tensors.push((
                "linear".into(),
                vec![linear.len() as u64],
                TensorData::F64(linear.clone()),
            ));
        }
        InteractionParams::Mlp { tower } => push_tower(&mut tensors, tower),
        InteractionParams::NeuMf { tower, head } => {
            push_tower(&mut tensors, tower);
            tensors.push((
                "head.w".into(),
                vec![head.out_dim as u64, head.in_dim as u64],
                TensorData::F64(head.w.clone()),
            ));
            tensors.push((
                "head.b".into(),
                vec![head.out_dim as u64],
                TensorData::F64(head.b.clone()),
            ));
        }
        InteractionParams::DeepFmLite { bias, linear, tower } => {
            tensors.push(("bias".into(), vec![1], TensorData::F64(bias.clone())));
            tensors.push((
                "linear".into(),
                vec![linear.len() as u64],
                TensorData::F64(linear.clone()),
            ));
            push_tower(&mut tensors, tower);
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let tag = model.arch.tag();
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.push(match model.task {
        TaskKind::Rating => 0,
        TaskKind::Ctr => 1,
        TaskKind::Implicit => 2,
    });
    buf.extend_from_slice(&(model.n() as u64).to_le_bytes());
    buf.extend_from_slice(&(model.k() as u32).to_le_bytes());
    buf.extend_from_slice(&(ckpt.alpha.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(model.field_count as u32).to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in &tensors {
        put_tensor(&mut buf, name, dims, data);
    }
    let mut file = File::create(path).map_err(|e| LfmError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(&buf).map_err(|e| LfmError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, LfmError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| LfmError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    let corrupt = |msg: &str| LfmError::CheckpointCorrupt(msg.to_string());
    let mut cur = Cursor::new(&buf);
    let take = |cur: &mut Cursor, n: usize| -> Result<Vec<u8>, LfmError> {
        cur.take_bytes(n)
            .map(|b| b.to_vec())
            .map_err(|_| corrupt("truncated"))
    };
    if take(&mut cur, 8)? != CKPT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let tag_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let tag = String::from_utf8(take(&mut cur, tag_len)?).map_err(|_| corrupt("bad arch tag"))?;
    let arch = Architecture::from_tag(&tag).ok_or_else(|| corrupt("unknown arch tag"))?;
    let task = match take(&mut cur, 1)?[0] {
        0 => TaskKind::Rating,
        1 => TaskKind::Ctr,
        2 => TaskKind::Implicit,
        _ => return Err(corrupt("bad task tag")),
    };
    let n = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let l = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;

    let mut tensors: BTreeMap<String, (Vec<u64>, TensorData)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name =
            String::from_utf8(take(&mut cur, name_len)?).map_err(|_| corrupt("bad name"))?;
        let dtype = take(&mut cur, 1)?[0];
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        let len: u64 = dims.iter().product();
        let data = match dtype {
            0 => {
                let bytes = take(&mut cur, len as usize * 8)?;
                TensorData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let bytes = take(&mut cur, len as usize * 4)?;
                TensorData::U32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            _ => return Err(corrupt("bad dtype")),
        };
        tensors.insert(name, (dims, data));
    }
    if cur.pos != buf.len() {
        return Err(corrupt("trailing bytes"));
    }

    let f64_tensor = |name: &str| -> Result<(Vec<u64>, Vec<f64>), LfmError> {
        match tensors.get(name) {
            Some((dims, TensorData::F64(v))) => Ok((dims.clone(), v.clone())),
            _ => Err(corrupt(&format!("missing f64 tensor {name}"))),
        }
    };
    let (edims, edata) = f64_tensor("embed")?;
    if edims != [n as u64, k as u64] {
        return Err(corrupt("embed shape mismatch"));
    }
    let embed = EmbeddingMatrix {
        values: Matrix {
            data: edata,
            rows: n,
            cols: k,
        },
    };
    let (adims, adata) = f64_tensor("alpha")?;
    if adims != [l as u64, k as u64] {
        return Err(corrupt("alpha shape mismatch"));
    }
    let alpha = Matrix {
        data: adata,
        rows: l,
        cols: k,
    };
    let block_of = match tensors.get("block_of") {
        Some((dims, TensorData::U32(v))) if dims == &[n as u64] => v.clone(),
        _ => return Err(corrupt("missing block_of tensor")),
    };

    let load_tower = |tensors: &BTreeMap<String, (Vec<u64>, TensorData)>| -> Result<Vec<Dense>, LfmError> {
        let mut tower = Vec::new();
        let mut i = 0;
        while tensors.contains_key(&format!("tower.{i}.w")) {
            let (wd, w) = f64_tensor(&format!("tower.{i}.w"))?;
            let (_, b) = f64_tensor(&format!("tower.{i}.b"))?;
            tower.push(Dense {
                w,
                b,
                in_dim: wd[1] as usize,
                out_dim: wd[0] as usize,
            });
            i += 1;
        }
        Ok(tower)
    };

    let params = match arch {
        Architecture::Mf => InteractionParams::Mf {
            bias: f64_tensor("bias")?.1,
        },
        Architecture::Fm => InteractionParams::Fm {
            bias: f64_tensor("bias")?.1,
            linear: f64_tensor("linear")?.1,
        },
        Architecture::Mlp => InteractionParams::Mlp {
            tower: load_tower(&tensors)?,
        },
        Architecture::NeuMf => {
            let (hd, hw) = f64_tensor("head.w")?;
            InteractionParams::NeuMf {
                tower: load_tower(&tensors)?,
                head: Dense {
                    w: hw,
                    b: f64_tensor("head.b")?.1,
                    in_dim: hd[1] as usize,
                    out_dim: hd[0] as usize,
                },
            }
        }
        Architecture::DeepFmLite => InteractionParams::DeepFmLite {
            bias: f64_tensor("bias")?.1,
            linear: f64_tensor("linear")?.1,
            tower: load_tower(&tensors)?,
        },
    };

    Ok(Checkpoint {
        model: Model {
            arch,
            task,
            embed,
            params,
            field_count: m,
        },
        alpha,
        block_of,
    })
}
