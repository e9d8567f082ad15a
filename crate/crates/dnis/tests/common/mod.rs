//! Shared helpers for integration tests: synthetic datasets with planted
//! low-rank structure and power-law feature popularity, plus small model
//! construction utilities.

#![allow(dead_code)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dnis::corpus::BlockingScheme;

/// Rating-prediction CSV with a planted rank-`rank` model: user/item factor
/// dot products centered at 3 plus observation noise. The catalog mirrors a
/// real one in three regimes: a gently Zipf-distributed core holds 95% of the
/// interaction mass; the upper half of that core carries genuine taste signal
/// while the lower half is pure noise (ratings near the global mean); the
/// remaining items form a flat tail seen a couple of times each.
pub fn synth_movielens(
    path: &Path,
    users: usize,
    items: usize,
    rows: usize,
    rank: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Factor range keeps the interaction's standard deviation near 0.6
    // regardless of the planted rank.
    let a = (0.9 / (rank as f64).sqrt()).sqrt();
    let factor = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..rank).map(|_| rng.random_range(-a..a)).collect())
            .collect()
    };
    let p = factor(users, &mut rng);
    let core = (items * 4 / 9).max(1);
    let signal_cut = core / 2;
    let mut q = factor(items, &mut rng);
    for row in q.iter_mut().skip(signal_cut) {
        row.iter_mut().for_each(|v| *v = 0.0);
    }
    // Popularity: core items follow a flat Zipf law (exponent 0.3, so the top
    // item takes well under 1% of traffic) with 95% of the mass; the tail
    // splits the final 5% evenly.
    let core_total: f64 = (0..core).map(|m| 1.0 / ((m + 1) as f64).powf(0.3)).sum();
    let tail_share = 0.05f64 / (1.0 - 0.05);
    let cum: Vec<f64> = {
        let mut acc = 0.0;
        let mut c = Vec::with_capacity(items);
        for m in 0..items {
            acc += if m < core {
                1.0 / ((m + 1) as f64).powf(0.3)
            } else {
                core_total * tail_share / (items - core) as f64
            };
            c.push(acc);
        }
        c
    };
    let total = *cum.last().unwrap();
    let mut w = BufWriter::new(File::create(path).unwrap());
    writeln!(w, "userId,movieId,rating,timestamp").unwrap();
    for _ in 0..rows {
        let u = rng.random_range(0..users);
        let x: f64 = rng.random_range(0.0..total);
        let i = cum.partition_point(|&c| c < x).min(items - 1);
        let dot: f64 = p[u].iter().zip(&q[i]).map(|(a, b)| a * b).sum();
        let noise: f64 = rng.random_range(-0.6..0.6);
        let rating = (3.0 + 2.0 * dot + noise).clamp(1.0, 5.0);
        writeln!(w, "{u},{i},{rating:.3},0").unwrap();
    }
}

/// CTR TSV in the 1-label + 13-integer + 26-categorical column layout, with
/// labels drawn from a planted logistic model over the categorical tokens.
pub fn synth_criteo(path: &Path, rows: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per categorical field: vocabulary size and hidden token weights. Early
    // fields are more informative.
    let vocab_sizes: Vec<usize> = (0..26).map(|f| 20 + (f * 37) % 400).collect();
    let weights: Vec<Vec<f64>> = vocab_sizes
        .iter()
        .enumerate()
        .map(|(f, &v)| {
            let scale = 1.2 / (1.0 + f as f64 * 0.25);
            (0..v).map(|_| rng.random_range(-scale..scale)).collect()
        })
        .collect();
    let mut w = BufWriter::new(File::create(path).unwrap());
    for _ in 0..rows {
        let mut logit = -0.4;
        let mut cats = Vec::with_capacity(26);
        for f in 0..26 {
            let x: f64 = rng.random_range(0.0..1.0);
            // Power-law token popularity within each field.
            let tok = ((x * x) * vocab_sizes[f] as f64) as usize;
            logit += weights[f][tok];
            cats.push(format!("{:x}", (f * 100003 + tok * 7919) as u64));
        }
        let prob = 1.0 / (1.0 + (-logit).exp());
        let label = u8::from(rng.random_range(0.0..1.0) < prob);
        let mut line = label.to_string();
        for _ in 0..13 {
            let v: u32 = rng.random_range(0..500);
            line.push('\t');
            line.push_str(&v.to_string());
        }
        for c in &cats {
            line.push('\t');
            line.push_str(c);
        }
        writeln!(w, "{line}").unwrap();
    }
}

/// BlockingScheme from an explicit block assignment (test plumbing only).
pub fn blocks_from_assignment(block_of: Vec<u32>, l: usize) -> BlockingScheme {
    let n = block_of.len();
    let mut sorted_ids: Vec<u32> = (0..n as u32).collect();
    sorted_ids.sort_by_key(|&i| block_of[i as usize]);
    let mut bounds = vec![0usize];
    for b in 0..l {
        let c = block_of.iter().filter(|&&x| x as usize == b).count();
        bounds.push(bounds.last().unwrap() + c);
    }
    BlockingScheme {
        block_count: l,
        block_of,
        sorted_ids,
        bounds,
    }
}

pub mod suite {
    //! Reusable checkers shared by the focused test targets and the
    //! acceptance gate.

    use dnis::corpus::{Batch, TaskKind};
    use dnis::lfm::arch::{backward, forward};
    use dnis::lfm::{mean_loss, AlphaRef, Architecture, Matrix, Model, ModelConfig};
    use dnis::search::{hypergradient, normalize_rowwise, HyperOrder, SearchConfig, SoftSelectionLayer};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub struct GradInstance {
        pub model: Model,
        pub batch: Batch,
        pub alpha: Matrix,
        pub block_of: Vec<u32>,
    }

    pub fn random_instance(arch: Architecture, seed: u64) -> GradInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(2..=6);
        let n = rng.random_range(6..=16);
        let m = match arch {
            Architecture::Mf | Architecture::NeuMf => 2,
            _ => rng.random_range(2..=4),
        };
        let task = if rng.random_range(0..2) == 0 {
            TaskKind::Rating
        } else {
            TaskKind::Ctr
        };
        let mut cfg = ModelConfig::new(arch, k, seed.wrapping_mul(31).wrapping_add(7));
        cfg.hidden = vec![6, 4];
        let mut model = Model::init(n, m, task, &cfg);
        // Jitter every dense parameter (biases init to zero) so no ReLU
        // pre-activation sits exactly on its kink, where a central
        // difference is not a gradient oracle.
        for t in model.params.dense_tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }

        let rows = rng.random_range(1..=4);
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..rows {
            for _ in 0..m {
                ids.push(rng.random_range(0..n as u32));
                values.push(if rng.random_range(0..3) == 0 {
                    rng.random_range(0.5..2.0)
                } else {
                    1.0
                });
            }
            labels.push(match task {
                TaskKind::Rating => rng.random_range(1.0..5.0),
                _ => f64::from(rng.random_range(0..2)),
            });
        }
        let batch = Batch {
            ids,
            values,
            labels,
            field_count: m,
        };

        let l = rng.random_range(1..=3.min(n));
        let block_of: Vec<u32> = (0..n).map(|_| rng.random_range(0..l as u32)).collect();
        let mut alpha = Matrix::zeros(l, k);
        for v in &mut alpha.data {
            *v = rng.random_range(0.1..1.0);
        }
        GradInstance {
            model,
            batch,
            alpha,
            block_of,
        }
    }

    fn loss_of(model: &Model, batch: &Batch, alpha: &Matrix, block_of: &[u32]) -> f64 {
        let aref = AlphaRef {
            alpha,
            block_of,
        };
        let fwd = forward(model, batch, Some(aref)).unwrap();
        mean_loss(&fwd.preds, &batch.labels, model.task).unwrap()
    }

    fn rel_err(analytic: f64, fd: f64) -> f64 {
        let diff = (analytic - fd).abs();
        if diff <= 1e-7 {
            return 0.0;
        }
        diff / analytic.abs().max(fd.abs()).max(1e-7)
    }

    /// Central-finite-difference check of every parameter gradient (embedding,
    /// dense, linear, selection layer) on one instance. Returns the max
    /// relative error.
    pub fn check_instance(inst: &GradInstance) -> f64 {
        let h = 1e-5;
        let aref = AlphaRef {
            alpha: &inst.alpha,
            block_of: &inst.block_of,
        };
        let fwd = forward(&inst.model, &inst.batch, Some(aref)).unwrap();
        let grads = backward(&inst.model, &inst.batch, &fwd, Some(aref)).unwrap();
        let mut worst = 0.0f64;
        let k = inst.model.k();

        // Embedding rows touched by the batch.
        let mut touched: Vec<u32> = inst.batch.ids.clone();
        touched.sort_unstable();
        touched.dedup();
        for &id in &touched {
            for j in 0..k {
                let idx = id as usize * k + j;
                let mut mp = inst.model.clone();
                mp.embed.values.data[idx] += h;
                let mut mm = inst.model.clone();
                mm.embed.values.data[idx] -= h;
                let fd = (loss_of(&mp, &inst.batch, &inst.alpha, &inst.block_of)
                    - loss_of(&mm, &inst.batch, &inst.alpha, &inst.block_of))
                    / (2.0 * h);
                let analytic = grads.embed_rows.get(&id).map_or(0.0, |r| r[j]);
                worst = worst.max(rel_err(analytic, fd));
            }
        }

        // Dense interaction tensors, in the fixed enumeration order.
        let n_dense = inst.model.params.dense_tensors().len();
        for ti in 0..n_dense {
            let len = inst.model.params.dense_tensors()[ti].len();
            for ei in 0..len {
                let mut mp = inst.model.clone();
                mp.params.dense_tensors_mut()[ti][ei] += h;
                let mut mm = inst.model.clone();
                mm.params.dense_tensors_mut()[ti][ei] -= h;
                let fd = (loss_of(&mp, &inst.batch, &inst.alpha, &inst.block_of)
                    - loss_of(&mm, &inst.batch, &inst.alpha, &inst.block_of))
                    / (2.0 * h);
                worst = worst.max(rel_err(grads.dense[ti][ei], fd));
            }
        }

        // Per-feature linear weights (FM-style parts).
        if inst.model.params.linear().is_some() {
            for &id in &touched {
                let mut mp = inst.model.clone();
                mp.params.linear_mut().unwrap()[id as usize] += h;
                let mut mm = inst.model.clone();
                mm.params.linear_mut().unwrap()[id as usize] -= h;
                let fd = (loss_of(&mp, &inst.batch, &inst.alpha, &inst.block_of)
                    - loss_of(&mm, &inst.batch, &inst.alpha, &inst.block_of))
                    / (2.0 * h);
                let analytic = grads.linear_rows.get(&id).copied().unwrap_or(0.0);
                worst = worst.max(rel_err(analytic, fd));
            }
        }

        // The selection layer.
        let galpha = grads.alpha.as_ref().unwrap();
        for i in 0..inst.alpha.data.len() {
            let mut ap = inst.alpha.clone();
            ap.data[i] += h;
            let mut am = inst.alpha.clone();
            am.data[i] -= h;
            let fd = (loss_of(&inst.model, &inst.batch, &ap, &inst.block_of)
                - loss_of(&inst.model, &inst.batch, &am, &inst.block_of))
                / (2.0 * h);
            worst = worst.max(rel_err(galpha.data[i], fd));
        }
        worst
    }

    pub const ALL_ARCHS: [Architecture; 5] = [
        Architecture::Mf,
        Architecture::Fm,
        Architecture::Mlp,
        Architecture::NeuMf,
        Architecture::DeepFmLite,
    ];

    /// Runs `per_arch` random instances for every architecture; returns the
    /// instance count and the max relative error seen.
    pub fn gradient_suite(per_arch: usize) -> (usize, f64) {
        let mut count = 0;
        let mut worst = 0.0f64;
        for (ai, &arch) in ALL_ARCHS.iter().enumerate() {
            for t in 0..per_arch {
                let inst = random_instance(arch, (ai * 1000 + t) as u64);
                worst = worst.max(check_instance(&inst));
                count += 1;
            }
        }
        (count, worst)
    }

    fn flatten_theta_grads(model: &Model, grads: &dnis::lfm::GradientSet) -> Vec<f64> {
        let (n, k) = (model.n(), model.k());
        let mut out = Vec::new();
        for id in 0..n as u32 {
            match grads.embed_rows.get(&id) {
                Some(r) => out.extend_from_slice(r),
                None => out.extend(std::iter::repeat_n(0.0, k)),
            }
        }
        if let Some(linear) = model.params.linear() {
            for id in 0..linear.len() as u32 {
                out.push(grads.linear_rows.get(&id).copied().unwrap_or(0.0));
            }
        }
        for t in &grads.dense {
            out.extend_from_slice(t);
        }
        out
    }

    fn theta_backward(
        model: &Model,
        batch: &Batch,
        alpha: &Matrix,
        block_of: &[u32],
    ) -> dnis::lfm::GradientSet {
        let aref = AlphaRef { alpha, block_of };
        let fwd = forward(model, batch, Some(aref)).unwrap();
        backward(model, batch, &fwd, Some(aref)).unwrap()
    }

    /// Exact second-order hypergradient on a tiny MF instance with the mixed
    /// second-derivative matrix materialized by differencing analytic
    /// parameter gradients over the selection layer. Returns the max relative
    /// error of the production path against the oracle.
    pub fn hypergradient_oracle_err(seed: u64, xi: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, l, m) = (4usize, 2usize, 2usize, 2usize);
        let cfg_model = ModelConfig::new(Architecture::Mf, k, seed.wrapping_add(3));
        let model = Model::init(n, m, TaskKind::Rating, &cfg_model);
        let block_of: Vec<u32> = vec![0, 0, 1, 1];
        let mut alpha = SoftSelectionLayer::ones(l, k);
        for v in &mut alpha.values.data {
            *v = rng.random_range(0.2..1.0);
        }
        let mut make_batch = |rows: usize| {
            let mut ids = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..rows {
                ids.push(rng.random_range(0..2u32));
                ids.push(rng.random_range(2..4u32));
                labels.push(rng.random_range(1.0..5.0));
            }
            Batch {
                values: vec![1.0; ids.len()],
                ids,
                labels,
                field_count: m,
            }
        };
        let train_batch = make_batch(3);
        let val_batch = make_batch(3);
        let blocks = super::blocks_from_assignment(block_of.clone(), l);
        let cfg = SearchConfig {
            xi: Some(xi),
            order: HyperOrder::Second,
            ..Default::default()
        };

        // Production path.
        let produced = hypergradient(&model, &alpha, &blocks, &train_batch, &val_batch, &cfg)
            .unwrap();

        // Oracle: first term, then the materialized mixed-partial correction.
        let train_grads = theta_backward(&model, &train_batch, &alpha.values, &block_of);
        let mut lookahead = model.clone();
        dnis::lfm::sgd_step(&mut lookahead, &train_grads, xi).unwrap();
        let val_grads = theta_backward(&lookahead, &val_batch, &alpha.values, &block_of);
        let first = val_grads.alpha.clone().unwrap();
        let v = flatten_theta_grads(&lookahead, &val_grads);

        let delta = 1e-5;
        let mut oracle = first.clone();
        for a in 0..alpha.values.data.len() {
            let mut ap = alpha.values.clone();
            ap.data[a] += delta;
            let gp = flatten_theta_grads(&model, &theta_backward(&model, &train_batch, &ap, &block_of));
            let mut am = alpha.values.clone();
            am.data[a] -= delta;
            let gm = flatten_theta_grads(&model, &theta_backward(&model, &train_batch, &am, &block_of));
            let mixed_dot: f64 = gp
                .iter()
                .zip(&gm)
                .zip(&v)
                .map(|((p, q), vv)| (p - q) / (2.0 * delta) * vv)
                .sum();
            oracle.data[a] -= xi * mixed_dot;
        }

        let mut worst = 0.0f64;
        for (p, o) in produced.data.iter().zip(&oracle.data) {
            let diff = (p - o).abs();
            if diff > 1e-9 {
                worst = worst.max(diff / p.abs().max(o.abs()).max(1e-9));
            }
        }
        worst
    }

    /// Normalization identity over `rows` random rows; returns
    /// (max identity error, max scale-invariance error).
    pub fn normalization_errors(rows: usize) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut id_err = 0.0f64;
        let mut scale_err = 0.0f64;
        for _ in 0..rows {
            let cols = rng.random_range(2..=64);
            let mut g = Matrix::zeros(1, cols);
            for v in &mut g.data {
                *v = rng.random_range(-2.0..2.0);
            }
            let eps = 1e-7;
            let out = normalize_rowwise(&g, eps);
            let mean_abs = g.data.iter().map(|v| v.abs()).sum::<f64>() / cols as f64;
            let mean_norm = out.data.iter().map(|v| v.abs()).sum::<f64>() / cols as f64;
            id_err = id_err.max((mean_norm - mean_abs / (mean_abs + eps)).abs());

            // Scale invariance with a tiny eps.
            let mut scaled = g.clone();
            for v in &mut scaled.data {
                *v *= 1e6;
            }
            let a = normalize_rowwise(&g, 1e-12);
            let b = normalize_rowwise(&scaled, 1e-12);
            for (x, y) in a.data.iter().zip(&b.data) {
                scale_err = scale_err.max((x - y).abs());
            }
        }
        (id_err, scale_err)
    }
}
