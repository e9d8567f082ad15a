//! Evaluation metrics (MSE, AUC, Logloss, Recall/MRR/NDCG@k) and the
//! per-run metric report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskKind;
use crate::lfm::sigmoid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("AUC needs both classes; got {positives} positives out of {total}")]
    SingleClass { positives: usize, total: usize },
    #[error("k={k} exceeds candidate list length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("non-finite metric {name} = {value}")]
    NonFinite { name: String, value: f64 },
    #[error("compression rate {0} below 1")]
    BadCompressionRate(f64),
}

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    let sum: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Pairwise win fraction with ties counted 0.5, computed via the rank-sum
/// identity in O(n log n). Labels are 1.0 for positives, 0.0 for negatives.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n = scores.len();
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass {
            positives: pos,
            total: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks (1-based) over tie groups, summed for positives.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    Ok((rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64))
}

pub const LOGLOSS_CLAMP: f64 = 1e-7;

/// Mean negative log-likelihood of probability scores, clamped to
/// [1e-7, 1-1e-7].
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let sum: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// Recall@k, MRR@k, NDCG@k averaged over ranked lists, binary relevance with
/// a log2 rank discount. Every list must hold at least max(ks) candidates.
pub fn topk_metrics(
    ranked: &[Vec<u32>],
    truths: &[Vec<u32>],
    ks: &[usize],
) -> Result<BTreeMap<usize, TopKMetrics>, EvalError> {
    if ranked.is_empty() || ks.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if ranked.len() != truths.len() {
        return Err(EvalError::LengthMismatch(ranked.len(), truths.len()));
    }
    let max_k = *ks.iter().max().unwrap();
    for list in ranked {
        if list.len() < max_k {
            return Err(EvalError::KTooLarge {
                k: max_k,
                len: list.len(),
            });
        }
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let mut recall = 0.0;
        let mut mrr = 0.0;
        let mut ndcg = 0.0;
        for (list, truth) in ranked.iter().zip(truths) {
            if truth.is_empty() {
                continue;
            }
            let mut hits = 0usize;
            let mut dcg = 0.0;
            let mut first_hit: Option<usize> = None;
            for (pos, item) in list[..k].iter().enumerate() {
                if truth.contains(item) {
                    hits += 1;
                    dcg += 1.0 / ((pos + 2) as f64).log2();
                    first_hit.get_or_insert(pos + 1);
                }
            }
            let ideal: f64 = (0..truth.len().min(k))
                .map(|i| 1.0 / ((i + 2) as f64).log2())
                .sum();
            recall += hits as f64 / truth.len() as f64;
            mrr += first_hit.map_or(0.0, |r| 1.0 / r as f64);
            ndcg += dcg / ideal;
        }
        let users = ranked.len() as f64;
        out.insert(
            k,
            TopKMetrics {
                recall: recall / users,
                mrr: mrr / users,
                ndcg: ndcg / users,
            },
        );
    }
    Ok(out)
}

/// Task-appropriate metric map: MSE for rating prediction, AUC and Logloss
/// (from sigmoid scores) for CTR.
pub fn task_metrics(
    preds: &[f64],
    labels: &[f64],
    task: TaskKind,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut m = BTreeMap::new();
    match task {
        TaskKind::Rating => {
            m.insert("mse".to_string(), mse(preds, labels)?);
        }
        TaskKind::Ctr | TaskKind::Implicit => {
            let scores: Vec<f64> = preds.iter().map(|&z| sigmoid(z)).collect();
            m.insert("auc".to_string(), auc(&scores, labels)?);
            m.insert("logloss".to_string(), logloss(&scores, labels)?);
        }
    }
    Ok(m)
}

/// One run's results: metric map plus the storage accounting and provenance
/// needed for side-by-side comparison tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub metrics: BTreeMap<String, f64>,
    /// Kept value parameters (nnz for pruned runs, N*K otherwise).
    pub value_params: usize,
    /// On-disk COO bytes: values plus indices plus header.
    pub coo_bytes: usize,
    pub compression_rate: f64,
    pub train_seconds: f64,
    pub seed: u64,
    pub config_digest: String,
}

impl MetricReport {
    pub fn new(
        task: TaskKind,
        metrics: BTreeMap<String, f64>,
        value_params: usize,
        coo_bytes: usize,
        compression_rate: f64,
        train_seconds: f64,
        seed: u64,
        config_digest: String,
    ) -> Result<MetricReport, EvalError> {
        for (name, &value) in &metrics {
            if !value.is_finite() {
                return Err(EvalError::NonFinite {
                    name: name.clone(),
                    value,
                });
            }
        }
        if compression_rate < 1.0 {
            return Err(EvalError::BadCompressionRate(compression_rate));
        }
        Ok(MetricReport {
            task,
            metrics,
            value_params,
            coo_bytes,
            compression_rate,
            train_seconds,
            seed,
            config_digest,
        })
    }

    /// Text table row mirroring the Params / Time / metric layout.
    pub fn text_row(&self, label: &str) -> String {
        let metrics: Vec<String> = self
            .metrics
            .iter()
            .map(|(k, v)| format!("{k}={v:.6}"))
            .collect();
        format!(
            "{label:<16} params={:<10} cr={:<8.3} time={:<9.2} {}",
            self.value_params,
            self.compression_rate,
            self.train_seconds,
            metrics.join(" ")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_by_hand() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mse(&[2.0], &[5.0]).unwrap(), 9.0);
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn auc_by_hand() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        // Two pos-neg pairs, one won, one lost.
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1.0, 0.0, 1.0]).unwrap(), 0.5);
        // All ties.
        assert_eq!(auc(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    fn auc_pairwise(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            if yi <= 0.5 {
                continue;
            }
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yj > 0.5 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_rank_sum_matches_pairwise_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..60 {
            let n = rng.random_range(2..=200);
            // Coarse grid forces plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..8) as f64) / 8.0)
                .collect();
            let mut labels: Vec<f64> = (0..n)
                .map(|_| if rng.random_range(0..2) == 0 { 0.0 } else { 1.0 })
                .collect();
            labels[0] = 1.0;
            labels[n - 1] = 0.0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let scores = vec![0.9, 0.4, 0.4, 0.1, 0.7];
        let labels = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        let perm = [4, 2, 0, 3, 1];
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pl: Vec<f64> = perm.iter().map(|&i| labels[i]).collect();
        assert!((auc(&scores, &labels).unwrap() - auc(&ps, &pl).unwrap()).abs() < 1e-15);
        assert!((logloss(&scores, &labels).unwrap() - logloss(&ps, &pl).unwrap()).abs() < 1e-15);
        assert!((mse(&scores, &labels).unwrap() - mse(&ps, &pl).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn logloss_closed_forms() {
        let l = logloss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = logloss(&[1.0], &[1.0]).unwrap();
        assert!((l - -(1.0f64 - LOGLOSS_CLAMP).ln()).abs() < 1e-15);
        // Clamp bounds the per-sample loss.
        let l = logloss(&[0.0], &[1.0]).unwrap();
        assert!((l - -(LOGLOSS_CLAMP.ln())).abs() < 1e-9);
        assert!(logloss(&[], &[]).is_err());
    }

    #[test]
    fn topk_by_hand() {
        // Single relevant item at rank 2, k=5.
        let ranked = vec![vec![10, 7, 3, 4, 5]];
        let truth = vec![vec![7]];
        let m = topk_metrics(&ranked, &truth, &[5]).unwrap();
        let at5 = m[&5];
        assert_eq!(at5.mrr, 0.5);
        assert_eq!(at5.recall, 1.0);
        assert!((at5.ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);
        // Relevant item absent from the top k.
        let m = topk_metrics(&ranked, &[vec![99]], &[5]).unwrap();
        assert_eq!(m[&5], TopKMetrics { recall: 0.0, mrr: 0.0, ndcg: 0.0 });
        // k beyond the candidate list is an error.
        assert!(topk_metrics(&ranked, &truth, &[6]).is_err());
    }

    #[test]
    fn topk_monotone_in_k_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut items: Vec<u32> = (0..20).collect();
            for i in (1..items.len()).rev() {
                items.swap(i, rng.random_range(0..=i));
            }
            let truth: Vec<u32> = (0..3).map(|_| rng.random_range(0..20)).collect();
            let m = topk_metrics(&[items], &[truth], &[1, 5, 10, 20]).unwrap();
            let ks = [1usize, 5, 10, 20];
            for w in ks.windows(2) {
                assert!(m[&w[1]].recall >= m[&w[0]].recall);
                assert!(m[&w[1]].mrr >= m[&w[0]].mrr);
            }
            for &k in &ks {
                assert!((0.0..=1.0).contains(&m[&k].ndcg));
            }
        }
    }

    #[test]
    fn task_metrics_selects_by_task() {
        let m = task_metrics(&[3.0, 4.0], &[3.0, 5.0], TaskKind::Rating).unwrap();
        assert_eq!(m["mse"], 0.5);
        let m = task_metrics(&[2.0, -2.0], &[1.0, 0.0], TaskKind::Ctr).unwrap();
        assert_eq!(m["auc"], 1.0);
        assert!(m["logloss"] > 0.0);
    }

    #[test]
    fn report_validates_invariants() {
        let mut metrics = BTreeMap::new();
        metrics.insert("mse".to_string(), 0.8);
        let r = MetricReport::new(
            TaskKind::Rating,
            metrics.clone(),
            100,
            1028,
            2.0,
            1.5,
            7,
            "abc".into(),
        )
        .unwrap();
        assert!(r.text_row("dnis").contains("mse=0.8"));
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.metrics["mse"], 0.8);

        metrics.insert("bad".to_string(), f64::NAN);
        assert!(MetricReport::new(
            TaskKind::Rating,
            metrics,
            100,
            1028,
            0.5,
            1.5,
            7,
            "abc".into()
        )
        .is_err());
    }
}
