//! Ranking metrics (AP, cmAP, AUROC, Top-1) and robustness scores
//! (PRS, DRS, TARS) for multi-label evaluation.
//!
//! AP uses the rank-based rule with a stable original-order tie-break.
//! AUROC counts concordant positive/negative pairs per class and macro
//! averages; ties earn half credit by default (the Mann-Whitney convention),
//! with a strict mode that awards them nothing. Classes without positives
//! (or, for AUROC, without negatives) are excluded from the mean and
//! reported.

use thiserror::Error;

use crate::attacks::{self, AttackError, TargetEmbedding};
use crate::models::EmbeddingMap;

/// Guard added to denominators of the exponential robustness ratios.
pub const RATIO_GUARD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("labels and scores have different shapes")]
    ShapeMismatch,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("labels must be 0 or 1, found {value}")]
    NonBinaryLabel { value: f64 },
    #[error("score {value} outside [0, 1]")]
    ScoreOutOfRange { value: f64 },
    #[error("class {class} has no positive instances")]
    NoPositives { class: usize },
    #[error("no class retains both positives and negatives")]
    NothingRetained,
    #[error(transparent)]
    Attack(#[from] AttackError),
}

/// N x K labels in {0, 1} and scores in [0, 1].
#[derive(Debug, Clone)]
pub struct EvaluationBatch {
    labels: Vec<Vec<f64>>,
    scores: Vec<Vec<f64>>,
}

impl EvaluationBatch {
    pub fn new(labels: Vec<Vec<f64>>, scores: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        if labels.is_empty() || labels[0].is_empty() {
            return Err(MetricError::EmptyBatch);
        }
        if labels.len() != scores.len() {
            return Err(MetricError::ShapeMismatch);
        }
        let k = labels[0].len();
        for (row_l, row_s) in labels.iter().zip(&scores) {
            if row_l.len() != k || row_s.len() != k {
                return Err(MetricError::ShapeMismatch);
            }
            for &v in row_l {
                if v != 0.0 && v != 1.0 {
                    return Err(MetricError::NonBinaryLabel { value: v });
                }
            }
            for &v in row_s {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricError::ScoreOutOfRange { value: v });
                }
            }
        }
        Ok(Self { labels, scores })
    }

    pub fn num_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels[0].len()
    }

    pub fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    fn column(&self, class: usize) -> (Vec<f64>, Vec<f64>) {
        let scores = self.scores.iter().map(|r| r[class]).collect();
        let labels = self.labels.iter().map(|r| r[class]).collect();
        (scores, labels)
    }

    /// Same labels, different scores (clean vs adversarial evaluation).
    pub fn with_scores(&self, scores: Vec<Vec<f64>>) -> Result<Self, MetricError> {
        Self::new(self.labels.clone(), scores)
    }
}

/// Average precision by the rank-based rule: sort descending by score
/// (stable, original order breaks ties), then average precision at each
/// positive rank.
pub fn average_precision(scores_k: &[f64], labels_k: &[f64]) -> Result<f64, MetricError> {
    if scores_k.len() != labels_k.len() {
        return Err(MetricError::ShapeMismatch);
    }
    if scores_k.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    let positives = labels_k.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 {
        return Err(MetricError::NoPositives { class: 0 });
    }
    let mut order: Vec<usize> = (0..scores_k.len()).collect();
    order.sort_by(|&a, &b| scores_k[b].partial_cmp(&scores_k[a]).expect("finite scores"));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels_k[idx] == 1.0 {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Per-class AP detail for cmAP.
#[derive(Debug, Clone)]
pub struct CmapOutcome {
    pub value: f64,
    /// AP per class; `None` for classes excluded for lacking positives.
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// Unweighted mean of per-class AP. Classes with no positives are excluded
/// from the mean and reported.
pub fn cmap_detailed(batch: &EvaluationBatch) -> Result<CmapOutcome, MetricError> {
    let k = batch.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    let mut total = 0.0;
    let mut retained = 0usize;
    for class in 0..k {
        let (scores, labels) = batch.column(class);
        if !labels.contains(&1.0) {
            per_class.push(None);
            skipped.push(class);
            continue;
        }
        let ap = average_precision(&scores, &labels)?;
        per_class.push(Some(ap));
        total += ap;
        retained += 1;
    }
    if retained == 0 {
        return Err(MetricError::NothingRetained);
    }
    Ok(CmapOutcome {
        value: total / retained as f64,
        per_class,
        skipped_classes: skipped,
    })
}

pub fn cmap(batch: &EvaluationBatch) -> Result<f64, MetricError> {
    Ok(cmap_detailed(batch)?.value)
}

/// Tie handling for AUROC pair counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieMode {
    /// Mann-Whitney convention: ties count half.
    #[default]
    HalfCredit,
    /// Strict indicator: ties count zero.
    Strict,
}

/// Macro-averaged probability that a positive outranks a negative, via the
/// rank-sum statistic. Classes lacking positives or negatives are excluded.
pub fn auroc_with(batch: &EvaluationBatch, ties: TieMode) -> Result<f64, MetricError> {
    let k = batch.num_classes();
    let mut total = 0.0;
    let mut retained = 0usize;
    for class in 0..k {
        let (scores, labels) = batch.column(class);
        let pos = labels.iter().filter(|&&l| l == 1.0).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        total += auroc_one_class(&scores, &labels, ties);
        retained += 1;
    }
    if retained == 0 {
        return Err(MetricError::NothingRetained);
    }
    Ok(total / retained as f64)
}

pub fn auroc(batch: &EvaluationBatch) -> Result<f64, MetricError> {
    auroc_with(batch, TieMode::default())
}

/// Rank-sum AUROC for one class. Sorting ascending, the rank sum of the
/// positives relates to the count of concordant pairs; tied groups share
/// their average rank, which is exactly half credit per tied pair. Strict
/// mode subtracts the tied-pair credit instead.
fn auroc_one_class(scores: &[f64], labels: &[f64], ties: TieMode) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let pos = labels.iter().filter(|&&l| l == 1.0).count();
    let neg = n - pos;
    let mut rank_sum = 0.0;
    let mut tie_pair_credit = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average rank for the tied block [i, j] (1-based ranks).
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        let mut block_pos = 0usize;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum += avg_rank;
                block_pos += 1;
            }
        }
        let block_neg = (j - i + 1) - block_pos;
        tie_pair_credit += 0.5 * block_pos as f64 * block_neg as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    let base = u / (pos * neg) as f64;
    match ties {
        TieMode::HalfCredit => base,
        TieMode::Strict => base - tie_pair_credit / (pos * neg) as f64,
    }
}

/// Fraction of instances whose top-scoring class is among the true labels.
/// All-zero label rows count as misses; argmax ties break to the lowest
/// class index.
pub fn top1_accuracy(batch: &EvaluationBatch) -> f64 {
    let mut hits = 0usize;
    for (labels, scores) in batch.labels.iter().zip(&batch.scores) {
        let mut best = 0usize;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        if labels[best] == 1.0 {
            hits += 1;
        }
    }
    hits as f64 / batch.num_instances() as f64
}

/// Performance robustness score from the two cmAP values:
/// `min(exp(1 - clean / (adv + guard)), 1)`.
pub fn prs_from_cmaps(cmap_clean: f64, cmap_adv: f64) -> f64 {
    (1.0 - cmap_clean / (cmap_adv + RATIO_GUARD)).exp().min(1.0)
}

/// PRS from clean and adversarial score matrices sharing one label matrix.
pub fn prs(
    clean_scores: &[Vec<f64>],
    adv_scores: &[Vec<f64>],
    labels: &[Vec<f64>],
) -> Result<f64, MetricError> {
    let clean = EvaluationBatch::new(labels.to_vec(), clean_scores.to_vec())?;
    let adv = EvaluationBatch::new(labels.to_vec(), adv_scores.to_vec())?;
    Ok(prs_from_cmaps(cmap(&clean)?, cmap(&adv)?))
}

/// Deformation robustness score:
/// `min(exp(1 - d_min(z, target) / (d_min(z_adv, target) + guard)), 1)`.
pub fn drs(
    z: &EmbeddingMap,
    z_adv: &EmbeddingMap,
    target: &TargetEmbedding,
) -> Result<f64, MetricError> {
    let clean = attacks::d_min(z, target)?;
    let adv = attacks::d_min(z_adv, target)?;
    Ok(drs_from_dmins(clean, adv))
}

pub fn drs_from_dmins(dmin_clean: f64, dmin_adv: f64) -> f64 {
    (1.0 - dmin_clean / (dmin_adv + RATIO_GUARD)).exp().min(1.0)
}

/// Beta-weighted harmonic combination of PRS and DRS; 0 when both are 0.
pub fn tars(prs_value: f64, drs_value: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    if prs_value == 0.0 && drs_value == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    (1.0 + b2) * prs_value * drs_value / (b2 * prs_value + drs_value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(labels: Vec<Vec<f64>>, scores: Vec<Vec<f64>>) -> EvaluationBatch {
        EvaluationBatch::new(labels, scores).unwrap()
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        let ap = average_precision(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_single_positive_at_rank_two() {
        let ap = average_precision(&[0.2, 0.9], &[1.0, 0.0]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn ap_hand_value_three_instances() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1.0, 0.0, 1.0]).unwrap();
        let expected = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((ap - expected).abs() < 1e-15);
    }

    #[test]
    fn ap_requires_a_positive() {
        assert!(matches!(
            average_precision(&[0.5, 0.4], &[0.0, 0.0]),
            Err(MetricError::NoPositives { .. })
        ));
    }

    #[test]
    fn ap_ties_break_by_original_order() {
        // Tied scores: the positive listed first keeps the earlier rank.
        let ap_first = average_precision(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        let ap_second = average_precision(&[0.5, 0.5], &[0.0, 1.0]).unwrap();
        assert_eq!(ap_first, 1.0);
        assert_eq!(ap_second, 0.5);
    }

    #[test]
    fn cmap_means_per_class_ap() {
        // Two classes ranked perfectly -> 1.0.
        let b = batch(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        );
        assert_eq!(cmap(&b).unwrap(), 1.0);
    }

    #[test]
    fn cmap_mixed_hand_value() {
        // Class APs 1.0 and 0.5 -> 0.75.
        let b = batch(
            vec![vec![1.0, 1.0], vec![0.0, 0.0]],
            vec![vec![0.9, 0.2], vec![0.2, 0.9]],
        );
        assert!((cmap(&b).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cmap_skips_zero_positive_classes() {
        let b = batch(
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            vec![vec![0.9, 0.5], vec![0.1, 0.6]],
        );
        let outcome = cmap_detailed(&b).unwrap();
        assert_eq!(outcome.skipped_classes, vec![1]);
        assert_eq!(outcome.value, 1.0);
    }

    #[test]
    fn cmap_errors_when_nothing_retained() {
        let b = batch(vec![vec![0.0], vec![0.0]], vec![vec![0.5], vec![0.4]]);
        assert!(matches!(cmap(&b), Err(MetricError::NothingRetained)));
    }

    #[test]
    fn auroc_perfect_separation() {
        let b = batch(
            vec![vec![1.0], vec![1.0], vec![0.0], vec![0.0]],
            vec![vec![0.9], vec![0.8], vec![0.3], vec![0.1]],
        );
        assert_eq!(auroc(&b).unwrap(), 1.0);
    }

    #[test]
    fn auroc_constant_scores_half() {
        let b = batch(
            vec![vec![1.0], vec![0.0], vec![1.0], vec![0.0]],
            vec![vec![0.5], vec![0.5], vec![0.5], vec![0.5]],
        );
        assert_eq!(auroc(&b).unwrap(), 0.5);
        assert_eq!(auroc_with(&b, TieMode::Strict).unwrap(), 0.0);
    }

    #[test]
    fn auroc_hand_pair_count() {
        // Pairs: (0.9 > 0.8) yes, (0.9 > 0.1) yes, (0.3 < 0.8) no,
        // (0.3 > 0.1) yes -> 3/4.
        let b = batch(
            vec![vec![1.0], vec![0.0], vec![1.0], vec![0.0]],
            vec![vec![0.9], vec![0.8], vec![0.3], vec![0.1]],
        );
        assert!((auroc(&b).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn top1_hand_cases() {
        let b = batch(
            vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.9, 0.2], vec![0.8, 0.3], vec![0.9, 0.1]],
        );
        // Instance 0 hits, instance 1 has no labels (miss), instance 2's
        // argmax is class 0 which is not labeled (miss).
        assert!((top1_accuracy(&b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn top1_argmax_tie_breaks_low_index() {
        let b = batch(vec![vec![0.0, 1.0]], vec![vec![0.5, 0.5]]);
        assert_eq!(top1_accuracy(&b), 0.0);
    }

    #[test]
    fn prs_closed_forms() {
        assert!((prs_from_cmaps(0.5, 0.5) - 1.0).abs() < 1e-12);
        let e_inv = (-1.0_f64).exp();
        assert!((prs_from_cmaps(0.5, 0.25) - e_inv).abs() < 1e-9);
        assert!(prs_from_cmaps(0.5, 0.0) < 1e-12);
    }

    #[test]
    fn prs_monotone_in_adv_cmap() {
        let mut last = -1.0;
        for i in 0..=100 {
            let adv = i as f64 / 100.0;
            let v = prs_from_cmaps(0.6, adv);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn drs_closed_forms() {
        assert!((drs_from_dmins(0.8, 0.8) - 1.0).abs() < 1e-12);
        let e_inv = (-1.0_f64).exp();
        assert!((drs_from_dmins(0.8, 0.4) - e_inv).abs() < 1e-9);
        assert!(drs_from_dmins(0.8, 0.0) < 1e-12);
    }

    #[test]
    fn tars_closed_forms() {
        assert!((tars(0.5, 0.5, 1.0) - 0.5).abs() < 1e-15);
        assert!((tars(0.4, 0.8, 1.0) - 8.0 / 15.0).abs() < 1e-9);
        assert_eq!(tars(0.0, 0.7, 1.0), 0.0);
        assert_eq!(tars(0.7, 0.0, 1.0), 0.0);
        assert_eq!(tars(0.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn tars_beta_one_between_min_and_max() {
        let mut rng = crate::rng::Rng::new(14);
        for _ in 0..10_000 {
            let p = rng.uniform(1e-6, 1.0);
            let d = rng.uniform(1e-6, 1.0);
            let t = tars(p, d, 1.0);
            assert!(t >= p.min(d) - 1e-12 && t <= p.max(d) + 1e-12);
        }
    }

    #[test]
    fn order_invariance_under_monotone_transform() {
        let mut rng = crate::rng::Rng::new(25);
        for _ in 0..50 {
            let n = 4 + rng.below(12);
            let k = 1 + rng.below(4);
            let labels: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..k)
                        .map(|c| {
                            // Guarantee some positives per class.
                            if i % k == c || rng.next_f64() < 0.3 {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let scores: Vec<Vec<f64>> =
                (0..n).map(|_| (0..k).map(|_| rng.next_f64()).collect()).collect();
            let cubed: Vec<Vec<f64>> = scores
                .iter()
                .map(|r| r.iter().map(|&v| v * v * v).collect())
                .collect();
            let b1 = batch(labels.clone(), scores);
            let b2 = batch(labels, cubed);
            if let (Ok(c1), Ok(c2)) = (cmap(&b1), cmap(&b2)) {
                assert!((c1 - c2).abs() < 1e-12);
            }
            if let (Ok(a1), Ok(a2)) = (auroc(&b1), auroc(&b2)) {
                assert!((a1 - a2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_invariance_tie_free() {
        let mut rng = crate::rng::Rng::new(31);
        let n = 10;
        let k = 3;
        let labels: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..k).map(|c| f64::from(i % k == c)).collect())
            .collect();
        // Tie-free scores via distinct values.
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..k)
                    .map(|c| ((i * k + c) as f64 + rng.next_f64() * 0.5) / (n * k) as f64)
                    .collect()
            })
            .collect();
        let b1 = batch(labels.clone(), scores.clone());
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let labels2: Vec<Vec<f64>> = order.iter().map(|&i| labels[i].clone()).collect();
        let scores2: Vec<Vec<f64>> = order.iter().map(|&i| scores[i].clone()).collect();
        let b2 = batch(labels2, scores2);
        assert!((cmap(&b1).unwrap() - cmap(&b2).unwrap()).abs() < 1e-12);
        assert!((auroc(&b1).unwrap() - auroc(&b2).unwrap()).abs() < 1e-12);
        assert!((top1_accuracy(&b1) - top1_accuracy(&b2)).abs() < 1e-12);
    }
}
