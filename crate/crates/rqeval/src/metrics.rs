//! Rank-based agreement metrics between evaluator scores and binary
//! ground-truth labels, plus inter-annotator agreement.
//!
//! Degenerate inputs (single-class, zero variance, too few samples) raise
//! typed errors instead of silently returning 0. Callers render undefined
//! metrics as `n/a`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// One (score, label) observation. Scores must be finite; labels are 0 or 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: u8,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8) -> ScoredSample {
        ScoredSample { score, label }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    /// The metric has no defined value on this input.
    #[error("metric undefined: {0}")]
    Degenerate(String),
    #[error("invalid metric input: {0}")]
    InvalidInput(String),
}

fn check_samples(samples: &[ScoredSample]) -> Result<(), MetricError> {
    for (i, s) in samples.iter().enumerate() {
        if !s.score.is_finite() {
            return Err(MetricError::InvalidInput(format!(
                "sample {} has non-finite score {}",
                i, s.score
            )));
        }
        if s.label > 1 {
            return Err(MetricError::InvalidInput(format!(
                "sample {} has label {}, expected 0 or 1",
                i, s.label
            )));
        }
    }
    Ok(())
}

fn class_counts(samples: &[ScoredSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label == 1).count();
    (pos, samples.len() - pos)
}

/// Sorted distinct scores with per-class counts at each value.
fn score_histogram(samples: &[ScoredSample]) -> Vec<(f64, u64, u64)> {
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("finite scores"));
    let mut hist: Vec<(f64, u64, u64)> = Vec::new();
    for s in sorted {
        match hist.last_mut() {
            Some((v, pos, neg)) if *v == s.score => {
                if s.label == 1 {
                    *pos += 1;
                } else {
                    *neg += 1;
                }
            }
            _ => hist.push((
                s.score,
                (s.label == 1) as u64,
                (s.label == 0) as u64,
            )),
        }
    }
    hist
}

/// Somers' D with the label as the dependent variable:
/// `(concordant - discordant) / (concordant + discordant + score_ties)`
/// counted over all (positive, negative) cross-class pairs.
pub fn somers_d(samples: &[ScoredSample]) -> Result<f64, MetricError> {
    check_samples(samples)?;
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(MetricError::Degenerate(
            "Somers' D requires both classes present".into(),
        ));
    }
    // One ascending pass over distinct scores with cumulative class counts
    // below the current value.
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut tied = 0u64;
    let mut pos_below = 0u64;
    let mut neg_below = 0u64;
    for (_, p, n) in score_histogram(samples) {
        concordant += p * neg_below;
        discordant += n * pos_below;
        tied += p * n;
        pos_below += p;
        neg_below += n;
    }
    let total = concordant + discordant + tied;
    Ok((concordant as f64 - discordant as f64) / total as f64)
}

/// Area under the ROC curve via the mid-rank Mann-Whitney statistic.
/// Cross-class score ties contribute half a win.
pub fn aucroc(samples: &[ScoredSample]) -> Result<f64, MetricError> {
    check_samples(samples)?;
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(MetricError::Degenerate(
            "AUCROC requires both classes present".into(),
        ));
    }
    // Sum of 1-based mid-ranks over the positive class.
    let mut rank_sum = 0.0;
    let mut assigned = 0u64;
    for (_, p, n) in score_histogram(samples) {
        let block = p + n;
        let mid_rank = assigned as f64 + (block as f64 + 1.0) / 2.0;
        rank_sum += mid_rank * p as f64;
        assigned += block;
    }
    let pos_f = pos as f64;
    let u = rank_sum - pos_f * (pos_f + 1.0) / 2.0;
    Ok(u / (pos_f * neg as f64))
}

/// Area under the precision-recall curve: one descending sweep over distinct
/// score values, tie blocks processed together, rectangular right-continuous
/// steps (`sum over blocks of (recall_k - recall_{k-1}) * precision_k`).
pub fn auprc(samples: &[ScoredSample]) -> Result<f64, MetricError> {
    check_samples(samples)?;
    let (pos, _) = class_counts(samples);
    if pos == 0 {
        return Err(MetricError::Degenerate(
            "AUPRC requires at least one positive sample".into(),
        ));
    }
    let mut hist = score_histogram(samples);
    hist.reverse();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (_, p, n) in hist {
        tp += p;
        fp += n;
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / pos as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Spearman correlation with its two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
}

/// Spearman rank correlation between scores and labels. Labels enter as
/// reals, so a binary label column is heavily tied; mid-ranks handle that.
pub fn spearman_rho(samples: &[ScoredSample]) -> Result<SpearmanResult, MetricError> {
    check_samples(samples)?;
    let xs: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    spearman_from_pairs(&xs, &ys)
}

/// Spearman over arbitrary paired reals: mid-rank both sides, then Pearson.
/// Significance uses the t approximation `t = rho * sqrt((n-2)/(1-rho^2))`
/// against Student's t with n-2 degrees of freedom.
pub fn spearman_from_pairs(xs: &[f64], ys: &[f64]) -> Result<SpearmanResult, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(MetricError::Degenerate(format!(
            "Spearman requires at least 3 samples, got {}",
            n
        )));
    }
    for v in xs.iter().chain(ys.iter()) {
        if !v.is_finite() {
            return Err(MetricError::InvalidInput("non-finite value".into()));
        }
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let rho = pearson(&rx, &ry)?;

    let p_value = if rho.abs() >= 1.0 - 1e-15 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| MetricError::InvalidInput(format!("t distribution: {}", e)))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(SpearmanResult { rho, p_value })
}

/// 1-based mid-ranks, ties sharing the average of their positions.
fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(MetricError::Degenerate(
            "zero variance in ranked input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Fleiss' kappa over an item-by-category rating count matrix. Every item
/// must be rated by the same number of annotators.
pub fn fleiss_kappa(ratings: &[Vec<u64>]) -> Result<f64, MetricError> {
    if ratings.is_empty() {
        return Err(MetricError::Degenerate("no rated items".into()));
    }
    let categories = ratings[0].len();
    if categories < 2 {
        return Err(MetricError::InvalidInput(
            "need at least 2 categories".into(),
        ));
    }
    let raters: u64 = ratings[0].iter().sum();
    if raters < 2 {
        return Err(MetricError::InvalidInput(
            "need at least 2 ratings per item".into(),
        ));
    }
    for (i, row) in ratings.iter().enumerate() {
        if row.len() != categories {
            return Err(MetricError::InvalidInput(format!(
                "row {} has {} categories, expected {}",
                i,
                row.len(),
                categories
            )));
        }
        if row.iter().sum::<u64>() != raters {
            return Err(MetricError::InvalidInput(format!(
                "row {} has {} ratings, expected {}",
                i,
                row.iter().sum::<u64>(),
                raters
            )));
        }
    }
    let n_items = ratings.len() as f64;
    let n_raters = raters as f64;

    // Per-item observed agreement, then marginal chance agreement.
    let mut p_bar = 0.0;
    let mut category_totals = vec![0.0; categories];
    for row in ratings {
        let sq: u64 = row.iter().map(|&c| c * c).sum();
        p_bar += (sq as f64 - n_raters) / (n_raters * (n_raters - 1.0));
        for (j, &c) in row.iter().enumerate() {
            category_totals[j] += c as f64;
        }
    }
    p_bar /= n_items;
    let p_e: f64 = category_totals
        .iter()
        .map(|t| {
            let p = t / (n_items * n_raters);
            p * p
        })
        .sum();

    if (1.0 - p_e).abs() < 1e-12 {
        // Everyone used one category for every item: agreement is perfect
        // but chance agreement saturates the formula.
        if (p_bar - 1.0).abs() < 1e-12 {
            return Ok(1.0);
        }
        return Err(MetricError::Degenerate(
            "chance agreement is 1, kappa undefined".into(),
        ));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// All score/label metrics over one sample set. Undefined metrics are
/// `None`; renderers print them as `n/a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub n: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub somers_d: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub spearman_p: Option<f64>,
    pub aucroc: Option<f64>,
    pub auprc: Option<f64>,
}

pub fn compute_report(samples: &[ScoredSample]) -> Result<MetricReport, MetricError> {
    check_samples(samples)?;
    let (pos, neg) = class_counts(samples);
    let spearman = spearman_rho(samples).ok();
    Ok(MetricReport {
        n: samples.len(),
        n_positive: pos,
        n_negative: neg,
        somers_d: somers_d(samples).ok(),
        spearman_rho: spearman.map(|s| s.rho),
        spearman_p: spearman.map(|s| s.p_value),
        aucroc: aucroc(samples).ok(),
        auprc: auprc(samples).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(labels: &[u8], scores: &[f64]) -> Vec<ScoredSample> {
        labels
            .iter()
            .zip(scores)
            .map(|(&l, &s)| ScoredSample::new(s, l))
            .collect()
    }

    const EPS: f64 = 1e-12;

    // Four-sample fixture used across the suite.
    fn fixture_a() -> Vec<ScoredSample> {
        samples(&[1, 0, 1, 0], &[0.8, 0.7, 0.6, 0.5])
    }

    // Ten samples with cross-class score ties at 0.9, 0.6, and 0.3.
    fn fixture_b() -> Vec<ScoredSample> {
        samples(
            &[1, 0, 1, 1, 0, 0, 1, 0, 1, 0],
            &[0.9, 0.9, 0.7, 0.6, 0.6, 0.3, 0.3, 0.2, 0.8, 0.1],
        )
    }

    // Twelve tie-free samples.
    fn fixture_c() -> Vec<ScoredSample> {
        samples(
            &[0, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 1],
            &[0.05, 0.11, 0.23, 0.31, 0.38, 0.44, 0.52, 0.63, 0.71, 0.82, 0.9, 0.97],
        )
    }

    #[test]
    fn aucroc_matches_known_value() {
        assert!((aucroc(&fixture_a()).unwrap() - 0.75).abs() < EPS);
    }

    #[test]
    fn aucroc_perfect_separation_is_one() {
        let s = samples(&[0, 0, 1, 1], &[0.1, 0.2, 0.8, 0.9]);
        assert!((aucroc(&s).unwrap() - 1.0).abs() < EPS);
    }

    #[test]
    fn aucroc_all_tied_scores_is_half() {
        let s = samples(&[1, 0, 1, 0, 1], &[0.5; 5]);
        assert!((aucroc(&s).unwrap() - 0.5).abs() < EPS);
    }

    #[test]
    fn aucroc_single_class_is_undefined() {
        let s = samples(&[1, 1, 1], &[0.1, 0.2, 0.3]);
        assert!(matches!(aucroc(&s), Err(MetricError::Degenerate(_))));
    }

    #[test]
    fn somers_d_matches_known_value() {
        assert!((somers_d(&fixture_a()).unwrap() - 0.5).abs() < EPS);
    }

    #[test]
    fn somers_d_with_ties_counts_them_in_denominator() {
        // C=17, D=5, ties=3 over 25 cross-class pairs.
        assert!((somers_d(&fixture_b()).unwrap() - 0.48).abs() < EPS);
    }

    #[test]
    fn somers_d_all_tied_is_zero() {
        let s = samples(&[1, 0, 1, 0], &[0.5; 4]);
        assert!((somers_d(&s).unwrap() - 0.0).abs() < EPS);
    }

    #[test]
    fn auprc_matches_sweep_value() {
        assert!((auprc(&fixture_a()).unwrap() - 5.0 / 6.0).abs() < EPS);
    }

    #[test]
    fn auprc_single_positive_ranked_last() {
        let s = samples(&[0, 0, 0, 1], &[0.9, 0.8, 0.7, 0.1]);
        assert!((auprc(&s).unwrap() - 0.25).abs() < EPS);
    }

    #[test]
    fn auprc_needs_a_positive() {
        let s = samples(&[0, 0], &[0.1, 0.2]);
        assert!(matches!(auprc(&s), Err(MetricError::Degenerate(_))));
    }

    #[test]
    fn spearman_pairs_perfect_monotone() {
        let r = spearman_from_pairs(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert!((r.rho - 1.0).abs() < EPS);
        assert!(r.p_value < EPS);
        let r = spearman_from_pairs(&[1.0, 2.0, 3.0, 4.0], &[40.0, 30.0, 20.0, 10.0]).unwrap();
        assert!((r.rho + 1.0).abs() < EPS);
    }

    #[test]
    fn spearman_needs_three_samples() {
        let s = samples(&[0, 1], &[0.1, 0.9]);
        assert!(matches!(spearman_rho(&s), Err(MetricError::Degenerate(_))));
    }

    #[test]
    fn spearman_zero_score_variance_is_undefined() {
        let s = samples(&[0, 1, 0, 1], &[0.5; 4]);
        assert!(matches!(spearman_rho(&s), Err(MetricError::Degenerate(_))));
    }

    // Reference values below were produced with scipy.stats.spearmanr,
    // sklearn roc_auc_score / average_precision_score, and
    // statsmodels fleiss_kappa.

    #[test]
    fn fixture_a_matches_reference_implementations() {
        let r = spearman_rho(&fixture_a()).unwrap();
        assert!((r.rho - 0.447_213_595_499_957_9).abs() < 1e-9);
        assert!((r.p_value - 0.552_786_404_500_042).abs() < 1e-9);
        assert!((auprc(&fixture_a()).unwrap() - 0.833_333_333_333_333_3).abs() < 1e-9);
    }

    #[test]
    fn fixture_b_matches_reference_implementations() {
        assert!((aucroc(&fixture_b()).unwrap() - 0.74).abs() < 1e-9);
        assert!((auprc(&fixture_b()).unwrap() - 0.641_666_666_666_666_6).abs() < 1e-9);
        let r = spearman_rho(&fixture_b()).unwrap();
        assert!((r.rho - 0.421_637_021_355_783_85).abs() < 1e-9);
        assert!((r.p_value - 0.224_889_163_131_138_21).abs() < 1e-9);
    }

    #[test]
    fn fixture_c_matches_reference_implementations() {
        assert!((aucroc(&fixture_c()).unwrap() - 0.777_777_777_777_777_8).abs() < 1e-9);
        assert!((auprc(&fixture_c()).unwrap() - 0.810_714_285_714_285_6).abs() < 1e-9);
        let r = spearman_rho(&fixture_c()).unwrap();
        assert!((r.rho - 0.482_804_549_585_267_6).abs() < 1e-9);
        assert!((r.p_value - 0.111_864_750_139_851_74).abs() < 1e-9);
        // Tie-free, so the pair identity holds exactly.
        let d = somers_d(&fixture_c()).unwrap();
        assert!((d - 0.555_555_555_555_555_6).abs() < 1e-9);
    }

    #[test]
    fn spearman_continuous_pairs_with_ties_match_reference() {
        let xs = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0, 5.0, 6.0];
        let ys = [2.0, 1.0, 3.0, 5.0, 4.0, 7.0, 6.0, 8.0];
        let r = spearman_from_pairs(&xs, &ys).unwrap();
        assert!((r.rho - 0.927_778_183_470_368_9).abs() < 1e-9);
        assert!((r.p_value - 0.000_891_495_363_823_852_4).abs() < 1e-9);
    }

    #[test]
    fn fleiss_kappa_perfect_agreement() {
        let ratings = vec![vec![3, 0], vec![0, 3], vec![3, 0]];
        assert!((fleiss_kappa(&ratings).unwrap() - 1.0).abs() < EPS);
    }

    #[test]
    fn fleiss_kappa_single_category_everywhere_is_one() {
        let ratings = vec![vec![3, 0], vec![3, 0]];
        assert!((fleiss_kappa(&ratings).unwrap() - 1.0).abs() < EPS);
    }

    #[test]
    fn fleiss_kappa_matches_reference_values() {
        let mixed = vec![vec![2, 1, 0], vec![0, 3, 0], vec![1, 1, 1], vec![3, 0, 0]];
        assert!((fleiss_kappa(&mixed).unwrap() - 0.268_292_682_926_829_1).abs() < 1e-9);

        let classic = vec![
            vec![0, 0, 0, 0, 14],
            vec![0, 2, 6, 4, 2],
            vec![0, 0, 3, 5, 6],
            vec![0, 3, 9, 2, 0],
            vec![2, 2, 8, 1, 1],
            vec![7, 7, 0, 0, 0],
            vec![3, 2, 6, 3, 0],
            vec![2, 5, 3, 2, 2],
            vec![6, 5, 2, 1, 0],
            vec![0, 2, 2, 3, 7],
        ];
        assert!((fleiss_kappa(&classic).unwrap() - 0.209_930_704_421_955_22).abs() < 1e-9);
    }

    #[test]
    fn fleiss_kappa_rejects_inconsistent_rows() {
        let ratings = vec![vec![3, 0], vec![1, 1]];
        assert!(matches!(
            fleiss_kappa(&ratings),
            Err(MetricError::InvalidInput(_))
        ));
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let s = vec![ScoredSample::new(f64::NAN, 1), ScoredSample::new(0.2, 0)];
        assert!(matches!(aucroc(&s), Err(MetricError::InvalidInput(_))));
    }

    #[test]
    fn report_marks_undefined_metrics_as_none() {
        let single_class = samples(&[1, 1, 1], &[0.1, 0.5, 0.9]);
        let report = compute_report(&single_class).unwrap();
        assert!(report.somers_d.is_none());
        assert!(report.aucroc.is_none());
        assert!(report.spearman_rho.is_none());
        // AUPRC only needs a positive, and here everything is positive.
        assert!(report.auprc.is_some());
    }
}
