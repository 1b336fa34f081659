//! AUC, thresholded precision/recall, fold aggregation and the paired
//! comparison test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{contract, HcvtError, Result};

/// Above this many pairs-per-side the rank-sum path is used.
pub const PAIRWISE_LIMIT: usize = 10_000;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    contract!(
        scores.len() == labels.len(),
        "{} scores but {} labels",
        scores.len(),
        labels.len()
    );
    contract!(
        scores.iter().all(|s| !s.is_nan()),
        "scores must not contain NaN"
    );
    contract!(labels.iter().all(|&y| y <= 1), "labels must be 0 or 1");
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(HcvtError::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUC by explicit pair counting. Ties count one half.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut twice_wins: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            if si > sj {
                twice_wins += 2;
            } else if si == sj {
                twice_wins += 1;
            }
        }
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Mann-Whitney AUC from average ranks.
pub fn auc_ranksum(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average (i + j + 2) / 2
        let twice_avg = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                twice_rank_sum += twice_avg;
            }
        }
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (pos * (pos + 1)) as u64;
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() <= PAIRWISE_LIMIT {
        auc_pairwise(scores, labels)
    } else {
        auc_ranksum(scores, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// A score equal to the threshold counts as a positive prediction.
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        contract!(
            scores.len() == labels.len(),
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        );
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            tn: 0,
            fn_: 0,
        };
        for (&s, &y) in scores.iter().zip(labels) {
            contract!(y <= 1, "labels must be 0 or 1");
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let pp = self.tp + self.fp;
        (pp > 0).then(|| self.tp as f64 / pp as f64)
    }

    /// `None` when there are no positives.
    pub fn recall(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }
}

pub fn precision_recall(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    let c = Confusion::at(scores, labels, threshold)?;
    if c.precision().is_none() {
        log::warn!("precision undefined: no predicted positives at threshold {threshold}");
    }
    Ok((c.precision(), c.recall()))
}

/// Two-sided paired t-test on per-fold differences. Identical inputs (and
/// any zero-variance difference with zero mean) give p = 1.
pub fn paired_pvalue(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HcvtError::Validation(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    contract!(a.len() >= 2, "paired test needs at least 2 folds");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let k = d.len() as f64;
    let mean = d.iter().sum::<f64>() / k;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var.sqrt() / k.sqrt());
    let dist = StudentsT::new(0.0, 1.0, k - 1.0).expect("dof >= 1");
    Ok((2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0))
}

/// Test statistic of [`paired_pvalue`], for reporting.
pub fn paired_t(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let k = d.len() as f64;
    let mean = d.iter().sum::<f64>() / k;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    (sd > 0.0).then(|| mean / (sd / k.sqrt()))
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() == 1 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(MeanStd { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

/// Test metrics of one fold, as fractions in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auc: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Cross-fold summary in percent. Folds with an undefined precision or
/// recall are left out of that column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auc: MeanStd,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub n_folds: usize,
}

impl std::fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |m: &Option<MeanStd>| m.map_or("undefined".to_string(), |m| m.to_string());
        write!(
            f,
            "AUC {} | Precision {} | Recall {} ({} folds)",
            self.auc,
            opt(&self.precision),
            opt(&self.recall),
            self.n_folds
        )
    }
}

pub fn aggregate(folds: &[FoldMetrics]) -> Result<MetricSummary> {
    contract!(!folds.is_empty(), "aggregate needs at least one fold");
    let pct = |xs: Vec<f64>| MeanStd::of(&xs.iter().map(|x| 100.0 * x).collect::<Vec<_>>());
    Ok(MetricSummary {
        auc: pct(folds.iter().map(|f| f.auc).collect()).unwrap(),
        precision: pct(folds.iter().filter_map(|f| f.precision).collect()),
        recall: pct(folds.iter().filter_map(|f| f.recall).collect()),
        n_folds: folds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.2, 0.5], &[1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc_ranksum(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(HcvtError::UndefinedMetric(_))
        ));
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn large_inputs_take_the_ranksum_path() {
        let n = PAIRWISE_LIMIT + 10;
        let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc_pairwise(&scores, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_examples() {
        let (p, r) = precision_recall(&[0.7, 0.4, 0.6], &[1, 1, 0], 0.5).unwrap();
        assert_eq!((p, r), (Some(0.5), Some(0.5)));
        let (p, r) = precision_recall(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((p, r), (Some(1.0), Some(1.0)));
        let c = Confusion::at(&[0.5], &[0], 0.5).unwrap();
        assert_eq!(c.fp, 1);
        let (p, _) = precision_recall(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!(p, None);
    }

    #[test]
    fn paired_test_examples() {
        // scipy.stats.ttest_1samp([.05,.04,.06,.05,.05], 0)
        let a = [0.85, 0.84, 0.86, 0.85, 0.85];
        let b = [0.80; 5];
        let p = paired_pvalue(&a, &b).unwrap();
        assert!((p - 9.349274639994442e-05).abs() < 1e-9, "{p}");
        assert!((paired_t(&a, &b).unwrap() - 15.811388300841902).abs() < 1e-6);
        assert_eq!(paired_pvalue(&a, &a).unwrap(), 1.0);
        assert_eq!(paired_pvalue(&b, &a).unwrap(), p);
        // scipy.stats.ttest_rel
        let a = [0.80, 0.78, 0.83, 0.79, 0.81];
        let b = [0.77, 0.79, 0.80, 0.74, 0.78];
        let p = paired_pvalue(&a, &b).unwrap();
        assert!((p - 0.05676723381232183).abs() < 1e-9, "{p}");
        assert!(paired_pvalue(&a, &b[..4]).is_err());
        assert!(paired_pvalue(&a[..1], &b[..1]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let folds: Vec<FoldMetrics> = [0.78, 0.79, 0.80, 0.77, 0.79]
            .iter()
            .map(|&auc| FoldMetrics {
                auc,
                precision: Some(0.5),
                recall: None,
            })
            .collect();
        let s = aggregate(&folds).unwrap();
        assert!((s.auc.mean - 78.6).abs() < 1e-9);
        assert!((s.auc.std - 1.140175425099138).abs() < 1e-9);
        assert_eq!(s.auc.to_string(), "78.6 ± 1.1");
        assert_eq!(s.recall, None);
        let one = aggregate(&folds[..1]).unwrap();
        assert_eq!(one.auc.std, 0.0);
        assert!(aggregate(&[]).is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(0u8..=1, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ranksum_matches_pairwise((s, y) in instance()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let a = auc_pairwise(&s, &y).unwrap();
            let b = auc_ranksum(&s, &y).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_and_negation((s, y) in instance()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let a = auc(&s, &y).unwrap();
            let t: Vec<f64> = s.iter().map(|x| (x * 0.7).exp() - 3.0).collect();
            prop_assert_eq!(a, auc(&t, &y).unwrap());
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((a + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn aggregate_is_permutation_invariant(mut xs in prop::collection::vec(0.0f64..1.0, 1..8)) {
            let f = |xs: &[f64]| aggregate(&xs.iter().map(|&auc| FoldMetrics {
                auc, precision: None, recall: None,
            }).collect::<Vec<_>>()).unwrap();
            let a = f(&xs);
            xs.reverse();
            let b = f(&xs);
            prop_assert!((a.auc.mean - b.auc.mean).abs() < 1e-12);
            prop_assert!(a.auc.std >= 0.0);
        }
    }
}
