//! Segmentation scoring: dice score coefficient, recall, precision, and F1,
//! per case and averaged over a split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub dsc: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<(String, CaseMetrics)>,
    pub mean_dsc: f64,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub mean_f1: f64,
}

fn ratio(num: f64, den: f64, empty_both: bool) -> f64 {
    if den == 0.0 {
        // both masks empty: perfect agreement; one-sided empty: zero
        if empty_both {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

/// Score one predicted mask against ground truth. Both tensors must hold
/// only 0.0 and 1.0.
pub fn score_case(pred: &DenseTensor, truth: &DenseTensor) -> Result<CaseMetrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if p != 0.0 && p != 1.0 || t != 0.0 && t != 1.0 {
            return Err(Error::usage("masks must be binary (0 or 1)"));
        }
        match (p != 0.0, t != 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let both_empty = tp + fp == 0 && tp + fn_ == 0;
    let dsc = ratio(2.0 * tp as f64, (2 * tp + fp + fn_) as f64, both_empty);
    let recall = ratio(tp as f64, (tp + fn_) as f64, both_empty);
    let precision = ratio(tp as f64, (tp + fp) as f64, both_empty);
    let f1 = ratio(
        2.0 * precision * recall,
        precision + recall,
        both_empty,
    );
    Ok(CaseMetrics {
        tp,
        fp,
        fn_,
        tn,
        dsc,
        recall,
        precision,
        f1,
    })
}

/// Unweighted mean of per-case metrics over a split.
pub fn score_split(cases: Vec<(String, CaseMetrics)>) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::usage("score_split on an empty split"));
    }
    let n = cases.len() as f64;
    let mean = |f: fn(&CaseMetrics) -> f64| cases.iter().map(|(_, c)| f(c)).sum::<f64>() / n;
    Ok(MetricsReport {
        mean_dsc: mean(|c| c.dsc),
        mean_recall: mean(|c| c.recall),
        mean_precision: mean(|c| c.precision),
        mean_f1: mean(|c| c.f1),
        cases,
    })
}

impl MetricsReport {
    /// Aligned plain-text rendering, one record per case plus the summary.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>10} {:>8}\n",
            "case", "DSC", "Recall", "Precision", "F1"
        ));
        for (id, c) in &self.cases {
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>8.4} {:>10.4} {:>8.4}\n",
                id, c.dsc, c.recall, c.precision, c.f1
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>8.4} {:>8.4} {:>10.4} {:>8.4}\n",
            "mean", self.mean_dsc, self.mean_recall, self.mean_precision, self.mean_f1
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mask_from(bits: &[f64], shape: &[usize]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), bits.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let t = mask_from(&[1.0, 0.0, 1.0, 0.0], &[2, 2]);
        let m = score_case(&t, &t).unwrap();
        assert_eq!(m.dsc, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn complement_prediction_scores_zero_dsc() {
        let t = mask_from(&[1.0, 1.0, 0.0, 0.0], &[4]);
        let p = mask_from(&[0.0, 0.0, 1.0, 1.0], &[4]);
        let m = score_case(&p, &t).unwrap();
        assert_eq!(m.dsc, 0.0);
    }

    #[test]
    fn hand_counted_example() {
        // truth has 10 lesion pixels; pred covers 6 of them plus 2 FPs
        let mut truth = vec![0.0; 30];
        let mut pred = vec![0.0; 30];
        for i in 0..10 {
            truth[i] = 1.0;
        }
        for i in 0..6 {
            pred[i] = 1.0;
        }
        pred[20] = 1.0;
        pred[21] = 1.0;
        let m = score_case(&mask_from(&pred, &[30]), &mask_from(&truth, &[30])).unwrap();
        assert!((m.dsc - 12.0 / 18.0).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_denominator_conventions() {
        let empty = mask_from(&[0.0; 4], &[4]);
        let some = mask_from(&[1.0, 0.0, 0.0, 0.0], &[4]);
        let m = score_case(&empty, &empty).unwrap();
        assert_eq!((m.dsc, m.recall, m.precision, m.f1), (1.0, 1.0, 1.0, 1.0));
        let m = score_case(&empty, &some).unwrap();
        assert_eq!((m.dsc, m.recall, m.precision, m.f1), (0.0, 0.0, 0.0, 0.0));
        let m = score_case(&some, &empty).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.dsc, 0.0);
    }

    #[test]
    fn swapping_masks_swaps_recall_and_precision() {
        let mut rng = crate::rng::rng_from(0);
        let a = DenseTensor::from_fn(&[7, 7], |_| f64::from(rng.gen_bool(0.4)));
        let b = DenseTensor::from_fn(&[7, 7], |_| f64::from(rng.gen_bool(0.4)));
        let m1 = score_case(&a, &b).unwrap();
        let m2 = score_case(&b, &a).unwrap();
        assert_eq!(m1.recall, m2.precision);
        assert_eq!(m1.precision, m2.recall);
        assert_eq!(m1.dsc, m2.dsc);
    }

    #[test]
    fn dsc_invariant_under_shared_pixel_permutation() {
        let mut rng = crate::rng::rng_from(1);
        let a: Vec<f64> = (0..20).map(|_| f64::from(rng.gen_bool(0.3))).collect();
        let b: Vec<f64> = (0..20).map(|_| f64::from(rng.gen_bool(0.3))).collect();
        let m1 = score_case(&mask_from(&a, &[20]), &mask_from(&b, &[20])).unwrap();
        let mut idx: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let ap: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
        let bp: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
        let m2 = score_case(&mask_from(&ap, &[20]), &mask_from(&bp, &[20])).unwrap();
        assert_eq!(m1.dsc, m2.dsc);
    }

    #[test]
    fn split_average_and_empty_split() {
        let t = mask_from(&[1.0, 0.0], &[2]);
        let c1 = score_case(&t, &t).unwrap();
        let p = mask_from(&[0.0, 0.0], &[2]);
        let c2 = score_case(&p, &t).unwrap();
        let rep = score_split(vec![("a".into(), c1), ("b".into(), c2)]).unwrap();
        assert!((rep.mean_dsc - 0.5).abs() < 1e-12);
        assert!(matches!(score_split(vec![]), Err(Error::Usage(_))));
    }

    #[test]
    fn split_mean_matches_independent_recount() {
        let mut rng = crate::rng::rng_from(2);
        let mut cases = Vec::new();
        let mut dsum = 0.0;
        for i in 0..5 {
            let a = DenseTensor::from_fn(&[6, 6], |_| f64::from(rng.gen_bool(0.4)));
            let b = DenseTensor::from_fn(&[6, 6], |_| f64::from(rng.gen_bool(0.4)));
            let m = score_case(&a, &b).unwrap();
            dsum += m.dsc;
            cases.push((format!("c{i}"), m));
        }
        let rep = score_split(cases).unwrap();
        assert!((rep.mean_dsc - dsum / 5.0).abs() < 1e-12);
    }
}
