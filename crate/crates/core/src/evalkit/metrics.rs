//! Confusion matrix, per-class IoU and mIoU.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::model::{Real, StudentModel};
use crate::types::{Image, LabelMap, IGNORE_ID};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Build from row-major counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::contract("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes: n,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add one prediction/ground-truth pair; ignore-id ground truth is skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::contract(format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let n = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_ID {
                continue;
            }
            if g as usize >= n || p as usize >= n {
                return Err(Error::contract(format!("label id {} outside {n} classes", g.max(p))));
            }
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::contract("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both prediction and
    /// ground truth) and their mean over present classes.
    pub fn miou(&self) -> Result<MiouResult> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
        }
        let n = self.classes;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|c| {
                let diag = self.get(c, c);
                let row: u64 = (0..n).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..n).map(|i| self.get(i, c)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MiouResult { per_class, miou })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Confusion matrix of a model's argmax predictions over a labeled set.
pub fn evaluate<T: Real, M: StudentModel<T>>(model: &M, samples: &[(Image, LabelMap)]) -> Result<ConfusionMatrix> {
    let n = model.num_classes();
    let parts: Vec<ConfusionMatrix> = samples
        .par_iter()
        .map(|(img, gt)| {
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(&model.forward(img).argmax_labels(), gt)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(n);
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

/// Confusion matrix of fixed predictions (e.g. pseudo-labels) against ground truth.
pub fn evaluate_labels(classes: usize, pairs: &[(&LabelMap, &LabelMap)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for (pred, gt) in pairs {
        cm.accumulate(pred, gt)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn perfect_single_class() {
        let m = LabelMap::filled(4, 4, 2);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.get(2, 2), 16);
        assert_eq!(cm.total(), 16);
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![None, None, Some(1.0)]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn ignore_pixels_leave_matrix_unchanged() {
        let gt = LabelMap::filled(3, 3, IGNORE_ID);
        let pred = LabelMap::filled(3, 3, 1);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(matches!(cm.miou(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn two_pixel_enumeration() {
        let gt = LabelMap::from_vec(2, 1, vec![0, 1]).unwrap();
        let pred = LabelMap::from_vec(2, 1, vec![1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (0, 1, 0, 1));
    }

    #[test]
    fn hand_case_seven_twelfths() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![0, 1]]).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class, vec![Some(2.0 / 3.0), Some(0.5)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_prediction_is_zero() {
        let cm = ConfusionMatrix::from_rows(&[vec![0, 5], vec![3, 0]]).unwrap();
        assert_eq!(cm.miou().unwrap().miou, 0.0);
    }

    #[test]
    fn out_of_range_is_contract_error() {
        let gt = LabelMap::filled(1, 1, 3);
        let mut cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.accumulate(&gt, &gt), Err(Error::Contract(_))));
        assert!(matches!(cm.accumulate(&LabelMap::filled(1, 2, 0), &gt), Err(Error::Contract(_))));
    }

    fn random_map(rng: &mut ChaCha8Rng, n: u16, ignore_prob: f64) -> LabelMap {
        let data = (0..64)
            .map(|_| if rng.random_bool(ignore_prob) { IGNORE_ID } else { rng.random_range(0..n) })
            .collect();
        LabelMap::from_vec(8, 8, data).unwrap()
    }

    /// IoU from pixel sets, without a confusion matrix.
    fn brute_force(pairs: &[(LabelMap, LabelMap)], n: u16) -> Option<f64> {
        let mut ious = Vec::new();
        for c in 0..n {
            let (mut pred_set, mut gt_set) = (BTreeSet::new(), BTreeSet::new());
            for (k, (p, g)) in pairs.iter().enumerate() {
                for (i, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
                    if gv == IGNORE_ID {
                        continue;
                    }
                    if pv == c {
                        pred_set.insert((k, i));
                    }
                    if gv == c {
                        gt_set.insert((k, i));
                    }
                }
            }
            let union = pred_set.union(&gt_set).count();
            if union > 0 {
                ious.push(pred_set.intersection(&gt_set).count() as f64 / union as f64);
            }
        }
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    #[test]
    fn matches_set_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pair = vec![(random_map(&mut rng, 4, 0.0), random_map(&mut rng, 4, 0.1))];
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&pair[0].0, &pair[0].1).unwrap();
            let got = cm.miou().ok().map(|r| r.miou);
            assert_eq!(got, brute_force(&pair, 4));
        }
    }

    #[test]
    fn order_independent_and_ignore_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(LabelMap, LabelMap)> = (0..6).map(|_| (random_map(&mut rng, 3, 0.0), random_map(&mut rng, 3, 0.1))).collect();
        let mut forward = ConfusionMatrix::new(3);
        for (p, g) in &pairs {
            forward.accumulate(p, g).unwrap();
        }
        let mut backward = ConfusionMatrix::new(3);
        for (p, g) in pairs.iter().rev() {
            backward.accumulate(p, g).unwrap();
        }
        assert_eq!(forward, backward);
        let before = forward.miou().unwrap();
        forward
            .accumulate(&LabelMap::filled(8, 8, 1), &LabelMap::filled(8, 8, IGNORE_ID))
            .unwrap();
        assert_eq!(forward.miou().unwrap(), before);
    }
}
