//! Confusion counting and the derived segmentation scores. Road is the
//! positive class.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Strictly binary per-pixel labels, `true` = road.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return shape_err(format!("mask shape {shape:?} does not hold {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: bool) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn road_pixels(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn road_fraction(&self) -> f64 {
        self.road_pixels() as f64 / self.data.len().max(1) as f64
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(self.shape.clone(), |i| if self.data[i] { T::one() } else { T::zero() })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return shape_err(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// IoU implied by an F1 computed from the same counts.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    /// Some denominator was zero and the affected score was set to 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn scores(c: &ConfusionCounts) -> Result<Scores> {
    if c.total() == 0 {
        return Err(Error::Domain("scores of an empty confusion matrix".into()));
    }
    let mut degenerate = false;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    if precision + recall == 0.0 {
        degenerate = true;
    }
    let f1 = f1_from(precision, recall);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, &mut degenerate);
    let oa = (c.tp + c.tn) as f64 / c.total() as f64;
    Ok(Scores {
        precision,
        recall,
        f1,
        iou,
        oa,
        degenerate,
    })
}

/// Mean of per-tile scores (secondary to the micro average of summed counts).
pub fn macro_average(tiles: &[ConfusionCounts]) -> Result<Scores> {
    if tiles.is_empty() {
        return Err(Error::Domain("macro average over zero tiles".into()));
    }
    let mut acc = Scores::default();
    for t in tiles {
        let s = scores(t)?;
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
        acc.iou += s.iou;
        acc.oa += s.oa;
        acc.degenerate |= s.degenerate;
    }
    let n = tiles.len() as f64;
    acc.precision /= n;
    acc.recall /= n;
    acc.f1 /= n;
    acc.iou /= n;
    acc.oa /= n;
    Ok(acc)
}

pub const CSV_HEADER: &str = "model,precision,recall,f1,iou,oa";

pub fn csv_report(rows: &[(String, Scores)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (model, s) in rows {
        let _ = writeln!(
            out,
            "{model},{:.4},{:.4},{:.4},{:.4},{:.4}",
            s.precision, s.recall, s.f1, s.iou, s.oa
        );
    }
    out
}

pub fn table_report(rows: &[(String, Scores)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}\n",
        "model", "precision", "recall", "f1", "iou", "oa"
    );
    for (model, s) in rows {
        let _ = writeln!(
            out,
            "{model:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}{}",
            s.precision,
            s.recall,
            s.f1,
            s.iou,
            s.oa,
            if s.degenerate { "  (degenerate)" } else { "" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_all_road() {
        let m = BinaryMask::filled([10, 10], true);
        let c = confusion(&m, &m).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (100, 0, 0, 0));
        let s = scores(&c).unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.iou, s.oa), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn complement_has_no_agreement() {
        let truth = BinaryMask::new([2, 2], vec![true, false, false, true]).unwrap();
        let pred = BinaryMask::new([2, 2], vec![false, true, true, false]).unwrap();
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn one_tp_one_fp() {
        let s = scores(&ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 0 }).unwrap();
        assert_eq!((s.iou, s.precision, s.recall), (0.5, 0.5, 1.0));
    }

    #[test]
    fn empty_prediction_is_degenerate() {
        let s = scores(&ConfusionCounts { tp: 0, fp: 0, fn_: 5, tn: 5 }).unwrap();
        assert_eq!(s.recall, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn zero_total_is_domain_error() {
        assert!(matches!(scores(&ConfusionCounts::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn shape_mismatch() {
        assert!(confusion(&BinaryMask::filled([2, 2], true), &BinaryMask::filled([4], true)).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = scores(&ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 }).unwrap();
        let csv = csv_report(&[("m".into(), s)]);
        assert_eq!(csv, "model,precision,recall,f1,iou,oa\nm,0.5000,1.0000,0.6667,0.5000,0.7500\n");
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..1000, 0u64..1000, 0u64..1000, 0u64..1000)
            .prop_filter("non-empty", |(a, b, c, d)| a + b + c + d > 0)
            .prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
    }

    proptest! {
        #[test]
        fn iou_f1_identity(c in counts()) {
            let s = scores(&c).unwrap();
            prop_assert!((iou_from_f1(s.f1) - s.iou).abs() < 1e-12);
        }

        #[test]
        fn scores_bounded(c in counts()) {
            let s = scores(&c).unwrap();
            for v in [s.precision, s.recall, s.f1, s.iou, s.oa] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(s.oa == 1.0, c.fp == 0 && c.fn_ == 0);
        }

        #[test]
        fn accumulation_is_order_free(a in counts(), b in counts(), c in counts()) {
            prop_assert_eq!((a + b) + c, a + (c + b));
        }
    }
}
