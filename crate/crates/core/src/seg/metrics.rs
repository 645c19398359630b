use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::{Error, Result};

/// Pixel tallies with foreground as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetricSet {
    pub iou: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
}

pub fn confusion_counts(pred: &BinaryMask, target: &BinaryMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (target.height(), target.width()) {
        return Err(Error::shape(
            (target.height(), target.width()),
            (pred.height(), pred.width()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `num / den`, with `0/0` scored 1 when nothing is positive anywhere and 0 otherwise.
fn ratio(num: u64, den: u64, all_empty: bool) -> f64 {
    if den == 0 {
        if all_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> SegMetricSet {
    let empty = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    SegMetricSet {
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, empty),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, empty),
        accuracy: ratio(c.tp + c.tn, c.total(), empty),
        precision: ratio(c.tp, c.tp + c.fp, empty),
    }
}

/// Sum counts over all images, then score once.
pub fn micro_metrics(counts: &[ConfusionCounts]) -> Result<SegMetricSet> {
    if counts.is_empty() {
        return Err(Error::EmptyList);
    }
    let total = counts.iter().copied().fold(ConfusionCounts::default(), Add::add);
    Ok(metrics_from_counts(&total))
}

/// Score every image, then average with equal weights.
pub fn micro_imagewise_metrics(counts: &[ConfusionCounts]) -> Result<SegMetricSet> {
    if counts.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = counts.len() as f64;
    let mut acc = SegMetricSet::default();
    for c in counts {
        let m = metrics_from_counts(c);
        acc.iou += m.iou;
        acc.f1 += m.f1;
        acc.accuracy += m.accuracy;
        acc.precision += m.precision;
    }
    Ok(SegMetricSet {
        iou: acc.iou / n,
        f1: acc.f1 / n,
        accuracy: acc.accuracy / n,
        precision: acc.precision / n,
    })
}

pub const DEFAULT_DICE_EPS: f64 = 1e-6;

/// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: &[f64], target: &BinaryMask, eps: f64) -> Result<f64> {
    if pred.len() != target.data().len() {
        return Err(Error::shape(target.data().len(), pred.len()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("dice eps must be positive, got {eps}")));
    }
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&p, &t) in pred.iter().zip(target.data()) {
        let t = t as f64;
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sp + st + eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(bits: &[u8], side: usize) -> BinaryMask {
        BinaryMask::new(side, side, bits.to_vec()).unwrap()
    }

    #[test]
    fn count_examples() {
        let ones = BinaryMask::filled(4, 4, true);
        let zeros = BinaryMask::filled(4, 4, false);
        assert_eq!(confusion_counts(&ones, &ones).unwrap(), ConfusionCounts::new(16, 0, 0, 0));
        assert_eq!(confusion_counts(&ones, &zeros).unwrap(), ConfusionCounts::new(0, 16, 0, 0));
        let p = m(&[1, 0, 0, 0], 2);
        let t = m(&[1, 1, 0, 0], 2);
        assert_eq!(confusion_counts(&p, &t).unwrap(), ConfusionCounts::new(1, 0, 1, 2));
        assert!(confusion_counts(&p, &ones).is_err());
    }

    #[test]
    fn metric_examples() {
        let perfect = metrics_from_counts(&ConfusionCounts::new(10, 0, 0, 90));
        assert_eq!(perfect, SegMetricSet { iou: 1.0, f1: 1.0, accuracy: 1.0, precision: 1.0 });
        let bad = metrics_from_counts(&ConfusionCounts::new(0, 10, 10, 80));
        assert_eq!(bad, SegMetricSet { iou: 0.0, f1: 0.0, accuracy: 0.8, precision: 0.0 });
        let empty = metrics_from_counts(&ConfusionCounts::new(0, 0, 0, 100));
        assert_eq!(empty, SegMetricSet { iou: 1.0, f1: 1.0, accuracy: 1.0, precision: 1.0 });
        // missed everything: precision has a zero denominator but the image is not empty
        let missed = metrics_from_counts(&ConfusionCounts::new(0, 0, 5, 95));
        assert_eq!(missed.precision, 0.0);
        assert_eq!(missed.accuracy, 0.95);
    }

    #[test]
    fn micro_vs_imagewise() {
        let a = ConfusionCounts::new(10, 0, 0, 90);
        let b = ConfusionCounts::new(0, 10, 10, 80);
        let micro = micro_metrics(&[a, b]).unwrap();
        assert!((micro.iou - 10.0 / 30.0).abs() < 1e-15);
        assert_eq!(micro, micro_metrics(&[b, a]).unwrap());
        assert_eq!(micro_imagewise_metrics(&[a, b]).unwrap().iou, 0.5);
        assert_eq!(micro_metrics(&[a]).unwrap(), metrics_from_counts(&a));
        let (x, y) = (micro_metrics(&[b, a, b]).unwrap(), micro_metrics(&[b, b, a]).unwrap());
        assert_eq!(x, y);
        let (x, y) = (micro_metrics(&[b, b, b]).unwrap(), micro_imagewise_metrics(&[b, b, b]).unwrap());
        for (u, v) in [(x.iou, y.iou), (x.f1, y.f1), (x.accuracy, y.accuracy), (x.precision, y.precision)] {
            assert!((u - v).abs() < 1e-15);
        }
        assert!(matches!(micro_metrics(&[]), Err(Error::EmptyList)));
        assert!(matches!(micro_imagewise_metrics(&[]), Err(Error::EmptyList)));
    }

    #[test]
    fn dice_examples() {
        let t = m(&[1, 1, 0, 0], 2);
        assert!(dice_loss(&[1.0, 1.0, 0.0, 0.0], &t, 1e-6).unwrap() <= 1e-6);
        assert!((dice_loss(&[0.0; 4], &t, 1e-6).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(dice_loss(&[0.0; 4], &m(&[0; 4], 2), 1e-6).unwrap(), 0.0);
        assert!(dice_loss(&[0.0; 3], &t, 1e-6).is_err());
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn f1_iou_identity_and_bounds(c in counts()) {
            let s = metrics_from_counts(&c);
            prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
            prop_assert!(s.f1 >= s.iou);
            for v in [s.iou, s.f1, s.accuracy, s.precision] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let swapped = metrics_from_counts(&ConfusionCounts::new(c.tn, c.fn_, c.fp, c.tp));
            prop_assert_eq!(s.accuracy, swapped.accuracy);
        }

        #[test]
        fn imagewise_matches_direct_average(cs in proptest::collection::vec(counts(), 1..20)) {
            let got = micro_imagewise_metrics(&cs).unwrap();
            let mut iou = 0.0;
            let mut prec = 0.0;
            for c in &cs {
                let den = c.tp + c.fp + c.fn_;
                iou += if den == 0 { 1.0 } else { c.tp as f64 / den as f64 };
                let pd = c.tp + c.fp;
                prec += if pd == 0 { if den == 0 { 1.0 } else { 0.0 } } else { c.tp as f64 / pd as f64 };
            }
            prop_assert!((got.iou - iou / cs.len() as f64).abs() < 1e-12);
            prop_assert!((got.precision - prec / cs.len() as f64).abs() < 1e-12);
        }
    }
}
