//! Authentication metrics: TPR, FPR, and balanced accuracy.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn add_positive(&mut self, accepted: bool) {
        if accepted {
            self.tp += 1;
        } else {
            self.fn_ += 1;
        }
    }

    pub fn add_negative(&mut self, accepted: bool) {
        if accepted {
            self.fp += 1;
        } else {
            self.tn += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// TPR, FPR, and BAC = (TPR + (1 − FPR)) / 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub tpr: f64,
    pub fpr: f64,
    pub bac: f64,
}

impl MetricSet {
    pub fn from_rates(tpr: f64, fpr: f64) -> Self {
        MetricSet {
            tpr,
            fpr,
            bac: (tpr + (1.0 - fpr)) / 2.0,
        }
    }
}

/// Compute the metric set, requiring both denominators to be positive:
/// TPR = TP/(TP+FN), FPR = FP/(FP+TN).
pub fn metrics(counts: &ConfusionCounts) -> Result<MetricSet> {
    let pos = counts.tp + counts.fn_;
    let neg = counts.fp + counts.tn;
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "TPR undefined: no positive samples".into(),
        ));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric(
            "FPR undefined: no negative samples".into(),
        ));
    }
    let tpr = counts.tp as f64 / pos as f64;
    let fpr = counts.fp as f64 / neg as f64;
    Ok(MetricSet::from_rates(tpr, fpr))
}

/// Fine-tuning trigger: true when the day's TPR falls below the threshold
/// (one successful login in more than three attempts).
pub fn finetune_trigger(day_tpr: f64, threshold: f64) -> bool {
    day_tpr < threshold
}

/// Default trigger threshold (1/3).
pub const TRIGGER_THRESHOLD: f64 = 1.0 / 3.0;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_rates_give_expected_bac() {
        // 97.2% TPR and 4.6% FPR combine to 96.3% balanced accuracy.
        let counts = ConfusionCounts::new(972, 46, 954, 28);
        let m = metrics(&counts).unwrap();
        assert!((m.tpr - 0.972).abs() < 1e-12);
        assert!((m.fpr - 0.046).abs() < 1e-12);
        assert!((m.bac - 0.963).abs() < 1e-12);
    }

    #[test]
    fn perfect_counts() {
        let m = metrics(&ConfusionCounts::new(1, 0, 1, 0)).unwrap();
        assert_eq!((m.tpr, m.fpr, m.bac), (1.0, 0.0, 1.0));
    }

    #[test]
    fn equal_rates_give_half() {
        for (tp, fn_, fp, tn) in [(3, 7, 30, 70), (5, 5, 50, 50), (9, 1, 90, 10)] {
            let m = metrics(&ConfusionCounts::new(tp, fp, tn, fn_)).unwrap();
            assert!((m.tpr - m.fpr).abs() < 1e-12);
            assert!((m.bac - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_denominators_rejected() {
        assert!(matches!(
            metrics(&ConfusionCounts::new(0, 5, 5, 0)),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            metrics(&ConfusionCounts::new(5, 0, 0, 5)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn bac_identity_on_random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let counts = ConfusionCounts::new(
                rng.gen_range(0..1000),
                rng.gen_range(0..1000),
                rng.gen_range(1..1000),
                rng.gen_range(1..1000),
            );
            let m = metrics(&counts).unwrap();
            assert!((m.bac - (m.tpr + (1.0 - m.fpr)) / 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn trigger_threshold_boundary() {
        assert!(finetune_trigger(0.169, TRIGGER_THRESHOLD));
        assert!(!finetune_trigger(0.334, TRIGGER_THRESHOLD));
        assert!(!finetune_trigger(1.0, TRIGGER_THRESHOLD));
    }
}
