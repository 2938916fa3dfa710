//! Per-class accuracy and F1 from confusion counts.

use serde::{Deserialize, Serialize};

use super::config::Arm;
use crate::Label;

/// Precision, recall and F1 from raw counts; a ratio with an empty
/// denominator is 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Gold label by predicted verdict, with unparseable outputs kept apart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub real_as_real: usize,
    pub real_as_fake: usize,
    pub real_unparseable: usize,
    pub fake_as_real: usize,
    pub fake_as_fake: usize,
    pub fake_unparseable: usize,
}

impl Confusion {
    pub fn record(&mut self, gold: Label, predicted: Option<Label>) {
        let slot = match (gold, predicted) {
            (Label::Real, Some(Label::Real)) => &mut self.real_as_real,
            (Label::Real, Some(Label::Fake)) => &mut self.real_as_fake,
            (Label::Real, None) => &mut self.real_unparseable,
            (Label::Fake, Some(Label::Real)) => &mut self.fake_as_real,
            (Label::Fake, Some(Label::Fake)) => &mut self.fake_as_fake,
            (Label::Fake, None) => &mut self.fake_unparseable,
        };
        *slot += 1;
    }

    pub fn total(&self) -> usize {
        self.real_as_real
            + self.real_as_fake
            + self.real_unparseable
            + self.fake_as_real
            + self.fake_as_fake
            + self.fake_unparseable
    }

    pub fn correct(&self) -> usize {
        self.real_as_real + self.fake_as_fake
    }

    /// `(tp, fp, fn)` with `positive` as the positive class. Unparseable
    /// outputs count as misses of their gold class.
    pub fn counts(&self, positive: Label) -> (usize, usize, usize) {
        match positive {
            Label::Fake => (self.fake_as_fake, self.real_as_fake, self.fake_as_real + self.fake_unparseable),
            Label::Real => (self.real_as_real, self.fake_as_real, self.real_as_fake + self.real_unparseable),
        }
    }

    pub fn class_metrics(&self, class: Label) -> ClassMetrics {
        let (tp, fp, fn_) = self.counts(class);
        let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_);
        ClassMetrics {
            support: tp + fn_,
            accuracy: 100.0 * recall,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: usize,
    /// Percentage of this class's images judged correctly.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: Arm,
    pub n: usize,
    /// Overall percentage correct; unparseable outputs count as wrong.
    pub accuracy: f64,
    pub real: ClassMetrics,
    pub fake: ClassMetrics,
    pub confusion: Confusion,
    /// Fraction of outputs earning the format reward.
    pub format_compliance: f64,
    /// Mean share of top-decile saliency mass inside the artifact box, over FAKE images.
    pub saliency_in_box: f64,
    /// Fraction of FAKE images with at least half that mass inside the box.
    pub localization_rate: f64,
    pub checkpoint_sha256: String,
}

impl EvalReport {
    pub fn from_parts(
        arm: Arm,
        confusion: Confusion,
        format_hits: usize,
        in_box: &[f64],
        checkpoint_sha256: String,
    ) -> Self {
        let n = confusion.total();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let hits: Vec<f64> = in_box.iter().map(|&m| f64::from(u8::from(m >= 0.5))).collect();
        Self {
            arm,
            n,
            accuracy: if n == 0 { 0.0 } else { 100.0 * confusion.correct() as f64 / n as f64 },
            real: confusion.class_metrics(Label::Real),
            fake: confusion.class_metrics(Label::Fake),
            confusion,
            format_compliance: if n == 0 { 0.0 } else { format_hits as f64 / n as f64 },
            saliency_in_box: mean(in_box),
            localization_rate: mean(&hits),
            checkpoint_sha256,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_hand_example() {
        let (p, r, f1) = precision_recall_f1(8, 1, 2);
        assert!((p - 8.0 / 9.0).abs() < 1e-12);
        assert!((r - 0.8).abs() < 1e-12);
        // 2·(8/9)·(4/5) / (8/9 + 4/5) = (64/45) / (76/45) = 16/19
        assert!((f1 - 16.0 / 19.0).abs() < 1e-12);
        assert_eq!(format!("{p:.4} {r:.4} {f1:.4}"), "0.8889 0.8000 0.8421");
        assert_eq!(precision_recall_f1(0, 0, 0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_predictions() {
        let mut c = Confusion::default();
        for _ in 0..5 {
            c.record(Label::Real, Some(Label::Real));
            c.record(Label::Fake, Some(Label::Fake));
        }
        let r = EvalReport::from_parts(Arm::FullRag, c, 10, &[], String::new());
        assert_eq!(r.accuracy, 100.0);
        assert_eq!((r.real.f1, r.fake.f1), (1.0, 1.0));
        assert_eq!((r.real.accuracy, r.fake.accuracy), (100.0, 100.0));
    }

    #[test]
    fn unparseable_counts_as_wrong() {
        let mut c = Confusion::default();
        c.record(Label::Fake, None);
        c.record(Label::Fake, Some(Label::Fake));
        c.record(Label::Real, Some(Label::Fake));
        c.record(Label::Real, Some(Label::Real));
        assert_eq!(c.total(), 4);
        assert_eq!(c.counts(Label::Fake), (1, 1, 1));
        let r = EvalReport::from_parts(Arm::NoRag, c, 3, &[0.6, 0.2], String::new());
        assert_eq!(r.accuracy, 50.0);
        assert_eq!(r.format_compliance, 0.75);
        assert!((r.saliency_in_box - 0.4).abs() < 1e-12);
        assert_eq!(r.localization_rate, 0.5);
    }
}
