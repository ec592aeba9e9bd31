//! Confusion counts and the binary / multiclass metric suites.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub r#fn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, r#fn: u64) -> Self {
        ConfusionCounts { tp, tn, fp, r#fn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.r#fn
    }

    /// The same tally with the positive class swapped.
    pub fn swapped(&self) -> Self {
        ConfusionCounts::new(self.tn, self.tp, self.r#fn, self.fp)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.r#fn += other.r#fn;
    }
}

/// Counts agreement between binary predictions and truth; 1 is positive.
pub fn tally(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "tally",
            format!("{} predictions vs {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("tally: empty input".into()));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.r#fn += 1,
            _ => {
                return Err(Error::Invalid(format!(
                    "tally: non-binary value at index {i} (pred {p}, truth {t})"
                )))
            }
        }
    }
    Ok(c)
}

/// Metrics whose denominator vanished; each such metric is reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub mcc: bool,
    pub dice: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.mcc || self.dice
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSuite {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub dice: f64,
    pub degenerate: Degenerate,
}

pub const METRIC_NAMES: [&str; 6] = ["accuracy", "precision", "recall", "f1", "mcc", "dice"];

impl MetricSuite {
    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.mcc,
            self.dice,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.values()[i])
    }
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

pub fn metric_suite(c: &ConfusionCounts) -> Result<MetricSuite> {
    if c.total() == 0 {
        return Err(Error::Invalid("metric_suite: no samples".into()));
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.r#fn as f64);
    let mut d = Degenerate::default();
    let accuracy = (tp + tn) / c.total() as f64;
    let precision = ratio(tp, tp + fp, &mut d.precision);
    let recall = ratio(tp, tp + fn_, &mut d.recall);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut d.f1);
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, mcc_den, &mut d.mcc);
    let dice = ratio(2.0 * tp, 2.0 * tp + fp + fn_, &mut d.dice);
    Ok(MetricSuite {
        accuracy,
        precision,
        recall,
        f1,
        mcc,
        dice,
        degenerate: d,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassReport {
    pub classes: usize,
    /// `matrix[truth][pred]`.
    pub matrix: Vec<Vec<u64>>,
    pub per_class: Vec<MetricSuite>,
    pub macro_avg: MetricSuite,
}

pub fn multiclass_report(
    pred: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<MulticlassReport> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "multiclass_report",
            format!("{} predictions vs {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() || classes == 0 {
        return Err(Error::Invalid("multiclass_report: empty input".into()));
    }
    let mut matrix = vec![vec![0u64; classes]; classes];
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if p >= classes || t >= classes {
            return Err(Error::Invalid(format!(
                "multiclass_report: label out of range at index {i} (pred {p}, truth {t}, k {classes})"
            )));
        }
        matrix[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    for k in 0..classes {
        let pk: Vec<u8> = pred.iter().map(|&p| u8::from(p == k)).collect();
        let tk: Vec<u8> = truth.iter().map(|&t| u8::from(t == k)).collect();
        per_class.push(metric_suite(&tally(&pk, &tk)?)?);
    }
    let mut sums = [0.0; 6];
    for s in &per_class {
        for (acc, v) in sums.iter_mut().zip(s.values()) {
            *acc += v;
        }
    }
    let m = sums.map(|v| v / classes as f64);
    let macro_avg = MetricSuite {
        accuracy: m[0],
        precision: m[1],
        recall: m[2],
        f1: m[3],
        mcc: m[4],
        dice: m[5],
        degenerate: per_class
            .iter()
            .fold(Degenerate::default(), |a, s| Degenerate {
                precision: a.precision || s.degenerate.precision,
                recall: a.recall || s.degenerate.recall,
                f1: a.f1 || s.degenerate.f1,
                mcc: a.mcc || s.degenerate.mcc,
                dice: a.dice || s.degenerate.dice,
            }),
    };
    Ok(MulticlassReport {
        classes,
        matrix,
        per_class,
        macro_avg,
    })
}

/// `key=value` lines for one suite, keys prefixed by `prefix`.
pub fn suite_lines(prefix: &str, s: &MetricSuite, out: &mut String) {
    for (name, v) in METRIC_NAMES.iter().zip(s.values()) {
        let _ = writeln!(out, "{prefix}{name}={v:.6}");
    }
    if s.degenerate.any() {
        let d = s.degenerate;
        let flags: Vec<&str> = [
            (d.precision, "precision"),
            (d.recall, "recall"),
            (d.f1, "f1"),
            (d.mcc, "mcc"),
            (d.dice, "dice"),
        ]
        .iter()
        .filter(|(f, _)| *f)
        .map(|(_, n)| *n)
        .collect();
        let _ = writeln!(out, "{prefix}degenerate={}", flags.join(","));
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn tally_examples() {
        assert_eq!(
            tally(&[1, 1, 1], &[1, 1, 1]).unwrap(),
            ConfusionCounts::new(3, 0, 0, 0)
        );
        let c = tally(&[1, 0, 0, 1], &[0, 1, 1, 0]).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(tally(&[1], &[1, 0]).is_err());
        assert!(tally(&[2], &[1]).is_err());
        assert!(tally(&[], &[]).is_err());
    }

    #[test]
    fn tally_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let truth: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let mut want = [0u64; 4];
        for i in 0..1000 {
            let slot = match (pred[i] == 1, truth[i] == 1) {
                (true, true) => 0,
                (false, false) => 1,
                (true, false) => 2,
                (false, true) => 3,
            };
            want[slot] += 1;
        }
        let c = tally(&pred, &truth).unwrap();
        assert_eq!([c.tp, c.tn, c.fp, c.r#fn], want);
    }

    #[test]
    fn suite_examples() {
        let s = metric_suite(&ConfusionCounts::new(25, 25, 25, 25)).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert_eq!(s.mcc, 0.0);
        assert!(!s.degenerate.any());
        let s = metric_suite(&ConfusionCounts::new(7, 3, 0, 0)).unwrap();
        assert_eq!(s.values(), [1.0; 6]);
        let s = metric_suite(&ConfusionCounts::new(0, 10, 0, 0)).unwrap();
        assert_eq!((s.precision, s.recall, s.dice), (0.0, 0.0, 0.0));
        assert!(s.degenerate.precision && s.degenerate.recall && s.degenerate.dice);
        assert!(metric_suite(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn precision_is_tp_over_predicted_positive() {
        let s = metric_suite(&ConfusionCounts::new(6, 90, 2, 2)).unwrap();
        assert_eq!(s.precision, 6.0 / 8.0);
    }

    #[test]
    fn multiclass_examples() {
        let labels = [0, 1, 2, 2, 1, 0];
        let r = multiclass_report(&labels, &labels, 3).unwrap();
        assert_eq!(r.matrix, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        assert_eq!(r.macro_avg.accuracy, 1.0);

        let r = multiclass_report(&[0, 2, 1, 2], &[1, 1, 1, 1], 3).unwrap();
        assert_eq!(r.matrix, vec![vec![0, 0, 0], vec![1, 1, 2], vec![0, 0, 0]]);

        assert!(multiclass_report(&[3], &[0], 3).is_err());
    }

    #[test]
    fn two_class_report_reduces_to_binary_suite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        let truth: Vec<usize> = (0..200).map(|_| rng.random_range(0..2)).collect();
        let r = multiclass_report(&pred, &truth, 2).unwrap();
        let p8: Vec<u8> = pred.iter().map(|&v| v as u8).collect();
        let t8: Vec<u8> = truth.iter().map(|&v| v as u8).collect();
        assert_eq!(
            r.per_class[1],
            metric_suite(&tally(&p8, &t8).unwrap()).unwrap()
        );
    }

    #[test]
    fn suite_lines_format() {
        let mut out = String::new();
        suite_lines(
            "x.",
            &metric_suite(&ConfusionCounts::new(0, 4, 0, 0)).unwrap(),
            &mut out,
        );
        assert!(out.starts_with("x.accuracy=1.000000\nx.precision=0.000000\n"));
        assert!(out.ends_with("x.degenerate=precision,recall,f1,mcc,dice\n"));
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500)
            .prop_filter("nonempty", |c| c.0 + c.1 + c.2 + c.3 > 0)
            .prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn dice_equals_f1(c in counts()) {
            let s = metric_suite(&c).unwrap();
            prop_assert!((s.dice - s.f1).abs() < 1e-12);
        }

        #[test]
        fn ranges(c in counts()) {
            let s = metric_suite(&c).unwrap();
            for v in [s.accuracy, s.precision, s.recall, s.f1, s.dice] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s.mcc));
            let perfect = c.fp == 0 && c.r#fn == 0 && c.tp >= 1 && c.tn >= 1;
            prop_assert_eq!(perfect, (s.mcc - 1.0).abs() < 1e-12 && !s.degenerate.mcc);
        }

        #[test]
        fn relabel_oracle(pred in prop::collection::vec(0u8..2, 1..200), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<u8> = pred.iter().map(|_| rng.random_range(0..2)).collect();
            let flip = |v: &[u8]| v.iter().map(|&x| 1 - x).collect::<Vec<u8>>();
            let direct = metric_suite(&tally(&flip(&pred), &flip(&truth)).unwrap()).unwrap();
            let c = tally(&pred, &truth).unwrap();
            // Precision of class 0 is tn / (tn + fn) of the original tally.
            let den = c.tn + c.r#fn;
            let want = if den == 0 { 0.0 } else { c.tn as f64 / den as f64 };
            prop_assert_eq!(direct.precision, want);
            prop_assert_eq!(direct, metric_suite(&c.swapped()).unwrap());
        }
    }
}
