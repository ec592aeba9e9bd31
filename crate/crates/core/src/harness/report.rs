//! Multi-seed result records, their `key=value` serialisation and the
//! plain-text rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::config::Task;
use crate::error::{Error, Result};
use crate::metrics::{metric_suite, suite_lines, ConfusionCounts, MetricSuite, METRIC_NAMES};

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub counts: ConfusionCounts,
    pub suite: MetricSuite,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Wall-clock training seconds per image; absent in deterministic reports.
    pub seconds_per_image: Option<f64>,
}

impl RunRecord {
    pub fn new(
        seed: u64,
        counts: ConfusionCounts,
        best_epoch: usize,
        epochs_run: usize,
        seconds_per_image: Option<f64>,
    ) -> Result<Self> {
        Ok(RunRecord {
            seed,
            counts,
            suite: metric_suite(&counts)?,
            best_epoch,
            epochs_run,
            seconds_per_image,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; a single value has std 0.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd {
                mean: 0.0,
                std: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std }
    }

    /// Percent with one decimal, std in percentage points: `95.7%±0.5`.
    pub fn percent(&self) -> String {
        format!("{:.1}%±{:.1}", self.mean * 100.0, self.std * 100.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub name: String,
    pub task: Task,
    /// Learnable (trainable) parameter count of the trained model.
    pub params: usize,
    pub runs: Vec<RunRecord>,
}

impl Report {
    pub fn new(
        name: impl Into<String>,
        task: Task,
        params: usize,
        runs: Vec<RunRecord>,
    ) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Invalid(
                "report needs at least one completed run".into(),
            ));
        }
        Ok(Report {
            name: name.into(),
            task,
            params,
            runs,
        })
    }

    pub fn metric(&self, name: &str) -> MeanStd {
        let values: Vec<f64> = self.runs.iter().filter_map(|r| r.suite.get(name)).collect();
        MeanStd::of(&values)
    }

    /// Mean training seconds per image, when recorded for every run.
    pub fn seconds_per_image(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.runs.iter().map(|r| r.seconds_per_image).collect();
        v.map(|v| MeanStd::of(&v).mean)
    }

    /// Line-oriented `key=value` form with a fixed field order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report.name={}", self.name);
        let _ = writeln!(s, "report.task={}", task_name(self.task));
        let _ = writeln!(s, "report.params={}", self.params);
        let _ = writeln!(s, "report.runs={}", self.runs.len());
        for (i, r) in self.runs.iter().enumerate() {
            let p = format!("run.{}.", i + 1);
            let c = &r.counts;
            let _ = writeln!(s, "{p}seed={}", r.seed);
            let _ = writeln!(s, "{p}tp={}", c.tp);
            let _ = writeln!(s, "{p}tn={}", c.tn);
            let _ = writeln!(s, "{p}fp={}", c.fp);
            let _ = writeln!(s, "{p}fn={}", c.r#fn);
            let _ = writeln!(s, "{p}best_epoch={}", r.best_epoch);
            let _ = writeln!(s, "{p}epochs={}", r.epochs_run);
            suite_lines(&p, &r.suite, &mut s);
            if let Some(t) = r.seconds_per_image {
                let _ = writeln!(s, "{p}seconds_per_image={t:.6}");
            }
        }
        for name in METRIC_NAMES {
            let m = self.metric(name);
            let _ = writeln!(s, "summary.{name}.mean={:.6}", m.mean);
            let _ = writeln!(s, "summary.{name}.std={:.6}", m.std);
        }
        s
    }

    /// Inverse of [`Report::to_kv`]. Metrics are recomputed from the counts
    /// and checked against the stored values; summary lines are not read.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("report line {}: expected key=value", i + 1))
            })?;
            map.insert(k.to_owned(), v.to_owned());
        }
        let get = |key: &str| -> Result<&str> {
            map.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Invalid(format!("report: missing field `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Invalid(format!("report: field `{key}` is not a number")))
        };
        let int = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Invalid(format!("report: field `{key}` is not an integer")))
        };
        let task = match get("report.task")? {
            "seg" => Task::Seg,
            "cls" => Task::Cls,
            other => return Err(Error::Invalid(format!("report: unknown task `{other}`"))),
        };
        let n = int("report.runs")? as usize;
        let mut runs = Vec::with_capacity(n);
        for i in 1..=n {
            let p = |f: &str| format!("run.{i}.{f}");
            let counts = ConfusionCounts::new(
                int(&p("tp"))?,
                int(&p("tn"))?,
                int(&p("fp"))?,
                int(&p("fn"))?,
            );
            let suite = metric_suite(&counts)?;
            for name in METRIC_NAMES {
                let stored = num(&p(name))?;
                if (stored - suite.get(name).unwrap_or(f64::NAN)).abs() > 1e-6 {
                    return Err(Error::Invalid(format!(
                        "report: `{}` disagrees with the confusion counts",
                        p(name)
                    )));
                }
            }
            let seconds_per_image = match map.contains_key(&p("seconds_per_image")) {
                true => Some(num(&p("seconds_per_image"))?),
                false => None,
            };
            runs.push(RunRecord {
                seed: int(&p("seed"))?,
                counts,
                suite,
                best_epoch: int(&p("best_epoch"))? as usize,
                epochs_run: int(&p("epochs"))? as usize,
                seconds_per_image,
            });
        }
        Report::new(
            get("report.name")?,
            task,
            int("report.params")? as usize,
            runs,
        )
    }

    /// Human-readable table: per-seed rows, mean±std, confusion counts.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} ({} task, {} run{}, {} learnable parameters)",
            self.name,
            task_name(self.task),
            self.runs.len(),
            if self.runs.len() == 1 { "" } else { "s" },
            self.params
        );
        let _ = write!(s, "{:<8}", "seed");
        for name in METRIC_NAMES {
            let _ = write!(s, "{name:>12}");
        }
        let _ = writeln!(s, "{:>8}", "epoch");
        for r in &self.runs {
            let _ = write!(s, "{:<8}", r.seed);
            for v in r.suite.values() {
                let _ = write!(s, "{:>12}", format!("{:.1}%", v * 100.0));
            }
            let _ = writeln!(s, "{:>8}", format!("{}/{}", r.best_epoch, r.epochs_run));
        }
        let _ = write!(s, "{:<8}", "mean");
        for name in METRIC_NAMES {
            let _ = write!(s, "{:>12}", self.metric(name).percent());
        }
        let _ = writeln!(s);
        if let Some(t) = self.seconds_per_image() {
            let _ = writeln!(s, "training time per image: {:.2} ms", t * 1e3);
        }
        let _ = writeln!(s, "confusion (rows truth 0/1, columns predicted 0/1):");
        for r in &self.runs {
            let c = &r.counts;
            let _ = writeln!(
                s,
                "  seed {:<4} [{:>9} {:>9}] [{:>9} {:>9}]",
                r.seed, c.tn, c.fp, c.r#fn, c.tp
            );
            if r.suite.degenerate.any() {
                let mut line = String::new();
                suite_lines("", &r.suite, &mut line);
                if let Some(flags) = line.lines().find_map(|l| l.strip_prefix("degenerate=")) {
                    let _ = writeln!(s, "  seed {:<4} degenerate: {flags}", r.seed);
                }
            }
        }
        s
    }
}

pub(crate) fn task_name(task: Task) -> &'static str {
    match task {
        Task::Seg => "seg",
        Task::Cls => "cls",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> Report {
        let runs = vec![
            RunRecord::new(1, ConfusionCounts::new(90, 95, 5, 10), 12, 15, None).unwrap(),
            RunRecord::new(2, ConfusionCounts::new(92, 96, 4, 8), 9, 15, None).unwrap(),
            RunRecord::new(3, ConfusionCounts::new(0, 200, 0, 0), 3, 15, None).unwrap(),
        ];
        Report::new("demo", Task::Cls, 1234, runs).unwrap()
    }

    #[test]
    fn one_seed_has_zero_std() {
        let m = MeanStd::of(&[0.75]);
        assert_eq!((m.mean, m.std), (0.75, 0.0));
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn percent_format() {
        let m = MeanStd {
            mean: 0.9568,
            std: 0.005,
        };
        assert_eq!(m.percent(), "95.7%±0.5");
    }

    #[test]
    fn kv_round_trip() {
        let r = sample_report();
        let back = Report::from_kv(&r.to_kv()).unwrap();
        assert_eq!(back.to_kv(), r.to_kv());
        assert!(back.runs[2].suite.degenerate.precision);
    }

    #[test]
    fn missing_metric_field_is_an_error() {
        let kv = sample_report().to_kv();
        let cut: String = kv
            .lines()
            .filter(|l| !l.starts_with("run.2.f1="))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = Report::from_kv(&cut).unwrap_err();
        assert!(err.to_string().contains("run.2.f1"), "{err}");
    }

    #[test]
    fn timings_appear_only_when_recorded() {
        let mut r = sample_report();
        assert!(!r.to_kv().contains("seconds_per_image"));
        for run in &mut r.runs {
            run.seconds_per_image = Some(0.002);
        }
        assert!(r.to_kv().contains("run.1.seconds_per_image=0.002000"));
        assert!(r.render_text().contains("2.00 ms"));
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(Report::new("x", Task::Seg, 0, vec![]).is_err());
    }
}
