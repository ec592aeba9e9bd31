//! Multi-seed experiments and the ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::{parse_pairs, Task, TrainConfig};
use super::models::{ClsModel, SegModel};
use super::pipeline::{load_masks, pipeline_predict_masks, save_masks, with_masks};
use super::report::{MeanStd, Report, RunRecord};
use super::train::{evaluate_cls, evaluate_seg, train_cls, train_seg, TrainLog};
use crate::data::{ClsSample, SegSample};
use crate::error::{Error, Result};
use crate::msfusion::parameter_count;
use crate::transunet::UNetConfig;

pub struct SegRun {
    pub model: SegModel,
    pub log: TrainLog,
    pub record: RunRecord,
}

pub struct ClsRun {
    pub model: ClsModel,
    pub log: TrainLog,
    pub record: RunRecord,
}

fn record(
    cfg: &TrainConfig,
    seed: u64,
    counts: crate::metrics::ConfusionCounts,
    log: &TrainLog,
) -> Result<RunRecord> {
    let seconds = if cfg.deterministic {
        None
    } else {
        Some(log.seconds_per_image())
    };
    RunRecord::new(seed, counts, log.best_epoch, log.curve.len(), seconds)
}

/// Trains one segmentation seed and scores it on `test`.
pub fn run_seg(
    cfg: &TrainConfig,
    seed: u64,
    unet: UNetConfig,
    train: &[SegSample],
    test: &[SegSample],
) -> Result<SegRun> {
    let (model, log) = train_seg(cfg, seed, unet, train)?;
    let counts = evaluate_seg(&model, test, cfg.threshold)?;
    let record = record(cfg, seed, counts, &log)?;
    Ok(SegRun { model, log, record })
}

/// Trains one classification seed and scores it on `test`.
pub fn run_cls(
    cfg: &TrainConfig,
    seed: u64,
    train: &[ClsSample],
    test: &[ClsSample],
) -> Result<ClsRun> {
    let (model, log) = train_cls(cfg, seed, train)?;
    let counts = evaluate_cls(&model, test)?;
    let record = record(cfg, seed, counts, &log)?;
    Ok(ClsRun { model, log, record })
}

pub fn seg_param_count(model: &SegModel) -> usize {
    model.store.count("", true)
}

pub fn cls_param_count(model: &ClsModel) -> usize {
    parameter_count(&model.store).total
}

/// Every configured seed; returns the report and the per-seed runs.
pub fn seg_experiment(
    name: &str,
    cfg: &TrainConfig,
    train: &[SegSample],
    test: &[SegSample],
) -> Result<(Report, Vec<SegRun>)> {
    let unet = UNetConfig::for_profile(cfg.profile);
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| run_seg(cfg, seed, unet.clone(), train, test))
        .collect::<Result<Vec<_>>>()?;
    let params = seg_param_count(&runs[0].model);
    let report = Report::new(
        name,
        Task::Seg,
        params,
        runs.iter().map(|r| r.record.clone()).collect(),
    )?;
    Ok((report, runs))
}

pub fn cls_experiment(
    name: &str,
    cfg: &TrainConfig,
    train: &[ClsSample],
    test: &[ClsSample],
) -> Result<(Report, Vec<ClsRun>)> {
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| run_cls(cfg, seed, train, test))
        .collect::<Result<Vec<_>>>()?;
    let params = cls_param_count(&runs[0].model);
    let report = Report::new(
        name,
        Task::Cls,
        params,
        runs.iter().map(|r| r.record.clone()).collect(),
    )?;
    Ok((report, runs))
}

/// Applies the mask source configured for `cfg` to both sets. With
/// `use_masks` off the sets are returned unchanged. Predicted masks are
/// written under `persist` when given.
pub fn prepare_cls_inputs(
    cfg: &TrainConfig,
    train: Vec<ClsSample>,
    test: Vec<ClsSample>,
    persist: Option<&Path>,
) -> Result<(Vec<ClsSample>, Vec<ClsSample>)> {
    if !cfg.use_masks {
        return Ok((train, test));
    }
    let mut out = Vec::with_capacity(2);
    if let Some(dir) = &cfg.masks_dir {
        for set in [train, test] {
            let ids: Vec<&str> = set.iter().map(|s| s.id.as_str()).collect();
            let masks = load_masks(dir, &ids)?;
            out.push(with_masks(&set, &masks)?);
        }
    } else if let Some(path) = &cfg.seg_checkpoint {
        let seg = SegModel::from_checkpoint(&Checkpoint::load(path)?)?;
        for set in [train, test] {
            let masked = pipeline_predict_masks(&seg, &set, cfg.threshold)?;
            if let Some(dir) = persist {
                let ids: Vec<&str> = set.iter().map(|s| s.id.as_str()).collect();
                save_masks(dir, &ids, &masked.masks)?;
            }
            out.push(masked.samples);
        }
    } else {
        return Err(Error::Config(
            "use_masks = true needs `masks` or `seg_checkpoint`".into(),
        ));
    }
    let test = out.pop().unwrap_or_default();
    let train = out.pop().unwrap_or_default();
    Ok((train, test))
}

/// A named configuration in an ablation grid.
#[derive(Clone, Debug)]
pub struct GridCell {
    pub name: String,
    pub config: TrainConfig,
}

/// Grid file: shared `key = value` lines, then `[name]` sections whose
/// lines override the shared ones for that cell.
pub fn parse_grid(text: &str, base_dir: &Path) -> Result<Vec<GridCell>> {
    let mut base = String::new();
    let mut sections: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        let t = line.split('#').next().unwrap_or("").trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let name = name.trim();
            if name.is_empty() || sections.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!(
                    "bad or duplicate cell name `{name}`"
                )));
            }
            sections.push((name.to_owned(), String::new()));
            continue;
        }
        let target = match sections.last_mut() {
            Some((_, body)) => body,
            None => &mut base,
        };
        target.push_str(line);
        target.push('\n');
    }
    let base_pairs = parse_pairs(&base)?;
    if sections.is_empty() {
        sections.push(("base".into(), String::new()));
    }
    sections
        .into_iter()
        .map(|(name, body)| {
            let mut pairs = base_pairs.clone();
            for (k, v) in parse_pairs(&body)? {
                match pairs.iter_mut().find(|(key, _)| *key == k) {
                    Some(slot) => slot.1 = v,
                    None => pairs.push((k, v)),
                }
            }
            let config = TrainConfig::from_pairs(&pairs, base_dir)
                .map_err(|e| Error::Config(format!("cell `{name}`: {e}")))?;
            if config.task != Task::Cls {
                return Err(Error::Config(format!(
                    "cell `{name}`: ablation cells must be task = cls"
                )));
            }
            Ok(GridCell { name, config })
        })
        .collect()
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: String,
    pub outcome: std::result::Result<AblationStats, String>,
}

#[derive(Clone, Debug)]
pub struct AblationStats {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    /// Learnable parameters of the fusion head (plus any trainable backbone).
    pub params: usize,
    pub seconds_per_image: f64,
    pub report: Report,
}

/// Runs every cell; a failing cell is recorded and the others continue.
/// `load` supplies `(train, test)` for a cell's configuration.
pub fn ablate<L>(cells: &[GridCell], mut load: L) -> Vec<AblationRow>
where
    L: FnMut(&TrainConfig) -> Result<(Vec<ClsSample>, Vec<ClsSample>)>,
{
    cells
        .iter()
        .map(|cell| {
            let outcome = (|| -> Result<AblationStats> {
                let (train, test) = load(&cell.config)?;
                let (report, runs) = cls_experiment(&cell.name, &cell.config, &train, &test)?;
                let secs: Vec<f64> = runs.iter().map(|r| r.log.seconds_per_image()).collect();
                Ok(AblationStats {
                    accuracy: report.metric("accuracy"),
                    precision: report.metric("precision"),
                    recall: report.metric("recall"),
                    f1: report.metric("f1"),
                    params: report.params,
                    seconds_per_image: MeanStd::of(&secs).mean,
                    report,
                })
            })()
            .map_err(|e| e.to_string());
            AblationRow {
                name: cell.name.clone(),
                outcome,
            }
        })
        .collect()
}

/// Table with accuracy/precision/recall/F1, parameters and time per image.
/// Timings are left out when `with_time` is false.
pub fn render_ablation(rows: &[AblationRow], with_time: bool) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{:<20}{:>14}{:>14}{:>14}{:>14}{:>12}",
        "cell", "accuracy", "precision", "recall", "f1", "params"
    );
    if with_time {
        let _ = write!(s, "{:>14}", "ms/image");
    }
    let _ = writeln!(s);
    for row in rows {
        match &row.outcome {
            Ok(st) => {
                let _ = write!(
                    s,
                    "{:<20}{:>14}{:>14}{:>14}{:>14}{:>12}",
                    row.name,
                    st.accuracy.percent(),
                    st.precision.percent(),
                    st.recall.percent(),
                    st.f1.percent(),
                    st.params
                );
                if with_time {
                    let _ = write!(s, "{:>14.3}", st.seconds_per_image * 1e3);
                }
                let _ = writeln!(s);
            }
            Err(e) => {
                let _ = writeln!(s, "{:<20}failed: {e}", row.name);
            }
        }
    }
    s
}
