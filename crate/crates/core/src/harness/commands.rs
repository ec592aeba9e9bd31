//! Implementations behind the `msx` subcommands. Each returns the text
//! printed on stdout.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{write_atomic, Checkpoint};
use super::config::{Task, TrainConfig};
use super::experiment::{
    ablate, cls_experiment, parse_grid, prepare_cls_inputs, render_ablation, seg_experiment,
};
use super::models::{ClsModel, SegModel};
use super::pipeline::save_masks;
use super::report::Report;
use super::train::{evaluate_cls, TrainLog};
use crate::backbone::{BackboneConfig, Profile};
use crate::data::{
    load_manifest, sniff_kind, synth_generate, write_dataset, ClsSample, Image, ManifestKind,
    SegSample, SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{metric_suite, suite_lines};

pub const REPORT_KV: &str = "report.kv";
pub const REPORT_TEXT: &str = "report.txt";

pub fn profile_side(profile: Profile) -> usize {
    BackboneConfig::for_profile(profile).input_side
}

/// `msx synth`: writes images, masks and the four manifests under `out`.
pub fn synth(n: usize, profile: Profile, seed: u64, out: &Path) -> Result<String> {
    let samples = synth_generate(&SynthConfig::new(n, profile_side(profile), seed))?;
    write_dataset(out, &samples)?;
    let positives = samples.iter().filter(|s| s.label == 1).count();
    Ok(format!(
        "wrote {n} samples ({positives} positive) to {}\n",
        out.display()
    ))
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
}

fn load_seg_set(path: &Path, side: usize) -> Result<Vec<SegSample>> {
    load_manifest(path, ManifestKind::Seg, Some(side))?.into_seg()
}

fn load_cls_set(path: &Path, side: usize) -> Result<Vec<ClsSample>> {
    load_manifest(path, ManifestKind::Cls, Some(side))?.into_cls()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn curve_csv(logs: &[(u64, &TrainLog)]) -> String {
    let mut s = String::from("seed,epoch,train_loss,val_loss,val_score\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for (seed, log) in logs {
        for e in &log.curve {
            let _ = writeln!(
                s,
                "{seed},{},{:.6},{},{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_score)
            );
        }
    }
    s
}

fn write_run_outputs(
    out: &Path,
    report: &Report,
    checkpoints: &[(u64, Checkpoint)],
    logs: &[(u64, &TrainLog)],
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (seed, ckpt) in checkpoints {
        ckpt.save(&out.join(format!("seed{seed}.ckpt")))?;
    }
    if let Some((_, first)) = checkpoints.first() {
        first.save(&out.join("model.ckpt"))?;
    }
    write_text(&out.join(REPORT_KV), &report.to_kv())?;
    write_text(&out.join(REPORT_TEXT), &report.render_text())?;
    write_text(&out.join("curves.csv"), &curve_csv(logs))
}

fn expect_task(cfg: &TrainConfig, task: Task) -> Result<()> {
    if cfg.task != task {
        return Err(Error::Config(format!(
            "config has task = {}, this command needs {}",
            super::report::task_name(cfg.task),
            super::report::task_name(task)
        )));
    }
    Ok(())
}

/// `msx seg-train`.
pub fn seg_train(config: &Path) -> Result<String> {
    let cfg = TrainConfig::load(config)?;
    expect_task(&cfg, Task::Seg)?;
    let out = require(&cfg.out, "out")?;
    let side = profile_side(cfg.profile);
    let train = load_seg_set(&require(&cfg.train_manifest, "train_manifest")?, side)?;
    let test = load_seg_set(&require(&cfg.test_manifest, "test_manifest")?, side)?;
    let (report, runs) = seg_experiment("segmentation", &cfg, &train, &test)?;
    let ckpts: Vec<(u64, Checkpoint)> = runs
        .iter()
        .map(|r| (r.record.seed, r.model.to_checkpoint()))
        .collect();
    let logs: Vec<(u64, &TrainLog)> = runs.iter().map(|r| (r.record.seed, &r.log)).collect();
    write_run_outputs(&out, &report, &ckpts, &logs)?;
    Ok(report.render_text())
}

/// `msx seg-predict`: one `{id}_mask.pgm` per manifest row plus `masks.csv`.
pub fn seg_predict(ckpt: &Path, manifest: &Path, out: &Path, threshold: f64) -> Result<String> {
    let model = SegModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let side = model.side();
    let (ids, images): (Vec<String>, Vec<Image>) = match sniff_kind(manifest)? {
        ManifestKind::Seg => load_seg_set(manifest, side)?
            .into_iter()
            .map(|s| (s.id, s.image))
            .unzip(),
        ManifestKind::Cls => load_cls_set(manifest, side)?
            .into_iter()
            .map(|s| (s.id, s.image))
            .unzip(),
    };
    let refs: Vec<&Image> = images.iter().collect();
    let masks = model.predict_masks(&refs, threshold)?;
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    save_masks(out, &id_refs, &masks)?;
    Ok(format!(
        "wrote {} masks to {}\n",
        masks.len(),
        out.display()
    ))
}

/// `msx cls-train`; `masks` overrides the config's `masks` key.
pub fn cls_train(config: &Path, masks: Option<&Path>) -> Result<String> {
    let mut cfg = TrainConfig::load(config)?;
    expect_task(&cfg, Task::Cls)?;
    if let Some(dir) = masks {
        cfg.masks_dir = Some(dir.to_path_buf());
        cfg.use_masks = true;
    }
    let out = require(&cfg.out, "out")?;
    let side = profile_side(cfg.profile);
    let train = load_cls_set(&require(&cfg.train_manifest, "train_manifest")?, side)?;
    let test = load_cls_set(&require(&cfg.test_manifest, "test_manifest")?, side)?;
    let (train, test) = prepare_cls_inputs(&cfg, train, test, Some(&out.join("masks")))?;
    let (report, runs) = cls_experiment("classification", &cfg, &train, &test)?;
    let ckpts: Vec<(u64, Checkpoint)> = runs
        .iter()
        .map(|r| (r.record.seed, r.model.to_checkpoint()))
        .collect();
    let logs: Vec<(u64, &TrainLog)> = runs.iter().map(|r| (r.record.seed, &r.log)).collect();
    write_run_outputs(&out, &report, &ckpts, &logs)?;
    Ok(report.render_text())
}

/// `msx cls-eval`: metric suite of a classifier checkpoint on a manifest.
/// Images are masked first when `masks` is given.
pub fn cls_eval(ckpt: &Path, manifest: &Path, masks: Option<&Path>) -> Result<String> {
    let model = ClsModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let mut set = load_cls_set(manifest, model.side())?;
    if let Some(dir) = masks {
        let ids: Vec<&str> = set.iter().map(|s| s.id.as_str()).collect();
        let m = super::pipeline::load_masks(dir, &ids)?;
        set = super::pipeline::with_masks(&set, &m)?;
    }
    let counts = evaluate_cls(&model, &set)?;
    let mut s = format!(
        "tp={}\ntn={}\nfp={}\nfn={}\n",
        counts.tp, counts.tn, counts.fp, counts.r#fn
    );
    suite_lines("", &metric_suite(&counts)?, &mut s);
    Ok(s)
}

/// `msx ablate`: one table row per grid cell. Cells sharing manifests and a
/// mask source reuse the loaded data.
pub fn ablate_grid(grid: &Path, out: Option<&Path>) -> Result<String> {
    let text = fs::read_to_string(grid).map_err(|e| Error::io(grid, e))?;
    let cells = parse_grid(&text, grid.parent().unwrap_or(Path::new(".")))?;
    type Key = (
        Option<PathBuf>,
        Option<PathBuf>,
        Profile,
        bool,
        Option<PathBuf>,
        Option<PathBuf>,
    );
    let mut cache: HashMap<Key, (Vec<ClsSample>, Vec<ClsSample>)> = HashMap::new();
    let rows = ablate(&cells, |cfg| {
        let key: Key = (
            cfg.train_manifest.clone(),
            cfg.test_manifest.clone(),
            cfg.profile,
            cfg.use_masks,
            cfg.masks_dir.clone(),
            cfg.seg_checkpoint.clone(),
        );
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.clone());
        }
        let side = profile_side(cfg.profile);
        let train = load_cls_set(&require(&cfg.train_manifest, "train_manifest")?, side)?;
        let test = load_cls_set(&require(&cfg.test_manifest, "test_manifest")?, side)?;
        let sets = prepare_cls_inputs(cfg, train, test, None)?;
        cache.insert(key, sets.clone());
        Ok(sets)
    });
    let table = render_ablation(&rows, true);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("ablation.txt"), &table)?;
        for row in &rows {
            if let Ok(st) = &row.outcome {
                write_text(&dir.join(format!("{}.kv", row.name)), &st.report.to_kv())?;
            }
        }
    }
    Ok(table)
}

/// `msx report`: renders a `report.kv` file, or the one inside a directory.
pub fn report(input: &Path) -> Result<String> {
    let path = if input.is_dir() {
        input.join(REPORT_KV)
    } else {
        input.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Report::from_kv(&text)?.render_text())
}
