//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::Profile;
use crate::error::{Error, Result};
use crate::msfusion::{Branches, FusionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Seg,
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    /// Blocks 2 and 3 concatenated into one merged branch.
    Combined,
    /// Every selected block pooled on its own.
    Separate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub profile: Profile,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub val_fraction: f64,
    pub use_masks: bool,
    pub use_multiscale: bool,
    pub use_transformer: bool,
    pub use_projections: bool,
    pub blocks: Vec<u8>,
    pub merge: MergeMode,
    pub backbone_frozen: bool,
    pub backbone_checkpoint: Option<PathBuf>,
    /// Segmentation checkpoint whose predicted masks are applied when
    /// `use_masks` is set and no precomputed masks are given.
    pub seg_checkpoint: Option<PathBuf>,
    /// Directory of precomputed masks (`masks.csv` plus mask images).
    pub masks_dir: Option<PathBuf>,
    /// Weight of the soft Dice term in the segmentation loss.
    pub dice_weight: f64,
    /// Segmentation stops early once validation Dice reaches this value.
    pub stop_at_val_dice: Option<f64>,
    pub threshold: f64,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(task: Task, profile: Profile) -> Self {
        let (lr, batch) = match profile {
            Profile::Paper => (1e-5, 64),
            Profile::Desk => (1e-3, 8),
        };
        TrainConfig {
            task,
            profile,
            lr,
            batch,
            epochs: match (profile, task) {
                (Profile::Paper, _) => 30,
                (Profile::Desk, Task::Seg) => 200,
                (Profile::Desk, Task::Cls) => 100,
            },
            seeds: vec![1, 2, 3, 4, 5],
            deterministic: true,
            val_fraction: 0.2,
            use_masks: true,
            use_multiscale: true,
            use_transformer: true,
            use_projections: true,
            blocks: vec![2, 3, 4],
            merge: MergeMode::Combined,
            backbone_frozen: true,
            backbone_checkpoint: None,
            seg_checkpoint: None,
            masks_dir: None,
            dice_weight: 0.0,
            stop_at_val_dice: None,
            threshold: 0.5,
            train_manifest: None,
            test_manifest: None,
            out: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|b| !(2..=4).contains(b)) {
            return bad(format!(
                "blocks must be a subset of 2,3,4, got {:?}",
                self.blocks
            ));
        }
        if self.task == Task::Cls && !self.blocks.contains(&4) {
            return bad("block 4 must be selected for classification".into());
        }
        if self.merge == MergeMode::Combined
            && self.use_multiscale
            && !(self.blocks.contains(&2) && self.blocks.contains(&3))
        {
            return bad("merge = combined needs blocks 2 and 3".into());
        }
        Ok(())
    }

    /// Head layout implied by the ablation switches.
    pub fn fusion_config(&self) -> FusionConfig {
        let base = match self.profile {
            Profile::Paper => FusionConfig::paper(),
            Profile::Desk => FusionConfig::desk(),
        };
        let branches = if !self.use_multiscale {
            Branches::B4Only
        } else {
            match self.merge {
                MergeMode::Combined => Branches::Combined,
                MergeMode::Separate => Branches::Separate {
                    b2: self.blocks.contains(&2),
                    b3: self.blocks.contains(&3),
                },
            }
        };
        FusionConfig {
            use_projections: self.use_projections,
            use_transformer: self.use_transformer,
            branches,
            ..base
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?, base_dir)
    }

    pub fn from_pairs(pairs: &[(String, String)], base_dir: &Path) -> Result<Self> {
        let task = match pairs
            .iter()
            .find(|(k, _)| k == "task")
            .map(|(_, v)| v.as_str())
        {
            Some("seg") => Task::Seg,
            Some("cls") => Task::Cls,
            Some(other) => return Err(Error::Config(format!("unknown task `{other}`"))),
            None => return Err(Error::Config("missing key `task`".into())),
        };
        let profile = match pairs.iter().find(|(k, _)| k == "profile") {
            Some((_, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = TrainConfig::new(task, profile);
        for (key, value) in pairs {
            cfg.set(key, value, base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        let path = |v: &str| base_dir.join(v);
        match key {
            "task" | "profile" => {}
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "deterministic" => self.deterministic = flag(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "use_masks" => self.use_masks = flag(key, value)?,
            "use_multiscale" => self.use_multiscale = flag(key, value)?,
            "use_transformer" => self.use_transformer = flag(key, value)?,
            "use_projections" => self.use_projections = flag(key, value)?,
            "blocks" => {
                let mut b: Vec<u8> = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?;
                b.sort_unstable();
                b.dedup();
                self.blocks = b;
            }
            "merge" => {
                self.merge = match value {
                    "combined" => MergeMode::Combined,
                    "separate" => MergeMode::Separate,
                    _ => {
                        return Err(Error::Config(format!(
                            "merge must be combined or separate, got `{value}`"
                        )))
                    }
                }
            }
            "backbone_frozen" => self.backbone_frozen = flag(key, value)?,
            "backbone_checkpoint" => self.backbone_checkpoint = Some(path(value)),
            "seg_checkpoint" => self.seg_checkpoint = Some(path(value)),
            "masks" => self.masks_dir = Some(path(value)),
            "dice_weight" => self.dice_weight = num(key, value)?,
            "stop_at_val_dice" => self.stop_at_val_dice = Some(num(key, value)?),
            "threshold" => self.threshold = num(key, value)?,
            "train_manifest" => self.train_manifest = Some(path(value)),
            "test_manifest" => self.test_manifest = Some(path(value)),
            "out" => self.out = Some(path(value)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key = value` rendering of the experiment settings.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let task = match self.task {
            Task::Seg => "seg",
            Task::Cls => "cls",
        };
        let _ = writeln!(s, "task = {task}");
        let _ = writeln!(s, "profile = {}", self.profile);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "use_masks = {}", self.use_masks);
        let _ = writeln!(s, "use_multiscale = {}", self.use_multiscale);
        let _ = writeln!(s, "use_transformer = {}", self.use_transformer);
        let _ = writeln!(s, "use_projections = {}", self.use_projections);
        let blocks: Vec<String> = self.blocks.iter().map(u8::to_string).collect();
        let _ = writeln!(s, "blocks = {}", blocks.join(","));
        let merge = match self.merge {
            MergeMode::Combined => "combined",
            MergeMode::Separate => "separate",
        };
        let _ = writeln!(s, "merge = {merge}");
        let _ = writeln!(s, "backbone_frozen = {}", self.backbone_frozen);
        let _ = writeln!(s, "dice_weight = {}", self.dice_weight);
        if let Some(v) = self.stop_at_val_dice {
            let _ = writeln!(s, "stop_at_val_dice = {v}");
        }
        let _ = writeln!(s, "threshold = {}", self.threshold);
        s
    }
}

/// `(key, value)` pairs in file order, rejecting duplicates and malformed lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        if out.iter().any(|(key, _)| key == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                i + 1
            )));
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

fn num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{value}`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_profile_defaults() {
        let cfg = TrainConfig::parse(
            "# demo\ntask = cls\nprofile = paper\nseeds = 3, 4\nuse_multiscale = false\ntrain_manifest = data/cls_train.csv\n",
            Path::new("/runs"),
        )
        .unwrap();
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.fusion_config().branches, Branches::B4Only);
        assert_eq!(
            cfg.train_manifest,
            Some(PathBuf::from("/runs/data/cls_train.csv"))
        );

        let desk = TrainConfig::parse("task = seg", Path::new(".")).unwrap();
        assert_eq!((desk.lr, desk.batch, desk.epochs), (1e-3, 8, 200));
    }

    #[test]
    fn rejects_bad_configs() {
        let p = Path::new(".");
        for text in [
            "task = cls\nbogus = 1",
            "lr = 0.1",
            "task = cls\nbatch = 0",
            "task = cls\nblocks = 2,3",
            "task = cls\nmerge = combined\nblocks = 2,4",
            "task = cls\nuse_masks = maybe",
            "task = cls\nlr = 1\nlr = 2",
            "task = cls\nnot a pair",
        ] {
            let e = TrainConfig::parse(text, p).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn separate_blocks_map_to_branches() {
        let cfg = TrainConfig::parse("task = cls\nmerge = separate\nblocks = 4,2", Path::new("."))
            .unwrap();
        assert_eq!(
            cfg.fusion_config().branches,
            Branches::Separate {
                b2: true,
                b3: false
            }
        );
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig::new(Task::Cls, Profile::Desk);
        cfg.seeds = vec![9];
        cfg.use_transformer = false;
        cfg.stop_at_val_dice = Some(0.9);
        let back = TrainConfig::parse(&cfg.render(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
    }
}
