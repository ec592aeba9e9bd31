//! Two-stage glue: a trained segmentation model masks the classification
//! images before they reach the classifier.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::models::SegModel;
use crate::data::{apply_mask, load_mask, save_pgm, ClsSample, Image};
use crate::error::{Error, Result};

/// Masked copy of a classification set plus the masks that produced it.
#[derive(Clone, Debug)]
pub struct MaskedSet {
    pub samples: Vec<ClsSample>,
    pub masks: Vec<Image>,
}

/// File listing persisted masks, one `id,mask` row per sample.
pub const MASK_INDEX: &str = "masks.csv";

fn mask_file_name(id: &str) -> String {
    format!("{id}_mask.pgm")
}

/// Replaces every image by `apply_mask(image, predicted mask)`. The model
/// is only read.
pub fn pipeline_predict_masks(
    seg: &SegModel,
    samples: &[ClsSample],
    threshold: f64,
) -> Result<MaskedSet> {
    let side = seg.side();
    if let Some(bad) = samples
        .iter()
        .find(|s| s.image.height != side || s.image.width != side)
    {
        return Err(Error::Invalid(format!(
            "segmentation model expects {side}x{side} images, sample {} is {}x{}",
            bad.id, bad.image.height, bad.image.width
        )));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let masks = seg.predict_masks(&images, threshold)?;
    let samples = with_masks(samples, &masks)?;
    Ok(MaskedSet { samples, masks })
}

/// Applies `masks[i]` to `samples[i]`.
pub fn with_masks(samples: &[ClsSample], masks: &[Image]) -> Result<Vec<ClsSample>> {
    if samples.len() != masks.len() {
        return Err(Error::Invalid(format!(
            "{} samples but {} masks",
            samples.len(),
            masks.len()
        )));
    }
    samples
        .iter()
        .zip(masks)
        .map(|(s, m)| {
            Ok(ClsSample {
                image: apply_mask(&s.image, m)?,
                label: s.label,
                id: s.id.clone(),
            })
        })
        .collect()
}

fn read_index(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(err)?;
    if reader.headers().map_err(err)?.iter().collect::<Vec<_>>() != ["id", "mask"] {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            row: 0,
            detail: "expected header `id,mask`".into(),
        });
    }
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(err)?;
        if rec.len() != 2 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                row: i + 1,
                detail: "expected two fields".into(),
            });
        }
        out.insert(rec[0].to_owned(), rec[1].to_owned());
    }
    Ok(out)
}

/// Writes `{id}_mask.pgm` per sample into `dir` and merges the entries into
/// its `masks.csv`, so several sets can share one directory.
pub fn save_masks(dir: &Path, ids: &[&str], masks: &[Image]) -> Result<()> {
    if ids.len() != masks.len() {
        return Err(Error::Invalid(format!(
            "{} ids but {} masks",
            ids.len(),
            masks.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(MASK_INDEX);
    let mut index = read_index(&index_path)?;
    for (id, mask) in ids.iter().zip(masks) {
        let name = mask_file_name(id);
        save_pgm(&dir.join(&name), mask)?;
        index.insert((*id).to_owned(), name);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", index_path.display()));
    w.write_record(["id", "mask"]).map_err(err)?;
    for (id, name) in &index {
        w.write_record([id, name]).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Invalid(format!("{}: {e}", index_path.display())))?;
    super::checkpoint::write_atomic(&index_path, &bytes)
}

/// Loads the persisted mask of every sample id, in the order given.
pub fn load_masks(dir: &Path, ids: &[&str]) -> Result<Vec<Image>> {
    let index_path = dir.join(MASK_INDEX);
    if !index_path.is_file() {
        return Err(Error::Invalid(format!(
            "{} does not exist",
            index_path.display()
        )));
    }
    let index = read_index(&index_path)?;
    ids.iter()
        .map(|id| {
            let name = index.get(*id).ok_or_else(|| {
                Error::Invalid(format!("{} has no mask for `{id}`", index_path.display()))
            })?;
            load_mask(&dir.join(name))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::transunet::UNetConfig;

    fn cls_set(n: usize, side: usize) -> Vec<ClsSample> {
        synth_generate(&SynthConfig::new(n, side, 3))
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, s)| s.cls(format!("img_{i:05}")))
            .collect()
    }

    fn tiny_seg() -> SegModel {
        SegModel::new(
            UNetConfig {
                depth: 2,
                base_channels: 2,
                input_side: 16,
                use_projections: true,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn all_ones_masks_leave_images_unchanged() {
        let set = cls_set(3, 16);
        let ones = vec![Image::filled(16, 16, 1.0); 3];
        let out = with_masks(&set, &ones).unwrap();
        for (a, b) in out.iter().zip(&set) {
            assert_eq!(a.image, b.image);
            assert_eq!((a.label, &a.id), (b.label, &b.id));
        }
    }

    #[test]
    fn masking_with_true_lungs_darkens_background() {
        let synth = synth_generate(&SynthConfig::new(6, 32, 4)).unwrap();
        let background_mean = |img: &Image, truth: &Image| {
            let vals: Vec<f64> = img
                .pixels
                .iter()
                .zip(&truth.pixels)
                .filter(|(_, &t)| t == 0.0)
                .map(|(&v, _)| f64::from(v))
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        for s in &synth {
            let masked = apply_mask(&s.image, &s.mask).unwrap();
            assert!(background_mean(&masked, &s.mask) < background_mean(&s.image, &s.mask));
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let seg = tiny_seg();
        let err = pipeline_predict_masks(&seg, &cls_set(2, 32), 0.5).unwrap_err();
        assert!(err.to_string().contains("expects 16x16"), "{err}");
    }

    #[test]
    fn predicted_masks_are_binary_and_weights_untouched() {
        let seg = tiny_seg();
        let before = seg.to_checkpoint().to_bytes();
        let set = cls_set(4, 16);
        let out = pipeline_predict_masks(&seg, &set, 0.5).unwrap();
        assert_eq!(seg.to_checkpoint().to_bytes(), before);
        assert_eq!(out.samples.len(), 4);
        for (m, (s, orig)) in out.masks.iter().zip(out.samples.iter().zip(&set)) {
            assert!(m.is_binary());
            for ((&v, &o), &k) in s.image.pixels.iter().zip(&orig.image.pixels).zip(&m.pixels) {
                assert_eq!(v, o * k);
            }
        }
    }

    #[test]
    fn masks_persist_and_merge() {
        let dir = tempfile::tempdir().unwrap();
        let a = Image::from_bits(2, 2, &[1, 0, 0, 1]).unwrap();
        let b = Image::from_bits(2, 2, &[0, 1, 1, 1]).unwrap();
        save_masks(dir.path(), &["img_00001"], std::slice::from_ref(&a)).unwrap();
        save_masks(dir.path(), &["img_00000"], std::slice::from_ref(&b)).unwrap();
        let got = load_masks(dir.path(), &["img_00001", "img_00000"]).unwrap();
        assert_eq!(got, vec![a, b]);
        let err = load_masks(dir.path(), &["img_00009"]).unwrap_err();
        assert!(err.to_string().contains("img_00009"));
    }
}
