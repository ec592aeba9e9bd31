//! CSV manifests: `image,mask` for segmentation, `image,label` for
//! classification. Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{load_mask, load_pgm, resize, resize_nearest, Image};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Seg,
    Cls,
}

impl ManifestKind {
    pub fn header(self) -> [&'static str; 2] {
        match self {
            ManifestKind::Seg => ["image", "mask"],
            ManifestKind::Cls => ["image", "label"],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Image,
    pub mask: Image,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsSample {
    pub image: Image,
    pub label: u8,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Seg(Vec<SegSample>),
    Cls(Vec<ClsSample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Seg(v) => v.len(),
            Dataset::Cls(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_seg(self) -> Result<Vec<SegSample>> {
        match self {
            Dataset::Seg(v) => Ok(v),
            Dataset::Cls(_) => Err(Error::Invalid("expected a segmentation manifest".into())),
        }
    }

    pub fn into_cls(self) -> Result<Vec<ClsSample>> {
        match self {
            Dataset::Cls(v) => Ok(v),
            Dataset::Seg(_) => Err(Error::Invalid("expected a classification manifest".into())),
        }
    }
}

/// Raw manifest rows: `(image path, second column)` with paths resolved.
pub fn read_rows(path: &Path, kind: ManifestKind) -> Result<Vec<(PathBuf, String)>> {
    let merr = |row: usize, detail: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| merr(0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| merr(0, e.to_string()))?
        .clone();
    let want = kind.header();
    if header.len() != 2 || header[0] != *want[0] || header[1] != *want[1] {
        return Err(merr(0, format!("header must be `{},{}`", want[0], want[1])));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| merr(row, e.to_string()))?;
        if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(merr(row, "expected two non-empty fields".into()));
        }
        rows.push((base.join(&rec[0]), rec[1].to_owned()));
    }
    Ok(rows)
}

/// Manifest kind from the header line.
pub fn sniff_kind(path: &Path) -> Result<ManifestKind> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Vec<&str> = text
        .lines()
        .next()
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .collect();
    [ManifestKind::Seg, ManifestKind::Cls]
        .into_iter()
        .find(|k| header == k.header())
        .ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            row: 0,
            detail: "header must be `image,mask` or `image,label`".into(),
        })
}

/// Loads every sample in file order, resizing to `side` when given.
pub fn load_manifest(path: &Path, kind: ManifestKind, side: Option<usize>) -> Result<Dataset> {
    let merr = |row: usize, detail: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        detail,
    };
    let rows = read_rows(path, kind)?;
    let load_image = |row: usize, p: &Path| -> Result<Image> {
        if !p.is_file() {
            return Err(merr(row, format!("file {} does not exist", p.display())));
        }
        let img = load_pgm(p).map_err(|e| merr(row, e.to_string()))?;
        match side {
            Some(s) => resize(&img, s),
            None => Ok(img),
        }
    };
    let id = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    match kind {
        ManifestKind::Seg => {
            let mut out = Vec::with_capacity(rows.len());
            for (i, (img_path, mask_path)) in rows.iter().enumerate() {
                let row = i + 1;
                let image = load_image(row, img_path)?;
                let mask_path = path.parent().unwrap_or(Path::new(".")).join(mask_path);
                if !mask_path.is_file() {
                    return Err(merr(
                        row,
                        format!("file {} does not exist", mask_path.display()),
                    ));
                }
                let mask = load_mask(&mask_path).map_err(|e| merr(row, e.to_string()))?;
                let mask = resize_nearest(&mask, image.height)?;
                if (mask.height, mask.width) != (image.height, image.width) {
                    return Err(merr(row, "mask and image extents differ".into()));
                }
                out.push(SegSample {
                    image,
                    mask,
                    id: id(img_path),
                });
            }
            Ok(Dataset::Seg(out))
        }
        ManifestKind::Cls => {
            let mut out = Vec::with_capacity(rows.len());
            for (i, (img_path, label)) in rows.iter().enumerate() {
                let row = i + 1;
                let label: u8 = label
                    .parse()
                    .ok()
                    .filter(|&l| l <= 1)
                    .ok_or_else(|| merr(row, format!("label `{label}` is not 0 or 1")))?;
                out.push(ClsSample {
                    image: load_image(row, img_path)?,
                    label,
                    id: id(img_path),
                });
            }
            Ok(Dataset::Cls(out))
        }
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Writes rows under the given header, paths relative to the manifest.
pub fn write_manifest(path: &Path, kind: ManifestKind, rows: &[(String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    w.write_record(kind.header()).map_err(io)?;
    for (a, b) in rows {
        w.write_record([a, b]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;
    use crate::data::{save_pgm, Image};

    fn fixture(dir: &Path) {
        for i in 0..3 {
            save_pgm(
                &dir.join(format!("img_{i}.pgm")),
                &Image::filled(4, 4, i as f32 / 4.0),
            )
            .unwrap();
            save_pgm(
                &dir.join(format!("mask_{i}.pgm")),
                &Image::filled(4, 4, 1.0),
            )
            .unwrap();
        }
    }

    #[test]
    fn loads_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(
            dir.path().join("c.csv"),
            "image,label\nimg_2.pgm,1\nimg_0.pgm,0\nimg_1.pgm,1\n",
        )
        .unwrap();
        let ds = load_manifest(&dir.path().join("c.csv"), ManifestKind::Cls, None)
            .unwrap()
            .into_cls()
            .unwrap();
        let ids: Vec<&str> = ds.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["img_2", "img_0", "img_1"]);
        assert_eq!(ds.iter().map(|s| s.label).collect::<Vec<_>>(), [1, 0, 1]);

        fs::write(
            dir.path().join("s.csv"),
            "image,mask\nimg_0.pgm,mask_0.pgm\n",
        )
        .unwrap();
        let ds = load_manifest(&dir.path().join("s.csv"), ManifestKind::Seg, Some(8))
            .unwrap()
            .into_seg()
            .unwrap();
        assert_eq!(ds[0].image.height, 8);
        assert!(ds[0].mask.is_binary());
    }

    #[test]
    fn errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let p = dir.path().join("m.csv");
        fs::write(&p, "image,label\nimg_0.pgm,0\nabsent.pgm,1\nimg_1.pgm,1\n").unwrap();
        let e = load_manifest(&p, ManifestKind::Cls, None).unwrap_err();
        assert!(matches!(e, Error::Manifest { row: 2, .. }), "{e}");
        fs::write(&p, "image,label\nimg_0.pgm,x\n").unwrap();
        let e = load_manifest(&p, ManifestKind::Cls, None).unwrap_err();
        assert!(matches!(e, Error::Manifest { row: 1, .. }), "{e}");
        fs::write(&p, "image,mask\nimg_0.pgm,mask_0.pgm\n").unwrap();
        assert!(load_manifest(&p, ManifestKind::Cls, None).is_err());
        fs::write(&p, "image,label\nimg_0.pgm\n").unwrap();
        assert!(load_manifest(&p, ManifestKind::Cls, None).is_err());
        assert!(load_manifest(&dir.path().join("nope.csv"), ManifestKind::Cls, None).is_err());
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        assert_eq!(shuffled_indices(50, 9), shuffled_indices(50, 9));
        assert_ne!(shuffled_indices(50, 9), shuffled_indices(50, 10));
        let mut s = shuffled_indices(50, 9);
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
