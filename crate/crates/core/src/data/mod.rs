//! Grayscale images, masks, resizing, and dataset plumbing.

pub mod manifest;
pub mod pgm;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use manifest::{
    load_manifest, shuffled_indices, sniff_kind, ClsSample, Dataset, ManifestKind, SegSample,
};
pub use pgm::{decode_pgm, encode_pgm, load_mask, load_pgm, save_pgm};
pub use synth::{synth_generate, write_dataset, Ellipse, SynthConfig, SynthSample};

/// Row-major grayscale image with values in `[0, 1]`. Masks use the same
/// type with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::dim(
                "image",
                format!("{height}x{width} image with {} pixels", pixels.len()),
            ));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Mask bits, `1` where the value is at least one half.
    pub fn to_bits(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| u8::from(v >= 0.5)).collect()
    }

    pub fn from_bits(height: usize, width: usize, bits: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bits.iter().map(|&b| f32::from(b.min(1))).collect(),
        )
    }
}

/// Source coordinate of output index `i` under corner alignment.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    }
}

/// Bilinear resize to `side × side` with corner-aligned sampling; a single
/// output pixel samples the image centre.
pub fn resize(image: &Image, side: usize) -> Result<Image> {
    if side == 0 {
        return Err(Error::Invalid("resize: side must be at least 1".into()));
    }
    if image.height == side && image.width == side {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let sy = source_coord(oy, image.height, side);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = sy - y0 as f64;
        for ox in 0..side {
            let sx = source_coord(ox, image.width, side);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = sx - x0 as f64;
            let p = |y, x| f64::from(image.at(y, x));
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Image::new(side, side, out)
}

/// Nearest-neighbour resize, which keeps masks binary.
pub fn resize_nearest(image: &Image, side: usize) -> Result<Image> {
    if side == 0 {
        return Err(Error::Invalid("resize: side must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(side * side);
    for oy in 0..side {
        let y = source_coord(oy, image.height, side).round() as usize;
        for ox in 0..side {
            let x = source_coord(ox, image.width, side).round() as usize;
            out.push(image.at(y, x));
        }
    }
    Image::new(side, side, out)
}

/// Elementwise product of an image and a mask of the same extent.
pub fn apply_mask(image: &Image, mask: &Image) -> Result<Image> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::dim(
            "apply_mask",
            format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, mask.height, mask.width
            ),
        ));
    }
    let pixels = image
        .pixels
        .iter()
        .zip(&mask.pixels)
        .map(|(a, b)| a * b)
        .collect();
    Image::new(image.height, image.width, pixels)
}

/// Stacks equally sized images into an `(n, 1, h, w)` tensor.
pub fn batch_tensor<'a, T: Real>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut n = 0;
    for img in images {
        match dims {
            None => dims = Some((img.height, img.width)),
            Some(d) if d != (img.height, img.width) => {
                return Err(Error::dim(
                    "batch",
                    format!(
                        "image {}x{} in a batch of {}x{}",
                        img.height, img.width, d.0, d.1
                    ),
                ))
            }
            _ => {}
        }
        data.extend(img.pixels.iter().map(|&v| T::of(f64::from(v))));
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::Invalid("batch: no images".into()))?;
    Tensor::new([n, 1, h, w], data)
}
