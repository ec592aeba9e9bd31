//! Binary greyscale PGM (`P5`, maxval ≤ 255).

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Next whitespace-delimited header token, skipping `#` comments.
    fn token(&mut self) -> Option<&[u8]> {
        let b = self.bytes;
        loop {
            while self.pos < b.len() && b[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < b.len() && b[self.pos] == b'#' {
                while self.pos < b.len() && b[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < b.len() && !b[self.pos].is_ascii_whitespace() && b[self.pos] != b'#' {
            self.pos += 1;
        }
        (start < self.pos).then(|| &b[start..self.pos])
    }
}

/// Parses `P5` bytes; `path` only labels errors.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        detail,
    };
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token().ok_or_else(|| err("empty file".into()))?;
    if magic != b"P5" {
        return Err(err(format!(
            "bad magic `{}` (only binary P5 is supported)",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = cur
            .token()
            .ok_or_else(|| err(format!("header ends before {what}")))?;
        let t = String::from_utf8_lossy(t);
        t.parse::<usize>()
            .map_err(|_| err(format!("{what} `{t}` is not a nonnegative integer")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(format!("maxval {maxval} is outside 1..=255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(err("missing payload separator".into()));
    }
    let payload = &bytes[cur.pos + 1..];
    let need = width * height;
    if payload.len() < need {
        return Err(err(format!(
            "truncated payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let pixels = payload[..need]
        .iter()
        .map(|&b| {
            if usize::from(b) > maxval {
                Err(err(format!("sample {b} exceeds maxval {maxval}")))
            } else {
                Ok(f32::from(b) / 255.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Image::new(height, width, pixels)
}

/// Quantises to 8 bits (`round(v·255)`, clamped) and emits `P5`.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(
        image
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Loads a mask, binarising at one half of full scale.
pub fn load_mask(path: &Path) -> Result<Image> {
    let img = load_pgm(path)?;
    let bits = img.to_bits();
    Image::from_bits(img.height, img.width, &bits)
}

pub fn save_pgm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}
