//! Named-tensor archive.
//!
//! Layout (little-endian): magic `MSXC1`, `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `f32`
//! values. Text metadata rides along as `meta.*` tensors holding one byte
//! per value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 5] = b"MSXC1";
const META: &str = "meta.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every tensor of `store`, weights and buffers, in registration order.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.cast::<f32>()))
            .collect();
        Checkpoint { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        let name = name.into();
        let mut tensor = tensor;
        tensor.set_requires_grad(false);
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn set_text(&mut self, key: &str, value: &str) {
        let bytes: Vec<f32> = value.bytes().map(f32::from).collect();
        // Tensors cannot be empty, so a leading marker byte carries the length.
        let mut data = vec![0.0];
        data.extend(bytes);
        let n = data.len();
        self.insert(
            format!("{META}{key}"),
            Tensor::new([n], data).expect("length matches"),
        );
    }

    pub fn text(&self, key: &str) -> Option<String> {
        let t = self.get(&format!("{META}{key}"))?;
        let bytes: Vec<u8> = t.data().iter().skip(1).map(|&v| v as u8).collect();
        String::from_utf8(bytes).ok()
    }

    /// Copies every store tensor whose name starts with `prefix` from the
    /// archive, checking presence and shape first so a failure leaves the
    /// store untouched.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let mut plan = Vec::new();
        for (id, p) in store.iter() {
            if !p.name.starts_with(prefix) {
                continue;
            }
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            plan.push((id, t));
        }
        for (id, t) in plan {
            let dst = store.get_mut(id).data_mut();
            for (d, &s) in dst.iter_mut().zip(t.data()) {
                *d = T::of(f64::from(s));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::from(&MAGIC[..]);
        let push_u32 = |out: &mut Vec<u8>, v: usize| {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        };
        push_u32(&mut out, self.entries.len());
        for (name, t) in &self.entries {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            push_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                push_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint("unknown magic".into()));
        }
        let count = r.u32("tensor count")?;
        let mut ckpt = Checkpoint::new();
        for i in 0..count {
            let len = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
                .to_owned();
            let rank = r.u32("rank")?;
            let dims = (0..rank)
                .map(|_| r.u32("dims"))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("tensor `{name}`: implausible dims {dims:?}"))
                })?;
            let raw = r.take(numel * 4, "values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            if ckpt.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
            ckpt.entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "a.weight",
            Tensor::new([2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-8, f32::MAX]).unwrap(),
        );
        c.insert("b", Tensor::scalar(7.0));
        c.set_text("profile", "desk");
        c
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.text("profile").as_deref(), Some("desk"));
        assert_eq!(back.text("absent"), None);
    }

    #[test]
    fn byte_layout() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = c.to_bytes();
        let mut want = b"MSXC1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'w');
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1f32.to_le_bytes());
        want.extend(2f32.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_bad_input() {
        let mut b = sample().to_bytes();
        b[4] = b'2';
        assert!(Checkpoint::from_bytes(&b)
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut b = sample().to_bytes();
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn load_into_checks_names_and_shapes() {
        let mut store = ParamStore::<f64>::new();
        let id = store.weight("a.weight", Tensor::zeros([2, 3]));
        store.weight("other", Tensor::zeros([1]));
        sample().load_into(&mut store, "a.").unwrap();
        assert_eq!(store.get(id).data()[1], -2.5);

        let mut store = ParamStore::<f64>::new();
        store.weight("a.weight", Tensor::zeros([3, 2]));
        let err = sample().load_into(&mut store, "").unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");

        let mut store = ParamStore::<f64>::new();
        store.weight("a.bias", Tensor::zeros([3]));
        let err = sample()
            .load_into(&mut store, "a.")
            .unwrap_err()
            .to_string();
        assert!(err.contains("a.bias"), "{err}");
    }
}
