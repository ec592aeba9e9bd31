//! Trained-model bundles: parameters plus the structure needed to rebuild
//! them from a checkpoint.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use crate::backbone::{Backbone, BackboneConfig, FeatureTriple, Profile};
use crate::data::{batch_tensor, Image};
use crate::error::{Error, Result};
use crate::msfusion::{Branches, FusionConfig, MsFusion};
use crate::nn::{Forward, ParamStore};
use crate::tensor::Tensor;
use crate::transunet::{threshold_logits, TransUnet, UNetConfig};

/// Images per inference forward pass.
pub const INFER_CHUNK: usize = 32;

fn meta_map(text: &str) -> BTreeMap<String, String> {
    text.split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

fn meta_get<V: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<V> {
    m.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("metadata field `{key}` missing or malformed")))
}

fn meta_list(m: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    let raw = m
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata field `{key}` missing")))?;
    raw.split(',')
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("metadata field `{key}` malformed")))
        })
        .collect()
}

fn require_task(ckpt: &Checkpoint, want: &str) -> Result<()> {
    match ckpt.text("task") {
        Some(t) if t == want => Ok(()),
        Some(t) => Err(Error::Checkpoint(format!(
            "expected a {want} checkpoint, found {t}"
        ))),
        None => Err(Error::Checkpoint("checkpoint has no task metadata".into())),
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: UNetConfig,
    pub net: TransUnet,
    pub store: ParamStore<f32>,
}

impl SegModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = TransUnet::new(
            &mut store,
            config.clone(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        Ok(SegModel { config, net, store })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store);
        let u = &self.config;
        c.set_text("task", "seg");
        c.set_text(
            "unet",
            &format!(
                "depth={};base={};side={};proj={}",
                u.depth,
                u.base_channels,
                u.input_side,
                u8::from(u.use_projections)
            ),
        );
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        require_task(ckpt, "seg")?;
        let m = meta_map(&ckpt.text("unet").unwrap_or_default());
        let config = UNetConfig {
            depth: meta_get(&m, "depth")?,
            base_channels: meta_get(&m, "base")?,
            input_side: meta_get(&m, "side")?,
            use_projections: meta_get::<u8>(&m, "proj")? == 1,
        };
        let mut model = SegModel::new(config, 0)?;
        ckpt.load_into(&mut model.store, "")?;
        Ok(model)
    }

    pub fn side(&self) -> usize {
        self.config.input_side
    }

    /// Per-pixel logits for each image, in input order.
    pub fn logits(&self, images: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let x: Tensor<f32> = batch_tensor(chunk.iter().copied())?;
            let f = Forward::new(&self.store, false);
            let xv = f.tape().constant(&x)?;
            let z = self.net.forward(&f, xv)?;
            let z = f.tape().value(z);
            out.extend(z.chunks(z.len() / chunk.len()).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Binary masks at `threshold` on the sigmoid of the logits.
    pub fn predict_masks(&self, images: &[&Image], threshold: f64) -> Result<Vec<Image>> {
        let side = self.side();
        if let Some(bad) = images.iter().find(|i| i.height != side || i.width != side) {
            return Err(Error::dim(
                "predict_mask",
                format!(
                    "model expects {side}x{side}, got {}x{}",
                    bad.height, bad.width
                ),
            ));
        }
        self.logits(images)?
            .iter()
            .map(|z| Image::from_bits(side, side, &threshold_logits(z, threshold)))
            .collect()
    }
}

/// Backbone maps of one image, laid out `(c, h, w)` per block.
#[derive(Clone, Debug)]
pub struct CachedFeatures {
    pub b2: Vec<f32>,
    pub b3: Vec<f32>,
    pub b4: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ClsModel {
    pub backbone_config: BackboneConfig,
    pub fusion_config: FusionConfig,
    pub backbone: Backbone,
    pub fusion: MsFusion,
    pub store: ParamStore<f32>,
}

impl ClsModel {
    /// The backbone is initialised first from `seed`, so models sharing a
    /// seed and backbone config share backbone weights.
    pub fn new(
        backbone_config: BackboneConfig,
        fusion_config: FusionConfig,
        seed: u64,
    ) -> Result<Self> {
        let [c2, c3, c4] = backbone_config.blocks;
        if (fusion_config.c_b2, fusion_config.c_b3, fusion_config.c_b4) != (c2, c3, c4) {
            return Err(Error::Config(format!(
                "fusion expects blocks {:?}, backbone has {:?}",
                (fusion_config.c_b2, fusion_config.c_b3, fusion_config.c_b4),
                backbone_config.blocks
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, backbone_config.clone(), &mut rng)?;
        let fusion = MsFusion::new(&mut store, fusion_config.clone(), &mut rng)?;
        Ok(ClsModel {
            backbone_config,
            fusion_config,
            backbone,
            fusion,
            store,
        })
    }

    pub fn side(&self) -> usize {
        self.backbone_config.input_side
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.store);
        let b = &self.backbone_config;
        let f = &self.fusion_config;
        c.set_text("task", "cls");
        c.set_text(
            "backbone",
            &format!(
                "profile={};stem={};blocks={},{},{};side={};frozen={}",
                b.profile,
                b.stem_channels,
                b.blocks[0],
                b.blocks[1],
                b.blocks[2],
                b.input_side,
                u8::from(b.frozen)
            ),
        );
        let branches = match f.branches {
            Branches::B4Only => "b4".to_owned(),
            Branches::Combined => "combined".to_owned(),
            Branches::Separate { b2, b3 } => format!("separate:{}{}", u8::from(b2), u8::from(b3)),
        };
        c.set_text(
            "fusion",
            &format!(
                "r4={};r23={};proj={};transformer={};branches={branches}",
                f.r4,
                f.r23,
                u8::from(f.use_projections),
                u8::from(f.use_transformer)
            ),
        );
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        require_task(ckpt, "cls")?;
        let b = meta_map(&ckpt.text("backbone").unwrap_or_default());
        let blocks = meta_list(&b, "blocks")?;
        let blocks: [usize; 3] = blocks
            .try_into()
            .map_err(|_| Error::Checkpoint("backbone needs three block widths".into()))?;
        let profile: Profile = b
            .get("profile")
            .ok_or_else(|| Error::Checkpoint("metadata field `profile` missing".into()))?
            .parse()?;
        let backbone_config = BackboneConfig {
            profile,
            stem_channels: meta_get(&b, "stem")?,
            blocks,
            input_side: meta_get(&b, "side")?,
            frozen: meta_get::<u8>(&b, "frozen")? == 1,
        };
        let f = meta_map(&ckpt.text("fusion").unwrap_or_default());
        let branches = match f.get("branches").map(String::as_str) {
            Some("b4") => Branches::B4Only,
            Some("combined") => Branches::Combined,
            Some(s) if s.starts_with("separate:") && s.len() == 11 => Branches::Separate {
                b2: &s[9..10] == "1",
                b3: &s[10..11] == "1",
            },
            _ => {
                return Err(Error::Checkpoint(
                    "metadata field `branches` missing or malformed".into(),
                ))
            }
        };
        let fusion_config = FusionConfig {
            c_b2: blocks[0],
            c_b3: blocks[1],
            c_b4: blocks[2],
            r4: meta_get(&f, "r4")?,
            r23: meta_get(&f, "r23")?,
            use_projections: meta_get::<u8>(&f, "proj")? == 1,
            use_transformer: meta_get::<u8>(&f, "transformer")? == 1,
            branches,
        };
        let mut model = ClsModel::new(backbone_config, fusion_config, 0)?;
        ckpt.load_into(&mut model.store, "")?;
        Ok(model)
    }

    fn check_side(&self, images: &[&Image]) -> Result<()> {
        let side = self.side();
        match images.iter().find(|i| i.height != side || i.width != side) {
            Some(bad) => Err(Error::dim(
                "classify",
                format!(
                    "model expects {side}x{side}, got {}x{}",
                    bad.height, bad.width
                ),
            )),
            None => Ok(()),
        }
    }

    /// Eval-mode backbone maps for each image.
    pub fn extract_features(&self, images: &[&Image]) -> Result<Vec<CachedFeatures>> {
        self.check_side(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_CHUNK) {
            let x: Tensor<f32> = batch_tensor(chunk.iter().copied())?;
            let f = Forward::new(&self.store, false);
            let xv = f.tape().constant(&x)?;
            let FeatureTriple { b2, b3, b4 } = self.backbone.forward(&f, xv)?;
            let tape = f.tape();
            let (v2, v3, v4) = (tape.value(b2), tape.value(b3), tape.value(b4));
            let n = chunk.len();
            let (l2, l3, l4) = (v2.len() / n, v3.len() / n, v4.len() / n);
            for i in 0..n {
                out.push(CachedFeatures {
                    b2: v2[i * l2..(i + 1) * l2].to_vec(),
                    b3: v3[i * l3..(i + 1) * l3].to_vec(),
                    b4: v4[i * l4..(i + 1) * l4].to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// `(c, h, w)` of each cached block.
    pub fn feature_shapes(&self) -> [[usize; 3]; 3] {
        self.backbone_config
            .output_shapes()
            .expect("validated backbone config")
    }

    /// Stacks cached features into three `(n, c, h, w)` tensors.
    pub fn stack_features(&self, items: &[&CachedFeatures]) -> Result<[Tensor<f32>; 3]> {
        let shapes = self.feature_shapes();
        let n = items.len();
        let stack = |k: usize, get: &dyn Fn(&CachedFeatures) -> &[f32]| -> Result<Tensor<f32>> {
            let mut data = Vec::with_capacity(n * shapes[k].iter().product::<usize>());
            for it in items {
                data.extend_from_slice(get(it));
            }
            let [c, h, w] = shapes[k];
            Tensor::new([n, c, h, w], data)
        };
        Ok([
            stack(0, &|f| &f.b2)?,
            stack(1, &|f| &f.b3)?,
            stack(2, &|f| &f.b4)?,
        ])
    }

    /// Probabilities from cached backbone features.
    pub fn probs_from_features(&self, feats: &[CachedFeatures]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(feats.len());
        for chunk in feats.chunks(INFER_CHUNK) {
            let refs: Vec<&CachedFeatures> = chunk.iter().collect();
            let [t2, t3, t4] = self.stack_features(&refs)?;
            let f = Forward::new(&self.store, false);
            let tape = f.tape();
            let o = self.fusion.forward(
                &f,
                tape.constant(&t2)?,
                tape.constant(&t3)?,
                tape.constant(&t4)?,
            )?;
            out.extend_from_slice(&tape.value(o.prob));
        }
        Ok(out)
    }

    /// End-to-end probabilities.
    pub fn predict_probs(&self, images: &[&Image]) -> Result<Vec<f32>> {
        let feats = self.extract_features(images)?;
        self.probs_from_features(&feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cls() -> ClsModel {
        let bb = BackboneConfig {
            input_side: 16,
            ..BackboneConfig::desk()
        };
        ClsModel::new(bb, FusionConfig::desk(), 3).unwrap()
    }

    #[test]
    fn seg_checkpoint_round_trip_is_bitwise() {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            input_side: 16,
            use_projections: true,
        };
        let model = SegModel::new(cfg, 5).unwrap();
        let img = Image::new(16, 16, (0..256).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let bytes = model.to_checkpoint().to_bytes();
        let back = SegModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(
            back.logits(&[&img]).unwrap(),
            model.logits(&[&img]).unwrap()
        );
        assert!(ClsModel::from_checkpoint(&model.to_checkpoint()).is_err());
    }

    #[test]
    fn cls_checkpoint_round_trip_is_bitwise() {
        let model = tiny_cls();
        let img = Image::new(16, 16, (0..256).map(|i| (i % 5) as f32 / 5.0).collect()).unwrap();
        let back = ClsModel::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back.fusion_config, model.fusion_config);
        assert_eq!(
            back.predict_probs(&[&img]).unwrap(),
            model.predict_probs(&[&img]).unwrap()
        );
    }

    #[test]
    fn same_seed_shares_backbone_across_heads() {
        let a = tiny_cls();
        let mut fc = FusionConfig::desk();
        fc.branches = Branches::B4Only;
        fc.use_transformer = false;
        let b = ClsModel::new(a.backbone_config.clone(), fc, 3).unwrap();
        for (pa, pb) in a
            .store
            .iter()
            .zip(b.store.iter())
            .take_while(|(p, _)| p.1.name.starts_with("backbone."))
        {
            assert_eq!(pa.1.tensor.data(), pb.1.tensor.data());
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let model = tiny_cls();
        let img = Image::filled(8, 8, 0.0);
        assert!(model.predict_probs(&[&img]).is_err());
    }
}
