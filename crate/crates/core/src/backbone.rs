//! Residual convolutional encoder emitting three same-resolution maps
//! `B², B³, B⁴` at `input / 8`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::nn::{BatchNorm2d, Conv2d, Forward, ParamStore};
use crate::tensor::{conv_out_extent, Real, Var};

pub const PREFIX: &str = "backbone.";

/// Channels the stem expects; grayscale input is replicated to fill them.
pub const STEM_INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub profile: Profile,
    pub stem_channels: usize,
    /// Output channels of blocks 2, 3 and 4.
    pub blocks: [usize; 3],
    pub input_side: usize,
    pub frozen: bool,
}

impl BackboneConfig {
    pub fn paper() -> Self {
        BackboneConfig {
            profile: Profile::Paper,
            stem_channels: 64,
            blocks: [512, 1024, 2048],
            input_side: 512,
            frozen: true,
        }
    }

    pub fn desk() -> Self {
        BackboneConfig {
            profile: Profile::Desk,
            stem_channels: 16,
            blocks: [32, 64, 128],
            input_side: 64,
            frozen: true,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.blocks;
        if self.stem_channels == 0 || a == 0 || !(a < b && b < c) {
            return Err(Error::Config(format!(
                "block channels must strictly increase, got {:?}",
                self.blocks
            )));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "input side {} is not divisible by 8",
                self.input_side
            )));
        }
        Ok(())
    }

    /// Spatial side of the three outputs, computed through the same window
    /// arithmetic the layers use.
    pub fn output_side(&self) -> Option<usize> {
        let s = conv_out_extent(self.input_side, 7, 2, 3)?;
        let s = conv_out_extent(s, 3, 2, 1)?;
        conv_out_extent(s, 3, 2, 1)
    }

    /// `(c, h, w)` of `B², B³, B⁴`.
    pub fn output_shapes(&self) -> Option<[[usize; 3]; 3]> {
        let s = self.output_side()?;
        Some(self.blocks.map(|c| [c, s, s]))
    }
}

/// Two 3×3 conv + batch-norm layers with an identity (or 1×1) shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            stride,
            1,
            false,
            rng,
        );
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), c_out);
        let conv2 = Conv2d::new(
            store,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            3,
            1,
            1,
            false,
            rng,
        );
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), c_out);
        let shortcut = (c_in != c_out || stride != 1).then(|| {
            (
                Conv2d::new(
                    store,
                    &format!("{name}.down"),
                    c_in,
                    c_out,
                    1,
                    stride,
                    0,
                    false,
                    rng,
                ),
                BatchNorm2d::new(store, &format!("{name}.down_bn"), c_out),
            )
        });
        ResBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    pub fn forward<T: Real>(&self, f: &Forward<'_, T>, x: Var, train: bool) -> Result<Var> {
        let tape = f.tape();
        let h = self.conv1.forward(f, x)?;
        let h = tape.relu(self.bn1.forward(f, h, train)?)?;
        let h = self.conv2.forward(f, h)?;
        let h = self.bn2.forward(f, h, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(f, conv.forward(f, x)?, train)?,
            None => x,
        };
        tape.relu(tape.add(h, skip)?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub block2: ResBlock,
    pub block3: ResBlock,
    pub block4: ResBlock,
}

/// The three multi-scale maps, each `(n, c, h/8, w/8)`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTriple {
    pub b2: Var,
    pub b3: Var,
    pub b4: Var,
}

impl Backbone {
    /// Kaiming-uniform initialisation; frozen configs get gradient-free weights.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let [c2, c3, c4] = config.blocks;
        let sc = config.stem_channels;
        let stem = Conv2d::new(
            store,
            "backbone.stem",
            STEM_INPUT_CHANNELS,
            sc,
            7,
            2,
            3,
            false,
            rng,
        );
        let stem_bn = BatchNorm2d::new(store, "backbone.stem_bn", sc);
        let block2 = ResBlock::new(store, "backbone.block2", sc, c2, 2, rng);
        let block3 = ResBlock::new(store, "backbone.block3", c2, c3, 1, rng);
        let block4 = ResBlock::new(store, "backbone.block4", c3, c4, 1, rng);
        store.set_trainable(PREFIX, !config.frozen);
        Ok(Backbone {
            config,
            stem,
            stem_bn,
            block2,
            block3,
            block4,
        })
    }

    /// Runs `(n, 1, H, H)` grayscale images through the encoder.
    ///
    /// Batch statistics are used only when the forward pass is training and
    /// the backbone is not frozen.
    pub fn forward<T: Real>(&self, f: &Forward<'_, T>, image: Var) -> Result<FeatureTriple> {
        let tape = f.tape();
        let shape = tape.shape(image);
        let side = self.config.input_side;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != side || shape[3] != side {
            return Err(Error::dim(
                "backbone_forward",
                format!("expected (n,1,{side},{side}), got {shape:?}"),
            ));
        }
        let train = f.training() && !self.config.frozen;
        let rgb = tape.concat(&[image; STEM_INPUT_CHANNELS], 1)?;
        let h = self.stem.forward(f, rgb)?;
        let h = tape.relu(self.stem_bn.forward(f, h, train)?)?;
        let h = tape.maxpool2d_strided(h, 3, 2, 1)?;
        let b2 = self.block2.forward(f, h, train)?;
        let b3 = self.block3.forward(f, b2, train)?;
        let b4 = self.block4.forward(f, b3, train)?;
        Ok(FeatureTriple { b2, b3, b4 })
    }

    /// Installs `backbone.*` tensors from a checkpoint and sets the freeze flag.
    pub fn load_freeze<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        ckpt: &Checkpoint,
        frozen: bool,
    ) -> Result<()> {
        ckpt.load_into(store, PREFIX)?;
        self.config.frozen = frozen;
        store.set_trainable(PREFIX, !frozen);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn desk_profile_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut store, BackboneConfig::desk(), &mut rng).unwrap();
        let f = Forward::new(&store, false);
        let x = f.tape().leaf(&Tensor::full([2, 1, 64, 64], 0.5)).unwrap();
        let out = bb.forward(&f, x).unwrap();
        assert_eq!(f.tape().shape(out.b2), vec![2, 32, 8, 8]);
        assert_eq!(f.tape().shape(out.b3), vec![2, 64, 8, 8]);
        assert_eq!(f.tape().shape(out.b4), vec![2, 128, 8, 8]);
    }

    #[test]
    fn paper_profile_shape_arithmetic() {
        let shapes = BackboneConfig::paper().output_shapes().unwrap();
        assert_eq!(shapes, [[512, 64, 64], [1024, 64, 64], [2048, 64, 64]]);
        for side in [8, 16, 24, 40, 64, 128] {
            let cfg = BackboneConfig {
                input_side: side,
                ..BackboneConfig::desk()
            };
            assert_eq!(cfg.output_side(), Some(side / 8), "side {side}");
        }
    }

    #[test]
    fn rejects_wrong_input_size() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut store, BackboneConfig::desk(), &mut rng).unwrap();
        let f = Forward::new(&store, false);
        let x = f.tape().leaf(&Tensor::zeros([1, 1, 32, 32])).unwrap();
        assert!(matches!(bb.forward(&f, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn config_invariants() {
        let mut c = BackboneConfig::desk();
        c.blocks = [32, 32, 64];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.input_side = 60;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_second_conv_makes_block_the_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = ResBlock::new(&mut store, "b", 4, 4, 1, &mut rng);
        assert!(block.shortcut.is_none());
        store.get_mut(block.conv2.weight).data_mut().fill(0.0);
        let data: Vec<f64> = (0..2 * 4 * 5 * 5)
            .map(|i| ((i * 13) % 7) as f64 * 0.3)
            .collect();
        let input = Tensor::new([2, 4, 5, 5], data).unwrap();
        for train in [false, true] {
            let f = Forward::new(&store, train);
            let x = f.tape().leaf(&input).unwrap();
            let y = block.forward(&f, x, train).unwrap();
            assert_eq!(&*f.tape().value(y), input.data(), "train={train}");
        }
    }

    #[test]
    fn frozen_backbone_has_no_trainable_weights() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Backbone::new(&mut store, BackboneConfig::desk(), &mut rng).unwrap();
        assert_eq!(store.count(PREFIX, true), 0);
        assert!(store.count(PREFIX, false) > 0);
        let _tape: Tape<f32> = Tape::new();
    }
}
