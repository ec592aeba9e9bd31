//! Encoder-decoder segmentation network whose skip connections are gated
//! by attention pooling, with queries chained from the level below.

use rand::Rng;

use crate::backbone::Profile;
use crate::error::{Error, Result};
use crate::msfusion::AttentionPool;
use crate::nn::{BatchNorm2d, Conv2d, Forward, Linear, ParamStore};
use crate::tensor::{Real, Tensor, Var};

pub const PREFIX: &str = "unet.";

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_side: usize,
    pub use_projections: bool,
}

impl UNetConfig {
    pub fn paper() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 64,
            input_side: 512,
            use_projections: true,
        }
    }

    pub fn desk() -> Self {
        UNetConfig {
            base_channels: 8,
            input_side: 64,
            ..Self::paper()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Channels of encoder stage `level` (`level == depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config(
                "depth and base channels must be positive".into(),
            ));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "input side {} is not divisible by 2^{}",
                self.input_side, self.depth
            )));
        }
        if !self.bottleneck_channels().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "positional encoding needs bottleneck channels divisible by 4, got {}",
                self.bottleneck_channels()
            )));
        }
        Ok(())
    }
}

/// Two conv3×3 → batch-norm → ReLU layers.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl DoubleConv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        DoubleConv {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                c_in,
                c_out,
                3,
                1,
                1,
                false,
                rng,
            ),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                c_out,
                c_out,
                3,
                1,
                1,
                false,
                rng,
            ),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out),
        }
    }

    pub fn forward<T: Real>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let tape = f.tape();
        let train = f.training();
        let h = self.conv1.forward(f, x)?;
        let h = tape.relu(self.bn1.forward(f, h, train)?)?;
        let h = self.conv2.forward(f, h)?;
        tape.relu(self.bn2.forward(f, h, train)?)
    }
}

/// Attention gate on one skip connection.
#[derive(Clone, Debug)]
pub struct SkipGate {
    /// Maps the query from the level below to this level's width.
    pub adapter: Linear,
    pub pool: AttentionPool,
}

/// Gated skip map plus the pooled vector handed up as the next query.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub gated: Var,
    pub pooled: Var,
    /// The adapted query this gate attended with.
    pub query: Var,
}

impl SkipGate {
    pub fn forward<T: Real>(
        &self,
        f: &Forward<'_, T>,
        skip: Var,
        query_below: Var,
    ) -> Result<GateOutput> {
        let tape = f.tape();
        let qs = tape.shape(query_below);
        let want = f.store().get(self.adapter.weight).shape()[1];
        if qs.len() != 2 || qs[1] != want {
            return Err(Error::dim(
                "skip_gate",
                format!("query {qs:?} does not fit adapter input width {want}"),
            ));
        }
        let query = self.adapter.forward(f, query_below)?;
        let pooled = self.pool.forward(f, skip, Some(query))?.output;
        let gate = tape.sigmoid(pooled)?;
        let gated = tape.scale_channels(skip, gate)?;
        Ok(GateOutput {
            gated,
            pooled,
            query,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TransUnet {
    pub config: UNetConfig,
    pub encoder: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    pub embed: Conv2d,
    pub bottleneck_pool: AttentionPool,
    /// Gates indexed by level, shallowest first.
    pub gates: Vec<SkipGate>,
    /// Decoder stages indexed by level, shallowest first.
    pub decoder: Vec<DoubleConv>,
    pub head: Conv2d,
}

/// Every intermediate needed to audit one forward pass.
#[derive(Clone, Debug)]
pub struct UNetTrace {
    /// Pre-pool encoder outputs, shallowest first.
    pub skips: Vec<Var>,
    /// Bottleneck map after embedding and positional encoding.
    pub tokens: Var,
    pub bottleneck_query: Var,
    /// Gate outputs indexed by level, shallowest first.
    pub gates: Vec<GateOutput>,
    /// Logits `(n, 1, H, W)`.
    pub logits: Var,
}

impl TransUnet {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: UNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let depth = config.depth;
        let proj = config.use_projections;
        let mut encoder = Vec::with_capacity(depth);
        let mut c_in = 1;
        for level in 0..depth {
            let c = config.channels(level);
            encoder.push(DoubleConv::new(
                store,
                &format!("unet.enc{level}"),
                c_in,
                c,
                rng,
            ));
            c_in = c;
        }
        let cb = config.bottleneck_channels();
        let bottleneck = DoubleConv::new(store, "unet.bottleneck", c_in, cb, rng);
        let embed = Conv2d::new(store, "unet.embed", cb, cb, 1, 1, 0, true, rng);
        let bottleneck_pool = AttentionPool::new(store, "unet.attn_bottleneck", cb, proj, rng);
        let mut gates = Vec::with_capacity(depth);
        for level in 0..depth {
            let c = config.channels(level);
            let below = config.channels(level + 1);
            gates.push(SkipGate {
                adapter: Linear::new(store, &format!("unet.gate{level}.adapter"), below, c, rng),
                pool: AttentionPool::new(store, &format!("unet.gate{level}.attn"), c, proj, rng),
            });
        }
        let decoder = (0..depth)
            .map(|level| {
                let c = config.channels(level);
                DoubleConv::new(store, &format!("unet.dec{level}"), 3 * c, c, rng)
            })
            .collect();
        let head = Conv2d::new(
            store,
            "unet.head",
            config.channels(0),
            1,
            1,
            1,
            0,
            true,
            rng,
        );
        Ok(TransUnet {
            config,
            encoder,
            bottleneck,
            embed,
            bottleneck_pool,
            gates,
            decoder,
            head,
        })
    }

    /// Encoder stages; returns the pre-pool skip maps and the pooled trunk.
    pub fn encode<T: Real>(&self, f: &Forward<'_, T>, image: Var) -> Result<(Vec<Var>, Var)> {
        let tape = f.tape();
        let shape = tape.shape(image);
        let side = self.config.input_side;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != side || shape[3] != side {
            return Err(Error::dim(
                "encode",
                format!("expected (n,1,{side},{side}), got {shape:?}"),
            ));
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = image;
        for stage in &self.encoder {
            let s = stage.forward(f, h)?;
            skips.push(s);
            h = tape.maxpool2d(s, 2)?;
        }
        Ok((skips, h))
    }

    /// Bottleneck double conv, embedding, positional encoding, and the
    /// level-0 query from attention pooling over the bottleneck tokens.
    pub fn bottleneck_tokens<T: Real>(&self, f: &Forward<'_, T>, trunk: Var) -> Result<(Var, Var)> {
        let tape = f.tape();
        let h = self.bottleneck.forward(f, trunk)?;
        let e = self.embed.forward(f, h)?;
        let shape = tape.shape(e);
        let (n, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let pe = positional_encoding(c, hh, ww);
        let mut tiled = Vec::with_capacity(n * pe.len());
        for _ in 0..n {
            tiled.extend(pe.iter().map(|&v| T::of(v)));
        }
        let pe = tape.constant(&Tensor::new(shape.clone(), tiled)?)?;
        let tokens = tape.add(e, pe)?;
        let query = self.bottleneck_pool.forward(f, tokens, None)?.output;
        Ok((tokens, query))
    }

    /// Decoder from the bottleneck map and gated skips (shallowest first).
    pub fn decode<T: Real>(&self, f: &Forward<'_, T>, bottom: Var, gated: &[Var]) -> Result<Var> {
        if gated.len() != self.config.depth {
            return Err(Error::dim(
                "decode",
                format!(
                    "{} gated skips for depth {}",
                    gated.len(),
                    self.config.depth
                ),
            ));
        }
        let tape = f.tape();
        let mut h = bottom;
        for level in (0..self.config.depth).rev() {
            let up = tape.upsample2d(h, 2)?;
            let cat = tape.concat(&[up, gated[level]], 1)?;
            h = self.decoder[level].forward(f, cat)?;
        }
        self.head.forward(f, h)
    }

    /// Full pass, recording every intermediate.
    pub fn forward_trace<T: Real>(&self, f: &Forward<'_, T>, image: Var) -> Result<UNetTrace> {
        let (skips, trunk) = self.encode(f, image)?;
        let (tokens, bottleneck_query) = self.bottleneck_tokens(f, trunk)?;
        let mut query = bottleneck_query;
        let mut gates = Vec::with_capacity(skips.len());
        for level in (0..self.config.depth).rev() {
            let g = self.gates[level].forward(f, skips[level], query)?;
            query = g.pooled;
            gates.push(g);
        }
        gates.reverse();
        let gated: Vec<Var> = gates.iter().map(|g| g.gated).collect();
        let logits = self.decode(f, tokens, &gated)?;
        Ok(UNetTrace {
            skips,
            tokens,
            bottleneck_query,
            gates,
            logits,
        })
    }

    pub fn forward<T: Real>(&self, f: &Forward<'_, T>, image: Var) -> Result<Var> {
        Ok(self.forward_trace(f, image)?.logits)
    }

    /// Binary masks for a `(n, 1, H, W)` batch, one `Vec` of `{0,1}` per image.
    pub fn predict_masks<T: Real>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        threshold: f64,
    ) -> Result<Vec<Vec<u8>>> {
        let f = Forward::new(store, false);
        let x = f.tape().constant(images)?;
        let logits = self.forward(&f, x)?;
        let n = images.shape()[0];
        let values = f.tape().value(logits);
        Ok(values
            .chunks(values.len() / n)
            .map(|l| threshold_logits(l, threshold))
            .collect())
    }
}

/// `sigmoid(logit) >= threshold` per pixel.
pub fn threshold_logits<T: Real>(logits: &[T], threshold: f64) -> Vec<u8> {
    logits
        .iter()
        .map(|&z| u8::from(1.0 / (1.0 + (-z.f64()).exp()) >= threshold))
        .collect()
}

/// Mean per-pixel BCE on logits plus `dice_weight` times soft Dice loss.
pub fn seg_loss<T: Real>(
    f: &Forward<'_, T>,
    logits: Var,
    mask: &[T],
    dice_weight: f64,
) -> Result<Var> {
    let tape = f.tape();
    let bce = tape.bce_with_logits(logits, mask)?;
    if dice_weight == 0.0 {
        return Ok(bce);
    }
    let p = tape.sigmoid(logits)?;
    let dice = tape.dice_loss(p, mask, 1.0)?;
    tape.add(bce, tape.scale(dice, dice_weight)?)
}

/// Fixed 2-D sinusoidal encoding laid out `(c, h, w)`.
///
/// The first `c/2` channels encode the row and the rest the column; within
/// each half, channel `2k` is `sin(pos·ω_k)` and `2k+1` is `cos(pos·ω_k)` with
/// `ω_k = 10000^(-2k / (c/2))`.
pub fn positional_encoding(c: usize, h: usize, w: usize) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let (axis_ch, use_row) = if ch < half {
            (ch, true)
        } else {
            (ch - half, false)
        };
        let k = axis_ch / 2;
        let omega = 10000f64.powf(-2.0 * k as f64 / half as f64);
        for y in 0..h {
            for x in 0..w {
                let pos = if use_row { y } else { x } as f64;
                let a = pos * omega;
                out[(ch * h + y) * w + x] = if axis_ch % 2 == 0 { a.sin() } else { a.cos() };
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
