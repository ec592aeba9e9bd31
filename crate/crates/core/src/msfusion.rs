//! Multi-scale fusion classifier: 1×1 channel reductions of the backbone
//! maps, GAP-query attention pooling per branch, and a sigmoid dense head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, Linear, ParamStore};
use crate::tensor::{Real, Var};

/// Learnable query/key/value/output maps of one attention pool.
#[derive(Clone, Debug)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Single-query scaled dot-product attention over the spatial positions of a
/// `(n, c, h, w)` map. Each position is a token whose features are its
/// `c`-dimensional channel vector; `d_k = c`.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub d_k: usize,
    pub proj: Option<Projections>,
}

/// Pooled `(n, c)` output plus the `(n, 1, h·w)` attention weights.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub output: Var,
    pub weights: Var,
}

impl AttentionPool {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_k: usize,
        use_projections: bool,
        rng: &mut R,
    ) -> Self {
        let proj = use_projections.then(|| Projections {
            q: Linear::new(store, &format!("{name}.w_q"), d_k, d_k, rng),
            k: Linear::new(store, &format!("{name}.w_k"), d_k, d_k, rng),
            v: Linear::new(store, &format!("{name}.w_v"), d_k, d_k, rng),
            o: Linear::new(store, &format!("{name}.w_o"), d_k, d_k, rng),
        });
        AttentionPool { d_k, proj }
    }

    pub fn param_count(&self) -> usize {
        if self.proj.is_some() {
            4 * (self.d_k * self.d_k + self.d_k)
        } else {
            0
        }
    }

    /// Pools `x` with the GAP of `x` as query, or with an external `(n, c)` query.
    pub fn forward<T: Real>(
        &self,
        f: &Forward<'_, T>,
        x: Var,
        query: Option<Var>,
    ) -> Result<Pooled> {
        let tape = f.tape();
        let shape = tape.shape(x);
        let [n, c, h, w] = shape[..] else {
            return Err(Error::dim(
                "attention_pool",
                format!("expected (n,c,h,w), got {shape:?}"),
            ));
        };
        if c != self.d_k {
            return Err(Error::dim(
                "attention_pool",
                format!("{c} channels but d_k = {}", self.d_k),
            ));
        }
        let q = match query {
            Some(q) => {
                let qs = tape.shape(q);
                if qs != [n, c] {
                    return Err(Error::dim(
                        "attention_pool",
                        format!("query {qs:?} does not match ({n}, {c})"),
                    ));
                }
                q
            }
            None => tape.gap(x)?,
        };
        let (q, keys, values) = match &self.proj {
            Some(p) => (
                p.q.forward(f, q)?,
                token_linear(f, &p.k, x, c)?,
                token_linear(f, &p.v, x, c)?,
            ),
            None => (q, x, x),
        };
        let tokens = h * w;
        let q3 = tape.reshape(q, &[n, 1, c])?;
        let k3 = tape.reshape(keys, &[n, c, tokens])?;
        let scores = tape.bmm(q3, false, k3, false)?;
        let scores = tape.scale(scores, 1.0 / (self.d_k as f64).sqrt())?;
        let weights = tape.softmax(scores)?;
        let v3 = tape.reshape(values, &[n, c, tokens])?;
        let pooled = tape.bmm(v3, false, weights, true)?;
        let mut output = tape.reshape(pooled, &[n, c])?;
        if let Some(p) = &self.proj {
            output = p.o.forward(f, output)?;
        }
        Ok(Pooled { output, weights })
    }
}

/// Applies a `c×c` dense map to every spatial token (a 1×1 convolution).
fn token_linear<T: Real>(f: &Forward<'_, T>, lin: &Linear, x: Var, c: usize) -> Result<Var> {
    let tape = f.tape();
    let w = tape.reshape(f.param(lin.weight)?, &[c, c, 1, 1])?;
    let b = f.param(lin.bias)?;
    tape.conv2d(x, w, Some(b), 1, 0)
}

/// Which backbone blocks feed the head, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    /// Block 4 alone.
    B4Only,
    /// Block 4 plus the channel concatenation of reduced blocks 2 and 3.
    Combined,
    /// Block 4 plus each selected intermediate block as its own branch.
    Separate { b2: bool, b3: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub c_b2: usize,
    pub c_b3: usize,
    pub c_b4: usize,
    /// Reduced channels of block 4.
    pub r4: usize,
    /// Reduced channels of each of blocks 2 and 3.
    pub r23: usize,
    pub use_projections: bool,
    /// Attention pooling when set, plain GAP otherwise.
    pub use_transformer: bool,
    pub branches: Branches,
}

impl FusionConfig {
    pub fn paper() -> Self {
        FusionConfig {
            c_b2: 512,
            c_b3: 1024,
            c_b4: 2048,
            r4: 64,
            r23: 32,
            use_projections: true,
            use_transformer: true,
            branches: Branches::Combined,
        }
    }

    pub fn desk() -> Self {
        FusionConfig {
            c_b2: 32,
            c_b3: 64,
            c_b4: 128,
            r4: 16,
            r23: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.c_b2, self.c_b3, self.c_b4, self.r4, self.r23];
        if counts.contains(&0) {
            return Err(Error::Config(
                "fusion channel counts must be positive".into(),
            ));
        }
        if self.branches == Branches::Combined && 2 * self.r23 != self.r4 {
            return Err(Error::Config(format!(
                "merged map has {} channels but the block-4 reduction has {}",
                2 * self.r23,
                self.r4
            )));
        }
        Ok(())
    }

    /// Channel width `d_k` of each branch, block 4 first.
    pub fn branch_widths(&self) -> Vec<usize> {
        let mut w = vec![self.r4];
        match self.branches {
            Branches::B4Only => {}
            Branches::Combined => w.push(2 * self.r23),
            Branches::Separate { b2, b3 } => {
                if b2 {
                    w.push(self.r23);
                }
                if b3 {
                    w.push(self.r23);
                }
            }
        }
        w
    }

    pub fn head_width(&self) -> usize {
        self.branch_widths().iter().sum()
    }

    fn uses_b2(&self) -> bool {
        matches!(
            self.branches,
            Branches::Combined | Branches::Separate { b2: true, .. }
        )
    }

    fn uses_b3(&self) -> bool {
        matches!(
            self.branches,
            Branches::Combined | Branches::Separate { b3: true, .. }
        )
    }
}

/// The fusion classifier's parameters, registered under `fusion.`.
#[derive(Clone, Debug)]
pub struct MsFusion {
    pub config: FusionConfig,
    pub reduce_b4: Conv2d,
    pub reduce_b2: Option<Conv2d>,
    pub reduce_b3: Option<Conv2d>,
    /// One pool per branch (block 4 first), absent when pooling is plain GAP.
    pub pools: Vec<Option<AttentionPool>>,
    pub head: Linear,
}

/// Intermediate values of one classification forward pass.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Reduced block-4 map `(n, r4, h, w)`.
    pub b4_reduced: Var,
    /// Merged map `(n, 2·r23, h, w)` in combined mode.
    pub merged: Option<Var>,
    /// Pooled branch vectors, block 4 first.
    pub branch_features: Vec<Var>,
    /// Per-branch attention weights (empty with plain GAP).
    pub attention: Vec<Var>,
    /// Concatenated feature vector `(n, head_width)`.
    pub features: Var,
    /// Probabilities `(n)`.
    pub prob: Var,
}

pub const PREFIX: &str = "fusion.";

impl MsFusion {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: FusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let conv = |store: &mut ParamStore<T>, rng: &mut R, name: &str, ci, co| {
            Conv2d::new(store, &format!("fusion.{name}"), ci, co, 1, 1, 0, true, rng)
        };
        let reduce_b4 = conv(store, rng, "reduce4", config.c_b4, config.r4);
        let reduce_b2 = config
            .uses_b2()
            .then(|| conv(store, rng, "reduce2", config.c_b2, config.r23));
        let reduce_b3 = config
            .uses_b3()
            .then(|| conv(store, rng, "reduce3", config.c_b3, config.r23));
        let names: Vec<&str> = match config.branches {
            Branches::B4Only => vec!["attn4"],
            Branches::Combined => vec!["attn4", "attn_merged"],
            Branches::Separate { b2, b3 } => {
                let mut v = vec!["attn4"];
                if b2 {
                    v.push("attn2");
                }
                if b3 {
                    v.push("attn3");
                }
                v
            }
        };
        let pools = names
            .iter()
            .zip(config.branch_widths())
            .map(|(name, d_k)| {
                config.use_transformer.then(|| {
                    AttentionPool::new(
                        store,
                        &format!("fusion.{name}"),
                        d_k,
                        config.use_projections,
                        rng,
                    )
                })
            })
            .collect();
        let head = Linear::new(store, "fusion.head", config.head_width(), 1, rng);
        Ok(MsFusion {
            config,
            reduce_b4,
            reduce_b2,
            reduce_b3,
            pools,
            head,
        })
    }

    /// `B'⁴`: 1×1 reduction of block 4 to `r4` channels.
    pub fn reduce_b4<T: Real>(&self, f: &Forward<'_, T>, b4: Var) -> Result<Var> {
        self.check_channels(f, "reduce_b4", b4, self.config.c_b4)?;
        self.reduce_b4.forward(f, b4)
    }

    /// `B_merged = Cat(B'², B'³)` along channels, `B'²` first.
    pub fn reduce_and_merge<T: Real>(&self, f: &Forward<'_, T>, b2: Var, b3: Var) -> Result<Var> {
        let (r2, r3) = self.reduced_b2_b3(f, Some(b2), Some(b3))?;
        let (Some(r2), Some(r3)) = (r2, r3) else {
            return Err(Error::Invalid(
                "merge needs both block-2 and block-3 reductions".into(),
            ));
        };
        f.tape().concat(&[r2, r3], 1)
    }

    fn reduced_b2_b3<T: Real>(
        &self,
        f: &Forward<'_, T>,
        b2: Option<Var>,
        b3: Option<Var>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        if let (Some(b2), Some(b3)) = (b2, b3) {
            let (s2, s3) = (f.tape().shape(b2), f.tape().shape(b3));
            if s2.len() != s3.len() || s2[s2.len() - 2..] != s3[s3.len() - 2..] {
                return Err(Error::dim(
                    "reduce_and_merge",
                    format!("spatial extents differ: {s2:?} vs {s3:?}"),
                ));
            }
        }
        let r2 = match (&self.reduce_b2, b2) {
            (Some(conv), Some(b2)) => {
                self.check_channels(f, "reduce_and_merge", b2, self.config.c_b2)?;
                Some(conv.forward(f, b2)?)
            }
            _ => None,
        };
        let r3 = match (&self.reduce_b3, b3) {
            (Some(conv), Some(b3)) => {
                self.check_channels(f, "reduce_and_merge", b3, self.config.c_b3)?;
                Some(conv.forward(f, b3)?)
            }
            _ => None,
        };
        Ok((r2, r3))
    }

    fn check_channels<T: Real>(
        &self,
        f: &Forward<'_, T>,
        op: &'static str,
        x: Var,
        want: usize,
    ) -> Result<()> {
        let s = f.tape().shape(x);
        if s.len() != 4 || s[1] != want {
            return Err(Error::dim(
                op,
                format!("expected (n,{want},h,w), got {s:?}"),
            ));
        }
        Ok(())
    }

    /// Full head: reductions, per-branch pooling, concatenation, dense, sigmoid.
    pub fn forward<T: Real>(
        &self,
        f: &Forward<'_, T>,
        b2: Var,
        b3: Var,
        b4: Var,
    ) -> Result<FusionOutput> {
        let tape = f.tape();
        let b4_reduced = self.reduce_b4(f, b4)?;
        let (r2, r3) = self.reduced_b2_b3(f, Some(b2), Some(b3))?;
        let mut maps = vec![b4_reduced];
        let mut merged = None;
        match self.config.branches {
            Branches::B4Only => {}
            Branches::Combined => {
                let m = tape.concat(
                    &[r2.expect("combined uses b2"), r3.expect("combined uses b3")],
                    1,
                )?;
                merged = Some(m);
                maps.push(m);
            }
            Branches::Separate { .. } => maps.extend(r2.into_iter().chain(r3)),
        }
        let mut branch_features = Vec::with_capacity(maps.len());
        let mut attention = Vec::new();
        for (map, pool) in maps.iter().zip(&self.pools) {
            match pool {
                Some(pool) => {
                    let p = pool.forward(f, *map, None)?;
                    branch_features.push(p.output);
                    attention.push(p.weights);
                }
                None => branch_features.push(tape.gap(*map)?),
            }
        }
        let features = tape.concat(&branch_features, 1)?;
        let logit = self.head.forward(f, features)?;
        let n = tape.shape(logit)[0];
        let prob = tape.sigmoid(tape.reshape(logit, &[n])?)?;
        Ok(FusionOutput {
            b4_reduced,
            merged,
            branch_features,
            attention,
            features,
            prob,
        })
    }
}

/// Mean binary cross-entropy of probabilities against `{0,1}` labels,
/// with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Real>(f: &Forward<'_, T>, prob: Var, labels: &[T]) -> Result<Var> {
    f.tape().bce(prob, labels, BCE_EPS)
}

pub const BCE_EPS: f64 = 1e-7;

/// Exact learnable-scalar counts by component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub reductions: usize,
    pub attention: usize,
    pub head: usize,
    /// Trainable backbone scalars (zero when frozen).
    pub backbone: usize,
    pub total: usize,
}

/// Counts trainable scalars per component from the store's naming scheme.
pub fn parameter_count<T: Real>(store: &ParamStore<T>) -> ParamCount {
    let reductions = store.count("fusion.reduce", true);
    let attention = store.count("fusion.attn", true);
    let head = store.count("fusion.head", true);
    let backbone = store.count(crate::backbone::PREFIX, true);
    ParamCount {
        reductions,
        attention,
        head,
        backbone,
        total: reductions + attention + head + backbone,
    }
}

#[cfg(test)]
mod tests;
