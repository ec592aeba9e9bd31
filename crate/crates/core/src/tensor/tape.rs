use std::cell::{Ref, RefCell};

use super::kernels::{self, gemm, Conv2dGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        b_shared: bool,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
        batch: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    Gap {
        x: Var,
        hw: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
        len: usize,
        inner: usize,
    },
    ScaleChannels {
        x: Var,
        g: Var,
        inner: usize,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    Bce {
        p: Var,
        y: Vec<T>,
        eps: T,
    },
    BceLogits {
        z: Var,
        y: Vec<T>,
    },
    Dice {
        p: Var,
        y: Vec<T>,
        smooth: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in topological order for reverse-mode differentiation.
///
/// Values are immutable once recorded. A tape belongs to one thread.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

/// Per-channel `(mean, biased variance)` of a training-mode batch norm.
pub type BatchStats<T> = (Vec<T>, Vec<T>);

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

/// Extent bookkeeping for `(c,h,w)` or `(n,c,h,w)` image tensors.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(
            op,
            format!("expected (c,h,w) or (n,c,h,w), got {shape:?}"),
        )),
    }
}

fn image_shape(like: &[usize], n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Records `t` as a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf from raw parts.
    pub fn input(&self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.into_data(),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn constant(&self, t: &Tensor<T>) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            false,
        )
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [T]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone())
            .expect("recorded nodes are shape-consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Matrix product `(m,k)·(k,n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(
                "matmul",
                format!("expected matrices, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {sa:?} vs {sb:?}"),
            ));
        }
        self.record_matmul(a, b, 1, m, k, n, ta, tb, true, vec![m, n])
    }

    /// Batched product `(B,m,k)·(B,k,n)`, or `(B,m,k)·(k,n)` with a shared
    /// right operand. Transposition applies to the trailing two axes.
    pub fn bmm(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(Error::dim("bmm", format!("got {sa:?} and {sb:?}")));
        }
        let batch = sa[0];
        let b_shared = sb.len() == 2;
        if !b_shared && sb[0] != batch {
            return Err(Error::dim(
                "bmm",
                format!("batch mismatch {sa:?} vs {sb:?}"),
            ));
        }
        let (r0, r1) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (r1, r0) } else { (r0, r1) };
        if k != k2 {
            return Err(Error::dim(
                "bmm",
                format!("inner dimensions disagree: {sa:?} vs {sb:?}"),
            ));
        }
        self.record_matmul(a, b, batch, m, k, n, ta, tb, b_shared, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn record_matmul(
        &self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        b_shared: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let mut out = vec![T::zero(); batch * m * n];
            for s in 0..batch {
                let bo = if b_shared { 0 } else { s * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &av[s * m * k..(s + 1) * m * k],
                    ta,
                    &bv[bo..bo + k * n],
                    tb,
                    false,
                    &mut out[s * m * n..(s + 1) * m * n],
                );
            }
            out
        };
        let needs = self.needs(&[a, b]);
        self.push(
            "matmul",
            shape,
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
                b_shared,
            },
            needs,
        )
    }

    /// Cross-correlation of `(c_in,h,w)` or `(n,c_in,h,w)` input with
    /// `(c_out,c_in,kh,kw)` kernels and an optional per-output-channel bias.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (n, c, h, wd) = image_dims("conv2d", &sx)?;
        let [c_out, c_in, kh, kw] = sw[..] else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel shape {sw:?} is not rank 4"),
            ));
        };
        if c_in != c {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} has {c} channels, kernels {sw:?} expect {c_in}"),
            ));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [c_out] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {sb:?} vs {c_out} kernels"),
                ));
            }
        }
        let geom = Conv2dGeom::new(c_in, h, wd, c_out, kh, kw, stride, pad)?;
        let value = {
            let nodes = self.nodes.borrow();
            kernels::conv2d_forward(
                &nodes[x.0].value,
                &nodes[w.0].value,
                bias.map(|b| nodes[b.0].value.as_slice()),
                &geom,
                n,
            )
        };
        let mut deps = vec![x, w];
        deps.extend(bias);
        let needs = self.needs(&deps);
        self.push(
            "conv2d",
            image_shape(&sx, n, c_out, geom.ho, geom.wo),
            value,
            Op::Conv {
                x,
                w,
                b: bias,
                geom,
                batch: n,
            },
            needs,
        )
    }

    /// Non-overlapping max pooling; extents must divide by `window`.
    pub fn maxpool2d(&self, x: Var, window: usize) -> Result<Var> {
        let sx = self.shape(x);
        let (_, _, h, w) = image_dims("maxpool2d", &sx)?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::dim(
                "maxpool2d",
                format!("extent {h}x{w} is not divisible by window {window}"),
            ));
        }
        self.maxpool2d_strided(x, window, window, 0)
    }

    /// General max pooling with padding treated as `-inf`.
    pub fn maxpool2d_strided(
        &self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x);
        let (n, c, h, w) = image_dims("maxpool2d", &sx)?;
        if pad >= kernel {
            return Err(Error::dim(
                "maxpool2d",
                "padding must be smaller than the window",
            ));
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv_out_extent(h, kernel, stride, pad),
            kernels::conv_out_extent(w, kernel, stride, pad),
        ) else {
            return Err(Error::dim("maxpool2d", format!("empty output on {h}x{w}")));
        };
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            kernels::maxpool_forward(&nodes[x.0].value, n * c, h, w, kernel, stride, pad, ho, wo)
        };
        let needs = self.needs(&[x]);
        self.push(
            "maxpool2d",
            image_shape(&sx, n, c, ho, wo),
            value,
            Op::MaxPool { x, argmax },
            needs,
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample2d(&self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::dim("upsample2d", "factor must be at least 1"));
        }
        let sx = self.shape(x);
        let (n, c, h, w) = image_dims("upsample2d", &sx)?;
        let value = {
            let nodes = self.nodes.borrow();
            kernels::upsample_forward(&nodes[x.0].value, n * c, h, w, factor)
        };
        let needs = self.needs(&[x]);
        self.push(
            "upsample2d",
            image_shape(&sx, n, c, h * factor, w * factor),
            value,
            Op::Upsample {
                x,
                planes: n * c,
                h,
                w,
                factor,
            },
            needs,
        )
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let node = &nodes[x.0];
            let v = node.value.iter().map(|&z| z.max(T::zero())).collect();
            (node.shape.clone(), v)
        };
        let needs = self.needs(&[x]);
        self.push("relu", shape, value, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let node = &nodes[x.0];
            let v = node.value.iter().map(|&z| sigmoid(z)).collect();
            (node.shape.clone(), v)
        };
        let needs = self.needs(&[x]);
        self.push("sigmoid", shape, value, Op::Sigmoid { x }, needs)
    }

    /// Per-channel normalisation of `(n,c,h,w)` (or `(n,c)`).
    ///
    /// In training mode batch statistics are used and returned as
    /// `(mean, biased variance)` so the caller can update running averages;
    /// otherwise the supplied `running` statistics are applied.
    pub fn batchnorm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::dim(
                "batchnorm2d",
                format!("input {sx:?} lacks a channel axis"),
            ));
        }
        let (batch, channels) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim(
                "batchnorm2d",
                format!("affine params must be [{channels}]"),
            ));
        }
        let m = batch * inner;
        let train = running.is_none();
        if train && m < 2 {
            return Err(Error::dim(
                "batchnorm2d",
                format!("training statistics need n*h*w >= 2, got {m}"),
            ));
        }
        let eps = T::of(eps);
        let (value, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
            let mut mean = vec![T::zero(); channels];
            let mut var = vec![T::zero(); channels];
            match running {
                Some((rm, rv)) => {
                    mean.copy_from_slice(rm);
                    var.copy_from_slice(rv);
                }
                None => {
                    let mf = T::of(m as f64);
                    for ch in 0..channels {
                        let mut s = T::zero();
                        for bi in 0..batch {
                            let off = (bi * channels + ch) * inner;
                            s = xv[off..off + inner].iter().fold(s, |a, &v| a + v);
                        }
                        let mu = s / mf;
                        let mut q = T::zero();
                        for bi in 0..batch {
                            let off = (bi * channels + ch) * inner;
                            q = xv[off..off + inner]
                                .iter()
                                .fold(q, |a, &v| a + (v - mu) * (v - mu));
                        }
                        mean[ch] = mu;
                        var[ch] = q / mf;
                    }
                }
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); xv.len()];
            let mut out = vec![T::zero(); xv.len()];
            for bi in 0..batch {
                for ch in 0..channels {
                    let off = (bi * channels + ch) * inner;
                    for i in off..off + inner {
                        let z = (xv[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = z;
                        out[i] = g[ch] * z + b[ch];
                    }
                }
            }
            let stats = train.then_some((mean, var));
            (out, xhat, inv_std, stats)
        };
        let needs = self.needs(&[x, gamma, beta]);
        let v = self.push(
            "batchnorm2d",
            sx,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                batch,
                channels,
                inner,
                xhat,
                inv_std,
                train,
            },
            needs,
        )?;
        Ok((v, stats))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let (shape, value, n) = {
            let nodes = self.nodes.borrow();
            let node = &nodes[x.0];
            let n = *node.shape.last().expect("tensors have rank >= 1");
            let mut out = node.value.clone();
            for row in out.chunks_mut(n) {
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            (node.shape.clone(), out, n)
        };
        let needs = self.needs(&[x]);
        self.push("softmax", shape, value, Op::Softmax { x, n }, needs)
    }

    /// Global average pooling: `(c,h,w) -> (c)`, `(n,c,h,w) -> (n,c)`.
    pub fn gap(&self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let (n, c, h, w) = image_dims("gap", &sx)?;
        let hw = h * w;
        let value = {
            let nodes = self.nodes.borrow();
            let inv = T::one() / T::of(hw as f64);
            nodes[x.0]
                .value
                .chunks(hw)
                .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv)
                .collect()
        };
        let shape = if sx.len() == 3 { vec![c] } else { vec![n, c] };
        let needs = self.needs(&[x]);
        self.push("gap", shape, value, Op::Gap { x, hw }, needs)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let numel: usize = shape.iter().product();
        if numel != sx.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {sx:?} to {shape:?}"),
            ));
        }
        let value = self.nodes.borrow()[x.0].value.clone();
        let needs = self.needs(&[x]);
        self.push("reshape", shape.to_vec(), value, Op::Reshape { x }, needs)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "nothing to concatenate"))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::dim(
                    "concat",
                    format!("off-axis mismatch: {base:?} vs {s:?} on axis {axis}"),
                ));
            }
            widths.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(outer * widths.iter().sum::<usize>());
            for o in 0..outer {
                for (&p, &wd) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value[o * wd..(o + 1) * wd]);
                }
            }
            out
        };
        let mut shape = base.clone();
        shape[axis] = total_axis;
        let needs = self.needs(parts);
        self.push(
            "concat",
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            needs,
        )
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("add", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .iter()
                .zip(&nodes[b.0].value)
                .map(|(&x, &y)| x + y)
                .collect()
        };
        let needs = self.needs(&[a, b]);
        self.push("add", shape, value, Op::Add { a, b }, needs)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same_shape("mul", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .iter()
                .zip(&nodes[b.0].value)
                .map(|(&x, &y)| x * y)
                .collect()
        };
        let needs = self.needs(&[a, b]);
        self.push("mul", shape, value, Op::Mul { a, b }, needs)
    }

    /// Adds a bias vector broadcast along `axis`.
    pub fn add_bias(&self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if axis >= sx.len() || sb != [sx[axis]] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {sb:?} does not match axis {axis} of {sx:?}"),
            ));
        }
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let value = {
            let nodes = self.nodes.borrow();
            let bv = &nodes[b.0].value;
            nodes[x.0]
                .value
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bv[(i / inner) % len])
                .collect()
        };
        let needs = self.needs(&[x, b]);
        self.push(
            "add_bias",
            sx,
            value,
            Op::AddBias { x, b, len, inner },
            needs,
        )
    }

    /// Multiplies each `(n,c)` plane of `x` by the matching entry of `g`.
    pub fn scale_channels(&self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        let (n, c, h, w) = image_dims("scale_channels", &sx)?;
        let want = if sx.len() == 3 { vec![c] } else { vec![n, c] };
        if sg != want {
            return Err(Error::dim(
                "scale_channels",
                format!("gate {sg:?} does not match {sx:?}"),
            ));
        }
        let inner = h * w;
        let value = {
            let nodes = self.nodes.borrow();
            let gv = &nodes[g.0].value;
            nodes[x.0]
                .value
                .iter()
                .enumerate()
                .map(|(i, &v)| v * gv[i / inner])
                .collect()
        };
        let needs = self.needs(&[x, g]);
        self.push(
            "scale_channels",
            sx,
            value,
            Op::ScaleChannels { x, g, inner },
            needs,
        )
    }

    pub fn scale(&self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let node = &nodes[x.0];
            (
                node.shape.clone(),
                node.value.iter().map(|&v| v * s).collect(),
            )
        };
        let needs = self.needs(&[x]);
        self.push("scale", shape, value, Op::Scale { x, s }, needs)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            vec![nodes[x.0].value.iter().fold(T::zero(), |a, &b| a + b)]
        };
        let needs = self.needs(&[x]);
        self.push("sum", vec![1], value, Op::Sum { x }, needs)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.nodes.borrow()[x.0].value.len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Binary cross-entropy on probabilities, clamped to `[eps, 1-eps]`.
    pub fn bce(&self, p: Var, targets: &[T], eps: f64) -> Result<Var> {
        let n = self.check_targets("bce", p, targets)?;
        let eps = T::of(eps);
        let value = {
            let nodes = self.nodes.borrow();
            let mut total = T::zero();
            for (&pv, &y) in nodes[p.0].value.iter().zip(targets) {
                let pc = pv.max(eps).min(T::one() - eps);
                total = total + y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
            }
            vec![-total / T::of(n as f64)]
        };
        let needs = self.needs(&[p]);
        self.push(
            "bce",
            vec![1],
            value,
            Op::Bce {
                p,
                y: targets.to_vec(),
                eps,
            },
            needs,
        )
    }

    /// Mean binary cross-entropy evaluated directly on logits.
    pub fn bce_with_logits(&self, z: Var, targets: &[T]) -> Result<Var> {
        let n = self.check_targets("bce_with_logits", z, targets)?;
        let value = {
            let nodes = self.nodes.borrow();
            let mut total = T::zero();
            for (&zv, &y) in nodes[z.0].value.iter().zip(targets) {
                total = total + zv.max(T::zero()) - zv * y + (T::one() + (-zv.abs()).exp()).ln();
            }
            vec![total / T::of(n as f64)]
        };
        let needs = self.needs(&[z]);
        self.push(
            "bce_with_logits",
            vec![1],
            value,
            Op::BceLogits {
                z,
                y: targets.to_vec(),
            },
            needs,
        )
    }

    /// Soft Dice loss `1 - (2Σpy + s) / (Σp + Σy + s)` over probabilities.
    pub fn dice_loss(&self, p: Var, targets: &[T], smooth: f64) -> Result<Var> {
        self.check_targets("dice_loss", p, targets)?;
        let smooth = T::of(smooth);
        let value = {
            let nodes = self.nodes.borrow();
            let (num, den) = dice_terms(&nodes[p.0].value, targets, smooth);
            vec![T::one() - num / den]
        };
        let needs = self.needs(&[p]);
        self.push(
            "dice_loss",
            vec![1],
            value,
            Op::Dice {
                p,
                y: targets.to_vec(),
                smooth,
            },
            needs,
        )
    }

    fn check_targets(&self, op: &'static str, x: Var, targets: &[T]) -> Result<usize> {
        let n = self.nodes.borrow()[x.0].value.len();
        if targets.is_empty() {
            return Err(Error::Invalid(format!("{op}: empty batch")));
        }
        if n != targets.len() {
            return Err(Error::dim(
                op,
                format!("{n} predictions vs {} targets", targets.len()),
            ));
        }
        Ok(n)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every
    /// gradient-requiring leaf. The tape is left intact, so calling this twice
    /// yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let ls = &nodes[loss.0].shape;
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            backprop(&nodes, node, &dy, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(nodes.iter()) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *g = None;
            } else if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn dice_terms<T: Real>(p: &[T], y: &[T], smooth: T) -> (T, T) {
    let mut inter = T::zero();
    let mut total = T::zero();
    for (&pv, &yv) in p.iter().zip(y) {
        inter = inter + pv * yv;
        total = total + pv + yv;
    }
    (T::of(2.0) * inter + smooth, total + smooth)
}

/// Grad buffer for `v`, allocated on first touch. `None` when `v` does not
/// need gradients.
fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
            b_shared,
        } => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(da) = slot(nodes, grads, a) {
                for s in 0..batch {
                    let bo = if b_shared { 0 } else { s * k * n };
                    let bs = &bv[bo..bo + k * n];
                    let dc = &dy[s * m * n..(s + 1) * m * n];
                    let da = &mut da[s * m * k..(s + 1) * m * k];
                    match (ta, tb) {
                        (false, false) => gemm(m, n, k, dc, false, bs, true, true, da),
                        (true, false) => gemm(k, n, m, bs, false, dc, true, true, da),
                        (false, true) => gemm(m, n, k, dc, false, bs, false, true, da),
                        (true, true) => gemm(k, n, m, bs, true, dc, true, true, da),
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for s in 0..batch {
                    let bo = if b_shared { 0 } else { s * k * n };
                    let as_ = &av[s * m * k..(s + 1) * m * k];
                    let dc = &dy[s * m * n..(s + 1) * m * n];
                    let db = &mut db[bo..bo + k * n];
                    match (ta, tb) {
                        (false, false) => gemm(k, m, n, as_, true, dc, false, true, db),
                        (true, false) => gemm(k, m, n, as_, false, dc, false, true, db),
                        (false, true) => gemm(n, m, k, dc, true, as_, false, true, db),
                        (true, true) => gemm(n, m, k, dc, true, as_, true, true, db),
                    }
                }
            }
        }
        &Op::Conv {
            x,
            w,
            b,
            ref geom,
            batch,
        } => {
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            // Split the borrows: the three targets are distinct nodes.
            let mut dx = slot(nodes, grads, x).map(std::mem::take);
            let mut dw = slot(nodes, grads, w).map(std::mem::take);
            let mut db = b.and_then(|b| slot(nodes, grads, b).map(std::mem::take));
            kernels::conv2d_backward(
                xv,
                wv,
                dy,
                geom,
                batch,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(g) = dx {
                grads[x.0] = Some(g);
            }
            if let Some(g) = dw {
                grads[w.0] = Some(g);
            }
            if let (Some(g), Some(b)) = (db, b) {
                grads[b.0] = Some(g);
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (&i, &g) in argmax.iter().zip(dy) {
                    dx[i] = dx[i] + g;
                }
            }
        }
        &Op::Upsample {
            x,
            planes,
            h,
            w,
            factor,
        } => {
            if let Some(dx) = slot(nodes, grads, x) {
                kernels::upsample_backward(dy, planes, h, w, factor, dx);
            }
        }
        &Op::Relu { x } => {
            let xv = &nodes[x.0].value;
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(xv) {
                    if v > T::zero() {
                        *d = *d + g;
                    }
                }
            }
        }
        &Op::Sigmoid { x } => {
            let yv = &node.value;
            if let Some(dx) = slot(nodes, grads, x) {
                for ((d, &g), &y) in dx.iter_mut().zip(dy).zip(yv) {
                    *d = *d + g * y * (T::one() - y);
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            batch,
            channels,
            inner,
            xhat,
            inv_std,
            train,
        } => {
            let (batch, channels, inner) = (*batch, *channels, *inner);
            let mut sum_dy = vec![T::zero(); channels];
            let mut sum_dy_xhat = vec![T::zero(); channels];
            for bi in 0..batch {
                for ch in 0..channels {
                    let off = (bi * channels + ch) * inner;
                    for i in off..off + inner {
                        sum_dy[ch] = sum_dy[ch] + dy[i];
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * xhat[i];
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                add_into(dg, &sum_dy_xhat);
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                add_into(db, &sum_dy);
            }
            let g = &nodes[gamma.0].value;
            if let Some(dx) = slot(nodes, grads, *x) {
                let mf = T::of((batch * inner) as f64);
                for bi in 0..batch {
                    for ch in 0..channels {
                        let off = (bi * channels + ch) * inner;
                        let scale = g[ch] * inv_std[ch];
                        for i in off..off + inner {
                            let term = if *train {
                                (mf * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]) / mf
                            } else {
                                dy[i]
                            };
                            dx[i] = dx[i] + scale * term;
                        }
                    }
                }
            }
        }
        &Op::Softmax { x, n } => {
            let yv = &node.value;
            if let Some(dx) = slot(nodes, grads, x) {
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(dy.chunks(n)).zip(yv.chunks(n)) {
                    let dot = grow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + y * (g - dot);
                    }
                }
            }
        }
        &Op::Gap { x, hw } => {
            if let Some(dx) = slot(nodes, grads, x) {
                let inv = T::one() / T::of(hw as f64);
                for (plane, &g) in dx.chunks_mut(hw).zip(dy) {
                    plane.iter_mut().for_each(|d| *d = *d + g * inv);
                }
            }
        }
        &Op::Reshape { x } => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, dy);
            }
        }
        Op::Concat {
            parts,
            outer,
            widths,
        } => {
            let total: usize = widths.iter().sum();
            let mut start = 0;
            for (&p, &wd) in parts.iter().zip(widths) {
                if let Some(dp) = slot(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = &dy[o * total + start..o * total + start + wd];
                        add_into(&mut dp[o * wd..(o + 1) * wd], src);
                    }
                }
                start += wd;
            }
        }
        &Op::Add { a, b } => {
            if let Some(da) = slot(nodes, grads, a) {
                add_into(da, dy);
            }
            if let Some(db) = slot(nodes, grads, b) {
                add_into(db, dy);
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &g), &v) in da.iter_mut().zip(dy).zip(bv) {
                    *d = *d + g * v;
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, &g), &v) in db.iter_mut().zip(dy).zip(av) {
                    *d = *d + g * v;
                }
            }
        }
        &Op::AddBias { x, b, len, inner } => {
            if let Some(dx) = slot(nodes, grads, x) {
                add_into(dx, dy);
            }
            if let Some(db) = slot(nodes, grads, b) {
                for (i, &g) in dy.iter().enumerate() {
                    let j = (i / inner) % len;
                    db[j] = db[j] + g;
                }
            }
        }
        &Op::ScaleChannels { x, g, inner } => {
            let (xv, gv) = (&nodes[x.0].value, &nodes[g.0].value);
            if let Some(dx) = slot(nodes, grads, x) {
                for (i, (d, &gr)) in dx.iter_mut().zip(dy).enumerate() {
                    *d = *d + gr * gv[i / inner];
                }
            }
            if let Some(dg) = slot(nodes, grads, g) {
                for (i, (&gr, &v)) in dy.iter().zip(xv).enumerate() {
                    dg[i / inner] = dg[i / inner] + gr * v;
                }
            }
        }
        &Op::Scale { x, s } => {
            if let Some(dx) = slot(nodes, grads, x) {
                for (d, &g) in dx.iter_mut().zip(dy) {
                    *d = *d + g * s;
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().for_each(|d| *d = *d + dy[0]);
            }
        }
        Op::Bce { p, y, eps } => {
            let pv = &nodes[p.0].value;
            if let Some(dp) = slot(nodes, grads, *p) {
                let scale = dy[0] / T::of(y.len() as f64);
                let hi = T::one() - *eps;
                for ((d, &pr), &t) in dp.iter_mut().zip(pv).zip(y) {
                    if pr > *eps && pr < hi {
                        *d = *d - scale * (t / pr - (T::one() - t) / (T::one() - pr));
                    }
                }
            }
        }
        Op::BceLogits { z, y } => {
            let zv = &nodes[z.0].value;
            if let Some(dz) = slot(nodes, grads, *z) {
                let scale = dy[0] / T::of(y.len() as f64);
                for ((d, &zz), &t) in dz.iter_mut().zip(zv).zip(y) {
                    *d = *d + scale * (sigmoid(zz) - t);
                }
            }
        }
        Op::Dice { p, y, smooth } => {
            let pv = &nodes[p.0].value;
            let (num, den) = dice_terms(pv, y, *smooth);
            if let Some(dp) = slot(nodes, grads, *p) {
                let two = T::of(2.0);
                for (d, &t) in dp.iter_mut().zip(y) {
                    *d = *d - dy[0] * (two * t * den - num) / (den * den);
                }
            }
        }
    }
}
