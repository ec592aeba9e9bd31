use rand::Rng;

use super::{init_uniform, Forward, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Tensor, Var};

/// 2-D convolution layer with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let w = init_uniform(&shape, c_in * kernel * kernel, 2.0, rng);
        let weight = store.weight(format!("{name}.weight"), w);
        let bias = bias.then(|| store.weight(format!("{name}.bias"), Tensor::zeros([c_out])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight)?;
        let b = self.bias.map(|b| f.param(b)).transpose()?;
        f.tape().conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Batch normalisation over the channel axis with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.weight(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.weight(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Batch statistics when `train`, running statistics otherwise.
    pub fn forward<T: Real>(&self, f: &Forward<'_, T>, x: Var, train: bool) -> Result<Var> {
        let gamma = f.param(self.gamma)?;
        let beta = f.param(self.beta)?;
        if !train {
            let store = f.store();
            let rm = store.get(self.running_mean).data();
            let rv = store.get(self.running_var).data();
            return Ok(f
                .tape()
                .batchnorm(x, gamma, beta, self.eps, Some((rm, rv)))?
                .0);
        }
        let (y, stats) = f.tape().batchnorm(x, gamma, beta, self.eps, None)?;
        if let Some((mean, var)) = stats {
            let shape = f.tape().shape(x);
            let m = shape[0] * shape[2..].iter().product::<usize>();
            let unbias = T::of(m as f64 / (m as f64 - 1.0));
            let mom = T::of(self.momentum);
            let keep = T::one() - mom;
            let store = f.store();
            let rm: Vec<T> = store
                .get(self.running_mean)
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| keep * r + mom * b)
                .collect();
            let rv: Vec<T> = store
                .get(self.running_var)
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| keep * r + mom * b * unbias)
                .collect();
            f.stage_buffer(self.running_mean, rm);
            f.stage_buffer(self.running_var, rv);
        }
        Ok(y)
    }
}

/// Dense layer `y = x·Wᵀ + b` on `(n, in)` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// LeCun-uniform weights, zero bias.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = init_uniform(&[d_out, d_in], d_in, 1.0, rng);
        Linear {
            weight: store.weight(format!("{name}.weight"), w),
            bias: store.weight(format!("{name}.bias"), Tensor::zeros([d_out])),
        }
    }

    pub fn forward<T: Real>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight)?;
        let b = f.param(self.bias)?;
        let tape = f.tape();
        let y = tape.matmul_t(x, false, w, true)?;
        tape.add_bias(y, b, 1)
    }
}
