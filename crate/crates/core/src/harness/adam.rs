//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One Adam update of `param` at step `t >= 1`.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    hp: &AdamParams,
    t: u64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "param {} / grad {} / state {} lengths differ",
                param.len(),
                grad.len(),
                state.m.len()
            ),
        ));
    }
    if t == 0 {
        return Err(Error::Invalid("adam_step: t starts at 1".into()));
    }
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let one = T::one();
    let c1 = T::of(1.0 - hp.beta1.powf(t as f64));
    let c2 = T::of(1.0 - hp.beta2.powf(t as f64));
    let (lr, eps) = (T::of(hp.lr), T::of(hp.eps));
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable tensor of a store, consuming accumulated grads.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub params: AdamParams,
    pub t: u64,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            t: 0,
            state: Vec::new(),
        }
    }

    /// Applies one update and zeroes the gradients. Frozen tensors carry no
    /// gradient buffer and are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.t += 1;
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            let tensor = &mut p.tensor;
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let state = self.state[id.index()].get_or_insert_with(|| Moments::zeros(grad.len()));
            adam_step(tensor.data_mut(), &grad, state, &self.params, self.t)?;
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.3f64, -1.2];
        let mut s = Moments::zeros(2);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamParams::with_lr(0.1), t).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(s, Moments::zeros(2));
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        for g in [1e-3, 0.5, -7.0] {
            let mut p = vec![1.0f64];
            let mut s = Moments::zeros(1);
            let hp = AdamParams::with_lr(0.01);
            adam_step(&mut p, &[g], &mut s, &hp, 1).unwrap();
            let want = hp.lr * g.abs() / (g.abs() + hp.eps);
            assert!(((1.0 - p[0]).abs() - want).abs() < 1e-12);
            assert_eq!((1.0 - p[0]).signum(), g.signum());
        }
    }

    #[test]
    fn quadratic_trajectory_matches_reference_recurrence() {
        // f(x) = (x - 3)^2 / 2, gradient x - 3.
        let hp = AdamParams::with_lr(0.1);
        let mut x = vec![0.0f64];
        let mut s = Moments::zeros(1);
        let (mut rx, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=10u64 {
            let g = x[0] - 3.0;
            adam_step(&mut x, &[g], &mut s, &hp, t).unwrap();
            let rg = rx - 3.0;
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            rx -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-14, "step {t}");
        }
        assert!(x[0] > 0.9);
    }

    #[test]
    fn rejects_misaligned_state() {
        let mut s = Moments::<f64>::zeros(1);
        assert!(adam_step(
            &mut [0.0, 1.0],
            &[0.0, 0.0],
            &mut s,
            &AdamParams::with_lr(1.0),
            1
        )
        .is_err());
        let mut s = Moments::<f64>::zeros(1);
        assert!(adam_step(&mut [0.0], &[0.0], &mut s, &AdamParams::with_lr(1.0), 0).is_err());
    }

    #[test]
    fn store_step_skips_frozen_tensors() {
        let mut store = ParamStore::<f64>::new();
        let a = store.weight("a", Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = store.weight("frozen.b", Tensor::new([1], vec![5.0]).unwrap());
        store.set_trainable("frozen.", false);
        store.get_mut(a).accumulate_grad(&[1.0, -1.0]).unwrap();
        let mut opt = Adam::new(AdamParams::with_lr(0.5));
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(b).data(), &[5.0]);
        let moved = store.get(a).data();
        assert!((moved[0] - 0.5).abs() < 1e-6 && (moved[1] - 2.5).abs() < 1e-6);
        assert!(store.get(a).grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
