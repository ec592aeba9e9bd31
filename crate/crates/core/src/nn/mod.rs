//! Parameter storage and the small set of layers the models are built from.

mod layers;
mod store;

pub use layers::{BatchNorm2d, Conv2d, Linear};
pub use store::{Forward, Param, ParamId, ParamKind, ParamStore, Pending};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{Real, Tensor};

/// Uniform initialisation in `[-bound, bound]` with `bound = sqrt(gain * 3 / fan_in)`.
///
/// `gain = 2` is Kaiming-uniform for ReLU layers, `gain = 1` is LeCun-uniform.
pub fn init_uniform<T: Real, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (gain * 3.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}
