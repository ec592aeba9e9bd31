//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to check.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.worst.is_some() && other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// A recorded evaluation: the tape, its scalar output, and the leaf recorded
/// for each input tensor (in input order).
pub struct Recorded {
    pub tape: Tape<f64>,
    pub loss: Var,
    pub leaves: Vec<Var>,
}

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to this many random coordinates per input.
    SampledPerInput(usize),
}

impl GradCheck {
    fn rel(&self, a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(self.floor)
    }

    /// Compares backward gradients of `eval` against central differences.
    pub fn run<F, R>(
        &self,
        inputs: &[Tensor<f64>],
        mut eval: F,
        coords: Coords,
        rng: &mut R,
    ) -> Result<GradReport>
    where
        F: FnMut(&[Tensor<f64>]) -> Result<Recorded>,
        R: Rng,
    {
        let rec = eval(inputs)?;
        let grads = rec.tape.backward(rec.loss)?;
        let analytic: Vec<Vec<f64>> = rec
            .leaves
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        drop(rec);

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut report = GradReport::default();
        for i in 0..inputs.len() {
            if !inputs[i].requires_grad() {
                continue;
            }
            let n = inputs[i].numel();
            let idxs: Vec<usize> = match coords {
                Coords::All => (0..n).collect(),
                Coords::SampledPerInput(k) if k >= n => (0..n).collect(),
                Coords::SampledPerInput(k) => sample(rng, n, k).into_vec(),
            };
            for j in idxs {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = scalar(&eval(&work)?)?;
                work[i].data_mut()[j] = orig - self.step;
                let minus = scalar(&eval(&work)?)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i][j];
                let err = self.rel(a, numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
        Ok(report)
    }

    /// Convenience wrapper for a graph built directly from leaves.
    pub fn run_op<F, R>(&self, inputs: &[Tensor<f64>], build: F, rng: &mut R) -> Result<GradReport>
    where
        F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
        R: Rng,
    {
        self.run(
            inputs,
            |ts| {
                let tape = Tape::new();
                let leaves = ts
                    .iter()
                    .map(|t| tape.leaf(t))
                    .collect::<Result<Vec<_>>>()?;
                let loss = build(&tape, &leaves)?;
                Ok(Recorded { tape, loss, leaves })
            },
            Coords::All,
            rng,
        )
    }
}

impl GradCheck {
    /// Checks the gradient of `loss` with respect to every trainable tensor
    /// in `store`. `loss` is evaluated on copies of the store.
    pub fn run_store<F, R>(
        &self,
        store: &ParamStore<f64>,
        loss: F,
        coords: Coords,
        rng: &mut R,
    ) -> Result<GradReport>
    where
        F: Fn(&Forward<'_, f64>) -> Result<Var>,
        R: Rng,
    {
        let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.tensor.clone()).collect();
        self.run(
            &inputs,
            |ts| {
                let mut local = store.clone();
                for ((_, p), t) in local.iter_mut().zip(ts) {
                    p.tensor.data_mut().copy_from_slice(t.data());
                }
                let f = Forward::new(&local, true);
                let leaves = f.bind_all()?;
                let loss = loss(&f)?;
                Ok(Recorded {
                    tape: f.into_tape(),
                    loss,
                    leaves,
                })
            },
            coords,
            rng,
        )
    }
}

fn scalar(rec: &Recorded) -> Result<f64> {
    let v = rec.tape.value(rec.loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(rec.tape.shape(rec.loss)));
    }
    Ok(v[0])
}
