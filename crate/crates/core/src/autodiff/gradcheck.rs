//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Finite-difference step `h`; the estimate is `(f(x+h) − f(x−h)) / 2h`.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest error over all checked coordinates, relative to
    /// `max(|analytic|, |numeric|)` floored at `1e-3 ×` the largest gradient
    /// magnitude of the same input.
    pub max_rel_error: f64,
    /// `(input, flat index)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Shape(format!("gradcheck needs a scalar output, got {:?}", tape.value(out).shape())));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences, perturbing one coordinate at a time.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval(&f, inputs)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + opts.step;
            let up = eval(&f, &work)?;
            let fp = up.0.value(up.2).item();
            work[i].data_mut()[j] = x0 - opts.step;
            let down = eval(&f, &work)?;
            let fm = down.0.value(down.2).item();
            work[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * opts.step));
        }
        let scale = coords
            .iter()
            .zip(&numeric)
            .map(|(&j, &nu)| analytic[i].data()[j].abs().max(nu.abs()))
            .fold(0.0, f64::max);
        let floor = (scale * 1e-3).max(f64::MIN_POSITIVE);
        for (&j, &nu) in coords.iter().zip(&numeric) {
            let a = analytic[i].data()[j];
            let rel = (a - nu).abs() / a.abs().max(nu.abs()).max(floor);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
