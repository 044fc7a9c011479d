//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many entries per input, sampled without replacement.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-6, max_entries: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|)` over all checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare tape gradients of the scalar `f(inputs)` with central differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(want_grad);
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out)[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rng = Stream::new(opts.seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let idx: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => rng.sample_without_replacement(n, m),
            _ => (0..n).collect(),
        };
        for i in idx {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + opts.h;
            let (plus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig - opts.h;
            let (minus, _) = eval(&work, false)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[k][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, checked })
}
