use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

/// Settings for finite-difference gradient checks.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Seeds the random cotangent and element sampling.
    pub seed: u64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, seed: 0, max_per_tensor: None }
    }
}

/// A scalar function of parameters and inputs returning its value together
/// with analytic gradients w.r.t. every input and every parameter.
pub type ScalarEval<'a> = dyn Fn(&ParamStore, &[Tensor]) -> Result<(f64, Vec<Tensor>, Vec<Option<Tensor>>)> + 'a;

/// Maximum over checked elements of `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check_scalar(eval: &ScalarEval<'_>, inputs: &[Tensor], params: &ParamStore, opts: GradCheckOptions) -> Result<f64> {
    let (_, input_grads, param_grads) = eval(params, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let h = opts.step;
    let mut worst = 0.0_f64;
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match opts.max_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        }
    };
    let mut record = |analytic: f64, numeric: f64| -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite("grad_check".into()));
        }
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        Ok(())
    };

    let mut perturbed = inputs.to_vec();
    for (t, grad) in input_grads.iter().enumerate() {
        for i in pick(inputs[t].len(), &mut rng) {
            let orig = inputs[t].data()[i];
            perturbed[t].data_mut()[i] = orig + h;
            let plus = eval(params, &perturbed)?.0;
            perturbed[t].data_mut()[i] = orig - h;
            let minus = eval(params, &perturbed)?.0;
            perturbed[t].data_mut()[i] = orig;
            record(grad.data()[i], (plus - minus) / (2.0 * h))?;
        }
    }

    let mut store = params.clone();
    for (p, grad) in param_grads.iter().enumerate() {
        let n = params.tensors()[p].len();
        for i in pick(n, &mut rng) {
            let orig = params.tensors()[p].data()[i];
            store.tensors_mut()[p].data_mut()[i] = orig + h;
            let plus = eval(&store, inputs)?.0;
            store.tensors_mut()[p].data_mut()[i] = orig - h;
            let minus = eval(&store, inputs)?.0;
            store.tensors_mut()[p].data_mut()[i] = orig;
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            record(analytic, (plus - minus) / (2.0 * h))?;
        }
    }
    Ok(worst)
}

/// Checks a tape-built function by contracting its output with a fixed
/// random cotangent and comparing analytic against central differences for
/// every input and parameter element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], params: &ParamStore, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[NodeId]) -> Result<NodeId>,
{
    let shape = {
        let mut tape = Tape::with_params(params);
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        tape.value(out).shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cotangent = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let eval = |store: &ParamStore, xs: &[Tensor]| {
        let mut tape = Tape::with_params(store);
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let value = tape.value(out).dot(&cotangent);
        let grads = tape.backward(&[(out, cotangent.clone())])?;
        let input_grads = ids
            .iter()
            .zip(xs)
            .map(|(id, x)| grads.wrt(*id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, input_grads, tape.param_grads(&grads)))
    };
    grad_check_scalar(&eval, inputs, params, opts)
}
