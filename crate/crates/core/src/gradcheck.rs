//! Central finite-difference gradient checks in 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::Backbone;
use crate::error::Result;
use crate::model::Model;
use crate::params::Pass;
use crate::ssl::Decoder;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for [`relative_error`]. Gradients that vanish identically (a key
/// bias under softmax shift invariance) leave only round-off in the numeric estimate.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_FLOOR)`.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_FLOOR)
}

/// Central differences of a scalar function with respect to every entry of `inputs`.
pub fn numeric_gradients<F>(inputs: &[Tensor<f64>], step: f64, mut f: F) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        out.push(Tensor::new(inputs[i].shape(), g)?);
    }
    Ok(out)
}

/// Largest per-input relative error between analytic and numeric gradients of `build`.
///
/// Non-scalar outputs are reduced by a fixed random weighting so every output entry
/// contributes.
pub fn check_op<F>(inputs: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let reduce = |g: &mut Graph<f64>, out: Var| -> Result<Var> {
        if g.value(out).numel() == 1 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x6A7D);
        let w = g.constant(Tensor::randn(g.shape(out), 1.0, &mut rng));
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = reduce(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf")).collect();
    let numeric = numeric_gradients(inputs, FD_STEP, |xs| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        Ok(g.value(loss).item())
    })?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Relative error of every parameter gradient of a model-level scalar `f`, by name.
///
/// Each evaluation starts from a fresh copy of the parameters, so batch statistics
/// updated during a training-mode forward do not leak between evaluations.
pub fn check_model<F>(model: &Model<f64>, train: bool, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Pass<'_, f64>, &Backbone, &Decoder) -> Result<Var>,
{
    let mut params = model.params.clone();
    let mut pass = Pass::new(&mut params, train, 0);
    let loss = f(&mut pass, &model.backbone, &model.decoder)?;
    pass.graph.backward(loss)?;
    let grads = pass.param_grads();
    drop(pass);
    let mut out = Vec::with_capacity(grads.len());
    for (id, analytic) in grads {
        let numeric = numeric_gradients(std::slice::from_ref(model.params.get(id)), FD_STEP, |xs| {
            let mut params = model.params.clone();
            *params.get_mut(id) = xs[0].clone();
            let mut pass = Pass::new(&mut params, train, 0);
            let loss = f(&mut pass, &model.backbone, &model.decoder)?;
            Ok(pass.graph.value(loss).item())
        })?;
        out.push((model.params.entry(id).name.clone(), relative_error(&analytic, &numeric[0])));
    }
    Ok(out)
}
