//! Central finite differences against the analytic gradient.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::step::{compute_gradients, compute_loss, loss_and_grad, StepOptions, StepSeeds};
use crate::corpus::Batch;
use crate::error::Result;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub coords_per_tensor: usize,
    pub eps: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords_per_tensor: 20,
            eps: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks `coords_per_tensor` random coordinates of every parameter tensor
/// (all of them when the tensor is smaller). `ŷ` is fixed from the
/// unperturbed model, matching its role as a constant in the objective.
pub fn check_gradients(
    model: &Model,
    batch: &Batch,
    opts: &StepOptions,
    seeds: StepSeeds,
    config: &GradCheckConfig,
) -> Result<Vec<CoordinateCheck>> {
    let base = compute_gradients(model, batch, opts, seeds)?;
    let (_, grads) = loss_and_grad(model, batch, opts, seeds, &base.y_hat)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (name, g) in grads.named() {
        let n = g.len();
        let picks = index::sample(&mut rng, n, config.coords_per_tensor.min(n)).into_vec();
        for i in picks {
            let original = probe.params.get(&name).expect("named tensor").data()[i];
            let at = |v: f64, probe: &mut Model| -> Result<f64> {
                probe.params.get_mut(&name).expect("named tensor").data_mut()[i] = v;
                Ok(compute_loss(probe, batch, opts, seeds, Some(&base.y_hat))?.total)
            };
            let plus = at(original + config.eps, &mut probe)?;
            let minus = at(original - config.eps, &mut probe)?;
            at(original, &mut probe)?;
            let numeric = (plus - minus) / (2.0 * config.eps);
            let analytic = g.data()[i];
            out.push(CoordinateCheck {
                tensor: name.clone(),
                index: i,
                analytic,
                numeric,
                relative_error: relative_error(analytic, numeric, config.floor),
            });
        }
    }
    Ok(out)
}
