#![allow(dead_code)]

use cabilstm::model::Model;
use cabilstm::train::mse_loss;
use cabilstm::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared by absolute difference: a
/// central difference of a loss near 0.3 carries round-off of roughly
/// `1e-16 · 0.3 / FD_STEP ≈ 3e-11`.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest relative error over entries with a smooth neighbourhood.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose stencil straddles a ReLU or max-pool switch.
    pub kinks: usize,
}

/// Compares analytic model gradients with central differences on every
/// parameter entry.
///
/// The network is piecewise smooth, so a difference quotient is only a
/// valid oracle when no ReLU or pooling decision flips inside the stencil.
/// On a smooth stretch the quotients at `h` and `2h` agree to O(h²); where
/// they disagree the entry is counted as a kink and left out of the error.
pub fn model_gradcheck(model: &Model, image: &Tensor, target: &[f64]) -> GradCheck {
    let (_, grads) = model.loss_and_grads(image, target, 1.0).unwrap();
    let loss_at = |m: &Model| mse_loss(&m.predict(image).unwrap(), target).unwrap();
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        kinks: 0,
    };
    for (p, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.params_mut()[p].data()[i];
            let mut quotient = |h: f64| {
                probe.params_mut()[p].data_mut()[i] = orig + h;
                let up = loss_at(&probe);
                probe.params_mut()[p].data_mut()[i] = orig - h;
                let down = loss_at(&probe);
                probe.params_mut()[p].data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            };
            let near = quotient(FD_STEP);
            let far = quotient(2.0 * FD_STEP);
            out.checked += 1;
            if (near - far).abs() > 1e-6 * near.abs().max(far.abs()) + 1e-9 {
                out.kinks += 1;
                continue;
            }
            out.max_rel_err = out.max_rel_err.max(rel_err(grad.data()[i], near));
        }
    }
    out
}

/// Adds small uniform noise to every bias. Zero-initialised conv biases put
/// dead-receptive-field pixels exactly on the ReLU kink, where central
/// differences disagree with any one-sided derivative.
pub fn jitter_biases(model: &mut Model, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.params_mut()) {
        if name.ends_with("bias") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
    }
}
