//! Per-tensor Adam. AdamW decays by `η_t λ θ`; AdamLH by `s_t λ θ`, where
//! `s_t` is the schedule multiplier alone.

pub use hpt_core::sde::DecayVariant;

use crate::model::{Model, TensorHp};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
    /// Number of updates applied so far.
    pub count: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        Self {
            first: model.zero_grads(),
            second: model.zero_grads(),
            count: 0,
        }
    }
}

/// Apply one update to a single tensor and return the squared norm of the
/// parameter change.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    theta: &mut [f32],
    grad: &[f32],
    first: &mut [f32],
    second: &mut [f32],
    hp: &TensorHp,
    step: u64,
    lr_mult: f64,
    variant: DecayVariant,
) -> f64 {
    let lr = hp.lr * lr_mult;
    let decay = match variant {
        DecayVariant::AdamW => lr * hp.weight_decay,
        DecayVariant::AdamLH => lr_mult * hp.weight_decay,
    };
    let t = step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
    let (inv_bc1, inv_bc2) = ((1.0 / bc1) as f32, (1.0 / bc2) as f32);
    let (lr, decay, eps) = (lr as f32, decay as f32, hp.eps as f32);
    let mut sq = 0.0f64;
    for i in 0..theta.len() {
        let g = grad[i];
        first[i] = b1 * first[i] + (1.0 - b1) * g;
        second[i] = b2 * second[i] + (1.0 - b2) * g * g;
        let m_hat = first[i] * inv_bc1;
        let v_hat = second[i] * inv_bc2;
        let before = theta[i];
        let decayed = before - decay * before;
        theta[i] = decayed - lr * m_hat / (v_hat.sqrt() + eps);
        let d = (theta[i] - before) as f64;
        sq += d * d;
    }
    sq
}

/// One step over every tensor. Returns per-tensor update RMS.
pub fn apply(model: &mut Model, state: &mut AdamState, grads: &[Vec<f32>], lr_mult: f64, variant: DecayVariant) -> Vec<f64> {
    state.count += 1;
    let step = state.count;
    model
        .params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
        .map(|((p, g), (m, v))| {
            let sq = adam_update(&mut p.data, g, m, v, &p.hp, step, lr_mult, variant);
            (sq / p.data.len() as f64).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64, wd: f64) -> TensorHp {
        TensorHp { lr, eps: 1e-3, weight_decay: wd, beta1: 0.8, beta2: 0.9, init_std: 0.0 }
    }

    #[test]
    fn one_step_matches_closed_form() {
        let (g, eta, lam, eps, b1, b2) = (0.3f64, 0.1, 0.5, 1e-3, 0.8, 0.9);
        let theta0 = 2.0f64;
        let h = TensorHp { lr: eta, eps, weight_decay: lam, beta1: b1, beta2: b2, init_std: 0.0 };
        let mut theta = [theta0 as f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adam_update(&mut theta, &[g as f32], &mut m, &mut v, &h, 1, 1.0, DecayVariant::AdamW);
        // After one step the bias-corrected moments are g and g².
        let expected = theta0 * (1.0 - eta * lam) - eta * g / (g.abs() + eps);
        assert!((theta[0] as f64 - expected).abs() < 1e-6, "{} vs {expected}", theta[0]);

        // Second step with g₂: closed form of both moments.
        let g2 = -0.1f64;
        let t1 = theta[0] as f64;
        adam_update(&mut theta, &[g2 as f32], &mut m, &mut v, &h, 2, 1.0, DecayVariant::AdamW);
        let m2 = (b1 * (1.0 - b1) * g + (1.0 - b1) * g2) / (1.0 - b1 * b1);
        let v2 = (b2 * (1.0 - b2) * g * g + (1.0 - b2) * g2 * g2) / (1.0 - b2 * b2);
        let expected = t1 * (1.0 - eta * lam) - eta * m2 / (v2.sqrt() + eps);
        assert!((theta[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn adamlh_decay_ignores_learning_rate() {
        let mut a = [1.0f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adam_update(&mut a, &[0.0], &mut m, &mut v, &hp(0.1, 0.5), 1, 0.5, DecayVariant::AdamLH);
        assert_eq!(a[0], 0.75);
        let mut b = [1.0f32];
        let (mut m, mut v) = ([0.0f32], [0.0f32]);
        adam_update(&mut b, &[0.0], &mut m, &mut v, &hp(0.1, 0.5), 1, 0.5, DecayVariant::AdamW);
        assert_eq!(b[0], 1.0 - 0.025);
    }

    #[test]
    fn variants_agree_without_decay() {
        let run = |variant| {
            let mut x = [0.7f32, -1.2];
            let (mut m, mut v) = ([0.0f32; 2], [0.0f32; 2]);
            for t in 1..=5 {
                let g = [x[0] * 0.3, x[1] - 0.2];
                adam_update(&mut x, &g, &mut m, &mut v, &hp(0.05, 0.0), t, 0.9, variant);
            }
            x
        };
        assert_eq!(run(DecayVariant::AdamW), run(DecayVariant::AdamLH));
    }
}
