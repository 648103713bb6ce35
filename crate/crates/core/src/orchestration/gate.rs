use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::memory::MemoryKind;
use crate::numeric::{sigmoid, Matrix, NumericError};
use crate::seed;

const U_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w_g: Vec<f64>,
    pub b_g: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub anneal_rate: f64,
}

impl GateParams {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self {
            w_g: seed::gaussian_vec(&mut rng, d_model, 1.0 / (d_model as f64).sqrt()),
            b_g: 0.0,
            tau0: 1.0,
            tau_min: 0.1,
            anneal_rate: 0.95,
        }
    }
}

/// Which bank a high gate output selects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RouteMapping {
    #[default]
    HighIsThinking,
    HighIsPerception,
}

/// `w_g · meanpool(window) + b_g`.
pub fn gate_logit(window: &Matrix, params: &GateParams) -> Result<f64, NumericError> {
    if window.cols() != params.w_g.len() || window.rows() == 0 {
        return Err(NumericError::ShapeMismatch(format!("window {:?} for gate of dim {}", window.shape(), params.w_g.len())));
    }
    Ok(crate::numeric::dot(&params.w_g, &window.mean_rows()) + params.b_g)
}

/// `∂a/∂w_g`: the mean-pooled window.
pub fn gate_logit_grad_w(window: &Matrix) -> Vec<f64> {
    window.mean_rows()
}

/// Relaxed sample with a fixed uniform draw `u`.
pub fn gumbel_sigmoid_from_uniform(a: f64, tau: f64, u: f64) -> f64 {
    let u = u.clamp(U_EPS, 1.0 - U_EPS);
    let gamma = u.ln() - (1.0 - u).ln();
    sigmoid((a + gamma) / tau)
}

pub fn gumbel_sigmoid(a: f64, tau: f64, rng: &mut ChaCha8Rng) -> f64 {
    gumbel_sigmoid_from_uniform(a, tau, rng.random::<f64>())
}

/// `∂z̃/∂a` at a fixed uniform draw.
pub fn gumbel_sigmoid_grad(a: f64, tau: f64, u: f64) -> f64 {
    let z = gumbel_sigmoid_from_uniform(a, tau, u);
    z * (1.0 - z) / tau
}

/// `max(τ_min, τ0·λ^e)`.
pub fn anneal(params: &GateParams, e: u32) -> f64 {
    (params.tau0 * params.anneal_rate.powi(e as i32)).max(params.tau_min)
}

/// Inclusive threshold: `z ≥ threshold` selects the "high" bank.
pub fn route(z: f64, threshold: f64, mapping: RouteMapping) -> MemoryKind {
    let high = z >= threshold;
    match (mapping, high) {
        (RouteMapping::HighIsThinking, true) | (RouteMapping::HighIsPerception, false) => MemoryKind::Thinking,
        _ => MemoryKind::Perception,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error};
    use proptest::prelude::*;

    #[test]
    fn logit_cases() {
        let mut p = GateParams::init(4, 1);
        p.b_g = 0.3;
        let window = Matrix::from_fn(16, 4, |i, j| (i as f64 - 2.0 * j as f64) * 0.1);
        let a = gate_logit(&window, &p).unwrap();
        assert_eq!(gate_logit(&Matrix::zeros(16, 4), &p).unwrap(), 0.3);
        let doubled = gate_logit(&window.scale(2.0), &p).unwrap();
        assert!(((doubled - 0.3) - 2.0 * (a - 0.3)).abs() < 1e-12);
        let zero = GateParams { w_g: vec![0.0; 4], ..p.clone() };
        assert_eq!(gate_logit(&window, &zero).unwrap(), 0.3);
        assert!(gate_logit(&Matrix::zeros(3, 5), &p).is_err());
    }

    #[test]
    fn gumbel_cases() {
        assert_eq!(gumbel_sigmoid_from_uniform(0.0, 1.0, 0.5), 0.5);
        assert!(gumbel_sigmoid_from_uniform(2.0, 0.01, 0.5) >= 1.0 - 1e-20);
        let mut rng = seed::rng(11);
        let means: Vec<f64> = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&a| (0..10_000).map(|_| gumbel_sigmoid(a, 1.0, &mut rng)).sum::<f64>() / 10_000.0)
            .collect();
        assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
    }

    #[test]
    fn anneal_table() {
        let p = GateParams { w_g: vec![], b_g: 0.0, tau0: 1.0, tau_min: 0.1, anneal_rate: 0.5 };
        assert_eq!(anneal(&p, 0), 1.0);
        assert_eq!(anneal(&p, 1), 0.5);
        assert_eq!(anneal(&p, 200), 0.1);
        assert!((0..60).all(|e| anneal(&p, e + 1) <= anneal(&p, e)));
    }

    #[test]
    fn route_boundary() {
        let m = RouteMapping::HighIsThinking;
        assert_eq!(route(0.5, 0.5, m), MemoryKind::Thinking);
        assert_eq!(route(0.49, 0.5, m), MemoryKind::Perception);
        assert_eq!(route(0.51, 0.5, m), MemoryKind::Thinking);
        assert_eq!(route(0.51, 0.5, RouteMapping::HighIsPerception), MemoryKind::Perception);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for (a, tau, u) in [(0.3, 1.0, 0.4), (-1.2, 0.5, 0.8), (2.0, 2.0, 0.1)] {
            let fd = finite_diff_grad(|x| gumbel_sigmoid_from_uniform(x[0], tau, u), &[a], 1e-5);
            assert!(relative_error(&[gumbel_sigmoid_grad(a, tau, u)], &fd) < 1e-6);
        }
        let p = GateParams::init(6, 2);
        let window = Matrix::from_fn(16, 6, |i, j| ((i * 7 + j * 3) as f64).sin());
        let fd = finite_diff_grad(
            |w| gate_logit(&window, &GateParams { w_g: w.to_vec(), ..p.clone() }).unwrap(),
            &p.w_g,
            1e-5,
        );
        assert!(relative_error(&gate_logit_grad_w(&window), &fd) < 1e-6);
    }

    proptest! {
        #[test]
        fn prop_gumbel_in_unit_interval_and_monotone(a in -5.0f64..5.0, da in 0.01f64..3.0, tau in 0.2f64..4.0, u in 0.0f64..1.0) {
            let z = gumbel_sigmoid_from_uniform(a, tau, u);
            prop_assert!((0.0..=1.0).contains(&z));
            prop_assert!(gumbel_sigmoid_from_uniform(a + da, tau, u) >= z);
        }

        #[test]
        fn prop_anneal_non_increasing(tau0 in 0.2f64..5.0, rate in 0.05f64..0.99, e in 0u32..500) {
            let p = GateParams { w_g: vec![], b_g: 0.0, tau0, tau_min: 0.1, anneal_rate: rate };
            prop_assert!(anneal(&p, e + 1) <= anneal(&p, e));
            prop_assert!(anneal(&p, e) >= 0.1);
        }
    }
}
