use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Constants of the adaptive step rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepRule {
    pub tau: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule {
            tau: 1.0,
            alpha: 0.1,
            epsilon: 1e-16,
        }
    }
}

/// Running mean of squared gradients for one parameter block.
#[derive(Debug, Clone)]
pub struct Accumulator<T: Scalar> {
    pub eta: T,
    pub s: Option<DVector<T>>,
}

impl<T: Scalar> Accumulator<T> {
    pub fn new(eta: T) -> Self {
        Accumulator { eta, s: None }
    }

    /// Per-coordinate step `η (j+1)^(−½+ε) / (τ + √s)`, after folding `g`
    /// into `s` (`s = g²` at the first call, `αg² + (1−α)s` afterwards).
    pub fn step(&mut self, g: &DVector<T>, j: usize, rule: &StepRule) -> DVector<T> {
        let alpha = T::lit(rule.alpha);
        let g2 = g.component_mul(g);
        let s = match self.s.take() {
            None => g2,
            Some(prev) => g2 * alpha + prev * (T::one() - alpha),
        };
        let scale = self.eta * T::lit(((j + 1) as f64).powf(-0.5 + rule.epsilon));
        let tau = T::lit(rule.tau);
        let rho = s.map(|v| scale / (tau + v.sqrt()));
        self.s = Some(s);
        rho
    }
}

/// Accumulators for the variational parameters `φ` and the hyperparameters `θ`.
#[derive(Debug, Clone)]
pub struct SgaState<T: Scalar> {
    pub phi: Accumulator<T>,
    pub theta: Accumulator<T>,
    pub rule: StepRule,
    pub iteration: usize,
}

impl<T: Scalar> SgaState<T> {
    pub fn new(eta_phi: T, eta_theta: T, rule: StepRule) -> Self {
        SgaState {
            phi: Accumulator::new(eta_phi),
            theta: Accumulator::new(eta_theta),
            rule,
            iteration: 0,
        }
    }
}

/// Step vectors for both blocks at iteration `state.iteration`.
pub fn adaptive_step<T: Scalar>(
    state: &mut SgaState<T>,
    g_phi: &DVector<T>,
    g_theta: &DVector<T>,
) -> (DVector<T>, DVector<T>) {
    let j = state.iteration;
    let rule = state.rule;
    let rp = state.phi.step(g_phi, j, &rule);
    let rt = state.theta.step(g_theta, j, &rule);
    state.iteration += 1;
    (rp, rt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_hand_value() {
        let mut acc = Accumulator::new(1.0f64);
        let rho = acc.step(&DVector::from_element(1, 3.0), 0, &StepRule::default());
        assert!((rho[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_the_bare_schedule() {
        let mut acc = Accumulator::new(0.5);
        let rule = StepRule::default();
        for j in 0..5 {
            let rho = acc.step(&DVector::zeros(2), j, &rule);
            let expect = 0.5 * ((j + 1) as f64).powf(-0.5 + rule.epsilon) / rule.tau;
            assert!((rho[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn accumulator_decreases_with_shrinking_gradients() {
        let mut acc = Accumulator::new(1.0f64);
        let rule = StepRule::default();
        let mut last = f64::INFINITY;
        for j in 0..50 {
            let g = 10.0 / (1.0 + j as f64);
            acc.step(&DVector::from_element(1, g), j, &rule);
            let s = acc.s.as_ref().unwrap()[0];
            assert!(s > 0.0 && s <= last);
            last = s;
        }
    }

    #[test]
    fn state_tracks_iterations() {
        let mut st = SgaState::new(0.1f64, 0.05, StepRule::default());
        let (a, b) = adaptive_step(&mut st, &DVector::from_element(3, 1.0), &DVector::from_element(2, 1.0));
        assert_eq!(st.iteration, 1);
        assert!((a[0] - 0.05).abs() < 1e-15 && (b[0] - 0.025).abs() < 1e-15);
    }
}
