//! Adam with bias-corrected moment estimates.

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u32,
}

/// Step size and decay rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    /// Applies one update to `param` given its gradient.
    pub fn update(&mut self, hyper: &AdamHyper, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), self.first.len(), "parameter length changed");
        assert_eq!(grad.len(), param.len(), "gradient length mismatch");
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let correction1 = 1.0 - hyper.beta1.powi(t);
        let correction2 = 1.0 - hyper.beta2.powi(t);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
}
