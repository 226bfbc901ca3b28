use serde::{Deserialize, Serialize};

/// Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(size: usize, lr: f64, eps: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps, step: 0, m: vec![0.0; size], v: vec![0.0; size] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Dense update.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let (c1, c2) = self.corrections();
        for i in 0..params.len() {
            params[i] -= self.delta(i, grad[i], c1, c2);
        }
    }

    /// Update of the listed coordinates only; moments of the others are left
    /// untouched (lazy Adam).
    pub fn update_sparse(&mut self, params: &mut [f32], grad: &[(usize, f64)]) {
        self.step += 1;
        let (c1, c2) = self.corrections();
        for &(i, g) in grad {
            params[i] -= self.delta(i, g, c1, c2) as f32;
        }
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn delta(&mut self, i: usize, g: f64, c1: f64, c2: f64) -> f64 {
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1, 1e-8);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
