use crate::error::{NegprError, Result};

/// Adam with bias correction and decoupled weight decay.
///
/// Moment buffers are allocated lazily on the first step and then pinned
/// to the parameter shapes seen there.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NegprError::Shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(NegprError::Shape(format!(
                    "tensor {i}: {} parameters but {} gradient entries",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(NegprError::Shape("parameter shapes changed between steps".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut adam = AdamState::new(0.1, 0.0);
        let mut w = vec![1.0, -2.0];
        let before = w.clone();
        for _ in 0..3 {
            adam.step(&mut [&mut w], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn descends_on_square() {
        let mut adam = AdamState::new(0.1, 0.0);
        let mut x = vec![1.0];
        let g = 2.0 * x[0];
        adam.step(&mut [&mut x], &[&[g]]).unwrap();
        assert!(x[0] < 1.0);
    }

    #[test]
    fn matches_scripted_recurrence() {
        // f(x, y) = x^2 + 3 y^2, written out as the textbook recurrence
        let (lr, b1, b2, eps, wd) = (0.05f64, 0.9f64, 0.999f64, 1e-8f64, 0.01f64);
        let mut reference = [1.5f64, -0.7f64];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut trajectory = Vec::new();
        for t in 1..=5 {
            let g = [2.0 * reference[0], 6.0 * reference[1]];
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                reference[i] = reference[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
            }
            trajectory.push(reference);
        }

        let mut adam = AdamState::new(lr, wd);
        let mut p = vec![1.5, -0.7];
        for expected in trajectory {
            let g = [2.0 * p[0], 6.0 * p[1]];
            adam.step(&mut [&mut p], &[&g]).unwrap();
            assert!((p[0] - expected[0]).abs() < 1e-15);
            assert!((p[1] - expected[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut adam = AdamState::new(0.01, 1e-4);
            let mut p = vec![0.2, 0.4, -0.1];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64 + 1.0)).collect();
                adam.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = AdamState::new(0.1, 0.0);
        let mut p = vec![0.0; 2];
        assert!(adam.step(&mut [&mut p], &[&[1.0]]).is_err());
        assert!(adam.step(&mut [&mut p], &[]).is_err());
        adam.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
        let mut q = vec![0.0; 3];
        assert!(adam.step(&mut [&mut q], &[&[1.0, 1.0, 1.0]]).is_err());
    }
}
