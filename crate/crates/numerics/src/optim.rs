use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; `None` means
    /// the parameter received no gradient this step.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let zero;
            let g: &[f64] = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = vec![0.0; p.len()];
                    &zero
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Tensor::vector(vec![1.0, -1.0])];
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, &[Some(vec![3.0, -0.5])]);
        assert!((params[0].data[0] - 0.9).abs() < 1e-7);
        assert!((params[0].data[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut params = vec![Tensor::vector(vec![5.0])];
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = 2.0 * (params[0].data[0] - 2.0);
            adam.step(&mut params, &[Some(vec![g])]);
        }
        assert!((params[0].data[0] - 2.0).abs() < 1e-2);
    }
}
