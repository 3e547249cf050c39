//! Adam with decoupled weight decay.

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// A parameter slice handed to the optimizer.
pub struct ParamSlot<'a> {
    pub values: &'a mut [f64],
    pub decay: bool,
}

impl AdamW {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `params[i]` pairs with `grads[i]`; the pairing must stay
    /// the same across calls.
    pub fn step(&mut self, params: Vec<ParamSlot<'_>>, grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (slot, grad)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            assert_eq!(slot.values.len(), grad.len(), "parameter {i} changed size");
            for (j, p) in slot.values.iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                if slot.decay {
                    *p -= lr * weight_decay * *p;
                }
                *p -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::default();
        let mut p = vec![1.0, -2.0];
        opt.step(
            vec![ParamSlot { values: &mut p, decay: false }],
            &[vec![0.5, -3.0]],
            0.01,
            0.0,
        );
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn decay_only_where_enabled() {
        let mut opt = AdamW::default();
        let (mut a, mut b) = (vec![1.0], vec![1.0]);
        opt.step(
            vec![
                ParamSlot { values: &mut a, decay: true },
                ParamSlot { values: &mut b, decay: false },
            ],
            &[vec![0.0], vec![0.0]],
            0.1,
            0.5,
        );
        assert!((a[0] - 0.95).abs() < 1e-15);
        assert_eq!(b[0], 1.0);
    }
}
