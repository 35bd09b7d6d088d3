//! Adam with decoupled weight decay and a linear warmup / linear decay schedule.

/// Linear ramp `0 -> max_lr` over `warmup` steps, then `max_lr -> 0` over
/// `decay` steps, then zero. Steps count from 1.
pub fn lr_schedule(step: usize, max_lr: f64, warmup: usize, decay: usize) -> f64 {
    assert!(step >= 1 && warmup >= 1);
    if step <= warmup {
        max_lr * step as f64 / warmup as f64
    } else if step < warmup + decay {
        max_lr * (1.0 - (step - warmup) as f64 / decay as f64)
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `params` and `grads` must list the same tensors in the same
    /// order on every call.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient tensor count mismatch"
        );
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(
            self.first.len(),
            params.len(),
            "tensor list changed between steps"
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            assert_eq!(p.len(), g.len(), "tensor shape changed");
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert!((lr_schedule(500, 2e-5, 1000, 9000) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(1000, 2e-5, 1000, 9000) - 2e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(10_000, 2e-5, 1000, 9000), 0.0);
        assert_eq!(lr_schedule(12_345, 2e-5, 1000, 9000), 0.0);
        assert!((lr_schedule(5500, 2e-5, 1000, 9000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
        let mut w = vec![1.0, -2.0, 3.0];
        let before = w.clone();
        opt.step(vec![&mut w], vec![&[0.5, 0.5, -1.0]], 0.0);
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step has |m_hat / sqrt(v_hat)| = 1
        let mut opt = AdamW::new(0.9, 0.999, 0.0, 0.0);
        let mut w = vec![0.0, 0.0];
        opt.step(vec![&mut w], vec![&[3.0, -0.1]], 0.01);
        assert!((w[0] + 0.01).abs() < 1e-12);
        assert!((w[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        let mut w = vec![2.0];
        opt.step(vec![&mut w], vec![&[0.0]], 0.1);
        assert!((w[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        let mut w = vec![5.0, -3.0];
        for _ in 0..2000 {
            let g = [2.0 * w[0], 2.0 * w[1]];
            opt.step(vec![&mut w], vec![&g], 0.05);
        }
        assert!(w.iter().all(|x| x.abs() < 1e-2), "{w:?}");
    }
}
