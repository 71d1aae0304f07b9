//! AdamW with a warmup-then-decay schedule.

use autograd::Tensor;

/// Linear warmup over the first `warmup_steps`, then linear decay to zero
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = (total_steps as f64 * warmup_fraction).round() as usize;
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let done = step - self.warmup_steps;
        self.peak * (1.0 - done as f64 / decay_steps as f64).max(0.0)
    }
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments for a fixed list of tensors, with decoupled weight decay
/// on matrices (rank ≥ 2). Vectors such as biases and norm gains are not
/// decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u32>,
}

impl AdamW {
    pub fn new(sizes: impl IntoIterator<Item = usize>, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            weight_decay,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// Updates tensor `slot` in place. A zero learning rate leaves both the
    /// tensor and the moments untouched.
    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &[f64], lr: f64) {
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(self.first[slot].len(), grad.len());
        if lr == 0.0 {
            return;
        }
        self.steps[slot] += 1;
        let t = self.steps[slot] as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let decay = if param.rank() >= 2 {
            self.weight_decay
        } else {
            0.0
        };
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for (i, (w, &g)) in param.data_mut().iter_mut().zip(grad).enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
            *w -= lr * (update + decay * *w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr(9), 1.0);
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert!(s.lr(99) > 0.0 && s.lr(99) < 0.02);
        assert_eq!(s.lr(100), 0.0);
    }

    #[test]
    fn first_step_moves_by_the_rate() {
        // Bias-corrected moments make the first update lr · sign(g).
        let mut opt = AdamW::new([2], 0.0);
        let mut b = Tensor::vector(vec![1.0, 2.0]);
        opt.step(0, &mut b, &[0.5, -3.0], 0.1);
        assert!((b.data()[0] - 0.9).abs() < 1e-8);
        assert!((b.data()[1] - 2.1).abs() < 1e-8);
    }

    #[test]
    fn bias_not_decayed() {
        let mut opt = AdamW::new([2, 2], 0.5);
        let mut b = Tensor::vector(vec![1.0, 2.0]);
        opt.step(0, &mut b, &[0.0, 0.0], 0.1);
        assert_eq!(b.data(), &[1.0, 2.0]);
        let mut w = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        opt.step(1, &mut w, &[0.0, 0.0], 0.1);
        assert_eq!(w.data(), &[0.95, 1.9]);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut opt = AdamW::new([2], 0.01);
        let mut w = Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap();
        let before = w.clone();
        opt.step(0, &mut w, &[3.0, 4.0], 0.0);
        assert!(w.bit_eq(&before));
    }
}
