use crate::config::TrainConfig;
use crate::tensor::Tensor;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay, keyed by parameter index.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Completed update count.
    pub t: u64,
    /// `(first moment, second moment)` per parameter index, lazily created.
    pub state: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            t: 0,
            state: vec![None; num_params],
        }
    }

    /// One update: `w ← w(1 − lr·wd)`, then the bias-corrected Adam step.
    /// Parameters without a gradient only receive the decay.
    pub fn step(&mut self, lr: f64, params: &mut [(&mut Tensor, Option<&Tensor>, usize)]) {
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (w, grad, idx) in params.iter_mut() {
            let decay = 1.0 - lr * self.weight_decay;
            w.data_mut().iter_mut().for_each(|v| *v *= decay);
            let Some(g) = grad else { continue };
            let (m, v) = self.state[*idx].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// One-cycle policy: cosine warm-up from `max_lr / div_factor` to `max_lr`
/// ending at step `warmup_fraction · total − 1`, then cosine annealing down
/// to `max_lr / final_div_factor` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub initial_lr: f64,
    pub final_lr: f64,
    pub total_steps: usize,
    /// Position of the peak; may be fractional (or negative for very short runs).
    pub peak: f64,
}

fn cos_interp(from: f64, to: f64, frac: f64) -> f64 {
    to + (from - to) / 2.0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

impl OneCycle {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        let total_steps = total_steps.max(1);
        Self {
            max_lr: cfg.max_lr,
            initial_lr: cfg.max_lr / cfg.div_factor,
            final_lr: cfg.max_lr / cfg.final_div_factor,
            total_steps,
            peak: cfg.warmup_fraction * total_steps as f64 - 1.0,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let s = step.min(self.total_steps - 1) as f64;
        if s <= self.peak {
            if self.peak <= 0.0 {
                return self.max_lr;
            }
            cos_interp(self.initial_lr, self.max_lr, s / self.peak)
        } else {
            let span = self.total_steps as f64 - 1.0 - self.peak;
            cos_interp(self.max_lr, self.final_lr, (s - self.peak) / span)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_decay_with_zero_gradients() {
        let mut opt = AdamW::new(1, 1e-2);
        let mut w = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let g = Tensor::zeros(&[3]);
        let lr = 0.1;
        let mut expect = w.clone();
        for _ in 0..5 {
            opt.step(lr, &mut [(&mut w, Some(&g), 0)]);
            expect.scale(1.0 - lr * 1e-2);
            assert_eq!(w, expect);
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = AdamW::new(1, 0.0);
        let mut w = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let g = Tensor::from_vec(&[2], vec![3.0, -0.01]);
        opt.step(0.01, &mut [(&mut w, Some(&g), 0)]);
        assert!((w.data()[0] + 0.01).abs() < 1e-8);
        assert!((w.data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn one_cycle_contract() {
        let cfg = TrainConfig::default();
        let s = OneCycle::new(&cfg, 1000);
        assert_eq!(s.peak, 299.0);
        assert!(s.lr(0) < cfg.max_lr);
        assert!((s.lr(0) - cfg.max_lr / 25.0).abs() < 1e-15);
        assert!((s.lr(299) - cfg.max_lr).abs() < 1e-9);
        assert!((s.lr(999) - cfg.max_lr / 1e4).abs() < 1e-15);
        for i in 1..1000 {
            if i as f64 <= s.peak {
                assert!(s.lr(i) >= s.lr(i - 1));
            } else {
                assert!(s.lr(i) <= s.lr(i - 1));
            }
        }
        let short = OneCycle::new(&cfg, 2);
        assert!(short.lr(0) < cfg.max_lr && short.lr(1) < short.lr(0));
        assert!(OneCycle::new(&cfg, 1).lr(0).is_finite());
        let at_zero = OneCycle::new(&TrainConfig { warmup_fraction: 0.25, ..cfg.clone() }, 4);
        assert_eq!(at_zero.lr(0), cfg.max_lr);
    }
}
