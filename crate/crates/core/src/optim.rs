//! AdamW, gradient clipping and the warmup-stable-decay schedule.

use std::f64::consts::PI;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("optimizer shape mismatch at tensor {index}: param {param:?}, grad {grad:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("optimizer got {got} tensors, expected {expected}")]
    Count { got: usize, expected: usize },
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
}

/// Tokens per parameter in the compute-optimal budget.
pub const COT_TOKENS_PER_PARAM: u64 = 20;

/// Compute-optimal token budget for `param_count` parameters.
pub fn cot_tokens(param_count: u64) -> u64 {
    COT_TOKENS_PER_PARAM * param_count
}

/// Linear warmup, constant plateau, cosine decay to `peak · min_lr_ratio`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WsdSchedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub stable_steps: u64,
    pub decay_steps: u64,
    pub peak_lr: f64,
    pub min_lr_ratio: f64,
}

impl WsdSchedule {
    pub const WARMUP_FRACTION: f64 = 0.25;
    pub const DECAY_FRACTION: f64 = 0.20;

    /// Warmup and decay take 25% and 20% of `total_steps`, rounded down.
    pub fn new(total_steps: u64, peak_lr: f64, min_lr_ratio: f64) -> Self {
        let warmup_steps = (total_steps as f64 * Self::WARMUP_FRACTION).floor() as u64;
        let decay_steps = (total_steps as f64 * Self::DECAY_FRACTION).floor() as u64;
        Self {
            total_steps,
            warmup_steps,
            stable_steps: total_steps - warmup_steps - decay_steps,
            decay_steps,
            peak_lr,
            min_lr_ratio,
        }
    }

    /// Steps for `token_budget` tokens at `tokens_per_step`, rounded down.
    pub fn from_tokens(token_budget: u64, tokens_per_step: u64, peak_lr: f64, min_lr_ratio: f64) -> Self {
        Self::new(token_budget / tokens_per_step.max(1), peak_lr, min_lr_ratio)
    }

    pub fn min_lr(&self) -> f64 {
        self.peak_lr * self.min_lr_ratio
    }

    /// Learning rate at `step` in `0..=total_steps`. Update `k` (1-based)
    /// uses `lr_at(k)`.
    pub fn lr_at(&self, step: u64) -> Result<f64, OptimError> {
        if step > self.total_steps {
            return Err(OptimError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let decay_start = self.warmup_steps + self.stable_steps;
        Ok(if step < self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else if step <= decay_start || self.decay_steps == 0 {
            self.peak_lr
        } else {
            let x = (step - decay_start) as f64 / self.decay_steps as f64;
            let min = self.min_lr();
            min + (self.peak_lr - min) * 0.5 * (1.0 + (PI * x).cos())
        })
    }
}

/// Hyperparameters of [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
///
/// Decay applies to tensors of rank ≥ 2; norm gains are left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Restores a state saved via [`moments`](Self::moments).
    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>>) -> Self {
        Self { config, step, m, v }
    }

    /// Updates completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers (empty before the first step).
    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>], lr: f64) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::Count {
                got: grads.len(),
                expected: params.len(),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(OptimError::Count {
                got: params.len(),
                expected: self.m.len(),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[index].shape() != p.shape() {
                return Err(OptimError::Shape {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let decay = if p.rank() >= 2 { 1.0 - lr * weight_decay } else { 1.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = g as f64;
                let mj = beta1 * m[j] as f64 + (1.0 - beta1) * g;
                let vj = beta2 * v[j] as f64 + (1.0 - beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *w = (*w as f64 * decay - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of `grads`, accumulated sequentially in `f64`.
pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn first_unit_step_moves_by_lr() {
        let mut w = Tensor::<f32>::zeros([1]);
        let mut opt = AdamW::new(no_decay());
        opt.step(vec![&mut w], &[Tensor::ones([1])], 0.1).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((w.data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut w = Tensor::<f32>::from_f64([2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let before = w.clone();
        let mut opt = AdamW::new(no_decay());
        for _ in 0..3 {
            opt.step(vec![&mut w], &[Tensor::zeros([2, 2])], 0.1).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn zero_grad_with_decay_is_multiplicative() {
        let mut w = Tensor::<f32>::from_f64([1, 2], &[1.0, -2.0]).unwrap();
        let mut gain = Tensor::<f32>::from_f64([2], &[1.0, 1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(
            vec![&mut w, &mut gain],
            &[Tensor::zeros([1, 2]), Tensor::zeros([2])],
            0.5,
        )
        .unwrap();
        assert_eq!(w.data(), &[0.95, -1.9]);
        assert_eq!(gain.data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut w = Tensor::<f32>::zeros([2]);
        let mut opt = AdamW::new(no_decay());
        let err = opt.step(vec![&mut w], &[Tensor::zeros([3])], 0.1).unwrap_err();
        assert!(matches!(err, OptimError::Shape { index: 0, .. }));
    }

    #[test]
    fn cot_examples() {
        assert_eq!(cot_tokens(200_000_000), 4_000_000_000);
        assert_eq!(cot_tokens(1), 20);
        assert_eq!(cot_tokens(2_000_000), 40_000_000);
    }

    #[test]
    fn schedule_boundaries() {
        let s = WsdSchedule::new(1000, 3e-4, 0.1);
        assert_eq!((s.warmup_steps, s.stable_steps, s.decay_steps), (250, 550, 200));
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(250).unwrap(), 3e-4);
        assert_eq!(s.lr_at(800).unwrap(), 3e-4);
        assert!((s.lr_at(900).unwrap() - (3e-4 + 3e-5) / 2.0).abs() < 1e-15);
        assert!((s.lr_at(1000).unwrap() - 3e-5).abs() < 1e-15);
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn schedule_splits_round_down() {
        let s = WsdSchedule::from_tokens(10_000, 256, 1e-3, 0.1);
        assert_eq!(s.total_steps, 39);
        assert_eq!((s.warmup_steps, s.decay_steps), (9, 7));
        assert_eq!(s.warmup_steps + s.stable_steps + s.decay_steps, 39);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::<f32>::from_f64([2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!(global_norm(&g) <= 1.0 + 1e-6);
        let mut small = vec![Tensor::<f32>::from_f64([1], &[0.5]).unwrap()];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    proptest! {
        #[test]
        fn schedule_is_piecewise_monotone(total in 1u64..3000, peak in 1e-5f64..1e-2) {
            let s = WsdSchedule::new(total, peak, 0.1);
            let lrs: Vec<f64> = (0..=total).map(|k| s.lr_at(k).unwrap()).collect();
            let ds = s.warmup_steps + s.stable_steps;
            for k in 1..=total as usize {
                let (a, b) = (lrs[k - 1], lrs[k]);
                if (k as u64) <= s.warmup_steps {
                    prop_assert!(b >= a);
                } else if (k as u64) <= ds {
                    prop_assert_eq!(b, peak);
                } else {
                    prop_assert!(b <= a);
                }
            }
        }

        #[test]
        fn first_step_opposes_gradient(g in prop::collection::vec(-10.0f32..10.0, 1..16)) {
            let n = g.len();
            let mut w = Tensor::<f32>::zeros([n]);
            let grad = Tensor::new([n], g.clone()).unwrap();
            AdamW::new(no_decay()).step(vec![&mut w], &[grad], 1e-3).unwrap();
            for (wi, gi) in w.data().iter().zip(&g) {
                if *gi != 0.0 {
                    prop_assert_eq!(wi.signum(), -gi.signum());
                }
            }
        }

        #[test]
        fn clipped_norm_within_limit(g in prop::collection::vec(-100.0f32..100.0, 1..64), max in 0.1f64..5.0) {
            let mut grads = vec![Tensor::new([g.len()], g).unwrap()];
            clip_global_norm(&mut grads, max);
            prop_assert!(global_norm(&grads) <= max + 1e-6);
        }
    }
}
