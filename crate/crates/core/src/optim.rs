//! Adam (gradient ascent form), gradient hygiene, and the learning-rate schedule.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    /// One ascent step: `θ ← θ + lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                what: "adam step",
                expected: self.m.len(),
                got: if theta.len() != self.m.len() {
                    theta.len()
                } else {
                    grad.len()
                },
            });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        self.beta1_pow *= beta1;
        self.beta2_pow *= beta2;
        let c1 = 1.0 - self.beta1_pow;
        let c2 = 1.0 - self.beta2_pow;
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] += lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Zeroes non-finite entries and returns how many there were.
pub fn sanitize(grad: &mut [f64]) -> usize {
    let mut bad = 0;
    for g in grad.iter_mut() {
        if !g.is_finite() {
            *g = 0.0;
            bad += 1;
        }
    }
    bad
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Geometric decay from `lr_start` to `lr_end` over the outer generations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_generations: usize,
}

impl LrSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_generations: usize) -> Self {
        LrSchedule {
            lr_start,
            lr_end,
            total_generations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.total_generations == 0 {
            return Err(Error::Config(
                "schedule needs at least one generation".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, generation: usize) -> Result<f64> {
        let total = self.total_generations;
        if generation >= total {
            return Err(Error::ScheduleRange { generation, total });
        }
        if generation == 0 || total == 1 {
            return Ok(self.lr_start);
        }
        if generation == total - 1 {
            return Ok(self.lr_end);
        }
        let frac = generation as f64 / (total - 1) as f64;
        Ok(self.lr_start * (self.lr_end / self.lr_start).powf(frac))
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::new(1e-3, 1e-6, 200)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Straight-line Adam, written independently of `AdamState`.
    fn reference_adam(theta0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
        let n = theta0.len();
        let mut theta = theta0.to_vec();
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut b1t = 1.0;
        let mut b2t = 1.0;
        for g in grads {
            b1t *= 0.9;
            b2t *= 0.999;
            for i in 0..n {
                m[i] = 0.9 * m[i] + (1.0 - 0.9) * g[i];
                v[i] = 0.999 * v[i] + (1.0 - 0.999) * g[i] * g[i];
                theta[i] += lr * (m[i] / (1.0 - b1t)) / ((v[i] / (1.0 - b2t)).sqrt() + 1e-8);
            }
        }
        theta
    }

    #[test]
    fn zero_gradient_keeps_theta() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut theta = vec![1.0, -2.0, 0.5];
        s.step(&mut theta, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = AdamState::new(4, AdamConfig::default());
        let mut theta = vec![0.0; 4];
        s.step(&mut theta, &[3.0, -0.01, 1e4, -7.0], 1e-3).unwrap();
        for (x, sign) in theta.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((x - sign * 1e-3).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn matches_reference_bit_exact() {
        let theta0 = vec![0.3, -1.2, 2.0, 0.0, 5.5];
        let grads: Vec<Vec<f64>> = (0..10)
            .map(|k| {
                (0..5)
                    .map(|i| ((k * 7 + i * 3) as f64).sin() * (1.0 + i as f64))
                    .collect()
            })
            .collect();
        let mut s = AdamState::new(5, AdamConfig::default());
        let mut theta = theta0.clone();
        for g in &grads {
            s.step(&mut theta, g, 1e-2).unwrap();
        }
        let want = reference_adam(&theta0, &grads, 1e-2);
        for (a, b) in theta.iter().zip(&want) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn length_mismatch() {
        let mut s = AdamState::new(3, AdamConfig::default());
        assert!(s.step(&mut [0.0; 2], &[0.0; 3], 1e-3).is_err());
        assert!(s.step(&mut [0.0; 3], &[0.0; 4], 1e-3).is_err());
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0).unwrap(), 1e-3);
        assert_eq!(s.lr_at(199).unwrap(), 1e-6);
        assert!(s.lr_at(200).is_err());
        let odd = LrSchedule::new(1e-3, 1e-6, 201);
        assert!((odd.lr_at(100).unwrap() - (1e-9f64).sqrt()).abs() < 1e-15);
        assert!((odd.lr_at(100).unwrap() - 3.162e-5).abs() < 1e-8);
        assert_eq!(LrSchedule::new(1e-2, 1e-4, 1).lr_at(0).unwrap(), 1e-2);
        let mut prev = f64::INFINITY;
        for g in 0..200 {
            let lr = s.lr_at(g).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(LrSchedule::new(1e-6, 1e-3, 10).validate().is_err());
        assert!(LrSchedule::new(1e-3, 0.0, 10).validate().is_err());
    }

    #[test]
    fn sanitize_counts_bad_entries() {
        let mut g = vec![1.0, f64::NAN, f64::INFINITY, -2.0, f64::NEG_INFINITY];
        assert_eq!(sanitize(&mut g), 3);
        assert_eq!(g, vec![1.0, 0.0, 0.0, -2.0, 0.0]);
    }

    #[test]
    fn clipping_only_rescales() {
        let mut g = vec![30.0, -40.0];
        let norm = clip_norm(&mut g, 10.0);
        assert_eq!(norm, 50.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] + 8.0).abs() < 1e-12);
        let mut small = vec![1.0, 2.0];
        clip_norm(&mut small, 10.0);
        assert_eq!(small, vec![1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn bounded_updates(seq in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 4), 1..40)) {
            let lr = 1e-3;
            let mut s = AdamState::new(4, AdamConfig::default());
            let mut theta = vec![0.0; 4];
            for g in &seq {
                let before = theta.clone();
                s.step(&mut theta, g, lr).unwrap();
                for (a, b) in theta.iter().zip(&before) {
                    // |m̂|/√v̂ ≤ (1-β1)/√(1-β2) · 1/(1-β1) bounds a single Adam step.
                    prop_assert!((a - b).abs() <= lr * (1.0 / (1.0 - 0.9)) * 4.0);
                }
            }
            prop_assert!(s.v.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn clip_preserves_direction(g in proptest::collection::vec(-1e3f64..1e3, 1..20), cap in 0.1f64..50.0) {
            let mut c = g.clone();
            clip_norm(&mut c, cap);
            prop_assert!(l2_norm(&c) <= cap * (1.0 + 1e-12) || l2_norm(&g) <= cap);
            let dot: f64 = g.iter().zip(&c).map(|(a, b)| a * b).sum();
            let cos = dot / (l2_norm(&g) * l2_norm(&c));
            if l2_norm(&g) > 0.0 {
                prop_assert!((cos - 1.0).abs() < 1e-12);
            }
        }
    }
}
