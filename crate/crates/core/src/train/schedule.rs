use std::f64::consts::PI;

/// Linear warmup from zero to `peak`, then cosine decay to `min_lr` at
/// `total_tokens`. Pure function of the number of tokens consumed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
}

impl LrSchedule {
    pub fn lr(&self, tokens: u64) -> f64 {
        if tokens < self.warmup_tokens {
            return self.peak_lr * tokens as f64 / self.warmup_tokens as f64;
        }
        let span = self.total_tokens.saturating_sub(self.warmup_tokens);
        if span == 0 {
            return self.min_lr;
        }
        let progress = ((tokens - self.warmup_tokens) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_shape() {
        let s = LrSchedule {
            peak_lr: 6e-4,
            min_lr: 6e-5,
            warmup_tokens: 1000,
            total_tokens: 11_000,
        };
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(500) - 3e-4).abs() < 1e-15);
        assert!((s.lr(1000) - 6e-4).abs() < 1e-15);
        assert!((s.lr(6000) - 3.3e-4).abs() < 1e-12);
        assert!((s.lr(11_000) - 6e-5).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in (1000..=11_000).step_by(250) {
            let lr = s.lr(t);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
