//! Linear warmup followed by cosine decay.

use std::f64::consts::PI;

use super::TrainConfig;

/// Learning rate at optimizer step `iter` (1-based; `0` yields `0`).
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    lr_at_fractional(cfg, iter as f64)
}

/// The same schedule over a continuous step count.
pub fn lr_at_fractional(cfg: &TrainConfig, t: f64) -> f64 {
    let peak = cfg.peak_lr;
    let warmup = cfg.warmup_iters as f64;
    let total = cfg.total_iters as f64;
    if t <= 0.0 {
        return 0.0;
    }
    if t < warmup {
        return peak * t / warmup;
    }
    let min = peak * cfg.min_lr_ratio;
    let progress = ((t - warmup) / (total - warmup).max(1.0)).min(1.0);
    peak - (peak - min) * 0.5 * (1.0 - (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_landmarks() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, 5000), 6e-4);
        assert_eq!(lr_at(&c, 2500), 3e-4);
        assert!((lr_at(&c, 25000) - 6e-5).abs() <= 1e-12 * 6e-5);
        assert_eq!(lr_at(&c, 1), 6e-4 / 5000.0);
    }

    #[test]
    fn continuous_and_piecewise_monotone() {
        let c = TrainConfig::default();
        let j = c.warmup_iters as f64;
        for d in [1e-6, 1e-9] {
            assert!((lr_at_fractional(&c, j - d) - lr_at_fractional(&c, j + d)).abs() < 1e-9);
        }
        let lrs: Vec<f64> = (0..=c.total_iters).map(|i| lr_at(&c, i)).collect();
        assert!(lrs[..=c.warmup_iters].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[c.warmup_iters..].windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(lrs.iter().cloned().fold(0.0, f64::max), c.peak_lr);
    }
}
