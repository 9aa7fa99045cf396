use std::f64::consts::PI;

/// Learning rate for `epoch` (0-based) of `total`: linear warmup reaching
/// `base` at epoch `warmup - 1`, then cosine decay towards zero.
pub fn lr_schedule(epoch: usize, total: usize, base: f64, warmup: usize) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    0.5 * base * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        assert_eq!(lr_schedule(0, 100, 1e-3, 10), 1e-4);
        assert_eq!(lr_schedule(9, 100, 1e-3, 10), 1e-3);
        assert_eq!(lr_schedule(10, 100, 1e-3, 10), 1e-3);
    }

    #[test]
    fn decays_monotonically() {
        let lrs: Vec<_> = (10..100).map(|e| lr_schedule(e, 100, 1.0, 10)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[89] > 0.0);
    }
}
