//! Linear warmup / linear decay learning-rate schedule.

use super::config::TrainConfig;

/// Warmup step count: `floor(warmup_fraction * total)`, clamped to at least
/// one step and to leave at least one decay step.
pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    let w = (cfg.warmup_fraction * total_steps as f64).floor() as usize;
    w.max(1).min(total_steps.saturating_sub(1))
}

/// Learning rate before step `step` of `total_steps`: linear 0 -> base_lr
/// over the warmup, then linear base_lr -> 0 over the remainder. Exactly 0
/// at step 0 and at `total_steps`, exactly `base_lr` at the warmup boundary.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || step > total_steps {
        return 0.0;
    }
    let w = warmup_steps(total_steps, cfg);
    // ratio first so the boundary values are bit-exact
    if step < w {
        cfg.base_lr * (step as f64 / w as f64)
    } else {
        cfg.base_lr * ((total_steps - step) as f64 / (total_steps - w) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values_are_exact() {
        let cfg = TrainConfig::default(); // base_lr 5e-5, warmup 0.1
        let total = 1000;
        let w = warmup_steps(total, &cfg);
        assert_eq!(w, 100);
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        assert_eq!(lr_at(w, total, &cfg), cfg.base_lr);
        assert_eq!(lr_at(total, total, &cfg), 0.0);
    }

    #[test]
    fn monotone_up_then_down() {
        let cfg = TrainConfig::default();
        let total = 50;
        let w = warmup_steps(total, &cfg);
        for s in 1..=w {
            assert!(lr_at(s, total, &cfg) >= lr_at(s - 1, total, &cfg));
        }
        for s in (w + 1)..=total {
            assert!(lr_at(s, total, &cfg) <= lr_at(s - 1, total, &cfg));
        }
    }

    #[test]
    fn tiny_run_still_warms_up() {
        let cfg = TrainConfig::default();
        // floor(0.1 * 3) = 0, clamped to 1
        assert_eq!(warmup_steps(3, &cfg), 1);
        assert_eq!(lr_at(1, 3, &cfg), cfg.base_lr);
    }
}
