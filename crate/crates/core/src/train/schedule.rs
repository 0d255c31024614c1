//! Linear warmup into cosine decay.

use super::{TrainConfig, TrainError};

/// Learning rate at `step` in `[0, total_steps]`: linear from 0 to the peak
/// over the warmup, then cosine from the peak down to
/// `end_lr_fraction * peak` at the final step.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let total = cfg.total_steps()?;
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return Ok(peak * step as f64 / cfg.warmup_steps as f64);
    }
    let decay_span = total - cfg.warmup_steps;
    let progress = if decay_span == 0 {
        0.0
    } else {
        (step - cfg.warmup_steps) as f64 / decay_span as f64
    };
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(peak * (cfg.end_lr_fraction + (1.0 - cfg.end_lr_fraction) * cosine))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total_steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.total_tokens = total_steps * cfg.tokens_per_step();
        cfg
    }

    #[test]
    fn endpoints() {
        let cfg = cfg(1000);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        let end = lr_at(1000, &cfg).unwrap();
        assert!((end - 0.1 * cfg.peak_lr).abs() < 1e-15);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let cfg = cfg(1000);
        let at_warmup = lr_at(cfg.warmup_steps, &cfg).unwrap();
        assert!((at_warmup - cfg.peak_lr).abs() < 1e-15);
        let just_before = lr_at(cfg.warmup_steps - 1, &cfg).unwrap();
        assert!((just_before - cfg.peak_lr * 49.0 / 50.0).abs() < 1e-15);
    }

    #[test]
    fn mid_cosine_value() {
        // Halfway through decay: lr = peak * (0.1 + 0.9 * (1 + cos(pi/2)) / 2)
        // = 0.55 * peak.
        let cfg = cfg(1050);
        let mid = cfg.warmup_steps + (1050 - cfg.warmup_steps) / 2;
        let lr = lr_at(mid, &cfg).unwrap();
        assert!((lr - 0.55 * cfg.peak_lr).abs() <= 1e-12);
    }

    #[test]
    fn out_of_range_rejected() {
        let cfg = cfg(100);
        assert!(matches!(
            lr_at(101, &cfg),
            Err(TrainError::StepOutOfRange { .. })
        ));
    }
}
