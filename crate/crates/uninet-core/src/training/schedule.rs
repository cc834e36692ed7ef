use crate::error::{Error, Result};

/// Cosine annealing: lr = base * 0.5 * (1 + cos(pi * step / total)).
/// Hits `base` exactly at step 0 and 0 at step == total.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::validation("total_steps must be >= 1"));
    }
    if step > total_steps {
        return Err(Error::validation(format!("step {step} > total_steps {total_steps}")));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 4e-5).unwrap(), 4e-5);
        assert_eq!(cosine_lr(100, 100, 4e-5).unwrap(), 0.0);
        let mid = cosine_lr(50, 100, 4e-5).unwrap();
        assert!((mid - 2e-5).abs() < 1e-20);
    }

    #[test]
    fn non_increasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=200 {
            let lr = cosine_lr(s, 200, 1e-3).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn step_past_total_rejected() {
        assert!(cosine_lr(101, 100, 1e-3).is_err());
        assert!(cosine_lr(0, 0, 1e-3).is_err());
    }
}
