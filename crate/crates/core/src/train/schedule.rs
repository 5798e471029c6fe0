use super::TrainConfig;
use crate::error::{Error, Result};

/// Per-epoch learning rate: linear warmup to `lr`, then half-cosine decay.
///
/// `epoch < warmup`: `lr·(epoch+1)/warmup`; otherwise
/// `lr·½·(1 + cos(π·(epoch − warmup)/(epochs − warmup)))`.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Index(format!("epoch {epoch} of {}", config.epochs)));
    }
    let (lr, warmup) = (config.lr, config.warmup_epochs);
    if epoch < warmup {
        return Ok(lr * (epoch + 1) as f64 / warmup as f64);
    }
    let progress = (epoch - warmup) as f64 / (config.epochs - warmup) as f64;
    Ok(lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            epochs: 100,
            warmup_epochs: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn peak_at_end_of_warmup() {
        assert_eq!(cosine_lr(10, &cfg()).unwrap(), 0.01);
    }

    #[test]
    fn warmup_is_linear() {
        assert!((cosine_lr(0, &cfg()).unwrap() - 0.001).abs() < 1e-15);
        assert!((cosine_lr(4, &cfg()).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn midpoint_is_half() {
        assert!((cosine_lr(55, &cfg()).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn final_epoch_nearly_zero() {
        let last = cosine_lr(99, &cfg()).unwrap();
        assert!(last > 0.0 && last <= 0.01 * 0.001);
    }

    #[test]
    fn out_of_range_epoch() {
        assert!(matches!(cosine_lr(100, &cfg()), Err(Error::Index(_))));
    }
}
