use crate::error::{Error, Result};

pub const DEFAULT_WARMUP_RATIO: f64 = 0.03;

/// Number of linear warmup steps, `⌈ratio · total⌉`.
pub fn warmup_steps(total: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total as f64).ceil() as usize
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let warmup = warmup_steps(total, warmup_ratio);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
