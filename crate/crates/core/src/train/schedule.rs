use crate::train::TrainConfig;

/// Linear warmup from 0 to the peak rate, then cosine decay to
/// `min_lr_ratio · peak` at `total_steps`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.learning_rate;
    let floor = peak * cfg.min_lr_ratio;
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if step == cfg.warmup_steps {
        return peak;
    }
    if step == cfg.total_steps {
        return floor;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
