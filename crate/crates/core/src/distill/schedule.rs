use std::f64::consts::PI;

use crate::backbone::ModelParams;
use crate::error::{Error, Result};

fn progress(step: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        (step as f64 / total as f64).clamp(0.0, 1.0)
    }
}

/// Teacher momentum: cosine ramp from `start` at step 0 to 1 at `total`.
pub fn momentum_schedule(step: u64, total: u64, start: f64) -> f64 {
    let u = progress(step, total);
    1.0 - (1.0 - start) * ((PI * u).cos() + 1.0) / 2.0
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let u = progress(step - warmup, total.saturating_sub(warmup));
    base * ((PI * u).cos() + 1.0) / 2.0
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s` over every array.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, momentum: f64) -> Result<()> {
    if !teacher.same_shapes(student) {
        return Err(Error::Dimension(
            "teacher and student parameter shapes differ".into(),
        ));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Parameter(format!(
            "momentum {momentum} outside [0, 1]"
        )));
    }
    let rest = 1.0 - momentum;
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = momentum * *a + rest * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::backbone::BackboneConfig;

    #[test]
    fn momentum_endpoints_and_midpoint() {
        assert_eq!(momentum_schedule(0, 100, 0.996), 0.996);
        assert_eq!(momentum_schedule(100, 100, 0.996), 1.0);
        assert!((momentum_schedule(50, 100, 0.996) - 0.998).abs() < 1e-15);
        let mut prev = 0.0;
        for s in 0..=100 {
            let m = momentum_schedule(s, 100, 0.996);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn lr_warmup_then_cosine() {
        let (total, warm, base) = (100, 10, 5e-4);
        assert_eq!(lr_schedule(0, total, warm, base), 0.0);
        assert!((lr_schedule(5, total, warm, base) - base / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(warm, total, warm, base), base);
        assert!(lr_schedule(total, total, warm, base).abs() < 1e-20);
        assert!((lr_schedule(55, total, warm, base) - base / 2.0).abs() < 1e-15);
    }

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            k_patch: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 8,
            patch_hidden: 4,
            projector_hidden: 8,
            out_dim: 4,
            centroid_channels: true,
        }
    }

    #[test]
    fn ema_boundaries() {
        let t0 = ModelParams::init(&tiny(), 1).unwrap();
        let s = ModelParams::init(&tiny(), 2).unwrap();

        let mut t = t0.clone();
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);

        let mut t = t0.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
    }

    #[test]
    fn ema_half_way() {
        let mut t = ModelParams::zeros(&tiny()).unwrap();
        let mut s = ModelParams::zeros(&tiny()).unwrap();
        for x in s.tensors_mut() {
            *x = Tensor::full(x.shape(), 2.0);
        }
        ema_update(&mut t, &s, 0.5).unwrap();
        assert!(t.tensors().iter().flat_map(|x| x.data()).all(|&v| v == 1.0));
    }
}
