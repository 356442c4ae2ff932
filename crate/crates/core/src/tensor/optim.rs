//! AdamW, global-norm gradient clipping and the warmup + cosine schedule.

use std::f64::consts::PI;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named gradients; parameters that did not take part in a step are absent.
pub type GradMap = IndexMap<String, Vec<f32>>;

/// Global L2 norm over all gradients, accumulated in f64.
pub fn global_norm(grads: &GradMap) -> Result<f64> {
    let mut total = 0.0f64;
    for (name, g) in grads {
        let sq: f64 = g.iter().map(|&v| (v as f64) * (v as f64)).sum();
        if !sq.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        total += sq;
    }
    Ok(total.sqrt())
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the applied factor (1.0 when already inside the ball).
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads)?;
    if norm <= max_norm {
        return Ok(1.0);
    }
    let factor = max_norm / norm;
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v = (*v as f64 * factor) as f32;
        }
    }
    Ok(factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment buffers and step counters of AdamW.
///
/// Each parameter keeps its own step count (used for bias correction), so a
/// parameter that joins training late starts from an unbiased estimate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub first: IndexMap<String, Vec<f32>>,
    pub second: IndexMap<String, Vec<f32>>,
    pub param_steps: IndexMap<String, u64>,
    pub decay_mask: IndexMap<String, bool>,
}

impl OptimState {
    /// Creates empty state; `decay` says which parameters receive weight decay.
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, bool)>) -> Self {
        OptimState {
            decay_mask: params.into_iter().map(|(n, d)| (n.to_string(), d)).collect(),
            ..Default::default()
        }
    }
}

/// One AdamW update of every parameter present in `grads`. Parameters without
/// a gradient are left untouched, including their decay.
pub fn adamw_step(
    params: &mut IndexMap<String, Tensor<f32>>,
    grads: &GradMap,
    state: &mut OptimState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.len() != g.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                shapes: vec![p.shape().to_vec(), vec![g.len()]],
            });
        }
        for buf in [&state.first, &state.second] {
            if let Some(b) = buf.get(name) {
                if b.len() != g.len() {
                    return Err(Error::Shape {
                        op: "adamw_step",
                        shapes: vec![vec![b.len()], vec![g.len()]],
                    });
                }
            }
        }
    }
    state.step += 1;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let n = g.len();
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let t = state.param_steps.entry(name.clone()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
        let decay = *state.decay_mask.get(name).unwrap_or(&true);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let m = &mut *m;
        for i in 0..n {
            let gi = g[i] as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
        }
        let data = p.data_mut();
        for i in 0..n {
            let mut w = data[i] as f64;
            if decay {
                w -= lr * cfg.weight_decay * w;
            }
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            w -= lr * mhat / (vhat.sqrt() + cfg.eps);
            data[i] = w as f32;
        }
    }
    Ok(())
}

/// Linear warmup from zero followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak_rate: f64,
    pub warmup_epochs: u32,
    pub total_epochs: u32,
    pub steps_per_epoch: u32,
}

impl LrSchedule {
    pub fn total_steps(&self) -> u64 {
        self.total_epochs as u64 * self.steps_per_epoch as u64
    }

    /// Warmup length in steps: at least one step so that `rate(0) == 0`, and no
    /// longer than the whole schedule.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs as u64 * self.steps_per_epoch as u64)
            .max(1)
            .min(self.total_steps().max(1))
    }
}

pub fn lr_at(step: u64, schedule: &LrSchedule) -> Result<f64> {
    let total = schedule.total_steps();
    if step > total {
        return Err(Error::invalid(format!(
            "lr_at: step {step} beyond schedule of {total} steps"
        )));
    }
    let warm = schedule.warmup_steps();
    let peak = schedule.peak_rate;
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    if total <= warm {
        return Ok(peak);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Vec<f32>)]) -> IndexMap<String, Tensor<f32>> {
        entries
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::from_vec(v.clone())))
            .collect()
    }

    fn grads(entries: &[(&str, Vec<f32>)]) -> GradMap {
        entries.iter().map(|(n, v)| (n.to_string(), v.clone())).collect()
    }

    #[test]
    fn clip_under_threshold_is_noop() {
        let mut g = grads(&[("a", vec![0.3, 0.4])]);
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 1.0);
        assert_eq!(g["a"], vec![0.3, 0.4]);
    }

    #[test]
    fn clip_scales_three_four() {
        let mut g = grads(&[("a", vec![3.0, 4.0])]);
        let f = clip_global_norm(&mut g, 1.0).unwrap();
        assert!((f - 0.2).abs() < 1e-12);
        assert!((g["a"][0] - 0.6).abs() < 1e-7 && (g["a"][1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn clip_reports_offending_parameter() {
        let mut g = grads(&[("ok", vec![1.0]), ("bad", vec![f32::NAN])]);
        let err = clip_global_norm(&mut g, 1.0).unwrap_err().to_string();
        assert!(err.contains("bad"), "{err}");
        assert!(clip_global_norm(&mut grads(&[]), 0.0).is_err());
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = params(&[("w", vec![1.5, -2.0])]);
        let mut st = OptimState::new([("w", true)]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &grads(&[("w", vec![0.0, 0.0])]), &mut st, &cfg, 0.1).unwrap();
        assert_eq!(p["w"].data(), &[1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        // After one step from zero state: m̂ = g, v̂ = g², so the update is
        // lr * g / (|g| + eps) plus decoupled decay lr * wd * w.
        let w0 = [0.5f32, -1.0, 2.0];
        let g = [0.2f32, -3.0, 1e-3];
        let (lr, wd, eps) = (0.01, 1e-4, 1e-8);
        let mut p = params(&[("w", w0.to_vec())]);
        let mut st = OptimState::new([("w", true)]);
        let cfg = AdamWConfig {
            weight_decay: wd,
            eps,
            ..Default::default()
        };
        adamw_step(&mut p, &grads(&[("w", g.to_vec())]), &mut st, &cfg, lr).unwrap();
        for i in 0..3 {
            let w = w0[i] as f64;
            let gi = g[i] as f64;
            let expected = w - lr * wd * w - lr * gi / (gi.abs() + eps);
            assert!((p["w"].data()[i] as f64 - expected).abs() < 1e-6, "{i}");
        }
    }

    #[test]
    fn adamw_masked_parameter_gets_no_decay() {
        let mut p = params(&[("ln.gain", vec![1.0]), ("w", vec![1.0])]);
        let mut st = OptimState::new([("ln.gain", false), ("w", true)]);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(
            &mut p,
            &grads(&[("ln.gain", vec![0.0]), ("w", vec![0.0])]),
            &mut st,
            &cfg,
            0.1,
        )
        .unwrap();
        assert_eq!(p["ln.gain"].data(), &[1.0]);
        assert!((p["w"].data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn adamw_skips_parameters_without_gradient() {
        let mut p = params(&[("a", vec![1.0]), ("b", vec![1.0])]);
        let mut st = OptimState::new([("a", true), ("b", true)]);
        adamw_step(
            &mut p,
            &grads(&[("a", vec![1.0])]),
            &mut st,
            &AdamWConfig::default(),
            0.1,
        )
        .unwrap();
        assert_eq!(p["b"].data(), &[1.0]);
        assert!(!st.first.contains_key("b"));
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut p = params(&[("a", vec![1.0, 2.0])]);
        let mut st = OptimState::new([("a", true)]);
        assert!(adamw_step(
            &mut p,
            &grads(&[("a", vec![1.0])]),
            &mut st,
            &AdamWConfig::default(),
            0.1
        )
        .is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            peak_rate: 1e-3,
            warmup_epochs: 5,
            total_epochs: 25,
            steps_per_epoch: 4,
        };
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert!((lr_at(20, &s).unwrap() - 1e-3).abs() < 1e-15);
        // cosine segment is steps 20..=100, midpoint 60
        assert!((lr_at(60, &s).unwrap() - 5e-4).abs() < 1e-15);
        assert!(lr_at(100, &s).unwrap().abs() < 1e-15);
        assert!(lr_at(101, &s).is_err());
        // continuity at the boundary
        assert!((lr_at(19, &s).unwrap() - lr_at(21, &s).unwrap()).abs() < 1e-4);
    }
}
