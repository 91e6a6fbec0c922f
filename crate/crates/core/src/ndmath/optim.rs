use serde::{Deserialize, Serialize};

use super::mlp::Parameters;
use crate::error::{Error, Result};

/// Bias-corrected Adam moments, laid out in the parameter visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P) -> Self {
        let mut shapes = Vec::new();
        params.visit(&mut |_, t| shapes.push(t.len()));
        Self {
            first_moment: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            second_moment: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update. Gradients are validated before anything is modified.
pub fn adam_step<P, G>(params: &mut P, grads: &G, state: &mut AdamState, rate: f64) -> Result<()>
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::OutOfRange(format!("learning rate {rate} must be positive")));
    }
    let mut grad_tensors: Vec<Vec<f64>> = Vec::new();
    let mut bad: Option<String> = None;
    grads.visit(&mut |name, t| {
        if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
        grad_tensors.push(t.to_vec());
    });
    if let Some(path) = bad {
        return Err(Error::NonFinite(format!("gradient of {path}")));
    }
    let mut shapes_ok = grad_tensors.len() == state.first_moment.len();
    let mut idx = 0;
    params.visit(&mut |_, t| {
        shapes_ok &= grad_tensors.get(idx).is_some_and(|g| g.len() == t.len())
            && state.first_moment.get(idx).is_some_and(|m| m.len() == t.len());
        idx += 1;
    });
    if !shapes_ok || idx != grad_tensors.len() {
        return Err(Error::Shape {
            context: "adam parameters",
            expected: idx,
            actual: grad_tensors.len(),
        });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut idx = 0;
    let (m_all, v_all) = (&mut state.first_moment, &mut state.second_moment);
    params.visit_mut(&mut |_, p| {
        let g = &grad_tensors[idx];
        let m = &mut m_all[idx];
        let v = &mut v_all[idx];
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= rate * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    Ok(())
}

/// Cosine decay from `initial_rate` to zero over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_rate: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(initial_rate: f64, total_steps: usize) -> Result<Self> {
        if !(initial_rate > 0.0 && initial_rate.is_finite()) {
            return Err(Error::OutOfRange("initial learning rate must be positive".into()));
        }
        if total_steps == 0 {
            return Err(Error::OutOfRange("schedule needs at least one step".into()));
        }
        Ok(Self {
            initial_rate,
            total_steps,
        })
    }
}

pub fn cosine_lr(schedule: &LrSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} beyond schedule length {}",
            schedule.total_steps
        )));
    }
    let progress = step as f64 / schedule.total_steps as f64;
    Ok(0.5 * schedule.initial_rate * (1.0 + (std::f64::consts::PI * progress).cos()))
}
