//! Vector primitives with hand-written vector-Jacobian products.

use crate::error::{check_len, Error, Result};

/// Smoothing applied to the predicted argument of [`kl_divergence`].
pub const KL_EPSILON: f64 = 1e-8;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Unit vector `x / ‖x‖` together with `‖x‖`, needed for the backward pass.
pub fn normalize(x: &[f64], what: &'static str) -> Result<(Vec<f64>, f64)> {
    let n = norm(x);
    if !n.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    if n == 0.0 {
        return Err(Error::Degenerate(what));
    }
    Ok((x.iter().map(|v| v / n).collect(), n))
}

/// Backward of `y = x / ‖x‖`: maps `dL/dy` to `dL/dx`.
pub fn normalize_backward(unit: &[f64], norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(grad_unit, unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, y)| (g - proj * y) / norm)
        .collect()
}

/// Cosine similarity with gradients with respect to both arguments.
#[derive(Debug, Clone)]
pub struct Cosine {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_with_grad(a, b)?.value)
}

pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<Cosine> {
    check_len("cosine_similarity", a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("embedding"));
    }
    if !(na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let ab = dot(a, b);
    let value = (ab / (na * nb)).clamp(-1.0, 1.0);
    let inv = 1.0 / (na * nb);
    let c = ab / (na * nb);
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| bi * inv - c * ai / (na * na))
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai * inv - c * bi / (nb * nb))
        .collect();
    Ok(Cosine {
        value,
        grad_a,
        grad_b,
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `KL(p ‖ q)` with `epsilon` added to `q` before renormalization.
///
/// Terms with `p_i = 0` contribute zero, and identical arguments give exactly
/// zero.
pub fn kl_divergence(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64> {
    check_len("kl_divergence", p.len(), q.len())?;
    if p.iter().chain(q).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidDistribution(
            "negative or non-finite entry".into(),
        ));
    }
    if epsilon <= 0.0 {
        return Err(Error::OutOfRange("kl epsilon must be positive".into()));
    }
    if p == q {
        return Ok(0.0);
    }
    let p_total: f64 = p.iter().sum();
    let q_total: f64 = q.iter().sum::<f64>() + epsilon * q.len() as f64;
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            let pn = pi / p_total;
            let qn = (qi + epsilon) / q_total;
            kl += pn * (pn / qn).ln();
        }
    }
    Ok(kl.max(0.0))
}
