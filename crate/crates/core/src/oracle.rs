//! Independent verification tools: central finite differences, compensated
//! arithmetic, and reference loss evaluations that share no helpers with
//! [`crate::margin_losses`].

use crate::error::{invalid, Error, Result};
use crate::margin_losses::{ClassCounts, MarginMode, MarginParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSpec {
    pub step: f64,
    /// Max relative error accepted by [`check_gradient`].
    pub tolerance: f64,
    /// Inputs closer than this to a hinge or argmax tie are skipped.
    pub kink_radius: f64,
}

impl Default for FdSpec {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            kink_radius: 1e-4,
        }
    }
}

impl FdSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.tolerance > 0.0 && self.kink_radius >= 0.0) {
            return invalid(format!("bad finite-difference spec {self:?}"));
        }
        Ok(())
    }
}

/// `g_i = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], spec: &FdSpec) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    spec.validate()?;
    let h = spec.step;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return invalid(format!(
                "function is not finite around coordinate {i} (f(+h) = {up}, f(-h) = {down})"
            ));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_i |a_i - n_i|` scaled by the larger infinity norm of the two vectors.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |acc, (a, n)| acc.max((a - n).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares `analytic` with central differences of `f` at `x`; returns the
/// relative error, or an error if it exceeds the tolerance.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], spec: &FdSpec) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = finite_diff_gradient(f, x, spec)?;
    let err = gradient_relative_error(analytic, &numeric);
    if err.is_finite() && err < spec.tolerance {
        Ok(err)
    } else {
        invalid(format!(
            "gradient mismatch: relative error {err:e} >= {:e}",
            spec.tolerance
        ))
    }
}

/// True when `z` sits within `radius` of the hinge (`z_y` vs. runner-up) or
/// of a tie between the two largest competing logits.
pub fn near_kink(z: &[f64], y: usize, radius: f64) -> bool {
    let mut others: Vec<f64> = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .collect();
    others.sort_by(|a, b| b.total_cmp(a));
    if (z[y] - others[0]).abs() < radius {
        return true;
    }
    others.len() > 1 && (others[0] - others[1]).abs() < radius
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Dot product in doubled working precision (error-free transformations).
pub fn dot2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot2 length mismatch");
    let mut hi = 0.0f64;
    let mut lo = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let p_err = x.mul_add(y, -p);
        let (s, s_err) = two_sum(hi, p);
        hi = s;
        lo += p_err + s_err;
    }
    hi + lo
}

/// Cosine logits `s · ⟨w_j, h⟩ / ((‖w_j‖ + ε)(‖h‖ + ε))` evaluated with
/// [`dot2`]. `weights` is row-major `K × d`.
pub fn reference_normalized_logits(hidden: &[f64], weights: &[f64], scale: f64) -> Vec<f64> {
    const EPS: f64 = 1e-12;
    let d = hidden.len();
    let h_norm = dot2(hidden, hidden).sqrt() + EPS;
    weights
        .chunks(d)
        .map(|w| {
            let w_norm = dot2(w, w).sqrt() + EPS;
            scale * dot2(w, hidden) / (w_norm * h_norm)
        })
        .collect()
}

/// `-log(e^{t} / (e^{t} + Σ_{j≠y} e^{z_j}))` with `t = z_y - margin`,
/// written as a softplus of the competing mass.
pub fn reference_margin_loss(z: &[f64], y: usize, margin: f64) -> f64 {
    let target = z[y] - margin;
    let lead = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v - target)
        .fold(f64::NEG_INFINITY, f64::max);
    if lead <= 0.0 {
        let mass = compensated_sum(
            z.iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| (v - target).exp()),
        );
        mass.ln_1p()
    } else {
        let mass = compensated_sum(
            std::iter::once((-lead).exp()).chain(
                z.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y)
                    .map(|(_, &v)| (v - target - lead).exp()),
            ),
        );
        lead + mass.ln()
    }
}

fn reference_check(z: &[f64], y: usize) -> Result<()> {
    if z.len() < 2 || y >= z.len() || z.iter().any(|v| !v.is_finite()) {
        return invalid(format!(
            "reference loss needs >= 2 finite logits and a label in range (K = {}, y = {y})",
            z.len()
        ));
    }
    Ok(())
}

/// Value of the MM loss, re-derived directly from the margin definitions.
pub fn reference_loss(
    z: &[f64],
    y: usize,
    params: &MarginParams,
    counts: Option<&ClassCounts>,
) -> Result<f64> {
    reference_check(z, y)?;
    if params.margin_mode == MarginMode::None {
        return Ok(reference_margin_loss(z, y, 0.0));
    }
    let (delta_minus, delta_plus) = if params.class_aware {
        let counts = counts.ok_or_else(|| {
            Error::Config("class-aware margins need per-class counts".to_string())
        })?;
        let n_min = counts.as_slice().iter().copied().min().unwrap_or(1) as f64;
        let c = params.ldam_constant.unwrap_or(0.5 * n_min.powf(0.25));
        let gamma = c / (counts.get(y) as f64).powf(0.25);
        (
            params.delta_neg - gamma,
            (params.delta_neg - gamma) * params.beta,
        )
    } else {
        (params.delta_neg, params.delta_neg * params.beta)
    };
    let best_other = z
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = if z[y] >= best_other {
        (-f64::max(z[y] - best_other, 0.0) - delta_plus).exp()
    } else {
        (-f64::max(best_other - z[y], 0.0) - delta_minus).exp()
    };
    Ok(reference_margin_loss(z, y, margin))
}

pub fn reference_cross_entropy(z: &[f64], y: usize) -> Result<f64> {
    reference_check(z, y)?;
    Ok(reference_margin_loss(z, y, 0.0))
}

pub fn reference_focal(z: &[f64], y: usize, gamma: f64) -> Result<f64> {
    reference_check(z, y)?;
    let ce = reference_margin_loss(z, y, 0.0);
    // 1 - p_y = 1 - e^{-ce}
    let q = -(-ce).exp_m1();
    Ok(q.powf(gamma) * ce)
}

pub fn reference_ldam(z: &[f64], y: usize, counts: &ClassCounts, c: Option<f64>) -> Result<f64> {
    reference_check(z, y)?;
    let n_min = counts.as_slice().iter().copied().min().unwrap_or(1) as f64;
    let c = c.unwrap_or(0.5 * n_min.powf(0.25));
    Ok(reference_margin_loss(
        z,
        y,
        c / (counts.get(y) as f64).powf(0.25),
    ))
}
