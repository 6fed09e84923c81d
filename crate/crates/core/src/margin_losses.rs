//! Loss kernels over a single logit vector.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the logits. The maximum-margin (MM) loss is a softmax
//! cross-entropy where the true-class logit is lowered by a data-dependent
//! margin
//!
//! ```text
//! Δ⁺ = exp(-max(z_y - max_{j≠y} z_j, 0) - δ⁺)   (example classified correctly)
//! Δ⁻ = exp(-max(max_{j≠y} z_j - z_y, 0) - δ⁻)   (example misclassified)
//! L  = -log( e^{z_y - Δ} / (e^{z_y - Δ} + Σ_{j≠y} e^{z_j}) )
//! ```
//!
//! with `δ⁺ = δ⁻·β`, or the class-aware variant `δ⁻_j = δ⁻ - γ_j`,
//! `δ⁺_j = (δ⁻ - γ_j)·β` where `γ_j = C / n_j^{1/4}`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest LDAM margin used when no explicit constant `C` is configured.
pub const DEFAULT_MAX_GAMMA: f64 = 0.5;

/// Per-class training sample counts `n_j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return invalid("class counts must name at least one class");
        }
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return invalid(format!("class {j} has a count of zero"));
        }
        Ok(Self(counts))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, class: usize) -> usize {
        self.0[class]
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(1)
    }

    pub fn min(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(1)
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// `ρ = max_j n_j / min_j n_j`.
    pub fn imbalance_ratio(&self) -> f64 {
        self.max() as f64 / self.min() as f64
    }

    /// Classes strictly below the geometric midpoint `sqrt(n_max · n_min)`.
    ///
    /// For a step profile these are exactly the minority classes; for a
    /// uniform profile the set is empty.
    pub fn is_minority(&self, class: usize) -> bool {
        let n = self.0[class] as u128;
        n * n < self.max() as u128 * self.min() as u128
    }
}

impl TryFrom<Vec<usize>> for ClassCounts {
    type Error = Error;

    fn try_from(counts: Vec<usize>) -> Result<Self> {
        Self::new(counts)
    }
}

impl From<ClassCounts> for Vec<usize> {
    fn from(counts: ClassCounts) -> Self {
        counts.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Differentiate through the margin (exp and hinge included).
    #[default]
    Full,
    /// Treat the margin as a constant for the current step.
    StopMargin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    #[default]
    Mm,
    /// Margin forced to zero; the loss reduces to cross-entropy.
    None,
}

/// Which case of the margin selector fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Positive,
    Negative,
}

/// Hyperparameters of the MM loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    /// `δ⁻`.
    pub delta_neg: f64,
    /// `β`, coupling `δ⁺ = δ⁻·β`.
    pub beta: f64,
    /// LDAM constant `C`; `None` picks `C` so that the largest `γ_j` is 0.5.
    pub ldam_constant: Option<f64>,
    /// Logit scale `s` used by the cosine classifier head.
    pub scale: f64,
    pub class_aware: bool,
    pub grad_mode: GradMode,
    pub margin_mode: MarginMode,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            delta_neg: 0.6,
            beta: 1.5,
            ldam_constant: None,
            scale: 10.0,
            class_aware: false,
            grad_mode: GradMode::Full,
            margin_mode: MarginMode::Mm,
        }
    }
}

impl MarginParams {
    pub fn new(delta_neg: f64, beta: f64) -> Self {
        Self {
            delta_neg,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_neg.is_finite() && self.delta_neg >= 0.0) {
            return Err(Error::Config(format!(
                "delta_neg must be finite and >= 0, got {}",
                self.delta_neg
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!(
                "scale must be > 0, got {}",
                self.scale
            )));
        }
        if let Some(c) = self.ldam_constant {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Config(format!(
                    "LDAM constant must be >= 0, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Effective `(δ⁺, δ⁻)` for an example of class `y`.
    pub fn effective_deltas(&self, y: usize, counts: Option<&ClassCounts>) -> Result<(f64, f64)> {
        if !self.class_aware {
            return Ok((self.delta_neg * self.beta, self.delta_neg));
        }
        let counts = counts.ok_or_else(|| {
            Error::Config("class-aware margins need per-class counts".to_string())
        })?;
        if y >= counts.num_classes() {
            return invalid(format!(
                "class {y} out of range for {} class counts",
                counts.num_classes()
            ));
        }
        let c = resolve_ldam_constant(self.ldam_constant, counts);
        let gamma = ldam_gamma(counts.get(y), c);
        let neg = self.delta_neg - gamma;
        Ok((neg * self.beta, neg))
    }

    /// Classes whose class-aware effective `δ⁻_j` is negative (`Δ` may exceed 1).
    pub fn negative_delta_classes(&self, counts: &ClassCounts) -> Vec<usize> {
        if !self.class_aware {
            return Vec::new();
        }
        let c = resolve_ldam_constant(self.ldam_constant, counts);
        (0..counts.num_classes())
            .filter(|&j| self.delta_neg - ldam_gamma(counts.get(j), c) < 0.0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossResult {
    pub value: f64,
    /// `∂L/∂z_j`.
    pub grad: Vec<f64>,
    /// The margin subtracted from the true-class logit.
    pub margin_used: f64,
    pub branch: Branch,
}

fn ldam_gamma(n: usize, c: f64) -> f64 {
    c / (n as f64).sqrt().sqrt()
}

/// `C` such that `max_j γ_j = max_gamma`, i.e. `max_gamma · n_min^{1/4}`.
pub fn ldam_constant_for_max(counts: &ClassCounts, max_gamma: f64) -> f64 {
    max_gamma * (counts.min() as f64).sqrt().sqrt()
}

pub fn resolve_ldam_constant(c: Option<f64>, counts: &ClassCounts) -> f64 {
    c.unwrap_or_else(|| ldam_constant_for_max(counts, DEFAULT_MAX_GAMMA))
}

/// `γ_j = C / n_j^{1/4}` for every class.
pub fn ldam_gammas(counts: &ClassCounts, c: f64) -> Result<Vec<f64>> {
    if !(c.is_finite() && c >= 0.0) {
        return invalid(format!("LDAM constant must be finite and >= 0, got {c}"));
    }
    Ok(counts
        .as_slice()
        .iter()
        .map(|&n| ldam_gamma(n, c))
        .collect())
}

fn check_logits(z: &[f64], y: usize) -> Result<()> {
    if z.len() < 2 {
        return invalid(format!("need at least 2 classes, got {}", z.len()));
    }
    if y >= z.len() {
        return invalid(format!("label {y} out of range for {} classes", z.len()));
    }
    if let Some(j) = z.iter().position(|v| !v.is_finite()) {
        return invalid(format!("logit {j} is not finite ({})", z[j]));
    }
    Ok(())
}

/// Index and value of `max_{j≠y} z_j`; the smallest index wins ties.
fn runner_up(z: &[f64], y: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (j, &v) in z.iter().enumerate() {
        if j != y && v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// `Δ⁺ = exp(-max(z_y - max_{j≠y} z_j, 0) - δ⁺)`.
pub fn hard_positive_margin(z: &[f64], y: usize, delta_plus: f64) -> Result<f64> {
    check_logits(z, y)?;
    let (_, other) = runner_up(z, y);
    Ok((-(z[y] - other).max(0.0) - delta_plus).exp())
}

/// `Δ⁻ = exp(-max(max_{j≠y} z_j - z_y, 0) - δ⁻)`.
pub fn hard_negative_margin(z: &[f64], y: usize, delta_minus: f64) -> Result<f64> {
    check_logits(z, y)?;
    let (_, other) = runner_up(z, y);
    Ok((-(other - z[y]).max(0.0) - delta_minus).exp())
}

struct MarginEval {
    value: f64,
    branch: Branch,
    /// `dΔ/du` with `u = z_y - z_r`.
    slope: f64,
    runner_up: usize,
}

fn eval_margin(
    z: &[f64],
    y: usize,
    params: &MarginParams,
    counts: Option<&ClassCounts>,
) -> Result<MarginEval> {
    check_logits(z, y)?;
    params.validate()?;
    if params.class_aware && counts.is_none() {
        return Err(Error::Config(
            "class-aware margins need per-class counts".to_string(),
        ));
    }
    if let Some(counts) = counts.filter(|_| params.class_aware) {
        if counts.num_classes() != z.len() {
            return invalid(format!(
                "{} logits but {} class counts",
                z.len(),
                counts.num_classes()
            ));
        }
    }
    let (r, other) = runner_up(z, y);
    let u = z[y] - other;
    let branch = if u >= 0.0 {
        Branch::Positive
    } else {
        Branch::Negative
    };
    if params.margin_mode == MarginMode::None {
        return Ok(MarginEval {
            value: 0.0,
            branch,
            slope: 0.0,
            runner_up: r,
        });
    }
    let (delta_plus, delta_minus) = params.effective_deltas(y, counts)?;
    let (value, slope) = match branch {
        Branch::Positive => {
            let v = (-u.max(0.0) - delta_plus).exp();
            // Hinge derivative at u == 0 is taken as 0.
            (v, if u > 0.0 { -v } else { 0.0 })
        }
        Branch::Negative => {
            let v = (-(-u).max(0.0) - delta_minus).exp();
            (v, v)
        }
    };
    Ok(MarginEval {
        value,
        branch,
        slope,
        runner_up: r,
    })
}

/// Margin selector: `Δ⁺` when `z_y ≥ max_{j≠y} z_j` (ties count as correct),
/// `Δ⁻` otherwise.
pub fn mm_margin(
    z: &[f64],
    y: usize,
    params: &MarginParams,
    counts: Option<&ClassCounts>,
) -> Result<(f64, Branch)> {
    let m = eval_margin(z, y, params, counts)?;
    Ok((m.value, m.branch))
}

/// Softmax cross-entropy with the true-class logit lowered by `margin`.
/// Returns `(value, p - e_y, p)`.
fn margin_cross_entropy(z: &[f64], y: usize, margin: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let shifted = |j: usize| if j == y { z[j] - margin } else { z[j] };
    let max = (0..z.len()).map(shifted).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..z.len()).map(|j| (shifted(j) - max).exp()).sum();
    let lse = max + sum.ln();
    let value = (lse - shifted(y)).max(0.0);
    let probs: Vec<f64> = (0..z.len()).map(|j| (shifted(j) - lse).exp()).collect();
    let mut grad = probs.clone();
    grad[y] -= 1.0;
    (value, grad, probs)
}

/// The MM loss for one example.
pub fn mm_loss(
    z: &[f64],
    y: usize,
    params: &MarginParams,
    counts: Option<&ClassCounts>,
) -> Result<LossResult> {
    let m = eval_margin(z, y, params, counts)?;
    let (value, mut grad, probs) = margin_cross_entropy(z, y, m.value);
    if params.grad_mode == GradMode::Full && m.slope != 0.0 {
        // ∂L/∂Δ = 1 - p_y and Δ depends on z through u = z_y - z_r.
        let outer = (1.0 - probs[y]) * m.slope;
        grad[y] += outer;
        grad[m.runner_up] -= outer;
    }
    Ok(LossResult {
        value,
        grad,
        margin_used: m.value,
        branch: m.branch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Ce,
    Focal,
    Ldam,
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineOptions<'a> {
    /// Focusing exponent `γ_f` of the focal loss.
    pub focal_gamma: f64,
    pub counts: Option<&'a ClassCounts>,
    /// LDAM constant `C`; `None` normalizes the largest margin to 0.5.
    pub ldam_constant: Option<f64>,
}

impl Default for BaselineOptions<'_> {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            counts: None,
            ldam_constant: None,
        }
    }
}

fn correctness(z: &[f64], y: usize) -> Branch {
    if z[y] >= runner_up(z, y).1 {
        Branch::Positive
    } else {
        Branch::Negative
    }
}

pub fn cross_entropy(z: &[f64], y: usize) -> Result<LossResult> {
    check_logits(z, y)?;
    let (value, grad, _) = margin_cross_entropy(z, y, 0.0);
    Ok(LossResult {
        value,
        grad,
        margin_used: 0.0,
        branch: correctness(z, y),
    })
}

/// `(1 - p_y)^γ · (-log p_y)`.
pub fn focal_loss(z: &[f64], y: usize, gamma: f64) -> Result<LossResult> {
    check_logits(z, y)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return invalid(format!("focal exponent must be >= 0, got {gamma}"));
    }
    let (ce, _, probs) = margin_cross_entropy(z, y, 0.0);
    // 1 - p_y summed from the other classes keeps precision when p_y ≈ 1.
    let q: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, p)| p)
        .sum();
    let qg = q.powf(gamma);
    let value = qg * ce;
    // ∂L/∂z_j = (γ q^{γ-1} p_y log p_y - q^γ)(1[j=y] - p_j), log p_y = -ce.
    let focus = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        -gamma * q.powf(gamma - 1.0) * probs[y] * ce
    };
    let coeff = focus - qg;
    let grad = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let indicator = if j == y { 1.0 } else { 0.0 };
            coeff * (indicator - p)
        })
        .collect();
    Ok(LossResult {
        value,
        grad,
        margin_used: 0.0,
        branch: correctness(z, y),
    })
}

/// Cross-entropy with the constant class margin `γ_y = C / n_y^{1/4}`.
pub fn ldam_loss(z: &[f64], y: usize, counts: &ClassCounts, c: Option<f64>) -> Result<LossResult> {
    check_logits(z, y)?;
    if counts.num_classes() != z.len() {
        return invalid(format!(
            "{} logits but {} class counts",
            z.len(),
            counts.num_classes()
        ));
    }
    let c = resolve_ldam_constant(c, counts);
    if !(c.is_finite() && c >= 0.0) {
        return invalid(format!("LDAM constant must be finite and >= 0, got {c}"));
    }
    let margin = ldam_gamma(counts.get(y), c);
    let (value, grad, _) = margin_cross_entropy(z, y, margin);
    Ok(LossResult {
        value,
        grad,
        margin_used: margin,
        branch: correctness(z, y),
    })
}

pub fn baseline_loss(
    kind: BaselineKind,
    z: &[f64],
    y: usize,
    opts: &BaselineOptions<'_>,
) -> Result<LossResult> {
    match kind {
        BaselineKind::Ce => cross_entropy(z, y),
        BaselineKind::Focal => focal_loss(z, y, opts.focal_gamma),
        BaselineKind::Ldam => {
            let counts = opts
                .counts
                .ok_or_else(|| Error::Config("LDAM loss needs per-class counts".to_string()))?;
            ldam_loss(z, y, counts, opts.ldam_constant)
        }
    }
}
