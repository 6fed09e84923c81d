//! Python bindings. Losses return `(value, grad, margin, branch)` tuples;
//! library errors surface as `ValueError`.

use margin_forge::classifier;
use margin_forge::drw_schedule::{self, TrainConfig};
use margin_forge::experiment::{self, ExperimentConfig};
use margin_forge::imbalance_data;
use margin_forge::margin_losses::{self, GradMode, MarginMode};
use margin_forge::{oracle, BaselineKind, Branch, ClassCounts, LossResult, MarginParams};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: margin_forge::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type LossTuple = (f64, Vec<f64>, f64, &'static str);

fn to_tuple(r: LossResult) -> LossTuple {
    let branch = match r.branch {
        Branch::Positive => "positive",
        Branch::Negative => "negative",
    };
    (r.value, r.grad, r.margin_used, branch)
}

fn counts_opt(counts: Option<Vec<usize>>) -> PyResult<Option<ClassCounts>> {
    counts.map(ClassCounts::new).transpose().map_err(err)
}

#[pyfunction]
fn hard_positive_margin(z: Vec<f64>, y: usize, delta_plus: f64) -> PyResult<f64> {
    margin_losses::hard_positive_margin(&z, y, delta_plus).map_err(err)
}

#[pyfunction]
fn hard_negative_margin(z: Vec<f64>, y: usize, delta_minus: f64) -> PyResult<f64> {
    margin_losses::hard_negative_margin(&z, y, delta_minus).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (counts, c=None))]
fn ldam_gammas(counts: Vec<usize>, c: Option<f64>) -> PyResult<Vec<f64>> {
    let counts = ClassCounts::new(counts).map_err(err)?;
    let c = margin_losses::resolve_ldam_constant(c, &counts);
    margin_losses::ldam_gammas(&counts, c).map_err(err)
}

#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (
    z, y, delta_neg=0.6, beta=1.5, counts=None, class_aware=false,
    ldam_constant=None, stop_margin=false, no_margin=false
))]
fn mm_loss(
    z: Vec<f64>,
    y: usize,
    delta_neg: f64,
    beta: f64,
    counts: Option<Vec<usize>>,
    class_aware: bool,
    ldam_constant: Option<f64>,
    stop_margin: bool,
    no_margin: bool,
) -> PyResult<LossTuple> {
    let params = MarginParams {
        class_aware,
        ldam_constant,
        grad_mode: if stop_margin {
            GradMode::StopMargin
        } else {
            GradMode::Full
        },
        margin_mode: if no_margin {
            MarginMode::None
        } else {
            MarginMode::Mm
        },
        ..MarginParams::new(delta_neg, beta)
    };
    let counts = counts_opt(counts)?;
    margin_losses::mm_loss(&z, y, &params, counts.as_ref())
        .map(to_tuple)
        .map_err(err)
}

/// `kind` is one of `ce`, `focal`, `ldam`.
#[pyfunction]
#[pyo3(signature = (kind, z, y, focal_gamma=2.0, counts=None, ldam_constant=None))]
fn baseline_loss(
    kind: &str,
    z: Vec<f64>,
    y: usize,
    focal_gamma: f64,
    counts: Option<Vec<usize>>,
    ldam_constant: Option<f64>,
) -> PyResult<LossTuple> {
    let kind = match kind {
        "ce" => BaselineKind::Ce,
        "focal" => BaselineKind::Focal,
        "ldam" => BaselineKind::Ldam,
        other => return Err(PyValueError::new_err(format!("unknown baseline `{other}`"))),
    };
    let counts = counts_opt(counts)?;
    let opts = margin_losses::BaselineOptions {
        focal_gamma,
        counts: counts.as_ref(),
        ldam_constant,
    };
    margin_losses::baseline_loss(kind, &z, y, &opts)
        .map(to_tuple)
        .map_err(err)
}

/// Central-difference relative error of the MM gradient against the
/// independent reference loss.
#[pyfunction]
#[pyo3(signature = (z, y, delta_neg=0.6, beta=1.5))]
fn mm_gradient_error(z: Vec<f64>, y: usize, delta_neg: f64, beta: f64) -> PyResult<f64> {
    let params = MarginParams::new(delta_neg, beta);
    let analytic = margin_losses::mm_loss(&z, y, &params, None).map_err(err)?;
    let numeric = oracle::finite_diff_gradient(
        |p| oracle::reference_loss(p, y, &params, None).unwrap_or(f64::NAN),
        &z,
        &oracle::FdSpec::default(),
    )
    .map_err(err)?;
    Ok(oracle::gradient_relative_error(&analytic.grad, &numeric))
}

#[pyfunction]
#[pyo3(signature = (hidden, weights, scale=10.0))]
fn normalized_logits(hidden: Vec<f64>, weights: Vec<f64>, scale: f64) -> PyResult<Vec<f64>> {
    classifier::normalized_logits(&hidden, &weights, scale).map_err(err)
}

#[pyfunction]
fn long_tailed_counts(k: usize, n_max: usize, rho: f64) -> PyResult<Vec<usize>> {
    imbalance_data::long_tailed_counts(k, n_max, rho)
        .map(|p| p.counts.as_slice().to_vec())
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (k, n_max, rho, majority_frac=0.5))]
fn step_counts(k: usize, n_max: usize, rho: f64, majority_frac: f64) -> PyResult<Vec<usize>> {
    imbalance_data::step_counts(k, n_max, rho, majority_frac)
        .map(|p| p.counts.as_slice().to_vec())
        .map_err(err)
}

/// Learning rate of the desk schedule for `epochs` total epochs.
#[pyfunction]
fn desk_lr(epoch: usize, epochs: usize) -> f64 {
    drw_schedule::lr_at(epoch, &TrainConfig::desk(epochs))
}

/// Runs one experiment from a JSON config string (with optional dotted
/// `key=value` overrides) and returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, overrides=Vec::new()))]
fn run_experiment(py: Python<'_>, config_json: &str, overrides: Vec<String>) -> PyResult<String> {
    let mut value: serde_json::Value = serde_json::from_str(config_json)
        .map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    for o in &overrides {
        experiment::apply_override(&mut value, o).map_err(err)?;
    }
    let cfg = ExperimentConfig::from_value(value).map_err(err)?;
    let outcome = py
        .detach(|| experiment::run_experiment(&cfg))
        .map_err(err)?;
    Ok(outcome.summary_json())
}

#[pymodule]
fn margin_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hard_positive_margin, m)?)?;
    m.add_function(wrap_pyfunction!(hard_negative_margin, m)?)?;
    m.add_function(wrap_pyfunction!(ldam_gammas, m)?)?;
    m.add_function(wrap_pyfunction!(mm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mm_gradient_error, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_logits, m)?)?;
    m.add_function(wrap_pyfunction!(long_tailed_counts, m)?)?;
    m.add_function(wrap_pyfunction!(step_counts, m)?)?;
    m.add_function(wrap_pyfunction!(desk_lr, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
