#![allow(dead_code)]

use margin_forge::margin_losses::{
    baseline_loss, mm_loss, BaselineKind, BaselineOptions, ClassCounts, GradMode, LossResult,
    MarginMode, MarginParams,
};
use margin_forge::oracle::{
    self, finite_diff_gradient, gradient_relative_error, near_kink, FdSpec,
};
use rand::Rng;

pub type LossFn<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;

/// One loss configuration exercised by the gradient and invariance checks.
#[derive(Debug, Clone)]
pub enum Case {
    Mm(MarginParams),
    Ce,
    Focal(f64),
    Ldam(Option<f64>),
}

impl Case {
    pub fn label(&self) -> String {
        match self {
            Case::Mm(p) => format!(
                "mm(δ⁻={:.3}, β={:.3}, aware={}, {:?}, {:?})",
                p.delta_neg, p.beta, p.class_aware, p.grad_mode, p.margin_mode
            ),
            Case::Ce => "ce".into(),
            Case::Focal(g) => format!("focal(γ={g:.3})"),
            Case::Ldam(c) => format!("ldam(C={c:?})"),
        }
    }

    pub fn eval(&self, z: &[f64], y: usize, counts: &ClassCounts) -> LossResult {
        match self {
            Case::Mm(p) => mm_loss(z, y, p, Some(counts)).unwrap(),
            Case::Ce => baseline_loss(BaselineKind::Ce, z, y, &BaselineOptions::default()).unwrap(),
            Case::Focal(g) => baseline_loss(
                BaselineKind::Focal,
                z,
                y,
                &BaselineOptions {
                    focal_gamma: *g,
                    ..Default::default()
                },
            )
            .unwrap(),
            Case::Ldam(c) => baseline_loss(
                BaselineKind::Ldam,
                z,
                y,
                &BaselineOptions {
                    counts: Some(counts),
                    ldam_constant: *c,
                    ..Default::default()
                },
            )
            .unwrap(),
        }
    }

    /// The function whose numerical derivative must match the analytic
    /// gradient. Stop-margin freezes the margin at its value at `z`.
    pub fn reference_fn<'a>(&'a self, z: &[f64], y: usize, counts: &'a ClassCounts) -> LossFn<'a> {
        match self {
            Case::Mm(p) if p.grad_mode == GradMode::StopMargin => {
                let frozen = mm_loss(z, y, p, Some(counts)).unwrap().margin_used;
                Box::new(move |x| oracle::reference_margin_loss(x, y, frozen))
            }
            Case::Mm(p) => {
                Box::new(move |x| oracle::reference_loss(x, y, p, Some(counts)).unwrap())
            }
            Case::Ce => Box::new(move |x| oracle::reference_cross_entropy(x, y).unwrap()),
            Case::Focal(g) => Box::new(move |x| oracle::reference_focal(x, y, *g).unwrap()),
            Case::Ldam(c) => Box::new(move |x| oracle::reference_ldam(x, y, counts, *c).unwrap()),
        }
    }

    /// Relative gradient error at `(z, y)`, or `None` inside the kink radius.
    pub fn gradient_error(
        &self,
        z: &[f64],
        y: usize,
        counts: &ClassCounts,
        spec: &FdSpec,
    ) -> Option<f64> {
        if near_kink(z, y, spec.kink_radius) {
            return None;
        }
        let analytic = self.eval(z, y, counts).grad;
        let numeric = finite_diff_gradient(self.reference_fn(z, y, counts), z, spec).unwrap();
        Some(gradient_relative_error(&analytic, &numeric))
    }
}

pub fn random_logits<R: Rng>(rng: &mut R, k: usize, range: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-range..range)).collect()
}

pub fn random_counts<R: Rng>(rng: &mut R, k: usize) -> ClassCounts {
    ClassCounts::new((0..k).map(|_| rng.random_range(1..=5000)).collect()).unwrap()
}

pub fn random_mm<R: Rng>(rng: &mut R) -> MarginParams {
    MarginParams {
        class_aware: rng.random_bool(0.3),
        ldam_constant: if rng.random_bool(0.5) {
            None
        } else {
            Some(rng.random_range(0.0..1.0))
        },
        grad_mode: if rng.random_bool(0.5) {
            GradMode::Full
        } else {
            GradMode::StopMargin
        },
        margin_mode: if rng.random_bool(0.9) {
            MarginMode::Mm
        } else {
            MarginMode::None
        },
        ..MarginParams::new(rng.random_range(0.0..2.0), rng.random_range(0.5..2.5))
    }
}

/// A random case of every loss family, cycling by `i`.
pub fn random_case<R: Rng>(rng: &mut R, i: usize) -> Case {
    match i % 4 {
        0 => Case::Mm(random_mm(rng)),
        1 => Case::Ce,
        2 => Case::Focal(rng.random_range(0.0..4.0)),
        _ => Case::Ldam(if rng.random_bool(0.5) {
            None
        } else {
            Some(rng.random_range(0.0..1.0))
        }),
    }
}
