//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with the
//! measured quantities, then asserts. Run with `--nocapture` to see the lines.

mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{random_counts, random_logits, Case};
use margin_forge::drw_schedule::{class_weights, lr_at, TrainConfig};
use margin_forge::experiment::{compare, run_experiment, ExperimentConfig, RunOutcome};
use margin_forge::imbalance_data::{
    gaussian_mixture, load_cifar_binary, long_tailed_counts, parse_cifar, step_counts, subsample,
    CifarVariant, CIFAR_PIXELS,
};
use margin_forge::margin_losses::{
    cross_entropy, focal_loss, hard_negative_margin, hard_positive_margin, ldam_constant_for_max,
    ldam_loss, mm_loss, mm_margin, ClassCounts, GradMode, MarginMode, MarginParams,
};
use margin_forge::oracle::{near_kink, FdSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const FD_TOL: f64 = 1e-6;
const GATE_BUDGET: Duration = Duration::from_secs(10);
const NONE_TOL: f64 = 1e-12;
const DELTA30_TOL: f64 = 1e-9;
const FOCAL0_TOL: f64 = 1e-12;
const SHIFT_TOL: f64 = 1e-10;
const DELTA_TOL: f64 = 1e-12;
const LR_TOL: f64 = 1e-15;
const WEIGHT_TOL: f64 = 1e-12;
const MIN_WINS: usize = 4;
const MIN_GAP: f64 = 0.05;
const DESK_BUDGET: Duration = Duration::from_secs(60);
const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn verdict(id: u32, what: &str, ok: bool, detail: String) {
    println!(
        "criterion {id:>2} [{}] {what}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id} failed: {what}: {detail}");
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn criterion_01_gradient_oracle_gate() {
    let spec = FdSpec {
        tolerance: FD_TOL,
        ..FdSpec::default()
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    let mut worst_case = String::new();
    for i in 0..1000 {
        let k = [2, 10, 100][i % 3];
        let z = random_logits(&mut rng, k, 4.0);
        let y = rng.random_range(0..k);
        let counts = random_counts(&mut rng, k);
        let base = MarginParams {
            class_aware: rng.random_bool(0.5),
            ..MarginParams::new(rng.random_range(0.0..2.0), rng.random_range(0.5..2.5))
        };
        let cases = [
            Case::Mm(base.clone()),
            Case::Mm(MarginParams {
                grad_mode: GradMode::StopMargin,
                ..base
            }),
            Case::Ce,
            Case::Focal(rng.random_range(0.0..4.0)),
            Case::Ldam(None),
        ];
        if near_kink(&z, y, spec.kink_radius) {
            skipped += 1;
            continue;
        }
        for case in &cases {
            let err = case
                .gradient_error(&z, y, &counts, &spec)
                .expect("not a kink");
            checked += 1;
            if err > worst {
                worst = err;
                worst_case = format!("{} K={k}", case.label());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient oracle gate",
        worst < FD_TOL && elapsed < GATE_BUDGET && skipped < 50,
        format!(
            "{checked} checks ({skipped} kink samples skipped), max rel err {worst:.2e} < {FD_TOL:e} [{worst_case}], {:.2} s < {} s",
            elapsed.as_secs_f64(),
            GATE_BUDGET.as_secs()
        ),
    );
}

#[test]
fn criterion_02_identity_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut none_err, mut d30_err, mut focal_err) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let k = [2, 10, 100][i % 3];
        let z = random_logits(&mut rng, k, 6.0);
        let y = rng.random_range(0..k);
        let ce = cross_entropy(&z, y).unwrap();
        let none = mm_loss(
            &z,
            y,
            &MarginParams {
                margin_mode: MarginMode::None,
                ..MarginParams::default()
            },
            None,
        )
        .unwrap();
        none_err = none_err
            .max((none.value - ce.value).abs())
            .max(max_abs_diff(&none.grad, &ce.grad));
        let d30 = mm_loss(&z, y, &MarginParams::new(30.0, 1.0), None).unwrap();
        d30_err = d30_err
            .max((d30.value - ce.value).abs())
            .max(max_abs_diff(&d30.grad, &ce.grad));
        let f0 = focal_loss(&z, y, 0.0).unwrap();
        focal_err = focal_err
            .max((f0.value - ce.value).abs())
            .max(max_abs_diff(&f0.grad, &ce.grad));
    }
    let uniform = ClassCounts::new(vec![777; 10]).unwrap();
    let z = random_logits(&mut rng, 10, 3.0);
    let margins: Vec<f64> = (0..10)
        .map(|y| ldam_loss(&z, y, &uniform, None).unwrap().margin_used)
        .collect();
    let shared = margins.iter().all(|&m| m == margins[0]);
    let ok = none_err < NONE_TOL && d30_err < DELTA30_TOL && focal_err < FOCAL0_TOL && shared;
    verdict(
        2,
        "identity reductions",
        ok,
        format!(
            "NONE {none_err:.1e} < {NONE_TOL:e}, δ=30 {d30_err:.1e} < {DELTA30_TOL:e}, focal γ=0 {focal_err:.1e} < {FOCAL0_TOL:e}, LDAM uniform margin shared = {shared} ({:.6})",
            margins[0]
        ),
    );
}

#[test]
fn criterion_03_translation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut value_err, mut sum_err, mut checked) = (0.0f64, 0.0f64, 0usize);
    for i in 0..300 {
        let k = [2, 10, 100][i % 3];
        let z = random_logits(&mut rng, k, 5.0);
        let y = rng.random_range(0..k);
        if near_kink(&z, y, 1e-4) {
            continue;
        }
        let counts = random_counts(&mut rng, k);
        let aware = MarginParams {
            class_aware: true,
            ..MarginParams::new(1.1, 2.4)
        };
        let cases = [
            Case::Mm(MarginParams::new(0.6, 1.5)),
            Case::Mm(MarginParams {
                grad_mode: GradMode::StopMargin,
                ..MarginParams::new(0.6, 1.5)
            }),
            Case::Mm(aware),
            Case::Ce,
            Case::Focal(2.0),
            Case::Ldam(None),
        ];
        for case in &cases {
            let base = case.eval(&z, y, &counts);
            for c in [-100.0, 1.0, 7.3] {
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let r = case.eval(&shifted, y, &counts);
                value_err = value_err.max((r.value - base.value).abs());
                sum_err = sum_err.max(r.grad.iter().sum::<f64>().abs());
                checked += 1;
            }
        }
    }
    verdict(
        3,
        "translation invariance",
        value_err < SHIFT_TOL && sum_err < SHIFT_TOL,
        format!(
            "{checked} shifted evaluations, max |ΔL| {value_err:.1e}, max |Σ grad| {sum_err:.1e} (both < {SHIFT_TOL:e})"
        ),
    );
}

#[test]
fn criterion_04_margin_properties() {
    let grid = |lo: f64, hi: f64| -> Vec<f64> {
        (0..100).map(|i| lo + (hi - lo) * i as f64 / 99.0).collect()
    };
    let margins = grid(0.0, 5.0);
    let deltas = grid(0.0, 3.0);
    let strictly_decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);

    let mut monotone = true;
    for &d in &[0.0, 0.6, 1.7] {
        let pos: Vec<f64> = margins
            .iter()
            .map(|&m| hard_positive_margin(&[m, 0.0, -1.0], 0, d).unwrap())
            .collect();
        let neg: Vec<f64> = margins
            .iter()
            .map(|&m| hard_negative_margin(&[0.0, m, -1.0], 0, d).unwrap())
            .collect();
        monotone &= strictly_decreasing(&pos) && strictly_decreasing(&neg);
    }
    for &m in &[0.0, 0.5, 2.0] {
        let pos: Vec<f64> = deltas
            .iter()
            .map(|&d| hard_positive_margin(&[m, 0.0], 0, d).unwrap())
            .collect();
        let neg: Vec<f64> = deltas
            .iter()
            .map(|&d| hard_negative_margin(&[0.0, m], 0, d).unwrap())
            .collect();
        monotone &= strictly_decreasing(&pos) && strictly_decreasing(&neg);
    }

    // At the decision boundary the selector switches from Δ⁺ (δ⁺ = βδ⁻) to Δ⁻.
    let mut ordered = true;
    let mut pairs = 0;
    for &dn in deltas.iter().filter(|&&d| d > 0.0) {
        for &beta in &grid(1.01, 3.0) {
            let p = MarginParams::new(dn, beta);
            let (at_tie, _) = mm_margin(&[0.0, 0.0], 0, &p, None).unwrap();
            let (just_wrong, _) = mm_margin(&[0.0, 1e-9], 0, &p, None).unwrap();
            let plus = hard_positive_margin(&[0.0, 0.0], 0, dn * beta).unwrap();
            let minus = hard_negative_margin(&[0.0, 0.0], 0, dn).unwrap();
            ordered &= minus > plus && just_wrong > at_tie;
            pairs += 1;
        }
    }
    verdict(
        4,
        "margin properties",
        monotone && ordered,
        format!(
            "strictly decreasing in clamped margin and δ on 100-point grids = {monotone}; Δ⁻ > Δ⁺ for {pairs} (δ⁻ > 0, β > 1) pairs = {ordered}"
        ),
    );
}

#[test]
fn criterion_05_class_aware_deltas() {
    let counts = long_tailed_counts(10, 5000, 100.0).unwrap().counts;
    let c = ldam_constant_for_max(&counts, 0.5);
    let gammas: Vec<f64> = counts
        .as_slice()
        .iter()
        .map(|&n| c / (n as f64).powf(0.25))
        .collect();
    let max_gamma = gammas.iter().cloned().fold(f64::MIN, f64::max);
    let mut worst = (max_gamma - 0.5).abs();
    for (dn, beta) in [(0.6, 1.5), (1.1, 2.4), (1.7, 1.05)] {
        let p = MarginParams {
            class_aware: true,
            ldam_constant: Some(c),
            ..MarginParams::new(dn, beta)
        };
        let default_c = MarginParams {
            ldam_constant: None,
            ..p
        };
        for (j, g) in gammas.iter().enumerate() {
            let want_minus = dn - g;
            let want_plus = (dn - g) * beta;
            for params in [&p, &default_c] {
                let (plus, minus) = params.effective_deltas(j, Some(&counts)).unwrap();
                worst = worst
                    .max((plus - want_plus).abs())
                    .max((minus - want_minus).abs());
            }
        }
    }
    verdict(
        5,
        "class-aware margin offsets",
        counts.as_slice()[0] == 5000 && counts.as_slice()[9] == 50 && worst < DELTA_TOL,
        format!(
            "counts {:?}, C = {c:.9}, max γ = {max_gamma:.12}, max deviation {worst:.1e} < {DELTA_TOL:e}",
            counts.as_slice()
        ),
    );
}

#[test]
fn criterion_06_data_profiles() {
    let lt = long_tailed_counts(10, 5000, 100.0).unwrap().counts;
    let lt_ok = lt.as_slice()[0] == 5000
        && lt.as_slice()[9] == 50
        && lt.as_slice().windows(2).all(|w| w[0] >= w[1]);
    let step = step_counts(10, 5000, 100.0, 0.5).unwrap().counts;
    let step_ok = step.imbalance_ratio() == 100.0
        && step.as_slice()[..5] == [5000; 5]
        && step.as_slice()[5..] == [50; 5];

    let base = gaussian_mixture(10, 2, &ClassCounts::new(vec![5000; 10]).unwrap(), 1.0, 0).unwrap();
    let profile = long_tailed_counts(10, 5000, 100.0).unwrap();
    let sub = subsample(&base, &profile, 3).unwrap();
    let sub_ok = sub.class_histogram() == profile.counts.as_slice();
    verdict(
        6,
        "data profiles",
        lt_ok && step_ok && sub_ok,
        format!(
            "long-tailed {:?} ok={lt_ok}; step ratio {} ok={step_ok}; subsample histogram exact={sub_ok}",
            lt.as_slice(),
            step.imbalance_ratio()
        ),
    );
}

#[test]
fn criterion_07_schedule() {
    let cfg = TrainConfig::default();
    let expect = |e: usize| -> f64 {
        match e {
            0..=4 => 0.1 * (e + 1) as f64 / 5.0,
            5..=159 => 0.1,
            160..=179 => 1e-3,
            _ => 1e-5,
        }
    };
    let lr_err = (0..200)
        .map(|e| ((lr_at(e, &cfg) - expect(e)) / expect(e)).abs())
        .fold(0.0f64, f64::max);

    let counts = long_tailed_counts(10, 5000, 100.0).unwrap().counts;
    let batch: Vec<usize> = (0..128).map(|i| (i * 7) % 10).collect();
    let before_uniform = (0..160)
        .all(|e| class_weights(e, &cfg, &counts, &batch).unwrap().per_class == vec![1.0; 10]);
    let mut after_err = 0.0f64;
    for e in [160, 170, 199] {
        let w = class_weights(e, &cfg, &counts, &batch).unwrap();
        let mean_inv = batch
            .iter()
            .map(|&y| 1.0 / counts.get(y) as f64)
            .sum::<f64>()
            / batch.len() as f64;
        for j in 0..10 {
            let want = (1.0 / counts.get(j) as f64) / mean_inv;
            after_err = after_err.max((w.get(j) - want).abs() / want);
        }
    }
    verdict(
        7,
        "schedule exactness",
        lr_err < LR_TOL && before_uniform && after_err < WEIGHT_TOL,
        format!(
            "lr max rel err {lr_err:.1e} < {LR_TOL:e} (lr(185) = {:e}); uniform weights before epoch 160 = {before_uniform}; inverse-count weights from 160 rel err {after_err:.1e} < {WEIGHT_TOL:e}",
            lr_at(185, &cfg)
        ),
    );
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn desk_configs() -> (ExperimentConfig, ExperimentConfig) {
    let mm = ExperimentConfig::load(&config_path("synthetic_lt100.json"), &[]).unwrap();
    let erm = ExperimentConfig::load(&config_path("synthetic_lt100_erm.json"), &[]).unwrap();
    (mm, erm)
}

struct DeskRuns {
    mm: Vec<RunOutcome>,
    erm: Vec<RunOutcome>,
    elapsed: Duration,
}

fn desk_runs() -> DeskRuns {
    let (mm, erm) = desk_configs();
    let start = Instant::now();
    let run_all = |cfg: &ExperimentConfig| -> Vec<RunOutcome> {
        DESK_SEEDS
            .iter()
            .map(|&s| run_experiment(&cfg.with_seed(s)).unwrap())
            .collect()
    };
    let mm = run_all(&mm);
    let erm = run_all(&erm);
    DeskRuns {
        mm,
        erm,
        elapsed: start.elapsed(),
    }
}

fn shared_desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(desk_runs)
}

fn minority_mean(run: &RunOutcome) -> f64 {
    run.report.minority_class_mean(&run.train_counts).unwrap()
}

#[test]
fn criterion_08_desk_scale_ordering() {
    let (mm_cfg, erm_cfg) = desk_configs();
    let setup_ok = [&mm_cfg, &erm_cfg].iter().all(|c| {
        c.dataset.num_classes == 3
            && c.dataset.dim == 10
            && c.model.hidden == [64]
            && c.schedule.epochs == 50
    }) && mm_cfg.schedule.switch_epoch == 40
        && mm_cfg.method_name() == "mm-drw"
        && erm_cfg.method_name() == "erm";

    let runs = shared_desk_runs();
    let counts_ok = runs
        .mm
        .iter()
        .chain(&runs.erm)
        .all(|r| r.train_counts.as_slice() == [2000, 200, 20]);
    let mm: Vec<f64> = runs.mm.iter().map(minority_mean).collect();
    let erm: Vec<f64> = runs.erm.iter().map(minority_mean).collect();
    let wins = mm.iter().zip(&erm).filter(|(a, b)| a < b).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&erm) - mean(&mm);
    let ok =
        setup_ok && counts_ok && wins >= MIN_WINS && gap >= MIN_GAP && runs.elapsed < DESK_BUDGET;
    verdict(
        8,
        "desk-scale MM-DRW vs ERM",
        ok,
        format!(
            "minority error MM-DRW {mm:.3?} vs ERM {erm:.3?}; wins {wins}/5 (>= {MIN_WINS}), mean gap {gap:.3} (>= {MIN_GAP}), {:.1} s < {} s, setup ok={setup_ok}, counts [2000,200,20] ok={counts_ok}",
            runs.elapsed.as_secs_f64(),
            DESK_BUDGET.as_secs()
        ),
    );
}

fn csv_bytes(runs: &DeskRuns) -> Vec<(String, String)> {
    runs.mm
        .iter()
        .chain(&runs.erm)
        .flat_map(|r| {
            let tag = format!("{}-seed{}", r.summary.method, r.summary.seed);
            [
                (format!("{tag}/epochs.csv"), r.epochs_csv()),
                (format!("{tag}/per_class.csv"), r.per_class_csv()),
            ]
        })
        .collect()
}

#[test]
fn criterion_09_determinism() {
    let first = csv_bytes(shared_desk_runs());
    let second = csv_bytes(&desk_runs());
    let files_equal = first == second;

    let (mm, erm) = desk_configs();
    let cmp_a = compare(&[mm.clone(), erm.clone()], &DESK_SEEDS).to_csv();
    let cmp_b = compare(&[mm, erm], &DESK_SEEDS).to_csv();

    // Round-trip through the filesystem as the CLI does.
    let dir = tempfile::tempdir().unwrap();
    let mut disk_equal = true;
    for (i, (name, text)) in first.iter().enumerate() {
        let path = dir.path().join(format!("{i}.csv"));
        std::fs::write(&path, text).unwrap();
        disk_equal &= std::fs::read(&path).unwrap() == second[i].1.as_bytes();
        assert_eq!(name, &second[i].0);
    }
    verdict(
        9,
        "determinism",
        files_equal && disk_equal && cmp_a == cmp_b,
        format!(
            "{} per-run CSV files byte-identical = {}, comparison CSV byte-identical = {}",
            first.len(),
            files_equal && disk_equal,
            cmp_a == cmp_b
        ),
    );
}

/// Directory with the CIFAR-10 binary batches, if available.
const CIFAR_ENV: &str = "MARGIN_FORGE_CIFAR_DIR";

#[test]
fn criterion_10_cifar_loader() {
    let labels: Vec<u8> = (0..10).map(|i| (i * 3 % 10) as u8).collect();
    let mut bytes = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        bytes.push(l);
        bytes.extend((0..CIFAR_PIXELS).map(|p| ((p * 7 + i) % 256) as u8));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ten.bin");
    std::fs::write(&path, &bytes).unwrap();
    let data = load_cifar_binary(&[&path], CifarVariant::Cifar10).unwrap();
    let parsed = parse_cifar(&bytes, CifarVariant::Cifar10, 0).unwrap();
    let mut round_trip = data == parsed
        && data.len() == 10
        && data.labels == labels.iter().map(|&l| l as usize).collect::<Vec<_>>();
    for i in 0..10 {
        let (x, _) = data.example(i);
        round_trip &= x
            .iter()
            .enumerate()
            .all(|(p, &v)| (v * 255.0).round() as usize == (p * 7 + i) % 256);
    }

    let full = match std::env::var_os(CIFAR_ENV) {
        None => "full load skipped (set MARGIN_FORGE_CIFAR_DIR)".to_string(),
        Some(dir) => {
            let dir = PathBuf::from(dir);
            let files: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect();
            let train = load_cifar_binary(&files, CifarVariant::Cifar10).unwrap();
            let hist = train.class_histogram();
            round_trip &= hist == vec![5000; 10];
            format!("full train set histogram {hist:?}")
        }
    };
    verdict(
        10,
        "CIFAR loader",
        round_trip,
        format!("10-record round trip exact; {full}"),
    );
}
