//! JSON-configured experiments: build data, model, loss and schedule, train,
//! evaluate, and write the report artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::Network;
use crate::drw_schedule::{train, EpochLog, LossSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::imbalance_data::{
    gaussian_mixture, load_cifar_binary, long_tailed_counts, step_counts, subsample,
    uniform_counts, CifarVariant, CountProfile, LabeledDataset, ProfileKind,
};
use crate::margin_losses::{ClassCounts, GradMode, MarginMode, MarginParams};
use crate::metrics::{evaluate, MetricsReport};
use crate::report::{epochs_csv, fmt_num, per_class_csv, per_class_svg, PerClassRow};

/// Overrides the configured output directory when set.
pub const OUTPUT_ENV: &str = "MARGIN_FORGE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gaussian,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub dim: usize,
    pub n_max: usize,
    pub rho: f64,
    pub profile: ProfileKind,
    pub majority_frac: f64,
    pub separation: f64,
    pub seed: u64,
    /// Balanced validation examples per class (synthetic data only).
    pub val_per_class: usize,
    /// Directory holding the CIFAR `.bin` files.
    pub cifar_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Gaussian,
            num_classes: 3,
            dim: 10,
            n_max: 2000,
            rho: 100.0,
            profile: ProfileKind::LongTailed,
            majority_frac: 0.5,
            separation: 2.0,
            seed: 0,
            val_per_class: 500,
            cifar_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Erm,
    Focal,
    Ldam,
    Mm,
    MmLdam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// `None` takes the tuned value for the dataset setting, see [`tuned_margins`].
    pub delta_neg: Option<f64>,
    pub beta: Option<f64>,
    pub ldam_constant: Option<f64>,
    pub scale: f64,
    pub grad_mode: GradMode,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Mm,
            delta_neg: None,
            beta: None,
            ldam_constant: None,
            scale: 10.0,
            grad_mode: GradMode::Full,
            focal_gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in comparison tables.
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: TrainConfig,
    pub output: OutputConfig,
}

/// Best `(β, δ⁻)` from the CIFAR ablations, keyed by class count (≤ 10 means
/// the CIFAR-10 table), profile and the nearer of ρ = 10 / 100.
pub fn tuned_margins(num_classes: usize, profile: ProfileKind, rho: f64) -> (f64, f64) {
    let high = (rho.max(1.0)).log10() >= 1.5;
    let step = profile == ProfileKind::Step;
    match (num_classes <= 10, step, high) {
        (true, false, true) => (1.5, 0.6),
        (true, true, true) => (1.3, 0.6),
        (true, false, false) => (1.2, 0.7),
        (true, true, false) => (1.0, 2.1),
        (false, false, true) => (1.3, 1.2),
        (false, true, true) => (1.8, 1.8),
        (false, false, false) => (1.4, 1.5),
        (false, true, false) => (1.1, 2.4),
    }
}

impl ExperimentConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON config and applies dotted `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.num_classes < 2 {
            return Err(Error::Config(
                "dataset.num_classes must be at least 2".into(),
            ));
        }
        if d.kind == DatasetKind::Gaussian && d.val_per_class == 0 {
            return Err(Error::Config(
                "dataset.val_per_class must be at least 1".into(),
            ));
        }
        if d.kind != DatasetKind::Gaussian {
            match &d.cifar_path {
                None => {
                    return Err(Error::Config(
                        "dataset.cifar_path is required for CIFAR".into(),
                    ))
                }
                Some(p) if !p.is_dir() => {
                    return Err(Error::Config(format!(
                        "dataset.cifar_path: {} is not a directory",
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        self.margin_params().validate()?;
        self.schedule.validate()
    }

    /// Method label: `name` if set, otherwise the loss kind plus `-drw` when
    /// the re-weighted stage is active.
    pub fn method_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let base = serde_json::to_value(self.loss.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        if self.schedule.switch_epoch < self.schedule.epochs {
            format!("{base}-drw")
        } else {
            base
        }
    }

    fn effective_num_classes(&self) -> usize {
        match self.dataset.kind {
            DatasetKind::Gaussian => self.dataset.num_classes,
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn margin_params(&self) -> MarginParams {
        let (beta, delta_neg) = tuned_margins(
            self.effective_num_classes(),
            self.dataset.profile,
            self.dataset.rho,
        );
        MarginParams {
            delta_neg: self.loss.delta_neg.unwrap_or(delta_neg),
            beta: self.loss.beta.unwrap_or(beta),
            ldam_constant: self.loss.ldam_constant,
            scale: self.loss.scale,
            class_aware: self.loss.kind == LossKind::MmLdam,
            grad_mode: self.loss.grad_mode,
            margin_mode: MarginMode::Mm,
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss.kind {
            LossKind::Erm => LossSpec::CrossEntropy,
            LossKind::Focal => LossSpec::Focal {
                gamma: self.loss.focal_gamma,
            },
            LossKind::Ldam => LossSpec::Ldam {
                constant: self.loss.ldam_constant,
            },
            LossKind::Mm | LossKind::MmLdam => LossSpec::MaxMargin(self.margin_params()),
        }
    }

    /// Sets both the data seed and the training seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.dataset.seed = seed;
        cfg.schedule.seed = seed;
        cfg
    }

    /// `MARGIN_FORGE_OUT` if set, else `output.dir`, else `out`.
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn parse_override(raw: &str) -> Result<(Vec<&str>, Value)> {
    let (key, val) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override `{raw}` has an empty key segment"
        )));
    }
    let value = serde_json::from_str(val.trim()).unwrap_or_else(|_| Value::String(val.to_string()));
    Ok((path, value))
}

/// Applies `a.b=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(config: &mut Value, raw: &str) -> Result<()> {
    let (path, value) = parse_override(raw)?;
    let mut node = config;
    for (i, key) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override `{raw}`: `{}` is not an object",
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub struct PreparedData {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub profile: CountProfile,
}

fn count_profile(d: &DatasetConfig, k: usize) -> Result<CountProfile> {
    match d.profile {
        ProfileKind::LongTailed => long_tailed_counts(k, d.n_max, d.rho),
        ProfileKind::Step => step_counts(k, d.n_max, d.rho, d.majority_frac),
        ProfileKind::Uniform => uniform_counts(k, d.n_max),
    }
    .map_err(|e| Error::Config(format!("dataset: {e}")))
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let k = cfg.effective_num_classes();
    let profile = count_profile(d, k)?;
    match d.kind {
        DatasetKind::Gaussian => {
            let train = gaussian_mixture(k, d.dim, &profile.counts, d.separation, d.seed)?;
            let val_counts = ClassCounts::new(vec![d.val_per_class; k])?;
            let validation = gaussian_mixture(
                k,
                d.dim,
                &val_counts,
                d.separation,
                d.seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
            )?;
            Ok(PreparedData {
                train,
                validation,
                profile,
            })
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let dir = d
                .cifar_path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.cifar_path is required for CIFAR".into()))?;
            let (variant, train_files, test_files) = if d.kind == DatasetKind::Cifar10 {
                (
                    CifarVariant::Cifar10,
                    (1..=5)
                        .map(|i| dir.join(format!("data_batch_{i}.bin")))
                        .collect(),
                    vec![dir.join("test_batch.bin")],
                )
            } else {
                (
                    CifarVariant::Cifar100,
                    vec![dir.join("train.bin")],
                    vec![dir.join("test.bin")],
                )
            };
            let base: Vec<PathBuf> = train_files;
            let full = load_cifar_binary(&base, variant)?;
            let train = subsample(&full, &profile, d.seed)?;
            let validation = load_cifar_binary(&test_files, variant)?;
            Ok(PreparedData {
                train,
                validation,
                profile,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub method: String,
    pub loss: LossKind,
    pub seed: u64,
    pub epochs: usize,
    pub switch_epoch: usize,
    pub beta: f64,
    pub delta_neg: f64,
    pub train_counts: Vec<usize>,
    pub validation_counts: Vec<usize>,
    pub overall_error: f64,
    pub majority_error: Option<f64>,
    pub minority_error: Option<f64>,
    pub per_class_error: Vec<f64>,
}

pub struct RunOutcome {
    pub model: Network,
    pub logs: Vec<EpochLog>,
    pub report: MetricsReport,
    pub train_counts: ClassCounts,
    pub summary: Summary,
}

impl RunOutcome {
    pub fn epochs_csv(&self) -> String {
        epochs_csv(&self.logs)
    }

    pub fn per_class_csv(&self) -> String {
        per_class_csv(&self.report, self.train_counts.as_slice())
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn per_class_svg(&self) -> String {
        let rows: Vec<PerClassRow> = self
            .report
            .per_class_error
            .iter()
            .enumerate()
            .map(|(j, &error)| PerClassRow {
                class: j.to_string(),
                error,
                count: self.train_counts.get(j),
            })
            .collect();
        per_class_svg(&rows)
    }

    /// Writes `epochs.csv`, `per_class.csv`, `summary.json` and `per_class.svg`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("epochs.csv"), self.epochs_csv())?;
        fs::write(dir.join("per_class.csv"), self.per_class_csv())?;
        fs::write(dir.join("summary.json"), self.summary_json())?;
        fs::write(dir.join("per_class.svg"), self.per_class_svg())?;
        Ok(())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let k = data.train.num_classes;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed);
    init_rng.set_stream(1);
    let model = Network::init(
        data.train.dim,
        &cfg.model.hidden,
        k,
        cfg.loss.scale,
        &mut init_rng,
    )?;
    let (model, logs) = train(&data.train, model, &cfg.loss_spec(), &cfg.schedule)?;
    let train_counts = data.train.per_class_counts()?;
    let report = evaluate(&model, &data.validation, Some(&train_counts))?;
    let params = cfg.margin_params();
    let summary = Summary {
        method: cfg.method_name(),
        loss: cfg.loss.kind,
        seed: cfg.schedule.seed,
        epochs: cfg.schedule.epochs,
        switch_epoch: cfg.schedule.switch_epoch,
        beta: params.beta,
        delta_neg: params.delta_neg,
        train_counts: train_counts.as_slice().to_vec(),
        validation_counts: report.class_support(),
        overall_error: report.overall_error,
        majority_error: report.majority_error,
        minority_error: report.minority_error,
        per_class_error: report.per_class_error.clone(),
    };
    Ok(RunOutcome {
        model,
        logs,
        report,
        train_counts,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub seeds: usize,
    pub overall_mean: f64,
    pub overall_std: f64,
    pub minority_mean: f64,
    pub minority_std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    /// `(method, seed, error)` for runs that failed.
    pub failures: Vec<(String, u64, Error)>,
}

impl CompareOutcome {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,seeds,overall_mean,overall_std,minority_mean,minority_std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method,
                r.seeds,
                fmt_num(r.overall_mean),
                fmt_num(r.overall_std),
                fmt_num(r.minority_mean),
                fmt_num(r.minority_std)
            ));
        }
        out
    }
}

/// Runs every config under every seed. Minority error is the mean per-class
/// error over the minority classes; for a profile without minority classes it
/// falls back to the overall error.
pub fn compare(configs: &[ExperimentConfig], seeds: &[u64]) -> CompareOutcome {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for cfg in configs {
        let method = cfg.method_name();
        let mut overall = Vec::new();
        let mut minority = Vec::new();
        for &seed in seeds {
            match run_experiment(&cfg.with_seed(seed)) {
                Ok(out) => {
                    overall.push(out.report.overall_error);
                    minority.push(
                        out.report
                            .minority_class_mean(&out.train_counts)
                            .unwrap_or(out.report.overall_error),
                    );
                }
                Err(e) => failures.push((method.clone(), seed, e)),
            }
        }
        if overall.is_empty() {
            continue;
        }
        let (overall_mean, overall_std) = mean_std(&overall);
        let (minority_mean, minority_std) = mean_std(&minority);
        rows.push(CompareRow {
            method,
            seeds: overall.len(),
            overall_mean,
            overall_std,
            minority_mean,
            minority_std,
        });
    }
    CompareOutcome { rows, failures }
}
