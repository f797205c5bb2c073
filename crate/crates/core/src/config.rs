//! Experiment configuration: a hierarchical TOML file whose hyperparameter
//! names mirror the shipped experiment tables (`lr`, `alpha`, `beta`,
//! `lambda`, `lambda_fp`, `lambda_fp_repl`, `eps`, `bs`, `eps_pretr`), so
//! published grids transcribe directly.

use crate::backbone::ArchId;
use crate::benchmark::{Augment, BenchmarkOptions, DatasetId};
use crate::error::{Error, Result};
use crate::trainer::{MarginMode, Method, TrainerConfig, WeightConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Environment variable overriding `benchmark.data_root`.
pub const DATA_ROOT_ENV: &str = "CL_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentBlock,
    pub benchmark: BenchmarkBlock,
    pub model: ModelBlock,
    #[serde(default)]
    pub pretrain: PretrainBlock,
    pub method: MethodBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentBlock {
    pub name: String,
    #[serde(default = "default_output")]
    pub output: String,
    pub seeds: Vec<u64>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_output() -> String {
    "runs".to_string()
}

fn default_dtype() -> String {
    "f32".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkBlock {
    pub dataset: String,
    pub num_tasks: usize,
    #[serde(default)]
    pub shuffle_classes: bool,
    pub pretrain_dataset: Option<String>,
    /// Input resolution; pretraining data is resampled to it.
    pub resolution: Option<usize>,
    #[serde(default = "default_data_root")]
    pub data_root: String,
    #[serde(default)]
    pub pad_crop: usize,
    #[serde(default)]
    pub hflip: bool,
    /// Per-class example counts for the synthetic families.
    #[serde(default = "default_glyph_train")]
    pub glyph_train_per_class: usize,
    #[serde(default = "default_glyph_test")]
    pub glyph_test_per_class: usize,
}

fn default_data_root() -> String {
    "data".to_string()
}

fn default_glyph_train() -> usize {
    200
}

fn default_glyph_test() -> usize {
    80
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBlock {
    pub arch: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainBlock {
    /// `eps_pretr`: pretraining epochs; 0 keeps the random initialization.
    #[serde(default)]
    pub eps_pretr: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "default_bs")]
    pub bs: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub lr_decay_steps: Vec<usize>,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

impl Default for PretrainBlock {
    fn default() -> Self {
        PretrainBlock {
            eps_pretr: 0,
            lr: default_pretrain_lr(),
            bs: default_bs(),
            momentum: 0.0,
            weight_decay: 0.0,
            lr_decay: 1.0,
            lr_decay_steps: Vec::new(),
            probe_size: default_probe(),
        }
    }
}

fn default_pretrain_lr() -> f64 {
    0.1
}

fn default_bs() -> usize {
    32
}

fn default_one() -> f64 {
    1.0
}

fn default_probe() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodBlock {
    pub name: String,
    /// `eps`: epochs per task.
    pub eps: usize,
    /// `bs`: stream batch size.
    #[serde(default = "default_bs")]
    pub bs: usize,
    #[serde(default = "default_bs")]
    pub replay_bs: usize,
    pub lr: f64,
    #[serde(default = "default_one")]
    pub lr_decay: f64,
    #[serde(default)]
    pub lr_decay_steps: Vec<usize>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub buffer: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    /// Diversity weight (λ).
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub lambda_fp: f64,
    #[serde(default)]
    pub lambda_fp_repl: f64,
    #[serde(default = "default_one")]
    pub temperature_aux: f64,
    #[serde(default = "default_one")]
    pub gumbel_temperature: f64,
    #[serde(default = "default_margin_mode")]
    pub margin_mode: String,
    #[serde(default)]
    pub margin_refresh: bool,
    #[serde(default)]
    pub ewc_lambda: f64,
    #[serde(default = "default_one")]
    pub oewc_gamma: f64,
    #[serde(default = "default_lwf_alpha")]
    pub lwf_alpha: f64,
    #[serde(default = "default_lwf_tau")]
    pub lwf_tau: f64,
    #[serde(default)]
    pub pretrain_rehearsal_fraction: f64,
    #[serde(default = "default_fisher")]
    pub fisher_samples: usize,
    #[serde(default = "default_eval_bs")]
    pub eval_bs: usize,
}

fn default_margin_mode() -> String {
    "estimated".to_string()
}

fn default_lwf_alpha() -> f64 {
    0.3
}

fn default_lwf_tau() -> f64 {
    2.0
}

fn default_fisher() -> usize {
    256
}

fn default_eval_bs() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisBlock {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_cka_probe")]
    pub cka_probe: usize,
    #[serde(default = "default_knn_train")]
    pub knn_train: usize,
    #[serde(default = "default_knn_test")]
    pub knn_test: usize,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        AnalysisBlock {
            enabled: false,
            cka_probe: default_cka_probe(),
            knn_train: default_knn_train(),
            knn_test: default_knn_test(),
            knn_k: default_knn_k(),
        }
    }
}

fn default_cka_probe() -> usize {
    2000
}

fn default_knn_train() -> usize {
    1000
}

fn default_knn_test() -> usize {
    500
}

fn default_knn_k() -> usize {
    10
}

// ---------------------------------------------------------------------------
// diagnostics & validation

/// A validation finding with a config-path locator (`block.field`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {}", path.display(), e)))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e)))
    }

    /// Empty iff the configuration is runnable.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |path: &str, message: String| {
            out.push(Diagnostic {
                path: path.to_string(),
                message,
            })
        };

        if self.experiment.name.is_empty() {
            push("experiment.name", "must not be empty".into());
        }
        if self.experiment.seeds.is_empty() {
            push("experiment.seeds", "seed list must be non-empty".into());
        }
        if !matches!(self.experiment.dtype.as_str(), "f32" | "f64") {
            push(
                "experiment.dtype",
                format!("'{}' is not one of f32, f64", self.experiment.dtype),
            );
        }

        let dataset = match DatasetId::from_str(&self.benchmark.dataset) {
            Ok(d) => Some(d),
            Err(e) => {
                push("benchmark.dataset", e.to_string());
                None
            }
        };
        if let Some(d) = dataset {
            if self.benchmark.num_tasks == 0 {
                push("benchmark.num_tasks", "must be positive".into());
            } else if !d.num_classes().is_multiple_of(self.benchmark.num_tasks) {
                push(
                    "benchmark.num_tasks",
                    format!(
                        "{} classes are not divisible into {} tasks",
                        d.num_classes(),
                        self.benchmark.num_tasks
                    ),
                );
            }
        }
        if let Some(p) = &self.benchmark.pretrain_dataset {
            if let Err(e) = DatasetId::from_str(p) {
                push("benchmark.pretrain_dataset", e.to_string());
            }
        }

        if let Err(e) = ArchId::from_str(&self.model.arch) {
            push("model.arch", e.to_string());
        }

        let method = match Method::from_str(&self.method.name) {
            Ok(m) => Some(m),
            Err(e) => {
                push("method.name", e.to_string());
                None
            }
        };
        if self.method.eps == 0 {
            push("method.eps", "must be positive".into());
        }
        if self.method.bs == 0 {
            push("method.bs", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.method.pretrain_rehearsal_fraction) {
            push(
                "method.pretrain_rehearsal_fraction",
                format!(
                    "{} out of range [0,1]",
                    self.method.pretrain_rehearsal_fraction
                ),
            );
        }
        if !matches!(self.method.margin_mode.as_str(), "estimated" | "zero") {
            push(
                "method.margin_mode",
                format!("'{}' is not one of estimated, zero", self.method.margin_mode),
            );
        }
        for (name, v) in [
            ("method.alpha", self.method.alpha),
            ("method.beta", self.method.beta),
            ("method.lambda", self.method.lambda),
            ("method.lambda_fp", self.method.lambda_fp),
            ("method.lambda_fp_repl", self.method.lambda_fp_repl),
            ("method.ewc_lambda", self.method.ewc_lambda),
        ] {
            if v < 0.0 || !v.is_finite() {
                push(name, format!("{} must be non-negative", v));
            }
        }
        if self.method.gumbel_temperature <= 0.0 {
            push("method.gumbel_temperature", "must be positive".into());
        }
        if self.method.temperature_aux <= 0.0 {
            push("method.temperature_aux", "must be positive".into());
        }
        if let Some(m) = method {
            if m.uses_buffer() && self.method.buffer == 0 && m != Method::Twf {
                push(
                    "method.buffer",
                    format!("method '{}' needs a positive buffer capacity", m),
                );
            }
            if matches!(m, Method::Twf | Method::DerppEwc) && self.benchmark.pretrain_dataset.is_none()
            {
                push(
                    "benchmark.pretrain_dataset",
                    format!("method '{}' requires a pretraining dataset", m),
                );
            }
            if self.method.pretrain_rehearsal_fraction > 0.0
                && !matches!(m, Method::Er | Method::Derpp | Method::DerppEwc)
            {
                push(
                    "method.pretrain_rehearsal_fraction",
                    "pretraining rehearsal requires er, derpp or derpp_ewc".into(),
                );
            }
        }
        out
    }

    /// Effective data root (environment override first).
    pub fn data_root(&self) -> PathBuf {
        std::env::var(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from(&self.benchmark.data_root))
    }

    pub fn benchmark_options(&self) -> BenchmarkOptions {
        BenchmarkOptions {
            data_root: self.data_root(),
            shuffle_classes: self.benchmark.shuffle_classes,
            glyph_counts: (
                self.benchmark.glyph_train_per_class,
                self.benchmark.glyph_test_per_class,
            ),
            resolution: self.benchmark.resolution,
        }
    }

    pub fn dataset_id(&self) -> Result<DatasetId> {
        DatasetId::from_str(&self.benchmark.dataset)
    }

    pub fn pretrain_dataset_id(&self) -> Result<Option<DatasetId>> {
        self.benchmark
            .pretrain_dataset
            .as_deref()
            .map(DatasetId::from_str)
            .transpose()
    }

    pub fn arch(&self) -> Result<ArchId> {
        ArchId::from_str(&self.model.arch)
    }

    pub fn method(&self) -> Result<Method> {
        Method::from_str(&self.method.name)
    }

    pub fn augment(&self) -> Augment {
        Augment {
            pad_crop: self.benchmark.pad_crop,
            hflip: self.benchmark.hflip,
        }
    }

    pub fn trainer_config(&self, seed: u64) -> Result<TrainerConfig> {
        let method = self.method()?;
        let margin_mode = match self.method.margin_mode.as_str() {
            "zero" => MarginMode::Zero,
            _ => MarginMode::Estimated,
        };
        let cfg = TrainerConfig {
            method,
            epochs_per_task: self.method.eps,
            batch_size: self.method.bs,
            replay_batch_size: self.method.replay_bs,
            lr: self.method.lr,
            lr_decay: self.method.lr_decay,
            lr_decay_steps: self.method.lr_decay_steps.clone(),
            momentum: self.method.momentum,
            weight_decay: self.method.weight_decay,
            weights: WeightConfig {
                alpha: self.method.alpha,
                beta: self.method.beta,
                lambda: self.method.lambda,
                lambda_fp: self.method.lambda_fp,
                lambda_fp_repl: self.method.lambda_fp_repl,
                temperature_aux: self.method.temperature_aux,
                ewc_lambda: self.method.ewc_lambda,
            },
            buffer_capacity: self.method.buffer,
            gumbel_temperature: self.method.gumbel_temperature,
            margin_mode,
            margin_refresh: self.method.margin_refresh,
            pretrain_rehearsal_fraction: self.method.pretrain_rehearsal_fraction,
            lwf_alpha: self.method.lwf_alpha,
            lwf_tau: self.method.lwf_tau,
            oewc_gamma: self.method.oewc_gamma,
            fisher_samples: self.method.fisher_samples,
            augment: self.augment(),
            eval_batch_size: self.method.eval_bs,
            collect_snapshots: self.analysis.enabled,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> crate::backbone::PretrainConfig {
        crate::backbone::PretrainConfig {
            epochs: self.pretrain.eps_pretr,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.bs,
            momentum: self.pretrain.momentum,
            weight_decay: self.pretrain.weight_decay,
            decay: self.pretrain.lr_decay,
            decay_steps: self.pretrain.lr_decay_steps.clone(),
            augment: self.augment(),
            probe_size: self.pretrain.probe_size,
        }
    }

    /// Stable cache key for the pretraining checkpoint: models trained with
    /// identical (dataset, architecture, epochs, seed) and optimizer settings
    /// are shared across methods.
    pub fn pretrain_cache_key(&self, seed: u64) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |s: &str| {
            for b in s.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.benchmark.pretrain_dataset.as_deref().unwrap_or("none"));
        eat(&self.model.arch);
        eat(&format!(
            "{}-{}-{}-{}-{}-{:?}-{}",
            self.pretrain.eps_pretr,
            self.pretrain.lr,
            self.pretrain.bs,
            self.pretrain.momentum,
            self.pretrain.lr_decay,
            self.pretrain.lr_decay_steps,
            seed
        ));
        eat(&format!(
            "{}-{:?}-{}-{}",
            self.benchmark.dataset,
            self.benchmark.resolution,
            self.benchmark.pad_crop,
            self.benchmark.hflip
        ));
        format!("{:016x}", h)
    }
}

/// Parse and validate; unreadable files yield a single fatal diagnostic.
pub fn validate_config(path: &Path) -> Vec<Diagnostic> {
    match ExperimentConfig::from_path(path) {
        Ok(cfg) => cfg.diagnostics(),
        Err(e) => vec![Diagnostic {
            path: "<file>".to_string(),
            message: e.to_string(),
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
[experiment]
name = "demo"
seeds = [0]

[benchmark]
dataset = "glyphs_cl"
num_tasks = 5
pretrain_dataset = "glyphs_src"

[model]
arch = "desk_cnn"

[method]
name = "twf"
eps = 2
lr = 0.03
buffer = 50
alpha = 0.3
beta = 0.9
lambda = 0.1
lambda_fp = 0.005
lambda_fp_repl = 0.1
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg: ExperimentConfig = toml::from_str(&minimal_toml()).unwrap();
        assert!(cfg.diagnostics().is_empty(), "{:?}", cfg.diagnostics());
        let tc = cfg.trainer_config(0).unwrap();
        assert_eq!(tc.method, Method::Twf);
        assert_eq!(tc.epochs_per_task, 2);
    }

    #[test]
    fn out_of_range_fraction_is_diagnosed() {
        let toml_text = minimal_toml().replace(
            "name = \"twf\"",
            "name = \"derpp\"\npretrain_rehearsal_fraction = 1.5",
        );
        let cfg: ExperimentConfig = toml::from_str(&toml_text).unwrap();
        let diags = cfg.diagnostics();
        assert!(diags
            .iter()
            .any(|d| d.path == "method.pretrain_rehearsal_fraction"
                && d.message.contains("out of range [0,1]")));
    }

    #[test]
    fn unknown_method_lists_valid_names() {
        let toml_text = minimal_toml().replace("name = \"twf\"", "name = \"santa\"");
        let cfg: ExperimentConfig = toml::from_str(&toml_text).unwrap();
        let diags = cfg.diagnostics();
        let d = diags.iter().find(|d| d.path == "method.name").unwrap();
        assert!(d.message.contains("twf") && d.message.contains("derpp_ewc"));
    }

    #[test]
    fn unreadable_file_is_single_fatal_diagnostic() {
        let diags = validate_config(Path::new("/nonexistent/config.toml"));
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "<file>");
    }

    #[test]
    fn cache_key_depends_on_pretrain_inputs() {
        let a: ExperimentConfig = toml::from_str(&minimal_toml()).unwrap();
        let mut b = a.clone();
        b.pretrain.eps_pretr = 7;
        assert_ne!(a.pretrain_cache_key(0), b.pretrain_cache_key(0));
        assert_ne!(a.pretrain_cache_key(0), a.pretrain_cache_key(1));
        assert_eq!(a.pretrain_cache_key(3), a.pretrain_cache_key(3));
    }
}
