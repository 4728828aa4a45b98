//! TOML run configuration. Unknown keys are rejected and every field is
//! validated before any compute starts.
//!
//! ```toml
//! strategy = "FEDKDX"
//! seed = 7
//! rounds = 20
//! join_ratio = 0.5
//!
//! [dataset]
//! kind = "synthetic"
//! num_classes = 3
//! dims = 8
//!
//! [partition]
//! mode = "dirichlet"
//! alpha = 0.1
//! num_clients = 8
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compression::{CompressionPolicy, WirePrecision};
use crate::data::{PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Strategy};
use crate::losses::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs, one `1 × dims` window per sample.
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_dims")]
        dims: usize,
        #[serde(default = "default_samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        /// Data seed; derived from the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default = "default_mlp")]
        model: ModelKind,
    },
    /// The raw inertial-signal archive.
    Ucihar {
        path: PathBuf,
        #[serde(default = "default_cnn")]
        model: ModelKind,
    },
}

fn default_classes() -> usize {
    3
}
fn default_dims() -> usize {
    8
}
fn default_samples_per_class() -> usize {
    400
}
fn default_separation() -> f64 {
    4.0
}
fn default_mlp() -> ModelKind {
    ModelKind::Mlp
}
fn default_cnn() -> ModelKind {
    ModelKind::Cnn
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: default_classes(),
            dims: default_dims(),
            samples_per_class: default_samples_per_class(),
            separation: default_separation(),
            seed: None,
            model: ModelKind::Mlp,
        }
    }
}

impl DatasetSpec {
    pub fn model(&self) -> ModelKind {
        match self {
            DatasetSpec::Synthetic { model, .. } | DatasetSpec::Ucihar { model, .. } => *model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    JoinRatio,
    Components,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "join_ratio" => Ok(SweepAxis::JoinRatio),
            "components" => Ok(SweepAxis::Components),
            other => Err(format!(
                "unknown sweep axis `{other}` (expected join_ratio or components)"
            )),
        }
    }
}

/// The loss-component ablation points, in table order.
pub const COMPONENT_POINTS: [(&str, bool, bool); 3] = [
    ("Base", false, false),
    ("Base+NKD", true, false),
    ("Base+CT+NKD", true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_axis")]
    pub axis: SweepAxis,
    #[serde(default = "default_join_ratios")]
    pub join_ratios: Vec<f64>,
    #[serde(default = "default_components")]
    pub components: Vec<String>,
}

fn default_axis() -> SweepAxis {
    SweepAxis::JoinRatio
}

fn default_join_ratios() -> Vec<f64> {
    vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
}

fn default_components() -> Vec<String> {
    COMPONENT_POINTS.iter().map(|p| p.0.to_string()).collect()
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            axis: default_axis(),
            join_ratios: default_join_ratios(),
            components: default_components(),
        }
    }
}

fn default_partition() -> PartitionSpec {
    PartitionSpec {
        mode: PartitionMode::Dirichlet,
        alpha: 0.1,
        num_clients: 8,
        train_fraction: 0.8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: usize,
    pub join_ratio: f64,
    pub lr_teacher: f64,
    pub lr_student: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub fedprox_mu: f64,
    pub tau: f64,
    pub gamma: f64,
    pub kd_weight: f64,
    pub nkd_weight: f64,
    pub ctl_weight: f64,
    pub enable_nkd: bool,
    pub enable_ctl: bool,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Off sends every gradient raw.
    pub compression: bool,
    pub wire_precision: WirePrecision,
    /// Output directory; the command line may override it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fed = FederationConfig::default();
        let loss = LossConfig::default();
        let policy = CompressionPolicy::default();
        Self {
            strategy: fed.strategy,
            seed: fed.seed,
            rounds: fed.rounds,
            join_ratio: fed.join_ratio,
            lr_teacher: fed.lr_teacher,
            lr_student: fed.lr_student,
            batch_size: fed.batch_size,
            local_epochs: fed.local_epochs,
            fedprox_mu: fed.fedprox_mu,
            tau: loss.tau,
            gamma: loss.gamma,
            kd_weight: loss.kd_weight,
            nkd_weight: loss.nkd_weight,
            ctl_weight: loss.ctl_weight,
            enable_nkd: loss.enable_nkd,
            enable_ctl: loss.enable_ctl,
            eps_start: policy.eps_start,
            eps_end: policy.eps_end,
            compression: policy.enabled,
            wire_precision: policy.wire_precision,
            out: None,
            dataset: DatasetSpec::default(),
            partition: default_partition(),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(vec![e.message().to_string() + &span_hint(text, e.span())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            gamma: self.gamma,
            enable_nkd: self.enable_nkd,
            enable_ctl: self.enable_ctl,
            kd_weight: self.kd_weight,
            nkd_weight: self.nkd_weight,
            ctl_weight: self.ctl_weight,
        }
    }

    pub fn policy(&self) -> CompressionPolicy {
        CompressionPolicy {
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            wire_precision: self.wire_precision,
            enabled: self.compression,
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            strategy: self.strategy,
            seed: self.seed,
            rounds: self.rounds,
            join_ratio: self.join_ratio,
            lr_teacher: self.lr_teacher,
            lr_student: self.lr_student,
            batch_size: self.batch_size,
            local_epochs: self.local_epochs,
            fedprox_mu: self.fedprox_mu,
            loss: self.loss_config(),
            policy: self.policy(),
        }
    }

    /// Collects every field-level problem.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(Error::Config(e)) = self.federation_config().validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.partition.validate() {
            errs.extend(e);
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                dims,
                samples_per_class,
                separation,
                ..
            } => {
                if *num_classes < 2 {
                    errs.push(format!("dataset.num_classes must be at least 2, got {num_classes}"));
                }
                if *dims == 0 {
                    errs.push("dataset.dims must be at least 1".into());
                }
                if *samples_per_class == 0 {
                    errs.push("dataset.samples_per_class must be at least 1".into());
                }
                if !(*separation >= 0.0 && separation.is_finite()) {
                    errs.push(format!(
                        "dataset.separation must be finite and non-negative, got {separation}"
                    ));
                }
                if self.dataset.model() == ModelKind::Cnn {
                    errs.push(
                        "dataset.model = \"cnn\" needs multi-channel windows; use \"mlp\" for synthetic data".into(),
                    );
                }
            }
            DatasetSpec::Ucihar { path, .. } => {
                if path.as_os_str().is_empty() {
                    errs.push("dataset.path must not be empty".into());
                }
            }
        }
        if self.sweep.join_ratios.is_empty() {
            errs.push("sweep.join_ratios must not be empty".into());
        }
        for r in &self.sweep.join_ratios {
            if !(*r > 0.0 && *r <= 1.0) {
                errs.push(format!("sweep.join_ratios entries must lie in (0, 1], got {r}"));
            }
        }
        if self.sweep.components.is_empty() {
            errs.push("sweep.components must not be empty".into());
        }
        for c in &self.sweep.components {
            if !COMPONENT_POINTS.iter().any(|p| p.0 == c) {
                errs.push(format!("sweep.components: unknown configuration `{c}`"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
