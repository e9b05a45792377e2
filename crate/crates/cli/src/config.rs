//! TOML experiment configuration and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gta_core::models::REGISTERED_ARCHITECTURES;

fn d_epsilon() -> f64 {
    15.0
}
fn d_steps() -> usize {
    10
}
fn d_gamma() -> f64 {
    0.01
}
fn d_eps_c() -> f64 {
    3000.0
}
fn d_mu() -> f64 {
    1.0
}
fn d_ti_kernel() -> usize {
    5
}
fn d_ti_sigma() -> f64 {
    1.5
}
fn d_loss_mode() -> String {
    "entropy".into()
}
fn d_output_dim() -> usize {
    1000
}
fn d_widths() -> [usize; 4] {
    [32, 64, 128, 256]
}
fn d_ice_iters() -> usize {
    3000
}
fn d_sa_iters() -> usize {
    1500
}
fn d_uap_iters() -> usize {
    2000
}
fn d_attack_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.01
}
fn d_uap_lr() -> f64 {
    0.5
}
fn d_cls_iters() -> usize {
    400
}
fn d_cls_batch() -> usize {
    128
}
fn d_wd() -> f64 {
    1e-5
}
fn d_eval_images() -> usize {
    60
}
fn d_transfer_records() -> usize {
    20
}
fn d_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetCfg {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Architectures trained on this dataset.
    #[serde(default)]
    pub architectures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackCfg {
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_gamma")]
    pub gamma1: f64,
    #[serde(default = "d_gamma")]
    pub gamma2: f64,
    #[serde(default = "d_eps_c")]
    pub eps_c: f64,
    #[serde(default)]
    pub eps_c_period: Option<usize>,
    #[serde(default = "d_mu")]
    pub mu: f64,
    #[serde(default = "d_ti_kernel")]
    pub ti_kernel: usize,
    #[serde(default = "d_ti_sigma")]
    pub ti_sigma: f64,
    #[serde(default = "d_loss_mode")]
    pub loss_mode: String,
    #[serde(default = "d_output_dim")]
    pub output_dim: usize,
    #[serde(default = "d_widths")]
    pub surrogate_widths: [usize; 4],
    #[serde(default = "d_one")]
    pub inner_steps: usize,
}

impl Default for AttackCfg {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCfg {
    #[serde(default = "d_ice_iters")]
    pub ice_iterations: usize,
    #[serde(default = "d_sa_iters")]
    pub sa_iterations: usize,
    #[serde(default = "d_uap_iters")]
    pub uap_iterations: usize,
    #[serde(default = "d_attack_batch")]
    pub attack_batch_size: usize,
    #[serde(default = "d_lr")]
    pub attack_learning_rate: f64,
    #[serde(default = "d_uap_lr")]
    pub uap_learning_rate: f64,
    #[serde(default)]
    pub sa_learning_rate: Option<f64>,
    #[serde(default = "d_cls_iters")]
    pub classifier_iterations: usize,
    #[serde(default = "d_cls_batch")]
    pub classifier_batch_size: usize,
    #[serde(default = "d_lr")]
    pub classifier_learning_rate: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub classifier_momentum: f64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCfg {
    #[serde(default = "d_eval_images")]
    pub eval_images: usize,
    #[serde(default = "d_transfer_records")]
    pub transfer_records: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetCfg {
    pub dataset: DatasetCfg,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub source_datasets: Vec<DatasetCfg>,
    pub target: TargetCfg,
    #[serde(default)]
    pub attack: AttackCfg,
    #[serde(default)]
    pub train: TrainCfg,
    #[serde(default)]
    pub evaluation: EvalCfg,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attack.epsilon <= 0.0 {
            bail!("attack.epsilon must be > 0");
        }
        if self.source_datasets.is_empty() {
            bail!("at least one source dataset is required");
        }
        for ds in self.source_datasets.iter().chain(std::iter::once(&self.target.dataset)) {
            for arch in &ds.architectures {
                if !REGISTERED_ARCHITECTURES.contains(&arch.as_str()) {
                    bail!(
                        "unknown architecture '{arch}' on dataset '{}' (registered: {})",
                        ds.name,
                        REGISTERED_ARCHITECTURES.join(", ")
                    );
                }
            }
        }
        for ds in &self.source_datasets {
            if ds.architectures.is_empty() {
                bail!("source dataset '{}' needs at least one architecture", ds.name);
            }
        }
        if self.target.dataset.architectures.is_empty() {
            bail!("target dataset needs at least one architecture");
        }
        Ok(())
    }

    /// Stable content hash over the canonical serialized form.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Directory layout of one experiment output tree.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn attackers_dir(&self) -> PathBuf {
        self.root.join("attackers")
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.toml")
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in [self.data_dir(), self.models_dir(), self.attackers_dir(), self.reports_dir()] {
            fs::create_dir_all(&d)?;
        }
        Ok(())
    }

    pub fn archive(&self, name: &str, split: &str) -> PathBuf {
        self.data_dir().join(format!("{name}_{split}.gtd"))
    }

    pub fn source_model(&self, dataset: &str, arch: &str) -> PathBuf {
        self.models_dir().join(format!("source_{dataset}_{arch}.ckpt"))
    }

    pub fn target_model(&self, arch: &str) -> PathBuf {
        self.models_dir().join(format!("target_{arch}.ckpt"))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Manifest {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }
}
