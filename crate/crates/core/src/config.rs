//! Strict run configuration: TOML with every hyperparameter as a named key,
//! unknown keys rejected, plus run manifests sufficient to reproduce a run
//! bit-exactly.

use crate::diffusion::{ScheduleConfig, UNetConfig};
use crate::error::{DecalError, Result};
use crate::mappers::ExtractorMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub resolution: usize,
    pub corpus_classes: usize,
    pub corpus_per_class: usize,
    pub blank_value: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { resolution: 64, corpus_classes: 6, corpus_per_class: 200, blank_value: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: Vec<usize>,
    pub attn_resolutions: Vec<usize>,
    pub heads: usize,
    pub norm_groups: usize,
    pub d_text: usize,
    pub seq_len: usize,
    pub time_dim: usize,
    pub mapper_hidden: usize,
    pub extractor: ExtractorMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: vec![32, 64, 64],
            attn_resolutions: vec![32, 16],
            heads: 2,
            norm_groups: 8,
            d_text: 48,
            seq_len: 16,
            time_dim: 64,
            mapper_hidden: 256,
            extractor: ExtractorMode::Handcrafted,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub weight_decay: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { steps: 20000, batch_size: 4, lr: 2e-4, cond_dropout: 0.1, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CustomizeSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub gamma: f64,
    pub lambda_pr: f64,
    pub lambda_ca: f64,
    pub reg_set_size: usize,
    pub reg_steps: usize,
    pub mappers_on: bool,
    pub ca_loss_on: bool,
    pub masked_diffusion_on: bool,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub optimizer: String,
    /// "class-word" or "random": initialization of the subject embedding
    pub subject_init: String,
    /// "auto" (pose for living subjects, view otherwise), "pose", or "view"
    pub attribute_word: String,
}

impl Default for CustomizeSection {
    fn default() -> Self {
        CustomizeSection {
            lr: 1e-5,
            batch_size: 4,
            steps: 600,
            gamma: 0.5,
            lambda_pr: 1.0,
            lambda_ca: 0.01,
            reg_set_size: 32,
            reg_steps: 50,
            mappers_on: true,
            ca_loss_on: true,
            masked_diffusion_on: false,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            optimizer: "adamw".into(),
            subject_init: "class-word".into(),
            attribute_word: "auto".into(),
        }
    }
}

impl CustomizeSection {
    /// The joint training strategy is on exactly when gamma > 0.
    pub fn joint_training_on(&self) -> bool {
        self.gamma > 0.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    pub guidance: f64,
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { steps: 50, guidance: 6.0, n: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub pool_size: usize,
    pub permutations: usize,
    pub attn_threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_samples: 8, pool_size: 64, permutations: 200, attn_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainSection,
    pub customize: CustomizeSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.customize.gamma) {
            return Err(DecalError::Config(format!(
                "customize.gamma must be in [0,1], got {}",
                self.customize.gamma
            )));
        }
        if self.customize.steps == 0 {
            return Err(DecalError::Config("customize.steps must be >= 1".into()));
        }
        if self.customize.lambda_pr < 0.0 || self.customize.lambda_ca < 0.0 {
            return Err(DecalError::Config("loss weights must be non-negative".into()));
        }
        if self.customize.optimizer != "adamw" {
            return Err(DecalError::Config(format!(
                "unsupported optimizer: {}",
                self.customize.optimizer
            )));
        }
        if !["class-word", "random"].contains(&self.customize.subject_init.as_str()) {
            return Err(DecalError::Config(format!(
                "customize.subject_init must be class-word or random, got {}",
                self.customize.subject_init
            )));
        }
        if !["auto", "pose", "view"].contains(&self.customize.attribute_word.as_str()) {
            return Err(DecalError::Config(format!(
                "customize.attribute_word must be auto, pose or view, got {}",
                self.customize.attribute_word
            )));
        }
        if !(0.0..=1.0).contains(&self.pretrain.cond_dropout) {
            return Err(DecalError::Config("pretrain.cond_dropout must be in [0,1]".into()));
        }
        self.unet_config().validate()?;
        Ok(())
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            resolution: self.data.resolution,
            channels: self.model.channels.clone(),
            attn_resolutions: self.model.attn_resolutions.clone(),
            heads: self.model.heads,
            norm_groups: self.model.norm_groups,
            d_cond: self.model.d_text,
            time_dim: self.model.time_dim,
        }
    }

    /// Hash of the fully-resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse one `--set section.key=value` override into a TOML table.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| DecalError::Config(format!("override must be key=value: {spec}")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(DecalError::Config(format!("bad override key: {path}")));
    }
    // parse the value as TOML (fall back to string)
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| DecalError::Config(format!("override path {path} crosses a non-table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Load a config file (optional) and apply overrides; unknown keys are
/// rejected with the offending key named.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                DecalError::MissingArtifact(format!("config {}: {e}", p.display()))
            })?;
            text.parse()
                .map_err(|e| DecalError::Config(format!("config parse error: {e}")))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e| DecalError::Config(format!("{e}")))?;
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// run manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config: Config,
    pub config_hash: String,
    pub seed: u64,
    pub args: BTreeMap<String, String>,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    pub fn start(command: &str, config: &Config, args: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: command.to_string(),
            status: "running".into(),
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.run.seed,
            args,
            input_hashes: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix: unix_now(),
            finished_unix: None,
        }
    }

    pub fn finish(&mut self) {
        self.status = "complete".into();
        self.finished_unix = Some(unix_now());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DecalError::MissingArtifact(format!("manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| DecalError::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
