//! Experiment configuration: one TOML file with a section per subsystem.
//! Dotted `key.path=value` overrides are applied before validation.

use std::path::Path;

use aqua_core::evalkit::ApMetric;
use aqua_core::watermodel::CorruptionKind;
use aqua_data::dataset::DatasetConfig;
use aqua_detector::{DetectorConfig, DgConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the second image of a training pair comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// The same scene rendered under a different, randomly chosen source domain.
    #[default]
    OtherSource,
    /// The main image itself.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU thresholds for the extra per-threshold mAP columns.
    pub iou_thresholds: Vec<f64>,
    /// Metric of the robustness table.
    pub robustness_metric: ApMetric,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5, 0.75],
            robustness_metric: ApMetric::CocoAp,
            corruptions: CorruptionKind::ALL.to_vec(),
            severities: vec![0, 3],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(CliError::Config(format!("eval.iou_thresholds: {t} is outside (0, 1)")));
        }
        if let Some(s) = self.severities.iter().find(|&&s| s > 5) {
            return Err(CliError::Config(format!("eval.severities: {s} is outside 0..=5")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub pairing: Pairing,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub dg: DgConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            pairing: Pairing::default(),
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            training: TrainConfig::default(),
            dg: DgConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        fn tag(section: &str, e: impl std::fmt::Display) -> CliError {
            CliError::Config(format!("{section}: {e}"))
        }
        self.dataset.validate().map_err(|e| tag("dataset", e))?;
        self.detector.validate().map_err(|e| tag("detector", e))?;
        self.training.validate().map_err(|e| tag("training", e))?;
        self.dg.validate().map_err(|e| tag("dg", e))?;
        self.eval.validate()?;
        let sources = self.dataset.source_domains().len();
        if self.detector.num_domains != sources {
            return Err(CliError::Config(format!(
                "detector.num_domains: {} but the dataset has {sources} source domains",
                self.detector.num_domains
            )));
        }
        if self.detector.num_classes != aqua_data::scene::CLASS_NAMES.len() {
            return Err(CliError::Config(format!(
                "detector.num_classes: {} but scenes have {} classes",
                self.detector.num_classes,
                aqua_data::scene::CLASS_NAMES.len()
            )));
        }
        let (w, h) = (self.dataset.scene.width, self.dataset.scene.height);
        let m = self.detector.input_multiple();
        if w % m != 0 || h % m != 0 {
            return Err(CliError::Config(format!("dataset.scene: {w}x{h} canvas must be a multiple of {m}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Parse, apply overrides, deserialise and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(format!("syntax: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            let inner = inner.lines().next().unwrap_or_default().to_string();
            CliError::Config(describe(&path, &inner))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }
}

/// `path: message`, folding a missing field name into the path.
fn describe(path: &str, message: &str) -> String {
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|r| r.split('`').next())
        .map(|field| if path == "." || path.is_empty() { field.to_string() } else { format!("{path}.{field}") });
    match missing {
        Some(full) => format!("{full}: missing"),
        None if path == "." || path.is_empty() => message.to_string(),
        None => format!("{path}: {message}"),
    }
}

/// Set `a.b.c=value`. The value is read as TOML when it parses and as a
/// bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut node = table;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            node.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = node.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override `{key}`: `{part}` is not a section"))),
        };
    }
    unreachable!("keys have at least one part")
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
