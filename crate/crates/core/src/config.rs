//! Run configuration: a TOML file with `model`, `train`, `data` and
//! `output` sections, layered over the desk-scale defaults and then over
//! `dotted.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{config_err, Error, Result};
use crate::network::ModelConfig;
use crate::training::data::{load_dir, split, synth_dataset};
use crate::training::{SegSample, SynthConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `images/` and `masks/`; synthetic data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub val_fraction: f64,
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            val_fraction: 0.2,
            synthetic: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    /// Loads or generates the samples and splits off the validation tail.
    pub fn load(&self) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
        let samples = match &self.dir {
            Some(dir) => load_dir(dir)?,
            None => synth_dataset(&self.synthetic)?,
        };
        Ok(split(samples, self.val_fraction))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset("tiny").expect("built-in preset")
    }
}

fn to_table<S: Serialize>(v: &S) -> Table {
    Table::try_from(v).expect("config types serialize to a TOML table")
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string (`data.dir=/tmp/x`).
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err!("override `{spec}` is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err!("override `{spec}` has an empty key segment"));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = root;
    for (i, seg) in parents.iter().enumerate() {
        let entry = table
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err!("`{}` is not a section", path[..=i].join(".")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// `tiny` (desk-scale synthetic run) or `full` (224x224, C=96, nine classes).
    pub fn preset(name: &str) -> Result<RunConfig> {
        let model = match name {
            "tiny" => ModelConfig::tiny(),
            "full" => ModelConfig::default(),
            other => return Err(config_err!("unknown preset `{other}` (expected tiny or full)")),
        };
        let synthetic = SynthConfig {
            size: model.input_size[0],
            channels: model.in_channels,
            num_classes: model.num_classes,
            ..SynthConfig::default()
        };
        Ok(RunConfig {
            output: PathBuf::from("runs/default"),
            model,
            train: TrainConfig::default(),
            data: DataConfig { synthetic, ..DataConfig::default() },
        })
    }

    /// Layers `text` and then `overrides` over the tiny preset.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        Self::layered(&RunConfig::default(), Some(text), overrides)
    }

    /// Reads `path` and layers it over the tiny preset.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        Self::load_over(&RunConfig::default(), path, overrides)
    }

    pub fn load_over(base: &RunConfig, path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::layered(base, Some(&text), overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_overrides(overrides: &[String]) -> Result<RunConfig> {
        Self::layered(&RunConfig::default(), None, overrides)
    }

    /// `base`, then the TOML document `text`, then `overrides`.
    pub fn layered(base: &RunConfig, text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut root = to_table(base);
        if let Some(text) = text {
            merge(&mut root, text.parse().map_err(|e| config_err!("{e}"))?);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| config_err!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(config_err!("data.val_fraction must lie in [0, 1)"));
        }
        if self.data.dir.is_none() {
            let s = &self.data.synthetic;
            let m = &self.model;
            if [s.size, s.size] != m.input_size || s.channels != m.in_channels || s.num_classes != m.num_classes {
                return Err(config_err!(
                    "data.synthetic ({}x{}, {} channels, {} classes) does not match the model input ({:?}, {} channels, {} classes)",
                    s.size,
                    s.size,
                    s.channels,
                    s.num_classes,
                    m.input_size,
                    m.in_channels,
                    m.num_classes
                ));
            }
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
