//! Run configuration: one JSON document with `model`, `trainer` and `data`
//! sections, plus `section.field=value` overrides, and the on-disk layout of
//! a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Byte-level text corpus. Relative paths resolve against the working
    /// directory.
    pub path: PathBuf,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("data/shakespeare.txt"),
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Parses a config document, applies overrides in order and validates.
    pub fn from_json_with_overrides(text: &[u8], overrides: &[String]) -> Result<Self> {
        let mut doc: Value = if text.iter().all(u8::is_ascii_whitespace) {
            Value::Object(Default::default())
        } else {
            serde_json::from_slice(text)
                .map_err(|e| Error::config("<document>", e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg = from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with_overrides(&text, overrides)
    }
}

/// Deserializes with the failing field's dotted path in the error.
fn from_value(doc: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise, so `trainer.mode=replay` and
/// `trainer.steps=100` both work. Missing intermediate objects are created.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(spec, "empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let mut segments = key.split('.').peekable();
    while let Some(seg) = segments.next() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("{seg:?} is inside a non-object value")))?;
        if segments.peek().is_none() {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!("split yields at least one segment")
}

/// File names inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The directory name, used as the prefix of report files.
    pub fn run_id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn trajectory(&self) -> PathBuf {
        self.root.join("trajectory.jsonl")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn qnet(&self) -> PathBuf {
        self.checkpoints().join("qnet.bin")
    }

    /// `<root>/<run-id>.<report>.<ext>`
    pub fn report(&self, report: &str, ext: &str) -> PathBuf {
        self.root.join(format!("{}.{report}.{ext}", self.run_id()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Mode;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json_with_overrides(b"", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.trainer.controller_period, 15);
        assert_eq!(cfg.trainer.batch_size, 16);
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = vec![
            "trainer.steps=40".to_string(),
            "trainer.mode=conventional".to_string(),
            "trainer.controller.gamma=0.5".to_string(),
            "trainer.steps=45".to_string(),
        ];
        let cfg = RunConfig::from_json_with_overrides(br#"{"model":{"n_layers":8}}"#, &o).unwrap();
        assert_eq!(cfg.trainer.steps, 45);
        assert_eq!(cfg.trainer.mode, Mode::Conventional);
        assert_eq!(cfg.trainer.controller.gamma, 0.5);
        assert_eq!(cfg.model.n_layers, 8);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_json_with_overrides(b"", &["trainer.stepz=3".into()]).unwrap_err();
        assert!(err.to_string().contains("trainer"), "{err}");
        let err =
            RunConfig::from_json_with_overrides(b"", &["model.d_model=\"wide\"".into()]).unwrap_err();
        assert!(err.to_string().contains("model.d_model"), "{err}");
        let err =
            RunConfig::from_json_with_overrides(b"", &["trainer.controller_period=0".into()]).unwrap_err();
        assert!(err.to_string().contains("trainer.controller_period"), "{err}");
        assert!(RunConfig::from_json_with_overrides(b"", &["nonsense".into()]).is_err());
        assert!(RunConfig::from_json_with_overrides(b"[1]", &[]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_vec_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_with_overrides(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn layout_names() {
        let l = RunLayout::new("/tmp/runs/alpha");
        assert_eq!(l.run_id(), "alpha");
        assert_eq!(l.report("events", "csv"), Path::new("/tmp/runs/alpha/alpha.events.csv"));
    }
}
