//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HadError, Result};
use crate::finetune_eval::FinetuneConfig;
use crate::genome_io::{read_fasta, split_dataset, window_sequence, Window};
use crate::model::StudentConfig;
use crate::pretrain::{AblationConfig, MaskConfig, PretrainConfig, TrainConfig};
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub fasta: Vec<PathBuf>,
    /// Window length in bases.
    pub window: usize,
    /// Step between window starts; 0 means `window` (no overlap).
    pub stride: usize,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            fasta: Vec::new(),
            window: 1026,
            stride: 0,
            val_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub checkpoint: PathBuf,
    /// Per-step metrics; validation goes to `<stem>.val.jsonl` next to it.
    pub log: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            checkpoint: "had.hadw".into(),
            log: "metrics.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: StudentConfig,
    pub mask: MaskConfig,
    pub teacher: TeacherConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub finetune: FinetuneConfig,
    pub io: IoConfig,
}

fn config_err(e: impl std::fmt::Display) -> HadError {
    HadError::Config(e.to_string())
}

/// Sets the dotted `path` in `doc` to `raw`, read as JSON when it parses
/// and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not of the form key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("bad override path {path:?}")));
    }
    let mut node = doc;
    for k in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(config_err(format!("override {path:?} descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(config_err(format!("override {path:?} descends into a non-object"))),
    }
}

impl RunConfig {
    /// Parses `text`, applies `overrides` in order, and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(config_err)?;
        if !doc.is_object() {
            return Err(config_err("configuration must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file at `path`; relative paths inside it stay relative to
    /// the working directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HadError::BadFile {
            what: "config",
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The student configuration with ablation flags applied.
    pub fn student(&self) -> StudentConfig {
        StudentConfig {
            use_attention: self.ablation.use_attention,
            ..self.model.clone()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            train: self.train.clone(),
            mask: self.mask.clone(),
            ablation: self.ablation.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher.validate()?;
        self.pretrain().validate()?;
        self.finetune.validate()?;
        let d = &self.data;
        if d.window == 0 || d.window % self.model.k != 0 {
            return Err(config_err(format!(
                "data.window ({}) must be a positive multiple of model.k ({})",
                d.window, self.model.k
            )));
        }
        if d.window > self.model.max_len {
            return Err(config_err(format!(
                "data.window ({}) exceeds model.max_len ({})",
                d.window, self.model.max_len
            )));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(config_err("data.val_fraction must lie in [0, 1)"));
        }
        if self.teacher.d_t != self.model.d_t {
            return Err(config_err(format!(
                "teacher.d_t ({}) must equal model.d_t ({})",
                self.teacher.d_t, self.model.d_t
            )));
        }
        Ok(())
    }

    /// Every window of every FASTA file, forward strand, in file order.
    pub fn windows(&self) -> Result<Vec<Window>> {
        let stride = if self.data.stride == 0 { self.data.window } else { self.data.stride };
        let mut out = Vec::new();
        for path in &self.data.fasta {
            let records = read_fasta(path).map_err(|e| match e {
                // the message already names the path
                HadError::Io(io) => HadError::BadFile {
                    what: "fasta",
                    reason: io.to_string(),
                },
                other => other,
            })?;
            for r in &records {
                out.extend(window_sequence(r, self.data.window, stride));
            }
        }
        Ok(out)
    }

    /// Training and validation windows, split with the training seed.
    pub fn corpus(&self) -> Result<(Vec<Window>, Vec<Window>)> {
        let w = self.windows()?;
        if w.is_empty() {
            return Err(config_err(format!(
                "no window of length {} fits in the configured FASTA files",
                self.data.window
            )));
        }
        Ok(split_dataset(w, self.data.val_fraction, self.train.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::DistillMode;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}", &[]).unwrap(), c);
    }

    #[test]
    fn overrides_take_precedence() {
        let text = r#"{"train": {"steps": 500}, "ablation": {"distill_mode": "visible"}}"#;
        let c = RunConfig::from_json(
            text,
            &[
                "train.steps=10".into(),
                "ablation.distill_mode=off".into(),
                "io.log=run/log.jsonl".into(),
                "ablation.use_attention=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.ablation.distill_mode, DistillMode::Off);
        assert_eq!(c.io.log, PathBuf::from("run/log.jsonl"));
        assert!(!c.student().use_attention);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in [
            r#"{"train": {"stepz": 1}}"#,
            r#"{"nonsense": 1}"#,
            r#"{"model": {"d_model": 100, "n_heads": 3}}"#,
            r#"{"data": {"window": 1000}}"#,
            r#"{"teacher": {"d_t": 64}}"#,
            r#"[1, 2]"#,
            r#"{"mask": {"ratio": 1.0}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad, &[]), Err(HadError::Config(_))), "{bad}");
        }
        assert!(RunConfig::from_json("{}", &["train.steps".into()]).is_err());
        assert!(RunConfig::from_json("{}", &["train.steps.x=1".into()]).is_err());
    }

    #[test]
    fn missing_fasta_names_the_path() {
        let c = RunConfig::from_json(r#"{"data": {"fasta": ["/nonexistent/genome.fa"]}}"#, &[]).unwrap();
        let e = c.corpus().unwrap_err().to_string();
        assert!(e.contains("/nonexistent/genome.fa"), "{e}");
    }
}
