//! One configuration tree for the whole pipeline.
//!
//! A run is described by a single JSON document with four sections
//! (paths, generator, training, evaluation). Loading layers three
//! sources, strongest last: built-in defaults, then the optional config
//! file, then `key.path=value` overrides from the command line. Every
//! leaf is addressable by its dotted path, unknown keys are rejected at
//! every layer, and validation reports all violations in one message.

use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::data::synth::SynthConfig;
use crate::eval::EvalSettings;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Environment variable that overrides the output root.
pub const OUT_ROOT_ENV: &str = "DEPTH_ADAPT_OUT_ROOT";

/// Top-level configuration for every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset root holding `source/`, `target/`, and split files.
    pub data_root: PathBuf,
    /// Root for run outputs (checkpoints, logs, reports).
    pub out_root: PathBuf,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            out_root: PathBuf::from("runs"),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    /// Every rule violation across all sections; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (section, r) in [
            ("synth", self.synth.validate()),
            ("eval", self.eval.validate()),
        ] {
            if let Err(e) = r {
                let m = match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                };
                v.push(format!("{section}: {m}"));
            }
        }
        v.extend(self.train.violations().into_iter().map(|m| format!("train: {m}")));
        if self.synth.img_h % 16 != 0 || self.synth.img_w % 16 != 0 || self.synth.img_h < 16 {
            v.push(format!(
                "synth: image dimensions must be multiples of 16 to feed the networks, got {}x{}",
                self.synth.img_h, self.synth.img_w
            ));
        }
        if self.data_root.as_os_str().is_empty() {
            v.push("data_root must not be empty".into());
        }
        if self.out_root.as_os_str().is_empty() {
            v.push("out_root must not be empty".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Output root after the environment override; pass the variable's
    /// value (or `None`) so lookup stays at the call site.
    pub fn out_root_with(&self, env_override: Option<OsString>) -> PathBuf {
        match env_override {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_root.clone(),
        }
    }
}

/// Builds the effective config: defaults, then `file` when given, then
/// dotted-path `overrides` in order. Validates before returning.
pub fn load_run_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => RunConfig::default(),
    };
    let cfg = apply_overrides(cfg, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `key.path=value` pairs to a config.
///
/// The path must name an existing leaf; the value is parsed as JSON when
/// it is valid JSON (numbers, booleans, `null`, quoted strings) and as a
/// bare string otherwise, so `train.phase=adapt` and `train.lr=2e-4`
/// both read naturally.
pub fn apply_overrides(cfg: RunConfig, overrides: &[String]) -> Result<RunConfig> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg).expect("config serializes");
    for entry in overrides {
        let (path, raw) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {entry:?} must look like key.path=value"))
        })?;
        let value = serde_json::from_str::<serde_json::Value>(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_leaf(&mut tree, path, value)?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
    Ok(cfg)
}

fn set_leaf(tree: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut node = tree;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("malformed config path {path:?}")));
    }
    for (i, seg) in segments.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "config path {path:?} descends into {:?}, which is not a section",
                segments[..i].join(".")
            ))
        })?;
        node = obj.get_mut(*seg).ok_or_else(|| {
            Error::Config(format!(
                "unknown config key {:?} in path {path:?}",
                segments[..=i].join(".")
            ))
        })?;
    }
    if node.is_object() {
        return Err(Error::Config(format!(
            "config path {path:?} names a section, not a value"
        )));
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Phase;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_overrides_defaults_and_rejects_unknown_keys() {
        let dir = std::env::temp_dir().join(format!("cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        std::fs::write(&path, r#"{"train": {"lr": 0.0002, "seed": 9}}"#).unwrap();
        let cfg = load_run_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.lr, 2e-4);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.synth.img_w, 192, "untouched sections keep defaults");

        std::fs::write(&path, r#"{"trian": {}}"#).unwrap();
        let err = load_run_config(Some(&path), &[]).err().unwrap().to_string();
        assert!(err.contains("trian"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dotted_overrides_reach_every_kind_of_leaf() {
        let sets: Vec<String> = [
            "train.lr=0.001",
            "train.phase=adapt",
            "train.weights.lambda_target=1",
            "train.ablation.consistency=false",
            "train.iterations=500",
            "eval.cap=band1_to50",
            "data_root=elsewhere",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let cfg = load_run_config(None, &sets).unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.phase, Phase::Adapt);
        assert_eq!(cfg.train.weights.lambda_target, 1.0);
        assert!(!cfg.train.ablation.consistency);
        assert_eq!(cfg.train.iterations, Some(500));
        assert_eq!(cfg.eval.cap, crate::eval::DepthCap::Band1To50);
        assert_eq!(cfg.data_root, PathBuf::from("elsewhere"));

        let back_to_none =
            apply_overrides(cfg, &["train.iterations=null".to_string()]).unwrap();
        assert_eq!(back_to_none.train.iterations, None);
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = std::env::temp_dir().join(format!("cfg-prec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        std::fs::write(&path, r#"{"train": {"seed": 9}}"#).unwrap();
        let cfg = load_run_config(Some(&path), &["train.seed=42".to_string()]).unwrap();
        assert_eq!(cfg.train.seed, 42);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_paths_and_values_are_rejected() {
        for bad in [
            "train.does_not_exist=1",
            "nope.lr=1",
            "train=1",
            "train.lr",
            "train..lr=1",
            "train.lr.deeper=1",
        ] {
            assert!(
                apply_overrides(RunConfig::default(), &[bad.to_string()]).is_err(),
                "{bad} should be rejected"
            );
        }
        // Type mismatch surfaces at deserialization.
        let err = apply_overrides(RunConfig::default(), &["train.lr=true".to_string()])
            .err()
            .unwrap()
            .to_string();
        assert!(err.contains("invalid config"), "{err}");
    }

    #[test]
    fn validation_reports_every_violation_at_once() {
        let cfg = load_run_config(
            None,
            &["train.lr=-1".to_string(), "train.batch_size=3".to_string()],
        );
        let err = cfg.err().unwrap().to_string();
        assert!(err.contains("lr"), "{err}");
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn out_root_env_override_wins_only_when_set() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.out_root_with(None), PathBuf::from("runs"));
        assert_eq!(
            cfg.out_root_with(Some(OsString::from("/tmp/elsewhere"))),
            PathBuf::from("/tmp/elsewhere")
        );
        assert_eq!(cfg.out_root_with(Some(OsString::new())), PathBuf::from("runs"));
    }

    #[test]
    fn example_config_in_repo_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../..")
            .join("config.example.json");
        let text = std::fs::read_to_string(&path).expect("config.example.json at repo root");
        let parsed: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(
            parsed,
            RunConfig::default(),
            "config.example.json must stay in sync with built-in defaults"
        );
    }
}
