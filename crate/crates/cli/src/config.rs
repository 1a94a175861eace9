//! Flat `key = value` run configuration.

use std::path::Path;
use std::str::FromStr;

use mdunet::quant::QuantConfig;
use mdunet::train::TrainConfig;
use mdunet::{ArchConfig, CrossMode, DenseDegree, UpsampleMode};
use thiserror::Error;

use crate::synth::SynthSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {detail}")]
    Value { line: usize, key: String, detail: String },
    #[error("line {line}: `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {detail}")]
    Invariant { line: usize, detail: String },
    #[error("reading {path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub quant: QuantConfig,
    pub synth: SynthSpec,
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("{s}: {e}")))
        .collect()
}

fn one<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got `{v}`")),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    let mut last_arch_line = 0;
    let mut last_quant_line = 0;
    let mut last_train_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if seen.contains(&key) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.into(),
            });
        }
        let bad = |detail: String| ConfigError::Value {
            line,
            key: key.into(),
            detail,
        };
        let a = &mut cfg.arch;
        let t = &mut cfg.train;
        let q = &mut cfg.quant;
        let s = &mut cfg.synth;
        match key {
            "depth" => a.depth = one(value).map_err(bad)?,
            "base_channels" => a.base_channels = one(value).map_err(bad)?,
            "input_channels" => a.input_channels = one(value).map_err(bad)?,
            "num_classes" => a.num_classes = one(value).map_err(bad)?,
            "enc_dense" => a.enc_dense = one::<DenseDegree>(value).map_err(bad)?,
            "dec_dense" => a.dec_dense = one::<DenseDegree>(value).map_err(bad)?,
            "cross_mode" => a.cross_mode = one::<CrossMode>(value).map_err(bad)?,
            "upsample_mode" => a.upsample_mode = one::<UpsampleMode>(value).map_err(bad)?,
            "lr" | "base_lr" => t.base_lr = one(value).map_err(bad)?,
            "lr_milestones" => t.lr_milestones = list(value).map_err(bad)?,
            "batch_size" => t.batch_size = one(value).map_err(bad)?,
            "epochs" => t.epochs = one(value).map_err(bad)?,
            "iterations" => t.iterations = Some(one(value).map_err(bad)?),
            "seed" => t.seed = one(value).map_err(bad)?,
            "loss" if value == "cross_entropy" => {}
            "loss" => return Err(bad(format!("unsupported loss `{value}`"))),
            "quant_bits" => q.bits = one(value).map_err(bad)?,
            "quant_schedule" => q.schedule = list(value).map_err(bad)?,
            "quant_retrain_iterations" => q.retrain_iterations = one(value).map_err(bad)?,
            "quant_bn_affine" => q.quantize_bn_affine = boolean(value).map_err(bad)?,
            "quant_biases" => q.quantize_biases = boolean(value).map_err(bad)?,
            "synth_count" => s.count = one(value).map_err(bad)?,
            "synth_size" => s.size = one(value).map_err(bad)?,
            "synth_noise" => s.noise = one(value).map_err(bad)?,
            "synth_seed" => s.seed = one(value).map_err(bad)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                })
            }
        }
        if key.starts_with("quant_") {
            last_quant_line = line;
        } else if key.starts_with("synth_") {
        } else if matches!(
            key,
            "depth" | "base_channels" | "input_channels" | "num_classes" | "enc_dense" | "dec_dense"
                | "cross_mode" | "upsample_mode"
        ) {
            last_arch_line = line;
        } else {
            last_train_line = line;
        }
        seen.push(key);
    }
    let inv = |line: usize, e: &dyn std::fmt::Display| ConfigError::Invariant {
        line,
        detail: e.to_string(),
    };
    cfg.arch.validate().map_err(|e| inv(last_arch_line, &e))?;
    cfg.train.validate().map_err(|e| inv(last_train_line, &e))?;
    cfg.quant.validate().map_err(|e| inv(last_quant_line, &e))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_config(&text)
}
