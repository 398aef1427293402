//! Flat `key = value` configuration files and their merge with flags.

use std::collections::BTreeMap;
use std::path::Path;

use cccdfsl::trainer::{dataset_lambdas, TrainConfig};

use crate::Failure;

pub const KEYS: &[&str] = &[
    "dataset",
    "lambda1",
    "lambda2",
    "k",
    "tau",
    "tau_soft",
    "retrieval",
    "tit_mode",
    "epochs",
    "lr",
    "momentum",
    "hidden",
    "seed",
    "augmentations",
    "log_every",
];

/// Parses `key = value` lines. `#` starts a comment; keys accept `-` or `_`.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(format!("line {}: unknown key {key:?}", n + 1));
        }
        let value = v.trim().trim_matches('"').to_string();
        out.insert(key, value);
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("{key}: {e}"))
}

fn apply(cfg: &mut TrainConfig, key: &str, v: &str) -> Result<(), String> {
    let c = &mut cfg.cycle;
    match key {
        "dataset" => {
            let (l1, l2) = dataset_lambdas(v).ok_or_else(|| {
                format!("unknown dataset {v:?} (chestx, isic, eurosat, cropdiseases)")
            })?;
            c.lambda1 = l1;
            c.lambda2 = l2;
        }
        "lambda1" => c.lambda1 = num(key, v)?,
        "lambda2" => c.lambda2 = num(key, v)?,
        "k" => c.k = num(key, v)?,
        "tau" => c.tau_ce = num(key, v)?,
        "tau_soft" => c.tau_soft = num(key, v)?,
        "retrieval" => c.retrieval = v.parse().map_err(|e: cccdfsl::Error| e.to_string())?,
        "tit_mode" => c.tit_mode = v.parse().map_err(|e: cccdfsl::Error| e.to_string())?,
        "epochs" => cfg.epochs = num(key, v)?,
        "lr" => cfg.lr = num(key, v)?,
        "momentum" => cfg.momentum = num(key, v)?,
        "hidden" => cfg.hidden = Some(num(key, v)?),
        "seed" => cfg.seed = num(key, v)?,
        "augmentations" => cfg.expected_augmentations = Some(num(key, v)?),
        "log_every" => cfg.log_every = num(key, v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Builds a training configuration from file entries overridden by flag entries.
///
/// A dataset preset sets both cycle weights; an explicit weight from the same
/// or a higher-priority source replaces it.
pub fn resolve(
    file: &BTreeMap<String, String>,
    flags: &BTreeMap<String, String>,
) -> Result<(TrainConfig, Option<String>), String> {
    let mut merged = file.clone();
    if flags.contains_key("dataset") {
        merged.remove("lambda1");
        merged.remove("lambda2");
    }
    merged.extend(flags.iter().map(|(k, v)| (k.clone(), v.clone())));

    let mut cfg = TrainConfig::default();
    let dataset = merged.get("dataset").cloned();
    if let Some(d) = &dataset {
        apply(&mut cfg, "dataset", d)?;
    }
    for (k, v) in merged.iter().filter(|(k, _)| *k != "dataset") {
        apply(&mut cfg, k, v)?;
    }
    Ok((cfg, dataset))
}
