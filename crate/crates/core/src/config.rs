//! Plain-text `key = value` config files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors so typos
//! do not silently fall back to defaults.
//!
//! ```text
//! # sim.cfg
//! n_questions = 200
//! n_events = 8000
//! crp_alpha = auto
//! length_source = lognormal(6, 1)
//! question_weight_source = empirical(reference.jsonl)
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CvaError, Result};
use crate::simulator::{CrpAlpha, LengthSource, QuestionWeights, SimConfig};
use crate::trainer::FitConfig;
use crate::trajectory::load_jsonl;

/// Parse `key = value` lines. Later keys override earlier ones.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CvaError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| CvaError::Config(format!("{key}: cannot parse {raw:?}")))
}

fn boolean(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CvaError::Config(format!("{key}: expected true or false, got {raw:?}"))),
    }
}

/// Split `name(a, b)` into `("name", ["a", "b"])`; a bare `name` has no args.
fn call(key: &str, raw: &str) -> Result<(String, Vec<String>)> {
    match raw.split_once('(') {
        None => Ok((raw.to_string(), Vec::new())),
        Some((name, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| CvaError::Config(format!("{key}: unbalanced parentheses in {raw:?}")))?;
            let args = inner.split(',').map(|a| a.trim().to_string()).collect();
            Ok((name.trim().to_string(), args))
        }
    }
}

pub fn parse_fit_config(text: &str) -> Result<FitConfig> {
    let mut cfg = FitConfig::default();
    for (k, v) in parse_pairs(text)? {
        match k.as_str() {
            "l2_weight" => cfg.l2_weight = value(&k, &v)?,
            "tol" => cfg.tol = value(&k, &v)?,
            "max_iters" => cfg.max_iters = value(&k, &v)?,
            "drop_first_votes" => cfg.drop_first_votes = boolean(&k, &v)?,
            "seed" => cfg.seed = value(&k, &v)?,
            "freeze_beta" => cfg.freeze_beta = Some(value(&k, &v)?),
            _ => return Err(CvaError::Config(format!("unknown fit key {k}"))),
        }
    }
    if !(cfg.l2_weight >= 0.0) || !(cfg.tol > 0.0) {
        return Err(CvaError::Config("l2_weight must be >= 0 and tol > 0".into()));
    }
    Ok(cfg)
}

pub fn load_fit_config(path: &Path) -> Result<FitConfig> {
    parse_fit_config(&std::fs::read_to_string(path).map_err(|e| CvaError::io(path, e))?)
}

/// Parse a simulator config. Relative `empirical(path)` references are
/// resolved against `base_dir` and read as trajectory JSONL.
pub fn parse_sim_config(text: &str, base_dir: &Path) -> Result<SimConfig> {
    let mut cfg = SimConfig::default();
    for (k, v) in parse_pairs(text)? {
        match k.as_str() {
            "n_questions" => cfg.n_questions = value(&k, &v)?,
            "n_events" => cfg.n_events = value(&k, &v)?,
            "crp_alpha" => {
                cfg.crp_alpha = if v == "auto" {
                    CrpAlpha::Auto
                } else {
                    CrpAlpha::Fixed(value(&k, &v)?)
                }
            }
            "quality_mean" => cfg.quality_mean = value(&k, &v)?,
            "quality_sd" => cfg.quality_sd = value(&k, &v)?,
            "true_lambda" => cfg.true_lambda = value(&k, &v)?,
            "true_beta" => cfg.true_beta = value(&k, &v)?,
            "true_nu" => cfg.true_nu = value(&k, &v)?,
            "seed" => cfg.seed = value(&k, &v)?,
            "length_source" => {
                cfg.length_source = match call(&k, &v)? {
                    (name, args) if name == "lognormal" && args.len() == 2 => LengthSource::LogNormal {
                        mu: value(&k, &args[0])?,
                        sigma: value(&k, &args[1])?,
                    },
                    (name, args) if name == "empirical" && args.len() == 1 => {
                        let trajs = load_jsonl(base_dir.join(&args[0]))?;
                        LengthSource::Empirical(
                            trajs
                                .iter()
                                .flat_map(|t| t.answers.iter().map(|a| a.text_length))
                                .collect(),
                        )
                    }
                    _ => return Err(CvaError::Config(format!("length_source: cannot parse {v:?}"))),
                }
            }
            "question_weight_source" => {
                cfg.question_weight_source = match call(&k, &v)? {
                    (name, args) if name == "uniform" && args.is_empty() => QuestionWeights::Uniform,
                    (name, args) if name == "zipf" && args.len() == 1 => {
                        QuestionWeights::Zipf(value(&k, &args[0])?)
                    }
                    (name, args) if name == "empirical" && args.len() == 1 => {
                        QuestionWeights::Empirical(load_jsonl(base_dir.join(&args[0]))?)
                    }
                    _ => {
                        return Err(CvaError::Config(format!(
                            "question_weight_source: cannot parse {v:?}"
                        )))
                    }
                }
            }
            _ => return Err(CvaError::Config(format!("unknown simulate key {k}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_sim_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CvaError::io(path, e))?;
    parse_sim_config(&text, path.parent().unwrap_or(Path::new(".")))
}
