//! `key = value` model configuration files.
//!
//! ```text
//! # desk-scale defaults
//! input_size = 64
//! channels = 32, 64, 128, 256
//! cells = 2, 2, 1, 1
//! mask_radius = 2
//! iters = 2
//! salrm_k = 9
//! seed = 0
//! ```
//!
//! Keys left out keep their default value. Unknown and repeated keys are
//! rejected. Parsing does not check that the values form a valid network;
//! see [`ModelConfig::validate`].

use std::collections::HashSet;
use std::str::FromStr;

use super::FormatError;
use crate::network::{ModelConfig, STAGES};

pub const KEYS: [&str; 7] = ["input_size", "channels", "cells", "mask_radius", "iters", "salrm_k", "seed"];

fn scalar<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, FormatError> {
    value.parse().map_err(|_| FormatError::Config {
        line,
        msg: format!("{key}: cannot parse {value:?}"),
    })
}

fn quad(line: usize, key: &str, value: &str) -> Result<[usize; STAGES], FormatError> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| scalar(line, key, p.trim()))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|v: Vec<usize>| FormatError::Config {
        line,
        msg: format!("{key}: expected {STAGES} values, got {}", v.len()),
    })
}

pub fn parse(text: &str) -> Result<ModelConfig, FormatError> {
    let mut cfg = ModelConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| FormatError::Config {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(FormatError::Config {
                line,
                msg: format!("unknown key {key:?}"),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(FormatError::Config {
                line,
                msg: format!("duplicate key {key:?}"),
            });
        }
        match key {
            "input_size" => cfg.input_size = scalar(line, key, value)?,
            "channels" => cfg.channels = quad(line, key, value)?,
            "cells" => cfg.cells = quad(line, key, value)?,
            "mask_radius" => cfg.mask_radius = scalar(line, key, value)?,
            "iters" => cfg.iters = scalar(line, key, value)?,
            "salrm_k" => cfg.salrm_k = scalar(line, key, value)?,
            "seed" => cfg.seed = scalar(line, key, value)?,
            _ => unreachable!("key list checked above"),
        }
    }
    Ok(cfg)
}

pub fn serialize(cfg: &ModelConfig) -> String {
    let join = |v: &[usize; STAGES]| v.map(|x| x.to_string()).join(", ");
    format!(
        "input_size = {}\nchannels = {}\ncells = {}\nmask_radius = {}\niters = {}\nsalrm_k = {}\nseed = {}\n",
        cfg.input_size,
        join(&cfg.channels),
        join(&cfg.cells),
        cfg.mask_radius,
        cfg.iters,
        cfg.salrm_k,
        cfg.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = ModelConfig {
            seed: 42,
            cells: [4, 2, 2, 1],
            ..ModelConfig::tiny()
        };
        assert_eq!(parse(&serialize(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = parse("# only the seed\n\n  seed = 7  # trailing\n").unwrap();
        assert_eq!(cfg, ModelConfig { seed: 7, ..ModelConfig::default() });
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in ["colour = 3", "seed = 1\nseed = 2", "cells = 1, 2", "iters", "iters = -1"] {
            assert!(matches!(parse(bad), Err(FormatError::Config { .. })), "{bad}");
        }
    }
}
