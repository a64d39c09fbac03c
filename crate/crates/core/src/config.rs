//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Keys are `seed` plus section-prefixed fields (`data.*`, `model.*`,
//! `train.*`, `eval.*`). Lists are comma separated. Unset keys keep their
//! defaults.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::content_hash;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed; overrides the per-section seeds.
    pub seed: u64,
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
        .with_seed(0)
    }
}

// derived from the master seed, so not settable on their own
const HIDDEN: [&str; 2] = ["data.seed", "train.seed"];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn parse_scalar(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: cannot parse {raw:?} as {}", kind(like)));
    Ok(match like {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad())?;
            if !f.is_finite() {
                return Err(bad());
            }
            Value::from(f)
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => return Err(bad()),
    })
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(_) => "a number",
        Value::Array(_) => "a comma-separated list",
        _ => "a string",
    }
}

fn parse_value(key: &str, raw: &str, like: &Value) -> Result<Value> {
    match like {
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0u64));
            let inner = raw.trim().trim_start_matches('[').trim_end_matches(']');
            inner
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_scalar(key, s, &elem))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        _ => parse_scalar(key, raw, like),
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node.get_mut(*p).expect("key validated");
    }
    node.as_object_mut().expect("section").insert(parts[parts.len() - 1].to_string(), v);
}

impl RunConfig {
    /// Every settable key, in sorted order.
    pub fn valid_keys() -> Vec<String> {
        let mut flat = Vec::new();
        flatten("", &serde_json::to_value(Self::default()).unwrap(), &mut flat);
        let mut keys: Vec<String> = flat.into_iter().map(|(k, _)| k).filter(|k| !HIDDEN.contains(&k.as_str())).collect();
        keys.sort();
        keys
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        let mut flat = Vec::new();
        flatten("", &root, &mut flat);
        let defaults: Map<String, Value> = flat.into_iter().collect();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            let like = match defaults.get(key) {
                Some(v) if !HIDDEN.contains(&key) => v,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown key {key:?} on line {}; valid keys: {}",
                        n + 1,
                        Self::valid_keys().join(", ")
                    )))
                }
            };
            set_path(&mut root, key, parse_value(key, raw.trim(), like)?);
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        let geom = self.data.validate().map_err(as_config)?;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.model.image_size == self.data.image_size, "model.image_size must equal data.image_size")?;
        check(self.model.channels == self.data.channels, "model.channels must equal data.channels")?;
        check(self.model.rf == self.data.rf && self.model.stride == self.data.stride, "model and data geometry differ")?;
        check(self.model.num_classes == self.data.num_classes, "model.num_classes must equal data.num_classes")?;
        self.train.validate(&geom).map_err(as_config)?;
        check(!self.eval.k_values.is_empty(), "eval.k_values is empty")?;
        for &k in &self.eval.k_values {
            check(k >= 1 && k <= geom.locations(), "eval.k_values must lie in 1..=grid size")?;
        }
        check(self.eval.judge_batch >= 2, "eval.judge_batch must be at least 2")?;
        check(self.eval.pgd_eps >= 0.0 && self.eval.pgd_step > 0.0, "eval.pgd_eps and eval.pgd_step must be non-negative and positive")?;
        Ok(())
    }

    /// Renders the configuration in the file format, every key listed.
    pub fn to_text(&self) -> String {
        let mut flat = Vec::new();
        flatten("", &serde_json::to_value(self).unwrap(), &mut flat);
        let mut out = String::new();
        for (k, v) in flat {
            if HIDDEN.contains(&k.as_str()) {
                continue;
            }
            let s = match v {
                Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", "),
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {s}\n"));
        }
        out
    }

    /// Hex SHA-256 of the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        content_hash(serde_json::to_string(&serde_json::to_value(self).unwrap()).unwrap().as_bytes())
    }

    pub fn run_name(&self) -> String {
        format!("run-{}", &self.hash()[..12])
    }
}
