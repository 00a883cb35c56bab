//! Experiment configuration and its flat text form.
//!
//! A config file holds one `key = value` pair per line, keys being dotted
//! paths into [`ExperimentConfig`]:
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! data.train_scenes = 24
//! coarse.window.gammas = 0.5,1,2
//! coarse.window.assignment.kind = distance
//! coarse.window.assignment.length_scale = 5.0
//! fine.policy = best
//! ```
//!
//! Lists of scalars are comma separated; any value may also be written as a
//! JSON literal. Keys under `window.` are shorthand for `coarse.window.`, and
//! `window.gamma` names `coarse.window.gammas`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::coarse::CoarseConfig;
use crate::error::{Error, Result};
use crate::fine::FineConfig;
use crate::scene::{config_hash, derive_seed, DatasetConfig, QueryMode};
use crate::util::write_atomic;

/// What the evaluation stage measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub retrieval_ks: Vec<usize>,
    pub localization_ks: Vec<usize>,
    /// Localization thresholds in meters.
    pub thresholds: Vec<f64>,
    /// Label noise injected into the test split before evaluation.
    pub label_noise: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval_ks: vec![1, 3, 5],
            localization_ks: vec![1, 5, 10],
            thresholds: vec![5.0, 10.0, 15.0],
            label_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    pub data: DatasetConfig,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub eval: EvalConfig,
}

/// Sub-seed streams derived from [`ExperimentConfig::seed`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedStream {
    Data = 100,
    Coarse = 101,
    Fine = 102,
    Noise = 103,
}

impl Default for ExperimentConfig {
    /// The standard synthetic experiment.
    fn default() -> Self {
        let mut coarse = CoarseConfig::with_dim(128);
        coarse.train.epochs = 10;
        let mut fine = FineConfig::with_dim(64);
        fine.learning_rate = 1e-3;
        fine.epochs = 10;
        fine.prealign_epochs = 3;
        Self {
            seed: 7,
            data: DatasetConfig {
                train_scenes: 24,
                ..DatasetConfig::default()
            },
            coarse,
            fine,
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A fine-stage task with a known answer: sparse scenes in which every
    /// query's target is the centroid of the objects its hints describe, and
    /// some positive submap contains all of them.
    pub fn centroid_task() -> Self {
        let mut cfg = Self::default();
        cfg.data.train_scenes = 12;
        cfg.data.generator.object_count = 80;
        cfg.data.query.hint_radius = 20.0;
        cfg.data.query.mode = QueryMode::Centroid;
        cfg.fine.prealign_epochs = 2;
        cfg
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        derive_seed(self.seed, stream as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        if self.data.train_scenes == 0 || self.data.val_scenes == 0 || self.data.test_scenes == 0 {
            return Err(Error::InvalidConfig("every split needs at least one scene".into()));
        }
        if self.data.queries_per_scene == 0 {
            return Err(Error::InvalidConfig("queries_per_scene must be positive".into()));
        }
        let p = &self.data.partition;
        if !(p.edge > 0.0 && p.stride > 0.0 && p.stride <= p.edge) || p.max_objects == 0 {
            return Err(Error::InvalidConfig(format!("bad partition {p:?}")));
        }
        self.coarse.validate()?;
        self.fine.validate()?;
        let e = &self.eval;
        if e.retrieval_ks.is_empty() || e.localization_ks.is_empty() || e.thresholds.is_empty() {
            return Err(Error::InvalidConfig("evaluation lists must be non-empty".into()));
        }
        if e.retrieval_ks.iter().chain(&e.localization_ks).any(|&k| k == 0) {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        if e.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidConfig("thresholds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&e.label_noise) {
            return Err(Error::InvalidConfig(format!("label noise {} outside [0, 1]", e.label_noise)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Every leaf as a `(dotted key, value)` pair, in field order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }

    /// The flat text form, parsed back by [`ExperimentConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = format!("# config hash {}\n", self.hash());
        for (k, v) in self.to_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Parses a config file on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::default().with_overrides(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Applies `key=value` overrides and validates the result.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let mut keys = Vec::with_capacity(pairs.len());
        for (k, v) in pairs {
            let key = canonical_key(k);
            set_path(&mut tree, &key, v)?;
            keys.push(key);
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        // keys serde ignored are typos
        let known: Vec<String> = cfg.to_pairs().into_iter().map(|(k, _)| k).collect();
        for key in keys {
            let hit = known.iter().any(|k| *k == key || k.starts_with(&format!("{key}.")));
            if !hit {
                return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key=value` strings.
    pub fn with_override_args(&self, args: &[String]) -> Result<Self> {
        let pairs = args
            .iter()
            .map(|a| {
                a.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::InvalidConfig(format!("override {a:?} is not key=value")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_overrides(&pairs)
    }
}

/// Keys whose flattened values differ between `a` and `b`, including keys
/// present in only one of them.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let pa = a.to_pairs();
    let pb = b.to_pairs();
    let mut keys: Vec<String> = Vec::new();
    for (k, v) in &pa {
        if pb.iter().find(|(kb, _)| kb == k).map(|(_, vb)| vb) != Some(v) {
            keys.push(k.clone());
        }
    }
    for (k, _) in &pb {
        if !pa.iter().any(|(ka, _)| ka == k) {
            keys.push(k.clone());
        }
    }
    keys
}

fn canonical_key(key: &str) -> String {
    let key = match key.strip_prefix("window.") {
        Some(rest) => format!("coarse.window.{rest}"),
        None => key.to_string(),
    };
    if key == "coarse.window.gamma" {
        "coarse.window.gammas".into()
    } else {
        key
    }
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Null => Some("null".into()),
        _ => None,
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(child, &join(k), out);
            }
        }
        Value::Array(items) => {
            let scalars: Option<Vec<String>> = items
                .iter()
                .map(|i| match i {
                    Value::Number(_) | Value::Bool(_) => scalar_text(i),
                    _ => None,
                })
                .collect();
            let text = match scalars {
                Some(s) if !s.is_empty() => s.join(","),
                _ => serde_json::to_string(v).expect("json"),
            };
            out.push((prefix.to_string(), text));
        }
        scalar => out.push((prefix.to_string(), scalar_text(scalar).expect("scalar"))),
    }
}

fn parse_value(existing: Option<&Value>, text: &str) -> Result<Value> {
    let json = serde_json::from_str::<Value>(text).ok();
    let bad = || Error::InvalidConfig(format!("cannot parse {text:?}"));
    Ok(match existing {
        Some(Value::Array(_)) => match json {
            Some(v @ Value::Array(_)) => v,
            _ if text.is_empty() => Value::Array(Vec::new()),
            _ => Value::Array(
                text.split(',')
                    .map(|t| {
                        let t = t.trim();
                        serde_json::from_str(t).unwrap_or_else(|_| Value::String(t.to_string()))
                    })
                    .collect(),
            ),
        },
        Some(Value::String(_)) => match json {
            Some(v @ Value::Object(_)) => v,
            _ => Value::String(text.to_string()),
        },
        Some(Value::Number(_)) => match json {
            Some(v @ Value::Number(_)) => v,
            _ => return Err(bad()),
        },
        Some(Value::Bool(_)) => match json {
            Some(v @ Value::Bool(_)) => v,
            _ => return Err(bad()),
        },
        Some(Value::Object(_)) => match json {
            Some(v @ Value::Object(_)) => v,
            _ => return Err(bad()),
        },
        Some(Value::Null) | None => json.unwrap_or_else(|| Value::String(text.to_string())),
    })
}

fn set_path(tree: &mut Value, key: &str, text: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("malformed key {key:?}")));
    }
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        if i == 0 && node.get(*part).is_none() {
            return Err(Error::InvalidConfig(format!("unknown config section {part:?}")));
        }
        if !node.is_object() {
            // a unit enum variant becoming a struct variant
            *node = Value::Object(Map::new());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            let v = parse_value(map.get(*part), text)?;
            map.insert(part.to_string(), v);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmm_former::WeightAssignment;
    use crate::fine::SuccessPolicy;

    #[test]
    fn text_form_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::default()
            .with_override_args(&[
                "window.gamma=0.25,4".into(),
                "coarse.window.assignment.kind=distance".into(),
                "coarse.window.assignment.length_scale=3.5".into(),
                "fine.policy=best".into(),
                "seed=11".into(),
            ])
            .unwrap();
        assert_eq!(cfg.coarse.window.gammas, vec![0.25, 4.0]);
        assert_eq!(cfg.coarse.window.assignment, WeightAssignment::Distance { length_scale: 3.5 });
        assert_eq!(cfg.fine.policy, SuccessPolicy::Best);
        assert_eq!(cfg.seed, 11);
        let d = config_diff(&ExperimentConfig::default(), &cfg);
        assert!(d.contains(&"coarse.window.gammas".to_string()));
        assert!(d.contains(&"seed".to_string()));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let base = ExperimentConfig::default();
        assert!(base.with_override_args(&["nope.x=1".into()]).is_err());
        assert!(base.with_override_args(&["coarse.train.epochz=1".into()]).is_err());
        assert!(base.with_override_args(&["coarse.train.epochs=abc".into()]).is_err());
        assert!(base.with_override_args(&["window.gamma=0,1".into()]).is_err());
        assert!(base.with_override_args(&["seed".into()]).is_err());
        assert!(ExperimentConfig::from_text("seed 7").is_err());
    }

    #[test]
    fn identical_configs_have_no_diff() {
        let a = ExperimentConfig::default();
        assert!(config_diff(&a, &a.clone()).is_empty());
    }
}
