//! Layered run configuration: built-in defaults, then a JSON file with flat
//! dotted keys (`"model.knn_k": 3`), then command-line flags.

use std::fs;
use std::path::Path;

use mvgmn::data::SyntheticSpec;
use mvgmn::model::ModelConfig;
use mvgmn::train::TrainConfig;
use mvgmn::{Error, Result};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

/// Key/value overrides in precedence order; later entries win.
#[derive(Clone, Debug, Default)]
pub struct Overrides(Vec<(String, Value)>);

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.push((key.to_string(), value.into()));
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(Error::Config(format!(
                "config {} must be a JSON object",
                path.display()
            )));
        };
        Ok(Self(map.into_iter().collect()))
    }
}

fn section<T: serde::Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value).expect("config sections serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config sections are structs"),
    }
}

fn parse<T: serde::de::DeserializeOwned>(name: &str, map: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("invalid {name} settings: {e}")))
}

impl RunConfig {
    /// Applies override layers in order over the defaults and validates.
    pub fn resolve(layers: &[Overrides]) -> Result<Self> {
        let defaults = RunConfig::default();
        let mut model = section(&defaults.model);
        let mut train = section(&defaults.train);
        let mut data = section(&defaults.data);
        for (key, value) in layers.iter().flat_map(|l| l.0.iter()) {
            let (sec, field) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("config key {key:?} must look like \"section.field\"")))?;
            let target = match sec {
                "model" => &mut model,
                "train" => &mut train,
                "data" => &mut data,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown config section in {key:?} (expected model, train or data)"
                    )))
                }
            };
            match target.get_mut(field) {
                Some(slot) => *slot = value.clone(),
                None => {
                    let known: Vec<&str> = target.keys().map(String::as_str).collect();
                    return Err(Error::Config(format!(
                        "unknown config key {key:?}; {sec} accepts {}",
                        known.join(", ")
                    )));
                }
            }
        }
        let cfg = RunConfig {
            model: parse("model", model)?,
            train: parse("train", train)?,
            data: parse("data", data)?,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    /// Model settings tied to the dataset take the dataset's values.
    pub fn model_for(&self, data: &SyntheticSpec) -> Result<ModelConfig> {
        let model = ModelConfig {
            views: data.views,
            steps: data.steps,
            d_rgb: data.d_rgb,
            d_sk: data.d_sk,
            n_classes: data.n_classes,
            ..self.model.clone()
        };
        model.validate()?;
        Ok(model)
    }
}
