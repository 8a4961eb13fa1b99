//! Experiment configuration: defaults, JSON files, `key=value` overrides and dataset preparation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attribute_features::AttributeConfig;
use crate::backbone::{BackboneConfig, EncoderConfig};
use crate::data::{
    generate_world, ingest_triplet_file, read_gallery, sample_triplets, Gallery, Triplet, TripletFormat, WorldSpec,
};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::ModelConfig;
use crate::params::Activation;
use crate::query_composition::CompositionConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_triplets: usize,
    pub test_queries: usize,
    pub max_changes: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    /// Optional files replacing the synthetic data; relative paths resolve
    /// against the working directory.
    pub gallery_manifest: Option<PathBuf>,
    pub train_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_triplets: 5000,
            test_queries: 1000,
            max_changes: 2,
            train_seed: 1,
            test_seed: 2,
            gallery_manifest: None,
            train_file: None,
            test_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
            subset_ks: Vec::new(),
            protocol: Protocol::Shoes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldSpec {
            num_attributes: 6,
            values_per_attribute: 4,
            noise_std: 0.05,
            render_seed: 0,
            gallery_size: 256,
            image_dim: 32,
        };
        let encoder = |input_dim, tokens| EncoderConfig {
            input_dim,
            hidden: 128,
            tokens,
            token_dim: 64,
            global_dim: 64,
            activation: Activation::Tanh,
        };
        let model = ModelConfig {
            attributes: AttributeConfig::with_local(8, 64),
            backbone: BackboneConfig {
                image: encoder(world.image_dim, 8),
                text: encoder(world.text_dim(), 6),
                freeze: false,
            },
            composition: CompositionConfig::default(),
        };
        Self {
            world,
            data: DataConfig::default(),
            model,
            train: TrainConfig {
                base_lr: 1e-3,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when possible and kept
/// as a string otherwise. Unknown keys are caught when the result is decoded.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl ExperimentConfig {
    /// Defaults, then the optional JSON file, then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge_json(&mut root, patch);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_input_dims();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Encoder input widths always follow the world: image payload length and
    /// modification slot length.
    pub fn sync_input_dims(&mut self) {
        self.model.backbone.image.input_dim = self.world.image_dim;
        self.model.backbone.text.input_dim = self.world.text_dim();
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() {
            return Err(Error::Config("eval.ks must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Gallery plus training and test triplets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub gallery: Gallery,
    pub train: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

/// Builds the synthetic world, or reads the configured files when present.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let format = TripletFormat {
        text_dim: cfg.world.text_dim(),
    };
    match (&cfg.data.gallery_manifest, &cfg.data.train_file, &cfg.data.test_file) {
        (None, None, None) => {
            let world = generate_world(&cfg.world)?;
            let train = sample_triplets(&world, cfg.data.train_triplets, cfg.data.max_changes, cfg.data.train_seed)?;
            let test = sample_triplets(&world, cfg.data.test_queries, cfg.data.max_changes, cfg.data.test_seed)?;
            Ok(Dataset {
                gallery: world.gallery,
                train,
                test,
            })
        }
        (Some(manifest), Some(train), Some(test)) => {
            let gallery = read_gallery(manifest, Some(cfg.world.image_dim))?;
            Ok(Dataset {
                train: ingest_triplet_file(train, &format, &gallery)?,
                test: ingest_triplet_file(test, &format, &gallery)?,
                gallery,
            })
        }
        _ => Err(Error::Config(
            "data.gallery_manifest, data.train_file and data.test_file must be set together".into(),
        )),
    }
}
