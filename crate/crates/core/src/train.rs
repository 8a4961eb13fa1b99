//! Training loop, learning-rate schedule, ablation switches and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Gallery, Triplet, TripletBatch};
use crate::error::{Error, Result};
use crate::metric_learning::{LossBreakdown, LossWeights};
use crate::model::{ModelConfig, TgCir};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, MomentState};
use crate::params::ParamGroup;
use crate::tensor::Matrix;

/// Loss-term switches of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Drops the orthogonality penalty.
    WithoutOrtho,
    /// Drops every target-guided term: teacher ranking and mask terms, distillation and KL.
    WithoutTargetGuide,
    /// Drops composition distillation only.
    WithoutTargetGuideC,
    /// Drops the matching-degree KL only.
    WithoutTargetGuideM,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::WithoutOrtho,
        Ablation::WithoutTargetGuide,
        Ablation::WithoutTargetGuideC,
        Ablation::WithoutTargetGuideM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutOrtho => "w/o_ortho",
            Ablation::WithoutTargetGuide => "w/o_target_guide",
            Ablation::WithoutTargetGuideC => "w/o_target_guide_c",
            Ablation::WithoutTargetGuideM => "w/o_target_guide_m",
        }
    }

    pub fn apply(self, w: LossWeights) -> LossWeights {
        match self {
            Ablation::Full => w,
            Ablation::WithoutOrtho => LossWeights { mu: 0.0, ..w },
            Ablation::WithoutTargetGuide => LossWeights {
                lambda: 0.0,
                eta: 0.0,
                nu: 0.0,
                kappa: 0.0,
                ..w
            },
            Ablation::WithoutTargetGuideC => LossWeights { nu: 0.0, ..w },
            Ablation::WithoutTargetGuideM => LossWeights { kappa: 0.0, ..w },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Learning rate of the backbone group; `None` means `base_lr / 10`.
    #[serde(default)]
    pub backbone_lr: Option<f64>,
    pub lr_decay_factor: f64,
    /// 0-based epoch indices at which the decay takes effect.
    pub decay_epochs: Vec<usize>,
    pub tau: f64,
    pub weights: LossWeights,
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 15,
            base_lr: 1e-4,
            backbone_lr: None,
            lr_decay_factor: 0.1,
            decay_epochs: vec![5, 10],
            tau: 0.1,
            weights: LossWeights::fashion_iq(),
            seed: 0,
            ablation: Ablation::Full,
            adamw: AdamWConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let lr_ok = |x: f64| x.is_finite() && x > 0.0;
        if !lr_ok(self.base_lr) || !self.backbone_lr.is_none_or(lr_ok) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay_epochs must be strictly ascending".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.apply(self.weights)
    }

    pub fn backbone_base_lr(&self) -> f64 {
        self.backbone_lr.unwrap_or(self.base_lr / 10.0)
    }

    /// `(head, backbone)` learning rates during `epoch`.
    pub fn learning_rates(&self, epoch: usize) -> (f64, f64) {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count() as i32;
        let f = self.lr_decay_factor.powi(decays);
        (self.base_lr * f, self.backbone_base_lr() * f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TgCir,
    pub optimizer: AdamW,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Stream used for batch shuffling, distinct from the initialization stream.
const SHUFFLE_STREAM: u64 = 1;

impl TrainState {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = TgCir::new(model_config, config.seed)?;
        let optimizer = AdamW::new(&model.store, config.adamw);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            step: 0,
            rng,
        })
    }
}

/// One optimizer update on `batch` at the learning rates of the current epoch.
pub fn train_step(state: &mut TrainState, batch: &TripletBatch, config: &TrainConfig) -> Result<TrainLogRecord> {
    let start = Instant::now();
    let weights = config.effective_weights();
    let out = state.model.batch_loss(batch, config.tau, &weights)?;
    let mut grads = out.grads;
    let grad_norm = match config.grad_clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt(),
    };
    let (lr_head, lr_backbone) = config.learning_rates(state.epoch);
    let freeze = state.model.backbone.freeze;
    state.optimizer.step(&mut state.model.store, &grads, |p| match p.group {
        ParamGroup::Backbone if freeze => 0.0,
        ParamGroup::Backbone => lr_backbone,
        ParamGroup::Head => lr_head,
    });
    state.step += 1;
    Ok(TrainLogRecord {
        step: state.step,
        epoch: state.epoch,
        breakdown: out.breakdown,
        lr_head,
        lr_backbone,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Directory receiving one checkpoint per finished epoch.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    /// Number of most recent epoch checkpoints to keep; 0 keeps all.
    pub keep: usize,
}

impl CheckpointSink {
    pub fn path_for(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.json"))
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.json")
    }
}

/// Runs the remaining epochs of `state`. Each epoch shuffles the training set
/// without replacement and drops the last incomplete batch.
pub fn run_training(
    state: &mut TrainState,
    model_config: &ModelConfig,
    config: &TrainConfig,
    triplets: &[Triplet],
    gallery: &Gallery,
    sink: Option<&CheckpointSink>,
    mut on_log: impl FnMut(&TrainLogRecord),
) -> Result<()> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if triplets.len() < config.batch_size {
        return Err(Error::Config(format!(
            "{} training triplets cannot fill one batch of {}",
            triplets.len(),
            config.batch_size
        )));
    }
    if let Some(s) = sink {
        fs::create_dir_all(&s.dir).map_err(|e| Error::io(&s.dir, e))?;
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    while state.epoch < config.epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks_exact(config.batch_size) {
            let batch = TripletBatch::assemble(gallery, chunk.iter().map(|&i| &triplets[i]))?;
            let record = train_step(state, &batch, config)?;
            on_log(&record);
        }
        state.epoch += 1;
        if let Some(s) = sink {
            let ckpt = Checkpoint::from_state(state, model_config, config);
            ckpt.write(&s.path_for(state.epoch))?;
            ckpt.write(&s.latest())?;
            if s.keep > 0 && state.epoch > s.keep {
                let old = s.path_for(state.epoch - s.keep);
                if old.exists() {
                    fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                }
            }
        }
    }
    Ok(())
}

// ---- checkpoints -------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "tgcir-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMoment {
    pub name: String,
    pub state: MomentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (128-bit).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamWConfig,
    pub moments: Vec<NamedMoment>,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
}

/// SHA-256 of the canonical JSON of both configs.
pub fn config_fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    hex::encode(Sha256::digest(&json))
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, model_config: &ModelConfig, config: &TrainConfig) -> Self {
        let store = &state.model.store;
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            fingerprint: config_fingerprint(model_config, config),
            model_config: model_config.clone(),
            train_config: config.clone(),
            params: store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
            optimizer: state.optimizer.config,
            moments: store
                .iter()
                .zip(&state.optimizer.moments)
                .map(|((_, p), m)| NamedMoment {
                    name: p.name.clone(),
                    state: m.clone(),
                })
                .collect(),
            epoch: state.epoch,
            step: state.step,
            rng: RngState::capture(&state.rng),
        }
    }

    /// Removes teacher parameters and their optimizer moments.
    pub fn strip_teacher(&mut self) {
        self.params.retain(|p| !TgCir::is_teacher_param(&p.name));
        self.moments.retain(|m| !TgCir::is_teacher_param(&m.name));
    }

    /// Writes via a temporary file and rename, so a failed write leaves any
    /// previous checkpoint at `path` intact.
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads and validates format, version and fingerprint.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown checkpoint format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let expected = config_fingerprint(&self.model_config, &self.train_config);
        if self.fingerprint != expected {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: stored {}, computed {expected}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    /// Refuses to continue under a different configuration.
    pub fn expect_config(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        if self.fingerprint != config_fingerprint(model, train) {
            return Err(Error::Checkpoint(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        Ok(())
    }

    /// Rebuilds the model. Teacher parameters may be absent, in which case the
    /// model can only run the student branch.
    pub fn into_model(&self) -> Result<TgCir> {
        let mut model = TgCir::new(&self.model_config, self.train_config.seed)?;
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        let mut teacher_missing = false;
        for (id, name) in ids {
            match self.params.iter().find(|p| p.name == name) {
                Some(p) => model.store.assign(id, p.value.clone())?,
                None if TgCir::is_teacher_param(&name) => teacher_missing = true,
                None => return Err(Error::Checkpoint(format!("parameter `{name}` missing"))),
            }
        }
        if let Some(p) = self.params.iter().find(|p| model.store.find(&p.name).is_none()) {
            return Err(Error::Checkpoint(format!("unknown parameter `{}`", p.name)));
        }
        if teacher_missing {
            model.heads.teacher = None;
        }
        Ok(model)
    }

    /// Full training state; needs teacher parameters and all moments.
    pub fn into_state(&self) -> Result<TrainState> {
        let model = self.into_model()?;
        if model.heads.teacher.is_none() {
            return Err(Error::Checkpoint("cannot resume training without teacher parameters".into()));
        }
        let mut moments = Vec::with_capacity(model.store.len());
        for (_, p) in model.store.iter() {
            let m = self
                .moments
                .iter()
                .find(|m| m.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moments for `{}` missing", p.name)))?;
            if m.state.first.shape() != p.value.shape() || m.state.second.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for `{}` have the wrong shape", p.name)));
            }
            moments.push(m.state.clone());
        }
        Ok(TrainState {
            model,
            optimizer: AdamW {
                config: self.optimizer,
                moments,
            },
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.restore()?,
        })
    }
}
