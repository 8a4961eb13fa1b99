//! Encoder towers producing a global vector and a token matrix per input.
//!
//! Each modality has its own small network: an affine layer and a
//! nonlinearity, then an affine layer whose output is read as `L` tokens of
//! width `D'`. The global vector is an affine map of the token mean. Anything
//! else that can produce [`EncodedFeatures`] (for example a wrapper around a
//! pretrained vision-language model) can sit behind [`FeatureEncoder`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Activation, Affine, Binding, ParamGroup, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInput {
    pub kind: Modality,
    pub payload: Vec<f64>,
}

impl RawInput {
    pub fn image(payload: Vec<f64>) -> Self {
        Self {
            kind: Modality::Image,
            payload,
        }
    }

    pub fn text(payload: Vec<f64>) -> Self {
        Self {
            kind: Modality::Text,
            payload,
        }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    /// `D_raw`-dimensional global feature.
    pub global: Vec<f64>,
    /// `L x D'` token features.
    pub tokens: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub global_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn validate(&self, which: Modality) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("tokens", self.tokens),
            ("token_dim", self.token_dim),
            ("global_dim", self.global_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!(
                    "{} encoder `{name}` must be positive",
                    which.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    /// Keep backbone parameters fixed during training.
    #[serde(default)]
    pub freeze: bool,
}

/// Anything that maps a [`RawInput`] to [`EncodedFeatures`] with fixed shapes per modality.
pub trait FeatureEncoder {
    /// `(L, D', D_raw)` for the modality.
    fn output_shape(&self, kind: Modality) -> (usize, usize, usize);

    fn encode(&self, input: &RawInput) -> Result<EncodedFeatures>;
}

/// One modality tower; see the module docs for its layout.
#[derive(Debug, Clone)]
pub struct EncoderTower {
    pub config: EncoderConfig,
    pub hidden: Affine,
    pub token_out: Affine,
    pub global_out: Affine,
}

/// Graph handles produced by a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    /// `B x D_raw`
    pub global: Var,
    /// `(B*L) x D'`, tokens of item `b` in rows `b*L..(b+1)*L`
    pub tokens: Var,
    pub tokens_per_item: usize,
}

impl EncoderTower {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        config: &EncoderConfig,
    ) -> Self {
        let g = ParamGroup::Backbone;
        let hidden = Affine::register(
            store,
            rng,
            &format!("{prefix}.hidden"),
            g,
            config.input_dim,
            config.hidden,
        );
        let token_out = Affine::register(
            store,
            rng,
            &format!("{prefix}.tokens"),
            g,
            config.hidden,
            config.tokens * config.token_dim,
        );
        let global_out = Affine::register(
            store,
            rng,
            &format!("{prefix}.global"),
            g,
            config.token_dim,
            config.global_dim,
        );
        Self {
            config: config.clone(),
            hidden,
            token_out,
            global_out,
        }
    }

    /// Batched forward over the rows of `inputs` (`B x input_dim`).
    pub fn forward(&self, graph: &mut Graph, binding: &Binding, inputs: Var) -> EncodedVars {
        let c = &self.config;
        let batch = graph.value(inputs).rows();
        let h = self.hidden.apply(graph, binding, inputs);
        let h = c.activation.apply(graph, h);
        let flat = self.token_out.apply(graph, binding, h);
        let tokens = graph.reshape(flat, batch * c.tokens, c.token_dim);
        let mean = graph.group_mean_rows(tokens, c.tokens);
        let global = self.global_out.apply(graph, binding, mean);
        EncodedVars {
            global,
            tokens,
            tokens_per_item: c.tokens,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub image: EncoderTower,
    pub text: EncoderTower,
    pub freeze: bool,
}

impl Backbone {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, config: &BackboneConfig) -> Result<Self> {
        config.image.validate(Modality::Image)?;
        config.text.validate(Modality::Text)?;
        Ok(Self {
            image: EncoderTower::register(store, rng, "backbone.image", &config.image),
            text: EncoderTower::register(store, rng, "backbone.text", &config.text),
            freeze: config.freeze,
        })
    }

    pub fn tower(&self, kind: Modality) -> &EncoderTower {
        match kind {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    /// Stacks payloads into a constant batch, checking every length.
    pub fn stack_inputs(&self, kind: Modality, payloads: &[&[f64]]) -> Result<Matrix> {
        let dim = self.tower(kind).config.input_dim;
        let mut data = Vec::with_capacity(payloads.len() * dim);
        for (i, p) in payloads.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Config(format!(
                    "{} payload {i} has length {}, encoder expects {dim}",
                    kind.name(),
                    p.len()
                )));
            }
            data.extend_from_slice(p);
        }
        Matrix::from_vec(payloads.len(), dim, data)
    }

    pub fn forward(
        &self,
        graph: &mut Graph,
        binding: &Binding,
        kind: Modality,
        payloads: &[&[f64]],
    ) -> Result<EncodedVars> {
        let x = self.stack_inputs(kind, payloads)?;
        let x = graph.constant(x);
        Ok(self.tower(kind).forward(graph, binding, x))
    }
}

/// A backbone together with the parameter values it reads.
pub struct BoundBackbone<'a> {
    pub backbone: &'a Backbone,
    pub store: &'a ParamStore,
}

impl FeatureEncoder for BoundBackbone<'_> {
    fn output_shape(&self, kind: Modality) -> (usize, usize, usize) {
        let c = &self.backbone.tower(kind).config;
        (c.tokens, c.token_dim, c.global_dim)
    }

    fn encode(&self, input: &RawInput) -> Result<EncodedFeatures> {
        encode(input, self.backbone, self.store)
    }
}

/// Single-input forward pass.
pub fn encode(input: &RawInput, backbone: &Backbone, store: &ParamStore) -> Result<EncodedFeatures> {
    let mut graph = Graph::new();
    let binding = store.bind_frozen(&mut graph);
    let out = backbone.forward(&mut graph, &binding, input.kind, &[&input.payload])?;
    Ok(EncodedFeatures {
        global: graph.value(out.global).data().to_vec(),
        tokens: graph.value(out.tokens).clone(),
    })
}
