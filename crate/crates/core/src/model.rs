//! The full retrieval model: parameters, batched training forward pass and inference helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute_features::{orthogonal_regularization_batch, AttributeConfig, AttributeExtractor};
use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, Modality};
use crate::data::TripletBatch;
use crate::error::{Error, Result};
use crate::metric_learning::{
    early_fusion_logits, kl_loss, late_fusion_logits, rank_loss, softmax_rows, total_objective, LossBreakdown,
    LossParts, LossWeights, TRAIN_EPS,
};
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::query_composition::{distillation, mask_regularization, CompositionConfig, CompositionHeads, TEACHER_PREFIX};
use crate::tensor::Matrix;

/// Rows per inference chunk when embedding many images.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub attributes: AttributeConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub composition: CompositionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attributes.validate()?;
        self.backbone.image.validate(Modality::Image)?;
        self.backbone.text.validate(Modality::Text)
    }
}

#[derive(Debug, Clone)]
pub struct TgCir {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub attributes: AttributeExtractor,
    pub heads: CompositionHeads,
}

/// Loss values and per-parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Option<Matrix>>,
}

/// Student-branch outputs for a set of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentQueries {
    /// `B x D` mean-pooled composed features.
    pub pooled: Matrix,
    /// `(B*K) x 1`.
    pub keep: Matrix,
    /// `(B*K) x 1`.
    pub replace: Matrix,
}

/// Teacher masks for a set of queries with known targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherMasks {
    pub keep: Matrix,
    pub replace: Matrix,
}

struct Encoded {
    reference: Var,
    text: Var,
    target: Var,
}

impl TgCir {
    /// Registers all parameters from a ChaCha8 stream seeded with `seed`:
    /// backbone first, then attribute modules, then composition heads.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::register(&mut store, &mut rng, &config.backbone)?;
        let attributes = AttributeExtractor::register(&mut store, &mut rng, &config.attributes, &backbone)?;
        let heads = CompositionHeads::register(&mut store, &mut rng, &config.composition, config.attributes.dim)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            attributes,
            heads,
        })
    }

    pub fn k(&self) -> usize {
        self.config.attributes.k()
    }

    pub fn dim(&self) -> usize {
        self.config.attributes.dim
    }

    pub fn is_teacher_param(name: &str) -> bool {
        name.starts_with(TEACHER_PREFIX)
    }

    fn bind_trainable(&self, graph: &mut Graph) -> Binding {
        let freeze = self.backbone.freeze;
        self.store
            .bind(graph, |p| !(freeze && p.group == ParamGroup::Backbone))
    }

    fn encode(&self, graph: &mut Graph, binding: &Binding, kind: Modality, payloads: &[&[f64]]) -> Result<Var> {
        let enc = self.backbone.forward(graph, binding, kind, payloads)?;
        Ok(self.attributes.forward(graph, binding, kind, &enc))
    }

    fn encode_batch(&self, graph: &mut Graph, binding: &Binding, batch: &TripletBatch) -> Result<Encoded> {
        let refs: Vec<&[f64]> = batch.references.iter().map(Vec::as_slice).collect();
        let texts: Vec<&[f64]> = batch.texts.iter().map(Vec::as_slice).collect();
        let targets: Vec<&[f64]> = batch.targets.iter().map(Vec::as_slice).collect();
        Ok(Encoded {
            reference: self.encode(graph, binding, Modality::Image, &refs)?,
            text: self.encode(graph, binding, Modality::Text, &texts)?,
            target: self.encode(graph, binding, Modality::Image, &targets)?,
        })
    }

    /// Forward pass of both branches, all six loss terms, and the gradient of
    /// the weighted total. Terms whose weight is zero are reported but not
    /// connected to the total, so they contribute exactly nothing.
    pub fn batch_loss(&self, batch: &TripletBatch, tau: f64, weights: &LossWeights) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        weights.validate()?;
        let k = self.k();
        let mut graph = Graph::new();
        let binding = self.bind_trainable(&mut graph);
        let e = self.encode_batch(&mut graph, &binding, batch)?;

        let student = self.heads.student_forward(&mut graph, &binding, e.reference, e.text);
        let teacher = self
            .heads
            .teacher_forward(&mut graph, &binding, e.target, e.reference, e.text)?;

        let query_pooled = graph.group_mean_rows(student.composed, k);
        let target_pooled = graph.group_mean_rows(e.target, k);
        let student_logits = early_fusion_logits(&mut graph, query_pooled, target_pooled, tau, TRAIN_EPS);
        let rank_stu = rank_loss(&mut graph, student_logits);

        let teacher_logits = late_fusion_logits(&mut graph, teacher.composed, e.target, k, tau, TRAIN_EPS);
        let rank_tea = rank_loss(&mut graph, teacher_logits);
        let mask_tea = mask_regularization(&mut graph, teacher.keep, teacher.replace);
        let ortho = orthogonal_regularization_batch(&mut graph, [e.reference, e.text, e.target], k);
        let ckd = distillation(
            &mut graph,
            (student.keep, student.replace),
            (teacher.keep, teacher.replace),
            self.heads.config.stop_gradient_distillation,
        );

        let frozen_targets = graph.detach(e.target);
        let target_logits = late_fusion_logits(&mut graph, frozen_targets, frozen_targets, k, tau, TRAIN_EPS);
        let target_probs = softmax_rows(graph.value(target_logits));
        let kl = kl_loss(&mut graph, &target_probs, student_logits);

        let terms = [
            ("rank_stu", rank_stu, 1.0),
            ("rank_tea", rank_tea, weights.lambda),
            ("mask_tea", mask_tea, weights.eta),
            ("ortho", ortho, weights.mu),
            ("ckd", ckd, weights.nu),
            ("kl", kl, weights.kappa),
        ];
        for (name, var, _) in terms {
            let value = graph.scalar(var);
            if !value.is_finite() {
                return Err(Error::NonFinite { term: name, value });
            }
        }
        let mut total = rank_stu;
        for &(_, var, w) in &terms[1..] {
            if w > 0.0 {
                let scaled = graph.scale(var, w);
                total = graph.add(total, scaled);
            }
        }
        let parts = LossParts {
            rank_stu: graph.scalar(rank_stu),
            rank_tea: graph.scalar(rank_tea),
            mask_tea: graph.scalar(mask_tea),
            ortho: graph.scalar(ortho),
            ckd: graph.scalar(ckd),
            kl: graph.scalar(kl),
        };
        let breakdown = total_objective(parts, weights)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                term: "total",
                value: breakdown.total,
            });
        }
        let mut grads = graph.backward(total);
        Ok(BatchOutput {
            breakdown,
            grads: binding.collect(&mut grads),
        })
    }

    /// Attribute matrices of many payloads of one modality, stacked `(N*K) x D`.
    pub fn attribute_features(&self, kind: Modality, payloads: &[&[f64]]) -> Result<Matrix> {
        let mut parts = Vec::new();
        for chunk in payloads.chunks(INFERENCE_CHUNK) {
            let mut graph = Graph::new();
            let binding = self.store.bind_frozen(&mut graph);
            let e = self.encode(&mut graph, &binding, kind, chunk)?;
            parts.push(graph.value(e).clone());
        }
        if parts.is_empty() {
            return Ok(Matrix::zeros(0, self.dim()));
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        Matrix::vstack(&refs)
    }

    /// Mean-pooled image features, `N x D`.
    pub fn pooled_images(&self, payloads: &[&[f64]]) -> Result<Matrix> {
        let e = self.attribute_features(Modality::Image, payloads)?;
        Ok(group_mean(&e, self.k()))
    }

    /// Student composition; needs no target and no teacher parameters.
    pub fn student_queries(&self, references: &[&[f64]], texts: &[&[f64]]) -> Result<StudentQueries> {
        if references.len() != texts.len() {
            return Err(Error::InvalidInput(format!(
                "{} references but {} modification texts",
                references.len(),
                texts.len()
            )));
        }
        let k = self.k();
        let mut pooled = Vec::new();
        let mut keep = Vec::new();
        let mut replace = Vec::new();
        for (refs, txts) in references.chunks(INFERENCE_CHUNK).zip(texts.chunks(INFERENCE_CHUNK)) {
            let mut graph = Graph::new();
            let binding = self.store.bind_frozen(&mut graph);
            let r = self.encode(&mut graph, &binding, Modality::Image, refs)?;
            let m = self.encode(&mut graph, &binding, Modality::Text, txts)?;
            let out = self.heads.student_forward(&mut graph, &binding, r, m);
            let p = graph.group_mean_rows(out.composed, k);
            pooled.push(graph.value(p).clone());
            keep.push(graph.value(out.keep).clone());
            replace.push(graph.value(out.replace).clone());
        }
        let stack = |ms: Vec<Matrix>, cols: usize| -> Result<Matrix> {
            if ms.is_empty() {
                return Ok(Matrix::zeros(0, cols));
            }
            Matrix::vstack(&ms.iter().collect::<Vec<_>>())
        };
        Ok(StudentQueries {
            pooled: stack(pooled, self.dim())?,
            keep: stack(keep, 1)?,
            replace: stack(replace, 1)?,
        })
    }

    /// Teacher masks of queries whose targets are known.
    pub fn teacher_masks(&self, batch: &TripletBatch) -> Result<TeacherMasks> {
        let mut keep = Vec::new();
        let mut replace = Vec::new();
        let n = batch.len();
        let mut start = 0;
        while start < n {
            let end = (start + INFERENCE_CHUNK).min(n);
            let sub = TripletBatch {
                references: batch.references[start..end].to_vec(),
                texts: batch.texts[start..end].to_vec(),
                targets: batch.targets[start..end].to_vec(),
                changes: batch.changes[start..end].to_vec(),
            };
            let mut graph = Graph::new();
            let binding = self.store.bind_frozen(&mut graph);
            let e = self.encode_batch(&mut graph, &binding, &sub)?;
            let out = self
                .heads
                .teacher_forward(&mut graph, &binding, e.target, e.reference, e.text)?;
            keep.push(graph.value(out.keep).clone());
            replace.push(graph.value(out.replace).clone());
            start = end;
        }
        if keep.is_empty() {
            return Ok(TeacherMasks {
                keep: Matrix::zeros(0, 1),
                replace: Matrix::zeros(0, 1),
            });
        }
        Ok(TeacherMasks {
            keep: Matrix::vstack(&keep.iter().collect::<Vec<_>>())?,
            replace: Matrix::vstack(&replace.iter().collect::<Vec<_>>())?,
        })
    }

    /// Late-fusion teacher scores of one query against every candidate, where
    /// each candidate also plays the target fed to the teacher heads.
    pub fn teacher_scores(
        &self,
        reference: &Matrix,
        text: &Matrix,
        candidates: &Matrix,
        tau: f64,
    ) -> Result<Vec<f64>> {
        let k = self.k();
        let n = candidates.rows() / k;
        let d = self.dim();
        let mut reps_r = Vec::with_capacity(n * k * d);
        let mut reps_m = Vec::with_capacity(n * k * d);
        for _ in 0..n {
            reps_r.extend_from_slice(reference.data());
            reps_m.extend_from_slice(text.data());
        }
        let mut graph = Graph::new();
        let binding = self.store.bind_frozen(&mut graph);
        let r = graph.constant(Matrix::from_vec(n * k, d, reps_r)?);
        let m = graph.constant(Matrix::from_vec(n * k, d, reps_m)?);
        let t = graph.constant(candidates.clone());
        let out = self.heads.teacher_forward(&mut graph, &binding, t, r, m)?;
        let mut scores = Vec::with_capacity(n);
        let composed = graph.value(out.composed);
        for j in 0..n {
            let mut s = 0.0;
            for row in j * k..(j + 1) * k {
                s += cosine(composed.row(row), candidates.row(row));
            }
            scores.push(s / tau);
        }
        Ok(scores)
    }
}

/// Cosine similarity with the training epsilon on the norms.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt() + TRAIN_EPS;
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt() + TRAIN_EPS;
    dot / (na * nb)
}

/// Means of consecutive groups of `group` rows.
pub fn group_mean(m: &Matrix, group: usize) -> Matrix {
    let n = m.rows() / group;
    let mut out = Matrix::zeros(n, m.cols());
    for i in 0..n {
        let row = out.row_mut(i);
        for r in i * group..(i + 1) * group {
            for (o, v) in row.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= group as f64);
    }
    out
}
