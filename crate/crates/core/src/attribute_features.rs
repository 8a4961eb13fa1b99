//! Global and local attribute features and the orthogonality penalty.
//!
//! Global attributes come from `P` learnable condition masks applied
//! elementwise to the global feature. Local attributes come from `Q`
//! aggregators, each a 1x1 kernel scoring every projected token through a
//! sigmoid and pooling the tokens with those scores (an unnormalized weighted
//! sum). The banks are shared by reference images, modification texts and
//! target images so the `K = P + Q` rows stay aligned across all three.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, EncodedVars, Modality, RawInput};
use crate::error::{Error, Result};
use crate::params::{normal_matrix, Affine, Binding, ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    /// Number of global attributes `P`.
    pub global_attributes: usize,
    /// Number of local attributes `Q`.
    pub local_attributes: usize,
    /// Attribute feature width `D`.
    pub dim: usize,
}

impl AttributeConfig {
    /// Default split `P = Q / 2`.
    pub fn with_local(local_attributes: usize, dim: usize) -> Self {
        Self {
            global_attributes: local_attributes / 2,
            local_attributes,
            dim,
        }
    }

    pub fn k(&self) -> usize {
        self.global_attributes + self.local_attributes
    }

    pub fn validate(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(Error::Config("need at least one attribute (P + Q > 0)".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("attribute dim D must be positive".into()));
        }
        Ok(())
    }
}

/// `K x D` attribute features: `P` global rows followed by `Q` local rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeFeatureMatrix {
    matrix: Matrix,
    global_rows: usize,
}

impl AttributeFeatureMatrix {
    pub fn new(matrix: Matrix, global_rows: usize) -> Result<Self> {
        if global_rows > matrix.rows() {
            return Err(Error::InvalidInput(format!(
                "{global_rows} global rows in a {}-row matrix",
                matrix.rows()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::InvalidInput("attribute features must be finite".into()));
        }
        Ok(Self {
            matrix,
            global_rows,
        })
    }

    /// Wraps a matrix whose rows are all treated as one block.
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        Self::new(matrix, 0)
    }

    pub fn k(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn global_rows(&self) -> usize {
        self.global_rows
    }

    pub fn local_rows(&self) -> usize {
        self.matrix.rows() - self.global_rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.matrix.row(k)
    }

    /// Row mean (mean pooling over attributes).
    pub fn pooled(&self) -> Vec<f64> {
        let k = self.k() as f64;
        (0..self.dim())
            .map(|d| (0..self.k()).map(|r| self.matrix.get(r, d)).sum::<f64>() / k)
            .collect()
    }
}

/// Shared condition masks and token aggregators, plus the per-modality plumbing around them.
#[derive(Debug, Clone)]
pub struct AttributeExtractor {
    pub config: AttributeConfig,
    /// `P x D` condition masks.
    pub condition_masks: ParamId,
    /// Maps the backbone global width onto `D`; absent when they agree.
    pub pre_projection: Option<[Affine; 2]>,
    /// Token projections `D' -> D`, one per modality (image, text).
    pub token_projection: [Affine; 2],
    /// `D x Q` kernels and `1 x Q` biases of the aggregators.
    pub aggregators: Affine,
}

fn modality_slot(kind: Modality) -> usize {
    match kind {
        Modality::Image => 0,
        Modality::Text => 1,
    }
}

impl AttributeExtractor {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &AttributeConfig,
        backbone: &Backbone,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Head;
        let d = config.dim;
        let condition_masks = store.add(
            "attributes.condition_masks",
            g,
            normal_matrix(rng, config.global_attributes, d, 1.0, 0.1),
        );
        let gi = backbone.image.config.global_dim;
        let gt = backbone.text.config.global_dim;
        let pre_projection = if gi == d && gt == d {
            None
        } else {
            Some([
                Affine::register(store, rng, "attributes.pre_projection.image", g, gi, d),
                Affine::register(store, rng, "attributes.pre_projection.text", g, gt, d),
            ])
        };
        let token_projection = [
            Affine::register(
                store,
                rng,
                "attributes.token_projection.image",
                g,
                backbone.image.config.token_dim,
                d,
            ),
            Affine::register(
                store,
                rng,
                "attributes.token_projection.text",
                g,
                backbone.text.config.token_dim,
                d,
            ),
        ];
        let aggregators = Affine::register(
            store,
            rng,
            "attributes.aggregators",
            g,
            d,
            config.local_attributes,
        );
        Ok(Self {
            config: config.clone(),
            condition_masks,
            pre_projection,
            token_projection,
            aggregators,
        })
    }

    /// `B x D_raw -> (B*P) x D`
    pub fn global_forward(&self, graph: &mut Graph, binding: &Binding, kind: Modality, global: Var) -> Var {
        let projected = match &self.pre_projection {
            Some(p) => p[modality_slot(kind)].apply(graph, binding, global),
            None => global,
        };
        graph.mask_outer(projected, binding.var(self.condition_masks))
    }

    /// `(B*L) x D' -> (B*Q) x D`
    pub fn local_forward(
        &self,
        graph: &mut Graph,
        binding: &Binding,
        kind: Modality,
        tokens: Var,
        tokens_per_item: usize,
    ) -> Var {
        let projected = self.token_projection[modality_slot(kind)].apply(graph, binding, tokens);
        let logits = self.aggregators.apply(graph, binding, projected);
        let weights = graph.sigmoid(logits);
        graph.weighted_pool(weights, projected, tokens_per_item)
    }

    /// `(B*K) x D`, rows of item `b` in `b*K..(b+1)*K`.
    pub fn forward(&self, graph: &mut Graph, binding: &Binding, kind: Modality, enc: &EncodedVars) -> Var {
        let global = self.global_forward(graph, binding, kind, enc.global);
        let local = self.local_forward(graph, binding, kind, enc.tokens, enc.tokens_per_item);
        graph.interleave(
            global,
            self.config.global_attributes,
            local,
            self.config.local_attributes,
        )
    }

    /// Attribute matrix of a single raw input.
    pub fn extract(
        &self,
        input: &RawInput,
        backbone: &Backbone,
        store: &ParamStore,
    ) -> Result<AttributeFeatureMatrix> {
        let mut graph = Graph::new();
        let binding = store.bind_frozen(&mut graph);
        let enc = backbone.forward(&mut graph, &binding, input.kind, &[&input.payload])?;
        let e = self.forward(&mut graph, &binding, input.kind, &enc);
        AttributeFeatureMatrix::new(graph.value(e).clone(), self.config.global_attributes)
    }
}

/// Row `i` is `pre_projection(global) ⊙ masks[i]`.
pub fn extract_global_attributes(
    global: &[f64],
    masks: &Matrix,
    pre_projection: Option<(&Matrix, &Matrix)>,
) -> Result<Matrix> {
    let mut graph = Graph::new();
    let mut g = graph.constant(Matrix::row_vector(global));
    if let Some((w, b)) = pre_projection {
        if w.rows() != global.len() || b.shape() != (1, w.cols()) {
            return Err(Error::Config(format!(
                "pre-projection {:?} does not accept a {}-dim global feature",
                w.shape(),
                global.len()
            )));
        }
        let w = graph.constant(w.clone());
        let b = graph.constant(b.clone());
        let h = graph.matmul(g, w);
        g = graph.add_row_bias(h, b);
    }
    if graph.value(g).cols() != masks.cols() {
        return Err(Error::Config(format!(
            "condition masks have width {}, projected global feature has {}",
            masks.cols(),
            graph.value(g).cols()
        )));
    }
    let m = graph.constant(masks.clone());
    let out = graph.mask_outer(g, m);
    Ok(graph.value(out).clone())
}

/// Weighted pooling of projected tokens: row `j` is `Σ_l sigmoid(a_j · x̄_l + c_j) x̄_l`.
pub fn extract_local_attributes(
    tokens: &Matrix,
    projection: (&Matrix, &Matrix),
    aggregators: (&Matrix, &Matrix),
) -> Result<Matrix> {
    if tokens.rows() == 0 {
        return Err(Error::InvalidInput("token matrix has no tokens".into()));
    }
    let (pw, pb) = projection;
    let (aw, ab) = aggregators;
    if pw.rows() != tokens.cols() || pb.shape() != (1, pw.cols()) {
        return Err(Error::Config(format!(
            "token projection {:?} does not accept {}-dim tokens",
            pw.shape(),
            tokens.cols()
        )));
    }
    if aw.rows() != pw.cols() || ab.shape() != (1, aw.cols()) {
        return Err(Error::Config(format!(
            "aggregator bank {:?} does not match projected width {}",
            aw.shape(),
            pw.cols()
        )));
    }
    let mut graph = Graph::new();
    let x = graph.constant(tokens.clone());
    let (pw, pb, aw, ab) = (
        graph.constant(pw.clone()),
        graph.constant(pb.clone()),
        graph.constant(aw.clone()),
        graph.constant(ab.clone()),
    );
    let h = graph.matmul(x, pw);
    let projected = graph.add_row_bias(h, pb);
    let l = graph.matmul(projected, aw);
    let logits = graph.add_row_bias(l, ab);
    let weights = graph.sigmoid(logits);
    let out = graph.weighted_pool(weights, projected, tokens.rows());
    Ok(graph.value(out).clone())
}

/// `Σ ‖E Eᵀ - I‖_F²` over the reference, text and target matrices.
pub fn orthogonal_regularization(
    reference: &AttributeFeatureMatrix,
    text: &AttributeFeatureMatrix,
    target: &AttributeFeatureMatrix,
) -> Result<f64> {
    let shape = reference.matrix().shape();
    if text.matrix().shape() != shape || target.matrix().shape() != shape {
        return Err(Error::InvalidInput(
            "orthogonal regularization needs three matrices of equal shape".into(),
        ));
    }
    let mut graph = Graph::new();
    let mut total = 0.0;
    for e in [reference, text, target] {
        let v = graph.constant(e.matrix().clone());
        let p = graph.ortho_penalty(v, e.k());
        total += graph.scalar(p);
    }
    Ok(total)
}

/// Batched orthogonality penalty: mean over items, summed over the three elements.
pub fn orthogonal_regularization_batch(graph: &mut Graph, elements: [Var; 3], k: usize) -> Var {
    let parts: Vec<Var> = elements.iter().map(|&e| graph.ortho_penalty(e, k)).collect();
    let s = graph.add(parts[0], parts[1]);
    graph.add(s, parts[2])
}
