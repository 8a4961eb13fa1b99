//! Shared fixtures and independent scalar-loop reference implementations.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgcir::attribute_features::{AttributeConfig, AttributeFeatureMatrix};
use tgcir::backbone::{BackboneConfig, EncoderConfig};
use tgcir::config::ExperimentConfig;
use tgcir::data::{generate_world, sample_triplets, Triplet, World, WorldSpec};
use tgcir::model::ModelConfig;
use tgcir::params::Activation;
use tgcir::query_composition::CompositionConfig;
use tgcir::tensor::Matrix;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
}

pub fn rand_afm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> AttributeFeatureMatrix {
    AttributeFeatureMatrix::from_matrix(rand_matrix(rng, k, d)).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---- oracles ---------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

pub fn attr_sim(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += cos(&a[k], &b[k]);
    }
    s
}

pub fn rows(m: &AttributeFeatureMatrix) -> Vec<Vec<f64>> {
    (0..m.k()).map(|k| m.row(k).to_vec()).collect()
}

pub fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    let mut z = 0.0;
    for &x in xs {
        z += (x - m).exp();
    }
    xs.iter().map(|&x| (x - m).exp() / z).collect()
}

/// Mean over rows of `-ln softmax(row)[i]`.
pub fn cross_entropy_diag(logits: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        let mut m = f64::NEG_INFINITY;
        for &x in row {
            m = m.max(x);
        }
        let mut z = 0.0;
        for &x in row {
            z += (x - m).exp();
        }
        total += -(row[i] - m - z.ln());
    }
    total / logits.len() as f64
}

pub fn late_rank(composed: &[Vec<Vec<f64>>], targets: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let logits: Vec<Vec<f64>> = composed
        .iter()
        .map(|c| targets.iter().map(|t| attr_sim(c, t) / tau).collect())
        .collect();
    cross_entropy_diag(&logits)
}

pub fn early_rank(composed: &[Vec<f64>], targets: &[Vec<f64>], tau: f64) -> f64 {
    let logits: Vec<Vec<f64>> = composed
        .iter()
        .map(|c| targets.iter().map(|t| cos(c, t) / tau).collect())
        .collect();
    cross_entropy_diag(&logits)
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i] / q[i]).ln();
        }
    }
    s
}

pub fn ortho(rows: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            let g = dot(&rows[i], &rows[j]) - if i == j { 1.0 } else { 0.0 };
            s += g * g;
        }
    }
    s
}

/// Position of `target` after sorting by score descending, then index ascending.
pub fn sorted_position(scores: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == target).unwrap()
}

pub fn recall_oracle(scores: &[Vec<f64>], targets: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (s, &t) in scores.iter().zip(targets) {
        if sorted_position(s, t) < k {
            hits += 1;
        }
    }
    hits as f64 / targets.len() as f64
}

pub fn subset_recall_oracle(scores: &[Vec<f64>], targets: &[usize], subsets: &[Vec<usize>], k: usize) -> f64 {
    let mut hits = 0;
    for ((s, &t), sub) in scores.iter().zip(targets).zip(subsets) {
        let sub_scores: Vec<f64> = sub.iter().map(|&c| s[c]).collect();
        if let Some(pos) = sub.iter().position(|&c| c == t) {
            if sorted_position(&sub_scores, pos) < k {
                hits += 1;
            }
        }
    }
    hits as f64 / targets.len() as f64
}

// ---- fixtures -----------------------------------------------------------------

pub fn small_world(seed: u64) -> World {
    generate_world(&WorldSpec {
        num_attributes: 3,
        values_per_attribute: 3,
        noise_std: 0.05,
        render_seed: seed,
        gallery_size: 27,
        image_dim: 10,
    })
    .unwrap()
}

pub fn small_triplets(world: &World, n: usize, seed: u64) -> Vec<Triplet> {
    sample_triplets(world, n, 2, seed).unwrap()
}

/// Model with `B <= 4, K = 3, D = 8, L <= 5` for finite-difference checks.
pub fn tiny_model_config(image_dim: usize, text_dim: usize) -> ModelConfig {
    let enc = |input_dim, tokens| EncoderConfig {
        input_dim,
        hidden: 6,
        tokens,
        token_dim: 5,
        global_dim: 8,
        activation: Activation::Tanh,
    };
    ModelConfig {
        attributes: AttributeConfig {
            global_attributes: 1,
            local_attributes: 2,
            dim: 8,
        },
        backbone: BackboneConfig {
            image: enc(image_dim, 5),
            text: enc(text_dim, 3),
            freeze: false,
        },
        composition: CompositionConfig {
            hidden: Some(6),
            ..CompositionConfig::default()
        },
    }
}

/// A fast experiment: 27-image world, a few hundred triplets, small model.
pub fn quick_experiment() -> ExperimentConfig {
    ExperimentConfig::load(
        None,
        &[
            "world.num_attributes=3".into(),
            "world.values_per_attribute=3".into(),
            "world.gallery_size=27".into(),
            "world.image_dim=10".into(),
            "data.train_triplets=96".into(),
            "data.test_queries=40".into(),
            "model.backbone.image.hidden=16".into(),
            "model.backbone.image.tokens=3".into(),
            "model.backbone.image.token_dim=8".into(),
            "model.backbone.image.global_dim=8".into(),
            "model.backbone.text.hidden=16".into(),
            "model.backbone.text.tokens=2".into(),
            "model.backbone.text.token_dim=8".into(),
            "model.backbone.text.global_dim=8".into(),
            "model.attributes.global_attributes=2".into(),
            "model.attributes.local_attributes=4".into(),
            "model.attributes.dim=8".into(),
            "train.batch_size=16".into(),
            "train.epochs=3".into(),
            "train.decay_epochs=[2]".into(),
        ],
    )
    .unwrap()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Relative error, measured against unit scale when the reference is below 1 in magnitude.
pub fn scaled_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

// ---- gradient checks ------------------------------------------------------------

use tgcir::attribute_features::orthogonal_regularization_batch;
use tgcir::autograd::{numeric_gradient, relative_error, Graph, Var};
use tgcir::data::TripletBatch;
use tgcir::metric_learning::{
    early_fusion_logits, kl_loss, late_fusion_logits, rank_loss, softmax_rows, LossWeights, TRAIN_EPS,
};
use tgcir::model::TgCir;
use tgcir::query_composition::{distillation, mask_regularization};

/// Largest relative error between backprop and central differences over all inputs.
pub fn fd_error(inputs: &[Matrix], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| graph.variable(m.clone())).collect();
    let out = f(&mut graph, &vars);
    let grads = graph.backward(out);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_gradient(x, 1e-5, |xi| {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, m)| g.constant(if j == i { xi.clone() } else { m.clone() }))
                .collect();
            let o = f(&mut g, &vs);
            g.scalar(o)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn unit_interval(rng: &mut ChaCha8Rng, r: usize) -> Matrix {
    Matrix::from_fn(r, 1, |_, _| rng.random_range(0.05..0.95))
}

/// `(term, worst relative error)` for every loss term over several random
/// instances with `B <= 4, K <= 3, D <= 8`.
pub fn loss_term_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = vec![
        ("rank_tea", 0.0f64),
        ("rank_stu", 0.0),
        ("mask_tea", 0.0),
        ("ortho", 0.0),
        ("ckd", 0.0),
        ("kl", 0.0),
    ];
    for _ in 0..5 {
        let (b, k, d) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(2..=8));
        let tau = rng.random_range(0.1..1.0);
        let c = rand_matrix(&mut rng, b * k, d);
        let t = rand_matrix(&mut rng, b * k, d);
        let m = rand_matrix(&mut rng, b * k, d);
        let errs = [
            fd_error(&[c.clone(), t.clone()], |g, v| {
                let l = late_fusion_logits(g, v[0], v[1], k, tau, TRAIN_EPS);
                rank_loss(g, l)
            }),
            fd_error(&[c.clone(), t.clone()], |g, v| {
                let q = g.group_mean_rows(v[0], k);
                let p = g.group_mean_rows(v[1], k);
                let l = early_fusion_logits(g, q, p, tau, TRAIN_EPS);
                rank_loss(g, l)
            }),
            fd_error(&[unit_interval(&mut rng, b * k), unit_interval(&mut rng, b * k)], |g, v| {
                mask_regularization(g, v[0], v[1])
            }),
            fd_error(&[c.clone(), m.clone(), t.clone()], |g, v| {
                orthogonal_regularization_batch(g, [v[0], v[1], v[2]], k)
            }),
            fd_error(
                &[
                    unit_interval(&mut rng, b * k),
                    unit_interval(&mut rng, b * k),
                    unit_interval(&mut rng, b * k),
                    unit_interval(&mut rng, b * k),
                ],
                |g, v| distillation(g, (v[0], v[1]), (v[2], v[3]), false),
            ),
            {
                let mut g = Graph::new();
                let tv = g.constant(t.clone());
                let tl = late_fusion_logits(&mut g, tv, tv, k, tau, TRAIN_EPS);
                let probs = softmax_rows(g.value(tl));
                fd_error(&[c.clone(), t.clone()], |g, v| {
                    let q = g.group_mean_rows(v[0], k);
                    let p = g.group_mean_rows(v[1], k);
                    let l = early_fusion_logits(g, q, p, tau, TRAIN_EPS);
                    kl_loss(g, &probs, l)
                })
            },
        ];
        for (slot, e) in worst.iter_mut().zip(errs) {
            slot.1 = slot.1.max(e);
        }
    }
    worst
}

/// Backprop vs central differences of the model's total objective with
/// respect to sampled entries of every parameter. Distillation runs without
/// stop-gradient and the KL weight is zero, since both otherwise block paths
/// by design that finite differences would see.
pub fn model_gradient_error(seed: u64) -> f64 {
    let world = small_world(seed);
    let ts = small_triplets(&world, 4, seed + 1);
    let batch = TripletBatch::assemble(&world.gallery, &ts).unwrap();
    let mut cfg = tiny_model_config(world.spec.image_dim, world.text_dim());
    cfg.composition.stop_gradient_distillation = false;
    let mut model = TgCir::new(&cfg, seed).unwrap();
    // Move the zero-initialized head outputs off zero so every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        if model.store.param(id).name.starts_with("composition") {
            for v in model.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let w = LossWeights {
        kappa: 0.0,
        ..LossWeights::fashion_iq()
    };
    let tau = 0.5;
    let out = model.batch_loss(&batch, tau, &w).unwrap();
    let mut worst: f64 = 0.0;
    for (&id, grad) in ids.iter().zip(&out.grads) {
        let grad = grad.clone().unwrap();
        let n = grad.len();
        let picks: Vec<usize> = (0..n.min(4)).map(|_| rng.random_range(0..n)).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &p in &picks {
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.store.get_mut(id).data_mut()[p] += delta;
                m.batch_loss(&batch, tau, &w).unwrap().breakdown.total
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(grad.data()[p]);
        }
        let a = Matrix::from_vec(1, picks.len(), analytic).unwrap();
        let nm = Matrix::from_vec(1, picks.len(), numeric).unwrap();
        worst = worst.max(relative_error(&a, &nm));
    }
    worst
}
