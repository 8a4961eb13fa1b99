//! Keep-and-replace composition of reference and text attribute features.
//!
//! The student branch predicts a keep mask from `[E_r, E_m]` and uses its
//! complement as the replace mask. The teacher branch sees the target and
//! predicts the two masks independently from `[E_t, E_r]` and `[E_t, E_m]`.
//! Every head is a per-row MLP `2D -> H -> 1`, so mask entry `k` is computed
//! from attribute row `k` alone and broadcast over that row's `D` columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribute_features::AttributeFeatureMatrix;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Activation, Affine, Binding, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionConfig {
    /// Hidden width of the mask MLPs; defaults to the attribute width `D`.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Treat teacher masks as constants inside the distillation term.
    #[serde(default = "default_true")]
    pub stop_gradient_distillation: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            activation: Activation::Tanh,
            stop_gradient_distillation: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub keep: Vec<f64>,
    pub replace: Vec<f64>,
    pub branch: Branch,
}

impl MaskPair {
    pub fn new(keep: Vec<f64>, replace: Vec<f64>, branch: Branch) -> Result<Self> {
        if keep.len() != replace.len() {
            return Err(Error::InvalidInput(format!(
                "keep mask has {} entries, replace mask {}",
                keep.len(),
                replace.len()
            )));
        }
        if keep.iter().chain(&replace).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self {
            keep,
            replace,
            branch,
        })
    }

    pub fn k(&self) -> usize {
        self.keep.len()
    }
}

/// Per-row mask head.
#[derive(Debug, Clone, Copy)]
pub struct MaskHead {
    pub hidden: Affine,
    pub out: Affine,
    pub activation: Activation,
}

impl MaskHead {
    fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            hidden: Affine::register(store, rng, &format!("{name}.hidden"), g, 2 * dim, hidden),
            // Zero output layer: every mask starts at exactly 0.5.
            out: Affine::register_zero(store, &format!("{name}.out"), g, hidden, 1),
            activation,
        }
    }

    /// `(N x D, N x D) -> N x 1` logits.
    pub fn logits(&self, graph: &mut Graph, binding: &Binding, first: Var, second: Var) -> Var {
        let x = graph.concat_cols(first, second);
        let h = self.hidden.apply(graph, binding, x);
        let h = self.activation.apply(graph, h);
        self.out.apply(graph, binding, h)
    }

    pub fn mask(&self, graph: &mut Graph, binding: &Binding, first: Var, second: Var) -> Var {
        let l = self.logits(graph, binding, first, second);
        graph.sigmoid(l)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherHeads {
    pub keep: MaskHead,
    pub replace: MaskHead,
}

#[derive(Debug, Clone)]
pub struct CompositionHeads {
    pub config: CompositionConfig,
    pub student: MaskHead,
    /// Absent when a checkpoint was stripped down to the deployable student path.
    pub teacher: Option<TeacherHeads>,
}

/// Graph handles for one composed batch: masks are `(B*K) x 1`, features `(B*K) x D`.
#[derive(Debug, Clone, Copy)]
pub struct ComposedVars {
    pub keep: Var,
    pub replace: Var,
    pub composed: Var,
}

pub const STUDENT_PREFIX: &str = "composition.student";
pub const TEACHER_PREFIX: &str = "composition.teacher";

impl CompositionHeads {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        config: &CompositionConfig,
        dim: usize,
    ) -> Result<Self> {
        let hidden = config.hidden.unwrap_or(dim);
        if hidden == 0 {
            return Err(Error::Config("composition hidden width must be positive".into()));
        }
        let a = config.activation;
        let student = MaskHead::register(store, rng, STUDENT_PREFIX, dim, hidden, a);
        let teacher = TeacherHeads {
            keep: MaskHead::register(store, rng, &format!("{TEACHER_PREFIX}_keep"), dim, hidden, a),
            replace: MaskHead::register(store, rng, &format!("{TEACHER_PREFIX}_replace"), dim, hidden, a),
        };
        Ok(Self {
            config: config.clone(),
            student,
            teacher: Some(teacher),
        })
    }

    pub fn teacher(&self) -> Result<&TeacherHeads> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::Config("teacher heads are not loaded (student-only checkpoint)".into()))
    }

    pub fn student_forward(&self, graph: &mut Graph, binding: &Binding, reference: Var, text: Var) -> ComposedVars {
        let keep = self.student.mask(graph, binding, reference, text);
        let replace = graph.one_minus(keep);
        let composed = blend(graph, reference, text, keep, replace);
        ComposedVars {
            keep,
            replace,
            composed,
        }
    }

    pub fn teacher_forward(
        &self,
        graph: &mut Graph,
        binding: &Binding,
        target: Var,
        reference: Var,
        text: Var,
    ) -> Result<ComposedVars> {
        let t = self.teacher()?;
        let keep = t.keep.mask(graph, binding, target, reference);
        let replace = t.replace.mask(graph, binding, target, text);
        let composed = blend(graph, reference, text, keep, replace);
        Ok(ComposedVars {
            keep,
            replace,
            composed,
        })
    }

    /// Student composition of one query.
    pub fn student_compose(
        &self,
        store: &ParamStore,
        reference: &AttributeFeatureMatrix,
        text: &AttributeFeatureMatrix,
    ) -> Result<(MaskPair, AttributeFeatureMatrix)> {
        check_shapes(&[reference, text])?;
        let mut graph = Graph::new();
        let binding = store.bind_frozen(&mut graph);
        let r = graph.constant(reference.matrix().clone());
        let m = graph.constant(text.matrix().clone());
        let out = self.student_forward(&mut graph, &binding, r, m);
        finish(&graph, out, Branch::Student, reference.global_rows())
    }

    /// Teacher composition of one query given its target.
    pub fn teacher_compose(
        &self,
        store: &ParamStore,
        target: &AttributeFeatureMatrix,
        reference: &AttributeFeatureMatrix,
        text: &AttributeFeatureMatrix,
    ) -> Result<(MaskPair, AttributeFeatureMatrix)> {
        check_shapes(&[target, reference, text])?;
        let mut graph = Graph::new();
        let binding = store.bind_frozen(&mut graph);
        let t = graph.constant(target.matrix().clone());
        let r = graph.constant(reference.matrix().clone());
        let m = graph.constant(text.matrix().clone());
        let out = self.teacher_forward(&mut graph, &binding, t, r, m)?;
        finish(&graph, out, Branch::Teacher, reference.global_rows())
    }
}

/// `keep ⊙ reference + replace ⊙ text`, masks broadcast along each row.
pub fn blend(graph: &mut Graph, reference: Var, text: Var, keep: Var, replace: Var) -> Var {
    let a = graph.scale_rows(reference, keep);
    let b = graph.scale_rows(text, replace);
    graph.add(a, b)
}

fn check_shapes(ms: &[&AttributeFeatureMatrix]) -> Result<()> {
    let shape = ms[0].matrix().shape();
    if ms.iter().any(|m| m.matrix().shape() != shape) {
        return Err(Error::InvalidInput(
            "attribute matrices must share K and D".into(),
        ));
    }
    Ok(())
}

fn finish(
    graph: &Graph,
    out: ComposedVars,
    branch: Branch,
    global_rows: usize,
) -> Result<(MaskPair, AttributeFeatureMatrix)> {
    let keep = graph.value(out.keep).data().to_vec();
    let replace = graph.value(out.replace).data().to_vec();
    let composed = AttributeFeatureMatrix::new(graph.value(out.composed).clone(), global_rows)?;
    Ok((MaskPair::new(keep, replace, branch)?, composed))
}

/// Teacher-side complement penalty: mean of `(replace - (1 - keep))²`.
pub fn teacher_mask_regularization(mask: &MaskPair) -> Result<f64> {
    if mask.branch != Branch::Teacher {
        return Err(Error::InvalidInput("mask regularization applies to teacher masks".into()));
    }
    let mut graph = Graph::new();
    let keep = graph.constant(column(&mask.keep));
    let replace = graph.constant(column(&mask.replace));
    let v = mask_regularization(&mut graph, keep, replace);
    Ok(graph.scalar(v))
}

/// Distillation term: MSE between keep masks plus MSE between replace masks.
pub fn composition_distillation_loss(student: &MaskPair, teacher: &MaskPair) -> Result<f64> {
    if student.branch != Branch::Student || teacher.branch != Branch::Teacher {
        return Err(Error::InvalidInput(
            "distillation expects a student mask pair and a teacher mask pair".into(),
        ));
    }
    if student.k() != teacher.k() {
        return Err(Error::InvalidInput(format!(
            "student has {} attributes, teacher {}",
            student.k(),
            teacher.k()
        )));
    }
    let mut graph = Graph::new();
    let sk = graph.constant(column(&student.keep));
    let sr = graph.constant(column(&student.replace));
    let tk = graph.constant(column(&teacher.keep));
    let tr = graph.constant(column(&teacher.replace));
    let v = distillation(&mut graph, (sk, sr), (tk, tr), true);
    Ok(graph.scalar(v))
}

/// Graph form of [`teacher_mask_regularization`] over any number of rows.
pub fn mask_regularization(graph: &mut Graph, keep: Var, replace: Var) -> Var {
    let complement = graph.one_minus(keep);
    graph.mean_squared_diff(replace, complement)
}

/// Graph form of [`composition_distillation_loss`].
pub fn distillation(graph: &mut Graph, student: (Var, Var), teacher: (Var, Var), stop_gradient: bool) -> Var {
    let (tk, tr) = if stop_gradient {
        (graph.detach(teacher.0), graph.detach(teacher.1))
    } else {
        teacher
    };
    let a = graph.mean_squared_diff(student.0, tk);
    let b = graph.mean_squared_diff(student.1, tr);
    graph.add(a, b)
}

fn column(v: &[f64]) -> crate::tensor::Matrix {
    crate::tensor::Matrix::from_vec(v.len(), 1, v.to_vec()).expect("column shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{numeric_gradient, relative_error};
    use crate::tensor::{sigmoid, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const K: usize = 3;
    const D: usize = 4;

    fn setup(seed: u64) -> (CompositionHeads, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let heads = CompositionHeads::register(&mut store, &mut rng, &CompositionConfig::default(), D).unwrap();
        (heads, store, rng)
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (r, c) = store.get(id).shape();
            store
                .assign(id, Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)))
                .unwrap();
        }
    }

    fn rand_afm(rng: &mut ChaCha8Rng) -> AttributeFeatureMatrix {
        AttributeFeatureMatrix::from_matrix(Matrix::from_fn(K, D, |_, _| rng.random_range(-2.0..2.0))).unwrap()
    }

    fn set_output_bias(store: &mut ParamStore, head: &MaskHead, v: f64) {
        let (r, c) = store.get(head.out.weight).shape();
        store.assign(head.out.weight, Matrix::zeros(r, c)).unwrap();
        store.assign(head.out.bias, Matrix::scalar(v)).unwrap();
    }

    #[test]
    fn initial_student_masks_are_neutral() {
        let (heads, store, mut rng) = setup(1);
        let (er, em) = (rand_afm(&mut rng), rand_afm(&mut rng));
        let (mask, composed) = heads.student_compose(&store, &er, &em).unwrap();
        assert!(mask.keep.iter().all(|&v| v == 0.5));
        for k in 0..K {
            for d in 0..D {
                let mid = (er.matrix().get(k, d) + em.matrix().get(k, d)) / 2.0;
                assert!((composed.matrix().get(k, d) - mid).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn student_composition_matches_double_loop() {
        let (heads, mut store, mut rng) = setup(2);
        randomize(&mut store, &mut rng);
        for _ in 0..20 {
            let (er, em, et) = (rand_afm(&mut rng), rand_afm(&mut rng), rand_afm(&mut rng));
            let (mask, composed) = heads.student_compose(&store, &er, &em).unwrap();
            for k in 0..K {
                assert_eq!(mask.replace[k], 1.0 - mask.keep[k]);
                for d in 0..D {
                    let (a, b) = (er.matrix().get(k, d), em.matrix().get(k, d));
                    let expect = mask.keep[k] * a + (1.0 - mask.keep[k]) * b;
                    let got = composed.matrix().get(k, d);
                    assert!((got - expect).abs() < 1e-12);
                    assert!(got >= a.min(b) - 1e-12 && got <= a.max(b) + 1e-12);
                }
            }
            // Equal inputs compose to themselves.
            let (_, same) = heads.student_compose(&store, &er, &er).unwrap();
            for (x, y) in same.matrix().data().iter().zip(er.matrix().data()) {
                assert!((x - y).abs() < 1e-12);
            }
            // No data path from the target into the student branch.
            let _ = heads.teacher_compose(&store, &et, &er, &em).unwrap();
            let (mask2, composed2) = heads.student_compose(&store, &er, &em).unwrap();
            assert_eq!(mask, mask2);
            assert_eq!(composed, composed2);
        }
    }

    #[test]
    fn teacher_composition_cases() {
        let (heads, mut store, mut rng) = setup(3);
        randomize(&mut store, &mut rng);
        let t = heads.teacher.unwrap();
        let (et, er, em) = (rand_afm(&mut rng), rand_afm(&mut rng), rand_afm(&mut rng));

        for _ in 0..10 {
            let (mask, composed) = heads.teacher_compose(&store, &et, &er, &em).unwrap();
            for k in 0..K {
                for d in 0..D {
                    let expect = mask.keep[k] * er.matrix().get(k, d) + mask.replace[k] * em.matrix().get(k, d);
                    assert!((composed.matrix().get(k, d) - expect).abs() < 1e-12);
                }
            }
        }

        set_output_bias(&mut store, &t.keep, -20.0);
        set_output_bias(&mut store, &t.replace, -20.0);
        let (mask, composed) = heads.teacher_compose(&store, &et, &er, &em).unwrap();
        assert!(mask.keep.iter().all(|&v| (v - sigmoid(-20.0)).abs() < 1e-18));
        assert!(composed.matrix().data().iter().all(|v| v.abs() < 1e-3));

        set_output_bias(&mut store, &t.keep, 30.0);
        let (_, composed) = heads.teacher_compose(&store, &et, &er, &em).unwrap();
        for (x, y) in composed.matrix().data().iter().zip(er.matrix().data()) {
            assert!((x - y).abs() < 1e-6);
        }

        let bad = AttributeFeatureMatrix::from_matrix(Matrix::zeros(K, D + 1)).unwrap();
        assert!(matches!(heads.teacher_compose(&store, &bad, &er, &em), Err(Error::InvalidInput(_))));
        assert!(matches!(heads.student_compose(&store, &er, &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mask_losses_forced_values() {
        let keep = vec![0.2, 0.7, 0.9];
        let comp: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let t = MaskPair::new(keep.clone(), comp.clone(), Branch::Teacher).unwrap();
        assert_eq!(teacher_mask_regularization(&t).unwrap(), 0.0);
        let ones = MaskPair::new(vec![1.0; 3], vec![1.0; 3], Branch::Teacher).unwrap();
        assert_eq!(teacher_mask_regularization(&ones).unwrap(), 1.0);

        let s = MaskPair::new(keep, comp, Branch::Student).unwrap();
        assert_eq!(composition_distillation_loss(&s, &t).unwrap(), 0.0);

        let s = MaskPair::new(vec![0.0; 4], vec![1.0; 4], Branch::Student).unwrap();
        let t = MaskPair::new(vec![1.0; 4], vec![0.0; 4], Branch::Teacher).unwrap();
        assert_eq!(composition_distillation_loss(&s, &t).unwrap(), 2.0);

        assert!(teacher_mask_regularization(&s).is_err());
        assert!(composition_distillation_loss(&t, &s).is_err());
        assert!(MaskPair::new(vec![1.5], vec![0.0], Branch::Student).is_err());
    }

    #[test]
    fn mask_losses_match_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let mut r = || (0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();
            let (sk, tk, tr) = (r(), r(), r());
            let sr: Vec<f64> = sk.iter().map(|v| 1.0 - v).collect();
            let s = MaskPair::new(sk.clone(), sr.clone(), Branch::Student).unwrap();
            let t = MaskPair::new(tk.clone(), tr.clone(), Branch::Teacher).unwrap();
            let mut reg = 0.0;
            let mut ckd_k = 0.0;
            let mut ckd_r = 0.0;
            for i in 0..n {
                reg += (tr[i] - (1.0 - tk[i])).powi(2);
                ckd_k += (tk[i] - sk[i]).powi(2);
                ckd_r += (tr[i] - sr[i]).powi(2);
            }
            let nf = n as f64;
            let got = teacher_mask_regularization(&t).unwrap();
            assert!((got - reg / nf).abs() <= 1e-12 * (reg / nf).max(1e-300));
            let got = composition_distillation_loss(&s, &t).unwrap();
            let expect = ckd_k / nf + ckd_r / nf;
            assert!((got - expect).abs() <= 1e-12 * expect.max(1e-300));
        }
    }

    #[test]
    fn distillation_gradient_reaches_student_only() {
        let mut g = Graph::new();
        let sk = g.variable(column(&[0.2, 0.6]));
        let sr = g.one_minus(sk);
        let tk = g.variable(column(&[0.9, 0.1]));
        let tr = g.variable(column(&[0.3, 0.5]));
        let loss = distillation(&mut g, (sk, sr), (tk, tr), true);
        let grads = g.backward(loss);
        assert!(grads.get(tk).is_none() && grads.get(tr).is_none());
        assert!(grads.get(sk).is_some());
    }

    #[test]
    fn composition_loss_gradients_match_finite_differences() {
        let (heads, mut store, mut rng) = setup(5);
        randomize(&mut store, &mut rng);
        let (et, er, em) = (rand_afm(&mut rng), rand_afm(&mut rng), rand_afm(&mut rng));
        let objective = |store: &ParamStore, track: bool| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, |_| track);
            let t = g.constant(et.matrix().clone());
            let r = g.constant(er.matrix().clone());
            let m = g.constant(em.matrix().clone());
            let s = heads.student_forward(&mut g, &b, r, m);
            let te = heads.teacher_forward(&mut g, &b, t, r, m).unwrap();
            let reg = mask_regularization(&mut g, te.keep, te.replace);
            // Finite differences see the teacher through every path, so no stop-gradient here.
            let ckd = distillation(&mut g, (s.keep, s.replace), (te.keep, te.replace), false);
            let sq = g.mul(s.composed, te.composed);
            let feat = g.mean(sq);
            let a = g.add(reg, ckd);
            let total = g.add(a, feat);
            let mut grads = g.backward(total);
            (g.scalar(total), b.collect(&mut grads))
        };
        let (_, analytic) = objective(&store, true);
        let th = heads.teacher.unwrap();
        for id in [heads.student.hidden.weight, heads.student.out.weight, th.keep.hidden.weight, th.replace.out.bias] {
            let numeric = numeric_gradient(store.get(id), 1e-6, |m| {
                let mut s = store.clone();
                s.assign(id, m.clone()).unwrap();
                objective(&s, false).0
            });
            let err = relative_error(analytic[id.index()].as_ref().unwrap(), &numeric);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn student_distillation_overfits_frozen_teacher() {
        // Teacher masks fixed; only the student head is trained on one batch.
        let (heads, mut store, mut rng) = setup(6);
        randomize(&mut store, &mut rng);
        let rows = 8 * K;
        let er = Matrix::from_fn(rows, D, |_, _| rng.random_range(-1.0..1.0));
        let em = Matrix::from_fn(rows, D, |_, _| rng.random_range(-1.0..1.0));
        let target_keep = Matrix::from_fn(rows, 1, |_, _| rng.random_range(0.05..0.95));
        let target_replace = target_keep.map(|v| 1.0 - v);
        let student_ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with(STUDENT_PREFIX))
            .map(|(id, _)| id)
            .collect();
        let mut opt = crate::optim::AdamW::new(&store, crate::optim::AdamWConfig::default());
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut g = Graph::new();
            let b = store.bind(&mut g, |p| p.name.starts_with(STUDENT_PREFIX));
            let r = g.constant(er.clone());
            let m = g.constant(em.clone());
            let s = heads.student_forward(&mut g, &b, r, m);
            let tk = g.constant(target_keep.clone());
            let tr = g.constant(target_replace.clone());
            let loss = distillation(&mut g, (s.keep, s.replace), (tk, tr), true);
            last = g.scalar(loss);
            let mut grads = g.backward(loss);
            let grads = b.collect(&mut grads);
            for (i, gr) in grads.iter().enumerate() {
                assert_eq!(gr.is_some(), student_ids.iter().any(|id| id.index() == i));
            }
            opt.step(&mut store, &grads, |_| 0.05);
        }
        assert!(last < 1e-3, "distillation loss after 200 steps: {last}");
    }
}
