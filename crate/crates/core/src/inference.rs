//! Prototype-based predictors and per-stage evaluation.
//!
//! The two-step predictor ranks classes by raw-prototype similarity, keeps
//! the top `K`, runs the input once through the adapter of every task that
//! appears among them, and picks the class whose augmented prototype is
//! closest to the representation from that class's own task adapter.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{extract, Adapter, AdapterRegistry, Backbone};
use crate::numerics::{argmax, cosine_sim, topk_indices};
use crate::prototypes::{DualPrototypeStore, PrototypeMap};

/// Output of a predictor for one input, before it is scored against a label.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Candidate classes, best first. Always contains `predicted`.
    pub topk_labels: Vec<usize>,
    pub predicted: usize,
    /// Adapted forward passes spent on this input.
    pub adapter_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: usize,
    pub topk_labels: Vec<usize>,
    pub predicted: usize,
    pub true_label: usize,
    pub topk_hit: bool,
}

impl Prediction {
    pub fn new(sample_id: usize, true_label: usize, d: Decision) -> Self {
        Self {
            sample_id,
            topk_hit: d.topk_labels.contains(&true_label),
            topk_labels: d.topk_labels,
            predicted: d.predicted,
            true_label,
        }
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.true_label
    }

    /// The top-K oracle: credited whenever the label is among the candidates.
    pub fn into_oracle(mut self) -> Self {
        if self.topk_hit {
            self.predicted = self.true_label;
        }
        self
    }
}

/// Anything that can label a single input.
pub trait Predictor: Sync {
    fn decide(&self, x: &[f64]) -> Result<Decision>;
}

/// Cosine similarity of `rep` to every prototype, in ascending class order.
pub fn similarities(rep: &[f64], prototypes: &PrototypeMap) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut classes = Vec::with_capacity(prototypes.len());
    let mut scores = Vec::with_capacity(prototypes.len());
    for (&c, p) in prototypes {
        classes.push(c);
        scores.push(cosine_sim(rep, p)?);
    }
    Ok((classes, scores))
}

fn require_nonempty(store: &DualPrototypeStore) -> Result<()> {
    if store.is_empty() {
        return Err(Error::EmptyDataset("prototype store"));
    }
    Ok(())
}

/// Nearest raw prototype by cosine similarity; ties go to the lowest id.
pub fn ncm_predict(store: &DualPrototypeStore, backbone: &Backbone, x: &[f64]) -> Result<usize> {
    require_nonempty(store)?;
    let rep = extract(backbone, x, None)?;
    let (classes, scores) = similarities(&rep, store.raw())?;
    Ok(classes[argmax(&scores).expect("nonempty")])
}

/// The `min(k, N)` classes with the most similar raw prototypes.
pub fn topk_predict(
    store: &DualPrototypeStore,
    backbone: &Backbone,
    x: &[f64],
    k: usize,
) -> Result<Vec<usize>> {
    require_nonempty(store)?;
    let rep = extract(backbone, x, None)?;
    topk_from_rep(&rep, store.raw(), k)
}

fn topk_from_rep(rep: &[f64], prototypes: &PrototypeMap, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    let (classes, scores) = similarities(rep, prototypes)?;
    let k_eff = k.min(classes.len());
    Ok(topk_indices(&scores, k_eff)?
        .into_iter()
        .map(|i| classes[i])
        .collect())
}

/// Two-step prediction: raw top-K, then the nearest augmented prototype
/// under each candidate's own task adapter.
pub fn dpta_predict(
    store: &DualPrototypeStore,
    backbone: &Backbone,
    registry: &AdapterRegistry,
    x: &[f64],
    k: usize,
) -> Result<Decision> {
    let topk = topk_predict(store, backbone, x, k)?;
    let mut adapted: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &c in &topk {
        let t = store.task_of_class(c).ok_or(Error::UnseenClass(c))?;
        if let std::collections::btree_map::Entry::Vacant(slot) = adapted.entry(t) {
            slot.insert(extract(backbone, x, Some(registry.get(t)?))?);
        }
    }
    // Score candidates in ascending class order so argmax ties pick the
    // lowest id, independent of the top-K ranking order.
    let mut candidates = topk.clone();
    candidates.sort_unstable();
    let scores = candidates
        .iter()
        .map(|c| {
            let t = store.task_of()[c];
            cosine_sim(&adapted[&t], &store.aug()[c])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Decision {
        predicted: candidates[argmax(&scores).expect("nonempty")],
        topk_labels: topk,
        adapter_calls: adapted.len(),
    })
}

/// The two-step predictor bound to its state.
pub struct DptaPredictor<'a> {
    pub store: &'a DualPrototypeStore,
    pub backbone: &'a Backbone,
    pub registry: &'a AdapterRegistry,
    pub k: usize,
}

impl Predictor for DptaPredictor<'_> {
    fn decide(&self, x: &[f64]) -> Result<Decision> {
        dpta_predict(self.store, self.backbone, self.registry, x, self.k)
    }
}

/// Single-prototype-set NCM, optionally through a fixed adapter. The top-K
/// list is ranked on the same similarities as the prediction.
pub struct NcmPredictor<'a> {
    pub prototypes: &'a PrototypeMap,
    pub backbone: &'a Backbone,
    pub adapter: Option<&'a Adapter>,
    pub k: usize,
}

impl Predictor for NcmPredictor<'_> {
    fn decide(&self, x: &[f64]) -> Result<Decision> {
        if self.prototypes.is_empty() {
            return Err(Error::EmptyDataset("prototype set"));
        }
        let rep = extract(self.backbone, x, self.adapter)?;
        let topk = topk_from_rep(&rep, self.prototypes, self.k)?;
        Ok(Decision {
            predicted: topk[0],
            topk_labels: topk,
            adapter_calls: usize::from(self.adapter.is_some()),
        })
    }
}

/// Metrics of one evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: usize,
    pub total: usize,
    pub topk_hits: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub topk_accuracy: f64,
    /// Accuracy among top-K hits; 1 when there are none.
    pub conditional_accuracy: f64,
    /// Accuracy restricted to test samples of each task's classes.
    pub per_task_accuracy: BTreeMap<usize, f64>,
}

impl StageEval {
    pub fn from_predictions(
        stage: usize,
        predictions: &[Prediction],
        task_of: &BTreeMap<usize, usize>,
    ) -> Result<Self> {
        let total = predictions.len();
        if total == 0 {
            return Err(Error::EmptyDataset("stage test set"));
        }
        let mut hits = 0;
        let mut correct = 0;
        let mut per_task: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for p in predictions {
            if !p.topk_labels.contains(&p.predicted) {
                return Err(Error::Invariant(format!(
                    "sample {}: prediction {} outside its top-K set",
                    p.sample_id, p.predicted
                )));
            }
            let t = *task_of.get(&p.true_label).ok_or(Error::UnseenClass(p.true_label))?;
            let e = per_task.entry(t).or_default();
            e.1 += 1;
            if p.topk_hit {
                hits += 1;
            }
            if p.correct() {
                correct += 1;
                e.0 += 1;
            }
        }
        let eval = Self {
            stage,
            total,
            topk_hits: hits,
            correct,
            accuracy: correct as f64 / total as f64,
            topk_accuracy: hits as f64 / total as f64,
            conditional_accuracy: if hits == 0 {
                1.0
            } else {
                correct as f64 / hits as f64
            },
            per_task_accuracy: per_task
                .into_iter()
                .map(|(t, (c, n))| (t, c as f64 / n as f64))
                .collect(),
        };
        eval.check_decomposition()?;
        Ok(eval)
    }

    /// `accuracy = topk_accuracy * conditional_accuracy` in integer
    /// arithmetic, and `accuracy <= topk_accuracy`.
    pub fn check_decomposition(&self) -> Result<()> {
        let (n, h, c) = (self.total as u128, self.topk_hits as u128, self.correct as u128);
        let containment = c <= h;
        // c/n == (h/n) * (c/h)  <=>  c * n * h == h * c * n when h > 0;
        // with h == 0 the conditional term is 1 by convention, so c must be 0.
        let identity = if h == 0 { c == 0 } else { c * n * h == h * c * n };
        let floats = self.accuracy == c as f64 / n as f64
            && self.topk_accuracy == h as f64 / n as f64
            && self.conditional_accuracy == if h == 0 { 1.0 } else { c as f64 / h as f64 };
        if containment && identity && floats {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "stage {}: decomposition broken (correct {c}, hits {h}, total {n})",
                self.stage
            )))
        }
    }
}

/// Runs `predictor` over `test` (in parallel, results in row order).
/// Sample ids are `id_offset + row`.
pub fn predict_all(
    predictor: &dyn Predictor,
    test: &LabeledDataset,
    id_offset: usize,
) -> Result<Vec<Prediction>> {
    (0..test.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = test.sample(i);
            Ok(Prediction::new(id_offset + i, y, predictor.decide(x)?))
        })
        .collect()
}

/// DPTA evaluation of stage `stage` on its cumulative test set.
pub fn evaluate_stage(
    store: &DualPrototypeStore,
    backbone: &Backbone,
    registry: &AdapterRegistry,
    test: &LabeledDataset,
    k: usize,
    stage: usize,
) -> Result<StageEval> {
    if let Some(&c) = test.class_set().iter().find(|c| store.task_of_class(**c).is_none()) {
        return Err(Error::UnseenClass(c));
    }
    let predictor = DptaPredictor {
        store,
        backbone,
        registry,
        k,
    };
    let preds = predict_all(&predictor, test, 0)?;
    StageEval::from_predictions(stage, &preds, store.task_of())
}

/// Mean cosine similarities behind the off-task and wrong-adapter
/// separation claims, for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSeparation {
    pub task: usize,
    /// On-task samples under their own adapter, against their own class's
    /// augmented prototype.
    pub on_task: f64,
    /// Off-task samples under this task's adapter, against every augmented
    /// prototype of this task. `None` with a single task.
    pub off_task: Option<f64>,
    /// On-task samples under every other task's adapter, against their own
    /// class's augmented prototype. `None` with a single task.
    pub wrong_adapter: Option<f64>,
}

impl TaskSeparation {
    pub fn separated(&self) -> bool {
        self.off_task.is_some_and(|o| self.on_task > o)
            && self.wrong_adapter.is_some_and(|w| self.on_task > w)
    }
}

/// Per-task separation statistics. `tests[t - 1]` holds the test samples
/// of task `t`.
pub fn separation_report(
    backbone: &Backbone,
    registry: &AdapterRegistry,
    store: &DualPrototypeStore,
    tests: &[LabeledDataset],
) -> Result<Vec<TaskSeparation>> {
    let tasks: Vec<usize> = (1..=tests.len()).collect();
    let mut out = Vec::with_capacity(tasks.len());
    for &t in &tasks {
        let adapter = registry.get(t)?;
        let own: BTreeSet<usize> = store.classes_of_task(t).into_iter().collect();
        let on_set = &tests[t - 1];

        let mut on = Mean::default();
        // One running mean per wrong adapter, averaged at the end.
        let others: Vec<usize> = tasks.iter().copied().filter(|&u| u != t).collect();
        let mut per_wrong = vec![Mean::default(); others.len()];
        for i in 0..on_set.len() {
            let (x, y) = on_set.sample(i);
            let proto = store.aug().get(&y).ok_or(Error::UnseenClass(y))?;
            on.push(cosine_sim(&extract(backbone, x, Some(adapter))?, proto)?);
            for (m, &u) in per_wrong.iter_mut().zip(&others) {
                let rep = extract(backbone, x, Some(registry.get(u)?))?;
                m.push(cosine_sim(&rep, proto)?);
            }
        }
        let mut wrong = Mean::default();
        for m in &per_wrong {
            if let Some(v) = m.value() {
                wrong.push(v);
            }
        }

        let mut off = Mean::default();
        for (u, set) in tests.iter().enumerate() {
            if u + 1 == t {
                continue;
            }
            for i in 0..set.len() {
                let rep = extract(backbone, set.features().row(i), Some(adapter))?;
                for c in &own {
                    off.push(cosine_sim(&rep, &store.aug()[c])?);
                }
            }
        }
        out.push(TaskSeparation {
            task: t,
            on_task: on.value().unwrap_or(f64::NAN),
            off_task: off.value(),
            wrong_adapter: wrong.value(),
        });
    }
    Ok(out)
}

/// Incremental mean; a run of identical values yields that value exactly.
#[derive(Debug, Clone, Default)]
struct Mean {
    mean: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.mean += (v - self.mean) / self.n as f64;
    }

    fn value(&self) -> Option<f64> {
        (self.n > 0).then_some(self.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_adapter;
    use crate::numerics::{Matrix, RngState};
    use crate::prototypes::{compute_aug_prototypes, compute_raw_prototypes};

    fn backbone(seed: u64) -> Backbone {
        let mut b = Backbone::random(&[4, 8, 8, 5], &mut RngState::new(seed)).unwrap();
        b.freeze();
        b
    }

    /// Store with `tasks` tasks of `per_task` classes. Each class is one
    /// random input mean; adapters get random nonzero up-projections when
    /// `trained` so the augmented prototypes differ from the raw ones.
    fn setup(
        tasks: usize,
        per_task: usize,
        trained: bool,
        seed: u64,
    ) -> (Backbone, AdapterRegistry, DualPrototypeStore, Vec<LabeledDataset>) {
        let b = backbone(seed);
        let mut rng = RngState::new(seed + 1);
        let mut reg = AdapterRegistry::new();
        let mut store = DualPrototypeStore::new();
        let mut sets = Vec::new();
        for t in 1..=tasks {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for j in 0..per_task {
                let class = (t - 1) * per_task + j;
                let mean: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
                for _ in 0..4 {
                    rows.push(mean.iter().map(|m| m + 0.3 * rng.normal()).collect());
                    labels.push(class);
                }
            }
            let data = LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
            let mut a = init_adapter(t, &b, &[0, 1], 2, &mut rng).unwrap();
            if trained {
                for blk in a.blocks_mut().unwrap() {
                    for v in blk.up.as_mut_slice() {
                        *v = 0.5 * rng.normal();
                    }
                }
            }
            a.freeze();
            let raw = compute_raw_prototypes(&b, &data).unwrap();
            let aug = compute_aug_prototypes(&b, &a, &data).unwrap();
            store.ingest_task(t, raw, aug).unwrap();
            reg.insert(a).unwrap();
            sets.push(data);
        }
        (b, reg, store, sets)
    }

    /// Eq-level oracle: recompute everything from scratch, no caching.
    fn oracle_dpta(
        store: &DualPrototypeStore,
        b: &Backbone,
        reg: &AdapterRegistry,
        x: &[f64],
        k: usize,
    ) -> usize {
        let raw_rep = extract(b, x, None).unwrap();
        let mut ranked: Vec<(usize, f64)> = store
            .raw()
            .iter()
            .map(|(&c, p)| (c, cosine_sim(&raw_rep, p).unwrap()))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top: Vec<usize> = ranked.iter().take(k.min(ranked.len())).map(|p| p.0).collect();
        let mut best: Option<(usize, f64)> = None;
        for c in top {
            let a = reg.get(store.task_of()[&c]).unwrap();
            let s = cosine_sim(&extract(b, x, Some(a)).unwrap(), &store.aug()[&c]).unwrap();
            best = match best {
                Some((bc, bs)) if bs > s || (bs == s && bc < c) => Some((bc, bs)),
                _ => Some((c, s)),
            };
        }
        best.unwrap().0
    }

    #[test]
    fn dpta_matches_oracle() {
        let (b, reg, store, _) = setup(3, 4, true, 10);
        let mut rng = RngState::new(99);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
            for k in [1, 3, 5, 20] {
                let d = dpta_predict(&store, &b, &reg, &x, k).unwrap();
                assert_eq!(d.predicted, oracle_dpta(&store, &b, &reg, &x, k));
                assert!(d.adapter_calls <= k.min(3));
                assert_eq!(d.topk_labels.len(), k.min(12));
            }
        }
    }

    #[test]
    fn k_at_least_n_returns_everything() {
        let (b, _, store, _) = setup(2, 2, false, 3);
        let top = topk_predict(&store, &b, &[0.1, 0.2, 0.3, 0.4], 10).unwrap();
        let mut sorted = top.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn k_one_collapses_to_ncm() {
        let (b, reg, store, _) = setup(3, 3, true, 4);
        let mut rng = RngState::new(5);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let ncm = ncm_predict(&store, &b, &x).unwrap();
            assert_eq!(topk_predict(&store, &b, &x, 1).unwrap(), vec![ncm]);
            assert_eq!(dpta_predict(&store, &b, &reg, &x, 1).unwrap().predicted, ncm);
        }
    }

    #[test]
    fn identity_adapters_reduce_to_raw_ncm() {
        let (b, reg, store, _) = setup(3, 3, false, 6);
        let mut rng = RngState::new(7);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let d = dpta_predict(&store, &b, &reg, &x, 4).unwrap();
            assert_eq!(d.predicted, ncm_predict(&store, &b, &x).unwrap());
        }
    }

    #[test]
    fn self_match_and_tie_rule() {
        let b = backbone(1);
        let x = vec![1.0, -0.5, 0.25, 2.0];
        let rep = extract(&b, &x, None).unwrap();
        let mut store = DualPrototypeStore::new();
        let other: Vec<f64> = rep.iter().map(|v| -v).collect();
        let raw: PrototypeMap = [(3, rep.clone()), (8, other)].into_iter().collect();
        store.ingest_task(1, raw.clone(), raw).unwrap();
        assert_eq!(ncm_predict(&store, &b, &x).unwrap(), 3);

        let mut tie = DualPrototypeStore::new();
        let p: PrototypeMap = [(5, rep.clone()), (2, rep.clone())].into_iter().collect();
        tie.ingest_task(1, p.clone(), p).unwrap();
        assert_eq!(ncm_predict(&tie, &b, &x).unwrap(), 2);
    }

    #[test]
    fn missing_adapter_is_an_error() {
        let (b, _, store, _) = setup(2, 2, false, 3);
        let empty = AdapterRegistry::new();
        assert!(matches!(
            dpta_predict(&store, &b, &empty, &[0.0, 1.0, 0.0, 1.0], 4),
            Err(Error::MissingAdapter(_))
        ));
    }

    #[test]
    fn stage_eval_counts_and_identity() {
        let (b, reg, store, sets) = setup(3, 3, true, 12);
        let test = LabeledDataset::concat(&sets).unwrap();
        for k in 1..=9 {
            let e = evaluate_stage(&store, &b, &reg, &test, k, 3).unwrap();
            e.check_decomposition().unwrap();
            assert!(e.accuracy <= e.topk_accuracy);
            assert!((e.accuracy - e.topk_accuracy * e.conditional_accuracy).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_and_hopeless_stages() {
        let task_of: BTreeMap<usize, usize> = [(0, 1), (1, 1)].into_iter().collect();
        let good: Vec<Prediction> = (0..4)
            .map(|i| {
                Prediction::new(i, i % 2, Decision {
                    topk_labels: vec![i % 2],
                    predicted: i % 2,
                    adapter_calls: 1,
                })
            })
            .collect();
        let e = StageEval::from_predictions(1, &good, &task_of).unwrap();
        assert_eq!((e.accuracy, e.topk_accuracy, e.conditional_accuracy), (1.0, 1.0, 1.0));

        let bad: Vec<Prediction> = (0..4)
            .map(|i| {
                Prediction::new(i, 0, Decision {
                    topk_labels: vec![1],
                    predicted: 1,
                    adapter_calls: 1,
                })
            })
            .collect();
        let e = StageEval::from_predictions(1, &bad, &task_of).unwrap();
        assert_eq!((e.accuracy, e.topk_accuracy, e.conditional_accuracy), (0.0, 0.0, 1.0));
        e.check_decomposition().unwrap();
    }

    #[test]
    fn unseen_class_in_test_set_is_rejected() {
        let (b, reg, store, _) = setup(1, 2, false, 3);
        let test = LabeledDataset::new(Matrix::zeros(1, 4), vec![77]).unwrap();
        assert!(matches!(
            evaluate_stage(&store, &b, &reg, &test, 5, 1),
            Err(Error::UnseenClass(77))
        ));
    }

    #[test]
    fn separation_single_task_and_identity_adapters() {
        let (b, reg, store, sets) = setup(1, 3, true, 22);
        let r = separation_report(&b, &reg, &store, &sets).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].off_task.is_none() && r[0].wrong_adapter.is_none());

        let (b, reg, store, sets) = setup(3, 2, false, 21);
        for s in separation_report(&b, &reg, &store, &sets).unwrap() {
            assert_eq!(Some(s.on_task), s.wrong_adapter);
        }
    }
}
