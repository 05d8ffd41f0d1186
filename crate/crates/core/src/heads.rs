//! Entity and document classification heads, their losses and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterRegistry, Params, Var};
use crate::error::{Error, Result};
use crate::model::{forward, init_into, ModelConfig, PreparedDocument};
use crate::optim::{LossOutput, StepRecord, Trainer};
use crate::scalar::Scalar;

pub const ENTITY_HEAD_WEIGHT: &str = "entity.weight";
pub const ENTITY_HEAD_BIAS: &str = "entity.bias";
pub const DOC_HEAD_WEIGHT: &str = "doc.weight";
pub const DOC_HEAD_BIAS: &str = "doc.bias";
pub const DEFAULT_BACKGROUND: &str = "other";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Entity,
    DocClass,
}

impl Task {
    fn head_names(self) -> (&'static str, &'static str) {
        match self {
            Task::Entity => (ENTITY_HEAD_WEIGHT, ENTITY_HEAD_BIAS),
            Task::DocClass => (DOC_HEAD_WEIGHT, DOC_HEAD_BIAS),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(Task::Entity),
            "docclass" => Ok(Task::DocClass),
            other => Err(Error::Config(format!("unknown task `{other}` (expected entity or docclass)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Entity => "entity",
            Task::DocClass => "docclass",
        })
    }
}

/// Ordered class names, with an optional background class that does not
/// count as a positive for F1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLabelSet {
    names: Vec<String>,
    background: Option<usize>,
}

impl EntityLabelSet {
    pub fn new(names: Vec<String>, background: Option<&str>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("label names must be unique".into()));
        }
        let background = match background {
            Some(b) => Some(
                names
                    .iter()
                    .position(|n| n == b)
                    .ok_or_else(|| Error::Config(format!("background label `{b}` not in label set")))?,
            ),
            None => None,
        };
        Ok(Self { names, background })
    }

    /// Sorted distinct labels; `background` applies only if present.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>, background: Option<&str>) -> Result<Self> {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        let names: Vec<String> = set.iter().map(|s| s.to_string()).collect();
        let bg = background.filter(|b| set.contains(b));
        Self::new(names, bg)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn background(&self) -> Option<usize> {
        self.background
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }
}

pub fn head_shapes(task: Task, dim: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    let (w, b) = task.head_names();
    vec![(w.to_owned(), vec![dim, classes]), (b.to_owned(), vec![classes])]
}

/// Adds a freshly initialized head unless one of the right shape exists.
/// Returns whether a head was created.
pub fn ensure_head<T: Scalar>(
    registry: &mut ParameterRegistry<T>,
    task: Task,
    dim: usize,
    classes: usize,
    seed: u64,
) -> Result<bool> {
    let shapes = head_shapes(task, dim, classes);
    let present: Vec<bool> = shapes
        .iter()
        .map(|(n, s)| registry.get(n).map(|t| t.shape() == s.as_slice()))
        .map(|o| o.unwrap_or(false))
        .collect();
    if present.iter().all(|&p| p) {
        return Ok(false);
    }
    if let Some((name, shape)) = shapes.iter().find(|(n, s)| registry.get(n).is_some_and(|t| t.shape() != s.as_slice())) {
        log::warn!("replacing {name}: stored head does not have shape {shape:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_into(registry, &shapes, &mut rng);
    Ok(true)
}

fn head<T: Scalar>(g: &mut Graph<T>, params: &Params, task: Task, rows: Var) -> Result<Var> {
    let (w, b) = task.head_names();
    let y = g.matmul(rows, params.get(w)?)?;
    g.add_row(y, params.get(b)?)
}

/// Per-region logits `[n × C]` from rows `1..=n` of the final hidden state.
pub fn entity_logits<T: Scalar>(g: &mut Graph<T>, params: &Params, hidden: Var) -> Result<Var> {
    let n = g.shape(hidden)[0];
    if n < 2 {
        return Err(Error::Data("no region rows".into()));
    }
    let rows = g.slice(hidden, 0, 1, n - 1)?;
    head(g, params, Task::Entity, rows)
}

/// Document logits `[1 × C]` from the global row.
pub fn doc_logits<T: Scalar>(g: &mut Graph<T>, params: &Params, hidden: Var) -> Result<Var> {
    let row = g.slice(hidden, 0, 0, 1)?;
    head(g, params, Task::DocClass, row)
}

/// `−log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::Index {
            index: label,
            rows: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + z.ln() - logits[label])
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - max).exp().to_f64_lossy()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Class index plus softmax scores. Ties go to the lowest index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub scores: Vec<f64>,
}

impl Prediction {
    pub fn from_logits<T: Scalar>(logits: &[T]) -> Self {
        let scores = softmax(logits);
        let label = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best })
            .0;
        Self { label, scores }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl F1Score {
    /// Zero denominators give 0, except that a case with no positives
    /// predicted or gold at all scores 1.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                ..Self::default()
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn check_aligned(pred: &[usize], gold: &[usize]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold regions",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Micro-averaged region-level F1; `background` is never a positive.
pub fn entity_f1(pred: &[usize], gold: &[usize], background: Option<usize>) -> Result<F1Score> {
    check_aligned(pred, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gold) {
        let p_pos = Some(p) != background;
        let g_pos = Some(g) != background;
        if p == g {
            tp += usize::from(g_pos);
        } else {
            fp += usize::from(p_pos);
            fn_ += usize::from(g_pos);
        }
    }
    Ok(F1Score::from_counts(tp, fp, fn_))
}

/// One-vs-rest scores for every non-background label.
pub fn per_label_f1(pred: &[usize], gold: &[usize], labels: &EntityLabelSet) -> Result<BTreeMap<String, F1Score>> {
    check_aligned(pred, gold)?;
    let mut out = BTreeMap::new();
    for c in 0..labels.len() {
        if Some(c) == labels.background() {
            continue;
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        out.insert(labels.name(c).to_owned(), F1Score::from_counts(tp, fp, fn_));
    }
    Ok(out)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_aligned(pred, gold)?;
    if gold.is_empty() {
        return Err(Error::Data("accuracy over an empty set".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Class sets found in a prepared corpus.
pub fn label_set_for<T: Scalar>(docs: &[PreparedDocument<T>], task: Task, background: Option<&str>) -> Result<EntityLabelSet> {
    let labels: Vec<&str> = match task {
        Task::Entity => docs
            .iter()
            .flat_map(|d| d.region_labels.iter().flatten())
            .map(String::as_str)
            .collect(),
        Task::DocClass => docs.iter().filter_map(|d| d.doc_class.as_deref()).collect(),
    };
    if labels.is_empty() {
        return Err(Error::Data(format!("corpus has no {task} labels")));
    }
    EntityLabelSet::from_labels(labels, if task == Task::Entity { background } else { None })
}

/// Gold class indices for one document: one per region for the entity
/// task, a single entry for the document task.
pub fn gold_labels<T: Scalar>(doc: &PreparedDocument<T>, task: Task, labels: &EntityLabelSet) -> Result<Vec<usize>> {
    let lookup = |name: &Option<String>, what: String| -> Result<usize> {
        let name = name
            .as_deref()
            .ok_or_else(|| Error::Data(format!("document {}: {what} has no label", doc.id)))?;
        labels
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("document {}: {what} label `{name}` not in label set", doc.id)))
    };
    match task {
        Task::Entity => doc
            .region_labels
            .iter()
            .enumerate()
            .map(|(i, l)| lookup(l, format!("region {i}")))
            .collect(),
        Task::DocClass => Ok(vec![lookup(&doc.doc_class, "document class".into())?]),
    }
}

/// Mean cross-entropy over all supervised items of a batch.
pub fn finetune_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    batch: &[PreparedDocument<T>],
    gold: &[Vec<usize>],
    cfg: &ModelConfig,
    task: Task,
) -> Result<Option<LossOutput>> {
    if batch.len() != gold.len() {
        return Err(Error::Data("one gold label list per document required".into()));
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for (doc, labels) in batch.iter().zip(gold) {
        let (_, out) = forward(g, params, doc, cfg)?;
        logits.push(match task {
            Task::Entity => entity_logits(g, params, out.hidden)?,
            Task::DocClass => doc_logits(g, params, out.hidden)?,
        });
        targets.extend_from_slice(labels);
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let all = g.concat(&logits, 0)?;
    let loss = g.cross_entropy(all, &targets)?;
    Ok(Some(LossOutput {
        loss,
        count: targets.len(),
    }))
}

/// One optimizer step of classification fine-tuning on `batch`.
pub fn finetune_step<T: Scalar>(
    trainer: &mut Trainer<T>,
    registry: &mut ParameterRegistry<T>,
    batch: &[PreparedDocument<T>],
    gold: &[Vec<usize>],
    cfg: &ModelConfig,
    task: Task,
) -> Result<Option<StepRecord>> {
    trainer.step(registry, |g, p| finetune_loss(g, p, batch, gold, cfg, task))
}

/// Predictions for one document under `task`.
pub fn predict<T: Scalar>(
    registry: &ParameterRegistry<T>,
    doc: &PreparedDocument<T>,
    cfg: &ModelConfig,
    task: Task,
) -> Result<Vec<Prediction>> {
    let mut g = Graph::new();
    let p = registry.bind(&mut g);
    let (_, out) = forward(&mut g, &p, doc, cfg)?;
    let logits = match task {
        Task::Entity => entity_logits(&mut g, &p, out.hidden)?,
        Task::DocClass => doc_logits(&mut g, &p, out.hidden)?,
    };
    let t = g.value(logits);
    let (rows, _) = t.dims2();
    Ok((0..rows).map(|r| Prediction::from_logits(t.row(r))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub documents: usize,
    pub items: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro: Option<F1Score>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_label: BTreeMap<String, F1Score>,
    pub accuracy: f64,
}

/// Predicts every document and scores against gold labels.
pub fn evaluate<T: Scalar>(
    registry: &ParameterRegistry<T>,
    docs: &[PreparedDocument<T>],
    cfg: &ModelConfig,
    task: Task,
    labels: &EntityLabelSet,
) -> Result<MetricsReport> {
    if docs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for doc in docs {
        gold.extend(gold_labels(doc, task, labels)?);
        pred.extend(predict(registry, doc, cfg, task)?.into_iter().map(|p| p.label));
    }
    let (micro, per_label) = match task {
        Task::Entity => (
            Some(entity_f1(&pred, &gold, labels.background())?),
            per_label_f1(&pred, &gold, labels)?,
        ),
        Task::DocClass => (None, BTreeMap::new()),
    };
    Ok(MetricsReport {
        task,
        documents: docs.len(),
        items: gold.len(),
        micro,
        per_label,
        accuracy: accuracy(&pred, &gold)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        assert!((cross_entropy(&[0.3f64; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.0f64; 4], 4).is_err());
        assert!(cross_entropy(&[1e4f64, 0.0, 0.0], 0).unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let logits = [0.7f64, -1.3, 2.2, 0.05, -0.4];
        let direct = -(logits[3].exp() / logits.iter().map(|v| v.exp()).sum::<f64>()).ln();
        assert!((cross_entropy(&logits, 3).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn hand_counted_f1() {
        // 0 = other; 6 TP, 2 FP, 2 FN over 10 regions
        let gold = [1, 2, 3, 1, 2, 3, 1, 2, 0, 0];
        let pred = [1, 2, 3, 1, 2, 3, 0, 0, 1, 2];
        let s = entity_f1(&pred, &gold, Some(0)).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (6, 2, 2));
        assert!((s.precision - 0.75).abs() < 1e-15);
        assert!((s.recall - 0.75).abs() < 1e-15);
        assert!((s.f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn f1_edge_cases() {
        let all = entity_f1(&[1, 2, 0], &[1, 2, 0], Some(0)).unwrap();
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
        let none = entity_f1(&[0, 0, 0], &[1, 2, 3], Some(0)).unwrap();
        assert_eq!((none.recall, none.f1), (0.0, 0.0));
        assert!(entity_f1(&[0], &[0, 1], None).is_err());
    }

    proptest! {
        #[test]
        fn f1_is_permutation_invariant(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
            let (p, g) = split(&pairs);
            let (p2, g2) = split(&shuffled);
            prop_assert_eq!(entity_f1(&p, &g, Some(0)).unwrap(), entity_f1(&p2, &g2, Some(0)).unwrap());
        }
    }

    #[test]
    fn label_set_validation() {
        assert!(EntityLabelSet::new(vec![], None).is_err());
        assert!(EntityLabelSet::new(vec!["a".into(), "a".into()], None).is_err());
        let s = EntityLabelSet::from_labels(["q", "other", "a", "q"], Some("other")).unwrap();
        assert_eq!(s.names(), ["a", "other", "q"]);
        assert_eq!(s.background(), Some(1));
    }

    fn hidden_registry(classes: usize) -> ParameterRegistry<f64> {
        let mut reg = ParameterRegistry::new();
        ensure_head(&mut reg, Task::Entity, 4, classes, 1).unwrap();
        ensure_head(&mut reg, Task::DocClass, 4, classes, 2).unwrap();
        reg
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut reg = hidden_registry(3);
        for (_, t) in reg.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let h = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]]).unwrap());
        let e = entity_logits(&mut g, &p, h).unwrap();
        let d = doc_logits(&mut g, &p, h).unwrap();
        for v in [e, d] {
            for s in softmax(g.value(v).row(0)) {
                assert!((s - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let single = Prediction::from_logits(&[5.0f64]);
        assert_eq!((single.label, single.scores.clone()), (0, vec![1.0]));
    }

    #[test]
    fn doc_head_reads_only_global_row() {
        let reg = hidden_registry(3);
        let rows = vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0], vec![0.2, 0.1, 0.7, -0.3]];
        let run = |rows: &[Vec<f64>]| {
            let mut g = Graph::new();
            let p = reg.bind(&mut g);
            let h = g.constant(Tensor::from_rows(rows).unwrap());
            let d = doc_logits(&mut g, &p, h).unwrap();
            g.value(d).clone()
        };
        let base = run(&rows);
        let mut other = rows.clone();
        other[2][1] += 1.0;
        assert_eq!(run(&other), base);
        let mut global = rows.clone();
        global[0][1] += 1.0;
        assert_ne!(run(&global), base);
    }

    #[test]
    fn entity_cross_entropy_gradient() {
        let mut reg = hidden_registry(3);
        reg.insert("h", Tensor::from_rows(&[vec![0.3, -0.2, 0.5, 0.1], vec![1.0, 0.4, -0.6, 0.2], vec![-0.1, 0.8, 0.3, -0.5]]).unwrap());
        let report = grad_check(
            |g, p| {
                let h = p.get("h")?;
                let l = entity_logits(g, p, h)?;
                g.cross_entropy(l, &[2, 0])
            },
            &reg,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn ensure_head_is_idempotent() {
        let mut reg = hidden_registry(3);
        let before = reg.clone();
        assert!(!ensure_head(&mut reg, Task::Entity, 4, 3, 9).unwrap());
        assert_eq!(reg, before);
        assert!(ensure_head(&mut reg, Task::Entity, 4, 5, 9).unwrap());
        assert_eq!(reg.get(ENTITY_HEAD_WEIGHT).unwrap().shape(), &[4, 5]);
    }
}
