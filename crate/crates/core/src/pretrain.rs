//! Masked sentence modeling: region masking, smooth-L1 regression of the
//! masked sentence embeddings, and the pre-training step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{smooth_l1_mean, Graph, ParameterRegistry, Params, Tensor, Var};
use crate::embedding::{assemble_sentence_rows, sentence_embeddings, sentence_pre_layout};
use crate::encoder::encode_document;
use crate::error::{Error, Result};
use crate::model::{layer_context, layout_rows, visual_rows, ModelConfig, PreparedDocument};
use crate::optim::{LossOutput, StepRecord, Trainer};
use crate::scalar::Scalar;

pub const MSM_MASK_EMBEDDING: &str = "msm.mask_embedding";
pub const MSM_HEAD_WEIGHT: &str = "msm.head.weight";
pub const MSM_HEAD_BIAS: &str = "msm.head.bias";

/// Per-region selection probability and the action split among selected
/// regions; whatever is left after `mask_symbol` and `random_replace` keeps
/// its sentence unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPolicy {
    pub select_rate: f64,
    pub mask_symbol: f64,
    pub random_replace: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_symbol: 0.8,
            random_replace: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if p(self.select_rate) && p(self.mask_symbol) && p(self.random_replace) && self.mask_symbol + self.random_replace <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mask policy {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    Keep,
    MaskSymbol,
    /// Sentence swapped for region `region` of batch document `doc`.
    RandomReplace { doc: usize, region: usize },
    UnchangedSelected,
}

impl MaskAction {
    pub fn is_selected(self) -> bool {
        self != MaskAction::Keep
    }
}

/// Actions for the regions of one document (the global node is never
/// a candidate, so index `r` here is node `r + 1`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskAssignment {
    pub actions: Vec<MaskAction>,
}

impl MaskAssignment {
    /// Node indices (1-based) of the selected regions.
    pub fn selected_nodes(&self) -> Vec<usize> {
        self.actions
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_selected())
            .map(|(r, _)| r + 1)
            .collect()
    }

    pub fn selected_count(&self) -> usize {
        self.actions.iter().filter(|a| a.is_selected()).count()
    }
}

fn pick_donor(rng: &mut ChaCha8Rng, counts: &[usize], doc: usize, region: usize) -> MaskAction {
    let others: usize = counts.iter().enumerate().filter(|&(d, _)| d != doc).map(|(_, &c)| c).sum();
    if others > 0 {
        let mut idx = rng.gen_range(0..others);
        for (d, &c) in counts.iter().enumerate() {
            if d == doc {
                continue;
            }
            if idx < c {
                return MaskAction::RandomReplace { doc: d, region: idx };
            }
            idx -= c;
        }
        unreachable!("donor index within total");
    }
    // single-document batch: another region of the same document, or
    // the region itself when it is alone
    let n = counts[doc];
    if n == 1 {
        return MaskAction::RandomReplace { doc, region };
    }
    let mut r = rng.gen_range(0..n - 1);
    if r >= region {
        r += 1;
    }
    MaskAction::RandomReplace { doc, region: r }
}

/// Draws an assignment for every document of a batch, given each
/// document's region count.
pub fn sample_mask_assignments(region_counts: &[usize], policy: &MaskPolicy, seed: u64) -> Vec<MaskAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(region_counts.len());
    for (doc, &n) in region_counts.iter().enumerate() {
        let mut actions = Vec::with_capacity(n);
        for region in 0..n {
            if rng.gen::<f64>() >= policy.select_rate {
                actions.push(MaskAction::Keep);
                continue;
            }
            let u: f64 = rng.gen();
            let action = if u < policy.mask_symbol {
                MaskAction::MaskSymbol
            } else if u < policy.mask_symbol + policy.random_replace {
                pick_donor(&mut rng, region_counts, doc, region)
            } else {
                MaskAction::UnchangedSelected
            };
            actions.push(action);
        }
        out.push(MaskAssignment { actions });
    }
    out
}

/// Masked sentence rows `S̄` for batch document `doc`. Layout rows are
/// always the document's own.
pub fn masked_sentences<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    batch: &[PreparedDocument<T>],
    doc: usize,
    assignment: &MaskAssignment,
    layout: Var,
) -> Result<Var> {
    let own = &batch[doc];
    let n = own.region_count();
    if assignment.actions.len() != n {
        return Err(Error::Data(format!(
            "mask covers {} regions, document {} has {n}",
            assignment.actions.len(),
            own.id
        )));
    }
    let (_, td) = own.raw.text.dims2();
    let mut data = Vec::with_capacity(n * td);
    for (r, a) in assignment.actions.iter().enumerate() {
        let row = match *a {
            MaskAction::RandomReplace { doc: d, region } => batch
                .get(d)
                .filter(|donor| region < donor.region_count())
                .map(|donor| donor.raw.text.row(region))
                .ok_or(Error::Index { index: region, rows: 0 })?,
            _ => own.raw.text.row(r),
        };
        data.extend_from_slice(row);
    }
    let text = g.constant(Tensor::new(vec![n, td], data)?);
    let pre = sentence_pre_layout(g, params, text)?;
    let mask = params.get(MSM_MASK_EMBEDDING)?;
    let d = g.value(mask).len();
    let mask = g.reshape(mask, &[1, d])?;
    let table = g.concat(&[pre, mask], 0)?;
    let indices: Vec<usize> = assignment
        .actions
        .iter()
        .enumerate()
        .map(|(r, a)| if *a == MaskAction::MaskSymbol { n } else { r })
        .collect();
    let rows = g.embedding_lookup(table, &indices)?;
    assemble_sentence_rows(g, params, rows, layout)
}

/// Smooth-L1 with beta 1, averaged over components.
pub fn smooth_l1<T: Scalar>(x: &[T]) -> T {
    smooth_l1_mean(x)
}

/// Head predictions `h_i·W + b` for the given node rows, `[m × d]`.
pub fn msm_predictions<T: Scalar>(g: &mut Graph<T>, params: &Params, hidden: Var, nodes: &[usize]) -> Result<Var> {
    let rows = g.embedding_lookup(hidden, nodes)?;
    let y = g.matmul(rows, params.get(MSM_HEAD_WEIGHT)?)?;
    g.add_row(y, params.get(MSM_HEAD_BIAS)?)
}

/// Mean smooth-L1 between `targets` (`[m × d]`, treated as constants) and
/// the predictions for `nodes`.
pub fn msm_loss<T: Scalar>(g: &mut Graph<T>, params: &Params, hidden: Var, nodes: &[usize], targets: Var) -> Result<Var> {
    if nodes.is_empty() {
        return Err(Error::Data("no selected regions".into()));
    }
    let pred = msm_predictions(g, params, hidden, nodes)?;
    let diff = g.sub(targets, pred)?;
    Ok(g.smooth_l1(diff))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsmConfig {
    pub policy: MaskPolicy,
    /// Regress `s_i − l_i` instead of the full `s_i`.
    pub layout_free_target: bool,
}

fn detached_targets<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    doc: &PreparedDocument<T>,
    layout: Var,
    nodes: &[usize],
    layout_free: bool,
) -> Result<Var> {
    let text = g.constant(doc.raw.text.clone());
    let s = sentence_embeddings(g, params, text, layout)?;
    let s = g.value(s);
    let l = g.value(layout);
    let d = s.dims2().1;
    let mut data = Vec::with_capacity(nodes.len() * d);
    for &i in nodes {
        if layout_free {
            data.extend(s.row(i).iter().zip(l.row(i)).map(|(&a, &b)| a - b));
        } else {
            data.extend_from_slice(s.row(i));
        }
    }
    Ok(g.constant(Tensor::new(vec![nodes.len(), d], data)?))
}

/// Loss over a batch under fixed assignments; `None` when nothing was
/// selected anywhere in the batch.
pub fn msm_batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params,
    batch: &[PreparedDocument<T>],
    assignments: &[MaskAssignment],
    cfg: &ModelConfig,
    msm: &MsmConfig,
) -> Result<Option<LossOutput>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if assignments.len() != batch.len() {
        return Err(Error::Data("one mask assignment per document required".into()));
    }
    let mut diffs = Vec::new();
    let mut count = 0;
    for (di, (doc, assign)) in batch.iter().zip(assignments).enumerate() {
        let nodes = assign.selected_nodes();
        if nodes.is_empty() {
            continue;
        }
        count += nodes.len();
        let layout = layout_rows(g, params, doc)?;
        let targets = detached_targets(g, params, doc, layout, &nodes, msm.layout_free_target)?;
        let masked = masked_sentences(g, params, batch, di, assign, layout)?;
        let visual = visual_rows(g, params, doc, layout)?;
        let ctx = layer_context(g, doc);
        let out = encode_document(g, params, masked, visual, &ctx, &cfg.encoder)?;
        let pred = msm_predictions(g, params, out.hidden, &nodes)?;
        diffs.push(g.sub(targets, pred)?);
    }
    if diffs.is_empty() {
        return Ok(None);
    }
    let all = g.concat(&diffs, 0)?;
    Ok(Some(LossOutput {
        loss: g.smooth_l1(all),
        count,
    }))
}

/// Mask seed for step `step` of a run seeded with `seed`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Samples fresh masks for the trainer's current step and applies one
/// update. Returns `None` for a skipped step.
pub fn msm_train_step<T: Scalar>(
    trainer: &mut Trainer<T>,
    registry: &mut ParameterRegistry<T>,
    batch: &[PreparedDocument<T>],
    cfg: &ModelConfig,
    msm: &MsmConfig,
    seed: u64,
) -> Result<Option<StepRecord>> {
    let counts: Vec<usize> = batch.iter().map(PreparedDocument::region_count).collect();
    let assignments = sample_mask_assignments(&counts, &msm.policy, step_seed(seed, trainer.step_index()));
    let rec = trainer.step(registry, |g, p| msm_batch_loss(g, p, batch, &assignments, cfg, msm))?;
    if rec.is_none() {
        log::debug!("step {} skipped: no region selected", trainer.step_index() - 1);
    }
    Ok(rec)
}

/// Loss under a fixed assignment, without updating anything.
pub fn msm_eval_loss<T: Scalar>(
    registry: &ParameterRegistry<T>,
    batch: &[PreparedDocument<T>],
    assignments: &[MaskAssignment],
    cfg: &ModelConfig,
    msm: &MsmConfig,
) -> Result<Option<f64>> {
    let mut g = Graph::new();
    let p = registry.bind(&mut g);
    Ok(msm_batch_loss(&mut g, &p, batch, assignments, cfg, msm)?.map(|o| g.scalar_value(o.loss).to_f64_lossy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::StubProvider;
    use crate::encoder::EncoderConfig;
    use crate::io::synthetic::{gen_synthetic, SyntheticSpec};
    use crate::model::{init_parameters, prepare_document};
    use crate::optim::OptimizerConfig;

    fn setup(docs: usize) -> (ModelConfig, Vec<PreparedDocument<f64>>) {
        let cfg = ModelConfig {
            encoder: EncoderConfig::small(1, 12, 2, 4),
            text_dim: 8,
            visual_dim: 8,
            proj_bias: true,
        };
        let provider = StubProvider {
            text_dim: 8,
            visual_dim: 8,
            seed: 0,
        };
        let corpus = gen_synthetic(&SyntheticSpec {
            docs,
            regions_per_doc: 6,
            classes: 2,
            seed: 1,
        })
        .unwrap();
        let prepared = corpus.iter().map(|d| prepare_document(d, &provider, &cfg).unwrap()).collect();
        (cfg, prepared)
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(&[0.0f64]), 0.0);
        assert_eq!(smooth_l1(&[0.5f64]), 0.125);
        assert_eq!(smooth_l1(&[2.0f64]), 1.5);
        assert_eq!(smooth_l1(&[-2.0f64, 0.5]), 0.8125);
    }

    #[test]
    fn hand_evaluated_loss_and_exact_head() {
        let mut reg = ParameterRegistry::<f64>::new();
        reg.insert(MSM_HEAD_WEIGHT, Tensor::zeros(&[2, 2]));
        reg.insert(MSM_HEAD_BIAS, Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let hidden = g.constant(Tensor::from_rows(&[vec![0.3, 0.1], vec![0.7, -0.2]]).unwrap());
        let target = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let loss = msm_loss(&mut g, &p, hidden, &[1], target).unwrap();
        assert_eq!(g.scalar_value(loss), 0.25);

        // identity head reproduces hidden rows exactly
        reg.insert(MSM_HEAD_WEIGHT, Tensor::identity(2));
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let hidden = g.constant(Tensor::from_rows(&[vec![0.3, 0.1], vec![0.7, -0.2]]).unwrap());
        let target = g.constant(Tensor::from_rows(&[vec![0.7, -0.2]]).unwrap());
        let loss = msm_loss(&mut g, &p, hidden, &[1], target).unwrap();
        assert_eq!(g.scalar_value(loss), 0.0);
        assert!(msm_loss(&mut g, &p, hidden, &[], target).is_err());
    }

    #[test]
    fn assignments_are_reproducible_and_skip_global() {
        let counts = [7, 3, 12, 1];
        let policy = MaskPolicy {
            select_rate: 0.6,
            ..Default::default()
        };
        let a = sample_mask_assignments(&counts, &policy, 42);
        assert_eq!(a, sample_mask_assignments(&counts, &policy, 42));
        assert_ne!(a, sample_mask_assignments(&counts, &policy, 43));
        for (d, asg) in a.iter().enumerate() {
            assert_eq!(asg.actions.len(), counts[d]);
            assert!(asg.selected_nodes().iter().all(|&i| i >= 1 && i <= counts[d]));
            for act in &asg.actions {
                if let MaskAction::RandomReplace { doc, region } = *act {
                    assert_ne!(doc, d);
                    assert!(region < counts[doc]);
                }
            }
        }
    }

    #[test]
    fn single_document_donors_come_from_other_regions() {
        let policy = MaskPolicy {
            select_rate: 1.0,
            mask_symbol: 0.0,
            random_replace: 1.0,
        };
        let a = sample_mask_assignments(&[5], &policy, 3);
        for (r, act) in a[0].actions.iter().enumerate() {
            match *act {
                MaskAction::RandomReplace { doc: 0, region } => assert_ne!(region, r),
                other => panic!("{other:?}"),
            }
        }
        let alone = sample_mask_assignments(&[1], &policy, 3);
        assert_eq!(alone[0].actions, vec![MaskAction::RandomReplace { doc: 0, region: 0 }]);
    }

    #[test]
    fn sampler_rates() {
        let counts = vec![100; 1000];
        let a = sample_mask_assignments(&counts, &MaskPolicy::default(), 9);
        let acts: Vec<MaskAction> = a.iter().flat_map(|x| x.actions.iter().copied()).collect();
        let sel: Vec<&MaskAction> = acts.iter().filter(|x| x.is_selected()).collect();
        let rate = sel.len() as f64 / acts.len() as f64;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
        let frac = |f: fn(&MaskAction) -> bool| sel.iter().filter(|a| f(a)).count() as f64 / sel.len() as f64;
        assert!((frac(|a| *a == MaskAction::MaskSymbol) - 0.8).abs() < 0.02);
        assert!((frac(|a| matches!(a, MaskAction::RandomReplace { .. })) - 0.1).abs() < 0.02);
        assert!((frac(|a| *a == MaskAction::UnchangedSelected) - 0.1).abs() < 0.02);
    }

    #[test]
    fn masked_rows_keep_layout() {
        let (cfg, docs) = setup(2);
        let reg = init_parameters::<f64>(&cfg, 5).unwrap();
        let n = docs[0].region_count();
        let mut actions = vec![MaskAction::Keep; n];
        actions[0] = MaskAction::MaskSymbol;
        actions[2] = MaskAction::MaskSymbol;
        actions[3] = MaskAction::RandomReplace { doc: 1, region: 4 };
        actions[4] = MaskAction::UnchangedSelected;
        let asg = MaskAssignment { actions };
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let layout = layout_rows(&mut g, &p, &docs[0]).unwrap();
        let masked = masked_sentences(&mut g, &p, &docs, 0, &asg, layout).unwrap();
        let text = g.constant(docs[0].raw.text.clone());
        let plain = sentence_embeddings(&mut g, &p, text, layout).unwrap();
        let donor_text = g.constant(docs[1].raw.text.clone());
        let donor_pre = sentence_pre_layout(&mut g, &p, donor_text).unwrap();
        let (m, s, l, dp) = (g.value(masked), g.value(plain), g.value(layout), g.value(donor_pre));
        let mask = reg.get(MSM_MASK_EMBEDDING).unwrap().data();
        for node in [1, 3] {
            let diff: Vec<f64> = m.row(node).iter().zip(l.row(node)).map(|(a, b)| a - b).collect();
            assert!(diff.iter().zip(mask).all(|(a, b)| (a - b).abs() < 1e-14));
        }
        let swapped: Vec<f64> = dp.row(4).iter().zip(l.row(4)).map(|(a, b)| a + b).collect();
        assert_eq!(m.row(4), swapped.as_slice());
        for node in [0, 2, 5, 6] {
            assert_eq!(m.row(node), s.row(node));
        }
    }

    #[test]
    fn targets_are_constants() {
        let (cfg, docs) = setup(1);
        let reg = init_parameters::<f64>(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let p = reg.bind(&mut g);
        let layout = layout_rows(&mut g, &p, &docs[0]).unwrap();
        for free in [false, true] {
            let t = detached_targets(&mut g, &p, &docs[0], layout, &[1, 2], free).unwrap();
            assert!(!g.requires_grad(t));
        }
    }

    #[test]
    fn train_steps_are_deterministic() {
        let (cfg, docs) = setup(3);
        let msm = MsmConfig {
            policy: MaskPolicy {
                select_rate: 0.5,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = || {
            let mut reg = init_parameters::<f64>(&cfg, 2).unwrap();
            let opt = OptimizerConfig {
                lr: 1e-3,
                warmup_frac: 0.0,
                ..Default::default()
            };
            let mut tr = Trainer::new(opt, 2).unwrap();
            let mut losses = Vec::new();
            for _ in 0..2 {
                let rec = msm_train_step(&mut tr, &mut reg, &docs, &cfg, &msm, 11).unwrap().unwrap();
                assert!(rec.loss >= 0.0 && rec.masked_count > 0);
                losses.push(rec.loss);
            }
            (losses, reg)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn nothing_selected_skips_the_step() {
        let (cfg, docs) = setup(2);
        let mut reg = init_parameters::<f64>(&cfg, 2).unwrap();
        let before = reg.clone();
        let msm = MsmConfig {
            policy: MaskPolicy {
                select_rate: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut tr = Trainer::new(OptimizerConfig::default(), 3).unwrap();
        assert!(msm_train_step(&mut tr, &mut reg, &docs, &cfg, &msm, 0).unwrap().is_none());
        assert_eq!(tr.skipped(), 1);
        assert_eq!(reg, before);
    }
}
