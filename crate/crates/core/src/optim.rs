//! Adam with linear warmup/decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterRegistry, Params, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of total steps spent warming up.
    pub warmup_frac: f64,
    /// Global L2 norm bound on gradients; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.warmup_frac)
            && self.clip_norm.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear ramp `0 → peak` over the warmup steps, then linear decay to 0
/// at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_frac).round() as usize;
        Self {
            peak,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            self.peak * (step as f64 / self.warmup_steps as f64)
        } else {
            let span = (self.total_steps - self.warmup_steps) as f64;
            self.peak * ((self.total_steps - step) as f64 / span)
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

pub fn global_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| {
            let v = x.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: OptimizerConfig,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
    updates: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn update(&mut self, registry: &mut ParameterRegistry<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.updates += 1;
        let t = self.updates as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(self.cfg.eps);
        let step = T::lit(lr / c1);
        let c2s = T::lit(c2).sqrt();
        for (name, param) in registry.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.to_owned())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self
                .second
                .entry(name.to_owned())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            for (((p, &gr), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + (T::one() - b1t) * gr;
                *vi = b2t * *vi + (T::one() - b2t) * gr * gr;
                *p -= step * *mi / (vi.sqrt() / c2s + eps);
            }
        }
    }
}

/// Indices of the documents used at `step` when cycling through `len`
/// documents in order, `batch_size` at a time.
pub fn batch_indices(len: usize, batch_size: usize, step: usize) -> Vec<usize> {
    let bs = batch_size.clamp(1, len.max(1));
    (0..bs).map(|i| (step * bs + i) % len.max(1)).collect()
}

/// One record per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub masked_count: usize,
    pub grad_norm: f64,
}

/// What a loss closure hands back to [`Trainer::step`].
pub struct LossOutput {
    pub loss: Var,
    /// Number of supervised items (masked regions, labeled regions, …).
    pub count: usize,
}

/// Schedule + optimizer + step counter.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub adam: Adam<T>,
    pub schedule: LinearSchedule,
    pub cfg: OptimizerConfig,
    step: usize,
    skipped: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: OptimizerConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: Adam::new(cfg.clone()),
            schedule: LinearSchedule::new(cfg.lr, total_steps, cfg.warmup_frac),
            cfg,
            step: 0,
            skipped: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Steps where the loss closure had nothing to supervise.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Forward, backward, clip and update. A closure returning `None`
    /// skips the step (the counter still advances).
    pub fn step<F>(&mut self, registry: &mut ParameterRegistry<T>, loss_fn: F) -> Result<Option<StepRecord>>
    where
        F: FnOnce(&mut Graph<T>, &Params) -> Result<Option<LossOutput>>,
    {
        let step = self.step;
        self.step += 1;
        let lr = self.schedule.lr(step);
        let mut g = Graph::new();
        let params = registry.bind(&mut g);
        let Some(out) = loss_fn(&mut g, &params)? else {
            self.skipped += 1;
            return Ok(None);
        };
        let loss = g.scalar_value(out.loss).to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}")));
        }
        g.backward(out.loss)?;
        let mut grads = registry.collect_grads(&g, &params);
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
        }
        self.adam.update(registry, &grads, lr);
        Ok(Some(StepRecord {
            step,
            lr,
            loss,
            masked_count: out.count,
            grad_norm,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LinearSchedule::new(5e-5, 1000, 0.1);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(100), 5e-5);
        assert!((s.lr(50) - 2.5e-5).abs() < 1e-18);
        assert!((s.lr(550) - 2.5e-5).abs() < 1e-18);
        assert_eq!(s.lr(1000), 0.0);
        assert!(s.lr(999) > 0.0);
        assert_eq!(LinearSchedule::new(1.0, 0, 0.1).lr(0), 0.0);
    }

    #[test]
    fn batches_cycle_in_order() {
        assert_eq!(batch_indices(5, 2, 0), vec![0, 1]);
        assert_eq!(batch_indices(5, 2, 2), vec![4, 0]);
        assert_eq!(batch_indices(3, 10, 7), vec![0, 1, 2]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 2.0), global_norm(&g));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut reg = ParameterRegistry::<f64>::new();
        reg.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        let mut adam = Adam::new(OptimizerConfig::default());
        adam.update(&mut reg, &grads, 0.1);
        let w = reg.get("w").unwrap().data();
        // bias-corrected first step is lr * g / (|g| + eps')
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn trainer_minimizes_quadratic() {
        let mut reg = ParameterRegistry::<f64>::new();
        reg.insert("x", Tensor::new(vec![3], vec![2.0, -1.5, 0.5]).unwrap());
        let cfg = OptimizerConfig {
            lr: 0.1,
            clip_norm: None,
            ..Default::default()
        };
        let mut tr = Trainer::new(cfg, 200).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let rec = tr
                .step(&mut reg, |g, p| {
                    let x = p.get("x")?;
                    let sq = g.mul(x, x)?;
                    Ok(Some(LossOutput { loss: g.sum(sq), count: 3 }))
                })
                .unwrap()
                .unwrap();
            last = rec.loss;
        }
        assert!(last < 1e-3, "{last}");
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut reg = ParameterRegistry::<f64>::new();
        reg.insert("x", Tensor::new(vec![1], vec![2.0]).unwrap());
        let before = reg.clone();
        let cfg = OptimizerConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut tr = Trainer::new(cfg, 5).unwrap();
        for _ in 0..5 {
            tr.step(&mut reg, |g, p| {
                let x = p.get("x")?;
                Ok(Some(LossOutput { loss: g.sum(x), count: 1 }))
            })
            .unwrap();
        }
        assert_eq!(reg, before);
    }
}
