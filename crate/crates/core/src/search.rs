//! First-order alternating optimization of weights and architecture logits.
//!
//! Phase 1 takes an SGD step on the weights using a batch from the weight
//! split with the logits held constant. Phase 2 takes an Adam step on the
//! logits using a batch from the arch split with the weights held constant;
//! its objective adds whatever extra term the caller supplies (the FLOPs
//! penalty during search, the column-sparse penalty during screening).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::real::Real;
use crate::supernet::{detection_loss, ArchParams, Checkpoint, Supernet};
use crate::tensor::{ParamBinding, ParamStore, Tape, Tensor, Var};
use crate::toytask::{Batch, Dataset, Split};

/// A model whose layers mix candidates under softmax-normalized logits.
pub trait Relaxed<T: Real> {
    type Batch;

    fn batch_split(batch: &Self::Batch) -> Split;
    fn batch_ids(batch: &Self::Batch) -> &[u64];
    fn arch(&self) -> &ArchParams<T>;
    fn arch_mut(&mut self) -> &mut ArchParams<T>;
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;

    /// Records the task loss for `batch` given one logits leaf per matrix.
    fn task_loss(&self, tape: &mut Tape<T>, bind: &mut ParamBinding, arch_vars: &[Var], batch: &Self::Batch)
        -> Result<Var>;

    /// Removes candidate `col` from matrix `matrix` and every layer it gates.
    fn remove_column(&mut self, matrix: usize, col: usize) -> Result<()>;
}

impl<T: Real> Relaxed<T> for Supernet<T> {
    type Batch = Batch<T>;

    fn batch_split(batch: &Batch<T>) -> Split {
        batch.split
    }

    fn batch_ids(batch: &Batch<T>) -> &[u64] {
        &batch.ids
    }

    fn arch(&self) -> &ArchParams<T> {
        &self.arch
    }

    fn arch_mut(&mut self) -> &mut ArchParams<T> {
        &mut self.arch
    }

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn task_loss(&self, tape: &mut Tape<T>, bind: &mut ParamBinding, arch_vars: &[Var], batch: &Batch<T>) -> Result<Var> {
        let x = tape.leaf_from(&batch.images, false);
        let (cls, bbox) = self.forward(tape, bind, x, arch_vars)?;
        detection_loss(tape, cls, bbox, &batch.labels, &batch.boxes)
    }

    fn remove_column(&mut self, matrix: usize, col: usize) -> Result<()> {
        let c = self.arch.matrices[matrix].component;
        self.remove_candidate(c, col)
    }
}

/// Which samples fed which kind of update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub weight_updates: BTreeMap<Split, usize>,
    pub arch_updates: BTreeMap<Split, usize>,
    pub weight_ids: BTreeSet<u64>,
    pub arch_ids: BTreeSet<u64>,
}

impl SplitAudit {
    fn record(&mut self, arch_phase: bool, split: Split, ids: &[u64]) {
        let (counts, seen) = if arch_phase {
            (&mut self.arch_updates, &mut self.arch_ids)
        } else {
            (&mut self.weight_updates, &mut self.weight_ids)
        };
        *counts.entry(split).or_default() += ids.len();
        seen.extend(ids.iter().copied());
    }

    /// `(arch-split samples in weight updates, weight-split samples in arch
    /// updates)`, checked both by tag and by sample id against `data`.
    pub fn leaks(&self, data: &Dataset) -> (usize, usize) {
        let arch_ids: BTreeSet<u64> = data.arch.iter().map(|s| s.id).collect();
        let weight_ids: BTreeSet<u64> = data.weight.iter().map(|s| s.id).collect();
        let by_tag_w = self.weight_updates.get(&Split::Arch).copied().unwrap_or(0);
        let by_tag_a = self.arch_updates.get(&Split::Weight).copied().unwrap_or(0);
        (
            by_tag_w + self.weight_ids.intersection(&arch_ids).count(),
            by_tag_a + self.arch_ids.intersection(&weight_ids).count(),
        )
    }
}

fn require_split(phase: &str, expected: Split, got: Split) -> Result<()> {
    if got != expected {
        return Err(Error::Split(format!(
            "{phase} step received a {} batch, expected {}",
            got.name(),
            expected.name()
        )));
    }
    Ok(())
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

/// Extra objective term for the architecture phase.
pub type ArchTerm<'a, T, M> = &'a dyn Fn(&M, &mut Tape<T>, &[Var]) -> Result<Option<Var>>;

/// Phase 1: one SGD step on the weights. Logits are untouched.
pub fn weight_step<T: Real, M: Relaxed<T>>(
    model: &mut M,
    batch: &M::Batch,
    sgd: &mut Sgd,
    lr: f64,
    audit: &mut SplitAudit,
) -> Result<f64> {
    require_split("weight", Split::Weight, M::batch_split(batch))?;
    let mut tape = Tape::new();
    let arch_vars: Vec<Var> = model
        .arch()
        .matrices
        .iter()
        .map(|m| tape.leaf_from(&m.logits, false))
        .collect();
    let mut bind = ParamBinding::new(model.store(), true);
    let loss = model.task_loss(&mut tape, &mut bind, &arch_vars, batch)?;
    let value = finite("weight-phase loss", tape.scalar(loss).as_f64())?;
    let grads = tape.backward(loss)?;
    let store = model.store_mut();
    store.zero_grad();
    grads.accumulate_into(&bind, store);
    let mut params: Vec<&mut Tensor<T>> = store.tensors_mut().collect();
    let norm = sgd.step(&mut params, lr);
    finite("weight gradient norm", norm)?;
    audit.record(false, Split::Weight, M::batch_ids(batch));
    Ok(value)
}

/// Task loss, total objective and d(total)/d(logits) per matrix at the
/// current weights, without updating anything.
pub fn arch_gradient<T: Real, M: Relaxed<T>>(
    model: &M,
    batch: &M::Batch,
    extra: ArchTerm<'_, T, M>,
) -> Result<(f64, f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let arch_vars: Vec<Var> = model
        .arch()
        .matrices
        .iter()
        .map(|m| tape.leaf_from(&m.logits, true))
        .collect();
    let mut bind = ParamBinding::new(model.store(), false);
    let task = model.task_loss(&mut tape, &mut bind, &arch_vars, batch)?;
    let total = match extra(model, &mut tape, &arch_vars)? {
        Some(e) => tape.add(task, e)?,
        None => task,
    };
    let task_v = tape.scalar(task).as_f64();
    let total_v = tape.scalar(total).as_f64();
    let grads = tape.backward(total)?;
    let g = arch_vars
        .iter()
        .zip(&model.arch().matrices)
        .map(|(&v, m)| {
            grads
                .get(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); m.logits.len()])
        })
        .collect();
    Ok((task_v, total_v, g))
}

/// Phase 2: one Adam step on the logits. Weights are untouched.
/// Returns `(task loss, total objective)` before the update.
pub fn arch_step<T: Real, M: Relaxed<T>>(
    model: &mut M,
    batch: &M::Batch,
    adam: &mut Adam,
    extra: ArchTerm<'_, T, M>,
    audit: &mut SplitAudit,
) -> Result<(f64, f64)> {
    require_split("architecture", Split::Arch, M::batch_split(batch))?;
    let (task, total, grads) = arch_gradient(model, batch, extra)?;
    finite("architecture-phase loss", total)?;
    let mut mats = model.arch_mut().tensors_mut();
    for (t, g) in mats.iter_mut().zip(&grads) {
        t.zero_grad();
        t.accumulate_grad(g);
    }
    adam.step(&mut mats);
    audit.record(true, Split::Arch, M::batch_ids(batch));
    Ok((task, total))
}

/// Task loss without any update (arch-split loss during warmup).
pub fn eval_loss<T: Real, M: Relaxed<T>>(model: &M, batch: &M::Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let arch_vars: Vec<Var> = model
        .arch()
        .matrices
        .iter()
        .map(|m| tape.leaf_from(&m.logits, false))
        .collect();
    let mut bind = ParamBinding::new(model.store(), false);
    let l = model.task_loss(&mut tape, &mut bind, &arch_vars, batch)?;
    Ok(tape.scalar(l).as_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub arch_warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub arch_lr: f64,
    pub cost_unit: CostUnit,
}

/// What one unit of cost means inside the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostUnit {
    /// The supernet's expected MACs under uniform mixing weights, so that
    /// `λ` weighs cost the same way whatever the network scale.
    Relative,
    Macs,
    Mmacs,
    Gmacs,
}

impl CostUnit {
    /// Multiplier turning MACs into cost units.
    pub fn scale(self, uniform_macs: f64) -> f64 {
        match self {
            CostUnit::Relative => 1.0 / uniform_macs.max(1.0),
            CostUnit::Macs => 1.0,
            CostUnit::Mmacs => 1e-6,
            CostUnit::Gmacs => 1e-9,
        }
    }
}

impl SearchConfig {
    pub fn paper() -> Self {
        Self {
            lambda: 0.01,
            epochs: 20,
            arch_warmup_epochs: 5,
            batch_size: 32,
            weight_lr: 0.04,
            momentum: 0.9,
            clip_norm: Some(5.0),
            arch_lr: 4e-4,
            cost_unit: CostUnit::Relative,
        }
    }

    /// Short schedule sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 16,
            arch_warmup_epochs: 4,
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config("lambda must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("epochs and batch_size must be positive"));
        }
        if self.arch_warmup_epochs > self.epochs {
            return Err(config("arch_warmup_epochs exceeds epochs"));
        }
        if self.weight_lr <= 0.0 || self.arch_lr <= 0.0 {
            return Err(config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config("momentum must lie in [0, 1)"));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(config("clip_norm must be positive when set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SearchResult<T> {
    pub arch: ArchParams<T>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub expected_flops: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub audit: SplitAudit,
}

impl<T: Real> SearchResult<T> {
    /// `epoch,train_loss,val_loss,expected_flops`
    pub fn write_trace<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss", "expected_flops"])?;
        for e in 0..self.train_loss.len() {
            w.write_record([
                e.to_string(),
                self.train_loss[e].to_string(),
                self.val_loss[e].to_string(),
                self.expected_flops[e].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    phase: &'a str,
    error: String,
    logits: Vec<Vec<Vec<f64>>>,
}

fn dump_and_fail<T: Real>(
    out: Option<&Path>,
    sn: &Supernet<T>,
    epoch: usize,
    step: usize,
    phase: &str,
    err: Error,
) -> Error {
    let Error::Numerical(msg) = &err else { return err };
    let mut msg = format!("epoch {epoch}, step {step}, {phase} phase: {msg}");
    if let Some(dir) = out {
        let dump = NanDump {
            epoch,
            step,
            phase,
            error: msg.clone(),
            logits: sn.arch.matrices.iter().map(|m| m.logit_rows()).collect(),
        };
        let path = dir.join("nan_dump.json");
        if let Ok(s) = serde_json::to_string_pretty(&dump) {
            if fs::write(&path, s).is_ok() {
                msg.push_str(&format!(" (diagnostics in {})", path.display()));
            }
        }
    }
    Error::Numerical(msg)
}

/// Runs the end-to-end search. With `out` set, writes one checkpoint per
/// epoch under `out/checkpoints/`.
pub fn run_search<T: Real>(
    sn: &mut Supernet<T>,
    data: &Dataset,
    cfg: &SearchConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<SearchResult<T>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.clip_norm);
    let mut adam = Adam::new(cfg.arch_lr);
    let mut audit = SplitAudit::default();
    let steps_per_epoch = data
        .spec
        .count(Split::Weight)
        .div_ceil(cfg.batch_size)
        .max(data.spec.count(Split::Arch).div_ceil(cfg.batch_size));
    let total = steps_per_epoch * cfg.epochs;
    let (lambda, unit) = (cfg.lambda, cfg.cost_unit.scale(sn.uniform_flops()));
    let cost = move |m: &Supernet<T>, tape: &mut Tape<T>, vars: &[Var]| -> Result<Option<Var>> {
        if lambda == 0.0 {
            return Ok(None);
        }
        let c = m.cost_term(tape, vars, unit)?;
        Ok(Some(tape.scale(c, T::of(lambda))))
    };
    let ckpt_dir = match out {
        Some(d) => {
            let p = d.join("checkpoints");
            fs::create_dir_all(&p)?;
            Some(p)
        }
        None => None,
    };
    let mut result = SearchResult {
        arch: sn.arch.clone(),
        train_loss: Vec::with_capacity(cfg.epochs),
        val_loss: Vec::with_capacity(cfg.epochs),
        expected_flops: Vec::with_capacity(cfg.epochs),
        checkpoints: Vec::new(),
        audit: SplitAudit::default(),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let wb = data.epoch_batches::<T>(Split::Weight, cfg.batch_size, seed, epoch);
        let ab = data.epoch_batches::<T>(Split::Arch, cfg.batch_size, seed, epoch);
        let searching = epoch >= cfg.arch_warmup_epochs;
        let (mut tl, mut vl) = (0.0, 0.0);
        for i in 0..steps_per_epoch {
            let lr = cosine_lr(cfg.weight_lr, step, total);
            let l = weight_step(sn, &wb[i % wb.len()], &mut sgd, lr, &mut audit)
                .map_err(|e| dump_and_fail(out, sn, epoch, step, "weight", e))?;
            tl += l;
            let a = &ab[i % ab.len()];
            vl += if searching {
                arch_step(sn, a, &mut adam, &cost, &mut audit)
                    .map_err(|e| dump_and_fail(out, sn, epoch, step, "architecture", e))?
                    .0
            } else {
                eval_loss(sn, a)?
            };
            step += 1;
        }
        if !sn.arch.all_finite() {
            return Err(dump_and_fail(
                out,
                sn,
                epoch,
                step,
                "architecture",
                Error::Numerical("non-finite logits".into()),
            ));
        }
        result.train_loss.push(tl / steps_per_epoch as f64);
        result.val_loss.push(vl / steps_per_epoch as f64);
        result.expected_flops.push(sn.expected_flops());
        if let Some(dir) = &ckpt_dir {
            let path = dir.join(format!("search_epoch_{epoch:03}.json"));
            Checkpoint::from_supernet(sn, seed, Some(epoch)).save(&path)?;
            result.checkpoints.push(path);
        }
    }
    result.arch = sn.arch.clone();
    result.audit = audit;
    Ok(result)
}
