//! Search-space screening: learn scores over the full candidate pool under a
//! column-sparse penalty and progressively drop the weakest candidates.
//!
//! A column's score is the L2 norm, over layers, of its softmax mixing
//! weights. Scores of logits would not be translation invariant, while the
//! mixture is.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::real::Real;
use crate::search::{arch_gradient, weight_step, Relaxed, SplitAudit};
use crate::supernet::{ArchMatrix, ArchParams};
use crate::tensor::{ParamBinding, ParamStore, Tape, Tensor, Var};
use crate::toytask::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    /// `μ · min_i ‖p_·i‖`: only the weakest column is penalized.
    Min,
    /// `μ · Σ_i ‖p_·i‖`: group-lasso form.
    Sum,
}

/// Per-column L2 norms of row-stochastic weights.
pub fn column_norms(probs: &[Vec<f64>]) -> Vec<f64> {
    let n = probs.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| probs.iter().map(|r| r[i] * r[i]).sum::<f64>().sqrt())
        .collect()
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Index of the smallest norm; ties go to the lower index.
pub fn weakest_column(norms: &[f64]) -> usize {
    norms
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v < norms[b] { i } else { b })
}

/// Differentiable `μ · reduce_i sqrt(Σ_l softmax(logits)_li²)`.
pub fn sparsity_penalty<T: Real>(tape: &mut Tape<T>, logits: Var, mu: f64, kind: Penalty) -> Result<Var> {
    let p = tape.softmax_rows(logits)?;
    let sq = tape.square(p);
    let cols = tape.sum_rows(sq)?;
    let norms = tape.sqrt(cols);
    let r = match kind {
        Penalty::Min => tape.min_all(norms)?,
        Penalty::Sum => tape.sum(norms),
    };
    Ok(tape.scale(r, T::of(mu)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningConfig {
    pub mu: f64,
    pub penalty: Penalty,
    /// Surviving candidates per component (backbone, neck, head).
    pub targets: Vec<usize>,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Number of evenly spaced removal events after warmup.
    pub removal_events: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub arch_lr: f64,
    /// Stage-depth multiplier for the screening supernet.
    pub depth_factor: f64,
    /// Screen one component at a time instead of all in one pass.
    pub sequential: bool,
    /// Skip weight updates entirely.
    pub arch_only: bool,
}

impl ScreeningConfig {
    pub fn paper() -> Self {
        Self {
            mu: 0.1,
            penalty: Penalty::Min,
            targets: vec![8, 8, 8],
            epochs: 12,
            warmup_epochs: 6,
            removal_events: 6,
            batch_size: 32,
            weight_lr: 0.04,
            momentum: 0.9,
            clip_norm: Some(5.0),
            arch_lr: 4e-4,
            depth_factor: 0.5,
            sequential: false,
            arch_only: false,
        }
    }

    /// Short schedule sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 4,
            warmup_epochs: 2,
            removal_events: 4,
            batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(config("mu must be finite and non-negative"));
        }
        if self.targets.contains(&0) {
            return Err(config("screening targets must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("screening epochs and batch_size must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(config("screening warmup must leave at least one search epoch"));
        }
        if !(self.depth_factor > 0.0 && self.depth_factor <= 1.0) {
            return Err(config("depth_factor must lie in (0, 1]"));
        }
        if self.arch_lr <= 0.0 || self.weight_lr <= 0.0 {
            return Err(config("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub step: usize,
    pub epoch: usize,
    pub component: String,
    pub op_name: String,
    pub column_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub component: String,
    pub op_name: String,
    pub column_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningState {
    /// Surviving column names per matrix, in column order.
    pub active: Vec<Vec<String>>,
    pub removal_log: Vec<Removal>,
    pub trace: Vec<TraceRow>,
    pub mu: f64,
    pub targets: Vec<usize>,
    pub audit: SplitAudit,
}

impl ScreeningState {
    /// `step,component,op_name,column_norm`
    pub fn write_trace<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "component", "op_name", "column_norm"])?;
        for r in &self.trace {
            w.write_record([r.step.to_string(), r.component.clone(), r.op_name.clone(), r.column_norm.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean over matrices of the variance of column norms at the last traced step.
    pub fn final_norm_variance<T: Real>(arch: &ArchParams<T>) -> f64 {
        let v: Vec<f64> = arch
            .matrices
            .iter()
            .map(|m| variance(&column_norms(&m.probabilities())))
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Arch-step indices (1-based, counted after warmup) at which removal events fire.
pub fn removal_steps(arch_steps: usize, events: usize) -> Vec<usize> {
    (0..events).map(|k| ((k + 1) * arch_steps) / (events + 1)).collect()
}

/// Ops to remove from a matrix with `excess` surplus columns at event `k` of `events`.
pub fn removals_at(excess: usize, k: usize, events: usize) -> usize {
    excess * (k + 1) / events - excess * k / events
}

/// Source of tagged batches for one epoch.
pub type Batches<'a, B> = &'a dyn Fn(Split, usize) -> Vec<B>;

fn trace<T: Real>(rows: &mut Vec<TraceRow>, step: usize, m: &ArchMatrix<T>) {
    for (name, norm) in m.cols.iter().zip(column_norms(&m.probabilities())) {
        rows.push(TraceRow {
            step,
            component: m.component.name().to_string(),
            op_name: name.clone(),
            column_norm: norm,
        });
    }
}

/// Screens `model` down to `cfg.targets` columns per matrix.
pub fn screen<T: Real, M: Relaxed<T>>(model: &mut M, batches: Batches<'_, M::Batch>, cfg: &ScreeningConfig) -> Result<ScreeningState> {
    cfg.validate()?;
    let n_mats = model.arch().matrices.len();
    if cfg.targets.len() != n_mats {
        return Err(config(format!("{} screening targets for {n_mats} components", cfg.targets.len())));
    }
    for (m, &t) in model.arch().matrices.iter().zip(&cfg.targets) {
        if t > m.n_cols() {
            return Err(config(format!(
                "{} target {t} exceeds the {} available candidates",
                m.component,
                m.n_cols()
            )));
        }
    }
    let groups: Vec<Vec<usize>> = if cfg.sequential {
        (0..n_mats).map(|i| vec![i]).collect()
    } else {
        vec![(0..n_mats).collect()]
    };
    let mut state = ScreeningState {
        active: Vec::new(),
        removal_log: Vec::new(),
        trace: Vec::new(),
        mu: cfg.mu,
        targets: cfg.targets.clone(),
        audit: SplitAudit::default(),
    };
    let mut sgd = Sgd::new(cfg.momentum, cfg.clip_norm);
    let mut step = 0usize;
    let mut epoch_base = 0usize;
    for group in &groups {
        screen_group(model, batches, cfg, group, &mut sgd, &mut state, &mut step, epoch_base)?;
        epoch_base += cfg.epochs;
    }
    state.active = model.arch().matrices.iter().map(|m| m.cols.clone()).collect();
    Ok(state)
}

#[allow(clippy::too_many_arguments)]
fn screen_group<T: Real, M: Relaxed<T>>(
    model: &mut M,
    batches: Batches<'_, M::Batch>,
    cfg: &ScreeningConfig,
    group: &[usize],
    sgd: &mut Sgd,
    state: &mut ScreeningState,
    step: &mut usize,
    epoch_base: usize,
) -> Result<()> {
    let probe_w = batches(Split::Weight, epoch_base);
    let probe_a = batches(Split::Arch, epoch_base);
    let per_epoch = if cfg.arch_only { probe_a.len() } else { probe_w.len().max(probe_a.len()) };
    let arch_steps = (cfg.epochs - cfg.warmup_epochs) * per_epoch;
    let excess: Vec<usize> = group
        .iter()
        .map(|&i| model.arch().matrices[i].n_cols() - cfg.targets[i])
        .collect();
    let max_excess = excess.iter().copied().max().unwrap_or(0);
    let events = if max_excess == 0 { 0 } else { cfg.removal_events.clamp(1, max_excess) };
    if events > arch_steps {
        return Err(config(format!(
            "{events} removal events need at least as many architecture steps, only {arch_steps} scheduled"
        )));
    }
    let at = removal_steps(arch_steps, events);
    let mut adam = Adam::new(cfg.arch_lr);
    let total_weight_steps = cfg.epochs * per_epoch;
    let mut arch_done = 0usize;
    let mut event = 0usize;
    let mut wstep = 0usize;
    let penalty = |_: &M, tape: &mut Tape<T>, vars: &[Var]| -> Result<Option<Var>> {
        if cfg.mu == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for &i in group {
            let p = sparsity_penalty(tape, vars[i], cfg.mu, cfg.penalty)?;
            total = Some(match total {
                Some(t) => tape.add(t, p)?,
                None => p,
            });
        }
        Ok(total)
    };

    for e in 0..cfg.epochs {
        let epoch = epoch_base + e;
        let wb = if cfg.arch_only { Vec::new() } else { batches(Split::Weight, epoch) };
        let ab = batches(Split::Arch, epoch);
        for s in 0..per_epoch {
            if !cfg.arch_only {
                let lr = cosine_lr(cfg.weight_lr, wstep, total_weight_steps);
                weight_step(model, &wb[s % wb.len()], sgd, lr, &mut state.audit)?;
                wstep += 1;
            }
            if e < cfg.warmup_epochs {
                continue;
            }
            let batch = &ab[s % ab.len()];
            if M::batch_split(batch) != Split::Arch {
                return Err(crate::Error::Split(format!(
                    "architecture step received a {} batch",
                    M::batch_split(batch).name()
                )));
            }
            let (_, total, grads) = arch_gradient(model, batch, &penalty)?;
            if !total.is_finite() {
                return Err(crate::Error::Numerical(format!("screening objective is {total} at step {}", *step)));
            }
            {
                let mats = &mut model.arch_mut().matrices;
                let mut active: Vec<&mut Tensor<T>> = Vec::with_capacity(group.len());
                for (i, m) in mats.iter_mut().enumerate() {
                    if group.contains(&i) {
                        m.logits.zero_grad();
                        m.logits.accumulate_grad(&grads[i]);
                        active.push(&mut m.logits);
                    }
                }
                adam.step(&mut active);
            }
            state.audit_arch(M::batch_ids(batch));
            arch_done += 1;
            *step += 1;
            for &i in group {
                trace(&mut state.trace, *step, &model.arch().matrices[i]);
            }
            while event < events && arch_done >= at[event] {
                for (gi, &i) in group.iter().enumerate() {
                    for _ in 0..removals_at(excess[gi], event, events) {
                        let m = &model.arch().matrices[i];
                        let norms = column_norms(&m.probabilities());
                        let col = weakest_column(&norms);
                        state.removal_log.push(Removal {
                            step: *step,
                            epoch,
                            component: m.component.name().to_string(),
                            op_name: m.cols[col].clone(),
                            column_norm: norms[col],
                        });
                        let slot = group.iter().position(|&g| g == i).expect("member");
                        adam.remove_column(slot, m.n_cols(), col);
                        model.remove_column(i, col)?;
                    }
                }
                event += 1;
            }
        }
    }
    for &i in group {
        let m = &model.arch().matrices[i];
        if m.n_cols() != cfg.targets[i] {
            return Err(config(format!(
                "{} ended screening with {} candidates instead of {}",
                m.component,
                m.n_cols(),
                cfg.targets[i]
            )));
        }
    }
    Ok(())
}

impl ScreeningState {
    fn audit_arch(&mut self, ids: &[u64]) {
        *self.audit.arch_updates.entry(Split::Arch).or_default() += ids.len();
        self.audit.arch_ids.extend(ids.iter().copied());
    }
}

/// Scalar regression through two mixed layers of fixed-gain candidates:
/// `y = exp(s) · mix₂(mix₁(x))`, target `y = x`. The log-scale `s` is the
/// only weight.
#[derive(Debug, Clone)]
pub struct ChainModel<T> {
    pub gains: Vec<f64>,
    arch: ArchParams<T>,
    store: ParamStore<T>,
}

#[derive(Debug, Clone)]
pub struct ChainBatch {
    pub split: Split,
    pub x: Vec<f64>,
    pub ids: Vec<u64>,
}

/// The four synthetic candidates, in column order.
pub const CHAIN_OPS: [(&str, f64); 4] = [("copy", 1.0), ("negate", -1.0), ("zero", 0.0), ("double", 2.0)];

impl<T: Real> ChainModel<T> {
    pub fn new(ops: &[(&str, f64)], log_scale: f64) -> Self {
        let mut store = ParamStore::new();
        store.insert("chain.log_scale", Tensor::new(vec![1], vec![T::of(log_scale)]).expect("sized"));
        let m = ArchMatrix::zeros(
            crate::opspace::Component::Backbone,
            vec!["l0".into(), "l1".into()],
            ops.iter().map(|(n, _)| n.to_string()).collect(),
        );
        Self {
            gains: ops.iter().map(|&(_, g)| g).collect(),
            arch: ArchParams::new(vec![m]),
            store,
        }
    }

    pub fn log_scale(&self) -> f64 {
        self.store.get(crate::tensor::ParamKey(0)).data()[0].as_f64()
    }
}

/// Standard-normal inputs for the chain task, ids unique per (split, index).
pub fn chain_batches(seed: u64, split: Split, n: usize, batch: usize, epoch: usize) -> Vec<ChainBatch> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = crate::seeding::substream(seed, &format!("chain/{}", split.name()));
    let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let tag = match split {
        Split::Weight => 1u64,
        Split::Arch => 2,
        Split::Test => 3,
        Split::Train => 4,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut srng = crate::seeding::substream(seed, &format!("chain/shuffle/{}/{epoch}", split.name()));
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut srng, 0..=i);
        order.swap(i, j);
    }
    order
        .chunks(batch.max(1))
        .map(|idx| ChainBatch {
            split,
            x: idx.iter().map(|&i| xs[i]).collect(),
            ids: idx.iter().map(|&i| (tag << 32) | i as u64).collect(),
        })
        .collect()
}

impl<T: Real> Relaxed<T> for ChainModel<T> {
    type Batch = ChainBatch;

    fn batch_split(b: &ChainBatch) -> Split {
        b.split
    }

    fn batch_ids(b: &ChainBatch) -> &[u64] {
        &b.ids
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

    fn task_loss(&self, tape: &mut Tape<T>, bind: &mut ParamBinding, arch_vars: &[Var], b: &ChainBatch) -> Result<Var> {
        let n = b.x.len();
        let x = tape.constant(vec![n], b.x.iter().map(|&v| T::of(v)).collect())?;
        let probs = tape.softmax_rows(arch_vars[0])?;
        let mut h = x;
        for row in 0..2 {
            let outs: Vec<Var> = self.gains.iter().map(|&g| tape.scale(h, T::of(g))).collect();
            let w = tape.row(probs, row)?;
            h = tape.weighted_sum(&outs, w)?;
        }
        let s = bind.var(tape, &self.store, crate::tensor::ParamKey(0));
        let scale = tape.exp(s);
        let y = tape.scale_by(h, scale)?;
        let d = tape.sub(y, x)?;
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    }

    fn remove_column(&mut self, matrix: usize, col: usize) -> Result<()> {
        if self.gains.len() <= 1 {
            return Err(config("cannot remove the last candidate"));
        }
        self.gains.remove(col);
        self.arch.matrices[matrix].remove_column(col);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_of_uniform_matrix() {
        let probs = vec![vec![0.25; 4]; 3];
        for n in column_norms(&probs) {
            assert!((n - 3f64.sqrt() / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn norms_hand_example() {
        let n = column_norms(&[vec![0.6, 0.4], vec![0.8, 0.2]]);
        assert!((n[0] - 1.0).abs() < 1e-15);
        assert!((n[1] - 0.2f64.sqrt()).abs() < 1e-15);
        assert_eq!(column_norms(&[vec![1.0], vec![1.0]]), vec![2f64.sqrt()]);
    }

    fn penalty_for(probs: [[f64; 2]; 2], mu: f64, kind: Penalty) -> f64 {
        let mut tape = Tape::<f64>::new();
        let logits: Vec<f64> = probs.iter().flatten().map(|p| p.ln()).collect();
        let v = tape.constant(vec![2, 2], logits).unwrap();
        let p = sparsity_penalty(&mut tape, v, mu, kind).unwrap();
        tape.scalar(p)
    }

    #[test]
    fn penalty_variants() {
        let probs = [[0.6, 0.4], [0.8, 0.2]];
        assert_eq!(penalty_for(probs, 0.0, Penalty::Min), 0.0);
        assert!((penalty_for(probs, 0.1, Penalty::Min) - 0.1 * 0.2f64.sqrt()).abs() < 1e-12);
        assert!((penalty_for(probs, 0.1, Penalty::Sum) - 0.1 * (1.0 + 0.2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_even_and_exhaustive() {
        assert_eq!(removal_steps(100, 3), vec![25, 50, 75]);
        let total: usize = (0..6).map(|k| removals_at(24, k, 6)).sum();
        assert_eq!(total, 24);
        assert!((0..6).all(|k| removals_at(24, k, 6) == 4));
        assert_eq!((0..4).map(|k| removals_at(2, k, 4)).sum::<usize>(), 2);
    }

    #[test]
    fn ties_break_low() {
        assert_eq!(weakest_column(&[0.3, 0.1, 0.1, 0.2]), 1);
    }

    fn chain_cfg(targets: usize, mu: f64) -> ScreeningConfig {
        ScreeningConfig {
            mu,
            targets: vec![targets],
            epochs: 10,
            warmup_epochs: 0,
            removal_events: 2,
            batch_size: 16,
            weight_lr: 0.01,
            arch_lr: 0.05,
            ..ScreeningConfig::paper()
        }
    }

    #[test]
    fn identity_screening_logs_nothing() {
        let mut m = ChainModel::<f64>::new(&CHAIN_OPS, 0.0);
        let b = |s, e| chain_batches(0, s, 32, 16, e);
        let st = screen(&mut m, &b, &chain_cfg(4, 0.1)).unwrap();
        assert!(st.removal_log.is_empty());
        assert_eq!(st.active[0].len(), 4);
    }

    #[test]
    fn few_arch_steps_still_reach_targets() {
        let mut m = ChainModel::<f64>::new(&CHAIN_OPS, 0.0);
        let b = |s, e| chain_batches(0, s, 32, 16, e);
        let cfg = ScreeningConfig {
            epochs: 2,
            warmup_epochs: 1,
            removal_events: 4,
            ..chain_cfg(2, 0.1)
        };
        let st = screen(&mut m, &b, &cfg).unwrap();
        assert_eq!(st.active[0].len(), 2);
        assert_eq!(st.removal_log.len(), 2);
    }

    #[test]
    fn target_above_catalogue_rejected() {
        let mut m = ChainModel::<f64>::new(&CHAIN_OPS, 0.0);
        let b = |s, e| chain_batches(0, s, 32, 16, e);
        assert!(screen(&mut m, &b, &chain_cfg(5, 0.1)).is_err());
    }

    #[test]
    fn identical_candidates_keep_norms_equal() {
        let ops = [("a", 1.0), ("b", 1.0), ("c", 1.0), ("d", 1.0)];
        let mut m = ChainModel::<f64>::new(&ops, 0.3);
        let b = |s, e| chain_batches(1, s, 32, 16, e);
        let cfg = ScreeningConfig { arch_only: true, ..chain_cfg(4, 0.0) };
        screen(&mut m, &b, &cfg).unwrap();
        let norms = column_norms(&m.arch().matrices[0].probabilities());
        assert!(norms.iter().all(|n| (n - norms[0]).abs() < 1e-9));
    }
}
