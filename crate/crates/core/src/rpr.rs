//! Random partition relaxation: partition sampling, relaxation epochs, the
//! freezing-fraction / learning-rate schedule and the full training run.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use log::{info, warn};

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, TensorMap};
use crate::optim::{OptimKind, OptimState};
use crate::quantize::{project_nearest, LevelSet};
use crate::rng::Rng;

/// Tolerance absorbing representation error in `ff · n` (e.g. `0.9 · 10`).
const FF_ROUNDING_SLACK: f64 = 1e-9;

/// Number of frozen weights for freezing fraction `ff` over `n` weights.
pub fn frozen_count(ff: f64, n: usize) -> usize {
    ((ff * n as f64 + FF_ROUNDING_SLACK).floor() as usize).min(n)
}

/// Per-parameter frozen flags over all quantizable weights (`true` = frozen).
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMask {
    masks: BTreeMap<String, Vec<bool>>,
    frozen: usize,
    total: usize,
}

impl PartitionMask {
    pub fn from_masks(masks: BTreeMap<String, Vec<bool>>) -> Self {
        let frozen = masks.values().flatten().filter(|&&f| f).count();
        let total = masks.values().map(Vec::len).sum();
        PartitionMask { masks, frozen, total }
    }

    /// Mask with every quantizable element frozen (`true`) or relaxed (`false`).
    pub fn uniform(params: &[ParamGroup], frozen: bool) -> Self {
        PartitionMask::from_masks(
            params
                .iter()
                .filter(|p| p.is_quantizable())
                .map(|p| (p.name.clone(), vec![frozen; p.values.len()]))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.masks.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen
    }

    pub fn relaxed_count(&self) -> usize {
        self.total - self.frozen
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ff_actual(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.frozen as f64 / self.total as f64
        }
    }
}

/// Freezes exactly `frozen_count(ff, N_q)` weights drawn uniformly without
/// replacement from the pooled quantizable weights of `params` (in parameter
/// order, then row-major).
pub fn sample_partition(params: &[ParamGroup], ff: f64, rng: &mut Rng) -> Result<PartitionMask> {
    if !(0.0..=1.0).contains(&ff) {
        return Err(Error::InvalidArgument(format!("freezing fraction {ff} outside [0, 1]")));
    }
    let quantizable: Vec<&ParamGroup> = params.iter().filter(|p| p.is_quantizable()).collect();
    let n: usize = quantizable.iter().map(|p| p.values.len()).sum();
    let k = frozen_count(ff, n);
    let mut flags = vec![false; n];
    if k == n {
        flags.iter_mut().for_each(|f| *f = true);
    } else if k > 0 {
        // partial Fisher–Yates: the first k slots of the shuffled index list
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.below_usize(n - i);
            idx.swap(i, j);
            flags[idx[i]] = true;
        }
    }
    let mut masks = BTreeMap::new();
    let mut offset = 0;
    for p in quantizable {
        let len = p.values.len();
        masks.insert(p.name.clone(), flags[offset..offset + len].to_vec());
        offset += len;
    }
    Ok(PartitionMask::from_masks(masks))
}

/// Effective quantizable weights: frozen elements projected onto `levels`,
/// relaxed elements equal to their shadow values.
pub fn materialize_effective_weights(params: &[ParamGroup], mask: &PartitionMask, levels: &LevelSet) -> Result<TensorMap> {
    let mut out = TensorMap::new();
    for p in params.iter().filter(|p| p.is_quantizable()) {
        let mut w = p.values.clone();
        if let Some(frozen) = mask.get(&p.name) {
            if frozen.len() != w.len() {
                return Err(Error::ShapeMismatch {
                    op: "partition mask",
                    lhs: vec![frozen.len()],
                    rhs: w.shape().to_vec(),
                });
            }
            for (v, &f) in w.data_mut().iter_mut().zip(frozen) {
                if f {
                    *v = levels.nearest(*v);
                }
            }
        }
        out.insert(p.name.clone(), w);
    }
    Ok(out)
}

/// Loss, gradients and accuracy counts for one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub grads: TensorMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// A trainable problem over named parameter groups.
pub trait Objective {
    fn params(&self) -> &[ParamGroup];

    fn params_mut(&mut self) -> &mut [ParamGroup];

    /// Prepares epoch `epoch` (0-based) and returns its number of steps.
    fn begin_epoch(&mut self, epoch: u64) -> Result<usize>;

    /// Loss and gradients of step `step` with the given effective quantizable weights.
    fn step_grads(&mut self, step: usize, effective: &TensorMap) -> Result<StepOutput>;

    /// Held-out metrics; must not mutate any state.
    fn evaluate(&self, effective: &TensorMap) -> Result<EvalMetrics>;

    /// Calibrates and divides out per-filter scales of the quantizable weights.
    fn rescale(&mut self, levels: &LevelSet);

    /// Metric whose stabilization ends the initial phase (higher is better).
    fn stabilization_metric(&self, m: &EvalMetrics) -> f64 {
        m.accuracy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// One pass over the training data with a fixed partition. Frozen quantizable
/// elements are re-projected from their (unchanging) shadows every step and
/// receive no update.
pub fn rpr_epoch<O: Objective + ?Sized>(
    obj: &mut O,
    epoch: u64,
    mask: &PartitionMask,
    opt: &mut OptimState,
    levels: &LevelSet,
) -> Result<EpochMetrics> {
    let steps = obj.begin_epoch(epoch)?;
    let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
    for step in 0..steps {
        let effective = materialize_effective_weights(obj.params(), mask, levels)?;
        let out = obj.step_grads(step, &effective)?;
        opt.step(obj.params_mut(), &out.grads, Some(mask))?;
        loss_sum += out.loss * out.count as f64;
        correct += out.correct;
        count += out.count;
    }
    let denom = count.max(1) as f64;
    Ok(EpochMetrics {
        loss: loss_sum / denom,
        accuracy: correct as f64 / denom,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    InitialFf,
    FfRamp,
    FinalContinuous,
    Done,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::InitialFf => "initial_ff",
            Phase::FfRamp => "ff_ramp",
            Phase::FinalContinuous => "final_continuous",
            Phase::Done => "done",
        }
    }

    pub fn from_code(code: u8) -> Option<Phase> {
        [Phase::InitialFf, Phase::FfRamp, Phase::FinalContinuous, Phase::Done]
            .get(code as usize)
            .copied()
    }

    pub fn code(&self) -> u8 {
        *self as u8
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Schedule constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePlan {
    pub initial_ff: f64,
    pub ladder: Vec<f64>,
    pub epochs_per_rung: u32,
    /// Epochs at `base_lr` at the start of each rung before dividing by 10.
    pub lr_drop_after: u32,
    pub final_epochs_per_lr: u32,
    /// The final phase runs at `base_lr / d` for each `d` in turn.
    pub final_lr_divisors: Vec<f64>,
    pub patience: u32,
    pub min_delta: f64,
    pub max_initial_epochs: u32,
    pub base_lr: f64,
}

impl Default for SchedulePlan {
    fn default() -> Self {
        SchedulePlan {
            initial_ff: 0.9,
            ladder: vec![0.95, 0.975, 0.9875, 1.0],
            epochs_per_rung: 15,
            lr_drop_after: 10,
            final_epochs_per_lr: 10,
            final_lr_divisors: vec![1.0, 10.0, 100.0],
            patience: 5,
            min_delta: 0.001,
            max_initial_epochs: 50,
            base_lr: 1e-3,
        }
    }
}

impl SchedulePlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.initial_ff) {
            return bad(format!("initial_ff {} outside [0, 1]", self.initial_ff));
        }
        let mut prev = self.initial_ff;
        for &ff in &self.ladder {
            if !(0.0..=1.0).contains(&ff) || ff < prev {
                return bad(format!("ff ladder {:?} must be non-decreasing within [0, 1]", self.ladder));
            }
            prev = ff;
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base lr must be positive, got {}", self.base_lr));
        }
        if self.final_lr_divisors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return bad("final lr divisors must be positive".into());
        }
        if !self.ladder.is_empty() && self.epochs_per_rung == 0 {
            return bad("epochs_per_rung must be positive".into());
        }
        if !self.final_lr_divisors.is_empty() && self.final_epochs_per_lr == 0 {
            return bad("final_epochs_per_lr must be positive".into());
        }
        if self.max_initial_epochs == 0 {
            return bad("max_initial_epochs must be positive".into());
        }
        Ok(())
    }

    /// Total epochs after the initial phase.
    pub fn post_initial_epochs(&self) -> u32 {
        self.ladder.len() as u32 * self.epochs_per_rung + self.final_lr_divisors.len() as u32 * self.final_epochs_per_lr
    }
}

/// Schedule position. `phase`, `ff` and `lr` describe the next epoch to run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub plan: SchedulePlan,
    pub phase: Phase,
    pub ff: f64,
    pub lr: f64,
    /// Ladder index in `FfRamp`, lr-factor index in `FinalContinuous`.
    pub rung: usize,
    /// Epochs completed in the current phase segment.
    pub epochs_at_ff: u32,
    pub best_val: f64,
    pub epochs_since_improve: u32,
    /// Epochs completed over the whole run.
    pub epoch: u64,
}

impl ScheduleState {
    pub fn new(plan: SchedulePlan) -> Result<Self> {
        plan.validate()?;
        if !(0.75..=0.925).contains(&plan.initial_ff) {
            warn!(
                "initial freezing fraction {} is outside the commonly used range [0.75, 0.925]",
                plan.initial_ff
            );
        }
        Ok(ScheduleState {
            phase: Phase::InitialFf,
            ff: plan.initial_ff,
            lr: plan.base_lr,
            rung: 0,
            epochs_at_ff: 0,
            best_val: f64::NEG_INFINITY,
            epochs_since_improve: 0,
            epoch: 0,
            plan,
        })
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn enter_ramp(&mut self) {
        self.epochs_at_ff = 0;
        self.rung = 0;
        match self.plan.ladder.first() {
            Some(&ff) => {
                self.phase = Phase::FfRamp;
                self.ff = ff;
                self.lr = self.plan.base_lr;
            }
            None => self.enter_final(),
        }
    }

    fn enter_final(&mut self) {
        self.epochs_at_ff = 0;
        self.rung = 0;
        match self.plan.final_lr_divisors.first() {
            Some(&f) => {
                self.phase = Phase::FinalContinuous;
                self.lr = self.plan.base_lr / f;
            }
            None => self.phase = Phase::Done,
        }
    }
}

/// Advances the schedule past one completed epoch with validation metric `val`.
pub fn schedule_step(state: &ScheduleState, val: f64) -> ScheduleState {
    let mut s = state.clone();
    if s.phase == Phase::Done {
        return s;
    }
    s.epoch += 1;
    s.epochs_at_ff += 1;
    match s.phase {
        Phase::InitialFf => {
            if val > s.best_val + s.plan.min_delta {
                s.best_val = val;
                s.epochs_since_improve = 0;
            } else {
                s.epochs_since_improve += 1;
            }
            if s.epochs_since_improve >= s.plan.patience || s.epochs_at_ff >= s.plan.max_initial_epochs {
                s.enter_ramp();
            }
        }
        Phase::FfRamp => {
            if s.epochs_at_ff >= s.plan.epochs_per_rung {
                s.rung += 1;
                s.epochs_at_ff = 0;
                match s.plan.ladder.get(s.rung) {
                    Some(&ff) => {
                        s.ff = ff;
                        s.lr = s.plan.base_lr;
                    }
                    None => s.enter_final(),
                }
            } else {
                s.lr = if s.epochs_at_ff < s.plan.lr_drop_after {
                    s.plan.base_lr
                } else {
                    s.plan.base_lr / 10.0
                };
            }
        }
        Phase::FinalContinuous => {
            if s.epochs_at_ff >= s.plan.final_epochs_per_lr {
                s.rung += 1;
                s.epochs_at_ff = 0;
                match s.plan.final_lr_divisors.get(s.rung) {
                    Some(&f) => s.lr = s.plan.base_lr / f,
                    None => s.phase = Phase::Done,
                }
            }
        }
        Phase::Done => unreachable!(),
    }
    s
}

/// One row of the metrics history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u64,
    pub phase: Phase,
    pub ff: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RprConfig {
    pub levels: LevelSet,
    pub plan: SchedulePlan,
    pub optimizer: OptimKind,
    pub seed: u64,
    /// Calibrate and divide out per-filter scales before training.
    pub rescale: bool,
}

/// Stream index for partition sampling, see [`Rng::derive`].
pub const PARTITION_STREAM: u64 = 0x7061_7274;

/// Resumable state of an RPR run.
#[derive(Debug, Clone, PartialEq)]
pub struct RprRun {
    pub schedule: ScheduleState,
    pub optim: OptimState,
    pub rng: Rng,
    pub history: Vec<EpochRecord>,
    pub levels: LevelSet,
}

impl RprRun {
    pub fn new(cfg: &RprConfig) -> Result<Self> {
        Ok(RprRun {
            schedule: ScheduleState::new(cfg.plan.clone())?,
            optim: OptimState::new(cfg.optimizer, cfg.plan.base_lr)?,
            rng: Rng::derive(cfg.seed, PARTITION_STREAM, 0),
            history: Vec::new(),
            levels: cfg.levels.clone(),
        })
    }

    /// Runs a single epoch of the schedule. Returns `None` once done.
    pub fn run_epoch<O: Objective + ?Sized>(&mut self, obj: &mut O) -> Result<Option<EpochRecord>> {
        if self.schedule.is_done() {
            return Ok(None);
        }
        let start = Instant::now();
        let s = &self.schedule;
        let (phase, ff, lr, epoch) = (s.phase, s.ff, s.lr, s.epoch);
        let mask = sample_partition(obj.params(), ff, &mut self.rng)?;
        self.optim.set_lr(lr)?;
        let train = rpr_epoch(obj, epoch, &mask, &mut self.optim, &self.levels)?;
        let effective = materialize_effective_weights(obj.params(), &mask, &self.levels)?;
        let val = obj.evaluate(&effective)?;
        self.schedule = schedule_step(&self.schedule, obj.stabilization_metric(&val));
        let record = EpochRecord {
            epoch: epoch + 1,
            phase,
            ff,
            lr,
            train_loss: train.loss,
            train_acc: train.accuracy,
            val_loss: val.loss,
            val_acc: val.accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {} {} ff={} lr={:e} train_loss={:.5} train_acc={:.4} val_loss={:.5} val_acc={:.4}",
            record.epoch, phase, ff, lr, train.loss, train.accuracy, val.loss, val.accuracy
        );
        self.history.push(record.clone());
        Ok(Some(record))
    }

    /// Runs the remaining schedule, calling `on_epoch` after each epoch, then
    /// applies the final projection if the run ended fully frozen.
    pub fn run<O: Objective + ?Sized>(&mut self, obj: &mut O, mut on_epoch: impl FnMut(&RprRun, &EpochRecord) -> Result<()>) -> Result<()> {
        while let Some(record) = self.run_epoch(obj)? {
            on_epoch(self, &record)?;
        }
        self.finish(obj);
        Ok(())
    }

    /// Final projection: once the schedule has ended fully frozen, every
    /// quantizable shadow weight is replaced by its nearest level.
    pub fn finish<O: Objective + ?Sized>(&self, obj: &mut O) {
        if self.schedule.is_done() && self.schedule.ff >= 1.0 {
            project_all(obj.params_mut(), &self.levels);
        }
    }
}

/// Replaces every quantizable shadow weight by its nearest level.
pub fn project_all(params: &mut [ParamGroup], levels: &LevelSet) {
    for p in params.iter_mut().filter(|p| p.is_quantizable()) {
        p.values = project_nearest(&p.values, levels);
    }
}

/// Rescale (if configured), then the full schedule. Returns the metrics history.
pub fn run_rpr<O: Objective + ?Sized>(obj: &mut O, cfg: &RprConfig) -> Result<Vec<EpochRecord>> {
    if cfg.rescale {
        obj.rescale(&cfg.levels);
    }
    let mut run = RprRun::new(cfg)?;
    run.run(obj, |_, _| Ok(()))?;
    Ok(run.history)
}

/// Fraction of quantizable weights lying exactly in `levels`.
pub fn fraction_in_levels(params: &[ParamGroup], levels: &LevelSet) -> f64 {
    let (inside, total) = params
        .iter()
        .filter(|p| p.is_quantizable())
        .flat_map(|p| p.values.data())
        .fold((0usize, 0usize), |(i, t), &v| (i + levels.contains(v) as usize, t + 1));
    if total == 0 {
        1.0
    } else {
        inside as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use crate::tensor::Tensor;

    fn params(n: usize) -> Vec<ParamGroup> {
        vec![
            ParamGroup::new("a", Tensor::from_fn(&[n / 2], |i| i as f64 * 0.1 - 0.4), ParamKind::Quantizable, Some(0)),
            ParamGroup::new("c", Tensor::zeros(&[3]), ParamKind::Continuous, None),
            ParamGroup::new("b", Tensor::from_fn(&[n - n / 2], |i| 0.37 - i as f64 * 0.2), ParamKind::Quantizable, Some(0)),
        ]
    }

    #[test]
    fn partition_counts() {
        let p = params(10);
        let mut rng = Rng::new(1);
        let m = sample_partition(&p, 0.9, &mut rng).unwrap();
        assert_eq!((m.frozen_count(), m.relaxed_count()), (9, 1));
        assert_eq!(sample_partition(&p, 1.0, &mut rng).unwrap().frozen_count(), 10);
        assert_eq!(sample_partition(&p, 0.0, &mut rng).unwrap().frozen_count(), 0);
        assert!(m.get("c").is_none());
        assert!(sample_partition(&p, 1.5, &mut rng).is_err());
    }

    #[test]
    fn partition_is_deterministic() {
        let p = params(40);
        let a = sample_partition(&p, 0.5, &mut Rng::new(9)).unwrap();
        let b = sample_partition(&p, 0.5, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn materialize_boundaries() {
        let p = params(10);
        let t = LevelSet::ternary();
        let all = materialize_effective_weights(&p, &PartitionMask::uniform(&p, true), &t).unwrap();
        assert!(all.values().flat_map(|w| w.data()).all(|&v| t.contains(v)));
        let none = materialize_effective_weights(&p, &PartitionMask::uniform(&p, false), &t).unwrap();
        assert_eq!(none["a"], p[0].values);
        assert_eq!(none["b"], p[2].values);
        assert!(!none.contains_key("c"));
    }

    fn run_schedule(stop_improving_after: u64) -> Vec<(Phase, f64, f64)> {
        let mut s = ScheduleState::new(SchedulePlan::default()).unwrap();
        let mut out = Vec::new();
        while !s.is_done() {
            out.push((s.phase, s.ff, s.lr));
            let val = if s.epoch < stop_improving_after { s.epoch as f64 * 0.01 } else { 0.0 };
            s = schedule_step(&s, val);
        }
        out
    }

    #[test]
    fn patience_triggered_transition_at_epoch_37() {
        let seq = run_schedule(32);
        let initial = seq.iter().filter(|e| e.0 == Phase::InitialFf).count();
        let ramp = seq.iter().filter(|e| e.0 == Phase::FfRamp).count();
        let fin = seq.iter().filter(|e| e.0 == Phase::FinalContinuous).count();
        assert_eq!((initial, ramp, fin), (37, 60, 30));
    }

    #[test]
    fn ladder_and_lr_sequence() {
        let seq = run_schedule(0);
        let ramp: Vec<_> = seq.iter().filter(|e| e.0 == Phase::FfRamp).collect();
        let mut ladder: Vec<f64> = ramp.iter().map(|e| e.1).collect();
        ladder.dedup();
        assert_eq!(ladder, vec![0.95, 0.975, 0.9875, 1.0]);
        // rung 0.95, epoch-in-rung 11
        assert_eq!(ramp[10].2, 1e-4);
        assert_eq!(ramp[9].2, 1e-3);
        let fin: Vec<f64> = seq.iter().filter(|e| e.0 == Phase::FinalContinuous).map(|e| e.2).collect();
        assert_eq!(fin.len(), 30);
        assert!(fin[..10].iter().all(|&l| l == 1e-3));
        assert!(fin[10..20].iter().all(|&l| l == 1e-4));
        assert!(fin[20..].iter().all(|&l| l == 1e-5));
    }

    #[test]
    fn initial_phase_is_capped() {
        let mut s = ScheduleState::new(SchedulePlan::default()).unwrap();
        let mut n = 0;
        while s.phase == Phase::InitialFf {
            s = schedule_step(&s, n as f64);
            n += 1;
        }
        assert_eq!(n, 50);
    }

    #[test]
    fn rejects_decreasing_ladder() {
        let plan = SchedulePlan {
            ladder: vec![0.95, 0.93],
            ..SchedulePlan::default()
        };
        assert!(ScheduleState::new(plan).is_err());
    }
}
