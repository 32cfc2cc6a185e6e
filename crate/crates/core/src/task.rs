//! Supervised classification on a [`Model`]: batching, augmentation,
//! evaluation and the plain (unquantized) training loop.

use crate::data::{augment, center_crop, Augment, Dataset};
use crate::error::{Error, Result};
use crate::nn::{count_correct, loss_cross_entropy, Mode, Model, ParamGroup, TensorMap};
use crate::optim::OptimState;
use crate::quantize::{rescale_model, LevelSet};
use crate::rng::Rng;
use crate::rpr::{EpochMetrics, EvalMetrics, Objective, StepOutput};
use crate::tensor::Tensor;

/// Stream indices for [`Rng::derive`].
pub const ORDER_STREAM: u64 = 0x6f72_6472;
pub const AUGMENT_STREAM: u64 = 0x6175_676d;

const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone)]
pub struct ClassificationTask {
    pub model: Model,
    pub train: Dataset,
    pub val: Dataset,
    pub batch_size: usize,
    pub augment: Augment,
    /// Examples drawn (without replacement) per epoch; `None` uses all.
    pub epoch_samples: Option<usize>,
    pub seed: u64,
    order: Vec<usize>,
    aug_rng: Rng,
}

impl ClassificationTask {
    pub fn new(model: Model, train: Dataset, val: Dataset, batch_size: usize, augment: Augment, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(ClassificationTask {
            model,
            train,
            val,
            batch_size,
            augment,
            epoch_samples: None,
            seed,
            order: Vec::new(),
            aug_rng: Rng::new(seed),
        })
    }

    fn crop(&self, data: &Dataset) -> (usize, usize) {
        self.augment.crop.unwrap_or_else(|| match data.sample_shape() {
            [_, h, w] => (*h, *w),
            _ => (1, 1),
        })
    }

    fn prepare_eval(&self, data: &Dataset, x: Tensor) -> Result<Tensor> {
        let mut x = if self.augment.pad > 0 || self.augment.crop.is_some() {
            center_crop(&x, self.augment.pad, self.crop(data))?
        } else {
            x
        };
        data.normalization.apply(&mut x);
        Ok(x)
    }

    /// Eval-mode loss and accuracy of the model on `data`.
    pub fn evaluate_on(&self, data: &Dataset, effective: &TensorMap) -> Result<EvalMetrics> {
        evaluate_model(&self.model, data, effective, |x| self.prepare_eval(data, x))
    }
}

/// Eval-mode mean loss and accuracy over `data`, in fixed-size batches.
pub fn evaluate_model(
    model: &Model,
    data: &Dataset,
    effective: &TensorMap,
    prepare: impl Fn(Tensor) -> Result<Tensor>,
) -> Result<EvalMetrics> {
    let (mut loss, mut correct) = (0.0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.gather(chunk);
        let logits = model.predict(&prepare(x)?, effective)?;
        loss += loss_cross_entropy(&logits, &y)?.0 * chunk.len() as f64;
        correct += count_correct(&logits, &y);
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Eval-mode accuracy with the model's own shadow weights.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let eff = model.shadow_weights();
    Ok(evaluate_model(model, data, &eff, |mut x| {
        data.normalization.apply(&mut x);
        Ok(x)
    })?
    .accuracy)
}

impl Objective for ClassificationTask {
    fn params(&self) -> &[ParamGroup] {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut [ParamGroup] {
        self.model.params_mut()
    }

    fn begin_epoch(&mut self, epoch: u64) -> Result<usize> {
        let n = self.train.len();
        let mut order = Rng::derive(self.seed, ORDER_STREAM, epoch).permutation(n);
        if let Some(k) = self.epoch_samples {
            order.truncate(k);
        }
        self.order = order;
        self.aug_rng = Rng::derive(self.seed, AUGMENT_STREAM, epoch);
        Ok(self.order.len().div_ceil(self.batch_size))
    }

    fn step_grads(&mut self, step: usize, effective: &TensorMap) -> Result<StepOutput> {
        let start = step * self.batch_size;
        let end = (start + self.batch_size).min(self.order.len());
        let (x, labels) = self.train.gather(&self.order[start..end]);
        let mut x = if self.augment.pad > 0 || self.augment.crop.is_some() || self.augment.flip_prob > 0.0 {
            augment(&x, self.augment.pad, self.crop(&self.train), self.augment.flip_prob, &mut self.aug_rng)?
        } else {
            x
        };
        self.train.normalization.apply(&mut x);
        let (logits, cache) = self.model.forward(&x, effective, Mode::Train)?;
        let (loss, dlogits) = loss_cross_entropy(&logits, &labels)?;
        let correct = count_correct(&logits, &labels);
        let grads = self.model.backward(cache, &dlogits)?;
        Ok(StepOutput {
            loss,
            correct,
            count: labels.len(),
            grads,
        })
    }

    fn evaluate(&self, effective: &TensorMap) -> Result<EvalMetrics> {
        self.evaluate_on(&self.val, effective)
    }

    fn rescale(&mut self, levels: &LevelSet) {
        self.model = rescale_model(&self.model, levels);
    }
}

/// One unmasked training epoch on shadow weights.
pub fn train_epoch<O: Objective + ?Sized>(obj: &mut O, epoch: u64, opt: &mut OptimState) -> Result<EpochMetrics> {
    let steps = obj.begin_epoch(epoch)?;
    let (mut loss_sum, mut correct, mut count) = (0.0, 0, 0);
    for step in 0..steps {
        let effective = shadow_of(obj.params());
        let out = obj.step_grads(step, &effective)?;
        opt.step(obj.params_mut(), &out.grads, None)?;
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

fn shadow_of(params: &[ParamGroup]) -> TensorMap {
    params
        .iter()
        .filter(|p| p.is_quantizable())
        .map(|p| (p.name.clone(), p.values.clone()))
        .collect()
}
