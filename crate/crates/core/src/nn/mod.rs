//! Layers with forward and reverse-mode backward passes.
//!
//! A [`Model`] owns its parameters as [`ParamGroup`]s. Conv/linear weights that
//! sit strictly between the first and the last weight layer are tagged
//! [`ParamKind::Quantizable`]; everything else (biases, batch-norm affine
//! parameters, gains, first/last layer weights) is continuous.
//!
//! `forward` never reads quantizable values from the model itself. The caller
//! supplies them as *effective weights*, which is how the RPR engine feeds a
//! mix of projected and relaxed values through an otherwise ordinary network.
//! Gradients come back keyed by parameter name and are taken with respect to
//! whatever was fed in.

mod loss;
mod spec;

use std::collections::BTreeMap;

pub use loss::{argmax_rows, count_correct, loss_cross_entropy};
pub use spec::{parse_layers, LayerSpec};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv2d, conv2d_backward, dot, gemm_nn, gemm_tn, Tensor};

/// Name → tensor map used for effective weights and gradients.
pub type TensorMap = BTreeMap<String, Tensor>;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Quantizable,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    /// Continuous (shadow) values.
    pub values: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
    /// Axis whose slices are "filters" for per-filter scaling.
    pub filter_axis: Option<usize>,
    /// Cumulative per-filter scale divided out by calibration, empty if never rescaled.
    pub scales: Vec<f64>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, values: Tensor, kind: ParamKind, filter_axis: Option<usize>) -> Self {
        let grad = Tensor::zeros(values.shape());
        ParamGroup {
            name: name.into(),
            values,
            grad,
            kind,
            filter_axis,
            scales: Vec::new(),
        }
    }

    pub fn is_quantizable(&self) -> bool {
        self.kind == ParamKind::Quantizable
    }

    /// Number of filter slices along `filter_axis` (1 when there is no axis).
    pub fn num_filters(&self) -> usize {
        match self.filter_axis {
            Some(0) => self.values.shape()[0],
            _ => 1,
        }
    }

    /// Contiguous element range of filter `f`. Only axis 0 is supported.
    pub fn filter_range(&self, f: usize) -> std::ops::Range<usize> {
        let len = self.values.len() / self.num_filters().max(1);
        f * len..(f + 1) * len
    }
}

/// Running statistics of one batch-norm layer. Its `gamma`/`beta` live in the
/// model's parameter list as `<name>.gamma` / `<name>.beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    weight: Option<usize>,
    bias: Option<usize>,
}

impl Layer {
    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    params: Vec<ParamGroup>,
    batch_norm: BTreeMap<String, BatchNormState>,
    first_layer_name: String,
    last_layer_name: String,
    generation: u64,
}

/// Activations recorded by a train-mode forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    generation: u64,
    entries: Vec<LayerCache>,
}

#[derive(Debug)]
enum LayerCache {
    Linear { input: Tensor, weight: Tensor },
    Conv { input: Tensor, weight: Tensor, stride: usize, pad: usize },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64>, gamma: Vec<f64> },
    Relu { active: Vec<bool> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Scale { input: Tensor, gain: Vec<f64> },
}

struct BatchStats {
    layer: String,
    mean: Vec<f64>,
    var_unbiased: Vec<f64>,
}

/// Gradients keyed by parameter name, plus the gradient w.r.t. the input batch.
#[derive(Debug, Clone)]
pub struct FullGradients {
    pub params: TensorMap,
    pub input: Tensor,
}

impl Model {
    /// Builds a model with He-normal conv/linear weights, zero biases and
    /// identity batch-norm / gain layers.
    ///
    /// Conv/linear layers get a bias unless directly followed by batch-norm.
    pub fn new(specs: &[LayerSpec], rng: &mut Rng) -> Result<Model> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut batch_norm = BTreeMap::new();
        let mut counters: BTreeMap<&'static str, usize> = BTreeMap::new();
        let weight_layers: Vec<usize> = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.has_weight())
            .map(|(i, _)| i)
            .collect();
        let first = weight_layers.first().copied();
        let last = weight_layers.last().copied();
        let mut first_layer_name = String::new();
        let mut last_layer_name = String::new();

        for (i, spec) in specs.iter().enumerate() {
            let counter = counters.entry(spec.name_prefix()).or_insert(0);
            *counter += 1;
            let name = format!("{}{}", spec.name_prefix(), counter);
            let followed_by_bn = matches!(specs.get(i + 1), Some(LayerSpec::BatchNorm2d { .. }));
            let kind = if Some(i) == first || Some(i) == last {
                ParamKind::Continuous
            } else {
                ParamKind::Quantizable
            };
            if Some(i) == first {
                first_layer_name = name.clone();
            }
            if Some(i) == last {
                last_layer_name = name.clone();
            }
            let mut weight = None;
            let mut bias = None;
            match *spec {
                LayerSpec::Linear { inputs, outputs } => {
                    let std = (2.0 / inputs as f64).sqrt();
                    let w = Tensor::from_fn(&[outputs, inputs], |_| rng.normal() * std);
                    weight = Some(push(&mut params, ParamGroup::new(format!("{name}.weight"), w, kind, Some(0))));
                    if !followed_by_bn {
                        bias = Some(push(&mut params, continuous(format!("{name}.bias"), Tensor::zeros(&[outputs]))));
                    }
                }
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let w = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
                        rng.normal() * std
                    });
                    weight = Some(push(&mut params, ParamGroup::new(format!("{name}.weight"), w, kind, Some(0))));
                    if !followed_by_bn {
                        bias = Some(push(&mut params, continuous(format!("{name}.bias"), Tensor::zeros(&[out_channels]))));
                    }
                }
                LayerSpec::BatchNorm2d { channels } => {
                    weight = Some(push(&mut params, continuous(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))));
                    bias = Some(push(&mut params, continuous(format!("{name}.beta"), Tensor::zeros(&[channels]))));
                    batch_norm.insert(name.clone(), BatchNormState::new(channels));
                }
                LayerSpec::Scale { channels } => {
                    weight = Some(push(&mut params, continuous(format!("{name}.gain"), Tensor::full(&[channels], 1.0))));
                }
                LayerSpec::Relu | LayerSpec::MaxPool2d { .. } | LayerSpec::AvgPool | LayerSpec::Flatten => {}
            }
            layers.push(Layer { name, spec: *spec, weight, bias });
        }
        Ok(Model {
            layers,
            params,
            batch_norm,
            first_layer_name,
            last_layer_name,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn params(&self) -> &[ParamGroup] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamGroup> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn batch_norm(&self) -> &BTreeMap<String, BatchNormState> {
        &self.batch_norm
    }

    pub fn batch_norm_mut(&mut self) -> &mut BTreeMap<String, BatchNormState> {
        &mut self.batch_norm
    }

    pub fn first_layer_name(&self) -> &str {
        &self.first_layer_name
    }

    pub fn last_layer_name(&self) -> &str {
        &self.last_layer_name
    }

    pub fn quantizable(&self) -> impl Iterator<Item = &ParamGroup> {
        self.params.iter().filter(|p| p.is_quantizable())
    }

    pub fn num_quantizable(&self) -> usize {
        self.quantizable().map(|p| p.values.len()).sum()
    }

    /// Shadow values of all quantizable parameters, i.e. effective weights
    /// with nothing projected.
    pub fn shadow_weights(&self) -> TensorMap {
        self.quantizable()
            .map(|p| (p.name.clone(), p.values.clone()))
            .collect()
    }

    /// The batch-norm layer directly following weight layer `layer_name`, if any.
    pub fn batch_norm_after(&self, layer_name: &str) -> Option<&str> {
        let i = self.layers.iter().position(|l| l.name == layer_name)?;
        match self.layers.get(i + 1) {
            Some(next) if matches!(next.spec, LayerSpec::BatchNorm2d { .. }) => Some(&next.name),
            _ => None,
        }
    }

    /// Name of the layer that owns parameter `param_name`.
    pub fn layer_of_param(&self, param_name: &str) -> Option<&Layer> {
        let idx = self.params.iter().position(|p| p.name == param_name)?;
        self.layers
            .iter()
            .find(|l| l.weight == Some(idx) || l.bias == Some(idx))
    }

    /// Replaces parameter and batch-norm state with that of `other`, which
    /// must share the architecture.
    pub fn load_state(&mut self, params: Vec<ParamGroup>, batch_norm: BTreeMap<String, BatchNormState>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter groups, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&params) {
            if mine.name != theirs.name || mine.values.shape() != theirs.values.shape() || mine.kind != theirs.kind {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    theirs.name,
                    theirs.values.shape(),
                    mine.name,
                    mine.values.shape()
                )));
            }
        }
        if batch_norm.keys().ne(self.batch_norm.keys()) {
            return Err(Error::InvalidArgument("batch-norm layers do not match".into()));
        }
        self.params = params;
        self.batch_norm = batch_norm;
        Ok(())
    }

    /// Forward pass. In train mode batch-norm uses batch statistics and
    /// updates its running estimates; eval mode leaves the model untouched.
    pub fn forward(&mut self, input: &Tensor, effective: &TensorMap, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        let (out, entries, stats) = self.run(input, effective, mode, true)?;
        if mode == Mode::Train {
            self.generation += 1;
            for s in stats {
                let bn = self.batch_norm.get_mut(&s.layer).expect("batch-norm state exists");
                let m = bn.momentum;
                for (r, &b) in bn.running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, &b) in bn.running_var.data_mut().iter_mut().zip(&s.var_unbiased) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
        Ok((
            out,
            ForwardCache {
                generation: if mode == Mode::Train { self.generation } else { u64::MAX },
                entries,
            },
        ))
    }

    /// Eval-mode forward pass without recording activations.
    pub fn predict(&self, input: &Tensor, effective: &TensorMap) -> Result<Tensor> {
        Ok(self.run(input, effective, Mode::Eval, false)?.0)
    }

    fn weight_for(&self, idx: usize, effective: &TensorMap) -> Result<Tensor> {
        let p = &self.params[idx];
        if p.is_quantizable() {
            let w = effective
                .get(&p.name)
                .ok_or_else(|| Error::MissingEffectiveWeight(p.name.clone()))?;
            if w.shape() != p.values.shape() {
                return Err(Error::ShapeMismatch {
                    op: "effective weight",
                    lhs: w.shape().to_vec(),
                    rhs: p.values.shape().to_vec(),
                });
            }
            Ok(w.clone())
        } else {
            Ok(p.values.clone())
        }
    }

    fn run(
        &self,
        input: &Tensor,
        effective: &TensorMap,
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor, Vec<LayerCache>, Vec<BatchStats>)> {
        let mut x = input.clone();
        let mut entries = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut stats = Vec::new();
        for layer in &self.layers {
            let (y, entry) = match layer.spec {
                LayerSpec::Linear { inputs, outputs } => {
                    let w = self.weight_for(layer.weight.expect("linear weight"), effective)?;
                    let bias = layer.bias.map(|b| self.params[b].values.data());
                    let y = linear_forward(&x, &w, bias, inputs, outputs)?;
                    (y, LayerCache::Linear { input: x, weight: w })
                }
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let w = self.weight_for(layer.weight.expect("conv weight"), effective)?;
                    let mut y = conv2d(&x, &w, stride, pad)?;
                    if let Some(b) = layer.bias {
                        add_channel_bias(&mut y, self.params[b].values.data());
                    }
                    (y, LayerCache::Conv { input: x, weight: w, stride, pad })
                }
                LayerSpec::BatchNorm2d { channels } => {
                    let gamma = self.params[layer.weight.expect("gamma")].values.data();
                    let beta = self.params[layer.bias.expect("beta")].values.data();
                    let state = &self.batch_norm[&layer.name];
                    let (y, entry, batch) = batch_norm_forward(&x, channels, gamma, beta, state, mode)?;
                    if let Some((mean, var_unbiased)) = batch {
                        stats.push(BatchStats { layer: layer.name.clone(), mean, var_unbiased });
                    }
                    (y, entry)
                }
                LayerSpec::Relu => {
                    let active: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                    (x.relu(), LayerCache::Relu { active })
                }
                LayerSpec::MaxPool2d { size } => {
                    let (y, argmax) = max_pool_forward(&x, size)?;
                    (y, LayerCache::MaxPool { input_shape: x.shape().to_vec(), argmax })
                }
                LayerSpec::AvgPool => {
                    let y = avg_pool_forward(&x)?;
                    (y, LayerCache::AvgPool { input_shape: x.shape().to_vec() })
                }
                LayerSpec::Flatten => {
                    let shape = x.shape().to_vec();
                    let n = shape.first().copied().unwrap_or(0);
                    let rest = shape.iter().skip(1).product();
                    (x.into_reshaped(&[n, rest])?, LayerCache::Flatten { input_shape: shape })
                }
                LayerSpec::Scale { channels } => {
                    let gain = self.params[layer.weight.expect("gain")].values.data().to_vec();
                    let y = scale_forward(&x, &gain, channels)?;
                    (y, LayerCache::Scale { input: x, gain })
                }
            };
            if record {
                entries.push(entry);
            }
            x = y;
        }
        Ok((x, entries, stats))
    }

    /// Backward pass from a train-mode cache; also stores each gradient in
    /// its `ParamGroup::grad`.
    pub fn backward(&mut self, cache: ForwardCache, dlogits: &Tensor) -> Result<TensorMap> {
        let grads = self.backward_impl(cache, dlogits, false)?.0;
        for p in &mut self.params {
            p.grad = grads[&p.name].clone();
        }
        Ok(grads)
    }

    /// Backward pass that also returns the gradient w.r.t. the input batch.
    pub fn backward_with_input(&self, cache: ForwardCache, dlogits: &Tensor) -> Result<FullGradients> {
        let (params, input) = self.backward_impl(cache, dlogits, true)?;
        Ok(FullGradients {
            params,
            input: input.expect("input gradient requested"),
        })
    }

    fn backward_impl(&self, cache: ForwardCache, dlogits: &Tensor, need_input: bool) -> Result<(TensorMap, Option<Tensor>)> {
        if cache.generation == u64::MAX {
            return Err(Error::StaleCache("cache comes from an eval-mode forward".into()));
        }
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache generation {} but model is at {}",
                cache.generation, self.generation
            )));
        }
        if cache.entries.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "{} cached layers for a {}-layer model",
                cache.entries.len(),
                self.layers.len()
            )));
        }
        let mut grads = TensorMap::new();
        let mut dy = dlogits.clone();
        for (i, (layer, entry)) in self.layers.iter().zip(cache.entries).enumerate().rev() {
            if i == 0 && !need_input && layer.spec.has_weight() {
                let dw = match entry {
                    LayerCache::Conv { input, weight, stride, pad } => conv2d_backward(&input, &weight, &dy, stride, pad, false)?.0,
                    LayerCache::Linear { input, weight } => {
                        let [_, inputs] = weight.shape()[..] else { unreachable!() };
                        linear_backward(&input, &weight, &dy, inputs, weight.shape()[0], false)?.0
                    }
                    _ => return Err(Error::StaleCache(format!("cache entry does not match layer `{}`", layer.name))),
                };
                grads.insert(self.params[layer.weight.unwrap()].name.clone(), dw);
                if let Some(b) = layer.bias {
                    let db = if dy.ndim() == 2 { column_sums(&dy) } else { channel_sums(&dy) };
                    grads.insert(self.params[b].name.clone(), db);
                }
                return Ok((grads, None));
            }
            dy = match (layer.spec, entry) {
                (LayerSpec::Linear { inputs, outputs }, LayerCache::Linear { input, weight }) => {
                    let (dw, db, dx) = linear_backward(&input, &weight, &dy, inputs, outputs, true)?;
                    grads.insert(self.params[layer.weight.unwrap()].name.clone(), dw);
                    if let Some(b) = layer.bias {
                        grads.insert(self.params[b].name.clone(), db);
                    }
                    dx.expect("input gradient requested")
                }
                (LayerSpec::Conv2d { .. }, LayerCache::Conv { input, weight, stride, pad }) => {
                    let (dw, dx) = conv2d_backward(&input, &weight, &dy, stride, pad, true)?;
                    grads.insert(self.params[layer.weight.unwrap()].name.clone(), dw);
                    if let Some(b) = layer.bias {
                        grads.insert(self.params[b].name.clone(), channel_sums(&dy));
                    }
                    dx.expect("input gradient requested")
                }
                (LayerSpec::BatchNorm2d { .. }, LayerCache::BatchNorm { xhat, inv_std, gamma }) => {
                    let (dx, dgamma, dbeta) = batch_norm_backward(&dy, &xhat, &inv_std, &gamma)?;
                    grads.insert(self.params[layer.weight.unwrap()].name.clone(), dgamma);
                    grads.insert(self.params[layer.bias.unwrap()].name.clone(), dbeta);
                    dx
                }
                (LayerSpec::Relu, LayerCache::Relu { active }) => {
                    check_len(&dy, active.len(), "relu")?;
                    let mut dx = dy;
                    for (d, &a) in dx.data_mut().iter_mut().zip(&active) {
                        if !a {
                            *d = 0.0;
                        }
                    }
                    dx
                }
                (LayerSpec::MaxPool2d { .. }, LayerCache::MaxPool { input_shape, argmax }) => {
                    check_len(&dy, argmax.len(), "maxpool2d")?;
                    let mut dx = Tensor::zeros(&input_shape);
                    for (&src, &g) in argmax.iter().zip(dy.data()) {
                        dx.data_mut()[src] += g;
                    }
                    dx
                }
                (LayerSpec::AvgPool, LayerCache::AvgPool { input_shape }) => {
                    let plane: usize = input_shape[2..].iter().product();
                    check_len(&dy, input_shape[0] * input_shape[1], "avgpool")?;
                    let inv = 1.0 / plane as f64;
                    let mut dx = Tensor::zeros(&input_shape);
                    for (chunk, &g) in dx.data_mut().chunks_exact_mut(plane).zip(dy.data()) {
                        chunk.fill(g * inv);
                    }
                    dx
                }
                (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => dy.into_reshaped(&input_shape)?,
                (LayerSpec::Scale { channels }, LayerCache::Scale { input, gain }) => {
                    let (dx, dgain) = scale_backward(&input, &gain, &dy, channels)?;
                    grads.insert(self.params[layer.weight.unwrap()].name.clone(), dgain);
                    dx
                }
                _ => return Err(Error::StaleCache(format!("cache entry does not match layer `{}`", layer.name))),
            };
        }
        Ok((grads, Some(dy)))
    }
}

fn push(params: &mut Vec<ParamGroup>, p: ParamGroup) -> usize {
    params.push(p);
    params.len() - 1
}

fn continuous(name: String, values: Tensor) -> ParamGroup {
    ParamGroup::new(name, values, ParamKind::Continuous, None)
}

fn check_len(t: &Tensor, len: usize, op: &'static str) -> Result<()> {
    if t.len() != len {
        return Err(Error::StaleCache(format!(
            "{op}: upstream gradient has {} elements, cache expects {len}",
            t.len()
        )));
    }
    Ok(())
}

/// `[N, C, ...]` → (N, C, spatial size).
fn channel_layout(x: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::Geometry(format!(
            "{op} expects [N,{channels},...], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

fn linear_forward(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, inputs: usize, outputs: usize) -> Result<Tensor> {
    let [n, d] = x.shape()[..] else {
        return Err(Error::Geometry(format!("linear expects [N,{inputs}], got {:?}", x.shape())));
    };
    if d != inputs {
        return Err(Error::ShapeMismatch { op: "linear", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
    }
    let mut y = vec![0.0; n * outputs];
    for (x_row, y_row) in x.data().chunks_exact(inputs).zip(y.chunks_exact_mut(outputs)) {
        for (o, v) in y_row.iter_mut().enumerate() {
            *v = dot(x_row, &w.data()[o * inputs..(o + 1) * inputs]);
            if let Some(b) = bias {
                *v += b[o];
            }
        }
    }
    Tensor::new(vec![n, outputs], y)
}

fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    inputs: usize,
    outputs: usize,
    need_input: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let n = x.shape()[0];
    if dy.shape() != [n, outputs] {
        return Err(Error::StaleCache(format!("linear: upstream gradient {:?}", dy.shape())));
    }
    let mut dw = vec![0.0; outputs * inputs];
    gemm_tn(outputs, n, inputs, dy.data(), x.data(), &mut dw);
    let dx = if need_input {
        let mut dx = vec![0.0; n * inputs];
        gemm_nn(n, outputs, inputs, dy.data(), w.data(), &mut dx);
        Some(Tensor::new(vec![n, inputs], dx)?)
    } else {
        None
    };
    Ok((Tensor::new(vec![outputs, inputs], dw)?, column_sums(dy), dx))
}

fn column_sums(dy: &Tensor) -> Tensor {
    let cols = dy.shape()[1];
    let mut out = vec![0.0; cols];
    for row in dy.data().chunks_exact(cols) {
        for (d, &g) in out.iter_mut().zip(row) {
            *d += g;
        }
    }
    Tensor::from_vec(out)
}

fn add_channel_bias(y: &mut Tensor, bias: &[f64]) {
    let c = bias.len();
    let plane: usize = y.shape()[2..].iter().product();
    for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums(dy: &Tensor) -> Tensor {
    let c = dy.shape()[1];
    let plane: usize = dy.shape()[2..].iter().product();
    let mut out = vec![0.0; c];
    for (i, chunk) in dy.data().chunks_exact(plane).enumerate() {
        out[i % c] += chunk.iter().fold(0.0, |a, &v| a + v);
    }
    Tensor::from_vec(out)
}

type BatchNormOutput = (Tensor, LayerCache, Option<(Vec<f64>, Vec<f64>)>);

fn batch_norm_forward(
    x: &Tensor,
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    mode: Mode,
) -> Result<BatchNormOutput> {
    let (n, plane) = channel_layout(x, channels, "batchnorm2d")?;
    let count = n * plane;
    let (mean, var, batch) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(Error::Geometry("batchnorm2d in train mode needs a non-empty batch".into()));
            }
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
                mean[i % channels] += chunk.iter().fold(0.0, |a, &v| a + v);
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
                let m = mean[i % channels];
                var[i % channels] += chunk.iter().fold(0.0, |a, &v| a + (v - m) * (v - m));
            }
            let unbiased: Vec<f64> = var
                .iter()
                .map(|&v| if count > 1 { v / (count - 1) as f64 } else { 0.0 })
                .collect();
            for v in &mut var {
                *v /= count as f64;
            }
            (mean, var, Some(unbiased))
        }
        Mode::Eval => (
            state.running_mean.data().to_vec(),
            state.running_var.data().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (i, (hc, yc)) in xhat
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(y.data_mut().chunks_exact_mut(plane))
        .enumerate()
    {
        let c = i % channels;
        for (h, o) in hc.iter_mut().zip(yc.iter_mut()) {
            *h = (*h - mean[c]) * inv_std[c];
            *o = gamma[c] * *h + beta[c];
        }
    }
    let batch = batch.map(|unbiased| (mean, unbiased));
    Ok((y, LayerCache::BatchNorm { xhat, inv_std, gamma: gamma.to_vec() }, batch))
}

fn batch_norm_backward(dy: &Tensor, xhat: &Tensor, inv_std: &[f64], gamma: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
    if dy.shape() != xhat.shape() {
        return Err(Error::StaleCache(format!("batchnorm2d: upstream gradient {:?}", dy.shape())));
    }
    let channels = gamma.len();
    let (n, plane) = channel_layout(dy, channels, "batchnorm2d")?;
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (i, (g, h)) in dy.data().chunks_exact(plane).zip(xhat.data().chunks_exact(plane)).enumerate() {
        let c = i % channels;
        for (&gv, &hv) in g.iter().zip(h) {
            dgamma[c] += gv * hv;
            dbeta[c] += gv;
        }
    }
    // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
    let mut dx = dy.clone();
    for (i, (d, h)) in dx.data_mut().chunks_exact_mut(plane).zip(xhat.data().chunks_exact(plane)).enumerate() {
        let c = i % channels;
        let k = gamma[c] * inv_std[c] / count;
        for (dv, &hv) in d.iter_mut().zip(h) {
            *dv = k * (count * *dv - dbeta[c] - hv * dgamma[c]);
        }
    }
    Ok((dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)))
}

fn max_pool_forward(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.shape()[..] else {
        return Err(Error::Geometry(format!("maxpool2d expects [N,C,H,W], got {:?}", x.shape())));
    };
    if size == 0 || size > h || size > w {
        return Err(Error::Geometry(format!("pool size {size} does not fit {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

fn avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape()[..] else {
        return Err(Error::Geometry(format!("avgpool expects [N,C,H,W], got {:?}", x.shape())));
    };
    let plane = h * w;
    let out = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().fold(0.0, |a, &v| a + v) / plane as f64)
        .collect();
    Tensor::new(vec![n, c], out)
}

fn scale_forward(x: &Tensor, gain: &[f64], channels: usize) -> Result<Tensor> {
    let (_, plane) = channel_layout(x, channels, "scale")?;
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_exact_mut(plane.max(1)).enumerate() {
        let g = gain[i % channels];
        for v in chunk {
            *v *= g;
        }
    }
    Ok(y)
}

fn scale_backward(x: &Tensor, gain: &[f64], dy: &Tensor, channels: usize) -> Result<(Tensor, Tensor)> {
    if dy.shape() != x.shape() {
        return Err(Error::StaleCache(format!("scale: upstream gradient {:?}", dy.shape())));
    }
    let (_, plane) = channel_layout(x, channels, "scale")?;
    let mut dgain = vec![0.0; channels];
    let mut dx = dy.clone();
    for (i, (d, xv)) in dx.data_mut().chunks_exact_mut(plane.max(1)).zip(x.data().chunks_exact(plane.max(1))).enumerate() {
        let c = i % channels;
        for (dv, &xi) in d.iter_mut().zip(xv) {
            dgain[c] += *dv * xi;
            *dv *= gain[c];
        }
    }
    Ok((dx, Tensor::from_vec(dgain)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Model {
        let specs = parse_layers(&["linear(4,6)", "batchnorm2d(6)", "relu", "linear(6,5)", "batchnorm2d(5)", "relu", "linear(5,3)"]).unwrap();
        Model::new(&specs, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn tags_only_inner_weights_as_quantizable() {
        let m = mlp();
        let q: Vec<&str> = m.quantizable().map(|p| p.name.as_str()).collect();
        assert_eq!(q, vec!["fc2.weight"]);
        assert_eq!(m.first_layer_name(), "fc1");
        assert_eq!(m.last_layer_name(), "fc3");
        assert!(m.param("fc1.bias").is_none(), "bias dropped before batch-norm");
        assert!(m.param("fc3.bias").is_some());
        for p in m.params() {
            if p.name.contains("bn") || p.name.ends_with(".bias") {
                assert_eq!(p.kind, ParamKind::Continuous);
            }
        }
    }

    #[test]
    fn linear_identity_forward() {
        let specs = parse_layers(&["linear(3,3)"]).unwrap();
        let mut m = Model::new(&specs, &mut Rng::new(0)).unwrap();
        m.param_mut("fc1.weight").unwrap().values = Tensor::eye(3);
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        let (y, _) = m.forward(&x, &TensorMap::new(), Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn missing_effective_weight_is_rejected() {
        let mut m = mlp();
        let x = Tensor::zeros(&[2, 4]);
        let err = m.forward(&x, &TensorMap::new(), Mode::Train).unwrap_err();
        assert!(matches!(err, Error::MissingEffectiveWeight(name) if name == "fc2.weight"));
    }

    #[test]
    fn eval_batch_norm_with_identity_stats_is_identity() {
        let specs = parse_layers(&["batchnorm2d(2)"]).unwrap();
        let m = Model::new(&specs, &mut Rng::new(0)).unwrap();
        let x = Tensor::new(vec![1, 2, 1, 2], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
        let y = m.predict(&x, &TensorMap::new()).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= b.abs() * 1e-5);
        }
    }

    #[test]
    fn eval_forward_does_not_mutate() {
        let mut m = mlp();
        let before = m.clone();
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let eff = m.shadow_weights();
        m.forward(&x, &eff, Mode::Eval).unwrap();
        assert_eq!(m, before);
    }

    fn doubled_conv_gap(eps: f64) -> f64 {
        let specs = parse_layers(&["conv2d(2,4,3,1,1)", "batchnorm2d(4)"]).unwrap();
        let mut rng = Rng::new(8);
        let mut m = Model::new(&specs, &mut rng).unwrap();
        m.batch_norm_mut().get_mut("bn1").unwrap().eps = eps;
        let x = Tensor::from_fn(&[3, 2, 5, 5], |_| rng.normal());
        let mut doubled = m.clone();
        let w = &mut doubled.param_mut("conv1.weight").unwrap().values;
        *w = w.scale(2.0);
        let (a, _) = m.forward(&x, &TensorMap::new(), Mode::Train).unwrap();
        let (b, _) = doubled.forward(&x, &TensorMap::new(), Mode::Train).unwrap();
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn batch_norm_removes_filter_scale() {
        assert!(doubled_conv_gap(1e-12) < 1e-9);
        // with the default eps the gap is of order eps / var, not zero
        let gap = doubled_conv_gap(BN_EPS);
        assert!(gap > 1e-9 && gap < 1e-4, "{gap}");
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut m = mlp();
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let eff = m.shadow_weights();
        m.forward(&x, &eff, Mode::Train).unwrap();
        assert_ne!(m.batch_norm()["bn1"].running_mean.data(), &[0.0; 6]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = mlp();
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let eff = m.shadow_weights();
        let (_, old) = m.forward(&x, &eff, Mode::Train).unwrap();
        let (y, _) = m.forward(&x, &eff, Mode::Train).unwrap();
        assert!(matches!(m.backward(old, &y), Err(Error::StaleCache(_))));
        let (y, eval_cache) = m.forward(&x, &eff, Mode::Eval).unwrap();
        assert!(matches!(m.backward(eval_cache, &y), Err(Error::StaleCache(_))));
    }

    #[test]
    fn linear_weight_gradient_is_input_per_row() {
        let specs = parse_layers(&["linear(3,2)"]).unwrap();
        let mut m = Model::new(&specs, &mut Rng::new(0)).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, -3.0]).unwrap();
        let (_, cache) = m.forward(&x, &TensorMap::new(), Mode::Train).unwrap();
        // d(Σ y)/dW: every output row receives x
        let grads = m.backward(cache, &Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(grads["fc1.weight"].data(), &[1.0, 2.0, -3.0, 1.0, 2.0, -3.0]);
        assert_eq!(grads["fc1.bias"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_backward_zeroes_negative_inputs() {
        let specs = parse_layers(&["relu"]).unwrap();
        let mut m = Model::new(&specs, &mut Rng::new(0)).unwrap();
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.5, 2.0]).unwrap();
        let (_, cache) = m.forward(&x, &TensorMap::new(), Mode::Train).unwrap();
        let g = m.backward_with_input(cache, &Tensor::full(&[1, 3], 1.0)).unwrap();
        assert_eq!(g.input.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn max_pool_routes_to_first_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        let (y, arg) = max_pool_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0]);
        assert_eq!(arg, vec![1]);
    }
}
