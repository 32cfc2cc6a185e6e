#![allow(dead_code)]

use std::path::PathBuf;

use rpr_core::nn::{loss_cross_entropy, LayerSpec, Mode, Model, TensorMap};
use rpr_core::tensor::Tensor;
use rpr_core::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A model with every parameter drawn away from its initial value so that
/// identity gammas, zero biases and unit gains do not hide errors.
pub fn randomized_model(specs: &[LayerSpec], rng: &mut Rng) -> Model {
    let mut model = Model::new(specs, rng).expect("valid specs");
    for p in model.params_mut() {
        let shift = if p.name.ends_with(".gamma") || p.name.ends_with(".gain") { 1.0 } else { 0.0 };
        for v in p.values.data_mut() {
            *v = shift + 0.5 * rng.normal();
        }
    }
    model
}

fn probe_loss(model: &Model, effective: &TensorMap, x: &Tensor, probe: &Tensor) -> f64 {
    let mut m = model.clone();
    let (out, _) = m.forward(x, effective, Mode::Train).expect("forward");
    out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// Central finite-difference check of `sum(forward(x) * R)` with respect to
/// every parameter and every input element. Returns the largest relative error.
pub fn check_model_gradients(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let model = randomized_model(specs, &mut rng);
    let effective = model.shadow_weights();
    let x = random_tensor(input_shape, &mut rng);
    let out = model.predict(&x, &effective).expect("predict");
    let probe = random_tensor(out.shape(), &mut rng);

    let mut m = model.clone();
    let (_, cache) = m.forward(&x, &effective, Mode::Train).expect("forward");
    let grads = m.backward_with_input(cache, &probe).expect("backward");

    let mut worst: f64 = 0.0;
    for (pi, p) in model.params().iter().enumerate() {
        let analytic = &grads.params[&p.name];
        for i in 0..p.values.len() {
            let eval = |delta: f64| {
                let mut mm = model.clone();
                let mut eff = effective.clone();
                if p.is_quantizable() {
                    eff.get_mut(&p.name).unwrap().data_mut()[i] += delta;
                } else {
                    mm.params_mut()[pi].values.data_mut()[i] += delta;
                }
                probe_loss(&mm, &eff, &x, &probe)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
    }
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut xx = x.clone();
            xx.data_mut()[i] += delta;
            probe_loss(&model, &effective, &xx, &probe)
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(grads.input.data()[i], numeric));
    }
    worst
}

/// Finite-difference check of the mean cross-entropy gradient.
pub fn check_cross_entropy(n: usize, k: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let logits = Tensor::from_fn(&[n, k], |_| 3.0 * rng.normal());
    let labels: Vec<usize> = (0..n).map(|_| rng.below_usize(k)).collect();
    let (_, grad) = loss_cross_entropy(&logits, &labels).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let eval = |delta: f64| {
            let mut l = logits.clone();
            l.data_mut()[i] += delta;
            loss_cross_entropy(&l, &labels).unwrap().0
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(grad.data()[i], numeric));
    }
    worst
}

fn spec(s: &str) -> LayerSpec {
    s.parse().expect("layer spec")
}

pub fn specs(items: &[&str]) -> Vec<LayerSpec> {
    items.iter().map(|s| spec(s)).collect()
}

/// One gradient case: a layer stack and its input shape.
pub struct GradCase {
    pub name: &'static str,
    pub specs: Vec<LayerSpec>,
    pub input: Vec<usize>,
}

fn case(name: &'static str, layers: &[&str], input: &[usize]) -> GradCase {
    GradCase { name, specs: specs(layers), input: input.to_vec() }
}

/// Five or more shapes for every layer type, plus mixed stacks in which the
/// inner weights are quantizable and fed through the effective-weight map.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        case("linear", &["linear(3,2)"], &[1, 3]),
        case("linear", &["linear(4,5)"], &[3, 4]),
        case("linear", &["linear(7,3)"], &[2, 7]),
        case("linear", &["linear(1,6)"], &[4, 1]),
        case("linear", &["linear(5,5)"], &[5, 5]),
        case("conv2d", &["conv2d(1,2,3,1,1)"], &[1, 1, 4, 4]),
        case("conv2d", &["conv2d(2,3,3,1,0)"], &[2, 2, 5, 5]),
        case("conv2d", &["conv2d(3,2,3,2,1)"], &[1, 3, 6, 5]),
        case("conv2d", &["conv2d(2,2,1,1,0)"], &[2, 2, 3, 3]),
        case("conv2d", &["conv2d(1,4,2,2,0)"], &[2, 1, 4, 6]),
        case("conv2d", &["conv2d(2,1,5,1,2)"], &[1, 2, 5, 5]),
        case("batchnorm2d", &["batchnorm2d(3)"], &[4, 3]),
        case("batchnorm2d", &["batchnorm2d(2)"], &[2, 2, 3, 3]),
        case("batchnorm2d", &["batchnorm2d(1)"], &[3, 1, 2, 4]),
        case("batchnorm2d", &["batchnorm2d(5)"], &[6, 5]),
        case("batchnorm2d", &["batchnorm2d(4)"], &[2, 4, 1, 2]),
        case("relu", &["relu"], &[3, 4]),
        case("relu", &["relu"], &[2, 2, 3, 3]),
        case("relu", &["relu"], &[1, 10]),
        case("relu", &["relu"], &[4, 1, 2, 2]),
        case("relu", &["relu"], &[5, 3]),
        case("maxpool2d", &["maxpool2d(2)"], &[1, 1, 4, 4]),
        case("maxpool2d", &["maxpool2d(2)"], &[2, 3, 4, 6]),
        case("maxpool2d", &["maxpool2d(3)"], &[1, 2, 6, 6]),
        case("maxpool2d", &["maxpool2d(2)"], &[2, 1, 5, 5]),
        case("maxpool2d", &["maxpool2d(1)"], &[1, 2, 3, 3]),
        case("avgpool", &["avgpool"], &[1, 1, 3, 3]),
        case("avgpool", &["avgpool"], &[2, 3, 2, 4]),
        case("avgpool", &["avgpool"], &[3, 2, 1, 1]),
        case("avgpool", &["avgpool"], &[1, 4, 5, 2]),
        case("avgpool", &["avgpool"], &[2, 2, 4, 4]),
        case("flatten", &["flatten", "linear(8,3)"], &[2, 2, 2, 2]),
        case("flatten", &["flatten", "linear(9,2)"], &[1, 1, 3, 3]),
        case("flatten", &["flatten", "linear(12,4)"], &[3, 3, 2, 2]),
        case("flatten", &["flatten", "linear(6,1)"], &[2, 6, 1, 1]),
        case("flatten", &["flatten", "linear(10,2)"], &[2, 2, 5, 1]),
        case("scale", &["scale(3)"], &[2, 3]),
        case("scale", &["scale(2)"], &[2, 2, 3, 3]),
        case("scale", &["scale(1)"], &[4, 1]),
        case("scale", &["scale(4)"], &[1, 4, 2, 2]),
        case("scale", &["scale(5)"], &[3, 5]),
        case(
            "stack",
            &["conv2d(1,3,3,1,1)", "batchnorm2d(3)", "relu", "maxpool2d(2)", "conv2d(3,2,3,1,1)", "relu", "flatten", "linear(8,3)"],
            &[2, 1, 4, 4],
        ),
        case(
            "stack",
            &["linear(4,6)", "batchnorm2d(6)", "relu", "linear(6,5)", "scale(5)", "relu", "linear(5,3)"],
            &[3, 4],
        ),
        case(
            "stack",
            &["conv2d(2,4,3,1,1)", "relu", "conv2d(4,4,3,2,1)", "batchnorm2d(4)", "relu", "avgpool", "linear(4,2)"],
            &[2, 2, 4, 4],
        ),
    ]
}

/// Runs the whole gradient suite, returning `(case, shape, error)` rows.
pub fn run_gradient_suite() -> Vec<(String, Vec<usize>, f64)> {
    let mut rows = Vec::new();
    for (i, c) in gradient_cases().iter().enumerate() {
        let err = check_model_gradients(&c.specs, &c.input, 1000 + i as u64);
        rows.push((c.name.to_string(), c.input.clone(), err));
    }
    for (i, (n, k)) in [(1, 2), (3, 4), (5, 10), (2, 7), (4, 3)].into_iter().enumerate() {
        rows.push(("cross_entropy".into(), vec![n, k], check_cross_entropy(n, k, 2000 + i as u64)));
    }
    rows
}

/// Directory holding the MNIST IDX files.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("RPR_MNIST_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => workspace_root().join("data/mnist"),
    }
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

pub fn config_path(name: &str) -> PathBuf {
    workspace_root().join("configs").join(name)
}

/// Brute-force nearest level with the library's tie rule: smaller magnitude
/// first, then the positive level.
pub fn brute_nearest(x: f64, levels: &[f64]) -> f64 {
    let mut best = levels[0];
    for &l in levels {
        let (d, bd) = ((x - l).abs(), (x - best).abs());
        let better = d < bd
            || (d == bd && (l.abs() < best.abs() || (l.abs() == best.abs() && l > best)));
        if better {
            best = l;
        }
    }
    best
}

/// `min over s > 0 and q ∈ levels^n of ‖w − s·q‖₂` by enumerating every
/// assignment and solving for its optimal scale in closed form.
pub fn exhaustive_scaled_residual(w: &[f64], levels: &[f64]) -> f64 {
    let n = w.len();
    let k = levels.len();
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = if levels.contains(&0.0) { norm } else { f64::INFINITY };
    let mut digits = vec![0usize; n];
    loop {
        let q: Vec<f64> = digits.iter().map(|&d| levels[d]).collect();
        let qq: f64 = q.iter().map(|v| v * v).sum();
        let wq: f64 = w.iter().zip(&q).map(|(a, b)| a * b).sum();
        if qq > 0.0 && wq > 0.0 {
            let s = wq / qq;
            let r = w.iter().zip(&q).map(|(a, b)| (a - s * b).powi(2)).sum::<f64>().sqrt();
            best = best.min(r);
        }
        let mut i = 0;
        while i < n {
            digits[i] += 1;
            if digits[i] < k {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}
