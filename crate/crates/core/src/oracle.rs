//! Reference solutions: exhaustive MINLP enumeration for tiny least-squares
//! problems, the projection-only post-training baseline, and a tiny
//! regression objective that lets the RPR engine run on those problems.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Model, ParamGroup, ParamKind, TensorMap};
use crate::quantize::{calibrate_scale, rescale_model, LevelSet, GRID_POINTS};
use crate::rng::Rng;
use crate::rpr::{project_all, EvalMetrics, Objective, StepOutput};
use crate::task::accuracy;
use crate::tensor::Tensor;

/// Maximum number of assignments `brute_force_minlp` will enumerate.
pub const ENUMERATION_LIMIT: f64 = 1e7;

/// Least squares `min ‖X(s·q) − y‖²` over `q ∈ L^d` (and `s` if `include_scale`).
#[derive(Debug, Clone, PartialEq)]
pub struct TinyProblem {
    pub x: Tensor,
    pub y: Vec<f64>,
    pub levels: LevelSet,
    pub include_scale: bool,
}

impl TinyProblem {
    pub fn new(x: Tensor, y: Vec<f64>, levels: LevelSet, include_scale: bool) -> Result<Self> {
        let &[n, _] = x.shape() else {
            return Err(Error::Geometry(format!("design matrix must be [n,d], got {:?}", x.shape())));
        };
        if y.len() != n {
            return Err(Error::InvalidArgument(format!("{} targets for {n} rows", y.len())));
        }
        Ok(TinyProblem { x, y, levels, include_scale })
    }

    /// `X ~ N(0,1)`, `w* ~ N(0,1)`, `y = X·w* + noise·ε`.
    pub fn random(n: usize, d: usize, noise: f64, levels: LevelSet, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[n, d], |_| rng.normal());
        let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mut y = matvec(&x, &w);
        for v in &mut y {
            *v += noise * rng.normal();
        }
        TinyProblem::new(x, y, levels, true).expect("consistent shapes")
    }

    /// `y = X·(scale·q₀)` exactly, for a random `q₀ ∈ L^d`.
    pub fn realizable(n: usize, d: usize, scale: f64, levels: LevelSet, seed: u64) -> (Self, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[n, d], |_| rng.normal());
        let q0: Vec<f64> = (0..d).map(|_| levels.levels()[rng.below_usize(levels.len())]).collect();
        let w: Vec<f64> = q0.iter().map(|q| scale * q).collect();
        let y = matvec(&x, &w);
        (TinyProblem::new(x, y, levels, true).expect("consistent shapes"), q0)
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }

    /// `‖X(s·q) − y‖²`.
    pub fn loss(&self, q: &[f64], s: f64) -> f64 {
        let w: Vec<f64> = q.iter().map(|v| s * v).collect();
        matvec(&self.x, &w)
            .iter()
            .zip(&self.y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum()
    }

    /// Best scale for a fixed assignment, and the resulting loss.
    pub fn best_scale(&self, q: &[f64]) -> (f64, f64) {
        let xq = matvec(&self.x, q);
        let den: f64 = xq.iter().map(|v| v * v).sum();
        let s = if !self.include_scale || den == 0.0 {
            1.0
        } else {
            xq.iter().zip(&self.y).map(|(a, b)| a * b).sum::<f64>() / den
        };
        (s, self.loss(q, s))
    }
}

fn matvec(x: &Tensor, w: &[f64]) -> Vec<f64> {
    let d = w.len();
    x.data()
        .chunks_exact(d)
        .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinlpSolution {
    pub assignment: Vec<f64>,
    pub scale: f64,
    pub loss: f64,
}

/// Enumerates every assignment in lexicographic order and keeps the first
/// strict minimizer, so ties resolve to the lexicographically smallest one.
pub fn brute_force_minlp(p: &TinyProblem) -> Result<MinlpSolution> {
    let d = p.dim();
    let k = p.levels.len();
    let count = (k as f64).powi(d as i32);
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard(count));
    }
    let levels = p.levels.levels();
    let mut digits = vec![0usize; d];
    let mut q = vec![levels[0]; d];
    let mut best: Option<MinlpSolution> = None;
    loop {
        let (s, loss) = p.best_scale(&q);
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(MinlpSolution {
                assignment: q.clone(),
                scale: s,
                loss,
            });
        }
        // odometer increment, last coordinate fastest
        let mut i = d;
        loop {
            if i == 0 {
                return Ok(best.expect("at least one assignment"));
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < k {
                q[i] = levels[digits[i]];
                break;
            }
            digits[i] = 0;
            q[i] = levels[0];
        }
    }
}

/// Rescale, project every quantizable weight, and measure eval accuracy on a
/// copy of `model`.
pub fn ptq_baseline(model: &Model, levels: &LevelSet, test_data: &Dataset) -> Result<f64> {
    let mut m = rescale_model(model, levels);
    project_all(m.params_mut(), levels);
    accuracy(&m, test_data)
}

/// Regression `ŷ = gain · X·w` with quantizable `w` and continuous `gain`,
/// trained on mean squared error.
#[derive(Debug, Clone)]
pub struct TinyRegression {
    pub problem: TinyProblem,
    params: Vec<ParamGroup>,
    pub batch_size: usize,
    pub seed: u64,
    order: Vec<usize>,
}

pub const TINY_ORDER_STREAM: u64 = 0x7469_6e79;

impl TinyRegression {
    /// Weights start at small seeded normals, gain at 1.
    pub fn new(problem: TinyProblem, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let d = problem.dim();
        let mut rng = Rng::new(seed);
        let w = Tensor::from_fn(&[1, d], |_| 0.1 * rng.normal());
        let params = vec![
            ParamGroup::new("w", w, ParamKind::Quantizable, Some(0)),
            ParamGroup::new("gain", Tensor::full(&[1], 1.0), ParamKind::Continuous, None),
        ];
        Ok(TinyRegression {
            problem,
            params,
            batch_size,
            seed,
            order: Vec::new(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        self.params[0].values.data()
    }

    pub fn gain(&self) -> f64 {
        self.params[1].values.data()[0]
    }

    /// `‖X(gain·w) − y‖²` with the current shadow weights.
    pub fn loss(&self) -> f64 {
        self.problem.loss(self.weights(), self.gain())
    }

    fn weights_from<'a>(&'a self, effective: &'a TensorMap) -> Result<&'a [f64]> {
        let w = effective
            .get("w")
            .ok_or_else(|| Error::MissingEffectiveWeight("w".into()))?;
        if w.shape() != self.params[0].values.shape() {
            return Err(Error::ShapeMismatch {
                op: "effective weight",
                lhs: w.shape().to_vec(),
                rhs: self.params[0].values.shape().to_vec(),
            });
        }
        Ok(w.data())
    }
}

impl Objective for TinyRegression {
    fn params(&self) -> &[ParamGroup] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.params
    }

    fn begin_epoch(&mut self, epoch: u64) -> Result<usize> {
        self.order = Rng::derive(self.seed, TINY_ORDER_STREAM, epoch).permutation(self.problem.rows());
        Ok(self.order.len().div_ceil(self.batch_size))
    }

    fn step_grads(&mut self, step: usize, effective: &TensorMap) -> Result<StepOutput> {
        let w = self.weights_from(effective)?;
        let g = self.gain();
        let d = w.len();
        let start = step * self.batch_size;
        let rows = &self.order[start..(start + self.batch_size).min(self.order.len())];
        let inv = 1.0 / rows.len() as f64;
        let mut dw = vec![0.0; d];
        let (mut dg, mut loss) = (0.0, 0.0);
        for &r in rows {
            let x = &self.problem.x.data()[r * d..(r + 1) * d];
            let xw: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            let res = g * xw - self.problem.y[r];
            loss += res * res * inv;
            for (gw, xi) in dw.iter_mut().zip(x) {
                *gw += 2.0 * inv * res * g * xi;
            }
            dg += 2.0 * inv * res * xw;
        }
        let grads = [
            ("w".to_string(), Tensor::new(vec![1, d], dw)?),
            ("gain".to_string(), Tensor::from_vec(vec![dg])),
        ]
        .into_iter()
        .collect();
        Ok(StepOutput {
            loss,
            correct: 0,
            count: rows.len(),
            grads,
        })
    }

    fn evaluate(&self, effective: &TensorMap) -> Result<EvalMetrics> {
        let w = self.weights_from(effective)?;
        Ok(EvalMetrics {
            loss: self.problem.loss(w, self.gain()),
            accuracy: 0.0,
        })
    }

    /// `w ← w/ŝ`, `gain ← gain·ŝ`, which leaves predictions unchanged.
    fn rescale(&mut self, levels: &LevelSet) {
        let cal = calibrate_scale(self.params[0].values.data(), levels, GRID_POINTS);
        for v in self.params[0].values.data_mut() {
            *v /= cal.scale;
        }
        self.params[0].scales = vec![cal.scale];
        self.params[1].values.data_mut()[0] *= cal.scale;
    }

    fn stabilization_metric(&self, m: &EvalMetrics) -> f64 {
        -m.loss
    }
}
