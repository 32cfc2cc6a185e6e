//! Quantization level sets, nearest-level projection and per-filter scale
//! calibration.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelFamily {
    Binary,
    Ternary,
    SymExponential,
    Custom,
}

impl LevelFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            LevelFamily::Binary => "binary",
            LevelFamily::Ternary => "ternary",
            LevelFamily::SymExponential => "sym_exponential",
            LevelFamily::Custom => "custom",
        }
    }
}

impl std::str::FromStr for LevelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(LevelFamily::Binary),
            "ternary" => Ok(LevelFamily::Ternary),
            "sym_exponential" => Ok(LevelFamily::SymExponential),
            "custom" => Ok(LevelFamily::Custom),
            other => Err(Error::Config(format!("unknown level family `{other}`"))),
        }
    }
}

/// A finite, strictly ascending set of admissible weight values.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    levels: Vec<f64>,
    family: LevelFamily,
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}", self.family.as_str(), self.levels)
    }
}

impl LevelSet {
    pub fn binary() -> Self {
        LevelSet {
            levels: vec![-1.0, 1.0],
            family: LevelFamily::Binary,
        }
    }

    pub fn ternary() -> Self {
        LevelSet {
            levels: vec![-1.0, 0.0, 1.0],
            family: LevelFamily::Ternary,
        }
    }

    /// `{0} ∪ {±2^i : i ∈ exponents}`.
    pub fn sym_exponential(exponents: std::ops::RangeInclusive<i32>) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::InvalidArgument("exponent range is empty".into()));
        }
        let mut levels = vec![0.0];
        for i in exponents {
            let v = 2f64.powi(i);
            levels.push(v);
            levels.push(-v);
        }
        levels.sort_by(f64::total_cmp);
        Ok(LevelSet {
            levels,
            family: LevelFamily::SymExponential,
        })
    }

    /// Any finite set of finite values; duplicates are merged.
    pub fn custom(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("custom level set is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("levels must be finite".into()));
        }
        let mut levels: Vec<f64> = values.iter().map(|&v| if v == 0.0 { 0.0 } else { v }).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        Ok(LevelSet {
            levels,
            family: LevelFamily::Custom,
        })
    }

    /// Constructs a named family; `exponents` is required for `sym_exponential`.
    pub fn make(family: LevelFamily, exponents: Option<std::ops::RangeInclusive<i32>>) -> Result<Self> {
        match family {
            LevelFamily::Binary => Ok(LevelSet::binary()),
            LevelFamily::Ternary => Ok(LevelSet::ternary()),
            LevelFamily::SymExponential => LevelSet::sym_exponential(
                exponents.ok_or_else(|| Error::InvalidArgument("sym_exponential needs an exponent range".into()))?,
            ),
            LevelFamily::Custom => Err(Error::InvalidArgument(
                "custom level sets are built from explicit values".into(),
            )),
        }
    }

    /// Rebuilds a level set from its stored family and values.
    pub fn from_parts(family: LevelFamily, levels: Vec<f64>) -> Result<Self> {
        let mut set = LevelSet::custom(&levels)?;
        if set.levels != levels {
            return Err(Error::InvalidArgument("stored levels are not strictly ascending".into()));
        }
        set.family = family;
        Ok(set)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn family(&self) -> LevelFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.levels.binary_search_by(|l| l.total_cmp(&x)).is_ok() || (x == 0.0 && self.levels.contains(&0.0))
    }

    /// Nearest level to `x`. Ties go to the level of smaller magnitude, then
    /// to the positive one.
    pub fn nearest(&self, x: f64) -> f64 {
        let l = &self.levels;
        let hi = l.partition_point(|&v| v < x);
        if hi == 0 {
            return l[0];
        }
        if hi == l.len() {
            return l[l.len() - 1];
        }
        let (a, b) = (l[hi - 1], l[hi]);
        let (da, db) = (x - a, b - x);
        if da < db {
            a
        } else if db < da {
            b
        } else if a.abs() < b.abs() {
            a
        } else if b.abs() < a.abs() {
            b
        } else {
            b.max(a)
        }
    }
}

/// Replaces every element by its nearest level.
pub fn project_nearest(w: &Tensor, levels: &LevelSet) -> Tensor {
    w.map(|x| levels.nearest(x))
}

/// `‖w − s·Q(w/s)‖₂`, the calibration objective. `+∞` for `s ≤ 0`.
pub fn scale_residual(w: &[f64], levels: &LevelSet, s: f64) -> f64 {
    if !(s > 0.0) {
        return f64::INFINITY;
    }
    w.iter()
        .fold(0.0, |acc, &x| {
            let r = x - s * levels.nearest(x / s);
            acc + r * r
        })
        .sqrt()
}

/// Result of calibrating one filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleCalibration {
    pub scale: f64,
    /// `‖w − scale·Q(w/scale)‖₂`.
    pub residual: f64,
}

pub const GRID_POINTS: usize = 1000;
const SIMPLEX_MAX_ITERS: usize = 200;
const SIMPLEX_REL_TOL: f64 = 1e-9;

/// Finds the scale `s > 0` minimizing `‖w − s·Q(w/s)‖₂`.
///
/// A uniform grid over `(0, max|w|]` picks the starting point, a 1-D downhill
/// simplex refines it, and a final closed-form step `s = ⟨w,q⟩/⟨q,q⟩` for the
/// assignment `q = Q(w/s)` polishes the minimizer of the active quadratic
/// piece. No stage is accepted unless it lowers the objective, so the result
/// is never worse than the best grid point.
pub fn calibrate_scale(w: &[f64], levels: &LevelSet, grid_points: usize) -> ScaleCalibration {
    let max_abs = w.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if max_abs == 0.0 || grid_points == 0 {
        return ScaleCalibration {
            scale: 1.0,
            residual: scale_residual(w, levels, 1.0),
        };
    }
    let g = |s: f64| scale_residual(w, levels, s);

    let step = max_abs / grid_points as f64;
    let grid: Vec<(f64, f64)> = (1..=grid_points)
        .map(|k| {
            let s = max_abs * k as f64 / grid_points as f64;
            (s, g(s))
        })
        .collect();
    let (best_k, &(mut best_s, mut best_g)) = grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty grid");

    // Second vertex: the better grid neighbour, i.e. best ± one spacing.
    let left = best_k.checked_sub(1).map(|k| grid[k]);
    let right = grid.get(best_k + 1).copied();
    let other = match (left, right) {
        (Some(l), Some(r)) => if l.1 <= r.1 { l } else { r },
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => (best_s + step, g(best_s + step)),
    };
    let (s_nm, g_nm) = nelder_mead_1d(&g, (best_s, best_g), other);
    if g_nm < best_g {
        best_s = s_nm;
        best_g = g_nm;
    }

    for _ in 0..8 {
        let (num, den) = w.iter().fold((0.0, 0.0), |(n, d), &x| {
            let q = levels.nearest(x / best_s);
            (n + x * q, d + q * q)
        });
        if den == 0.0 {
            break;
        }
        let s = num / den;
        let gs = g(s);
        // ties move to the closed form, which rounding may hide at the minimum
        if gs > best_g || s == best_s {
            break;
        }
        best_s = s;
        best_g = gs;
    }

    ScaleCalibration {
        scale: best_s,
        residual: best_g,
    }
}

/// 1-D downhill simplex (reflection 1, expansion 2, contraction ½, shrink ½).
fn nelder_mead_1d(f: &impl Fn(f64) -> f64, a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (mut best, mut worst) = if a.1 <= b.1 { (a, b) } else { (b, a) };
    for _ in 0..SIMPLEX_MAX_ITERS {
        if (worst.0 - best.0).abs() < SIMPLEX_REL_TOL * best.0.abs() {
            break;
        }
        let c = best.0;
        let xr = c + (c - worst.0);
        let fr = f(xr);
        if fr < best.1 {
            let xe = c + 2.0 * (xr - c);
            let fe = f(xe);
            worst = best;
            best = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        // In one dimension the "second worst" vertex is the best one, so a
        // reflection that does not beat it always leads to a contraction.
        let contracted = if fr < worst.1 {
            let xc = c + 0.5 * (xr - c);
            let fc = f(xc);
            (fc <= fr).then_some((xc, fc))
        } else {
            let xc = c + 0.5 * (worst.0 - c);
            let fc = f(xc);
            (fc < worst.1).then_some((xc, fc))
        };
        let candidate = contracted.unwrap_or_else(|| {
            let xs = best.0 + 0.5 * (worst.0 - best.0);
            (xs, f(xs))
        });
        if candidate.1 < best.1 {
            worst = best;
            best = candidate;
        } else {
            worst = candidate;
        }
    }
    best
}

/// Divides every filter of every quantizable parameter by its calibrated
/// scale (`w̃ = w/ŝ`) and records the scale.
///
/// Continuous parameters are left alone. Running statistics of a batch-norm
/// layer that directly follows a bias-free rescaled layer are divided by
/// `ŝ` (mean) and `ŝ²` (variance) so that eval mode sees the same
/// normalized activations; train mode is scale invariant by construction.
pub fn rescale_model(model: &Model, levels: &LevelSet) -> Model {
    let mut out = model.clone();
    let names: Vec<String> = out.quantizable().map(|p| p.name.clone()).collect();
    for name in names {
        let p = out.param_mut(&name).expect("parameter exists");
        let filters = p.num_filters();
        let mut scales = Vec::with_capacity(filters);
        for f in 0..filters {
            let range = p.filter_range(f);
            let cal = calibrate_scale(&p.values.data()[range.clone()], levels, GRID_POINTS);
            for v in &mut p.values.data_mut()[range] {
                *v /= cal.scale;
            }
            scales.push(cal.scale);
        }
        if p.scales.is_empty() {
            p.scales = scales.clone();
        } else {
            for (acc, s) in p.scales.iter_mut().zip(&scales) {
                *acc *= s;
            }
        }
        let layer = out.layer_of_param(&name).expect("weight belongs to a layer");
        if layer.has_bias() {
            continue;
        }
        let layer_name = layer.name.clone();
        if let Some(bn) = out.batch_norm_after(&layer_name).map(str::to_owned) {
            let state = out.batch_norm_mut().get_mut(&bn).expect("batch-norm state");
            for (m, s) in state.running_mean.data_mut().iter_mut().zip(&scales) {
                *m /= s;
            }
            for (v, s) in state.running_var.data_mut().iter_mut().zip(&scales) {
                *v /= s * s;
            }
        }
    }
    out
}
