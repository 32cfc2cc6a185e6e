//! `RPRCKPT1` checkpoints: a little-endian binary container for model
//! parameters, batch-norm statistics, normalization constants and the
//! optional schedule / optimizer / generator state of an interrupted run.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RPRCKPT1"
//! version    u32
//! metadata   u32 count, then (str key, str value)*
//! layers     u32 count, then str*            e.g. "conv2d(1,8,3,1,1)"
//! levels     u8 present, [str family, u32 n, f64*n]
//! params     u32 count, then param*
//! batchnorm  u32 count, then (str name, f64 momentum, f64 eps, tensor mean, tensor var)*
//! norm       u32 channels, f64 mean*, f64 std*
//! schedule   u8 present, [schedule]
//! optim      u8 present, [optim]
//! rng        u8 present, [u64 seed, u64 state]
//!
//! str        u32 byte length, UTF-8 bytes
//! tensor     u32 ndim, u64 extent*ndim, f64 data (row-major)
//! param      str name, u8 kind (0 quantizable, 1 continuous),
//!            u8 has_axis, u32 axis, tensor values, u32 n, f64 scales*n
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::nn::{parse_layers, BatchNormState, LayerSpec, Model, ParamGroup, ParamKind};
use crate::optim::{OptimKind, OptimState};
use crate::quantize::{LevelFamily, LevelSet};
use crate::rng::Rng;
use crate::rpr::{Phase, SchedulePlan, ScheduleState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RPRCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub layers: Vec<LayerSpec>,
    pub levels: Option<LevelSet>,
    pub params: Vec<ParamGroup>,
    pub batch_norm: BTreeMap<String, BatchNormState>,
    pub normalization: Normalization,
    pub schedule: Option<ScheduleState>,
    pub optim: Option<OptimState>,
    pub rng: Option<Rng>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, normalization: Normalization) -> Self {
        Checkpoint {
            metadata: BTreeMap::new(),
            layers: model.specs(),
            levels: None,
            params: model.params().to_vec(),
            batch_norm: model.batch_norm().clone(),
            normalization,
            schedule: None,
            optim: None,
            rng: None,
        }
    }

    /// Rebuilds the model described by this checkpoint.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.layers, &mut Rng::new(0))?;
        model
            .load_state(self.params.clone(), self.batch_norm.clone())
            .map_err(|e| Error::Checkpoint {
                offset: 0,
                msg: format!("parameters do not match the stored architecture: {e}"),
            })?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.str(&l.to_string());
        }
        w.flag(self.levels.is_some());
        if let Some(levels) = &self.levels {
            w.str(levels.family().as_str());
            w.f64s(levels.levels());
        }
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u8(match p.kind {
                ParamKind::Quantizable => 0,
                ParamKind::Continuous => 1,
            });
            w.flag(p.filter_axis.is_some());
            w.u32(p.filter_axis.unwrap_or(0) as u32);
            w.tensor(&p.values);
            w.f64s(&p.scales);
        }
        w.u32(self.batch_norm.len() as u32);
        for (name, bn) in &self.batch_norm {
            w.str(name);
            w.f64(bn.momentum);
            w.f64(bn.eps);
            w.tensor(&bn.running_mean);
            w.tensor(&bn.running_var);
        }
        w.u32(self.normalization.mean.len() as u32);
        for &m in &self.normalization.mean {
            w.f64(m);
        }
        for &s in &self.normalization.std {
            w.f64(s);
        }
        w.flag(self.schedule.is_some());
        if let Some(s) = &self.schedule {
            write_schedule(&mut w, s);
        }
        w.flag(self.optim.is_some());
        if let Some(o) = &self.optim {
            write_optim(&mut w, o);
        }
        w.flag(self.rng.is_some());
        if let Some(r) = &self.rng {
            w.u64(r.seed());
            w.u64(r.state());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: "bad magic, not an RPRCKPT1 file".into(),
            });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(at, format!("unsupported format version {version}")));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.count()? {
            let k = r.str()?;
            metadata.insert(k, r.str()?);
        }
        let mut layer_strs = Vec::new();
        for _ in 0..r.count()? {
            layer_strs.push(r.str()?);
        }
        let layers = parse_layers(&layer_strs).map_err(|e| r.error(format!("bad layer descriptor: {e}")))?;
        let levels = if r.flag()? {
            let at = r.pos;
            let family: LevelFamily = r.str()?.parse().map_err(|e| r.error_at(at, format!("{e}")))?;
            let values = r.f64s()?;
            Some(LevelSet::from_parts(family, values).map_err(|e| r.error(format!("{e}")))?)
        } else {
            None
        };
        let mut params = Vec::new();
        for _ in 0..r.count()? {
            let name = r.str()?;
            let at = r.pos;
            let kind = match r.u8()? {
                0 => ParamKind::Quantizable,
                1 => ParamKind::Continuous,
                k => return Err(r.error_at(at, format!("bad parameter kind {k}"))),
            };
            let has_axis = r.flag()?;
            let axis = r.u32()? as usize;
            let values = r.tensor()?;
            let mut p = ParamGroup::new(name, values, kind, has_axis.then_some(axis));
            p.scales = r.f64s()?;
            params.push(p);
        }
        let mut batch_norm = BTreeMap::new();
        for _ in 0..r.count()? {
            let name = r.str()?;
            let momentum = r.f64()?;
            let eps = r.f64()?;
            let running_mean = r.tensor()?;
            let running_var = r.tensor()?;
            batch_norm.insert(
                name,
                BatchNormState {
                    running_mean,
                    running_var,
                    momentum,
                    eps,
                },
            );
        }
        let c = r.count()?;
        let mean = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let schedule = if r.flag()? { Some(read_schedule(&mut r)?) } else { None };
        let optim = if r.flag()? { Some(read_optim(&mut r)?) } else { None };
        let rng = if r.flag()? {
            let seed = r.u64()?;
            Some(Rng::from_parts(seed, r.u64()?))
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(r.error(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            metadata,
            layers,
            levels,
            params,
            batch_norm,
            normalization: Normalization { mean, std },
            schedule,
            optim,
            rng,
        })
    }

    /// Writes via a temporary file and rename, so readers never see a
    /// partially written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
            offset: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn write_schedule(w: &mut Writer, s: &ScheduleState) {
    let p = &s.plan;
    w.f64(p.initial_ff);
    w.f64s(&p.ladder);
    w.u32(p.epochs_per_rung);
    w.u32(p.lr_drop_after);
    w.u32(p.final_epochs_per_lr);
    w.f64s(&p.final_lr_divisors);
    w.u32(p.patience);
    w.f64(p.min_delta);
    w.u32(p.max_initial_epochs);
    w.f64(p.base_lr);
    w.u8(s.phase.code());
    w.f64(s.ff);
    w.f64(s.lr);
    w.u64(s.rung as u64);
    w.u32(s.epochs_at_ff);
    w.f64(s.best_val);
    w.u32(s.epochs_since_improve);
    w.u64(s.epoch);
}

fn read_schedule(r: &mut Reader) -> Result<ScheduleState> {
    let plan = SchedulePlan {
        initial_ff: r.f64()?,
        ladder: r.f64s()?,
        epochs_per_rung: r.u32()?,
        lr_drop_after: r.u32()?,
        final_epochs_per_lr: r.u32()?,
        final_lr_divisors: r.f64s()?,
        patience: r.u32()?,
        min_delta: r.f64()?,
        max_initial_epochs: r.u32()?,
        base_lr: r.f64()?,
    };
    let at = r.pos;
    let code = r.u8()?;
    let phase = Phase::from_code(code).ok_or_else(|| r.error_at(at, format!("bad phase code {code}")))?;
    Ok(ScheduleState {
        plan,
        phase,
        ff: r.f64()?,
        lr: r.f64()?,
        rung: r.u64()? as usize,
        epochs_at_ff: r.u32()?,
        best_val: r.f64()?,
        epochs_since_improve: r.u32()?,
        epoch: r.u64()?,
    })
}

fn write_optim(w: &mut Writer, o: &OptimState) {
    match o.kind() {
        OptimKind::Sgd { momentum } => {
            w.u8(0);
            w.f64(momentum);
        }
        OptimKind::Adam { beta1, beta2, eps } => {
            w.u8(1);
            w.f64(beta1);
            w.f64(beta2);
            w.f64(eps);
        }
    }
    w.f64(o.lr());
    w.u64(o.step_count());
    w.u32(o.moments().len() as u32);
    for (name, moments) in o.moments() {
        w.str(name);
        w.u32(moments.len() as u32);
        for m in moments {
            w.tensor(m);
        }
    }
}

fn read_optim(r: &mut Reader) -> Result<OptimState> {
    let at = r.pos;
    let kind = match r.u8()? {
        0 => OptimKind::Sgd { momentum: r.f64()? },
        1 => OptimKind::Adam {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        },
        k => return Err(r.error_at(at, format!("bad optimizer kind {k}"))),
    };
    let lr = r.f64()?;
    let step_count = r.u64()?;
    let mut moments = BTreeMap::new();
    for _ in 0..r.count()? {
        let name = r.str()?;
        let n = r.count()?;
        let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        moments.insert(name, tensors);
    }
    let end = r.pos;
    OptimState::from_parts(kind, lr, step_count, moments).map_err(|e| r.error_at(end, format!("{e}")))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn flag(&mut self, v: bool) {
        self.u8(v as u8);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f64(x);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn error(&self, msg: String) -> Error {
        self.error_at(self.pos, msg)
    }

    fn error_at(&self, offset: usize, msg: String) -> Error {
        Error::Checkpoint {
            offset: offset as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.error_at(at, format!("bad flag byte {v}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// An element count, sanity-checked against the remaining bytes.
    fn count(&mut self) -> Result<usize> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n > self.bytes.len() - self.pos {
            return Err(self.error_at(at, format!("count {n} exceeds remaining {} bytes", self.bytes.len() - self.pos)));
        }
        Ok(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String> {
        let n = self.count()?;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.error_at(at, "invalid UTF-8 string".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let ndim = self.count()?;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.saturating_mul(8) <= self.bytes.len() - self.pos)
            .ok_or_else(|| self.error_at(at, format!("tensor shape {shape:?} exceeds remaining bytes")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| self.error_at(at, format!("{e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn sample() -> Checkpoint {
        let specs = [
            LayerSpec::Linear { inputs: 3, outputs: 4 },
            LayerSpec::BatchNorm2d { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::Linear { inputs: 4, outputs: 4 },
            LayerSpec::BatchNorm2d { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::Linear { inputs: 4, outputs: 2 },
        ];
        let model = Model::new(&specs, &mut Rng::new(3)).unwrap();
        let mut c = Checkpoint::from_model(&model, Normalization::identity(1));
        c.levels = Some(LevelSet::ternary());
        c.metadata.insert("command".into(), "test".into());
        c.schedule = Some(ScheduleState::new(SchedulePlan::default()).unwrap());
        c.optim = Some(OptimState::new(OptimKind::adam(), 1e-3).unwrap());
        c.rng = Some(Rng::from_parts(5, 77));
        c
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params, c.params);
        assert_eq!(back.schedule, c.schedule);
        assert_eq!(back.rng, c.rng);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 8, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }
}
