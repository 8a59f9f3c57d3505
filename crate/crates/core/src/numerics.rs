//! Flat-tensor arithmetic, fp16/fp32 conversion and the AXPBY updater.
//!
//! Every optimizer here is written as a short sequence of AXPBY steps
//! (`alpha * a + beta * b`) followed by a parameter step. The per-element
//! operation order is fixed and documented on [`apply_update_slices`] so that
//! a scalar reference written elsewhere reproduces it bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact fp16 -> fp32 widening.
#[inline]
pub fn widen(x: f16) -> f32 {
    x.to_f32()
}

/// fp32 -> fp16 narrowing, round-to-nearest-even.
#[inline]
pub fn narrow(x: f32) -> f16 {
    f16::from_f32(x)
}

pub fn widen_slice(xs: &[f16]) -> Vec<f32> {
    xs.iter().map(|&x| widen(x)).collect()
}

pub fn narrow_slice(xs: &[f32]) -> Vec<f16> {
    xs.iter().map(|&x| narrow(x)).collect()
}

/// Removes the loss scale from one scaled fp16 gradient. Every path that turns
/// a scaled fp16 gradient into an fp32 update input goes through here.
#[inline]
pub fn unscale(g: f16, loss_scale: f32) -> f32 {
    widen(g) / loss_scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentData {
    F16(Vec<f16>),
    F32(Vec<f32>),
}

/// A contiguous run of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatSegment {
    pub offset: usize,
    pub data: SegmentData,
}

impl FlatSegment {
    /// Checks `len > 0` and `offset + len <= total`.
    pub fn new(offset: usize, data: SegmentData, total: usize) -> Result<Self> {
        let seg = Self { offset, data };
        if seg.is_empty() {
            return Err(Error::InvalidArgument("empty segment".into()));
        }
        if offset + seg.len() > total {
            return Err(Error::InvalidArgument(format!(
                "segment [{offset}, {}) exceeds parameter count {total}",
                offset + seg.len()
            )));
        }
        Ok(seg)
    }

    pub fn len(&self) -> usize {
        match &self.data {
            SegmentData::F16(v) => v.len(),
            SegmentData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            SegmentData::F16(_) => Dtype::F16,
            SegmentData::F32(_) => Dtype::F32,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }

    pub fn widened(&self) -> FlatSegment {
        match &self.data {
            SegmentData::F16(v) => FlatSegment { offset: self.offset, data: SegmentData::F32(widen_slice(v)) },
            SegmentData::F32(_) => self.clone(),
        }
    }

    pub fn narrowed(&self) -> FlatSegment {
        match &self.data {
            SegmentData::F32(v) => FlatSegment { offset: self.offset, data: SegmentData::F16(narrow_slice(v)) },
            SegmentData::F16(_) => self.clone(),
        }
    }
}

/// Elementwise `alpha * a + beta * b`.
#[inline]
pub fn axpby1(alpha: f32, a: f32, beta: f32, b: f32) -> f32 {
    alpha * a + beta * b
}

pub fn axpby(alpha: f32, a: &[f32], beta: f32, b: &[f32]) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| axpby1(alpha, x, beta, y)).collect())
}

/// In-place variant used by the updater: `a <- alpha * a + beta * b`.
pub fn axpby_in_place(alpha: f32, a: &mut [f32], beta: f32, b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { expected: a.len(), actual: b.len() });
    }
    for (x, &y) in a.iter_mut().zip(b) {
        *x = axpby1(alpha, *x, beta, y);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
    Adagrad,
}

/// Persisted per-parameter variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variable {
    Params,
    Momentum,
    Variance,
    Grad,
}

impl Variable {
    pub fn name(self) -> &'static str {
        match self {
            Variable::Params => "params32",
            Variable::Momentum => "momentum",
            Variable::Variance => "variance",
            Variable::Grad => "grad",
        }
    }
}

impl OptimizerKind {
    /// fp32 state variables this optimizer reads and writes back.
    pub fn state_variables(self) -> &'static [Variable] {
        match self {
            OptimizerKind::Adam => &[Variable::Params, Variable::Momentum, Variable::Variance],
            OptimizerKind::SgdMomentum => &[Variable::Params, Variable::Momentum],
            OptimizerKind::Adagrad => &[Variable::Params, Variable::Variance],
        }
    }

    /// Device buffers needed per element during an update: the states plus the gradient, all fp32.
    pub fn update_bytes_per_element(self) -> u64 {
        4 * (self.state_variables().len() as u64 + 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adagrad => "adagrad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub momentum_coef: f32,
    pub bias_correction: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_coef: 0.9,
            bias_correction: true,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn sgd_momentum(lr: f32, momentum_coef: f32) -> Self {
        Self { kind: OptimizerKind::SgdMomentum, lr, momentum_coef, ..Self::default() }
    }

    pub fn adagrad(lr: f32) -> Self {
        Self { kind: OptimizerKind::Adagrad, lr, eps: 1e-10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f32| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {x}")))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        unit("momentum_coef", self.momentum_coef)?;
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Master fp32 parameters plus moments for one segment.
///
/// All three arrays have the same length. Variables an optimizer does not use
/// stay at zero and are never persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerShard {
    pub params32: Vec<f32>,
    pub momentum: Vec<f32>,
    pub variance: Vec<f32>,
    pub step_count: u64,
}

impl OptimizerShard {
    pub fn new(params32: Vec<f32>) -> Self {
        let n = params32.len();
        Self { params32, momentum: vec![0.0; n], variance: vec![0.0; n], step_count: 0 }
    }

    pub fn len(&self) -> usize {
        self.params32.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params32.is_empty()
    }

    /// Bytes of the three fp32 arrays, i.e. 6M for the segment's fp16 size M.
    pub fn byte_size(&self) -> usize {
        3 * 4 * self.len()
    }
}

/// `base^t` by repeated multiplication, left to right.
pub fn powi_repeated(base: f32, t: u64) -> f32 {
    let mut acc = 1.0f32;
    for _ in 0..t {
        acc *= base;
    }
    acc
}

/// Updates one run of elements in place for update number `step` (1-based).
///
/// Per element, with `g = clip_scale * grad[i]`:
///
/// * Adam: `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*(g*g)`, then with
///   `mh = m / (1 - b1^t)` and `vh = v / (1 - b2^t)` (or `m`, `v` without bias
///   correction) `p = p - (lr * mh) / (sqrt(vh) + eps)`.
/// * SGD with momentum: `m = mu*m + 1*g`, `p = p - lr * m`.
/// * AdaGrad: `v = 1*v + 1*(g*g)`, `p = p - (lr * g) / (sqrt(v) + eps)`.
///
/// Slices for variables the optimizer does not use may be empty. The whole
/// gradient is checked before any state is touched; a NaN or Inf refuses the
/// step with [`Error::SkippedStep`].
pub fn apply_update_slices(
    params: &mut [f32],
    momentum: &mut [f32],
    variance: &mut [f32],
    grad: &[f32],
    cfg: &OptimizerConfig,
    clip_scale: f32,
    step: u64,
) -> Result<()> {
    let n = params.len();
    if grad.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: grad.len() });
    }
    for var in cfg.kind.state_variables() {
        let len = match var {
            Variable::Momentum => momentum.len(),
            Variable::Variance => variance.len(),
            _ => n,
        };
        if len != n {
            return Err(Error::LengthMismatch { expected: n, actual: len });
        }
    }
    if !(clip_scale > 0.0 && clip_scale <= 1.0) {
        return Err(Error::InvalidArgument(format!("clip_scale must lie in (0, 1], got {clip_scale}")));
    }
    if step == 0 {
        return Err(Error::InvalidArgument("update step numbers start at 1".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::SkippedStep);
    }

    let lr = cfg.lr;
    match cfg.kind {
        OptimizerKind::Adam => {
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let (one_minus_b1, one_minus_b2) = (1.0 - b1, 1.0 - b2);
            let (bc1, bc2) = if cfg.bias_correction {
                (1.0 - powi_repeated(b1, step), 1.0 - powi_repeated(b2, step))
            } else {
                (1.0, 1.0)
            };
            for i in 0..n {
                let g = clip_scale * grad[i];
                let m = axpby1(b1, momentum[i], one_minus_b1, g);
                let v = axpby1(b2, variance[i], one_minus_b2, g * g);
                let (mh, vh) = if cfg.bias_correction { (m / bc1, v / bc2) } else { (m, v) };
                params[i] -= (lr * mh) / (libm::sqrtf(vh) + cfg.eps);
                momentum[i] = m;
                variance[i] = v;
            }
        }
        OptimizerKind::SgdMomentum => {
            let mu = cfg.momentum_coef;
            for i in 0..n {
                let g = clip_scale * grad[i];
                let m = axpby1(mu, momentum[i], 1.0, g);
                params[i] -= lr * m;
                momentum[i] = m;
            }
        }
        OptimizerKind::Adagrad => {
            for i in 0..n {
                let g = clip_scale * grad[i];
                let v = axpby1(1.0, variance[i], 1.0, g * g);
                params[i] -= (lr * g) / (libm::sqrtf(v) + cfg.eps);
                variance[i] = v;
            }
        }
    }
    Ok(())
}

/// Applies one optimizer step to a whole shard and returns the narrowed fp16
/// parameters. On [`Error::SkippedStep`] the shard is untouched and
/// `step_count` does not advance.
pub fn apply_update(
    shard: &mut OptimizerShard,
    grad: &[f32],
    cfg: &OptimizerConfig,
    clip_scale: f32,
) -> Result<Vec<f16>> {
    let step = shard.step_count + 1;
    apply_update_slices(
        &mut shard.params32,
        &mut shard.momentum,
        &mut shard.variance,
        grad,
        cfg,
        clip_scale,
        step,
    )?;
    shard.step_count = step;
    Ok(narrow_slice(&shard.params32))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckResult {
    pub has_nan_or_inf: bool,
    pub global_sq_norm: f32,
}

/// Streaming NaN/Inf detector and squared-norm accumulator over scaled fp16
/// gradients.
///
/// Each segment is summed sequentially into its own fp32 partial, and partials
/// are added to the total in the order segments are fed. Non-finite elements
/// set the flag and are left out of the norm.
#[derive(Debug, Clone)]
pub struct GradChecker {
    loss_scale: f32,
    total: f32,
    bad: bool,
}

impl GradChecker {
    pub fn new(loss_scale: f32) -> Result<Self> {
        if !(loss_scale > 0.0) || !loss_scale.is_finite() {
            return Err(Error::InvalidArgument(format!("loss scale must be positive, got {loss_scale}")));
        }
        Ok(Self { loss_scale, total: 0.0, bad: false })
    }

    pub fn feed_segment(&mut self, grads: &[f16]) {
        let mut partial = 0.0f32;
        for &g in grads {
            if !g.is_finite() {
                self.bad = true;
                continue;
            }
            let u = unscale(g, self.loss_scale);
            partial += u * u;
        }
        self.total += partial;
    }

    pub fn finish(&self) -> GradCheckResult {
        GradCheckResult { has_nan_or_inf: self.bad, global_sq_norm: self.total }
    }
}

pub fn check_gradients<'a, I>(segments: I, loss_scale: f32) -> Result<GradCheckResult>
where
    I: IntoIterator<Item = &'a [f16]>,
{
    let mut checker = GradChecker::new(loss_scale)?;
    for seg in segments {
        checker.feed_segment(seg);
    }
    Ok(checker.finish())
}

/// `min(1, max_norm / sqrt(global_sq_norm))`.
pub fn clip_scale_from_norm(global_sq_norm: f32, max_norm: f32) -> f32 {
    let norm = libm::sqrtf(global_sq_norm);
    if norm <= max_norm {
        1.0
    } else {
        max_norm / norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossScaleConfig {
    pub initial_scale: f32,
    pub factor: f32,
    pub growth_interval: u32,
    pub min_scale: f32,
}

impl Default for LossScaleConfig {
    fn default() -> Self {
        Self { initial_scale: 65536.0, factor: 2.0, growth_interval: 100, min_scale: 1.0 }
    }
}

/// Dynamic loss scaling: shrink on overflow, grow after a run of good steps.
#[derive(Debug, Clone)]
pub struct LossScaler {
    cfg: LossScaleConfig,
    scale: f32,
    good_steps: u32,
}

impl LossScaler {
    pub fn new(cfg: LossScaleConfig) -> Self {
        Self { cfg, scale: cfg.initial_scale, good_steps: 0 }
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Records the outcome of a step; returns `true` if the step must be skipped.
    pub fn update(&mut self, overflow: bool) -> bool {
        if overflow {
            self.scale = (self.scale / self.cfg.factor).max(self.cfg.min_scale);
            self.good_steps = 0;
            return true;
        }
        self.good_steps += 1;
        if self.good_steps >= self.cfg.growth_interval {
            self.scale *= self.cfg.factor;
            self.good_steps = 0;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn axpby_examples() {
        assert_eq!(axpby(1.0, &[1.0, 2.0], 0.0, &[9.0, 9.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(axpby(0.9, &[1.0, 1.0], 0.1, &[1.0, 1.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(axpby(0.5, &[2.0, 4.0], 2.0, &[1.0, 1.0]).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn axpby_length_mismatch() {
        assert_eq!(axpby(1.0, &[1.0], 1.0, &[1.0, 2.0]), Err(Error::LengthMismatch { expected: 1, actual: 2 }));
    }

    #[test]
    fn first_adam_step_from_zero_state() {
        let cfg = OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() };
        let mut shard = OptimizerShard::new(vec![0.0]);
        let p16 = apply_update(&mut shard, &[1.0], &cfg, 1.0).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((shard.params32[0] + 0.1).abs() < 1e-7);
        assert_eq!(shard.step_count, 1);
        assert_eq!(p16[0], narrow(shard.params32[0]));
        assert!((shard.momentum[0] - 0.1).abs() < 1e-7);
        assert!((shard.variance[0] - 0.001).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for cfg in [OptimizerConfig::adam(0.1), OptimizerConfig::sgd_momentum(0.1, 0.9), OptimizerConfig::adagrad(0.1)] {
            let mut shard = OptimizerShard::new(vec![1.5, -2.0, 0.25]);
            apply_update(&mut shard, &[0.0; 3], &cfg, 1.0).unwrap();
            assert_eq!(shard.params32, vec![1.5, -2.0, 0.25], "{:?}", cfg.kind);
        }
    }

    #[test]
    fn plain_sgd() {
        let cfg = OptimizerConfig::sgd_momentum(1.0, 0.0);
        let mut shard = OptimizerShard::new(vec![2.0]);
        apply_update(&mut shard, &[0.5], &cfg, 1.0).unwrap();
        assert_eq!(shard.params32, vec![1.5]);
    }

    #[test]
    fn non_finite_gradient_skips_without_touching_state() {
        let cfg = OptimizerConfig::adam(0.1);
        let mut shard = OptimizerShard::new(vec![1.0, 2.0]);
        let before = shard.clone();
        assert_eq!(apply_update(&mut shard, &[1.0, f32::NAN], &cfg, 1.0), Err(Error::SkippedStep));
        assert_eq!(shard, before);
        assert_eq!(apply_update(&mut shard, &[f32::INFINITY, 0.0], &cfg, 1.0), Err(Error::SkippedStep));
        assert_eq!(shard, before);
    }

    #[test]
    fn clip_scale_out_of_range_rejected() {
        let cfg = OptimizerConfig::adam(0.1);
        let mut shard = OptimizerShard::new(vec![1.0]);
        assert!(apply_update(&mut shard, &[1.0], &cfg, 0.0).is_err());
        assert!(apply_update(&mut shard, &[1.0], &cfg, 1.5).is_err());
    }

    #[test]
    fn check_gradients_examples() {
        let g = [f16::from_f32(1.0), f16::from_f32(2.0)];
        let r = check_gradients([&g[..]], 2.0).unwrap();
        assert_eq!(r, GradCheckResult { has_nan_or_inf: false, global_sq_norm: 1.25 });

        let inf = [f16::INFINITY];
        assert!(check_gradients([&inf[..]], 1.0).unwrap().has_nan_or_inf);

        let empty: [&[f16]; 0] = [];
        assert_eq!(check_gradients(empty, 1.0).unwrap(), GradCheckResult { has_nan_or_inf: false, global_sq_norm: 0.0 });

        assert!(check_gradients([&g[..]], 0.0).is_err());
    }

    #[test]
    fn clip_scale_examples() {
        assert_eq!(clip_scale_from_norm(4.0, 2.0), 1.0);
        assert_eq!(clip_scale_from_norm(16.0, 2.0), 0.5);
        assert_eq!(clip_scale_from_norm(0.0, 1.0), 1.0);
    }

    #[test]
    fn loss_scaler_halves_and_grows() {
        let mut s = LossScaler::new(LossScaleConfig { initial_scale: 8.0, factor: 2.0, growth_interval: 3, min_scale: 1.0 });
        assert!(s.update(true));
        assert_eq!(s.scale(), 4.0);
        assert!(!s.update(false));
        assert!(!s.update(false));
        assert!(!s.update(false));
        assert_eq!(s.scale(), 8.0);
    }

    #[test]
    fn optimizer_config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { eps: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shard_byte_size_is_six_m() {
        let shard = OptimizerShard::new(vec![0.0; 1024]);
        let m = 2 * 1024;
        assert_eq!(shard.byte_size(), 6 * m);
    }

    #[test]
    fn flat_segment_bounds() {
        assert!(FlatSegment::new(0, SegmentData::F32(vec![]), 4).is_err());
        assert!(FlatSegment::new(3, SegmentData::F32(vec![1.0, 2.0]), 4).is_err());
        let s = FlatSegment::new(2, SegmentData::F32(vec![1.0, 2.0]), 4).unwrap();
        assert_eq!(s.byte_len(), 8);
        assert_eq!(s.narrowed().widened(), s);
    }
}
