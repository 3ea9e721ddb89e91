//! Masked supervision losses in normalized depth units.
//!
//! Both terms are plain sums over pixels. Gradients are computed analytically
//! and handed to the autograd graph through [`attach_loss`].

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::DenseDepthGT;

pub const GRADIENT_SCALES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Gradient-matching weight during the first epoch.
    pub alpha_warmup: f64,
    /// Gradient-matching weight for every later epoch.
    pub alpha_main: f64,
    pub scales: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_warmup: 0.1,
            alpha_main: 1.0,
            scales: GRADIENT_SCALES.to_vec(),
        }
    }
}

impl LossConfig {
    /// Weight used throughout `epoch` (1-based).
    pub fn alpha(&self, epoch: usize) -> f64 {
        if epoch <= 1 {
            self.alpha_warmup
        } else {
            self.alpha_main
        }
    }
}

/// Normalized ground truth plus its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
}

impl Target {
    pub fn from_gt(gt: &DenseDepthGT, max_range: f64) -> Self {
        Self {
            depth: gt.data.mapv(|d| f64::from(d) / max_range),
            valid: gt.valid.clone(),
        }
    }

    pub fn full(depth: Array2<f64>) -> Self {
        let valid = Array2::from_elem(depth.dim(), true);
        Self { depth, valid }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.depth.dim()
    }
}

/// Supervision for one step: GT at the window start and end.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    pub begin: Target,
    pub end: Target,
}

/// A summed loss and the number of terms that contributed to it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskedLoss {
    pub value: f64,
    pub terms: usize,
}

impl MaskedLoss {
    /// Nothing was supervised (all pixels masked).
    pub fn is_empty(&self) -> bool {
        self.terms == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub gradient: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l1.is_finite() && self.gradient.is_finite() && self.total.is_finite()
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            l1: self.l1 * factor,
            gradient: self.gradient * factor,
            total: self.total * factor,
        }
    }
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, rhs: Self) {
        self.l1 += rhs.l1;
        self.gradient += rhs.gradient;
        self.total += rhs.total;
    }
}

fn check_shape(pred: (usize, usize), target: &Target) -> Result<()> {
    if pred != target.shape() || target.valid.dim() != target.shape() {
        return Err(Error::shape(target.shape(), pred));
    }
    Ok(())
}

fn l1_into(pred: ArrayView2<f64>, target: &Target, mut grad: Option<ArrayViewMut2<f64>>) -> MaskedLoss {
    let mut out = MaskedLoss::default();
    for ((idx, &p), &v) in pred.indexed_iter().zip(target.valid.iter()) {
        if !v {
            continue;
        }
        let r = p - target.depth[idx];
        out.value += r.abs();
        out.terms += 1;
        if let Some(g) = grad.as_mut() {
            g[idx] += if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    out
}

fn gradient_matching_into(
    pred: ArrayView2<f64>,
    target: &Target,
    scales: &[usize],
    mut grad: Option<ArrayViewMut2<f64>>,
) -> MaskedLoss {
    let (h, w) = pred.dim();
    let valid = &target.valid;
    // Differences are taken on the residual so constant offsets cancel exactly.
    let residual = &pred - &target.depth;
    let mut out = MaskedLoss::default();
    for &step in scales {
        for y in 0..h {
            for x in 0..w {
                if !valid[[y, x]] {
                    continue;
                }
                let r0 = residual[[y, x]];
                let dx = (x + step < w && valid[[y, x + step]]).then(|| residual[[y, x + step]] - r0);
                let dy = (y + step < h && valid[[y + step, x]]).then(|| residual[[y + step, x]] - r0);
                if dx.is_none() && dy.is_none() {
                    continue;
                }
                let (a, b) = (dx.unwrap_or(0.0), dy.unwrap_or(0.0));
                let norm = a.hypot(b);
                out.value += norm;
                out.terms += 1;
                if let (Some(g), true) = (grad.as_mut(), norm > 0.0) {
                    if dx.is_some() {
                        g[[y, x + step]] += a / norm;
                        g[[y, x]] -= a / norm;
                    }
                    if dy.is_some() {
                        g[[y + step, x]] += b / norm;
                        g[[y, x]] -= b / norm;
                    }
                }
            }
        }
    }
    out
}

/// Sum of absolute errors over valid pixels.
pub fn l1_loss(pred: ArrayView2<f64>, target: &Target) -> Result<MaskedLoss> {
    check_shape(pred.dim(), target)?;
    Ok(l1_into(pred, target, None))
}

pub fn l1_gradient(pred: ArrayView2<f64>, target: &Target) -> Result<Array2<f64>> {
    check_shape(pred.dim(), target)?;
    let mut g = Array2::zeros(pred.dim());
    l1_into(pred, target, Some(g.view_mut()));
    Ok(g)
}

/// Multiscale gradient matching: for each spacing `h`, the Euclidean norm of the
/// forward-difference mismatch `(dx, dy)` summed over pixels. A component is only
/// present when both of its endpoints are valid and on the image.
pub fn gradient_matching_loss(pred: ArrayView2<f64>, target: &Target, scales: &[usize]) -> Result<MaskedLoss> {
    check_shape(pred.dim(), target)?;
    Ok(gradient_matching_into(pred, target, scales, None))
}

pub fn gradient_matching_gradient(pred: ArrayView2<f64>, target: &Target, scales: &[usize]) -> Result<Array2<f64>> {
    check_shape(pred.dim(), target)?;
    let mut g = Array2::zeros(pred.dim());
    gradient_matching_into(pred, target, scales, Some(g.view_mut()));
    Ok(g)
}

/// `L1 + alpha * Lmsg` for one map; optionally accumulates its gradient.
pub fn map_loss(
    pred: ArrayView2<f64>,
    target: &Target,
    alpha: f64,
    scales: &[usize],
    mut grad: Option<ArrayViewMut2<f64>>,
) -> Result<LossBreakdown> {
    check_shape(pred.dim(), target)?;
    let l1 = l1_into(pred, target, grad.as_mut().map(|g| g.view_mut()));
    let msg = if alpha != 0.0 {
        match grad.as_mut() {
            Some(g) => {
                let mut gm = Array2::zeros(pred.dim());
                let m = gradient_matching_into(pred, target, scales, Some(gm.view_mut()));
                g.scaled_add(alpha, &gm);
                m
            }
            None => gradient_matching_into(pred, target, scales, None),
        }
    } else {
        gradient_matching_into(pred, target, scales, None)
    };
    Ok(LossBreakdown {
        l1: l1.value,
        gradient: msg.value,
        total: l1.value + alpha * msg.value,
    })
}

/// Sequence objective: sum over steps of the before/after map losses.
///
/// `preds[t]` is `(d_bf, d_af)` in normalized units.
pub fn total_loss(
    preds: &[(Array2<f64>, Array2<f64>)],
    targets: &[StepTargets],
    alpha: f64,
    scales: &[usize],
) -> Result<LossBreakdown> {
    if preds.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} supervised steps",
            preds.len(),
            targets.len()
        )));
    }
    let mut acc = LossBreakdown::default();
    for ((bf, af), tg) in preds.iter().zip(targets) {
        acc += map_loss(bf.view(), &tg.begin, alpha, scales, None)?;
        acc += map_loss(af.view(), &tg.end, alpha, scales, None)?;
    }
    Ok(acc)
}

struct PrecomputedLoss {
    value: f64,
    grad: Tensor,
}

impl CustomOp1 for PrecomputedLoss {
    fn name(&self) -> &'static str {
        "aled-depth-loss"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, _layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(vec![self.value as f32]),
            CpuStorage::F64(_) => CpuStorage::F64(vec![self.value]),
            _ => candle_core::bail!("depth loss: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(self.grad.broadcast_mul(grad_res)?))
    }
}

/// Loss of a `(N, 2, H, W)` prediction batch against per-sample targets.
///
/// Returns a differentiable scalar (summed over the batch) and its breakdown.
pub fn attach_loss(
    pred: &Tensor,
    targets: &[Arc<StepTargets>],
    alpha: f64,
    scales: &[usize],
) -> Result<(Tensor, LossBreakdown)> {
    let (n, c, h, w) = pred.dims4()?;
    if c != 2 || n != targets.len() {
        return Err(Error::shape((targets.len(), 2, h, w), pred.dims()));
    }
    let values = pred.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut grad = vec![0.0f64; values.len()];
    let mut acc = LossBreakdown::default();
    let plane = h * w;
    for (i, tg) in targets.iter().enumerate() {
        for (ch, target) in [(0, &tg.begin), (1, &tg.end)] {
            let off = (i * 2 + ch) * plane;
            let view = ArrayView2::from_shape((h, w), &values[off..off + plane]).expect("contiguous plane");
            let gview = ArrayViewMut2::from_shape((h, w), &mut grad[off..off + plane]).expect("contiguous plane");
            acc += map_loss(view, target, alpha, scales, Some(gview))?;
        }
    }
    let grad = Tensor::from_vec(grad, (n, c, h, w), pred.device())?.to_dtype(pred.dtype())?;
    let loss = pred.apply_op1(PrecomputedLoss { value: acc.total, grad })?;
    Ok((loss, acc))
}
