//! Learned 2x convex upsampling guided by a finer-scale feature map.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use super::conv::Conv;

use super::layers::{conv, PRelu};

/// Number of coarse neighbours mixed into each fine pixel (3x3 window).
pub const NEIGHBOURS: usize = 9;
/// Fine pixels per coarse pixel along each axis.
pub const FACTOR: usize = 2;
/// Mask channels emitted by the guide convolution. Channel `k * 4 + a * 2 + b`
/// weights neighbour `k` (row-major in the 3x3 window) for fine offset `(a, b)`.
pub const MASK_CHANNELS: usize = NEIGHBOURS * FACTOR * FACTOR;
/// Index of the window centre.
pub const CENTRE: usize = 4;

#[derive(Debug, Clone)]
pub struct ConvexUpsample {
    reduce: Conv,
    reduce_act: PRelu,
    mask: Conv,
}

impl ConvexUpsample {
    pub const KERNEL: usize = 5;

    /// `channels` input features (halved on output), `guide_channels` in the fine guide.
    pub fn new(channels: usize, guide_channels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        if channels % 2 != 0 {
            candle_core::bail!("convex upsampling needs an even channel count, got {channels}");
        }
        Ok(Self {
            reduce: conv(channels, channels / 2, Self::KERNEL, 1, vb.pp("reduce"))?,
            reduce_act: PRelu::new(vb.pp("reduce_act"))?,
            mask: conv(guide_channels, MASK_CHANNELS, Self::KERNEL, FACTOR, vb.pp("mask"))?,
        })
    }

    /// Channel-halving transform applied before the convex combination.
    pub fn reduce(&self, features: &Tensor) -> candle_core::Result<Tensor> {
        self.reduce_act.forward(&self.reduce.forward(features)?)
    }

    /// Softmax-normalized weights `(N, 9, 2, 2, h, w)` predicted from the guide.
    pub fn weights(&self, guide: &Tensor) -> candle_core::Result<Tensor> {
        let logits = self.mask.forward(guide)?;
        let (n, _, h, w) = logits.dims4()?;
        let logits = logits.reshape((n, NEIGHBOURS, FACTOR, FACTOR, h, w))?;
        candle_nn::ops::softmax(&logits, 1)
    }

    pub fn forward(&self, features: &Tensor, guide: &Tensor) -> candle_core::Result<Tensor> {
        let (_, c, h, w) = features.dims4()?;
        let (_, _, gh, gw) = guide.dims4()?;
        if c % 2 != 0 {
            candle_core::bail!("convex upsampling needs an even channel count, got {c}");
        }
        if gh != FACTOR * h || gw != FACTOR * w {
            candle_core::bail!("guide is {gh}x{gw}, expected {}x{}", FACTOR * h, FACTOR * w);
        }
        let reduced = self.reduce(features)?;
        convex_combine(&reduced, &self.weights(guide)?)
    }
}

/// Each fine pixel `(2i + a, 2j + b)` is `sum_k weights[k, a, b, i, j] * f[i + dy_k, j + dx_k]`
/// over the zero-padded 3x3 coarse neighbourhood.
pub fn convex_combine(features: &Tensor, weights: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = features.dims4()?;
    let expected = [n, NEIGHBOURS, FACTOR, FACTOR, h, w];
    if weights.dims() != expected {
        candle_core::bail!("mask shape {:?} != {:?}", weights.dims(), expected);
    }
    let padded = features.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let taps = (0..NEIGHBOURS)
        .map(|k| padded.narrow(2, k / 3, h)?.narrow(3, k % 3, w))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let taps = Tensor::stack(&taps, 2)?.reshape(vec![n, c, NEIGHBOURS, 1, 1, h, w])?;
    let mixed = taps.broadcast_mul(&weights.unsqueeze(1)?)?.sum(2)?;
    mixed
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((n, c, FACTOR * h, FACTOR * w))
}
