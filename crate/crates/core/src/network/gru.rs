use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use super::conv::Conv;

use super::layers::conv;

/// Convolutional GRU cell.
///
/// `z, r = sigmoid(W_g * [x, h])`, `q = tanh(W_q * [x, r h])`,
/// `h' = (1 - z) h + z q`. The update and reset gates share one convolution
/// (`gates`), update first. Starting from `h` in `(-1, 1)` the new state stays there.
#[derive(Debug, Clone)]
pub struct ConvGru {
    gates: Conv,
    candidate: Conv,
    hidden: usize,
}

impl ConvGru {
    pub const KERNEL: usize = 3;

    pub fn new(input: usize, hidden: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            gates: conv(input + hidden, 2 * hidden, Self::KERNEL, 1, vb.pp("gates"))?,
            candidate: conv(input + hidden, hidden, Self::KERNEL, 1, vb.pp("candidate"))?,
            hidden,
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, input: &Tensor, state: &Tensor) -> candle_core::Result<Tensor> {
        let xh = Tensor::cat(&[input, state], 1)?;
        let gates = candle_nn::ops::sigmoid(&self.gates.forward(&xh)?)?;
        let update = gates.narrow(1, 0, self.hidden)?;
        let reset = gates.narrow(1, self.hidden, self.hidden)?;
        let xrh = Tensor::cat(&[input, &(reset * state)?], 1)?;
        let candidate = self.candidate.forward(&xrh)?.tanh()?;
        let keep = update.affine(-1.0, 1.0)?;
        (keep * state)? + (update * candidate)?
    }
}
