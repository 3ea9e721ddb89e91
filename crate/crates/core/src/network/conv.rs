//! 2-D convolution lowered to patch extraction plus a batched matrix product.
//!
//! Patches are gathered by a custom op whose gradient scatters back into the
//! input, so the backward pass is two matrix products and one scatter.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor};
use candle_nn::{Init, VarBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Visits `(column offset, input offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (kk, l) = (self.patch_len(), self.positions());
        for b in 0..self.batch {
            for c in 0..self.channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (b * kk + (c * k + ky) * k + kx) * l;
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let src = ((b * self.channels + c) * self.height + iy as usize) * self.width;
                            for ox in 0..wo {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < self.width as isize {
                                    f(row + oy * wo + ox, src + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

/// `(N, C, H, W)` to `(N, C * k * k, H_out * W_out)` patch columns.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters columns back, summing overlaps.
struct Col2Im(Geometry);

fn gather<T: Copy + Default>(x: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.patch_len() * g.positions()];
    g.for_each_tap(|dst, src| out[dst] = x[src]);
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.channels * g.height * g.width];
    g.for_each_tap(|col, dst| out[dst] += cols[col]);
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous_slice(v, layout, "im2col")?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous_slice(v, layout, "im2col")?, g)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((g.batch, g.patch_len(), g.positions()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous_slice(v, layout, "col2im")?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous_slice(v, layout, "col2im")?, g)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }
}

/// Square-kernel convolution with bias and `kernel / 2` zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
}

impl Conv {
    /// Kaiming-normal weights `(out, in, k, k)` and uniform `±1/sqrt(in)` bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let weight = vb.get_with_hints(
            (out_channels, in_channels, kernel, kernel),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let bound = 1.0 / (in_channels as f64).sqrt();
        let bias = vb.get_with_hints(out_channels, "bias", Init::Uniform { lo: -bound, up: bound })?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Module for Conv {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (batch, channels, height, width) = xs.dims4()?;
        let (out_channels, in_channels, _, _) = self.weight.dims4()?;
        if channels != in_channels {
            candle_core::bail!("conv expects {in_channels} input channels, got {channels}");
        }
        let g = Geometry {
            batch,
            channels,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.kernel / 2,
        };
        let cols = xs.contiguous()?.apply_op1(Im2Col(g))?;
        let w = self.weight.reshape((1, out_channels, g.patch_len()))?;
        let w = if batch == 1 {
            w
        } else {
            w.broadcast_as((batch, out_channels, g.patch_len()))?.contiguous()?
        };
        w.matmul(&cols)?
            .broadcast_add(&self.bias.reshape((1, out_channels, 1))?)?
            .reshape((batch, out_channels, g.out_height(), g.out_width()))
    }
}
