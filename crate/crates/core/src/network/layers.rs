//! Building blocks: seeded parameter initialization, PReLU, instance norm,
//! encoder/decoder residual blocks.

use std::sync::Mutex;

use candle_core::{DType, Device, Module, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};

use super::conv::Conv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Var builder backend that materializes parameters into a [`VarMap`] from a
/// seeded generator, so a given seed always yields the same network.
pub(crate) struct SeededInit {
    varmap: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

impl SeededInit {
    pub(crate) fn new(varmap: VarMap, seed: u64) -> Self {
        Self {
            varmap,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn sample(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("init rng poisoned");
        match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| mean + stdev * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = match fan {
                    FanInOut::FanIn | FanInOut::FanOut => fan.for_shape(shape),
                };
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                }
            }
        }
    }
}

impl SimpleBackend for SeededInit {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("varmap poisoned");
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("parameter {name}: shape {:?} != requested {:?}", var.shape(), s);
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.sample(&s, h);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let data = self.varmap.data().lock().expect("varmap poisoned");
        match data.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("varmap poisoned").contains_key(name)
    }
}

pub(crate) fn conv(
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    vb: VarBuilder,
) -> candle_core::Result<Conv> {
    Conv::new(in_channels, out_channels, kernel, stride, vb)
}

/// Parametric ReLU with a single learned slope for the whole layer.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Tensor,
}

impl PRelu {
    pub const INITIAL_SLOPE: f64 = 0.25;

    pub fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let slope = vb.get_with_hints(1, "slope", Init::Const(Self::INITIAL_SLOPE))?;
        Ok(Self { slope })
    }
}

impl Module for PRelu {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let neg = xs.neg()?.relu()?.broadcast_mul(&self.slope)?;
        xs.relu()? - neg
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions (no affine).
pub fn instance_norm(xs: &Tensor) -> candle_core::Result<Tensor> {
    let mean = xs.mean_keepdim((2, 3))?;
    let centered = xs.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)
}

/// Convolution followed by PReLU.
#[derive(Debug, Clone)]
pub struct ConvAct {
    conv: Conv,
    act: PRelu,
}

impl ConvAct {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            conv: conv(in_channels, out_channels, kernel, stride, vb.pp("conv"))?,
            act: PRelu::new(vb.pp("act"))?,
        })
    }
}

impl Module for ConvAct {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.act.forward(&self.conv.forward(xs)?)
    }
}

/// Strided ResNet basic block with instance normalization (encoder stage).
#[derive(Debug, Clone)]
pub struct DownBlock {
    conv1: Conv,
    act1: PRelu,
    conv2: Conv,
    shortcut: Conv,
    act_out: PRelu,
}

impl DownBlock {
    pub const KERNEL: usize = 5;

    pub fn new(in_channels: usize, out_channels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            conv1: conv(in_channels, out_channels, Self::KERNEL, 2, vb.pp("conv1"))?,
            act1: PRelu::new(vb.pp("act1"))?,
            conv2: conv(out_channels, out_channels, Self::KERNEL, 1, vb.pp("conv2"))?,
            shortcut: conv(in_channels, out_channels, 1, 2, vb.pp("shortcut"))?,
            act_out: PRelu::new(vb.pp("act_out"))?,
        })
    }
}

impl Module for DownBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let y = instance_norm(&self.conv1.forward(xs)?)?;
        let y = self.act1.forward(&y)?;
        let y = instance_norm(&self.conv2.forward(&y)?)?;
        let skip = instance_norm(&self.shortcut.forward(xs)?)?;
        self.act_out.forward(&(y + skip)?)
    }
}

/// Same-resolution residual block used at the bottom of the decoder.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: Conv,
    act1: PRelu,
    conv2: Conv,
    act_out: PRelu,
}

impl ResidualBlock {
    pub const KERNEL: usize = 3;

    pub fn new(channels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            conv1: conv(channels, channels, Self::KERNEL, 1, vb.pp("conv1"))?,
            act1: PRelu::new(vb.pp("act1"))?,
            conv2: conv(channels, channels, Self::KERNEL, 1, vb.pp("conv2"))?,
            act_out: PRelu::new(vb.pp("act_out"))?,
        })
    }
}

impl Module for ResidualBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.act1.forward(&self.conv1.forward(xs)?)?;
        let y = self.conv2.forward(&y)?;
        self.act_out.forward(&(y + xs)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vb(seed: u64) -> (VarMap, VarBuilder<'static>) {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_backend(
            Box::new(SeededInit::new(varmap.clone(), seed)),
            DType::F32,
            Device::Cpu,
        );
        (varmap, vb)
    }

    #[test]
    fn prelu_uses_initial_slope() {
        let (_, vb) = vb(0);
        let act = PRelu::new(vb).unwrap();
        let x = Tensor::new(&[-2f32, 0.0, 3.0], &Device::Cpu).unwrap();
        assert_eq!(act.forward(&x).unwrap().to_vec1::<f32>().unwrap(), vec![-0.5, 0.0, 3.0]);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = instance_norm(&x).unwrap();
        let mean = y.mean_keepdim((2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let var = y.sqr().unwrap().mean_keepdim((2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (a, vba) = vb(7);
        let (b, vbb) = vb(7);
        let (c, vbc) = vb(8);
        for vb in [vba, vbb, vbc] {
            DownBlock::new(3, 4, vb.pp("blk")).unwrap();
        }
        let get = |m: &VarMap| m.data().lock().unwrap()["blk.conv1.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(get(&a), get(&b));
        assert_ne!(get(&a), get(&c));
    }

    #[test]
    fn down_block_halves_resolution() {
        let (_, vb) = vb(1);
        let blk = DownBlock::new(3, 6, vb).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 12), &Device::Cpu).unwrap();
        assert_eq!(blk.forward(&x).unwrap().dims(), &[2, 6, 8, 6]);
    }
}
