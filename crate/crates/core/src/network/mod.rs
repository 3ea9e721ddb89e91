//! Recurrent fusion network.
//!
//! Two encoders (LiDAR and events) feed convGRU cells that update four shared
//! recurrent states at scales 1/1, 1/2, 1/4 and 1/8. The decoder walks the
//! states from coarse to fine: at each finer scale the first half of that
//! state's channels guides a convex upsampling of the running features and the
//! second half is concatenated with the result.
//!
//! Parameter names (used verbatim as checkpoint keys), with `b = base_channels`:
//!
//! ```text
//! {lidar,event}_encoder.head.{conv.weight,conv.bias,act.slope}
//! {lidar,event}_encoder.stage{1,2,3}.{conv1,conv2,shortcut}.{weight,bias}
//! {lidar,event}_encoder.stage{1,2,3}.{act1,act_out}.slope
//! {lidar,event}_gru.s{1,2,3,4}.{gates,candidate}.{weight,bias}
//! decoder.res{1,2}.{conv1,conv2}.{weight,bias}, decoder.res{1,2}.{act1,act_out}.slope
//! decoder.up{1,2,3}.{reduce,mask}.{weight,bias}, decoder.up{1,2,3}.reduce_act.slope
//! decoder.fuse{1,2,3}.{conv.weight,conv.bias,act.slope}
//! decoder.predict.{weight,bias}
//! ```
//!
//! Convolution weights are `(out, in, k, k)`; every tensor is stored row-major.

pub mod conv;
mod gru;
pub mod layers;
pub mod upsample;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use conv::Conv;
pub use gru::ConvGru;
use layers::{conv, ConvAct, DownBlock, ResidualBlock, SeededInit};
pub use upsample::{convex_combine, ConvexUpsample};

/// Spatial reduction between the finest and coarsest state.
pub const DOWNSCALE: usize = 8;
pub const SCALES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Width of the full-resolution feature maps; doubled at every scale.
    pub base_channels: usize,
    /// Temporal bins per polarity in the event volume.
    pub bins: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            bins: 5,
        }
    }
}

impl NetworkConfig {
    pub fn small(base_channels: usize) -> Self {
        Self {
            base_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "base_channels must be even and >= 2, got {}",
                self.base_channels
            )));
        }
        if self.bins == 0 {
            return Err(Error::InvalidArgument("bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoder feature width at scale index `s` (0 = full resolution).
    pub fn feature_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Recurrent state width at scale index `s`: guide + fusion halves, except
    /// the coarsest scale which is a single block.
    pub fn state_channels(&self, s: usize) -> usize {
        if s + 1 == SCALES {
            self.feature_channels(s)
        } else {
            2 * self.feature_channels(s)
        }
    }

    pub fn event_channels(&self) -> usize {
        2 * self.bins
    }
}

pub fn check_resolution(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % DOWNSCALE != 0 || width % DOWNSCALE != 0 {
        return Err(Error::InvalidArgument(format!(
            "resolution {height}x{width} must be a non-zero multiple of {DOWNSCALE}"
        )));
    }
    Ok(())
}

/// The four convGRU hidden states, each `(N, C_s, H / 2^s, W / 2^s)`.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub scales: [Tensor; SCALES],
}

impl NetworkState {
    pub fn zeros(config: &NetworkConfig, batch: usize, height: usize, width: usize, dtype: DType, device: &Device) -> Result<Self> {
        check_resolution(height, width)?;
        let make = |s: usize| Tensor::zeros((batch, config.state_channels(s), height >> s, width >> s), dtype, device);
        Ok(Self {
            scales: [make(0)?, make(1)?, make(2)?, make(3)?],
        })
    }

    /// Same values, cut from the autograd graph.
    pub fn detach(&self) -> Self {
        Self {
            scales: self.scales.clone().map(|t| t.detach()),
        }
    }

    pub fn batch(&self) -> usize {
        self.scales[0].dims()[0]
    }

    /// `(H, W)` of the full-resolution state.
    pub fn resolution(&self) -> (usize, usize) {
        let d = self.scales[0].dims();
        (d[2], d[3])
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.scales.iter().map(|t| t.dims().to_vec()).collect()
    }

    /// Per-sample selection: `mask[n]` picks `other` over `self`.
    pub fn select(&self, other: &NetworkState, mask: &Tensor) -> Result<Self> {
        let pick = |a: &Tensor, b: &Tensor| -> candle_core::Result<Tensor> {
            let m = mask.to_dtype(a.dtype())?.reshape((a.dims()[0], 1, 1, 1))?;
            let keep = m.affine(-1.0, 1.0)?;
            a.broadcast_mul(&keep)? + b.broadcast_mul(&m)?
        };
        Ok(Self {
            scales: [
                pick(&self.scales[0], &other.scales[0])?,
                pick(&self.scales[1], &other.scales[1])?,
                pick(&self.scales[2], &other.scales[2])?,
                pick(&self.scales[3], &other.scales[3])?,
            ],
        })
    }

    /// Largest absolute entry over all scales.
    pub fn max_abs(&self) -> Result<f64> {
        let mut m = 0f64;
        for t in &self.scales {
            let v = t.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            m = m.max(v);
        }
        Ok(m)
    }
}

/// Input head plus three strided stages: features at the four state scales.
#[derive(Debug, Clone)]
pub struct Encoder {
    head: ConvAct,
    stages: [DownBlock; 3],
}

impl Encoder {
    pub const HEAD_KERNEL: usize = 5;

    fn new(config: &NetworkConfig, in_channels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let c = |s| config.feature_channels(s);
        Ok(Self {
            head: ConvAct::new(in_channels, c(0), Self::HEAD_KERNEL, 1, vb.pp("head"))?,
            stages: [
                DownBlock::new(c(0), c(1), vb.pp("stage1"))?,
                DownBlock::new(c(1), c(2), vb.pp("stage2"))?,
                DownBlock::new(c(2), c(3), vb.pp("stage3"))?,
            ],
        })
    }

    pub fn forward(&self, input: &Tensor) -> candle_core::Result<[Tensor; SCALES]> {
        let f0 = self.head.forward(input)?;
        let f1 = self.stages[0].forward(&f0)?;
        let f2 = self.stages[1].forward(&f1)?;
        let f3 = self.stages[2].forward(&f2)?;
        Ok([f0, f1, f2, f3])
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    res: [ResidualBlock; 2],
    up: [ConvexUpsample; 3],
    fuse: [ConvAct; 3],
    predict: Conv,
    config: NetworkConfig,
}

impl Decoder {
    fn new(config: &NetworkConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let c = |s| config.feature_channels(s);
        // up{i} goes from scale 4 - i to 3 - i
        let up = |i: usize| {
            let from = SCALES - i;
            ConvexUpsample::new(c(from), c(from - 1), vb.pp(format!("decoder.up{i}")))
        };
        let fuse = |i: usize| {
            let to = SCALES - 1 - i;
            ConvAct::new(2 * c(to), c(to), 1, 1, vb.pp(format!("decoder.fuse{i}")))
        };
        Ok(Self {
            res: [
                ResidualBlock::new(c(3), vb.pp("decoder.res1"))?,
                ResidualBlock::new(c(3), vb.pp("decoder.res2"))?,
            ],
            up: [up(1)?, up(2)?, up(3)?],
            fuse: [fuse(1)?, fuse(2)?, fuse(3)?],
            predict: conv(c(0), 2, 1, 1, vb.pp("decoder.predict"))?,
            config: *config,
        })
    }

    pub fn upsampler(&self, i: usize) -> &ConvexUpsample {
        &self.up[i]
    }

    pub fn forward(&self, state: &NetworkState) -> candle_core::Result<Tensor> {
        let mut x = self.res[1].forward(&self.res[0].forward(&state.scales[3])?)?;
        for i in 0..3 {
            let scale = 2 - i;
            let s = &state.scales[scale];
            let half = self.config.feature_channels(scale);
            let guide = s.narrow(1, 0, half)?;
            let fusion = s.narrow(1, half, half)?;
            let up = self.up[i].forward(&x, &guide)?;
            x = self.fuse[i].forward(&Tensor::cat(&[&up, &fusion], 1)?)?;
        }
        self.predict.forward(&x)
    }
}

#[derive(Debug, Clone)]
pub struct AledNetwork {
    config: NetworkConfig,
    lidar_encoder: Encoder,
    event_encoder: Encoder,
    lidar_gru: [ConvGru; SCALES],
    event_gru: [ConvGru; SCALES],
    decoder: Decoder,
    dtype: DType,
    device: Device,
}

impl AledNetwork {
    pub fn new(config: NetworkConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let grus = |prefix: &str| -> candle_core::Result<[ConvGru; SCALES]> {
            let g = |s: usize| {
                ConvGru::new(
                    config.feature_channels(s),
                    config.state_channels(s),
                    vb.pp(format!("{prefix}.s{}", s + 1)),
                )
            };
            Ok([g(0)?, g(1)?, g(2)?, g(3)?])
        };
        Ok(Self {
            config,
            lidar_encoder: Encoder::new(&config, 1, vb.pp("lidar_encoder"))?,
            event_encoder: Encoder::new(&config, config.event_channels(), vb.pp("event_encoder"))?,
            lidar_gru: grus("lidar_gru")?,
            event_gru: grus("event_gru")?,
            decoder: Decoder::new(&config, vb.clone())?,
            dtype: vb.dtype(),
            device: vb.device().clone(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn init_state(&self, batch: usize, height: usize, width: usize) -> Result<NetworkState> {
        NetworkState::zeros(&self.config, batch, height, width, self.dtype, &self.device)
    }

    fn check_input(&self, input: &Tensor, channels: usize, state: &NetworkState) -> Result<()> {
        let (h, w) = state.resolution();
        let expected = [state.batch(), channels, h, w];
        if input.dims() != expected {
            return Err(Error::shape(expected, input.dims()));
        }
        Ok(())
    }

    fn update(encoder: &Encoder, grus: &[ConvGru; SCALES], input: &Tensor, state: &NetworkState) -> Result<NetworkState> {
        let feats = encoder.forward(input)?;
        let step = |s: usize| grus[s].forward(&feats[s], &state.scales[s]);
        Ok(NetworkState {
            scales: [step(0)?, step(1)?, step(2)?, step(3)?],
        })
    }

    /// LiDAR update from a normalized `(N, 1, H, W)` projection.
    pub fn encode_lidar(&self, image: &Tensor, state: &NetworkState) -> Result<NetworkState> {
        self.check_input(image, 1, state)?;
        Self::update(&self.lidar_encoder, &self.lidar_gru, image, state)
    }

    /// Event update from a `(N, 2B, H, W)` volume.
    pub fn encode_events(&self, volume: &Tensor, state: &NetworkState) -> Result<NetworkState> {
        self.check_input(volume, self.config.event_channels(), state)?;
        Self::update(&self.event_encoder, &self.event_gru, volume, state)
    }

    /// Normalized `(N, 2, H, W)` prediction: channel 0 before, channel 1 after the events.
    pub fn decode(&self, state: &NetworkState) -> Result<Tensor> {
        Ok(self.decoder.forward(state)?)
    }

    /// Optional LiDAR update, event update, then prediction.
    ///
    /// `lidar` carries the image and, for batches where only some samples have a
    /// scan, a `(N,)` 0/1 mask of the samples to update.
    pub fn forward_step(
        &self,
        lidar: Option<(&Tensor, Option<&Tensor>)>,
        events: &Tensor,
        state: &NetworkState,
    ) -> Result<(Tensor, NetworkState)> {
        let state = match lidar {
            Some((image, None)) => self.encode_lidar(image, state)?,
            Some((image, Some(mask))) => {
                let updated = self.encode_lidar(image, state)?;
                state.select(&updated, mask)?
            }
            None => state.clone(),
        };
        let state = self.encode_events(events, &state)?;
        let pred = self.decode(&state)?;
        Ok((pred, state))
    }
}

/// A network together with the variables that own its parameters.
pub struct Model {
    pub network: AledNetwork,
    pub varmap: VarMap,
}

impl Model {
    /// Fresh network with parameters drawn from `seed`.
    pub fn new(config: NetworkConfig, dtype: DType, seed: u64) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_backend(Box::new(SeededInit::new(varmap.clone(), seed)), dtype, Device::Cpu);
        let network = AledNetwork::new(config, vb)?;
        Ok(Self { network, varmap })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.network.config()
    }

    /// Trainable variables sorted by canonical name.
    pub fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        let data = self.varmap.data().lock().expect("varmap poisoned");
        let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_shapes_for_reference_config() {
        let cfg = NetworkConfig::default();
        let s = NetworkState::zeros(&cfg, 1, 64, 64, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(
            s.shapes(),
            vec![vec![1, 64, 64, 64], vec![1, 128, 32, 32], vec![1, 256, 16, 16], vec![1, 256, 8, 8]]
        );
        assert_eq!(s.max_abs().unwrap(), 0.0);
        assert!(NetworkState::zeros(&cfg, 1, 60, 64, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn config_rejects_odd_base() {
        assert!(NetworkConfig::small(3).validate().is_err());
        assert!(NetworkConfig::small(4).validate().is_ok());
    }

    #[test]
    fn wrong_input_channels_are_rejected() {
        let model = Model::new(NetworkConfig::small(4), DType::F32, 0).unwrap();
        let state = model.network.init_state(1, 16, 16).unwrap();
        let bad = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.network.encode_events(&bad, &state), Err(Error::ShapeMismatch { .. })));
        assert!(model.network.encode_lidar(&bad, &state).is_err());
    }
}
