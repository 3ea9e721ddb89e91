//! Sequence-level training: augmentation, truncated backpropagation through
//! time, Adam and resumable progress.
//!
//! Each batch is a group of up to `batch_size` sequences processed in lockstep
//! from a zero state. Sequences are unrolled `tbptt_len` steps at a time and the
//! state is detached between unrolls. Gradients of all unrolls of a batch are
//! accumulated into one optimizer update, unless `step_per_unroll` is set.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::inference::{flip_width, prepare_step, stack_planes, StepInput};
use crate::losses::{attach_loss, LossBreakdown, LossConfig, StepTargets, Target, GRADIENT_SCALES};
use crate::network::{check_resolution, Model, NetworkConfig, NetworkState};
use crate::types::{CameraModel, DenseDepthGT, Event, EventWindow, SequenceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Side of the square random crop; `None` trains on full frames.
    pub crop: Option<usize>,
    pub hflip_prob: f64,
    pub tbptt_len: usize,
    pub seed: u64,
    pub base_channels: usize,
    pub bins: usize,
    pub alpha_warmup: f64,
    pub alpha_main: f64,
    pub step_per_unroll: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 50,
            crop: None,
            hflip_prob: 0.5,
            tbptt_len: 8,
            seed: 0,
            base_channels: 32,
            bins: 5,
            alpha_warmup: 0.1,
            alpha_main: 1.0,
            step_per_unroll: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("config key `{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "learning_rate",
        "batch_size",
        "epochs",
        "crop",
        "hflip_prob",
        "tbptt_len",
        "seed",
        "base_channels",
        "bins",
        "alpha_warmup",
        "alpha_main",
        "step_per_unroll",
    ];

    /// Fine-tuning preset: learning rate 1e-5 for 5 epochs.
    pub fn fine_tune() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 5,
            ..Self::default()
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            base_channels: self.base_channels,
            bins: self.bins,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha_warmup: self.alpha_warmup,
            alpha_main: self.alpha_main,
            scales: GRADIENT_SCALES.to_vec(),
        }
    }

    /// Sets one field from its textual value; unknown keys are refused by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "crop" => {
                self.crop = match v {
                    "none" | "full" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "hflip_prob" => self.hflip_prob = parse_value(key, v)?,
            "tbptt_len" => self.tbptt_len = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "base_channels" => self.base_channels = parse_value(key, v)?,
            "bins" => self.bins = parse_value(key, v)?,
            "alpha_warmup" => self.alpha_warmup = parse_value(key, v)?,
            "alpha_main" => self.alpha_main = parse_value(key, v)?,
            "step_per_unroll" => self.step_per_unroll = parse_value(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.tbptt_len == 0 {
            return bad("tbptt_len must be >= 1".into());
        }
        if let Some(c) = self.crop {
            if c == 0 || c % 8 != 0 {
                return bad(format!("crop must be a positive multiple of 8, got {c}"));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!("hflip_prob must be in [0, 1], got {}", self.hflip_prob));
        }
        self.network().validate()
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        match self.crop {
            Some(c) => writeln!(f, "crop = {c}")?,
            None => writeln!(f, "crop = none")?,
        }
        writeln!(f, "hflip_prob = {}", self.hflip_prob)?;
        writeln!(f, "tbptt_len = {}", self.tbptt_len)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "base_channels = {}", self.base_channels)?;
        writeln!(f, "bins = {}", self.bins)?;
        writeln!(f, "alpha_warmup = {}", self.alpha_warmup)?;
        writeln!(f, "alpha_main = {}", self.alpha_main)?;
        writeln!(f, "step_per_unroll = {}", self.step_per_unroll)
    }
}

/// Generator for the stream identified by `parts` under `seed`.
pub fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &p in parts {
        rng = ChaCha8Rng::seed_from_u64(rng.random::<u64>() ^ p);
    }
    rng
}

/// One crop window and flip decision, shared by every record of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl Augmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            row0: 0,
            col0: 0,
            height,
            width,
            flip: false,
        }
    }

    pub fn draw(height: usize, width: usize, crop: Option<usize>, hflip_prob: f64, rng: &mut impl Rng) -> Result<Self> {
        let (ch, cw) = match crop {
            Some(c) if c > height.min(width) => {
                return Err(Error::InvalidArgument(format!("crop {c} larger than {width}x{height} frame")));
            }
            Some(c) => (c, c),
            None => (height, width),
        };
        Ok(Self {
            row0: rng.random_range(0..=height - ch),
            col0: rng.random_range(0..=width - cw),
            height: ch,
            width: cw,
            flip: rng.random::<f64>() < hflip_prob,
        })
    }

    /// Camera model of the cropped sensor (principal point shifted).
    pub fn camera(&self, camera: &CameraModel) -> CameraModel {
        CameraModel {
            cx: camera.cx - self.col0 as f64,
            cy: camera.cy - self.row0 as f64,
            width: self.width,
            height: self.height,
            ..*camera
        }
    }

    /// Crops (and mirrors) an image.
    pub fn image<A: Clone>(&self, img: &Array2<A>) -> Array2<A> {
        let cropped = img
            .slice(s![self.row0..self.row0 + self.height, self.col0..self.col0 + self.width])
            .to_owned();
        if self.flip {
            flip_width(&cropped)
        } else {
            cropped
        }
    }

    /// Events inside the crop, translated (and mirrored `x -> W' - 1 - x`).
    pub fn events(&self, window: &EventWindow) -> EventWindow {
        let (r1, c1) = (self.row0 + self.height, self.col0 + self.width);
        let events = window
            .events
            .iter()
            .filter(|e| {
                let (x, y) = (usize::from(e.x), usize::from(e.y));
                (self.col0..c1).contains(&x) && (self.row0..r1).contains(&y)
            })
            .map(|e| {
                let x = usize::from(e.x) - self.col0;
                let x = if self.flip { self.width - 1 - x } else { x };
                Event::new(x as u16, (usize::from(e.y) - self.row0) as u16, e.t, e.p)
            })
            .collect();
        EventWindow {
            events,
            t_start: window.t_start,
            t_end: window.t_end,
        }
    }

    fn depth(&self, gt: &DenseDepthGT) -> DenseDepthGT {
        DenseDepthGT {
            data: self.image(&gt.data),
            valid: self.image(&gt.valid),
            t: gt.t,
        }
    }
}

/// Applies `aug` to the events and ground truth of `record`. The LiDAR sweep
/// is kept in its own frame; it is projected with [`Augmentation::camera`] and
/// mirrored as an image when inputs are built.
pub fn augment(record: &SequenceRecord, aug: &Augmentation) -> SequenceRecord {
    SequenceRecord {
        window: aug.events(&record.window),
        lidar: record.lidar.clone(),
        gt_begin: aug.depth(&record.gt_begin),
        gt_end: aug.depth(&record.gt_end),
    }
}

/// Network inputs and supervision of one augmented sequence.
pub struct PreparedSequence {
    pub inputs: Vec<StepInput>,
    pub targets: Vec<Arc<StepTargets>>,
    pub height: usize,
    pub width: usize,
}

pub fn prepare_training_sequence(seq: &Sequence, aug: &Augmentation) -> Result<PreparedSequence> {
    let camera = aug.camera(&seq.camera);
    let mut inputs = Vec::with_capacity(seq.len());
    let mut targets = Vec::with_capacity(seq.len());
    for record in &seq.records {
        let r = augment(record, aug);
        inputs.push(prepare_step(&r, &camera, seq.bins, aug.flip)?);
        targets.push(Arc::new(StepTargets {
            begin: Target::from_gt(&r.gt_begin, camera.max_range),
            end: Target::from_gt(&r.gt_end, camera.max_range),
        }));
    }
    Ok(PreparedSequence {
        inputs,
        targets,
        height: aug.height,
        width: aug.width,
    })
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-parameter update count and first/second moments.
    pub moments: BTreeMap<String, (u64, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient.
    pub fn step(&mut self, vars: &[(String, Var)], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in vars {
            let Some(g) = grads.get(name) else { continue };
            let g = g.detach();
            let entry = match self.moments.remove(name) {
                Some(e) => e,
                None => (0, g.zeros_like()?, g.zeros_like()?),
            };
            let (t, m, v) = entry;
            let t = t + 1;
            let m = (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            let v = (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let update = (m.affine(self.learning_rate / bc1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.moments.insert(name.clone(), (t, m, v));
        }
        Ok(())
    }
}

/// One log line per batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

impl fmt::Display for BatchLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.step, self.loss.l1, self.loss.gradient, self.loss.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub batches: usize,
    pub steps: u64,
    /// Mean of the per-batch losses.
    pub mean_loss: LossBreakdown,
    pub seconds: f64,
    /// Whether the epoch ran to the end (not stopped early by the caller).
    pub complete: bool,
}

/// Model, optimizer and position in the training schedule.
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// First batch of the current epoch not yet trained.
    pub next_batch: usize,
}

fn select_rows(state: &NetworkState, rows: &[u32]) -> Result<NetworkState> {
    let idx = Tensor::new(rows, state.scales[0].device())?;
    let pick = |t: &Tensor| t.index_select(&idx, 0);
    Ok(NetworkState {
        scales: [
            pick(&state.scales[0])?,
            pick(&state.scales[1])?,
            pick(&state.scales[2])?,
            pick(&state.scales[3])?,
        ],
    })
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.network(), DType::F32, config.seed)?;
        Ok(Self {
            optimizer: Adam::new(config.learning_rate),
            model,
            config,
            step: 0,
            epoch: 0,
            next_batch: 0,
        })
    }

    /// Order of the sequences in `epoch` (1-based).
    pub fn epoch_order(&self, count: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut derived_rng(self.config.seed, &[1, epoch as u64]));
        order
    }

    fn check_data(&self, data: &[Sequence]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        for seq in data {
            if seq.bins != self.config.bins {
                return Err(Error::InvalidArgument(format!(
                    "sequence has {} bins, model expects {}",
                    seq.bins, self.config.bins
                )));
            }
            if seq.is_empty() {
                return Err(Error::InvalidArgument("training sequence without records".into()));
            }
        }
        Ok(())
    }

    /// Trains the remaining batches of the current epoch. `on_batch` sees every
    /// batch log and may return `false` to stop after that batch (for example
    /// after saving a checkpoint); the epoch is then resumed by the next call.
    pub fn train_epoch(
        &mut self,
        data: &[Sequence],
        mut on_batch: impl FnMut(&BatchLog, &Trainer) -> Result<bool>,
    ) -> Result<EpochReport> {
        self.check_data(data)?;
        let epoch = self.epoch + 1;
        let order = self.epoch_order(data.len(), epoch);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        let start = Instant::now();
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        let mut complete = true;
        while self.next_batch < batches.len() {
            let b = self.next_batch;
            let seqs: Vec<&Sequence> = batches[b].iter().map(|&i| &data[i]).collect();
            let loss = self.train_batch(&seqs, epoch, b)?;
            self.next_batch += 1;
            sum += loss;
            count += 1;
            let log = BatchLog {
                epoch,
                step: self.step,
                loss,
            };
            log::info!("{log}");
            if !on_batch(&log, self)? && self.next_batch < batches.len() {
                complete = false;
                break;
            }
        }
        if complete {
            self.epoch = epoch;
            self.next_batch = 0;
        }
        Ok(EpochReport {
            epoch,
            batches: count,
            steps: self.step,
            mean_loss: if count > 0 {
                sum.scaled(1.0 / count as f64)
            } else {
                sum
            },
            seconds: start.elapsed().as_secs_f64(),
            complete,
        })
    }

    /// Forward/backward over one batch; returns its loss divided by the batch size.
    pub fn train_batch(&mut self, seqs: &[&Sequence], epoch: usize, batch: usize) -> Result<LossBreakdown> {
        let cfg = &self.config;
        let mut rng = derived_rng(cfg.seed, &[2, epoch as u64, batch as u64]);
        let mut prepared = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let (h, w) = seq.camera.shape();
            let aug = Augmentation::draw(h, w, cfg.crop, cfg.hflip_prob, &mut rng)?;
            prepared.push(prepare_training_sequence(seq, &aug)?);
        }
        let (h, w) = (prepared[0].height, prepared[0].width);
        check_resolution(h, w)?;
        if prepared.iter().any(|p| (p.height, p.width) != (h, w)) {
            return Err(Error::InvalidArgument(
                "sequences of one batch must share a resolution; set a crop".into(),
            ));
        }
        let alpha = cfg.loss().alpha(epoch);
        let scales = GRADIENT_SCALES;
        let n = seqs.len();
        let inv_n = 1.0 / n as f64;
        let t_len = cfg.tbptt_len;
        let per_unroll = cfg.step_per_unroll;
        let max_len = prepared.iter().map(|p| p.inputs.len()).max().unwrap_or(0);
        let network = &self.model.network;
        let (dtype, device) = (network.dtype(), network.device().clone());
        let vars = self.model.named_vars();

        let mut state = network.init_state(n, h, w)?;
        let mut active: Vec<usize> = (0..n).collect();
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = LossBreakdown::default();
        let mut unroll_start = 0;
        while unroll_start < max_len {
            let mut graph_loss: Option<Tensor> = None;
            for t in unroll_start..(unroll_start + t_len).min(max_len) {
                let still: Vec<usize> = active.iter().copied().filter(|&i| prepared[i].inputs.len() > t).collect();
                if still.len() != active.len() {
                    let rows: Vec<u32> = active
                        .iter()
                        .enumerate()
                        .filter(|(_, i)| still.contains(i))
                        .map(|(r, _)| r as u32)
                        .collect();
                    state = select_rows(&state, &rows)?;
                    active = still;
                }
                let inputs: Vec<&StepInput> = active.iter().map(|&i| &prepared[i].inputs[t]).collect();
                let events = stack_planes(
                    &inputs.iter().map(|s| s.events.clone()).collect::<Vec<_>>(),
                    dtype,
                    &device,
                )?;
                let with_lidar = inputs.iter().filter(|s| s.lidar.is_some()).count();
                let lidar = if with_lidar == 0 {
                    None
                } else {
                    let planes: Vec<_> = inputs
                        .iter()
                        .map(|s| {
                            s.lidar
                                .clone()
                                .unwrap_or_else(|| Array2::zeros((h, w)))
                                .insert_axis(Axis(0))
                        })
                        .collect();
                    let image = stack_planes(&planes, dtype, &device)?;
                    let mask = if with_lidar == inputs.len() {
                        None
                    } else {
                        let m: Vec<f32> = inputs.iter().map(|s| f32::from(u8::from(s.lidar.is_some()))).collect();
                        Some(Tensor::new(m.as_slice(), &device)?)
                    };
                    Some((image, mask))
                };
                let (pred, next) =
                    network.forward_step(lidar.as_ref().map(|(i, m)| (i, m.as_ref())), &events, &state)?;
                state = next;
                let targets: Vec<_> = active.iter().map(|&i| prepared[i].targets[t].clone()).collect();
                let (loss, breakdown) = attach_loss(&pred, &targets, alpha, &scales)?;
                if !breakdown.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: self.step,
                        l1: breakdown.l1,
                        msg: breakdown.gradient,
                    });
                }
                total += breakdown;
                graph_loss = Some(match graph_loss {
                    Some(acc) => (acc + loss)?,
                    None => loss,
                });
            }
            if let Some(loss) = graph_loss {
                let store = loss.affine(inv_n, 0.0)?.backward()?;
                for (name, var) in &vars {
                    if let Some(g) = store.get(var.as_tensor()) {
                        let g = g.detach();
                        let acc = match grads.remove(name) {
                            Some(prev) => (prev + g)?,
                            None => g,
                        };
                        grads.insert(name.clone(), acc);
                    }
                }
                if per_unroll {
                    self.optimizer.step(&vars, &grads)?;
                    self.step += 1;
                    grads.clear();
                }
            }
            state = state.detach();
            unroll_start += t_len;
        }
        if !per_unroll {
            self.optimizer.step(&vars, &grads)?;
            self.step += 1;
        }
        Ok(total.scaled(inv_n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Polarity, PointCloud};

    #[test]
    fn config_round_trip_and_refusal() {
        let cfg = TrainConfig {
            crop: Some(64),
            learning_rate: 1e-5,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);
        let err = TrainConfig::parse("learning_rate = 1e-3\nmomentum = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");
        assert!(TrainConfig::parse("crop = 60").is_err());
        assert!(TrainConfig::parse("tbptt_len = 0").is_err());
        let parsed = TrainConfig::parse("# comment\nbatch_size = 2  # trailing\ncrop = none\n").unwrap();
        assert_eq!(parsed.batch_size, 2);
        assert_eq!(parsed.crop, None);
        assert_eq!(TrainConfig::KEYS.len(), cfg.to_string().lines().count());
    }

    #[test]
    fn fine_tune_preset() {
        let f = TrainConfig::fine_tune();
        assert_eq!((f.learning_rate, f.epochs), (1e-5, 5));
    }

    fn record(h: usize, w: usize) -> SequenceRecord {
        let events = vec![
            Event::new(0, 0, 1, Polarity::Positive),
            Event::new(3, 1, 2, Polarity::Negative),
            Event::new((w - 1) as u16, (h - 1) as u16, 3, Polarity::Positive),
        ];
        let depth = Array2::from_shape_fn((h, w), |(r, c)| (1 + r * w + c) as f32);
        let mut gt = DenseDepthGT::full(depth, 0);
        gt.valid[[1, 2]] = false;
        SequenceRecord {
            window: EventWindow::new(events, 0, 10).unwrap(),
            lidar: Some(PointCloud { points: vec![], t: 0 }),
            gt_begin: gt.clone(),
            gt_end: DenseDepthGT { t: 10, ..gt },
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let r = record(8, 64);
        let aug = Augmentation {
            flip: true,
            ..Augmentation::identity(8, 64)
        };
        let once = augment(&r, &aug);
        assert_eq!(once.window.events[0].x, 63);
        assert_ne!(once.gt_begin, r.gt_begin);
        let twice = augment(&once, &aug);
        let key = |w: &EventWindow| {
            let mut v: Vec<_> = w.events.iter().map(|e| (e.t, e.x, e.y, e.p)).collect();
            v.sort();
            v
        };
        assert_eq!(key(&twice.window), key(&r.window));
        assert_eq!(twice.gt_begin, r.gt_begin);
        assert_eq!(twice.gt_end, r.gt_end);
    }

    #[test]
    fn full_frame_without_flip_is_identity() {
        let r = record(8, 16);
        let out = augment(&r, &Augmentation::identity(8, 16));
        assert_eq!(out, r);
    }

    #[test]
    fn crop_translates_and_drops() {
        let r = record(8, 16);
        let aug = Augmentation {
            row0: 1,
            col0: 2,
            height: 4,
            width: 8,
            flip: false,
        };
        let out = augment(&r, &aug);
        assert_eq!(out.window.len(), 1);
        assert_eq!((out.window.events[0].x, out.window.events[0].y), (1, 0));
        assert_eq!(out.gt_begin.data[[0, 0]], r.gt_begin.data[[1, 2]]);
        assert!(!out.gt_begin.valid[[0, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Augmentation::draw(8, 16, Some(16), 0.5, &mut rng).is_err());
    }

    #[test]
    fn augmentation_commutes_with_volume_building() {
        use crate::representations::build_event_volume;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (16, 24);
        let events: Vec<Event> = (0..200)
            .map(|i| {
                let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Event::new(rng.random_range(0..w) as u16, rng.random_range(0..h) as u16, i, p)
            })
            .collect();
        let window = EventWindow::new(events, 0, 200).unwrap();
        let aug = Augmentation {
            row0: 4,
            col0: 8,
            height: 8,
            width: 16,
            flip: true,
        };
        let direct = build_event_volume(&aug.events(&window), 5, 8, 16).unwrap().data;
        let full = build_event_volume(&window, 5, h, w).unwrap().data;
        let cropped = full.slice(s![.., 4..12, 8..24]).to_owned();
        assert_eq!(direct, flip_width(&cropped));
    }

    #[test]
    fn adam_leaves_zero_gradient_parameters_alone() {
        let var = Var::new(&[1.0f32, -2.0], &candle_core::Device::Cpu).unwrap();
        let vars = vec![("p".to_string(), var.clone())];
        let mut adam = Adam::new(0.1);
        let zero = BTreeMap::from([("p".to_string(), Tensor::new(&[0.0f32, 0.0], &candle_core::Device::Cpu).unwrap())]);
        adam.step(&vars, &zero).unwrap();
        assert_eq!(var.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0, -2.0]);
        let g = BTreeMap::from([("p".to_string(), Tensor::new(&[0.5f32, 0.0], &candle_core::Device::Cpu).unwrap())]);
        adam.step(&vars, &g).unwrap();
        let after = var.as_tensor().to_vec1::<f32>().unwrap();
        // second update of p[0]: zero gradient first, then 0.5
        let m = 0.1 * 0.5;
        let v = 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.9f64.powi(2));
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((f64::from(after[0]) - expected).abs() < 1e-6, "{} vs {expected}", after[0]);
        assert_eq!(after[1], -2.0);
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derived_rng(1, &[2, 3]).random();
        let b: u64 = derived_rng(1, &[2, 4]).random();
        let c: u64 = derived_rng(1, &[2, 3]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
