//! Network inputs built from dataset records, and sequence-level prediction.

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array3, Axis};

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::network::{check_resolution, AledNetwork};
use crate::representations::{build_event_volume, normalize_depth, project_lidar};
use crate::types::{CameraModel, DepthPair, SequenceRecord};

/// Inputs for one recurrent step: an optional normalized LiDAR image and the event volume.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub lidar: Option<Array2<f32>>,
    pub events: Array3<f32>,
}

/// Mirrors columns of the last two axes.
pub fn flip_width<A: Clone, D: ndarray::Dimension>(a: &ndarray::Array<A, D>) -> ndarray::Array<A, D> {
    let mut v = a.view();
    v.invert_axis(Axis(a.ndim() - 1));
    v.to_owned()
}

/// Builds the inputs of `record` for a sensor described by `camera`.
///
/// With `flip`, the LiDAR image is mirrored after projection; the record's
/// events are expected to be mirrored already.
pub fn prepare_step(record: &SequenceRecord, camera: &CameraModel, bins: usize, flip: bool) -> Result<StepInput> {
    let (h, w) = camera.shape();
    let events = build_event_volume(&record.window, bins, h, w)?.data.mapv(|v| v as f32);
    let lidar = record.lidar.as_ref().map(|cloud| {
        let img = normalize_depth(&project_lidar(cloud, camera).data, camera.max_range);
        if flip {
            flip_width(&img)
        } else {
            img
        }
    });
    Ok(StepInput { lidar, events })
}

pub fn prepare_sequence(seq: &Sequence) -> Result<Vec<StepInput>> {
    seq.records
        .iter()
        .map(|r| prepare_step(r, &seq.camera, seq.bins, false))
        .collect()
}

/// Stacks `(C, H, W)` planes into an `(N, C, H, W)` tensor.
pub fn stack_planes(planes: &[Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (c, h, w) = planes.first().map(|p| p.dim()).ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut data = Vec::with_capacity(planes.len() * c * h * w);
    for p in planes {
        if p.dim() != (c, h, w) {
            return Err(Error::shape((c, h, w), p.dim()));
        }
        data.extend(p.iter().copied());
    }
    Ok(Tensor::from_vec(data, (planes.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// Splits an `(N, 2, H, W)` prediction into per-sample normalized maps.
pub fn unstack_prediction(pred: &Tensor) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    let (n, c, h, w) = pred.dims4()?;
    if c != 2 {
        return Err(Error::shape((n, 2, h, w), pred.dims()));
    }
    let values = pred.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let all = Array3::from_shape_vec((n * 2, h, w), values).expect("prediction size");
    Ok((0..n)
        .map(|i| {
            (
                all.slice(s![2 * i, .., ..]).to_owned(),
                all.slice(s![2 * i + 1, .., ..]).to_owned(),
            )
        })
        .collect())
}

/// Normalized prediction clamped to `[0, 1]` and scaled to meters.
pub fn to_meters(normalized: &Array2<f64>, max_range: f64) -> Array2<f32> {
    normalized.mapv(|v| (v.clamp(0.0, 1.0) * max_range) as f32)
}

/// Runs the network over a whole sequence from a zero state; one depth pair per record.
pub fn infer_sequence(network: &AledNetwork, seq: &Sequence) -> Result<Vec<DepthPair>> {
    let (h, w) = seq.camera.shape();
    check_resolution(h, w)?;
    if network.config().bins != seq.bins {
        return Err(Error::InvalidArgument(format!(
            "network expects {} temporal bins, sequence has {}",
            network.config().bins,
            seq.bins
        )));
    }
    let (dtype, device) = (network.dtype(), network.device().clone());
    let mut state = network.init_state(1, h, w)?;
    let mut out = Vec::with_capacity(seq.len());
    for input in prepare_sequence(seq)? {
        let events = stack_planes(&[input.events], dtype, &device)?;
        let lidar = match &input.lidar {
            Some(img) => Some(stack_planes(&[img.clone().insert_axis(Axis(0))], dtype, &device)?),
            None => None,
        };
        let (pred, next) = network.forward_step(lidar.as_ref().map(|t| (t, None)), &events, &state)?;
        state = next;
        let (bf, af) = unstack_prediction(&pred)?.remove(0);
        out.push(DepthPair {
            d_bf: to_meters(&bf, seq.camera.max_range),
            d_af: to_meters(&af, seq.camera.max_range),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Model;
    use crate::network::NetworkConfig;
    use crate::synthetic::{generate_sequence, SceneSpec};

    #[test]
    fn flip_width_reverses_columns() {
        let a = Array3::from_shape_fn((2, 2, 3), |(c, r, x)| (c * 100 + r * 10 + x) as f32);
        let f = flip_width(&a);
        assert_eq!(f[[1, 1, 0]], a[[1, 1, 2]]);
        assert_eq!(flip_width(&f), a);
    }

    #[test]
    fn inference_over_a_short_sequence() {
        let mut scene = SceneSpec::desk(4);
        scene.camera.width = 32;
        scene.camera.height = 16;
        scene.camera.cx = 15.5;
        scene.camera.cy = 7.5;
        scene.duration_s = 0.15;
        let seq = Sequence {
            camera: scene.camera,
            bins: scene.bins,
            records: generate_sequence(&scene).unwrap(),
        };
        let model = Model::new(NetworkConfig::small(4), DType::F32, 0).unwrap();
        let pairs = infer_sequence(&model.network, &seq).unwrap();
        assert_eq!(pairs.len(), 3);
        for p in &pairs {
            assert_eq!(p.shape(), (16, 32));
            assert!(p.d_bf.iter().chain(p.d_af.iter()).all(|&v| (0.0..=200.0).contains(&v)));
        }
        let model = Model::new(NetworkConfig { base_channels: 4, bins: 3 }, DType::F32, 0).unwrap();
        assert!(infer_sequence(&model.network, &seq).is_err());
    }
}
