use aled::checkpoint::parameter_blob;
use aled::network::upsample::{CENTRE, FACTOR, NEIGHBOURS};
use aled::network::{convex_combine, AledNetwork, Model, NetworkConfig};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], scale: f64, seed: u64, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn positive(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    random(shape, 1.0, seed, dtype).abs().unwrap()
}

fn step(net: &AledNetwork, h: usize, w: usize, seed: u64) -> Tensor {
    let cfg = net.config();
    let state = net.init_state(1, h, w).unwrap();
    let lidar = positive(&[1, 1, h, w], seed, net.dtype());
    let events = positive(&[1, cfg.event_channels(), h, w], seed + 1, net.dtype());
    net.forward_step(Some((&lidar, None)), &events, &state).unwrap().0
}

#[test]
fn output_shape_at_several_resolutions() {
    let model = Model::new(NetworkConfig::small(8), DType::F32, 1).unwrap();
    for (h, w) in [(32, 32), (32, 64), (64, 32), (64, 64)] {
        assert_eq!(step(&model.network, h, w, 3).dims(), &[1, 2, h, w]);
    }
    let state = model.network.init_state(1, 32, 32).unwrap();
    let bad = Tensor::zeros((1, 1, 32, 24), DType::F32, &Device::Cpu).unwrap();
    assert!(model.network.encode_lidar(&bad, &state).is_err());
    assert!(model.network.init_state(1, 30, 32).is_err());
}

#[test]
fn reference_configuration() {
    let model = Model::new(NetworkConfig::default(), DType::F32, 0).unwrap();
    let count = model.parameter_count() as f64;
    assert!((count - 26e6).abs() <= 0.15 * 26e6, "{count}");
    let pred = step(&model.network, 32, 32, 0);
    assert_eq!(pred.dims(), &[1, 2, 32, 32]);
}

#[test]
fn centre_one_hot_mask_is_nearest_upsampling() {
    let (n, c, h, w) = (2, 3, 4, 5);
    let f = random(&[n, c, h, w], 2.0, 9, DType::F32);
    let mut mask = vec![0f32; n * NEIGHBOURS * FACTOR * FACTOR * h * w];
    let plane = FACTOR * FACTOR * h * w;
    for b in 0..n {
        let start = (b * NEIGHBOURS + CENTRE) * plane;
        mask[start..start + plane].fill(1.0);
    }
    let mask = Tensor::from_vec(mask, (n, NEIGHBOURS, FACTOR, FACTOR, h, w), &Device::Cpu).unwrap();
    let up = convex_combine(&f, &mask).unwrap();
    let expected = f.upsample_nearest2d(2 * h, 2 * w).unwrap();
    let diff = (up - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(diff, 0.0);
}

#[test]
fn upsampling_weights_sum_to_one() {
    let model = Model::new(NetworkConfig::small(8), DType::F32, 2).unwrap();
    for i in 0..3 {
        let up = model.network.decoder().upsampler(i);
        let guide_channels = 8 << (2 - i);
        let guide = random(&[1, guide_channels, 16, 12], 3.0, 4 + i as u64, DType::F32);
        let w = up.weights(&guide).unwrap();
        assert_eq!(w.dims(), &[1, NEIGHBOURS, FACTOR, FACTOR, 8, 6]);
        let total = w.sum(1).unwrap();
        let err = total.affine(1.0, -1.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn constant_features_stay_constant_inside() {
    let (h, w) = (6, 7);
    let f = Tensor::full(2.5f64, (1, 2, h, w), &Device::Cpu).unwrap();
    let logits = random(&[1, NEIGHBOURS, FACTOR, FACTOR, h, w], 4.0, 11, DType::F64);
    let weights = candle_nn::ops::softmax(&logits, 1).unwrap();
    let up = convex_combine(&f, &weights).unwrap();
    let inner = up.narrow(2, 2, 2 * h - 4).unwrap().narrow(3, 2, 2 * w - 4).unwrap();
    let err = inner.affine(1.0, -2.5).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(err < 1e-12, "{err}");
}

#[test]
fn states_stay_bounded() {
    // tanh rounds to exactly 1 for large arguments, so the open bound is checked in f64
    let model = Model::new(NetworkConfig::small(4), DType::F64, 5).unwrap();
    let net = &model.network;
    let mut state = net.init_state(1, 16, 16).unwrap();
    for i in 0..100u64 {
        state = if i % 3 == 0 {
            net.encode_lidar(&positive(&[1, 1, 16, 16], i, DType::F64), &state).unwrap()
        } else {
            let counts = random(&[1, 10, 16, 16], 8.0, i, DType::F64).abs().unwrap();
            net.encode_events(&counts, &state).unwrap()
        };
        let m = state.max_abs().unwrap();
        assert!(m < 1.0, "update {i}: {m}");
    }
}

#[test]
fn update_order_matters() {
    let model = Model::new(NetworkConfig::small(4), DType::F32, 6).unwrap();
    let net = &model.network;
    let state = net.init_state(1, 16, 16).unwrap();
    let lidar = positive(&[1, 1, 16, 16], 1, DType::F32);
    let events = positive(&[1, 10, 16, 16], 2, DType::F32);
    let le = net.encode_events(&events, &net.encode_lidar(&lidar, &state).unwrap()).unwrap();
    let el = net.encode_lidar(&lidar, &net.encode_events(&events, &state).unwrap()).unwrap();
    let diff = (&le.scales[0] - &el.scales[0]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(diff > 1e-4, "{diff}");
}

#[test]
fn same_seed_same_network() {
    let a = Model::new(NetworkConfig::small(4), DType::F32, 42).unwrap();
    let b = Model::new(NetworkConfig::small(4), DType::F32, 42).unwrap();
    let c = Model::new(NetworkConfig::small(4), DType::F32, 43).unwrap();
    assert_eq!(parameter_blob(&a).unwrap(), parameter_blob(&b).unwrap());
    assert_ne!(parameter_blob(&a).unwrap(), parameter_blob(&c).unwrap());
    let pa = step(&a.network, 16, 16, 1).flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let pb = step(&b.network, 16, 16, 1).flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let model = Model::new(NetworkConfig::small(4), DType::F64, 7).unwrap();
    let net = &model.network;
    let (h, w) = (16, 16);
    let lidar = positive(&[1, 1, h, w], 1, DType::F64);
    let events = positive(&[1, 10, h, w], 2, DType::F64);
    let probe = random(&[1, 2, h, w], 1.0, 3, DType::F64);
    let objective = || -> Tensor {
        let state = net.init_state(1, h, w).unwrap();
        let (pred, state) = net.forward_step(Some((&lidar, None)), &events, &state).unwrap();
        // a second step exercises the recurrence
        let (pred2, _) = net.forward_step(None, &events, &state).unwrap();
        ((pred * &probe).unwrap().sum_all().unwrap() + (pred2 * &probe).unwrap().sqr().unwrap().sum_all().unwrap())
            .unwrap()
    };
    let grads = objective().backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for (name, var) in model.named_vars() {
        if !(name.ends_with("weight") || name.ends_with("slope")) || rng.random::<f64>() > 0.35 {
            continue;
        }
        let analytic = grads.get(var.as_tensor()).expect("parameter in graph").flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let idx = rng.random_range(0..original.len());
        let eps = 1e-5;
        let eval_at = |delta: f64| {
            let mut v = original.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            objective().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
        var.set(&Tensor::from_vec(original.clone(), var.dims(), &Device::Cpu).unwrap()).unwrap();
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-3, "{name}[{idx}]: analytic {a} numeric {numeric}");
        checked += 1;
    }
    assert!(checked >= 10, "{checked}");
}
