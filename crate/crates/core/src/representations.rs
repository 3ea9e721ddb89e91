//! Network input tensors built from raw sensor data.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::types::{CameraModel, EventVolume, EventWindow, PointCloud, Polarity, SparseDepthImage};

/// Default number of temporal bins per polarity.
pub const DEFAULT_BINS: usize = 5;

/// Normalized temporal coordinate of an event inside `window`, in `[0, bins - 1]`.
///
/// A zero-length window maps every event to `0`.
pub fn temporal_coordinate(t: i64, window: &EventWindow, bins: usize) -> f64 {
    let span = window.t_end - window.t_start;
    if span == 0 {
        return 0.0;
    }
    (bins - 1) as f64 * (t - window.t_start) as f64 / span as f64
}

/// Bilinear deposit weight of an event at normalized time `t_star` into `bin`.
pub fn bin_weight(bin: usize, t_star: f64) -> f64 {
    (1.0 - (bin as f64 - t_star).abs()).max(0.0)
}

/// Builds the `(2 * bins, height, width)` discretized event volume.
///
/// Each event spreads unit mass over the two temporal bins bracketing its
/// normalized timestamp. Events must lie on the sensor.
pub fn build_event_volume(
    window: &EventWindow,
    bins: usize,
    height: usize,
    width: usize,
) -> Result<EventVolume> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be at least 1".into()));
    }
    let mut data = Array3::<f64>::zeros((2 * bins, height, width));
    for e in &window.events {
        let (x, y) = (usize::from(e.x), usize::from(e.y));
        if x >= width || y >= height {
            return Err(Error::InvalidArgument(format!(
                "event at ({x}, {y}) outside {width}x{height} sensor"
            )));
        }
        let t_star = temporal_coordinate(e.t, window, bins);
        let offset = match e.p {
            Polarity::Negative => 0,
            Polarity::Positive => bins,
        };
        let lower = t_star.floor() as usize;
        for bin in lower..(lower + 2).min(bins) {
            let w = bin_weight(bin, t_star);
            if w > 0.0 {
                data[[offset + bin, y, x]] += w;
            }
        }
    }
    Ok(EventVolume { data, bins })
}

/// Pixel hit by a camera-frame point, or `None` if it falls off the sensor.
///
/// Pixel `k` covers `[k - 0.5, k + 0.5)` in image coordinates.
pub fn pinhole_pixel(model: &CameraModel, p_cam: [f64; 3]) -> Option<(usize, usize)> {
    let [x, y, z] = p_cam;
    if z <= 0.0 {
        return None;
    }
    let u = model.fx * x / z + model.cx;
    let v = model.fy * y / z + model.cy;
    let col = (u + 0.5).floor();
    let row = (v + 0.5).floor();
    if col < 0.0 || row < 0.0 || col >= model.width as f64 || row >= model.height as f64 {
        return None;
    }
    Some((row as usize, col as usize))
}

/// Projects a LiDAR sweep onto the event camera, keeping the nearest depth per pixel.
pub fn project_lidar(cloud: &PointCloud, model: &CameraModel) -> SparseDepthImage {
    let mut img = SparseDepthImage::zeros(model.height, model.width);
    for p in &cloud.points {
        let p_cam = model
            .t_cam_lidar
            .apply([f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]);
        let depth = p_cam[2];
        if !(depth > 0.0 && depth <= model.max_range) {
            continue;
        }
        let Some((row, col)) = pinhole_pixel(model, p_cam) else {
            continue;
        };
        let d = depth as f32;
        let cell = &mut img.data[[row, col]];
        if *cell == 0.0 || d < *cell {
            *cell = d;
        }
    }
    img
}

/// Meters to `[0, 1]` (for inputs within range).
pub fn normalize_depth(depth: &Array2<f32>, max_range: f64) -> Array2<f32> {
    let scale = max_range as f32;
    depth.mapv(|d| d / scale)
}

/// Normalized units back to meters, clamped to `[0, max_range]`.
pub fn denormalize_depth(normalized: &Array2<f32>, max_range: f64) -> Array2<f32> {
    let scale = max_range as f32;
    normalized.mapv(|v| (v * scale).clamp(0.0, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Event, RigidTransform};
    use proptest::prelude::*;

    fn ev(x: u16, y: u16, t: i64, pos: bool) -> Event {
        Event::new(x, y, t, if pos { Polarity::Positive } else { Polarity::Negative })
    }

    #[test]
    fn event_at_window_start_lands_in_first_bin() {
        let w = EventWindow::new(vec![ev(3, 2, 0, true)], 0, 10).unwrap();
        let vol = build_event_volume(&w, 5, 4, 6).unwrap();
        assert_eq!(vol.data.dim(), (10, 4, 6));
        assert_eq!(vol.data[[5, 2, 3]], 1.0);
        assert_eq!(vol.data.sum(), 1.0);
    }

    #[test]
    fn event_between_bins_splits_linearly() {
        // t* = 4 * 3 / 10 = 1.2
        let w = EventWindow::new(vec![ev(1, 1, 3, true)], 0, 10).unwrap();
        let vol = build_event_volume(&w, 5, 3, 3).unwrap();
        assert!((vol.data[[6, 1, 1]] - 0.8).abs() < 1e-12);
        assert!((vol.data[[7, 1, 1]] - 0.2).abs() < 1e-12);
        assert_eq!(vol.mass(Polarity::Negative), 0.0);
    }

    #[test]
    fn last_bin_and_degenerate_window() {
        let w = EventWindow::new(vec![ev(0, 0, 10, false)], 0, 10).unwrap();
        let vol = build_event_volume(&w, 5, 1, 1).unwrap();
        assert_eq!(vol.data[[4, 0, 0]], 1.0);

        let w = EventWindow::new(vec![ev(0, 0, 7, false), ev(0, 0, 7, true)], 7, 7).unwrap();
        let vol = build_event_volume(&w, 5, 1, 1).unwrap();
        assert_eq!(vol.data[[0, 0, 0]], 1.0);
        assert_eq!(vol.data[[5, 0, 0]], 1.0);

        let vol = build_event_volume(&w, 1, 1, 1).unwrap();
        assert_eq!(vol.data.dim(), (2, 1, 1));
        assert_eq!(vol.data.sum(), 2.0);
    }

    #[test]
    fn empty_window_gives_zero_volume() {
        let vol = build_event_volume(&EventWindow::empty(0, 10), 5, 4, 4).unwrap();
        assert_eq!(vol.data.dim(), (10, 4, 4));
        assert!(vol.data.iter().all(|&v| v == 0.0));
        assert!(build_event_volume(&EventWindow::empty(0, 1), 0, 4, 4).is_err());
    }

    fn camera(w: usize, h: usize) -> CameraModel {
        CameraModel {
            fx: 40.0,
            fy: 40.0,
            cx: 32.0,
            cy: 24.0,
            width: w,
            height: h,
            t_cam_lidar: RigidTransform::IDENTITY,
            max_range: 200.0,
        }
    }

    #[test]
    fn optical_axis_point_hits_principal_point() {
        let cloud = PointCloud {
            points: vec![[0.0, 0.0, 10.0]],
            t: 0,
        };
        let img = project_lidar(&cloud, &camera(64, 48));
        assert_eq!(img.data[[24, 32]], 10.0);
        assert_eq!(img.nonzero_count(), 1);
    }

    #[test]
    fn nearest_point_wins_a_pixel() {
        let cloud = PointCloud {
            points: vec![[0.0, 0.0, 8.0], [0.0, 0.0, 5.0], [0.0, 0.0, 9.0]],
            t: 0,
        };
        let img = project_lidar(&cloud, &camera(64, 48));
        assert_eq!(img.data[[24, 32]], 5.0);
    }

    #[test]
    fn dropped_points() {
        let cloud = PointCloud {
            points: vec![[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 250.0], [100.0, 0.0, 1.0]],
            t: 0,
        };
        let img = project_lidar(&cloud, &camera(64, 48));
        assert_eq!(img.nonzero_count(), 0);
        assert_eq!(project_lidar(&PointCloud::default(), &camera(64, 48)).nonzero_count(), 0);
    }

    #[test]
    fn depth_normalization() {
        let d = Array2::from_shape_vec((1, 3), vec![200.0f32, 0.0, 50.0]).unwrap();
        let n = normalize_depth(&d, 200.0);
        assert_eq!(n[[0, 0]], 1.0);
        assert_eq!(n[[0, 1]], 0.0);
        assert_eq!(denormalize_depth(&n, 200.0), d);
        let wild = Array2::from_shape_vec((1, 2), vec![-0.1f32, 1.7]).unwrap();
        assert_eq!(denormalize_depth(&wild, 200.0).into_raw_vec_and_offset().0, vec![0.0, 200.0]);
    }

    fn arb_window() -> impl Strategy<Value = EventWindow> {
        (0i64..1000, 1i64..500, prop::collection::vec((0u16..6, 0u16..5, 0.0f64..=1.0, any::<bool>()), 0..64))
            .prop_map(|(t0, span, raw)| {
                let mut events: Vec<Event> = raw
                    .into_iter()
                    .map(|(x, y, f, pos)| ev(x, y, t0 + (f * span as f64).round() as i64, pos))
                    .collect();
                events.sort_by_key(|e| e.t);
                EventWindow::new(events, t0, t0 + span).unwrap()
            })
    }

    proptest! {
        #[test]
        fn volume_conserves_mass(w in arb_window(), bins in 1usize..8) {
            let vol = build_event_volume(&w, bins, 5, 6).unwrap();
            prop_assert!(vol.data.iter().all(|&v| v >= 0.0));
            prop_assert!((vol.mass(Polarity::Negative) - w.count(Polarity::Negative) as f64).abs() < 1e-9);
            prop_assert!((vol.mass(Polarity::Positive) - w.count(Polarity::Positive) as f64).abs() < 1e-9);
        }

        #[test]
        fn time_reversal_mirrors_bins(w in arb_window(), bins in 1usize..8) {
            let mut reversed: Vec<Event> = w
                .events
                .iter()
                .map(|e| Event { t: w.t_start + w.t_end - e.t, ..*e })
                .collect();
            reversed.reverse();
            let rw = EventWindow::new(reversed, w.t_start, w.t_end).unwrap();
            let a = build_event_volume(&w, bins, 5, 6).unwrap();
            let b = build_event_volume(&rw, bins, 5, 6).unwrap();
            for pol in [Polarity::Negative, Polarity::Positive] {
                for bin in 0..bins {
                    let ca = a.data.index_axis(ndarray::Axis(0), a.channel(pol, bin));
                    let cb = b.data.index_axis(ndarray::Axis(0), b.channel(pol, bins - 1 - bin));
                    for (x, y) in ca.iter().zip(cb.iter()) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn projection_ignores_point_order(
            pts in prop::collection::vec(prop::array::uniform3(-5.0f32..5.0), 0..60),
            seed in any::<u64>(),
        ) {
            let cam = CameraModel { cx: 8.0, cy: 6.0, width: 16, height: 12, fx: 6.0, fy: 6.0, ..camera(16, 12) };
            let mut shuffled = pts.clone();
            let n = shuffled.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let a = project_lidar(&PointCloud { points: pts, t: 0 }, &cam);
            let b = project_lidar(&PointCloud { points: shuffled, t: 0 }, &cam);
            prop_assert_eq!(a, b);
        }
    }
}
