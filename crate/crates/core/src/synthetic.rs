//! Procedural scenes rendered into aligned events, LiDAR sweeps and exact depth.
//!
//! World coordinates follow the camera convention at zero yaw: `x` right,
//! `y` down, `z` forward. Scenes are made of textured rectangles and
//! axis-aligned boxes, so every depth value is an analytic ray intersection.
//!
//! Events follow the usual contrast model: linear intensity is rendered at
//! `substeps` instants per window, log intensity (floored at
//! [`INTENSITY_FLOOR`]) is interpolated linearly between them, and a pixel fires
//! each time it drifts `event_threshold` away from its last reference level.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Sequence};
use crate::error::{Error, Result};
use crate::types::{
    CameraModel, DenseDepthGT, Event, EventWindow, PointCloud, Polarity, RigidTransform, SequenceRecord,
};

pub const INTENSITY_FLOOR: f64 = 1e-3;
pub const SCENE_FILE: &str = "scene.json";
const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Uniform,
    /// Alternating squares of side `period` (meters).
    Checker { period: f64 },
    /// Product of sines along both surface axes.
    Sine { period: f64 },
    /// Bright for negative `u`, dark for positive `u`.
    Step,
}

impl Pattern {
    /// Value in `[-1, 1]` at surface coordinates `(u, v)`.
    fn eval(&self, u: f64, v: f64) -> f64 {
        match *self {
            Pattern::Uniform => 0.0,
            Pattern::Checker { period } => {
                let a = (u / period).floor() as i64 + (v / period).floor() as i64;
                if a.rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Pattern::Sine { period } => (2.0 * PI * u / period).sin() * (2.0 * PI * v / period).sin(),
            Pattern::Step => {
                if u < 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub albedo: f64,
    pub contrast: f64,
    pub pattern: Pattern,
}

impl Texture {
    pub fn intensity(&self, u: f64, v: f64) -> f64 {
        (self.albedo * (1.0 + self.contrast * self.pattern.eval(u, v))).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Finite rectangle spanned by `u_axis` and `normal x u_axis`.
    Rect {
        center: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        half_extent: [f64; 2],
        texture: Texture,
    },
    /// Axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3], texture: Texture },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Ray parameter and surface intensity of a hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub intensity: f64,
}

impl Primitive {
    pub fn center(&self) -> [f64; 3] {
        match self {
            Primitive::Rect { center, .. } => *center,
            Primitive::Cuboid { min, max, .. } => [
                0.5 * (min[0] + max[0]),
                0.5 * (min[1] + max[1]),
                0.5 * (min[2] + max[2]),
            ],
        }
    }

    /// Nearest intersection with `origin + s * dir` for `s > 0`.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        match *self {
            Primitive::Rect {
                center,
                normal,
                u_axis,
                half_extent,
                texture,
            } => {
                let n = normalized(normal);
                let denom = dot(n, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = dot(n, sub(center, origin)) / denom;
                if s <= RAY_EPS {
                    return None;
                }
                let local = sub(add_scaled(origin, dir, s), center);
                let u_dir = normalized(u_axis);
                let v_dir = cross(n, u_dir);
                let (u, v) = (dot(local, u_dir), dot(local, v_dir));
                if u.abs() > half_extent[0] || v.abs() > half_extent[1] {
                    return None;
                }
                Some(Hit {
                    distance: s,
                    intensity: texture.intensity(u, v),
                })
            }
            Primitive::Cuboid { min, max, texture } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for k in 0..3 {
                    if dir[k].abs() < 1e-15 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[k] - origin[k]) / dir[k];
                    let b = (max[k] - origin[k]) / dir[k];
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    if lo > t_near {
                        t_near = lo;
                        axis = k;
                    }
                    t_far = t_far.min(hi);
                }
                if t_near > t_far || t_near <= RAY_EPS {
                    return None;
                }
                let p = add_scaled(origin, dir, t_near);
                let (u, v) = match axis {
                    0 => (p[2], p[1]),
                    1 => (p[0], p[2]),
                    _ => (p[0], p[1]),
                };
                Some(Hit {
                    distance: t_near,
                    intensity: texture.intensity(u, v),
                })
            }
        }
    }
}

/// Camera pose at time `t_s`; motion is linear between keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub t_s: f64,
    pub position: [f64; 3],
    /// Rotation about the world `y` axis; positive turns the camera right.
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// World-from-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
}

impl Pose {
    fn from_yaw(position: [f64; 3], yaw_deg: f64) -> Self {
        let (s, c) = yaw_deg.to_radians().sin_cos();
        Self {
            rotation: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            position,
        }
    }

    fn rotate(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [dot(r[0], d), dot(r[1], d), dot(r[2], d)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub channels: usize,
    /// Total vertical field of view, centred on the horizon.
    pub vertical_fov_deg: f64,
    /// Samples per revolution.
    pub azimuth_steps: usize,
    pub rate_hz: f64,
}

impl LidarSpec {
    /// Elevation of each ring, bottom to top, radians.
    pub fn elevations(&self) -> Vec<f64> {
        let fov = self.vertical_fov_deg.to_radians();
        if self.channels == 1 {
            return vec![0.0];
        }
        (0..self.channels)
            .map(|i| -0.5 * fov + fov * i as f64 / (self.channels - 1) as f64)
            .collect()
    }

    /// Azimuth of each sample, radians, `0` straight ahead, positive to the left.
    pub fn azimuths(&self) -> Vec<f64> {
        (0..self.azimuth_steps)
            .map(|j| -PI + 2.0 * PI * j as f64 / self.azimuth_steps as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<Primitive>,
    pub trajectory: Vec<Keyframe>,
    pub camera: CameraModel,
    pub lidar: LidarSpec,
    /// Log-intensity contrast threshold.
    pub event_threshold: f64,
    pub gt_rate_hz: f64,
    pub duration_s: f64,
    /// Intensity renders per event window.
    pub substeps: usize,
    /// Background-noise events per pixel per second (0 disables).
    pub noise_rate_hz: f64,
    /// Intensity of rays that hit nothing.
    pub background_intensity: f64,
    /// Temporal bins recorded in the dataset metadata.
    pub bins: usize,
}

/// LiDAR frame: x forward, y left, z up; mounted `height` meters above the camera.
pub fn lidar_extrinsics(height: f64) -> RigidTransform {
    RigidTransform {
        rotation: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
        translation: [0.0, -height, 0.0],
    }
}

impl SceneSpec {
    /// Reduced-resolution sensor suite: 128x96 event camera, 8-ring LiDAR at
    /// 10 Hz, 20 Hz ground truth, 200 m range. No objects, static camera.
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            objects: Vec::new(),
            trajectory: vec![Keyframe {
                t_s: 0.0,
                position: [0.0; 3],
                yaw_deg: 0.0,
            }],
            camera: CameraModel {
                fx: 100.0,
                fy: 100.0,
                cx: 63.5,
                cy: 47.5,
                width: 128,
                height: 96,
                t_cam_lidar: lidar_extrinsics(0.1),
                max_range: 200.0,
            },
            lidar: LidarSpec {
                channels: 8,
                vertical_fov_deg: 20.0,
                azimuth_steps: 1024,
                rate_hz: 10.0,
            },
            event_threshold: 0.2,
            gt_rate_hz: 20.0,
            duration_s: 1.0,
            substeps: 8,
            noise_rate_hz: 0.0,
            background_intensity: 0.5,
            bins: 5,
        }
    }

    /// An enclosed street-like scene (ground, back wall, textured boxes) with a
    /// camera translating sideways and forward; box layout drawn from `seed`.
    pub fn desk(seed: u64) -> Self {
        let mut spec = Self::empty(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = |rng: &mut ChaCha8Rng| {
            let pattern = if rng.random_bool(0.5) {
                Pattern::Checker {
                    period: rng.random_range(0.4..1.2),
                }
            } else {
                Pattern::Sine {
                    period: rng.random_range(0.8..2.0),
                }
            };
            Texture {
                albedo: rng.random_range(0.25..0.9),
                contrast: rng.random_range(0.4..0.8),
                pattern,
            }
        };
        spec.objects.push(Primitive::Rect {
            center: [0.0, 1.5, 30.0],
            normal: [0.0, -1.0, 0.0],
            u_axis: [1.0, 0.0, 0.0],
            half_extent: [60.0, 40.0],
            texture: Texture {
                albedo: 0.4,
                contrast: 0.6,
                pattern: Pattern::Checker { period: 1.0 },
            },
        });
        spec.objects.push(Primitive::Rect {
            center: [0.0, -10.0, 40.0],
            normal: [0.0, 0.0, -1.0],
            u_axis: [1.0, 0.0, 0.0],
            half_extent: [60.0, 12.0],
            texture: texture(&mut rng),
        });
        for _ in 0..4 {
            let x = rng.random_range(-6.0..6.0);
            let z = rng.random_range(6.0..20.0);
            let w = rng.random_range(0.8..2.5);
            let h = rng.random_range(1.0..3.5);
            let d = rng.random_range(0.8..2.0);
            spec.objects.push(Primitive::Cuboid {
                min: [x - 0.5 * w, 1.5 - h, z],
                max: [x + 0.5 * w, 1.5, z + d],
                texture: texture(&mut rng),
            });
        }
        spec.trajectory = vec![
            Keyframe {
                t_s: 0.0,
                position: [0.0, 0.0, 0.0],
                yaw_deg: 0.0,
            },
            Keyframe {
                t_s: spec.duration_s,
                position: [1.5, 0.0, 1.0],
                yaw_deg: 2.0,
            },
        ];
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("scene: {msg}")));
        self.camera.validate()?;
        if self.trajectory.is_empty() {
            return bad("trajectory needs at least one keyframe".into());
        }
        if self.trajectory.windows(2).any(|w| w[1].t_s <= w[0].t_s) {
            return bad("keyframe times must increase".into());
        }
        for (name, rate) in [("gt_rate_hz", self.gt_rate_hz), ("lidar.rate_hz", self.lidar.rate_hz)] {
            if !(rate > 0.0 && rate.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive".into());
        }
        if !(self.event_threshold > 0.0) {
            return bad("event_threshold must be positive".into());
        }
        if self.substeps < 8 {
            return bad(format!("substeps must be >= 8, got {}", self.substeps));
        }
        if self.lidar.channels == 0 || self.lidar.azimuth_steps == 0 {
            return bad("LiDAR needs at least one channel and azimuth step".into());
        }
        if self.bins == 0 {
            return bad("bins must be >= 1".into());
        }
        if self.noise_rate_hz < 0.0 {
            return bad("noise_rate_hz must be non-negative".into());
        }
        let pose = self.pose(0.0);
        for (i, obj) in self.objects.iter().enumerate() {
            let rel = sub(obj.center(), pose.position);
            let z_cam = dot([pose.rotation[0][2], pose.rotation[1][2], pose.rotation[2][2]], rel);
            if z_cam <= 0.0 {
                return bad(format!("object {i} starts behind the camera"));
            }
        }
        Ok(())
    }

    /// Camera pose at `t_s` seconds (held constant outside the keyframe span).
    pub fn pose(&self, t_s: f64) -> Pose {
        let kf = &self.trajectory;
        let first = kf[0];
        if t_s <= first.t_s || kf.len() == 1 {
            return Pose::from_yaw(first.position, first.yaw_deg);
        }
        for w in kf.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t_s <= b.t_s {
                let f = (t_s - a.t_s) / (b.t_s - a.t_s);
                let lerp = |x: f64, y: f64| x + f * (y - x);
                let pos = [
                    lerp(a.position[0], b.position[0]),
                    lerp(a.position[1], b.position[1]),
                    lerp(a.position[2], b.position[2]),
                ];
                return Pose::from_yaw(pos, lerp(a.yaw_deg, b.yaw_deg));
            }
        }
        let last = kf[kf.len() - 1];
        Pose::from_yaw(last.position, last.yaw_deg)
    }

    fn cast(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
        self.objects
            .iter()
            .filter_map(|o| o.intersect(origin, dir))
            .min_by(|a, b| a.distance.total_cmp(&b.distance))
    }

    fn pixel_ray(&self, pose: &Pose, row: usize, col: usize) -> [f64; 3] {
        let c = &self.camera;
        let d_cam = [(col as f64 - c.cx) / c.fx, (row as f64 - c.cy) / c.fy, 1.0];
        pose.rotate(d_cam)
    }

    fn record_count(&self) -> usize {
        (self.duration_s * self.gt_rate_hz).round() as usize
    }
}

fn micros_to_s(t: i64) -> f64 {
    t as f64 * 1e-6
}

/// Exact camera-frame depth at every pixel; rays that hit nothing within
/// range read `max_range`.
pub fn render_depth(scene: &SceneSpec, t: i64) -> DenseDepthGT {
    let pose = scene.pose(micros_to_s(t));
    let c = &scene.camera;
    let max = c.max_range;
    let data = Array2::from_shape_fn((c.height, c.width), |(row, col)| {
        // the ray has unit camera-frame z, so its parameter is the depth
        let dir = scene.pixel_ray(&pose, row, col);
        let depth = scene.cast(pose.position, dir).map_or(max, |h| h.distance.min(max));
        depth as f32
    });
    DenseDepthGT::full(data, t)
}

/// Linear intensity image at `t`.
pub fn render_intensity(scene: &SceneSpec, t_s: f64) -> Array2<f64> {
    let pose = scene.pose(t_s);
    let c = &scene.camera;
    Array2::from_shape_fn((c.height, c.width), |(row, col)| {
        let dir = scene.pixel_ray(&pose, row, col);
        scene
            .cast(pose.position, dir)
            .map_or(scene.background_intensity, |h| h.intensity)
    })
}

fn log_intensity(scene: &SceneSpec, t_s: f64) -> Array2<f64> {
    render_intensity(scene, t_s).mapv(|i| i.max(INTENSITY_FLOOR).ln())
}

/// LiDAR sweep at `t` in the LiDAR frame; returns beyond `max_range` are dropped.
pub fn render_lidar(scene: &SceneSpec, t: i64) -> PointCloud {
    let pose = scene.pose(micros_to_s(t));
    let ext = &scene.camera.t_cam_lidar;
    let origin = add_scaled(pose.position, pose.rotate(ext.translation), 1.0);
    let lidar_to_cam = |d: [f64; 3]| {
        let r = &ext.rotation;
        [dot(r[0], d), dot(r[1], d), dot(r[2], d)]
    };
    let mut points = Vec::new();
    let azimuths = scene.lidar.azimuths();
    for phi in scene.lidar.elevations() {
        let (sp, cp) = phi.sin_cos();
        for &theta in &azimuths {
            let (st, ct) = theta.sin_cos();
            let d_lidar = [cp * ct, cp * st, sp];
            let dir = pose.rotate(lidar_to_cam(d_lidar));
            if let Some(hit) = scene.cast(origin, dir) {
                if hit.distance <= scene.camera.max_range {
                    let s = hit.distance;
                    points.push([(s * d_lidar[0]) as f32, (s * d_lidar[1]) as f32, (s * d_lidar[2]) as f32]);
                }
            }
        }
    }
    PointCloud { points, t }
}

/// Per-pixel contrast-threshold event generator carrying its reference levels
/// from one window to the next.
pub struct EventSimulator<'a> {
    scene: &'a SceneSpec,
    reference: Array2<f64>,
    last: Array2<f64>,
    t: i64,
}

impl<'a> EventSimulator<'a> {
    pub fn new(scene: &'a SceneSpec, t0: i64) -> Self {
        let last = log_intensity(scene, micros_to_s(t0));
        Self {
            scene,
            reference: last.clone(),
            last,
            t: t0,
        }
    }

    /// Events from the current time up to `t1` (inclusive).
    pub fn advance(&mut self, t1: i64) -> Result<EventWindow> {
        let t0 = self.t;
        if t1 <= t0 {
            return Err(Error::InvalidArgument(format!("cannot advance from {t0} to {t1}")));
        }
        let theta = self.scene.event_threshold;
        let steps = self.scene.substeps;
        let mut raw: Vec<(i64, u16, u16, Polarity)> = Vec::new();
        let mut t_prev = t0 as f64;
        for k in 1..=steps {
            let t_cur = t0 as f64 + (t1 - t0) as f64 * k as f64 / steps as f64;
            let cur = log_intensity(self.scene, t_cur * 1e-6);
            for ((idx, &now), before) in cur.indexed_iter().zip(self.last.iter()) {
                let reference = &mut self.reference[idx];
                let slope = now - before;
                let mut emit = |level: f64, p: Polarity| {
                    let frac = ((level - before) / slope).clamp(0.0, 1.0);
                    let t = (t_prev + frac * (t_cur - t_prev)).round() as i64;
                    raw.push((t.clamp(t0, t1), idx.0 as u16, idx.1 as u16, p));
                };
                while now - *reference >= theta {
                    *reference += theta;
                    emit(*reference, Polarity::Positive);
                }
                while *reference - now >= theta {
                    *reference -= theta;
                    emit(*reference, Polarity::Negative);
                }
            }
            self.last = cur;
            t_prev = t_cur;
        }
        self.t = t1;
        raw.sort_by_key(|&(t, y, x, p)| (t, y, x, p));
        let events = raw.into_iter().map(|(t, y, x, p)| Event::new(x, y, t, p)).collect();
        EventWindow::new(events, t0, t1)
    }
}

/// Events between `t0` and `t1`, with reference levels initialised at `t0`.
pub fn render_events(scene: &SceneSpec, t0: i64, t1: i64) -> Result<EventWindow> {
    EventSimulator::new(scene, t0).advance(t1)
}

fn add_noise(scene: &SceneSpec, window: &mut EventWindow, record: usize) {
    if scene.noise_rate_hz <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ (record as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let c = &scene.camera;
    let expected = scene.noise_rate_hz * micros_to_s(window.duration()) * (c.width * c.height) as f64;
    // rounding a uniformly jittered expectation keeps the count unbiased
    let count = (expected + rng.random::<f64>()).floor() as usize;
    for _ in 0..count {
        let p = if rng.random_bool(0.5) {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        window.events.push(Event::new(
            rng.random_range(0..c.width) as u16,
            rng.random_range(0..c.height) as u16,
            rng.random_range(window.t_start..=window.t_end),
            p,
        ));
    }
    window.events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
}

/// Window bounds of record `i`, microseconds.
pub fn record_bounds(scene: &SceneSpec, i: usize) -> (i64, i64) {
    let at = |k: usize| (k as f64 * 1e6 / scene.gt_rate_hz).round() as i64;
    (at(i), at(i + 1))
}

/// Renders the full sequence: one record per GT period, each LiDAR sweep
/// attached to the record whose window `[t_start, t_end)` contains it.
pub fn generate_sequence(scene: &SceneSpec) -> Result<Vec<SequenceRecord>> {
    scene.validate()?;
    let n = scene.record_count();
    let mut sim = EventSimulator::new(scene, 0);
    let mut records = Vec::with_capacity(n);
    let mut scan = 0usize;
    let scan_time = |j: usize| (j as f64 * 1e6 / scene.lidar.rate_hz).round() as i64;
    let mut gt_begin = render_depth(scene, 0);
    for i in 0..n {
        let (t0, t1) = record_bounds(scene, i);
        let mut window = sim.advance(t1)?;
        add_noise(scene, &mut window, i);
        let lidar = if scan_time(scan) < t1 {
            let cloud = render_lidar(scene, scan_time(scan));
            while scan_time(scan) < t1 {
                scan += 1;
            }
            Some(cloud)
        } else {
            None
        };
        debug_assert!(window.t_start == t0);
        let gt_end = render_depth(scene, t1);
        records.push(SequenceRecord {
            window,
            lidar,
            gt_begin: gt_begin.clone(),
            gt_end: gt_end.clone(),
        });
        gt_begin = gt_end;
    }
    Ok(records)
}

/// Generates the sequence and writes it (plus `scene.json`) under `dir`.
pub fn write_dataset(scene: &SceneSpec, dir: &Path) -> Result<Vec<SequenceRecord>> {
    let records = generate_sequence(scene)?;
    let seq = Sequence {
        camera: scene.camera,
        bins: scene.bins,
        records,
    };
    dataset::write_sequence(dir, &seq)?;
    let path = dir.join(SCENE_FILE);
    let json = serde_json::to_vec_pretty(scene).expect("scene serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(seq.records)
}
