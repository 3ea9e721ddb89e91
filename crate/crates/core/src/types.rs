//! Domain value types shared by every stage of the pipeline.
//!
//! Depth images are stored in meters as `f32`, matching the on-disk format.
//! A depth of `0.0` always means "no measurement".

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign of the log-intensity change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    pub fn from_i8(value: i8) -> Option<Self> {
        match value {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: i64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: i64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

/// Events falling in the closed interval `[t_start, t_end]`, sorted by time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub t_start: i64,
    pub t_end: i64,
}

impl EventWindow {
    /// Builds a window, checking bounds ordering and event timestamps.
    pub fn new(events: Vec<Event>, t_start: i64, t_end: i64) -> Result<Self> {
        if t_start > t_end {
            return Err(Error::InvalidArgument(format!(
                "window start {t_start} is after its end {t_end}"
            )));
        }
        let mut prev = t_start;
        for (i, e) in events.iter().enumerate() {
            if e.t < prev || e.t > t_end {
                return Err(Error::InvalidArgument(format!(
                    "event {i} at t={} breaks ordering within [{t_start}, {t_end}]",
                    e.t
                )));
            }
            prev = e.t;
        }
        Ok(Self {
            events,
            t_start,
            t_end,
        })
    }

    pub fn empty(t_start: i64, t_end: i64) -> Self {
        Self {
            events: Vec::new(),
            t_start,
            t_end,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> i64 {
        self.t_end - self.t_start
    }

    /// Splits at `t`: events with timestamp `< t` go left, the rest go right.
    /// The two halves share the boundary `t`.
    pub fn split_at(&self, t: i64) -> Result<(EventWindow, EventWindow)> {
        if t < self.t_start || t > self.t_end {
            return Err(Error::InvalidArgument(format!(
                "split time {t} outside [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        let pivot = self.events.partition_point(|e| e.t < t);
        let left = EventWindow {
            events: self.events[..pivot].to_vec(),
            t_start: self.t_start,
            t_end: t,
        };
        let right = EventWindow {
            events: self.events[pivot..].to_vec(),
            t_start: t,
            t_end: self.t_end,
        };
        Ok((left, right))
    }

    /// Concatenates two adjacent windows (`self.t_end == next.t_start`).
    pub fn concat(&self, next: &EventWindow) -> Result<EventWindow> {
        if self.t_end != next.t_start {
            return Err(Error::InvalidArgument(format!(
                "windows are not adjacent: {} != {}",
                self.t_end, next.t_start
            )));
        }
        let mut events = Vec::with_capacity(self.len() + next.len());
        events.extend_from_slice(&self.events);
        events.extend_from_slice(&next.events);
        Ok(EventWindow {
            events,
            t_start: self.t_start,
            t_end: next.t_end,
        })
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.events.iter().filter(|e| e.p == polarity).count()
    }
}

/// Discretized event volume of shape `(2 * bins, H, W)`.
///
/// Channels `[0, bins)` hold negative events, `[bins, 2 * bins)` positive ones.
#[derive(Debug, Clone, PartialEq)]
pub struct EventVolume {
    pub data: Array3<f64>,
    pub bins: usize,
}

impl EventVolume {
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channel(&self, polarity: Polarity, bin: usize) -> usize {
        match polarity {
            Polarity::Negative => bin,
            Polarity::Positive => self.bins + bin,
        }
    }

    /// Total deposited weight over all bins of one polarity.
    pub fn mass(&self, polarity: Polarity) -> f64 {
        let start = self.channel(polarity, 0);
        self.data
            .slice(ndarray::s![start..start + self.bins, .., ..])
            .iter()
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    /// `(X, Y, Z)` in the LiDAR frame, meters.
    pub points: Vec<[f32; 3]>,
    /// Scan timestamp in microseconds.
    pub t: i64,
}

/// Rigid transform `p_cam = rotation * p_lidar + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0, 0.0, 0.0],
    };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                if (dot - expected).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Ideal pinhole event camera plus the LiDAR extrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Maps LiDAR-frame points into the camera frame.
    pub t_cam_lidar: RigidTransform,
    /// Depth normalization constant and LiDAR drop distance, meters.
    pub max_range: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("camera model: {msg}")));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return bad("principal point must be finite");
        }
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be non-zero");
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return bad("max_range must be positive");
        }
        if !self.t_cam_lidar.is_rigid(1e-6) {
            return bad("LiDAR extrinsic rotation is not a proper rotation");
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Projected LiDAR scan, meters, `0.0` where no point landed.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthImage {
    pub data: Array2<f32>,
}

impl SparseDepthImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Dense depth before (`d_bf`) and after (`d_af`) an event window.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPair {
    pub d_bf: Array2<f32>,
    pub d_af: Array2<f32>,
}

impl DepthPair {
    pub fn shape(&self) -> (usize, usize) {
        self.d_bf.dim()
    }

    /// Per-pixel `d_af - d_bf`.
    pub fn change(&self) -> Array2<f32> {
        &self.d_af - &self.d_bf
    }
}

/// Ground-truth depth with a validity mask. Invalid pixels hold `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDepthGT {
    pub data: Array2<f32>,
    pub valid: Array2<bool>,
    pub t: i64,
}

impl DenseDepthGT {
    /// GT with every pixel valid.
    pub fn full(data: Array2<f32>, t: i64) -> Self {
        let valid = Array2::from_elem(data.dim(), true);
        Self { data, valid, t }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[[row, col]]
    }
}

/// One aligned dataset step.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub window: EventWindow,
    pub lidar: Option<PointCloud>,
    pub gt_begin: DenseDepthGT,
    pub gt_end: DenseDepthGT,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    WindowBoundsInverted {
        record: usize,
    },
    EventOutOfBounds {
        record: usize,
        event: usize,
        x: u16,
        y: u16,
    },
    NonMonotonicTime {
        record: usize,
        event: usize,
    },
    EventOutsideWindow {
        record: usize,
        event: usize,
    },
    GtTimestampMismatch {
        record: usize,
        end: bool,
        expected: i64,
        found: i64,
    },
    GtShapeMismatch {
        record: usize,
        end: bool,
    },
    NonFiniteLidarPoint {
        record: usize,
        point: usize,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let which = |end: &bool| if *end { "gt_end" } else { "gt_begin" };
        match self {
            Violation::WindowBoundsInverted { record } => {
                write!(f, "record {record}: window start after end")
            }
            Violation::EventOutOfBounds {
                record,
                event,
                x,
                y,
            } => write!(f, "record {record}: event {event} at ({x}, {y}) is off-sensor"),
            Violation::NonMonotonicTime { record, event } => {
                write!(f, "record {record}: event {event} goes back in time")
            }
            Violation::EventOutsideWindow { record, event } => {
                write!(f, "record {record}: event {event} outside window bounds")
            }
            Violation::GtTimestampMismatch {
                record,
                end,
                expected,
                found,
            } => write!(
                f,
                "record {record}: {} timestamp {found} != window bound {expected}",
                which(end)
            ),
            Violation::GtShapeMismatch { record, end } => {
                write!(f, "record {record}: {} has the wrong resolution", which(end))
            }
            Violation::NonFiniteLidarPoint { record, point } => {
                write!(f, "record {record}: LiDAR point {point} is not finite")
            }
        }
    }
}

/// Lists every invariant violation in `records`; an empty list means valid.
pub fn validate_sequence(records: &[SequenceRecord], model: &CameraModel) -> Vec<Violation> {
    let mut out = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        let w = &rec.window;
        if w.t_start > w.t_end {
            out.push(Violation::WindowBoundsInverted { record: r });
        }
        let mut prev: Option<i64> = None;
        for (i, e) in w.events.iter().enumerate() {
            if usize::from(e.x) >= model.width || usize::from(e.y) >= model.height {
                out.push(Violation::EventOutOfBounds {
                    record: r,
                    event: i,
                    x: e.x,
                    y: e.y,
                });
            }
            if prev.is_some_and(|p| e.t < p) {
                out.push(Violation::NonMonotonicTime {
                    record: r,
                    event: i,
                });
            }
            if e.t < w.t_start || e.t > w.t_end {
                out.push(Violation::EventOutsideWindow {
                    record: r,
                    event: i,
                });
            }
            prev = Some(e.t);
        }
        for (gt, end, expected) in [(&rec.gt_begin, false, w.t_start), (&rec.gt_end, true, w.t_end)] {
            if gt.t != expected {
                out.push(Violation::GtTimestampMismatch {
                    record: r,
                    end,
                    expected,
                    found: gt.t,
                });
            }
            if gt.shape() != model.shape() || gt.valid.dim() != model.shape() {
                out.push(Violation::GtShapeMismatch { record: r, end });
            }
        }
        if let Some(cloud) = &rec.lidar {
            for (i, p) in cloud.points.iter().enumerate() {
                if !p.iter().all(|v| v.is_finite()) {
                    out.push(Violation::NonFiniteLidarPoint {
                        record: r,
                        point: i,
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> CameraModel {
        CameraModel {
            fx: 50.0,
            fy: 50.0,
            cx: 8.0,
            cy: 6.0,
            width: 16,
            height: 12,
            t_cam_lidar: RigidTransform::IDENTITY,
            max_range: 200.0,
        }
    }

    fn record(t0: i64, t1: i64) -> SequenceRecord {
        let events = vec![
            Event::new(1, 2, t0, Polarity::Positive),
            Event::new(15, 11, t1, Polarity::Negative),
        ];
        SequenceRecord {
            window: EventWindow::new(events, t0, t1).unwrap(),
            lidar: Some(PointCloud {
                points: vec![[1.0, 0.0, 5.0]],
                t: t0,
            }),
            gt_begin: DenseDepthGT::full(Array2::from_elem((12, 16), 4.0), t0),
            gt_end: DenseDepthGT::full(Array2::from_elem((12, 16), 4.5), t1),
        }
    }

    #[test]
    fn well_formed_sequence_has_no_violations() {
        let recs = vec![record(0, 100), record(100, 200), record(200, 300)];
        assert!(validate_sequence(&recs, &camera()).is_empty());
    }

    #[test]
    fn event_on_width_is_out_of_bounds() {
        let mut rec = record(0, 100);
        rec.window.events[0].x = 16;
        let report = validate_sequence(&[rec], &camera());
        assert_eq!(
            report,
            vec![Violation::EventOutOfBounds {
                record: 0,
                event: 0,
                x: 16,
                y: 2
            }]
        );
    }

    #[test]
    fn gt_end_timestamp_mismatch_is_reported() {
        let mut rec = record(0, 100);
        rec.gt_end.t = 99;
        let report = validate_sequence(&[rec], &camera());
        assert_eq!(
            report,
            vec![Violation::GtTimestampMismatch {
                record: 0,
                end: true,
                expected: 100,
                found: 99
            }]
        );
    }

    #[test]
    fn unordered_events_are_rejected_and_reported() {
        let events = vec![
            Event::new(0, 0, 50, Polarity::Positive),
            Event::new(0, 0, 40, Polarity::Positive),
        ];
        assert!(EventWindow::new(events.clone(), 0, 100).is_err());
        let mut rec = record(0, 100);
        rec.window.events = events;
        let report = validate_sequence(&[rec], &camera());
        assert_eq!(
            report,
            vec![Violation::NonMonotonicTime {
                record: 0,
                event: 1
            }]
        );
    }

    #[test]
    fn split_boundary_event_goes_right() {
        let w = EventWindow::new(
            vec![
                Event::new(0, 0, 10, Polarity::Positive),
                Event::new(0, 0, 20, Polarity::Negative),
            ],
            0,
            30,
        )
        .unwrap();
        let (l, r) = w.split_at(20).unwrap();
        assert_eq!(l.len(), 1);
        assert_eq!(r.events[0].t, 20);
        assert_eq!(l.concat(&r).unwrap(), w);
        assert!(w.split_at(31).is_err());
    }

    #[test]
    fn camera_validation() {
        let mut cam = camera();
        assert!(cam.validate().is_ok());
        cam.t_cam_lidar.rotation[0][0] = -1.0;
        assert!(cam.validate().is_err(), "reflection must be rejected");
        let mut cam = camera();
        cam.max_range = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn polarity_byte_round_trip() {
        for p in [Polarity::Negative, Polarity::Positive] {
            assert_eq!(Polarity::from_i8(p.as_i8()), Some(p));
        }
        assert_eq!(Polarity::from_i8(0), None);
    }
}
