//! On-disk sequence layout.
//!
//! ```text
//! <sequence>/
//!   meta.json             resolution, bins, max_range, per-record timestamps
//!   calib.json            CameraModel
//!   events.bin            14-byte LE records: x u16, y u16, t i64, p i8, pad u8
//!   lidar/<index>.bin     f32 LE (X, Y, Z) triples, LiDAR frame
//!   depth/<index>_begin.bin, depth/<index>_end.bin
//!                         f32 LE row-major H x W, NaN marks invalid pixels
//! ```
//!
//! `<index>` is the record index zero-padded to six digits. Events of all
//! records are stored back to back in record order; `meta.json` holds each
//! record's offset and count into `events.bin`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    CameraModel, DenseDepthGT, Event, EventWindow, PointCloud, Polarity, SequenceRecord,
};

pub const EVENT_RECORD_BYTES: usize = 14;
pub const META_FILE: &str = "meta.json";
pub const CALIB_FILE: &str = "calib.json";
pub const EVENTS_FILE: &str = "events.bin";
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub t_start: i64,
    pub t_end: i64,
    pub event_offset: u64,
    pub event_count: u64,
    /// Scan timestamp when the record carries a LiDAR sweep.
    pub lidar_t: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub layout_version: u32,
    pub width: usize,
    pub height: usize,
    pub bins: usize,
    pub max_range: f64,
    pub record_count: usize,
    pub records: Vec<RecordMeta>,
}

/// A fully loaded sequence directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub camera: CameraModel,
    pub bins: usize,
    pub records: Vec<SequenceRecord>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn lidar_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("lidar").join(format!("{index:06}.bin"))
}

pub fn depth_path(dir: &Path, index: usize, end: bool) -> PathBuf {
    let which = if end { "end" } else { "begin" };
    dir.join("depth").join(format!("{index:06}_{which}.bin"))
}

pub fn encode_event(e: &Event, out: &mut Vec<u8>) {
    out.extend_from_slice(&e.x.to_le_bytes());
    out.extend_from_slice(&e.y.to_le_bytes());
    out.extend_from_slice(&e.t.to_le_bytes());
    out.push(e.p.as_i8() as u8);
    out.push(0);
}

pub fn decode_event(bytes: &[u8]) -> Option<Event> {
    if bytes.len() != EVENT_RECORD_BYTES {
        return None;
    }
    let x = u16::from_le_bytes([bytes[0], bytes[1]]);
    let y = u16::from_le_bytes([bytes[2], bytes[3]]);
    let t = i64::from_le_bytes(bytes[4..12].try_into().ok()?);
    let p = Polarity::from_i8(bytes[12] as i8)?;
    Some(Event { x, y, t, p })
}

pub fn encode_depth(gt: &DenseDepthGT) -> Vec<u8> {
    let mut out = Vec::with_capacity(gt.data.len() * 4);
    for (d, v) in gt.data.iter().zip(gt.valid.iter()) {
        let value = if *v { *d } else { f32::NAN };
        out.extend_from_slice(&value.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], height: usize, width: usize, t: i64) -> Option<DenseDepthGT> {
    if bytes.len() != height * width * 4 {
        return None;
    }
    let mut data = Array2::zeros((height, width));
    let mut valid = Array2::from_elem((height, width), false);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().ok()?);
        if !v.is_nan() {
            data[[i / width, i % width]] = v;
            valid[[i / width, i % width]] = true;
        }
    }
    Some(DenseDepthGT { data, valid, t })
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * 12);
    for p in &cloud.points {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], t: i64) -> Option<PointCloud> {
    if bytes.len() % 12 != 0 {
        return None;
    }
    let points = bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap());
            [f(0), f(4), f(8)]
        })
        .collect();
    Some(PointCloud { points, t })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `records` under `dir`, which is created if needed (its parent must exist).
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    if let Some(parent) = dir.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(Error::io(
                parent,
                std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory missing"),
            ));
        }
    }
    create_dir(dir)?;
    create_dir(&dir.join("lidar"))?;
    create_dir(&dir.join("depth"))?;

    let mut events = Vec::new();
    let mut metas = Vec::with_capacity(seq.records.len());
    let mut offset = 0u64;
    for (i, rec) in seq.records.iter().enumerate() {
        for e in &rec.window.events {
            encode_event(e, &mut events);
        }
        let count = rec.window.events.len() as u64;
        metas.push(RecordMeta {
            t_start: rec.window.t_start,
            t_end: rec.window.t_end,
            event_offset: offset,
            event_count: count,
            lidar_t: rec.lidar.as_ref().map(|c| c.t),
        });
        offset += count;
        if let Some(cloud) = &rec.lidar {
            write_file(&lidar_path(dir, i), &encode_points(cloud))?;
        }
        write_file(&depth_path(dir, i, false), &encode_depth(&rec.gt_begin))?;
        write_file(&depth_path(dir, i, true), &encode_depth(&rec.gt_end))?;
    }
    write_file(&dir.join(EVENTS_FILE), &events)?;

    let meta = SequenceMeta {
        layout_version: LAYOUT_VERSION,
        width: seq.camera.width,
        height: seq.camera.height,
        bins: seq.bins,
        max_range: seq.camera.max_range,
        record_count: seq.records.len(),
        records: metas,
    };
    let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write_file(&dir.join(META_FILE), &meta_json)?;
    let calib_json = serde_json::to_vec_pretty(&seq.camera).expect("calib serializes");
    write_file(&dir.join(CALIB_FILE), &calib_json)
}

pub fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    let path = dir.join(META_FILE);
    let meta: SequenceMeta = serde_json::from_slice(&read_file(&path)?)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    if meta.layout_version != LAYOUT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported layout version {}", meta.layout_version),
        ));
    }
    if meta.record_count != meta.records.len() {
        return Err(Error::format(&path, "record_count disagrees with records"));
    }
    Ok(meta)
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let meta = read_meta(dir)?;
    let calib_path = dir.join(CALIB_FILE);
    let camera: CameraModel = serde_json::from_slice(&read_file(&calib_path)?)
        .map_err(|e| Error::format(&calib_path, e.to_string()))?;
    camera
        .validate()
        .map_err(|e| Error::format(&calib_path, e.to_string()))?;
    if camera.width != meta.width || camera.height != meta.height {
        return Err(Error::format(&calib_path, "resolution disagrees with meta.json"));
    }

    let events_path = dir.join(EVENTS_FILE);
    let raw = read_file(&events_path)?;
    if raw.len() % EVENT_RECORD_BYTES != 0 {
        return Err(Error::format(&events_path, "size is not a multiple of 14 bytes"));
    }
    let total = (raw.len() / EVENT_RECORD_BYTES) as u64;

    let (h, w) = (meta.height, meta.width);
    let mut records = Vec::with_capacity(meta.record_count);
    for (i, rm) in meta.records.iter().enumerate() {
        if rm.event_offset + rm.event_count > total {
            return Err(Error::format(
                &events_path,
                format!("record {i} points past the end of the file"),
            ));
        }
        let start = rm.event_offset as usize * EVENT_RECORD_BYTES;
        let end = start + rm.event_count as usize * EVENT_RECORD_BYTES;
        let events = raw[start..end]
            .chunks_exact(EVENT_RECORD_BYTES)
            .map(decode_event)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(&events_path, format!("bad polarity in record {i}")))?;
        let window = EventWindow::new(events, rm.t_start, rm.t_end)
            .map_err(|e| Error::format(&events_path, format!("record {i}: {e}")))?;

        let lidar = match rm.lidar_t {
            Some(t) => {
                let path = lidar_path(dir, i);
                let cloud = decode_points(&read_file(&path)?, t)
                    .ok_or_else(|| Error::format(&path, "size is not a multiple of 12 bytes"))?;
                Some(cloud)
            }
            None => None,
        };
        let mut gts = [false, true].into_iter().map(|end| {
            let path = depth_path(dir, i, end);
            let t = if end { rm.t_end } else { rm.t_start };
            decode_depth(&read_file(&path)?, h, w, t)
                .ok_or_else(|| Error::format(&path, format!("expected {h}x{w} float32 values")))
        });
        let gt_begin = gts.next().unwrap()?;
        let gt_end = gts.next().unwrap()?;
        records.push(SequenceRecord {
            window,
            lidar,
            gt_begin,
            gt_end,
        });
    }
    Ok(Sequence {
        camera,
        bins: meta.bins,
        records,
    })
}

/// Sequence directories directly under `root` (those holding a `meta.json`),
/// sorted by name. `root` itself counts if it is a sequence directory.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(META_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RigidTransform;
    use proptest::prelude::*;

    fn sample_sequence() -> Sequence {
        let camera = CameraModel {
            fx: 20.0,
            fy: 21.0,
            cx: 3.5,
            cy: 2.5,
            width: 8,
            height: 6,
            t_cam_lidar: RigidTransform::IDENTITY,
            max_range: 100.0,
        };
        let mut gt = DenseDepthGT::full(Array2::from_shape_fn((6, 8), |(r, c)| (r * 8 + c) as f32 + 0.25), 0);
        gt.valid[[2, 3]] = false;
        gt.data[[2, 3]] = 0.0;
        let mut gt_end = gt.clone();
        gt_end.t = 50;
        let rec0 = SequenceRecord {
            window: EventWindow::new(
                vec![
                    Event::new(0, 0, 0, Polarity::Negative),
                    Event::new(7, 5, 50, Polarity::Positive),
                ],
                0,
                50,
            )
            .unwrap(),
            lidar: Some(PointCloud {
                points: vec![[1.0, -2.5, 30.125], [0.0, 0.0, f32::MIN_POSITIVE]],
                t: 0,
            }),
            gt_begin: gt.clone(),
            gt_end: gt_end.clone(),
        };
        let mut gt1 = gt_end.clone();
        gt1.t = 50;
        let mut gt2 = gt_end;
        gt2.t = 100;
        let rec1 = SequenceRecord {
            window: EventWindow::empty(50, 100),
            lidar: None,
            gt_begin: gt1,
            gt_end: gt2,
        };
        Sequence {
            camera,
            bins: 5,
            records: vec![rec0, rec1],
        }
    }

    #[test]
    fn sequence_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("seq");
        let seq = sample_sequence();
        write_sequence(&dir, &seq).unwrap();
        assert_eq!(
            fs::metadata(dir.join(EVENTS_FILE)).unwrap().len(),
            2 * EVENT_RECORD_BYTES as u64
        );
        let back = read_sequence(&dir).unwrap();
        assert_eq!(back, seq);
        assert_eq!(list_sequences(tmp.path()).unwrap(), vec![dir]);
    }

    #[test]
    fn event_layout_is_fixed() {
        let mut buf = Vec::new();
        encode_event(&Event::new(0x0102, 0x0304, -2, Polarity::Negative), &mut buf);
        assert_eq!(
            buf,
            vec![0x02, 0x01, 0x04, 0x03, 0xfe, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0x00]
        );
    }

    #[test]
    fn missing_parent_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("nope").join("seq");
        assert!(matches!(write_sequence(&dir, &sample_sequence()), Err(Error::Io { .. })));
    }

    #[test]
    fn truncated_depth_file_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("seq");
        write_sequence(&dir, &sample_sequence()).unwrap();
        let victim = depth_path(&dir, 1, true);
        fs::write(&victim, [0u8; 7]).unwrap();
        let err = read_sequence(&dir).unwrap_err();
        assert!(err.to_string().contains("000001_end.bin"), "{err}");
    }

    proptest! {
        #[test]
        fn event_codec_round_trips(x in any::<u16>(), y in any::<u16>(), t in any::<i64>(), pos in any::<bool>()) {
            let p = if pos { Polarity::Positive } else { Polarity::Negative };
            let e = Event::new(x, y, t, p);
            let mut buf = Vec::new();
            encode_event(&e, &mut buf);
            prop_assert_eq!(buf.len(), EVENT_RECORD_BYTES);
            prop_assert_eq!(decode_event(&buf), Some(e));
        }

        #[test]
        fn point_codec_round_trips(points in prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), 0..40), t in any::<i64>()) {
            let cloud = PointCloud { points, t };
            prop_assert_eq!(decode_points(&encode_points(&cloud), t), Some(cloud));
        }
    }
}
