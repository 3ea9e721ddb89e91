//! Depth metrics, the nearest-LiDAR-point baseline, and depth-change classification.
//!
//! All depths here are in meters. Metrics are accumulated as sums so several
//! steps (or sequences) can be pooled before taking means.

use std::collections::HashSet;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::representations::project_lidar;
use crate::types::{DenseDepthGT, DepthPair, EventWindow, SparseDepthImage};

pub const DEFAULT_CUTOFFS: [f64; 5] = [10.0, 20.0, 30.0, 100.0, 200.0];
pub const DEFAULT_TAU: f64 = 1.0;
/// Bucket size of the LiDAR grid index used by [`evaluate_sequence`].
pub const GRID_CELL: usize = 8;

/// What happened to the depth seen by a pixel across an event window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DepthChangeClass {
    /// `|d_af - d_bf| <= tau`: same surface.
    Same,
    /// `d_af - d_bf > tau`: a farther surface was revealed.
    Farther,
    /// `d_af - d_bf < -tau`: a closer object moved in.
    Closer,
}

impl DepthChangeClass {
    pub fn classify(change: f64, tau: f64) -> Self {
        if change > tau {
            DepthChangeClass::Farther
        } else if change < -tau {
            DepthChangeClass::Closer
        } else {
            DepthChangeClass::Same
        }
    }
}

/// Running mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mean {
    pub sum: f64,
    pub count: usize,
}

impl Mean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Mean) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DenseStats {
    pub abs: Mean,
    pub rel: Mean,
}

impl DenseStats {
    fn push(&mut self, pred: f64, gt: f64) {
        let err = (pred - gt).abs();
        self.abs.push(err);
        self.rel.push(err / gt);
    }

    fn merge(&mut self, other: &DenseStats) {
        self.abs.merge(&other.abs);
        self.rel.merge(&other.rel);
    }
}

/// One row of the dense table; `None` when no pixel qualifies for the cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffRow {
    pub cutoff: f64,
    pub mae_bf: Option<f64>,
    pub rel_bf: Option<f64>,
    pub mae_af: Option<f64>,
    pub rel_af: Option<f64>,
}

/// Mean absolute and relative errors over valid GT pixels below each cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseErrors {
    cutoffs: Vec<f64>,
    bf: Vec<DenseStats>,
    af: Vec<DenseStats>,
}

fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    Ok(())
}

impl DenseErrors {
    pub fn new(cutoffs: &[f64]) -> Self {
        Self {
            cutoffs: cutoffs.to_vec(),
            bf: vec![DenseStats::default(); cutoffs.len()],
            af: vec![DenseStats::default(); cutoffs.len()],
        }
    }

    fn add_map(stats: &mut [DenseStats], cutoffs: &[f64], pred: &Array2<f32>, gt: &DenseDepthGT) {
        for ((idx, &g), &valid) in gt.data.indexed_iter().zip(gt.valid.iter()) {
            if !valid || g <= 0.0 {
                continue;
            }
            let (p, g) = (f64::from(pred[idx]), f64::from(g));
            for (s, &c) in stats.iter_mut().zip(cutoffs) {
                if g <= c {
                    s.push(p, g);
                }
            }
        }
    }

    pub fn add(&mut self, pred: &DepthPair, gt_begin: &DenseDepthGT, gt_end: &DenseDepthGT) -> Result<()> {
        check_same_shape(gt_begin.shape(), pred.d_bf.dim())?;
        check_same_shape(gt_end.shape(), pred.d_af.dim())?;
        Self::add_map(&mut self.bf, &self.cutoffs, &pred.d_bf, gt_begin);
        Self::add_map(&mut self.af, &self.cutoffs, &pred.d_af, gt_end);
        Ok(())
    }

    pub fn merge(&mut self, other: &DenseErrors) -> Result<()> {
        if self.cutoffs != other.cutoffs {
            return Err(Error::InvalidArgument("cutoff lists differ".into()));
        }
        for (a, b) in self.bf.iter_mut().zip(&other.bf) {
            a.merge(b);
        }
        for (a, b) in self.af.iter_mut().zip(&other.af) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn rows(&self) -> Vec<CutoffRow> {
        self.cutoffs
            .iter()
            .zip(self.bf.iter().zip(&self.af))
            .map(|(&cutoff, (bf, af))| CutoffRow {
                cutoff,
                mae_bf: bf.abs.value(),
                rel_bf: bf.rel.value(),
                mae_af: af.abs.value(),
                rel_af: af.rel.value(),
            })
            .collect()
    }
}

/// Dense error table for a single prediction.
pub fn dense_errors(
    pred: &DepthPair,
    gt_begin: &DenseDepthGT,
    gt_end: &DenseDepthGT,
    cutoffs: &[f64],
) -> Result<Vec<CutoffRow>> {
    let mut acc = DenseErrors::new(cutoffs);
    acc.add(pred, gt_begin, gt_end)?;
    Ok(acc.rows())
}

fn nonzero_pixels(sparse: &SparseDepthImage) -> Vec<(usize, usize, f32)> {
    sparse
        .data
        .indexed_iter()
        .filter(|(_, &d)| d > 0.0)
        .map(|((r, c), &d)| (r, c, d))
        .collect()
}

fn empty_sparse_error() -> Error {
    Error::InvalidArgument("sparse depth image has no LiDAR returns".into())
}

/// Exhaustive nearest non-zero pixel to `(row, col)`. Ties go to the smallest
/// row-major index. Returns `(row, col, depth)`.
pub fn nearest_brute_force(sparse: &SparseDepthImage, row: usize, col: usize) -> Option<(usize, usize, f32)> {
    let mut best: Option<((u64, usize), (usize, usize, f32))> = None;
    let width = sparse.data.dim().1;
    for ((r, c), &d) in sparse.data.indexed_iter() {
        if d <= 0.0 {
            continue;
        }
        let key = (dist2(row, col, r, c), r * width + c);
        if best.is_none_or(|(k, _)| key < k) {
            best = Some((key, (r, c, d)));
        }
    }
    best.map(|(_, hit)| hit)
}

fn dist2(r0: usize, c0: usize, r1: usize, c1: usize) -> u64 {
    let dr = r0.abs_diff(r1) as u64;
    let dc = c0.abs_diff(c1) as u64;
    dr * dr + dc * dc
}

/// Uniform bucket grid over the non-zero pixels of a sparse depth image.
/// Queries return exactly what [`nearest_brute_force`] returns.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: usize,
    rows: usize,
    cols: usize,
    width: usize,
    buckets: Vec<Vec<(usize, usize, f32)>>,
}

impl GridIndex {
    pub fn new(sparse: &SparseDepthImage, cell: usize) -> Result<Self> {
        if cell == 0 {
            return Err(Error::InvalidArgument("grid cell size must be positive".into()));
        }
        let points = nonzero_pixels(sparse);
        if points.is_empty() {
            return Err(empty_sparse_error());
        }
        let (h, w) = sparse.data.dim();
        let rows = h.div_ceil(cell);
        let cols = w.div_ceil(cell);
        let mut buckets = vec![Vec::new(); rows * cols];
        // row-major scan keeps each bucket sorted by pixel index
        for (r, c, d) in points {
            buckets[(r / cell) * cols + c / cell].push((r, c, d));
        }
        Ok(Self {
            cell,
            rows,
            cols,
            width: w,
            buckets,
        })
    }

    pub fn nearest(&self, row: usize, col: usize) -> (usize, usize, f32) {
        let qr = (row / self.cell).min(self.rows - 1) as isize;
        let qc = (col / self.cell).min(self.cols - 1) as isize;
        let max_ring = self.rows.max(self.cols) as isize;
        let mut best: Option<((u64, usize), (usize, usize, f32))> = None;
        for ring in 0..=max_ring {
            for br in (qr - ring)..=(qr + ring) {
                for bc in (qc - ring)..=(qc + ring) {
                    let on_ring = (br - qr).abs() == ring || (bc - qc).abs() == ring;
                    if !on_ring || br < 0 || bc < 0 || br >= self.rows as isize || bc >= self.cols as isize {
                        continue;
                    }
                    for &(r, c, d) in &self.buckets[br as usize * self.cols + bc as usize] {
                        let key = (dist2(row, col, r, c), r * self.width + c);
                        if best.is_none_or(|(k, _)| key < k) {
                            best = Some((key, (r, c, d)));
                        }
                    }
                }
            }
            // Anything beyond this ring is at least ring * cell + 1 pixels away on one axis.
            if let Some(((d2, _), _)) = best {
                let reach = (ring as u64) * self.cell as u64 + 1;
                if d2 < reach * reach {
                    break;
                }
            }
        }
        best.expect("index holds at least one point").1
    }
}

/// Depth of the nearest LiDAR pixel for every event (exhaustive search).
pub fn nn_associate(window: &EventWindow, sparse: &SparseDepthImage) -> Result<Vec<f32>> {
    if sparse.nonzero_count() == 0 {
        return Err(empty_sparse_error());
    }
    Ok(window
        .events
        .iter()
        .map(|e| nearest_brute_force(sparse, e.y.into(), e.x.into()).expect("non-empty").2)
        .collect())
}

/// Same as [`nn_associate`] through a [`GridIndex`].
pub fn nn_associate_indexed(window: &EventWindow, sparse: &SparseDepthImage, cell: usize) -> Result<Vec<f32>> {
    let index = GridIndex::new(sparse, cell)?;
    Ok(window
        .events
        .iter()
        .map(|e| index.nearest(e.y.into(), e.x.into()).2)
        .collect())
}

/// Rows of the topmost and bottommost LiDAR return.
pub fn lidar_row_band(sparse: &SparseDepthImage) -> Result<(usize, usize)> {
    let rows: Vec<usize> = sparse
        .data
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&d| d > 0.0))
        .map(|(i, _)| i)
        .collect();
    match (rows.first(), rows.last()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(empty_sparse_error()),
    }
}

/// Map values at each event pixel.
pub fn sample_at_events(window: &EventWindow, map: &Array2<f32>) -> Vec<f32> {
    window
        .events
        .iter()
        .map(|e| map[[usize::from(e.y), usize::from(e.x)]])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseErrors {
    pub bf: Mean,
    pub af: Mean,
}

impl SparseErrors {
    pub fn merge(&mut self, other: &SparseErrors) {
        self.bf.merge(&other.bf);
        self.af.merge(&other.af);
    }

    pub fn means(&self) -> Option<(f64, f64)> {
        Some((self.bf.value()?, self.af.value()?))
    }
}

/// Per-event absolute errors against the GT at the window start (`depth_bf`)
/// and end (`depth_af`), over events whose row lies in `band` (inclusive) and
/// whose GT is valid. A single-depth method passes the same slice twice.
pub fn sparse_event_errors(
    window: &EventWindow,
    depth_bf: &[f32],
    depth_af: &[f32],
    gt_begin: &DenseDepthGT,
    gt_end: &DenseDepthGT,
    band: (usize, usize),
) -> Result<SparseErrors> {
    if depth_bf.len() != window.len() || depth_af.len() != window.len() {
        return Err(Error::shape(window.len(), (depth_bf.len(), depth_af.len())));
    }
    let (h, _) = gt_begin.shape();
    if band.0 > band.1 || band.1 >= h {
        return Err(Error::InvalidArgument(format!("row band {band:?} invalid for height {h}")));
    }
    let mut out = SparseErrors::default();
    for (i, e) in window.events.iter().enumerate() {
        let (r, c) = (usize::from(e.y), usize::from(e.x));
        if r < band.0 || r > band.1 {
            continue;
        }
        if gt_begin.is_valid(r, c) {
            out.bf.push((f64::from(depth_bf[i]) - f64::from(gt_begin.data[[r, c]])).abs());
        }
        if gt_end.is_valid(r, c) {
            out.af.push((f64::from(depth_af[i]) - f64::from(gt_end.data[[r, c]])).abs());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChangeMetrics {
    pub error: Mean,
    pub correct: Mean,
}

impl ChangeMetrics {
    pub fn merge(&mut self, other: &ChangeMetrics) {
        self.error.merge(&other.error);
        self.correct.merge(&other.correct);
    }

    pub fn mae(&self) -> Option<f64> {
        self.error.value()
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.correct.value()
    }

    pub fn pixels(&self) -> usize {
        self.error.count
    }
}

/// Distinct event pixels of a window, in first-seen order.
pub fn event_pixels(window: &EventWindow) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    window
        .events
        .iter()
        .map(|e| (usize::from(e.y), usize::from(e.x)))
        .filter(|p| seen.insert(*p))
        .collect()
}

/// Depth-change error and three-way classification agreement at the event
/// pixels of `window` (each pixel counted once).
pub fn depth_change_metrics(
    pred: &DepthPair,
    gt_begin: &DenseDepthGT,
    gt_end: &DenseDepthGT,
    window: &EventWindow,
    tau: f64,
) -> Result<ChangeMetrics> {
    check_same_shape(gt_begin.shape(), pred.shape())?;
    check_same_shape(gt_end.shape(), pred.shape())?;
    let mut out = ChangeMetrics::default();
    for (r, c) in event_pixels(window) {
        if !(gt_begin.is_valid(r, c) && gt_end.is_valid(r, c)) {
            continue;
        }
        let pred_change = f64::from(pred.d_af[[r, c]]) - f64::from(pred.d_bf[[r, c]]);
        let gt_change = f64::from(gt_end.data[[r, c]]) - f64::from(gt_begin.data[[r, c]]);
        out.error.push((pred_change - gt_change).abs());
        let agree = DepthChangeClass::classify(pred_change, tau) == DepthChangeClass::classify(gt_change, tau);
        out.correct.push(if agree { 1.0 } else { 0.0 });
    }
    Ok(out)
}

/// Everything reported for one sequence (or a pooled set of them).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dense: DenseErrors,
    pub nn: SparseErrors,
    pub aled: SparseErrors,
    pub change: ChangeMetrics,
}

impl MetricReport {
    pub fn new(cutoffs: &[f64]) -> Self {
        Self {
            dense: DenseErrors::new(cutoffs),
            nn: SparseErrors::default(),
            aled: SparseErrors::default(),
            change: ChangeMetrics::default(),
        }
    }

    pub fn merge(&mut self, other: &MetricReport) -> Result<()> {
        self.dense.merge(&other.dense)?;
        self.nn.merge(&other.nn);
        self.aled.merge(&other.aled);
        self.change.merge(&other.change);
        Ok(())
    }
}

/// Ground truth presented as predictions.
pub fn oracle_predictions(seq: &Sequence) -> Vec<DepthPair> {
    seq.records
        .iter()
        .map(|r| DepthPair {
            d_bf: r.gt_begin.data.clone(),
            d_af: r.gt_end.data.clone(),
        })
        .collect()
}

/// Metrics of a whole sequence. The nearest-neighbour baseline uses the most
/// recent LiDAR sweep; records before the first sweep have no sparse errors.
/// Without `preds` only the baseline is evaluated.
pub fn evaluate_sequence(
    seq: &Sequence,
    preds: Option<&[DepthPair]>,
    cutoffs: &[f64],
    tau: f64,
) -> Result<MetricReport> {
    if let Some(p) = preds {
        if p.len() != seq.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} records",
                p.len(),
                seq.len()
            )));
        }
    }
    let mut report = MetricReport::new(cutoffs);
    let mut sparse: Option<SparseDepthImage> = None;
    for (i, rec) in seq.records.iter().enumerate() {
        if let Some(cloud) = &rec.lidar {
            let img = project_lidar(cloud, &seq.camera);
            if img.nonzero_count() > 0 {
                sparse = Some(img);
            }
        }
        let pred = preds.map(|p| &p[i]);
        if let Some(p) = pred {
            report.dense.add(p, &rec.gt_begin, &rec.gt_end)?;
            let change = depth_change_metrics(p, &rec.gt_begin, &rec.gt_end, &rec.window, tau)?;
            report.change.merge(&change);
        }
        let Some(img) = &sparse else { continue };
        let band = lidar_row_band(img)?;
        let nn = nn_associate_indexed(&rec.window, img, GRID_CELL)?;
        report
            .nn
            .merge(&sparse_event_errors(&rec.window, &nn, &nn, &rec.gt_begin, &rec.gt_end, band)?);
        if let Some(p) = pred {
            let bf = sample_at_events(&rec.window, &p.d_bf);
            let af = sample_at_events(&rec.window, &p.d_af);
            report
                .aled
                .merge(&sparse_event_errors(&rec.window, &bf, &af, &rec.gt_begin, &rec.gt_end, band)?);
        }
    }
    Ok(report)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Tab-separated tables: dense errors per cutoff, sparse per-event errors
/// (nearest-neighbour and network), and depth-change error / accuracy.
pub fn format_report(reports: &[(String, MetricReport)], include_network: bool) -> String {
    let mut out = String::new();
    out.push_str("# dense\nsequence\tcutoff_m\tmae_bf\trel_bf\tmae_af\trel_af\n");
    for (name, rep) in reports {
        for row in rep.dense.rows() {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}\t{}\t{}",
                row.cutoff,
                cell(row.mae_bf),
                cell(row.rel_bf),
                cell(row.mae_af),
                cell(row.rel_af)
            );
        }
    }
    out.push_str("# sparse\nsequence\tnn_mae_bf\tnn_mae_af\taled_mae_bf\taled_mae_af\n");
    for (name, rep) in reports {
        let net = |m: &Mean| if include_network { cell(m.value()) } else { "-".into() };
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}",
            cell(rep.nn.bf.value()),
            cell(rep.nn.af.value()),
            net(&rep.aled.bf),
            net(&rep.aled.af)
        );
    }
    out.push_str("# change\nsequence\tchange_mae_m\taccuracy\tevent_pixels\n");
    for (name, rep) in reports {
        if include_network {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}",
                cell(rep.change.mae()),
                cell(rep.change.accuracy()),
                rep.change.pixels()
            );
        } else {
            let _ = writeln!(out, "{name}\t-\t-\t{}", rep.change.pixels());
        }
    }
    out
}
