//! Raster figures: colour-mapped depth, event and LiDAR images, change maps.

use std::path::Path;

use aled::evaluation::{event_pixels, DepthChangeClass};
use aled::types::{DenseDepthGT, EventWindow, Polarity, SparseDepthImage};
use image::{Rgb, RgbImage};
use ndarray::Array2;

pub const BACKGROUND: Rgb<u8> = Rgb([0, 0, 0]);
pub const SAME: Rgb<u8> = Rgb([230, 230, 230]);
pub const FARTHER: Rgb<u8> = Rgb([40, 110, 255]);
pub const CLOSER: Rgb<u8> = Rgb([255, 60, 40]);

const POSITIVE: Rgb<u8> = Rgb([255, 60, 40]);
const NEGATIVE: Rgb<u8> = Rgb([40, 110, 255]);

/// Near-to-far colour anchors.
const ANCHORS: [[f64; 3]; 5] = [
    [252.0, 253.0, 191.0],
    [252.0, 137.0, 97.0],
    [183.0, 55.0, 121.0],
    [81.0, 18.0, 124.0],
    [10.0, 8.0, 40.0],
];

/// Colour-scale endpoints in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl std::str::FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or_else(|| format!("range `{s}` is not `lo:hi`"))?;
        let lo: f64 = a.trim().parse().map_err(|_| format!("range `{s}`: bad lower end"))?;
        let hi: f64 = b.trim().parse().map_err(|_| format!("range `{s}`: bad upper end"))?;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(format!("range `{s}` must satisfy lo < hi"));
        }
        Ok(Range { lo, hi })
    }
}

pub fn colormap(depth: f64, range: Range) -> Rgb<u8> {
    if !depth.is_finite() {
        return BACKGROUND;
    }
    let t = ((depth - range.lo) / (range.hi - range.lo)).clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let f = t - i as f64;
    let c = |k: usize| (ANCHORS[i][k] * (1.0 - f) + ANCHORS[i + 1][k] * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

pub fn depth_image(depth: &Array2<f32>, range: Range) -> RgbImage {
    let (h, w) = depth.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| colormap(depth[[y as usize, x as usize]] as f64, range))
}

/// Ground truth with invalid pixels drawn as background.
pub fn gt_image(gt: &DenseDepthGT, range: Range) -> RgbImage {
    let (h, w) = gt.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        if gt.is_valid(r, c) {
            colormap(gt.data[[r, c]] as f64, range)
        } else {
            BACKGROUND
        }
    })
}

pub fn lidar_image(sparse: &SparseDepthImage, range: Range) -> RgbImage {
    let (h, w) = sparse.data.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let d = sparse.data[[y as usize, x as usize]];
        if d > 0.0 {
            colormap(d as f64, range)
        } else {
            BACKGROUND
        }
    })
}

/// Last event polarity per pixel.
pub fn event_image(window: &EventWindow, height: usize, width: usize) -> RgbImage {
    let mut img = RgbImage::from_pixel(width as u32, height as u32, BACKGROUND);
    for e in &window.events {
        if (e.x as usize) < width && (e.y as usize) < height {
            let colour = if e.p == Polarity::Positive { POSITIVE } else { NEGATIVE };
            img.put_pixel(e.x as u32, e.y as u32, colour);
        }
    }
    img
}

pub fn class_colour(class: DepthChangeClass) -> Rgb<u8> {
    match class {
        DepthChangeClass::Same => SAME,
        DepthChangeClass::Farther => FARTHER,
        DepthChangeClass::Closer => CLOSER,
    }
}

/// Thresholded change `after - before` at event pixels over a plain background.
pub fn change_image(before: &Array2<f32>, after: &Array2<f32>, window: &EventWindow, tau: f64) -> RgbImage {
    let (h, w) = before.dim();
    let mut img = RgbImage::from_pixel(w as u32, h as u32, BACKGROUND);
    for (r, c) in event_pixels(window) {
        if r < h && c < w {
            let change = (after[[r, c]] - before[[r, c]]) as f64;
            if change.is_finite() {
                img.put_pixel(c as u32, r as u32, class_colour(DepthChangeClass::classify(change, tau)));
            }
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<(), String> {
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))
}
