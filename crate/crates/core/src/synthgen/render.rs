use serde::{Deserialize, Serialize};

use super::{ImageGrid, SceneConfig};
use crate::kinematics::{AngleVector, JOINTS};

/// Embedded camera. The mid camera images the dot pairs of every segment;
/// the tip camera sits on the other side of the finger and sees only the
/// distal four.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    Mid,
    Tip,
}

impl Camera {
    pub fn joints(self) -> std::ops::Range<usize> {
        match self {
            Camera::Mid => 0..JOINTS,
            Camera::Tip => 2..JOINTS,
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Row centres of all dots seen by `cam`, top to bottom. Each visible joint
/// owns a horizontal band; its two sides split the band, each side holding
/// `dots_per_side` dots.
pub(crate) fn dot_rows(cfg: &SceneConfig, cam: Camera) -> Vec<f64> {
    let bands = cam.joints().len();
    let bh = cfg.height as f64 / bands as f64;
    let k = cfg.dots_per_side;
    let mut rows = Vec::with_capacity(bands * 2 * k);
    for b in 0..bands {
        for side in 0..2 {
            for j in 0..k {
                rows.push(b as f64 * bh + bh * (side as f64 + (j as f64 + 0.5) / k as f64) / 2.0);
            }
        }
    }
    rows
}

fn column(theta: f64, cfg: &SceneConfig, cam: Camera) -> f64 {
    let (lo, hi) = cfg.theta_range;
    let span = cfg.width as f64 - 2.0 * cfg.window_margin;
    let c = cfg.window_margin + (theta - lo) / (hi - lo) * span;
    match cam {
        Camera::Mid => c,
        Camera::Tip => cfg.width as f64 - c,
    }
}

/// Projected dot centres `(row, col)` in continuous pixel coordinates, where
/// pixel `(y, x)` covers `[y, y+1) x [x, x+1)`.
pub fn dot_centers(angles: &AngleVector, cfg: &SceneConfig, cam: Camera) -> Vec<(f64, f64)> {
    let rows = dot_rows(cfg, cam);
    let per_band = 2 * cfg.dots_per_side;
    rows.iter()
        .enumerate()
        .map(|(i, &r)| {
            let joint = cam.joints().start + i / per_band;
            (r, column(angles[joint], cfg, cam))
        })
        .collect()
}

fn draw(img: &mut [f32], cfg: &SceneConfig, centers: &[(f64, f64)]) {
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let r = cfg.dot_radius;
    let (bg, fg) = (cfg.background, cfg.foreground);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for &(cy, cx) in centers {
        let y0 = ((cy - r - 1.0).floor() as i64).max(0);
        let y1 = ((cy + r + 1.0).ceil() as i64).min(h - 1);
        let x0 = ((cx - r - 1.0).floor() as i64).max(0);
        let x1 = ((cx + r + 1.0).ceil() as i64).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut cov = 0.0;
                for sy in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let d = (py - cy).hypot(px - cx);
                        cov += (r + 0.5 - d).clamp(0.0, 1.0);
                    }
                }
                let v = bg + (fg - bg) * (cov / n) as f32;
                let p = &mut img[(y * w + x) as usize];
                *p = p.max(v);
            }
        }
    }
}

/// One camera frame, shape `[1, height, width]`.
pub fn render_finger_image(angles: &AngleVector, cfg: &SceneConfig, cam: Camera) -> ImageGrid {
    render_finger_channels(angles, cfg, &[cam])
}

/// Frames of several cameras stacked as channels.
pub fn render_finger_channels(angles: &AngleVector, cfg: &SceneConfig, cams: &[Camera]) -> ImageGrid {
    let plane = cfg.height * cfg.width;
    let mut data = vec![cfg.background; plane * cams.len()];
    for (c, &cam) in cams.iter().enumerate() {
        draw(&mut data[c * plane..(c + 1) * plane], cfg, &dot_centers(angles, cfg, cam));
    }
    ImageGrid::new(&[cams.len(), cfg.height, cfg.width], data).expect("extents validated")
}
