use serde::{Deserialize, Serialize};

use super::{ImageGrid, ObjectSpec, SceneConfig, Shape};
use crate::nn::Rng;

/// Rectangle of a frame, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// The fixed contact window: a centred square of side `tactile.window`.
pub fn contact_window(cfg: &SceneConfig) -> CropWindow {
    let s = cfg.tactile.window;
    CropWindow { top: (cfg.height - s) / 2, left: (cfg.width - s) / 2, height: s, width: s }
}

/// Gel frame with nothing pressed into it: a smooth illumination pattern.
pub fn calibration_image(cfg: &SceneConfig) -> ImageGrid {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let v = 0.2 + 0.08 * (fx * 0.57).sin() * (fy * 0.41).cos() + 0.06 * fy / h as f64;
            data.push(v as f32);
        }
    }
    ImageGrid::new(&[1, h, w], data).expect("extents validated")
}

/// Distance from a point to the contact ridge, in the object's local frame:
/// `u` across, `v` into the object, apex at the origin.
fn ridge_distance(shape: Shape, radius: f64, u: f64, v: f64) -> f64 {
    match shape {
        // Box corner: two rays leaving the apex at 45 degrees.
        Shape::Box => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            [(s, s), (-s, s)]
                .iter()
                .map(|&(du, dv)| {
                    let t = (u * du + v * dv).max(0.0);
                    (u - t * du).hypot(v - t * dv)
                })
                .fold(f64::INFINITY, f64::min)
        }
        // Cylinder: circle through the apex with its centre inside the object.
        Shape::Cylinder => (u.hypot(v - radius) - radius).abs(),
    }
}

fn imprint_into(img: &mut [f32], obj: &ObjectSpec, offset: (f64, f64), orientation: f64, cfg: &SceneConfig) {
    let t = &cfg.tactile;
    let win = contact_window(cfg);
    let cx = win.left as f64 + win.width as f64 / 2.0 + offset.0;
    let cy = win.top as f64 + win.height as f64 / 2.0 + offset.1;
    let (sn, cs) = orientation.to_radians().sin_cos();
    let radius = obj.size_inches() * t.px_per_inch;
    let w2 = 2.0 * t.ridge_width * t.ridge_width;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (cs * dx + sn * dy, -sn * dx + cs * dy);
            let d = ridge_distance(obj.shape, radius, u, v);
            img[y * cfg.width + x] += (t.amplitude * (-d * d / w2).exp()) as f32;
        }
    }
}

/// Raw contact frame and the calibration frame it should be compared with,
/// both `[1, height, width]`. Contact pose jitter and pixel noise are drawn
/// from `rng`.
pub fn render_tactile_pair(obj: &ObjectSpec, rng: &mut Rng, cfg: &SceneConfig) -> (ImageGrid, ImageGrid) {
    let t = &cfg.tactile;
    let offset = (
        obj.offset.0 + t.offset_jitter * rng.uniform_range(-1.0, 1.0),
        obj.offset.1 + t.offset_jitter * rng.uniform_range(-1.0, 1.0),
    );
    let orientation = obj.orientation + t.orientation_jitter * rng.uniform_range(-1.0, 1.0);
    let cal = calibration_image(cfg);
    let mut raw = cal.data().to_vec();
    imprint_into(&mut raw, obj, offset, orientation, cfg);
    if t.noise_std > 0.0 {
        for v in &mut raw {
            *v += (t.noise_std * rng.normal()) as f32;
        }
    }
    for v in &mut raw {
        *v = v.clamp(0.0, 1.0);
    }
    (ImageGrid::new(&[1, cfg.height, cfg.width], raw).expect("extents validated"), cal)
}

/// Contact imprint as the classifier sees it: difference against the
/// calibration frame, cropped to the contact window, scaled by the imprint
/// amplitude. Shape `[1, window, window]`.
pub fn render_tactile_imprint(obj: &ObjectSpec, rng: &mut Rng, cfg: &SceneConfig) -> ImageGrid {
    let (raw, cal) = render_tactile_pair(obj, rng, cfg);
    crate::datapipe::tactile_preprocess(&raw, &cal, contact_window(cfg), cfg.tactile.amplitude as f32)
        .expect("contact window lies inside the frame")
}
