//! Synthetic stand-in for the finger hardware.
//!
//! Everything here is a pure function of its inputs plus an owned [`Rng`]:
//! poses, embedded-camera dot images, tactile imprints, and whole datasets.

mod dataset;
mod pose;
mod render;
mod tactile;

use serde::{Deserialize, Serialize};

use crate::kinematics::JOINTS;

pub use dataset::{
    config_hash, generate_dataset, load_dataset, save_dataset, Dataset, DatasetKind, LabelMaps, Manifest, SampleRecord,
    Split, DATASET_SCHEMA, GENERATOR_VERSION,
};
pub use pose::{sample_free_pose, sample_grasp_pose, sample_pose};
pub use render::{dot_centers, render_finger_image, render_finger_channels, Camera};
pub use tactile::{calibration_image, contact_window, render_tactile_imprint, render_tactile_pair, CropWindow};

/// Grayscale image stack, shape `[channels, height, width]`, values in `[0, 1]`.
pub type ImageGrid = crate::nn::Tensor<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 2] = [Shape::Box, Shape::Cylinder];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Object sizes in inches (cylinder diameter or box face width).
pub const SIZES_IN: [f64; 4] = [4.25, 4.5, 4.75, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Index into [`SIZES_IN`].
    pub size: usize,
    /// Nominal contact offset in pixels, `(dx, dy)`; rendering adds jitter.
    pub offset: (f64, f64),
    /// Nominal contact orientation in degrees.
    pub orientation: f64,
}

impl ObjectSpec {
    pub fn new(shape: Shape, size: usize) -> Self {
        assert!(size < SIZES_IN.len(), "size class {size} out of range");
        Self { shape, size, offset: (0.0, 0.0), orientation: 0.0 }
    }

    pub fn size_inches(&self) -> f64 {
        SIZES_IN[self.size]
    }
}

/// Object size class to curl angles.
///
/// Each shape has a base curl profile and a per-joint direction along which
/// one size class step opens the finger. Both are absolute angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WrapModel {
    pub box_profile: [f64; JOINTS],
    pub cylinder_profile: [f64; JOINTS],
    pub box_direction: [f64; JOINTS],
    pub cylinder_direction: [f64; JOINTS],
    /// Degrees per size class step along the direction.
    pub step: f64,
    pub noise_std: f64,
}

impl Default for WrapModel {
    fn default() -> Self {
        Self {
            box_profile: [18.0, 36.0, 52.0, 70.0, 86.0, 104.0],
            cylinder_profile: [12.0, 28.0, 46.0, 64.0, 82.0, 100.0],
            box_direction: [0.2, 0.5, 1.0, 1.0, 0.5, 0.2],
            cylinder_direction: [1.0, 1.0, 0.6, 0.4, 0.6, 1.0],
            step: 5.0,
            noise_std: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TactileConfig {
    /// Side of the square contact window cropped out of the raw frame.
    pub window: usize,
    /// Peak imprint brightness above the calibration frame.
    pub amplitude: f64,
    /// Ridge half-width in pixels.
    pub ridge_width: f64,
    /// Cylinder arc radius per inch of diameter, pixels.
    pub px_per_inch: f64,
    pub offset_jitter: f64,
    pub orientation_jitter: f64,
    pub noise_std: f64,
}

impl Default for TactileConfig {
    fn default() -> Self {
        Self {
            window: 32,
            amplitude: 0.6,
            ridge_width: 1.5,
            px_per_inch: 4.0,
            offset_jitter: 3.0,
            orientation_jitter: 15.0,
            noise_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub dots_per_side: usize,
    pub dot_radius: f64,
    /// Horizontal border of the projection window, pixels. Angles from
    /// `theta_range.0` to `theta_range.1` map linearly onto the columns in
    /// between.
    pub window_margin: f64,
    pub theta_range: (f64, f64),
    pub background: f32,
    pub foreground: f32,
    /// Fraction of proprioception samples drawn as grasps instead of free
    /// curls.
    pub grasp_fraction: f64,
    pub wrap: WrapModel,
    pub tactile: TactileConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            dots_per_side: 1,
            dot_radius: 2.0,
            window_margin: 4.0,
            theta_range: (0.0, 120.0),
            background: 0.1,
            foreground: 0.9,
            grasp_fraction: 0.5,
            wrap: WrapModel::default(),
            tactile: TactileConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("dataset schema version {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("image {}x{} is smaller than 16x16", self.width, self.height));
        }
        if !(self.dot_radius >= 1.0) {
            return bad(format!("dot radius {} < 1 px", self.dot_radius));
        }
        if self.dots_per_side == 0 {
            return bad("dots_per_side must be >= 1".into());
        }
        let (lo, hi) = self.theta_range;
        if !(lo < hi) {
            return bad(format!("theta range [{lo}, {hi}] is empty"));
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.foreground) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.grasp_fraction) {
            return bad("grasp_fraction must lie in [0, 1]".into());
        }
        // Every dot of every in-range pose must land inside the frame.
        let r = self.dot_radius;
        let span = self.width as f64 - 2.0 * self.window_margin;
        if self.window_margin < r || span <= 0.0 {
            return bad(format!("window margin {} does not keep dots of radius {r} in frame", self.window_margin));
        }
        for cam in [Camera::Mid, Camera::Tip] {
            let rows = render::dot_rows(self, cam);
            let pitch = rows.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            if rows.first().copied().unwrap_or(0.0) < r || rows.last().copied().unwrap_or(0.0) > self.height as f64 - r {
                return bad(format!("{cam:?} camera dots fall outside the frame"));
            }
            if pitch < 2.0 * r + 1.0 {
                return bad(format!("{cam:?} camera dots overlap (row pitch {pitch:.2} px)"));
            }
        }
        let t = &self.tactile;
        if t.window < 8 || t.window > self.width.min(self.height) {
            return bad(format!("tactile window {} must lie in [8, {}]", t.window, self.width.min(self.height)));
        }
        if !(t.amplitude > 0.0 && t.amplitude <= 1.0) || !(t.ridge_width > 0.0) || !(t.px_per_inch > 0.0) {
            return bad("tactile amplitude, ridge width and scale must be positive".into());
        }
        if !(t.noise_std >= 0.0 && t.offset_jitter >= 0.0 && t.orientation_jitter >= 0.0) {
            return bad("tactile jitter and noise must be >= 0".into());
        }
        if !(self.wrap.noise_std >= 0.0) {
            return bad("wrap noise must be >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SceneConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_small_images_and_oversized_dots() {
        let cfg = SceneConfig { width: 8, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig { dot_radius: 0.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig { dot_radius: 6.0, window_margin: 6.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig { window_margin: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
