//! Preprocessing and augmentation between the generator and the networks.
//!
//! Angles are standardized with training-set statistics and then mapped onto
//! `[0, 1]` so a sigmoid head can regress them. Images get random contrast and
//! gain in training mode only.

use serde::{Deserialize, Serialize};

use crate::kinematics::{AngleVector, JOINTS};
use crate::nn::Rng;
use crate::synthgen::{CropWindow, ImageGrid};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DataError {
    #[error("normalizer: {0}")]
    Stats(String),
    #[error("crop: {0}")]
    Crop(String),
    #[error("split: {0}")]
    Split(String),
    #[error("shape: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: AngleVector,
    pub std: AngleVector,
    /// Per-joint z-score extrema of the training set.
    pub range_lo: AngleVector,
    pub range_hi: AngleVector,
}

/// Per-joint mean and population standard deviation of the training angles.
pub fn fit_normalizer(train: &[AngleVector]) -> Result<NormalizationStats, DataError> {
    if train.len() < 2 {
        return Err(DataError::Stats(format!("need at least 2 training samples, got {}", train.len())));
    }
    let n = train.len() as f64;
    let mut stats = NormalizationStats {
        mean: [0.0; JOINTS],
        std: [0.0; JOINTS],
        range_lo: [0.0; JOINTS],
        range_hi: [0.0; JOINTS],
    };
    for j in 0..JOINTS {
        let mean = train.iter().map(|a| a[j]).sum::<f64>() / n;
        let var = train.iter().map(|a| (a[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(DataError::Stats(format!("joint {j} has zero spread")));
        }
        stats.mean[j] = mean;
        stats.std[j] = std;
        let (lo, hi) = train
            .iter()
            .map(|a| (a[j] - mean) / std)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), z| (l.min(z), h.max(z)));
        stats.range_lo[j] = lo;
        stats.range_hi[j] = hi;
    }
    Ok(stats)
}

impl NormalizationStats {
    pub fn to_z(&self, angles: &AngleVector) -> [f64; JOINTS] {
        std::array::from_fn(|j| (angles[j] - self.mean[j]) / self.std[j])
    }

    pub fn from_z(&self, z: &[f64; JOINTS]) -> AngleVector {
        std::array::from_fn(|j| z[j] * self.std[j] + self.mean[j])
    }

    /// z-scores to sigmoid targets, clipped to `[0, 1]`.
    pub fn z_to_target(&self, z: &[f64; JOINTS]) -> [f64; JOINTS] {
        std::array::from_fn(|j| ((z[j] - self.range_lo[j]) / (self.range_hi[j] - self.range_lo[j])).clamp(0.0, 1.0))
    }

    pub fn target_to_z(&self, t: &[f64; JOINTS]) -> [f64; JOINTS] {
        std::array::from_fn(|j| t[j] * (self.range_hi[j] - self.range_lo[j]) + self.range_lo[j])
    }
}

pub fn normalize(angles: &AngleVector, stats: &NormalizationStats) -> [f64; JOINTS] {
    stats.z_to_target(&stats.to_z(angles))
}

pub fn denormalize(target: &[f64; JOINTS], stats: &NormalizationStats) -> AngleVector {
    stats.from_z(&stats.target_to_z(target))
}

/// Adds i.i.d. `N(0, variance)` to each coordinate (meant for z-scores).
pub fn add_label_noise(z: &[f64; JOINTS], variance: f64, rng: &mut Rng) -> [f64; JOINTS] {
    assert!(variance >= 0.0, "label noise variance must be >= 0");
    if variance == 0.0 {
        return *z;
    }
    let s = variance.sqrt();
    std::array::from_fn(|j| z[j] + s * rng.normal())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub contrast: (f64, f64),
    /// Multiplicative per-channel gain; stands in for saturation on
    /// grayscale frames.
    pub gain: (f64, f64),
    pub label_noise_variance: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { contrast: (0.7, 1.3), gain: (0.8, 1.2), label_noise_variance: 1e-3 }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self { contrast: (1.0, 1.0), gain: (1.0, 1.0), label_noise_variance: 0.0 }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ok = |(lo, hi): (f64, f64)| lo <= 1.0 && 1.0 <= hi && lo >= 0.0;
        if !ok(self.contrast) || !ok(self.gain) {
            return Err(DataError::Stats("augmentation ranges must be non-negative and contain 1".into()));
        }
        if !(self.label_noise_variance >= 0.0) {
            return Err(DataError::Stats("label noise variance must be >= 0".into()));
        }
        Ok(())
    }
}

/// `((img - m) * c + m) * gain[ch]`, clipped, with `m` the image mean.
pub fn adjust_image(img: &ImageGrid, contrast: f32, gains: &[f32]) -> ImageGrid {
    let ch = img.dim(0);
    assert_eq!(gains.len(), ch, "one gain per channel");
    let plane = img.len() / ch;
    let m = (img.data().iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64) as f32;
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let x = if contrast == 1.0 { *v } else { (*v - m) * contrast + m };
        *v = (x * gains[i / plane]).clamp(0.0, 1.0);
    }
    out
}

pub fn augment_image(img: &ImageGrid, cfg: &AugmentConfig, rng: &mut Rng) -> ImageGrid {
    let c = rng.uniform_range(cfg.contrast.0, cfg.contrast.1) as f32;
    let gains: Vec<f32> = (0..img.dim(0)).map(|_| rng.uniform_range(cfg.gain.0, cfg.gain.1) as f32).collect();
    adjust_image(img, c, &gains)
}

/// `|raw - calibration|` inside `crop`, divided by `scale` and clipped to
/// `[0, 1]`. Inputs are `[1, h, w]`.
pub fn tactile_preprocess(raw: &ImageGrid, calibration: &ImageGrid, crop: CropWindow, scale: f32) -> Result<ImageGrid, DataError> {
    if raw.shape() != calibration.shape() || raw.rank() != 3 {
        return Err(DataError::Shape(format!("raw {:?} vs calibration {:?}", raw.shape(), calibration.shape())));
    }
    let (ch, h, w) = (raw.dim(0), raw.dim(1), raw.dim(2));
    if crop.height == 0 || crop.width == 0 || crop.top + crop.height > h || crop.left + crop.width > w {
        return Err(DataError::Crop(format!("{crop:?} exceeds {h}x{w} frame")));
    }
    if !(scale > 0.0) {
        return Err(DataError::Crop(format!("scale {scale} must be > 0")));
    }
    let mut out = Vec::with_capacity(ch * crop.height * crop.width);
    for c in 0..ch {
        for y in crop.top..crop.top + crop.height {
            for x in crop.left..crop.left + crop.width {
                let i = (c * h + y) * w + x;
                out.push(((raw.data()[i] - calibration.data()[i]).abs() / scale).clamp(0.0, 1.0));
            }
        }
    }
    Ok(ImageGrid::new(&[ch, crop.height, crop.width], out).expect("non-empty crop"))
}

/// Crop without differencing; the baseline the difference image is judged
/// against.
pub fn crop(img: &ImageGrid, crop: CropWindow) -> Result<ImageGrid, DataError> {
    let zero = ImageGrid::zeros(img.shape());
    tactile_preprocess(img, &zero, crop, 1.0)
}

/// Seeded split into `(train, test)` index lists, each sorted ascending.
///
/// With `classes`, every class is shuffled and split on its own, so class
/// proportions carry over to both sides; a class left empty on either side
/// is an error.
pub fn split_dataset(n: usize, classes: Option<&[usize]>, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Split(format!("ratio {ratio} must lie in (0, 1)")));
    }
    let mut rng = Rng::new(seed).split_named("split");
    let groups: Vec<Vec<usize>> = match classes {
        None => vec![(0..n).collect()],
        Some(c) => {
            if c.len() != n {
                return Err(DataError::Split(format!("{} labels for {n} samples", c.len())));
            }
            let k = c.iter().copied().max().map_or(0, |m| m + 1);
            let mut g = vec![Vec::new(); k];
            for (i, &l) in c.iter().enumerate() {
                g[l].push(i);
            }
            g.retain(|v| !v.is_empty());
            g
        }
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (gi, mut g) in groups.into_iter().enumerate() {
        rng.shuffle(&mut g);
        let cut = (ratio * g.len() as f64).round() as usize;
        if cut == 0 || cut == g.len() {
            return Err(DataError::Split(format!("class group {gi} of {} samples leaves one side empty", g.len())));
        }
        train.extend_from_slice(&g[..cut]);
        test.extend_from_slice(&g[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Train,
    Eval,
}

/// Per-sample input and target preparation. Augmentation and label noise
/// exist only in `Train`; an `Eval` pipeline never touches its rng.
#[derive(Clone, Debug)]
pub struct Pipeline {
    mode: PipelineMode,
    augment: AugmentConfig,
}

impl Pipeline {
    pub fn train(augment: AugmentConfig) -> Self {
        Self { mode: PipelineMode::Train, augment }
    }

    pub fn eval() -> Self {
        Self { mode: PipelineMode::Eval, augment: AugmentConfig::identity() }
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    pub fn image(&self, img: &ImageGrid, rng: &mut Rng) -> ImageGrid {
        match self.mode {
            PipelineMode::Train => augment_image(img, &self.augment, rng),
            PipelineMode::Eval => img.clone(),
        }
    }

    pub fn target(&self, angles: &AngleVector, stats: &NormalizationStats, rng: &mut Rng) -> [f64; JOINTS] {
        let z = stats.to_z(angles);
        let z = match self.mode {
            PipelineMode::Train => add_label_noise(&z, self.augment.label_noise_variance, rng),
            PipelineMode::Eval => z,
        };
        stats.z_to_target(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::nn::Rng;

    fn sample_angles(n: usize, seed: u64) -> Vec<AngleVector> {
        let mut r = Rng::new(seed);
        (0..n).map(|_| crate::synthgen::sample_free_pose(&mut r, (0.0, 120.0))).collect()
    }

    #[test]
    fn two_sample_stats() {
        let s = fit_normalizer(&[[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], [10.0, 11.0, 12.0, 13.0, 14.0, 15.0]]).unwrap();
        for j in 0..6 {
            assert!((s.std[j] - 5.0).abs() < 1e-12);
            assert_eq!(s.range_lo[j], -1.0);
            assert_eq!(s.range_hi[j], 1.0);
        }
        assert_eq!(s.mean[0], 5.0);
    }

    #[test]
    fn constant_joint_is_rejected() {
        let a = [[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [2.0, 2.0, 4.0, 5.0, 6.0, 7.0]];
        assert!(matches!(fit_normalizer(&a), Err(DataError::Stats(_))));
        assert!(fit_normalizer(&a[..1]).is_err());
    }

    #[test]
    fn standardized_training_data_has_unit_moments() {
        let a = sample_angles(500, 1);
        let s = fit_normalizer(&a).unwrap();
        let z: Vec<_> = a.iter().map(|x| s.to_z(x)).collect();
        for j in 0..6 {
            let m = z.iter().map(|v| v[j]).sum::<f64>() / z.len() as f64;
            let v = z.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-6 && (v.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn test_split_is_not_centred() {
        // Train on small curls only; the test mean must stay visible.
        let a = sample_angles(400, 2);
        let (small, large): (Vec<_>, Vec<_>) = a.iter().partition(|x| x[5] < 60.0);
        let s = fit_normalizer(&small).unwrap();
        let mean_t = large.iter().map(|x| normalize(x, &s)[5]).sum::<f64>() / large.len() as f64;
        let mean_z = large.iter().map(|x| s.to_z(x)[5]).sum::<f64>() / large.len() as f64;
        assert!(mean_z > 1.0 && mean_t > 0.9);
    }

    #[test]
    fn mean_maps_to_the_affine_offset() {
        let s = fit_normalizer(&sample_angles(100, 3)).unwrap();
        let t = normalize(&s.mean, &s);
        for j in 0..6 {
            assert!((t[j] - (-s.range_lo[j] / (s.range_hi[j] - s.range_lo[j]))).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_clips_to_boundary() {
        let a = sample_angles(100, 4);
        let s = fit_normalizer(&a).unwrap();
        let far = [-500.0, 500.0, -500.0, 500.0, -500.0, 500.0];
        let t = normalize(&far, &s);
        assert_eq!(t, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let back = denormalize(&t, &s);
        for j in 0..6 {
            let bound = if j % 2 == 0 { s.range_lo[j] } else { s.range_hi[j] };
            assert!((back[j] - (bound * s.std[j] + s.mean[j])).abs() < 1e-9);
        }
    }

    #[test]
    fn label_noise_moments() {
        let mut r = Rng::new(5);
        assert_eq!(add_label_noise(&[0.5; 6], 0.0, &mut r), [0.5; 6]);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n / 6 + 1 {
            for v in add_label_noise(&[0.0; 6], 1e-3, &mut r) {
                s += v;
                s2 += v * v;
            }
        }
        let cnt = ((n / 6 + 1) * 6) as f64;
        let mean = s / cnt;
        let var = s2 / cnt - mean * mean;
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!((var / 1e-3 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn contrast_identity_and_collapse() {
        let img = ImageGrid::new(&[1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        assert_eq!(adjust_image(&img, 1.0, &[1.0]), img);
        let flat = adjust_image(&img, 0.0, &[1.0]);
        assert!(flat.data().iter().all(|&v| (v - 0.45).abs() < 1e-6));
    }

    #[test]
    fn eval_pipeline_is_identity_and_consumes_no_randomness() {
        let img = ImageGrid::new(&[1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        let s = fit_normalizer(&sample_angles(50, 6)).unwrap();
        let p = Pipeline::eval();
        let mut r = Rng::new(1);
        let before = r.clone();
        assert_eq!(p.image(&img, &mut r), img);
        let a = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0];
        assert_eq!(p.target(&a, &s, &mut r), normalize(&a, &s));
        assert_eq!(r, before);
        let t = Pipeline::train(AugmentConfig::default());
        assert_ne!(t.target(&a, &s, &mut r), normalize(&a, &s));
    }

    #[test]
    fn tactile_difference_and_crop() {
        let raw = ImageGrid::new(&[1, 4, 4], (0..16).map(|v| v as f32 / 16.0).collect()).unwrap();
        let win = CropWindow { top: 1, left: 1, height: 2, width: 2 };
        let d = tactile_preprocess(&raw, &raw, win, 1.0).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        let c = tactile_preprocess(&raw, &ImageGrid::zeros(&[1, 4, 4]), win, 1.0).unwrap();
        assert_eq!(c.data(), &[5.0 / 16.0, 6.0 / 16.0, 9.0 / 16.0, 10.0 / 16.0]);
        let bad = CropWindow { top: 3, left: 0, height: 2, width: 2 };
        assert!(matches!(tactile_preprocess(&raw, &raw, bad, 1.0), Err(DataError::Crop(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let labels: Vec<usize> = (0..800).map(|i| i % 8).collect();
        let (tr, te) = split_dataset(800, Some(&labels), 0.9, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (720, 80));
        for c in 0..8 {
            assert_eq!(te.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        assert_eq!(split_dataset(800, Some(&labels), 0.9, 3).unwrap(), (tr, te));
        let (tr, te) = split_dataset(3500, None, 0.8, 7).unwrap();
        assert_eq!((tr.len(), te.len()), (2800, 700));
    }

    #[test]
    fn split_rejects_empty_class() {
        let labels = [0, 0, 0, 0, 1];
        assert!(matches!(split_dataset(5, Some(&labels), 0.8, 0), Err(DataError::Split(_))));
    }

    proptest! {
        #[test]
        fn normalize_roundtrip(seed in 0u64..1000, pick in 0usize..200) {
            let a = sample_angles(200, seed);
            let s = fit_normalizer(&a).unwrap();
            let back = denormalize(&normalize(&a[pick], &s), &s);
            for j in 0..6 {
                prop_assert!((back[j] - a[pick][j]).abs() < 1e-5);
            }
        }

        #[test]
        fn split_is_a_partition(n in 2usize..300, ratio in 0.1f64..0.9, seed: u64) {
            if let Ok((tr, te)) = split_dataset(n, None, ratio, seed) {
                let mut all: Vec<_> = tr.iter().chain(&te).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }

        #[test]
        fn augmentation_stays_in_unit_range(vals in prop::collection::vec(0.0f32..=1.0, 16), seed: u64) {
            let img = ImageGrid::new(&[1, 4, 4], vals).unwrap();
            let out = augment_image(&img, &AugmentConfig::default(), &mut Rng::new(seed));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
