use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    render_finger_channels, render_tactile_imprint, render_tactile_pair, Camera, ImageGrid, ObjectSpec, SceneConfig,
    Shape, SynthError, SIZES_IN,
};
use crate::datapipe::split_dataset;
use crate::kinematics::{AngleVector, JOINTS};
use crate::nn::Rng;

pub const DATASET_SCHEMA: u32 = 1;
pub const GENERATOR_VERSION: &str = "1.0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Mid-camera frames with joint angles.
    ProprioSingle,
    /// Mid and tip camera frames stacked as two channels.
    ProprioDouble,
    /// Preprocessed contact imprints with shape labels.
    Tactile,
    /// Raw contact frame and calibration frame stacked as two channels.
    TactilePairs,
    /// Grasp angles with shape and size labels; no images.
    Size,
}

impl DatasetKind {
    pub fn default_count(self) -> usize {
        match self {
            DatasetKind::ProprioSingle | DatasetKind::ProprioDouble => 3500,
            DatasetKind::Tactile | DatasetKind::TactilePairs => 850,
            DatasetKind::Size => 800,
        }
    }

    pub fn train_ratio(self) -> f64 {
        match self {
            DatasetKind::ProprioSingle | DatasetKind::ProprioDouble => 0.8,
            DatasetKind::Tactile | DatasetKind::TactilePairs => 0.75,
            DatasetKind::Size => 0.9,
        }
    }

    fn class_count(self) -> usize {
        match self {
            DatasetKind::ProprioSingle | DatasetKind::ProprioDouble => 1,
            DatasetKind::Tactile | DatasetKind::TactilePairs => 2,
            DatasetKind::Size => 8,
        }
    }

    pub fn image_shape(self, cfg: &SceneConfig) -> Option<[usize; 3]> {
        match self {
            DatasetKind::ProprioSingle => Some([1, cfg.height, cfg.width]),
            DatasetKind::ProprioDouble => Some([2, cfg.height, cfg.width]),
            DatasetKind::Tactile => Some([1, cfg.tactile.window, cfg.tactile.window]),
            DatasetKind::TactilePairs => Some([2, cfg.height, cfg.width]),
            DatasetKind::Size => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    /// Joint angles in degrees, rounded to `f32` so the packed payload holds
    /// them exactly.
    pub angles: AngleVector,
    pub shape: Option<Shape>,
    /// Index into the size label map.
    pub size: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMaps {
    pub shape: Vec<Shape>,
    pub size_inches: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub generator_version: String,
    pub kind: DatasetKind,
    pub seed: u64,
    pub cfg: SceneConfig,
    pub cfg_hash: String,
    pub image_shape: Option<[usize; 3]>,
    /// `f32` values per sample in `samples.f32`: image then angles.
    pub record_len: usize,
    pub train_ratio: f64,
    pub label_maps: LabelMaps,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// One image per sample, empty for [`DatasetKind::Size`].
    pub images: Vec<ImageGrid>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.samples.iter().filter(|s| s.split == split).map(|s| s.index).collect()
    }

    pub fn angles(&self, i: usize) -> &AngleVector {
        &self.manifest.samples[i].angles
    }
}

/// SHA-256 of the canonical JSON encoding of `cfg`.
pub fn config_hash(cfg: &SceneConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn round_f32(a: AngleVector) -> AngleVector {
    a.map(|v| v as f32 as f64)
}

/// Object for stratified sample `i`: shapes alternate, sizes cycle.
fn object_for(kind: DatasetKind, i: usize) -> Option<ObjectSpec> {
    match kind {
        DatasetKind::Tactile | DatasetKind::TactilePairs => Some(ObjectSpec::new(Shape::ALL[i % 2], (i / 2) % SIZES_IN.len())),
        DatasetKind::Size => Some(ObjectSpec::new(Shape::ALL[(i / SIZES_IN.len()) % 2], i % SIZES_IN.len())),
        _ => None,
    }
}

fn stratum(kind: DatasetKind, s: &SampleRecord) -> usize {
    match kind {
        DatasetKind::Tactile | DatasetKind::TactilePairs => s.shape.map_or(0, Shape::index),
        DatasetKind::Size => s.shape.map_or(0, Shape::index) * SIZES_IN.len() + s.size.unwrap_or(0),
        _ => 0,
    }
}

pub fn generate_dataset(kind: DatasetKind, count: usize, seed: u64, cfg: &SceneConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    if count < kind.class_count().max(2) {
        return Err(SynthError::Dataset(format!("{count} samples cannot cover {} classes", kind.class_count())));
    }
    let root = Rng::new(seed);
    let mut samples = Vec::with_capacity(count);
    let mut images = Vec::new();
    for i in 0..count {
        let mut rng = root.split(i as u64);
        let (angles, obj) = match kind {
            DatasetKind::ProprioSingle | DatasetKind::ProprioDouble => {
                let obj = (rng.uniform() < cfg.grasp_fraction)
                    .then(|| ObjectSpec::new(Shape::ALL[rng.below(2)], rng.below(SIZES_IN.len())));
                (super::sample_pose(&mut rng, obj.as_ref(), cfg), obj)
            }
            DatasetKind::Size => {
                let obj = object_for(kind, i).expect("size samples carry an object");
                (super::sample_pose(&mut rng, Some(&obj), cfg), Some(obj))
            }
            DatasetKind::Tactile | DatasetKind::TactilePairs => ([0.0; JOINTS], object_for(kind, i)),
        };
        let angles = round_f32(angles);
        match kind {
            DatasetKind::ProprioSingle => images.push(render_finger_channels(&angles, cfg, &[Camera::Mid])),
            DatasetKind::ProprioDouble => images.push(render_finger_channels(&angles, cfg, &[Camera::Mid, Camera::Tip])),
            DatasetKind::Tactile => images.push(render_tactile_imprint(obj.as_ref().expect("object"), &mut rng, cfg)),
            DatasetKind::TactilePairs => {
                let (raw, cal) = render_tactile_pair(obj.as_ref().expect("object"), &mut rng, cfg);
                let mut data = raw.into_data();
                data.extend_from_slice(cal.data());
                images.push(ImageGrid::new(&[2, cfg.height, cfg.width], data).expect("two frames"));
            }
            DatasetKind::Size => {}
        }
        samples.push(SampleRecord {
            index: i,
            angles,
            shape: obj.map(|o| o.shape),
            size: obj.map(|o| o.size),
            split: Split::Train,
        });
    }
    let strata: Vec<usize> = samples.iter().map(|s| stratum(kind, s)).collect();
    let stratified = kind.class_count() > 1;
    let (_, test) = split_dataset(count, stratified.then_some(&strata[..]), kind.train_ratio(), seed)
        .map_err(|e| SynthError::Dataset(e.to_string()))?;
    for i in test {
        samples[i].split = Split::Test;
    }
    let image_shape = kind.image_shape(cfg);
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA,
        generator_version: GENERATOR_VERSION.into(),
        kind,
        seed,
        cfg: cfg.clone(),
        cfg_hash: config_hash(cfg),
        image_shape,
        record_len: image_shape.map_or(0, |s| s.iter().product()) + JOINTS,
        train_ratio: kind.train_ratio(),
        label_maps: LabelMaps { shape: Shape::ALL.to_vec(), size_inches: SIZES_IN.to_vec() },
        samples,
    };
    Ok(Dataset { manifest, images })
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&ds.manifest).map_err(|e| SynthError::Dataset(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("samples.f32"))?);
    let mut buf = Vec::with_capacity(ds.manifest.record_len * 4);
    for (i, s) in ds.manifest.samples.iter().enumerate() {
        buf.clear();
        if let Some(img) = ds.images.get(i) {
            for v in img.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for a in s.angles {
            buf.extend_from_slice(&(a as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Dataset(format!("manifest: {e}")))?;
    if manifest.schema_version != DATASET_SCHEMA {
        return Err(SynthError::Schema { found: manifest.schema_version, expected: DATASET_SCHEMA });
    }
    let plane = manifest.image_shape.map_or(0, |s| s.iter().product::<usize>());
    if manifest.record_len != plane + JOINTS {
        return Err(SynthError::Dataset("record length disagrees with image shape".into()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join("samples.f32"))?.read_to_end(&mut bytes)?;
    let n = manifest.samples.len();
    if bytes.len() != n * manifest.record_len * 4 {
        return Err(SynthError::Dataset(format!(
            "samples.f32 holds {} bytes, expected {}",
            bytes.len(),
            n * manifest.record_len * 4
        )));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut images = Vec::new();
    for (i, rec) in floats.chunks_exact(manifest.record_len).enumerate() {
        if let Some(shape) = manifest.image_shape {
            images.push(ImageGrid::new(&shape, rec[..plane].to_vec()).expect("length checked"));
        }
        let s = &manifest.samples[i];
        if s.index != i || (0..JOINTS).any(|j| rec[plane + j] as f64 != s.angles[j]) {
            return Err(SynthError::Dataset(format!("sample {i} disagrees with the manifest")));
        }
    }
    Ok(Dataset { manifest, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_balance() {
        let cfg = SceneConfig::default();
        let ds = generate_dataset(DatasetKind::Size, 800, 1, &cfg).unwrap();
        for size in 0..4 {
            assert_eq!(ds.manifest.samples.iter().filter(|s| s.size == Some(size)).count(), 200);
        }
        for shape in Shape::ALL {
            assert_eq!(ds.manifest.samples.iter().filter(|s| s.shape == Some(shape)).count(), 400);
        }
        assert_eq!(ds.indices(Split::Train).len(), 720);
        let ds = generate_dataset(DatasetKind::Tactile, 850, 1, &cfg).unwrap();
        assert_eq!(ds.manifest.samples.iter().filter(|s| s.shape == Some(Shape::Box)).count(), 425);
        assert_eq!(ds.images[0].shape(), &[1, 32, 32]);
    }

    #[test]
    fn proprio_split_and_images() {
        let ds = generate_dataset(DatasetKind::ProprioDouble, 50, 3, &SceneConfig::default()).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 40);
        assert_eq!(ds.images[0].shape(), &[2, 64, 64]);
        assert!(ds.images.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn save_load_roundtrip_and_determinism() {
        let cfg = SceneConfig::default();
        let dir = tempfile::tempdir().unwrap();
        for (k, (kind, n)) in [(DatasetKind::ProprioSingle, 24), (DatasetKind::TactilePairs, 24), (DatasetKind::Size, 80)].into_iter().enumerate() {
            let ds = generate_dataset(kind, n, 5, &cfg).unwrap();
            let a = dir.path().join(format!("a{k}"));
            let b = dir.path().join(format!("b{k}"));
            save_dataset(&ds, &a).unwrap();
            save_dataset(&generate_dataset(kind, n, 5, &cfg).unwrap(), &b).unwrap();
            for f in ["manifest.json", "samples.f32"] {
                assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
            }
            assert_eq!(load_dataset(&a).unwrap(), ds);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(DatasetKind::Size, 80, 5, &SceneConfig::default()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("samples.f32");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(SynthError::Dataset(_))));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(generate_dataset(DatasetKind::Size, 4, 0, &SceneConfig::default()).is_err());
    }
}
