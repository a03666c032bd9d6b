//! Browser bindings for the finger simulator. Everything here is a thin
//! shim over `gelflex`; arrays cross the boundary as flat typed arrays.

use gelflex::kinematics::{self, AngleVector, FingerGeometry, JOINTS};
use gelflex::nn::Rng;
use gelflex::synthgen::{render_finger_image, render_tactile_imprint, sample_pose, Camera, ObjectSpec, SceneConfig, Shape, SIZES_IN};
use wasm_bindgen::prelude::*;

fn angles(v: &[f64]) -> Result<AngleVector, String> {
    v.try_into().map_err(|_| format!("expected {JOINTS} angles, got {}", v.len()))
}

fn object(shape: &str, size: usize) -> Result<ObjectSpec, String> {
    let shape = match shape {
        "box" => Shape::Box,
        "cylinder" => Shape::Cylinder,
        other => return Err(format!("unknown shape {other:?}")),
    };
    if size >= SIZES_IN.len() {
        return Err(format!("size index {size} out of range"));
    }
    Ok(ObjectSpec::new(shape, size))
}

pub fn joint_positions(theta: &[f64]) -> Result<Vec<f64>, String> {
    let pts = kinematics::forward_kinematics(&angles(theta)?, &FingerGeometry::default()).map_err(|e| e.to_string())?;
    Ok(pts.iter().flatten().copied().collect())
}

pub fn camera_pixels(theta: &[f64], tip: bool) -> Result<Vec<f32>, String> {
    let cam = if tip { Camera::Tip } else { Camera::Mid };
    Ok(render_finger_image(&angles(theta)?, &SceneConfig::default(), cam).into_data())
}

pub fn grasp(shape: &str, size: usize, seed: u64) -> Result<Vec<f64>, String> {
    let obj = object(shape, size)?;
    let mut rng = Rng::new(seed);
    Ok(sample_pose(&mut rng, Some(&obj), &SceneConfig::default()).to_vec())
}

pub fn imprint(shape: &str, size: usize, seed: u64) -> Result<Vec<f32>, String> {
    let obj = object(shape, size)?;
    let mut rng = Rng::new(seed);
    Ok(render_tactile_imprint(&obj, &mut rng, &SceneConfig::default()).into_data())
}

pub fn tip_drift(pred: &[f64], truth: &[f64]) -> Result<f64, String> {
    kinematics::accumulative_error(&angles(pred)?, &angles(truth)?, &FingerGeometry::default()).map_err(|e| e.to_string())
}

/// Joint positions in mm, flattened as `x0, y0, x1, y1, ...`.
#[wasm_bindgen(js_name = jointPositions)]
pub fn js_joint_positions(theta: &[f64]) -> Result<Vec<f64>, JsError> {
    joint_positions(theta).map_err(|e| JsError::new(&e))
}

/// Grey camera frame, row-major, `cameraWidth() x cameraHeight()`.
#[wasm_bindgen(js_name = cameraImage)]
pub fn js_camera_image(theta: &[f64], tip: bool) -> Result<Vec<f32>, JsError> {
    camera_pixels(theta, tip).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = cameraWidth)]
pub fn camera_width() -> usize {
    SceneConfig::default().width
}

#[wasm_bindgen(js_name = cameraHeight)]
pub fn camera_height() -> usize {
    SceneConfig::default().height
}

/// Joint angles of the finger wrapped around an object.
#[wasm_bindgen(js_name = graspPose)]
pub fn js_grasp(shape: &str, size: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    grasp(shape, size, seed.into()).map_err(|e| JsError::new(&e))
}

/// Preprocessed contact imprint, `tactileWindow()` pixels square.
#[wasm_bindgen(js_name = tactileImprint)]
pub fn js_imprint(shape: &str, size: usize, seed: u32) -> Result<Vec<f32>, JsError> {
    imprint(shape, size, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = tactileWindow)]
pub fn tactile_window() -> usize {
    SceneConfig::default().tactile.window
}

/// Displacement of the last joint, in mm, between two poses.
#[wasm_bindgen(js_name = accumulativeError)]
pub fn js_tip_drift(pred: &[f64], truth: &[f64]) -> Result<f64, JsError> {
    tip_drift(pred, truth).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_finger_lies_on_the_axis() {
        let p = joint_positions(&[0.0; JOINTS]).unwrap();
        assert_eq!(p.len(), 2 * (JOINTS + 1));
        assert!((p[2 * JOINTS] - 120.0).abs() < 1e-9);
        assert!(p.iter().skip(1).step_by(2).all(|y| y.abs() < 1e-9));
    }

    #[test]
    fn buffers_match_advertised_sizes() {
        let img = camera_pixels(&[30.0; JOINTS], false).unwrap();
        assert_eq!(img.len(), camera_width() * camera_height());
        let w = tactile_window();
        assert_eq!(imprint("cylinder", 2, 1).unwrap().len(), w * w);
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(joint_positions(&[0.0; 3]).is_err());
        assert!(grasp("sphere", 0, 1).is_err());
        assert!(imprint("box", 4, 1).is_err());
    }

    #[test]
    fn grasp_is_seeded() {
        assert_eq!(grasp("box", 1, 9).unwrap(), grasp("box", 1, 9).unwrap());
        let d = tip_drift(&grasp("box", 0, 9).unwrap(), &grasp("box", 3, 9).unwrap()).unwrap();
        assert!(d > 0.0);
    }
}
