//! Camera-set JSON: a flat list of records with a row-major rotation,
//! translation, pinhole intrinsics, image size, and the image path relative
//! to the dataset root.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Camera, SceneError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    /// Row-major 3x3 world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Image file relative to the dataset root, e.g. `train/0003.png`.
    pub image_path: String,
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera, image_path: String) -> CameraRecord {
        let r = &cam.rotation;
        CameraRecord {
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: cam.translation,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            image_path,
        }
    }

    /// Convert to a [`Camera`], validating geometry. `what` names the record
    /// in error messages (e.g. `cameras.json[4]`).
    pub fn into_camera(&self, view_index: usize, what: &str) -> Result<Camera, SceneError> {
        let r = &self.rotation;
        let cam = Camera {
            rotation: [
                [r[0], r[1], r[2]],
                [r[3], r[4], r[5]],
                [r[6], r[7], r[8]],
            ],
            translation: self.translation,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            view_index,
        };
        cam.validate(what)?;
        Ok(cam)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CameraIoError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        source: std::io::Error,
    },
    #[error("{file}: {source}")]
    Json {
        file: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraRecord>, CameraIoError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CameraIoError::Io {
        file: file.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CameraIoError::Json { file, source })
}

pub fn write_cameras(path: &Path, records: &[CameraRecord]) -> Result<(), CameraIoError> {
    let file = path.display().to_string();
    let text = serde_json::to_string_pretty(records).map_err(|source| CameraIoError::Json {
        file: file.clone(),
        source,
    })?;
    std::fs::write(path, text).map_err(|source| CameraIoError::Io { file, source })
}
