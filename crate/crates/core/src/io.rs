//! Image and dataset I/O.
//!
//! Images are 8-bit linear PNGs (no gamma transform); tensors are planar
//! `[3, H, W]` in [0, 1]. A dataset directory holds `cameras.json` (train
//! and test cameras, distinguished by their image path prefix),
//! `points.ply` (a sparse noisy seed cloud), `train/` and `test/` image
//! folders, and `degradation.json` describing how each training view was
//! degraded.

use crate::real::Real;
use crate::scene::cameras::{read_cameras, write_cameras, CameraIoError, CameraRecord};
use crate::scene::ply::{read_ply, write_ply, PlyError, PlyPoint};
use crate::scene::Camera;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Cameras(#[from] CameraIoError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("dataset {dir}: {msg}")]
    Malformed { dir: PathBuf, msg: String },
}

/// Save a planar `[3, H, W]` image in [0, 1] as an 8-bit RGB PNG.
pub fn save_rgb_png<S: Real>(
    path: &Path,
    data: &[S],
    height: usize,
    width: usize,
) -> Result<(), DataError> {
    assert_eq!(data.len(), 3 * height * width, "planar RGB size");
    let hw = height * width;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            let v = Real::to_f64(data[c * hw + p]).clamp(0.0, 1.0);
            buf.push((v * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized from dimensions");
    img.save(path).map_err(|source| DataError::Image {
        path: path.to_owned(),
        source,
    })
}

/// Save a `[H, W]` map in [0, 1] as an 8-bit grayscale PNG.
pub fn save_gray_png<S: Real>(
    path: &Path,
    data: &[S],
    height: usize,
    width: usize,
) -> Result<(), DataError> {
    assert_eq!(data.len(), height * width, "grayscale size");
    let buf: Vec<u8> = data
        .iter()
        .map(|&v| (Real::to_f64(v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, buf)
        .expect("buffer sized from dimensions");
    img.save(path).map_err(|source| DataError::Image {
        path: path.to_owned(),
        source,
    })
}

/// Load a PNG as planar `[3, H, W]` in [0, 1].
pub fn load_rgb_png<S: Real>(path: &Path) -> Result<(Vec<S>, usize, usize), DataError> {
    let img = image::open(path)
        .map_err(|source| DataError::Image {
            path: path.to_owned(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = w * h;
    let mut data = vec![S::zero(); 3 * hw];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + p] = S::from_f64(px.0[c] as f64 / 255.0);
        }
    }
    Ok((data, h, w))
}

/// How one training view was degraded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlurSpec {
    None,
    Motion { angle: f64, length: f64 },
    Defocus { focus_depth: f64, gain: f64 },
    Mixres { factor: u32 },
}

/// `degradation.json`: the generating seed plus one spec per training view,
/// in training-view order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationManifest {
    pub seed: u64,
    pub per_view: Vec<BlurSpec>,
}

pub fn write_degradation(path: &Path, manifest: &DegradationManifest) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(manifest).map_err(|source| DataError::Json {
        path: path.to_owned(),
        source,
    })?;
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_degradation(path: &Path) -> Result<DegradationManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_owned(),
        source,
    })
}

/// One view ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedView<S> {
    pub camera: Camera,
    /// `[3, H, W]` observed image.
    pub image: Vec<S>,
}

#[derive(Debug)]
pub struct Dataset<S> {
    pub train: Vec<LoadedView<S>>,
    pub test: Vec<LoadedView<S>>,
    pub points: Vec<PlyPoint>,
    pub width: usize,
    pub height: usize,
    pub degradation: Option<DegradationManifest>,
}

/// Write the camera list for a dataset: train views as `train/%04d.png`,
/// test views as `test/%04d.png`; the loader splits on that prefix.
pub fn write_dataset_cameras(
    dir: &Path,
    train: &[Camera],
    test: &[Camera],
) -> Result<(), DataError> {
    let mut records = Vec::with_capacity(train.len() + test.len());
    for (i, cam) in train.iter().enumerate() {
        records.push(CameraRecord::from_camera(cam, format!("train/{i:04}.png")));
    }
    for (i, cam) in test.iter().enumerate() {
        records.push(CameraRecord::from_camera(cam, format!("test/{i:04}.png")));
    }
    write_cameras(&dir.join("cameras.json"), &records)?;
    Ok(())
}

/// Load a dataset directory. Training views are re-indexed 0..N in file
/// order so `view_index` addresses the BPN embedding table directly.
pub fn load_dataset<S: Real>(dir: &Path) -> Result<Dataset<S>, DataError> {
    let records = read_cameras(&dir.join("cameras.json"))?;
    let mut train: Vec<LoadedView<S>> = Vec::new();
    let mut test: Vec<LoadedView<S>> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, rec) in records.iter().enumerate() {
        let rel = rec.image_path.clone();
        let is_train = rel.starts_with("train/");
        let is_test = rel.starts_with("test/");
        if !is_train && !is_test {
            return Err(DataError::Malformed {
                dir: dir.to_owned(),
                msg: format!("camera image path {rel:?} is neither train/ nor test/"),
            });
        }
        let index = if is_train { train.len() } else { test.len() };
        let camera = rec
            .into_camera(index, &format!("cameras.json[{i}]"))
            .map_err(CameraIoError::from)?;
        let (image, h, w) = load_rgb_png::<S>(&dir.join(&rel))?;
        if (w, h) != (camera.width, camera.height) {
            return Err(DataError::Malformed {
                dir: dir.to_owned(),
                msg: format!(
                    "{rel}: image is {w}x{h} but camera says {}x{}",
                    camera.width, camera.height
                ),
            });
        }
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(DataError::Malformed {
                    dir: dir.to_owned(),
                    msg: format!("mixed image sizes: {d:?} vs {:?}", (w, h)),
                })
            }
            _ => {}
        }
        if is_train {
            train.push(LoadedView { camera, image });
        } else {
            test.push(LoadedView { camera, image });
        }
    }
    if train.is_empty() {
        return Err(DataError::Malformed {
            dir: dir.to_owned(),
            msg: "no training views".into(),
        });
    }
    let points = read_ply(&dir.join("points.ply"))?;
    let deg_path = dir.join("degradation.json");
    let degradation = if deg_path.exists() {
        Some(read_degradation(&deg_path)?)
    } else {
        None
    };
    let (width, height) = dims.unwrap();
    Ok(Dataset {
        train,
        test,
        points,
        width,
        height,
        degradation,
    })
}

/// Re-export for dataset writers.
pub fn write_points(path: &Path, points: &[PlyPoint]) -> Result<(), DataError> {
    write_ply(path, points)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let (h, w) = (5, 7);
        let data: Vec<f64> = (0..3 * h * w).map(|i| (i as f64) / (3.0 * 35.0)).collect();
        save_rgb_png(&path, &data, h, w).unwrap();
        let (back, rh, rw) = load_rgb_png::<f64>(&path).unwrap();
        assert_eq!((rh, rw), (h, w));
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn degradation_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("degradation.json");
        let manifest = DegradationManifest {
            seed: 42,
            per_view: vec![
                BlurSpec::None,
                BlurSpec::Motion {
                    angle: 0.5,
                    length: 6.0,
                },
                BlurSpec::Defocus {
                    focus_depth: 3.0,
                    gain: 2.0,
                },
                BlurSpec::Mixres { factor: 4 },
            ],
        };
        write_degradation(&path, &manifest).unwrap();
        let back = read_degradation(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.per_view, manifest.per_view);
    }
}
