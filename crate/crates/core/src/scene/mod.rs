//! The optimizable Gaussian cloud and the pinhole camera model.
//!
//! Covariances are never stored directly: each Gaussian carries log-scales
//! and a quaternion, and `covariance` assembles `R diag(exp(2 ls)) R^T`,
//! which stays symmetric positive definite no matter what the optimizer
//! does to the raw parameters. Opacity and color live as logits for the
//! same reason: box constraints become unconstrained optimization.

pub mod cameras;
pub mod ply;

use crate::real::Real;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("init_from_points: empty point set")]
    EmptyPointSet,
    #[error("init_from_points: {points} points but {colors} colors")]
    PointColorMismatch { points: usize, colors: usize },
    #[error("evaluate_gaussian: covariance of Gaussian {index} is singular")]
    SingularCovariance { index: usize },
    #[error("camera {what}: {msg}")]
    BadCamera { what: String, msg: String },
}

/// A cloud of N anisotropic 3-D Gaussians, stored as flat parameter arrays
/// (struct-of-arrays) so the optimizer can treat each group uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud<S> {
    /// World-space centers, `N x 3`.
    pub positions: Vec<S>,
    /// Per-axis log scales, `N x 3`; scale = exp(log_scale) in world units.
    pub log_scales: Vec<S>,
    /// Unit quaternions `(w, x, y, z)`, `N x 4`.
    pub rotations: Vec<S>,
    /// Opacity logits, `N`; alpha = sigmoid(logit).
    pub opacity_logits: Vec<S>,
    /// Color logits, `N x 3`; linear RGB = sigmoid(logit).
    pub color_logits: Vec<S>,
}

impl<S: Real> GaussianCloud<S> {
    pub fn with_capacity(n: usize) -> Self {
        GaussianCloud {
            positions: Vec::with_capacity(n * 3),
            log_scales: Vec::with_capacity(n * 3),
            rotations: Vec::with_capacity(n * 4),
            opacity_logits: Vec::with_capacity(n),
            color_logits: Vec::with_capacity(n * 3),
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn position(&self, n: usize) -> [S; 3] {
        [
            self.positions[n * 3],
            self.positions[n * 3 + 1],
            self.positions[n * 3 + 2],
        ]
    }

    pub fn log_scale(&self, n: usize) -> [S; 3] {
        [
            self.log_scales[n * 3],
            self.log_scales[n * 3 + 1],
            self.log_scales[n * 3 + 2],
        ]
    }

    pub fn rotation(&self, n: usize) -> [S; 4] {
        [
            self.rotations[n * 4],
            self.rotations[n * 4 + 1],
            self.rotations[n * 4 + 2],
            self.rotations[n * 4 + 3],
        ]
    }

    /// Renormalize all quaternions to unit length (done after every
    /// optimizer step; projection also normalizes defensively).
    pub fn normalize_rotations(&mut self) {
        for q in self.rotations.chunks_mut(4) {
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if norm > S::zero() {
                for v in q {
                    *v /= norm;
                }
            } else {
                q.copy_from_slice(&[S::one(), S::zero(), S::zero(), S::zero()]);
            }
        }
    }
}

/// Rotation matrix of a quaternion `(w, x, y, z)`. The quaternion is
/// normalized here, so callers may pass raw optimizer output.
pub fn rotation_matrix<S: Real>(q: [S; 4]) -> [[S; 3]; 3] {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    let two = S::from_f64(2.0);
    [
        [
            S::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            S::one() - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            S::one() - two * (x * x + y * y),
        ],
    ]
}

/// World-space covariance of Gaussian `n`: `R diag(exp(2 ls)) R^T`.
pub fn covariance<S: Real>(cloud: &GaussianCloud<S>, n: usize) -> [[S; 3]; 3] {
    covariance_from(cloud.log_scale(n), cloud.rotation(n))
}

/// Covariance from raw parameters (shared with the projection backward).
pub fn covariance_from<S: Real>(log_scale: [S; 3], q: [S; 4]) -> [[S; 3]; 3] {
    let r = rotation_matrix(q);
    let two = S::from_f64(2.0);
    let s2 = [
        (two * log_scale[0]).exp(),
        (two * log_scale[1]).exp(),
        (two * log_scale[2]).exp(),
    ];
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for k in 0..3 {
                acc += r[i][k] * s2[k] * r[j][k];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// Unnormalized density of Gaussian `n` at world point `v`:
/// `exp(-1/2 (v-p)^T Sigma^-1 (v-p))`.
pub fn evaluate_gaussian<S: Real>(
    cloud: &GaussianCloud<S>,
    n: usize,
    v: [S; 3],
) -> Result<S, SceneError> {
    let cov = covariance(cloud, n);
    let p = cloud.position(n);
    let d = [v[0] - p[0], v[1] - p[1], v[2] - p[2]];
    let inv = invert3(&cov).ok_or(SceneError::SingularCovariance { index: n })?;
    let mut q = S::zero();
    for i in 0..3 {
        for j in 0..3 {
            q += d[i] * inv[i][j] * d[j];
        }
    }
    Ok((-q / S::from_f64(2.0)).exp())
}

/// Inverse of a 3x3 matrix via the adjugate; `None` when numerically
/// singular.
pub fn invert3<S: Real>(m: &[[S; 3]; 3]) -> Option<[[S; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < S::from_f64(1e-30) {
        return None;
    }
    let inv_det = S::one() / det;
    let mut inv = [[S::zero(); 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Some(inv)
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Scale given to a Gaussian with no neighbors to measure against.
pub const LONE_POINT_SCALE: f64 = 0.1;

/// Build a cloud from seed points: one Gaussian per point, isotropic scale
/// set to the mean distance to the 3 nearest neighbors (fewer if the cloud
/// is tiny), opacity 0.1, identity rotation, color from the point color.
pub fn init_from_points<S: Real>(
    points: &[[f64; 3]],
    colors: &[[f64; 3]],
) -> Result<GaussianCloud<S>, SceneError> {
    if points.is_empty() {
        return Err(SceneError::EmptyPointSet);
    }
    if points.len() != colors.len() {
        return Err(SceneError::PointColorMismatch {
            points: points.len(),
            colors: colors.len(),
        });
    }
    let m = points.len();
    let mut cloud = GaussianCloud::with_capacity(m);
    let opacity = logit(0.1);
    // Brute-force kNN: clouds here are seed clouds (hundreds of points), so
    // O(M^2) with a 3-element selection is plenty.
    let mut best = [0.0f64; 3];
    for (i, p) in points.iter().enumerate() {
        let mut count = 0usize;
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if count < 3 {
                best[count] = d2;
                count += 1;
                best[..count].sort_by(|a, b| a.partial_cmp(b).unwrap());
            } else if d2 < best[2] {
                best[2] = d2;
                best.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
        }
        let scale = if count == 0 {
            LONE_POINT_SCALE
        } else {
            best[..count].iter().map(|d2| d2.sqrt()).sum::<f64>() / count as f64
        };
        let ls = S::from_f64(scale.max(1e-6).ln());
        cloud
            .positions
            .extend(p.iter().map(|&v| S::from_f64(v)));
        cloud.log_scales.extend([ls, ls, ls]);
        cloud
            .rotations
            .extend([S::one(), S::zero(), S::zero(), S::zero()]);
        cloud.opacity_logits.push(S::from_f64(opacity));
        cloud
            .color_logits
            .extend(colors[i].iter().map(|&c| S::from_f64(logit(c))));
    }
    Ok(cloud)
}

/// Pinhole camera with a world-to-camera rigid transform:
/// `x_cam = R x_world + t`, pixels `u = fx x/z + cx`, `v = fy y/z + cy`.
/// Pixel `(i, j)` samples the continuous image plane at `(j+0.5, i+0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Index into the training image set; drives the view embedding.
    pub view_index: usize,
}

impl Camera {
    /// Check orthonormality and basic sanity, naming the failing field.
    pub fn validate(&self, what: &str) -> Result<(), SceneError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::BadCamera {
                what: what.to_string(),
                msg: format!("degenerate image size {}x{}", self.width, self.height),
            });
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SceneError::BadCamera {
                what: what.to_string(),
                msg: format!("non-positive focal length fx={} fy={}", self.fx, self.fy),
            });
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(SceneError::BadCamera {
                        what: what.to_string(),
                        msg: format!(
                            "rotation is not orthonormal: (R^T R)[{i}][{j}] = {dot:.8}"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// World point to camera space.
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Camera at `eye` looking at `target` (+z forward, +y down in camera
    /// frame to match image row order), pixel-focal `f`, principal point at
    /// the image center.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        f: f64,
        width: usize,
        height: usize,
        view_index: usize,
    ) -> Camera {
        let fwd = normalize([
            target[0] - eye[0],
            target[1] - eye[1],
            target[2] - eye[2],
        ]);
        // Camera x axis: right = forward x up (left-handed pixel frame with
        // y down); camera y axis: down = forward x right.
        let right = normalize(cross(fwd, normalize(up)));
        let down = cross(fwd, right);
        let rotation = [right, down, fwd];
        let mut cam = Camera {
            rotation,
            translation: [0.0; 3],
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            view_index,
        };
        // t = -R eye so that x_cam = R (x_world - eye).
        let re = cam.world_to_camera(eye);
        cam.translation = [-re[0], -re[1], -re[2]];
        cam
    }

    /// Camera for rendering at scale level `s >= 1`: resolution divided by
    /// 2^(s-1) (rounded up), intrinsics scaled to match.
    pub fn at_scale_level(&self, level: u32) -> Camera {
        let f = (1u32 << (level - 1)) as f64;
        let div = |v: usize| v.div_ceil(1usize << (level - 1));
        Camera {
            rotation: self.rotation,
            translation: self.translation,
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: div(self.width),
            height: div(self.height),
            view_index: self.view_index,
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
