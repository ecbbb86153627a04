//! Synthetic ground truth: a procedural desk-scale scene plus three
//! degradation families (camera-motion streaks, depth-dependent defocus,
//! mixed per-view resolution) that manufacture blurry training sets with
//! known clean answers.
//!
//! Every degradation here is a convex combination of source pixels (all
//! kernels are non-negative and normalized), so constant images pass through
//! unchanged and outputs stay inside [0, 1] without clamping. At the
//! magnitudes `write_dataset` samples, every kernel fits in a 17x17 support,
//! so the blur proposal network's largest kernel can represent the ground
//! truth exactly.
//!
//! Defocus uses the clean render's own alpha-weighted depth map as its depth
//! source. Background and soft-edge pixels read as shallow depth (weighted
//! depth decays with coverage), which blurs them under defocus; that is
//! intentional — the degradation is a deterministic function of the clean
//! render, which is exactly what a blur model conditioned on the rendered
//! depth can recover.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::io::{
    save_rgb_png, write_dataset_cameras, write_degradation, BlurSpec, DataError,
    DegradationManifest,
};
use crate::rasterizer::{render_at_scale, RasterError};
use crate::real::Real;
use crate::scene::ply::PlyPoint;
use crate::scene::{logit, Camera, GaussianCloud};

/// Gaussian centers are sampled inside a ball of this radius.
pub const SCENE_RADIUS: f64 = 0.8;
/// Camera ring: radius in the xy plane and height above it.
pub const RING_RADIUS: f64 = 3.0;
pub const RING_HEIGHT: f64 = 1.0;
/// Focal length in pixels per pixel of image width (80px at 64 wide).
pub const FOCAL_PER_WIDTH: f64 = 1.25;
pub const DEFAULT_VIEWS: usize = 24;
pub const DEFAULT_SIZE: usize = 64;
/// Background color shared by dataset synthesis and the training defaults.
pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

/// Defocus blur saturates at this sigma (pixels).
pub const DEFOCUS_SIGMA_MAX: f64 = 4.0;
/// Below this sigma a pixel is copied through untouched.
pub const DEFOCUS_SIGMA_IDENTITY: f64 = 0.05;
/// Gather radius cap: 2*8+1 = 17 support even at sigma_max.
const DEFOCUS_MAX_RADIUS: usize = 8;
/// Mix-resolution downscale factors, one quarter of the views each.
pub const MIXRES_FACTORS: [u32; 4] = [4, 3, 2, 1];

/// Fraction of Gaussian centers exported to the seed point cloud, and the
/// stddev of the jitter applied to them (emulating sparse SfM noise).
const PLY_KEEP_EVERY: usize = 5;
const PLY_JITTER_SIGMA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(
        "defocus inputs disagree: image has {image_len} values and depth {depth_len} \
         for a {width}x{height} target"
    )]
    ShapeMismatch {
        image_len: usize,
        depth_len: usize,
        width: usize,
        height: usize,
    },
    #[error("mix-resolution degradation needs at least 4 views, got {got}")]
    TooFewViews { got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Which degradation family a dataset applies to its training views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurKind {
    None,
    Motion,
    Defocus,
    Mixres,
}

/// Everything `write_dataset` needs. `None` magnitude fields are sampled
/// per view from the built-in ranges; fixed values override the sampling.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_gaussians: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub blur: BlurKind,
    pub motion_angle: Option<f64>,
    pub motion_length: Option<f64>,
    pub defocus_depth: Option<f64>,
    pub defocus_gain: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_gaussians: 80,
            views: DEFAULT_VIEWS,
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
            blur: BlurKind::None,
            motion_angle: None,
            motion_length: None,
            defocus_depth: None,
            defocus_gain: None,
        }
    }
}

/// A procedural scene: the cloud plus train/test camera rings.
#[derive(Debug, Clone)]
pub struct ToyScene<S> {
    pub cloud: GaussianCloud<S>,
    pub train_cameras: Vec<Camera>,
    pub test_cameras: Vec<Camera>,
}

fn unit_vector<const N: usize>(rng: &mut ChaCha8Rng) -> [f64; N] {
    loop {
        let mut v = [0.0f64; N];
        let mut norm2 = 0.0f64;
        for x in &mut v {
            *x = StandardNormal.sample(rng);
            norm2 += *x * *x;
        }
        if norm2 > 1e-12 {
            let inv = 1.0 / norm2.sqrt();
            for x in &mut v {
                *x *= inv;
            }
            return v;
        }
    }
}

/// Default geometry: 24 train + 24 test cameras on a 64x64 ring.
pub fn make_toy_scene<S: Real>(seed: u64, n_gaussians: usize) -> ToyScene<S> {
    make_toy_scene_sized(seed, n_gaussians, DEFAULT_VIEWS, DEFAULT_SIZE, DEFAULT_SIZE)
}

/// Textured cluster of `n_gaussians` random Gaussians inside a ball of
/// radius `SCENE_RADIUS`, viewed by `views` train cameras evenly spaced on
/// a ring (test cameras interleaved half a step around), all looking at the
/// origin. Deterministic per seed.
pub fn make_toy_scene_sized<S: Real>(
    seed: u64,
    n_gaussians: usize,
    views: usize,
    width: usize,
    height: usize,
) -> ToyScene<S> {
    assert!(n_gaussians >= 10, "need at least 10 Gaussians, got {n_gaussians}");
    assert!(views >= 1, "need at least one view");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::with_capacity(n_gaussians);
    for _ in 0..n_gaussians {
        // cbrt of a uniform radius fraction gives uniform density in the ball.
        let dir: [f64; 3] = unit_vector(&mut rng);
        let r = SCENE_RADIUS * rng.gen::<f64>().cbrt();
        for d in dir {
            cloud.positions.push(S::from_f64(d * r));
        }
        for _ in 0..3 {
            cloud
                .log_scales
                .push(S::from_f64(rng.gen_range(0.02f64.ln()..0.1f64.ln())));
        }
        let q: [f64; 4] = unit_vector(&mut rng);
        for c in q {
            cloud.rotations.push(S::from_f64(c));
        }
        cloud
            .opacity_logits
            .push(S::from_f64(logit(rng.gen_range(0.4..0.9))));
        for _ in 0..3 {
            cloud
                .color_logits
                .push(S::from_f64(logit(rng.gen_range(0.1..0.9))));
        }
    }

    let f = FOCAL_PER_WIDTH * width as f64;
    let ring_camera = |step: f64, view_index: usize| {
        let theta = std::f64::consts::TAU * step / views as f64;
        let eye = [RING_RADIUS * theta.cos(), RING_RADIUS * theta.sin(), RING_HEIGHT];
        Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], f, width, height, view_index)
    };
    let train_cameras = (0..views).map(|i| ring_camera(i as f64, i)).collect();
    let test_cameras = (0..views).map(|i| ring_camera(i as f64 + 0.5, i)).collect();
    ToyScene {
        cloud,
        train_cameras,
        test_cameras,
    }
}

/// Anti-aliased line-segment kernel: length `length` pixels at `angle`
/// radians, rasterized by 4x4 supersampling (a sample contributes when it
/// lies within half a pixel of the segment), then normalized. Returns the
/// weights and the odd kernel width.
fn motion_kernel(angle: f64, length: f64) -> (Vec<f64>, usize) {
    let half = length / 2.0;
    // Cells further than half+0.875 from the center along the segment can
    // never contain a contributing sample (0.375 max sample offset + 0.5
    // coverage distance).
    let k_half = (half + 0.875).ceil() as usize;
    let k = 2 * k_half + 1;
    let (dx, dy) = (angle.cos(), angle.sin());
    const SS: usize = 4;
    let mut weights = vec![0.0; k * k];
    for cy in 0..k {
        for cx in 0..k {
            let (cell_x, cell_y) = (cx as f64 - k_half as f64, cy as f64 - k_half as f64);
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = cell_x + (sx as f64 + 0.5) / SS as f64 - 0.5;
                    let py = cell_y + (sy as f64 + 0.5) / SS as f64 - 0.5;
                    // Distance from (px,py) to the segment t*(dx,dy), |t|<=half.
                    let t = (px * dx + py * dy).clamp(-half, half);
                    let (rx, ry) = (px - t * dx, py - t * dy);
                    if rx * rx + ry * ry <= 0.25 {
                        hits += 1;
                    }
                }
            }
            weights[cy * k + cx] = hits as f64 / (SS * SS) as f64;
        }
    }
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "motion kernel cannot be empty");
    for w in &mut weights {
        *w /= total;
    }
    (weights, k)
}

/// Convolve a planar `[3, H, W]` image with a normalized per-view kernel,
/// replicate-padding at the borders. `length = 0` is the identity.
pub fn degrade_motion<S: Real>(
    image: &[S],
    height: usize,
    width: usize,
    angle: f64,
    length: f64,
) -> Vec<S> {
    assert!(length >= 0.0, "motion length must be non-negative, got {length}");
    assert_eq!(image.len(), 3 * height * width, "planar RGB size");
    if length == 0.0 {
        return image.to_vec();
    }
    let (weights, k) = motion_kernel(angle, length);
    let k_half = (k / 2) as isize;
    let hw = height * width;
    let mut out = vec![S::zero(); 3 * hw];
    for i in 0..height {
        for j in 0..width {
            let mut acc = [0.0f64; 3];
            for ky in 0..k {
                let si = (i as isize + ky as isize - k_half).clamp(0, height as isize - 1) as usize;
                for kx in 0..k {
                    let w = weights[ky * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let sj =
                        (j as isize + kx as isize - k_half).clamp(0, width as isize - 1) as usize;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += w * Real::to_f64(image[c * hw + si * width + sj]);
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out[c * hw + i * width + j] = S::from_f64(*a);
            }
        }
    }
    out
}

/// Per-pixel isotropic Gaussian blur with sigma(x) = gain * |depth(x) -
/// focus_depth|, clamped to `DEFOCUS_SIGMA_MAX`; sigma below
/// `DEFOCUS_SIGMA_IDENTITY` copies the pixel through.
pub fn degrade_defocus<S: Real>(
    image: &[S],
    height: usize,
    width: usize,
    depth: &[S],
    focus_depth: f64,
    gain: f64,
) -> Result<Vec<S>, SynthError> {
    let hw = height * width;
    if image.len() != 3 * hw || depth.len() != hw {
        return Err(SynthError::ShapeMismatch {
            image_len: image.len(),
            depth_len: depth.len(),
            width,
            height,
        });
    }
    assert!(gain >= 0.0, "aperture gain must be non-negative, got {gain}");
    let mut out = vec![S::zero(); 3 * hw];
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            let sigma =
                (gain * (Real::to_f64(depth[p]) - focus_depth).abs()).min(DEFOCUS_SIGMA_MAX);
            if sigma < DEFOCUS_SIGMA_IDENTITY {
                for c in 0..3 {
                    out[c * hw + p] = image[c * hw + p];
                }
                continue;
            }
            let radius = ((3.0 * sigma).ceil() as usize).min(DEFOCUS_MAX_RADIUS) as isize;
            let inv2s2 = 1.0 / (2.0 * sigma * sigma);
            let mut acc = [0.0f64; 3];
            let mut total = 0.0f64;
            for dy in -radius..=radius {
                let si = (i as isize + dy).clamp(0, height as isize - 1) as usize;
                for dx in -radius..=radius {
                    let sj = (j as isize + dx).clamp(0, width as isize - 1) as usize;
                    let w = (-((dy * dy + dx * dx) as f64) * inv2s2).exp();
                    total += w;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += w * Real::to_f64(image[c * hw + si * width + sj]);
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out[c * hw + p] = S::from_f64(*a / total);
            }
        }
    }
    Ok(out)
}

/// Area average over `f x f` blocks (partial blocks at the bottom/right
/// average their in-bounds part). Output is ceil(h/f) x ceil(w/f).
fn box_downscale<S: Real>(image: &[S], height: usize, width: usize, f: usize) -> (Vec<S>, usize, usize) {
    let (oh, ow) = (height.div_ceil(f), width.div_ceil(f));
    let (hw, ohw) = (height * width, oh * ow);
    let mut out = vec![S::zero(); 3 * ohw];
    for c in 0..3 {
        for bi in 0..oh {
            let rows = (bi * f)..((bi + 1) * f).min(height);
            for bj in 0..ow {
                let cols = (bj * f)..((bj + 1) * f).min(width);
                let mut acc = 0.0f64;
                for i in rows.clone() {
                    for j in cols.clone() {
                        acc += Real::to_f64(image[c * hw + i * width + j]);
                    }
                }
                let count = (rows.len() * cols.len()) as f64;
                out[c * ohw + bi * ow + bj] = S::from_f64(acc / count);
            }
        }
    }
    (out, oh, ow)
}

/// Bilinear resample with pixel-center alignment and edge clamping.
fn bilinear_upscale<S: Real>(
    image: &[S],
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
) -> Vec<S> {
    let (shw, dhw) = (sh * sw, dh * dw);
    let mut out = vec![S::zero(); 3 * dhw];
    for i in 0..dh {
        let sy = ((i as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, sh as f64 - 1.0);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(sh - 1);
        for j in 0..dw {
            let sx = ((j as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, sw as f64 - 1.0);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(sw - 1);
            for c in 0..3 {
                let at = |y: usize, x: usize| Real::to_f64(image[c * shw + y * sw + x]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[c * dhw + i * dw + j] = S::from_f64(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Split the views into four equal parts (remainders spread to the larger
/// factors), assign factors uniformly at random per seed, and run each view
/// through area-downscale + bilinear-upscale by its factor. Factor 1 views
/// pass through bit-identical.
pub fn degrade_mixres<S: Real>(
    images: &[Vec<S>],
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(Vec<Vec<S>>, Vec<u32>), SynthError> {
    let n = images.len();
    if n < 4 {
        return Err(SynthError::TooFewViews { got: n });
    }
    for img in images {
        assert_eq!(img.len(), 3 * height * width, "planar RGB size");
    }
    let mut factors = Vec::with_capacity(n);
    for (slot, &f) in MIXRES_FACTORS.iter().enumerate() {
        let count = n / 4 + usize::from(slot < n % 4);
        factors.extend(std::iter::repeat(f).take(count));
    }
    use rand::seq::SliceRandom;
    factors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let out = images
        .iter()
        .zip(&factors)
        .map(|(img, &f)| {
            if f == 1 {
                img.clone()
            } else {
                let (small, sh, sw) = box_downscale(img, height, width, f as usize);
                bilinear_upscale(&small, sh, sw, height, width)
            }
        })
        .collect();
    Ok((out, factors))
}

/// Per-view magnitude ranges sampled when the config leaves them free.
const MOTION_LENGTH_RANGE: (f64, f64) = (4.0, 10.0);
const DEFOCUS_DEPTH_RANGE: (f64, f64) = (2.2, 3.8);
const DEFOCUS_GAIN_RANGE: (f64, f64) = (1.5, 3.0);

/// Render the toy scene and write a full dataset directory: clean test
/// images, degraded train images, `cameras.json`, a subsampled noisy
/// `points.ply` seed cloud, and `degradation.json`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig) -> Result<(), SynthError> {
    let io_err = |path: &Path| {
        let path = path.to_owned();
        move |source| DataError::Io { path, source }
    };
    std::fs::create_dir_all(dir.join("train")).map_err(io_err(&dir.join("train")))?;
    std::fs::create_dir_all(dir.join("test")).map_err(io_err(&dir.join("test")))?;

    let scene = make_toy_scene_sized::<f64>(cfg.seed, cfg.n_gaussians, cfg.views, cfg.width, cfg.height);
    let bg = BACKGROUND;
    let mut clean = Vec::with_capacity(cfg.views);
    for cam in &scene.train_cameras {
        clean.push(render_at_scale(&scene.cloud, cam, 1, bg)?);
    }

    // Stream 1: per-view degradation magnitudes (stream 0 built the scene).
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (degraded, specs): (Vec<Vec<f64>>, Vec<BlurSpec>) = match cfg.blur {
        BlurKind::None => clean
            .iter()
            .map(|r| (r.color.clone(), BlurSpec::None))
            .unzip(),
        BlurKind::Motion => clean
            .iter()
            .map(|r| {
                let angle = cfg
                    .motion_angle
                    .unwrap_or_else(|| rng.gen_range(0.0..std::f64::consts::PI));
                let length = cfg
                    .motion_length
                    .unwrap_or_else(|| rng.gen_range(MOTION_LENGTH_RANGE.0..MOTION_LENGTH_RANGE.1));
                (
                    degrade_motion(&r.color, cfg.height, cfg.width, angle, length),
                    BlurSpec::Motion { angle, length },
                )
            })
            .unzip(),
        BlurKind::Defocus => {
            let mut pairs = Vec::with_capacity(cfg.views);
            for r in &clean {
                let focus_depth = cfg
                    .defocus_depth
                    .unwrap_or_else(|| rng.gen_range(DEFOCUS_DEPTH_RANGE.0..DEFOCUS_DEPTH_RANGE.1));
                let gain = cfg
                    .defocus_gain
                    .unwrap_or_else(|| rng.gen_range(DEFOCUS_GAIN_RANGE.0..DEFOCUS_GAIN_RANGE.1));
                pairs.push((
                    degrade_defocus(&r.color, cfg.height, cfg.width, &r.depth, focus_depth, gain)?,
                    BlurSpec::Defocus { focus_depth, gain },
                ));
            }
            pairs.into_iter().unzip()
        }
        BlurKind::Mixres => {
            let colors: Vec<Vec<f64>> = clean.iter().map(|r| r.color.clone()).collect();
            let (out, factors) = degrade_mixres(&colors, cfg.height, cfg.width, cfg.seed)?;
            (
                out,
                factors.into_iter().map(|factor| BlurSpec::Mixres { factor }).collect(),
            )
        }
    };

    for (i, img) in degraded.iter().enumerate() {
        save_rgb_png(&dir.join(format!("train/{i:04}.png")), img, cfg.height, cfg.width)?;
    }
    for (i, cam) in scene.test_cameras.iter().enumerate() {
        let r = render_at_scale(&scene.cloud, cam, 1, bg)?;
        save_rgb_png(&dir.join(format!("test/{i:04}.png")), &r.color, cfg.height, cfg.width)?;
    }
    write_dataset_cameras(dir, &scene.train_cameras, &scene.test_cameras)?;

    // Stream 2: seed-cloud jitter. Every 5th center, nudged like noisy SfM.
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    jitter_rng.set_stream(2);
    let noise = Normal::new(0.0, PLY_JITTER_SIGMA).expect("const sigma");
    let mut points = Vec::new();
    for n in (0..scene.cloud.len()).step_by(PLY_KEEP_EVERY) {
        let p = scene.cloud.position(n);
        let c = &scene.cloud.color_logits[n * 3..n * 3 + 3];
        points.push(PlyPoint {
            position: [
                p[0] + noise.sample(&mut jitter_rng),
                p[1] + noise.sample(&mut jitter_rng),
                p[2] + noise.sample(&mut jitter_rng),
            ],
            color: [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])],
        });
    }
    crate::io::write_points(&dir.join("points.ply"), &points)?;

    write_degradation(
        &dir.join("degradation.json"),
        &DegradationManifest {
            seed: cfg.seed,
            per_view: specs,
        },
    )?;
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
