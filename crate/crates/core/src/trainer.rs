//! Joint optimization of the Gaussian cloud and the blur proposal network
//! under a coarse-to-fine schedule.
//!
//! Each stage renders at scale level `s` (resolution divided by 2^(s-1))
//! with a kernel size chosen so the kernel's full-resolution footprint
//! stays roughly constant (5*4 = 20, 9*2 = 18, 17*1 = 17). The run opens
//! with a short scene-only warm-up — the blur model held out entirely —
//! because joint optimization from a sparse seed cloud lets the blur
//! network absorb reconstruction error that the scene should explain.
//! The warm-up is not repeated at later stages: a stage transition is
//! precisely when the observations are sharper than what the scene can
//! render (new resolution, unabsorbed blur), which is the signal the
//! kernels need; pausing the network there hands that signal to the
//! scene instead. For the same reason the mask sparsity term is deferred
//! to the tail of the run (`SPARSITY_PHASE`).
//!
//! Optimizer moments are keyed by tensor name, so they survive both blur
//! head growth (new names append) and densification (per-Gaussian rows are
//! remapped in place). All randomness — epoch shuffles, head init, split
//! sampling — flows from one ChaCha stream in a fixed order, and every
//! reduction is sequential, so two runs of the same binary with the same
//! config produce bit-identical logs; a checkpoint resume replays exactly
//! what the uninterrupted run would have done.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, AdamState, Tape, Tensor, TensorError};
use crate::bpn::{self, BpnError, BpnParams, Conv, Linear, BlurHead, CNN_CHANNELS, CNN_KERNELS, D_POS, D_VIEW, F_OUT, HIDDEN};
use crate::io::Dataset;
use crate::losses::{total_loss, LossError, LossWeights, SSIM_WINDOW};
use crate::rasterizer::{cloud_leaves, rasterize_on_tape, RasterError};
use crate::real::Real;
use crate::scene::{init_from_points, rotation_matrix, GaussianCloud, SceneError};

/// The kernel's footprint in full-resolution pixels, `K * 2^(s-1)`, must
/// stay within this window for every stage so all stages model blur from
/// the same image regions.
pub const KERNEL_FOV_RANGE: (usize, usize) = (17, 20);

/// Fraction of the run completed before the mask sparsity term switches
/// on. Under Adam, any loss term with a consistent unopposed sign drives
/// its parameters at full learning rate regardless of the weight's
/// magnitude, so sparsity applied from the start collapses the mask to
/// sigmoid(-20) within a few hundred iterations -- before the kernels
/// (whose gradients scale with the mask) can learn anything, and past the
/// point where a photometric gradient could pull it back. Deferring
/// sparsity to the tail of the run lets the kernels and mask organize
/// first; the term then prunes the mask only where no photometric
/// gradient defends it.
pub const SPARSITY_PHASE: f64 = 0.75;

/// One coarse-to-fine stage: render at scale level `scale` with a
/// `kernel x kernel` blur head for `iters` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub scale: u32,
    pub kernel: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    /// Coarse to fine: scales strictly decreasing, kernels strictly
    /// increasing (and odd).
    pub stages: Vec<Stage>,
    /// Scene-only iterations at the start of the run, before the blur
    /// network joins. Covers the sparse-cloud start; later stages enter
    /// with the network already live so the kernels can latch onto the
    /// blur before the scene absorbs it at the new resolution.
    pub warmup_iters: usize,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        ScaleSchedule {
            stages: vec![
                Stage { scale: 3, kernel: 5, iters: 10_000 },
                Stage { scale: 2, kernel: 9, iters: 10_000 },
                Stage { scale: 1, kernel: 17, iters: 20_000 },
            ],
            warmup_iters: 500,
        }
    }
}

impl ScaleSchedule {
    pub fn total_iters(&self) -> usize {
        self.stages.iter().map(|s| s.iters).sum()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidSchedule { msg });
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.scale == 0 {
                return bad(format!("stage {i}: scale levels are 1-based, got 0"));
            }
            if st.kernel % 2 == 0 {
                return bad(format!("stage {i}: kernel size {} is even", st.kernel));
            }
            if i > 0 {
                let prev = &self.stages[i - 1];
                if st.scale >= prev.scale {
                    return bad(format!(
                        "stage {i}: scale {} does not decrease from {}",
                        st.scale, prev.scale
                    ));
                }
                if st.kernel <= prev.kernel {
                    return bad(format!(
                        "stage {i}: kernel {} does not increase from {}",
                        st.kernel, prev.kernel
                    ));
                }
            }
            let fov = st.kernel << (st.scale - 1);
            if fov < KERNEL_FOV_RANGE.0 || fov > KERNEL_FOV_RANGE.1 {
                return bad(format!(
                    "stage {i}: kernel footprint {} * 2^{} = {fov} full-res pixels is \
                     outside [{}, {}]",
                    st.kernel,
                    st.scale - 1,
                    KERNEL_FOV_RANGE.0,
                    KERNEL_FOV_RANGE.1,
                ));
            }
        }
        Ok(())
    }
}

/// Adaptive density control thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Mean screen-space (NDC) positional gradient above which a Gaussian
    /// is cloned or split.
    pub grad_threshold: f64,
    /// World-unit scale separating "clone as is" (small) from "split in
    /// two with scales divided by 1.6" (large).
    pub split_scale_threshold: f64,
    /// Gaussians with alpha below this are removed.
    pub opacity_prune: f64,
    /// Densify every this many iterations within a stage.
    pub interval: usize,
    /// Densification stops in the final fraction of each stage so the
    /// survivors settle before the next resolution jump.
    pub stop_fraction: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            split_scale_threshold: 0.03,
            opacity_prune: 0.005,
            interval: 100,
            stop_fraction: 0.2,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.grad_threshold > 0.0
            && self.split_scale_threshold > 0.0
            && self.opacity_prune > 0.0
            && self.interval > 0
            && (0.0..=1.0).contains(&self.stop_fraction);
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig {
                msg: format!("densify thresholds must be positive: {self:?}"),
            })
        }
    }
}

/// Per-group Adam learning rates. Positions decay exponentially from
/// `position_start` to `position_end` over the whole run; the rest are
/// constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position_start: f64,
    pub position_end: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub bpn: f64,
    /// Kernel heads only. Under Adam each softmax logit moves at roughly
    /// the learning rate per iteration, and turning a delta into a blur
    /// streak takes a coordinated shift of several units across many
    /// logits; at the trunk rate that outlasts a stage, and the scene
    /// absorbs the blur first. The heads are the last linear layer, so a
    /// hotter rate there does not destabilize the shared features.
    pub bpn_head: f64,
    /// Mask head only, deliberately cold. Adam turns any sign-consistent
    /// gradient into full-rate motion, and the mask always has one: even a
    /// near-delta kernel leaks a faint haze, which reads as "blur hurts"
    /// until the kernels organize. At the trunk rate the mask is dead in
    /// ~100 iterations — before the kernels can earn their photometric
    /// defense. Cold, the mask outlives kernel formation, then rises where
    /// blur explains the data and falls everywhere else.
    pub bpn_mask: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_start: 1.6e-4,
            position_end: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-2,
            bpn: 1e-3,
            bpn_head: 1e-2,
            bpn_mask: 1e-4,
        }
    }
}

impl LearningRates {
    fn position_at(&self, iter: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.position_start;
        }
        let t = iter as f64 / total as f64;
        self.position_start * (self.position_end / self.position_start).powf(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScaleSchedule,
    pub weights: LossWeights,
    pub rates: LearningRates,
    pub densify: DensifyConfig,
    pub seed: u64,
    pub background: [f64; 3],
    /// `false` trains the plain splatting baseline: no blur network at all.
    pub use_bpn: bool,
    /// Feed the blur network detached copies of the rendered RGBD, so its
    /// feature path cannot push gradients into the scene.
    pub detach_bpn_inputs: bool,
    /// Adaptive density control on/off.
    pub densify_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: ScaleSchedule::default(),
            weights: LossWeights::default(),
            rates: LearningRates::default(),
            densify: DensifyConfig::default(),
            seed: 0,
            background: crate::blur_synth::BACKGROUND,
            use_bpn: true,
            detach_bpn_inputs: false,
            densify_enabled: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("schedule invalid: {msg}")]
    InvalidSchedule { msg: String },
    #[error("config invalid: {msg}")]
    InvalidConfig { msg: String },
    #[error("dataset needs at least 2 training views, got {got}")]
    TooFewViews { got: usize },
    #[error("initialization: {0}")]
    Init(#[from] SceneError),
    #[error("bpn initialization: {0}")]
    BpnInit(#[from] BpnError),
    #[error("iteration {iter} (view {view}): {source}")]
    Iteration {
        iter: usize,
        view: usize,
        source: StepError,
    },
}

/// Anything a single training step can raise, carried up with context.
#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Bpn(#[from] BpnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named Adam moments for every parameter tensor, created lazily on first
/// step so blur heads grown mid-run join naturally.
#[derive(Debug, Clone, Default)]
pub struct OptState<S> {
    moments: BTreeMap<String, AdamState<S>>,
}

/// `(name, per-row scalars)` of each Gaussian parameter group, in step
/// order.
const CLOUD_TENSORS: [(&str, usize); 5] = [
    ("positions", 3),
    ("log_scales", 3),
    ("rotations", 4),
    ("opacity_logits", 1),
    ("color_logits", 3),
];

impl<S: Real> OptState<S> {
    pub fn new() -> Self {
        OptState { moments: BTreeMap::new() }
    }

    pub fn get_or_create(&mut self, name: &str, len: usize) -> &mut AdamState<S> {
        self.moments
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(len))
    }

    pub fn get(&self, name: &str) -> Option<&AdamState<S>> {
        self.moments.get(name)
    }

    /// Remap the per-Gaussian moment rows after densification: surviving
    /// rows keep their moments, appended rows start at zero.
    fn remap_cloud_rows(&mut self, keep: &[usize], extra: usize) {
        for (name, stride) in CLOUD_TENSORS {
            if let Some(state) = self.moments.get_mut(name) {
                state.remap_rows(keep, extra, stride);
            }
        }
    }
}

/// Screen-space gradient statistics accumulated between densifications.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccum {
    /// Per Gaussian, sum over iterations of the NDC positional gradient
    /// norm (zero for iterations where it was culled).
    pub norm_sum: Vec<f64>,
    /// Number of iterations the Gaussian survived projection.
    pub count: Vec<u32>,
}

impl GradAccum {
    pub fn new(n: usize) -> Self {
        GradAccum {
            norm_sum: vec![0.0; n],
            count: vec![0; n],
        }
    }
}

/// Everything that evolves during training; a checkpoint is exactly this.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub cloud: GaussianCloud<S>,
    /// `None` for the no-BPN baseline.
    pub bpn: Option<BpnParams<S>>,
    pub opt: OptState<S>,
    /// Completed iterations (global, 0-based next iteration index).
    pub iter: usize,
    pub rng: ChaCha8Rng,
    pub view_order: Vec<usize>,
    pub epoch_pos: usize,
    pub grad_accum: GradAccum,
}

/// One loss-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub scale: u32,
    pub l1: f64,
    pub dssim: f64,
    pub mask: f64,
    pub total: f64,
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Area-average downsampling of a planar `[3, H, W]` image by a power-of-two
/// factor. Output dims are ceil(h/f) x ceil(w/f); partial edge blocks
/// average their in-bounds pixels, matching how camera intrinsics scale.
pub fn downsample<S: Real>(
    image: &[S],
    height: usize,
    width: usize,
    factor: usize,
) -> (Vec<S>, usize, usize) {
    assert!(factor.is_power_of_two(), "downsample factor {factor} must be a power of two");
    assert_eq!(image.len(), 3 * height * width, "planar RGB size");
    if factor == 1 {
        return (image.to_vec(), height, width);
    }
    let (oh, ow) = (height.div_ceil(factor), width.div_ceil(factor));
    let (hw, ohw) = (height * width, oh * ow);
    let mut out = vec![S::zero(); 3 * ohw];
    for c in 0..3 {
        for bi in 0..oh {
            let rows = (bi * factor)..((bi + 1) * factor).min(height);
            for bj in 0..ow {
                let cols = (bj * factor)..((bj + 1) * factor).min(width);
                let mut acc = 0.0f64;
                for i in rows.clone() {
                    for j in cols.clone() {
                        acc += Real::to_f64(image[c * hw + i * width + j]);
                    }
                }
                out[c * ohw + bi * ow + bj] =
                    S::from_f64(acc / (rows.len() * cols.len()) as f64);
            }
        }
    }
    (out, oh, ow)
}

fn validate(dataset_views: usize, width: usize, height: usize, config: &TrainConfig) -> Result<(), TrainError> {
    config.schedule.validate()?;
    config.densify.validate()?;
    config.weights.validate().map_err(|e| TrainError::InvalidConfig { msg: e.to_string() })?;
    if dataset_views < 2 {
        return Err(TrainError::TooFewViews { got: dataset_views });
    }
    for st in &config.schedule.stages {
        let f = 1usize << (st.scale - 1);
        let (h, w) = (height.div_ceil(f), width.div_ceil(f));
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            return Err(TrainError::InvalidConfig {
                msg: format!(
                    "stage at scale {} renders {w}x{h}, below the {SSIM_WINDOW}px SSIM minimum",
                    st.scale
                ),
            });
        }
    }
    Ok(())
}

/// Fresh training state: cloud seeded from the dataset's point cloud, a
/// blur network with one head for the coarsest stage (unless disabled), and
/// the first epoch order shuffled.
pub fn init_state<S: Real>(
    dataset: &Dataset<S>,
    config: &TrainConfig,
) -> Result<TrainState<S>, TrainError> {
    validate(dataset.train.len(), dataset.width, dataset.height, config)?;
    let points: Vec<[f64; 3]> = dataset.points.iter().map(|p| p.position).collect();
    let colors: Vec<[f64; 3]> = dataset.points.iter().map(|p| p.color).collect();
    let cloud = init_from_points(&points, &colors)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bpn = if config.use_bpn {
        let first = &config.schedule.stages[0];
        Some(BpnParams::init(
            dataset.train.len(),
            first.scale,
            first.kernel,
            &mut rng,
        )?)
    } else {
        None
    };
    let mut view_order: Vec<usize> = (0..dataset.train.len()).collect();
    view_order.shuffle(&mut rng);
    let n = cloud.len();
    Ok(TrainState {
        cloud,
        bpn,
        opt: OptState::new(),
        iter: 0,
        rng,
        view_order,
        epoch_pos: 0,
        grad_accum: GradAccum::new(n),
    })
}

impl<S: Real> TrainState<S> {
    fn next_view(&mut self) -> usize {
        if self.epoch_pos >= self.view_order.len() {
            self.view_order.shuffle(&mut self.rng);
            self.epoch_pos = 0;
        }
        let v = self.view_order[self.epoch_pos];
        self.epoch_pos += 1;
        v
    }
}

/// Entering a stage grows its blur head if it does not exist yet. Cloud,
/// existing heads, and optimizer moments are untouched, so everything
/// already learned carries across the resolution jump.
fn enter_stage<S: Real>(state: &mut TrainState<S>, stage: &Stage) -> Result<(), TrainError> {
    if let Some(bpn) = &mut state.bpn {
        if bpn.head_for(stage.scale).is_none() {
            bpn.grow_head(stage.scale, stage.kernel, &mut state.rng)?;
        }
    }
    Ok(())
}

struct StepOutcome {
    row: LossRow,
}

#[allow(clippy::too_many_arguments)]
fn step<S: Real>(
    state: &mut TrainState<S>,
    obs: &[S],
    view: usize,
    cam: &crate::scene::Camera,
    config: &TrainConfig,
    stage: &Stage,
    bpn_active: bool,
    total_iters: usize,
) -> Result<StepOutcome, StepError> {
    let iter = state.iter;
    let mut tape = Tape::<S>::new();
    let cvars = cloud_leaves(&mut tape, &state.cloud);
    let render = rasterize_on_tape(&mut tape, &cvars, cam, config.background)?;
    let (h, w) = (cam.height, cam.width);

    let (c_out, mask_var, bvars) = if bpn_active {
        let bpn_params = state.bpn.as_ref().expect("bpn_active implies params");
        let bvars = bpn::bpn_leaves(&mut tape, bpn_params);
        let (feat_color, feat_depth) = if config.detach_bpn_inputs {
            (tape.detach(render.color), tape.detach(render.depth))
        } else {
            (render.color, render.depth)
        };
        let field = bpn::propose(&mut tape, &bvars, feat_color, feat_depth, view, stage.scale)?;
        let blurred = bpn::apply_blur(&mut tape, render.color, &field)?;
        let out = bpn::blend(&mut tape, render.color, blurred, field.mask)?;
        (out, field.mask, Some(bvars))
    } else {
        // Baseline / warm-up: the observation is compared to the clean
        // render; a constant zero stands in for the absent mask.
        let zero = tape.constant(Tensor::scalar(S::zero()));
        (render.color, zero, None)
    };

    let obs_var = tape.constant(Tensor::new(vec![3, h, w], obs.to_vec()));
    // Sparsity joins only in the tail of the run; see SPARSITY_PHASE.
    let mut weights = config.weights;
    if (iter as f64) < SPARSITY_PHASE * total_iters as f64 {
        weights.mask = 0.0;
    }
    let terms = total_loss(&mut tape, c_out, obs_var, mask_var, &weights)?;
    tape.backward(terms.total)?;

    // Densification statistics: per-Gaussian NDC gradient norms were
    // accumulated into the shared stats cell during backward.
    {
        let stats = render.stats.borrow();
        for n in 0..state.cloud.len() {
            if stats.seen[n] {
                state.grad_accum.norm_sum[n] += stats.grad_norm[n];
                state.grad_accum.count[n] += 1;
            }
        }
    }

    // Parameter updates: cloud groups first, then the blur network, in a
    // fixed order. Tensors whose gradient did not flow still step (their
    // moments keep decaying), matching common Adam behavior.
    let beta1 = S::from_f64(0.9);
    let beta2 = S::from_f64(0.999);
    let eps = S::from_f64(1e-8);
    let step_tensor = |name: &str,
                           opt: &mut OptState<S>,
                           param: &mut [S],
                           grad: Option<&[S]>,
                           lr: f64| {
        let zeros;
        let g = match grad {
            Some(g) => g,
            None => {
                zeros = vec![S::zero(); param.len()];
                &zeros
            }
        };
        let st = opt.get_or_create(name, param.len());
        adam_step(param, g, st, S::from_f64(lr), beta1, beta2, eps);
    };

    let lr_pos = config.rates.position_at(iter, total_iters);
    step_tensor("positions", &mut state.opt, &mut state.cloud.positions, tape.grad(cvars.positions), lr_pos);
    step_tensor("log_scales", &mut state.opt, &mut state.cloud.log_scales, tape.grad(cvars.log_scales), config.rates.log_scale);
    step_tensor("rotations", &mut state.opt, &mut state.cloud.rotations, tape.grad(cvars.rotations), config.rates.rotation);
    step_tensor("opacity_logits", &mut state.opt, &mut state.cloud.opacity_logits, tape.grad(cvars.opacity_logits), config.rates.opacity);
    step_tensor("color_logits", &mut state.opt, &mut state.cloud.color_logits, tape.grad(cvars.color_logits), config.rates.color);
    state.cloud.normalize_rotations();

    if let Some(bvars) = &bvars {
        let bpn_params = state.bpn.as_mut().expect("bpn vars imply params");
        let handles = bvars.all();
        for ((name, tensor), var) in bpn_params.named_tensors_mut().into_iter().zip(handles) {
            let lr = if name.starts_with("head_") {
                config.rates.bpn_head
            } else if name.starts_with("mask.") {
                config.rates.bpn_mask
            } else {
                config.rates.bpn
            };
            step_tensor(&name, &mut state.opt, tensor, tape.grad(var), lr);
        }
    }

    let row = LossRow {
        iter,
        scale: stage.scale,
        l1: Real::to_f64(tape.scalar_value(terms.l1)),
        dssim: Real::to_f64(tape.scalar_value(terms.dssim)),
        mask: Real::to_f64(tape.scalar_value(terms.mask)),
        total: Real::to_f64(tape.scalar_value(terms.total)),
    };
    Ok(StepOutcome { row })
}

/// Densification outcome counts, mostly for logs and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Adaptive density control: Gaussians whose mean screen-space gradient
/// exceeds the threshold are cloned (small) or split in two (large, scales
/// divided by 1.6, children sampled from the parent's own distribution);
/// Gaussians with alpha below the prune floor are removed. Optimizer
/// moments follow: survivors keep theirs, new rows start at zero.
pub fn densify_and_prune<S: Real>(
    cloud: &mut GaussianCloud<S>,
    accum: &GradAccum,
    cfg: &DensifyConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut OptState<S>,
) -> DensifyOutcome {
    let n = cloud.len();
    assert_eq!(accum.norm_sum.len(), n, "gradient stats out of sync with cloud");
    let mut keep = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    let mut pruned = 0usize;
    for i in 0..n {
        let alpha = sigmoid64(Real::to_f64(cloud.opacity_logits[i]));
        if alpha < cfg.opacity_prune {
            pruned += 1;
            continue;
        }
        let mean_grad = if accum.count[i] > 0 {
            accum.norm_sum[i] / accum.count[i] as f64
        } else {
            0.0
        };
        if mean_grad > cfg.grad_threshold {
            let ls = cloud.log_scale(i);
            let max_scale = ls
                .iter()
                .map(|&v| Real::to_f64(v).exp())
                .fold(f64::MIN, f64::max);
            if max_scale > cfg.split_scale_threshold {
                splits.push(i); // replaced by two children below
                continue;
            }
            clones.push(i);
        }
        keep.push(i);
    }

    let mut next = GaussianCloud::with_capacity(keep.len() + clones.len() + 2 * splits.len());
    let push_row = |cloud: &GaussianCloud<S>, i: usize, next: &mut GaussianCloud<S>| {
        next.positions.extend_from_slice(&cloud.positions[i * 3..i * 3 + 3]);
        next.log_scales.extend_from_slice(&cloud.log_scales[i * 3..i * 3 + 3]);
        next.rotations.extend_from_slice(&cloud.rotations[i * 4..i * 4 + 4]);
        next.opacity_logits.push(cloud.opacity_logits[i]);
        next.color_logits.extend_from_slice(&cloud.color_logits[i * 3..i * 3 + 3]);
    };
    for &i in &keep {
        push_row(cloud, i, &mut next);
    }
    for &i in &clones {
        push_row(cloud, i, &mut next);
    }
    let log_split_shrink = S::from_f64(1.6f64.ln());
    for &i in &splits {
        let p = cloud.position(i);
        let ls = cloud.log_scale(i);
        let r = rotation_matrix(cloud.rotation(i));
        for _ in 0..2 {
            // Child center drawn from the parent's own density: offset
            // R (s ∘ xi) with xi standard normal per axis.
            let xi: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            for row in 0..3 {
                let mut off = 0.0;
                for k in 0..3 {
                    off += Real::to_f64(r[row][k]) * Real::to_f64(ls[k]).exp() * xi[k];
                }
                next.positions.push(p[row] + S::from_f64(off));
            }
            for k in 0..3 {
                next.log_scales.push(ls[k] - log_split_shrink);
            }
            next.rotations.extend_from_slice(&cloud.rotations[i * 4..i * 4 + 4]);
            next.opacity_logits.push(cloud.opacity_logits[i]);
            next.color_logits.extend_from_slice(&cloud.color_logits[i * 3..i * 3 + 3]);
        }
    }

    opt.remap_cloud_rows(&keep, clones.len() + 2 * splits.len());
    *cloud = next;
    if cloud.is_empty() {
        eprintln!("warning: density control pruned every Gaussian; the cloud is now empty");
    }
    DensifyOutcome {
        cloned: clones.len(),
        split: splits.len(),
        pruned,
    }
}

/// Run training from `state.iter` up to `until` (capped at the schedule
/// total; `None` runs to the end), invoking `on_iter` after every
/// iteration. Resumable at any boundary: a run chopped into arbitrary
/// `train` calls produces the same states and log as one uninterrupted
/// call.
pub fn train<S: Real>(
    state: &mut TrainState<S>,
    dataset: &Dataset<S>,
    config: &TrainConfig,
    until: Option<usize>,
    mut on_iter: impl FnMut(&LossRow),
) -> Result<(), TrainError> {
    validate(dataset.train.len(), dataset.width, dataset.height, config)?;
    let total = config.schedule.total_iters();
    let until = until.unwrap_or(total).min(total);

    let mut stage_start = 0usize;
    for stage in &config.schedule.stages {
        let stage_end = stage_start + stage.iters;
        if state.iter >= stage_end || state.iter >= until {
            stage_start = stage_end;
            continue;
        }
        enter_stage(state, stage)?;

        // Per-stage observation pyramid level, and cameras to match.
        let factor = 1usize << (stage.scale - 1);
        let obs: Vec<Vec<S>> = dataset
            .train
            .iter()
            .map(|v| downsample(&v.image, dataset.height, dataset.width, factor).0)
            .collect();
        let cams: Vec<_> = dataset
            .train
            .iter()
            .map(|v| v.camera.at_scale_level(stage.scale))
            .collect();

        let densify_limit =
            ((1.0 - config.densify.stop_fraction) * stage.iters as f64).floor() as usize;
        while state.iter < stage_end && state.iter < until {
            let stage_iter = state.iter - stage_start;
            let bpn_active = config.use_bpn && state.iter >= config.schedule.warmup_iters;
            let view = state.next_view();
            let outcome = step(
                state,
                &obs[view],
                view,
                &cams[view],
                config,
                stage,
                bpn_active,
                total,
            )
            .map_err(|source| TrainError::Iteration {
                iter: state.iter,
                view,
                source,
            })?;
            state.iter += 1;
            on_iter(&outcome.row);

            let done = stage_iter + 1;
            if config.densify_enabled && done % config.densify.interval == 0 && done <= densify_limit
            {
                densify_and_prune(
                    &mut state.cloud,
                    &state.grad_accum,
                    &config.densify,
                    &mut state.rng,
                    &mut state.opt,
                );
                state.grad_accum = GradAccum::new(state.cloud.len());
            }
        }
        stage_start = stage_end;
    }
    Ok(())
}

// --- Checkpointing ---------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BAGS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {got}")]
    BadVersion { path: PathBuf, got: u32 },
    #[error("{path}: corrupt checkpoint: {msg}")]
    Corrupt { path: PathBuf, msg: String },
}

struct CkptWriter<W: Write> {
    w: W,
}

impl<W: Write> CkptWriter<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> std::io::Result<()> {
        self.w.write_all(&v.to_le_bytes())
    }
    fn f64_slice<S: Real>(&mut self, data: &[S]) -> std::io::Result<()> {
        self.u64(data.len() as u64)?;
        for v in data {
            self.w.write_all(&Real::to_f64(*v).to_le_bytes())?;
        }
        Ok(())
    }
    fn raw_f64s(&mut self, data: &[f64]) -> std::io::Result<()> {
        self.u64(data.len() as u64)?;
        for v in data {
            self.w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
    fn string(&mut self, s: &str) -> std::io::Result<()> {
        self.u64(s.len() as u64)?;
        self.w.write_all(s.as_bytes())
    }
    fn linear<S: Real>(&mut self, l: &Linear<S>) -> std::io::Result<()> {
        self.u64(l.in_dim as u64)?;
        self.u64(l.out_dim as u64)?;
        self.f64_slice(&l.weight)?;
        self.f64_slice(&l.bias)
    }
}

struct CkptReader<R: Read> {
    r: R,
    path: PathBuf,
}

impl<R: Read> CkptReader<R> {
    fn corrupt(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.clone(),
            msg: msg.into(),
        }
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| self.corrupt(format!("unexpected end of file reading {n} bytes")))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.bytes(16)?.try_into().unwrap()))
    }
    fn usize_checked(&mut self, what: &str, max: usize) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        if v > max as u64 {
            return Err(self.corrupt(format!("{what} = {v} exceeds sane limit {max}")));
        }
        Ok(v as usize)
    }
    fn f64_vec<S: Real>(&mut self, what: &str, want_len: Option<usize>) -> Result<Vec<S>, CheckpointError> {
        let len = self.usize_checked(what, 1 << 32)?;
        if let Some(want) = want_len {
            if len != want {
                return Err(self.corrupt(format!("{what}: expected {want} values, found {len}")));
            }
        }
        let raw = self.bytes(len * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| S::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
    fn raw_f64s(&mut self, what: &str, want_len: usize) -> Result<Vec<f64>, CheckpointError> {
        Ok(self
            .f64_vec::<f64>(what, Some(want_len))?)
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.usize_checked("string length", 4096)?;
        String::from_utf8(self.bytes(len)?).map_err(|_| self.corrupt("invalid utf-8 in name"))
    }
    fn linear<S: Real>(&mut self, what: &str) -> Result<Linear<S>, CheckpointError> {
        let in_dim = self.usize_checked("linear in_dim", 1 << 20)?;
        let out_dim = self.usize_checked("linear out_dim", 1 << 20)?;
        let weight = self.f64_vec(what, Some(in_dim * out_dim))?;
        let bias = self.f64_vec(what, Some(out_dim))?;
        Ok(Linear { in_dim, out_dim, weight, bias })
    }
}

/// Serialize the full training state. Everything is little-endian; floats
/// are stored as f64 regardless of the training precision, which is
/// lossless for f32 states.
pub fn write_checkpoint<S: Real>(path: &Path, state: &TrainState<S>) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = CkptWriter { w: BufWriter::new(file) };
    (|| -> std::io::Result<()> {
        w.w.write_all(&CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;

        // Cloud.
        let n = state.cloud.len();
        w.u64(n as u64)?;
        w.f64_slice(&state.cloud.positions)?;
        w.f64_slice(&state.cloud.log_scales)?;
        w.f64_slice(&state.cloud.rotations)?;
        w.f64_slice(&state.cloud.opacity_logits)?;
        w.f64_slice(&state.cloud.color_logits)?;

        // BPN (optional).
        match &state.bpn {
            None => w.u64(0)?,
            Some(bpn) => {
                w.u64(1)?;
                w.u64(bpn.num_views as u64)?;
                for c in &bpn.convs {
                    w.u64(c.in_ch as u64)?;
                    w.u64(c.out_ch as u64)?;
                    w.u64(c.k as u64)?;
                    w.f64_slice(&c.weight)?;
                    w.f64_slice(&c.bias)?;
                }
                w.f64_slice(&bpn.view_table)?;
                w.linear(&bpn.mlp1)?;
                w.linear(&bpn.mlp2)?;
                w.linear(&bpn.mask_head)?;
                w.u64(bpn.heads.len() as u64)?;
                for h in &bpn.heads {
                    w.u32(h.scale)?;
                    w.u64(h.k as u64)?;
                    w.linear(&h.linear)?;
                }
            }
        }

        // Optimizer moments, sorted by name (BTreeMap order).
        w.u64(state.opt.moments.len() as u64)?;
        for (name, adam) in &state.opt.moments {
            w.string(name)?;
            let (m, v, t) = adam.raw();
            w.f64_slice(m)?;
            w.f64_slice(v)?;
            w.u64(t)?;
        }

        // Schedule position and epoch state.
        w.u64(state.iter as u64)?;
        w.u64(state.view_order.len() as u64)?;
        for &v in &state.view_order {
            w.u64(v as u64)?;
        }
        w.u64(state.epoch_pos as u64)?;

        // RNG: seed, word position, stream.
        w.w.write_all(&state.rng.get_seed())?;
        w.u128(state.rng.get_word_pos())?;
        w.u64(state.rng.get_stream())?;

        // Densification statistics.
        w.raw_f64s(&state.grad_accum.norm_sum)?;
        w.u64(state.grad_accum.count.len() as u64)?;
        for &c in &state.grad_accum.count {
            w.u32(c)?;
        }
        w.w.flush()
    })()
    .map_err(io_err)
}

pub fn read_checkpoint<S: Real>(path: &Path) -> Result<TrainState<S>, CheckpointError> {
    let file = std::fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut r = CkptReader {
        r: BufReader::new(file),
        path: path.to_owned(),
    };
    let magic = r.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { path: r.path });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion { path: r.path, got: version });
    }

    let n = r.usize_checked("gaussian count", 1 << 24)?;
    let cloud = GaussianCloud {
        positions: r.f64_vec("positions", Some(3 * n))?,
        log_scales: r.f64_vec("log_scales", Some(3 * n))?,
        rotations: r.f64_vec("rotations", Some(4 * n))?,
        opacity_logits: r.f64_vec("opacity_logits", Some(n))?,
        color_logits: r.f64_vec("color_logits", Some(3 * n))?,
    };

    let bpn = match r.u64()? {
        0 => None,
        1 => {
            let num_views = r.usize_checked("num_views", 1 << 20)?;
            let mut convs = Vec::with_capacity(3);
            for i in 0..3 {
                let in_ch = r.usize_checked("conv in_ch", 1 << 16)?;
                let out_ch = r.usize_checked("conv out_ch", 1 << 16)?;
                let k = r.usize_checked("conv k", 64)?;
                if (in_ch, out_ch, k) != (CNN_CHANNELS[i], CNN_CHANNELS[i + 1], CNN_KERNELS[i]) {
                    return Err(r.corrupt(format!(
                        "conv{} dims ({in_ch},{out_ch},{k}) do not match the architecture",
                        i + 1
                    )));
                }
                let weight = r.f64_vec("conv weight", Some(out_ch * in_ch * k * k))?;
                let bias = r.f64_vec("conv bias", Some(out_ch))?;
                convs.push(Conv { in_ch, out_ch, k, weight, bias });
            }
            let view_table = r.f64_vec("view_table", Some(num_views * D_VIEW))?;
            let mlp1: Linear<S> = r.linear("mlp1")?;
            let mlp2: Linear<S> = r.linear("mlp2")?;
            let mask_head: Linear<S> = r.linear("mask_head")?;
            let mmf = D_VIEW + D_POS + F_OUT;
            if (mlp1.in_dim, mlp1.out_dim) != (mmf, HIDDEN)
                || (mlp2.in_dim, mlp2.out_dim) != (HIDDEN, HIDDEN)
                || (mask_head.in_dim, mask_head.out_dim) != (HIDDEN, 1)
            {
                return Err(r.corrupt("mlp/mask dims do not match the architecture"));
            }
            let head_count = r.usize_checked("head count", 64)?;
            let mut heads = Vec::with_capacity(head_count);
            for _ in 0..head_count {
                let scale = r.u32()?;
                let k = r.usize_checked("head k", 255)?;
                let linear: Linear<S> = r.linear("head")?;
                if (linear.in_dim, linear.out_dim) != (HIDDEN, k * k) {
                    return Err(r.corrupt(format!("head for scale {scale} has wrong dims")));
                }
                heads.push(BlurHead { scale, k, linear });
            }
            let convs: [Conv<S>; 3] = convs.try_into().expect("exactly three convs read");
            Some(BpnParams {
                convs,
                num_views,
                view_table,
                mlp1,
                mlp2,
                heads,
                mask_head,
            })
        }
        other => return Err(r.corrupt(format!("bpn flag must be 0 or 1, got {other}"))),
    };

    let mut opt = OptState::new();
    let moment_count = r.usize_checked("moment count", 1 << 16)?;
    for _ in 0..moment_count {
        let name = r.string()?;
        let m: Vec<S> = r.f64_vec("adam m", None)?;
        let v: Vec<S> = r.f64_vec("adam v", Some(m.len()))?;
        let t = r.u64()?;
        opt.moments.insert(name, AdamState::from_raw(m, v, t));
    }

    let iter = r.usize_checked("iteration", 1 << 40)?;
    let order_len = r.usize_checked("view order length", 1 << 24)?;
    let mut view_order = Vec::with_capacity(order_len);
    for _ in 0..order_len {
        view_order.push(r.usize_checked("view index", 1 << 24)?);
    }
    let epoch_pos = r.usize_checked("epoch position", 1 << 24)?;

    let seed: [u8; 32] = r
        .bytes(32)?
        .try_into()
        .expect("fixed-length seed read");
    let word_pos = r.u128()?;
    let stream = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let norm_sum = r.raw_f64s("grad accum norms", n)?;
    let count_len = r.usize_checked("grad accum count length", 1 << 24)?;
    if count_len != n {
        return Err(r.corrupt(format!("grad accum count length {count_len} != {n} gaussians")));
    }
    let mut count = Vec::with_capacity(count_len);
    for _ in 0..count_len {
        count.push(r.u32()?);
    }

    Ok(TrainState {
        cloud,
        bpn,
        opt,
        iter,
        rng,
        view_order,
        epoch_pos,
        grad_accum: GradAccum { norm_sum, count },
    })
}
