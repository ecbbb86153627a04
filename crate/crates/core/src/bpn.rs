//! Blur proposal network: predicts a per-pixel blur kernel and a residual
//! mask from the rendered image, its depth, the view identity, and pixel
//! position.
//!
//! Pipeline per view and scale:
//! 1. `extract_features`: a 3-layer CNN over RGB + normalized depth;
//! 2. multi-modal features: per pixel, concatenate the view embedding, a
//!    sinusoidal positional encoding, and the CNN features;
//! 3. a two-layer MLP produces an intermediate code, from which a per-scale
//!    linear head emits K^2 kernel logits (softmax) and a shared head emits
//!    a mask logit (sigmoid);
//! 4. `apply_blur` convolves the image with the per-pixel kernels
//!    (replicate padding), and `blend` mixes clean and blurred pixels
//!    through the mask.
//!
//! Coarse-to-fine training adds heads over time (`grow_head`); a new head
//! starts as a near-delta kernel (tiny random weights, +9 center logit),
//! so the blur branch is a photometric no-op at activation and nothing
//! pushes the mask down while the kernels are uninformed. The kernels
//! leave the delta only where blur lowers the loss, and the mask then has
//! a live photometric defense before the (deferred) sparsity term starts
//! pruning it. Fixed tensors keep their positions in the parameter
//! enumeration; heads append at the end, which keeps optimizer-state
//! bookkeeping stable across growth.

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::real::Real;
use rand::Rng;
use thiserror::Error;

pub const D_VIEW: usize = 32;
pub const POS_OCTAVES: usize = 6;
pub const D_POS: usize = 4 * POS_OCTAVES;
pub const F_OUT: usize = 16;
pub const HIDDEN: usize = 64;
pub const CNN_CHANNELS: [usize; 4] = [4, 64, 64, F_OUT];
pub const CNN_KERNELS: [usize; 3] = [5, 5, 3];
/// Spread of a fresh blur head's random weights.
pub const HEAD_INIT_SPREAD: f64 = 1e-4;
/// Center-logit bias of a fresh blur head. At e^9 over ~uniform
/// neighbors the center weight exceeds 0.9 even at K = 17 (0.966), so a
/// fresh head is a near-delta: blurring with it is a no-op. That makes
/// the blur branch photometrically *neutral* when it first activates --
/// nothing pushes the mask toward zero while the kernels are still
/// uninformed -- and the kernels then drift off the delta only where a
/// blur hypothesis genuinely lowers the photometric loss.
pub const HEAD_CENTER_BIAS: f64 = 9.0;
/// Initial mask-head bias. The mask opens high (sigmoid(3) ~ 0.95) so the
/// reconstruction is trained through the blur branch from the moment the
/// network activates. With near-delta kernels that branch starts as a
/// no-op, but it means the scene can only fit a blurry observation by
/// sharpening through whatever kernel the head is forming -- the scene
/// cannot quietly absorb the blur while the mask is down. The deferred
/// sparsity term later prunes the mask wherever the kernels stayed at the
/// delta (pushing it down there is photometrically free).
pub const MASK_INIT_BIAS: f64 = 3.0;
/// Robust depth-normalization percentiles.
pub const DEPTH_Q_LOW: f64 = 0.02;
pub const DEPTH_Q_HIGH: f64 = 0.98;

#[derive(Debug, Error)]
pub enum BpnError {
    #[error("bpn: view index {view} out of range for {num_views} training views")]
    UnknownView { view: usize, num_views: usize },
    #[error("bpn: no blur head for scale {scale}")]
    MissingHead { scale: u32 },
    #[error("bpn: blur head for scale {scale} already exists")]
    DuplicateHead { scale: u32 },
    #[error("bpn: kernel size {k} must be odd")]
    EvenKernel { k: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dense layer; weight is `[in, out]` so rows of activations multiply it
/// directly.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Real> Linear<S> {
    fn kaiming<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim)
                .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
                .collect(),
            bias: vec![S::zero(); out_dim],
        }
    }

    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![S::zero(); in_dim * out_dim],
            bias: vec![S::zero(); out_dim],
        }
    }
}

/// Same-padded convolution layer; weight is `[out_ch, in_ch, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv<S> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Real> Conv<S> {
    fn kaiming<R: Rng>(in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_ch * k * k) as f64).sqrt();
        Conv {
            in_ch,
            out_ch,
            k,
            weight: (0..out_ch * in_ch * k * k)
                .map(|_| S::from_f64(rng.gen_range(-limit..limit)))
                .collect(),
            bias: vec![S::zero(); out_ch],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlurHead<S> {
    pub scale: u32,
    pub k: usize,
    pub linear: Linear<S>,
}

#[derive(Debug, Clone)]
pub struct BpnParams<S> {
    pub convs: [Conv<S>; 3],
    pub num_views: usize,
    /// `[num_views, D_VIEW]` learnable per-view embeddings.
    pub view_table: Vec<S>,
    pub mlp1: Linear<S>,
    pub mlp2: Linear<S>,
    /// In growth order; coarse-to-fine appends finer scales over time.
    pub heads: Vec<BlurHead<S>>,
    pub mask_head: Linear<S>,
}

impl<S: Real> BpnParams<S> {
    /// Fresh network with one blur head for the starting (coarsest) scale.
    /// The mask head starts at zero so the mask opens at 0.5 and the
    /// sparsity prior decides its direction.
    pub fn init<R: Rng>(
        num_views: usize,
        first_scale: u32,
        first_k: usize,
        rng: &mut R,
    ) -> Result<Self, BpnError> {
        let convs = [
            Conv::kaiming(CNN_CHANNELS[0], CNN_CHANNELS[1], CNN_KERNELS[0], rng),
            Conv::kaiming(CNN_CHANNELS[1], CNN_CHANNELS[2], CNN_KERNELS[1], rng),
            Conv::kaiming(CNN_CHANNELS[2], CNN_CHANNELS[3], CNN_KERNELS[2], rng),
        ];
        let view_table = (0..num_views * D_VIEW)
            .map(|_| S::from_f64(rng.gen_range(-0.1..0.1)))
            .collect();
        let mmf_dim = D_VIEW + D_POS + F_OUT;
        let mut mask_head = Linear::zeros(HIDDEN, 1);
        mask_head.bias[0] = S::from_f64(MASK_INIT_BIAS);
        let mut params = BpnParams {
            convs,
            num_views,
            view_table,
            mlp1: Linear::kaiming(mmf_dim, HIDDEN, rng),
            mlp2: Linear::kaiming(HIDDEN, HIDDEN, rng),
            heads: Vec::new(),
            mask_head,
        };
        params.grow_head(first_scale, first_k, rng)?;
        Ok(params)
    }

    /// Add the blur head for a new scale: tiny random weights plus a large
    /// center-logit bias, so the initial kernel concentrates at the center.
    pub fn grow_head<R: Rng>(&mut self, scale: u32, k: usize, rng: &mut R) -> Result<(), BpnError> {
        if self.heads.iter().any(|h| h.scale == scale) {
            return Err(BpnError::DuplicateHead { scale });
        }
        if k % 2 == 0 {
            return Err(BpnError::EvenKernel { k });
        }
        let mut linear = Linear::zeros(HIDDEN, k * k);
        for w in &mut linear.weight {
            *w = S::from_f64(rng.gen_range(-HEAD_INIT_SPREAD..HEAD_INIT_SPREAD));
        }
        linear.bias[(k * k) / 2] = S::from_f64(HEAD_CENTER_BIAS);
        self.heads.push(BlurHead { scale, k, linear });
        Ok(())
    }

    pub fn head_for(&self, scale: u32) -> Option<&BlurHead<S>> {
        self.heads.iter().find(|h| h.scale == scale)
    }

    /// Stable named enumeration of every parameter tensor. Fixed tensors
    /// first, heads in growth order last, so optimizer state keyed by name
    /// survives head growth.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<S>)> {
        let mut out: Vec<(String, &Vec<S>)> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &c.weight));
            out.push((format!("conv{}.bias", i + 1), &c.bias));
        }
        out.push(("view_table".into(), &self.view_table));
        out.push(("mlp1.weight".into(), &self.mlp1.weight));
        out.push(("mlp1.bias".into(), &self.mlp1.bias));
        out.push(("mlp2.weight".into(), &self.mlp2.weight));
        out.push(("mlp2.bias".into(), &self.mlp2.bias));
        out.push(("mask.weight".into(), &self.mask_head.weight));
        out.push(("mask.bias".into(), &self.mask_head.bias));
        for h in &self.heads {
            out.push((format!("head_s{}.weight", h.scale), &h.linear.weight));
            out.push((format!("head_s{}.bias", h.scale), &h.linear.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<S>)> {
        let mut out: Vec<(String, &mut Vec<S>)> = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &mut c.weight));
            out.push((format!("conv{}.bias", i + 1), &mut c.bias));
        }
        out.push(("view_table".into(), &mut self.view_table));
        out.push(("mlp1.weight".into(), &mut self.mlp1.weight));
        out.push(("mlp1.bias".into(), &mut self.mlp1.bias));
        out.push(("mlp2.weight".into(), &mut self.mlp2.weight));
        out.push(("mlp2.bias".into(), &mut self.mlp2.bias));
        out.push(("mask.weight".into(), &mut self.mask_head.weight));
        out.push(("mask.bias".into(), &mut self.mask_head.bias));
        for h in &mut self.heads {
            out.push((format!("head_s{}.weight", h.scale), &mut h.linear.weight));
            out.push((format!("head_s{}.bias", h.scale), &mut h.linear.bias));
        }
        out
    }
}

/// Tape handles for every BPN tensor, in `named_tensors` order where it
/// matters (`all`).
pub struct BpnVars {
    pub conv_w: [Var; 3],
    pub conv_b: [Var; 3],
    pub view_table: Var,
    pub mlp1_w: Var,
    pub mlp1_b: Var,
    pub mlp2_w: Var,
    pub mlp2_b: Var,
    pub mask_w: Var,
    pub mask_b: Var,
    /// `(scale, k, weight, bias)` in growth order.
    pub heads: Vec<(u32, usize, Var, Var)>,
    pub num_views: usize,
}

impl BpnVars {
    /// All parameter handles in `named_tensors` order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for i in 0..3 {
            out.push(self.conv_w[i]);
            out.push(self.conv_b[i]);
        }
        out.extend([
            self.view_table,
            self.mlp1_w,
            self.mlp1_b,
            self.mlp2_w,
            self.mlp2_b,
            self.mask_w,
            self.mask_b,
        ]);
        for &(_, _, w, b) in &self.heads {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Register every BPN tensor as a differentiable leaf.
pub fn bpn_leaves<S: Real>(tape: &mut Tape<S>, params: &BpnParams<S>) -> BpnVars {
    let conv_var = |tape: &mut Tape<S>, c: &Conv<S>| {
        let w = tape.leaf(
            Tensor::new(vec![c.out_ch, c.in_ch, c.k, c.k], c.weight.clone()),
            true,
        );
        let b = tape.leaf(Tensor::new(vec![c.out_ch], c.bias.clone()), true);
        (w, b)
    };
    let lin_var = |tape: &mut Tape<S>, l: &Linear<S>| {
        let w = tape.leaf(Tensor::new(vec![l.in_dim, l.out_dim], l.weight.clone()), true);
        let b = tape.leaf(Tensor::new(vec![l.out_dim], l.bias.clone()), true);
        (w, b)
    };
    let (c1w, c1b) = conv_var(tape, &params.convs[0]);
    let (c2w, c2b) = conv_var(tape, &params.convs[1]);
    let (c3w, c3b) = conv_var(tape, &params.convs[2]);
    let view_table = tape.leaf(
        Tensor::new(
            vec![params.num_views, D_VIEW],
            params.view_table.clone(),
        ),
        true,
    );
    let (mlp1_w, mlp1_b) = lin_var(tape, &params.mlp1);
    let (mlp2_w, mlp2_b) = lin_var(tape, &params.mlp2);
    let (mask_w, mask_b) = lin_var(tape, &params.mask_head);
    let heads = params
        .heads
        .iter()
        .map(|h| {
            let (w, b) = lin_var(tape, &h.linear);
            (h.scale, h.k, w, b)
        })
        .collect();
    BpnVars {
        conv_w: [c1w, c2w, c3w],
        conv_b: [c1b, c2b, c3b],
        view_table,
        mlp1_w,
        mlp1_b,
        mlp2_w,
        mlp2_b,
        mask_w,
        mask_b,
        heads,
        num_views: params.num_views,
    }
}

/// Blur field for one view at one scale, as tape nodes.
pub struct BlurFieldVars {
    /// `[H*W, k*k]` per-pixel kernels, each row a probability vector.
    pub kernels: Var,
    /// `[H, W]` residual mask in [0, 1].
    pub mask: Var,
    pub k: usize,
    pub scale: u32,
}

/// Nearest-rank quantile of unsorted data (copies and sorts).
fn quantile<S: Real>(data: &[S], q: f64) -> S {
    debug_assert!(!data.is_empty());
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Robust per-image depth normalization to [0, 1]. The percentile bounds are
/// plain scalars (detached), so no gradient flows into the normalizer.
fn normalize_depth<S: Real>(tape: &mut Tape<S>, depth: Var) -> Result<Var, TensorError> {
    let lo = quantile(tape.value(depth).data(), DEPTH_Q_LOW);
    let hi = quantile(tape.value(depth).data(), DEPTH_Q_HIGH);
    let range = (hi - lo).max(S::from_f64(1e-8));
    let shifted = tape.add_scalar(depth, -lo)?;
    let scaled = tape.mul_scalar(shifted, S::one() / range)?;
    tape.clamp01(scaled)
}

/// CNN features of the RGBD stack, as rows: `[H*W, F_OUT]`.
pub fn extract_features<S: Real>(
    tape: &mut Tape<S>,
    vars: &BpnVars,
    color: Var,
    depth: Var,
) -> Result<Var, BpnError> {
    let cs = tape.value(color).shape().to_vec();
    let ds = tape.value(depth).shape().to_vec();
    if cs.len() != 3 || cs[0] != 3 || ds != cs[1..] {
        return Err(BpnError::Tensor(TensorError::ShapeMismatch {
            op: "extract_features",
            lhs: cs,
            rhs: ds,
        }));
    }
    let (h, w) = (cs[1], cs[2]);
    let dnorm = normalize_depth(tape, depth)?;
    let d3 = tape.reshape(dnorm, vec![1, h, w])?;
    let mut x = tape.concat0(&[color, d3])?;
    for i in 0..3 {
        let y = tape.conv2d(x, vars.conv_w[i], vars.conv_b[i])?;
        x = tape.relu(y)?;
    }
    Ok(tape.rows_from_chw(x)?)
}

/// Sinusoidal positional encoding rows `[H*W, D_POS]`: `POS_OCTAVES`
/// frequency octaves of sin/cos over pixel centers normalized to [-1, 1].
pub fn positional_rows<S: Real>(h: usize, w: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(h * w * D_POS);
    for py in 0..h {
        for px in 0..w {
            let nx = 2.0 * (px as f64 + 0.5) / w as f64 - 1.0;
            let ny = 2.0 * (py as f64 + 0.5) / h as f64 - 1.0;
            for l in 0..POS_OCTAVES {
                let f = (1u64 << l) as f64 * std::f64::consts::PI;
                data.push(S::from_f64((f * nx).sin()));
                data.push(S::from_f64((f * nx).cos()));
                data.push(S::from_f64((f * ny).sin()));
                data.push(S::from_f64((f * ny).cos()));
            }
        }
    }
    Tensor::new(vec![h * w, D_POS], data)
}

/// Kernel/mask heads over prebuilt multi-modal feature rows. Split from
/// [`propose`] so tests can inject feature rows directly.
pub fn propose_from_mmf<S: Real>(
    tape: &mut Tape<S>,
    vars: &BpnVars,
    mmf: Var,
    scale: u32,
    h: usize,
    w: usize,
) -> Result<BlurFieldVars, BpnError> {
    let &(_, k, head_w, head_b) = vars
        .heads
        .iter()
        .find(|(s, ..)| *s == scale)
        .ok_or(BpnError::MissingHead { scale })?;

    let a1 = tape.matmul(mmf, vars.mlp1_w)?;
    let a1 = tape.add(a1, vars.mlp1_b)?;
    let h1 = tape.relu(a1)?;
    let a2 = tape.matmul(h1, vars.mlp2_w)?;
    let f_inter = tape.add(a2, vars.mlp2_b)?;

    let logits = tape.matmul(f_inter, head_w)?;
    let logits = tape.add(logits, head_b)?;
    let kernels = tape.softmax(logits, 1)?;

    let mlogit = tape.matmul(f_inter, vars.mask_w)?;
    let mlogit = tape.add(mlogit, vars.mask_b)?;
    let msig = tape.sigmoid(mlogit)?;
    let mask = tape.reshape(msig, vec![h, w])?;

    Ok(BlurFieldVars {
        kernels,
        mask,
        k,
        scale,
    })
}

/// Per-pixel blur kernels and mask for one rendered view at one scale.
pub fn propose<S: Real>(
    tape: &mut Tape<S>,
    vars: &BpnVars,
    color: Var,
    depth: Var,
    view: usize,
    scale: u32,
) -> Result<BlurFieldVars, BpnError> {
    if view >= vars.num_views {
        return Err(BpnError::UnknownView {
            view,
            num_views: vars.num_views,
        });
    }
    let feats = extract_features(tape, vars, color, depth)?;
    let cs = tape.value(color).shape().to_vec();
    let (h, w) = (cs[1], cs[2]);
    let pos = positional_rows::<S>(h, w);
    let pos = tape.constant(pos);
    let vrow = tape.select_row(vars.view_table, view)?;
    let vrows = tape.repeat_rows(vrow, h * w)?;
    let mmf = tape.concat_cols(&[vrows, pos, feats])?;
    propose_from_mmf(tape, vars, mmf, scale, h, w)
}

/// Convolve each pixel of `image` with its own kernel (replicate padding).
pub fn apply_blur<S: Real>(
    tape: &mut Tape<S>,
    image: Var,
    field: &BlurFieldVars,
) -> Result<Var, BpnError> {
    Ok(tape.apply_blur(image, field.kernels, field.k)?)
}

/// Residual mask blend: `(1 - m) * clean + m * blurred`.
pub fn blend<S: Real>(
    tape: &mut Tape<S>,
    clean: Var,
    blurred: Var,
    mask: Var,
) -> Result<Var, TensorError> {
    let neg_m = tape.neg(mask)?;
    let one_m = tape.add_scalar(neg_m, S::one())?;
    let a = tape.mul(clean, one_m)?;
    let b = tape.mul(blurred, mask)?;
    tape.add(a, b)
}

/// Full degradation of a rendered view: propose, blur, blend.
pub fn degrade<S: Real>(
    tape: &mut Tape<S>,
    vars: &BpnVars,
    color: Var,
    depth: Var,
    view: usize,
    scale: u32,
) -> Result<(Var, BlurFieldVars), BpnError> {
    let field = propose(tape, vars, color, depth, view, scale)?;
    let blurred = apply_blur(tape, color, &field)?;
    let out = blend(tape, color, blurred, field.mask)?;
    Ok((out, field))
}
