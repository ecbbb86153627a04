//! End-to-end acceptance checks, one printed pass/fail line per criterion.
//!
//! Runs as a plain binary (no test harness) so the per-criterion lines
//! always reach the console. Property criteria (gradients, normalization,
//! oracle equivalence, schedule validation) run in-process in f64; the
//! blur-recovery experiments drive the real `desplat` binary end to end
//! (synth -> train -> render -> eval) exactly as a user would, so PNG
//! quantization and CLI plumbing are part of what is verified.
//!
//! Set DESPLAT_ACCEPTANCE_QUICK=1 to shrink the experiments to a plumbing
//! smoke run: recovery margins are then reported but not enforced.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use desplat::autodiff::{Tape, Tensor};
use desplat::bpn::{self, BpnParams};
use desplat::io::{load_dataset, load_rgb_png};
use desplat::losses::{total_loss, LossWeights};
use desplat::rasterizer::{
    cloud_leaves, project, rasterize_on_tape, render_at_scale, ALPHA_CUTOFF, MAX_BLEND_WEIGHT,
    TRANSMITTANCE_FLOOR,
};
use desplat::scene::{Camera, GaussianCloud};
use desplat::trainer::{ScaleSchedule, Stage};

const BIN: &str = env!("CARGO_BIN_EXE_desplat");
const WORK: &str = env!("CARGO_TARGET_TMPDIR");

struct Report {
    failures: usize,
    quick: bool,
}

impl Report {
    /// Hard criterion: always enforced.
    fn check(&mut self, id: &str, pass: bool, detail: String) {
        println!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }

    /// Recovery-margin criterion: reported but not enforced in quick mode.
    fn check_margin(&mut self, id: &str, pass: bool, detail: String) {
        if self.quick {
            println!("[QUICK] {id}: {detail} (margin not enforced)");
        } else {
            self.check(id, pass, detail);
        }
    }
}

fn main() {
    let quick = std::env::var("DESPLAT_ACCEPTANCE_QUICK").is_ok();
    if quick {
        println!("quick mode: shrunken experiments, recovery margins reported only");
    }
    let mut r = Report { failures: 0, quick };
    let work = PathBuf::from(WORK).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).expect("create acceptance work dir");

    c11_kernel_fov(&mut r);
    c2_normalization_and_bounds(&mut r);
    c4_convolution_oracle(&mut r);
    c3_rasterizer_oracle(&mut r);
    c1_gradient_integrity(&mut r);
    c12_determinism(&mut r, &work);
    experiments(&mut r, &work);

    if r.failures > 0 {
        println!("{} criterion(s) failed", r.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}

// --- C11: kernel field-of-view consistency ---------------------------------

fn c11_kernel_fov(r: &mut Report) {
    let schedule = ScaleSchedule::default();
    let mut ok = schedule.validate().is_ok();
    let mut fovs = Vec::new();
    for st in &schedule.stages {
        let fov = st.kernel << (st.scale - 1);
        fovs.push(fov);
        ok &= (17..=20).contains(&fov);
    }
    // The bound must be enforced, not just satisfied: out-of-window
    // schedules have to be rejected at validation.
    let reject = |stages: Vec<Stage>| {
        ScaleSchedule { stages, warmup_iters: 0 }.validate().is_err()
    };
    ok &= reject(vec![Stage { scale: 1, kernel: 21, iters: 1 }]);
    ok &= reject(vec![Stage { scale: 2, kernel: 5, iters: 1 }]);
    ok &= reject(vec![Stage { scale: 3, kernel: 7, iters: 1 }]);
    r.check(
        "C11 kernel field of view",
        ok,
        format!("default stage footprints {fovs:?} within [17, 20]; violations rejected at validation"),
    );
}

// --- C2: kernel normalization & mask bounds ---------------------------------

fn c2_normalization_and_bounds(r: &mut Report) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst_sum = 0.0f64;
    let mut mask_ok = true;
    let mut kernels_checked = 0usize;
    for eval in 0..1000 {
        let (scale, k) = *[(1u32, 17usize), (2, 9), (3, 5)]
            .iter()
            .nth(rng.gen_range(0..3))
            .unwrap();
        let views = rng.gen_range(1..=6);
        let mut params = BpnParams::<f64>::init(views, scale, k, &mut rng).unwrap();
        randomize_bpn(&mut params, 0.3, &mut rng);
        let (h, w) = (rng.gen_range(4..=10), rng.gen_range(4..=10));
        let color: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Every fourth eval uses constant depth, the quantile-normalization
        // edge case.
        let depth: Vec<f64> = if eval % 4 == 0 {
            vec![rng.gen_range(0.5..5.0); h * w]
        } else {
            (0..h * w).map(|_| rng.gen_range(0.5..5.0)).collect()
        };
        let view = rng.gen_range(0..views);

        let mut tape = Tape::<f64>::new();
        let vars = bpn::bpn_leaves(&mut tape, &params);
        let c = tape.constant(Tensor::new(vec![3, h, w], color));
        let d = tape.constant(Tensor::new(vec![h, w], depth));
        let field = bpn::propose(&mut tape, &vars, c, d, view, scale).unwrap();
        for row in tape.value(field.kernels).data().chunks(k * k) {
            let sum: f64 = row.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            kernels_checked += 1;
        }
        for &m in tape.value(field.mask).data() {
            mask_ok &= (0.0..=1.0).contains(&m);
        }
    }
    let pass = worst_sum <= 1e-6 && mask_ok;
    r.check(
        "C2 kernel normalization & mask bounds",
        pass,
        format!(
            "1000 evaluations, {kernels_checked} kernels: worst |sum - 1| = {worst_sum:.2e} (<= 1e-6), masks in [0,1]: {mask_ok} [{:.1}s]",
            started.elapsed().as_secs_f64()
        ),
    );
}

/// Push every tensor to a generic position: uniform noise on top of the
/// structured init (zero heads would otherwise sit exactly on plateaus).
fn randomize_bpn(params: &mut BpnParams<f64>, spread: f64, rng: &mut ChaCha8Rng) {
    for (_, tensor) in params.named_tensors_mut() {
        for v in tensor.iter_mut() {
            *v += rng.gen_range(-spread..spread);
        }
    }
}

// --- C4: convolution oracle equivalence -------------------------------------

fn c4_convolution_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let (h, w) = (16usize, 16usize);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let k = [3usize, 5, 9, 17][case % 4];
        let image: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Per-pixel kernels via softmax of random logits: normalized rows,
        // matching what the proposal network emits.
        let mut kernels = vec![0.0f64; h * w * k * k];
        for row in kernels.chunks_mut(k * k) {
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(-2.0..2.0f64).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }

        let mut tape = Tape::<f64>::new();
        let img = tape.constant(Tensor::new(vec![3, h, w], image.clone()));
        let ker = tape.constant(Tensor::new(vec![h * w, k * k], kernels.clone()));
        let out = tape.apply_blur(img, ker, k).unwrap();
        let got = tape.value(out).data();

        let want = six_loop_blur(&image, &kernels, h, w, k);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    r.check(
        "C4 convolution oracle",
        worst < 1e-10,
        format!("20 random 16x16 cases (k in 3/5/9/17): max abs diff = {worst:.2e} (< 1e-10)"),
    );
}

/// Reference per-pixel convolution: six explicit loops, replicate padding.
fn six_loop_blur(image: &[f64], kernels: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for ki in 0..k {
                    for kj in 0..k {
                        let si = (i as isize + ki as isize - r).clamp(0, h as isize - 1) as usize;
                        let sj = (j as isize + kj as isize - r).clamp(0, w as isize - 1) as usize;
                        acc += kernels[(i * w + j) * k * k + ki * k + kj]
                            * image[c * h * w + si * w + sj];
                    }
                }
                out[c * h * w + i * w + j] = acc;
            }
        }
    }
    out
}

// --- C3: rasterizer oracle equivalence --------------------------------------

fn c3_rasterizer_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(1..=50);
        let cloud = random_cloud(n, &mut rng);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = rng.gen_range(2.5..4.0);
        let eye = [radius * theta.cos(), radius * theta.sin(), rng.gen_range(-1.0..1.0)];
        let cam = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 40.0, 32, 32, 0);
        let bg = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];

        let tiled = render_at_scale(&cloud, &cam, 1, bg).unwrap();
        let naive = naive_render(&cloud, &cam, bg);
        for (a, b) in tiled.color.iter().zip(&naive) {
            worst = worst.max((a - b).abs());
        }
    }
    r.check(
        "C3 rasterizer oracle",
        worst < 1e-3,
        format!("50 random scenes (<= 50 gaussians, 32x32): max abs pixel diff = {worst:.2e} (< 1e-3)"),
    );
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> GaussianCloud<f64> {
    let mut cloud = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        cloud.positions.extend([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]);
        cloud.log_scales.extend([
            rng.gen_range(-3.0..-0.8),
            rng.gen_range(-3.0..-0.8),
            rng.gen_range(-3.0..-0.8),
        ]);
        cloud.rotations.extend([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]);
        cloud.opacity_logits.push(rng.gen_range(-2.0..3.0));
        cloud.color_logits.extend([
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        ]);
    }
    cloud.normalize_rotations();
    cloud
}

/// Untiled reference compositor: for every pixel, walk the full depth-sorted
/// entry list (no tiles, no footprint radii, no early termination). Shares
/// the projection with the production path; what it cross-checks is the
/// tiling, binning, and termination machinery.
fn naive_render(cloud: &GaussianCloud<f64>, cam: &Camera, bg: [f64; 3]) -> Vec<f64> {
    let proj = project(cloud, cam);
    let (h, w) = (cam.height, cam.width);
    let hw = h * w;
    let mut out = vec![0.0f64; 3 * hw];
    for py in 0..h {
        for px in 0..w {
            let (pcx, pcy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0f64;
            let mut acc = [0.0f64; 3];
            for e in &proj.entries {
                let dx = pcx - e.center[0];
                let dy = pcy - e.center[1];
                let q = e.inv_cov[0] * dx * dx + 2.0 * e.inv_cov[1] * dx * dy + e.inv_cov[2] * dy * dy;
                let wgt = e.alpha * (-0.5 * q).exp();
                if wgt < ALPHA_CUTOFF {
                    continue;
                }
                let wgt = wgt.min(MAX_BLEND_WEIGHT);
                for c in 0..3 {
                    acc[c] += t * wgt * e.color[c];
                }
                t *= 1.0 - wgt;
            }
            for c in 0..3 {
                out[c * hw + py * w + px] = acc[c] + t * bg[c];
            }
        }
    }
    // The tiled path stops at the transmittance floor; the full sum keeps
    // going, so differences up to TRANSMITTANCE_FLOOR are expected and the
    // 1e-3 bound absorbs them.
    let _ = TRANSMITTANCE_FLOOR;
    out
}

// --- C1: gradient integrity --------------------------------------------------

/// Everything the end-to-end loss depends on, owned so parameters can be
/// perturbed one scalar at a time.
struct GradInstance {
    cloud: GaussianCloud<f64>,
    bpn: BpnParams<f64>,
    cam: Camera,
    obs: Vec<f64>,
    view: usize,
    scale: u32,
    weights: LossWeights,
}

const GRAD_BG: [f64; 3] = [1.0, 1.0, 1.0];

fn instance_loss(inst: &GradInstance) -> f64 {
    let mut tape = Tape::<f64>::new();
    let cvars = cloud_leaves(&mut tape, &inst.cloud);
    let render = rasterize_on_tape(&mut tape, &cvars, &inst.cam, GRAD_BG).unwrap();
    let bvars = bpn::bpn_leaves(&mut tape, &inst.bpn);
    let (c_out, field) = bpn::degrade(
        &mut tape,
        &bvars,
        render.color,
        render.depth,
        inst.view,
        inst.scale,
    )
    .unwrap();
    let obs = tape.constant(Tensor::new(
        vec![3, inst.cam.height, inst.cam.width],
        inst.obs.clone(),
    ));
    let terms = total_loss(&mut tape, c_out, obs, field.mask, &inst.weights).unwrap();
    tape.scalar_value(terms.total)
}

/// Analytic gradients for every parameter tensor, in a fixed order:
/// the five cloud groups, then the network tensors in registry order.
fn instance_grads(inst: &GradInstance) -> Vec<Vec<f64>> {
    let mut tape = Tape::<f64>::new();
    let cvars = cloud_leaves(&mut tape, &inst.cloud);
    let render = rasterize_on_tape(&mut tape, &cvars, &inst.cam, GRAD_BG).unwrap();
    let bvars = bpn::bpn_leaves(&mut tape, &inst.bpn);
    let (c_out, field) = bpn::degrade(
        &mut tape,
        &bvars,
        render.color,
        render.depth,
        inst.view,
        inst.scale,
    )
    .unwrap();
    let obs = tape.constant(Tensor::new(
        vec![3, inst.cam.height, inst.cam.width],
        inst.obs.clone(),
    ));
    let terms = total_loss(&mut tape, c_out, obs, field.mask, &inst.weights).unwrap();
    tape.backward(terms.total).unwrap();
    let mut grads = Vec::new();
    for var in [
        cvars.positions,
        cvars.log_scales,
        cvars.rotations,
        cvars.opacity_logits,
        cvars.color_logits,
    ]
    .into_iter()
    .chain(bvars.all())
    {
        let len = tape.value(var).numel();
        grads.push(match tape.grad(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        });
    }
    grads
}

fn tensor_mut(inst: &mut GradInstance, t: usize) -> &mut Vec<f64> {
    match t {
        0 => &mut inst.cloud.positions,
        1 => &mut inst.cloud.log_scales,
        2 => &mut inst.cloud.rotations,
        3 => &mut inst.cloud.opacity_logits,
        4 => &mut inst.cloud.color_logits,
        _ => {
            inst.bpn
                .named_tensors_mut()
                .into_iter()
                .nth(t - 5)
                .expect("tensor index within registry")
                .1
        }
    }
}

fn c1_gradient_integrity(r: &mut Report) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let scene = desplat::blur_synth::make_toy_scene_sized::<f64>(41, 20, 2, 16, 16);
    let mut bpn = BpnParams::<f64>::init(2, 1, 5, &mut rng).unwrap();
    randomize_bpn(&mut bpn, 0.2, &mut rng);
    let obs: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut inst = GradInstance {
        cloud: scene.cloud,
        bpn,
        cam: scene.train_cameras[0].clone(),
        obs,
        view: 0,
        scale: 1,
        weights: LossWeights::default(),
    };

    let analytic = instance_grads(&inst);
    let names: Vec<String> = ["positions", "log_scales", "rotations", "opacity_logits", "color_logits"]
        .iter()
        .map(|s| s.to_string())
        .chain(inst.bpn.named_tensors().into_iter().map(|(n, _)| n))
        .collect();
    assert_eq!(analytic.len(), names.len());

    // Central differences on a random sample of entries from every tensor;
    // a full sweep over the ~130k network parameters would take hours.
    const SAMPLES_PER_TENSOR: usize = 40;
    const EPS: f64 = 1e-6;
    const TOL: f64 = 1e-3;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut worst_at = String::from("-");
    let mut pass = true;
    for (t, grads) in analytic.iter().enumerate() {
        let len = grads.len();
        let mut indices: Vec<usize> = (0..len).collect();
        if len > SAMPLES_PER_TENSOR {
            for i in 0..SAMPLES_PER_TENSOR {
                let j = rng.gen_range(i..len);
                indices.swap(i, j);
            }
            indices.truncate(SAMPLES_PER_TENSOR);
        }
        for &idx in &indices {
            let original = tensor_mut(&mut inst, t)[idx];
            tensor_mut(&mut inst, t)[idx] = original + EPS;
            let plus = instance_loss(&inst);
            tensor_mut(&mut inst, t)[idx] = original - EPS;
            let minus = instance_loss(&inst);
            tensor_mut(&mut inst, t)[idx] = original;
            let fd = (plus - minus) / (2.0 * EPS);
            let a = grads[idx];
            let denom = a.abs().max(fd.abs());
            let rel = if denom < 1e-8 { 0.0 } else { (a - fd).abs() / denom };
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{idx}]", names[t]);
            }
            pass &= rel <= TOL;
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    r.check(
        "C1 gradient integrity",
        pass,
        format!(
            "20 gaussians, 16x16, K=5, f64: {checked} sampled entries across {} tensors, worst rel err {worst:.2e} at {worst_at} (tol 1e-3) [{secs:.0}s < 120s]",
            names.len()
        ),
    );
}

// --- Subprocess plumbing -----------------------------------------------------

fn run(label: &str, args: &[&str]) -> f64 {
    let started = Instant::now();
    let output = Command::new(BIN)
        .args(args)
        .output()
        .unwrap_or_else(|e| panic!("{label}: failed to spawn {BIN}: {e}"));
    if !output.status.success() {
        panic!(
            "{label}: `desplat {}` failed with {:?}\nstderr:\n{}",
            args.join(" "),
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        );
    }
    started.elapsed().as_secs_f64()
}

fn mean_psnr(metrics: &Path) -> f64 {
    let text = std::fs::read_to_string(metrics)
        .unwrap_or_else(|e| panic!("{}: {e}", metrics.display()));
    let value: serde_json::Value = serde_json::from_str(&text).expect("metrics json");
    value["mean_psnr"]
        .as_f64()
        .unwrap_or_else(|| panic!("{}: mean_psnr missing or non-finite", metrics.display()))
}

struct TrainedPair {
    bags_psnr: f64,
    base_psnr: f64,
    bags_minutes: f64,
}

/// synth + train + render + eval for one (blur, seed) cell, BAGS and
/// baseline arms.
fn run_pair(work: &Path, tag: &str, seed: u64, synth_extra: &[&str], iters: &str) -> TrainedPair {
    let data = work.join(format!("data_{tag}_{seed}"));
    let seed_s = seed.to_string();
    let mut synth_args = vec![
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        &seed_s,
        "--views",
        "24",
        "--size",
        "64",
    ];
    synth_args.extend_from_slice(synth_extra);
    run(tag, &synth_args);

    let arm = |name: &str, extra: &[&str]| -> (f64, f64) {
        let out = work.join(format!("{tag}_{seed}_{name}"));
        let mut args = vec![
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--iters",
            iters,
            "--seed",
            &seed_s,
        ];
        args.extend_from_slice(extra);
        let train_secs = run(tag, &args);
        let ckpt = out.join("checkpoint.bags");
        let renders = out.join("renders");
        run(
            tag,
            &[
                "render",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--dataset",
                data.to_str().unwrap(),
                "--out",
                renders.to_str().unwrap(),
            ],
        );
        let metrics = out.join("metrics.json");
        run(
            tag,
            &[
                "eval",
                "--renders",
                renders.to_str().unwrap(),
                "--dataset",
                data.to_str().unwrap(),
                "--out",
                metrics.to_str().unwrap(),
            ],
        );
        (mean_psnr(&metrics), train_secs)
    };

    let (bags_psnr, bags_secs) = arm("bags", &[]);
    let (base_psnr, _) = arm("base", &["--no-bpn"]);
    TrainedPair {
        bags_psnr,
        base_psnr,
        bags_minutes: bags_secs / 60.0,
    }
}

// --- C12: determinism --------------------------------------------------------

fn c12_determinism(r: &mut Report, work: &Path) {
    let data = work.join("data_det");
    run(
        "C12",
        &[
            "synth", "--out", data.to_str().unwrap(), "--blur", "motion", "--angle", "0",
            "--length", "6", "--views", "12", "--size", "48", "--seed", "7",
        ],
    );
    let train = |out: &Path| {
        run(
            "C12",
            &[
                "train",
                "--dataset",
                data.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--iters",
                "150,150,300",
                "--warmup",
                "50",
                "--seed",
                "5",
            ],
        );
        std::fs::read(out.join("loss.csv")).expect("loss csv written")
    };
    let a = train(&work.join("det_a"));
    let b = train(&work.join("det_b"));
    r.check(
        "C12 determinism",
        a == b,
        format!(
            "two identical 600-iteration train runs: loss CSVs byte-identical = {} ({} bytes)",
            a == b,
            a.len()
        ),
    );
}

// --- C5..C10: blur-recovery experiments ---------------------------------------

fn experiments(r: &mut Report, work: &Path) {
    let (iters, seeds): (&str, &[u64]) = if r.quick {
        ("150,150,300", &[0])
    } else {
        ("1500,1500,3000", &[0, 1, 2])
    };

    // C5: motion blur, horizontal so C10 can read the kernel orientation
    // off the same checkpoints.
    let mut motion = Vec::new();
    for &s in seeds {
        let pair = run_pair(
            work,
            "motion",
            s,
            &["--blur", "motion", "--angle", "0", "--length", "6"],
            iters,
        );
        println!(
            "  motion seed {s}: BAGS {:.2} dB vs baseline {:.2} dB [{:.1} min]",
            pair.bags_psnr, pair.base_psnr, pair.bags_minutes
        );
        motion.push(pair);
    }
    let delta = |pairs: &[TrainedPair]| {
        pairs.iter().map(|p| p.bags_psnr - p.base_psnr).sum::<f64>() / pairs.len() as f64
    };
    let minutes = |pairs: &[TrainedPair]| {
        pairs.iter().map(|p| p.bags_minutes).fold(0.0f64, f64::max)
    };
    let d = delta(&motion);
    r.check_margin(
        "C5 motion-blur recovery",
        d >= 1.0,
        format!(
            "BAGS over baseline: {d:+.2} dB mean across {} seed(s) (>= +1.0); slowest run {:.1} min (< 30 target)",
            motion.len(),
            minutes(&motion)
        ),
    );

    c10_kernel_orientation(r, work);

    // C6 + C9 share the defocus datasets and BAGS arms.
    let mut defocus = Vec::new();
    for &s in seeds {
        let pair = run_pair(
            work,
            "defocus",
            s,
            &["--blur", "defocus", "--focus", "3.16", "--gain", "3.1"],
            iters,
        );
        println!(
            "  defocus seed {s}: BAGS {:.2} dB vs baseline {:.2} dB [{:.1} min]",
            pair.bags_psnr, pair.base_psnr, pair.bags_minutes
        );
        defocus.push(pair);
    }
    let d = delta(&defocus);
    r.check_margin(
        "C6 defocus-blur recovery",
        d >= 1.0,
        format!(
            "BAGS over baseline: {d:+.2} dB mean across {} seed(s) (>= +1.0); slowest run {:.1} min",
            defocus.len(),
            minutes(&defocus)
        ),
    );

    // C9: single-stage full-resolution runs of equal total iterations on
    // the same defocus datasets.
    let total: usize = iters.split(',').map(|v| v.parse::<usize>().unwrap()).sum();
    let single_iters = total.to_string();
    let mut c2f_gain = 0.0;
    for (i, &s) in seeds.iter().enumerate() {
        let data = work.join(format!("data_defocus_{s}"));
        let out = work.join(format!("defocus_{s}_single"));
        let seed_s = s.to_string();
        run(
            "C9",
            &[
                "train",
                "--dataset",
                data.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--scales",
                "1",
                "--kernels",
                "17",
                "--iters",
                &single_iters,
                "--seed",
                &seed_s,
            ],
        );
        let renders = out.join("renders");
        run(
            "C9",
            &[
                "render", "--checkpoint", out.join("checkpoint.bags").to_str().unwrap(),
                "--dataset", data.to_str().unwrap(), "--out", renders.to_str().unwrap(),
            ],
        );
        let metrics = out.join("metrics.json");
        run(
            "C9",
            &[
                "eval", "--renders", renders.to_str().unwrap(),
                "--dataset", data.to_str().unwrap(), "--out", metrics.to_str().unwrap(),
            ],
        );
        let single = mean_psnr(&metrics);
        println!(
            "  defocus seed {s}: 3-stage {:.2} dB vs single-stage {:.2} dB",
            defocus[i].bags_psnr, single
        );
        c2f_gain += (defocus[i].bags_psnr - single) / seeds.len() as f64;
    }
    r.check_margin(
        "C9 coarse-to-fine ablation",
        c2f_gain >= 0.3,
        format!(
            "3-stage over single-stage at equal iterations: {c2f_gain:+.2} dB mean across {} seed(s) (>= +0.3)",
            seeds.len()
        ),
    );

    // C7: mixed resolution.
    let mut mixres = Vec::new();
    for &s in seeds {
        let pair = run_pair(work, "mixres", s, &["--blur", "mixres"], iters);
        println!(
            "  mixres seed {s}: BAGS {:.2} dB vs baseline {:.2} dB [{:.1} min]",
            pair.bags_psnr, pair.base_psnr, pair.bags_minutes
        );
        mixres.push(pair);
    }
    let d = delta(&mixres);
    r.check_margin(
        "C7 mixed-resolution recovery",
        d >= 0.5,
        format!(
            "BAGS over baseline: {d:+.2} dB mean across {} seed(s) (>= +0.5)",
            mixres.len()
        ),
    );

    // C8: clean inputs, one seed.
    let clean = run_pair(work, "clean", 0, &["--blur", "none"], iters);
    let diff = clean.bags_psnr - clean.base_psnr;
    let mask_mean = final_mask_mean(
        &work.join("clean_0_bags").join("checkpoint.bags"),
        &work.join("data_clean_0"),
    );
    r.check_margin(
        "C8 clean-input sanity",
        diff >= -0.3 && mask_mean < 0.15,
        format!(
            "BAGS {:.2} dB vs baseline {:.2} dB ({diff:+.2} dB, floor -0.3); final mean mask {mask_mean:.3} (< 0.15)",
            clean.bags_psnr, clean.base_psnr
        ),
    );
}

/// Mean proposed mask over every training view at the finest trained scale.
fn final_mask_mean(checkpoint: &Path, data: &Path) -> f64 {
    let state = desplat::trainer::read_checkpoint::<f32>(checkpoint).expect("checkpoint");
    let bpn_params = state.bpn.as_ref().expect("BAGS checkpoint has a network");
    let dataset = load_dataset::<f32>(data).expect("dataset");
    let scale = bpn_params
        .heads
        .iter()
        .map(|h| h.scale)
        .min()
        .expect("at least one head");
    let bg = GRAD_BG.map(|v| v as f32);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (view, lv) in dataset.train.iter().enumerate() {
        let cam = lv.camera.at_scale_level(scale);
        let image = render_at_scale(&state.cloud, &lv.camera, scale, bg).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = bpn::bpn_leaves(&mut tape, bpn_params);
        let c = tape.constant(Tensor::new(vec![3, cam.height, cam.width], image.color));
        let d = tape.constant(Tensor::new(vec![cam.height, cam.width], image.depth));
        let field = bpn::propose(&mut tape, &vars, c, d, view, scale).unwrap();
        for &m in tape.value(field.mask).data() {
            total += f64::from(m);
            count += 1;
        }
    }
    total / count as f64
}

// --- C10: kernel interpretability ---------------------------------------------

fn c10_kernel_orientation(r: &mut Report, work: &Path) {
    let ckpt = work.join("motion_0_bags").join("checkpoint.bags");
    let data = work.join("data_motion_0");
    let out = work.join("motion_0_bags").join("blur");
    let grid = 6usize;
    run(
        "C10",
        &[
            "export-blur",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
            "--view",
            "0",
            "--out",
            out.to_str().unwrap(),
            "--grid",
            "6",
        ],
    );
    let (sheet, sheet_h, sheet_w) = load_rgb_png::<f64>(&out.join("kernels_0000.png")).unwrap();
    let (mask, mask_h, mask_w) = load_rgb_png::<f64>(&out.join("mask_0000.png")).unwrap();
    let k = sheet_h / grid;
    assert_eq!(sheet_w, grid * k, "kernel sheet must be a square tile grid");

    let mut high_mask = 0usize;
    let mut aligned = 0usize;
    let mut angles = Vec::new();
    for gi in 0..grid {
        let i = ((gi as f64 + 0.5) / grid as f64 * mask_h as f64) as usize;
        for gj in 0..grid {
            let j = ((gj as f64 + 0.5) / grid as f64 * mask_w as f64) as usize;
            // Gray PNG loads with equal RGB channels; read the first.
            if mask[i * mask_w + j] <= 0.5 {
                continue;
            }
            high_mask += 1;
            let angle = tile_principal_angle(&sheet, sheet_w, gi, gj, k);
            angles.push((angle * 180.0 / std::f64::consts::PI * 10.0).round() / 10.0);
            if angle.abs() <= 15.0f64.to_radians() {
                aligned += 1;
            }
        }
    }
    let enough = high_mask >= 4;
    let frac = if high_mask > 0 {
        aligned as f64 / high_mask as f64
    } else {
        0.0
    };
    r.check_margin(
        "C10 kernel interpretability",
        enough && frac >= 0.8,
        format!(
            "horizontal motion: {aligned}/{high_mask} high-mask lattice kernels within 15 deg of horizontal ({:.0}%, >= 80%); principal angles (deg): {angles:?}",
            frac * 100.0
        ),
    );
}

/// Principal-axis angle (radians from horizontal) of one kernel tile's
/// intensity second moments.
fn tile_principal_angle(sheet: &[f64], sheet_w: usize, gi: usize, gj: usize, k: usize) -> f64 {
    let at = |ki: usize, kj: usize| {
        // Planar RGB from load_rgb_png; channel 0 carries the gray values.
        sheet[(gi * k + ki) * sheet_w + gj * k + kj]
    };
    let mut mass = 0.0;
    let (mut mx, mut my) = (0.0, 0.0);
    for ki in 0..k {
        for kj in 0..k {
            let w = at(ki, kj);
            mass += w;
            mx += w * kj as f64;
            my += w * ki as f64;
        }
    }
    let (mx, my) = (mx / mass, my / mass);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for ki in 0..k {
        for kj in 0..k {
            let w = at(ki, kj) / mass;
            let dx = kj as f64 - mx;
            let dy = ki as f64 - my;
            cxx += w * dx * dx;
            cyy += w * dy * dy;
            cxy += w * dx * dy;
        }
    }
    0.5 * (2.0 * cxy).atan2(cxx - cyy)
}
