//! Acceptance gate for the demonstration-synthesis workspace: nine numbered
//! checks covering kinematics oracles, the expansion contract, rasterizer
//! agreement, diffusion math, window arithmetic at full horizon length,
//! trained-model conditioning sensitivity, the global-conditioning ablation,
//! the data-scaling trend, and bitwise pipeline reproducibility.
//!
//! Heavy artifacts (seed demos, trained generators, synthesized datasets)
//! are built once under the cargo target tmpdir and revalidated on reruns,
//! so repeated invocations only redo the cheap checks. Each test prints one
//! summary line with its measured quantities; tolerances are pinned inline.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;

use demoforge::conditioning::{
    assemble_condition, build_window_indicator, plan_windows, AssembleOptions,
    ConditioningBundle, WindowDescriptor,
};
use demoforge::diffusion::{
    diffuse_forward, sample_window, DenoiserNet, NetConfig, NoiseSchedule, Tensor,
};
use demoforge::kinematics::{
    forward_kinematics, inverse_kinematics, IkOptions, JointState, RobotModel,
};
use demoforge::pipeline::{
    generate_seed_set, generator_path, load_generator, load_robot, load_seed_set,
    manifest_path, render_motion_views, run_ablation, run_scaling_study, run_synthesis,
    write_seed_set, AblationVariant, DatasetManifest, PipelineConfig,
};
use demoforge::render::{rasterize_oracle, render_state, FrameSequence, RenderOptions, BACKGROUND};
use demoforge::rng::stream;
use demoforge::toyworld::{
    generate_scene, overhead_camera, scripted_expert, toy_arm_model, ToyTask, LINK_LENGTHS,
};
use demoforge::trajectory::{
    ensure_ee_cache, expand_trajectory, validate_feasibility, ExpansionOptions, KeyLabel,
    PerturbationSpec,
};

// ---------------------------------------------------------------------------
// Shared fixture: one pipeline configuration, one seed set, one synthesized
// dataset. Everything below is deterministic in the config seed.
// ---------------------------------------------------------------------------

/// Scale used by the trained-model checks: 12 seed demonstrations expanded
/// 25x into 300 generated episodes at 32x32, with a 16-step noise schedule
/// and an 8-frame generation window.
const ACCEPT_CONFIG: &str = "\
[pipeline]
seed = 0
failure_cap = 0
workers = 0

[seeds]
count = 12

[task]
objects = 1

[expansion]
k = 25
horizontal_bound = 0.10
max_resamples = 40

[render]
resolution = 32

[generator]
window = 8
overlap = 2
steps = 16
beta_end = 0.7
c1 = 24
c2 = 32
epochs = 60
lr = 0.002

[policy]
c1 = 4
c2 = 8
hidden = 32
epochs = 6
batch = 16
lr = 0.002

[eval]
episodes = 200

[scaling]
sizes = 0,300
seeds = 3

[ablation]
episodes = 201
seeds = 3
policy = false
";

fn work_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Acceptance config with its output under `work_root()/<run>`; the seed
/// directory is shared by every run.
fn config_for(run: &str) -> PipelineConfig {
    let mut cfg =
        PipelineConfig::load(ACCEPT_CONFIG, &[], |_| None).expect("acceptance config parses");
    cfg.output = work_root().join(run);
    cfg.seeds_dir = work_root().join("seeds");
    cfg
}

fn ensure_seeds() -> &'static PathBuf {
    static SEEDS: OnceLock<PathBuf> = OnceLock::new();
    SEEDS.get_or_init(|| {
        let cfg = config_for("run_a");
        let demos = generate_seed_set(&cfg).expect("seed generation succeeds");
        write_seed_set(&cfg.seeds_dir, &demos).expect("seed demos written");
        cfg.seeds_dir
    })
}

struct Dataset {
    manifest: DatasetManifest,
    /// Wall-clock seconds for the synthesis run (training included when the
    /// checkpoint was not already cached).
    secs: f64,
}

/// Synthesize the primary dataset once (run A). Resumed invocations only
/// revalidate journaled items, so this is cheap after the first pass.
fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        ensure_seeds();
        let cfg = config_for("run_a");
        let t = Instant::now();
        let report = run_synthesis(&cfg).expect("synthesis of run A succeeds");
        assert!(
            report.failures.is_empty(),
            "synthesis skipped items: {:?}",
            report.failures
        );
        Dataset { manifest: report.manifest, secs: t.elapsed().as_secs_f64() }
    })
}

fn arm() -> RobotModel {
    toy_arm_model().expect("bundled arm parses")
}

/// Uniform joint state within limits, gripper in [0, 1].
fn random_state(model: &RobotModel, rng: &mut impl Rng) -> JointState {
    let positions = model
        .actuated_joints()
        .map(|j| {
            let (lo, hi) = j.limits.expect("actuated joints carry limits");
            rng.gen_range(lo..=hi)
        })
        .collect();
    JointState::new(positions, rng.gen_range(0.0..=1.0))
}

fn file_bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Root-mean-square difference over all pixels and channels.
fn rms_diff(a: &FrameSequence, b: &FrameSequence) -> f64 {
    assert_eq!(a.frames.len(), b.frames.len(), "clip lengths differ");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        for (pa, pb) in fa.data.iter().zip(&fb.data) {
            let d = (*pa - *pb) as f64;
            sum += d * d;
            n += 1;
        }
    }
    (sum / n as f64).sqrt()
}

// ---------------------------------------------------------------------------
// 1. Kinematics oracles.
// ---------------------------------------------------------------------------

/// Independent closed form for the planar 3R chain: cumulative link angles,
/// link lengths from the bundled arm description.
fn planar_closed_form(q: &[f64]) -> Vector3<f64> {
    let mut phi = 0.0;
    let mut p = Vector3::zeros();
    for (l, th) in LINK_LENGTHS.iter().zip(q) {
        phi += th;
        p += Vector3::new(l * phi.cos(), l * phi.sin(), 0.0);
    }
    p
}

#[test]
fn c1_kinematics_oracles() {
    let t0 = Instant::now();
    let model = arm();
    let ee = model.end_effector_index();

    // Forward kinematics vs the closed form, 1000 random states, 1e-9 m.
    let mut rng = stream(101, &[1]);
    let mut worst_fk = 0.0f64;
    for _ in 0..1000 {
        let state = random_state(&model, &mut rng);
        let poses = forward_kinematics(&model, &state).expect("state within limits");
        let got = poses.pose(ee).translation;
        let want = planar_closed_form(&state.positions);
        worst_fk = worst_fk.max((got - want).norm());
    }
    assert!(worst_fk <= 1e-9, "worst FK deviation {worst_fk:.3e} m exceeds 1e-9");

    // IK round trip on 500 reachable targets: solve from a detuned guess,
    // then re-run FK and require a 1e-4 m positional residual.
    let opts = IkOptions { pos_tol: 1e-6, rot_tol: 1e-5, max_iters: 500, ..IkOptions::default() };
    let mut worst_ik = 0.0f64;
    for _ in 0..500 {
        let state = random_state(&model, &mut rng);
        let target = forward_kinematics(&model, &state).expect("reachable").pose(ee).clone();
        let mut guess = state.clone();
        for q in &mut guess.positions {
            *q += rng.gen_range(-0.3..=0.3);
        }
        let guess = model.clamp_state(&guess);
        let sol = inverse_kinematics(&model, &target, &guess, &opts).expect("solver runs");
        let reached = forward_kinematics(&model, &sol.state).expect("solution within limits");
        let residual = (reached.pose(ee).translation - target.translation).norm();
        worst_ik = worst_ik.max(residual);
    }
    assert!(worst_ik <= 1e-4, "worst IK round-trip residual {worst_ik:.3e} m exceeds 1e-4");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "kinematics checks took {secs:.1} s, budget 10 s");
    println!(
        "check 1 pass: FK worst {worst_fk:.2e} m over 1000 states, \
         IK worst residual {worst_ik:.2e} m over 500 targets, {secs:.1} s"
    );
}

// ---------------------------------------------------------------------------
// 2. Expansion contract.
// ---------------------------------------------------------------------------

#[test]
fn c2_expansion_contract() {
    let t0 = Instant::now();
    let model = arm();
    let task = ToyTask::default();
    let scene = generate_scene(&task, 1, 42).expect("scene");
    let mut demo = scripted_expert(&model, &scene, &task).expect("expert");
    ensure_ee_cache(&mut demo.trajectory, &model);
    let opts = ExpansionOptions { max_resamples: 40, ..ExpansionOptions::default() };

    // 1000 expansions under the default +/-0.10 m horizontal spec: every
    // one feasible, every perturbed key inside its bounds.
    let mut total_attempts = 0usize;
    for i in 0..1000u64 {
        let spec = PerturbationSpec { rng_seed: i, ..PerturbationSpec::default() };
        let exp = expand_trajectory(&demo.trajectory, &demo.keys, &spec, &model, &opts)
            .unwrap_or_else(|e| panic!("expansion {i} failed: {e}"));
        total_attempts += exp.attempts;
        let report = validate_feasibility(&exp.trajectory, &model, opts.v_max);
        assert!(report.is_feasible(), "expansion {i} infeasible: {report:?}");
        assert_eq!(exp.keys.len(), demo.keys.len());
        for (kn, ko) in exp.keys.iter().zip(&demo.keys) {
            let d = kn.anchor.translation - ko.anchor.translation;
            assert!(d.x.abs() <= 0.10 + 1e-9, "dx {} out of bounds at {i}", d.x);
            assert!(d.y.abs() <= 0.10 + 1e-9, "dy {} out of bounds at {i}", d.y);
            assert!(d.z.abs() <= 1e-12, "dz {} nonzero at {i}", d.z);
            let dr = (kn.anchor.rotation - ko.anchor.rotation).norm();
            assert!(dr <= 1e-12, "rotation drift {dr} at {i}");
        }
    }

    // The zero-bound spec is the identity within 1e-6.
    let zero = PerturbationSpec {
        horizontal_bound: 0.0,
        vertical_bound: 0.0,
        yaw_bound: 0.0,
        rng_seed: 7,
    };
    let exp = expand_trajectory(&demo.trajectory, &demo.keys, &zero, &model, &opts)
        .expect("identity expansion");
    let mut worst_id = 0.0f64;
    for (wn, wo) in exp.trajectory.waypoints.iter().zip(&demo.trajectory.waypoints) {
        for (a, b) in wn.state.positions.iter().zip(&wo.state.positions) {
            worst_id = worst_id.max((a - b).abs());
        }
        worst_id = worst_id.max((wn.state.gripper - wo.state.gripper).abs());
    }
    assert!(worst_id <= 1e-6, "zero-bound expansion drifts by {worst_id:.3e}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "expansion checks took {secs:.1} s, budget 60 s");
    println!(
        "check 2 pass: 1000/1000 expansions feasible ({} attempts), \
         zero-bound drift {worst_id:.2e}, {secs:.1} s",
        total_attempts
    );
}

// ---------------------------------------------------------------------------
// 3. Rasterizer vs per-pixel ray-test oracle.
// ---------------------------------------------------------------------------

#[test]
fn c3_rasterizer_oracle() {
    let t0 = Instant::now();
    let model = arm();
    let rig = overhead_camera(64);
    let opts = RenderOptions::default();
    let mut rng = stream(303, &[3]);

    let mut mismatched = 0usize;
    let mut total = 0usize;
    let mut worst_frame = 0.0f64;
    for _ in 0..20 {
        let state = random_state(&model, &mut rng);
        let fast = render_state(&model, &state, &rig, &opts);
        let slow = rasterize_oracle(&model, &state, &rig, BACKGROUND);
        assert_eq!(fast.width, slow.width);
        assert_eq!(fast.height, slow.height);
        let mut frame_bad = 0usize;
        for (a, b) in fast.data.chunks_exact(3).zip(slow.data.chunks_exact(3)) {
            let off = a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-3);
            frame_bad += usize::from(off);
        }
        mismatched += frame_bad;
        total += fast.width * fast.height;
        worst_frame = worst_frame.max(frame_bad as f64 / (fast.width * fast.height) as f64);
    }
    let rate = mismatched as f64 / total as f64;
    assert!(
        rate <= 0.005,
        "rasterizer disagrees with the ray oracle on {rate:.4}% of pixels"
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "rasterizer checks took {secs:.1} s, budget 120 s");
    println!(
        "check 3 pass: {mismatched}/{total} pixels differ ({:.3}%), worst frame {:.3}%, {secs:.1} s",
        rate * 100.0,
        worst_frame * 100.0
    );
}

// ---------------------------------------------------------------------------
// 4. Diffusion math: forward process and analytic gradients.
// ---------------------------------------------------------------------------

/// Random tensor with entries in (-1, 1).
fn random_tensor(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(c, h, w);
    for v in &mut t.data {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

/// Iterative chain x_k = sqrt(a_k) x_{k-1} + sqrt(b_k) e_k with fresh noise
/// per step, plus the matched single-draw decomposition of that noise.
fn iterate_chain(
    x0: &Tensor,
    s: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> (Tensor, Tensor) {
    let mut x = x0.clone();
    let mut eff = Tensor::zeros(x0.c, x0.h, x0.w);
    for k in 1..=s {
        let (ak, bk) = (schedule.alpha(k), schedule.beta(k));
        let e = random_tensor(x0.c, x0.h, x0.w, rng);
        for i in 0..x.data.len() {
            x.data[i] = ak.sqrt() * x.data[i] + bk.sqrt() * e.data[i];
            eff.data[i] = ak.sqrt() * eff.data[i] + bk.sqrt() * e.data[i];
        }
    }
    let denom = (1.0 - schedule.alpha_bar(s)).sqrt();
    for v in &mut eff.data {
        *v /= denom;
    }
    (x, eff)
}

#[test]
fn c4_diffusion_math() {
    let t0 = Instant::now();
    let mut rng = stream(404, &[4]);

    // Closed form vs the iterative chain, under both the default schedule
    // and the short training schedule. The chain's accumulated noise is
    // re-expressed as a single draw, so the comparison is elementwise.
    for schedule in [
        NoiseSchedule::default_schedule(),
        NoiseSchedule::linear(16, 1e-3, 0.7).expect("short schedule"),
    ] {
        let steps = schedule.steps();
        // Coefficient recursions must telescope to the closed form.
        let (mut c, mut v) = (1.0f64, 0.0f64);
        for s in 1..=steps {
            c *= schedule.alpha(s).sqrt();
            v = schedule.alpha(s) * v + schedule.beta(s);
            assert!(
                (c - schedule.alpha_bar(s).sqrt()).abs() <= 1e-5,
                "signal coefficient drifts at step {s}"
            );
            assert!(
                (v - (1.0 - schedule.alpha_bar(s))).abs() <= 1e-5,
                "variance recursion drifts at step {s}"
            );
        }
        let x0 = random_tensor(6, 8, 8, &mut rng);
        for s in [1, steps / 2, steps] {
            let (x_iter, eff) = iterate_chain(&x0, s, &schedule, &mut rng);
            let closed = diffuse_forward(&x0, s, &eff, &schedule).expect("closed form");
            let worst = closed
                .data
                .iter()
                .zip(&x_iter.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst <= 1e-5, "closed form vs chain differs by {worst:.3e} at s={s}");
        }
    }

    // Analytic gradients vs central finite differences on 50 coordinates.
    let cfg = NetConfig {
        frames: 2,
        height: 8,
        width: 8,
        c1: 6,
        c2: 8,
        t_dim: 8,
        traj_dim: 4,
        lang_dim: 4,
        traj_samples: 4,
        vocab: 2,
    };
    let net = DenoiserNet::new(cfg).expect("net");
    let mut params = net.init_params(17);
    let noisy = random_tensor(6, 8, 8, &mut rng);
    let motion = random_tensor(6, 8, 8, &mut rng);
    let target = random_tensor(6, 8, 8, &mut rng);
    let lang: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let traj: Vec<[f64; 6]> = (0..4)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let s = 5usize;

    let loss_of = |p: &demoforge::diffusion::ParamStore| {
        let (out, _) = net.forward(p, &noisy, &motion, s, &lang, &traj).expect("forward");
        let n = out.numel() as f64;
        out.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b) / n).sum::<f64>()
    };
    let (out, cache) = net.forward(&params, &noisy, &motion, s, &lang, &traj).expect("forward");
    let n = out.numel() as f64;
    let mut go = Tensor::zeros(out.c, out.h, out.w);
    for i in 0..out.data.len() {
        go.data[i] = 2.0 * (out.data[i] - target.data[i]) / n;
    }
    let (analytic, _) = net.backward(&params, &cache, &go);

    let mut worst_rel = 0.0f64;
    for _ in 0..50 {
        let i = rng.gen_range(0..net.param_count());
        let h = 1e-5 * (1.0 + params.data[i].abs());
        let orig = params.data[i];
        params.data[i] = orig + h;
        let up = loss_of(&params);
        params.data[i] = orig - h;
        let down = loss_of(&params);
        params.data[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-8);
        worst_rel = worst_rel.max(rel);
    }
    assert!(worst_rel < 1e-4, "worst gradient relative error {worst_rel:.3e}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "diffusion math checks took {secs:.1} s, budget 120 s");
    println!(
        "check 4 pass: forward chain matches closed form, worst gradient \
         relative error {worst_rel:.2e} over 50 coordinates, {secs:.1} s"
    );
}

// ---------------------------------------------------------------------------
// 5. Window arithmetic at full horizon length.
// ---------------------------------------------------------------------------

/// Integer-exact indicator membership; valid whenever (n - 1) divides the
/// frame span so the float scale in the production code is exact.
fn indicator_oracle(n: usize, w: &WindowDescriptor, total: usize) -> Vec<u8> {
    (0..n)
        .map(|i| {
            let f = i * (total - 1);
            u8::from(w.start_frame * (n - 1) <= f && f < w.end_frame() * (n - 1))
        })
        .collect()
}

#[test]
fn c5_window_arithmetic_at_scale() {
    let t0 = Instant::now();
    const T: usize = 189;

    // 93-frame windows with a 3-frame overlap tile the horizon exactly.
    let tiled = plan_windows(T, 93, 3).expect("windows");
    assert_eq!(
        tiled,
        vec![
            WindowDescriptor { start_frame: 0, length: 93, overlap: 0 },
            WindowDescriptor { start_frame: 90, length: 93, overlap: 3 },
            WindowDescriptor { start_frame: 180, length: 9, overlap: 3 },
        ]
    );
    for pair in tiled.windows(2) {
        assert_eq!(pair[0].end_frame() - pair[1].start_frame, pair[1].overlap);
        assert!(pair[1].start_frame - pair[0].start_frame == 93 - 3);
    }
    assert_eq!(tiled.last().unwrap().end_frame(), T);

    // A single 189-frame window covers everything and carries no overlap.
    let whole = plan_windows(T, 189, 3).expect("single window");
    assert_eq!(whole, vec![WindowDescriptor { start_frame: 0, length: 189, overlap: 0 }]);

    // Indicators agree with integer arithmetic for every divisor-exact
    // sample count, across both window lengths.
    for n in [5usize, 48, 95, 189] {
        for w in tiled.iter().chain(whole.iter()) {
            let got = build_window_indicator(n, w, T).expect("indicator");
            assert_eq!(got, indicator_oracle(n, w, T), "n={n}, window {w:?}");
        }
        // The full-horizon window marks every sample.
        let all = build_window_indicator(n, &whole[0], T).expect("indicator");
        assert!(all.iter().all(|&b| b == 1), "full window must mark all of n={n}");
    }

    // Indicators of any tiling are contiguous runs; a zero-overlap tiling
    // partitions the samples exactly once each.
    let partition = plan_windows(T, 93, 0).expect("partition");
    assert_eq!(partition.last().unwrap().end_frame(), T);
    for n in [5usize, 48, 64, 95, 189] {
        let mut coverage = vec![0usize; n];
        for w in &partition {
            let ind = build_window_indicator(n, w, T).expect("indicator");
            let ones: Vec<usize> =
                ind.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect();
            assert!(
                ones.windows(2).all(|p| p[1] == p[0] + 1),
                "indicator not contiguous for {w:?}, n={n}"
            );
            for (i, &b) in ind.iter().enumerate() {
                coverage[i] += usize::from(b == 1);
            }
        }
        assert!(
            coverage.iter().all(|&c| c == 1),
            "zero-overlap tiling must cover each sample once, n={n}: {coverage:?}"
        );
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 1.0, "window arithmetic took {secs:.2} s, budget 1 s");
    println!(
        "check 5 pass: 189-frame horizon tiled by 93/189-frame windows, \
         indicators integer-exact for n in {{5,48,95,189}}, {secs:.2} s"
    );
}

// ---------------------------------------------------------------------------
// 6. Trained-model conditioning sensitivity.
// ---------------------------------------------------------------------------

#[test]
fn c6_trained_conditioning_sensitivity() {
    let ds = dataset();
    assert!(
        ds.secs < 3600.0,
        "dataset synthesis (training included) took {:.0} s, budget 3600 s",
        ds.secs
    );

    let cfg = config_for("run_a");
    let model = load_robot(&cfg).expect("robot");
    let demos = load_seed_set(&cfg.seeds_dir, &model).expect("seed demos");
    let (generator, _) = load_generator(&generator_path(&cfg)).expect("trained checkpoint");
    let table = generator.net.export_language_table(&generator.params);
    let schedule =
        NoiseSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end).expect("schedule");
    let opts = AssembleOptions { traj_samples: cfg.traj_samples, ablate_global_traj: false };

    // Pick the two demos whose grasp anchors sit farthest apart, then the
    // window where their robot-only renders differ the most.
    let grasp_xy = |d: &demoforge::pipeline::SeedDemo| {
        let k = d.demo.keys.iter().find(|k| k.label == KeyLabel::Grasp).expect("grasp key");
        nalgebra::Vector2::new(k.anchor.translation.x, k.anchor.translation.y)
    };
    let (mut bi, mut bj, mut best) = (0, 1, -1.0);
    for i in 0..demos.len() {
        for j in (i + 1)..demos.len() {
            let d = (grasp_xy(&demos[i]) - grasp_xy(&demos[j])).norm();
            if d > best {
                (bi, bj, best) = (i, j, d);
            }
        }
    }
    let (da, db) = (&demos[bi], &demos[bj]);
    let ra = render_motion_views(&model, &da.demo.trajectory, &cfg).expect("render a");
    let rb = render_motion_views(&model, &db.demo.trajectory, &cfg).expect("render b");
    assert_eq!(ra.frames.len(), rb.frames.len());
    let windows =
        plan_windows(ra.frames.len(), cfg.gen_window, cfg.gen_overlap).expect("windows");
    let slice = |seq: &FrameSequence, w: &WindowDescriptor| FrameSequence {
        frames: seq.frames[w.start_frame..w.end_frame()].to_vec(),
        fps: seq.fps,
    };
    let w = windows
        .iter()
        .filter(|w| w.length == cfg.gen_window)
        .max_by(|x, y| {
            let dx = rms_diff(&slice(&ra, x), &slice(&rb, x));
            let dy = rms_diff(&slice(&ra, y), &slice(&rb, y));
            dx.partial_cmp(&dy).expect("finite")
        })
        .expect("at least one full window");

    let lang = table.embed(cfg.task.instruction_id).expect("instruction embeds");
    let bundle_a =
        assemble_condition(&ra, &da.demo.trajectory, lang.clone(), w, None, &opts).expect("a");
    let bundle_b =
        assemble_condition(&rb, &db.demo.trajectory, lang, w, None, &opts).expect("b");
    // Swap only the motion-frame block; everything else stays from A.
    let swapped =
        ConditioningBundle { motion_frames: bundle_b.motion_frames.clone(), ..bundle_a.clone() };

    let mut ratios = Vec::new();
    for t in 0..5u64 {
        let draw = |bundle: &ConditioningBundle, salt: u64| {
            sample_window(&generator, bundle, &schedule, &mut stream(606, &[t, salt]))
                .expect("sampled clip")
        };
        let base = draw(&bundle_a, 0);
        let resampled = draw(&bundle_a, 1);
        let swapped_out = draw(&swapped, 0);
        let same = rms_diff(&base, &resampled);
        let cross = rms_diff(&base, &swapped_out);
        assert!(
            cross > 10.0 * same,
            "seed {t}: swap moved output {cross:.4} rms vs resampling {same:.4} rms"
        );
        ratios.push(cross / same);
    }
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "check 6 pass: condition swap vs resampling ratio >= {min:.1}x across 5 seeds \
         (budget 10x), synthesis {:.0} s",
        ds.secs
    );
}

// ---------------------------------------------------------------------------
// 7. Global-conditioning ablation, directional.
// ---------------------------------------------------------------------------

#[test]
fn c7_global_conditioning_ablation() {
    ensure_seeds();
    let t0 = Instant::now();
    let cfg = config_for("run_a");
    let full = run_ablation(&cfg, AblationVariant::Full).expect("full variant");
    let ablated = run_ablation(&cfg, AblationVariant::NoGlobalTraj).expect("ablated variant");

    assert!(full.episodes >= 200, "only {} episodes measured", full.episodes);
    assert_eq!(full.train_seeds, 3);
    assert_eq!(ablated.episodes, full.episodes);

    let wins = full
        .per_seed_consistency
        .iter()
        .zip(&ablated.per_seed_consistency)
        .filter(|(f, n)| f <= n)
        .count();
    assert!(
        2 * wins > full.per_seed_consistency.len(),
        "full model better on only {wins}/{} seeds (full {:?}, ablated {:?})",
        full.per_seed_consistency.len(),
        full.per_seed_consistency,
        ablated.per_seed_consistency
    );
    assert!(
        full.mean_consistency <= 0.9 * ablated.mean_consistency,
        "pooled consistency {:.4} m not 10% under the ablated {:.4} m",
        full.mean_consistency,
        ablated.mean_consistency
    );

    println!(
        "check 7 pass: consistency error full {:.4} m vs no-global-traj {:.4} m \
         over {} episodes x 3 seeds (detected {:.0}%/{:.0}%), seed wins {}/3, {:.0} s",
        full.mean_consistency,
        ablated.mean_consistency,
        full.episodes,
        full.detected_fraction * 100.0,
        ablated.detected_fraction * 100.0,
        wins,
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 8. Data-scaling trend, directional.
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ScalingBaseline {
    config_hash: String,
    seed_only: f64,
    with_generated: f64,
}

#[test]
fn c8_data_scaling_trend() {
    dataset();
    let t0 = Instant::now();
    let cfg = config_for("run_a");
    let rows = run_scaling_study(&cfg, &[0, 300]).expect("scaling study");
    assert_eq!(rows.len(), 2);
    let (base, ceiling) = (rows[0].success_rate, rows[1].success_rate);
    assert!(
        ceiling >= base + 0.05,
        "success with 300 generated ({ceiling:.3}) not 5 points over seed-only ({base:.3})"
    );

    // Pin both endpoints as regression values keyed by the config hash;
    // the study is deterministic, so later runs must reproduce them.
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/scaling_baseline.json");
    let hash = cfg.config_hash();
    let pinned: Option<ScalingBaseline> = fs::read(&path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .filter(|b: &ScalingBaseline| b.config_hash == hash);
    match pinned {
        Some(b) => {
            assert!(
                (b.seed_only - base).abs() <= 1e-9 && (b.with_generated - ceiling).abs() <= 1e-9,
                "pinned baselines ({:.3}, {:.3}) not reproduced by ({base:.3}, {ceiling:.3})",
                b.seed_only,
                b.with_generated
            );
        }
        None => {
            fs::create_dir_all(path.parent().expect("data dir")).expect("mkdir");
            let record =
                ScalingBaseline { config_hash: hash, seed_only: base, with_generated: ceiling };
            fs::write(&path, serde_json::to_vec_pretty(&record).expect("encode"))
                .expect("write baseline");
        }
    }

    println!(
        "check 8 pass: success {base:.3} seed-only vs {ceiling:.3} with 300 generated \
         (3 seeds x 200 rollouts, margin {:.3}), {:.0} s",
        ceiling - base,
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 9. Pipeline reproducibility.
// ---------------------------------------------------------------------------

#[test]
fn c9_pipeline_reproducibility() {
    let ds = dataset();
    let t0 = Instant::now();
    let cfg_b = config_for("run_b");
    let report = run_synthesis(&cfg_b).expect("second full run");
    assert!(report.failures.is_empty(), "run B skipped items: {:?}", report.failures);
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 2.0 * 3600.0, "second run took {secs:.0} s, budget 7200 s");

    let (root_a, root_b) = (config_for("run_a").output, cfg_b.output);
    assert_eq!(
        file_bytes(&manifest_path(&root_a)),
        file_bytes(&manifest_path(&root_b)),
        "manifests differ between identical runs"
    );
    let mut files = 0usize;
    for entry in &ds.manifest.entries {
        for rel in [&entry.trajectory, &entry.frames, &entry.scene, &entry.keys] {
            assert_eq!(
                file_bytes(&root_a.join(rel)),
                file_bytes(&root_b.join(rel)),
                "{rel} differs between identical runs"
            );
            files += 1;
        }
    }
    println!(
        "check 9 pass: two full synthesize runs bit-identical \
         ({} entries, {files} files compared), second run {secs:.0} s",
        ds.manifest.entries.len()
    );
}
