//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Positional arguments select criteria by number (`cargo test --test
//! acceptance -- 3 5`). Criterion 6 runs the reduced smoke configuration
//! unless `SYNCMV_DESK_RUN` names the output directory of
//! `scripts/desk_run.sh`, in which case the full desk run is judged from its
//! logs and reports.
#![allow(clippy::unnecessary_cast)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Point3, Rotation3, Vector3};

use syncmv::config::RunConfig;
use syncmv::denoiser::{synchronized_predict, Ablation, Denoiser, DenoiserConfig, ModelError};
use syncmv::geometry::{depth_range, epipolar_residual, fundamental_matrix, RingSpec};
use syncmv::metrics::{MetricsReport, Summary};
use syncmv::params::Bound;
use syncmv::pipeline::{instance_rng, oracle_check, sample_views};
use syncmv::scheduler::{
    ddim_update, ddpm_step, ddpm_update, q_sample, training_loss, Conditioning, MultiviewState, NoisePredictor,
    NoiseSchedule, ScheduleSpec, SchedulerError,
};
use syncmv::synthdata::{make_dataset, Dataset, ObjectParams};
use syncmv::tensor::check::{gradcheck, weighted_sum};
use syncmv::tensor::{Real, Rng, SamplePlan, Tape, Tensor, Var};
use syncmv::trainer::{read_log, window_mean, Checkpoint, RunPaths, Trainer};
use syncmv::volume::{build_spatial_volume, depth_attention, extract_view_features, gather_frustum};

/// One checked line of a criterion.
struct Check {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Report {
    checks: Vec<Check>,
}

impl Report {
    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }
}

type Criterion = fn(&mut Report);

fn main() {
    let criteria: [(&str, &str, Criterion); 8] = [
        ("1", "autodiff soundness", c1_autodiff),
        ("2", "forward-process marginals", c2_marginals),
        ("3", "synchronization oracle", c3_oracle),
        ("4", "single-view and DDIM degeneracy", c4_degeneracy),
        ("5", "geometry and epipolar suite", c5_geometry),
        ("6", "desk-scale learning and ablation", c6_learning),
        ("7", "determinism and persistence", c7_determinism),
        ("8", "zero-init contract", c8_zero_init),
    ];
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| s == id) {
            continue;
        }
        let start = Instant::now();
        let mut report = Report::default();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut report)));
        if let Err(e) = outcome {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report.check("completed without panicking", false, msg);
        }
        let pass = !report.checks.is_empty() && report.checks.iter().all(|c| c.pass);
        for c in &report.checks {
            println!("    [{}] {}: {}", if c.pass { "ok" } else { "FAILED" }, c.name, c.detail);
        }
        println!(
            "{} criterion {id} ({title}) in {:.1}s",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn tensor_err(e: ModelError) -> syncmv::tensor::TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

// ---------------------------------------------------------------- 1

fn c1_autodiff(r: &mut Report) {
    let tol = 1e-4;
    let mut rng = Rng::new(101);
    let mut randn = |shape: &[usize]| Tensor::randn(shape, &mut rng);
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> syncmv::tensor::Result<Var>>;
    let ws = |t: &mut Tape, v: syncmv::tensor::Result<Var>| weighted_sum(t, v?, 7);
    let bil = Arc::new(SamplePlan::bilinear(
        4,
        5,
        &[[0.3, 0.7], [2.5, 3.2], [-0.4, 1.5], [3.6, 4.4], [1.1, 0.2]],
    ));
    let tri = Arc::new(SamplePlan::trilinear(
        [3, 3, 4],
        &[[0.3, 0.7, 2.2], [1.5, 1.25, 0.5], [-0.5, 1.5, 3.5], [1.9, 0.1, 1.6]],
    ));
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("add", vec![randn(&[3, 4]), randn(&[3, 4])], Box::new(move |t, v| { let o = t.add(v[0], v[1]); ws(t, o) })),
        ("sub", vec![randn(&[3, 4]), randn(&[3, 4])], Box::new(move |t, v| { let o = t.sub(v[0], v[1]); ws(t, o) })),
        ("mul", vec![randn(&[3, 4]), randn(&[3, 4])], Box::new(move |t, v| { let o = t.mul(v[0], v[1]); ws(t, o) })),
        ("mul scalar broadcast", vec![randn(&[3, 4]), randn(&[])], Box::new(move |t, v| { let o = t.mul(v[0], v[1]); ws(t, o) })),
        ("add_scalar", vec![randn(&[5])], Box::new(move |t, v| { let o = t.add_scalar(v[0], 0.7); ws(t, o) })),
        ("scale", vec![randn(&[5])], Box::new(move |t, v| { let o = t.scale(v[0], -1.3); ws(t, o) })),
        ("silu", vec![randn(&[2, 6])], Box::new(move |t, v| { let o = t.silu(v[0]); ws(t, o) })),
        ("add_channel", vec![randn(&[3, 2, 4]), randn(&[3])], Box::new(move |t, v| { let o = t.add_channel(v[0], v[1]); ws(t, o) })),
        ("matmul", vec![randn(&[3, 4]), randn(&[4, 5])], Box::new(move |t, v| { let o = t.matmul(v[0], v[1]); ws(t, o) })),
        ("bmm", vec![randn(&[2, 3, 4]), randn(&[2, 4, 2])], Box::new(move |t, v| { let o = t.bmm(v[0], v[1], false); ws(t, o) })),
        ("bmm transposed", vec![randn(&[2, 3, 4]), randn(&[2, 5, 4])], Box::new(move |t, v| { let o = t.bmm(v[0], v[1], true); ws(t, o) })),
        (
            "conv 2d",
            vec![randn(&[2, 5, 6]), randn(&[3, 2, 3, 3]), randn(&[3])],
            Box::new(move |t, v| { let o = t.conv(v[0], v[1], Some(v[2])); ws(t, o) }),
        ),
        (
            "conv 3d",
            vec![randn(&[2, 3, 4, 3]), randn(&[2, 2, 3, 3, 3]), randn(&[2])],
            Box::new(move |t, v| { let o = t.conv(v[0], v[1], Some(v[2])); ws(t, o) }),
        ),
        (
            "group_norm",
            vec![randn(&[4, 3, 3]), randn(&[4]), randn(&[4])],
            Box::new(move |t, v| { let o = t.group_norm(v[0], 2, v[1], v[2], 1e-5); ws(t, o) }),
        ),
        ("softmax axis 1", vec![randn(&[3, 4, 2])], Box::new(move |t, v| { let o = t.softmax(v[0], 1); ws(t, o) })),
        ("softmax last axis", vec![randn(&[3, 5])], Box::new(move |t, v| { let o = t.softmax(v[0], 1); ws(t, o) })),
        ("grid_sample bilinear", vec![randn(&[3, 4, 5])], Box::new(move |t, v| { let o = t.grid_sample(v[0], &bil); ws(t, o) })),
        ("grid_sample trilinear", vec![randn(&[2, 3, 3, 4])], Box::new(move |t, v| { let o = t.grid_sample(v[0], &tri); ws(t, o) })),
        ("reshape", vec![randn(&[2, 6])], Box::new(move |t, v| { let o = t.reshape(v[0], &[3, 4]); ws(t, o) })),
        ("transpose", vec![randn(&[3, 5])], Box::new(move |t, v| { let o = t.transpose(v[0]); ws(t, o) })),
        (
            "concat",
            vec![randn(&[2, 3, 2]), randn(&[2, 1, 2])],
            Box::new(move |t, v| { let o = t.concat(&[v[0], v[1]], 1); ws(t, o) }),
        ),
        ("avg_pool2", vec![randn(&[2, 4, 6])], Box::new(move |t, v| { let o = t.avg_pool2(v[0]); ws(t, o) })),
        ("upsample2", vec![randn(&[2, 3, 2])], Box::new(move |t, v| { let o = t.upsample2(v[0]); ws(t, o) })),
        ("sum", vec![randn(&[3, 3])], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![randn(&[3, 3])], Box::new(|t, v| t.mean(v[0]))),
        ("mse", vec![randn(&[4, 2]), randn(&[4, 2])], Box::new(|t, v| t.mse(v[0], v[1]))),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (name, inputs, f) in &cases {
        let g = gradcheck(inputs, 1e-6, usize::MAX, 3, |t, v| f(t, v)).unwrap();
        if g.max_rel_err >= worst.0 {
            worst = (g.max_rel_err, name);
        }
        if g.max_rel_err >= tol {
            r.check(format!("op {name}"), false, format!("max rel err {:.2e}", g.max_rel_err));
        }
    }
    r.check(
        format!("{} differentiable ops", cases.len()),
        worst.0 < tol,
        format!("worst max rel err {:.2e} ({}) < 1e-4", worst.0, worst.1),
    );

    let ring = RingSpec {
        views: 2,
        elevation_deg: 30.0,
        radius: 1.5,
        image_size: 16,
    }
    .build(10f64.to_radians())
    .unwrap();
    for ablation in Ablation::ALL {
        let mut cfg = DenoiserConfig::tiny();
        cfg.ablation = ablation;
        let mut model = Denoiser::new(cfg.clone(), &mut Rng::new(20)).unwrap();
        // Move off the zero-initialized output layers so every path carries gradient.
        let mut rng = Rng::new(21);
        for (_, t) in model.params_mut().iter_mut() {
            let noise = Tensor::randn(t.shape(), &mut rng).scale(0.05);
            t.axpy(1.0, &noise).unwrap();
        }
        let geo = model.geometry(&ring).unwrap();
        let names: Vec<String> = model.params().names().map(String::from).collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| model.params().get(n).unwrap().clone()).collect();
        for _ in 0..3 {
            inputs.push(Tensor::randn(&[3, 16, 16], &mut rng));
        }
        let k = names.len();
        let g = gradcheck(&inputs, 1e-5, 6, 22, |tape, vars| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars[..k].iter().copied()));
            let out = synchronized_predict(tape, &bound, &cfg, &vars[k..k + 2], vars[k + 2], 37, &ring, geo.as_deref(), &[1])
                .map_err(tensor_err)?;
            weighted_sum(tape, out[0], 23)
        })
        .unwrap();
        r.check(
            format!("composite denoiser ({ablation})"),
            g.max_rel_err < tol,
            format!("{} probes over {k} parameter tensors and 3 images, max rel err {:.2e} < 1e-4", g.checked, g.max_rel_err),
        );
    }
}

// ---------------------------------------------------------------- 2

fn c2_marginals(r: &mut Report) {
    let sched = ScheduleSpec::DDPM.build().unwrap();
    let n = 100_000;
    let x0 = Tensor::new(&[n], vec![1.0; n]).unwrap();
    let mut rng = Rng::new(202);
    for t in [1usize, 100, 300] {
        let eps = Tensor::randn(&[n], &mut rng);
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let d = xt.data();
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let a = sched.alpha_bar(t);
        let (em, ev) = (a.sqrt(), 1.0 - a);
        let (rm, rv) = ((mean / em - 1.0).abs(), (var / ev - 1.0).abs());
        r.check(
            format!("t = {t}"),
            rm < 0.02 && rv < 0.02,
            format!("mean {mean:.5} vs {em:.5} ({:.2}%), var {var:.3e} vs {ev:.3e} ({:.2}%)", 100.0 * rm, 100.0 * rv),
        );
    }
    // Joint multiview state: noise enters each view independently.
    let views = Tensor::new(&[2, 1, 1, 1], vec![0.5, -0.5]).unwrap();
    let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let m = 20_000;
    for _ in 0..m {
        let eps = Tensor::randn(&[2, 1, 1, 1], &mut rng);
        let x = q_sample(&views, 300, &eps, &sched).unwrap();
        let (a, b) = (x.data()[0] as f64, x.data()[1] as f64);
        sa += a;
        sb += b;
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    let mf = m as f64;
    let corr = (sab / mf - sa * sb / mf / mf) / ((saa / mf - (sa / mf).powi(2)) * (sbb / mf - (sb / mf).powi(2))).sqrt();
    r.check("independent per-view noise", corr.abs() < 0.03, format!("cross-view corr {corr:.4}"));
}

// ---------------------------------------------------------------- 3

fn c3_oracle(r: &mut Report) {
    let c = oracle_check(2, 4, 0.8, 5000, 303).unwrap();
    r.check(
        "synchronized oracle, rho 0.8",
        (0.75..=0.85).contains(&c.synchronized),
        format!("empirical corr {:.4} in [0.75, 0.85]", c.synchronized),
    );
    r.check(
        "independent-view predictor",
        c.independent.abs() < 0.05,
        format!("empirical corr {:.4}, |corr| < 0.05", c.independent),
    );
}

// ---------------------------------------------------------------- 4

/// A smooth, view-coupled, timestep-dependent stand-in for a trained model.
struct Analytic;

impl NoisePredictor for Analytic {
    fn predict(&self, x_t: &Tensor, t: usize, _cond: &Conditioning<'_>) -> Result<Tensor, SchedulerError> {
        let mean = x_t.mean() as Real;
        let s = (t as Real * 0.013).sin() as Real;
        Ok(x_t.map(|v| (0.8 * v + 0.1 * mean + 0.05 * s).tanh()))
    }
}

/// Single-image reverse step written directly from the update rule.
fn vanilla_ddpm_step(x: &[f64], eps: &[f64], z: Option<&[f64]>, t: usize, s: &NoiseSchedule) -> Vec<f64> {
    let (a, ab, b) = (s.alpha(t), s.alpha_bar(t), s.beta(t));
    x.iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (&xi, &ei))| {
            let mean = (xi - b / (1.0 - ab).sqrt() * ei) / a.sqrt();
            match z {
                Some(z) if t > 1 => mean + s.sigma(t) * z[i],
                _ => mean,
            }
        })
        .collect()
}

fn c4_degeneracy(r: &mut Report) {
    let sched = ScheduleSpec::DDPM.build().unwrap();
    let shape = [1, 3, 4, 4];
    let cond = Conditioning::default();

    // (a) N = 1 multiview chain against the single-image update.
    let mut rng_mv = Rng::new(404);
    let mut rng_v = Rng::new(404);
    let mut state = MultiviewState {
        x: Tensor::randn(&shape, &mut rng_mv),
        t: sched.steps(),
    };
    let mut x: Vec<f64> = Tensor::randn(&shape[1..], &mut rng_v).data().iter().map(|&v| v as f64).collect();
    let mut worst: f64 = 0.0;
    while state.t > 0 {
        let t = state.t;
        let single = Tensor::new(&shape[1..], x.iter().map(|&v| v as Real).collect()).unwrap();
        let eps: Vec<f64> = Analytic.predict(&single, t, &cond).unwrap().data().iter().map(|&v| v as f64).collect();
        let z: Option<Vec<f64>> = (t > 1).then(|| Tensor::randn(&shape[1..], &mut rng_v).data().iter().map(|&v| v as f64).collect());
        x = vanilla_ddpm_step(&x, &eps, z.as_deref(), t, &sched);
        state = ddpm_step(&state, &Analytic, &cond, &sched, &mut rng_mv).unwrap();
        let d = state.x.data().iter().zip(&x).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    r.check(
        "N = 1 multiview DDPM vs single-view DDPM",
        worst < 1e-12,
        format!("max per-step diff {worst:.2e} over {} steps (< 1e-12)", sched.steps()),
    );

    // (b) DDIM with stride 1 against noise-free DDPM, both from the same
    // state at every step of a noise-free DDPM chain.
    let step_diff = |pred: &dyn NoisePredictor| -> f64 {
        let mut rng = Rng::new(405);
        let mut x = Tensor::randn(&shape, &mut rng);
        let mut worst: f64 = 0.0;
        for t in (1..=sched.steps()).rev() {
            let eps = pred.predict(&x, t, &cond).unwrap();
            let ddpm = ddpm_update(&x, &eps, t, None, &sched).unwrap();
            let ddim = ddim_update(&x, &eps, t, t - 1, &sched).unwrap();
            worst = worst.max(ddpm.max_abs_diff(&ddim) as f64);
            x = ddpm;
        }
        worst
    };
    let zero = step_diff(&syncmv::scheduler::ZeroPredictor);
    r.check(
        "DDIM(T) vs noise-free DDPM, zero predictor",
        zero < 1e-8,
        format!("max per-step diff {zero:.2e} (< 1e-8)"),
    );
    let learned = step_diff(&Analytic);
    r.check(
        "DDIM(T) vs noise-free DDPM, nontrivial predictor",
        learned < 1e-8,
        format!(
            "max per-step diff {learned:.2e} (< 1e-8 required); the two updates differ by \
             sqrt(1-abar_(t-1)) * (1 - sqrt(alpha_t (1-abar_(t-1)) / (1-abar_t))) * eps"
        ),
    );
}

// ---------------------------------------------------------------- 5

fn c5_geometry(r: &mut Report) {
    let spec = RingSpec::desk();
    let ring = spec.build(17f64.to_radians()).unwrap();
    let size = spec.image_size as f64;
    let (near, far) = depth_range(spec.radius);
    let mut rng = Rng::new(505);

    let mut worst_epi: f64 = 0.0;
    let mut pairs = 0;
    for (i, ci) in ring.targets.iter().enumerate() {
        for (j, cj) in ring.targets.iter().enumerate() {
            if i == j {
                continue;
            }
            let f = fundamental_matrix(ci, cj).unwrap();
            for _ in 0..1000 {
                let (u, v) = (rng.uniform_range(0.0, size), rng.uniform_range(0.0, size));
                let d = rng.uniform_range(near, far);
                let p = cj.project(&ci.unproject(u, v, d));
                worst_epi = worst_epi.max(epipolar_residual(&f, (u, v), (p.u, p.v)).abs());
            }
            pairs += 1;
        }
    }
    r.check(
        "epipolar constraint",
        worst_epi < 1e-6,
        format!("max |x_j^T F x_i| {worst_epi:.2e} over {pairs} ordered pairs x 1000 frustum points (< 1e-6)"),
    );

    let mut worst_rt: f64 = 0.0;
    for cam in ring.targets.iter().chain([&ring.input]) {
        for _ in 0..1000 {
            let x = Point3::new(rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5));
            let p = cam.project(&x);
            worst_rt = worst_rt.max((cam.unproject(p.u, p.v, p.depth) - x).norm());
            let (u, v, d) = (rng.uniform_range(0.0, size), rng.uniform_range(0.0, size), rng.uniform_range(near, far));
            let q = cam.project(&cam.unproject(u, v, d));
            worst_rt = worst_rt.max((q.u - u).abs().max((q.v - v).abs()).max((q.depth - d).abs()));
        }
    }
    r.check("projection round trips", worst_rt < 1e-9, format!("max error {worst_rt:.2e} (< 1e-9)"));

    let n = ring.len();
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::TAU / n as f64);
    let mut worst_sym: f64 = 0.0;
    for k in 0..n {
        let (a, b) = (&ring.targets[k], &ring.targets[(k + 1) % n]);
        for _ in 0..200 {
            let x = Point3::new(rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5));
            let (p, q) = (a.project(&x), b.project(&(rot * x)));
            worst_sym = worst_sym.max((p.u - q.u).abs().max((p.v - q.v).abs()).max((p.depth - q.depth).abs()));
        }
    }
    let rotated = ring.rotated(3);
    let same_set = (0..n).all(|k| rotated.targets[k] == ring.targets[(k + 3) % n]);
    r.check(
        "ring-rotation symmetry",
        worst_sym < 1e-12 && same_set,
        format!("slot k+1 sees the world rotated by 2pi/N as slot k sees it, max diff {worst_sym:.2e} (< 1e-12)"),
    );
}

// ---------------------------------------------------------------- 6

/// Initial window `[0, steps/25)` and final window `[4·steps/5, steps)`:
/// `[0, 200)` and `[4000, 5000)` for a 5000-step run.
fn windows(steps: usize) -> ((usize, usize), (usize, usize)) {
    ((0, steps / 25), (4 * steps / 5, steps))
}

fn loss_drop(log: &[(usize, f64)], steps: usize) -> (f64, f64, String) {
    let ((a0, a1), (b0, b1)) = windows(steps);
    let first = window_mean(log, a0, a1).unwrap();
    let last = window_mean(log, b0, b1).unwrap();
    (first, last, format!("mean loss [{b0}, {b1}) {last:.4} vs [{a0}, {a1}) {first:.4}, ratio {:.3} < 0.5", last / first))
}

fn c6_learning(r: &mut Report) {
    match std::env::var_os("SYNCMV_DESK_RUN") {
        Some(dir) => c6_desk(r, &PathBuf::from(dir)),
        None => c6_smoke(r),
    }
}

fn c6_smoke(r: &mut Report) {
    let cfg = RunConfig::smoke();
    let data = make_dataset(cfg.data.count, cfg.data.seed, &cfg.ring, &cfg.data.objects).unwrap();
    let dir = tempfile::tempdir().unwrap();

    // Determinism: two fresh runs agree bit for bit over their first steps.
    let sched = cfg.schedule.build().unwrap();
    let mut a = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.schedule, cfg.ring).unwrap();
    let mut b = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.schedule, cfg.ring).unwrap();
    let mut same = true;
    for _ in 0..5 {
        let (sa, sb) = (a.step(&data, &sched).unwrap(), b.step(&data, &sched).unwrap());
        same &= sa.loss.to_bits() == sb.loss.to_bits();
    }
    same &= a.checkpoint().to_bytes().unwrap() == b.checkpoint().to_bytes().unwrap();
    r.check("smoke determinism", same, "two runs with the same seed are bit-identical after 5 steps");
    drop((a, b));

    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.schedule, cfg.ring).unwrap();
    let paths = RunPaths {
        dir: dir.path().join("smoke"),
    };
    trainer.run(&data, &paths, |_, _| {}).unwrap();
    let log = read_log(&paths.log()).unwrap();
    let (first, last, detail) = loss_drop(&log, cfg.train.steps);
    r.check(
        "smoke (a): windowed loss",
        last < 0.5 * first,
        format!(
            "{} objects, {} steps in {:.0}s: {detail}",
            cfg.data.count,
            cfg.train.steps,
            start.elapsed().as_secs_f64()
        ),
    );
}

fn read_report(path: &Path) -> MetricsReport {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut report = MetricsReport::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        // Rebuild from min/max/mean; only the per-object means are used below.
        report.push(cols[0].parse().unwrap(), cols[1], cols[5].parse().unwrap());
    }
    report
}

fn summary_line(s: Option<Summary>) -> String {
    s.map(|s| format!("min {:.4} max {:.4} mean {:.4}", s.min, s.max, s.mean)).unwrap_or_default()
}

fn c6_desk(r: &mut Report, dir: &Path) {
    let cfg = RunConfig::default();
    for ab in Ablation::ALL {
        let log = read_log(&dir.join("runs").join(ab.as_str()).join("train_log.csv")).unwrap();
        assert_eq!(log.len(), cfg.train.steps, "{ab}: incomplete log");
        let (first, last, detail) = loss_drop(&log, cfg.train.steps);
        r.check(format!("(a) windowed loss, {ab}"), last < 0.5 * first, detail);
    }
    let reports = dir.join("reports");
    let base = read_report(&reports.join("baseline.csv"));
    let attn = read_report(&reports.join("attention.csv"));
    let full = std::fs::read_to_string(reports.join("attention.csv")).unwrap();
    let seeds: usize = full.lines().nth(1).and_then(|l| l.split(',').nth(2)).unwrap().parse().unwrap();
    let (pa, pb) = (attn.mean_of("psnr").unwrap(), base.mean_of("psnr").unwrap());
    r.check(
        "(b) PSNR above replicate-input baseline",
        pa > pb,
        format!(
            "attention mean PSNR {pa:.3} dB over {seeds} seeds (per-object means: {}) vs baseline {pb:.3} dB",
            summary_line(attn.overall("psnr"))
        ),
    );
    let ra = attn.mean_of("reprojection").unwrap();
    for ab in [Ablation::FlattenDepth, Ablation::None] {
        let other = read_report(&reports.join(format!("{}.csv", ab.as_str())));
        let ro = other.mean_of("reprojection").unwrap();
        r.check(
            format!("(c) reprojection error, attention vs {ab}"),
            ra < ro,
            format!(
                "attention {ra:.4} vs {ab} {ro:.4} (PSNR {:.3} dB); same eval objects and seeds",
                other.mean_of("psnr").unwrap()
            ),
        );
    }
    r.check(
        "reprojection error of the baseline",
        true,
        format!("replicate-input baseline {:.4}", base.mean_of("reprojection").unwrap()),
    );
}

// ---------------------------------------------------------------- 7

fn tiny_ring() -> RingSpec {
    RingSpec {
        views: 2,
        elevation_deg: 30.0,
        radius: 1.5,
        image_size: 16,
    }
}

fn tiny_trainer(steps: usize) -> Trainer {
    let mut t = syncmv::trainer::TrainConfig {
        steps,
        batch_size: 2,
        seed: 77,
        ..Default::default()
    };
    t.checkpoint_every = 0;
    Trainer::new(DenoiserConfig::tiny(), t, ScheduleSpec::DESK, tiny_ring()).unwrap()
}

fn dataset_bytes(d: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    d.write_to(&mut out).unwrap();
    out
}

fn c7_determinism(r: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let params = ObjectParams::default();

    let a = make_dataset(12, 9, &RingSpec::desk(), &params).unwrap();
    let b = make_dataset(12, 9, &RingSpec::desk(), &params).unwrap();
    let bytes = dataset_bytes(&a);
    r.check("datasets", bytes == dataset_bytes(&b), "same seed gives identical dataset bytes");

    let path = dir.path().join("d.bin");
    a.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    r.check(
        "dataset file round trip",
        back == a && dataset_bytes(&back) == bytes && std::fs::read(&path).unwrap() == bytes,
        format!("{} bytes", bytes.len()),
    );

    let data = make_dataset(3, 4, &tiny_ring(), &params).unwrap();
    let run = |name: &str| {
        let paths = RunPaths {
            dir: dir.path().join(name),
        };
        let ck = tiny_trainer(6).run(&data, &paths, |_, _| {}).unwrap();
        (ck, std::fs::read(paths.log()).unwrap())
    };
    let (ck1, log1) = run("t1");
    let (ck2, log2) = run("t2");
    let ck_bytes = ck1.to_bytes().unwrap();
    r.check(
        "training trajectories",
        ck_bytes == ck2.to_bytes().unwrap() && log1 == log2,
        "identical loss logs and final checkpoints",
    );

    let ck_path = dir.path().join("t1").join("checkpoint.bin");
    let loaded = Checkpoint::load(&ck_path, None).unwrap();
    r.check(
        "checkpoint file round trip",
        loaded == ck1 && loaded.to_bytes().unwrap() == ck_bytes && std::fs::read(&ck_path).unwrap() == ck_bytes,
        format!("{} bytes", ck_bytes.len()),
    );

    // Interrupt after 3 steps, resume from the saved checkpoint.
    let part = RunPaths {
        dir: dir.path().join("part"),
    };
    let mut short = tiny_trainer(6);
    let sched = short.schedule.build().unwrap();
    for _ in 0..3 {
        short.step(&data, &sched).unwrap();
    }
    short.checkpoint().save(&part.checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&part.checkpoint(), None).unwrap()).unwrap();
    let ck3 = resumed.run(&data, &part, |_, _| {}).unwrap();
    // Rows for steps 3.. of the uninterrupted log, and the resumed log's rows.
    let rows = |log: &[u8], skip: usize| String::from_utf8(log.to_vec()).unwrap().lines().skip(skip).map(String::from).collect::<Vec<_>>();
    r.check(
        "resume",
        ck3.to_bytes().unwrap() == ck_bytes && rows(&std::fs::read(part.log()).unwrap(), 1) == rows(&log1, 4),
        "resumed run ends with the uninterrupted run's checkpoint and log rows",
    );

    let model = ck1.denoiser().unwrap();
    let s = &data.samples[0];
    let ring = tiny_ring().build(s.input_elevation).unwrap();
    let input = s.input_tensor(16);
    let dsched = ScheduleSpec::DESK.build().unwrap();
    let x = sample_views(&model, &dsched, &ring, &input, 10, &mut instance_rng(5, 0)).unwrap();
    let y = sample_views(&model, &dsched, &ring, &input, 10, &mut instance_rng(5, 0)).unwrap();
    let z = sample_views(&model, &dsched, &ring, &input, 10, &mut instance_rng(6, 0)).unwrap();
    r.check("sampled images", x == y && x != z, "same seed gives identical views, a different seed does not");
}

// ---------------------------------------------------------------- 8

fn c8_zero_init(r: &mut Report) {
    let cfg = DenoiserConfig::desk();
    let model = Denoiser::new(cfg.clone(), &mut Rng::new(808)).unwrap();
    let spec = RingSpec::desk();
    let data = make_dataset(16, 808, &spec, &ObjectParams::default()).unwrap();
    let ring = spec.build(data.samples[0].input_elevation).unwrap();
    let geo = model.geometry(&ring).unwrap().unwrap();

    let mut rng = Rng::new(809);
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let views: Vec<Var> = (0..spec.views).map(|_| tape.constant(Tensor::randn(&[3, 32, 32], &mut rng))).collect();
    let t_emb = syncmv::denoiser::time_embed(&mut tape, &p, &cfg, 60).unwrap();
    let feats = extract_view_features(&mut tape, &p, &views, t_emb).unwrap();
    let vol = build_spatial_volume(&mut tape, &p, &feats, &geo, cfg.norm_groups).unwrap();
    let mut layers = 0;
    let mut max_abs: f64 = 0.0;
    for level in cfg.attention_levels.clone() {
        let size = cfg.image_size >> level;
        let frustum = gather_frustum(&mut tape, &vol, &geo, level, 2).unwrap();
        for side in ["down", "up"] {
            let feature = tape.constant(Tensor::randn(&[cfg.level_channels(level), size, size], &mut rng));
            let out = depth_attention(&mut tape, &p, &format!("unet.{side}{level}.attn"), feature, &frustum).unwrap();
            max_abs = max_abs.max(tape.value(out.residual).data().iter().fold(0.0, |m, &v| m.max(v.abs() as f64)));
            layers += 1;
        }
    }
    r.check(
        "attention residuals",
        max_abs == 0.0 && layers > 0,
        format!("max |residual| {max_abs:e} over {layers} depth-attention layers of an untrained desk model"),
    );

    let sched = ScheduleSpec::DESK.build().unwrap();
    let mut rng = Rng::new(810);
    let mut losses = Vec::new();
    for _ in 0..2 {
        for s in &data.samples {
            let ring = spec.build(s.input_elevation).unwrap();
            let input = s.input_tensor(32);
            let cond = Conditioning::new(&input, &ring);
            losses.push(training_loss(&s.targets_tensor(32), &model, &cond, &sched, &mut rng).unwrap());
        }
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    r.check(
        "untrained loss",
        (mean - 1.0).abs() <= 0.03,
        format!("mean over {} draws {mean:.4}, within 1.0 +/- 3%", losses.len()),
    );
}
