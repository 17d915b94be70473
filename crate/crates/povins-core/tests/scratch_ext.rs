use nalgebra::Vector3;
use povins_core::config::{Config, NoiseProfile, TrajectoryChoice};
use povins_core::geometry::quat_exp;
use povins_core::pipeline::*;
use povins_core::io;
use std::time::Instant;

fn ext_err(noise: NoiseProfile, seed: u64) -> (f64, f64) {
    let base = std::env::temp_dir().join(format!("povins-ext-{seed}-{noise:?}"));
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.paths.dataset_dir = base.join("dataset").display().to_string();
    cfg.paths.output_dir = base.join("output").display().to_string();
    cfg.simulation.noise = noise;
    cfg.simulation.trajectory = TrajectoryChoice::Circle;
    cfg.simulation.duration = 120.0;
    cfg.simulation.speed = 2.0;
    cfg.simulation.scale = 2.0;
    if noise == NoiseProfile::Noiseless { cfg.filter.gate_prob = 1.0; }
    cfg.features.enable_loop_closure = false;
    cfg.filter.init_ext_rot = Some(0.04);
    cfg.filter.init_ext_pos = Some(0.025);
    cmd_simulate(&cfg).unwrap();
    let ds = DatasetPaths::new(&cfg.paths.dataset_dir);
    let truth = io::read_extrinsics(&ds.extrinsics()).unwrap();
    let mut extr = truth.clone();
    // 2 degrees about a skew axis, 2 cm along another
    let axis = Vector3::new(1.0, 1.0, 1.0).normalize();
    let phi = axis * 2.0_f64.to_radians();
    let dp = Vector3::new(0.012, -0.012, 0.008);
    for cam in [&mut extr.left, &mut extr.right] {
        cam.q_cb = quat_exp(&phi) * cam.q_cb;
        cam.p_cb += dp;
    }
    io::write_extrinsics(&ds.extrinsics(), &extr).unwrap();
    let out = cmd_run(&cfg).unwrap();
    let mut worst = (0.0f64, 0.0f64);
    for (est, tru) in [(&out.ctx.state.extrinsics.left, &truth.left), (&out.ctx.state.extrinsics.right, &truth.right)] {
        let dq = est.q_cb * tru.q_cb.inverse();
        let ang = 2.0 * dq.scalar().abs().clamp(-1.0, 1.0).acos();
        let dt = (est.p_cb - tru.p_cb).norm();
        worst.0 = worst.0.max(ang.to_degrees());
        worst.1 = worst.1.max(dt);
    }
    worst
}

#[test]
fn probe_ext() {
    let t0 = Instant::now();
    let (a, d) = ext_err(NoiseProfile::Noiseless, 0);
    eprintln!("noiseless: {a:.4} deg, {:.4} cm ({:?})", d*100.0, t0.elapsed());
    for seed in [0u64, 1] {
        let t1 = Instant::now();
        let (a, d) = ext_err(NoiseProfile::Typical, seed);
        eprintln!("typical seed {seed}: {a:.4} deg, {:.4} cm ({:?})", d*100.0, t1.elapsed());
    }
}
