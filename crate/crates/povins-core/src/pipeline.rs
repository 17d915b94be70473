//! End-to-end pipelines behind the CLI: dataset generation, the full
//! filtering loop (propagate -> augment -> update -> keyframe/loop stage),
//! and metric evaluation. Single-process; state commits are strictly
//! ordered by image timestamp.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix6, UnitQuaternion};

use crate::config::{Config, NoiseProfile, TrajectoryChoice};
use crate::error::{Error, Result};
use crate::evaluation::{self, RpeStats, TrajectoryFile, TrajectoryRecord};
use crate::io::{self, LoopMatchRecord, TrackRecord};
use crate::loop_closure::{
    covisible_keyframes, detect_loop, geometric_verify, keyframe_decision, map_residual_batch,
    DetectorConfig, FrameStats, ImplicitMap, Keypoint, KeyframeRecord, KeyframeThresholds,
    RansacConfig,
};
use crate::propagation::{
    continuous_jacobians, discretize, propagate_covariance, propagate_mean, ImuSample,
    NoiseDensities,
};
use crate::simulator::{
    gen_groundtruth, sim_imu, sim_tracks, true_imu_state, TrajectoryKind, TrajectorySpec,
    WorldNoise, WorldSpec, GRAVITY,
};
use crate::state::{
    EstimationContext, ExtrinsicState, FrameId, FullState, ImuState, IMU_DIM, POSE_DIM,
};
use crate::update::{
    build_batch, chi2_gate, compress, ekf_update, UpdatePolicy, UpdateReport,
};
use crate::vision::{Eye, FeatureTrack, NormalizedObservation};

// --- configuration plumbing ---

pub fn trajectory_spec(cfg: &Config) -> TrajectorySpec {
    let s = &cfg.simulation;
    match s.trajectory {
        TrajectoryChoice::Circle => TrajectorySpec::circle(s.duration, s.speed, s.scale, cfg.seed),
        TrajectoryChoice::FigureEight => {
            TrajectorySpec::figure_eight(s.duration, s.speed, s.scale, cfg.seed)
        }
        TrajectoryChoice::Spline => TrajectorySpec {
            kind: TrajectoryKind::WaypointSpline,
            duration: s.duration,
            speed: s.speed,
            loop_revisit: false,
            seed: cfg.seed,
            scale: s.scale,
            tilt_amplitude: 0.12,
            height_amplitude: 0.4,
        },
    }
}

pub fn world_noise(profile: NoiseProfile) -> WorldNoise {
    match profile {
        NoiseProfile::Noiseless => WorldNoise::noiseless(),
        NoiseProfile::Typical => WorldNoise::typical(),
        NoiseProfile::Harsh => WorldNoise::harsh(),
    }
}

/// Process/measurement noise the filter assumes. Noiseless data still needs
/// non-degenerate covariances, so tiny floors stand in for exact zeros.
pub fn filter_noise(profile: NoiseProfile) -> (NoiseDensities, f64) {
    let w = world_noise(profile);
    let floor = |v: f64, f: f64| if v > 0.0 { v } else { f };
    (
        NoiseDensities {
            sigma_g: floor(w.imu.sigma_g, 1e-6),
            sigma_a: floor(w.imu.sigma_a, 1e-6),
            sigma_wg: floor(w.imu.sigma_wg, 1e-8),
            sigma_wa: floor(w.imu.sigma_wa, 1e-8),
        },
        floor(w.pixel_sigma, 1e-6),
    )
}

pub fn update_policy(cfg: &Config) -> UpdatePolicy {
    UpdatePolicy {
        min_parallax: cfg.filter.min_parallax,
        eps_depth: cfg.filter.eps_depth,
        calibrate_extrinsics: cfg.features.enable_extrinsic_calibration,
        use_ray_residuals: cfg.features.enable_ray_residuals,
        gate_prob: cfg.filter.gate_prob,
        propagate_obs_noise: cfg.filter.propagate_obs_noise,
    }
}

fn detector_config(cfg: &Config) -> DetectorConfig {
    DetectorConfig {
        min_gap_frames: cfg.loop_closure.min_gap_frames,
        min_matches: cfg.loop_closure.min_matches,
        false_positive_rate: 0.0,
        seed: cfg.seed,
    }
}

fn ransac_config(cfg: &Config) -> RansacConfig {
    RansacConfig {
        iterations: cfg.loop_closure.ransac_iterations,
        epipolar_thresh: cfg.loop_closure.epipolar_thresh,
        reproj_thresh: cfg.loop_closure.reproj_thresh,
        min_inliers: cfg.loop_closure.min_inliers,
        seed: cfg.seed,
    }
}

fn keyframe_thresholds(cfg: &Config) -> KeyframeThresholds {
    KeyframeThresholds {
        parallax: cfg.loop_closure.keyframe_parallax,
        min_tracked: cfg.loop_closure.keyframe_min_tracked,
        pose_delta: cfg.loop_closure.keyframe_pose_delta,
    }
}

// --- initialization ---

/// One-sigma initial uncertainties, diagonal P0.
#[derive(Debug, Clone, Copy)]
pub struct InitUncertainty {
    pub rot: f64,
    pub vel: f64,
    pub pos: f64,
    pub bg: f64,
    pub ba: f64,
    pub ext_rot: f64,
    pub ext_pos: f64,
}

impl InitUncertainty {
    pub fn noiseless() -> Self {
        InitUncertainty {
            rot: 1e-5,
            vel: 1e-5,
            pos: 1e-5,
            bg: 1e-6,
            ba: 1e-6,
            ext_rot: 1e-6,
            ext_pos: 1e-6,
        }
    }

    pub fn typical() -> Self {
        InitUncertainty {
            rot: 2e-3,
            vel: 5e-3,
            pos: 1e-3,
            bg: 2e-3,
            ba: 2e-2,
            ext_rot: 2e-3,
            ext_pos: 2e-3,
        }
    }

    pub fn for_profile(profile: NoiseProfile) -> Self {
        match profile {
            NoiseProfile::Noiseless => InitUncertainty::noiseless(),
            NoiseProfile::Typical => InitUncertainty::typical(),
            // biases on a low-grade IMU are both larger and less repeatable
            NoiseProfile::Harsh => InitUncertainty {
                bg: 1e-2,
                ba: 5e-2,
                ..InitUncertainty::typical()
            },
        }
    }
}

pub fn initial_context(
    imu: ImuState,
    extrinsics: ExtrinsicState,
    unc: &InitUncertainty,
    max_clones: usize,
    max_keyframes: usize,
) -> EstimationContext {
    let state = FullState::new(imu, extrinsics);
    let dim = state.error_dim();
    let mut cov = DMatrix::zeros(dim, dim);
    let sig = [
        unc.rot, unc.rot, unc.rot, unc.vel, unc.vel, unc.vel, unc.pos, unc.pos, unc.pos, unc.bg,
        unc.bg, unc.bg, unc.ba, unc.ba, unc.ba,
    ];
    for (i, s) in sig.iter().enumerate() {
        cov[(i, i)] = s * s;
    }
    let ex = IMU_DIM; // no clones yet
    for eye in 0..2 {
        for k in 0..3 {
            let at = ex + POSE_DIM * eye + k;
            cov[(at, at)] = unc.ext_rot * unc.ext_rot;
            cov[(at + 3, at + 3)] = unc.ext_pos * unc.ext_pos;
        }
    }
    EstimationContext::new(state, cov, max_clones, max_keyframes)
}

// --- IMU propagation over an interval ---

fn lerp_sample(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
    let span = b.timestamp - a.timestamp;
    let tau = if span > 0.0 { (t - a.timestamp) / span } else { 0.0 };
    ImuSample {
        timestamp: t,
        omega: a.omega.lerp(&b.omega, tau),
        accel: a.accel.lerp(&b.accel, tau),
    }
}

/// Propagate mean + covariance from the context's current time `t0` to
/// `t1`, stepping at the IMU sample boundaries in between.
fn propagate_to(
    ctx: &mut EstimationContext,
    samples: &[ImuSample],
    cursor: &mut usize,
    t0: f64,
    t1: f64,
    noise: &NoiseDensities,
) -> Result<()> {
    const EPS: f64 = 1e-9;
    let mut t_cur = t0;
    while t_cur < t1 - EPS {
        while *cursor + 1 < samples.len() && samples[*cursor + 1].timestamp <= t_cur + EPS {
            *cursor += 1;
        }
        if *cursor + 1 >= samples.len() {
            return Err(Error::Numerical(format!(
                "IMU stream ends at {} before image time {t1}",
                samples.last().map(|s| s.timestamp).unwrap_or(0.0)
            )));
        }
        let (a, b) = (&samples[*cursor], &samples[*cursor + 1]);
        let t_end = b.timestamp.min(t1);
        let s0 = lerp_sample(a, b, t_cur);
        let s1 = lerp_sample(a, b, t_end);
        let dt = t_end - t_cur;
        let (f, g) = continuous_jacobians(&ctx.state.imu, &GRAVITY, &nalgebra::Vector3::zeros());
        let (phi, qd) = discretize(&f, &g, noise, dt)?;
        propagate_covariance(&mut ctx.cov, &phi, &qd);
        ctx.state.imu = propagate_mean(&ctx.state.imu, &s0, &s1, &GRAVITY);
        t_cur = t_end;
    }
    Ok(())
}

// --- the filtering loop ---

#[derive(Debug)]
pub struct RunOutput {
    pub trajectory: TrajectoryFile,
    /// [phi | dp] covariance of the inertial pose at each trajectory record
    pub pose_covs: Vec<Matrix6<f64>>,
    pub reports: Vec<UpdateReport>,
    pub loop_matches: Vec<LoopMatchRecord>,
    pub map: ImplicitMap,
    pub ctx: EstimationContext,
}

fn pose_cov6(cov: &DMatrix<f64>) -> Matrix6<f64> {
    let idx = [0usize, 1, 2, 6, 7, 8];
    Matrix6::from_fn(|r, c| cov[(idx[r], idx[c])])
}

struct TrackBuffer {
    observations: Vec<NormalizedObservation>,
    last_seen: FrameId,
}

fn merge_reports(frame: &mut UpdateReport, other: &UpdateReport) {
    let n1 = (frame.n_uv_rows + frame.n_ray_rows + frame.n_map_rows) as f64;
    let n2 = (other.n_uv_rows + other.n_ray_rows + other.n_map_rows) as f64;
    if n1 + n2 > 0.0 {
        frame.residual_rms = ((frame.residual_rms.powi(2) * n1
            + other.residual_rms.powi(2) * n2)
            / (n1 + n2))
            .sqrt();
    }
    frame.n_uv_rows += other.n_uv_rows;
    frame.n_ray_rows += other.n_ray_rows;
    frame.n_map_rows += other.n_map_rows;
    frame.cond_flag |= other.cond_flag;
    frame.accepted_tracks += other.accepted_tracks;
}

pub fn run_filter(
    cfg: &Config,
    init: ImuState,
    extrinsics: ExtrinsicState,
    unc: &InitUncertainty,
    imu: &[ImuSample],
    frames: &[(FrameId, f64)],
    tracks: &[TrackRecord],
) -> Result<RunOutput> {
    if frames.is_empty() {
        return Err(Error::Config("no image frames".into()));
    }
    let policy = update_policy(cfg);
    let (noise, pixel_sigma) = filter_noise(cfg.simulation.noise);
    let det_cfg = detector_config(cfg);
    let ransac_cfg = ransac_config(cfg);
    let kf_thresholds = keyframe_thresholds(cfg);

    let mut ctx = initial_context(
        init,
        extrinsics,
        unc,
        cfg.filter.max_clones,
        cfg.filter.max_keyframes,
    );

    // per-frame observation index
    let mut by_frame: BTreeMap<FrameId, Vec<&TrackRecord>> = BTreeMap::new();
    for r in tracks {
        by_frame.entry(r.frame_id).or_default().push(r);
    }

    let mut buffer: BTreeMap<u64, TrackBuffer> = BTreeMap::new();
    let mut map = ImplicitMap::new();
    let mut last_kf_record: Option<KeyframeRecord> = None;
    let mut last_loop_frame: Option<FrameId> = None;
    let mut out = RunOutput {
        trajectory: TrajectoryFile::default(),
        pose_covs: Vec::new(),
        reports: Vec::new(),
        loop_matches: Vec::new(),
        map: ImplicitMap::new(),
        ctx: initial_context(ImuState::identity(), ExtrinsicState::identity(), unc, 1, 1),
    };

    let mut cursor = 0usize;
    let mut t_prev = frames[0].1;
    let last_frame = frames.last().expect("frames non-empty").0;

    for &(frame_id, t) in frames {
        // 1. propagate to the image time
        propagate_to(&mut ctx, imu, &mut cursor, t_prev, t, &noise)?;
        t_prev = t;

        // 2. stochastic cloning of the current pose
        ctx.augment_clone(frame_id, t);

        // 3. ingest this frame's observations
        let empty = Vec::new();
        let obs_here = by_frame.get(&frame_id).unwrap_or(&empty);
        for r in obs_here {
            let entry = buffer.entry(r.track_id).or_insert_with(|| TrackBuffer {
                observations: Vec::new(),
                last_seen: frame_id,
            });
            entry.observations.push(NormalizedObservation {
                frame_id: r.frame_id,
                eye: r.eye,
                u: r.u,
                v: r.v,
            });
            entry.last_seen = frame_id;
        }

        // 4. consume tracks that ended or span the full window
        let mut finished = Vec::new();
        let ids: Vec<u64> = buffer.keys().copied().collect();
        for id in ids {
            let buf = &buffer[&id];
            let span = {
                let mut frames_seen: Vec<FrameId> =
                    buf.observations.iter().map(|o| o.frame_id).collect();
                frames_seen.dedup();
                frames_seen.len()
            };
            let lost = buf.last_seen < frame_id;
            let full = span >= cfg.filter.max_clones;
            if lost || full || frame_id == last_frame {
                let buf = buffer.remove(&id).expect("key just listed");
                if span >= 2 {
                    finished.push(FeatureTrack {
                        track_id: id,
                        observations: buf.observations,
                        sigma: pixel_sigma,
                    });
                }
            }
        }
        let batch = build_batch(&finished, &ctx.state, &policy);
        let gated = chi2_gate(&batch, &ctx.cov, policy.gate_prob);
        let mut report = ekf_update(&mut ctx, &compress(&gated), t)?;
        if std::env::var("POVINS_DBG").is_ok() && frame_id % 100 == 0 {
            let ex = &ctx.state.extrinsics.left;
            let off = ctx.state.extrinsic_offset();
            eprintln!(
                "EXTDBG f {frame_id} rows {}->{} p_cb [{:.4} {:.4} {:.4}] sig_rot {:.2e} sig_pos {:.2e}",
                batch.r.len(), gated.r.len(), ex.p_cb.x, ex.p_cb.y, ex.p_cb.z,
                ctx.cov[(off, off)].sqrt(), ctx.cov[(off + 3, off + 3)].sqrt()
            );
        }

        // 5. keyframe + loop-closure stage
        if cfg.features.enable_loop_closure {
            let left_here: Vec<&&TrackRecord> =
                obs_here.iter().filter(|r| r.eye == Eye::Left).collect();
            let parallax = last_kf_record
                .as_ref()
                .map(|kf| {
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for r in &left_here {
                        if let Some(kp) = kf.keypoint(Eye::Left, r.track_id) {
                            sum += ((r.u - kp.u).powi(2) + (r.v - kp.v).powi(2)).sqrt();
                            n += 1;
                        }
                    }
                    if n == 0 {
                        f64::INFINITY
                    } else {
                        sum / n as f64
                    }
                })
                .unwrap_or(f64::INFINITY);
            let pose_delta = ctx
                .state
                .keyframes
                .iter()
                .map(|k| (k.p - ctx.state.imu.p).norm())
                .fold(f64::INFINITY, f64::min);
            let stats = FrameStats {
                mean_parallax_vs_last_kf: parallax,
                n_tracked: left_here.len(),
                mean_pose_delta_vs_covis: pose_delta,
            };
            if keyframe_decision(&stats, &kf_thresholds) && !left_here.is_empty() {
                let kid = ctx.promote_clone_to_keyframe(frame_id)?;
                let record = KeyframeRecord {
                    keyframe_id: kid,
                    frame_id,
                    keypoints: obs_here
                        .iter()
                        .map(|r| Keypoint {
                            u: r.u,
                            v: r.v,
                            eye: r.eye,
                            association_key: r.track_id,
                        })
                        .collect(),
                };
                map.insert(record.clone())?;

                // loop detection on the fresh keyframe; a cooldown after an
                // accepted loop keeps the pipeline from re-paying the (large)
                // loop-update cost every keyframe while the correction holds
                let cooled_down = last_loop_frame
                    .map(|f| frame_id.saturating_sub(f) > cfg.loop_closure.cooldown_frames)
                    .unwrap_or(true);
                let candidates = if cooled_down {
                    detect_loop(&record, &map, &det_cfg)
                } else {
                    Vec::new()
                };
                if let Some(top) = candidates.first() {
                    if let Ok(mut verified) = geometric_verify(top, &map, &ctx.state, &ransac_cfg) {
                        verified.truncate(cfg.loop_closure.max_correspondences);
                        let loop_kfs =
                            covisible_keyframes(top.matched, &map, cfg.loop_closure.covisibility_k);
                        let batch = map_residual_batch(
                            frame_id,
                            &record,
                            &verified,
                            &loop_kfs,
                            &map,
                            &ctx.state,
                            &policy,
                        );
                        let gated = if cfg.loop_closure.use_chi2_gate {
                            chi2_gate(&batch, &ctx.cov, policy.gate_prob)
                        } else {
                            batch
                        };
                        let loop_report = ekf_update(&mut ctx, &compress(&gated), t)?;
                        merge_reports(&mut report, &loop_report);
                        last_loop_frame = Some(frame_id);
                        for vc in &verified {
                            out.loop_matches.push(LoopMatchRecord {
                                query_frame_id: frame_id,
                                match_keyframe_id: top.matched,
                                query_u: vc.corr.query_u,
                                query_v: vc.corr.query_v,
                                match_u: vc.corr.match_u,
                                match_v: vc.corr.match_v,
                            });
                        }
                    }
                }
                last_kf_record = Some(record);

                // keyframe budget: evict the most redundant keyframe (the
                // one covisible with the most others), newest first on ties,
                // protecting the one just created; this keeps the earliest
                // anchor at each revisited location, whose pose estimate
                // carries the least accumulated drift
                while map.len() > cfg.filter.max_keyframes {
                    let victim = map
                        .records()
                        .map(|r| r.keyframe_id)
                        .filter(|id| *id != kid)
                        .max_by_key(|id| {
                            let links = map
                                .records()
                                .filter(|o| o.keyframe_id != *id)
                                .filter(|o| map.covisibility(*id, o.keyframe_id) > 0)
                                .count();
                            (links, *id)
                        });
                    match victim {
                        Some(v) => {
                            map.remove(v);
                            ctx.evict_keyframe(v);
                        }
                        None => break,
                    }
                }
            }
        }

        out.reports.push(report);
        out.trajectory.records.push(TrajectoryRecord {
            timestamp: t,
            p: ctx.state.imu.p,
            q: ctx.state.imu.q,
        });
        out.pose_covs.push(pose_cov6(&ctx.cov));
    }

    out.map = map;
    out.ctx = ctx;
    Ok(out)
}

// --- dataset orchestration ---

pub struct DatasetPaths {
    pub dir: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DatasetPaths { dir: dir.into() }
    }
    pub fn imu(&self) -> PathBuf {
        self.dir.join("imu.csv")
    }
    pub fn tracks(&self) -> PathBuf {
        self.dir.join("tracks.csv")
    }
    pub fn frames(&self) -> PathBuf {
        self.dir.join("frames.csv")
    }
    pub fn groundtruth(&self) -> PathBuf {
        self.dir.join("groundtruth.txt")
    }
    pub fn init(&self) -> PathBuf {
        self.dir.join("init.txt")
    }
    pub fn extrinsics(&self) -> PathBuf {
        self.dir.join("extrinsics.txt")
    }
}

pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OutputPaths { dir: dir.into() }
    }
    pub fn trajectory(&self) -> PathBuf {
        self.dir.join("trajectory.txt")
    }
    pub fn reports(&self) -> PathBuf {
        self.dir.join("reports.csv")
    }
    pub fn loop_matches(&self) -> PathBuf {
        self.dir.join("loop_matches.csv")
    }
    pub fn keyframes(&self) -> PathBuf {
        self.dir.join("keyframes.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn nees(&self) -> PathBuf {
        self.dir.join("nees.csv")
    }
}

/// Generate a simulated dataset directory: IMU CSV, track file, frame
/// index, ground-truth trajectory, initial state, and extrinsics.
pub fn cmd_simulate(cfg: &Config) -> Result<DatasetPaths> {
    cfg.validate()?;
    let spec = trajectory_spec(cfg);
    spec.validate()?;
    let mut world = WorldSpec::desk_scale(world_noise(cfg.simulation.noise));
    world.landmark_count = cfg.simulation.landmark_count;
    let imu = sim_imu(&spec, &world, cfg.seed)?;
    let sim = sim_tracks(&spec, &world, cfg.seed)?;

    let paths = DatasetPaths::new(&cfg.paths.dataset_dir);
    fs::create_dir_all(&paths.dir)?;

    io::write_imu_csv(&paths.imu(), &imu.samples)?;
    // the stable landmark id becomes the on-disk track id so loop-closure
    // association keys survive visibility breaks
    let records: Vec<TrackRecord> = sim
        .observations
        .iter()
        .map(|o| TrackRecord {
            frame_id: o.frame_id,
            eye: o.eye,
            track_id: o.landmark_id,
            u: o.u,
            v: o.v,
        })
        .collect();
    io::write_tracks(&paths.tracks(), &records)?;
    let frames: Vec<(FrameId, f64)> = sim.frames.iter().map(|f| (f.frame_id, f.timestamp)).collect();
    io::write_frames(&paths.frames(), &frames)?;

    let gt = TrajectoryFile {
        records: sim
            .frames
            .iter()
            .map(|f| {
                let g = gen_groundtruth(&spec, f.timestamp)?;
                Ok(TrajectoryRecord {
                    timestamp: f.timestamp,
                    p: g.pose.translation,
                    q: UnitQuaternion::from_matrix(&g.pose.rotation),
                })
            })
            .collect::<Result<_>>()?,
    };
    io::write_trajectory(&paths.groundtruth(), &gt)?;
    io::write_init(&paths.init(), &true_imu_state(&spec, 0.0, world.init_bg, world.init_ba)?)?;
    io::write_extrinsics(&paths.extrinsics(), &world.camera.extrinsics)?;
    Ok(paths)
}

/// Run the filter over a dataset directory, writing the estimated
/// trajectory, per-frame reports, loop matches, and keyframe database.
pub fn cmd_run(cfg: &Config) -> Result<RunOutput> {
    cfg.validate()?;
    let paths = DatasetPaths::new(&cfg.paths.dataset_dir);
    let imu = io::read_imu_csv(&paths.imu())?;
    let tracks = io::read_tracks(&paths.tracks())?;
    let frames = io::read_frames(&paths.frames())?;
    let init = io::read_init(&paths.init())?;
    let extrinsics = io::read_extrinsics(&paths.extrinsics())?;
    let mut unc = InitUncertainty::for_profile(cfg.simulation.noise);
    if let Some(s) = cfg.filter.init_ext_rot {
        unc.ext_rot = s;
    }
    if let Some(s) = cfg.filter.init_ext_pos {
        unc.ext_pos = s;
    }

    let out = run_filter(cfg, init, extrinsics, &unc, &imu, &frames, &tracks)?;

    let outputs = OutputPaths::new(&cfg.paths.output_dir);
    fs::create_dir_all(&outputs.dir)?;
    io::write_trajectory(&outputs.trajectory(), &out.trajectory)?;
    io::write_reports(&outputs.reports(), &out.reports)?;
    io::write_loop_matches(&outputs.loop_matches(), &out.loop_matches)?;
    io::write_keyframe_database(&outputs.keyframes(), &out.map)?;
    Ok(out)
}

/// Evaluate an estimated trajectory against a reference, writing the
/// plot-ready metrics CSV. Returns (ATE RMSE, per-length RPE).
pub fn cmd_evaluate(
    cfg: &Config,
    est_path: &Path,
    ref_path: &Path,
) -> Result<(f64, Vec<RpeStats>)> {
    cfg.validate()?;
    let est = io::read_trajectory(est_path)?;
    let reference = io::read_trajectory(ref_path)?;
    let ate = evaluation::ate_rmse(&est, &reference, cfg.evaluation.alignment)?;
    let rpe = evaluation::rpe(&est, &reference, &cfg.evaluation.segment_lengths)?;
    let outputs = OutputPaths::new(&cfg.paths.output_dir);
    fs::create_dir_all(&outputs.dir)?;
    io::write_metrics_csv(&outputs.metrics(), ate, &rpe)?;
    Ok((ate, rpe))
}
