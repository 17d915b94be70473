//! Synthetic world generation: analytic trajectories with exact derivatives,
//! IMU streams with white noise and bias random walks, and stereo feature
//! tracks with stable association keys for loop-closure experiments.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::propagation::{ImuSample, NoiseDensities};
use crate::state::{CameraExtrinsic, ExtrinsicState, FrameId, ImuState};
use crate::vision::{camera_frame, Eye};

pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Circle,
    FigureEight,
    WaypointSpline,
}

#[derive(Debug, Clone)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub speed: f64,
    /// request the path to repeat (at least two passes within `duration`)
    pub loop_revisit: bool,
    pub seed: u64,
    /// radius (circle), lobe half-width (figure-eight), ring radius (spline)
    pub scale: f64,
    /// roll/pitch oscillation amplitude, rad
    pub tilt_amplitude: f64,
    /// vertical bob amplitude, m
    pub height_amplitude: f64,
}

impl TrajectorySpec {
    pub fn circle(duration: f64, speed: f64, radius: f64, seed: u64) -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Circle,
            duration,
            speed,
            loop_revisit: false,
            seed,
            scale: radius,
            tilt_amplitude: 0.12,
            height_amplitude: 0.4,
        }
    }

    pub fn figure_eight(duration: f64, speed: f64, scale: f64, seed: u64) -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::FigureEight,
            duration,
            speed,
            loop_revisit: true,
            seed,
            scale,
            tilt_amplitude: 0.12,
            height_amplitude: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration <= 0.0 {
            return Err(Error::Config("trajectory duration must be positive".into()));
        }
        if self.speed < 0.0 || self.scale <= 0.0 {
            return Err(Error::Config("trajectory speed/scale invalid".into()));
        }
        Ok(())
    }

    /// fundamental angular frequency of the path parameter
    fn omega_path(&self) -> f64 {
        let base = self.speed / self.scale;
        if !self.loop_revisit {
            return base;
        }
        // snap so the duration holds an exact integer number (>= 2) of
        // periods: revisit passes then repeat the pose exactly
        let two_pi = 2.0 * std::f64::consts::PI;
        let k = ((self.duration * base / two_pi).round() as i64).max(2) as f64;
        k * two_pi / self.duration
    }

    /// time after which the path (and the full pose) repeats exactly
    pub fn revisit_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega_path()
    }
}

/// Position, velocity, acceleration of the body origin in the world frame.
#[derive(Debug, Clone, Copy)]
struct Kinematics {
    p: Vector3<f64>,
    v: Vector3<f64>,
    a: Vector3<f64>,
}

fn translation_kinematics(spec: &TrajectorySpec, t: f64) -> Kinematics {
    let w = spec.omega_path();
    let u = w * t;
    let h = spec.height_amplitude;
    // the bob shares the path period so revisit poses repeat exactly
    let wz = w;
    match spec.kind {
        TrajectoryKind::Circle => {
            let r = spec.scale;
            Kinematics {
                p: Vector3::new(r * u.cos(), r * u.sin(), h * (wz * t).sin()),
                v: Vector3::new(-r * w * u.sin(), r * w * u.cos(), h * wz * (wz * t).cos()),
                a: Vector3::new(
                    -r * w * w * u.cos(),
                    -r * w * w * u.sin(),
                    -h * wz * wz * (wz * t).sin(),
                ),
            }
        }
        TrajectoryKind::FigureEight => {
            // Gerono lemniscate: x = A sin u, y = (A/2) sin 2u
            let a = spec.scale;
            Kinematics {
                p: Vector3::new(a * u.sin(), 0.5 * a * (2.0 * u).sin(), h * (wz * t).sin()),
                v: Vector3::new(
                    a * w * u.cos(),
                    a * w * (2.0 * u).cos(),
                    h * wz * (wz * t).cos(),
                ),
                a: Vector3::new(
                    -a * w * w * u.sin(),
                    -2.0 * a * w * w * (2.0 * u).sin(),
                    -h * wz * wz * (wz * t).sin(),
                ),
            }
        }
        TrajectoryKind::WaypointSpline => {
            // smooth closed loop through seeded waypoints: a circle modulated
            // by low-order harmonics keeps derivatives analytic and speed
            // bounded away from zero
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5741_5953);
            let r0 = spec.scale;
            let (a1, a2, b1): (f64, f64, f64) = (
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.05..0.2),
            );
            let (ph1, ph2) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
            let r = r0 * (1.0 + a1 * (2.0 * u + ph1).sin() + a2 * (3.0 * u + ph2).cos());
            let dr_du = r0 * (2.0 * a1 * (2.0 * u + ph1).cos() - 3.0 * a2 * (3.0 * u + ph2).sin());
            let d2r_du2 =
                r0 * (-4.0 * a1 * (2.0 * u + ph1).sin() - 9.0 * a2 * (3.0 * u + ph2).cos());
            let (cu, su) = (u.cos(), u.sin());
            let z = h * (1.0 + b1) * (wz * t).sin();
            let dz = h * (1.0 + b1) * wz * (wz * t).cos();
            let d2z = -h * (1.0 + b1) * wz * wz * (wz * t).sin();
            Kinematics {
                p: Vector3::new(r * cu, r * su, z),
                v: Vector3::new(
                    w * (dr_du * cu - r * su),
                    w * (dr_du * su + r * cu),
                    dz,
                ),
                a: Vector3::new(
                    w * w * (d2r_du2 * cu - 2.0 * dr_du * su - r * cu),
                    w * w * (d2r_du2 * su + 2.0 * dr_du * cu - r * su),
                    d2z,
                ),
            }
        }
    }
}

/// Ground-truth kinematic sample at time t.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub omega_body: Vector3<f64>,
    pub accel_body: Vector3<f64>,
}

/// Exact analytic kinematics: position/velocity from the path, yaw tracking
/// the velocity direction, small roll/pitch oscillations for full rotational
/// excitation. `accel_body` is the specific force an ideal accelerometer
/// reads: `R^T (a - g)`.
pub fn gen_groundtruth(spec: &TrajectorySpec, t: f64) -> Result<GroundTruth> {
    spec.validate()?;
    if !(0.0..=spec.duration).contains(&t) {
        return Err(Error::Config(format!(
            "t = {t} outside [0, {}]",
            spec.duration
        )));
    }
    if spec.speed == 0.0 {
        // static platform at the origin
        return Ok(GroundTruth {
            pose: Pose::identity(),
            velocity: Vector3::zeros(),
            omega_body: Vector3::zeros(),
            accel_body: -GRAVITY,
        });
    }
    let k = translation_kinematics(spec, t);

    // ZYX Euler: yaw from velocity, sinusoidal roll/pitch
    let yaw = k.v.y.atan2(k.v.x);
    let planar2 = k.v.x * k.v.x + k.v.y * k.v.y;
    let yaw_rate = (k.v.x * k.a.y - k.v.y * k.a.x) / planar2;
    // tilt harmonics of the path frequency: full rotational excitation that
    // still repeats every revisit period
    let amp = spec.tilt_amplitude;
    let (w1, w2) = (3.0 * spec.omega_path(), 2.0 * spec.omega_path());
    let roll = amp * (w1 * t).sin();
    let roll_rate = amp * w1 * (w1 * t).cos();
    let pitch = amp * (w2 * t + 0.7).sin();
    let pitch_rate = amp * w2 * (w2 * t + 0.7).cos();

    let q = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
    let rot = *q.to_rotation_matrix().matrix();

    // body rates from ZYX Euler-angle rates
    let (sr, cr) = (roll.sin(), roll.cos());
    let (sp, cp) = (pitch.sin(), pitch.cos());
    let omega_body = Vector3::new(
        roll_rate - yaw_rate * sp,
        pitch_rate * cr + yaw_rate * cp * sr,
        yaw_rate * cp * cr - pitch_rate * sr,
    );
    let accel_body = rot.transpose() * (k.a - GRAVITY);

    Ok(GroundTruth {
        pose: Pose::new(rot, k.p),
        velocity: k.v,
        omega_body,
        accel_body,
    })
}

/// True inertial state at time t (biases supplied by the IMU simulation).
pub fn true_imu_state(spec: &TrajectorySpec, t: f64, bg: Vector3<f64>, ba: Vector3<f64>) -> Result<ImuState> {
    let gt = gen_groundtruth(spec, t)?;
    Ok(ImuState {
        q: UnitQuaternion::from_matrix(&gt.pose.rotation),
        v: gt.velocity,
        p: gt.pose.translation,
        bg,
        ba,
    })
}

#[derive(Debug, Clone)]
pub struct CameraSpec {
    pub baseline: f64,
    pub extrinsics: ExtrinsicState,
}

impl CameraSpec {
    /// forward-looking stereo rig: camera z along body x, right eye offset
    /// by `baseline` along camera x
    pub fn forward_stereo(baseline: f64) -> Self {
        let r_cb = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let q_cb = UnitQuaternion::from_matrix(&r_cb);
        CameraSpec {
            baseline,
            extrinsics: ExtrinsicState {
                left: CameraExtrinsic {
                    q_cb,
                    p_cb: Vector3::new(0.0, 0.0, 0.05),
                },
                right: CameraExtrinsic {
                    q_cb,
                    p_cb: Vector3::new(-baseline, 0.0, 0.05),
                },
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorldNoise {
    pub imu: NoiseDensities,
    pub pixel_sigma: f64,
    pub outlier_rate: f64,
}

impl WorldNoise {
    pub fn noiseless() -> Self {
        WorldNoise {
            imu: NoiseDensities {
                sigma_g: 0.0,
                sigma_a: 0.0,
                sigma_wg: 0.0,
                sigma_wa: 0.0,
            },
            pixel_sigma: 0.0,
            outlier_rate: 0.0,
        }
    }

    pub fn typical() -> Self {
        WorldNoise {
            imu: NoiseDensities {
                sigma_g: 1.7e-4,
                sigma_a: 2.0e-3,
                sigma_wg: 2.0e-5,
                sigma_wa: 3.0e-3,
            },
            pixel_sigma: 1.0 / 460.0,
            outlier_rate: 0.0,
        }
    }

    /// Low-grade consumer IMU with coarse feature localization: an order of
    /// magnitude above `typical` on the inertial side and four pixels of
    /// image noise. Odometry drifts quickly under this profile.
    pub fn harsh() -> Self {
        WorldNoise {
            imu: NoiseDensities {
                sigma_g: 1.7e-3,
                sigma_a: 2.0e-2,
                sigma_wg: 2.0e-4,
                sigma_wa: 3.0e-2,
            },
            pixel_sigma: 4.0 / 460.0,
            outlier_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorldSpec {
    pub landmark_count: usize,
    /// landmark box, (min, max) corners, m
    pub bounds: (Vector3<f64>, Vector3<f64>),
    pub camera: CameraSpec,
    pub noise: WorldNoise,
    pub init_bg: Vector3<f64>,
    pub init_ba: Vector3<f64>,
    pub imu_rate: f64,
    pub image_rate: f64,
    /// visibility limits: depth window and normalized-coordinate FOV box
    pub min_depth: f64,
    pub max_depth: f64,
    pub fov_limit: f64,
}

impl WorldSpec {
    pub fn desk_scale(noise: WorldNoise) -> Self {
        WorldSpec {
            landmark_count: 600,
            bounds: (Vector3::new(-14.0, -14.0, -3.0), Vector3::new(14.0, 14.0, 5.0)),
            camera: CameraSpec::forward_stereo(0.11),
            noise,
            init_bg: Vector3::new(0.002, -0.0015, 0.001),
            init_ba: Vector3::new(0.02, 0.015, -0.01),
            imu_rate: 200.0,
            image_rate: 10.0,
            min_depth: 0.3,
            max_depth: 50.0,
            fov_limit: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.camera.baseline <= 0.0 {
            return Err(Error::Config("stereo baseline must be positive".into()));
        }
        if self.noise.pixel_sigma < 0.0
            || self.noise.outlier_rate < 0.0
            || self.noise.outlier_rate > 1.0
        {
            return Err(Error::Config("noise rates out of range".into()));
        }
        if self.imu_rate <= 0.0 || self.image_rate <= 0.0 {
            return Err(Error::Config("sample rates must be positive".into()));
        }
        Ok(())
    }
}

/// IMU stream plus the ground-truth bias trajectory that produced it.
#[derive(Debug, Clone)]
pub struct ImuSim {
    pub samples: Vec<ImuSample>,
    /// (timestamp, bg, ba) aligned with `samples`
    pub biases: Vec<(f64, Vector3<f64>, Vector3<f64>)>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::new(sigma * gauss(rng), sigma * gauss(rng), sigma * gauss(rng))
}

/// Sample the trajectory's exact rates at `imu_rate`, add bias random walks
/// and white noise per the continuous densities discretized at the sample
/// interval. Bit-identical across runs for the same seed.
pub fn sim_imu(spec: &TrajectorySpec, world: &WorldSpec, seed: u64) -> Result<ImuSim> {
    spec.validate()?;
    world.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / world.imu_rate;
    let n = (spec.duration * world.imu_rate).round() as usize;
    let sqrt_dt = dt.sqrt();
    let nz = &world.noise.imu;
    let mut bg = world.init_bg;
    let mut ba = world.init_ba;
    let mut samples = Vec::with_capacity(n + 1);
    let mut biases = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = i as f64 * dt;
        let gt = gen_groundtruth(spec, t.min(spec.duration))?;
        let omega = gt.omega_body + bg + gauss3(&mut rng, nz.sigma_g / sqrt_dt);
        let accel = gt.accel_body + ba + gauss3(&mut rng, nz.sigma_a / sqrt_dt);
        samples.push(ImuSample {
            timestamp: t,
            omega,
            accel,
        });
        biases.push((t, bg, ba));
        bg += gauss3(&mut rng, nz.sigma_wg * sqrt_dt);
        ba += gauss3(&mut rng, nz.sigma_wa * sqrt_dt);
    }
    Ok(ImuSim { samples, biases })
}

/// One simulated stereo observation; `landmark_id` is the stable
/// association key, `track_id` the tracker-level identity that breaks when
/// the landmark leaves the field of view.
#[derive(Debug, Clone, Copy)]
pub struct SimObservation {
    pub frame_id: FrameId,
    pub eye: Eye,
    pub track_id: u64,
    pub landmark_id: u64,
    pub u: f64,
    pub v: f64,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SimFrame {
    pub frame_id: FrameId,
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct TrackSim {
    pub frames: Vec<SimFrame>,
    /// frame-major, then landmark id, then eye
    pub observations: Vec<SimObservation>,
    pub landmarks: Vec<Vector3<f64>>,
}

/// Generate the landmark field and project it through the stereo rig at
/// `image_rate`. A landmark is observed only when both eyes see it inside
/// the depth window and FOV box. Track ids restart when visibility breaks;
/// landmark ids never change, which is what loop-closure detection keys on.
pub fn sim_tracks(spec: &TrajectorySpec, world: &WorldSpec, seed: u64) -> Result<TrackSim> {
    spec.validate()?;
    world.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7452_4b53);
    let (lo, hi) = world.bounds;
    let landmarks: Vec<Vector3<f64>> = (0..world.landmark_count)
        .map(|_| {
            Vector3::new(
                rng.gen_range(lo.x..hi.x),
                rng.gen_range(lo.y..hi.y),
                rng.gen_range(lo.z..hi.z),
            )
        })
        .collect();

    let n_frames = (spec.duration * world.image_rate).floor() as usize + 1;
    let mut frames = Vec::with_capacity(n_frames);
    let mut observations = Vec::new();
    // live track id per landmark: None when not currently tracked
    let mut live: Vec<Option<u64>> = vec![None; landmarks.len()];
    let mut next_track_id: u64 = 0;

    for f in 0..n_frames {
        let t = f as f64 / world.image_rate;
        let frame_id = f as FrameId;
        frames.push(SimFrame {
            frame_id,
            timestamp: t,
        });
        let gt = gen_groundtruth(spec, t)?;
        let cam_l = camera_frame(&gt.pose, &world.camera.extrinsics.left);
        let cam_r = camera_frame(&gt.pose, &world.camera.extrinsics.right);
        for (lid, x) in landmarks.iter().enumerate() {
            let pl = cam_l.to_camera(x);
            let pr = cam_r.to_camera(x);
            let visible = |p: &Vector3<f64>| {
                p.z >= world.min_depth
                    && p.z <= world.max_depth
                    && (p.x / p.z).abs() <= world.fov_limit
                    && (p.y / p.z).abs() <= world.fov_limit
            };
            if !(visible(&pl) && visible(&pr)) {
                live[lid] = None;
                continue;
            }
            let track_id = *live[lid].get_or_insert_with(|| {
                let id = next_track_id;
                next_track_id += 1;
                id
            });
            for (eye, p) in [(Eye::Left, pl), (Eye::Right, pr)] {
                let mut u = p.x / p.z;
                let mut v = p.y / p.z;
                let is_outlier = rng.gen_range(0.0..1.0) < world.noise.outlier_rate;
                if is_outlier {
                    u = rng.gen_range(-world.fov_limit..world.fov_limit);
                    v = rng.gen_range(-world.fov_limit..world.fov_limit);
                } else if world.noise.pixel_sigma > 0.0 {
                    u += world.noise.pixel_sigma * gauss(&mut rng);
                    v += world.noise.pixel_sigma * gauss(&mut rng);
                }
                observations.push(SimObservation {
                    frame_id,
                    eye,
                    track_id,
                    landmark_id: lid as u64,
                    u,
                    v,
                    is_outlier,
                });
            }
        }
    }
    Ok(TrackSim {
        frames,
        observations,
        landmarks,
    })
}
