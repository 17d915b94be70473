//! Full estimated state, error-state layout, covariance bookkeeping and the
//! correction-injection rule.
//!
//! The error vector is laid out as
//! `[phi dv dp dbg dba | clones (phi dp)... | extr_L (phi dp) extr_R (phi dp) | keyframes (phi dp)...]`
//! and its dimension always equals the covariance dimension.
//!
//! Error convention: the filter error measures the estimate relative to the
//! truth. Rotation `phi = log(R_est * R_true^T)`, transformed velocity and
//! position errors `dv = v_est - exp(phi) v_true`, `dp = p_est - exp(phi) p_true`
//! (first order: `-dv_std + [v×]phi`), bias and extrinsic translation errors
//! `est - true`. Injecting a correction removes the estimated error:
//! `R+ = exp(-phi) R_est`, `v+ = exp(-phi)(v_est - dv)`, `b+ = b_est - db`.
//! Injection and extraction are exact inverses of each other.

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{apply_quat_error, exp_so3, extract_quat_error, Pose};

pub type FrameId = u64;
pub type KeyframeId = u64;

pub const IMU_DIM: usize = 15;
pub const EXTRINSIC_DIM: usize = 12;
pub const POSE_DIM: usize = 6;

/// Current inertial navigation state.
#[derive(Debug, Clone)]
pub struct ImuState {
    /// body-to-global rotation
    pub q: UnitQuaternion<f64>,
    /// velocity in global frame, m/s
    pub v: Vector3<f64>,
    /// position in global frame, m
    pub p: Vector3<f64>,
    /// gyroscope bias, rad/s
    pub bg: Vector3<f64>,
    /// accelerometer bias, m/s^2
    pub ba: Vector3<f64>,
}

impl ImuState {
    pub fn identity() -> Self {
        ImuState {
            q: UnitQuaternion::identity(),
            v: Vector3::zeros(),
            p: Vector3::zeros(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        *self.q.to_rotation_matrix().matrix()
    }

    pub fn pose(&self) -> Pose {
        Pose::from_quat(&self.q, self.p)
    }
}

/// A historical IMU pose retained in the sliding window.
#[derive(Debug, Clone)]
pub struct PoseClone {
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub timestamp: f64,
    pub frame_id: FrameId,
}

/// Camera-IMU extrinsic for one eye: rotation body->camera and the body
/// origin expressed in the camera frame.
#[derive(Debug, Clone)]
pub struct CameraExtrinsic {
    pub q_cb: UnitQuaternion<f64>,
    pub p_cb: Vector3<f64>,
}

impl CameraExtrinsic {
    pub fn identity() -> Self {
        CameraExtrinsic {
            q_cb: UnitQuaternion::identity(),
            p_cb: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        *self.q_cb.to_rotation_matrix().matrix()
    }
}

#[derive(Debug, Clone)]
pub struct ExtrinsicState {
    pub left: CameraExtrinsic,
    pub right: CameraExtrinsic,
}

impl ExtrinsicState {
    pub fn identity() -> Self {
        ExtrinsicState {
            left: CameraExtrinsic::identity(),
            right: CameraExtrinsic::identity(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KeyframePose {
    pub q: UnitQuaternion<f64>,
    pub p: Vector3<f64>,
    pub keyframe_id: KeyframeId,
    pub frame_id: FrameId,
    pub timestamp: f64,
}

/// Active inertial state + clone window + extrinsics + keyframe poses.
#[derive(Debug, Clone)]
pub struct FullState {
    pub imu: ImuState,
    pub clones: Vec<PoseClone>,
    pub extrinsics: ExtrinsicState,
    pub keyframes: Vec<KeyframePose>,
    next_keyframe_id: KeyframeId,
}

impl FullState {
    pub fn new(imu: ImuState, extrinsics: ExtrinsicState) -> Self {
        FullState {
            imu,
            clones: Vec::new(),
            extrinsics,
            keyframes: Vec::new(),
            next_keyframe_id: 0,
        }
    }

    pub fn error_dim(&self) -> usize {
        IMU_DIM + POSE_DIM * self.clones.len() + EXTRINSIC_DIM + POSE_DIM * self.keyframes.len()
    }

    pub fn clone_offset(&self, frame_id: FrameId) -> Option<usize> {
        self.clones
            .iter()
            .position(|c| c.frame_id == frame_id)
            .map(|i| IMU_DIM + POSE_DIM * i)
    }

    pub fn clone_by_frame(&self, frame_id: FrameId) -> Option<&PoseClone> {
        self.clones.iter().find(|c| c.frame_id == frame_id)
    }

    pub fn extrinsic_offset(&self) -> usize {
        IMU_DIM + POSE_DIM * self.clones.len()
    }

    pub fn keyframe_base(&self) -> usize {
        self.extrinsic_offset() + EXTRINSIC_DIM
    }

    pub fn keyframe_offset(&self, keyframe_id: KeyframeId) -> Option<usize> {
        self.keyframes
            .iter()
            .position(|k| k.keyframe_id == keyframe_id)
            .map(|i| self.keyframe_base() + POSE_DIM * i)
    }

    pub fn keyframe_by_id(&self, keyframe_id: KeyframeId) -> Option<&KeyframePose> {
        self.keyframes.iter().find(|k| k.keyframe_id == keyframe_id)
    }

    /// Reserve `count` keyframe ids, returning the first. Used when keyframe
    /// poses are installed directly instead of promoted from a clone.
    pub fn reserve_keyframe_ids(&mut self, count: KeyframeId) -> KeyframeId {
        let first = self.next_keyframe_id;
        self.next_keyframe_id += count;
        first
    }

    /// Error-state column offset of whichever entity (clone or keyframe)
    /// carries the pose of `frame_id`. Clones win when both exist.
    pub fn frame_pose_offset(&self, frame_id: FrameId) -> Option<usize> {
        self.clone_offset(frame_id).or_else(|| {
            self.keyframes
                .iter()
                .position(|k| k.frame_id == frame_id)
                .map(|i| self.keyframe_base() + POSE_DIM * i)
        })
    }
}

/// Remove rows/cols `[at, at+n)` from a square matrix.
fn remove_span(m: &DMatrix<f64>, at: usize, n: usize) -> DMatrix<f64> {
    let d = m.nrows();
    let mut out = DMatrix::zeros(d - n, d - n);
    let map = |i: usize| if i < at { i } else { i + n };
    for r in 0..d - n {
        for c in 0..d - n {
            out[(r, c)] = m[(map(r), map(c))];
        }
    }
    out
}

/// Insert `n` zero rows/cols at `at`.
fn insert_span(m: &DMatrix<f64>, at: usize, n: usize) -> DMatrix<f64> {
    let d = m.nrows();
    let mut out = DMatrix::zeros(d + n, d + n);
    let map = |i: usize| if i < at { i } else { i + n };
    for r in 0..d {
        for c in 0..d {
            out[(map(r), map(c))] = m[(r, c)];
        }
    }
    out
}

/// Mutable estimation context: the state and its covariance move together so
/// the dimension invariant can be enforced on every mutation.
#[derive(Debug, Clone)]
pub struct EstimationContext {
    pub state: FullState,
    pub cov: DMatrix<f64>,
    /// sliding window capacity (clones)
    pub max_clones: usize,
    /// keyframe budget
    pub max_keyframes: usize,
}

impl EstimationContext {
    pub fn new(state: FullState, cov: DMatrix<f64>, max_clones: usize, max_keyframes: usize) -> Self {
        assert_eq!(cov.nrows(), state.error_dim());
        EstimationContext {
            state,
            cov,
            max_clones,
            max_keyframes,
        }
    }

    pub fn resymmetrize(&mut self) {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        self.cov = sym;
    }

    /// Append a clone of the current pose and grow the covariance. Under the
    /// ST errors the clone error equals the current (phi, dp) exactly, so the
    /// augmentation Jacobian is identity on those sub-blocks.
    pub fn augment_clone(&mut self, frame_id: FrameId, timestamp: f64) {
        if self.state.clones.len() >= self.max_clones {
            self.marginalize_oldest_clone();
        }
        if let Some(last) = self.state.clones.last() {
            assert!(timestamp > last.timestamp, "clone timestamps must increase");
        }
        let at = self.state.extrinsic_offset();
        let grown = insert_span(&self.cov, at, POSE_DIM);
        let mut cov = grown;
        let d = cov.nrows();
        // source rows in the grown matrix: phi 0..3, dp 6..9
        let src = [0usize, 1, 2, 6, 7, 8];
        for (k, &s) in src.iter().enumerate() {
            for c in 0..d {
                let v = cov[(s, c)];
                cov[(at + k, c)] = v;
            }
        }
        for (k, &s) in src.iter().enumerate() {
            for r in 0..d {
                let v = cov[(r, s)];
                cov[(r, at + k)] = v;
            }
        }
        for (k, &s) in src.iter().enumerate() {
            for (l, &t) in src.iter().enumerate() {
                cov[(at + k, at + l)] = cov[(s, t)];
            }
        }
        self.cov = cov;
        self.state.clones.push(PoseClone {
            q: self.state.imu.q,
            p: self.state.imu.p,
            timestamp,
            frame_id,
        });
        debug_assert_eq!(self.cov.nrows(), self.state.error_dim());
    }

    pub fn marginalize_oldest_clone(&mut self) {
        if self.state.clones.is_empty() {
            return;
        }
        self.cov = remove_span(&self.cov, IMU_DIM, POSE_DIM);
        self.state.clones.remove(0);
        debug_assert_eq!(self.cov.nrows(), self.state.error_dim());
    }

    pub fn marginalize_clone(&mut self, frame_id: FrameId) {
        if let Some(i) = self.state.clones.iter().position(|c| c.frame_id == frame_id) {
            self.cov = remove_span(&self.cov, IMU_DIM + POSE_DIM * i, POSE_DIM);
            self.state.clones.remove(i);
        }
        debug_assert_eq!(self.cov.nrows(), self.state.error_dim());
    }

    /// Copy a clone's pose into the keyframe states, duplicating its
    /// covariance rows/cols. The clone itself stays until normal
    /// marginalization. Eviction under the keyframe budget is the caller's
    /// job (it needs the covisibility graph).
    pub fn promote_clone_to_keyframe(&mut self, clone_frame_id: FrameId) -> Result<KeyframeId> {
        let idx = self
            .state
            .clones
            .iter()
            .position(|c| c.frame_id == clone_frame_id)
            .ok_or_else(|| Error::Numerical(format!("no clone for frame {clone_frame_id}")))?;
        let clone = self.state.clones[idx].clone();
        let src_off = IMU_DIM + POSE_DIM * idx;

        let at = self.cov.nrows(); // keyframes live at the end
        let mut cov = insert_span(&self.cov, at, POSE_DIM);
        let d = cov.nrows();
        for k in 0..POSE_DIM {
            for c in 0..d {
                let v = cov[(src_off + k, c)];
                cov[(at + k, c)] = v;
            }
        }
        for k in 0..POSE_DIM {
            for r in 0..d {
                let v = cov[(r, src_off + k)];
                cov[(r, at + k)] = v;
            }
        }
        for k in 0..POSE_DIM {
            for l in 0..POSE_DIM {
                cov[(at + k, at + l)] = cov[(src_off + k, src_off + l)];
            }
        }
        self.cov = cov;

        let id = self.state.next_keyframe_id;
        self.state.next_keyframe_id += 1;
        self.state.keyframes.push(KeyframePose {
            q: clone.q,
            p: clone.p,
            keyframe_id: id,
            frame_id: clone.frame_id,
            timestamp: clone.timestamp,
        });
        debug_assert_eq!(self.cov.nrows(), self.state.error_dim());
        Ok(id)
    }

    pub fn evict_keyframe(&mut self, keyframe_id: KeyframeId) {
        if let Some(i) = self
            .state
            .keyframes
            .iter()
            .position(|k| k.keyframe_id == keyframe_id)
        {
            let off = self.state.keyframe_base() + POSE_DIM * i;
            self.cov = remove_span(&self.cov, off, POSE_DIM);
            self.state.keyframes.remove(i);
        }
        debug_assert_eq!(self.cov.nrows(), self.state.error_dim());
    }

    /// Apply an estimated error vector as a correction (removes the error
    /// from the estimate). Rotations retract through the exact exponential;
    /// velocity/position follow the ST group action; biases and extrinsic
    /// translations are additive.
    pub fn inject_correction(&mut self, delta: &DVector<f64>) -> Result<()> {
        let dim = self.state.error_dim();
        if delta.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: delta.len(),
            });
        }
        let seg3 = |at: usize| Vector3::new(delta[at], delta[at + 1], delta[at + 2]);

        // inertial block
        {
            let phi = seg3(0);
            let dv = seg3(3);
            let dp = seg3(6);
            let imu = &mut self.state.imu;
            let e_inv = exp_so3(&(-phi));
            imu.q = apply_quat_error(&(-phi), &imu.q);
            imu.v = e_inv * (imu.v - dv);
            imu.p = e_inv * (imu.p - dp);
            imu.bg -= seg3(9);
            imu.ba -= seg3(12);
        }
        // clones
        for (i, c) in self.state.clones.iter_mut().enumerate() {
            let off = IMU_DIM + POSE_DIM * i;
            let phi = seg3(off);
            let dp = seg3(off + 3);
            c.q = apply_quat_error(&(-phi), &c.q);
            c.p = exp_so3(&(-phi)) * (c.p - dp);
        }
        // extrinsics
        {
            let off = self.state.extrinsic_offset();
            let phi_l = seg3(off);
            let dp_l = seg3(off + 3);
            let phi_r = seg3(off + 6);
            let dp_r = seg3(off + 9);
            let ex = &mut self.state.extrinsics;
            ex.left.q_cb = apply_quat_error(&(-phi_l), &ex.left.q_cb);
            ex.left.p_cb -= dp_l;
            ex.right.q_cb = apply_quat_error(&(-phi_r), &ex.right.q_cb);
            ex.right.p_cb -= dp_r;
        }
        // keyframes
        let base = self.state.keyframe_base();
        for (i, k) in self.state.keyframes.iter_mut().enumerate() {
            let off = base + POSE_DIM * i;
            let phi = seg3(off);
            let dp = seg3(off + 3);
            k.q = apply_quat_error(&(-phi), &k.q);
            k.p = exp_so3(&(-phi)) * (k.p - dp);
        }
        Ok(())
    }
}

/// Extract the error vector between an estimate and the truth under the
/// filter's conventions. `truth` must have identical clone/keyframe layout.
/// Exact inverse of `inject_correction`: injecting the result into the
/// estimate recovers the truth.
pub fn extract_error(estimate: &FullState, truth: &FullState) -> DVector<f64> {
    assert_eq!(estimate.error_dim(), truth.error_dim());
    let mut out = DVector::zeros(estimate.error_dim());
    let mut put = |at: usize, v: Vector3<f64>| {
        out[at] = v.x;
        out[at + 1] = v.y;
        out[at + 2] = v.z;
    };

    let pose_err = |q_est: &UnitQuaternion<f64>,
                    p_est: &Vector3<f64>,
                    q_tru: &UnitQuaternion<f64>,
                    p_tru: &Vector3<f64>| {
        let phi = extract_quat_error(q_est, q_tru);
        let dp = p_est - exp_so3(&phi) * p_tru;
        (phi, dp)
    };

    {
        let e = &estimate.imu;
        let t = &truth.imu;
        let phi = extract_quat_error(&e.q, &t.q);
        let rot = exp_so3(&phi);
        put(0, phi);
        put(3, e.v - rot * t.v);
        put(6, e.p - rot * t.p);
        put(9, e.bg - t.bg);
        put(12, e.ba - t.ba);
    }
    for (i, (ce, ct)) in estimate.clones.iter().zip(truth.clones.iter()).enumerate() {
        let off = IMU_DIM + POSE_DIM * i;
        let (phi, dp) = pose_err(&ce.q, &ce.p, &ct.q, &ct.p);
        put(off, phi);
        put(off + 3, dp);
    }
    {
        let off = estimate.extrinsic_offset();
        let e = &estimate.extrinsics;
        let t = &truth.extrinsics;
        put(off, extract_quat_error(&e.left.q_cb, &t.left.q_cb));
        put(off + 3, e.left.p_cb - t.left.p_cb);
        put(off + 6, extract_quat_error(&e.right.q_cb, &t.right.q_cb));
        put(off + 9, e.right.p_cb - t.right.p_cb);
    }
    let base = estimate.keyframe_base();
    for (i, (ke, kt)) in estimate
        .keyframes
        .iter()
        .zip(truth.keyframes.iter())
        .enumerate()
    {
        let off = base + POSE_DIM * i;
        let (phi, dp) = pose_err(&ke.q, &ke.p, &kt.q, &kt.p);
        put(off, phi);
        put(off + 3, dp);
    }
    out
}
