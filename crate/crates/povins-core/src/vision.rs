//! Pose-only visual geometry: base-view selection, landmark
//! projection/residual/Jacobians, and the ray-depth machinery.
//!
//! No 3D landmark is ever estimated. A feature track is summarized by its
//! two base views (largest parallax); every measurement becomes either a
//! reprojection residual against the pose-only projection or a scalar
//! ray-depth residual, both functions of camera poses alone.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{skew, Pose};
use crate::state::{CameraExtrinsic, ExtrinsicState, FrameId};

/// Default degenerate-parallax threshold (rad-scale cross-product norm).
pub const MIN_PARALLAX: f64 = 1e-4;
/// Default minimum predicted depth component.
pub const EPS_DEPTH: f64 = 1e-6;
/// Default observation noise in normalized coordinates (1 px / 460 focal).
pub const DEFAULT_PIXEL_SIGMA: f64 = 1.0 / 460.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Eye {
    Left,
    Right,
}

impl Eye {
    pub fn other(self) -> Eye {
        match self {
            Eye::Left => Eye::Right,
            Eye::Right => Eye::Left,
        }
    }
}

/// A view is one (frame, eye) pair.
pub type ViewId = (FrameId, Eye);

#[derive(Debug, Clone, Copy)]
pub struct NormalizedObservation {
    pub frame_id: FrameId,
    pub eye: Eye,
    pub u: f64,
    pub v: f64,
}

impl NormalizedObservation {
    /// Homogeneous ray [u, v, 1].
    pub fn ray(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn view(&self) -> ViewId {
        (self.frame_id, self.eye)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureTrack {
    pub track_id: u64,
    pub observations: Vec<NormalizedObservation>,
    /// isotropic noise std in normalized coordinates
    pub sigma: f64,
}

impl FeatureTrack {
    pub fn get(&self, view: ViewId) -> Option<&NormalizedObservation> {
        self.observations.iter().find(|o| o.view() == view)
    }

    /// ≥2 observations, at most one per (frame, eye), all finite.
    pub fn validate(&self) -> Result<()> {
        if self.observations.len() < 2 {
            return Err(Error::DegenerateTrack(format!(
                "track {} has {} observations",
                self.track_id,
                self.observations.len()
            )));
        }
        let mut views: Vec<ViewId> = self.observations.iter().map(|o| o.view()).collect();
        views.sort();
        if views.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::DegenerateTrack(format!(
                "track {} has duplicate (frame, eye) observations",
                self.track_id
            )));
        }
        if self
            .observations
            .iter()
            .any(|o| !o.u.is_finite() || !o.v.is_finite())
        {
            return Err(Error::DegenerateTrack(format!(
                "track {} has non-finite coordinates",
                self.track_id
            )));
        }
        Ok(())
    }
}

/// The two anchor views of a track: parallax-maximal pair.
#[derive(Debug, Clone, Copy)]
pub struct BaseViewPair {
    pub alpha: ViewId,
    pub beta: ViewId,
    pub theta: f64,
}

/// One camera as a map from world points: `x_C = w * (x - c)`.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    /// global -> camera rotation
    pub w: Matrix3<f64>,
    /// camera center in the global frame
    pub c: Vector3<f64>,
}

impl CameraFrame {
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.w * (x - self.c)
    }
}

/// Compose a body pose with a camera-IMU extrinsic.
pub fn camera_frame(body: &Pose, extr: &CameraExtrinsic) -> CameraFrame {
    let r_e = extr.rotation();
    CameraFrame {
        w: r_e * body.rotation.transpose(),
        c: body.translation - body.rotation * r_e.transpose() * extr.p_cb,
    }
}

fn eye_extrinsic(extr: &ExtrinsicState, eye: Eye) -> &CameraExtrinsic {
    match eye {
        Eye::Left => &extr.left,
        Eye::Right => &extr.right,
    }
}

/// Body poses for every frame a track touches.
pub type PoseMap = BTreeMap<FrameId, Pose>;

fn view_camera(poses: &PoseMap, extr: &ExtrinsicState, view: ViewId) -> Result<CameraFrame> {
    let body = poses.get(&view.0).ok_or_else(|| {
        Error::DegenerateTrack(format!("no pose available for frame {}", view.0))
    })?;
    Ok(camera_frame(body, eye_extrinsic(extr, view.1)))
}

/// Rotation and translation mapping camera-a points into camera b:
/// `x_b = R_ab x_a + t_ab`.
pub fn relative_camera_pose(
    pose_a: &Pose,
    pose_b: &Pose,
    extr: &ExtrinsicState,
    eye_a: Eye,
    eye_b: Eye,
) -> (Matrix3<f64>, Vector3<f64>) {
    let ca = camera_frame(pose_a, eye_extrinsic(extr, eye_a));
    let cb = camera_frame(pose_b, eye_extrinsic(extr, eye_b));
    relative_from_cameras(&ca, &cb)
}

fn relative_from_cameras(a: &CameraFrame, b: &CameraFrame) -> (Matrix3<f64>, Vector3<f64>) {
    (b.w * a.w.transpose(), b.w * (a.c - b.c))
}

/// Parallax between two rays: `theta = || p_b x (R_ba p_a) ||` with `R_ba`
/// rotating a-frame directions into the b frame.
pub fn parallax(p_a: &Vector3<f64>, p_b: &Vector3<f64>, r_ba: &Matrix3<f64>) -> f64 {
    p_b.cross(&(r_ba * p_a)).norm()
}

/// Pick the observation pair with the largest parallax. Ties break toward
/// the lowest (frame, eye) pair so selection is deterministic.
pub fn select_base_views(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    min_parallax: f64,
) -> Result<BaseViewPair> {
    track.validate()?;
    let n = track.observations.len();
    let mut cams = Vec::with_capacity(n);
    for o in &track.observations {
        cams.push(view_camera(poses, extr, o.view())?);
    }
    let mut best: Option<BaseViewPair> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&track.observations[i], &track.observations[j]);
            let (r_ab, _) = relative_from_cameras(&cams[i], &cams[j]);
            let theta = parallax(&a.ray(), &b.ray(), &r_ab);
            let (lo, hi) = if a.view() <= b.view() {
                (a.view(), b.view())
            } else {
                (b.view(), a.view())
            };
            let better = match &best {
                None => true,
                Some(cur) => {
                    theta > cur.theta + 1e-15
                        || ((theta - cur.theta).abs() <= 1e-15 && (lo, hi) < (cur.alpha, cur.beta))
                }
            };
            if better {
                best = Some(BaseViewPair {
                    alpha: lo,
                    beta: hi,
                    theta,
                });
            }
        }
    }
    let best = best.expect("validated track has at least one pair");
    if best.theta < min_parallax {
        return Err(Error::DegenerateTrack(format!(
            "track {}: max parallax {:.3e} below threshold",
            track.track_id, best.theta
        )));
    }
    Ok(best)
}

/// Everything the pose-only projection of one target view depends on.
struct PoScene {
    cam_i: CameraFrame,
    cam_a: CameraFrame,
    cam_b: CameraFrame,
    p_a: Vector3<f64>,
    p_b: Vector3<f64>,
    /// rotation alpha -> target
    a_mat: Matrix3<f64>,
    /// translation alpha -> target
    u_vec: Vector3<f64>,
    /// cross products entering the two scale factors
    y1: Vector3<f64>,
    y2: Vector3<f64>,
    n1: f64,
    n2: f64,
    f: Vector3<f64>,
}

fn po_scene(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    target: ViewId,
    base: &BaseViewPair,
) -> Result<PoScene> {
    let obs_a = track.get(base.alpha).ok_or_else(|| {
        Error::DegenerateTrack(format!("base view alpha not in track {}", track.track_id))
    })?;
    let obs_b = track.get(base.beta).ok_or_else(|| {
        Error::DegenerateTrack(format!("base view beta not in track {}", track.track_id))
    })?;
    let cam_i = view_camera(poses, extr, target)?;
    let cam_a = view_camera(poses, extr, base.alpha)?;
    let cam_b = view_camera(poses, extr, base.beta)?;
    let p_a = obs_a.ray();
    let p_b = obs_b.ray();

    let (b_mat, t_ba) = relative_from_cameras(&cam_a, &cam_b);
    let (a_mat, u_vec) = relative_from_cameras(&cam_a, &cam_i);

    let y1 = t_ba.cross(&p_b);
    let y2 = p_b.cross(&(b_mat * p_a));
    let n1 = y1.norm();
    let n2 = y2.norm();
    if n2 < MIN_PARALLAX {
        return Err(Error::DegenerateTrack(format!(
            "track {}: base parallax {:.3e} degenerate",
            track.track_id, n2
        )));
    }
    let f = a_mat * p_a * n1 + u_vec * n2;
    Ok(PoScene {
        cam_i,
        cam_a,
        cam_b,
        p_a,
        p_b,
        a_mat,
        u_vec,
        y1,
        y2,
        n1,
        n2,
        f,
    })
}

/// Pose-only projection: an unnormalized camera-frame point collinear with
/// the landmark's true position in the target camera,
/// `f = ||t_ba x p_b|| R_ia p_a + ||p_b x R_ba p_a|| t_ia`.
pub fn po_project(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    target: ViewId,
    base: &BaseViewPair,
) -> Result<Vector3<f64>> {
    Ok(po_scene(track, poses, extr, target, base)?.f)
}

/// Reprojection residual: perspective-divided prediction minus measurement.
pub fn landmark_residual(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    target: ViewId,
    base: &BaseViewPair,
    eps_depth: f64,
) -> Result<Vector2<f64>> {
    let obs = track.get(target).ok_or_else(|| {
        Error::DegenerateTrack(format!("target view not observed in track {}", track.track_id))
    })?;
    let f = po_scene(track, poses, extr, target, base)?.f;
    if f.z <= eps_depth {
        return Err(Error::CheiralityViolation(f.z));
    }
    Ok(Vector2::new(f.x / f.z - obs.u, f.y / f.z - obs.v))
}

/// Jacobian rows keyed by the error-state entity they hit. Frame blocks are
/// `rows x 6` over [phi | dp], extrinsic blocks `rows x 6` over
/// [phi_E | dp_E] for one eye.
#[derive(Debug, Clone)]
pub struct ResidualBlocks {
    pub rows: usize,
    pub frames: BTreeMap<FrameId, DMatrix<f64>>,
    pub extrinsics: BTreeMap<Eye, DMatrix<f64>>,
}

impl ResidualBlocks {
    fn new(rows: usize) -> Self {
        ResidualBlocks {
            rows,
            frames: BTreeMap::new(),
            extrinsics: BTreeMap::new(),
        }
    }

    fn add_frame_col(&mut self, rows: usize, frame: FrameId, col: usize, val: &DMatrix<f64>) {
        let block = self
            .frames
            .entry(frame)
            .or_insert_with(|| DMatrix::zeros(rows, 6));
        let mut view = block.view_mut((0, col), (rows, 1));
        view += val;
    }

    fn add_extr_col(&mut self, rows: usize, eye: Eye, col: usize, val: &DMatrix<f64>) {
        let block = self
            .extrinsics
            .entry(eye)
            .or_insert_with(|| DMatrix::zeros(rows, 6));
        let mut view = block.view_mut((0, col), (rows, 1));
        view += val;
    }
}

/// One error-state direction to differentiate against.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Param {
    FramePhi(FrameId),
    FramePos(FrameId),
    ExtrPhi(Eye),
    ExtrPos(Eye),
}

impl Param {
    fn store(self, blocks: &mut ResidualBlocks, rows: usize, k: usize, col: &DMatrix<f64>) {
        match self {
            Param::FramePhi(f) => blocks.add_frame_col(rows, f, k, col),
            Param::FramePos(f) => blocks.add_frame_col(rows, f, 3 + k, col),
            Param::ExtrPhi(e) => blocks.add_extr_col(rows, e, k, col),
            Param::ExtrPos(e) => blocks.add_extr_col(rows, e, 3 + k, col),
        }
    }
}

/// Directional derivative of one view's (W, c) under a unit error direction.
/// Errors perturb the estimate as `R <- exp(phi) R`, `p <- exp(phi) p + dp`
/// for frames and `R_E <- exp(phi_E) R_E`, `p_E <- p_E + dp_E` for
/// extrinsics.
fn camera_delta(
    view: ViewId,
    cam: &CameraFrame,
    body: &Pose,
    extr: &CameraExtrinsic,
    param: Param,
    dir: &Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    match param {
        Param::FramePhi(f) if f == view.0 => (-cam.w * skew(dir), -skew(&cam.c) * dir),
        Param::FramePos(f) if f == view.0 => (Matrix3::zeros(), *dir),
        Param::ExtrPhi(e) if e == view.1 => {
            let lever = body.rotation * extr.rotation().transpose();
            (skew(dir) * cam.w, -lever * extr.p_cb.cross(dir))
        }
        Param::ExtrPos(e) if e == view.1 => {
            let lever = body.rotation * extr.rotation().transpose();
            (Matrix3::zeros(), -lever * dir)
        }
        _ => (Matrix3::zeros(), Vector3::zeros()),
    }
}

fn involved_params(views: &[ViewId], calibrate_extrinsics: bool) -> Vec<Param> {
    let mut frames: Vec<FrameId> = views.iter().map(|v| v.0).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut eyes: Vec<Eye> = views.iter().map(|v| v.1).collect();
    eyes.sort_unstable();
    eyes.dedup();
    let mut out = Vec::new();
    for f in frames {
        out.push(Param::FramePhi(f));
        out.push(Param::FramePos(f));
    }
    if calibrate_extrinsics {
        for e in eyes {
            out.push(Param::ExtrPhi(e));
            out.push(Param::ExtrPos(e));
        }
    }
    out
}

const BASIS: [Vector3<f64>; 3] = [
    Vector3::new(1.0, 0.0, 0.0),
    Vector3::new(0.0, 1.0, 0.0),
    Vector3::new(0.0, 0.0, 1.0),
];

/// Analytic Jacobian of `landmark_residual` w.r.t. the target, alpha, and
/// beta frame pose errors and (optionally) the camera-IMU extrinsics.
/// Blocks for any other state entity are structurally zero and therefore
/// absent from the result.
pub fn landmark_jacobian(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    target: ViewId,
    base: &BaseViewPair,
    eps_depth: f64,
    calibrate_extrinsics: bool,
) -> Result<ResidualBlocks> {
    let s = po_scene(track, poses, extr, target, base)?;
    if s.f.z <= eps_depth {
        return Err(Error::CheiralityViolation(s.f.z));
    }

    // perspective-divide Jacobian at f
    let inv_z = 1.0 / s.f.z;
    let j_pd = nalgebra::Matrix2x3::new(
        inv_z,
        0.0,
        -s.f.x * inv_z * inv_z,
        0.0,
        inv_z,
        -s.f.y * inv_z * inv_z,
    );

    let u1 = s.y1 / s.n1.max(1e-300);
    let u2 = s.y2 / s.n2;

    let views = [target, base.alpha, base.beta];
    let bodies: Vec<&Pose> = views
        .iter()
        .map(|v| poses.get(&v.0).expect("po_scene resolved all poses"))
        .collect();
    let extrs: Vec<&CameraExtrinsic> = views.iter().map(|v| eye_extrinsic(extr, v.1)).collect();
    let cams = [s.cam_i, s.cam_a, s.cam_b];

    let mut blocks = ResidualBlocks::new(2);
    for param in involved_params(&views, calibrate_extrinsics) {
        for (k, dir) in BASIS.iter().enumerate() {
            let mut d = [(Matrix3::zeros(), Vector3::zeros()); 3];
            for (idx, view) in views.iter().enumerate() {
                d[idx] = camera_delta(*view, &cams[idx], bodies[idx], extrs[idx], param, dir);
            }
            let (dw_i, dc_i) = d[0];
            let (dw_a, dc_a) = d[1];
            let (dw_b, dc_b) = d[2];

            let da = dw_i * s.cam_a.w.transpose() + s.cam_i.w * dw_a.transpose();
            let du = dw_i * (s.cam_a.c - s.cam_i.c) + s.cam_i.w * (dc_a - dc_i);
            let db = dw_b * s.cam_a.w.transpose() + s.cam_b.w * dw_a.transpose();
            let dt = dw_b * (s.cam_a.c - s.cam_b.c) + s.cam_b.w * (dc_a - dc_b);

            let dn1 = s.p_b.cross(&u1).dot(&dt);
            let dn2 = u2.cross(&s.p_b).dot(&(db * s.p_a));
            let df = (s.a_mat * s.p_a) * dn1 + (da * s.p_a) * s.n1 + s.u_vec * dn2 + du * s.n2;
            let col = j_pd * df;
            let col = DMatrix::from_column_slice(2, 1, col.as_slice());
            param.store(&mut blocks, 2, k, &col);
        }
    }
    Ok(blocks)
}

/// Depth of the gamma ray from one partner view:
/// `Z = ||t x p_i|| / ||p_i x (R p_gamma)||` with `(R, t)` mapping gamma-
/// frame points into the i frame.
pub fn two_view_depth(
    p_gamma: &Vector3<f64>,
    p_i: &Vector3<f64>,
    r_i_gamma: &Matrix3<f64>,
    t_i_gamma: &Vector3<f64>,
) -> Result<f64> {
    let den = p_i.cross(&(r_i_gamma * p_gamma)).norm();
    if den < MIN_PARALLAX {
        return Err(Error::DegeneratePair(format!(
            "near-parallel rays, parallax {den:.3e}"
        )));
    }
    Ok(t_i_gamma.cross(p_i).norm() / den)
}

/// Parallax-weighted fusion of all temporal two-view depths for the
/// canonical view. Weights `theta_i / sum(theta)` make the fusion equal to
/// `sum(numerators) / sum(denominators)`.
pub fn fused_ray_depth(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    canonical: ViewId,
    min_parallax: f64,
) -> Result<f64> {
    let obs_c = track.get(canonical).ok_or_else(|| {
        Error::DegenerateTrack(format!(
            "canonical view not observed in track {}",
            track.track_id
        ))
    })?;
    let cam_c = view_camera(poses, extr, canonical)?;
    let p_c = obs_c.ray();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut partners = 0;
    for o in &track.observations {
        if o.frame_id == canonical.0 {
            continue; // temporal partners only; the stereo mate feeds Z^(s)
        }
        let cam_i = view_camera(poses, extr, o.view())?;
        let (r, t) = relative_from_cameras(&cam_c, &cam_i);
        let p_i = o.ray();
        let d = p_i.cross(&(r * p_c)).norm();
        if d < min_parallax {
            continue;
        }
        num += t.cross(&p_i).norm();
        den += d;
        partners += 1;
    }
    if partners == 0 {
        return Err(Error::DegenerateTrack(format!(
            "track {}: no non-degenerate fusion partner",
            track.track_id
        )));
    }
    Ok(num / den)
}

fn stereo_transform(extr: &ExtrinsicState) -> (Matrix3<f64>, Vector3<f64>) {
    // x_R = R_RL x_L + t_RL; body pose cancels for a same-frame pair
    let r_rl = extr.right.rotation() * extr.left.rotation().transpose();
    let t_rl = extr.right.p_cb - r_rl * extr.left.p_cb;
    (r_rl, t_rl)
}

/// Depth of the left ray from a same-frame stereo pair; depends only on the
/// extrinsics.
pub fn stereo_depth(
    p_l: &NormalizedObservation,
    p_r: &NormalizedObservation,
    extr: &ExtrinsicState,
) -> Result<f64> {
    let (r_rl, t_rl) = stereo_transform(extr);
    two_view_depth(&p_l.ray(), &p_r.ray(), &r_rl, &t_rl)
}

/// First-order std of the stereo depth under isotropic normalized-pixel
/// noise on both observations.
pub fn stereo_depth_noise(
    p_l: &NormalizedObservation,
    p_r: &NormalizedObservation,
    extr: &ExtrinsicState,
    sigma: f64,
) -> Result<f64> {
    let (r_rl, t_rl) = stereo_transform(extr);
    let pl = p_l.ray();
    let pr = p_r.ray();
    let y_n = t_rl.cross(&pr);
    let y_d = pr.cross(&(r_rl * pl));
    let n = y_n.norm();
    let d = y_d.norm();
    if d < MIN_PARALLAX {
        return Err(Error::DegeneratePair(format!(
            "stereo pair degenerate, parallax {d:.3e}"
        )));
    }
    let un = y_n / n.max(1e-300);
    let ud = y_d / d;
    let mut var = 0.0;
    for dir in &BASIS[..2] {
        // left observation moves only the denominator ray
        let dd = ud.dot(&pr.cross(&(r_rl * dir)));
        let dz = -n * dd / (d * d);
        var += dz * dz;
        // right observation moves both numerator and denominator
        let dn = un.dot(&t_rl.cross(dir));
        let dd = ud.dot(&dir.cross(&(r_rl * pl)));
        let dz = (dn * d - n * dd) / (d * d);
        var += dz * dz;
    }
    Ok(sigma * var.sqrt())
}

/// Scalar ray residual: fused multi-view depth minus the stereo estimate.
pub fn ray_residual(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    canonical: ViewId,
    min_parallax: f64,
) -> Result<f64> {
    let mate = track.get((canonical.0, canonical.1.other())).ok_or_else(|| {
        Error::DegenerateTrack(format!(
            "track {}: canonical frame has no stereo pair",
            track.track_id
        ))
    })?;
    let obs_c = track.get(canonical).ok_or_else(|| {
        Error::DegenerateTrack(format!(
            "canonical view not observed in track {}",
            track.track_id
        ))
    })?;
    let z_s = match canonical.1 {
        Eye::Left => stereo_depth(obs_c, mate, extr)?,
        Eye::Right => {
            // mirror: depth of the right ray
            let extr_sw = ExtrinsicState {
                left: extr.right.clone(),
                right: extr.left.clone(),
            };
            stereo_depth(obs_c, mate, &extr_sw)?
        }
    };
    let z_fused = fused_ray_depth(track, poses, extr, canonical, min_parallax)?;
    Ok(z_fused - z_s)
}

/// Analytic Jacobian of `ray_residual` over the canonical/partner frame
/// pose errors and the extrinsics. One row.
pub fn ray_jacobian(
    track: &FeatureTrack,
    poses: &PoseMap,
    extr: &ExtrinsicState,
    canonical: ViewId,
    min_parallax: f64,
    calibrate_extrinsics: bool,
) -> Result<ResidualBlocks> {
    let obs_c = track.get(canonical).ok_or_else(|| {
        Error::DegenerateTrack(format!(
            "canonical view not observed in track {}",
            track.track_id
        ))
    })?;
    let mate = track.get((canonical.0, canonical.1.other())).ok_or_else(|| {
        Error::DegenerateTrack(format!(
            "track {}: canonical frame has no stereo pair",
            track.track_id
        ))
    })?;
    if canonical.1 != Eye::Left {
        return Err(Error::DegenerateTrack(
            "ray residual canonical view must be a left-eye observation".into(),
        ));
    }
    let cam_c = view_camera(poses, extr, canonical)?;
    let body_c = poses[&canonical.0];
    let p_c = obs_c.ray();

    // fused side: collect non-degenerate partners
    struct Partner {
        view: ViewId,
        cam: CameraFrame,
        p: Vector3<f64>,
        y_n: Vector3<f64>,
        y_d: Vector3<f64>,
    }
    let mut partners = Vec::new();
    let mut num = 0.0;
    let mut den = 0.0;
    for o in &track.observations {
        if o.frame_id == canonical.0 {
            continue;
        }
        let cam = view_camera(poses, extr, o.view())?;
        let (r, t) = relative_from_cameras(&cam_c, &cam);
        let p = o.ray();
        let y_d = p.cross(&(r * p_c));
        if y_d.norm() < min_parallax {
            continue;
        }
        let y_n = t.cross(&p);
        num += y_n.norm();
        den += y_d.norm();
        partners.push(Partner {
            view: o.view(),
            cam,
            p,
            y_n,
            y_d,
        });
    }
    if partners.is_empty() {
        return Err(Error::DegenerateTrack(format!(
            "track {}: no non-degenerate fusion partner",
            track.track_id
        )));
    }

    // stereo side
    let (r_rl, t_rl) = stereo_transform(extr);
    let pl = p_c;
    let pr = mate.ray();
    let ys_n = t_rl.cross(&pr);
    let ys_d = pr.cross(&(r_rl * pl));
    let ns = ys_n.norm();
    let ds = ys_d.norm();
    if ds < MIN_PARALLAX {
        return Err(Error::DegeneratePair(format!(
            "stereo pair degenerate, parallax {ds:.3e}"
        )));
    }
    let us_n = ys_n / ns.max(1e-300);
    let us_d = ys_d / ds;

    let mut views: Vec<ViewId> = partners.iter().map(|p| p.view).collect();
    views.push(canonical);
    views.push(mate.view());

    let mut blocks = ResidualBlocks::new(1);
    for param in involved_params(&views, calibrate_extrinsics) {
        for (k, dir) in BASIS.iter().enumerate() {
            let (dw_c, dc_c) = camera_delta(
                canonical,
                &cam_c,
                &body_c,
                eye_extrinsic(extr, canonical.1),
                param,
                dir,
            );
            let mut dnum = 0.0;
            let mut dden = 0.0;
            for pt in &partners {
                let body_i = &poses[&pt.view.0];
                let (dw_i, dc_i) = camera_delta(
                    pt.view,
                    &pt.cam,
                    body_i,
                    eye_extrinsic(extr, pt.view.1),
                    param,
                    dir,
                );
                let dr = dw_i * cam_c.w.transpose() + pt.cam.w * dw_c.transpose();
                let dt = dw_i * (cam_c.c - pt.cam.c) + pt.cam.w * (dc_c - dc_i);
                let un = pt.y_n / pt.y_n.norm().max(1e-300);
                let ud = pt.y_d / pt.y_d.norm();
                dnum += un.dot(&dt.cross(&pt.p));
                dden += ud.dot(&pt.p.cross(&(dr * p_c)));
            }
            let dz_fused = (dnum * den - num * dden) / (den * den);

            // stereo depth moves only under extrinsic errors
            let dz_s = if calibrate_extrinsics {
                let (dr_rl, dt_rl) = match param {
                    Param::ExtrPhi(Eye::Right) => {
                        let dr = skew(dir) * r_rl;
                        (dr, -dr * extr.left.p_cb)
                    }
                    Param::ExtrPhi(Eye::Left) => {
                        let dr = -r_rl * skew(dir);
                        (dr, -dr * extr.left.p_cb)
                    }
                    Param::ExtrPos(Eye::Right) => (Matrix3::zeros(), *dir),
                    Param::ExtrPos(Eye::Left) => (Matrix3::zeros(), -(r_rl * dir)),
                    _ => (Matrix3::zeros(), Vector3::zeros()),
                };
                let dns = us_n.dot(&dt_rl.cross(&pr));
                let dds = us_d.dot(&pr.cross(&(dr_rl * pl)));
                (dns * ds - ns * dds) / (ds * ds)
            } else {
                0.0
            };

            let col = DMatrix::from_element(1, 1, dz_fused - dz_s);
            param.store(&mut blocks, 1, k, &col);
        }
    }
    Ok(blocks)
}
