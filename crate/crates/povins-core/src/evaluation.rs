//! Trajectory metrics: closed-form alignment, absolute translation error,
//! segment-length relative pose error, and filter-consistency NEES.

use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3};

/// Nearest-timestamp association tolerance, seconds.
pub const ASSOC_MAX_GAP: f64 = 0.02;

/// Default RPE segment lengths, meters.
pub const DEFAULT_SEGMENT_LENGTHS: [f64; 4] = [10.0, 50.0, 100.0, 200.0];

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

/// An ordered pose trajectory; timestamps strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryFile {
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryFile {
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::Config(format!(
                    "timestamps not strictly increasing at t={}",
                    w[1].timestamp
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// full 6-dof rigid alignment
    Se3,
    /// translation + yaw only; roll/pitch pinned (gravity-observable systems)
    PosYaw,
}

/// Rigid correction applied to the estimate: `p -> r p + t`, `q -> r q`.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Alignment {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn apply(&self, traj: &TrajectoryFile) -> TrajectoryFile {
        let rq = UnitQuaternion::from_matrix(&self.r);
        TrajectoryFile {
            records: traj
                .records
                .iter()
                .map(|rec| TrajectoryRecord {
                    timestamp: rec.timestamp,
                    p: self.r * rec.p + self.t,
                    q: rq * rec.q,
                })
                .collect(),
        }
    }
}

/// Nearest-timestamp association (max gap [`ASSOC_MAX_GAP`]), one reference
/// record per estimate record at most, monotone in time.
pub fn associate(est: &TrajectoryFile, reference: &TrajectoryFile) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, e) in est.records.iter().enumerate() {
        while j + 1 < reference.records.len()
            && (reference.records[j + 1].timestamp - e.timestamp).abs()
                <= (reference.records[j].timestamp - e.timestamp).abs()
        {
            j += 1;
        }
        if reference.records.is_empty() {
            break;
        }
        if (reference.records[j].timestamp - e.timestamp).abs() <= ASSOC_MAX_GAP {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Closed-form least-squares alignment of the estimate onto the reference
/// over associated records.
pub fn align(
    est: &TrajectoryFile,
    reference: &TrajectoryFile,
    mode: AlignMode,
) -> Result<Alignment> {
    let pairs = associate(est, reference);
    if pairs.len() < 3 {
        return Err(Error::Config(format!(
            "alignment needs at least 3 associated poses, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mean_e: Vector3<f64> = pairs
        .iter()
        .map(|(i, _)| est.records[*i].p)
        .sum::<Vector3<f64>>()
        / n;
    let mean_r: Vector3<f64> = pairs
        .iter()
        .map(|(_, j)| reference.records[*j].p)
        .sum::<Vector3<f64>>()
        / n;

    let r = match mode {
        AlignMode::Se3 => {
            // Kabsch: cross-covariance SVD with reflection guard
            let mut h = Matrix3::zeros();
            for (i, j) in &pairs {
                let e = est.records[*i].p - mean_e;
                let f = reference.records[*j].p - mean_r;
                h += e * f.transpose();
            }
            let svd = h.svd(true, true);
            let u = svd.u.ok_or_else(|| Error::Numerical("svd failed".into()))?;
            let vt = svd.v_t.ok_or_else(|| Error::Numerical("svd failed".into()))?;
            let mut d = Matrix3::identity();
            if (vt.transpose() * u.transpose()).determinant() < 0.0 {
                d[(2, 2)] = -1.0;
            }
            vt.transpose() * d * u.transpose()
        }
        AlignMode::PosYaw => {
            let mut c = 0.0;
            let mut s = 0.0;
            for (i, j) in &pairs {
                let e = est.records[*i].p - mean_e;
                let f = reference.records[*j].p - mean_r;
                c += e.x * f.x + e.y * f.y;
                s += e.x * f.y - e.y * f.x;
            }
            let theta = s.atan2(c);
            exp_so3(&Vector3::new(0.0, 0.0, theta))
        }
    };
    Ok(Alignment {
        r,
        t: mean_r - r * mean_e,
    })
}

/// Root-mean-square absolute translation error after association and
/// alignment.
pub fn ate_rmse(
    est: &TrajectoryFile,
    reference: &TrajectoryFile,
    mode: AlignMode,
) -> Result<f64> {
    let a = align(est, reference, mode)?;
    let aligned = a.apply(est);
    let pairs = associate(&aligned, reference);
    let sum: f64 = pairs
        .iter()
        .map(|(i, j)| (aligned.records[*i].p - reference.records[*j].p).norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Per-segment-length relative pose error statistics.
#[derive(Debug, Clone, Copy)]
pub struct RpeStats {
    pub length: f64,
    pub count: usize,
    pub mean_trans: f64,
    pub rmse_trans: f64,
    /// mean rotation error, radians
    pub mean_rot: f64,
}

fn relative(a: &TrajectoryRecord, b: &TrajectoryRecord) -> (Matrix3<f64>, Vector3<f64>) {
    let ra = a.q.to_rotation_matrix().into_inner();
    let rb = b.q.to_rotation_matrix().into_inner();
    let r = ra.transpose() * rb;
    let t = ra.transpose() * (b.p - a.p);
    (r, t)
}

/// Relative pose error over path-length-indexed segments of the reference.
/// Frame-invariant: no alignment is applied or needed.
pub fn rpe(
    est: &TrajectoryFile,
    reference: &TrajectoryFile,
    segment_lengths: &[f64],
) -> Result<Vec<RpeStats>> {
    let pairs = associate(est, reference);
    if pairs.len() < 2 {
        return Err(Error::Config("too few associated poses for RPE".into()));
    }
    // cumulative reference path length at each associated pair
    let mut cum = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (k, (_, j)) in pairs.iter().enumerate() {
        if k > 0 {
            let prev = pairs[k - 1].1;
            acc += (reference.records[*j].p - reference.records[prev].p).norm();
        }
        cum.push(acc);
    }

    let mut out = Vec::new();
    for &length in segment_lengths {
        if length <= 0.0 {
            return Err(Error::Config(format!("segment length {length} not positive")));
        }
        let mut trans = Vec::new();
        let mut rot = Vec::new();
        let mut end = 0usize;
        for start in 0..pairs.len() {
            while end < pairs.len() && cum[end] - cum[start] < length {
                end += 1;
            }
            if end >= pairs.len() {
                break;
            }
            let (ei, rj) = pairs[start];
            let (ei2, rj2) = pairs[end];
            let (r_ref, t_ref) = relative(&reference.records[rj], &reference.records[rj2]);
            let (r_est, t_est) = relative(&est.records[ei], &est.records[ei2]);
            let r_err = r_ref.transpose() * r_est;
            let t_err = r_ref.transpose() * (t_est - t_ref);
            trans.push(t_err.norm());
            rot.push(log_so3(&r_err).norm());
        }
        let count = trans.len();
        let (mean_trans, rmse_trans, mean_rot) = if count == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let n = count as f64;
            (
                trans.iter().sum::<f64>() / n,
                (trans.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
                rot.iter().sum::<f64>() / n,
            )
        };
        out.push(RpeStats {
            length,
            count,
            mean_trans,
            rmse_trans,
            mean_rot,
        });
    }
    Ok(out)
}

/// 6-dof pose error in the estimate-relative chart used by the filter:
/// `phi = log(R_hat R^T)`, `dp = p_hat - exp(phi) p`, stacked [phi | dp].
pub fn pose_error(
    est_q: &UnitQuaternion<f64>,
    est_p: &Vector3<f64>,
    truth_q: &UnitQuaternion<f64>,
    truth_p: &Vector3<f64>,
) -> Vector6<f64> {
    let r_hat = est_q.to_rotation_matrix().into_inner();
    let r = truth_q.to_rotation_matrix().into_inner();
    let phi = log_so3(&(r_hat * r.transpose()));
    let dp = est_p - exp_so3(&phi) * truth_p;
    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&phi);
    out.fixed_rows_mut::<3>(3).copy_from(&dp);
    out
}

/// Per-frame normalized estimation error squared on the 6-dof pose block,
/// plus its time average. `covs[k]` is the [phi | dp] covariance at frame k.
pub fn nees(
    est: &[(UnitQuaternion<f64>, Vector3<f64>)],
    covs: &[Matrix6<f64>],
    truth: &[(UnitQuaternion<f64>, Vector3<f64>)],
) -> Result<(Vec<f64>, f64)> {
    if est.len() != covs.len() || est.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: est.len(),
            got: covs.len().min(truth.len()),
        });
    }
    if est.is_empty() {
        return Err(Error::Config("empty NEES input".into()));
    }
    let mut per_frame = Vec::with_capacity(est.len());
    for k in 0..est.len() {
        let e = pose_error(&est[k].0, &est[k].1, &truth[k].0, &truth[k].1);
        let chol = covs[k]
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("pose covariance not PD at frame {k}")))?;
        per_frame.push(e.dot(&chol.solve(&e)));
    }
    let avg = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((per_frame, avg))
}
