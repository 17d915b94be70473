//! Text file formats: trajectories, IMU streams, feature tracks, frame
//! indexes, update reports, loop matches, keyframe databases, and metric
//! CSVs. Writers emit exactly what the readers accept (round-trip safe),
//! with full-precision floats so re-reading is bit-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::evaluation::{RpeStats, TrajectoryFile, TrajectoryRecord};
use crate::propagation::ImuSample;
use crate::state::{FrameId, KeyframeId};
use crate::update::UpdateReport;
use crate::vision::Eye;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, tok: &str, what: &str) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|e| parse_err(path, line, format!("bad {what} '{}': {e}", tok.trim())))
}

fn parse_u64(path: &Path, line: usize, tok: &str, what: &str) -> Result<u64> {
    tok.trim()
        .parse::<u64>()
        .map_err(|e| parse_err(path, line, format!("bad {what} '{}': {e}", tok.trim())))
}

fn parse_i128(path: &Path, line: usize, tok: &str, what: &str) -> Result<i128> {
    tok.trim()
        .parse::<i128>()
        .map_err(|e| parse_err(path, line, format!("bad {what} '{}': {e}", tok.trim())))
}

/// Data lines of a text file: skips blanks and `#` comments, keeps 1-based
/// line numbers for error reporting.
fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields<'a>(
    path: &Path,
    line_no: usize,
    line: &'a str,
    sep: char,
    expected: usize,
) -> Result<Vec<&'a str>> {
    let toks: Vec<&str> = if sep == ' ' {
        line.split_whitespace().collect()
    } else {
        line.split(sep).collect()
    };
    if toks.len() != expected {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {expected} fields, got {}", toks.len()),
        ));
    }
    Ok(toks)
}

// --- trajectory: "timestamp tx ty tz qx qy qz qw" ---

pub fn write_trajectory(path: &Path, traj: &TrajectoryFile) -> Result<()> {
    let mut out = String::new();
    for r in &traj.records {
        let q = r.q.quaternion();
        writeln!(
            out,
            "{:.9} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
            r.timestamp, r.p.x, r.p.y, r.p.z, q.i, q.j, q.k, q.w
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile> {
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (no, line) in data_lines(&content) {
        let t = fields(path, no, line, ' ', 8)?;
        let vals: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(k, tok)| parse_f64(path, no, tok, &format!("field {k}")))
            .collect::<Result<_>>()?;
        records.push(TrajectoryRecord {
            timestamp: vals[0],
            p: Vector3::new(vals[1], vals[2], vals[3]),
            // written from a unit quaternion with round-trip-exact floats;
            // renormalizing here would perturb the last bit and break the
            // bit-identical determinism contract
            q: UnitQuaternion::new_unchecked(Quaternion::new(
                vals[7], vals[4], vals[5], vals[6],
            )),
        });
    }
    let traj = TrajectoryFile { records };
    traj.validate()?;
    Ok(traj)
}

// --- IMU stream: CSV "timestamp_ns, wx, wy, wz, ax, ay, az" ---

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut out = String::from("#timestamp_ns, wx, wy, wz, ax, ay, az\n");
    for s in samples {
        let ns = (s.timestamp * 1e9).round() as i128;
        writeln!(
            out,
            "{ns}, {:e}, {:e}, {:e}, {:e}, {:e}, {:e}",
            s.omega.x, s.omega.y, s.omega.z, s.accel.x, s.accel.y, s.accel.z
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let content = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (no, line) in data_lines(&content) {
        let t = fields(path, no, line, ',', 7)?;
        let ns = parse_i128(path, no, t[0], "timestamp_ns")?;
        let v: Vec<f64> = t[1..]
            .iter()
            .map(|tok| parse_f64(path, no, tok, "imu value"))
            .collect::<Result<_>>()?;
        samples.push(ImuSample {
            timestamp: ns as f64 / 1e9,
            omega: Vector3::new(v[0], v[1], v[2]),
            accel: Vector3::new(v[3], v[4], v[5]),
        });
    }
    Ok(samples)
}

// --- feature tracks: "frame_id, eye, track_id, u_normalized, v_normalized" ---

/// One observation record of the track ingestion format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame_id: FrameId,
    pub eye: Eye,
    pub track_id: u64,
    pub u: f64,
    pub v: f64,
}

fn eye_str(eye: Eye) -> &'static str {
    match eye {
        Eye::Left => "left",
        Eye::Right => "right",
    }
}

fn eye_parse(path: &Path, no: usize, tok: &str) -> Result<Eye> {
    match tok.trim() {
        "left" | "0" => Ok(Eye::Left),
        "right" | "1" => Ok(Eye::Right),
        other => Err(parse_err(path, no, format!("bad eye '{other}'"))),
    }
}

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<()> {
    let mut out = String::from("#frame_id, eye, track_id, u_normalized, v_normalized\n");
    for r in records {
        writeln!(
            out,
            "{}, {}, {}, {:e}, {:e}",
            r.frame_id,
            eye_str(r.eye),
            r.track_id,
            r.u,
            r.v
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (no, line) in data_lines(&content) {
        let t = fields(path, no, line, ',', 5)?;
        records.push(TrackRecord {
            frame_id: parse_u64(path, no, t[0], "frame_id")?,
            eye: eye_parse(path, no, t[1])?,
            track_id: parse_u64(path, no, t[2], "track_id")?,
            u: parse_f64(path, no, t[3], "u")?,
            v: parse_f64(path, no, t[4], "v")?,
        });
    }
    Ok(records)
}

// --- frame index: "frame_id, timestamp" ---

pub fn write_frames(path: &Path, frames: &[(FrameId, f64)]) -> Result<()> {
    let mut out = String::from("#frame_id, timestamp\n");
    for (id, t) in frames {
        writeln!(out, "{id}, {t:e}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Vec<(FrameId, f64)>> {
    let content = fs::read_to_string(path)?;
    let mut frames = Vec::new();
    for (no, line) in data_lines(&content) {
        let t = fields(path, no, line, ',', 2)?;
        frames.push((
            parse_u64(path, no, t[0], "frame_id")?,
            parse_f64(path, no, t[1], "timestamp")?,
        ));
    }
    Ok(frames)
}

// --- update reports: "timestamp, n_uv_rows, n_ray_rows, n_map_rows, residual_rms, cond_flag" ---

pub fn write_reports(path: &Path, reports: &[UpdateReport]) -> Result<()> {
    let mut out =
        String::from("#timestamp, n_uv_rows, n_ray_rows, n_map_rows, residual_rms, cond_flag\n");
    for r in reports {
        writeln!(
            out,
            "{:.9}, {}, {}, {}, {:e}, {}",
            r.timestamp, r.n_uv_rows, r.n_ray_rows, r.n_map_rows, r.residual_rms, r.cond_flag as u8
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<UpdateReport>> {
    let content = fs::read_to_string(path)?;
    let mut reports = Vec::new();
    for (no, line) in data_lines(&content) {
        let t = fields(path, no, line, ',', 6)?;
        reports.push(UpdateReport {
            timestamp: parse_f64(path, no, t[0], "timestamp")?,
            n_uv_rows: parse_u64(path, no, t[1], "n_uv_rows")? as usize,
            n_ray_rows: parse_u64(path, no, t[2], "n_ray_rows")? as usize,
            n_map_rows: parse_u64(path, no, t[3], "n_map_rows")? as usize,
            residual_rms: parse_f64(path, no, t[4], "residual_rms")?,
            cond_flag: parse_u64(path, no, t[5], "cond_flag")? != 0,
            accepted_tracks: 0,
        });
    }
    Ok(reports)
}

// --- loop matches: "query_frame_id, match_keyframe_id, query_u, query_v, match_u, match_v" ---

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopMatchRecord {
    pub query_frame_id: FrameId,
    pub match_keyframe_id: KeyframeId,
    pub query_u: f64,
    pub query_v: f64,
    pub match_u: f64,
    pub match_v: f64,
}

pub fn write_loop_matches(path: &Path, records: &[LoopMatchRecord]) -> Result<()> {
    let mut out =
        String::from("#query_frame_id, match_keyframe_id, query_u, query_v, match_u, match_v\n");
    for r in records {
        writeln!(
            out,
            "{}, {}, {:e}, {:e}, {:e}, {:e}",
            r.query_frame_id, r.match_keyframe_id, r.query_u, r.query_v, r.match_u, r.match_v
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_loop_matches(path: &Path) -> Result<Vec<LoopMatchRecord>> {
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (no, line) in data_lines(&content) {
        let t = fields(path, no, line, ',', 6)?;
        records.push(LoopMatchRecord {
            query_frame_id: parse_u64(path, no, t[0], "query_frame_id")?,
            match_keyframe_id: parse_u64(path, no, t[1], "match_keyframe_id")?,
            query_u: parse_f64(path, no, t[2], "query_u")?,
            query_v: parse_f64(path, no, t[3], "query_v")?,
            match_u: parse_f64(path, no, t[4], "match_u")?,
            match_v: parse_f64(path, no, t[5], "match_v")?,
        });
    }
    Ok(records)
}

// --- initial filter state: one line of 16 floats ---
// "qx qy qz qw px py pz vx vy vz bgx bgy bgz bax bay baz"

pub fn write_init(path: &Path, imu: &crate::state::ImuState) -> Result<()> {
    let q = imu.q.quaternion();
    let mut out = String::from("#qx qy qz qw px py pz vx vy vz bgx bgy bgz bax bay baz\n");
    let vals = [
        q.i, q.j, q.k, q.w, imu.p.x, imu.p.y, imu.p.z, imu.v.x, imu.v.y, imu.v.z, imu.bg.x,
        imu.bg.y, imu.bg.z, imu.ba.x, imu.ba.y, imu.ba.z,
    ];
    let line: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
    out.push_str(&line.join(" "));
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

pub fn read_init(path: &Path) -> Result<crate::state::ImuState> {
    let content = fs::read_to_string(path)?;
    let (no, line) = data_lines(&content)
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty init file"))?;
    let t = fields(path, no, line, ' ', 16)?;
    let v: Vec<f64> = t
        .iter()
        .map(|tok| parse_f64(path, no, tok, "init value"))
        .collect::<Result<_>>()?;
    Ok(crate::state::ImuState {
        q: UnitQuaternion::new_unchecked(Quaternion::new(v[3], v[0], v[1], v[2])),
        p: Vector3::new(v[4], v[5], v[6]),
        v: Vector3::new(v[7], v[8], v[9]),
        bg: Vector3::new(v[10], v[11], v[12]),
        ba: Vector3::new(v[13], v[14], v[15]),
    })
}

// --- camera-IMU extrinsics: two lines (left, right), "qx qy qz qw px py pz" ---

pub fn write_extrinsics(path: &Path, extr: &crate::state::ExtrinsicState) -> Result<()> {
    let mut out = String::from("#qx qy qz qw px py pz (line 1 left, line 2 right)\n");
    for e in [&extr.left, &extr.right] {
        let q = e.q_cb.quaternion();
        writeln!(
            out,
            "{:e} {:e} {:e} {:e} {:e} {:e} {:e}",
            q.i, q.j, q.k, q.w, e.p_cb.x, e.p_cb.y, e.p_cb.z
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_extrinsics(path: &Path) -> Result<crate::state::ExtrinsicState> {
    let content = fs::read_to_string(path)?;
    let mut eyes = Vec::new();
    for (no, line) in data_lines(&content) {
        let t = fields(path, no, line, ' ', 7)?;
        let v: Vec<f64> = t
            .iter()
            .map(|tok| parse_f64(path, no, tok, "extrinsic value"))
            .collect::<Result<_>>()?;
        eyes.push(crate::state::CameraExtrinsic {
            q_cb: UnitQuaternion::new_unchecked(Quaternion::new(v[3], v[0], v[1], v[2])),
            p_cb: Vector3::new(v[4], v[5], v[6]),
        });
    }
    if eyes.len() != 2 {
        return Err(parse_err(path, 1, format!("expected 2 extrinsic lines, got {}", eyes.len())));
    }
    Ok(crate::state::ExtrinsicState {
        left: eyes[0].clone(),
        right: eyes[1].clone(),
    })
}

// --- keyframe database export (inspection text) ---

pub fn write_keyframe_database(path: &Path, map: &crate::loop_closure::ImplicitMap) -> Result<()> {
    let mut out = String::from("#keyframe_id, frame_id, n_keypoints\n");
    let mut kp = String::from("#keyframe_id, eye, association_key, u, v\n");
    for rec in map.records() {
        writeln!(out, "{}, {}, {}", rec.keyframe_id, rec.frame_id, rec.keypoints.len())
            .expect("string write");
        for k in &rec.keypoints {
            writeln!(
                kp,
                "{}, {}, {}, {:e}, {:e}",
                rec.keyframe_id,
                eye_str(k.eye),
                k.association_key,
                k.u,
                k.v
            )
            .expect("string write");
        }
    }
    out.push_str(&kp);
    fs::write(path, out)?;
    Ok(())
}

// --- metric CSVs for plotting ---

pub fn write_metrics_csv(path: &Path, ate: f64, rpe: &[RpeStats]) -> Result<()> {
    let mut out = String::from("metric, segment_length_m, value\n");
    writeln!(out, "ate_rmse_m, , {ate:e}").expect("string write");
    for s in rpe {
        writeln!(out, "rpe_trans_rmse_m, {}, {:e}", s.length, s.rmse_trans).expect("string write");
        writeln!(out, "rpe_trans_mean_m, {}, {:e}", s.length, s.mean_trans).expect("string write");
        writeln!(out, "rpe_rot_mean_rad, {}, {:e}", s.length, s.mean_rot).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_nees_csv(path: &Path, timestamps: &[f64], per_frame: &[f64], avg: f64) -> Result<()> {
    let mut out = String::from("timestamp, nees\n");
    for (t, v) in timestamps.iter().zip(per_frame) {
        writeln!(out, "{t:.9}, {v:e}").expect("string write");
    }
    writeln!(out, "average, {avg:e}").expect("string write");
    fs::write(path, out)?;
    Ok(())
}
