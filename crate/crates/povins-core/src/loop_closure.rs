//! Implicit environmental map and loop correction: keyframes holding only
//! 2D keypoints (never a 3D coordinate), keyframe policy, loop detection,
//! two-step RANSAC verification, and map-residual batches consumed by the
//! ordinary EKF update — no pose-graph optimization, no bundle adjustment.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::state::{FrameId, FullState, KeyframeId};
use crate::update::{poses_with_keyframes, MeasurementBatch, RowSource, UpdatePolicy};
use crate::vision::{
    self, Eye, FeatureTrack, NormalizedObservation, PoseMap,
};

/// One 2D keypoint in a keyframe record. The association key is the
/// detector-level identity (simulator landmark id, or a descriptor-match id
/// in dataset mode).
#[derive(Debug, Clone, Copy)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    pub eye: Eye,
    pub association_key: u64,
}

#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub keyframe_id: KeyframeId,
    pub frame_id: FrameId,
    pub keypoints: Vec<Keypoint>,
}

impl KeyframeRecord {
    /// keys must be unique per eye
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for k in &self.keypoints {
            if !seen.insert((k.eye, k.association_key)) {
                return Err(Error::Config(format!(
                    "keyframe {}: duplicate association key {} ({:?})",
                    self.keyframe_id, k.association_key, k.eye
                )));
            }
        }
        Ok(())
    }

    pub fn keypoint(&self, eye: Eye, key: u64) -> Option<&Keypoint> {
        self.keypoints
            .iter()
            .find(|k| k.eye == eye && k.association_key == key)
    }

    fn left_keys(&self) -> BTreeSet<u64> {
        self.keypoints
            .iter()
            .filter(|k| k.eye == Eye::Left)
            .map(|k| k.association_key)
            .collect()
    }
}

/// Keyframe database plus the covisibility graph (edge weight = number of
/// shared association keys). Holds no 3D point anywhere.
#[derive(Debug, Clone, Default)]
pub struct ImplicitMap {
    records: BTreeMap<KeyframeId, KeyframeRecord>,
    covis: BTreeMap<KeyframeId, BTreeMap<KeyframeId, usize>>,
}

impl ImplicitMap {
    pub fn new() -> Self {
        ImplicitMap::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: KeyframeId) -> Option<&KeyframeRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &KeyframeRecord> {
        self.records.values()
    }

    pub fn insert(&mut self, record: KeyframeRecord) -> Result<()> {
        record.validate()?;
        let keys = record.left_keys();
        for (other_id, other) in &self.records {
            let shared = keys.intersection(&other.left_keys()).count();
            if shared > 0 {
                self.covis
                    .entry(record.keyframe_id)
                    .or_default()
                    .insert(*other_id, shared);
                self.covis
                    .entry(*other_id)
                    .or_default()
                    .insert(record.keyframe_id, shared);
            }
        }
        self.records.insert(record.keyframe_id, record);
        Ok(())
    }

    pub fn remove(&mut self, id: KeyframeId) {
        self.records.remove(&id);
        self.covis.remove(&id);
        for edges in self.covis.values_mut() {
            edges.remove(&id);
        }
    }

    pub fn covisibility(&self, a: KeyframeId, b: KeyframeId) -> usize {
        self.covis
            .get(&a)
            .and_then(|e| e.get(&b))
            .copied()
            .unwrap_or(0)
    }

    /// Eviction policy: fewest covisibility links, ties broken oldest-first.
    pub fn eviction_candidate(&self) -> Option<KeyframeId> {
        self.records
            .keys()
            .min_by_key(|id| {
                let links = self.covis.get(id).map(|e| e.len()).unwrap_or(0);
                (links, **id)
            })
            .copied()
    }
}

/// Keyframe trigger statistics, computed by the tracking loop.
#[derive(Debug, Clone, Copy)]
pub struct FrameStats {
    pub mean_parallax_vs_last_kf: f64,
    pub n_tracked: usize,
    pub mean_pose_delta_vs_covis: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct KeyframeThresholds {
    /// normalized-coordinate parallax, condition (1)
    pub parallax: f64,
    /// tracked-feature floor, condition (2)
    pub min_tracked: usize,
    /// pose-change threshold vs local covisibility frames, condition (3)
    pub pose_delta: f64,
}

impl Default for KeyframeThresholds {
    fn default() -> Self {
        KeyframeThresholds {
            parallax: 0.2,
            min_tracked: 40,
            pose_delta: 1.0,
        }
    }
}

/// A frame becomes a keyframe when any single condition fires: enough
/// parallax since the last keyframe, tracking starvation, or enough pose
/// change relative to the local covisibility frames.
pub fn keyframe_decision(stats: &FrameStats, thresholds: &KeyframeThresholds) -> bool {
    stats.mean_parallax_vs_last_kf >= thresholds.parallax
        || stats.n_tracked < thresholds.min_tracked
        || stats.mean_pose_delta_vs_covis >= thresholds.pose_delta
}

/// One tentative 2D-2D correspondence between a query keyframe and a map
/// keyframe, left-eye normalized coordinates. `key` is kept for simulator
/// precision accounting only.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub query_u: f64,
    pub query_v: f64,
    pub match_u: f64,
    pub match_v: f64,
    pub key: u64,
}

#[derive(Debug, Clone)]
pub struct LoopCandidate {
    pub query: KeyframeId,
    pub matched: KeyframeId,
    pub correspondences: Vec<Correspondence>,
    pub score: usize,
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    /// temporal-adjacency exclusion, in frame ids
    pub min_gap_frames: u64,
    pub min_matches: usize,
    /// probability of emitting one bogus candidate per query (adversarial
    /// input for the verification stage; zero in production)
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            min_gap_frames: 50,
            min_matches: 12,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }
}

/// Association-key loop detector: pairs the query against every map
/// keyframe sharing enough left-eye keys, skipping temporally adjacent
/// frames. Candidates come back sorted by match count, best first.
pub fn detect_loop(
    query: &KeyframeRecord,
    map: &ImplicitMap,
    cfg: &DetectorConfig,
) -> Vec<LoopCandidate> {
    let mut out = Vec::new();
    let query_keys = query.left_keys();
    for rec in map.records() {
        if rec.keyframe_id == query.keyframe_id {
            continue;
        }
        if rec.frame_id >= query.frame_id || query.frame_id - rec.frame_id <= cfg.min_gap_frames {
            continue;
        }
        let mut correspondences = Vec::new();
        for key in query_keys.intersection(&rec.left_keys()) {
            let q = query.keypoint(Eye::Left, *key).expect("key from query");
            let m = rec.keypoint(Eye::Left, *key).expect("key from record");
            correspondences.push(Correspondence {
                query_u: q.u,
                query_v: q.v,
                match_u: m.u,
                match_v: m.v,
                key: *key,
            });
        }
        if correspondences.len() >= cfg.min_matches {
            out.push(LoopCandidate {
                query: query.keyframe_id,
                matched: rec.keyframe_id,
                score: correspondences.len(),
                correspondences,
            });
        }
    }
    out.sort_by(|a, b| b.score.cmp(&a.score).then(a.matched.cmp(&b.matched)));

    if cfg.false_positive_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ query.keyframe_id);
        if rng.gen_range(0.0..1.0) < cfg.false_positive_rate {
            if let Some(victim) = map
                .records()
                .filter(|r| {
                    r.frame_id < query.frame_id
                        && query.frame_id - r.frame_id > cfg.min_gap_frames
                })
                .min_by_key(|r| r.keyframe_id)
            {
                let n = cfg.min_matches.max(16);
                let correspondences = (0..n)
                    .map(|i| Correspondence {
                        query_u: rng.gen_range(-1.0..1.0),
                        query_v: rng.gen_range(-1.0..1.0),
                        match_u: rng.gen_range(-1.0..1.0),
                        match_v: rng.gen_range(-1.0..1.0),
                        key: u64::MAX - i as u64,
                    })
                    .collect();
                out.push(LoopCandidate {
                    query: query.keyframe_id,
                    matched: victim.keyframe_id,
                    score: 0,
                    correspondences,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Sampson-distance gate for the 2D-2D stage, normalized units
    pub epipolar_thresh: f64,
    /// reprojection gate for the 3D-2D stage, normalized units
    pub reproj_thresh: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 2000,
            epipolar_thresh: 5e-3,
            reproj_thresh: 5e-3,
            min_inliers: 20,
            seed: 0,
        }
    }
}

fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let c = rng.gen_range(0..n);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// 8-point essential matrix from normalized correspondences
/// (match -> query), rank-2 enforced.
fn essential_8pt(corrs: &[Correspondence], idx: &[usize]) -> Option<Matrix3<f64>> {
    let mut a = DMatrix::zeros(idx.len(), 9);
    for (row, &i) in idx.iter().enumerate() {
        let c = &corrs[i];
        let (x, y) = (c.match_u, c.match_v);
        let (xp, yp) = (c.query_u, c.query_v);
        let vals = [
            xp * x,
            xp * y,
            xp,
            yp * x,
            yp * y,
            yp,
            x,
            y,
            1.0,
        ];
        for (col, v) in vals.iter().enumerate() {
            a[(row, col)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let e_vec = vt.row(vt.nrows() - 1);
    let e = Matrix3::new(
        e_vec[0], e_vec[1], e_vec[2], e_vec[3], e_vec[4], e_vec[5], e_vec[6], e_vec[7], e_vec[8],
    );
    // rank-2 projection
    let svd_e = e.svd(true, true);
    let mut s = svd_e.singular_values;
    s[2] = 0.0;
    let u = svd_e.u?;
    let vt = svd_e.v_t?;
    Some(u * Matrix3::from_diagonal(&s) * vt)
}

fn sampson_distance(e: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let q = Vector3::new(c.match_u, c.match_v, 1.0);
    let qp = Vector3::new(c.query_u, c.query_v, 1.0);
    let eq = e * q;
    let etqp = e.transpose() * qp;
    let num = qp.dot(&eq);
    let den = eq.x * eq.x + eq.y * eq.y + etqp.x * etqp.x + etqp.y * etqp.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

/// DLT perspective pose from >= 6 world points and normalized observations:
/// returns (R, t) with `x_C = R x_W + t`.
fn dlt_pnp(points: &[Vector3<f64>], obs: &[(f64, f64)], idx: &[usize]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let mut a = DMatrix::zeros(2 * idx.len(), 12);
    for (row, &i) in idx.iter().enumerate() {
        let x = points[i];
        let (u, v) = obs[i];
        let r0 = 2 * row;
        for (c, val) in [x.x, x.y, x.z, 1.0].iter().enumerate() {
            a[(r0, c)] = *val;
            a[(r0, 8 + c)] = -u * val;
            a[(r0 + 1, 4 + c)] = *val;
            a[(r0 + 1, 8 + c)] = -v * val;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let p = vt.row(vt.nrows() - 1);
    let m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let t_raw = Vector3::new(p[3], p[7], p[11]);
    let svd_m = m.svd(true, true);
    let u = svd_m.u?;
    let vt_m = svd_m.v_t?;
    let mean_sigma = svd_m.singular_values.mean();
    if mean_sigma < 1e-12 {
        return None;
    }
    // P is recovered up to a signed scale s: M = s R. det(U V^T) carries
    // sign(s), so it resolves the projective ambiguity outright.
    let w = u * vt_m;
    let (r, t) = if w.determinant() > 0.0 {
        (w, t_raw / mean_sigma)
    } else {
        (-w, -t_raw / mean_sigma)
    };
    Some((r, t))
}

/// A correspondence that survived both verification stages, with its
/// transient lifted depth in the map keyframe (never stored anywhere).
#[derive(Debug, Clone, Copy)]
pub struct VerifiedCorrespondence {
    pub corr: Correspondence,
    pub depth_at_match: f64,
}

/// Two-step geometric verification: essential-matrix RANSAC on the 2D-2D
/// correspondences, then lifting the survivors at the map keyframe
/// (stereo first, multi-view fusion as fallback) and perspective-pose
/// RANSAC 3D-2D against the query. Returns the step-2 inliers or
/// `Rejected` when either stage starves.
pub fn geometric_verify(
    candidate: &LoopCandidate,
    map: &ImplicitMap,
    state: &FullState,
    cfg: &RansacConfig,
) -> Result<Vec<VerifiedCorrespondence>> {
    let n = candidate.correspondences.len();
    if n < 8 {
        return Err(Error::Rejected(format!(
            "only {n} tentative correspondences"
        )));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (candidate.query << 17) ^ candidate.matched);

    // --- step 1: 2D-2D essential RANSAC ---
    let corrs = &candidate.correspondences;
    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..cfg.iterations {
        let idx = sample_distinct(&mut rng, n, 8);
        let e = match essential_8pt(corrs, &idx) {
            Some(e) => e,
            None => continue,
        };
        let inliers: Vec<usize> = (0..n)
            .filter(|&i| sampson_distance(&e, &corrs[i]) < cfg.epipolar_thresh)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }
    if best_inliers.len() < cfg.min_inliers {
        return Err(Error::Rejected(format!(
            "2D-2D stage kept {} of {n}",
            best_inliers.len()
        )));
    }

    // --- lift step-1 survivors at the map keyframe ---
    let record = map
        .record(candidate.matched)
        .ok_or_else(|| Error::Rejected("matched keyframe not in map".into()))?;
    let kf_pose = state
        .keyframe_by_id(candidate.matched)
        .map(|k| Pose::from_quat(&k.q, k.p))
        .ok_or_else(|| Error::Rejected("matched keyframe has no state pose".into()))?;
    let cam = vision::camera_frame(&kf_pose, &state.extrinsics.left);
    let poses = poses_with_keyframes(state);

    let mut world_points = Vec::new();
    let mut query_obs = Vec::new();
    let mut kept = Vec::new();
    for &i in &best_inliers {
        let c = corrs[i];
        let depth = lift_depth(record, &c, state, &poses, map);
        let depth = match depth {
            Some(d) if d > 0.0 => d,
            _ => continue,
        };
        let ray = Vector3::new(c.match_u, c.match_v, 1.0);
        let x_world = cam.w.transpose() * (ray * depth) + cam.c;
        world_points.push(x_world);
        query_obs.push((c.query_u, c.query_v));
        kept.push((c, depth));
    }
    if world_points.len() < cfg.min_inliers {
        return Err(Error::Rejected(format!(
            "lifting kept {} correspondences",
            world_points.len()
        )));
    }

    // --- step 2: 3D-2D perspective-pose RANSAC ---
    let m = world_points.len();
    let mut best2: Vec<usize> = Vec::new();
    for _ in 0..cfg.iterations {
        let idx = sample_distinct(&mut rng, m, 6);
        let (r, t) = match dlt_pnp(&world_points, &query_obs, &idx) {
            Some(rt) => rt,
            None => continue,
        };
        let inliers: Vec<usize> = (0..m)
            .filter(|&i| {
                let p = r * world_points[i] + t;
                if p.z <= 0.0 {
                    return false;
                }
                let du = p.x / p.z - query_obs[i].0;
                let dv = p.y / p.z - query_obs[i].1;
                (du * du + dv * dv).sqrt() < cfg.reproj_thresh
            })
            .collect();
        if inliers.len() > best2.len() {
            best2 = inliers;
        }
    }
    if best2.len() < cfg.min_inliers {
        return Err(Error::Rejected(format!(
            "3D-2D stage kept {} of {m}",
            best2.len()
        )));
    }
    Ok(best2
        .into_iter()
        .map(|i| VerifiedCorrespondence {
            corr: kept[i].0,
            depth_at_match: kept[i].1,
        })
        .collect())
}

/// Transient depth of a map keypoint: stereo pair within the keyframe when
/// present, otherwise parallax-weighted fusion across other keyframes that
/// saw the same key.
fn lift_depth(
    record: &KeyframeRecord,
    c: &Correspondence,
    state: &FullState,
    poses: &PoseMap,
    map: &ImplicitMap,
) -> Option<f64> {
    let left = NormalizedObservation {
        frame_id: record.frame_id,
        eye: Eye::Left,
        u: c.match_u,
        v: c.match_v,
    };
    if let Some(kp_r) = record.keypoint(Eye::Right, c.key) {
        let right = NormalizedObservation {
            frame_id: record.frame_id,
            eye: Eye::Right,
            u: kp_r.u,
            v: kp_r.v,
        };
        if let Ok(z) = vision::stereo_depth(&left, &right, &state.extrinsics) {
            return Some(z);
        }
    }
    // fallback: multi-view fusion across keyframes sharing the key
    let mut observations = vec![left];
    for other in map.records() {
        if other.keyframe_id == record.keyframe_id {
            continue;
        }
        if !poses.contains_key(&other.frame_id) {
            continue;
        }
        if let Some(kp) = other.keypoint(Eye::Left, c.key) {
            observations.push(NormalizedObservation {
                frame_id: other.frame_id,
                eye: Eye::Left,
                u: kp.u,
                v: kp.v,
            });
        }
    }
    if observations.len() < 2 {
        return None;
    }
    let track = FeatureTrack {
        track_id: c.key,
        observations,
        sigma: vision::DEFAULT_PIXEL_SIGMA,
    };
    vision::fused_ray_depth(
        &track,
        poses,
        &state.extrinsics,
        (record.frame_id, Eye::Left),
        vision::MIN_PARALLAX,
    )
    .ok()
}

/// Keyframes sharing at least `k` associations with the verified match,
/// best first; always contains the match itself.
pub fn covisible_keyframes(
    verified_match: KeyframeId,
    map: &ImplicitMap,
    k: usize,
) -> Vec<KeyframeId> {
    let mut out = vec![verified_match];
    if let Some(edges) = map.covis.get(&verified_match) {
        let mut neighbors: Vec<(KeyframeId, usize)> = edges
            .iter()
            .filter(|(_, shared)| **shared >= k)
            .map(|(id, shared)| (*id, *shared))
            .collect();
        neighbors.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out.extend(neighbors.into_iter().map(|(id, _)| id));
    }
    out
}

/// Build the loop-correction measurement batch: for every verified
/// correspondence, a feature track spanning the query view(s) and the
/// covisible keyframe views of the same key, turned into reprojection
/// residuals whose Jacobian columns hit both active-state and keyframe-pose
/// blocks.
pub fn map_residual_batch(
    query_frame: FrameId,
    query_record: &KeyframeRecord,
    verified: &[VerifiedCorrespondence],
    loop_keyframes: &[KeyframeId],
    map: &ImplicitMap,
    state: &FullState,
    policy: &UpdatePolicy,
) -> MeasurementBatch {
    let cols = state.error_dim();
    let poses = poses_with_keyframes(state);
    let loop_set: BTreeSet<KeyframeId> = loop_keyframes.iter().copied().collect();

    let mut all: Vec<(u64, crate::update::TrackRows)> = Vec::new();
    let mut sorted: Vec<&VerifiedCorrespondence> = verified.iter().collect();
    sorted.sort_by_key(|v| v.corr.key);

    for vc in sorted {
        let key = vc.corr.key;
        let mut observations = Vec::new();
        for eye in [Eye::Left, Eye::Right] {
            if let Some(kp) = query_record.keypoint(eye, key) {
                observations.push(NormalizedObservation {
                    frame_id: query_frame,
                    eye,
                    u: kp.u,
                    v: kp.v,
                });
            }
        }
        for kid in &loop_set {
            let rec = match map.record(*kid) {
                Some(r) => r,
                None => continue,
            };
            // the query may itself be covisible with the match (it usually
            // is); skip it so no view appears twice
            if *kid == query_record.keyframe_id || rec.frame_id == query_frame {
                continue;
            }
            if !poses.contains_key(&rec.frame_id) {
                continue;
            }
            for eye in [Eye::Left, Eye::Right] {
                if let Some(kp) = rec.keypoint(eye, key) {
                    observations.push(NormalizedObservation {
                        frame_id: rec.frame_id,
                        eye,
                        u: kp.u,
                        v: kp.v,
                    });
                }
            }
        }
        let track = FeatureTrack {
            track_id: key,
            observations,
            sigma: vision::DEFAULT_PIXEL_SIGMA,
        };
        if track.validate().is_err() {
            continue;
        }
        let base = match vision::select_base_views(&track, &poses, &state.extrinsics, policy.min_parallax) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let rows = match crate::update::whitened_track_rows(&track, &poses, state, &base, None, policy) {
            Some(t) => t,
            None => continue,
        };
        all.push((key, rows));
    }

    let total: usize = all.iter().map(|(_, t)| t.r.len()).sum();
    let mut batch = MeasurementBatch {
        r: DVector::zeros(total),
        h: DMatrix::zeros(total, cols),
        rn: DVector::zeros(total),
        sources: vec![RowSource::Map; total],
        track_spans: Vec::new(),
        counts: (0, 0, total),
    };
    let mut at = 0usize;
    for (key, t) in all {
        let span = t.r.len();
        batch.r.rows_mut(at, span).copy_from(&t.r);
        batch.rn.rows_mut(at, span).copy_from(&t.rn);
        batch.h.view_mut((at, 0), (span, cols)).copy_from(&t.h);
        batch.track_spans.push((key, at, span));
        at += span;
    }
    batch
}
