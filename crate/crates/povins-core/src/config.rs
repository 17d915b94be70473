//! Run configuration: flat `key = value` text with `[section]` headers.
//! Unknown sections or keys are rejected so a typo can't silently fall back
//! to a default.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::AlignMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryChoice {
    Circle,
    FigureEight,
    Spline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseProfile {
    Noiseless,
    Typical,
    /// low-grade consumer IMU and coarse features; dead reckoning drifts
    /// fast enough that loop closure visibly matters
    Harsh,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub trajectory: TrajectoryChoice,
    pub duration: f64,
    pub speed: f64,
    /// circle radius or figure-eight scale, meters
    pub scale: f64,
    pub noise: NoiseProfile,
    /// landmarks scattered in the world box; sparse fields weaken the
    /// odometry and make dead-reckoning drift visible
    pub landmark_count: usize,
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    /// sliding-window clone capacity
    pub max_clones: usize,
    /// keyframe budget
    pub max_keyframes: usize,
    /// per-track chi-square acceptance probability
    pub gate_prob: f64,
    pub min_parallax: f64,
    pub eps_depth: f64,
    /// propagate observation noise through residual construction and whiten
    /// per track; turning it off reverts to bare per-row sigma^2
    pub propagate_obs_noise: bool,
    /// one-sigma initial extrinsic uncertainty overrides (radians, meters);
    /// unset means the noise profile's default prior
    pub init_ext_rot: Option<f64>,
    pub init_ext_pos: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureFlags {
    pub enable_loop_closure: bool,
    pub enable_extrinsic_calibration: bool,
    pub enable_ray_residuals: bool,
}

#[derive(Debug, Clone)]
pub struct LoopClosureConfig {
    pub min_gap_frames: u64,
    pub min_matches: usize,
    pub ransac_iterations: usize,
    pub epipolar_thresh: f64,
    pub reproj_thresh: f64,
    pub min_inliers: usize,
    pub covisibility_k: usize,
    /// cap on verified correspondences per loop update
    pub max_correspondences: usize,
    /// frames to wait after a loop update before detecting again
    pub cooldown_frames: u64,
    /// re-gate verified loop correspondences against the filter covariance;
    /// off by default because geometric verification already rejects
    /// outliers, while the covariance-based gate rejects exactly the
    /// large-drift revisits the loop update exists to correct
    pub use_chi2_gate: bool,
    pub keyframe_parallax: f64,
    pub keyframe_min_tracked: usize,
    pub keyframe_pose_delta: f64,
}

#[derive(Debug, Clone)]
pub struct PathsConfig {
    pub dataset_dir: String,
    pub output_dir: String,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub alignment: AlignMode,
    pub segment_lengths: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub filter: FilterConfig,
    pub features: FeatureFlags,
    pub loop_closure: LoopClosureConfig,
    pub paths: PathsConfig,
    pub evaluation: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            simulation: SimulationConfig {
                trajectory: TrajectoryChoice::Circle,
                duration: 60.0,
                speed: 1.0,
                scale: 3.0,
                noise: NoiseProfile::Typical,
                landmark_count: 600,
            },
            filter: FilterConfig {
                max_clones: 11,
                max_keyframes: 200,
                gate_prob: 0.95,
                min_parallax: crate::vision::MIN_PARALLAX,
                eps_depth: crate::vision::EPS_DEPTH,
                propagate_obs_noise: true,
                init_ext_rot: None,
                init_ext_pos: None,
            },
            features: FeatureFlags {
                enable_loop_closure: true,
                enable_extrinsic_calibration: true,
                enable_ray_residuals: true,
            },
            loop_closure: LoopClosureConfig {
                min_gap_frames: 50,
                min_matches: 12,
                ransac_iterations: 2000,
                epipolar_thresh: 5e-3,
                reproj_thresh: 5e-3,
                min_inliers: 20,
                covisibility_k: 10,
                max_correspondences: 40,
                cooldown_frames: 20,
                use_chi2_gate: false,
                keyframe_parallax: 0.2,
                keyframe_min_tracked: 40,
                keyframe_pose_delta: 1.0,
            },
            paths: PathsConfig {
                dataset_dir: "dataset".into(),
                output_dir: "output".into(),
            },
            evaluation: EvalConfig {
                alignment: AlignMode::Se3,
                segment_lengths: crate::evaluation::DEFAULT_SEGMENT_LENGTHS.to_vec(),
            },
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("key '{key}': bad {what} '{value}'"))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad(key, v, "number"))
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "integer"))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad(key, v, "integer"))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(bad(key, v, "boolean")),
    }
}

impl Config {
    /// Apply one dotted-key override, e.g. `filter.max_clones = 9`.
    /// Top-level keys use an empty section: `seed = 7`.
    pub fn set(&mut self, dotted_key: &str, value: &str) -> Result<()> {
        let (section, key) = match dotted_key.split_once('.') {
            Some((s, k)) => (s, k),
            None => ("", dotted_key),
        };
        let value = value.trim();
        let full = dotted_key;
        match (section, key) {
            ("", "seed") => self.seed = p_u64(full, value)?,
            ("simulation", "trajectory") => {
                self.simulation.trajectory = match value {
                    "circle" => TrajectoryChoice::Circle,
                    "figure_eight" => TrajectoryChoice::FigureEight,
                    "spline" => TrajectoryChoice::Spline,
                    _ => return Err(bad(full, value, "trajectory kind")),
                }
            }
            ("simulation", "duration") => self.simulation.duration = p_f64(full, value)?,
            ("simulation", "speed") => self.simulation.speed = p_f64(full, value)?,
            ("simulation", "scale") => self.simulation.scale = p_f64(full, value)?,
            ("simulation", "landmark_count") => {
                self.simulation.landmark_count = p_usize(full, value)?
            }
            ("simulation", "noise") => {
                self.simulation.noise = match value {
                    "noiseless" => NoiseProfile::Noiseless,
                    "typical" => NoiseProfile::Typical,
                    "harsh" => NoiseProfile::Harsh,
                    _ => return Err(bad(full, value, "noise profile")),
                }
            }
            ("filter", "max_clones") => self.filter.max_clones = p_usize(full, value)?,
            ("filter", "max_keyframes") => self.filter.max_keyframes = p_usize(full, value)?,
            ("filter", "gate_prob") => self.filter.gate_prob = p_f64(full, value)?,
            ("filter", "min_parallax") => self.filter.min_parallax = p_f64(full, value)?,
            ("filter", "eps_depth") => self.filter.eps_depth = p_f64(full, value)?,
            ("filter", "propagate_obs_noise") => {
                self.filter.propagate_obs_noise = p_bool(full, value)?
            }
            ("filter", "init_ext_rot") => {
                self.filter.init_ext_rot = Some(p_f64(full, value)?)
            }
            ("filter", "init_ext_pos") => {
                self.filter.init_ext_pos = Some(p_f64(full, value)?)
            }
            ("features", "enable_loop_closure") => {
                self.features.enable_loop_closure = p_bool(full, value)?
            }
            ("features", "enable_extrinsic_calibration") => {
                self.features.enable_extrinsic_calibration = p_bool(full, value)?
            }
            ("features", "enable_ray_residuals") => {
                self.features.enable_ray_residuals = p_bool(full, value)?
            }
            ("loop_closure", "min_gap_frames") => {
                self.loop_closure.min_gap_frames = p_u64(full, value)?
            }
            ("loop_closure", "min_matches") => {
                self.loop_closure.min_matches = p_usize(full, value)?
            }
            ("loop_closure", "ransac_iterations") => {
                self.loop_closure.ransac_iterations = p_usize(full, value)?
            }
            ("loop_closure", "epipolar_thresh") => {
                self.loop_closure.epipolar_thresh = p_f64(full, value)?
            }
            ("loop_closure", "reproj_thresh") => {
                self.loop_closure.reproj_thresh = p_f64(full, value)?
            }
            ("loop_closure", "min_inliers") => {
                self.loop_closure.min_inliers = p_usize(full, value)?
            }
            ("loop_closure", "covisibility_k") => {
                self.loop_closure.covisibility_k = p_usize(full, value)?
            }
            ("loop_closure", "max_correspondences") => {
                self.loop_closure.max_correspondences = p_usize(full, value)?
            }
            ("loop_closure", "cooldown_frames") => {
                self.loop_closure.cooldown_frames = p_u64(full, value)?
            }
            ("loop_closure", "use_chi2_gate") => {
                self.loop_closure.use_chi2_gate = p_bool(full, value)?
            }
            ("loop_closure", "keyframe_parallax") => {
                self.loop_closure.keyframe_parallax = p_f64(full, value)?
            }
            ("loop_closure", "keyframe_min_tracked") => {
                self.loop_closure.keyframe_min_tracked = p_usize(full, value)?
            }
            ("loop_closure", "keyframe_pose_delta") => {
                self.loop_closure.keyframe_pose_delta = p_f64(full, value)?
            }
            ("paths", "dataset_dir") => self.paths.dataset_dir = value.to_string(),
            ("paths", "output_dir") => self.paths.output_dir = value.to_string(),
            ("evaluation", "alignment") => {
                self.evaluation.alignment = match value {
                    "se3" => AlignMode::Se3,
                    "posyaw" => AlignMode::PosYaw,
                    _ => return Err(bad(full, value, "alignment mode")),
                }
            }
            ("evaluation", "segment_lengths") => {
                self.evaluation.segment_lengths = value
                    .split(',')
                    .map(|s| p_f64(full, s.trim()))
                    .collect::<Result<_>>()?;
            }
            _ => {
                return Err(Error::Config(format!("unknown config key '{full}'")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: malformed section", no + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", no + 1))
            })?;
            let dotted = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            cfg.set(&dotted, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.simulation.duration <= 0.0 {
            return Err(Error::Config("simulation.duration must be positive".into()));
        }
        if self.simulation.speed < 0.0 {
            return Err(Error::Config("simulation.speed must be non-negative".into()));
        }
        if self.simulation.scale <= 0.0 {
            return Err(Error::Config("simulation.scale must be positive".into()));
        }
        if self.filter.max_clones < 3 {
            return Err(Error::Config("filter.max_clones must be at least 3".into()));
        }
        if !(0.0 < self.filter.gate_prob && self.filter.gate_prob < 1.0) {
            return Err(Error::Config("filter.gate_prob must be in (0, 1)".into()));
        }
        if self.loop_closure.min_inliers < 6 {
            return Err(Error::Config(
                "loop_closure.min_inliers must be at least 6".into(),
            ));
        }
        if self.evaluation.segment_lengths.iter().any(|l| *l <= 0.0) {
            return Err(Error::Config("segment lengths must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn parse_sets_every_section() {
        let text = "
            seed = 7
            [simulation]
            trajectory = figure_eight
            duration = 90 # with a trailing comment
            speed = 1.5
            scale = 6
            noise = noiseless
            [filter]
            max_clones = 9
            gate_prob = 0.99
            [features]
            enable_loop_closure = false
            [loop_closure]
            min_matches = 20
            [paths]
            output_dir = /tmp/out
            [evaluation]
            alignment = posyaw
            segment_lengths = 5, 10, 20
        ";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.simulation.trajectory, TrajectoryChoice::FigureEight);
        assert_eq!(cfg.simulation.duration, 90.0);
        assert_eq!(cfg.simulation.noise, NoiseProfile::Noiseless);
        assert_eq!(cfg.filter.max_clones, 9);
        assert!(!cfg.features.enable_loop_closure);
        assert_eq!(cfg.loop_closure.min_matches, 20);
        assert_eq!(cfg.paths.output_dir, "/tmp/out");
        assert_eq!(cfg.evaluation.alignment, AlignMode::PosYaw);
        assert_eq!(cfg.evaluation.segment_lengths, vec![5.0, 10.0, 20.0]);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(Config::parse("[filter]\nmax_clonez = 9\n").is_err());
        assert!(Config::parse("[filtre]\nmax_clones = 9\n").is_err());
        assert!(Config::parse("seedz = 1\n").is_err());
    }

    #[test]
    fn bad_values_rejected_with_key_context() {
        let err = Config::parse("[filter]\nmax_clones = many\n").unwrap_err();
        assert!(err.to_string().contains("max_clones"), "{err}");
        assert!(Config::parse("[simulation]\nnoise = loud\n").is_err());
        assert!(Config::parse("[features]\nenable_loop_closure = maybe\n").is_err());
    }

    #[test]
    fn validation_catches_out_of_range_values() {
        assert!(Config::parse("[simulation]\nduration = 0\n").is_err());
        assert!(Config::parse("[filter]\ngate_prob = 1.5\n").is_err());
        assert!(Config::parse("[filter]\nmax_clones = 2\n").is_err());
        assert!(Config::parse("[evaluation]\nsegment_lengths = 10, -5\n").is_err());
    }

    #[test]
    fn cli_style_override_after_load() {
        let mut cfg = Config::parse("seed = 1\n").unwrap();
        cfg.set("filter.max_clones", "7").unwrap();
        assert_eq!(cfg.filter.max_clones, 7);
        assert!(cfg.set("filter.nope", "1").is_err());
    }
}
