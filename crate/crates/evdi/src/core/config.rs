//! Run configuration.
//!
//! Configs are plain-text `key = value` files; `#` starts a comment. Unknown
//! keys are rejected so typos fail loudly instead of silently using defaults.
//! Every stochastic draw in a run is derived from `seed`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{EvdiError, Result};

/// How the per-view blurry ground truth is synthesized by the dataset
/// generator: averaging the full dense frame stack, or only the renders at
/// the n trajectory pose timesteps (matching the training-time blur model).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurMode {
    Dense,
    Poses,
}

/// Denoiser plugged into the diffusion losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    Zero,
    Oracle,
    Shrinkage,
}

/// Latent codec used around the diffusion losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecKind {
    Identity,
    AvgPool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,

    // Event model.
    pub theta: f64,
    pub eps_floor: f64,

    // Scene / dataset.
    pub view_width: usize,
    pub view_height: usize,
    pub n_poses: usize,
    pub frames_per_view: usize,
    pub blur_mode: BlurMode,
    pub scene: String,
    pub traj_spec: Option<PathBuf>,
    pub dataset_dir: Option<PathBuf>,
    pub canvas_padding: Option<usize>,

    // Loss weights.
    pub lambda_blur: f64,
    pub lambda_ev: f64,
    pub lambda_edi: f64,
    pub lambda_rsd: f64,
    /// Mixing weight of the structural-dissimilarity part of the photometric
    /// loss: (1 - w) * L1 + w * DSSIM.
    pub lambda_dssim: f64,

    // Optimization.
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub crf_warmup_frac: f64,
    pub simul_warmup_frac: f64,
    pub lr_canvas: f64,
    pub lr_crf: f64,
    pub lr_residual: f64,
    pub checkpoint_every: usize,

    // Camera response function.
    pub crf_knots: usize,
    pub crf_per_channel: bool,
    /// When false, target construction in the event-deblur losses is treated
    /// as constant (stop-gradient); when true, gradients flow through it.
    pub crf_target_grad: bool,

    // Diffusion.
    pub denoiser: DenoiserKind,
    pub codec: CodecKind,
    pub ddpm_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub rsd_t_max: usize,
    pub rsd_t_min: usize,
    pub coupled_noise: bool,
    pub shrinkage_blur_radius: usize,
    pub residual_channels: usize,

    /// Demosaicing weights for event stacking on color sensors (recorded for
    /// real-capture runs; the synthetic pipeline does not simulate a mosaic).
    pub bayer_weights: (f64, f64, f64),

    /// Worker-thread bound for embarrassingly parallel stages; 0 = all cores.
    pub jobs: usize,
    pub skip_stage2: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            theta: 0.2,
            eps_floor: 1e-3,
            view_width: 128,
            view_height: 128,
            n_poses: 9,
            frames_per_view: 64,
            blur_mode: BlurMode::Dense,
            scene: "builtin:standard".to_string(),
            traj_spec: None,
            dataset_dir: None,
            canvas_padding: None,
            lambda_blur: 1.0,
            lambda_ev: 0.1,
            lambda_edi: 1.0,
            lambda_rsd: 1.0,
            lambda_dssim: 0.2,
            stage1_iters: 5000,
            stage2_iters: 500,
            crf_warmup_frac: 0.015,
            simul_warmup_frac: 0.07,
            lr_canvas: 1e-2,
            lr_crf: 1e-3,
            lr_residual: 1e-2,
            checkpoint_every: 1000,
            crf_knots: 16,
            crf_per_channel: false,
            crf_target_grad: true,
            denoiser: DenoiserKind::Shrinkage,
            codec: CodecKind::Identity,
            ddpm_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            rsd_t_max: 800,
            rsd_t_min: 20,
            coupled_noise: false,
            shrinkage_blur_radius: 2,
            residual_channels: 3,
            bayer_weights: (0.4, 0.2, 0.4),
            jobs: 0,
            skip_stage2: false,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| EvdiError::config(format!("key '{key}': expected a number, got '{v}'")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| EvdiError::config(format!("key '{key}': expected a non-negative integer, got '{v}'")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>()
        .map_err(|_| EvdiError::config(format!("key '{key}': expected a non-negative integer, got '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(EvdiError::config(format!(
            "key '{key}': expected true/false, got '{v}'"
        ))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                EvdiError::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(EvdiError::config(format!("duplicate key '{key}'")));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "theta" => self.theta = parse_f64(key, v)?,
            "eps_floor" => self.eps_floor = parse_f64(key, v)?,
            "view_width" => self.view_width = parse_usize(key, v)?,
            "view_height" => self.view_height = parse_usize(key, v)?,
            "n_poses" => self.n_poses = parse_usize(key, v)?,
            "frames_per_view" => self.frames_per_view = parse_usize(key, v)?,
            "blur_mode" => {
                self.blur_mode = match v {
                    "dense" => BlurMode::Dense,
                    "poses" => BlurMode::Poses,
                    _ => {
                        return Err(EvdiError::config(format!(
                            "key 'blur_mode': expected dense|poses, got '{v}'"
                        )))
                    }
                }
            }
            "scene" => self.scene = v.to_string(),
            "traj_spec" => self.traj_spec = Some(PathBuf::from(v)),
            "dataset_dir" => self.dataset_dir = Some(PathBuf::from(v)),
            "canvas_padding" => self.canvas_padding = Some(parse_usize(key, v)?),
            "lambda_blur" => self.lambda_blur = parse_f64(key, v)?,
            "lambda_ev" => self.lambda_ev = parse_f64(key, v)?,
            "lambda_edi" => self.lambda_edi = parse_f64(key, v)?,
            "lambda_rsd" => self.lambda_rsd = parse_f64(key, v)?,
            "lambda_dssim" => self.lambda_dssim = parse_f64(key, v)?,
            "stage1_iters" => self.stage1_iters = parse_usize(key, v)?,
            "stage2_iters" => self.stage2_iters = parse_usize(key, v)?,
            "crf_warmup_frac" => self.crf_warmup_frac = parse_f64(key, v)?,
            "simul_warmup_frac" => self.simul_warmup_frac = parse_f64(key, v)?,
            "lr_canvas" => self.lr_canvas = parse_f64(key, v)?,
            "lr_crf" => self.lr_crf = parse_f64(key, v)?,
            "lr_residual" => self.lr_residual = parse_f64(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_usize(key, v)?,
            "crf_knots" => self.crf_knots = parse_usize(key, v)?,
            "crf_per_channel" => self.crf_per_channel = parse_bool(key, v)?,
            "crf_target_grad" => self.crf_target_grad = parse_bool(key, v)?,
            "denoiser" => {
                self.denoiser = match v {
                    "zero" => DenoiserKind::Zero,
                    "oracle" => DenoiserKind::Oracle,
                    "shrinkage" => DenoiserKind::Shrinkage,
                    _ => {
                        return Err(EvdiError::config(format!(
                            "key 'denoiser': expected zero|oracle|shrinkage, got '{v}'"
                        )))
                    }
                }
            }
            "codec" => {
                self.codec = match v {
                    "identity" => CodecKind::Identity,
                    "avgpool" => CodecKind::AvgPool,
                    _ => {
                        return Err(EvdiError::config(format!(
                            "key 'codec': expected identity|avgpool, got '{v}'"
                        )))
                    }
                }
            }
            "ddpm_steps" => self.ddpm_steps = parse_usize(key, v)?,
            "beta_start" => self.beta_start = parse_f64(key, v)?,
            "beta_end" => self.beta_end = parse_f64(key, v)?,
            "rsd_t_max" => self.rsd_t_max = parse_usize(key, v)?,
            "rsd_t_min" => self.rsd_t_min = parse_usize(key, v)?,
            "coupled_noise" => self.coupled_noise = parse_bool(key, v)?,
            "shrinkage_blur_radius" => self.shrinkage_blur_radius = parse_usize(key, v)?,
            "residual_channels" => self.residual_channels = parse_usize(key, v)?,
            "bayer_weights" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(EvdiError::config(
                        "key 'bayer_weights': expected three comma-separated numbers",
                    ));
                }
                self.bayer_weights = (
                    parse_f64(key, parts[0])?,
                    parse_f64(key, parts[1])?,
                    parse_f64(key, parts[2])?,
                );
            }
            "jobs" => self.jobs = parse_usize(key, v)?,
            "skip_stage2" => self.skip_stage2 = parse_bool(key, v)?,
            _ => {
                return Err(EvdiError::config(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(EvdiError::Config(msg));
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return err(format!("theta must be > 0, got {}", self.theta));
        }
        if !(self.eps_floor.is_finite() && self.eps_floor > 0.0) {
            return err(format!("eps_floor must be > 0, got {}", self.eps_floor));
        }
        if self.view_width < 16 || self.view_height < 16 {
            return err(format!(
                "view size must be at least 16x16, got {}x{}",
                self.view_width, self.view_height
            ));
        }
        if self.n_poses < 2 {
            return err(format!("n_poses must be >= 2, got {}", self.n_poses));
        }
        if self.frames_per_view < 2 {
            return err(format!(
                "frames_per_view must be >= 2, got {}",
                self.frames_per_view
            ));
        }
        for (name, v) in [
            ("lambda_blur", self.lambda_blur),
            ("lambda_ev", self.lambda_ev),
            ("lambda_edi", self.lambda_edi),
            ("lambda_rsd", self.lambda_rsd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return err(format!(
                "lambda_dssim must be in [0, 1], got {}",
                self.lambda_dssim
            ));
        }
        for (name, v) in [
            ("crf_warmup_frac", self.crf_warmup_frac),
            ("simul_warmup_frac", self.simul_warmup_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("lr_canvas", self.lr_canvas),
            ("lr_crf", self.lr_crf),
            ("lr_residual", self.lr_residual),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.crf_knots < 2 {
            return err(format!("crf_knots must be >= 2, got {}", self.crf_knots));
        }
        if self.ddpm_steps < 2 {
            return err(format!("ddpm_steps must be >= 2, got {}", self.ddpm_steps));
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return err(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {} / {}",
                self.beta_start, self.beta_end
            ));
        }
        if !(1 <= self.rsd_t_min && self.rsd_t_min <= self.rsd_t_max && self.rsd_t_max <= self.ddpm_steps)
        {
            return err(format!(
                "need 1 <= rsd_t_min <= rsd_t_max <= ddpm_steps, got {} / {} / {}",
                self.rsd_t_min, self.rsd_t_max, self.ddpm_steps
            ));
        }
        if self.residual_channels != 1 && self.residual_channels != 3 {
            return err(format!(
                "residual_channels must be 1 or 3, got {}",
                self.residual_channels
            ));
        }
        if self.shrinkage_blur_radius == 0 {
            return err("shrinkage_blur_radius must be >= 1".to_string());
        }
        Ok(())
    }

    /// Iteration at which a warm-up-gated component activates.
    pub fn activation_iter(&self, frac: f64, total: usize) -> usize {
        (frac * total as f64).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_known_keys_and_comments() {
        let cfg = RunConfig::parse(
            "# comment\n\
             seed = 99\n\
             theta = 0.25  # inline comment\n\
             lambda_ev = 0.5\n\
             blur_mode = poses\n\
             denoiser = zero\n\
             bayer_weights = 0.4, 0.2, 0.4\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.theta, 0.25);
        assert_eq!(cfg.lambda_ev, 0.5);
        assert_eq!(cfg.blur_mode, BlurMode::Poses);
        assert_eq!(cfg.denoiser, DenoiserKind::Zero);
        assert_eq!(cfg.bayer_weights, (0.4, 0.2, 0.4));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = RunConfig::parse("thetaa = 0.2\n").unwrap_err();
        assert!(matches!(e, EvdiError::Config(_)), "{e}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("theta = -0.2\n").is_err());
        assert!(RunConfig::parse("theta = abc\n").is_err());
        assert!(RunConfig::parse("lambda_dssim = 1.5\n").is_err());
        assert!(RunConfig::parse("n_poses = 1\n").is_err());
        assert!(RunConfig::parse("rsd_t_min = 900\nrsd_t_max = 800\n").is_err());
        assert!(RunConfig::parse("residual_channels = 2\n").is_err());
    }

    #[test]
    fn activation_iteration_scales_with_total() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.activation_iter(cfg.crf_warmup_frac, 100_000), 1500);
        assert_eq!(cfg.activation_iter(cfg.simul_warmup_frac, 100_000), 7000);
        assert_eq!(cfg.activation_iter(cfg.crf_warmup_frac, 5000), 75);
        assert_eq!(cfg.activation_iter(cfg.simul_warmup_frac, 5000), 350);
    }
}
