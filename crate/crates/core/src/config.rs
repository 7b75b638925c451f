//! Run configuration. One TOML file (sections of key/value pairs) holds
//! every default; acceptance runs are reproducible from config + seed alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub wplus_rows: usize,
    pub tex_resolutions: Vec<usize>,
    pub tex_channels: Vec<usize>,
    pub plane_channels: usize,
    pub plane_resolution: usize,
    pub render_features: usize,
    pub render_resolution: usize,
    pub samples_per_ray: usize,
    pub volume_half_extent: f64,
    pub mesh_grid: usize,
    pub shape_coeffs: usize,
    pub expression_coeffs: usize,
    pub head_radius: f64,
    pub camera_radius: f64,
    pub focal_factor: f64,
    pub gru_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub yaw_range: f64,
    pub pitch_range: f64,
    pub coeff_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr_encoder: f64,
    pub lr_discriminator: f64,
    pub lambda_lpips_s1: f64,
    pub lambda_id_s1: f64,
    /// Encoder-side weight of the latent-critic term in stage 1.
    pub lambda_adv_s1: f64,
    pub lambda_lpips_s2: f64,
    pub lambda_tri: f64,
    pub lambda_tex: f64,
    pub lambda_raw: f64,
    pub lambda_adv: f64,
    /// Fraction of stage-2/3 steps after which the adversarial term joins.
    pub adv_start_frac: f64,
    pub r1_gamma: f64,
    pub density_reg_std_frac: f64,
    pub density_reg_points: usize,
    pub blur_frac: f64,
    pub blur_sigma_max: f64,
    pub prior_steps: usize,
    pub prior_low_res_frac: f64,
    pub s1_steps: usize,
    pub s2_steps: usize,
    pub s3_steps: usize,
    pub batch_s1: usize,
    pub batch_s2: usize,
    pub seq_len: usize,
    pub max_seq_len: usize,
    pub rendered_frames: usize,
    pub warm_cycles: usize,
    pub train_identities: usize,
    pub frames_per_identity: usize,
    pub convfusion_window: usize,
    pub convfusion_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub eval_identities: usize,
    pub sequence_len: usize,
    pub source_window: usize,
    pub eval_frames: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            model: ModelConfig::default(),
            sampling: SamplingConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 64,
            wplus_rows: 6,
            tex_resolutions: vec![8, 16, 32],
            tex_channels: vec![32, 32, 16],
            plane_channels: 16,
            plane_resolution: 32,
            render_features: 16,
            render_resolution: 32,
            samples_per_ray: 24,
            volume_half_extent: 1.3,
            mesh_grid: 48,
            shape_coeffs: 4,
            expression_coeffs: 4,
            head_radius: 1.0,
            camera_radius: 4.0,
            focal_factor: 1.2,
            gru_kernel: 3,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            yaw_range: 0.6,
            pitch_range: 0.3,
            coeff_range: 0.9,
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_encoder: 2e-3,
            lr_discriminator: 1e-3,
            lambda_lpips_s1: 0.5,
            lambda_id_s1: 0.25,
            lambda_adv_s1: 0.1,
            lambda_lpips_s2: 1.0,
            lambda_tri: 0.001,
            lambda_tex: 0.001,
            lambda_raw: 1.0,
            lambda_adv: 0.1,
            adv_start_frac: 0.8,
            r1_gamma: 1.0,
            density_reg_std_frac: 0.004,
            density_reg_points: 32,
            blur_frac: 0.1,
            blur_sigma_max: 2.0,
            prior_steps: 60,
            prior_low_res_frac: 0.5,
            s1_steps: 200,
            s2_steps: 280,
            s3_steps: 150,
            batch_s1: 4,
            batch_s2: 2,
            seq_len: 8,
            max_seq_len: 32,
            rendered_frames: 4,
            warm_cycles: 2,
            train_identities: 64,
            frames_per_identity: 8,
            convfusion_window: 4,
            convfusion_steps: 120,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_identities: 16,
            sequence_len: 32,
            source_window: 24,
            eval_frames: 8,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.tex_resolutions.len() != m.tex_channels.len() || m.tex_resolutions.is_empty() {
            return Err(Error::Config(
                "tex_resolutions and tex_channels must be non-empty and equal length".into(),
            ));
        }
        if !m.tex_resolutions.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "tex_resolutions must be strictly increasing".into(),
            ));
        }
        if *m.tex_resolutions.last().unwrap() != m.plane_resolution {
            return Err(Error::Config(
                "finest texture resolution must match plane_resolution".into(),
            ));
        }
        if m.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray must be >= 2".into()));
        }
        if m.render_features < 3 {
            return Err(Error::Config("render_features must carry rgb".into()));
        }
        if self.training.rendered_frames > self.training.seq_len {
            return Err(Error::Config(
                "rendered_frames cannot exceed seq_len".into(),
            ));
        }
        if self.eval.source_window + self.eval.eval_frames > self.eval.sequence_len {
            return Err(Error::Config(
                "source_window + eval_frames exceeds sequence_len".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}
