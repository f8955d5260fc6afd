//! Run configuration. Every hyperparameter lives here with its default;
//! unknown keys are rejected when parsing.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Tensor dimensions. Defaults are desk scale; `paper_scale()` gives the
/// full-size SDXL shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    /// Tokens per text encoding (L).
    pub tokens: usize,
    /// Text embedding width (D).
    pub embed_dim: usize,
    /// Latent channels (C).
    pub channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            tokens: 8,
            embed_dim: 64,
            channels: 4,
            latent_h: 32,
            latent_w: 32,
        }
    }
}

impl Dims {
    pub fn paper_scale() -> Self {
        Self {
            tokens: 77,
            embed_dim: 2048,
            channels: 4,
            latent_h: 128,
            latent_w: 128,
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.latent_h, self.latent_w]
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.latent_h * self.latent_w
    }
}

/// Frozen backbone stand-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub seed: u64,
    pub svd_rank: usize,
    pub ada_groups: usize,
    /// Token width inside the attention stages (C_s).
    pub stage_width: usize,
    /// Patch edge in latent pixels; the inter-stage grid is latent / patch.
    pub patch: usize,
    /// Window edge in tokens.
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub alpha0: f64,
    pub beta0: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            svd_rank: 4,
            ada_groups: 2,
            stage_width: 32,
            patch: 4,
            window: 4,
            heads: 2,
            mlp_ratio: 2,
            alpha0: 0.5,
            beta0: 1.0,
        }
    }
}

/// Trainable adapter blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub seed: u64,
    pub film_hidden: usize,
    pub dropout: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Attention width of Region Cross-Attention (d_a).
    pub rca_dim: usize,
    pub rca_heads: usize,
    pub conf_hidden: usize,
    pub alpha_max: f64,
    /// Blend used before training and by the constant-blend variants.
    pub alpha_init: f64,
    /// Gaussian boundary smoothing in latent pixels (4 px at 128 latent).
    pub sigma_b: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            seed: 99,
            film_hidden: 128,
            dropout: 0.1,
            gamma_min: 0.5,
            gamma_max: 1.5,
            rca_dim: 32,
            rca_heads: 2,
            conf_hidden: 32,
            alpha_max: 0.6,
            alpha_init: 0.4,
            sigma_b: 1.0,
        }
    }
}

/// Weights of the four-term objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rank: f64,
    /// The method description uses 0.05; the implementation notes quote 0.1.
    /// Default follows the former; override here to reproduce the latter.
    pub lambda_div: f64,
    pub lambda_alpha: f64,
    pub margin_base: f64,
    pub tau_alpha: f64,
    pub alpha_max: f64,
    /// Transition point of the SmoothL1 confidence loss.
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rank: 0.5,
            lambda_div: 0.05,
            lambda_alpha: 1.0,
            margin_base: 0.05,
            tau_alpha: 0.05,
            alpha_max: 0.6,
            smooth_l1_beta: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-region FiLM with a constant blend.
    FilmOnly,
    /// FiLM plus Region Cross-Attention, constant blend.
    V3,
    /// V3 plus the Confidence Head.
    V4,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::FilmOnly, Variant::V3, Variant::V4];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FilmOnly => "film_only",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        }
    }

    pub fn uses_rca(self) -> bool {
        !matches!(self, Variant::FilmOnly)
    }

    pub fn uses_confidence(self) -> bool {
        matches!(self, Variant::V4)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "film_only" => Ok(Variant::FilmOnly),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub alpha_warmup_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            alpha_warmup_epochs: 60,
            val_fraction: 0.1,
            seed: 0,
            variant: Variant::V4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub size: usize,
    pub seed: u64,
    /// Candidate noises ranked per record (K_c).
    pub candidates: usize,
    /// Fraction of genuinely multi-concept prompts; the rest repeat one
    /// sub-prompt in every region.
    pub mix: f64,
    /// Relative frequency of region counts, as `[k, weight]` pairs.
    pub k_weights: Vec<(usize, f64)>,
    /// Per-element std of the positional perturbation in mock token matrices.
    pub token_noise: f64,
    /// Seed of the mock text vocabulary.
    pub vocab_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 220,
            seed: 7,
            candidates: 5,
            mix: 1.0,
            k_weights: vec![(2, 0.7), (3, 0.3)],
            token_noise: 0.002,
            vocab_seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Edge of the square evaluation canvas in cells.
    pub canvas: usize,
    /// Band width for coherence; `None` scales 32 px at 1024 to the canvas.
    pub band_px: Option<usize>,
    /// Magnitude of the mock image-embedding noise.
    pub provider_noise: f64,
    pub seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            band_px: None,
            provider_noise: 0.05,
            seeds: 5,
        }
    }
}

impl EvalConfig {
    pub fn band(&self) -> usize {
        self.band_px
            .unwrap_or_else(|| crate::geometry::scaled_band_px(self.canvas))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dims: Dims,
    pub surrogate: SurrogateConfig,
    pub adapter: AdapterConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let s = &self.surrogate;
        if d.latent_h % s.patch != 0 || d.latent_w % s.patch != 0 {
            return Err(Error::Config(format!(
                "latent {}×{} is not divisible by patch {}",
                d.latent_h, d.latent_w, s.patch
            )));
        }
        let (gh, gw) = (d.latent_h / s.patch, d.latent_w / s.patch);
        if gh % s.window != 0 || gw % s.window != 0 {
            return Err(Error::Config(format!(
                "token grid {gh}×{gw} is not divisible by window {}",
                s.window
            )));
        }
        if s.stage_width % s.heads != 0 || self.adapter.rca_dim % self.adapter.rca_heads != 0 {
            return Err(Error::Config("attention width not divisible by head count".into()));
        }
        if d.channels % s.ada_groups != 0 {
            return Err(Error::Config("channels not divisible by Ada groups".into()));
        }
        let l = &self.loss;
        for (name, v) in [
            ("lambda_rank", l.lambda_rank),
            ("lambda_div", l.lambda_div),
            ("lambda_alpha", l.lambda_alpha),
            ("margin_base", l.margin_base),
            ("tau_alpha", l.tau_alpha),
            ("alpha_max", l.alpha_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if self.loss.tau_alpha == 0.0 {
            return Err(Error::Config("tau_alpha must be positive".into()));
        }
        if self.corpus.candidates < 2 {
            return Err(Error::Config("at least two candidates are required".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.mix) {
            return Err(Error::Config("mix must lie in [0, 1]".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.adapter.alpha_init <= 0.0 || self.adapter.alpha_init >= self.adapter.alpha_max {
            return Err(Error::Config("alpha_init must lie in (0, alpha_max)".into()));
        }
        Ok(())
    }
}
