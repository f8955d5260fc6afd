//! Trainable adapter stack: region FiLM, Region Cross-Attention and the
//! confidence gate, plus the full forward pass that blends them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{GlobalParts, SurrogateNpNet, NORM_EPS};
use crate::config::{AdapterConfig, Variant};
use crate::error::{Error, Result};
use crate::geometry::{downsample_mask, soften_masks, HardMasks};
use crate::nn::{BoundLinear, Linear};
use crate::seed::child_rng;
use crate::synth::{confidence_features, token_average, ConfidenceFeatures};
use crate::tensor::Tensor;

/// Two-layer perceptron `D → hidden → 2C` whose output is read as raw
/// `(γ − 1, β)` per channel. The output layer starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmAdapter {
    pub hidden: Linear,
    pub out: Linear,
}

/// Region Cross-Attention projections (no biases). `W_O` starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RcaLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

/// `7 → h → h → 1` perceptron; the last layer has zero weights and a bias
/// chosen so the initial gate equals `alpha_init`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceHead {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

/// Corpus moments used to z-score the confidence features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMoments {
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

impl Default for FeatureMoments {
    fn default() -> Self {
        Self {
            mean: [0.0; 7],
            std: [1.0; 7],
        }
    }
}

impl FeatureMoments {
    /// Population moments; a feature with std below 1e-12 keeps std 1.
    pub fn from_features(fs: &[ConfidenceFeatures]) -> Self {
        if fs.is_empty() {
            return Self::default();
        }
        let n = fs.len() as f64;
        let mut m = Self::default();
        for i in 0..7 {
            let mean = fs.iter().map(|f| f.0[i]).sum::<f64>() / n;
            let sd = (fs.iter().map(|f| (f.0[i] - mean).powi(2)).sum::<f64>() / n).sqrt();
            m.mean[i] = mean;
            m.std[i] = if sd < 1e-12 { 1.0 } else { sd };
        }
        m
    }

    pub fn standardize(&self, f: &ConfidenceFeatures) -> [f64; 7] {
        let mut out = [0.0; 7];
        for i in 0..7 {
            out[i] = (f.0[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub film: FilmAdapter,
    pub rca: RcaLayer,
    pub conf: ConfidenceHead,
    pub moments: FeatureMoments,
}

/// Which blocks a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Film,
    Rca,
    Confidence,
}

impl Block {
    pub fn trained_by(self, variant: Variant) -> bool {
        match self {
            Block::Film => true,
            Block::Rca => variant.uses_rca(),
            Block::Confidence => variant.uses_confidence(),
        }
    }
}

pub const PARAM_NAMES: [(&str, Block); 14] = [
    ("film.hidden.w", Block::Film),
    ("film.hidden.b", Block::Film),
    ("film.out.w", Block::Film),
    ("film.out.b", Block::Film),
    ("rca.wq", Block::Rca),
    ("rca.wk", Block::Rca),
    ("rca.wv", Block::Rca),
    ("rca.wo", Block::Rca),
    ("conf.l1.w", Block::Confidence),
    ("conf.l1.b", Block::Confidence),
    ("conf.l2.w", Block::Confidence),
    ("conf.l2.b", Block::Confidence),
    ("conf.l3.w", Block::Confidence),
    ("conf.l3.b", Block::Confidence),
];

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ConfidenceHead {
    pub fn new<R: Rng + ?Sized>(cfg: &AdapterConfig, rng: &mut R) -> Result<Self> {
        if !(cfg.alpha_init > 0.0 && cfg.alpha_init < cfg.alpha_max) {
            return Err(Error::Config("alpha_init must lie strictly inside (0, alpha_max)".into()));
        }
        let h = cfg.conf_hidden;
        let mut l3 = Linear::zeros(h, 1);
        l3.b = Tensor::from_vec(vec![logit(cfg.alpha_init / cfg.alpha_max)]);
        Ok(Self {
            l1: Linear::random(7, h, 1.0, rng),
            l2: Linear::random(h, h, 1.0, rng),
            l3,
        })
    }
}

impl AdapterParams {
    /// Fresh stack: FiLM and RCA output layers zero, gate at `alpha_init`.
    pub fn new(cfg: &AdapterConfig, embed_dim: usize, channels: usize, stage_width: usize) -> Result<Self> {
        if cfg.rca_heads == 0 || cfg.rca_dim % cfg.rca_heads != 0 {
            return Err(Error::Config("rca_dim must be divisible by rca_heads".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        let mut r = child_rng(cfg.seed, "film", 0);
        let film = FilmAdapter {
            hidden: Linear::random(embed_dim, cfg.film_hidden, 1.0, &mut r),
            out: Linear::zeros(cfg.film_hidden, 2 * channels),
        };
        let mut r = child_rng(cfg.seed, "rca", 0);
        let d = cfg.rca_dim;
        let rca = RcaLayer {
            wq: Tensor::randn(&[stage_width, d], 1.0 / (stage_width as f64).sqrt(), &mut r),
            wk: Tensor::randn(&[embed_dim, d], 1.0 / (embed_dim as f64).sqrt(), &mut r),
            wv: Tensor::randn(&[embed_dim, d], 1.0 / (embed_dim as f64).sqrt(), &mut r),
            wo: Tensor::zeros(&[d, stage_width]),
            heads: cfg.rca_heads,
        };
        let conf = ConfidenceHead::new(cfg, &mut child_rng(cfg.seed, "confidence", 0))?;
        Ok(Self {
            config: cfg.clone(),
            film,
            rca,
            conf,
            moments: FeatureMoments::default(),
        })
    }

    pub fn for_surrogate(cfg: &AdapterConfig, net: &SurrogateNpNet) -> Result<Self> {
        Self::new(cfg, net.dims.embed_dim, net.dims.channels, net.config.stage_width)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.film.hidden.w,
            &self.film.hidden.b,
            &self.film.out.w,
            &self.film.out.b,
            &self.rca.wq,
            &self.rca.wk,
            &self.rca.wv,
            &self.rca.wo,
            &self.conf.l1.w,
            &self.conf.l1.b,
            &self.conf.l2.w,
            &self.conf.l2.b,
            &self.conf.l3.w,
            &self.conf.l3.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.film.hidden.w,
            &mut self.film.hidden.b,
            &mut self.film.out.w,
            &mut self.film.out.b,
            &mut self.rca.wq,
            &mut self.rca.wk,
            &mut self.rca.wv,
            &mut self.rca.wo,
            &mut self.conf.l1.w,
            &mut self.conf.l1.b,
            &mut self.conf.l2.w,
            &mut self.conf.l2.b,
            &mut self.conf.l3.w,
            &mut self.conf.l3.b,
        ]
    }

    /// Trainable parameter count of the blocks a variant uses.
    pub fn num_params(&self, variant: Variant) -> usize {
        self.tensors()
            .iter()
            .zip(PARAM_NAMES)
            .filter(|(_, (_, b))| b.trained_by(variant))
            .map(|(t, _)| t.len())
            .sum()
    }

    /// Adds Gaussian noise of standard deviation `std` to every array, which
    /// moves the stack away from its identity initialisation.
    pub fn jitter<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for t in self.tensors_mut() {
            let n = Tensor::randn(t.shape(), std, rng);
            t.data_mut().iter_mut().zip(n.data()).for_each(|(a, b)| *a += b);
        }
    }

    /// Replaces the confidence head with a fresh one (warm start).
    pub fn reset_confidence(&mut self) -> Result<()> {
        self.conf = ConfidenceHead::new(&self.config, &mut child_rng(self.config.seed, "confidence", 0))?;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, variant: Variant) -> BoundAdapter {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .zip(PARAM_NAMES)
            .map(|(t, (_, b))| {
                if b.trained_by(variant) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundAdapter {
            vars,
            heads: self.rca.heads,
            gamma_min: self.config.gamma_min,
            gamma_max: self.config.gamma_max,
            alpha_max: self.config.alpha_max,
            alpha_init: self.config.alpha_init,
        }
    }

    /// Gate value for already computed raw features.
    pub fn alpha(&self, f: &ConfidenceFeatures) -> Result<f64> {
        let mut tape = Tape::untracked();
        let b = self.bind(&mut tape, Variant::V4);
        let a = b.confidence_alpha(&mut tape, &self.moments.standardize(f))?;
        tape.value(a).item()
    }
}

/// Adapter parameters placed on a tape, in [`PARAM_NAMES`] order.
#[derive(Clone, Debug)]
pub struct BoundAdapter {
    pub vars: Vec<Var>,
    heads: usize,
    gamma_min: f64,
    gamma_max: f64,
    alpha_max: f64,
    alpha_init: f64,
}

impl BoundAdapter {
    fn lin(&self, i: usize) -> BoundLinear {
        BoundLinear {
            w: self.vars[i],
            b: self.vars[i + 1],
        }
    }

    /// Per-region `(γ, β)` as `K × C` vars. `ek` is `K × D`; `dropout`, if
    /// given, is a `K × hidden` multiplier.
    pub fn film_params(&self, tape: &mut Tape, ek: Var, tau: f64, dropout: Option<&Tensor>) -> Result<(Var, Var)> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("film clamp bound τ = {tau} must be positive")));
        }
        let h = self.lin(0).forward(tape, ek)?;
        let mut h = tape.silu(h);
        if let Some(m) = dropout {
            let m = tape.constant(m.clone());
            h = tape.mul(h, m)?;
        }
        let raw = self.lin(2).forward(tape, h)?;
        let c = tape.value(raw).shape()[1] / 2;
        let rg = tape.slice_cols(raw, 0, c)?;
        let rb = tape.slice_cols(raw, c, c)?;
        let g = tape.add_scalar(rg, 1.0);
        let gamma = tape.clamp(g, self.gamma_min, self.gamma_max);
        let beta = tape.clamp(rb, -tau, tau);
        Ok((gamma, beta))
    }

    /// `Σ_k m_k ⊙ (γ_k z_g + β_k)` written as `(Γᵀ M) ⊙ z_g + Bᵀ M`.
    pub fn film_apply(&self, tape: &mut Tape, z_g: Var, gamma: Var, beta: Var, masks: Var) -> Result<Var> {
        film_apply_var(tape, z_g, gamma, beta, masks)
    }

    /// `F + Σ_k m_k ⊙ (Δ_k W_O)`; the caller normalises.
    pub fn rca_update(&self, tape: &mut Tape, f: Var, tokens: &[Var], masks: &[Var]) -> Result<Var> {
        if tokens.len() != masks.len() {
            return Err(Error::InvalidArgument("rca: token banks and masks differ in count".into()));
        }
        let (wq, wk, wv, wo) = (self.vars[4], self.vars[5], self.vars[6], self.vars[7]);
        let d = tape.value(wq).shape()[1];
        let dh = d / self.heads;
        let q = tape.matmul(f, wq)?;
        let mut parts = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let k = tape.matmul(t, wk)?;
            let v = tape.matmul(t, wv)?;
            let mut acc: Option<Var> = None;
            for head in 0..self.heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let s = tape.matmul(qh, kt)?;
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
                let a = tape.softmax(s);
                let ctx = tape.matmul(a, vh)?;
                let wo_h = tape.slice_rows(wo, head * dh, dh)?;
                let part = tape.matmul(ctx, wo_h)?;
                acc = Some(match acc {
                    None => part,
                    Some(x) => tape.add(x, part)?,
                });
            }
            parts.push(acc.expect("heads ≥ 1"));
        }
        let upd = tape.masked_sum(&parts, masks)?;
        tape.add(f, upd)
    }

    /// `α_max · σ(head(standardized features))`.
    pub fn confidence_alpha(&self, tape: &mut Tape, feats: &[f64; 7]) -> Result<Var> {
        let x = tape.constant(Tensor::new(vec![1, 7], feats.to_vec())?);
        let h = self.lin(8).forward(tape, x)?;
        let h = tape.silu(h);
        let h = self.lin(10).forward(tape, h)?;
        let h = tape.silu(h);
        let o = self.lin(12).forward(tape, h)?;
        let s = tape.sigmoid(o);
        Ok(tape.scale(s, self.alpha_max))
    }

    pub fn alpha_init(&self) -> f64 {
        self.alpha_init
    }
}

pub fn film_apply_var(tape: &mut Tape, z_g: Var, gamma: Var, beta: Var, masks: Var) -> Result<Var> {
    let shape = tape.value(z_g).shape().to_vec();
    let (k, c) = tape.value(gamma).dims2()?;
    let (km, p) = tape.value(masks).dims2()?;
    if km != k || shape.len() != 3 || shape[0] != c || shape[1] * shape[2] != p {
        return Err(Error::InvalidArgument(format!(
            "film_apply: γ {k}×{c}, masks {km}×{p}, latent {shape:?}"
        )));
    }
    let z = tape.reshape(z_g, &[c, p])?;
    let gt = tape.transpose(gamma)?;
    let gmap = tape.matmul(gt, masks)?;
    let bt = tape.transpose(beta)?;
    let bmap = tape.matmul(bt, masks)?;
    let scaled = tape.mul(gmap, z)?;
    let out = tape.add(scaled, bmap)?;
    tape.reshape(out, &shape)
}

/// Plain-tensor FiLM application. `gamma`, `beta` are `K × C`, `masks`
/// `K × (H·W)`.
pub fn film_apply(z_g: &Tensor, gamma: &Tensor, beta: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::untracked();
    let z = tape.constant(z_g.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let m = tape.constant(masks.clone());
    let out = film_apply_var(&mut tape, z, g, b, m)?;
    Ok(tape.value(out).clone())
}

/// Hard masks pooled onto the token grid, renormalised per token and
/// repeated across `width` feature columns (`N × width` each).
pub fn rca_masks(hard: &HardMasks, grid_h: usize, grid_w: usize, width: usize) -> Result<Vec<Tensor>> {
    let pooled = hard
        .masks
        .iter()
        .map(|m| downsample_mask(m, hard.height, hard.width, grid_h, grid_w))
        .collect::<Result<Vec<_>>>()?;
    let n = grid_h * grid_w;
    let mut out = vec![vec![0.0; n * width]; pooled.len()];
    for t in 0..n {
        let s: f64 = pooled.iter().map(|m| m[t]).sum();
        if s <= 0.0 {
            return Err(Error::Layout(format!("token {t} is covered by no region")));
        }
        for (k, m) in pooled.iter().enumerate() {
            let v = m[t] / s;
            out[k][t * width..(t + 1) * width].iter_mut().for_each(|x| *x = v);
        }
    }
    out.into_iter().map(|d| Tensor::new(vec![n, width], d)).collect()
}

/// `LN(F + Σ_k m_k ⊙ (Δ_k W_O))` with the surrogate's affine-free norm.
pub fn region_cross_attention(params: &AdapterParams, f: &Tensor, tokens: &[Tensor], masks: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::untracked();
    let b = params.bind(&mut tape, Variant::V4);
    let fv = tape.constant(f.clone());
    if masks.iter().any(|m| m.shape() != f.shape()) {
        return Err(Error::InvalidArgument("rca: masks must match the token grid".into()));
    }
    let tv: Vec<Var> = tokens.iter().map(|t| tape.constant(t.clone())).collect();
    let mv: Vec<Var> = masks.iter().map(|m| tape.constant(m.clone())).collect();
    let u = b.rca_update(&mut tape, fv, &tv, &mv)?;
    let out = tape.layer_norm(u, NORM_EPS);
    Ok(tape.value(out).clone())
}

/// Everything about one prompt/noise pair that stays fixed while the
/// adapters train.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub parts: GlobalParts,
    /// Token-averaged sub-prompts, `K × D`.
    pub ek_mean: Tensor,
    pub tokens: Vec<Tensor>,
    /// Soft masks `K × P` for FiLM.
    pub soft: Tensor,
    pub hard: HardMasks,
    pub rca_masks: Vec<Tensor>,
    pub features: ConfidenceFeatures,
    /// `std(z_g)`, the FiLM shift bound.
    pub tau: f64,
}

impl Prepared {
    pub fn new(
        net: &SurrogateNpNet,
        z_t: &Tensor,
        e_g: &Tensor,
        e_k: &[Tensor],
        hard: &HardMasks,
        sigma_b: f64,
    ) -> Result<Self> {
        if e_k.len() != hard.k() {
            return Err(Error::InvalidArgument(format!(
                "{} sub-prompts for {} regions",
                e_k.len(),
                hard.k()
            )));
        }
        if hard.height != net.dims.latent_h || hard.width != net.dims.latent_w {
            return Err(Error::InvalidArgument("masks must be at latent resolution".into()));
        }
        let parts = net.global_parts(z_t, e_g)?;
        let means = e_k.iter().map(token_average).collect::<Result<Vec<_>>>()?;
        let features = confidence_features(&token_average(e_g)?, &means)?;
        let d = means[0].len();
        let ek_mean = Tensor::new(vec![means.len(), d], means.concat())?;
        let soft = soften_masks(hard, sigma_b)?.to_tensor();
        let (gh, gw) = net.grid();
        let rca_masks = rca_masks(hard, gh, gw, net.config.stage_width)?;
        let tau = parts.z_g.std();
        Ok(Self {
            parts,
            ek_mean,
            tokens: e_k.to_vec(),
            soft,
            hard: hard.clone(),
            rca_masks,
            features,
            tau,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z_swin: Var,
    pub z_film: Var,
    pub z_out: Var,
    pub alpha: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Options that only matter for training or diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub dropout: Option<&'a Tensor>,
    /// Replaces the gate by a constant.
    pub alpha: Option<f64>,
}

/// The Golden RPG forward on a tape. `film_only` keeps the hook-free
/// `z_g` as `z_swin`; `film_only` and `v3` blend with the constant
/// `alpha_init`.
pub fn forward_on_tape(
    tape: &mut Tape,
    net: &SurrogateNpNet,
    params: &AdapterParams,
    bound: &BoundAdapter,
    variant: Variant,
    prep: &Prepared,
    opts: ForwardOptions<'_>,
) -> Result<ForwardVars> {
    let z_g = tape.constant(prep.parts.z_g.clone());
    let z_swin = if variant.uses_rca() {
        let tokens: Vec<Var> = prep.tokens.iter().map(|t| tape.constant(t.clone())).collect();
        let masks: Vec<Var> = prep.rca_masks.iter().map(|m| tape.constant(m.clone())).collect();
        let f = tape.constant(prep.parts.features.clone());
        let hook = |t: &mut Tape, f: Var| bound.rca_update(t, f, &tokens, &masks);
        net.hooked_output(tape, &prep.parts.svd, &prep.parts.ada, f, Some(&hook))?
    } else {
        z_g
    };
    let ek = tape.constant(prep.ek_mean.clone());
    let (gamma, beta) = bound.film_params(tape, ek, prep.tau, opts.dropout)?;
    let soft = tape.constant(prep.soft.clone());
    let z_film = bound.film_apply(tape, z_g, gamma, beta, soft)?;
    let alpha = match (opts.alpha, variant.uses_confidence()) {
        (Some(a), _) => tape.constant(Tensor::from_vec(vec![a])),
        (None, true) => {
            let a = bound.confidence_alpha(tape, &params.moments.standardize(&prep.features))?;
            tape.reshape(a, &[1])?
        }
        (None, false) => tape.constant(Tensor::from_vec(vec![bound.alpha_init()])),
    };
    let diff = tape.sub(z_film, z_swin)?;
    let blend = tape.scale_by(diff, alpha)?;
    let z_out = tape.add(z_swin, blend)?;
    Ok(ForwardVars {
        z_swin,
        z_film,
        z_out,
        alpha,
        gamma,
        beta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterOutput {
    pub z_swin: Tensor,
    pub z_film: Tensor,
    pub z_out: Tensor,
    pub alpha: f64,
    /// `K × C`.
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Evaluation-mode forward (no dropout) on prepared inputs.
pub fn run_prepared(
    net: &SurrogateNpNet,
    params: &AdapterParams,
    variant: Variant,
    prep: &Prepared,
    alpha: Option<f64>,
) -> Result<AdapterOutput> {
    let mut tape = Tape::untracked();
    let bound = params.bind(&mut tape, variant);
    let v = forward_on_tape(
        &mut tape,
        net,
        params,
        &bound,
        variant,
        prep,
        ForwardOptions { dropout: None, alpha },
    )?;
    Ok(AdapterOutput {
        z_swin: tape.value(v.z_swin).clone(),
        z_film: tape.value(v.z_film).clone(),
        z_out: tape.value(v.z_out).clone(),
        alpha: tape.value(v.alpha).item()?,
        gamma: tape.value(v.gamma).clone(),
        beta: tape.value(v.beta).clone(),
    })
}

/// Full forward from raw inputs: global tokens `e_g`, per-region tokens
/// `e_k`, hard masks at latent resolution.
pub fn golden_rpg_forward(
    net: &SurrogateNpNet,
    params: &AdapterParams,
    variant: Variant,
    z_t: &Tensor,
    e_g: &Tensor,
    e_k: &[Tensor],
    hard: &HardMasks,
) -> Result<AdapterOutput> {
    let prep = Prepared::new(net, z_t, e_g, e_k, hard, params.config.sigma_b)?;
    run_prepared(net, params, variant, &prep, None)
}

/// Dropout multiplier: each entry is 0 with probability `rate`, else
/// `1 / (1 − rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}
