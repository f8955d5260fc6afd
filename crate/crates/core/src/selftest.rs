//! Fast invariant suite behind `grpg selftest`.

use rand::Rng;

use crate::adapter::{golden_rpg_forward, AdapterParams, Prepared, PARAM_NAMES};
use crate::backbone::SurrogateNpNet;
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::geometry::{masks_from_ratios, soften_masks, RegionLayout};
use crate::metrics::{mocq, rsa, MockProvider, Provenance, SyntheticImage};
use crate::persist::{Checkpoint, Container, CHECKPOINT_MAGIC};
use crate::seed::rng;
use crate::synth::{gen_corpus, RegionSpec, TrainingRecord, Vocabulary};
use crate::tensor::Tensor;
use crate::training::{
    alpha_target, diversity_loss, eval_loss, lambda_alpha_schedule, loss_and_grads, rank_margin,
};

/// A configuration small enough for exhaustive checks.
pub fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.dims.tokens = 4;
    c.dims.embed_dim = 16;
    c.dims.latent_h = 16;
    c.dims.latent_w = 16;
    c.surrogate.stage_width = 16;
    c.surrogate.window = 2;
    c.adapter.film_hidden = 16;
    c.adapter.rca_dim = 8;
    c.adapter.conf_hidden = 8;
    c.corpus.size = 8;
    c
}

/// `record` with targets moved close to the surrogate output so the loss,
/// and with it finite-difference round-off, stays small.
pub fn near_targets(record: &TrainingRecord, z_g: &Tensor, seed: u64) -> TrainingRecord {
    let mut r = record.clone();
    let mut g = rng(seed);
    let shift = |g: &mut rand_chacha::ChaCha8Rng| {
        let n = Tensor::randn(z_g.shape(), 0.01, g);
        z_g.zip_map(&n, "near target", |a, b| a + b).expect("same shape")
    };
    r.z_pos = shift(&mut g);
    r.z_neg = shift(&mut g);
    r
}

/// Worst per-array relative error `|a - fd| / max(|a|, |fd|)` between
/// analytic gradients and central differences, with norms taken over
/// `per_tensor` random entries of every trainable array. Norms rather than
/// single entries, since entries far below `eps` are lost to round-off.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    net: &SurrogateNpNet,
    params: &AdapterParams,
    variant: Variant,
    prep: &Prepared,
    record: &TrainingRecord,
    cfg: &RunConfig,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let (dbar, lam) = (0.5, 0.7);
    let (_, grads) = loss_and_grads(net, params, variant, prep, record, cfg, dbar, lam)?;
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for (i, grad) in grads {
        let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
        for _ in 0..per_tensor.min(grad.len()) {
            let j = g.random_range(0..grad.len());
            let at = |d: f64| -> Result<f64> {
                let mut p = params.clone();
                p.tensors_mut()[i].data_mut()[j] += d;
                Ok(eval_loss(net, &p, variant, prep, record, cfg, dbar, lam)?.total)
            };
            let fd = (at(eps)? - at(-eps)?) / (2.0 * eps);
            let a = grad.data()[j];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
        let scale = na.sqrt().max(nf.sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff.sqrt() / scale };
        log::debug!("{}: relative error {rel:e}", PARAM_NAMES[i].0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Config and jittered parameters for gradient check number `s`. Token
/// noise is raised so the cross-attention is far from uniform.
pub fn gradient_case(s: u64) -> Result<(RunConfig, SurrogateNpNet, AdapterParams)> {
    let mut cfg = small_config();
    cfg.corpus.token_noise = 0.3;
    cfg.corpus.seed = s;
    cfg.corpus.size = 1;
    cfg.adapter.seed = s;
    cfg.surrogate.seed = s;
    let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
    let mut params = AdapterParams::for_surrogate(&cfg.adapter, &net)?;
    params.jitter(0.1, &mut rng(s));
    Ok((cfg, net, params))
}

/// Gradient check over `cases` configurations for `variant`.
pub fn gradient_suite(variant: Variant, cases: u64, per_tensor: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..cases {
        let (cfg, net, params) = gradient_case(s)?;
        let corpus = gen_corpus(&cfg.corpus, &cfg.dims)?;
        let r = &corpus.records[0];
        let p = &r.prompt;
        let prep = Prepared::new(&net, &r.z_t, &p.e_g, &p.e_k, &p.hard_masks()?, cfg.adapter.sigma_b)?;
        let rec = near_targets(r, &prep.parts.z_g, s);
        worst = worst.max(gradient_check(&net, &params, variant, &prep, &rec, &cfg, per_tensor, 1e-5, s)?);
    }
    Ok(worst)
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Numerical(msg.into()))
    }
}

fn identity_at_init() -> Result<String> {
    let cfg = small_config();
    let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
    let corpus = gen_corpus(&cfg.corpus, &cfg.dims)?;
    let mut worst: f64 = 0.0;
    for (s, r) in corpus.records.iter().enumerate() {
        let mut a = cfg.adapter.clone();
        a.seed = s as u64;
        let params = AdapterParams::for_surrogate(&a, &net)?;
        let p = &r.prompt;
        let out = golden_rpg_forward(&net, &params, Variant::V4, &r.z_t, &p.e_g, &p.e_k, &p.hard_masks()?)?;
        let z_g = net.npnet_global(&r.z_t, &p.e_g, None)?;
        worst = worst.max(out.z_out.max_abs_diff(&z_g));
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("max |z_out - z_g| = {worst:e}"))
}

fn gradients() -> Result<String> {
    let worst = gradient_suite(Variant::V4, 3, 4)?;
    ensure(worst <= 1e-4, format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:e}"))
}

fn losses() -> Result<String> {
    ensure((rank_margin(1.0, 1.0, 0.05)? - 0.05).abs() < 1e-15, "margin at the mean gap")?;
    ensure((rank_margin(10.0, 1.0, 0.05)? - 0.15).abs() < 1e-15, "margin clip")?;
    ensure((alpha_target(0.0, 0.05, 0.6) - 0.3).abs() < 1e-15, "alpha target at zero gap")?;
    let hard = masks_from_ratios(&RegionLayout::even(3, 1, 3)?)?;
    let z = Tensor::new(vec![1, 1, 3], vec![0.0, 2.0, 0.0])?;
    ensure((diversity_loss(&z, &hard)? + 2.0).abs() < 1e-15, "diversity of three regions")?;
    ensure(lambda_alpha_schedule(200, 1.0, 60, 200)? == 0.0, "schedule ends at zero")?;
    ensure((lambda_alpha_schedule(130, 1.0, 60, 200)? - 0.5).abs() < 1e-15, "schedule midpoint")?;
    Ok("loss and schedule examples hold".into())
}

fn geometry() -> Result<String> {
    let mut g = rng(17);
    for _ in 0..200 {
        let k = g.random_range(1..=8);
        let w = g.random_range(6 * k..=64);
        let ratios: Vec<f64> = (0..k).map(|_| 0.5 + g.random::<f64>()).collect();
        let sum: f64 = ratios.iter().sum();
        let layout = RegionLayout::new(ratios.iter().map(|r| r / sum).collect(), 5, w)?;
        let hard = masks_from_ratios(&layout)?;
        let soft = soften_masks(&hard, 1.0)?;
        for p in 0..5 * w {
            let h: f64 = hard.masks.iter().map(|m| m[p]).sum();
            let s: f64 = soft.masks.iter().map(|m| m[p]).sum();
            ensure(h == 1.0 && (s - 1.0).abs() < 1e-6, format!("pixel {p} of {layout:?}"))?;
        }
    }
    Ok("200 random layouts partition the canvas".into())
}

fn persistence() -> Result<String> {
    let cfg = small_config();
    let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
    let mut params = AdapterParams::for_surrogate(&cfg.adapter, &net)?;
    params.jitter(0.1, &mut rng(3));
    let corpus = gen_corpus(&cfg.corpus, &cfg.dims)?;
    let ck = Checkpoint {
        config: cfg,
        epoch: 1,
        variant: Variant::V4,
        corpus: corpus.stats,
        surrogate: net,
        params,
    };
    let bytes = ck.to_container()?.to_bytes();
    let back = Checkpoint::from_container(&Container::from_bytes(&bytes, CHECKPOINT_MAGIC)?)?;
    ensure(back.to_container()?.to_bytes() == bytes, "checkpoint bytes differ after a round trip")?;
    Ok(format!("checkpoint of {} bytes round-trips", bytes.len()))
}

fn metric_anchors() -> Result<String> {
    let d = 4;
    let axis = |i: usize| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    let vocab = Vocabulary::explicit(
        d,
        vec![("a".into(), axis(0)), ("b".into(), axis(1)), ("x".into(), axis(2)), ("y".into(), axis(3))],
    )?;
    let p = MockProvider::new(vocab, 0);
    let (a, b) = (RegionSpec::new("a", "x"), RegionSpec::new("b", "x"));
    let prov = Provenance {
        prompt_id: 0,
        method: "selftest".into(),
        seed: 0,
    };
    let hard = masks_from_ratios(&RegionLayout::even(2, 2, 4)?)?;
    let good = SyntheticImage::from_columns(2, 4, &[((0, 2), a.clone()), ((2, 4), b.clone())], 0.0, prov.clone())?;
    let bad = SyntheticImage::from_columns(2, 4, &[((0, 2), b.clone()), ((2, 4), a.clone())], 0.0, prov)?;
    let prompts = [a, b];
    let (m_good, m_bad) = (mocq(&good, &hard, &prompts, &p)?, mocq(&bad, &hard, &prompts, &p)?);
    ensure(m_good > 0.0 && (m_good + m_bad).abs() < 1e-12, "composition contrast is not antisymmetric")?;
    ensure(rsa(&good, &hard, &prompts, &p)? > rsa(&bad, &hard, &prompts, &p)?, "alignment prefers swapped regions")?;
    Ok("anchor scenes score as expected".into())
}

fn determinism() -> Result<String> {
    let cfg = small_config();
    let a = gen_corpus(&cfg.corpus, &cfg.dims)?;
    let b = gen_corpus(&cfg.corpus, &cfg.dims)?;
    ensure(a == b, "corpus generation is not reproducible")?;
    Ok(format!("{} records reproduce exactly", a.records.len()))
}

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<String>,
}

pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<String>); 7] = [
        ("identity_at_init", identity_at_init),
        ("gradients", gradients),
        ("losses", losses),
        ("geometry", geometry),
        ("persistence", persistence),
        ("metric_anchors", metric_anchors),
        ("determinism", determinism),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}
