//! Glue between trained adapters and the metrics: held-out prompts, fresh
//! evaluation noise, per-method outputs, rendering and scoring.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::adapter::{run_prepared, AdapterOutput, AdapterParams, Prepared};
use crate::backbone::SurrogateNpNet;
use crate::config::{CorpusConfig, Dims, RunConfig, Variant};
use crate::error::Result;
use crate::metrics::{eval_suite, render, MetricReport, MockProvider, Provenance, Sample, SampleKey};
use crate::seed::child_seed;
use crate::synth::{gaussian_latent, oracle_projection, oracle_score, vocabulary, PromptRecord, TrainingRecord};
use crate::tensor::Tensor;
use crate::training::split_indices;

/// Name of the adapter-free method (the surrogate's `z_g`).
pub const BASELINE: &str = "baseline";

#[derive(Clone, Copy, Debug)]
pub struct Method<'a> {
    pub name: &'a str,
    /// `None` scores the surrogate's own output.
    pub adapter: Option<(&'a AdapterParams, Variant)>,
}

impl<'a> Method<'a> {
    pub fn baseline() -> Self {
        Self {
            name: BASELINE,
            adapter: None,
        }
    }

    pub fn adapter(params: &'a AdapterParams, variant: Variant) -> Self {
        Self {
            name: variant.name(),
            adapter: Some((params, variant)),
        }
    }
}

/// Record indices held out from training by `cfg`, or every record when the
/// split leaves none.
pub fn held_out(records: &[TrainingRecord], cfg: &RunConfig) -> Vec<usize> {
    let (_, mut val) = split_indices(records.len(), cfg.train.val_fraction, cfg.train.seed);
    if val.is_empty() {
        val = (0..records.len()).collect();
    }
    val.sort_unstable();
    val
}

/// Evaluation noise for one prompt and seed index, independent of anything
/// used in training.
pub fn eval_latent(corpus_seed: u64, prompt_id: usize, seed: usize, dims: &Dims) -> Tensor {
    let s = child_seed(child_seed(corpus_seed, "eval", prompt_id as u64), "seed", seed as u64);
    gaussian_latent(s, dims)
}

pub fn provider(corpus: &CorpusConfig, dims: &Dims) -> MockProvider {
    MockProvider::new(vocabulary(corpus, dims), child_seed(corpus.vocab_seed, "provider", 0))
}

/// Adapter output for one prompt and starting noise.
pub fn predict(
    net: &SurrogateNpNet,
    params: &AdapterParams,
    variant: Variant,
    prompt: &PromptRecord,
    z_t: &Tensor,
) -> Result<AdapterOutput> {
    let prep = Prepared::new(net, z_t, &prompt.e_g, &prompt.e_k, &prompt.hard_masks()?, params.config.sigma_b)?;
    run_prepared(net, params, variant, &prep, None)
}

/// Latent, oracle score and rendered image of every method on every
/// `(prompt, seed)` pair.
pub fn collect_samples(
    net: &SurrogateNpNet,
    methods: &[Method<'_>],
    prompts: &[&PromptRecord],
    cfg: &RunConfig,
    corpus: &CorpusConfig,
) -> Result<BTreeMap<SampleKey, Sample>> {
    let dims = &cfg.dims;
    let vocab = vocabulary(corpus, dims);
    let proj = oracle_projection(corpus, dims)?;
    let pairs: Vec<(&PromptRecord, usize)> = prompts
        .iter()
        .flat_map(|p| (0..cfg.eval.seeds).map(move |s| (*p, s)))
        .collect();
    let per_pair = pairs
        .par_iter()
        .map(|&(p, s)| {
            let z_t = eval_latent(corpus.seed, p.id, s, dims);
            let hard = p.hard_masks()?;
            let ek = p.region_means()?;
            let prep = Prepared::new(net, &z_t, &p.e_g, &p.e_k, &hard, cfg.adapter.sigma_b)?;
            methods
                .iter()
                .map(|m| {
                    let z = match m.adapter {
                        None => prep.parts.z_g.clone(),
                        Some((params, v)) => run_prepared(net, params, v, &prep, None)?.z_out,
                    };
                    let provenance = Provenance {
                        prompt_id: p.id,
                        method: m.name.to_string(),
                        seed: s,
                    };
                    let image = render(&z, p, &vocab, &proj, cfg.eval.canvas, cfg.eval.provider_noise, provenance)?;
                    let oracle = oracle_score(&z, &hard, &ek, &proj)?.score;
                    Ok(((p.id, m.name.to_string(), s), Sample { image, oracle }))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_pair.into_iter().flatten().collect())
}

/// Scores `methods` on `prompts` with `cfg.eval.seeds` fresh noises each.
pub fn evaluate(
    net: &SurrogateNpNet,
    methods: &[Method<'_>],
    prompts: &[&PromptRecord],
    cfg: &RunConfig,
    corpus: &CorpusConfig,
) -> Result<MetricReport> {
    let samples = collect_samples(net, methods, prompts, cfg, corpus)?;
    let names: Vec<String> = methods.iter().map(|m| m.name.to_string()).collect();
    eval_suite(
        prompts,
        &names,
        cfg.eval.seeds,
        &samples,
        &provider(corpus, &cfg.dims),
        cfg.eval.canvas,
        cfg.eval.band(),
    )
}
