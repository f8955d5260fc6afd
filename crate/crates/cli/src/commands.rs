use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use grpg_core::backbone::SurrogateNpNet;
use grpg_core::config::{RunConfig, Variant};
use grpg_core::metrics::MetricReport;
use grpg_core::persist::{self, Checkpoint, Prediction};
use grpg_core::pipeline::{self, Method};
use grpg_core::seed::child_seed;
use grpg_core::synth::{self, Category, PromptRecord, RegionSpec};
use grpg_core::{adapter::AdapterParams, report, selftest as suite, training};

use crate::{EvalArgs, GenCorpusArgs, PredictArgs, ReportArgs, TrainArgs};

/// Prompts to predict noise for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "one")]
    pub seeds: usize,
    pub prompts: Vec<ManifestPrompt>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPrompt {
    pub id: usize,
    pub category: Category,
    pub regions: Vec<RegionSpec>,
    /// Column split ratios, left to right; even when omitted.
    #[serde(default)]
    pub ratios: Option<Vec<f64>>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Warns when `cfg` differs from the config stored in a checkpoint.
/// Training hyperparameters are expected to change across a warm start and
/// are left out of the comparison.
fn check_drift(stored: &RunConfig, cfg: &RunConfig, path: &Path, force: bool) {
    let mut probe = cfg.clone();
    probe.train = stored.train.clone();
    if probe.hash() != stored.hash() && !force {
        log::warn!(
            "config differs from the one stored in {} (hash {}); pass --force to silence",
            path.display(),
            &stored.hash()[..12]
        );
    }
}

pub(crate) fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.size {
        cfg.corpus.size = n;
    }
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    if let Some(m) = a.mix {
        cfg.corpus.mix = m;
    }
    cfg.validate()?;
    let corpus = synth::gen_corpus(&cfg.corpus, &cfg.dims)?;
    persist::save_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} records ({} regional, mean gap {:.6}) to {}",
        corpus.stats.count,
        corpus.stats.regional,
        corpus.stats.delta_mean,
        a.out.display()
    );
    Ok(())
}

pub(crate) fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let corpus = persist::load_corpus(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    if a.config.is_some() && (cfg.corpus != corpus.config || cfg.dims != corpus.dims) {
        log::warn!("corpus settings differ from {}; using the corpus file's", a.corpus.display());
    }
    cfg.corpus = corpus.config.clone();
    cfg.dims = corpus.dims.clone();
    if let Some(v) = &a.variant {
        cfg.train.variant = v.parse()?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let variant = cfg.train.variant;
    let (net, init) = match &a.warm_start {
        Some(p) => {
            let ck = persist::load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            check_drift(&ck.config, &cfg, p, a.force);
            if ck.config.dims != cfg.dims {
                bail!("checkpoint {} was trained at different dims", p.display());
            }
            cfg.surrogate = ck.config.surrogate.clone();
            cfg.adapter = ck.config.adapter.clone();
            log::info!("warm start from {} ({} → {})", p.display(), ck.variant, variant);
            (ck.surrogate.clone(), Some(persist::warm_start(&ck, variant)?))
        }
        None => (SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?, None),
    };
    cfg.validate()?;
    let out = training::train(&net, &corpus.records, corpus.stats.delta_mean, &cfg, init)?;
    let ck = Checkpoint {
        config: cfg,
        epoch: out.epochs_done,
        variant,
        corpus: corpus.stats.clone(),
        surrogate: net,
        params: out.params,
    };
    persist::save_checkpoint(&ck, &a.out)?;
    let history = a.history.unwrap_or_else(|| a.out.with_extension("history.csv"));
    write(&history, &out.history.to_csv())?;
    if let Some(last) = out.history.rows.last() {
        println!(
            "{variant}: {} epochs, train loss {:.6}, mean alpha {:.4}; wrote {} and {}",
            out.epochs_done,
            last.train_loss,
            last.mean_alpha,
            a.out.display(),
            history.display()
        );
    }
    if let Some(why) = out.aborted {
        bail!("training stopped after {} epochs: {why}", out.epochs_done);
    }
    Ok(())
}

fn manifest_prompts(m: &Manifest, cfg: &RunConfig) -> Result<Vec<PromptRecord>> {
    let vocab = synth::vocabulary(&cfg.corpus, &cfg.dims);
    m.prompts
        .iter()
        .map(|p| {
            let k = p.regions.len();
            if k == 0 {
                bail!("prompt {} has no regions", p.id);
            }
            let ratios = p.ratios.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
            let seed = child_seed(cfg.corpus.seed, "manifest", p.id as u64);
            let rec = synth::build_prompt(p.id, p.category, p.regions.clone(), ratios, seed, &cfg.corpus, &cfg.dims, &vocab)
                .with_context(|| format!("prompt {}", p.id))?;
            Ok(rec)
        })
        .collect()
}

pub(crate) fn predict(a: PredictArgs) -> Result<()> {
    let ck = persist::load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let text = std::fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.manifest.display()))?;
    let seeds = a.seeds.unwrap_or(manifest.seeds);
    let cfg = &ck.config;
    let prompts = manifest_prompts(&manifest, cfg)?;
    let pairs: Vec<(&PromptRecord, usize)> = prompts.iter().flat_map(|p| (0..seeds).map(move |s| (p, s))).collect();
    let preds = pairs
        .par_iter()
        .map(|&(p, s)| {
            let z_t = pipeline::eval_latent(cfg.corpus.seed, p.id, s, &cfg.dims);
            let out = pipeline::predict(&ck.surrogate, &ck.params, ck.variant, p, &z_t)?;
            Ok(Prediction {
                prompt_id: p.id,
                seed: s,
                z_out: out.z_out,
                alpha: out.alpha,
            })
        })
        .collect::<grpg_core::Result<Vec<_>>>()?;
    persist::save_predictions(&preds, ck.variant, &ck.config_hash(), &a.out)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

pub(crate) fn eval(a: EvalArgs) -> Result<()> {
    let cks = a
        .checkpoint
        .iter()
        .map(|p| persist::load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let corpus = persist::load_corpus(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let first = &cks[0];
    let mut cfg = first.config.clone();
    if let Some(p) = &a.config {
        let supplied = RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?;
        check_drift(&first.config, &supplied, &a.checkpoint[0], a.force);
        cfg.eval = supplied.eval;
    }
    if let Some(s) = a.seeds {
        cfg.eval.seeds = s;
    }
    for (ck, p) in cks.iter().zip(&a.checkpoint) {
        if ck.surrogate != first.surrogate {
            bail!("{} uses a different surrogate from {}", p.display(), a.checkpoint[0].display());
        }
        if (ck.config.corpus != corpus.config || ck.config.dims != corpus.dims) && !a.force {
            log::warn!("{} was trained on a different corpus than {}", p.display(), a.corpus.display());
        }
    }
    let mut methods: Vec<Method<'_>> = Vec::new();
    if !a.no_baseline {
        methods.push(Method::baseline());
    }
    for ck in &cks {
        if methods.iter().any(|m| m.name == ck.variant.name()) {
            bail!("variant {} given twice", ck.variant);
        }
        methods.push(Method::adapter(&ck.params, ck.variant));
    }
    let ids = pipeline::held_out(&corpus.records, &first.config);
    let prompts: Vec<&PromptRecord> = ids.iter().map(|&i| &corpus.records[i].prompt).collect();
    let rep = pipeline::evaluate(&first.surrogate, &methods, &prompts, &cfg, &corpus.config)?;
    write(&a.out, &report::rows_to_csv(&rep.rows))?;
    print!("{}", report::render_table(&rep, false));
    if rep.missing > 0 {
        bail!("{} metric rows have no sample", rep.missing);
    }
    Ok(())
}

fn param_counts(cfg: &RunConfig) -> Result<Vec<(Variant, usize)>> {
    let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
    let params = AdapterParams::for_surrogate(&cfg.adapter, &net)?;
    Ok(Variant::ALL.iter().map(|&v| (v, params.num_params(v))).collect())
}

pub(crate) fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.metrics).with_context(|| format!("reading {}", a.metrics.display()))?;
    let rows = report::rows_from_csv(&text)?;
    if rows.is_empty() {
        bail!("{} holds no metric rows", a.metrics.display());
    }
    let rep = MetricReport::from_rows(rows);
    let table = if a.ablation {
        let cfg = load_config(a.config.as_deref())?;
        report::render_ablation(&rep, &param_counts(&cfg)?)
    } else {
        report::render_table(&rep, a.per_category)
    };
    if let Some(p) = &a.csv {
        write(p, &report::aggregates_to_csv(&rep))?;
    }
    if let Some(p) = &a.table {
        write(p, &table)?;
    }
    print!("{table}");
    Ok(())
}

pub(crate) fn selftest() -> Result<()> {
    let mut failed = Vec::new();
    for c in suite::run_all() {
        match c.outcome {
            Ok(msg) => println!("ok    {:<18} {msg}", c.name),
            Err(e) => {
                println!("FAIL  {:<18} {e}", c.name);
                failed.push(c.name);
            }
        }
    }
    if !failed.is_empty() {
        bail!("failed checks: {}", failed.join(", "));
    }
    Ok(())
}
