//! Four-term objective, the λ_α schedule and the optimisation loop.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    dropout_mask, forward_on_tape, AdapterParams, FeatureMoments, ForwardOptions, ForwardVars, Prepared, PARAM_NAMES,
};
use crate::autodiff::{Tape, Var};
use crate::backbone::SurrogateNpNet;
use crate::config::{LossWeights, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::geometry::HardMasks;
use crate::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, LrSchedule, OptimState, ScheduleKind};
use crate::seed::child_seed;
use crate::synth::TrainingRecord;
use crate::tensor::Tensor;

/// Set to `1` to run every batch member on the calling thread.
pub const DETERMINISTIC_ENV: &str = "GRPG_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v == "1").unwrap_or(false)
}

/// `m₀ · clip(δ / δ̄, 0.1, 3)`.
pub fn rank_margin(delta: f64, delta_mean: f64, m0: f64) -> Result<f64> {
    if !(delta_mean > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mean candidate gap is {delta_mean}; the corpus is degenerate"
        )));
    }
    Ok(m0 * (delta / delta_mean).clamp(0.1, 3.0))
}

pub fn alpha_target(delta: f64, tau: f64, alpha_max: f64) -> f64 {
    alpha_max / (1.0 + (-delta / tau).exp())
}

/// Constant `λ` through epoch `warmup`, then linear decay reaching 0 at
/// epoch `total`. Epochs are numbered from 1; 0 is the untrained state.
pub fn lambda_alpha_schedule(epoch: usize, lambda: f64, warmup: usize, total: usize) -> Result<f64> {
    if total == 0 || epoch > total || warmup > total {
        return Err(Error::InvalidArgument(format!(
            "schedule: epoch {epoch}, warm-up {warmup}, total {total}"
        )));
    }
    if epoch == total {
        return Ok(0.0);
    }
    if epoch <= warmup {
        return Ok(lambda);
    }
    Ok(lambda * (1.0 - (epoch - warmup) as f64 / (total - warmup) as f64))
}

/// Per-sample loss terms; `total` applies the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub rank: f64,
    pub div: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.mse += o.mse;
        self.rank += o.rank;
        self.div += o.div;
        self.alpha += o.alpha;
    }

    fn scale(&mut self, k: f64) {
        self.total *= k;
        self.mse *= k;
        self.rank *= k;
        self.div *= k;
        self.alpha *= k;
    }
}

/// `max(0, ‖z − z⁺‖² − ‖z − z⁻‖² + margin)` on a tape.
pub fn rank_loss_var(tape: &mut Tape, z_out: Var, z_pos: Var, z_neg: Var, margin: f64) -> Result<Var> {
    let dp = tape.sq_dist(z_out, z_pos)?;
    let dn = tape.sq_dist(z_out, z_neg)?;
    let d = tape.sub(dp, dn)?;
    let d = tape.add_scalar(d, margin);
    Ok(tape.relu(d))
}

/// `(z as C×P) · M̃` with `M̃[p, k] = m_k[p] / |M_k|`, the `C × K` matrix
/// of region means.
fn region_mean_var(tape: &mut Tape, z: Var, hard: &HardMasks) -> Result<Var> {
    let s = tape.value(z).shape().to_vec();
    if s.len() != 3 || s[1] != hard.height || s[2] != hard.width {
        return Err(Error::ShapeMismatch {
            op: "region means",
            lhs: s,
            rhs: vec![hard.height, hard.width],
        });
    }
    let (k, p) = (hard.k(), hard.height * hard.width);
    let counts = hard.counts();
    if let Some(i) = counts.iter().position(|c| *c == 0.0) {
        return Err(Error::Layout(format!("region {i} is empty")));
    }
    let mut m = vec![0.0; p * k];
    for (r, mask) in hard.masks.iter().enumerate() {
        for (i, w) in mask.iter().enumerate() {
            m[i * k + r] = w / counts[r];
        }
    }
    let mv = tape.constant(Tensor::new(vec![p, k], m)?);
    let zf = tape.reshape(z, &[s[0], p])?;
    tape.matmul(zf, mv)
}

/// `−(1/(K−1)) Σ_k ‖μ_k − μ_{k+1}‖₂`; 0 for a single region.
pub fn diversity_loss_var(tape: &mut Tape, z_out: Var, hard: &HardMasks) -> Result<Var> {
    let k = hard.k();
    let mu = region_mean_var(tape, z_out, hard)?;
    if k < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for r in 0..k - 1 {
        let a = tape.slice_cols(mu, r, 1)?;
        let b = tape.slice_cols(mu, r + 1, 1)?;
        let d = tape.sub(a, b)?;
        let n = tape.norm2(d);
        acc = Some(match acc {
            None => n,
            Some(x) => tape.add(x, n)?,
        });
    }
    Ok(tape.scale(acc.expect("k ≥ 2"), -1.0 / (k - 1) as f64))
}

/// SmoothL1 between the gate and `α_max σ(δ/τ_α)`.
pub fn alpha_loss_var(tape: &mut Tape, alpha: Var, delta: f64, w: &LossWeights) -> Result<Var> {
    let a = tape.reshape(alpha, &[1])?;
    let t = tape.constant(Tensor::from_vec(vec![alpha_target(delta, w.tau_alpha, w.alpha_max)]));
    tape.smooth_l1(a, t, w.smooth_l1_beta)
}

/// Builds the weighted total on the tape and returns it with the raw terms.
pub fn total_loss_var(
    tape: &mut Tape,
    fv: &ForwardVars,
    record: &TrainingRecord,
    hard: &HardMasks,
    w: &LossWeights,
    delta_mean: f64,
    lambda_alpha: f64,
) -> Result<(Var, LossBreakdown)> {
    let zp = tape.constant(record.z_pos.clone());
    let zn = tape.constant(record.z_neg.clone());
    let mse = tape.sq_dist(fv.z_out, zp)?;
    let margin = rank_margin(record.delta, delta_mean, w.margin_base)?;
    let rank = rank_loss_var(tape, fv.z_out, zp, zn, margin)?;
    let div = diversity_loss_var(tape, fv.z_out, hard)?;
    let al = alpha_loss_var(tape, fv.alpha, record.delta, w)?;
    let r = tape.scale(rank, w.lambda_rank);
    let d = tape.scale(div, w.lambda_div);
    let a = tape.scale(al, lambda_alpha);
    let t = tape.add(mse, r)?;
    let t = tape.add(t, d)?;
    let total = tape.add(t, a)?;
    let b = LossBreakdown {
        total: tape.value(total).item()?,
        mse: tape.value(mse).item()?,
        rank: tape.value(rank).item()?,
        div: tape.value(div).item()?,
        alpha: tape.value(al).item()?,
    };
    Ok((total, b))
}

pub fn rank_loss(z_out: &Tensor, z_pos: &Tensor, z_neg: &Tensor, delta: f64, delta_mean: f64, m0: f64) -> Result<f64> {
    let margin = rank_margin(delta, delta_mean, m0)?;
    let mut t = Tape::untracked();
    let (a, b, c) = (t.constant(z_out.clone()), t.constant(z_pos.clone()), t.constant(z_neg.clone()));
    let l = rank_loss_var(&mut t, a, b, c, margin)?;
    t.value(l).item()
}

pub fn diversity_loss(z_out: &Tensor, hard: &HardMasks) -> Result<f64> {
    let mut t = Tape::untracked();
    let z = t.constant(z_out.clone());
    let l = diversity_loss_var(&mut t, z, hard)?;
    t.value(l).item()
}

pub fn alpha_loss(alpha: f64, delta: f64, w: &LossWeights) -> Result<f64> {
    let mut t = Tape::untracked();
    let a = t.constant(Tensor::from_vec(vec![alpha]));
    let l = alpha_loss_var(&mut t, a, delta, w)?;
    t.value(l).item()
}

/// Loss of one evaluated sample given plain tensors.
pub fn total_loss(
    z_out: &Tensor,
    alpha: f64,
    record: &TrainingRecord,
    hard: &HardMasks,
    w: &LossWeights,
    delta_mean: f64,
    lambda_alpha: f64,
) -> Result<LossBreakdown> {
    let mut t = Tape::untracked();
    let z = t.constant(z_out.clone());
    let a = t.constant(Tensor::from_vec(vec![alpha]));
    let fv = ForwardVars {
        z_swin: z,
        z_film: z,
        z_out: z,
        alpha: a,
        gamma: a,
        beta: a,
    };
    Ok(total_loss_var(&mut t, &fv, record, hard, w, delta_mean, lambda_alpha)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub mse: f64,
    pub rank: f64,
    pub div: f64,
    pub alpha_loss: f64,
    pub mean_alpha: f64,
    pub lr: f64,
    pub lambda_alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,mse,rank,div,alpha_loss,mean_alpha,lr,lambda_alpha";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, val, r.mse, r.rank, r.div, r.alpha_loss, r.mean_alpha, r.lr, r.lambda_alpha
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(Error::Format("history CSV header mismatch".into()));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
        };
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Format(format!("history row has {} fields", f.len())));
            }
            rows.push(HistoryRow {
                epoch: f[0].parse().map_err(|e| Error::Format(format!("bad epoch: {e}")))?,
                train_loss: num(f[1])?,
                val_loss: if f[2].is_empty() { None } else { Some(num(f[2])?) },
                mse: num(f[3])?,
                rank: num(f[4])?,
                div: num(f[5])?,
                alpha_loss: num(f[6])?,
                mean_alpha: num(f[7])?,
                lr: num(f[8])?,
                lambda_alpha: num(f[9])?,
            });
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones when training aborted.
    pub params: AdapterParams,
    pub history: TrainHistory,
    /// Epochs completed.
    pub epochs_done: usize,
    /// Reason training stopped early.
    pub aborted: Option<String>,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
}

/// Seeded split into (train, validation) index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, child_seed(seed, "split", 0));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn shuffle(v: &mut [usize], seed: u64) {
    use rand::seq::SliceRandom;
    v.shuffle(&mut crate::seed::rng(seed));
}

struct SampleResult {
    grads: Vec<Tensor>,
    loss: LossBreakdown,
    alpha: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_sample(
    net: &SurrogateNpNet,
    params: &AdapterParams,
    variant: Variant,
    prep: &Prepared,
    record: &TrainingRecord,
    cfg: &RunConfig,
    delta_mean: f64,
    lambda_alpha: f64,
    trainable: &[usize],
    dropout_seed: Option<u64>,
    want_grads: bool,
) -> Result<SampleResult> {
    let mut tape = if want_grads { Tape::new() } else { Tape::untracked() };
    let bound = params.bind(&mut tape, variant);
    let mask = dropout_seed.map(|s| {
        dropout_mask(
            prep.ek_mean.shape()[0],
            params.config.film_hidden,
            params.config.dropout,
            &mut crate::seed::rng(s),
        )
    });
    let fv = forward_on_tape(
        &mut tape,
        net,
        params,
        &bound,
        variant,
        prep,
        ForwardOptions {
            dropout: mask.as_ref(),
            alpha: None,
        },
    )?;
    let (total, loss) = total_loss_var(&mut tape, &fv, record, &prep.hard, &cfg.loss, delta_mean, lambda_alpha)?;
    let alpha = tape.value(fv.alpha).item()?;
    let grads = if want_grads && loss.total.is_finite() {
        let g = tape.backward(total)?;
        trainable.iter().map(|&i| g.get_or_zeros(&tape, bound.vars[i])).collect()
    } else {
        Vec::new()
    };
    Ok(SampleResult { grads, loss, alpha })
}

fn map_samples<T: Send>(ids: &[usize], f: impl Fn(usize, usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if deterministic_mode() {
        ids.iter().enumerate().map(|(pos, &i)| f(pos, i)).collect()
    } else {
        ids.par_iter().enumerate().map(|(pos, &i)| f(pos, i)).collect()
    }
}

/// Evaluation-mode loss of one record and its gradient with respect to
/// every parameter tensor the variant trains, in [`PARAM_NAMES`] order.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    net: &SurrogateNpNet,
    params: &AdapterParams,
    variant: Variant,
    prep: &Prepared,
    record: &TrainingRecord,
    cfg: &RunConfig,
    delta_mean: f64,
    lambda_alpha: f64,
) -> Result<(LossBreakdown, Vec<(usize, Tensor)>)> {
    let trainable = trainable_indices(variant);
    let r = run_sample(net, params, variant, prep, record, cfg, delta_mean, lambda_alpha, &trainable, None, true)?;
    Ok((r.loss, trainable.into_iter().zip(r.grads).collect()))
}

/// Evaluation-mode loss of one record without building a gradient tape.
#[allow(clippy::too_many_arguments)]
pub fn eval_loss(
    net: &SurrogateNpNet,
    params: &AdapterParams,
    variant: Variant,
    prep: &Prepared,
    record: &TrainingRecord,
    cfg: &RunConfig,
    delta_mean: f64,
    lambda_alpha: f64,
) -> Result<LossBreakdown> {
    Ok(run_sample(net, params, variant, prep, record, cfg, delta_mean, lambda_alpha, &[], None, false)?.loss)
}

/// Positions in [`PARAM_NAMES`] that `variant` trains.
pub fn trainable_indices(variant: Variant) -> Vec<usize> {
    PARAM_NAMES
        .iter()
        .enumerate()
        .filter(|(_, (_, b))| b.trained_by(variant))
        .map(|(i, _)| i)
        .collect()
}

/// Prepares every record once (frozen surrogate outputs, masks, features).
pub fn prepare_records(net: &SurrogateNpNet, records: &[TrainingRecord], sigma_b: f64) -> Result<Vec<Prepared>> {
    let ids: Vec<usize> = (0..records.len()).collect();
    map_samples(&ids, |_, i| {
        let r = &records[i];
        Prepared::new(net, &r.z_t, &r.prompt.e_g, &r.prompt.e_k, &r.prompt.hard_masks()?, sigma_b)
    })
}

/// Trains the adapters of `cfg.train.variant` on `records`.
///
/// `init` warm-starts from existing parameters (the caller decides which
/// blocks to keep). The confidence-feature moments are always recomputed
/// from the training split.
pub fn train(
    net: &SurrogateNpNet,
    records: &[TrainingRecord],
    delta_mean: f64,
    cfg: &RunConfig,
    init: Option<AdapterParams>,
) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty corpus".into()));
    }
    if tc.epochs == 0 || tc.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    rank_margin(1.0, delta_mean, cfg.loss.margin_base)?;
    let warmup = if tc.alpha_warmup_epochs > tc.epochs {
        log::warn!(
            "warm-up of {} epochs exceeds the {}-epoch run; using {}",
            tc.alpha_warmup_epochs,
            tc.epochs,
            tc.epochs
        );
        tc.epochs
    } else {
        tc.alpha_warmup_epochs
    };
    let variant = tc.variant;
    let (train_ids, val_ids) = split_indices(records.len(), tc.val_fraction, tc.seed);
    let preps = prepare_records(net, records, cfg.adapter.sigma_b)?;

    let mut params = match init {
        Some(p) => p,
        None => AdapterParams::for_surrogate(&cfg.adapter, net)?,
    };
    let feats: Vec<_> = train_ids.iter().map(|&i| preps[i].features).collect();
    params.moments = FeatureMoments::from_features(&feats);

    let trainable = trainable_indices(variant);
    let adam = AdamWConfig {
        weight_decay: tc.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = {
        let all = params.tensors();
        let sel: Vec<&Tensor> = trainable.iter().map(|&i| all[i]).collect();
        OptimState::new(adam, &sel)
    };
    let steps_per_epoch = train_ids.len().div_ceil(tc.batch_size);
    let schedule = LrSchedule {
        base_lr: tc.lr,
        total_steps: (tc.epochs * steps_per_epoch) as u64,
        kind: ScheduleKind::Cosine,
    };

    let mut history = TrainHistory::default();
    let mut step: u64 = 0;
    for epoch in 1..=tc.epochs {
        let lambda_alpha = lambda_alpha_schedule(epoch, cfg.loss.lambda_alpha, warmup, tc.epochs)?;
        let mut order = train_ids.clone();
        shuffle(&mut order, child_seed(tc.seed, "epoch", epoch as u64));
        let mut sum = LossBreakdown::default();
        let mut alpha_sum = 0.0;
        let epoch_lr = cosine_lr(step, &schedule)?;
        for batch in order.chunks(tc.batch_size) {
            let lr = cosine_lr(step, &schedule)?;
            let results = map_samples(batch, |pos, i| {
                let seed = child_seed(child_seed(tc.seed, "dropout", step), "sample", pos as u64);
                run_sample(
                    net,
                    &params,
                    variant,
                    &preps[i],
                    &records[i],
                    cfg,
                    delta_mean,
                    lambda_alpha,
                    &trainable,
                    Some(seed),
                    true,
                )
            })?;
            if let Some((pos, r)) = results.iter().enumerate().find(|(_, r)| !r.loss.total.is_finite()) {
                let msg = format!(
                    "non-finite loss {} at epoch {epoch}, step {step}, record {} (mse {}, rank {}, div {}, alpha {})",
                    r.loss.total, records[batch[pos]].prompt.id, r.loss.mse, r.loss.rank, r.loss.div, r.loss.alpha
                );
                log::error!("{msg}");
                return Ok(TrainOutcome {
                    params,
                    history,
                    epochs_done: epoch - 1,
                    aborted: Some(msg),
                    train_ids,
                    val_ids,
                });
            }
            let n = results.len() as f64;
            let mut grads: Vec<Tensor> = results[0].grads.clone();
            for r in &results[1..] {
                for (g, x) in grads.iter_mut().zip(&r.grads) {
                    g.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
                }
            }
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x /= n);
            }
            for r in &results {
                sum.add(&r.loss);
                alpha_sum += r.alpha;
            }
            clip_grad_norm(&mut grads, tc.grad_clip);
            let backup = params.clone();
            {
                let mut all = params.tensors_mut();
                let mut sel: Vec<&mut Tensor> = Vec::with_capacity(trainable.len());
                for (i, t) in all.iter_mut().enumerate() {
                    if trainable.contains(&i) {
                        sel.push(t);
                    }
                }
                let gref: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
                adamw_step(&mut sel, &gref, &mut state, lr)?;
            }
            if params.tensors().iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
                let msg = format!("non-finite parameters after step {step} in epoch {epoch}");
                log::error!("{msg}");
                return Ok(TrainOutcome {
                    params: backup,
                    history,
                    epochs_done: epoch - 1,
                    aborted: Some(msg),
                    train_ids,
                    val_ids,
                });
            }
            step += 1;
        }
        let nt = train_ids.len() as f64;
        sum.scale(1.0 / nt);
        let val_loss = if val_ids.is_empty() {
            None
        } else {
            let vals = map_samples(&val_ids, |_, i| {
                run_sample(net, &params, variant, &preps[i], &records[i], cfg, delta_mean, lambda_alpha, &[], None, false)
            })?;
            Some(vals.iter().map(|r| r.loss.total).sum::<f64>() / vals.len() as f64)
        };
        let row = HistoryRow {
            epoch,
            train_loss: sum.total,
            val_loss,
            mse: sum.mse,
            rank: sum.rank,
            div: sum.div,
            alpha_loss: sum.alpha,
            mean_alpha: alpha_sum / nt,
            lr: epoch_lr,
            lambda_alpha,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:?} mean α {:.4} λα {:.3}",
            row.train_loss,
            row.val_loss,
            row.mean_alpha,
            lambda_alpha
        );
        history.rows.push(row);
    }
    Ok(TrainOutcome {
        params,
        history,
        epochs_done: tc.epochs,
        aborted: None,
        train_ids,
        val_ids,
    })
}

/// Mean gate over prepared samples in evaluation mode.
pub fn mean_alpha(params: &AdapterParams, preps: &[Prepared]) -> Result<f64> {
    let mut s = 0.0;
    for p in preps {
        s += params.alpha(&p.features)?;
    }
    Ok(s / preps.len().max(1) as f64)
}
