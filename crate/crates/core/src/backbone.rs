//! Frozen surrogate of the NPNet noise predictor.
//!
//! `z_g = SvdU(z_T) + (2σ(α₀) − 1)·Ada(z_T, ē_g) + β₀·Swin(z_T + Ada(z_T, ē_g))`
//!
//! Swin here is two windowed-attention stages of one block each. Between
//! them sits a frozen, affine-free transition LayerNorm; the region
//! cross-attention hook runs on the stage-1 tokens just before it.

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};
use crate::config::{Dims, SurrogateConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::seed::child_rng;
use crate::synth::token_average;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
/// Added to attention logits across window borders.
const WINDOW_BLOCK: f64 = -1e9;
/// Convergence tolerance and iteration cap handed to the SVD; 5ε matches
/// nalgebra's own default, a tighter value misbehaves on rank-deficient input.
const SVD_EPS: f64 = 5.0 * f64::EPSILON;
const SVD_MAX_ITER: usize = 100_000;

/// Callback on the inter-stage tokens `F` (`N × C_s`).
pub type Hook<'a> = &'a dyn Fn(&mut Tape, Var) -> Result<Var>;

/// Top singular triplets with the largest-magnitude entry of each left
/// vector made positive.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    pub u: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    /// Full spectrum, descending.
    pub spectrum: Vec<f64>,
}

pub fn truncated_svd(rows: usize, cols: usize, data: &[f64], rank: usize) -> Result<TruncatedSvd> {
    if rank == 0 || rank > rows.min(cols) {
        return Err(Error::InvalidArgument(format!(
            "svd rank {rank} outside 1..={} for a {rows}×{cols} matrix",
            rows.min(cols)
        )));
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = m
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("SVD returned no singular vectors".into())),
    };
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let mut out = TruncatedSvd {
        u: Vec::with_capacity(rank),
        sigma: Vec::with_capacity(rank),
        v: Vec::with_capacity(rank),
        spectrum,
    };
    for &j in order.iter().take(rank) {
        let mut uj: Vec<f64> = u.column(j).iter().copied().collect();
        let mut vj: Vec<f64> = vt.row(j).iter().copied().collect();
        let mut arg = 0;
        for (i, x) in uj.iter().enumerate() {
            if x.abs() > uj[arg].abs() {
                arg = i;
            }
        }
        if uj[arg] < 0.0 {
            uj.iter_mut().for_each(|x| *x = -*x);
            vj.iter_mut().for_each(|x| *x = -*x);
        }
        out.u.push(uj);
        out.sigma.push(s[j]);
        out.v.push(vj);
    }
    Ok(out)
}

/// Rank-`rank` reconstruction of `z` viewed as a `(C·H) × W` matrix.
pub fn svd_u(z: &Tensor, rank: usize) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "svd_u expects C×H×W".into(),
        });
    }
    let (rows, cols) = (s[0] * s[1], s[2]);
    let t = truncated_svd(rows, cols, z.data(), rank)?;
    let mut out = vec![0.0; rows * cols];
    for j in 0..rank {
        for r in 0..rows {
            let a = t.sigma[j] * t.u[j][r];
            for c in 0..cols {
                out[r * cols + c] += a * t.v[j][c];
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Per-sample group normalisation over `(channels in group) × pixels`.
pub fn group_norm(z: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 3 || groups == 0 || s[0] % groups != 0 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("group_norm needs C×H×W with C divisible by {groups}"),
        });
    }
    let chunk = z.len() / groups;
    let mut out = z.data().to_vec();
    for g in out.chunks_mut(chunk) {
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        g.iter_mut().for_each(|x| *x = (*x - mean) * r);
    }
    Tensor::new(s.to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
struct AttnBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
    heads: usize,
}

impl AttnBlock {
    fn new(width: usize, heads: usize, mlp_ratio: usize, seed: u64, stage: u64) -> Self {
        let mut r = child_rng(seed, "surrogate-block", stage);
        Self {
            q: Linear::random(width, width, 1.0, &mut r),
            k: Linear::random(width, width, 1.0, &mut r),
            v: Linear::random(width, width, 1.0, &mut r),
            o: Linear::random(width, width, 0.5, &mut r),
            mlp_in: Linear::random(width, width * mlp_ratio, 1.0, &mut r),
            mlp_out: Linear::random(width * mlp_ratio, width, 0.5, &mut r),
            heads,
        }
    }

    fn layers(&self) -> [(&'static str, &Linear); 6] {
        [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("o", &self.o),
            ("mlp_in", &self.mlp_in),
            ("mlp_out", &self.mlp_out),
        ]
    }

    fn layers_mut(&mut self) -> [(&'static str, &mut Linear); 6] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
            ("mlp_in", &mut self.mlp_in),
            ("mlp_out", &mut self.mlp_out),
        ]
    }

    fn num_params(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.o, &self.mlp_in, &self.mlp_out]
            .iter()
            .map(|l| l.num_params())
            .sum()
    }

    /// Pre-norm residual block: windowed multi-head self-attention then MLP.
    fn forward(&self, tape: &mut Tape, x: Var, window: Var) -> Result<Var> {
        let width = self.q.out_dim();
        let dh = width / self.heads;
        let h = tape.layer_norm(x, NORM_EPS);
        let q = self.q.bind(tape, false).forward(tape, h)?;
        let k = self.k.bind(tape, false).forward(tape, h)?;
        let v = self.v.bind(tape, false).forward(tape, h)?;
        let wo = tape.constant(self.o.w.clone());
        let mut attn: Option<Var> = None;
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
            let logits = tape.add(logits, window)?;
            let p = tape.softmax(logits);
            let ctx = tape.matmul(p, vh)?;
            let wo_h = tape.slice_rows(wo, head * dh, dh)?;
            let part = tape.matmul(ctx, wo_h)?;
            attn = Some(match attn {
                None => part,
                Some(a) => tape.add(a, part)?,
            });
        }
        let bo = tape.constant(self.o.b.clone());
        let attn = tape.add_trailing(attn.expect("heads ≥ 1"), bo)?;
        let x = tape.add(x, attn)?;
        let h = tape.layer_norm(x, NORM_EPS);
        let h = self.mlp_in.bind(tape, false).forward(tape, h)?;
        let h = tape.silu(h);
        let h = self.mlp_out.bind(tape, false).forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Frozen quantities of one `(z_T, e_g)` pair that do not depend on the
/// adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalParts {
    pub svd: Tensor,
    pub ada: Tensor,
    /// Stage-1 output tokens before the transition norm, `N × C_s`.
    pub features: Tensor,
    pub z_g: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateNpNet {
    pub config: SurrogateConfig,
    pub dims: Dims,
    /// `D → 2·groups`: per-group scale offsets then shifts.
    pub ada: Linear,
    pub embed: Linear,
    stage1: AttnBlock,
    stage2: AttnBlock,
    pub unembed: Linear,
    grid_h: usize,
    grid_w: usize,
    window_mask: Tensor,
}

impl SurrogateNpNet {
    pub fn new(config: &SurrogateConfig, dims: &Dims) -> Result<Self> {
        let p = config.patch;
        if p == 0 || dims.latent_h % p != 0 || dims.latent_w % p != 0 {
            return Err(Error::Config(format!(
                "latent {}×{} is not divisible by patch {p}",
                dims.latent_h, dims.latent_w
            )));
        }
        let (gh, gw) = (dims.latent_h / p, dims.latent_w / p);
        let win = config.window;
        if win == 0 || gh % win != 0 || gw % win != 0 {
            return Err(Error::Config(format!("token grid {gh}×{gw} is not divisible by window {win}")));
        }
        if config.heads == 0 || config.stage_width % config.heads != 0 {
            return Err(Error::Config("stage width must be divisible by the head count".into()));
        }
        if config.ada_groups == 0 || dims.channels % config.ada_groups != 0 {
            return Err(Error::Config("channels must be divisible by the Ada group count".into()));
        }
        let patch_dim = dims.channels * p * p;
        let mut r = child_rng(config.seed, "surrogate", 0);
        let ada = Linear::random(dims.embed_dim, 2 * config.ada_groups, 0.5, &mut r);
        let embed = Linear::random(patch_dim, config.stage_width, 1.0, &mut r);
        let unembed = Linear::random(config.stage_width, patch_dim, 0.5, &mut r);
        let n = gh * gw;
        let mut mask = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let same = (a / gw) / win == (b / gw) / win && (a % gw) / win == (b % gw) / win;
                if !same {
                    mask[a * n + b] = WINDOW_BLOCK;
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            dims: dims.clone(),
            ada,
            embed,
            stage1: AttnBlock::new(config.stage_width, config.heads, config.mlp_ratio, config.seed, 1),
            stage2: AttnBlock::new(config.stage_width, config.heads, config.mlp_ratio, config.seed, 2),
            unembed,
            grid_h: gh,
            grid_w: gw,
            window_mask: Tensor::new(vec![n, n], mask)?,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_params(&self) -> usize {
        self.ada.num_params()
            + self.embed.num_params()
            + self.unembed.num_params()
            + self.stage1.num_params()
            + self.stage2.num_params()
    }

    /// Frozen arrays with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, l) in [("ada", &self.ada), ("embed", &self.embed), ("unembed", &self.unembed)] {
            out.push((format!("{name}.w"), &l.w));
            out.push((format!("{name}.b"), &l.b));
        }
        for (s, b) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            for (name, l) in b.layers() {
                out.push((format!("{s}.{name}.w"), &l.w));
                out.push((format!("{s}.{name}.b"), &l.b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, l) in [("ada", &mut self.ada), ("embed", &mut self.embed), ("unembed", &mut self.unembed)] {
            out.push((format!("{name}.w"), &mut l.w));
            out.push((format!("{name}.b"), &mut l.b));
        }
        for (s, b) in [("stage1", &mut self.stage1), ("stage2", &mut self.stage2)] {
            for (name, l) in b.layers_mut() {
                out.push((format!("{s}.{name}.w"), &mut l.w));
                out.push((format!("{s}.{name}.b"), &mut l.b));
            }
        }
        out
    }

    /// `2σ(α₀) − 1`.
    pub fn gate(&self) -> f64 {
        2.0 / (1.0 + (-self.config.alpha0).exp()) - 1.0
    }

    pub fn svd_u(&self, z: &Tensor) -> Result<Tensor> {
        svd_u(z, self.config.svd_rank)
    }

    /// Group norm of `z` followed by the per-group affine predicted from the
    /// token-averaged global embedding. The affine is the same at every
    /// pixel.
    pub fn ada_group_norm(&self, z: &Tensor, eg_mean: &[f64]) -> Result<Tensor> {
        let groups = self.config.ada_groups;
        if eg_mean.len() != self.ada.in_dim() {
            return Err(Error::InvalidArgument(format!(
                "ada: embedding has {} dims, expected {}",
                eg_mean.len(),
                self.ada.in_dim()
            )));
        }
        let st = self.ada_affine(eg_mean);
        let mut out = group_norm(z, groups, NORM_EPS)?;
        let chunk = out.len() / groups;
        for (g, vals) in out.data_mut().chunks_mut(chunk).enumerate() {
            let (s, t) = (st[g], st[groups + g]);
            vals.iter_mut().for_each(|x| *x = *x * (1.0 + s) + t);
        }
        Ok(out)
    }

    /// Raw `(s, t)` per group.
    pub fn ada_affine(&self, eg_mean: &[f64]) -> Vec<f64> {
        let (d, o) = (self.ada.in_dim(), self.ada.out_dim());
        (0..o)
            .map(|j| self.ada.b.data()[j] + (0..d).map(|i| eg_mean[i] * self.ada.w.get2(i, j)).sum::<f64>())
            .collect()
    }

    fn patch_index(&self) -> Vec<usize> {
        let (c, h, w, p) = (self.dims.channels, self.dims.latent_h, self.dims.latent_w, self.config.patch);
        let mut idx = Vec::with_capacity(c * h * w);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(ch * h * w + (gy * p + py) * w + gx * p + px);
                        }
                    }
                }
            }
        }
        idx
    }

    fn check_latent(&self, t: &Tensor) -> Result<()> {
        if t.shape() != self.dims.latent_shape() {
            return Err(Error::ShapeMismatch {
                op: "surrogate",
                lhs: t.shape().to_vec(),
                rhs: self.dims.latent_shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Latent `C×H×W` → patch embedding → stage-1 block → `F`.
    pub fn stage1(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = self.num_tokens();
        let pd = self.embed.in_dim();
        let patches = tape.gather(x, self.patch_index(), vec![n, pd])?;
        let tok = self.embed.bind(tape, false).forward(tape, patches)?;
        let mask = tape.constant(self.window_mask.clone());
        self.stage1.forward(tape, tok, mask)
    }

    /// Transition norm → stage-2 block → linear unembedding to the latent.
    pub fn stage2(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let f = tape.layer_norm(f, NORM_EPS);
        let mask = tape.constant(self.window_mask.clone());
        let y = self.stage2.forward(tape, f, mask)?;
        let patches = self.unembed.bind(tape, false).forward(tape, y)?;
        let idx = self.patch_index();
        let mut inverse = vec![0; idx.len()];
        for (i, &src) in idx.iter().enumerate() {
            inverse[src] = i;
        }
        tape.gather(patches, inverse, self.dims.latent_shape().to_vec())
    }

    /// Stage 1, optional hook on `F`, stage 2.
    pub fn stage_forward_var(&self, tape: &mut Tape, x: Var, hook: Option<Hook<'_>>) -> Result<Var> {
        let f = self.stage1(tape, x)?;
        let f = self.apply_hook(tape, f, hook)?;
        self.stage2(tape, f)
    }

    pub fn apply_hook(&self, tape: &mut Tape, f: Var, hook: Option<Hook<'_>>) -> Result<Var> {
        match hook {
            None => Ok(f),
            Some(h) => {
                let before = tape.value(f).shape().to_vec();
                let out = h(tape, f)?;
                if tape.value(out).shape() != before.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "rca hook",
                        lhs: before,
                        rhs: tape.value(out).shape().to_vec(),
                    });
                }
                Ok(out)
            }
        }
    }

    pub fn stage_forward(&self, z_in: &Tensor, hook: Option<Hook<'_>>) -> Result<Tensor> {
        self.check_latent(z_in)?;
        let mut tape = Tape::untracked();
        let x = tape.constant(z_in.clone());
        let y = self.stage_forward_var(&mut tape, x, hook)?;
        Ok(tape.value(y).clone())
    }

    /// `svd + gate·ada + β₀·swin`.
    pub fn compose(&self, tape: &mut Tape, svd: Var, ada: Var, swin: Var) -> Result<Var> {
        let a = tape.scale(ada, self.gate());
        let s = tape.scale(swin, self.config.beta0);
        let z = tape.add(svd, a)?;
        tape.add(z, s)
    }

    /// Everything that the adapters leave untouched, from one pass.
    pub fn global_parts(&self, z_t: &Tensor, e_g: &Tensor) -> Result<GlobalParts> {
        self.check_latent(z_t)?;
        let eg = token_average(e_g)?;
        let svd = self.svd_u(z_t)?;
        let ada = self.ada_group_norm(z_t, &eg)?;
        let mut tape = Tape::untracked();
        let x = tape.constant(z_t.zip_map(&ada, "swin input", |a, b| a + b)?);
        let f = self.stage1(&mut tape, x)?;
        let features = tape.value(f).clone();
        let z_g = self.hooked_output(&mut tape, &svd, &ada, f, None)?;
        let z_g = tape.value(z_g).clone();
        Ok(GlobalParts {
            svd,
            ada,
            features,
            z_g,
        })
    }

    /// Finishes the forward from cached stage-1 tokens `f`, applying `hook`.
    pub fn hooked_output(&self, tape: &mut Tape, svd: &Tensor, ada: &Tensor, f: Var, hook: Option<Hook<'_>>) -> Result<Var> {
        let f = self.apply_hook(tape, f, hook)?;
        let swin = self.stage2(tape, f)?;
        let s = tape.constant(svd.clone());
        let a = tape.constant(ada.clone());
        self.compose(tape, s, a, swin)
    }

    /// `z_g`, or `z_swin` when a hook is given.
    pub fn npnet_global(&self, z_t: &Tensor, e_g: &Tensor, hook: Option<Hook<'_>>) -> Result<Tensor> {
        let parts = self.global_parts(z_t, e_g)?;
        if hook.is_none() {
            return Ok(parts.z_g);
        }
        let mut tape = Tape::untracked();
        let f = tape.constant(parts.features.clone());
        let z = self.hooked_output(&mut tape, &parts.svd, &parts.ada, f, hook)?;
        Ok(tape.value(z).clone())
    }
}
