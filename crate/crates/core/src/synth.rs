//! Synthetic regional-prompt world: a deterministic mock text encoder, the
//! seven confidence features, an image-free alignment oracle and the
//! candidate-ranking corpus builder that produces `(z⁺, z⁻, δ)` targets.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CorpusConfig, Dims};
use crate::error::{Error, Result};
use crate::geometry::{masks_from_ratios, HardMasks, RegionLayout};
use crate::seed::{child_rng, child_seed, rng};
use crate::tensor::Tensor;

/// Weight of the attribute direction inside a region's semantic vector.
pub const ATTRIBUTE_WEIGHT: f64 = 0.5;
/// Weight of the concept|attribute binding direction.
pub const BINDING_WEIGHT: f64 = 0.5;
/// Text contrasts shorter than this fraction of the prompt's mean projected
/// norm are scored proportionally instead of by direction alone.
pub const CONTRAST_FLOOR: f64 = 0.5;

pub const CONCEPTS: &[&str] = &[
    "cat", "dog", "horse", "car", "boat", "tree", "house", "lamp", "chair", "apple", "bird",
    "clock", "vase", "bicycle", "mountain", "robot",
];
pub const COLORS: &[&str] = &["red", "blue", "green", "yellow", "purple", "orange"];
pub const TEXTURES: &[&str] = &["wooden", "metallic", "fluffy", "glass", "leather", "stone"];
pub const SHAPES: &[&str] = &["round", "square", "triangular", "oval", "tall", "flat"];
/// Attribute used by spatial prompts, which carry no swappable attribute.
pub const PLAIN: &str = "plain";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Spatial,
    Color,
    Texture,
    Shape,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Spatial, Category::Color, Category::Texture, Category::Shape];

    pub fn name(self) -> &'static str {
        match self {
            Category::Spatial => "spatial",
            Category::Color => "color",
            Category::Texture => "texture",
            Category::Shape => "shape",
        }
    }

    pub fn attributes(self) -> &'static [&'static str] {
        match self {
            Category::Spatial => &[PLAIN],
            Category::Color => COLORS,
            Category::Texture => TEXTURES,
            Category::Shape => SHAPES,
        }
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category {s:?}")))
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionSpec {
    pub concept: String,
    pub attribute: String,
}

impl RegionSpec {
    pub fn new(concept: &str, attribute: &str) -> Self {
        Self {
            concept: concept.to_string(),
            attribute: attribute.to_string(),
        }
    }

    pub fn binding_label(&self) -> String {
        format!("{}|{}", self.concept, self.attribute)
    }
}

/// Label → unit direction in R^D.
#[derive(Clone, Debug, PartialEq)]
pub enum Vocabulary {
    /// Directions drawn from a Gaussian keyed by `(seed, label)`.
    Seeded { seed: u64, dim: usize },
    /// Fixed directions; labels without an entry are an error, except
    /// binding labels which default to zero.
    Explicit { dim: usize, dirs: BTreeMap<String, Vec<f64>> },
}

impl Vocabulary {
    pub fn seeded(seed: u64, dim: usize) -> Self {
        Vocabulary::Seeded { seed, dim }
    }

    pub fn explicit(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut dirs = BTreeMap::new();
        for (label, v) in entries {
            if v.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "direction for {label:?} has length {}, expected {dim}",
                    v.len()
                )));
            }
            dirs.insert(label, normalized(&v)?);
        }
        Ok(Vocabulary::Explicit { dim, dirs })
    }

    pub fn dim(&self) -> usize {
        match self {
            Vocabulary::Seeded { dim, .. } | Vocabulary::Explicit { dim, .. } => *dim,
        }
    }

    pub fn direction(&self, label: &str) -> Result<Vec<f64>> {
        match self {
            Vocabulary::Seeded { seed, dim } => {
                let mut r = child_rng(*seed, label, 0);
                let v: Vec<f64> = (0..*dim).map(|_| r.sample(rand_distr::StandardNormal)).collect();
                normalized(&v)
            }
            Vocabulary::Explicit { dirs, .. } => dirs
                .get(label)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("label {label:?} not in vocabulary"))),
        }
    }

    /// Concept direction plus weighted attribute and binding directions.
    pub fn semantic(&self, region: &RegionSpec) -> Result<Vec<f64>> {
        let c = self.direction(&region.concept)?;
        let a = self.direction(&region.attribute)?;
        let b = match self {
            Vocabulary::Explicit { dirs, dim } => dirs
                .get(&region.binding_label())
                .cloned()
                .unwrap_or_else(|| vec![0.0; *dim]),
            Vocabulary::Seeded { .. } => self.direction(&region.binding_label())?,
        };
        Ok((0..c.len())
            .map(|i| c[i] + ATTRIBUTE_WEIGHT * a[i] + BINDING_WEIGHT * b[i])
            .collect())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numerical("cannot normalize a zero-norm vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Mock text encoder: every token is the summed semantic vector of the
/// listed regions plus Gaussian jitter of scale `noise` keyed by `seed`.
pub fn embed_text(vocab: &Vocabulary, regions: &[RegionSpec], seed: u64, tokens: usize, noise: f64) -> Result<Tensor> {
    if regions.is_empty() {
        return Err(Error::InvalidArgument("embed_text: empty label set".into()));
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("embed_text: zero tokens".into()));
    }
    let d = vocab.dim();
    let mut base = vec![0.0; d];
    for r in regions {
        for (b, s) in base.iter_mut().zip(vocab.semantic(r)?) {
            *b += s;
        }
    }
    let mut g = rng(seed);
    let mut data = Vec::with_capacity(tokens * d);
    for _ in 0..tokens {
        for b in &base {
            let e: f64 = g.sample(rand_distr::StandardNormal);
            data.push(b + noise * e);
        }
    }
    Tensor::new(vec![tokens, d], data)
}

/// Mean over the token axis of an `L×D` matrix.
pub fn token_average(tokens: &Tensor) -> Result<Vec<f64>> {
    let (l, d) = tokens.dims2()?;
    let mut out = vec![0.0; d];
    for t in 0..l {
        for (o, x) in out.iter_mut().zip(tokens.row(t)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= l as f64);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceFeatures(pub [f64; 7]);

impl ConfidenceFeatures {
    pub fn k(&self) -> f64 {
        self.0[4]
    }
}

/// The seven prompt-regionality features. Pairwise terms are 0 for K = 1.
/// f6 is the inner product of the mean of normalized region means with the
/// normalized global mean (the mean itself is not renormalized).
pub fn confidence_features(eg: &[f64], ek: &[Vec<f64>]) -> Result<ConfidenceFeatures> {
    let k = ek.len();
    if k == 0 {
        return Err(Error::InvalidArgument("confidence_features: no regions".into()));
    }
    if ek.iter().any(|e| e.len() != eg.len()) {
        return Err(Error::InvalidArgument("confidence_features: dimension mismatch".into()));
    }
    let g_hat = normalized(eg)?;
    let hats = ek.iter().map(|e| normalized(e)).collect::<Result<Vec<_>>>()?;
    let kf = k as f64;

    let f1 = norm(eg);
    let f2 = ek
        .iter()
        .map(|e| norm(&e.iter().zip(eg).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .sum::<f64>()
        / kf;
    let mut f3 = 0.0;
    let mut f7: f64 = 0.0;
    if k > 1 {
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    f3 += dot(&hats[i], &hats[j]);
                    let d: Vec<f64> = ek[i].iter().zip(&ek[j]).map(|(a, b)| a - b).collect();
                    f7 = f7.max(norm(&d));
                }
            }
        }
        f3 /= kf * (kf - 1.0);
    }
    let norms: Vec<f64> = ek.iter().map(|e| norm(e)).collect();
    let mean_n = norms.iter().sum::<f64>() / kf;
    let f4 = (norms.iter().map(|n| (n - mean_n).powi(2)).sum::<f64>() / kf).sqrt();
    let mut mean_hat = vec![0.0; eg.len()];
    for h in &hats {
        for (m, x) in mean_hat.iter_mut().zip(h) {
            *m += x / kf;
        }
    }
    let f6 = dot(&mean_hat, &g_hat);
    Ok(ConfidenceFeatures([f1, f2, f3, f4, kf, f6, f7]))
}

/// Fixed orthonormal map between text space (D) and latent channels (C).
#[derive(Clone, Debug, PartialEq)]
pub struct OracleProjection {
    /// `D×C`, orthonormal columns.
    basis: Tensor,
}

impl OracleProjection {
    pub fn seeded(seed: u64, d: usize, c: usize) -> Result<Self> {
        if c == 0 || c > d {
            return Err(Error::InvalidArgument(format!("projection {d}→{c} needs 0 < C ≤ D")));
        }
        let mut g = rng(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(c);
        while cols.len() < c {
            let mut v: Vec<f64> = (0..d).map(|_| g.sample(rand_distr::StandardNormal)).collect();
            for u in &cols {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
            if norm(&v) > 1e-8 {
                cols.push(normalized(&v)?);
            }
        }
        let mut data = vec![0.0; d * c];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..d {
                data[i * c + j] = col[i];
            }
        }
        Ok(Self {
            basis: Tensor::new(vec![d, c], data)?,
        })
    }

    pub fn from_basis(basis: Tensor) -> Result<Self> {
        let (d, c) = basis.dims2()?;
        if c > d {
            return Err(Error::InvalidArgument("projection basis must be D×C with C ≤ D".into()));
        }
        Ok(Self { basis })
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    /// `Pᵀ e`: text vector down to channel space.
    pub fn project(&self, e: &[f64]) -> Vec<f64> {
        let (d, c) = (self.basis.shape()[0], self.basis.shape()[1]);
        (0..c).map(|j| (0..d).map(|i| self.basis.get2(i, j) * e[i]).sum()).collect()
    }

    /// `P μ`: channel vector up to text space.
    pub fn lift(&self, mu: &[f64]) -> Vec<f64> {
        let (d, c) = (self.basis.shape()[0], self.basis.shape()[1]);
        (0..d).map(|i| (0..c).map(|j| self.basis.get2(i, j) * mu[j]).sum()).collect()
    }
}

/// Per-region, per-channel mean of a `C×H×W` tensor under hard masks.
pub fn region_means(z: &Tensor, hard: &HardMasks) -> Result<Vec<Vec<f64>>> {
    let s = z.shape();
    if s.len() != 3 || s[1] != hard.height || s[2] != hard.width {
        return Err(Error::ShapeMismatch {
            op: "region_means",
            lhs: s.to_vec(),
            rhs: vec![hard.height, hard.width],
        });
    }
    let (c, p) = (s[0], s[1] * s[2]);
    let data = z.data();
    hard.masks
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let count: f64 = m.iter().sum();
            if count == 0.0 {
                return Err(Error::Layout(format!("region {k} is empty")));
            }
            Ok((0..c)
                .map(|ch| {
                    let plane = &data[ch * p..(ch + 1) * p];
                    plane.iter().zip(m).map(|(x, w)| x * w).sum::<f64>() / count
                })
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleScore {
    pub score: f64,
    pub warnings: Vec<String>,
}

/// Image-free regional alignment of a latent with its sub-prompts.
///
/// Region means `μ_k` live in channel space; sub-prompt means are brought
/// there as `t_k = Pᵀ ē_k`. With one region the score is `cos(μ_1, t_1)`.
/// With several, each region contributes how well its deviation from the
/// mean region, `μ_k − μ̄`, points along the text deviation `t_k − t̄`:
///
/// `⟨unit(μ_k − μ̄), t_k − t̄⟩ / max(‖t_k − t̄‖, CONTRAST_FLOOR · mean_l ‖t_l‖)`
///
/// so aligned contrasts score 1 and sub-prompts that barely differ score
/// close to 0 whatever the latent. A region whose statistic has zero norm
/// contributes 0 and is reported in `warnings`.
pub fn oracle_score(z: &Tensor, hard: &HardMasks, ek: &[Vec<f64>], proj: &OracleProjection) -> Result<OracleScore> {
    let k = hard.k();
    if ek.len() != k {
        return Err(Error::InvalidArgument(format!(
            "oracle_score: {} sub-prompts for {k} regions",
            ek.len()
        )));
    }
    let mu = region_means(z, hard)?;
    if mu[0].len() != proj.basis.shape()[1] {
        return Err(Error::InvalidArgument("oracle_score: channel count differs from projection".into()));
    }
    let t: Vec<Vec<f64>> = ek.iter().map(|e| proj.project(e)).collect();
    let mut warnings = Vec::new();
    if k == 1 {
        let score = match cosine(&mu[0], &t[0]) {
            Some(c) => c,
            None => {
                warnings.push("region 0 has a zero-norm statistic".to_string());
                0.0
            }
        };
        return Ok(OracleScore { score, warnings });
    }
    let centre = |v: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let c = v[0].len();
        let m: Vec<f64> = (0..c).map(|j| v.iter().map(|x| x[j]).sum::<f64>() / k as f64).collect();
        v.iter().map(|x| x.iter().zip(&m).map(|(a, b)| a - b).collect()).collect()
    };
    let dmu = centre(&mu);
    let dt = centre(&t);
    let floor = CONTRAST_FLOOR * t.iter().map(|x| norm(x)).sum::<f64>() / k as f64;
    let mut total = 0.0;
    for r in 0..k {
        let nm = norm(&dmu[r]);
        let nt = norm(&dt[r]).max(floor);
        if nm == 0.0 || nt == 0.0 {
            warnings.push(format!("region {r} has a zero-norm statistic"));
            continue;
        }
        total += dot(&dmu[r], &dt[r]) / (nm * nt);
    }
    Ok(OracleScore {
        score: total / k as f64,
        warnings,
    })
}

/// Scores, best/worst index (first occurrence on ties) and the gap.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub scores: Vec<f64>,
    pub best: usize,
    pub worst: usize,
    pub delta: f64,
}

pub fn rank_candidates(cands: &[Tensor], hard: &HardMasks, ek: &[Vec<f64>], proj: &OracleProjection) -> Result<Ranking> {
    if cands.len() < 2 {
        return Err(Error::InvalidArgument("need at least two candidates".into()));
    }
    let scores = cands
        .iter()
        .map(|c| oracle_score(c, hard, ek, proj).map(|s| s.score))
        .collect::<Result<Vec<_>>>()?;
    let (mut best, mut worst) = (0, 0);
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
        if *s < scores[worst] {
            worst = i;
        }
    }
    let delta = scores[best] - scores[worst];
    Ok(Ranking {
        scores,
        best,
        worst,
        delta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub id: usize,
    pub category: Category,
    pub regions: Vec<RegionSpec>,
    pub layout: RegionLayout,
    pub e_g: Tensor,
    pub e_k: Vec<Tensor>,
}

impl PromptRecord {
    pub fn k(&self) -> usize {
        self.regions.len()
    }

    pub fn global_mean(&self) -> Result<Vec<f64>> {
        token_average(&self.e_g)
    }

    pub fn region_means(&self) -> Result<Vec<Vec<f64>>> {
        self.e_k.iter().map(token_average).collect()
    }

    pub fn features(&self) -> Result<ConfidenceFeatures> {
        confidence_features(&self.global_mean()?, &self.region_means()?)
    }

    pub fn hard_masks(&self) -> Result<HardMasks> {
        masks_from_ratios(&self.layout)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub prompt: PromptRecord,
    pub z_t: Tensor,
    pub z_pos: Tensor,
    pub z_neg: Tensor,
    pub delta: f64,
    pub candidate_seeds: Vec<u64>,
    pub candidate_scores: Vec<f64>,
}

pub fn gaussian_latent(seed: u64, dims: &Dims) -> Tensor {
    Tensor::randn(&dims.latent_shape(), 1.0, &mut rng(seed))
}

/// Draws `k_c` candidate latents, ranks them with the oracle and keeps the
/// best and worst. `z_T` is an independent draw.
pub fn build_training_record(
    prompt: PromptRecord,
    k_c: usize,
    seed: u64,
    dims: &Dims,
    proj: &OracleProjection,
) -> Result<TrainingRecord> {
    if k_c < 2 {
        return Err(Error::InvalidArgument(format!("K_c = {k_c}; need at least 2 candidates")));
    }
    let seeds: Vec<u64> = (0..k_c as u64).map(|i| child_seed(seed, "candidate", i)).collect();
    let cands: Vec<Tensor> = seeds.iter().map(|s| gaussian_latent(*s, dims)).collect();
    let hard = prompt.hard_masks()?;
    let ek = prompt.region_means()?;
    let rank = rank_candidates(&cands, &hard, &ek, proj)?;
    let z_t = gaussian_latent(child_seed(seed, "z_t", 0), dims);
    Ok(TrainingRecord {
        z_pos: cands[rank.best].clone(),
        z_neg: cands[rank.worst].clone(),
        delta: rank.delta,
        candidate_seeds: seeds,
        candidate_scores: rank.scores,
        prompt,
        z_t,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub delta_mean: f64,
    pub count: usize,
    pub categories: BTreeMap<String, usize>,
    pub regional: usize,
}

impl CorpusStats {
    pub fn from_records(records: &[TrainingRecord], regional: usize) -> Self {
        let mut categories = BTreeMap::new();
        for r in records {
            *categories.entry(r.prompt.category.name().to_string()).or_insert(0) += 1;
        }
        let delta_mean = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.delta).sum::<f64>() / records.len() as f64
        };
        Self {
            delta_mean,
            count: records.len(),
            categories,
            regional,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub dims: Dims,
    pub records: Vec<TrainingRecord>,
    pub stats: CorpusStats,
}

pub fn vocabulary(cfg: &CorpusConfig, dims: &Dims) -> Vocabulary {
    Vocabulary::seeded(cfg.vocab_seed, dims.embed_dim)
}

pub fn oracle_projection(cfg: &CorpusConfig, dims: &Dims) -> Result<OracleProjection> {
    OracleProjection::seeded(child_seed(cfg.vocab_seed, "oracle", 0), dims.embed_dim, dims.channels)
}

fn pick_k(weights: &[(usize, f64)], u: f64) -> Result<usize> {
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if weights.is_empty() || total <= 0.0 || weights.iter().any(|(k, w)| *k == 0 || *w < 0.0) {
        return Err(Error::Config("k_weights must be nonempty, K ≥ 1 and weights ≥ 0 with positive sum".into()));
    }
    let mut acc = 0.0;
    for (k, w) in weights {
        acc += w / total;
        if u < acc {
            return Ok(*k);
        }
    }
    Ok(weights[weights.len() - 1].0)
}

pub fn dedup(regions: &[RegionSpec]) -> Vec<RegionSpec> {
    let mut out: Vec<RegionSpec> = Vec::new();
    for r in regions {
        if !out.contains(r) {
            out.push(r.clone());
        }
    }
    out
}

/// Samples one prompt. With probability `mix` the K regions get distinct
/// concepts (and distinct attributes where the category allows); otherwise
/// every region repeats the same label pair with independent token jitter.
pub fn sample_prompt(id: usize, seed: u64, cfg: &CorpusConfig, dims: &Dims, vocab: &Vocabulary) -> Result<(PromptRecord, bool)> {
    let mut g = child_rng(seed, "prompt", 0);
    let category = Category::ALL[g.random_range(0..Category::ALL.len())];
    let k = pick_k(&cfg.k_weights, g.random::<f64>())?;
    if k > CONCEPTS.len() {
        return Err(Error::Config(format!("K = {k} exceeds the concept vocabulary")));
    }
    let regional = g.random::<f64>() < cfg.mix;
    let attrs = category.attributes();
    let regions: Vec<RegionSpec> = if regional {
        let concepts: Vec<&&str> = CONCEPTS.choose_multiple(&mut g, k).collect();
        let chosen: Vec<&str> = if attrs.len() >= k {
            attrs.choose_multiple(&mut g, k).copied().collect()
        } else {
            (0..k).map(|_| *attrs.choose(&mut g).expect("nonempty")).collect()
        };
        concepts.iter().zip(chosen).map(|(c, a)| RegionSpec::new(c, a)).collect()
    } else {
        let c = CONCEPTS.choose(&mut g).expect("nonempty");
        let a = attrs.choose(&mut g).expect("nonempty");
        vec![RegionSpec::new(c, a); k]
    };
    let raw: Vec<f64> = (0..k).map(|_| 1.0 + g.random::<f64>()).collect();
    let sum: f64 = raw.iter().sum();
    let ratios: Vec<f64> = raw.iter().map(|r| r / sum).collect();
    let prompt = build_prompt(id, category, regions, ratios, seed, cfg, dims, vocab)?;
    Ok((prompt, regional))
}

/// Encodes a prompt from explicit region labels and split ratios. Token
/// jitter for the global text uses `child(seed, "text", 0)` and region `k`
/// uses `child(seed, "text", k + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn build_prompt(
    id: usize,
    category: Category,
    regions: Vec<RegionSpec>,
    ratios: Vec<f64>,
    seed: u64,
    cfg: &CorpusConfig,
    dims: &Dims,
    vocab: &Vocabulary,
) -> Result<PromptRecord> {
    if ratios.len() != regions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ratios for {} regions",
            ratios.len(),
            regions.len()
        )));
    }
    let layout = RegionLayout::new(ratios, dims.latent_h, dims.latent_w)?;
    let e_g = embed_text(vocab, &dedup(&regions), child_seed(seed, "text", 0), dims.tokens, cfg.token_noise)?;
    let e_k = regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            embed_text(
                vocab,
                std::slice::from_ref(r),
                child_seed(seed, "text", i as u64 + 1),
                dims.tokens,
                cfg.token_noise,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptRecord {
        id,
        category,
        regions,
        layout,
        e_g,
        e_k,
    })
}

/// Builds the whole corpus. Record `i` draws everything from its own child
/// seed, so the parallel build equals the serial one bit for bit.
pub fn gen_corpus(cfg: &CorpusConfig, dims: &Dims) -> Result<Corpus> {
    if cfg.size == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let vocab = vocabulary(cfg, dims);
    let proj = oracle_projection(cfg, dims)?;
    let built = (0..cfg.size)
        .into_par_iter()
        .map(|i| {
            let seed = child_seed(cfg.seed, "record", i as u64);
            let (prompt, regional) = sample_prompt(i, seed, cfg, dims, &vocab)?;
            Ok((build_training_record(prompt, cfg.candidates, seed, dims, &proj)?, regional))
        })
        .collect::<Result<Vec<_>>>()?;
    let regional = built.iter().filter(|(_, r)| *r).count();
    let records: Vec<TrainingRecord> = built.into_iter().map(|(r, _)| r).collect();
    let stats = CorpusStats::from_records(&records, regional);
    log::info!(
        "corpus: {} records, {} regional, mean gap {:.4}",
        stats.count,
        stats.regional,
        stats.delta_mean
    );
    Ok(Corpus {
        config: cfg.clone(),
        dims: dims.clone(),
        records,
        stats,
    })
}
