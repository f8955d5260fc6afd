//! Regional evaluation metrics over synthetic scenes.
//!
//! A latent is "rendered" into a grid of labelled cells, and a pluggable
//! embedding provider stands in for an image/text encoder. The default
//! [`MockProvider`] embeds a crop as the normalised mean of its cells'
//! semantic vectors plus seeded noise, which makes every metric
//! analytically predictable.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_bands, masks_from_ratios, HardMasks, RegionLayout};
use crate::seed::{child_rng, child_seed};
use crate::synth::{cosine, dedup, dot, normalized, Category, OracleProjection, PromptRecord, RegionSpec, Vocabulary};
use crate::tensor::Tensor;

/// Which prompt, method and seed an image belongs to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_id: usize,
    pub method: String,
    pub seed: usize,
}

/// `H × W` cells, each an index into `palette` plus a noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub height: usize,
    pub width: usize,
    pub palette: Vec<RegionSpec>,
    pub labels: Vec<usize>,
    pub noise: Vec<f64>,
    pub provenance: Provenance,
}

impl SyntheticImage {
    pub fn new(
        height: usize,
        width: usize,
        palette: Vec<RegionSpec>,
        labels: Vec<usize>,
        noise: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if labels.len() != height * width || noise.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{}×{} image needs {} cells, got {} labels and {} noise levels",
                height,
                width,
                height * width,
                labels.len(),
                noise.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= palette.len()) {
            return Err(Error::InvalidArgument(format!("label {l} outside a palette of {}", palette.len())));
        }
        Ok(Self {
            height,
            width,
            palette,
            labels,
            noise,
            provenance,
        })
    }

    /// Fills each column band with one label.
    pub fn from_columns(
        height: usize,
        width: usize,
        bands: &[((usize, usize), RegionSpec)],
        noise: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut palette: Vec<RegionSpec> = Vec::new();
        let mut labels = vec![usize::MAX; height * width];
        for ((a, b), spec) in bands {
            let idx = match palette.iter().position(|p| p == spec) {
                Some(i) => i,
                None => {
                    palette.push(spec.clone());
                    palette.len() - 1
                }
            };
            for y in 0..height {
                for x in *a..(*b).min(width) {
                    labels[y * width + x] = idx;
                }
            }
        }
        if labels.contains(&usize::MAX) {
            return Err(Error::InvalidArgument("column bands do not cover the image".into()));
        }
        Self::new(height, width, palette, labels, vec![noise; height * width], provenance)
    }

    pub fn cell(&self, y: usize, x: usize) -> (&RegionSpec, f64) {
        let i = y * self.width + x;
        (&self.palette[self.labels[i]], self.noise[i])
    }
}

/// Stand-in for an image/text encoder. Outputs are unit vectors.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    /// Embeds the full-height crop of columns `[x0, x1)`.
    fn image_embed(&self, image: &SyntheticImage, cols: (usize, usize)) -> Result<Vec<f64>>;
    fn text_embed(&self, regions: &[RegionSpec]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub struct MockProvider {
    pub vocab: Vocabulary,
    pub seed: u64,
}

impl MockProvider {
    pub fn new(vocab: Vocabulary, seed: u64) -> Self {
        Self { vocab, seed }
    }

    fn crop_seed(&self, p: &Provenance, cols: (usize, usize)) -> u64 {
        let s = child_seed(self.seed, &p.method, p.prompt_id as u64);
        let s = child_seed(s, "seed", p.seed as u64);
        child_seed(s, "crop", ((cols.0 as u64) << 32) | cols.1 as u64)
    }
}

impl EmbeddingProvider for MockProvider {
    fn dim(&self) -> usize {
        self.vocab.dim()
    }

    fn image_embed(&self, image: &SyntheticImage, cols: (usize, usize)) -> Result<Vec<f64>> {
        let (x0, x1) = cols;
        if x0 >= x1 || x1 > image.width || image.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty crop [{x0}, {x1}) of a {}-column image",
                image.width
            )));
        }
        let mut counts = vec![0usize; image.palette.len()];
        let mut noise = 0.0;
        for y in 0..image.height {
            for x in x0..x1 {
                let i = y * image.width + x;
                counts[image.labels[i]] += 1;
                noise += image.noise[i];
            }
        }
        let n = (image.height * (x1 - x0)) as f64;
        let d = self.dim();
        let mut v = vec![0.0; d];
        for (spec, &c) in image.palette.iter().zip(&counts) {
            if c == 0 {
                continue;
            }
            let s = self.vocab.semantic(spec)?;
            v.iter_mut().zip(&s).for_each(|(a, b)| *a += c as f64 / n * b);
        }
        let noise = noise / n;
        if noise != 0.0 {
            let mut g = child_rng(self.crop_seed(&image.provenance, cols), "noise", 0);
            let k = noise / (d as f64).sqrt();
            for a in v.iter_mut() {
                *a += k * g.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        normalized(&v)
    }

    fn text_embed(&self, regions: &[RegionSpec]) -> Result<Vec<f64>> {
        if regions.is_empty() {
            return Err(Error::InvalidArgument("empty text".into()));
        }
        let mut v = vec![0.0; self.dim()];
        for r in regions {
            let s = self.vocab.semantic(r)?;
            v.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
        normalized(&v)
    }
}

fn cos(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b).ok_or_else(|| Error::Numerical("cosine of a zero vector".into()))
}

/// Hard masks of `layout` on a `canvas × canvas` evaluation grid.
pub fn canvas_masks(layout: &RegionLayout, canvas: usize) -> Result<HardMasks> {
    masks_from_ratios(&RegionLayout::new(layout.ratios.clone(), canvas, canvas)?)
}

fn check_k(hard: &HardMasks, prompts: &[RegionSpec], image: &SyntheticImage) -> Result<Vec<(usize, usize)>> {
    if prompts.len() != hard.k() {
        return Err(Error::InvalidArgument(format!(
            "{} sub-prompts for {} regions",
            prompts.len(),
            hard.k()
        )));
    }
    if hard.height != image.height || hard.width != image.width {
        return Err(Error::InvalidArgument("layout and image sizes differ".into()));
    }
    hard.column_ranges()
}

/// Mean cosine between each region crop and its sub-prompt.
pub fn rsa(image: &SyntheticImage, hard: &HardMasks, prompts: &[RegionSpec], provider: &dyn EmbeddingProvider) -> Result<f64> {
    let ranges = check_k(hard, prompts, image)?;
    let mut s = 0.0;
    for (r, p) in ranges.iter().zip(prompts) {
        let e = provider.image_embed(image, *r)?;
        let t = provider.text_embed(std::slice::from_ref(p))?;
        s += cos(&e, &t)?;
    }
    Ok(s / ranges.len() as f64)
}

/// Mean cosine between the bands on either side of each region boundary;
/// 1 for a single region.
pub fn crc(image: &SyntheticImage, hard: &HardMasks, provider: &dyn EmbeddingProvider, band_px: usize) -> Result<f64> {
    if hard.height != image.height || hard.width != image.width {
        return Err(Error::InvalidArgument("layout and image sizes differ".into()));
    }
    if hard.k() < 2 {
        log::debug!("coherence of a single-region image is 1 by convention");
        return Ok(1.0);
    }
    let bands = boundary_bands(hard, band_px)?;
    let mut s = 0.0;
    for p in &bands.pairs {
        let l = provider.image_embed(image, p.left)?;
        let r = provider.image_embed(image, p.right)?;
        s += cos(&l, &r)?;
    }
    Ok(s / bands.pairs.len() as f64)
}

/// Target-crop similarity minus the mean wrong-crop similarity, averaged
/// over sub-prompts.
pub fn mocq(image: &SyntheticImage, hard: &HardMasks, prompts: &[RegionSpec], provider: &dyn EmbeddingProvider) -> Result<f64> {
    let ranges = check_k(hard, prompts, image)?;
    let k = ranges.len();
    if k < 2 {
        return Err(Error::InvalidArgument("composition contrast needs at least two regions".into()));
    }
    let crops = ranges
        .iter()
        .map(|r| provider.image_embed(image, *r))
        .collect::<Result<Vec<_>>>()?;
    let mut s = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        let t = provider.text_embed(std::slice::from_ref(p))?;
        let target = cos(&crops[i], &t)?;
        let mut wrong = 0.0;
        for (j, c) in crops.iter().enumerate() {
            if j != i {
                wrong += cos(c, &t)?;
            }
        }
        s += target - wrong / (k - 1) as f64;
    }
    Ok(s / k as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Binding {
    Hit,
    Miss,
    Tie,
    /// Fewer than two distinct attributes.
    Skipped,
}

impl Binding {
    pub fn value(self) -> Option<f64> {
        match self {
            Binding::Hit => Some(1.0),
            Binding::Miss | Binding::Tie => Some(0.0),
            Binding::Skipped => None,
        }
    }
}

/// The prompt with the attributes of the first two regions that differ in
/// attribute exchanged, or `None` when no such pair exists.
pub fn attribute_swap(prompts: &[RegionSpec]) -> Option<Vec<RegionSpec>> {
    for i in 0..prompts.len() {
        for j in i + 1..prompts.len() {
            if prompts[i].attribute != prompts[j].attribute {
                let mut out = prompts.to_vec();
                out[i].attribute = prompts[j].attribute.clone();
                out[j].attribute = prompts[i].attribute.clone();
                return Some(out);
            }
        }
    }
    None
}

/// Whether the whole image is closer to its prompt than to the
/// attribute-swapped prompt.
pub fn attribute_binding(image: &SyntheticImage, prompts: &[RegionSpec], provider: &dyn EmbeddingProvider) -> Result<Binding> {
    let Some(swapped) = attribute_swap(prompts) else {
        log::debug!("binding probe skipped for prompt {}", image.provenance.prompt_id);
        return Ok(Binding::Skipped);
    };
    let e = provider.image_embed(image, (0, image.width))?;
    let good = cos(&e, &provider.text_embed(prompts)?)?;
    let bad = cos(&e, &provider.text_embed(&swapped)?)?;
    Ok(if good > bad {
        Binding::Hit
    } else if good == bad {
        Binding::Tie
    } else {
        Binding::Miss
    })
}

/// Whole image against the whole prompt.
pub fn clip_analog(image: &SyntheticImage, prompts: &[RegionSpec], provider: &dyn EmbeddingProvider) -> Result<f64> {
    let e = provider.image_embed(image, (0, image.width))?;
    cos(&e, &provider.text_embed(&dedup(prompts))?)
}

/// Blocks per side when reading a latent into cells.
pub const RENDER_GRID: usize = 8;

/// Turns a latent into a labelled image of the prompt's distinct region
/// labels. The latent is pooled into a `RENDER_GRID²` block grid; each
/// block takes the label whose channel-space direction (`Pᵀ` of its
/// semantic vector, centred over the palette) best matches the block mean
/// centred by the global mean. Every cell gets noise level `noise`.
pub fn render(
    z: &Tensor,
    prompt: &PromptRecord,
    vocab: &Vocabulary,
    proj: &OracleProjection,
    canvas: usize,
    noise: f64,
    provenance: Provenance,
) -> Result<SyntheticImage> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "render expects C×H×W".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let palette = dedup(&prompt.regions);
    let n_cells = canvas * canvas;
    if palette.len() == 1 {
        return SyntheticImage::new(canvas, canvas, palette, vec![0; n_cells], vec![noise; n_cells], provenance);
    }
    let t: Vec<Vec<f64>> = palette
        .iter()
        .map(|p| Ok(proj.project(&vocab.semantic(p)?)))
        .collect::<Result<_>>()?;
    let tbar: Vec<f64> = (0..c).map(|j| t.iter().map(|v| v[j]).sum::<f64>() / t.len() as f64).collect();
    let dt: Vec<Vec<f64>> = t.iter().map(|v| v.iter().zip(&tbar).map(|(a, b)| a - b).collect()).collect();

    let g = RENDER_GRID.min(h).min(w);
    let mut sums = vec![0.0; g * g * c];
    let mut counts = vec![0.0; g * g];
    let data = z.data();
    let mut mean = vec![0.0; c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = data[(ch * h + y) * w + x];
                let b = (y * g / h) * g + x * g / w;
                sums[b * c + ch] += v;
                mean[ch] += v;
                if ch == 0 {
                    counts[b] += 1.0;
                }
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= (h * w) as f64);
    let block_label: Vec<usize> = (0..g * g)
        .map(|b| {
            let mu: Vec<f64> = (0..c).map(|ch| sums[b * c + ch] / counts[b] - mean[ch]).collect();
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, d) in dt.iter().enumerate() {
                let v = dot(&mu, d);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect();
    let mut labels = vec![0; n_cells];
    for y in 0..canvas {
        for x in 0..canvas {
            let (ly, lx) = (y * h / canvas, x * w / canvas);
            labels[y * canvas + x] = block_label[(ly * g / h) * g + lx * g / w];
        }
    }
    SyntheticImage::new(canvas, canvas, palette, labels, vec![noise; n_cells], provenance)
}

/// One evaluated (prompt, method, seed) triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub prompt_id: usize,
    pub category: Category,
    pub method: String,
    pub seed: usize,
    pub k: usize,
    pub clip: f64,
    pub rsa: f64,
    pub crc: f64,
    pub mocq: Option<f64>,
    pub ab: Option<f64>,
    pub ab_tie: bool,
    /// Latent-space oracle score of the method's output.
    pub oracle: f64,
    /// No image was supplied; the row is excluded from aggregates.
    pub missing: bool,
}

impl MetricRow {
    fn missing(prompt: &PromptRecord, method: &str, seed: usize) -> Self {
        Self {
            prompt_id: prompt.id,
            category: prompt.category,
            method: method.to_string(),
            seed,
            k: prompt.k(),
            clip: f64::NAN,
            rsa: f64::NAN,
            crc: f64::NAN,
            mocq: None,
            ab: None,
            ab_tie: false,
            oracle: f64::NAN,
            missing: true,
        }
    }
}

/// What a method produced for one prompt and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: SyntheticImage,
    pub oracle: f64,
}

pub type SampleKey = (usize, String, usize);

/// Scores every (prompt, method, seed) combination. Rows come out sorted by
/// method, prompt id and seed; combinations absent from `samples` become
/// flagged rows.
pub fn eval_suite(
    prompts: &[&PromptRecord],
    methods: &[String],
    seeds: usize,
    samples: &BTreeMap<SampleKey, Sample>,
    provider: &dyn EmbeddingProvider,
    canvas: usize,
    band_px: usize,
) -> Result<MetricReport> {
    let mut plan: Vec<(&PromptRecord, &str, usize)> = Vec::new();
    let mut methods: Vec<&String> = methods.iter().collect();
    methods.sort();
    methods.dedup();
    let mut prompts = prompts.to_vec();
    prompts.sort_by_key(|p| p.id);
    for m in &methods {
        for p in &prompts {
            for s in 0..seeds {
                plan.push((p, m.as_str(), s));
            }
        }
    }
    let rows = plan
        .par_iter()
        .map(|&(p, m, s)| {
            let Some(sample) = samples.get(&(p.id, m.to_string(), s)) else {
                log::error!("no image for prompt {}, method {m}, seed {s}", p.id);
                return Ok(MetricRow::missing(p, m, s));
            };
            score_row(p, m, s, sample, provider, canvas, band_px)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}

fn score_row(
    p: &PromptRecord,
    method: &str,
    seed: usize,
    sample: &Sample,
    provider: &dyn EmbeddingProvider,
    canvas: usize,
    band_px: usize,
) -> Result<MetricRow> {
    let img = &sample.image;
    let hard = canvas_masks(&p.layout, canvas)?;
    let ab = attribute_binding(img, &p.regions, provider)?;
    Ok(MetricRow {
        prompt_id: p.id,
        category: p.category,
        method: method.to_string(),
        seed,
        k: p.k(),
        clip: clip_analog(img, &p.regions, provider)?,
        rsa: rsa(img, &hard, &p.regions, provider)?,
        crc: crc(img, &hard, provider, band_px)?,
        mocq: if p.k() >= 2 {
            Some(mocq(img, &hard, &p.regions, provider)?)
        } else {
            None
        },
        ab: ab.value(),
        ab_tie: ab == Binding::Tie,
        oracle: sample.oracle,
        missing: false,
    })
}

/// Population statistics; an empty column has `count == 0` and zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: xs.len(),
        }
    }
}

/// Aggregates for one method over one category, or over all rows when
/// `category` is `"all"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub category: String,
    pub clip: Stat,
    pub rsa: Stat,
    pub crc: Stat,
    pub mocq: Stat,
    pub ab: Stat,
    pub oracle: Stat,
    pub ties: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<Aggregate>,
    pub missing: usize,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<&MetricRow>> = BTreeMap::new();
        for r in rows.iter().filter(|r| !r.missing) {
            groups.entry((r.method.clone(), "all".into())).or_default().push(r);
            groups
                .entry((r.method.clone(), r.category.name().into()))
                .or_default()
                .push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|((method, category), rs)| {
                let col = |f: &dyn Fn(&MetricRow) -> Option<f64>| Stat::of(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                Aggregate {
                    method,
                    category,
                    clip: col(&|r| Some(r.clip)),
                    rsa: col(&|r| Some(r.rsa)),
                    crc: col(&|r| Some(r.crc)),
                    mocq: col(&|r| r.mocq),
                    ab: col(&|r| r.ab),
                    oracle: col(&|r| Some(r.oracle)),
                    ties: rs.iter().filter(|r| r.ab_tie).count(),
                }
            })
            .collect();
        let missing = rows.iter().filter(|r| r.missing).count();
        Self {
            rows,
            aggregates,
            missing,
        }
    }

    pub fn aggregate(&self, method: &str, category: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.category == category)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    /// Concepts `a`, `b` and attributes `x`, `y` on orthogonal axes; bindings
    /// on their own axes.
    fn ortho() -> MockProvider {
        let d = 8;
        let names = ["a", "b", "x", "y", "a|x", "b|y", "a|y", "b|x"];
        let vocab = Vocabulary::explicit(d, names.iter().enumerate().map(|(i, n)| (n.to_string(), onehot(d, i))).collect()).unwrap();
        MockProvider::new(vocab, 0)
    }

    fn prov() -> Provenance {
        Provenance {
            prompt_id: 0,
            method: "m".into(),
            seed: 0,
        }
    }

    fn two(left: RegionSpec, right: RegionSpec) -> (SyntheticImage, HardMasks) {
        let img = SyntheticImage::from_columns(4, 4, &[((0, 2), left), ((2, 4), right)], 0.0, prov()).unwrap();
        let hard = masks_from_ratios(&RegionLayout::even(2, 4, 4).unwrap()).unwrap();
        (img, hard)
    }

    #[test]
    fn anchors() {
        let p = ortho();
        let (a, b) = (RegionSpec::new("a", "x"), RegionSpec::new("b", "y"));
        let (img, hard) = two(a.clone(), b.clone());
        let prompts = vec![a.clone(), b.clone()];
        assert!((rsa(&img, &hard, &prompts, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!((mocq(&img, &hard, &prompts, &p).unwrap() - 1.0).abs() < 1e-12);
        let (sw, _) = two(b.clone(), a.clone());
        assert!(rsa(&sw, &hard, &prompts, &p).unwrap().abs() < 1e-12);
        assert!((mocq(&sw, &hard, &prompts, &p).unwrap() + 1.0).abs() < 1e-12);
        let (same, _) = two(a.clone(), a.clone());
        assert_eq!(crc(&same, &hard, &p, 1).unwrap(), 1.0);
        assert_eq!(mocq(&same, &hard, &[a.clone(), a.clone()], &p).unwrap(), 0.0);
        assert!(crc(&img, &hard, &p, 1).unwrap().abs() < 1e-12);
        let one = masks_from_ratios(&RegionLayout::even(1, 4, 4).unwrap()).unwrap();
        assert_eq!(crc(&img, &one, &p, 1).unwrap(), 1.0);
        assert!(mocq(&img, &one, &[a], &p).is_err());
    }

    #[test]
    fn rsa_half_aligned() {
        let p = ortho();
        let (img, hard) = two(RegionSpec::new("a", "x"), RegionSpec::new("a", "x"));
        let prompts = [RegionSpec::new("a", "x"), RegionSpec::new("b", "y")];
        assert!((rsa(&img, &hard, &prompts, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn binding_probe() {
        let p = ortho();
        let (a, b) = (RegionSpec::new("a", "x"), RegionSpec::new("b", "y"));
        let (img, _) = two(a.clone(), b.clone());
        assert_eq!(attribute_binding(&img, &[a.clone(), b.clone()], &p).unwrap(), Binding::Hit);
        let (bad, _) = two(RegionSpec::new("a", "y"), RegionSpec::new("b", "x"));
        assert_eq!(attribute_binding(&bad, &[a.clone(), b.clone()], &p).unwrap(), Binding::Miss);
        let same = [RegionSpec::new("a", "x"), RegionSpec::new("b", "x")];
        assert_eq!(attribute_binding(&img, &same, &p).unwrap(), Binding::Skipped);
    }

    #[test]
    fn provider_is_unit_and_deterministic() {
        let p = MockProvider::new(Vocabulary::seeded(3, 16), 5);
        let img = SyntheticImage::from_columns(3, 6, &[((0, 6), RegionSpec::new("cat", "red"))], 0.3, prov()).unwrap();
        let e = p.image_embed(&img, (1, 4)).unwrap();
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e, p.image_embed(&img, (1, 4)).unwrap());
        assert_ne!(e, p.image_embed(&img, (0, 4)).unwrap());
        assert!(p.image_embed(&img, (2, 2)).is_err());
    }

    #[test]
    fn aggregate_of_single_row_is_the_row() {
        let p = ortho();
        let (a, b) = (RegionSpec::new("a", "x"), RegionSpec::new("b", "y"));
        let prompt = PromptRecord {
            id: 3,
            category: Category::Color,
            regions: vec![a.clone(), b.clone()],
            layout: RegionLayout::even(2, 4, 4).unwrap(),
            e_g: Tensor::zeros(&[1, 8]),
            e_k: vec![],
        };
        let (img, _) = two(a, b);
        let mut samples = BTreeMap::new();
        samples.insert((3, "m".to_string(), 0), Sample { image: img, oracle: 0.25 });
        let rep = eval_suite(&[&prompt], &["m".to_string()], 1, &samples, &p, 4, 1).unwrap();
        assert_eq!(rep.rows.len(), 1);
        let agg = rep.aggregate("m", "all").unwrap();
        assert_eq!(agg.rsa.mean, rep.rows[0].rsa);
        assert_eq!(agg.oracle.mean, 0.25);
        assert_eq!(agg.ab.mean, 1.0);
        let rep = eval_suite(&[&prompt], &["m".to_string()], 2, &samples, &p, 4, 1).unwrap();
        assert_eq!(rep.missing, 1);
        assert_eq!(rep.aggregate("m", "color").unwrap().rsa.count, 1);
    }

    #[test]
    fn render_follows_region_shift() {
        let d = 8;
        let vocab = Vocabulary::seeded(11, d);
        let proj = OracleProjection::seeded(12, d, 4).unwrap();
        let (a, b) = (RegionSpec::new("cat", "red"), RegionSpec::new("dog", "blue"));
        let prompt = PromptRecord {
            id: 0,
            category: Category::Color,
            regions: vec![a.clone(), b.clone()],
            layout: RegionLayout::even(2, 8, 8).unwrap(),
            e_g: Tensor::zeros(&[1, d]),
            e_k: vec![],
        };
        let ta = proj.project(&vocab.semantic(&a).unwrap());
        let tb = proj.project(&vocab.semantic(&b).unwrap());
        let mut z = Tensor::zeros(&[4, 8, 8]);
        for ch in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    z.data_mut()[(ch * 8 + y) * 8 + x] = if x < 4 { ta[ch] } else { tb[ch] };
                }
            }
        }
        let img = render(&z, &prompt, &vocab, &proj, 16, 0.0, prov()).unwrap();
        let hard = canvas_masks(&prompt.layout, 16).unwrap();
        let p = MockProvider::new(vocab, 0);
        assert!((rsa(&img, &hard, &prompt.regions, &p).unwrap() - 1.0).abs() < 1e-12);
    }
}
