//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails outside the documented gaps.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use grpg_core::adapter::{golden_rpg_forward, AdapterParams, Prepared, PARAM_NAMES};
use grpg_core::backbone::SurrogateNpNet;
use grpg_core::config::{RunConfig, Variant};
use grpg_core::geometry::{boundary_bands, masks_from_ratios, scaled_band_px, soften_masks, HardMasks, RegionLayout};
use grpg_core::metrics::{
    attribute_binding, crc, mocq, rsa, Binding, EmbeddingProvider, MockProvider, Provenance, SyntheticImage,
};
use grpg_core::persist::{self, Checkpoint, Container, CHECKPOINT_MAGIC};
use grpg_core::pipeline::{self, Method};
use grpg_core::seed::rng;
use grpg_core::selftest::gradient_suite;
use grpg_core::synth::{embed_text, gen_corpus, vocabulary, Corpus, PromptRecord, RegionSpec, Vocabulary};
use grpg_core::tensor::Tensor;
use grpg_core::training::{self, alpha_loss, diversity_loss, lambda_alpha_schedule, rank_loss};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Part {
    label: &'static str,
    ok: bool,
    detail: String,
}

fn part(label: &'static str, ok: bool, detail: impl Into<String>) -> Part {
    Part {
        label,
        ok,
        detail: detail.into(),
    }
}

/// Parts that cannot pass under the specified model; see the README.
const KNOWN_GAPS: &[(usize, &str)] = &[(4, "4c")];

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

// ---------------------------------------------------------------- 1

fn identity() -> Res<Vec<Part>> {
    let mut worst: f64 = 0.0;
    for s in 0..50u64 {
        let mut cfg = RunConfig::default();
        cfg.surrogate.seed = s;
        cfg.adapter.seed = s;
        cfg.corpus.seed = s;
        cfg.corpus.size = 1;
        let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
        let params = AdapterParams::for_surrogate(&cfg.adapter, &net)?;
        let corpus = gen_corpus(&cfg.corpus, &cfg.dims)?;
        let r = &corpus.records[0];
        let p = &r.prompt;
        let out = golden_rpg_forward(&net, &params, Variant::V4, &r.z_t, &p.e_g, &p.e_k, &p.hard_masks()?)?;
        let z_g = net.npnet_global(&r.z_t, &p.e_g, None)?;
        worst = worst.max(out.z_out.max_abs_diff(&z_g));
    }
    Ok(vec![part("1", worst <= 1e-9, format!("max |z_out - z_g| = {worst:e} over 50 seeds"))])
}

// ---------------------------------------------------------------- 2

fn gradients() -> Res<Vec<Part>> {
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let worst = gradient_suite(v, 20, 6)?;
        parts.push(part("2", worst <= 1e-4, format!("{v} {worst:.1e}")));
    }
    Ok(parts)
}

// ---------------------------------------------------------------- 3

fn naive_rank(z: &[f64], zp: &[f64], zn: &[f64], delta: f64, dbar: f64, m0: f64) -> f64 {
    let mut r = delta / dbar;
    if r < 0.1 {
        r = 0.1;
    }
    if r > 3.0 {
        r = 3.0;
    }
    let mut dp = 0.0;
    let mut dn = 0.0;
    for i in 0..z.len() {
        dp += (z[i] - zp[i]) * (z[i] - zp[i]);
        dn += (z[i] - zn[i]) * (z[i] - zn[i]);
    }
    let v = dp - dn + m0 * r;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn naive_diversity(z: &[f64], c: usize, h: usize, w: usize, edges: &[usize]) -> f64 {
    let k = edges.len() - 1;
    if k == 1 {
        return 0.0;
    }
    let mut mu = vec![vec![0.0; c]; k];
    for r in 0..k {
        let n = (h * (edges[r + 1] - edges[r])) as f64;
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in edges[r]..edges[r + 1] {
                    s += z[ch * h * w + y * w + x];
                }
            }
            mu[r][ch] = s / n;
        }
    }
    let mut total = 0.0;
    for r in 0..k - 1 {
        let mut d = 0.0;
        for ch in 0..c {
            d += (mu[r][ch] - mu[r + 1][ch]).powi(2);
        }
        total += d.sqrt();
    }
    -total / (k - 1) as f64
}

fn naive_alpha_loss(alpha: f64, delta: f64) -> f64 {
    let target = 0.6 * (1.0 / (1.0 + (-delta / 0.05).exp()));
    let d = (alpha - target).abs();
    if d < 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

fn naive_schedule(e: usize, lam: f64, warm: usize, total: usize) -> f64 {
    if e >= total {
        0.0
    } else if e <= warm {
        lam
    } else {
        lam * (total - e) as f64 / (total - warm) as f64
    }
}

fn losses() -> Res<Vec<Part>> {
    let mut g = rng(33);
    let cfg = RunConfig::default();
    let (mut r_err, mut d_err, mut a_err, mut s_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let shape = [g.random_range(1..4), g.random_range(1..6), g.random_range(3..9)];
        let z = Tensor::randn(&shape, 1.0, &mut g);
        let zp = Tensor::randn(&shape, 1.0, &mut g);
        let zn = Tensor::randn(&shape, 1.0, &mut g);
        let delta = g.random_range(0.0..2.0);
        let dbar = g.random_range(0.05..1.0);
        let m0 = g.random_range(0.0..5.0);
        let a = rank_loss(&z, &zp, &zn, delta, dbar, m0)?;
        let b = naive_rank(z.data(), zp.data(), zn.data(), delta, dbar, m0);
        r_err = r_err.max((a - b).abs());

        let w = shape[2];
        let k = g.random_range(1..=w.min(4));
        let mut edges = vec![0];
        let mut cuts: Vec<usize> = (1..w).collect();
        for _ in 0..w - k {
            cuts.remove(g.random_range(0..cuts.len()));
        }
        edges.extend(cuts);
        edges.push(w);
        let ratios: Vec<f64> = edges.windows(2).map(|e| (e[1] - e[0]) as f64 / w as f64).collect();
        let hard = masks_from_ratios(&RegionLayout::new(ratios, shape[1], w)?)?;
        let a = diversity_loss(&z, &hard)?;
        let b = naive_diversity(z.data(), shape[0], shape[1], w, &edges);
        d_err = d_err.max((a - b).abs());

        let alpha = g.random_range(-1.5..2.0);
        let delta = g.random_range(-0.3..0.3);
        a_err = a_err.max((alpha_loss(alpha, delta, &cfg.loss)? - naive_alpha_loss(alpha, delta)).abs());

        let total = g.random_range(1..300);
        let warm = g.random_range(0..=total);
        let e = g.random_range(0..=total);
        let lam = g.random_range(0.0..3.0);
        s_err = s_err.max((lambda_alpha_schedule(e, lam, warm, total)? - naive_schedule(e, lam, warm, total)).abs());
    }
    let l = &cfg.loss;
    let defaults = l.margin_base == 0.05
        && l.tau_alpha == 0.05
        && l.alpha_max == 0.6
        && l.lambda_rank == 0.5
        && l.lambda_alpha == 1.0
        && cfg.train.alpha_warmup_epochs == 60;
    Ok(vec![
        part("3", r_err <= 1e-12, format!("rank {r_err:.0e}")),
        part("3", d_err <= 1e-12, format!("div {d_err:.0e}")),
        part("3", a_err <= 1e-12, format!("alpha {a_err:.0e}")),
        part("3", s_err <= 1e-12, format!("schedule {s_err:.0e}")),
        part("3", defaults, "defaults m0=0.05 tau=0.05 alpha_max=0.6 l_r=0.5 l_a=1 warm-up 60"),
    ])
}

// ---------------------------------------------------------------- 4

fn corpus_of(size: usize, seed: u64, mix: f64) -> Res<(RunConfig, Corpus)> {
    let mut cfg = RunConfig::default();
    cfg.corpus.size = size;
    cfg.corpus.seed = seed;
    cfg.corpus.mix = mix;
    let corpus = gen_corpus(&cfg.corpus, &cfg.dims)?;
    Ok((cfg, corpus))
}

fn run(cfg: &RunConfig, corpus: &Corpus, variant: Variant, epochs: usize) -> Res<(SurrogateNpNet, training::TrainOutcome)> {
    let mut cfg = cfg.clone();
    cfg.train.variant = variant;
    cfg.train.epochs = epochs;
    let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
    let out = training::train(&net, &corpus.records, corpus.stats.delta_mean, &cfg, None)?;
    if let Some(why) = &out.aborted {
        return Err(why.clone().into());
    }
    Ok((net, out))
}

fn dynamics() -> Res<Vec<Part>> {
    let (cfg, regional) = corpus_of(64, 7, 1.0)?;
    let (_, short) = run(&cfg, &regional, Variant::V4, 3)?;
    let losses: Vec<f64> = short.history.rows.iter().map(|r| r.train_loss).collect();
    let decreasing = losses.len() == 3 && losses.windows(2).all(|w| w[1] < w[0]);

    let (_, long) = run(&cfg, &regional, Variant::V4, 80)?;
    let a0 = long.history.rows[0].mean_alpha;
    let a1 = long.history.rows.last().expect("80 rows").mean_alpha;

    let (cfg0, flat) = corpus_of(64, 7, 0.0)?;
    let (_, flat_run) = run(&cfg0, &flat, Variant::V4, 80)?;
    let f1 = flat_run.history.rows.last().expect("80 rows").mean_alpha;
    Ok(vec![
        part("4a", decreasing, format!("3-epoch loss {:.1} > {:.1} > {:.1}", losses[0], losses[1], losses[2])),
        part(
            "4b",
            (a0 - 0.40).abs() <= 0.01 && a1 - a0 >= 0.05,
            format!("regional alpha {a0:.4} -> {a1:.4} (gap mean {:.3})", regional.stats.delta_mean),
        ),
        part(
            "4c",
            f1 < 0.35,
            format!("non-regional alpha -> {f1:.4} (gap mean {:.4})", flat.stats.delta_mean),
        ),
    ])
}

// ---------------------------------------------------------------- 5

fn ablation() -> Res<Vec<Part>> {
    let names = ["baseline", "film_only", "v3", "v4"];
    let mut sums = [0.0; 4];
    for s in 0..3u64 {
        let (mut cfg, corpus) = corpus_of(64, 100 + s, 1.0)?;
        cfg.train.val_fraction = 0.25;
        cfg.train.seed = s;
        cfg.train.alpha_warmup_epochs = 30;
        let mut trained = Vec::new();
        let mut net = None;
        for v in Variant::ALL {
            let (n, out) = run(&cfg, &corpus, v, 40)?;
            trained.push((v, out.params));
            net = Some(n);
        }
        let net = net.expect("three variants");
        let mut methods = vec![Method::baseline()];
        methods.extend(trained.iter().map(|(v, p)| Method::adapter(p, *v)));
        let ids = pipeline::held_out(&corpus.records, &cfg);
        let prompts: Vec<&PromptRecord> = ids.iter().map(|&i| &corpus.records[i].prompt).collect();
        let rep = pipeline::evaluate(&net, &methods, &prompts, &cfg, &corpus.config)?;
        for (i, n) in names.iter().enumerate() {
            sums[i] += rep.aggregate(n, "all").ok_or("missing aggregate")?.oracle.mean / 3.0;
        }
    }
    let [base, film, v3, v4] = sums;
    Ok(vec![part(
        "5",
        v4 - v3 > 0.0 && v3 - base > 0.0,
        format!("held-out oracle v4 {v4:.4} >= v3 {v3:.4} >= baseline {base:.4} (film_only {film:.4})"),
    )])
}

// ---------------------------------------------------------------- 6

fn bf_columns(hard: &HardMasks) -> Vec<(usize, usize)> {
    let w = hard.width;
    hard.masks
        .iter()
        .map(|m| {
            let cols: Vec<usize> = (0..w).filter(|&x| (0..hard.height).all(|y| m[y * w + x] == 1.0)).collect();
            (cols[0], cols[cols.len() - 1] + 1)
        })
        .collect()
}

fn bf_rsa(img: &SyntheticImage, hard: &HardMasks, prompts: &[RegionSpec], p: &dyn EmbeddingProvider) -> Res<f64> {
    let mut s = 0.0;
    for (c, r) in bf_columns(hard).into_iter().zip(prompts) {
        s += cosine(&p.image_embed(img, c)?, &p.text_embed(std::slice::from_ref(r))?);
    }
    Ok(s / prompts.len() as f64)
}

fn bf_crc(img: &SyntheticImage, hard: &HardMasks, p: &dyn EmbeddingProvider, band: usize) -> Res<f64> {
    let cols = bf_columns(hard);
    let mut s = 0.0;
    for k in 0..cols.len() - 1 {
        let b = cols[k + 1].0;
        let mut left = b;
        while left > cols[k].0 && b - left < band {
            left -= 1;
        }
        let mut right = b;
        while right < cols[k + 1].1 && right - b < band {
            right += 1;
        }
        s += cosine(&p.image_embed(img, (left, b))?, &p.image_embed(img, (b, right))?);
    }
    Ok(s / (cols.len() - 1) as f64)
}

fn bf_mocq(img: &SyntheticImage, hard: &HardMasks, prompts: &[RegionSpec], p: &dyn EmbeddingProvider) -> Res<f64> {
    let cols = bf_columns(hard);
    let k = prompts.len();
    let mut s = 0.0;
    for i in 0..k {
        let t = p.text_embed(std::slice::from_ref(&prompts[i]))?;
        let mut wrong = 0.0;
        for (j, c) in cols.iter().enumerate() {
            if j != i {
                wrong += cosine(&p.image_embed(img, *c)?, &t);
            }
        }
        s += cosine(&p.image_embed(img, cols[i])?, &t) - wrong / (k - 1) as f64;
    }
    Ok(s / k as f64)
}

fn bf_ab(img: &SyntheticImage, prompts: &[RegionSpec], p: &dyn EmbeddingProvider) -> Res<Option<f64>> {
    let mut pair = None;
    'outer: for i in 0..prompts.len() {
        for j in i + 1..prompts.len() {
            if prompts[i].attribute != prompts[j].attribute {
                pair = Some((i, j));
                break 'outer;
            }
        }
    }
    let Some((i, j)) = pair else { return Ok(None) };
    let mut neg = prompts.to_vec();
    neg[i].attribute = prompts[j].attribute.clone();
    neg[j].attribute = prompts[i].attribute.clone();
    let e = p.image_embed(img, (0, img.width))?;
    let good = cosine(&e, &p.text_embed(prompts)?);
    let bad = cosine(&e, &p.text_embed(&neg)?);
    Ok(Some(if good > bad { 1.0 } else { 0.0 }))
}

fn prov(i: usize) -> Provenance {
    Provenance {
        prompt_id: i,
        method: "scene".into(),
        seed: i,
    }
}

fn metric_oracles() -> Res<Vec<Part>> {
    let mut g = rng(6);
    let provider = MockProvider::new(Vocabulary::seeded(11, 8), 3);
    let concepts = ["cat", "dog", "car", "tree", "cup"];
    let attrs = ["red", "blue", "green"];
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let k = g.random_range(2..=3);
        let prompts: Vec<RegionSpec> = (0..k)
            .map(|_| RegionSpec::new(concepts[g.random_range(0..5)], attrs[g.random_range(0..3)]))
            .collect();
        let mut cuts: Vec<usize> = (1..5).collect();
        while cuts.len() > k - 1 {
            cuts.remove(g.random_range(0..cuts.len()));
        }
        let mut edges = vec![0];
        edges.extend(cuts);
        edges.push(5);
        let ratios: Vec<f64> = edges.windows(2).map(|e| (e[1] - e[0]) as f64 / 5.0).collect();
        let hard = masks_from_ratios(&RegionLayout::new(ratios, 5, 5)?)?;
        let mut palette = prompts.clone();
        palette.push(RegionSpec::new("sky", "grey"));
        let labels: Vec<usize> = (0..25).map(|_| g.random_range(0..palette.len())).collect();
        let noise: Vec<f64> = (0..25).map(|_| if g.random::<f64>() < 0.3 { 0.0 } else { g.random::<f64>() }).collect();
        let img = SyntheticImage::new(5, 5, palette, labels, noise, prov(i))?;
        let band = g.random_range(1..=3);
        worst = worst.max((rsa(&img, &hard, &prompts, &provider)? - bf_rsa(&img, &hard, &prompts, &provider)?).abs());
        worst = worst.max((crc(&img, &hard, &provider, band)? - bf_crc(&img, &hard, &provider, band)?).abs());
        worst = worst.max((mocq(&img, &hard, &prompts, &provider)? - bf_mocq(&img, &hard, &prompts, &provider)?).abs());
        let ab = attribute_binding(&img, &prompts, &provider)?.value();
        match (ab, bf_ab(&img, &prompts, &provider)?) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }

    let names = ["a", "b", "x", "y", "a|x", "b|y", "a|y", "b|x"];
    let axis = |i: usize| (0..8).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<_>>();
    let vocab = Vocabulary::explicit(8, names.iter().enumerate().map(|(i, n)| (n.to_string(), axis(i))).collect())?;
    let p = MockProvider::new(vocab, 0);
    let (ax, by) = (RegionSpec::new("a", "x"), RegionSpec::new("b", "y"));
    let prompts = [ax.clone(), by.clone()];
    let hard = masks_from_ratios(&RegionLayout::even(2, 4, 4)?)?;
    let aligned = SyntheticImage::from_columns(4, 4, &[((0, 2), ax.clone()), ((2, 4), by.clone())], 0.0, prov(0))?;
    let swapped = SyntheticImage::from_columns(4, 4, &[((0, 2), by), ((2, 4), ax.clone())], 0.0, prov(0))?;
    let uniform = SyntheticImage::from_columns(4, 4, &[((0, 4), ax)], 0.0, prov(0))?;
    let anchors = [
        rsa(&aligned, &hard, &prompts, &p)? == 1.0,
        mocq(&aligned, &hard, &prompts, &p)? == 1.0,
        mocq(&swapped, &hard, &prompts, &p)? == -1.0,
        crc(&uniform, &hard, &p, 1)? == 1.0,
        attribute_binding(&aligned, &prompts, &p)? == Binding::Hit,
    ];
    Ok(vec![
        part("6", worst <= 1e-9, format!("brute force max diff {worst:.0e} on 100 scenes")),
        part("6", anchors.iter().all(|a| *a), format!("anchors {anchors:?}")),
    ])
}

// ---------------------------------------------------------------- 7

fn geometry() -> Res<Vec<Part>> {
    let mut g = rng(7);
    let (mut partition, mut soft_err, mut bands_ok) = (true, 0.0f64, true);
    for _ in 0..1000 {
        let k = g.random_range(1..=8);
        let h = g.random_range(1..=12);
        let w = g.random_range(3 * k..=96);
        let raw: Vec<f64> = (0..k).map(|_| 0.5 + g.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        let layout = RegionLayout::new(raw.iter().map(|r| r / sum).collect(), h, w)?;
        let hard = masks_from_ratios(&layout)?;
        let soft = soften_masks(&hard, g.random_range(0.3..4.0))?;
        for p in 0..h * w {
            let ones = hard.masks.iter().filter(|m| m[p] == 1.0).count();
            let zeros = hard.masks.iter().filter(|m| m[p] == 0.0).count();
            partition &= ones == 1 && zeros == k - 1;
            let s: f64 = soft.masks.iter().map(|m| m[p]).sum();
            soft_err = soft_err.max((s - 1.0).abs());
            partition &= soft.masks.iter().all(|m| m[p] >= 0.0);
        }
        if k >= 2 {
            let band = g.random_range(1..=6);
            let cols = bf_columns(&hard);
            let bands = boundary_bands(&hard, band)?;
            bands_ok &= bands.pairs.len() == k - 1;
            for (i, pr) in bands.pairs.iter().enumerate() {
                let b = cols[i + 1].0;
                let lw = band.min(cols[i].1 - cols[i].0);
                let rw = band.min(cols[i + 1].1 - cols[i + 1].0);
                bands_ok &= pr.boundary == b && pr.left == (b - lw, b) && pr.right == (b, b + rw);
                let (lm, rm) = pr.masks(h, w);
                bands_ok &= lm.iter().zip(&rm).all(|(a, b)| a * b == 0.0);
                bands_ok &= lm.iter().zip(&hard.masks[i]).all(|(a, m)| *a <= *m);
                bands_ok &= rm.iter().zip(&hard.masks[i + 1]).all(|(a, m)| *a <= *m);
            }
        }
    }
    let ratio = scaled_band_px(1024) == 32 && scaled_band_px(2048) == 64 && scaled_band_px(64) == 2 && scaled_band_px(128) == 4;
    Ok(vec![
        part("7", partition, "hard partition on 1000 layouts"),
        part("7", soft_err <= 1e-6, format!("soft sum error {soft_err:.0e}")),
        part("7", bands_ok, "bands disjoint, adjacent, sized"),
        part("7", ratio, "32 px at 1024"),
    ])
}

// ---------------------------------------------------------------- 8

fn outside_change(a: &Tensor, b: &Tensor, keep: &[f64]) -> (usize, usize) {
    let p = keep.len();
    let (mut outside, mut inside) = (0, 0);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if x != y {
            if keep[i % p] == 0.0 {
                outside += 1;
            } else {
                inside += 1;
            }
        }
    }
    (outside, inside)
}

fn bottleneck() -> Res<Vec<Part>> {
    let mut cfg = RunConfig::default();
    cfg.corpus.size = 4;
    let corpus = gen_corpus(&cfg.corpus, &cfg.dims)?;
    let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
    let vocab = vocabulary(&cfg.corpus, &cfg.dims);
    let mut film_trained = AdapterParams::for_surrogate(&cfg.adapter, &net)?;
    let mut g = rng(8);
    for (t, (name, _)) in film_trained.tensors_mut().into_iter().zip(PARAM_NAMES) {
        if name.starts_with("film.") {
            let n = Tensor::randn(t.shape(), 0.1, &mut g);
            t.data_mut().iter_mut().zip(n.data()).for_each(|(a, b)| *a += b);
        }
    }
    let mut all_trained = film_trained.clone();
    all_trained.jitter(0.1, &mut g);

    let (mut ada_same, mut hard_out, mut hard_in, mut soft_out, mut film_out, mut leak) = (true, 0, 0, 0, 0, 0);
    for r in &corpus.records {
        let p = &r.prompt;
        let j = p.k() - 1;
        let mut e_k = p.e_k.clone();
        e_k[j] = embed_text(&vocab, &[RegionSpec::new("lighthouse", "striped")], 99, cfg.dims.tokens, cfg.corpus.token_noise)?;
        let hard = p.hard_masks()?;
        for sigma in [0.0, cfg.adapter.sigma_b] {
            let a = Prepared::new(&net, &r.z_t, &p.e_g, &p.e_k, &hard, sigma)?;
            let b = Prepared::new(&net, &r.z_t, &p.e_g, &e_k, &hard, sigma)?;
            ada_same &= a.parts.ada.bitwise_eq(&b.parts.ada) && a.parts.z_g.bitwise_eq(&b.parts.z_g);
            let support: Vec<f64> = a.soft.data()[j * hard.height * hard.width..(j + 1) * hard.height * hard.width].to_vec();
            let oa = grpg_core::adapter::run_prepared(&net, &film_trained, Variant::V4, &a, None)?;
            let ob = grpg_core::adapter::run_prepared(&net, &film_trained, Variant::V4, &b, None)?;
            let (out, inside) = outside_change(&oa.z_out, &ob.z_out, &support);
            if sigma == 0.0 {
                hard_out += out;
                hard_in += inside;
                let fa = grpg_core::adapter::run_prepared(&net, &all_trained, Variant::V4, &a, None)?;
                let fb = grpg_core::adapter::run_prepared(&net, &all_trained, Variant::V4, &b, None)?;
                film_out += outside_change(&fa.z_film, &fb.z_film, &support).0;
                leak += outside_change(&fa.z_out, &fb.z_out, &support).0;
            } else {
                soft_out += out;
            }
        }
    }
    Ok(vec![
        part("8", ada_same, "Ada output bitwise unchanged"),
        part("8", hard_out == 0 && hard_in > 0, format!("hard masks: {hard_out} changed entries outside, {hard_in} inside")),
        part("8", soft_out == 0, format!("soft masks: {soft_out} changed entries outside the support")),
        part(
            "8",
            film_out == 0,
            format!("all blocks trained: FiLM branch {film_out} outside, z_out {leak} outside"),
        ),
    ])
}

// ---------------------------------------------------------------- 9

fn persistence(dir: &Path) -> Res<Vec<Part>> {
    let mut cfg = RunConfig::default();
    cfg.corpus.size = 6;
    cfg.train.variant = Variant::V3;
    let corpus = gen_corpus(&cfg.corpus, &cfg.dims)?;
    let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
    let mut params = AdapterParams::for_surrogate(&cfg.adapter, &net)?;
    params.jitter(0.2, &mut rng(9));
    let ck = Checkpoint {
        config: cfg.clone(),
        epoch: 12,
        variant: Variant::V3,
        corpus: corpus.stats.clone(),
        surrogate: net,
        params,
    };
    let ck_path = dir.join("v3.ck");
    persist::save_checkpoint(&ck, &ck_path)?;
    let back = persist::load_checkpoint(&ck_path)?;
    let bytes = std::fs::read(&ck_path)?;
    let ck_ok = back == ck && back.to_container()?.to_bytes() == bytes;
    let re = Checkpoint::from_container(&Container::from_bytes(&bytes, CHECKPOINT_MAGIC)?)?;
    let ck_ok = ck_ok && re == ck;

    let c_path = dir.join("corpus.bin");
    persist::save_corpus(&corpus, &c_path)?;
    let c_back = persist::load_corpus(&c_path)?;
    let c2 = dir.join("corpus2.bin");
    persist::save_corpus(&c_back, &c2)?;
    let corpus_ok = c_back == corpus && std::fs::read(&c_path)? == std::fs::read(&c2)?;

    let warm = persist::warm_start(&back, Variant::V4)?;
    let src = back.params.tensors();
    let copied = warm
        .tensors()
        .iter()
        .zip(&src)
        .zip(PARAM_NAMES)
        .filter(|(_, (n, _))| !n.starts_with("conf."))
        .all(|((a, b), _)| a.bitwise_eq(b));
    let mut alpha_err: f64 = 0.0;
    for r in &corpus.records {
        alpha_err = alpha_err.max((warm.alpha(&r.prompt.features()?)? - 0.40).abs());
    }
    Ok(vec![
        part("9", ck_ok, format!("checkpoint round trip ({} bytes)", bytes.len())),
        part("9", corpus_ok, "corpus round trip"),
        part("9", copied, "v3 -> v4 FiLM+RCA copied"),
        part("9", alpha_err <= 1e-9, format!("fresh gate |alpha - 0.40| = {alpha_err:.0e}")),
    ])
}

// ---------------------------------------------------------------- 10

fn grpg(dir: &Path, args: &[&str]) -> Res<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_grpg"))
        .args(args)
        .current_dir(dir)
        .env("GRPG_DETERMINISTIC", "1")
        .output()?;
    if !out.status.success() {
        return Err(format!("grpg {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(())
}

fn determinism(dir: &Path) -> Res<Vec<Part>> {
    let files = ["corpus.bin", "v4.ck", "v4.history.csv", "metrics.csv", "aggregates.csv", "table.txt"];
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let d = dir.join(name);
        std::fs::create_dir_all(&d)?;
        grpg(&d, &["gen-corpus", "--size", "16", "--seed", "7", "--out", "corpus.bin"])?;
        grpg(&d, &["train", "--corpus", "corpus.bin", "--variant", "v4", "--epochs", "3", "--out", "v4.ck"])?;
        grpg(&d, &["eval", "--checkpoint", "v4.ck", "--corpus", "corpus.bin", "--out", "metrics.csv"])?;
        grpg(
            &d,
            &["report", "--metrics", "metrics.csv", "--csv", "aggregates.csv", "--table", "table.txt"],
        )?;
        runs.push(files.iter().map(|f| std::fs::read(d.join(f))).collect::<std::io::Result<Vec<_>>>()?);
    }
    let same: Vec<&str> = files.iter().zip(runs[0].iter().zip(&runs[1])).filter(|(_, (a, b))| a == b).map(|(f, _)| *f).collect();
    Ok(vec![part(
        "10",
        same.len() == files.len(),
        format!("{}/{} files byte-identical", same.len(), files.len()),
    )])
}

// ----------------------------------------------------------------

type Check<'a> = Box<dyn FnOnce() -> Res<Vec<Part>> + 'a>;

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let criteria: Vec<(usize, &str, Option<u64>, Check<'_>)> = vec![
        (1, "identity at initialisation", Some(10), Box::new(identity)),
        (2, "gradient suite", Some(120), Box::new(gradients)),
        (3, "loss oracles", None, Box::new(losses)),
        (4, "alpha training dynamics", Some(600), Box::new(dynamics)),
        (5, "ablation ordering", Some(1800), Box::new(ablation)),
        (6, "metric oracles", None, Box::new(metric_oracles)),
        (7, "geometry invariants", None, Box::new(geometry)),
        (8, "bottleneck locality", None, Box::new(bottleneck)),
        (9, "persistence", None, Box::new(move || persistence(dir))),
        (10, "determinism", None, Box::new(move || determinism(dir))),
    ];
    let mut unexpected = Vec::new();
    for (id, title, limit, check) in criteria {
        let t = Instant::now();
        let result = check();
        let took = t.elapsed();
        let mut parts = match result {
            Ok(p) => p,
            Err(e) => vec![part("error", false, e.to_string())],
        };
        if let Some(l) = limit {
            parts.push(part("time", took <= Duration::from_secs(l), format!("limit {l} s")));
        }
        let ok = parts.iter().all(|p| p.ok);
        let details: Vec<String> = parts
            .iter()
            .map(|p| if p.ok { p.detail.clone() } else { format!("{} [failed]", p.detail) })
            .collect();
        println!(
            "{} criterion {id:>2} {title}: {} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            details.join("; "),
            took.as_secs_f64()
        );
        for p in parts.iter().filter(|p| !p.ok) {
            let known = KNOWN_GAPS.contains(&(id, p.label));
            if known {
                println!("     criterion {id} part {} is a documented gap", p.label);
            } else {
                unexpected.push(format!("{id}:{}", p.label));
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
