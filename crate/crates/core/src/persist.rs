//! Named-array binary container and the checkpoint, corpus and prediction
//! files built on it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic [8]u8 | version u32 | meta_len u64 | meta JSON
//! section_count u32
//!   name_len u32 | name | array_count u32
//!     name_len u32 | name | dtype u8 | rank u32 | dims u64 × rank
//!     byte_len u64 | payload
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, FeatureMoments, PARAM_NAMES};
use crate::backbone::SurrogateNpNet;
use crate::config::{CorpusConfig, Dims, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::geometry::RegionLayout;
use crate::synth::{Category, Corpus, CorpusStats, PromptRecord, RegionSpec, TrainingRecord};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRPGCKPT";
pub const CORPUS_MAGIC: &[u8; 8] = b"GRPGCRPS";
pub const PREDICTION_MAGIC: &[u8; 8] = b"GRPGPRED";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub arrays: Vec<(String, Tensor)>,
}

impl Section {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("section {:?} has no array {name:?}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub version: u32,
    pub meta: Vec<u8>,
    pub sections: Vec<Section>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Container {
    pub fn new<M: Serialize>(magic: &[u8; 8], meta: &M, sections: Vec<Section>) -> Result<Self> {
        Ok(Self {
            magic: *magic,
            version: FORMAT_VERSION,
            meta: serde_json::to_vec(meta)?,
            sections,
        })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_slice(&self.meta).map_err(|e| Error::Format(format!("metadata: {e}")))
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("missing section {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.meta);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.arrays.len() as u32).to_le_bytes());
            for (name, t) in &s.arrays {
                put_str(&mut out, name);
                out.push(DTYPE_F64);
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for d in t.shape() {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                out.extend_from_slice(&((t.len() * 8) as u64).to_le_bytes());
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses and validates a container that must carry `magic`.
    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let m = r.take(8, "magic")?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?.to_vec();
        let n_sections = r.u32("section count")?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.string("section name")?;
            let n = r.u32("array count")?;
            let mut arrays = Vec::new();
            for _ in 0..n {
                let an = r.string("array name")?;
                let dtype = r.take(1, &an)?[0];
                if dtype != DTYPE_F64 {
                    return Err(Error::Format(format!("array {an:?}: unknown dtype tag {dtype}")));
                }
                let rank = r.u32(&an)? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u64(&an)? as usize);
                }
                let len: usize = shape.iter().product();
                let byte_len = r.u64(&an)? as usize;
                if byte_len != len * 8 {
                    return Err(Error::Format(format!(
                        "array {an:?}: length mismatch, shape {shape:?} needs {} bytes but header says {byte_len}",
                        len * 8
                    )));
                }
                let payload = r.take(byte_len, &an)?;
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                arrays.push((an, Tensor::new(shape, data)?));
            }
            sections.push(Section { name, arrays });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            magic: *magic,
            version,
            meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, magic)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Format(format!(
                "length mismatch in {what:?}: need {n} bytes, {left} remain"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|e| Error::Format(format!("{what}: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    config: RunConfig,
    epoch: usize,
    variant: Variant,
    corpus: CorpusStats,
    moments: FeatureMoments,
}

/// Frozen surrogate, trained adapters and the run they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub variant: Variant,
    pub corpus: CorpusStats,
    pub surrogate: SurrogateNpNet,
    pub params: AdapterParams,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            epoch: self.epoch,
            variant: self.variant,
            corpus: self.corpus.clone(),
            moments: self.params.moments.clone(),
        };
        let mut frozen = Section::new("frozen");
        for (n, t) in self.surrogate.named_tensors() {
            frozen.push(n, t);
        }
        let mut trainable = Section::new("trainable");
        for (t, (n, _)) in self.params.tensors().into_iter().zip(PARAM_NAMES) {
            trainable.push(n, t);
        }
        Container::new(CHECKPOINT_MAGIC, &meta, vec![frozen, trainable])
    }

    /// Rebuilds from a container. Arrays of blocks the stored variant does
    /// not train may be absent and then keep their fresh initial values.
    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = c.meta()?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Format("stored config does not match its hash".into()));
        }
        let cfg = meta.config;
        let mut surrogate = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims)?;
        let frozen = c.section("frozen")?;
        for (n, t) in surrogate.named_tensors_mut() {
            *t = checked(frozen.require(&n)?, t, &n)?;
        }
        let mut params = AdapterParams::for_surrogate(&cfg.adapter, &surrogate)?;
        params.moments = meta.moments;
        let trainable = c.section("trainable")?;
        for (t, (n, block)) in params.tensors_mut().into_iter().zip(PARAM_NAMES) {
            match trainable.get(n) {
                Some(src) => *t = checked(src, t, n)?,
                None if block.trained_by(meta.variant) => {
                    return Err(Error::Format(format!(
                        "trainable array {n:?} required by variant {} is missing",
                        meta.variant.name()
                    )))
                }
                None => {}
            }
        }
        Ok(Self {
            config: cfg,
            epoch: meta.epoch,
            variant: meta.variant,
            corpus: meta.corpus,
            surrogate,
            params,
        })
    }
}

fn checked(src: &Tensor, like: &Tensor, name: &str) -> Result<Tensor> {
    if src.shape() != like.shape() {
        return Err(Error::Format(format!(
            "array {name:?} has shape {:?}, expected {:?}",
            src.shape(),
            like.shape()
        )));
    }
    Ok(src.clone())
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.to_container()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(&Container::load(path, CHECKPOINT_MAGIC)?)
}

/// Adapter parameters for training `target` starting from `ck`. Blocks the
/// checkpoint's variant never trained are freshly initialised; in particular
/// a v3 → v4 start keeps FiLM and RCA and resets the confidence head.
pub fn warm_start(ck: &Checkpoint, target: Variant) -> Result<AdapterParams> {
    let mut p = ck.params.clone();
    if target.uses_confidence() && !ck.variant.uses_confidence() {
        p.reset_confidence()?;
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RecordMeta {
    id: usize,
    category: Category,
    regions: Vec<RegionSpec>,
    ratios: Vec<f64>,
    delta: f64,
    candidate_seeds: Vec<u64>,
    candidate_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    mix: f64,
    delta_mean: f64,
    config: CorpusConfig,
    dims: Dims,
    stats: CorpusStats,
    records: Vec<RecordMeta>,
}

pub fn corpus_to_container(c: &Corpus) -> Result<Container> {
    let mut sec = Section::new("records");
    let mut metas = Vec::with_capacity(c.records.len());
    for (i, r) in c.records.iter().enumerate() {
        let p = &r.prompt;
        sec.push(format!("{i}.e_g"), &p.e_g);
        for (k, e) in p.e_k.iter().enumerate() {
            sec.push(format!("{i}.e_k.{k}"), e);
        }
        sec.push(format!("{i}.z_t"), &r.z_t);
        sec.push(format!("{i}.z_pos"), &r.z_pos);
        sec.push(format!("{i}.z_neg"), &r.z_neg);
        metas.push(RecordMeta {
            id: p.id,
            category: p.category,
            regions: p.regions.clone(),
            ratios: p.layout.ratios.clone(),
            delta: r.delta,
            candidate_seeds: r.candidate_seeds.clone(),
            candidate_scores: r.candidate_scores.clone(),
        });
    }
    let meta = CorpusMeta {
        seed: c.config.seed,
        mix: c.config.mix,
        delta_mean: c.stats.delta_mean,
        config: c.config.clone(),
        dims: c.dims.clone(),
        stats: c.stats.clone(),
        records: metas,
    };
    Container::new(CORPUS_MAGIC, &meta, vec![sec])
}

pub fn corpus_from_container(c: &Container) -> Result<Corpus> {
    let meta: CorpusMeta = c.meta()?;
    let sec = c.section("records")?;
    let dims = meta.dims;
    let mut records = Vec::with_capacity(meta.records.len());
    for (i, m) in meta.records.into_iter().enumerate() {
        let e_k = (0..m.regions.len())
            .map(|k| sec.require(&format!("{i}.e_k.{k}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let layout = RegionLayout::new(m.ratios, dims.latent_h, dims.latent_w)?;
        records.push(TrainingRecord {
            prompt: PromptRecord {
                id: m.id,
                category: m.category,
                regions: m.regions,
                layout,
                e_g: sec.require(&format!("{i}.e_g"))?.clone(),
                e_k,
            },
            z_t: sec.require(&format!("{i}.z_t"))?.clone(),
            z_pos: sec.require(&format!("{i}.z_pos"))?.clone(),
            z_neg: sec.require(&format!("{i}.z_neg"))?.clone(),
            delta: m.delta,
            candidate_seeds: m.candidate_seeds,
            candidate_scores: m.candidate_scores,
        });
    }
    if records.len() != meta.stats.count {
        return Err(Error::Format(format!(
            "header announces {} records, file holds {}",
            meta.stats.count,
            records.len()
        )));
    }
    let recomputed = CorpusStats::from_records(&records, meta.stats.regional);
    if (recomputed.delta_mean - meta.delta_mean).abs() > 1e-12 {
        return Err(Error::Format(format!(
            "stored mean gap {} disagrees with records ({})",
            meta.delta_mean, recomputed.delta_mean
        )));
    }
    Ok(Corpus {
        config: meta.config,
        dims,
        records,
        stats: meta.stats,
    })
}

pub fn save_corpus(c: &Corpus, path: &Path) -> Result<()> {
    corpus_to_container(c)?.save(path)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    corpus_from_container(&Container::load(path, CORPUS_MAGIC)?)
}

/// One predicted noise tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub prompt_id: usize,
    pub seed: usize,
    pub z_out: Tensor,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PredictionMeta {
    config_hash: String,
    variant: Variant,
    keys: Vec<(usize, usize)>,
}

pub fn save_predictions(preds: &[Prediction], variant: Variant, config_hash: &str, path: &Path) -> Result<()> {
    let mut sec = Section::new("predictions");
    for p in preds {
        sec.push(format!("{}.{}.z_out", p.prompt_id, p.seed), &p.z_out);
        sec.push(format!("{}.{}.alpha", p.prompt_id, p.seed), &Tensor::from_vec(vec![p.alpha]));
    }
    let meta = PredictionMeta {
        config_hash: config_hash.to_string(),
        variant,
        keys: preds.iter().map(|p| (p.prompt_id, p.seed)).collect(),
    };
    Container::new(PREDICTION_MAGIC, &meta, vec![sec])?.save(path)
}

pub fn load_predictions(path: &Path) -> Result<(Variant, Vec<Prediction>)> {
    let c = Container::load(path, PREDICTION_MAGIC)?;
    let meta: PredictionMeta = c.meta()?;
    let sec = c.section("predictions")?;
    let preds = meta
        .keys
        .iter()
        .map(|&(id, s)| {
            Ok(Prediction {
                prompt_id: id,
                seed: s,
                z_out: sec.require(&format!("{id}.{s}.z_out"))?.clone(),
                alpha: sec.require(&format!("{id}.{s}.alpha"))?.item()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((meta.variant, preds))
}
