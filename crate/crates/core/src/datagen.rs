//! Seeded synthetic corpus: image latents paired with one short and one dense caption.
//!
//! Every image carries a topic mixture and a handful of object tokens drawn from its
//! topics' pools. Both captions mention the image's objects; the latent is the topic
//! mixture plus the objects' latent directions plus Gaussian noise.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::tokens::{self, N_RESERVED};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const LATENT_MAGIC: &[u8; 8] = b"L2CLAT\0\0";
pub const LATENT_HEADER_LEN: u64 = 16;

pub const REAL_LEN: (usize, usize) = (4, 12);
pub const DENSE_LEN: (usize, usize) = (24, 60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub vocab_size: usize,
    pub n_topics: usize,
    pub tokens_per_topic: usize,
    pub noise_rate: f64,
    /// Leading tokens of each topic pool that can serve as image objects; the rest are
    /// topic-level context words.
    pub object_tokens_per_topic: usize,
    pub topics_per_image: usize,
    pub objects_per_topic: usize,
    /// Inclusive range of object mentions in a real caption.
    pub real_objects: (usize, usize),
    /// Fraction of a dense caption spent on object mentions (all objects at least once).
    pub dense_object_frac: f64,
    /// Fraction of a dense caption spent on topic context words.
    pub dense_context_frac: f64,
    /// Standard deviation of the Gaussian noise added to each latent coordinate.
    pub latent_noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            n_topics: 16,
            tokens_per_topic: 15,
            noise_rate: 0.05,
            object_tokens_per_topic: 12,
            topics_per_image: 2,
            objects_per_topic: 2,
            real_objects: (4, 4),
            dense_object_frac: 0.2,
            dense_context_frac: 0.0,
            latent_noise: 0.1,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let budget = self.vocab_size.saturating_sub(N_RESERVED as usize);
        ensure!(
            self.n_topics * self.tokens_per_topic <= budget,
            Config,
            "{} topics x {} tokens exceed the vocabulary budget of {budget}",
            self.n_topics,
            self.tokens_per_topic
        );
        ensure!(
            (0.0..0.5).contains(&self.noise_rate),
            Config,
            "noise_rate must lie in [0, 0.5)"
        );
        ensure!(
            self.n_topics >= 1 && self.tokens_per_topic >= 1,
            Config,
            "need at least one topic token"
        );
        ensure!(
            (1..=self.n_topics).contains(&self.topics_per_image),
            Config,
            "topics_per_image must lie in [1, n_topics]"
        );
        ensure!(
            self.object_tokens_per_topic <= self.tokens_per_topic
                && (1..=self.object_tokens_per_topic).contains(&self.objects_per_topic),
            Config,
            "objects_per_topic must fit within object_tokens_per_topic <= tokens_per_topic"
        );
        let (lo, hi) = self.real_objects;
        ensure!(
            lo >= 1 && lo <= hi && hi <= REAL_LEN.0,
            Config,
            "real_objects must lie within [1, {}]",
            REAL_LEN.0
        );
        ensure!(
            self.dense_object_frac >= 0.0
                && self.dense_context_frac >= 0.0
                && self.dense_object_frac + self.dense_context_frac <= 1.0,
            Config,
            "dense caption fractions must be non-negative and sum to at most 1"
        );
        ensure!(
            self.objects_per_topic * self.topics_per_image <= DENSE_LEN.0,
            Config,
            "too many objects per image for a dense caption"
        );
        ensure!(
            self.latent_noise >= 0.0 && self.latent_noise.is_finite(),
            Config,
            "latent_noise must be >= 0"
        );
        Ok(())
    }

    fn topic_tokens(&self, topic: usize) -> std::ops::Range<u32> {
        let start = N_RESERVED as usize + topic * self.tokens_per_topic;
        start as u32..(start + self.tokens_per_topic) as u32
    }

    /// Tokens outside every topic pool (function words).
    pub fn filler_tokens(&self) -> std::ops::Range<u32> {
        (N_RESERVED as usize + self.n_topics * self.tokens_per_topic) as u32..self.vocab_size as u32
    }

    pub fn topic_of(&self, token: u32) -> Option<usize> {
        let t = token.checked_sub(N_RESERVED)? as usize / self.tokens_per_topic;
        (t < self.n_topics).then_some(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionKind {
    Real,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caption {
    pub caption_id: u64,
    pub kind: CaptionKind,
    /// Content tokens only; the prompt token and EOS are added at encoding time.
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: u64,
    /// Byte offset of this image's latent inside the latents file.
    pub latent_file_offset: u64,
    pub captions: Vec<Caption>,
}

impl ImageRecord {
    pub fn caption(&self, kind: CaptionKind) -> Option<&Caption> {
        self.captions.iter().find(|c| c.kind == kind)
    }
}

/// First line of the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub n_images: usize,
    pub latent_dim: usize,
    pub reserved_tokens: ReservedTokens,
    pub spec: GeneratorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservedTokens {
    pub pad: u32,
    pub eos: u32,
    pub mask: u32,
    pub system_prompt: u32,
}

impl Default for ReservedTokens {
    fn default() -> Self {
        Self {
            pad: tokens::PAD,
            eos: tokens::EOS,
            mask: tokens::MASK,
            system_prompt: tokens::SYSTEM_PROMPT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub latent_dim: usize,
    pub spec: GeneratorSpec,
    pub records: Vec<ImageRecord>,
}

/// Manifest plus the latent vectors in manifest order (`[n_images × latent_dim]`, 32-bit).
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub latents: Vec<f32>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn latent(&self, i: usize) -> &[f32] {
        let d = self.manifest.latent_dim;
        &self.latents[i * d..(i + 1) * d]
    }

    /// Latents of the listed images as a 64-bit tensor.
    pub fn latent_tensor(&self, idx: &[usize]) -> Tensor {
        let d = self.manifest.latent_dim;
        let data = idx
            .iter()
            .flat_map(|&i| self.latent(i).iter().map(|&v| v as f64))
            .collect();
        Tensor::new(vec![idx.len(), d], data).expect("latent shape")
    }

    pub fn all_latents(&self) -> Tensor {
        self.latent_tensor(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Content tokens of one caption kind for every image, in manifest order.
    pub fn captions_of(&self, kind: CaptionKind) -> Result<Vec<&Caption>> {
        self.manifest
            .records
            .iter()
            .map(|r| {
                r.caption(kind).ok_or_else(|| {
                    Error::Data(format!("image {} has no {kind:?} caption", r.image_id))
                })
            })
            .collect()
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.manifest.records.iter().map(|r| r.image_id).collect()
    }

    /// Builds a sub-corpus from record indices (order preserved, offsets rewritten).
    pub fn subset(&self, idx: &[usize]) -> Corpus {
        let d = self.manifest.latent_dim;
        let mut records = Vec::with_capacity(idx.len());
        let mut latents = Vec::with_capacity(idx.len() * d);
        for (new, &i) in idx.iter().enumerate() {
            let mut r = self.manifest.records[i].clone();
            r.latent_file_offset = latent_offset(new, d);
            records.push(r);
            latents.extend_from_slice(self.latent(i));
        }
        Corpus {
            manifest: CorpusManifest {
                records,
                ..self.manifest.clone()
            },
            latents,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_manifest(&self.manifest, &dir.join("manifest.jsonl"))?;
        write_latents(
            &self.latents,
            self.manifest.latent_dim,
            &dir.join("latents.bin"),
        )
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest = read_manifest(&dir.join("manifest.jsonl"))?;
        let (latents, dim) = read_latents(&dir.join("latents.bin"))?;
        ensure!(
            dim == manifest.latent_dim,
            Data,
            "latent dim {dim} does not match manifest {}",
            manifest.latent_dim
        );
        ensure!(
            latents.len() == dim * manifest.records.len(),
            Data,
            "latents file holds {} vectors, manifest lists {}",
            latents.len() / dim.max(1),
            manifest.records.len()
        );
        let c = Corpus { manifest, latents };
        c.validate()?;
        Ok(c)
    }

    /// Checks the manifest invariants.
    pub fn validate(&self) -> Result<()> {
        let spec = &self.manifest.spec;
        let mut ids = BTreeSet::new();
        for (i, r) in self.manifest.records.iter().enumerate() {
            ensure!(
                r.latent_file_offset == latent_offset(i, self.manifest.latent_dim),
                Data,
                "image {} has latent offset {}",
                r.image_id,
                r.latent_file_offset
            );
            ensure!(
                r.caption(CaptionKind::Real).is_some(),
                Data,
                "image {} lacks a real caption",
                r.image_id
            );
            ensure!(
                r.caption(CaptionKind::Dense).is_some(),
                Data,
                "image {} lacks a dense caption",
                r.image_id
            );
            for c in &r.captions {
                ensure!(
                    ids.insert(c.caption_id),
                    Data,
                    "duplicate caption_id {}",
                    c.caption_id
                );
                ensure!(
                    c.tokens
                        .iter()
                        .all(|&t| (t as usize) < spec.vocab_size && t >= N_RESERVED),
                    Data,
                    "caption {} has a token outside the content vocabulary",
                    c.caption_id
                );
                let (lo, hi) = match c.kind {
                    CaptionKind::Real => REAL_LEN,
                    CaptionKind::Dense => DENSE_LEN,
                };
                ensure!(
                    (lo..=hi).contains(&c.tokens.len()),
                    Data,
                    "caption {} has {} tokens, outside [{lo}, {hi}]",
                    c.caption_id,
                    c.tokens.len()
                );
            }
        }
        Ok(())
    }
}

pub fn latent_offset(index: usize, dim: usize) -> u64 {
    LATENT_HEADER_LEN + (index * dim * 4) as u64
}

pub fn caption_id(image_id: u64, kind: CaptionKind) -> u64 {
    image_id * 2 + matches!(kind, CaptionKind::Dense) as u64
}

/// Generates `n_images` images from the `data` stream of `seed`.
pub fn gen_corpus(
    spec: &GeneratorSpec,
    seed: u64,
    n_images: usize,
    latent_dim: usize,
) -> Result<Corpus> {
    spec.validate()?;
    ensure!(
        n_images >= 2,
        Config,
        "need at least 2 images, got {n_images}"
    );
    ensure!(latent_dim >= 1, Config, "latent_dim must be positive");
    let mut rng = Rng::stream(seed, "data");
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let direction =
        |rng: &mut Rng| -> Vec<f64> { (0..latent_dim).map(|_| rng.normal() * scale).collect() };
    let topic_dirs: Vec<Vec<f64>> = (0..spec.n_topics).map(|_| direction(&mut rng)).collect();
    let token_dirs: Vec<Vec<f64>> = (0..spec.vocab_size).map(|_| direction(&mut rng)).collect();
    let fillers: Vec<u32> = spec.filler_tokens().collect();

    let mut records = Vec::with_capacity(n_images);
    let mut latents = Vec::with_capacity(n_images * latent_dim);
    for i in 0..n_images {
        let image_id = i as u64;
        let topics = rng.choose_distinct(spec.n_topics, spec.topics_per_image);
        let raw_w: Vec<f64> = topics.iter().map(|_| rng.uniform_in(0.5, 1.5)).collect();
        let wsum: f64 = raw_w.iter().sum();
        let mut objects = Vec::new();
        let mut context = Vec::new();
        for &t in &topics {
            let pool: Vec<u32> = spec.topic_tokens(t).collect();
            let (obj_pool, ctx_pool) = pool.split_at(spec.object_tokens_per_topic);
            for j in rng.choose_distinct(obj_pool.len(), spec.objects_per_topic) {
                objects.push(obj_pool[j]);
            }
            context.extend_from_slice(ctx_pool);
        }

        let mut latent = vec![0.0; latent_dim];
        for (&t, w) in topics.iter().zip(&raw_w) {
            for (l, v) in latent.iter_mut().zip(&topic_dirs[t]) {
                *l += w / wsum * v;
            }
        }
        let obj_w = 1.0 / (objects.len() as f64).sqrt();
        for &o in &objects {
            for (l, v) in latent.iter_mut().zip(&token_dirs[o as usize]) {
                *l += obj_w * v;
            }
        }
        for l in latent.iter_mut() {
            *l += spec.latent_noise * scale * rng.normal();
            latents.push(*l as f32);
        }

        let real = real_caption(spec, &objects, &fillers, &mut rng);
        let dense = dense_caption(spec, &objects, &context, &fillers, &mut rng);
        records.push(ImageRecord {
            image_id,
            latent_file_offset: latent_offset(i, latent_dim),
            captions: vec![
                Caption {
                    caption_id: caption_id(image_id, CaptionKind::Real),
                    kind: CaptionKind::Real,
                    tokens: real,
                },
                Caption {
                    caption_id: caption_id(image_id, CaptionKind::Dense),
                    kind: CaptionKind::Dense,
                    tokens: dense,
                },
            ],
        });
    }
    let corpus = Corpus {
        manifest: CorpusManifest {
            seed,
            latent_dim,
            spec: spec.clone(),
            records,
        },
        latents,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn pick(rng: &mut Rng, pool: &[u32]) -> u32 {
    pool[rng.below(pool.len())]
}

fn finish(spec: &GeneratorSpec, mut tokens: Vec<u32>, rng: &mut Rng) -> Vec<u32> {
    let lo = N_RESERVED as usize;
    for t in tokens.iter_mut() {
        if rng.bernoulli(spec.noise_rate) {
            *t = rng.range_inclusive(lo, spec.vocab_size - 1) as u32;
        }
    }
    rng.shuffle(&mut tokens);
    tokens
}

fn filler_or_context(fillers: &[u32], objects: &[u32], rng: &mut Rng) -> u32 {
    // With no free vocabulary left for fillers, repeat objects instead.
    if fillers.is_empty() {
        pick(rng, objects)
    } else {
        pick(rng, fillers)
    }
}

fn real_caption(spec: &GeneratorSpec, objects: &[u32], fillers: &[u32], rng: &mut Rng) -> Vec<u32> {
    let len = rng.range_inclusive(REAL_LEN.0, REAL_LEN.1);
    let k = rng
        .range_inclusive(spec.real_objects.0, spec.real_objects.1)
        .min(objects.len());
    let mut tokens: Vec<u32> = rng
        .choose_distinct(objects.len(), k)
        .into_iter()
        .map(|j| objects[j])
        .collect();
    while tokens.len() < len {
        tokens.push(filler_or_context(fillers, objects, rng));
    }
    finish(spec, tokens, rng)
}

fn dense_caption(
    spec: &GeneratorSpec,
    objects: &[u32],
    context: &[u32],
    fillers: &[u32],
    rng: &mut Rng,
) -> Vec<u32> {
    let len = rng.range_inclusive(DENSE_LEN.0, DENSE_LEN.1);
    let mut tokens = objects.to_vec();
    let n_obj = ((spec.dense_object_frac * len as f64) as usize).max(objects.len());
    while tokens.len() < n_obj {
        tokens.push(pick(rng, objects));
    }
    if !context.is_empty() {
        let n_ctx = (spec.dense_context_frac * len as f64) as usize;
        for _ in 0..n_ctx.min(len - tokens.len()) {
            tokens.push(pick(rng, context));
        }
    }
    while tokens.len() < len {
        tokens.push(filler_or_context(fillers, objects, rng));
    }
    finish(spec, tokens, rng)
}

/// Disjoint image-level split; `train_frac` of the images (rounded) go to train.
pub fn split_corpus(corpus: &Corpus, train_frac: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    ensure!(
        train_frac > 0.0 && train_frac < 1.0,
        Config,
        "train_frac must lie in (0, 1), got {train_frac}"
    );
    let n = corpus.len();
    let n_train = (train_frac * n as f64).round() as usize;
    ensure!(
        n_train >= 1 && n_train < n,
        Config,
        "split of {n} images at {train_frac} leaves an empty half"
    );
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::stream(seed, "split").shuffle(&mut idx);
    let mut train: Vec<usize> = idx[..n_train].to_vec();
    let mut eval: Vec<usize> = idx[n_train..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    Ok((corpus.subset(&train), corpus.subset(&eval)))
}

/// One Stage-1 positive pair: two captions of the same image, prompt-prefixed with EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPair {
    pub image_index: usize,
    pub caption_ids: (u64, u64),
    pub first: Vec<u32>,
    pub second: Vec<u32>,
}

/// One epoch of positive pairs in shuffled image order.
pub fn make_stage1_pairs(
    corpus: &Corpus,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<CaptionPair>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let r = &corpus.manifest.records[i];
        ensure!(
            r.captions.len() >= 2,
            Data,
            "image {} has fewer than 2 captions",
            r.image_id
        );
        let pick = rng.choose_distinct(r.captions.len(), 2);
        let (a, b) = (&r.captions[pick[0]], &r.captions[pick[1]]);
        out.push(CaptionPair {
            image_index: i,
            caption_ids: (a.caption_id, b.caption_id),
            first: tokens::encode_caption(&a.tokens, true, max_len),
            second: tokens::encode_caption(&b.tokens, true, max_len),
        });
    }
    Ok(out)
}

/// One Stage-2 batch: `N` distinct images, each with one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Batch {
    pub image_indices: Vec<usize>,
    pub caption_ids: Vec<u64>,
    pub kinds: Vec<CaptionKind>,
}

/// One epoch of Stage-2 batches; every image contributes one caption, dense with probability
/// `dense_ratio`. A trailing partial batch is dropped so every batch holds exactly `batch_size`.
pub fn make_stage2_batches(
    corpus: &Corpus,
    dense_ratio: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Stage2Batch>> {
    ensure!(
        (0.0..=1.0).contains(&dense_ratio),
        Config,
        "dense_ratio must lie in [0, 1], got {dense_ratio}"
    );
    ensure!(batch_size >= 1, Config, "batch_size must be positive");
    ensure!(
        batch_size <= corpus.len(),
        Config,
        "batch_size {batch_size} exceeds the {} available images",
        corpus.len()
    );
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for chunk in order.chunks_exact(batch_size) {
        let mut b = Stage2Batch {
            image_indices: Vec::new(),
            caption_ids: Vec::new(),
            kinds: Vec::new(),
        };
        for &i in chunk {
            let kind = if rng.bernoulli(dense_ratio) {
                CaptionKind::Dense
            } else {
                CaptionKind::Real
            };
            let r = &corpus.manifest.records[i];
            let c = r.caption(kind).ok_or_else(|| {
                Error::Data(format!("image {} lacks a {kind:?} caption", r.image_id))
            })?;
            b.image_indices.push(i);
            b.caption_ids.push(c.caption_id);
            b.kinds.push(kind);
        }
        batches.push(b);
    }
    Ok(batches)
}

pub fn write_manifest(m: &CorpusManifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = ManifestHeader {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: m.seed,
        n_images: m.records.len(),
        latent_dim: m.latent_dim,
        reserved_tokens: ReservedTokens::default(),
        spec: m.spec.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in &m.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data("manifest is empty".into()))??;
    let header: ManifestHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Data(format!("bad manifest header: {e}")))?;
    ensure!(
        header.schema_version == MANIFEST_SCHEMA_VERSION,
        Data,
        "unsupported manifest schema version {}",
        header.schema_version
    );
    ensure!(
        header.reserved_tokens == ReservedTokens::default(),
        Data,
        "manifest uses different reserved token ids"
    );
    let mut records = Vec::with_capacity(header.n_images);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("bad manifest record {}: {e}", i + 1)))?;
        records.push(r);
    }
    ensure!(
        records.len() == header.n_images,
        Data,
        "manifest header announces {} images but holds {}",
        header.n_images,
        records.len()
    );
    Ok(CorpusManifest {
        seed: header.seed,
        latent_dim: header.latent_dim,
        spec: header.spec,
        records,
    })
}

pub fn write_latents(latents: &[f32], dim: usize, path: &Path) -> Result<()> {
    ensure!(
        dim >= 1 && latents.len() % dim == 0,
        Dimension,
        "latent buffer is not a multiple of {dim}"
    );
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(LATENT_MAGIC)?;
    w.write_all(&((latents.len() / dim) as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for v in latents {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the latent values and their dimension.
pub fn read_latents(path: &Path) -> Result<(Vec<f32>, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open latents {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    ensure!(
        bytes.len() >= LATENT_HEADER_LEN as usize,
        Data,
        "latents file is truncated"
    );
    ensure!(
        &bytes[..8] == LATENT_MAGIC,
        Data,
        "latents file has a bad magic"
    );
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[LATENT_HEADER_LEN as usize..];
    ensure!(
        payload.len() == count * dim * 4,
        Data,
        "latents payload size does not match its header"
    );
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((values, dim))
}
