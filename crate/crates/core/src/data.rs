//! Embedding datasets: the in-memory form, the synthetic generator, session
//! splits, and the `FSEB` v1 on-disk bundle.
//!
//! A bundle is a directory holding `manifest.json`, `images.bin` and
//! `text.bin`. Both binary files start with the magic `FSEB` and a `u32`
//! version, store little-endian `f32` vectors, and end with a CRC32 of every
//! preceding byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"FSEB";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const TEXT_FILE: &str = "text.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub class_id: u32,
    pub split: Split,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextRecord {
    pub class_id: u32,
    pub templates: Vec<Vec<f32>>,
}

/// Frozen image and text features plus the session assignment.
///
/// Class ids index `class_names`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub d_img: usize,
    pub d_txt: usize,
    pub m: usize,
    pub class_names: Vec<String>,
    pub sessions: Vec<Vec<u32>>,
    pub k_shot: usize,
    pub seed: u64,
    pub images: Vec<ImageRecord>,
    pub texts: Vec<TextRecord>,
}

/// One class appearing in two sessions (or twice in one).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub class_id: u32,
    pub first: usize,
    pub second: usize,
}

/// Every pairwise collision, ordered by class id, then session indices.
pub fn validate_disjoint(sessions: &[Vec<u32>]) -> Vec<Violation> {
    let mut seen: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (s, classes) in sessions.iter().enumerate() {
        for &c in classes {
            seen.entry(c).or_default().push(s);
        }
    }
    let mut out = Vec::new();
    for (class_id, at) in seen {
        for i in 0..at.len() {
            for j in i + 1..at.len() {
                out.push(Violation {
                    class_id,
                    first: at[i],
                    second: at[j],
                });
            }
        }
    }
    out
}

impl EmbeddingDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn text_for(&self, class_id: u32) -> Option<&TextRecord> {
        self.texts.iter().find(|t| t.class_id == class_id)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(msg));
        if self.d_img == 0 || self.d_txt == 0 || self.m == 0 {
            return bad("dimensions and template count must be >= 1".into());
        }
        let n = self.num_classes();
        for (i, r) in self.images.iter().enumerate() {
            if r.class_id as usize >= n {
                return bad(format!("image record {i} has unknown class {}", r.class_id));
            }
            if r.vector.len() != self.d_img {
                return bad(format!("image record {i} has dimension {}", r.vector.len()));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return bad(format!("image record {i} is not finite"));
            }
        }
        let mut with_text = BTreeSet::new();
        for t in &self.texts {
            if t.class_id as usize >= n || !with_text.insert(t.class_id) {
                return bad(format!(
                    "text record for class {} is unknown or repeated",
                    t.class_id
                ));
            }
            if t.templates.len() != self.m {
                return bad(format!(
                    "class {} has {} templates, expected {}",
                    t.class_id,
                    t.templates.len(),
                    self.m
                ));
            }
            if t.templates
                .iter()
                .any(|v| v.len() != self.d_txt || v.iter().any(|x| !x.is_finite()))
            {
                return bad(format!("class {} has a malformed template", t.class_id));
            }
        }
        if with_text.len() != n {
            return bad("every class needs a text record".into());
        }
        if let Some(v) = validate_disjoint(&self.sessions).first() {
            return bad(format!(
                "class {} is in sessions {} and {}",
                v.class_id, v.first, v.second
            ));
        }
        let mut counts = vec![[0usize; 2]; n];
        for r in &self.images {
            counts[r.class_id as usize][r.split.byte() as usize] += 1;
        }
        for &c in self.sessions.iter().flatten() {
            let Some(&[train, test]) = counts.get(c as usize) else {
                return bad(format!("session lists unknown class {c}"));
            };
            if train == 0 || test == 0 {
                return bad(format!("class {c} needs train and test images"));
            }
        }
        Ok(())
    }
}

/// Base/incremental shape of a benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_base: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub sessions: usize,
}

impl SplitSpec {
    pub fn total_classes(&self) -> usize {
        self.n_base + self.n_way * self.sessions
    }

    /// Named benchmark shapes; the synthetic presets reuse the CIFAR100 shape.
    pub fn preset(name: &str) -> Option<Self> {
        let (n_base, n_way, sessions) = match name {
            "cub200" | "inf200" => (100, 10, 10),
            "cars" => (96, 10, 10),
            "aircraft" => (50, 5, 10),
            "cifar100" | "miniimagenet" | "synthetic-fine" | "synthetic-coarse" => (60, 5, 8),
            _ => return None,
        };
        Some(Self {
            n_base,
            n_way,
            k_shot: 5,
            sessions,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_base == 0 || self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::InvalidConfig(
                "n_base, n_way and k_shot must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Assigns consecutive class ids to sessions and keeps a seeded `k_shot`
/// subset of the training images of every incremental class.
pub fn make_splits(
    dataset: &EmbeddingDataset,
    spec: SplitSpec,
    seed: u64,
) -> Result<EmbeddingDataset> {
    spec.validate()?;
    if spec.total_classes() > dataset.num_classes() {
        return Err(Error::Data(format!(
            "split needs {} classes, dataset has {}",
            spec.total_classes(),
            dataset.num_classes()
        )));
    }
    let mut sessions = vec![(0..spec.n_base as u32).collect::<Vec<_>>()];
    for t in 0..spec.sessions {
        let start = (spec.n_base + t * spec.n_way) as u32;
        sessions.push((start..start + spec.n_way as u32).collect());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; dataset.images.len()];
    for &c in sessions[1..].iter().flatten() {
        let train: Vec<usize> = dataset
            .images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class_id == c && r.split == Split::Train)
            .map(|(i, _)| i)
            .collect();
        if train.len() < spec.k_shot {
            return Err(Error::Data(format!(
                "class {c} has {} train images, need {}",
                train.len(),
                spec.k_shot
            )));
        }
        let chosen: BTreeSet<usize> = index::sample(&mut rng, train.len(), spec.k_shot)
            .into_iter()
            .collect();
        for (pos, &i) in train.iter().enumerate() {
            keep[i] = chosen.contains(&pos);
        }
    }

    let mut out = dataset.clone();
    out.images = dataset
        .images
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    out.sessions = sessions;
    out.k_shot = spec.k_shot;
    out.seed = seed;
    out.validate()?;
    Ok(out)
}

/// A labelled feature; `id` is the index of the image record in the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub class_id: u32,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionData {
    pub index: usize,
    pub classes: Vec<u32>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Per-session train and test samples in dataset order. Incremental classes
/// with more than `k_shot` train images are subsampled with the manifest seed.
pub fn session_plan(dataset: &EmbeddingDataset) -> Result<Vec<SessionData>> {
    dataset.validate()?;
    if dataset.sessions.is_empty() {
        return Err(Error::Data("dataset has no session assignment".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dataset.seed);
    let mut plan = Vec::with_capacity(dataset.sessions.len());
    for (index, classes) in dataset.sessions.iter().enumerate() {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in classes {
            let mut class_train = Vec::new();
            for (id, r) in dataset
                .images
                .iter()
                .enumerate()
                .filter(|(_, r)| r.class_id == c)
            {
                let s = Sample {
                    id,
                    class_id: c,
                    feature: r.vector.iter().map(|&v| v as f64).collect(),
                };
                match r.split {
                    Split::Train => class_train.push(s),
                    Split::Test => test.push(s),
                }
            }
            if index > 0 {
                if class_train.len() < dataset.k_shot {
                    return Err(Error::Data(format!(
                        "class {c} has {} train images, need {}",
                        class_train.len(),
                        dataset.k_shot
                    )));
                }
                if class_train.len() > dataset.k_shot {
                    let chosen: BTreeSet<usize> =
                        index::sample(&mut rng, class_train.len(), dataset.k_shot)
                            .into_iter()
                            .collect();
                    class_train = class_train
                        .into_iter()
                        .enumerate()
                        .filter(|(i, _)| chosen.contains(i))
                        .map(|(_, s)| s)
                        .collect();
                }
            }
            train.extend(class_train);
        }
        train.sort_by_key(|s| s.id);
        test.sort_by_key(|s| s.id);
        plan.push(SessionData {
            index,
            classes: classes.clone(),
            train,
            test,
        });
    }
    Ok(plan)
}

/// Text templates of every class as `f64`, keyed by class id.
pub fn class_templates(dataset: &EmbeddingDataset) -> BTreeMap<u32, Vec<Vec<f64>>> {
    dataset
        .texts
        .iter()
        .map(|t| {
            (
                t.class_id,
                t.templates
                    .iter()
                    .map(|v| v.iter().map(|&x| x as f64).collect())
                    .collect(),
            )
        })
        .collect()
}

/// Parameters of the Gaussian-mixture generator.
///
/// `within_std`, `between_scale`, `text_noise`, `text_shift` and
/// `image_shift` are expected vector norms; each coordinate uses the scale
/// divided by `√dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub m: usize,
    pub cluster_count: usize,
    pub within_std: f64,
    pub between_scale: f64,
    pub fine_grained: bool,
    /// Class offset inside a cluster as a fraction of `between_scale`, fine mode only.
    pub fine_spread: f64,
    pub text_noise: f64,
    /// Offset shared by every text template.
    pub text_shift: f64,
    /// Offset shared by every image.
    pub image_shift: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn coarse(seed: u64) -> Self {
        Self {
            num_classes: 100,
            dim: 32,
            train_per_class: 20,
            test_per_class: 20,
            m: 4,
            cluster_count: 10,
            within_std: 0.6,
            between_scale: 1.0,
            fine_grained: false,
            fine_spread: 0.3,
            text_noise: 0.1,
            text_shift: 1.0,
            image_shift: 1.0,
            seed,
        }
    }

    pub fn fine(seed: u64) -> Self {
        Self {
            fine_grained: true,
            ..Self::coarse(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "synthetic-coarse" => Some(Self::coarse(seed)),
            "synthetic-fine" => Some(Self::fine(seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.dim == 0
            || self.train_per_class == 0
            || self.test_per_class == 0
            || self.m == 0
            || self.cluster_count == 0
        {
            return Err(Error::InvalidConfig("synthetic sizes must be >= 1".into()));
        }
        let scales = [
            self.within_std,
            self.between_scale,
            self.fine_spread,
            self.text_noise,
            self.text_shift,
            self.image_shift,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig(
                "synthetic scales must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, norm_scale: f64) -> Vec<f64> {
    let std = norm_scale / (dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn to_f32(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f32> {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((x, y), z)| (x + y + z) as f32)
        .collect()
}

/// Draws a dataset with no session assignment; see [`make_splits`].
///
/// Class `k` belongs to cluster `k mod cluster_count`. Images are the class
/// mean plus isotropic noise and a shared image offset. Text templates are
/// the class mean plus a shared text offset and small per-template noise.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let centers: Vec<Vec<f64>> = (0..cfg.cluster_count)
        .map(|_| gaussian(&mut rng, d, cfg.between_scale))
        .collect();
    let spread = if cfg.fine_grained {
        cfg.between_scale * cfg.fine_spread
    } else {
        cfg.between_scale
    };
    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|k| {
            let off = gaussian(&mut rng, d, spread);
            centers[k % cfg.cluster_count]
                .iter()
                .zip(&off)
                .map(|(c, o)| c + o)
                .collect()
        })
        .collect();
    let image_shift = gaussian(&mut rng, d, cfg.image_shift);
    let text_shift = gaussian(&mut rng, d, cfg.text_shift);

    let mut images =
        Vec::with_capacity(cfg.num_classes * (cfg.train_per_class + cfg.test_per_class));
    let mut texts = Vec::with_capacity(cfg.num_classes);
    for (k, mean) in means.iter().enumerate() {
        for (split, count) in [
            (Split::Train, cfg.train_per_class),
            (Split::Test, cfg.test_per_class),
        ] {
            for _ in 0..count {
                let noise = gaussian(&mut rng, d, cfg.within_std);
                images.push(ImageRecord {
                    class_id: k as u32,
                    split,
                    vector: to_f32(mean, &image_shift, &noise),
                });
            }
        }
        let templates = (0..cfg.m)
            .map(|_| to_f32(mean, &text_shift, &gaussian(&mut rng, d, cfg.text_noise)))
            .collect();
        texts.push(TextRecord {
            class_id: k as u32,
            templates,
        });
    }
    Ok(EmbeddingDataset {
        d_img: d,
        d_txt: d,
        m: cfg.m,
        class_names: (0..cfg.num_classes)
            .map(|k| format!("class_{k:03}"))
            .collect(),
        sessions: Vec::new(),
        k_shot: 0,
        seed: cfg.seed,
        images,
        texts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub d_img: usize,
    pub d_txt: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub class_names: Vec<String>,
    pub sessions: Vec<Vec<u32>>,
    pub k_shot: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn of(dataset: &EmbeddingDataset) -> Self {
        Self {
            version: FORMAT_VERSION,
            d_img: dataset.d_img,
            d_txt: dataset.d_txt,
            m: dataset.m,
            class_names: dataset.class_names.clone(),
            sessions: dataset.sessions.clone(),
            k_shot: dataset.k_shot,
            seed: dataset.seed,
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn finish(mut buf: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in u32")))
}

pub fn encode_images(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(20 + dataset.images.len() * (5 + 4 * dataset.d_img) + 4);
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, dim_u32(dataset.d_img, "d_img")?);
    buf.extend_from_slice(&(dataset.images.len() as u64).to_le_bytes());
    for r in &dataset.images {
        if r.vector.len() != dataset.d_img {
            return Err(Error::DimensionMismatch {
                expected: dataset.d_img,
                got: r.vector.len(),
            });
        }
        put_u32(&mut buf, r.class_id);
        buf.push(r.split.byte());
        r.vector
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    Ok(finish(buf))
}

pub fn encode_text(dataset: &EmbeddingDataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, dim_u32(dataset.d_txt, "d_txt")?);
    put_u32(&mut buf, dim_u32(dataset.m, "M")?);
    buf.extend_from_slice(&(dataset.texts.len() as u64).to_le_bytes());
    for t in &dataset.texts {
        if t.templates.len() != dataset.m {
            return Err(Error::DimensionMismatch {
                expected: dataset.m,
                got: t.templates.len(),
            });
        }
        put_u32(&mut buf, t.class_id);
        for tpl in &t.templates {
            if tpl.len() != dataset.d_txt {
                return Err(Error::DimensionMismatch {
                    expected: dataset.d_txt,
                    got: tpl.len(),
                });
            }
            tpl.iter()
                .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
    }
    Ok(finish(buf))
}

struct Reader<'a> {
    file: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated {
                file: self.file.into(),
                needed: self.pos.saturating_add(n),
                have: self.bytes.len(),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Checks magic, version, exact length and CRC; returns a reader positioned
/// after the version field and limited to the payload.
fn open_payload<'a>(
    file: &'static str,
    bytes: &'a [u8],
    header_rest: usize,
    record_len: impl Fn(&[u8]) -> Option<usize>,
) -> Result<Reader<'a>, FormatError> {
    let mut r = Reader {
        file,
        bytes,
        pos: 0,
    };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            file: file.into(),
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            file: file.into(),
            found: version,
        });
    }
    let header = r.take(header_rest)?;
    let payload = record_len(header).ok_or_else(|| FormatError::InvalidField {
        file: file.into(),
        what: "record count".into(),
    })?;
    let needed = (8 + header_rest)
        .checked_add(payload)
        .and_then(|n| n.checked_add(4));
    let needed = needed.ok_or_else(|| FormatError::InvalidField {
        file: file.into(),
        what: "record count".into(),
    })?;
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            file: file.into(),
            needed,
            have: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(FormatError::TrailingBytes { file: file.into() });
    }
    let body = &bytes[..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum {
            file: file.into(),
            stored,
            computed,
        });
    }
    Ok(Reader {
        file,
        bytes: body,
        pos: 8,
    })
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

/// Returns `(d_img, records)`.
pub fn decode_images(bytes: &[u8]) -> Result<(usize, Vec<ImageRecord>), FormatError> {
    let file = IMAGES_FILE;
    let mut r = open_payload(file, bytes, 12, |h| {
        let d = le_u32(h) as usize;
        let count = usize::try_from(le_u64(&h[4..])).ok()?;
        count.checked_mul(5 + 4 * d)
    })?;
    let d = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = r.u32()?;
        let split = match r.take(1)?[0] {
            0 => Split::Train,
            1 => Split::Test,
            b => {
                return Err(FormatError::InvalidField {
                    file: file.into(),
                    what: format!("split byte {b}"),
                })
            }
        };
        out.push(ImageRecord {
            class_id,
            split,
            vector: r.f32s(d)?,
        });
    }
    Ok((d, out))
}

/// Returns `(d_txt, M, records)`.
pub fn decode_text(bytes: &[u8]) -> Result<(usize, usize, Vec<TextRecord>), FormatError> {
    let mut r = open_payload(TEXT_FILE, bytes, 16, |h| {
        let d = le_u32(h) as usize;
        let m = le_u32(&h[4..]) as usize;
        let count = usize::try_from(le_u64(&h[8..])).ok()?;
        count.checked_mul(m.checked_mul(d)?.checked_mul(4)?.checked_add(4)?)
    })?;
    let d = r.u32()? as usize;
    let m = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = r.u32()?;
        let templates = (0..m).map(|_| r.f32s(d)).collect::<Result<_, _>>()?;
        out.push(TextRecord {
            class_id,
            templates,
        });
    }
    Ok((d, m, out))
}

pub fn write_bundle(dataset: &EmbeddingDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_string_pretty(&Manifest::of(dataset))
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    manifest.push('\n');
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(IMAGES_FILE), encode_images(dataset)?)?;
    fs::write(dir.join(TEXT_FILE), encode_text(dataset)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<EmbeddingDataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            file: MANIFEST_FILE.into(),
            found: manifest.version,
        }
        .into());
    }
    let (d_img, images) = decode_images(&fs::read(dir.join(IMAGES_FILE))?)?;
    let (d_txt, m, texts) = decode_text(&fs::read(dir.join(TEXT_FILE))?)?;
    if (d_img, d_txt, m) != (manifest.d_img, manifest.d_txt, manifest.m) {
        return Err(FormatError::Manifest(format!(
            "binaries have d_img={d_img}, d_txt={d_txt}, M={m}; manifest says {}, {}, {}",
            manifest.d_img, manifest.d_txt, manifest.m
        ))
        .into());
    }
    let dataset = EmbeddingDataset {
        d_img,
        d_txt,
        m,
        class_names: manifest.class_names,
        sessions: manifest.sessions,
        k_shot: manifest.k_shot,
        seed: manifest.seed,
        images,
        texts,
    };
    dataset.validate()?;
    Ok(dataset)
}
