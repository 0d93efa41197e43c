//! Bag-of-words images, the inverted index and naive-Bayes nearest-neighbor
//! viewpoint localization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::cloud::{apply_transform, Point3, PointCloud};
use crate::error::{Error, Result};
use crate::fpfh::{extract_descriptors, Descriptor, DescriptorMethod};
use crate::ics::{to_ics, IcsAlignment, IcsConfig};
use crate::io::write_atomic;
use crate::normals::estimate_normals;
use crate::par;
use crate::tdf::sample_keypoint_indices;
use crate::vocabulary::{l2, Vocabulary, Word};

#[derive(Debug, Clone, PartialEq)]
pub struct BowFeature {
    pub keypoint: Point3,
    pub word: Word,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BowImage {
    pub id: u32,
    pub tag: Option<String>,
    pub features: Vec<BowFeature>,
}

impl BowImage {
    pub fn new(id: u32, features: Vec<BowFeature>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Precondition(format!("image {id} has no features")));
        }
        Ok(Self { id, tag: None, features })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn keypoints(&self) -> impl Iterator<Item = &Point3> {
        self.features.iter().map(|f| &f.keypoint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BowConfig {
    pub n_keypoints: usize,
    pub keypoint_seed: u64,
    /// Neighborhood radius for normal estimation, meters.
    pub normal_radius: f64,
    pub fpfh_radius: f64,
    pub ics: IcsConfig,
    /// Express keypoints in the ICS; otherwise they stay in the map frame.
    pub use_ics: bool,
}

impl Default for BowConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 500,
            keypoint_seed: 0,
            normal_radius: 0.5,
            fpfh_radius: 1.0,
            ics: IcsConfig::default(),
            use_ics: true,
        }
    }
}

impl BowConfig {
    pub fn fpfh(&self) -> DescriptorMethod {
        DescriptorMethod::Fpfh { radius: self.fpfh_radius }
    }
}

/// Keypoints and descriptors of a local map, before quantization.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub keypoints: Vec<Point3>,
    pub descriptors: Vec<Descriptor>,
    /// Map frame → ICS, computed even when keypoints stay in the map frame.
    pub alignment: IcsAlignment,
}

/// ICS alignment, normals, keypoint sampling and description of a map.
pub fn describe_map(cloud: &PointCloud, cfg: &BowConfig, method: &DescriptorMethod) -> Result<ImageFeatures> {
    let (alignment, aligned) = to_ics(cloud, &cfg.ics)?;
    let frame = if cfg.use_ics { aligned } else { cloud.without_normals() };
    // normals in the ICS make the sign convention viewpoint-independent
    let oriented = if cfg.use_ics {
        estimate_normals(&frame, cfg.normal_radius)?
    } else {
        let ics_normals = estimate_normals(&apply_transform(&frame, &alignment.transform), cfg.normal_radius)?;
        apply_transform(&ics_normals, &alignment.transform.inverse())
    };
    let sampling = crate::tdf::TdfConfig {
        n_keypoints: cfg.n_keypoints,
        seed: cfg.keypoint_seed,
        ..Default::default()
    };
    let keypoints: Vec<Point3> = sample_keypoint_indices(oriented.len(), &sampling)
        .into_iter()
        .map(|i| oriented.points()[i])
        .collect();
    let set = extract_descriptors(&oriented, &keypoints, method)?;
    Ok(ImageFeatures {
        keypoints: set.keypoints,
        descriptors: set.descriptors,
        alignment,
    })
}

/// Quantize described keypoints into a bag-of-words image.
pub fn quantize_image(id: u32, features: &ImageFeatures, vocab: &Vocabulary) -> Result<BowImage> {
    let words = vocab.quantize_all(&features.descriptors)?;
    let feats = features
        .keypoints
        .iter()
        .zip(&features.descriptors)
        .zip(words)
        .map(|((k, d), w)| BowFeature {
            keypoint: *k,
            word: w,
            descriptor: d.clone(),
        })
        .collect();
    BowImage::new(id, feats)
}

pub fn build_bow_image(
    id: u32,
    cloud: &PointCloud,
    cfg: &BowConfig,
    method: &DescriptorMethod,
    vocab: &Vocabulary,
) -> Result<(BowImage, IcsAlignment)> {
    let f = describe_map(cloud, cfg, method)?;
    if let Some(d) = f.descriptors.first() {
        if d.len() != vocab.dim() {
            return Err(Error::DimensionMismatch {
                expected: vocab.dim(),
                got: d.len(),
            });
        }
    }
    Ok((quantize_image(id, &f, vocab)?, f.alignment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub image: u32,
    /// Feature index within the image.
    pub feature: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedImage {
    pub id: u32,
    pub keypoints: Vec<Point3>,
    pub words: Vec<Word>,
    /// Sorted distinct words of the image.
    distinct: Vec<Word>,
    has_word: Vec<bool>,
}

impl IndexedImage {
    fn new(id: u32, keypoints: Vec<Point3>, words: Vec<Word>, n_words: usize) -> Self {
        let mut distinct = words.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let mut has_word = vec![false; n_words + 1];
        distinct.iter().for_each(|&w| has_word[w as usize] = true);
        Self {
            id,
            keypoints,
            words,
            distinct,
            has_word,
        }
    }

    pub fn distinct_words(&self) -> &[Word] {
        &self.distinct
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Word → postings over a registry of reference images.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    vocab: Vocabulary,
    vocab_path: Option<PathBuf>,
    postings: Vec<Vec<Posting>>,
    images: Vec<IndexedImage>,
    by_id: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NbnnMode {
    /// Every exemplar of every reference image is a candidate.
    Exact,
    /// Candidates come from the query word's postings, with an exhaustive
    /// per-image fallback when the image lacks that word.
    #[default]
    WordRestricted,
}

impl InvertedIndex {
    pub fn new(vocab: Vocabulary) -> Self {
        let w = vocab.words();
        Self {
            vocab,
            vocab_path: None,
            postings: vec![Vec::new(); w],
            images: Vec::new(),
            by_id: BTreeMap::new(),
        }
    }

    /// Record where the vocabulary lives, for persistence.
    pub fn with_vocab_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.vocab_path = Some(path.into());
        self
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_path(&self) -> Option<&Path> {
        self.vocab_path.as_deref()
    }

    pub fn images(&self) -> &[IndexedImage] {
        &self.images
    }

    pub fn image(&self, id: u32) -> Option<&IndexedImage> {
        self.by_id.get(&id).map(|&k| &self.images[k])
    }

    pub fn postings(&self, w: Word) -> Result<&[Posting]> {
        self.vocab.exemplar(w)?;
        Ok(&self.postings[w as usize - 1])
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn add(&mut self, image: &BowImage) -> Result<()> {
        self.add_parts(
            image.id,
            image.features.iter().map(|f| f.keypoint).collect(),
            image.features.iter().map(|f| f.word).collect(),
        )
    }

    fn add_parts(&mut self, id: u32, keypoints: Vec<Point3>, words: Vec<Word>) -> Result<()> {
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateImage(id));
        }
        if words.is_empty() {
            return Err(Error::Precondition(format!("image {id} has no features")));
        }
        let max = self.vocab.words();
        if let Some(&w) = words.iter().find(|&&w| w == 0 || w as usize > max) {
            return Err(Error::WordOutOfRange { word: w, max });
        }
        for (k, &w) in words.iter().enumerate() {
            self.postings[w as usize - 1].push(Posting {
                image: id,
                feature: binio::to_u32(k, "feature index")?,
            });
        }
        self.by_id.insert(id, self.images.len());
        self.images.push(IndexedImage::new(id, keypoints, words, max));
        Ok(())
    }
}

/// Index alias matching the operation name.
pub fn index_add(index: &mut InvertedIndex, image: &BowImage) -> Result<()> {
    index.add(image)
}

fn rank(mut scores: Vec<(u32, f64)>, k: usize) -> Vec<(u32, f64)> {
    scores.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    scores.truncate(k);
    scores
}

/// NBNN ranking: `score(j) = Σ_q min_{r ∈ R_j} |q − E(r)|`, ascending, ties by
/// lower image id, top `k`.
pub fn nbnn_localize(query: &BowImage, index: &InvertedIndex, k: usize, mode: NbnnMode) -> Result<Vec<(u32, f64)>> {
    let vocab = &index.vocab;
    if let Some(f) = query.features.iter().find(|f| f.descriptor.len() != vocab.dim()) {
        return Err(Error::DimensionMismatch {
            expected: vocab.dim(),
            got: f.descriptor.len(),
        });
    }
    let w = vocab.words();
    // |q − E(w)| for every query feature and word
    let table: Vec<Vec<f64>> = par::map(&query.features, |f| vocab.exemplars().map(|e| l2(&f.descriptor, e)).collect());
    let exhaustive = |img: &IndexedImage, qi: usize| {
        img.distinct
            .iter()
            .map(|&w| table[qi][w as usize - 1])
            .fold(f64::INFINITY, f64::min)
    };
    let scores = match mode {
        NbnnMode::Exact => par::map(&index.images, |img| {
            let s = (0..query.features.len()).map(|qi| exhaustive(img, qi)).sum::<f64>();
            (img.id, s)
        }),
        NbnnMode::WordRestricted => {
            let mut terms = vec![vec![f64::NAN; query.features.len()]; index.images.len()];
            for (qi, f) in query.features.iter().enumerate() {
                if f.word == 0 || f.word as usize > w {
                    return Err(Error::WordOutOfRange { word: f.word, max: w });
                }
                let own = table[qi][f.word as usize - 1];
                for p in &index.postings[f.word as usize - 1] {
                    terms[index.by_id[&p.image]][qi] = own;
                }
            }
            let slots: Vec<usize> = (0..index.images.len()).collect();
            par::map(&slots, |&k| {
                let img = &index.images[k];
                let s = terms[k]
                    .iter()
                    .enumerate()
                    .map(|(qi, &t)| if t.is_nan() { exhaustive(img, qi) } else { t })
                    .sum::<f64>();
                (img.id, s)
            })
        }
    };
    Ok(rank(scores, k))
}

/// Direct evaluation of the NBNN score over full feature lists.
pub fn brute_force_localize(query: &BowImage, images: &[BowImage], vocab: &Vocabulary) -> Result<Vec<(u32, f64)>> {
    let mut scores = Vec::with_capacity(images.len());
    for img in images {
        let mut total = 0.0;
        for q in &query.features {
            let mut best = f64::INFINITY;
            for r in &img.features {
                best = best.min(l2(&q.descriptor, vocab.exemplar(r.word)?));
            }
            total += best;
        }
        scores.push((img.id, total));
    }
    Ok(rank(scores, images.len()))
}

pub fn encode_index(index: &InvertedIndex) -> Result<Vec<u8>> {
    let mut w = ByteWriter::with_magic(b"IDX1", 64);
    w.u32(binio::to_u32(index.images.len(), "image count")?);
    w.u32(binio::to_u32(index.vocab.words(), "word count")?);
    for img in &index.images {
        w.u32(img.id);
        w.u32(binio::to_u32(img.words.len(), "feature count")?);
        for (word, p) in img.words.iter().zip(&img.keypoints) {
            w.u32(*word);
            p.iter().for_each(|&c| w.f32(c as f32));
        }
    }
    let path = index
        .vocab_path
        .as_ref()
        .ok_or_else(|| Error::Precondition("index has no vocabulary path to record".into()))?;
    let s = path
        .to_str()
        .ok_or_else(|| Error::InvalidParameter(format!("vocabulary path {path:?} is not UTF-8")))?;
    w.u32(binio::to_u32(s.len(), "path length")?);
    w.bytes(s.as_bytes());
    Ok(w.finish())
}

/// Decode an index; `load_vocab` resolves the recorded vocabulary path.
pub fn decode_index(bytes: &[u8], load_vocab: impl FnOnce(&Path) -> Result<Vocabulary>) -> Result<InvertedIndex> {
    let mut r = ByteReader::new("IDX1", b"IDX1", bytes)?;
    let n_images = r.u32()? as usize;
    let n_words = r.u32()? as usize;
    let mut parts = Vec::new();
    for _ in 0..n_images {
        let id = r.u32()?;
        let n = r.u32()? as usize;
        r.require(n.checked_mul(16).ok_or_else(|| r.err("size overflow"))?)?;
        let mut words = Vec::with_capacity(n);
        let mut kps = Vec::with_capacity(n);
        for _ in 0..n {
            words.push(r.u32()?);
            let (x, y, z) = (r.f32()?, r.f32()?, r.f32()?);
            if ![x, y, z].iter().all(|c| c.is_finite()) {
                return Err(r.err("non-finite keypoint"));
            }
            kps.push(Point3::new(x as f64, y as f64, z as f64));
        }
        parts.push((id, kps, words));
    }
    let len = r.u32()? as usize;
    let path = std::str::from_utf8(r.bytes(len)?).map_err(|_| r.err("vocabulary path is not UTF-8"))?;
    let path = PathBuf::from(path);
    r.expect_end()?;
    let vocab = load_vocab(&path)?;
    if vocab.words() != n_words {
        return Err(r.err(format!("index has {n_words} words, vocabulary {}", vocab.words())));
    }
    let mut index = InvertedIndex::new(vocab).with_vocab_path(path);
    for (id, kps, words) in parts {
        index.add_parts(id, kps, words).map_err(|e| r.err(e.to_string()))?;
    }
    Ok(index)
}

pub fn write_index(path: &Path, index: &InvertedIndex) -> Result<()> {
    write_atomic(path, &encode_index(index)?)
}

/// Read an index; a relative vocabulary path resolves against the index file's
/// directory.
pub fn read_index(path: &Path) -> Result<InvertedIndex> {
    let bytes = binio::read_file(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    decode_index(&bytes, |voc| {
        let resolved = if voc.is_relative() { base.join(voc) } else { voc.to_path_buf() };
        crate::vocabulary::read_vocabulary(&resolved)
    })
}
