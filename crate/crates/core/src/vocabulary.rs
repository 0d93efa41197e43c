//! k-means visual vocabulary: training, quantization to word ids, exemplar
//! lookup and the vocabulary file format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kdtree::KdTree;
use crate::par;

/// Visual word id, `1..=W`.
pub type Word = u32;

/// Squared L2 distance accumulated in f64, in index order.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub fn l2(a: &[f32], b: &[f32]) -> f64 {
    squared_l2(a, b).sqrt()
}

pub fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    /// Vocabulary size W.
    pub words: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            words: 64,
            max_iters: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStats {
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
    /// Assignments stopped changing before `max_iters`.
    pub converged: bool,
    pub reseeded: usize,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    /// Row-major `W × D` exemplars.
    exemplars: Vec<f32>,
    dim: usize,
    tree: KdTree,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.exemplars == other.exemplars
    }
}

impl Vocabulary {
    /// Validates finiteness and distinctness of the exemplars.
    pub fn new(exemplars: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || exemplars.is_empty() || exemplars.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} values do not form a non-empty W × {dim} vocabulary",
                exemplars.len()
            )));
        }
        if exemplars.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("exemplars must be finite".into()));
        }
        let rows: Vec<&[f32]> = exemplars.chunks(dim).collect();
        for i in 0..rows.len() {
            for j in 0..i {
                if rows[i] == rows[j] {
                    return Err(Error::InvalidParameter(format!("exemplars {} and {} coincide", j + 1, i + 1)));
                }
            }
        }
        let tree = KdTree::new(dim, exemplars.iter().map(|&v| v as f64).collect());
        Ok(Self { exemplars, dim, tree })
    }

    pub fn words(&self) -> usize {
        self.exemplars.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn exemplar(&self, w: Word) -> Result<&[f32]> {
        let k = w as usize;
        if k == 0 || k > self.words() {
            return Err(Error::WordOutOfRange { word: w, max: self.words() });
        }
        Ok(&self.exemplars[(k - 1) * self.dim..k * self.dim])
    }

    pub fn exemplars(&self) -> impl Iterator<Item = &[f32]> {
        self.exemplars.chunks(self.dim)
    }

    fn check_dim(&self, d: &[f32]) -> Result<()> {
        if d.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: d.len(),
            });
        }
        Ok(())
    }

    /// Word of the L2-nearest exemplar, lowest id on ties.
    pub fn quantize(&self, d: &[f32]) -> Result<Word> {
        self.check_dim(d)?;
        let q: Vec<f64> = d.iter().map(|&v| v as f64).collect();
        let (id, _) = self.tree.nearest_sq(&q).expect("non-empty vocabulary");
        Ok(id as Word + 1)
    }

    pub fn quantize_all(&self, ds: &[Vec<f32>]) -> Result<Vec<Word>> {
        par::try_map(ds, |d| self.quantize(d))
    }

    /// Largest exemplar norm.
    pub fn max_norm(&self) -> f64 {
        self.exemplars().map(norm).fold(0.0, f64::max)
    }
}

fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding: first center uniform, then proportional to the squared
/// distance to the closest chosen center.
fn seed_centers(xs: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![xs[rng.random_range(0..xs.len())].clone()];
    let mut d2: Vec<f64> = xs.iter().map(|x| nearest_center(x, &centers).1).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        let c = xs[pick.expect("more distinct points than centers")].clone();
        for (x, d) in xs.iter().zip(d2.iter_mut()) {
            let nd: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            *d = d.min(nd);
        }
        centers.push(c);
    }
    centers
}

fn distinct_count(features: &[Vec<f32>]) -> usize {
    let mut sorted: Vec<Vec<u32>> = features.iter().map(|f| f.iter().map(|v| v.to_bits()).collect()).collect();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len()
}

/// Lloyd's k-means from k-means++ seeds. Empty clusters are re-seeded with
/// the point farthest from its centroid.
pub fn train_vocabulary(features: &[Vec<f32>], cfg: &KMeansConfig) -> Result<(Vocabulary, TrainingStats)> {
    let k = cfg.words;
    if k == 0 {
        return Err(Error::InvalidParameter("vocabulary needs at least one word".into()));
    }
    if features.len() < k {
        return Err(Error::InsufficientFeatures {
            have: features.len(),
            need: k,
        });
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let distinct = distinct_count(features);
    if distinct < k {
        return Err(Error::InsufficientFeatures { have: distinct, need: k });
    }
    let xs: Vec<Vec<f64>> = features.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = seed_centers(&xs, k, &mut rng);
    let mut assign: Vec<usize> = Vec::new();
    let mut stats = TrainingStats {
        wcss_history: Vec::new(),
        iterations: 0,
        converged: false,
        reseeded: 0,
    };
    loop {
        let nn = par::map(&xs, |x| nearest_center(x, &centers));
        let next: Vec<usize> = nn.iter().map(|&(c, _)| c).collect();
        stats.wcss_history.push(nn.iter().map(|&(_, d)| d).sum());
        if next == assign {
            stats.converged = true;
            break;
        }
        assign = next;
        if stats.iterations >= cfg.max_iters {
            break;
        }
        stats.iterations += 1;
        // update in feature-index order for reproducible sums
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &c) in xs.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let mut taken = vec![false; xs.len()];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = (usize::MAX, -1.0);
            for (i, x) in xs.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let d: f64 = x.iter().zip(&centers[assign[i]]).map(|(a, b)| (a - b) * (a - b)).sum();
                if d > far.1 {
                    far = (i, d);
                }
            }
            taken[far.0] = true;
            centers[c] = xs[far.0].clone();
            stats.reseeded += 1;
        }
    }
    let flat: Vec<f32> = centers.iter().flatten().map(|&v| v as f32).collect();
    Ok((Vocabulary::new(flat, dim)?, stats))
}

pub fn encode_vocabulary(v: &Vocabulary) -> Result<Vec<u8>> {
    let mut w = ByteWriter::with_magic(b"VOC1", 8 + 4 * v.exemplars.len());
    w.u32(binio::to_u32(v.words(), "word count")?);
    w.u32(binio::to_u32(v.dim, "dimension")?);
    v.exemplars.iter().for_each(|&x| w.f32(x));
    Ok(w.finish())
}

pub fn decode_vocabulary(bytes: &[u8]) -> Result<Vocabulary> {
    let mut r = ByteReader::new("VOC1", b"VOC1", bytes)?;
    let words = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let n = words.checked_mul(dim).ok_or_else(|| r.err("size overflow"))?;
    r.require(n.checked_mul(4).ok_or_else(|| r.err("size overflow"))?)?;
    let values = (0..n).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
    r.expect_end()?;
    Vocabulary::new(values, dim).map_err(|e| r.err(e.to_string()))
}

pub fn write_vocabulary(path: &Path, v: &Vocabulary) -> Result<()> {
    write_atomic(path, &encode_vocabulary(v)?)
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    decode_vocabulary(&binio::read_file(path)?)
}
