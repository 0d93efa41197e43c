//! Likelihood-of-change scoring inside 4×4 ICS grid cells and change ranking.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, RigidTransform};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::par;
use crate::retrieval::{nbnn_localize, BowImage, IndexedImage, InvertedIndex, NbnnMode};
use crate::vocabulary::{l2, norm, Vocabulary};

pub const N_CELLS: usize = 16;

/// Cell boundaries at `0` and `±x̄` along x, `0` and `±ȳ` along y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    x_bar: f64,
    y_bar: f64,
}

impl GridSpec {
    pub fn new(x_bar: f64, y_bar: f64) -> Result<Self> {
        if !(x_bar > 0.0 && x_bar.is_finite() && y_bar > 0.0 && y_bar.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid spec needs positive means, got x̄={x_bar}, ȳ={y_bar}"
            )));
        }
        Ok(Self { x_bar, y_bar })
    }

    pub fn x_bar(&self) -> f64 {
        self.x_bar
    }

    pub fn y_bar(&self) -> f64 {
        self.y_bar
    }
}

#[inline]
fn interval(v: f64, bar: f64) -> u8 {
    if v <= -bar {
        0
    } else if v <= 0.0 {
        1
    } else if v <= bar {
        2
    } else {
        3
    }
}

/// Cell id `4·iy + ix` under lower-closed intervals
/// `(−∞,−x̄], (−x̄,0], (0,x̄], (x̄,∞)`.
pub fn grid_cell(p: &Point3, g: &GridSpec) -> u8 {
    4 * interval(p.y, g.y_bar) + interval(p.x, g.x_bar)
}

/// Means of `|x|` and `|y|` over every keypoint of the training images.
pub fn compute_grid_spec<'a>(images: impl IntoIterator<Item = &'a BowImage>) -> Result<GridSpec> {
    grid_spec_from_points(images.into_iter().flat_map(BowImage::keypoints))
}

pub fn grid_spec_from_points<'a>(points: impl IntoIterator<Item = &'a Point3>) -> Result<GridSpec> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for p in points {
        sx += p.x.abs();
        sy += p.y.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Precondition("grid spec needs at least one keypoint".into()));
    }
    GridSpec::new(sx / n as f64, sy / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LocMode {
    /// Reference features are represented by their word exemplars.
    #[default]
    Exemplar,
    /// Reference features keep their raw descriptors.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loc {
    pub loc: f64,
    pub cell: u8,
    /// No reference feature in the cell; `loc` holds the sentinel.
    pub sentinel: bool,
}

/// Sentinel LoC: twice the largest descriptor norm among the query and the
/// vocabulary exemplars (and raw references, when used).
pub fn sentinel_value(query: &BowImage, vocab: &Vocabulary) -> f64 {
    let q = query.features.iter().map(|f| norm(&f.descriptor)).fold(0.0, f64::max);
    2.0 * q.max(vocab.max_norm())
}

fn check_dim(query: &BowImage, vocab: &Vocabulary) -> Result<()> {
    if let Some(f) = query.features.iter().find(|f| f.descriptor.len() != vocab.dim()) {
        return Err(Error::DimensionMismatch {
            expected: vocab.dim(),
            got: f.descriptor.len(),
        });
    }
    Ok(())
}

/// Per query feature, the minimum descriptor distance to the reference
/// features sharing its grid cell.
pub fn compute_loc(query: &BowImage, reference: &BowImage, vocab: &Vocabulary, g: &GridSpec, mode: LocMode) -> Result<Vec<Loc>> {
    check_dim(query, vocab)?;
    let mut cells: Vec<Vec<&[f32]>> = vec![Vec::new(); N_CELLS];
    for r in &reference.features {
        let d = match mode {
            LocMode::Exemplar => vocab.exemplar(r.word)?,
            LocMode::Raw => {
                if r.descriptor.len() != vocab.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: vocab.dim(),
                        got: r.descriptor.len(),
                    });
                }
                &r.descriptor[..]
            }
        };
        cells[grid_cell(&r.keypoint, g) as usize].push(d);
    }
    let mut sentinel = sentinel_value(query, vocab);
    if mode == LocMode::Raw {
        let r = reference.features.iter().map(|f| norm(&f.descriptor)).fold(0.0, f64::max);
        sentinel = sentinel.max(2.0 * r);
    }
    Ok(par::map(&query.features, |f| {
        let cell = grid_cell(&f.keypoint, g);
        let cands = &cells[cell as usize];
        if cands.is_empty() {
            return Loc { loc: sentinel, cell, sentinel: true };
        }
        let loc = cands.iter().map(|e| l2(&f.descriptor, e)).fold(f64::INFINITY, f64::min);
        Loc { loc, cell, sentinel: false }
    }))
}

/// Exemplar-mode LoC against an indexed reference image.
fn loc_against_indexed(query: &BowImage, img: &IndexedImage, vocab: &Vocabulary, g: &GridSpec, sentinel: f64) -> Vec<Loc> {
    let mut words: Vec<Vec<u32>> = vec![Vec::new(); N_CELLS];
    for (p, &w) in img.keypoints.iter().zip(&img.words) {
        words[grid_cell(p, g) as usize].push(w);
    }
    for ws in &mut words {
        ws.sort_unstable();
        ws.dedup();
    }
    par::map(&query.features, |f| {
        let cell = grid_cell(&f.keypoint, g);
        let ws = &words[cell as usize];
        if ws.is_empty() {
            return Loc { loc: sentinel, cell, sentinel: true };
        }
        let loc = ws
            .iter()
            .map(|&w| l2(&f.descriptor, vocab.exemplar(w).expect("indexed word")))
            .fold(f64::INFINITY, f64::min);
        Loc { loc, cell, sentinel: false }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEntry {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub loc: f64,
    pub cell: u8,
    pub sentinel: bool,
    /// Index of the feature in the query image.
    pub feature: usize,
}

impl ChangeEntry {
    pub fn point(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub query_id: u32,
    pub hypotheses: Vec<u32>,
    /// Descending LoC, ties by lower feature index.
    pub changes: Vec<ChangeEntry>,
    /// Maps keypoints into the query's ICS when they are reported in another
    /// frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_ics: Option<RigidTransform>,
}

impl ChangeReport {
    /// Top-`x` keypoints in the query's ICS.
    pub fn top_ics(&self, x: usize) -> Vec<Point3> {
        self.changes
            .iter()
            .take(x)
            .map(|c| match &self.to_ics {
                Some(t) => t.apply_point(&c.point()),
                None => c.point(),
            })
            .collect()
    }
}

pub fn rank_changes(query: &BowImage, locs: &[Loc]) -> Vec<ChangeEntry> {
    let mut order: Vec<usize> = (0..locs.len()).collect();
    order.sort_by(|&a, &b| locs[b].loc.total_cmp(&locs[a].loc).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| {
            let p = query.features[i].keypoint;
            ChangeEntry {
                x: p.x,
                y: p.y,
                z: p.z,
                loc: locs[i].loc,
                cell: locs[i].cell,
                sentinel: locs[i].sentinel,
                feature: i,
            }
        })
        .collect()
}

/// Compare the query with its top `n_hypotheses` localization results and
/// rank its keypoints by likelihood of change.
pub fn detect_changes(
    query: &BowImage,
    index: &InvertedIndex,
    g: &GridSpec,
    n_hypotheses: usize,
    mode: NbnnMode,
) -> Result<ChangeReport> {
    if index.is_empty() {
        return Err(Error::Precondition("reference index is empty".into()));
    }
    if n_hypotheses == 0 {
        return Err(Error::InvalidParameter("n_hypotheses must be >= 1".into()));
    }
    let vocab = index.vocabulary();
    check_dim(query, vocab)?;
    let hyps = nbnn_localize(query, index, n_hypotheses, mode)?;
    let sentinel = sentinel_value(query, vocab);
    let mut best: Vec<Loc> = Vec::new();
    for (id, _) in &hyps {
        let img = index.image(*id).expect("ranked id is indexed");
        let locs = loc_against_indexed(query, img, vocab, g, sentinel);
        if best.is_empty() {
            best = locs;
        } else {
            for (b, l) in best.iter_mut().zip(locs) {
                if l.loc < b.loc {
                    *b = l;
                }
            }
        }
    }
    Ok(ChangeReport {
        query_id: query.id,
        hypotheses: hyps.iter().map(|h| h.0).collect(),
        changes: rank_changes(query, &best),
        to_ics: None,
    })
}

pub fn write_report(path: &Path, report: &ChangeReport) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_report(path: &Path) -> Result<ChangeReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
