//! Subcommand implementations: read declared formats, call the core, write
//! declared formats.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use cr3d_core::change::{detect_changes, grid_spec_from_points, write_report, ChangeReport, read_report};
use cr3d_core::eval::{anr, generate_scene, read_ground_truth, top_x_accuracy, write_ground_truth, BoxRecord, GroundTruth, QueryTruth};
use cr3d_core::fpfh::{read_descriptors, write_descriptors, Descriptor, DescriptorMethod, DescriptorSet, DescriptorSource};
use cr3d_core::ics::IcsAlignment;
use cr3d_core::io::{load_cloud, save_cloud, write_atomic, CloudFormat};
use cr3d_core::registration::{build_local_map, mine_training_pairs, write_pairs, ScanSequence};
use cr3d_core::retrieval::{describe_map, nbnn_localize, read_index, write_index, BowFeature, BowImage, InvertedIndex};
use cr3d_core::vocabulary::{read_vocabulary, train_vocabulary, write_vocabulary, Vocabulary};
use cr3d_core::{Point3, RigidTransform, Vector3};

use crate::config::PipelineConfig;

/// Bad flags, configuration, or missing inputs; maps to exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(e: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(UsageError(e.to_string()))
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{} is not a readable file", p.display())))
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| exts.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Expand directories into their files with one of `exts`, sorted by name.
fn expand_inputs(inputs: &[PathBuf], exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && has_ext(f, exts))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            require_file(p)?;
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(usage("no input files"));
    }
    Ok(out)
}

const CLOUD_EXTS: &[&str] = &["ply", "xyz"];
const FEATURE_EXTS: &[&str] = &["ply", "xyz", "dsc"];

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Image id from the trailing digits of the file stem, else the input position.
fn image_id(p: &Path, pos: usize) -> u32 {
    let s = stem(p);
    let digits: String = s.chars().rev().take_while(char::is_ascii_digit).collect::<Vec<_>>().into_iter().rev().collect();
    digits.parse().unwrap_or(pos as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Frame {
    /// Keypoints expressed in the map's invariant coordinate system.
    Ics,
    /// Keypoints left in the raw map frame.
    Map,
}

/// Written next to each descriptor file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    frame: Frame,
    alignment: IcsAlignment,
}

fn sidecar_path(dsc: &Path) -> PathBuf {
    dsc.with_extension("ics.json")
}

struct Described {
    keypoints: Vec<Point3>,
    descriptors: Vec<Descriptor>,
    frame: Frame,
    alignment: Option<IcsAlignment>,
}

impl Described {
    /// Map from the keypoint frame into the ICS, when they differ.
    fn to_ics(&self) -> Option<RigidTransform> {
        match (self.frame, &self.alignment) {
            (Frame::Map, Some(a)) => Some(a.transform),
            _ => None,
        }
    }

    fn image(&self, id: u32, vocab: &Vocabulary) -> Result<BowImage> {
        let words = vocab.quantize_all(&self.descriptors)?;
        let features = self
            .keypoints
            .iter()
            .zip(&self.descriptors)
            .zip(words)
            .map(|((k, d), w)| BowFeature {
                keypoint: *k,
                word: w,
                descriptor: d.clone(),
            })
            .collect();
        Ok(BowImage::new(id, features)?)
    }
}

/// Descriptor files are read as-is; clouds are described under `cfg`.
fn describe(path: &Path, cfg: &PipelineConfig, no_ics: bool, method: Option<&DescriptorMethod>) -> Result<Described> {
    if has_ext(path, &["dsc"]) {
        let set = read_descriptors(path).with_context(|| format!("reading {}", path.display()))?;
        let side = sidecar_path(path);
        let (frame, alignment) = if side.is_file() {
            let text = fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
            let s: Sidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
            (s.frame, Some(s.alignment))
        } else {
            (Frame::Ics, None)
        };
        if no_ics && frame == Frame::Ics {
            bail!("{} holds ICS keypoints but --no-ics was given", path.display());
        }
        return Ok(Described {
            keypoints: set.keypoints,
            descriptors: set.descriptors,
            frame,
            alignment,
        });
    }
    let cloud = load_cloud(path, CloudFormat::from_path(path)).with_context(|| format!("reading {}", path.display()))?;
    let mut bow = cfg.bow();
    bow.use_ics &= !no_ics;
    let fpfh = bow.fpfh();
    let f = describe_map(&cloud, &bow, method.unwrap_or(&fpfh)).with_context(|| format!("describing {}", path.display()))?;
    Ok(Described {
        keypoints: f.keypoints,
        descriptors: f.descriptors,
        frame: if bow.use_ics { Frame::Ics } else { Frame::Map },
        alignment: Some(f.alignment),
    })
}

fn parse_odometry(path: &Path) -> Result<(Vec<RigidTransform>, Vec<f64>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut poses, mut times) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| anyhow!("{}:{}: {e}", path.display(), i + 1))?;
        if v.len() != 7 || v.iter().any(|x| !x.is_finite()) {
            bail!("{}:{}: expected 7 finite numbers `t tx ty tz rx ry rz`", path.display(), i + 1);
        }
        times.push(v[0]);
        poses.push(RigidTransform::from_axis_angle(Vector3::new(v[4], v[5], v[6]), Vector3::new(v[1], v[2], v[3])));
    }
    Ok((poses, times))
}

fn load_sequence(scans: &Path, odometry: &Path) -> Result<ScanSequence> {
    if !scans.is_dir() {
        return Err(usage(format!("{} is not a directory", scans.display())));
    }
    require_file(odometry)?;
    let files = expand_inputs(&[scans.to_path_buf()], CLOUD_EXTS)?;
    let (poses, times) = parse_odometry(odometry)?;
    let clouds = files
        .iter()
        .map(|f| load_cloud(f, CloudFormat::from_path(f)).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScanSequence::new(clouds, poses, times)?)
}

pub fn build_map(cfg: &PipelineConfig, scans: &Path, odometry: &Path, out: &Path) -> Result<()> {
    let seq = load_sequence(scans, odometry)?;
    let maps = build_local_map(&seq, &cfg.map())?;
    ensure_dir(out)?;
    for (i, m) in maps.iter().enumerate() {
        let p = out.join(format!("map_{i:03}.ply"));
        save_cloud(&m.cloud, &p, CloudFormat::PlyAscii)?;
        println!("{}\t{} points\ttravel {:.3} m", p.display(), m.cloud.len(), m.travel_distance);
    }
    Ok(())
}

pub fn mine_pairs(cfg: &PipelineConfig, scans: &Path, odometry: &Path, out: &Path) -> Result<()> {
    let seq = load_sequence(scans, odometry)?;
    let pairs = mine_training_pairs(&seq, &cfg.mining(), &cfg.tdf())?;
    write_pairs(out, &pairs, &cfg.mining(), &cfg.tdf())?;
    println!("{} pairs → {}", pairs.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Seed of the first scene; scene `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Output directory for `ref_NNN.ply`, `query_NNN.ply` and `ground_truth.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Leave the queries unchanged apart from viewpoint, noise and dropout.
    #[arg(long)]
    pub no_object: bool,
}

pub fn synth(cfg: &PipelineConfig, a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    let mut params = cfg.scene();
    params.insert_object = !a.no_object;
    ensure_dir(&a.out)?;
    let mut gt = GroundTruth::default();
    for i in 0..a.count {
        let s = generate_scene(a.seed + i as u64, &params)?;
        save_cloud(&s.reference, a.out.join(format!("ref_{i:03}.ply")), CloudFormat::PlyAscii)?;
        save_cloud(&s.query, a.out.join(format!("query_{i:03}.ply")), CloudFormat::PlyAscii)?;
        let boxes = s.object_box(&cfg.ics())?.iter().map(BoxRecord::from_box).collect();
        gt.queries.push(QueryTruth {
            id: i as u32,
            gt_ref_id: i as u32,
            boxes,
        });
    }
    write_ground_truth(&a.out.join("ground_truth.json"), &gt)?;
    println!("{} scenes → {}", a.count, a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Output directory for `<stem>.dsc` and `<stem>.ics.json` per input.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Keep keypoints in the raw map frame.
    #[arg(long)]
    pub no_ics: bool,
    /// Take descriptors from this DSC1 file instead of computing FPFH; its
    /// keypoints must match the sampled ones. Single input only.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Clouds (`.ply`, `.xyz`) or directories of clouds.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

pub fn extract(cfg: &PipelineConfig, a: &ExtractArgs) -> Result<()> {
    let inputs = expand_inputs(&a.inputs, CLOUD_EXTS)?;
    let method = match &a.external {
        Some(p) => {
            require_file(p)?;
            if inputs.len() != 1 {
                return Err(usage("--external takes exactly one input cloud"));
            }
            Some(DescriptorMethod::External { path: p.clone() })
        }
        None => None,
    };
    ensure_dir(&a.out_dir)?;
    for p in &inputs {
        let d = describe(p, cfg, a.no_ics, method.as_ref())?;
        let source = if method.is_some() { DescriptorSource::External } else { DescriptorSource::Fpfh };
        let set = DescriptorSet::new(d.descriptors, d.keypoints, source)?;
        let out = a.out_dir.join(format!("{}.dsc", stem(p)));
        write_descriptors(&out, &set)?;
        let side = Sidecar {
            frame: d.frame,
            alignment: d.alignment.expect("clouds are always aligned"),
        };
        let mut json = serde_json::to_string_pretty(&side)?;
        json.push('\n');
        write_atomic(&sidecar_path(&out), json.as_bytes())?;
        println!("{}\t{} × {}", out.display(), set.len(), set.dim());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainVocabArgs {
    /// Output VOC1 file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_ics: bool,
    /// Descriptor files (`.dsc`), clouds, or directories of either.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

pub fn train_vocab(cfg: &PipelineConfig, a: &TrainVocabArgs) -> Result<()> {
    let mut features = Vec::new();
    for p in expand_inputs(&a.inputs, FEATURE_EXTS)? {
        features.extend(describe(&p, cfg, a.no_ics, None)?.descriptors);
    }
    let (vocab, stats) = train_vocabulary(&features, &cfg.kmeans())?;
    write_vocabulary(&a.out, &vocab)?;
    println!(
        "{} words × {} dims from {} features, {} iterations, WCSS {:.6}",
        vocab.words(),
        vocab.dim(),
        features.len(),
        stats.wcss_history.len(),
        stats.wcss_history.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// VOC1 vocabulary file.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output IDX1 file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_ics: bool,
    /// Reference descriptor files, clouds, or directories of either.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// The path recorded in the index: bare file name when the vocabulary sits
/// next to the index, absolute otherwise.
fn recorded_vocab_path(vocab: &Path, index: &Path) -> Result<PathBuf> {
    let abs = fs::canonicalize(vocab).with_context(|| format!("resolving {}", vocab.display()))?;
    let dir = index.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let same = fs::canonicalize(dir).ok().is_some_and(|d| abs.parent() == Some(d.as_path()));
    Ok(if same { PathBuf::from(abs.file_name().expect("file")) } else { abs })
}

pub fn index(cfg: &PipelineConfig, a: &IndexArgs) -> Result<()> {
    require_file(&a.vocab)?;
    let vocab = read_vocabulary(&a.vocab)?;
    let inputs = expand_inputs(&a.inputs, FEATURE_EXTS)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut index = InvertedIndex::new(vocab.clone()).with_vocab_path(recorded_vocab_path(&a.vocab, &a.out)?);
    for (i, p) in inputs.iter().enumerate() {
        let img = describe(p, cfg, a.no_ics, None)?.image(image_id(p, i), &vocab)?;
        index.add(&img).with_context(|| format!("indexing {}", p.display()))?;
    }
    write_index(&a.out, &index)?;
    println!("{} images → {}", index.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub id: u32,
    pub ranking: Vec<u32>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub db_size: usize,
    pub queries: Vec<QueryRanking>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// IDX1 index file.
    #[arg(long)]
    pub index: PathBuf,
    /// Ranking length; all images by default.
    #[arg(long)]
    pub top: Option<usize>,
    /// Write the rankings as JSON for `evaluate --rankings`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_ics: bool,
    /// Query descriptor files, clouds, or directories of either.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

fn open_index(p: &Path) -> Result<InvertedIndex> {
    require_file(p)?;
    read_index(p).with_context(|| format!("reading index {}", p.display()))
}

pub fn localize(cfg: &PipelineConfig, a: &LocalizeArgs) -> Result<()> {
    let index = open_index(&a.index)?;
    let k = a.top.unwrap_or(index.len());
    if k == 0 {
        return Err(usage("--top must be >= 1"));
    }
    let mut out = Rankings {
        db_size: index.len(),
        queries: Vec::new(),
    };
    for (i, p) in expand_inputs(&a.inputs, FEATURE_EXTS)?.iter().enumerate() {
        let q = describe(p, cfg, a.no_ics, None)?.image(image_id(p, i), index.vocabulary())?;
        let ranked = nbnn_localize(&q, &index, k, cfg.nbnn_mode)?;
        let shown: Vec<String> = ranked.iter().take(5).map(|(id, s)| format!("{id}:{s:.4}")).collect();
        println!("query {}\t{}", q.id, shown.join(" "));
        out.queries.push(QueryRanking {
            id: q.id,
            ranking: ranked.iter().map(|r| r.0).collect(),
            scores: ranked.iter().map(|r| r.1).collect(),
        });
    }
    if let Some(p) = &a.out {
        let mut json = serde_json::to_string_pretty(&out)?;
        json.push('\n');
        write_atomic(p, json.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// IDX1 index file.
    #[arg(long)]
    pub index: PathBuf,
    /// Output directory for one `<stem>.json` change report per query.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Ablation: describe queries in the raw map frame instead of the ICS.
    #[arg(long)]
    pub no_ics: bool,
    /// Overrides the configured number of reference hypotheses.
    #[arg(long)]
    pub n_hypotheses: Option<usize>,
    /// Query descriptor files, clouds, or directories of either.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

pub fn detect(cfg: &PipelineConfig, a: &DetectArgs) -> Result<()> {
    let index = open_index(&a.index)?;
    let n_hyp = a.n_hypotheses.unwrap_or(cfg.n_hypotheses);
    if n_hyp == 0 {
        return Err(usage("--n-hypotheses must be >= 1"));
    }
    let grid = grid_spec_from_points(index.images().iter().flat_map(|im| im.keypoints.iter()))?;
    ensure_dir(&a.out_dir)?;
    for (i, p) in expand_inputs(&a.inputs, FEATURE_EXTS)?.iter().enumerate() {
        let d = describe(p, cfg, a.no_ics, None)?;
        let q = d.image(image_id(p, i), index.vocabulary())?;
        let mut report = detect_changes(&q, &index, &grid, n_hyp, cfg.nbnn_mode)?;
        report.to_ics = d.to_ics();
        let out = a.out_dir.join(format!("{}.json", stem(p)));
        write_report(&out, &report)?;
        let top = report.changes.first().map(|c| c.loc).unwrap_or(0.0);
        println!("query {}\threfs {:?}\ttop LoC {top:.4}\t→ {}", q.id, report.hypotheses, out.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth JSON.
    #[arg(long)]
    pub gt: PathBuf,
    /// Change reports, or directories of them.
    #[arg(long, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Rankings written by `localize --out`.
    #[arg(long)]
    pub rankings: Option<PathBuf>,
    /// Cut-offs for top-X change accuracy.
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub top_x: Vec<usize>,
    /// Write a per-query whitespace table (gnuplot-ready).
    #[arg(long)]
    pub table: Option<PathBuf>,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    require_file(&a.gt)?;
    if a.reports.is_empty() && a.rankings.is_none() {
        return Err(usage("nothing to evaluate: give --reports and/or --rankings"));
    }
    if a.top_x.contains(&0) {
        return Err(usage("--top-x values must be >= 1"));
    }
    let gt = read_ground_truth(&a.gt)?;
    let reports: Vec<ChangeReport> = if a.reports.is_empty() {
        Vec::new()
    } else {
        expand_inputs(&a.reports, &["json"])?
            .iter()
            .map(|p| read_report(p).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<_>>()?
    };
    let mut lines = Vec::new();
    if !reports.is_empty() {
        println!("queries {}", reports.len());
        for &x in &a.top_x {
            println!("top-{x} accuracy {:.4}", top_x_accuracy(&reports, &gt, x)?);
        }
    }
    let mut ranks = std::collections::BTreeMap::new();
    if let Some(p) = &a.rankings {
        require_file(p)?;
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: Rankings = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let truth = r
            .queries
            .iter()
            .map(|q| gt.query(q.id).map(|t| t.gt_ref_id).ok_or_else(|| anyhow!("no ground truth for query {}", q.id)))
            .collect::<Result<Vec<u32>>>()?;
        let lists: Vec<Vec<u32>> = r.queries.iter().map(|q| q.ranking.clone()).collect();
        let v = anr(&lists, &truth, r.db_size)?;
        let top1 = lists.iter().zip(&truth).filter(|(l, g)| l.first() == Some(g)).count() as f64 / lists.len() as f64;
        println!("localization top-1 {top1:.4}");
        println!("ANR {v:.4} (×100: {:.2})", 100.0 * v);
        for (q, g) in r.queries.iter().zip(&truth) {
            ranks.insert(q.id, q.ranking.iter().position(|id| id == g).map(|p| p + 1));
        }
    }
    if let Some(path) = &a.table {
        lines.push(format!(
            "# id gt_rank {} top_loc",
            a.top_x.iter().map(|x| format!("hit{x}")).collect::<Vec<_>>().join(" ")
        ));
        let ids: std::collections::BTreeSet<u32> = reports.iter().map(|r| r.query_id).chain(ranks.keys().copied()).collect();
        for id in ids {
            let rank = ranks.get(&id).copied().flatten().map_or("nan".to_string(), |r| r.to_string());
            let rep = reports.iter().find(|r| r.query_id == id);
            let boxes = gt
                .query(id)
                .map(|t| t.boxes.iter().map(BoxRecord::to_box).collect::<cr3d_core::Result<Vec<_>>>())
                .transpose()?
                .unwrap_or_default();
            let hits: Vec<String> = a
                .top_x
                .iter()
                .map(|&x| rep.map_or("nan".into(), |r| (cr3d_core::eval::change_hit(r, &boxes, x) as u8).to_string()))
                .collect();
            let loc = rep.and_then(|r| r.changes.first()).map_or("nan".into(), |c| format!("{:.6}", c.loc));
            lines.push(format!("{id} {rank} {} {loc}", hits.join(" ")));
        }
        lines.push(String::new());
        write_atomic(path, lines.join("\n").as_bytes())?;
    }
    Ok(())
}
