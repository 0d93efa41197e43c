//! Point-to-point ICP, local-map fusion from scan sequences, and automatic
//! mining of descriptor training pairs.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix3, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::cloud::{apply_transform, Point3, PointCloud, RigidTransform, Vector3};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kdtree::KdTree;
use crate::par;
use crate::tdf::{compute_tdf_with, TdfConfig, TdfVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    pub max_iters: usize,
    /// Correspondences farther apart than this are rejected, meters.
    pub max_corr_dist: f64,
    /// Stop once the RMSE changes by less than this, meters.
    pub tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            max_corr_dist: 1.0,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Maps source coordinates into the target frame.
    pub transform: RigidTransform,
    pub rmse: f64,
    pub converged: bool,
    pub iterations: usize,
    /// RMSE of the correspondence set at each iteration.
    pub rmse_history: Vec<f64>,
}

/// Least-squares rigid fit `dst ≈ R src + t` (Kabsch, with reflection guard).
pub fn fit_rigid(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::CountMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::DegenerateCorrespondence { found: src.len() });
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = vt.transpose();
    let mut corr = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        corr[(2, 2)] = -1.0;
    }
    let r = v * corr * u.transpose();
    Ok(RigidTransform::from_parts_unchecked(r, cd - r * cs))
}

fn check_non_collinear(points: &[Point3], which: &str) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::DegenerateCorrespondence { found: points.len() });
    }
    let a = points[0];
    let far = points
        .iter()
        .map(|p| p - a)
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))
        .unwrap_or_else(Vector3::zeros);
    let spread = far.norm();
    let bent = points
        .iter()
        .any(|p| (p - a).cross(&far).norm() > 1e-9 * spread.max(1.0) * spread.max(1.0));
    if spread == 0.0 || !bent {
        return Err(Error::DegenerateCloud(format!("{which} cloud is collinear")));
    }
    Ok(())
}

pub fn icp_align(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult> {
    if !(params.max_corr_dist > 0.0) {
        return Err(Error::InvalidParameter("max_corr_dist must be > 0".into()));
    }
    check_non_collinear(source.points(), "source")?;
    check_non_collinear(target.points(), "target")?;
    let tree = KdTree::from_points(target.points());
    icp_align_with(source.points(), target.points(), &tree, init, params)
}

struct Matches {
    src: Vec<Point3>,
    dst: Vec<Point3>,
    rmse: f64,
}

fn correspond(
    source: &[Point3],
    target: &[Point3],
    tree: &KdTree,
    t: &RigidTransform,
    max_d: f64,
) -> Result<Matches> {
    let nn = par::map(source, |p| tree.nearest_point(&t.apply_point(p)).expect("non-empty"));
    let mut m = Matches {
        src: Vec::new(),
        dst: Vec::new(),
        rmse: 0.0,
    };
    let mut sq = 0.0;
    for (p, (id, d)) in source.iter().zip(nn) {
        if d <= max_d {
            m.src.push(*p);
            m.dst.push(target[id]);
            sq += d * d;
        }
    }
    if m.src.len() < 3 {
        return Err(Error::DegenerateCorrespondence { found: m.src.len() });
    }
    m.rmse = (sq / m.src.len() as f64).sqrt();
    Ok(m)
}

pub(crate) fn icp_align_with(
    source: &[Point3],
    target: &[Point3],
    tree: &KdTree,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult> {
    let mut current = *init;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, current);
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let m = correspond(source, target, tree, &current, params.max_corr_dist)?;
        if m.rmse < best.0 {
            best = (m.rmse, current);
        }
        let prev = history.last().copied();
        history.push(m.rmse);
        if let Some(prev) = prev {
            if (prev - m.rmse).abs() < params.tol {
                converged = true;
                break;
            }
        }
        if m.rmse == 0.0 {
            converged = true;
            break;
        }
        if iterations >= params.max_iters {
            break;
        }
        current = fit_rigid(&m.src, &m.dst)?;
        iterations += 1;
    }
    Ok(IcpResult {
        transform: best.1,
        rmse: best.0,
        converged,
        iterations,
        rmse_history: history,
    })
}

/// Scans with dead-reckoning poses, in time order.
#[derive(Debug, Clone)]
pub struct ScanSequence {
    scans: Vec<PointCloud>,
    odometry: Vec<RigidTransform>,
    timestamps: Vec<f64>,
}

impl ScanSequence {
    pub fn new(scans: Vec<PointCloud>, odometry: Vec<RigidTransform>, timestamps: Vec<f64>) -> Result<Self> {
        if scans.is_empty() {
            return Err(Error::Precondition("scan sequence is empty".into()));
        }
        if scans.len() != odometry.len() || scans.len() != timestamps.len() {
            return Err(Error::Precondition(format!(
                "{} scans, {} poses, {} timestamps",
                scans.len(),
                odometry.len(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Precondition("timestamps must be strictly increasing".into()));
        }
        if let Some(i) = scans.iter().position(PointCloud::is_empty) {
            return Err(Error::Precondition(format!("scan {i} is empty")));
        }
        Ok(Self {
            scans,
            odometry,
            timestamps,
        })
    }

    pub fn scans(&self) -> &[PointCloud] {
        &self.scans
    }

    pub fn odometry(&self) -> &[RigidTransform] {
        &self.odometry
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// Cumulative odometric path length at each scan.
    pub fn cumulative_travel(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.len());
        for (i, pose) in self.odometry.iter().enumerate() {
            if i > 0 {
                acc += (pose.translation() - self.odometry[i - 1].translation()).norm();
            }
            out.push(acc);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LocalMap {
    /// Fused scans in the frame of the segment's first scan.
    pub cloud: PointCloud,
    pub travel_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub segment_length: f64,
    pub dedup_voxel: f64,
    pub icp: IcpParams,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            segment_length: 5.0,
            dedup_voxel: 0.05,
            icp: IcpParams::default(),
        }
    }
}

/// Scan-index ranges of each local map and their travel distances.
///
/// Scan `i` belongs to segment `⌊travel(i) / L⌋`. A segment's travel runs up to
/// the first scan of the next segment; the trailing partial segment is kept
/// only if it covers at least `L / 2` or is the only one.
pub fn partition_segments(seq: &ScanSequence, segment_length: f64) -> Vec<(std::ops::Range<usize>, f64)> {
    let cum = seq.cumulative_travel();
    // absorb summation drift (e.g. ten 0.5 m steps landing at 4.999…)
    let bin = |c: f64| ((c + 1e-9) / segment_length).floor() as i64;
    let mut groups: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    for i in 1..=cum.len() {
        if i == cum.len() || bin(cum[i]) != bin(cum[start]) {
            groups.push(start..i);
            start = i;
        }
    }
    let total = *cum.last().expect("non-empty");
    let n = groups.len();
    let mut out = Vec::with_capacity(n);
    for (k, g) in groups.into_iter().enumerate() {
        let last = k + 1 == n;
        let end = if last { total } else { cum[g.end] };
        let travel = end - cum[g.start];
        if !last || n == 1 || travel + 1e-9 >= 0.5 * segment_length {
            out.push((g, travel));
        }
    }
    out
}

/// Keep the first point falling in each `voxel`-sized cell.
pub fn voxel_dedup(cloud: &PointCloud, voxel: f64) -> PointCloud {
    let mut seen = HashSet::with_capacity(cloud.len());
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = cloud.points()[i];
            let key = [
                (p.x / voxel).floor() as i64,
                (p.y / voxel).floor() as i64,
                (p.z / voxel).floor() as i64,
            ];
            seen.insert(key)
        })
        .collect();
    cloud.select(&keep)
}

pub fn build_local_map(seq: &ScanSequence, cfg: &MapConfig) -> Result<Vec<LocalMap>> {
    if !(cfg.segment_length > 0.0) || !(cfg.dedup_voxel > 0.0) {
        return Err(Error::InvalidParameter("segment_length and dedup_voxel must be > 0".into()));
    }
    let segments = partition_segments(seq, cfg.segment_length);
    par::try_map(&segments, |(range, travel)| {
        let first = range.start;
        let frame_inv = seq.odometry[first].inverse();
        let mut fused = seq.scans[first].without_normals();
        for i in range.clone().skip(1) {
            let init = frame_inv.compose(&seq.odometry[i]);
            let scan = &seq.scans[i];
            let tree = KdTree::from_points(fused.points());
            let fit = icp_align_with(scan.points(), fused.points(), &tree, &init, &cfg.icp)?;
            fused = fused.concat(&apply_transform(&scan.without_normals(), &fit.transform));
        }
        Ok(LocalMap {
            cloud: voxel_dedup(&fused, cfg.dedup_voxel),
            travel_distance: *travel,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Negative = 0,
    Positive = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub a: TdfVector,
    pub b: TdfVector,
    pub label: PairLabel,
    /// Timestamp of the anchor scan.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairMiningConfig {
    /// Seconds between the two scans of a positive pair.
    pub dt: f64,
    pub n_pairs: usize,
    /// Edge of the crop cube applied to both aligned clouds; `None` uses the
    /// TDF region size.
    pub crop_size: Option<f64>,
    /// Candidates whose ICP RMSE exceeds this are skipped, meters.
    pub max_rmse: f64,
    /// Interest points need a counterpart this close in the other scan.
    pub overlap_dist: f64,
    pub icp: IcpParams,
    pub seed: u64,
}

impl Default for PairMiningConfig {
    fn default() -> Self {
        Self {
            dt: 3.0,
            n_pairs: 1000,
            crop_size: None,
            max_rmse: 0.2,
            overlap_dist: 0.1,
            icp: IcpParams::default(),
            seed: 0,
        }
    }
}

impl PairMiningConfig {
    pub fn crop_size(&self, tdf: &TdfConfig) -> f64 {
        self.crop_size.unwrap_or(tdf.region_size)
    }
}

struct Candidate {
    anchor: usize,
    /// Scan `partner` aligned into the anchor frame.
    aligned: PointCloud,
    aligned_tree: KdTree,
}

fn crop_cube(cloud: &PointCloud, center: &Point3, edge: f64) -> PointCloud {
    let h = 0.5 * edge;
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| (cloud.points()[i] - center).amax() <= h)
        .collect();
    cloud.select(&keep)
}

fn cropped_tdf(cloud: &PointCloud, center: &Point3, crop: f64, tdf: &TdfConfig) -> TdfVector {
    let local = crop_cube(cloud, center, crop);
    compute_tdf_with(&KdTree::from_points(local.points()), center, tdf)
}

fn item_rng(seed: u64, item: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(item as u64 + 1);
    rng
}

/// Mine balanced positive/negative TDF pairs from a scan sequence.
///
/// Positives: scans at `t` and `t + dt` are related by odometry, refined by
/// ICP, and both cropped around a shared interest point. Negatives: two
/// interest points at least twice the region size apart (falling back to the
/// temporally farthest scan when no such pair exists in the candidate).
pub fn mine_training_pairs(seq: &ScanSequence, cfg: &PairMiningConfig, tdf: &TdfConfig) -> Result<Vec<TrainingPair>> {
    tdf.validate()?;
    let ts = seq.timestamps();
    if ts[ts.len() - 1] - ts[0] < cfg.dt {
        return Err(Error::Precondition(format!(
            "sequence spans {:.3} s, shorter than dt = {} s",
            ts[ts.len() - 1] - ts[0],
            cfg.dt
        )));
    }
    if cfg.n_pairs == 0 || cfg.n_pairs % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "n_pairs {} must be positive and even",
            cfg.n_pairs
        )));
    }
    let crop = cfg.crop_size(tdf);

    let starts: Vec<(usize, usize)> = (0..seq.len())
        .filter_map(|i| {
            let j = (i + 1..seq.len()).find(|&j| ts[j] >= ts[i] + cfg.dt)?;
            Some((i, j))
        })
        .collect();
    let aligned = par::map(&starts, |&(i, j)| -> Option<Candidate> {
        let init = seq.odometry[i].inverse().compose(&seq.odometry[j]);
        let anchor_tree = KdTree::from_points(seq.scans[i].points());
        let fit = icp_align_with(seq.scans[j].points(), seq.scans[i].points(), &anchor_tree, &init, &cfg.icp).ok()?;
        if fit.rmse > cfg.max_rmse {
            return None;
        }
        let aligned = apply_transform(&seq.scans[j].without_normals(), &fit.transform);
        Some(Candidate {
            anchor: i,
            aligned_tree: KdTree::from_points(aligned.points()),
            aligned,
        })
    });
    let candidates: Vec<Candidate> = aligned.into_iter().flatten().collect();
    if candidates.is_empty() {
        return Err(Error::InsufficientOverlap);
    }
    let far_scan = |anchor: usize| {
        if ts[anchor] - ts[0] > ts[ts.len() - 1] - ts[anchor] {
            0
        } else {
            ts.len() - 1
        }
    };

    let items: Vec<usize> = (0..cfg.n_pairs / 2).collect();
    let mined = par::map(&items, |&k| -> Option<[TrainingPair; 2]> {
        let c = &candidates[k % candidates.len()];
        let mut rng = item_rng(cfg.seed, k);
        let anchor = &seq.scans[c.anchor];
        let time = ts[c.anchor];

        // positive: a point of the anchor scan that the partner also saw
        let mut shared = None;
        for _ in 0..256 {
            let p = anchor.points()[rng.random_range(0..anchor.len())];
            let (_, d) = c.aligned_tree.nearest_point(&p)?;
            if d <= cfg.overlap_dist {
                shared = Some(p);
                break;
            }
        }
        let p = shared?;
        let positive = TrainingPair {
            a: cropped_tdf(anchor, &p, crop, tdf),
            b: cropped_tdf(&c.aligned, &p, crop, tdf),
            label: PairLabel::Positive,
            time,
        };

        // negative: two interest points at least two regions apart
        let min_sep = 2.0 * tdf.region_size;
        let mut far = None;
        for _ in 0..64 {
            let a = anchor.points()[rng.random_range(0..anchor.len())];
            let hits: Vec<usize> = (0..c.aligned.len())
                .filter(|&i| (c.aligned.points()[i] - a).norm() >= min_sep)
                .collect();
            if !hits.is_empty() {
                let b = c.aligned.points()[hits[rng.random_range(0..hits.len())]];
                far = Some((a, c.aligned.clone(), b));
                break;
            }
        }
        let (a, b_cloud, b) = match far {
            Some(x) => x,
            None => {
                let other = &seq.scans[far_scan(c.anchor)];
                let a = anchor.points()[rng.random_range(0..anchor.len())];
                let b = other.points()[rng.random_range(0..other.len())];
                (a, other.without_normals(), b)
            }
        };
        let negative = TrainingPair {
            a: cropped_tdf(anchor, &a, crop, tdf),
            b: cropped_tdf(&b_cloud, &b, crop, tdf),
            label: PairLabel::Negative,
            time,
        };
        Some([positive, negative])
    });
    let mut pairs: Vec<(usize, TrainingPair)> = Vec::with_capacity(cfg.n_pairs);
    for (k, m) in mined.into_iter().enumerate() {
        let [pos, neg] = m.ok_or(Error::InsufficientOverlap)?;
        pairs.push((2 * k, pos));
        pairs.push((2 * k + 1, neg));
    }
    pairs.sort_by(|x, y| x.1.time.total_cmp(&y.1.time).then(x.0.cmp(&y.0)));
    Ok(pairs.into_iter().map(|(_, p)| p).collect())
}

const TPR_MAGIC: &[u8; 4] = b"TPR1";

pub fn encode_pairs(pairs: &[TrainingPair]) -> Result<Vec<u8>> {
    let d = pairs.first().map_or(0, |p| p.a.grid_dim);
    let per = d.pow(3);
    let mut w = ByteWriter::with_magic(TPR_MAGIC, 8 + pairs.len() * (1 + 8 * per));
    w.u32(binio::to_u32(pairs.len(), "pair count")?);
    w.u32(binio::to_u32(d, "grid dim")?);
    for p in pairs {
        if p.a.grid_dim != d || p.b.grid_dim != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p.a.grid_dim.max(p.b.grid_dim),
            });
        }
        w.u8(p.label as u8);
        for v in p.a.values.iter().chain(&p.b.values) {
            w.f32(*v as f32);
        }
    }
    Ok(w.finish())
}

/// Decoded pair file: `(label, a, b)` with f32 payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub label: PairLabel,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

pub fn decode_pairs(bytes: &[u8]) -> Result<(usize, Vec<PairRecord>)> {
    let mut r = ByteReader::new("TPR1", TPR_MAGIC, bytes)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let per = d.checked_pow(3).ok_or_else(|| r.err("grid dim overflow"))?;
    r.require(n.saturating_mul(1 + 8 * per))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let label = match r.u8()? {
            0 => PairLabel::Negative,
            1 => PairLabel::Positive,
            other => return Err(r.err(format!("bad label byte {other}"))),
        };
        let a = (0..per).map(|_| r.f32()).collect::<Result<_>>()?;
        let b = (0..per).map(|_| r.f32()).collect::<Result<_>>()?;
        out.push(PairRecord { label, a, b });
    }
    r.expect_end()?;
    Ok((d, out))
}

/// Sidecar metadata written next to a pair file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFileMeta {
    pub crop_size: f64,
    pub region_size: f64,
    pub grid_dim: usize,
    pub truncation: f64,
    pub dt: f64,
    pub seed: u64,
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair], cfg: &PairMiningConfig, tdf: &TdfConfig) -> Result<()> {
    write_atomic(path, &encode_pairs(pairs)?)?;
    let meta = PairFileMeta {
        crop_size: cfg.crop_size(tdf),
        region_size: tdf.region_size,
        grid_dim: tdf.grid_dim,
        truncation: tdf.truncation(),
        dt: cfg.dt,
        seed: cfg.seed,
    };
    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".meta.json");
    write_atomic(Path::new(&meta_path), serde_json::to_string_pretty(&meta)?.as_bytes())
}

pub fn read_pairs(path: &Path) -> Result<(usize, Vec<PairRecord>)> {
    decode_pairs(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{corridor_sequence, CorridorParams};
    use rand_distr::{Distribution, Normal};

    fn structured_cloud(seed: u64) -> PointCloud {
        // three non-parallel planar patches plus a box, asymmetric
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for _ in 0..600 {
            let (u, v) = (rng.random_range(0.0..4.0), rng.random_range(0.0..2.0));
            pts.push(Point3::new(u, 0.0, v));
            pts.push(Point3::new(0.0, u * 0.7, v));
            pts.push(Point3::new(u * 0.9, v * 1.3, 0.0));
        }
        for _ in 0..300 {
            let (u, v) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.8));
            pts.push(Point3::new(2.5 + u, 1.0, v));
            pts.push(Point3::new(2.5, 1.0 + u * 0.5, v));
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn kabsch_recovers_exact_transform() {
        let c = structured_cloud(1);
        let t = RigidTransform::from_axis_angle(Vector3::new(0.1, -0.2, 0.4), Vector3::new(1.0, 2.0, -0.5));
        let moved: Vec<Point3> = c.points().iter().map(|p| t.apply_point(p)).collect();
        let fit = fit_rigid(c.points(), &moved).unwrap();
        assert!((fit.rotation() - t.rotation()).amax() < 1e-12);
        assert!((fit.translation() - t.translation()).amax() < 1e-12);
        assert!(RigidTransform::new(*fit.rotation(), *fit.translation()).is_ok());
    }

    #[test]
    fn self_registration_is_identity() {
        let c = structured_cloud(2);
        let r = icp_align(&c, &c, &RigidTransform::identity(), &IcpParams::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.rmse, 0.0);
        assert!((r.transform.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(r.transform.translation().amax() < 1e-12);
    }

    #[test]
    fn recovers_small_yaw_and_shift() {
        let src = structured_cloud(3);
        let truth = RigidTransform::from_yaw(5f64.to_radians(), Vector3::new(0.1, 0.0, 0.0));
        let tgt = apply_transform(&src, &truth);
        let params = IcpParams {
            tol: 1e-12,
            max_iters: 200,
            ..Default::default()
        };
        let r = icp_align(&src, &tgt, &RigidTransform::identity(), &params).unwrap();
        let err = truth.inverse().compose(&r.transform);
        assert!(err.angle() < 1e-3, "angle {}", err.angle());
        assert!(err.translation().norm() < 1e-3);
        for w in r.rmse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "rmse rose: {:?}", w);
        }
    }

    #[test]
    fn two_points_are_degenerate() {
        let two = PointCloud::new(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let c = structured_cloud(4);
        assert!(matches!(
            icp_align(&two, &c, &RigidTransform::identity(), &IcpParams::default()),
            Err(Error::DegenerateCorrespondence { found: 2 })
        ));
    }

    #[test]
    fn far_apart_clouds_have_no_correspondences() {
        let c = structured_cloud(5);
        let far = apply_transform(&c, &RigidTransform::translation_only(Vector3::new(100.0, 0.0, 0.0)));
        assert!(matches!(
            icp_align(&c, &far, &RigidTransform::identity(), &IcpParams::default()),
            Err(Error::DegenerateCorrespondence { found: 0 })
        ));
    }

    #[test]
    fn left_invariant_to_target_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let src = structured_cloud(6);
        let tgt = apply_transform(&src, &RigidTransform::from_yaw(0.05, Vector3::new(0.05, -0.03, 0.0)));
        let params = IcpParams::default();
        let base = icp_align(&src, &tgt, &RigidTransform::identity(), &params).unwrap();
        for _ in 0..5 {
            let aa = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0));
            let tr = Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0));
            let t = RigidTransform::from_axis_angle(aa, tr);
            let moved = icp_align(&src, &apply_transform(&tgt, &t), &t, &params).unwrap();
            let want = t.compose(&base.transform);
            assert!((moved.transform.rotation() - want.rotation()).amax() < 1e-6);
            assert!((moved.transform.translation() - want.translation()).amax() < 1e-6);
        }
    }

    #[test]
    fn noisy_rmse_history_non_increasing() {
        let src = structured_cloud(7);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = RigidTransform::from_yaw(0.08, Vector3::new(0.2, 0.1, 0.0));
        let tgt = PointCloud::new(
            src.points()
                .iter()
                .map(|p| truth.apply_point(p) + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
                .collect(),
        )
        .unwrap();
        let r = icp_align(&src, &tgt, &RigidTransform::identity(), &IcpParams::default()).unwrap();
        for w in r.rmse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn segment_partition_arithmetic() {
        let seq = corridor_sequence(&CorridorParams {
            n_scans: 11,
            spacing: 1.0,
            ..Default::default()
        });
        let segs = partition_segments(&seq, 5.0);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].0, 0..5);
        assert_eq!(segs[1].0, 5..10);
        assert!((segs[0].1 - 5.0).abs() < 1e-9 && (segs[1].1 - 5.0).abs() < 1e-9);

        let seq = corridor_sequence(&CorridorParams {
            n_scans: 14,
            spacing: 1.0,
            ..Default::default()
        });
        let segs = partition_segments(&seq, 5.0);
        assert_eq!(segs.len(), 3, "3 m tail is kept");
        assert!((segs[2].1 - 3.0).abs() < 1e-9);
    }

    #[test]
    fn single_stationary_scan() {
        let seq = corridor_sequence(&CorridorParams {
            n_scans: 1,
            ..Default::default()
        });
        let maps = build_local_map(&seq, &MapConfig::default()).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].travel_distance, 0.0);
        let scan = &seq.scans()[0];
        assert_eq!(maps[0].cloud, voxel_dedup(scan, 0.05));
    }

    #[test]
    fn eleven_scans_make_two_maps_matching_the_world() {
        let params = CorridorParams {
            n_scans: 11,
            spacing: 1.0,
            odometry_noise: 0.03,
            ..Default::default()
        };
        let seq = corridor_sequence(&params);
        let maps = build_local_map(&seq, &MapConfig::default()).unwrap();
        assert_eq!(maps.len(), 2);
        // ground-truth union of the first segment's scans, first-scan frame
        let truth = crate::synth::corridor_union(&params, 0..5);
        let tree = KdTree::from_points(truth.points());
        let fused = &maps[0].cloud;
        let near = fused
            .points()
            .iter()
            .filter(|p| tree.nearest_point(p).unwrap().1 <= 0.05)
            .count();
        assert!(near as f64 >= 0.99 * fused.len() as f64, "{near}/{}", fused.len());
    }

    fn small_tdf() -> TdfConfig {
        TdfConfig {
            grid_dim: 8,
            region_size: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn mined_pairs_separate_and_reproduce() {
        let seq = corridor_sequence(&CorridorParams {
            n_scans: 12,
            spacing: 0.5,
            dt: 0.5,
            ..Default::default()
        });
        let cfg = PairMiningConfig {
            n_pairs: 16,
            seed: 9,
            ..Default::default()
        };
        let pairs = mine_training_pairs(&seq, &cfg, &small_tdf()).unwrap();
        assert_eq!(pairs.len(), 16);
        let pos: Vec<f64> = pairs.iter().filter(|p| p.label == PairLabel::Positive).map(|p| p.a.l2_distance(&p.b)).collect();
        let neg: Vec<f64> = pairs.iter().filter(|p| p.label == PairLabel::Negative).map(|p| p.a.l2_distance(&p.b)).collect();
        assert_eq!(pos.len(), neg.len());
        let neg_mean = neg.iter().sum::<f64>() / neg.len() as f64;
        assert!(pos.iter().all(|d| *d < neg_mean), "pos {pos:?} neg mean {neg_mean}");
        assert!(pairs.windows(2).all(|w| w[0].time <= w[1].time));

        let again = mine_training_pairs(&seq, &cfg, &small_tdf()).unwrap();
        assert_eq!(encode_pairs(&pairs).unwrap(), encode_pairs(&again).unwrap());
    }

    #[test]
    fn short_sequence_is_rejected() {
        let seq = corridor_sequence(&CorridorParams {
            n_scans: 3,
            dt: 0.5,
            ..Default::default()
        });
        let r = mine_training_pairs(&seq, &PairMiningConfig::default(), &small_tdf());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn pair_file_round_trip() {
        let seq = corridor_sequence(&CorridorParams {
            n_scans: 10,
            spacing: 0.5,
            dt: 0.5,
            ..Default::default()
        });
        let cfg = PairMiningConfig {
            n_pairs: 4,
            ..Default::default()
        };
        let pairs = mine_training_pairs(&seq, &cfg, &small_tdf()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tpr");
        write_pairs(&path, &pairs, &cfg, &small_tdf()).unwrap();
        let (d, recs) = read_pairs(&path).unwrap();
        assert_eq!(d, 8);
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[0].a.len(), 512);
        for (p, r) in pairs.iter().zip(&recs) {
            assert_eq!(p.label, r.label);
            assert!(p.a.values.iter().zip(&r.a).all(|(x, y)| *x as f32 == *y));
        }
        let meta: PairFileMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("pairs.tpr.meta.json")).unwrap()).unwrap();
        assert_eq!(meta.crop_size, 2.0);
        let bytes = encode_pairs(&pairs).unwrap();
        assert!(decode_pairs(&bytes[..bytes.len() - 1]).is_err());
    }
}
