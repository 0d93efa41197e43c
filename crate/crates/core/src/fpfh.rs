//! Fast Point Feature Histograms and the descriptor exchange format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::cloud::{Point3, PointCloud, Vector3};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::kdtree::KdTree;
use crate::par;

pub const FPFH_BINS: usize = 11;
pub const FPFH_DIM: usize = 3 * FPFH_BINS;

/// Cosines this close count as equal when choosing the pair's source point.
const SOURCE_TIE_TOL: f64 = 1e-9;
/// External keypoints may differ from ours by float32 rounding only.
const KEYPOINT_TOL: f64 = 1e-3;

pub type Descriptor = Vec<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorSource {
    Fpfh,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorMethod {
    Fpfh { radius: f64 },
    External { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub descriptors: Vec<Descriptor>,
    pub keypoints: Vec<Point3>,
    pub source: DescriptorSource,
    /// Keypoints whose descriptor is the all-zero placeholder.
    pub isolated: Vec<bool>,
}

impl DescriptorSet {
    pub fn new(descriptors: Vec<Descriptor>, keypoints: Vec<Point3>, source: DescriptorSource) -> Result<Self> {
        if descriptors.len() != keypoints.len() {
            return Err(Error::CountMismatch {
                expected: keypoints.len(),
                got: descriptors.len(),
            });
        }
        if let Some(first) = descriptors.first() {
            let dim = first.len();
            if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: bad.len(),
                });
            }
        }
        if descriptors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("descriptor values must be finite".into()));
        }
        let isolated = descriptors.iter().map(|d| d.iter().all(|v| *v == 0.0)).collect();
        Ok(Self {
            descriptors,
            keypoints,
            source,
            isolated,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Descriptor dimension; zero for an empty set.
    pub fn dim(&self) -> usize {
        self.descriptors.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fpfh {
    pub values: [f64; FPFH_DIM],
    /// Fewer than two neighbors within the radius (values all zero).
    pub isolated: bool,
}

impl Fpfh {
    fn isolated() -> Self {
        Self {
            values: [0.0; FPFH_DIM],
            isolated: true,
        }
    }

    pub fn to_descriptor(&self) -> Descriptor {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Pair features `(α, φ, θ)` of two oriented points in the Darboux frame of
/// the point whose normal makes the smaller angle with the connecting line.
/// `None` when the points coincide.
pub(crate) fn pair_features(p1: &Point3, n1: &Vector3, p2: &Point3, n2: &Vector3) -> Option<(f64, f64, f64)> {
    let mut d = p2 - p1;
    let len = d.norm();
    if len == 0.0 {
        return None;
    }
    let a1 = n1.dot(&d) / len;
    let a2 = n2.dot(&d) / len;
    // acos is decreasing, so the larger |cosine| is the smaller angle; on a
    // tie take the frame with the larger third feature, so round-off in the
    // comparison cannot flip it between -1 and +1
    let (c1, c2) = (a1.abs().min(1.0), a2.abs().min(1.0));
    let swap = if (c1 - c2).abs() <= SOURCE_TIE_TOL { -a2 > a1 } else { c1 < c2 };
    let (u, n_other, f3) = if swap {
        d = -d;
        (*n2, *n1, -a2)
    } else {
        (*n1, *n2, a1)
    };
    let v = d.cross(&u);
    let vn = v.norm();
    if vn == 0.0 {
        // connecting line parallel to the normal: frame undefined, clamp to 0
        return Some((0.0, 0.0, f3));
    }
    let v = v / vn;
    let w = u.cross(&v);
    let f2 = v.dot(&n_other);
    let f1 = w.dot(&n_other).atan2(u.dot(&n_other));
    Some((f1, f2, f3))
}

#[inline]
fn bin(x: f64) -> usize {
    ((FPFH_BINS as f64 * x).floor().max(0.0) as usize).min(FPFH_BINS - 1)
}

/// Simplified histogram of a point against its oriented neighbors; each block
/// sums to 1 unless no pair was usable.
fn spfh(p: &Point3, n: &Vector3, cloud: &PointCloud, neighbors: &[(usize, f64)]) -> [f64; FPFH_DIM] {
    let mut h = [0.0; FPFH_DIM];
    let mut count = 0usize;
    for &(j, _) in neighbors {
        let Some(nj) = cloud.normal(j) else { continue };
        let Some((f1, f2, f3)) = pair_features(p, n, &cloud.points()[j], &nj) else {
            continue;
        };
        h[bin((f1 + std::f64::consts::PI) / std::f64::consts::TAU)] += 1.0;
        h[FPFH_BINS + bin((f2 + 1.0) * 0.5)] += 1.0;
        h[2 * FPFH_BINS + bin((f3 + 1.0) * 0.5)] += 1.0;
        count += 1;
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        h.iter_mut().for_each(|v| *v *= inv);
    }
    h
}

fn normalize_blocks(h: &mut [f64; FPFH_DIM]) {
    for block in h.chunks_mut(FPFH_BINS) {
        let s: f64 = block.iter().sum();
        if s > 0.0 {
            block.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Radius neighbors excluding points at the query position itself.
fn neighbors(tree: &KdTree, p: &Point3, radius: f64) -> Vec<(usize, f64)> {
    let mut nb = tree.within_radius_point(p, radius);
    nb.retain(|&(_, d)| d > 0.0);
    nb
}

fn require_normals(cloud: &PointCloud, radius: f64) -> Result<()> {
    if cloud.normals().is_none() {
        return Err(Error::Precondition("FPFH needs a cloud with normals".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("FPFH radius {radius} must be > 0")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(())
}

/// Keypoint normal: that of the nearest cloud point.
fn keypoint_normal(cloud: &PointCloud, tree: &KdTree, kp: &Point3) -> Option<Vector3> {
    let (id, _) = tree.nearest_point(kp)?;
    cloud.normal(id)
}

fn combine(
    cloud: &PointCloud,
    kp: &Point3,
    n: Option<Vector3>,
    nb: &[(usize, f64)],
    spfh_of: impl Fn(usize) -> [f64; FPFH_DIM],
) -> Fpfh {
    let Some(n) = n else { return Fpfh::isolated() };
    if nb.len() < 2 {
        return Fpfh::isolated();
    }
    let mut h = spfh(kp, &n, cloud, nb);
    let mut acc = [0.0; FPFH_DIM];
    let mut k = 0usize;
    // neighbor SPFHs weighted by inverse squared distance, as in PCL
    for &(j, d2) in nb {
        if cloud.normal(j).is_none() {
            continue;
        }
        let s = spfh_of(j);
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v / d2;
        }
        k += 1;
    }
    if k > 0 {
        for (x, a) in h.iter_mut().zip(acc) {
            *x += a / k as f64;
        }
    }
    normalize_blocks(&mut h);
    Fpfh { values: h, isolated: false }
}

pub fn fpfh_descriptor(cloud: &PointCloud, keypoint: &Point3, radius: f64) -> Result<Fpfh> {
    require_normals(cloud, radius)?;
    let tree = KdTree::from_points(cloud.points());
    let nb = neighbors(&tree, keypoint, radius);
    let n = keypoint_normal(cloud, &tree, keypoint);
    Ok(combine(cloud, keypoint, n, &nb, |j| {
        let pj = cloud.points()[j];
        spfh(&pj, &cloud.normal(j).expect("checked"), cloud, &neighbors(&tree, &pj, radius))
    }))
}

/// FPFH at many keypoints, sharing neighbor SPFHs across keypoints.
pub fn fpfh_batch(cloud: &PointCloud, keypoints: &[Point3], radius: f64) -> Result<Vec<Fpfh>> {
    require_normals(cloud, radius)?;
    let tree = KdTree::from_points(cloud.points());
    let hoods = par::map(keypoints, |kp| neighbors(&tree, kp, radius));
    let mut needed: Vec<usize> = hoods
        .iter()
        .filter(|nb| nb.len() >= 2)
        .flatten()
        .map(|&(j, _)| j)
        .filter(|&j| cloud.normal(j).is_some())
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let table = par::map(&needed, |&j| {
        let pj = cloud.points()[j];
        spfh(&pj, &cloud.normal(j).expect("filtered"), cloud, &neighbors(&tree, &pj, radius))
    });
    let lookup = |j: usize| table[needed.binary_search(&j).expect("precomputed")];
    let idx: Vec<usize> = (0..keypoints.len()).collect();
    Ok(par::map(&idx, |&i| {
        let kp = &keypoints[i];
        combine(cloud, kp, keypoint_normal(cloud, &tree, kp), &hoods[i], lookup)
    }))
}

/// One descriptor per keypoint, in keypoint order.
pub fn extract_descriptors(cloud: &PointCloud, keypoints: &[Point3], method: &DescriptorMethod) -> Result<DescriptorSet> {
    match method {
        DescriptorMethod::Fpfh { radius } => {
            let f = fpfh_batch(cloud, keypoints, *radius)?;
            let isolated = f.iter().map(|x| x.isolated).collect();
            Ok(DescriptorSet {
                descriptors: f.iter().map(Fpfh::to_descriptor).collect(),
                keypoints: keypoints.to_vec(),
                source: DescriptorSource::Fpfh,
                isolated,
            })
        }
        DescriptorMethod::External { path } => {
            let ext = read_descriptors(path)?;
            if ext.len() != keypoints.len() {
                return Err(Error::CountMismatch {
                    expected: keypoints.len(),
                    got: ext.len(),
                });
            }
            for (k, (a, b)) in keypoints.iter().zip(&ext.keypoints).enumerate() {
                if (a - b).amax() > KEYPOINT_TOL * a.coords.amax().max(1.0) {
                    return Err(Error::Format {
                        format: "DSC1",
                        msg: format!("keypoint {k} is {b:?}, expected {a:?}"),
                    });
                }
            }
            DescriptorSet::new(ext.descriptors, keypoints.to_vec(), DescriptorSource::External)
        }
    }
}

pub fn encode_descriptors(set: &DescriptorSet) -> Result<Vec<u8>> {
    let n = set.len();
    let d = set.dim();
    let mut w = ByteWriter::with_magic(b"DSC1", 8 + 4 * n * (d + 3));
    w.u32(binio::to_u32(n, "descriptor count")?);
    w.u32(binio::to_u32(d, "descriptor dimension")?);
    for desc in &set.descriptors {
        desc.iter().for_each(|&v| w.f32(v));
    }
    for p in &set.keypoints {
        p.iter().for_each(|&c| w.f32(c as f32));
    }
    Ok(w.finish())
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<DescriptorSet> {
    let mut r = ByteReader::new("DSC1", b"DSC1", bytes)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let floats = n
        .checked_mul(d + 3)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| r.err("size overflow"))?;
    r.require(floats)?;
    let mut descriptors = Vec::with_capacity(n);
    for _ in 0..n {
        descriptors.push((0..d).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?);
    }
    let mut keypoints = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y, z) = (r.f32()?, r.f32()?, r.f32()?);
        keypoints.push(Point3::new(x as f64, y as f64, z as f64));
    }
    r.expect_end()?;
    if keypoints.iter().any(|p| !crate::cloud::is_finite(p)) {
        return Err(r.err("non-finite keypoint"));
    }
    DescriptorSet::new(descriptors, keypoints, DescriptorSource::External)
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<()> {
    write_atomic(path, &encode_descriptors(set)?)
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    decode_descriptors(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{apply_transform, RigidTransform};
    use crate::normals::estimate_normals;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Saddle-shaped height field with analytic normals.
    fn saddle(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        for _ in 0..n {
            let (x, y): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let z = 0.3 * (x * x - y * y) + 0.2 * x * y;
            pts.push(Point3::new(x, y, z));
            let g = Vector3::new(-(0.6 * x + 0.2 * y), -(-0.6 * y + 0.2 * x), 1.0);
            nrm.push(g.normalize());
        }
        PointCloud::with_normals(pts, Some(nrm)).unwrap()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        RigidTransform::from_axis_angle(axis.normalize() * angle, t)
    }

    fn assert_blocks(f: &Fpfh) {
        for block in f.values.chunks(FPFH_BINS) {
            let s: f64 = block.iter().sum();
            assert!((s - 1.0).abs() < 1e-9 || block.iter().all(|v| *v == 0.0), "block sum {s}");
        }
    }

    #[test]
    fn isolated_keypoint_is_flagged() {
        let c = PointCloud::with_normals(
            vec![Point3::origin(), Point3::new(0.1, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)],
            Some(vec![Vector3::z(); 3]),
        )
        .unwrap();
        let f = fpfh_descriptor(&c, &Point3::origin(), 0.5).unwrap();
        assert!(f.isolated);
        assert!(f.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn requires_normals_and_radius() {
        let c = PointCloud::new(vec![Point3::origin()]).unwrap();
        assert!(fpfh_descriptor(&c, &Point3::origin(), 1.0).is_err());
        let c = saddle(50, 1);
        assert!(fpfh_descriptor(&c, &Point3::origin(), 0.0).is_err());
    }

    #[test]
    fn blocks_are_normalized() {
        let c = saddle(2000, 2);
        let kps: Vec<Point3> = c.points()[..100].to_vec();
        for f in fpfh_batch(&c, &kps, 0.5).unwrap() {
            assert!(!f.isolated);
            assert_blocks(&f);
        }
    }

    #[test]
    fn plane_concentrates_in_single_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..500)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let c = PointCloud::with_normals(pts, Some(vec![Vector3::z(); 500])).unwrap();
        let f = fpfh_descriptor(&c, &Point3::origin(), 0.5).unwrap();
        // parallel normals: α = 0, φ = 0, θ = 0 → middle bins
        assert!((f.values[5] - 1.0).abs() < 1e-12);
        assert!((f.values[FPFH_BINS + 5] - 1.0).abs() < 1e-12);
        assert!((f.values[2 * FPFH_BINS + 5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_matches_single() {
        let c = saddle(1500, 4);
        let kps = vec![c.points()[3], c.points()[77], Point3::new(0.05, -0.3, 0.1)];
        let batch = fpfh_batch(&c, &kps, 0.6).unwrap();
        for (kp, b) in kps.iter().zip(&batch) {
            assert_eq!(*b, fpfh_descriptor(&c, kp, 0.6).unwrap());
        }
    }

    #[test]
    fn source_tie_is_rotation_stable() {
        // normals along the connecting line: both points are valid sources
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = random_transform(&mut rng);
            let n = t.apply_vector(&Vector3::z());
            let (p1, p2) = (t.apply_point(&Point3::origin()), t.apply_point(&Point3::new(0.0, 0.0, 0.3)));
            let (_, _, f3) = pair_features(&p1, &n, &p2, &n).unwrap();
            let (_, _, g3) = pair_features(&p2, &n, &p1, &n).unwrap();
            assert!(f3 > 1.0 - 1e-9 && g3 > 1.0 - 1e-9, "{f3} {g3}");
        }
    }

    #[test]
    fn rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = saddle(3000, 6);
        let kps: Vec<Point3> = c.points()[..20].to_vec();
        let base = fpfh_batch(&c, &kps, 0.5).unwrap();
        for _ in 0..5 {
            let t = random_transform(&mut rng);
            let moved = apply_transform(&c, &t);
            let mkps: Vec<Point3> = kps.iter().map(|p| t.apply_point(p)).collect();
            let other = fpfh_batch(&moved, &mkps, 0.5).unwrap();
            for (a, b) in base.iter().zip(&other) {
                let l2 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!(l2 < 1e-6, "{l2}");
            }
        }
    }

    #[test]
    fn estimated_normals_feed_fpfh() {
        let c = saddle(3000, 7).without_normals();
        let c = estimate_normals(&c, 0.3).unwrap();
        let kps: Vec<Point3> = c.points()[..500].to_vec();
        let set = extract_descriptors(&c, &kps, &DescriptorMethod::Fpfh { radius: 0.5 }).unwrap();
        assert_eq!(set.len(), 500);
        assert_eq!(set.dim(), FPFH_DIM);
        assert_eq!(set.source, DescriptorSource::Fpfh);
        let again = extract_descriptors(&c, &kps, &DescriptorMethod::Fpfh { radius: 0.5 }).unwrap();
        assert_eq!(set, again);
    }

    #[test]
    fn pair_features_swap_and_degenerate() {
        let n = Vector3::z();
        assert_eq!(pair_features(&Point3::origin(), &n, &Point3::origin(), &n), None);
        let (f1, f2, f3) = pair_features(&Point3::origin(), &n, &Point3::new(0.0, 0.0, 1.0), &n).unwrap();
        assert_eq!((f1, f2), (0.0, 0.0));
        assert!((f3.abs() - 1.0).abs() < 1e-12);
        // swapping the two oriented points leaves the features unchanged
        let (p1, n1) = (Point3::new(0.1, 0.2, 0.0), Vector3::new(0.2, 0.1, 1.0).normalize());
        let (p2, n2) = (Point3::new(0.5, -0.1, 0.2), Vector3::new(-0.3, 0.4, 1.0).normalize());
        let a = pair_features(&p1, &n1, &p2, &n2).unwrap();
        let b = pair_features(&p2, &n2, &p1, &n1).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12);
    }

    fn random_set(n: usize, d: usize, seed: u64) -> DescriptorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let desc = (0..n).map(|_| (0..d).map(|_| rng.random::<f32>()).collect()).collect();
        let kps = (0..n)
            .map(|_| Point3::new(rng.random::<f32>() as f64, rng.random::<f32>() as f64, rng.random::<f32>() as f64))
            .collect();
        DescriptorSet::new(desc, kps, DescriptorSource::External).unwrap()
    }

    #[test]
    fn dsc1_round_trip_is_bit_exact() {
        let set = random_set(40, 512, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dsc");
        write_descriptors(&path, &set).unwrap();
        let back = read_descriptors(&path).unwrap();
        for (a, b) in set.descriptors.iter().zip(&back.descriptors) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.keypoints, set.keypoints);
        let bytes = encode_descriptors(&set).unwrap();
        assert_eq!(&bytes[..4], b"DSC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 40);
        assert_eq!(bytes.len(), 12 + 4 * 40 * (512 + 3));
        assert!(decode_descriptors(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_descriptors(&extra).is_err());
    }

    #[test]
    fn external_descriptors_checked_against_keypoints() {
        let set = random_set(10, 16, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dsc");
        write_descriptors(&path, &set).unwrap();
        let cloud = PointCloud::new(set.keypoints.clone()).unwrap();
        let method = DescriptorMethod::External { path };
        let got = extract_descriptors(&cloud, &set.keypoints, &method).unwrap();
        assert_eq!(got.descriptors, set.descriptors);
        let r = extract_descriptors(&cloud, &set.keypoints[..9], &method);
        assert!(matches!(r, Err(Error::CountMismatch { expected: 9, got: 10 })));
    }
}
