//! Keypoint sampling and truncated-distance-function voxelization of local
//! interest regions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdfConfig {
    pub n_keypoints: usize,
    /// Edge length of the cubic interest region, meters.
    pub region_size: f64,
    /// Voxels per edge.
    pub grid_dim: usize,
    /// Truncation distance in meters; `None` means three voxel widths.
    pub truncation: Option<f64>,
    pub seed: u64,
}

impl Default for TdfConfig {
    fn default() -> Self {
        Self {
            n_keypoints: 500,
            region_size: 9.0,
            grid_dim: 30,
            truncation: None,
            seed: 0,
        }
    }
}

impl TdfConfig {
    pub fn voxel_size(&self) -> f64 {
        self.region_size / self.grid_dim as f64
    }

    pub fn truncation(&self) -> f64 {
        self.truncation.unwrap_or(3.0 * self.voxel_size())
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid_dim {} must be at least 2",
                self.grid_dim
            )));
        }
        if !(self.region_size > 0.0) {
            return Err(Error::InvalidParameter("region_size must be > 0".into()));
        }
        if !(self.truncation() > 0.0) {
            return Err(Error::InvalidParameter("truncation must be > 0".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid_dim.pow(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdfVector {
    /// `grid_dim³` values in [0, 1], index `(ix·d + iy)·d + iz`.
    pub values: Vec<f64>,
    pub center: Point3,
    pub grid_dim: usize,
    /// Set when no surface lies within reach of the region.
    pub empty: bool,
}

impl TdfVector {
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        let d = self.grid_dim;
        self.values[(ix * d + iy) * d + iz]
    }

    pub fn l2_distance(&self, other: &TdfVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Indices of up to `cfg.n_keypoints` cloud points drawn uniformly without
/// replacement; every index (in order) when the cloud is smaller.
pub fn sample_keypoint_indices(n_points: usize, cfg: &TdfConfig) -> Vec<usize> {
    if n_points <= cfg.n_keypoints {
        return (0..n_points).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rand::seq::index::sample(&mut rng, n_points, cfg.n_keypoints).into_vec()
}

pub fn sample_keypoints(cloud: &PointCloud, cfg: &TdfConfig) -> Result<Vec<Point3>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(sample_keypoint_indices(cloud.len(), cfg)
        .into_iter()
        .map(|i| cloud.points()[i])
        .collect())
}

/// Voxel-center offset from the region center along one axis.
#[inline]
fn voxel_offset(i: usize, cfg: &TdfConfig) -> f64 {
    -0.5 * cfg.region_size + (i as f64 + 0.5) * cfg.voxel_size()
}

pub fn compute_tdf(cloud: &PointCloud, center: &Point3, cfg: &TdfConfig) -> Result<TdfVector> {
    cfg.validate()?;
    let tree = KdTree::from_points(cloud.points());
    Ok(compute_tdf_with(&tree, center, cfg))
}

/// TDF against a prebuilt index; voxels are evaluated sequentially so callers
/// can parallelize over keypoints.
pub fn compute_tdf_with(tree: &KdTree, center: &Point3, cfg: &TdfConfig) -> TdfVector {
    let d = cfg.grid_dim;
    let trunc = cfg.truncation();
    let mut values = vec![0.0; d * d * d];
    if tree.is_empty() {
        return TdfVector {
            values,
            center: *center,
            grid_dim: d,
            empty: true,
        };
    }
    let offsets: Vec<f64> = (0..d).map(|i| voxel_offset(i, cfg)).collect();
    let mut any = false;
    for (ix, ox) in offsets.iter().enumerate() {
        for (iy, oy) in offsets.iter().enumerate() {
            for (iz, oz) in offsets.iter().enumerate() {
                let c = [center.x + ox, center.y + oy, center.z + oz];
                let (_, dist) = tree.nearest(&c).expect("non-empty tree");
                let v = (1.0 - dist / trunc).max(0.0);
                if v > 0.0 {
                    any = true;
                }
                values[(ix * d + iy) * d + iz] = v;
            }
        }
    }
    TdfVector {
        values,
        center: *center,
        grid_dim: d,
        empty: !any,
    }
}

/// TDF vectors for many centers, in order.
pub fn compute_tdf_batch(cloud: &PointCloud, centers: &[Point3], cfg: &TdfConfig) -> Result<Vec<TdfVector>> {
    cfg.validate()?;
    let tree = KdTree::from_points(cloud.points());
    Ok(par::map(centers, |c| compute_tdf_with(&tree, c, cfg)))
}
