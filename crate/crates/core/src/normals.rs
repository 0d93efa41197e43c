use nalgebra::{Matrix3, SymmetricEigen};

use crate::cloud::{PointCloud, Vector3};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::par;

/// z and x components this close to zero count as zero in the sign
/// convention, so sensor noise on vertical surfaces cannot flip normals.
pub const SIGN_TOL: f64 = 0.1;

/// Minimum neighbourhood size (including the point itself).
pub const MIN_NORMAL_NEIGHBORS: usize = 3;

/// Per-point normals from the covariance of the radius neighbourhood.
///
/// The normal is the eigenvector of the smallest eigenvalue, oriented so that
/// z ≥ 0, falling back to x ≥ 0 and then y ≥ 0 when the leading component is
/// within `SIGN_TOL` of zero. Points with fewer than three neighbours get the zero vector.
pub fn estimate_normals(cloud: &PointCloud, radius: f64) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!("normal radius {radius} must be > 0")));
    }
    let tree = KdTree::from_points(cloud.points());
    let normals = estimate_normals_with(cloud, &tree, radius);
    PointCloud::with_normals(cloud.points().to_vec(), Some(normals))
}

pub(crate) fn estimate_normals_with(cloud: &PointCloud, tree: &KdTree, radius: f64) -> Vec<Vector3> {
    let pts = cloud.points();
    par::map(pts, |p| {
        let nbrs = tree.within_radius_point(p, radius);
        if nbrs.len() < MIN_NORMAL_NEIGHBORS {
            return Vector3::zeros();
        }
        let mean = nbrs
            .iter()
            .fold(Vector3::zeros(), |acc, &(i, _)| acc + pts[i].coords)
            / nbrs.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(i, _) in &nbrs {
            let d = pts[i].coords - mean;
            cov += d * d.transpose();
        }
        cov /= nbrs.len() as f64;
        smallest_eigenvector(cov).map_or(Vector3::zeros(), orient)
    })
}

fn smallest_eigenvector(cov: Matrix3<f64>) -> Option<Vector3> {
    let eig = SymmetricEigen::new(cov);
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v: Vector3 = eig.eigenvectors.column(k).into_owned();
    let len = v.norm();
    (len > 0.0 && len.is_finite()).then(|| v / len)
}

pub(crate) fn orient(n: Vector3) -> Vector3 {
    for k in [2, 0] {
        if n[k].abs() > SIGN_TOL {
            return if n[k] < 0.0 { -n } else { n };
        }
    }
    if n.y < 0.0 { -n } else { n }
}
