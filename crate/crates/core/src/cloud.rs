//! Point-cloud data model and rigid transforms.

use nalgebra::{Matrix3, Rotation3, Vector3 as NVector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = NVector3<f64>;

const NORMAL_TOL: f64 = 1e-6;
const ORTHO_TOL: f64 = 1e-9;

/// Ordered 3D points (meters) with optional per-point normals.
///
/// A normal equal to the zero vector marks a point whose normal could not be
/// estimated (too few neighbours); every other normal is unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Vector3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        Self::with_normals(points, None)
    }

    pub fn with_normals(points: Vec<Point3>, normals: Option<Vec<Vector3>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !is_finite(p)) {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        if let Some(ns) = &normals {
            if ns.len() != points.len() {
                return Err(Error::InvalidCloud(format!(
                    "{} normals for {} points",
                    ns.len(),
                    points.len()
                )));
            }
            for (i, n) in ns.iter().enumerate() {
                let len = n.norm();
                let zero = n.iter().all(|c| *c == 0.0);
                if !zero && (len - 1.0).abs() > NORMAL_TOL {
                    return Err(Error::InvalidCloud(format!(
                        "normal {i} has length {len}"
                    )));
                }
            }
        }
        Ok(Self { points, normals })
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            normals: None,
        }
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Normal at `i` if present and not flagged degenerate.
    pub fn normal(&self, i: usize) -> Option<Vector3> {
        let n = self.normals.as_ref()?[i];
        (n != Vector3::zeros()).then_some(n)
    }

    pub fn into_parts(self) -> (Vec<Point3>, Option<Vec<Vector3>>) {
        (self.points, self.normals)
    }

    pub fn without_normals(&self) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
            normals: None,
        }
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    /// Concatenate two clouds; normals survive only if both carry them.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let normals = match (&self.normals, &other.normals) {
            (Some(a), Some(b)) => {
                let mut n = a.clone();
                n.extend_from_slice(b);
                Some(n)
            }
            _ => None,
        };
        PointCloud { points, normals }
    }

    /// Subset by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| idx.iter().map(|&i| ns[i]).collect()),
        }
    }

    pub fn bounding_box(&self) -> Option<AxisAlignedBox> {
        let first = *self.points.first()?;
        let (mut lo, mut hi) = (first, first);
        for p in &self.points[1..] {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some(AxisAlignedBox { min: lo, max: hi })
    }
}

pub(crate) fn is_finite(p: &Point3) -> bool {
    p.iter().all(|c| c.is_finite())
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !err.is_finite() || err > ORTHO_TOL {
            return Err(Error::InvalidTransform(format!(
                "rotation not orthonormal (max |RᵀR − I| = {err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidTransform(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidTransform("translation not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds without validation; callers guarantee a proper rotation.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_only(t: Vector3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3) -> Self {
        Self {
            rotation: yaw_matrix(yaw),
            translation,
        }
    }

    /// Rotation about an arbitrary axis (axis-angle vector, radians).
    pub fn from_axis_angle(axis_angle: Vector3, translation: Vector3) -> Self {
        Self {
            rotation: *Rotation3::new(axis_angle).matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3 {
        &self.translation
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3) -> Vector3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation angle in radians (0..=π).
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Yaw extracted from the rotation, assuming it is about z.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Largest deviation of the rotation from a pure rotation about z.
    pub fn yaw_deviation(&self) -> f64 {
        let y = yaw_matrix(self.yaw());
        (self.rotation - y).amax()
    }
}

/// Row-major serialized form, validated on the way in.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = t.rotation;
        TransformRepr {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRepr> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        RigidTransform::new(m, Vector3::from(r.translation))
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

pub(crate) fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Transform points by `R p + t` and normals by `R n`.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply_point(p)).collect(),
        normals: cloud
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
    }
}

/// Axis-aligned box; for horizontal boxes the z extent is infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAlignedBox {
    pub min: Point3,
    pub max: Point3,
}

impl AxisAlignedBox {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if (0..3).any(|k| min[k] > max[k]) {
            return Err(Error::InvalidParameter(format!(
                "box min {min:?} exceeds max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn horizontal(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        Self::new(
            Point3::new(xmin, ymin, f64::NEG_INFINITY),
            Point3::new(xmax, ymax, f64::INFINITY),
        )
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn contains_horizontal(&self, p: &Point3) -> bool {
        (0..2).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn horizontal_area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }
}
