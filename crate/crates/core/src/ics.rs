//! Invariant coordinate system: center-of-gravity origin, entropy-minimizing
//! horizontal axes, vertical axis taken as +z.
//!
//! The yaw objective is the Shannon entropy of the x- and y-projection
//! histograms of the cloud rotated by `-θ`. Each value is split linearly
//! between the two nearest bin centers, which keeps the objective continuous
//! in `θ` and avoids bin-edge aliasing. It is 90°-periodic, so the sweep
//! covers `[0°, 90°)`; the quadrant is then fixed by requiring non-negative
//! third central moments along both axes.

use serde::{Deserialize, Serialize};

use crate::cloud::{apply_transform, yaw_matrix, PointCloud, RigidTransform, Vector3};
use crate::error::{Error, Result};
use crate::par;

/// Sweeps whose entropy varies by less than this are flagged ambiguous.
const AMBIGUITY_NATS: f64 = 0.1;
/// Refinement must beat the grid optimum by this relative margin.
const REFINE_MIN_GAIN: f64 = 1e-6;
const GOLDEN_TOL_RAD: f64 = 1e-11;
const SNAP_RAD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcsConfig {
    /// Yaw sweep step, degrees.
    pub resolution: f64,
    /// Projection histogram bin width, meters.
    pub bin_width: f64,
    /// Continuous refinement of the grid optimum.
    pub refine: bool,
}

impl Default for IcsConfig {
    fn default() -> Self {
        Self {
            resolution: 1.0,
            bin_width: 0.5,
            refine: true,
        }
    }
}

impl IcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution < 90.0) {
            return Err(Error::InvalidParameter(format!("yaw resolution {} out of (0, 90)", self.resolution)));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::InvalidParameter("bin_width must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcsAlignment {
    /// Map frame → ICS.
    pub transform: RigidTransform,
    /// Heading of the ICS x-axis in the map frame, degrees in `[0, 360)`.
    pub yaw: f64,
    /// Projection entropy at the chosen yaw, nats.
    pub entropy: f64,
    /// The entropy sweep was nearly flat (e.g. rotationally symmetric scene).
    pub ambiguous: bool,
}

/// Translation moving the cloud's center of gravity to the origin.
pub fn cog_origin(cloud: &PointCloud) -> Result<Vector3> {
    cloud.centroid().map(|c| -c.coords).ok_or(Error::EmptyCloud)
}

fn rotate_xy(pts: &[[f64; 2]], theta: f64) -> (Vec<f64>, Vec<f64>) {
    let (s, c) = theta.sin_cos();
    pts.iter().map(|&[x, y]| (c * x + s * y, -s * x + c * y)).unzip()
}

fn horizontal(cloud: &PointCloud) -> Vec<[f64; 2]> {
    cloud.points().iter().map(|p| [p.x, p.y]).collect()
}

/// Linear-interpolated histogram entropy; continuous in the projected values.
fn histogram_entropy(values: &[f64], bin_width: f64) -> f64 {
    let lo = values.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    let hi = values.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let base = (lo / bin_width).floor() - 1.0;
    let len = ((hi / bin_width).floor() - base) as usize + 3;
    let mut w = vec![0.0; len];
    for v in values {
        let u = v / bin_width - 0.5 - base;
        let k = u.floor();
        let f = u - k;
        let k = k as usize;
        w[k] += 1.0 - f;
        w[k + 1] += f;
    }
    let n = values.len() as f64;
    -w.iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Projection entropy of the cloud rotated by `-theta_deg` about z.
pub fn yaw_entropy(cloud: &PointCloud, theta_deg: f64, bin_width: f64) -> f64 {
    entropy_xy(&horizontal(cloud), theta_deg.to_radians(), bin_width)
}

fn entropy_xy(pts: &[[f64; 2]], theta: f64, bin_width: f64) -> f64 {
    let (xs, ys) = rotate_xy(pts, theta);
    histogram_entropy(&xs, bin_width) + histogram_entropy(&ys, bin_width)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawEstimate {
    /// Final heading including the quadrant choice, degrees in `[0, 360)`.
    pub yaw: f64,
    /// Sweep optimum in `[0, 90)` before the quadrant choice.
    pub sweep_yaw: f64,
    pub entropy: f64,
    pub ambiguous: bool,
}

fn check_horizontal_spread(pts: &[[f64; 2]]) -> Result<()> {
    let Some(first) = pts.first() else {
        return Err(Error::EmptyCloud);
    };
    if pts.iter().all(|p| p == first) {
        return Err(Error::DegenerateCloud("all points share one horizontal position".into()));
    }
    Ok(())
}

/// Grid sweep over `[0°, 90°)`: argmin with smallest-angle tie rule, then the
/// quadrant choice.
pub fn entropy_yaw(cloud: &PointCloud, cfg: &IcsConfig) -> Result<YawEstimate> {
    cfg.validate()?;
    let pts = horizontal(cloud);
    check_horizontal_spread(&pts)?;
    let (theta, entropy, ambiguous) = sweep(&pts, cfg);
    let yaw = theta + 90.0 * quadrant(&pts, theta.to_radians()) as f64;
    Ok(YawEstimate {
        yaw,
        sweep_yaw: theta,
        entropy,
        ambiguous,
    })
}

fn sweep(pts: &[[f64; 2]], cfg: &IcsConfig) -> (f64, f64, bool) {
    let steps = (90.0 / cfg.resolution).ceil() as usize;
    let angles: Vec<f64> = (0..steps)
        .map(|k| k as f64 * cfg.resolution)
        .filter(|a| *a < 90.0)
        .collect();
    let entropies = par::map(&angles, |a| entropy_xy(pts, a.to_radians(), cfg.bin_width));
    let mut best = 0;
    for (k, e) in entropies.iter().enumerate() {
        if *e < entropies[best] {
            best = k;
        }
    }
    let worst = entropies.iter().fold(f64::NEG_INFINITY, |a, &e| a.max(e));
    (angles[best], entropies[best], worst - entropies[best] < AMBIGUITY_NATS)
}

/// Quarter turns (0..4) added to `theta` so both horizontal third central
/// moments are non-negative.
fn quadrant(pts: &[[f64; 2]], theta: f64) -> usize {
    let (xs, ys) = rotate_xy(pts, theta);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n + ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
    let a = xs.iter().map(|x| (x - mx).powi(3)).sum::<f64>() / n;
    let b = ys.iter().map(|y| (y - my).powi(3)).sum::<f64>() / n;
    let eps = 1e-9 * m2.powf(1.5);
    // moments after k extra quarter turns of the axes
    let options = [(a, b), (b, -a), (-a, -b), (-b, a)];
    options
        .iter()
        .position(|&(sx, sy)| sx >= -eps && sy >= -eps)
        .unwrap_or(0)
}

fn refine(pts: &[[f64; 2]], theta0: f64, cfg: &IcsConfig) -> f64 {
    let f = |t: f64| entropy_xy(pts, t, cfg.bin_width);
    let res = cfg.resolution.to_radians();
    let span = 1.5 * res;
    let n = 60;
    let step = 2.0 * span / n as f64;
    let grid: Vec<f64> = (0..=n).map(|k| theta0 - span + k as f64 * step).collect();
    let vals = par::map(&grid, |&t| f(t));
    let mut k = 0;
    for i in 0..vals.len() {
        if vals[i] < vals[k] {
            k = i;
        }
    }
    // golden-section search in the bracket around the best grid sample
    let (mut lo, mut hi) = (grid[k] - step, grid[k] + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > GOLDEN_TOL_RAD {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut best = (theta0, f(theta0));
    for (t, v) in [(grid[k], vals[k]), (0.5 * (lo + hi), f(0.5 * (lo + hi)))] {
        if v < best.1 - REFINE_MIN_GAIN * best.1.abs() {
            best = (t, v);
        }
    }
    best.0
}

/// Align a cloud with the invariant coordinate system.
pub fn to_ics(cloud: &PointCloud, cfg: &IcsConfig) -> Result<(IcsAlignment, PointCloud)> {
    cfg.validate()?;
    let shift = cog_origin(cloud)?;
    let centered: Vec<[f64; 2]> = cloud.points().iter().map(|p| [p.x + shift.x, p.y + shift.y]).collect();
    check_horizontal_spread(&centered)?;
    let (theta_deg, _, ambiguous) = sweep(&centered, cfg);
    let mut theta = theta_deg.to_radians();
    if cfg.refine {
        theta = refine(&centered, theta, cfg);
    }
    let quarter = std::f64::consts::FRAC_PI_2;
    theta = theta.rem_euclid(quarter);
    // refinement residue around an axis that is already aligned
    if theta < SNAP_RAD || quarter - theta < SNAP_RAD {
        theta = 0.0;
    }
    let yaw = theta + quarter * quadrant(&centered, theta) as f64;
    let entropy = entropy_xy(&centered, yaw, cfg.bin_width);
    let rot = yaw_matrix(-yaw);
    let transform = RigidTransform::from_parts_unchecked(rot, rot * shift);
    let aligned = apply_transform(cloud, &transform);
    Ok((
        IcsAlignment {
            transform,
            yaw: yaw.to_degrees(),
            entropy,
            ambiguous,
        },
        aligned,
    ))
}
