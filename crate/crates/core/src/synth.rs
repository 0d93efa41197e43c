//! Synthetic worlds: a corridor scanned along its axis, and randomized
//! structured scenes with a re-observed query view and optional inserted
//! object.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::{apply_transform, AxisAlignedBox, Point3, PointCloud, RigidTransform, Vector3};
use crate::error::{Error, Result};
use crate::ics::{to_ics, IcsAlignment, IcsConfig};
use crate::registration::ScanSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorParams {
    pub n_scans: usize,
    /// Travel between consecutive scans, meters.
    pub spacing: f64,
    /// Time between consecutive scans, seconds.
    pub dt: f64,
    /// Standard deviation of per-pose odometry error, meters (yaw error is a
    /// tenth of this, radians).
    pub odometry_noise: f64,
    /// Sensor range, meters; the default sees the whole corridor.
    pub range: f64,
    pub seed: u64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            n_scans: 11,
            spacing: 1.0,
            dt: 1.0,
            odometry_noise: 0.0,
            range: 50.0,
            seed: 0,
        }
    }
}

const CORRIDOR_HALF_WIDTH: f64 = 2.0;
const CORRIDOR_HEIGHT: f64 = 2.5;
/// Surface sampling density, points per square meter.
const CORRIDOR_DENSITY: f64 = 60.0;
/// Corridor extension beyond the first and last scan positions.
const CORRIDOR_MARGIN: f64 = 3.0;

/// Random points on the axis-aligned rectangle `origin + [0,1]·u + [0,1]·v`.
fn sample_rect(origin: Point3, u: Vector3, v: Vector3, rng: &mut ChaCha8Rng, out: &mut Vec<Point3>) {
    let n = (u.cross(&v).norm() * CORRIDOR_DENSITY).ceil() as usize;
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        out.push(origin + a * u + b * v);
    }
}

/// Closed corridor: side walls, end walls, floor and irregularly spaced
/// pillars. Every scan observes the same fixed point set.
fn corridor_world(params: &CorridorParams) -> Vec<Point3> {
    let x_lo = -CORRIDOR_MARGIN;
    let x_hi = params.n_scans.saturating_sub(1) as f64 * params.spacing + CORRIDOR_MARGIN;
    let (w, h) = (CORRIDOR_HALF_WIDTH, CORRIDOR_HEIGHT);
    let len = x_hi - x_lo;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pts = Vec::new();
    let up = Vector3::new(0.0, 0.0, h);
    for y in [-w, w] {
        sample_rect(Point3::new(x_lo, y, 0.0), Vector3::new(len, 0.0, 0.0), up, &mut rng, &mut pts);
    }
    for x in [x_lo, x_hi] {
        sample_rect(Point3::new(x, -w, 0.0), Vector3::new(0.0, 2.0 * w, 0.0), up, &mut rng, &mut pts);
    }
    sample_rect(
        Point3::new(x_lo, -w, 0.0),
        Vector3::new(len, 0.0, 0.0),
        Vector3::new(0.0, 2.0 * w, 0.0),
        &mut rng,
        &mut pts,
    );
    let mut x = x_lo + 0.5;
    let mut side = 1.0;
    while x < x_hi - 1.0 {
        let depth = rng.random_range(0.2..0.6);
        let width = rng.random_range(0.3..0.8);
        let y_face = side * (w - depth);
        let inward = Vector3::new(0.0, side * depth, 0.0);
        sample_rect(Point3::new(x, y_face, 0.0), Vector3::new(width, 0.0, 0.0), up, &mut rng, &mut pts);
        sample_rect(Point3::new(x, y_face, 0.0), inward, up, &mut rng, &mut pts);
        sample_rect(Point3::new(x + width, y_face, 0.0), inward, up, &mut rng, &mut pts);
        x += width + rng.random_range(1.0..3.0);
        side = -side;
    }
    pts
}

fn corridor_pose(params: &CorridorParams, i: usize) -> RigidTransform {
    RigidTransform::translation_only(Vector3::new(i as f64 * params.spacing, 0.0, 0.0))
}

fn observe(world: &[Point3], pose: &RigidTransform, range: f64) -> Vec<Point3> {
    let inv = pose.inverse();
    let o = pose.translation();
    world
        .iter()
        .filter(|p| ((p.x - o.x).powi(2) + (p.y - o.y).powi(2)).sqrt() <= range)
        .map(|p| inv.apply_point(p))
        .collect()
}

/// Scans taken while driving along a corridor, with noisy dead-reckoning.
pub fn corridor_sequence(params: &CorridorParams) -> ScanSequence {
    let world = corridor_world(params);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));
    let noise = Normal::new(0.0, params.odometry_noise.max(0.0)).expect("finite sigma");
    let mut scans = Vec::with_capacity(params.n_scans);
    let mut odometry = Vec::with_capacity(params.n_scans);
    for i in 0..params.n_scans {
        let pose = corridor_pose(params, i);
        scans.push(PointCloud::new(observe(&world, &pose, params.range)).expect("finite world"));
        let est = if i == 0 || params.odometry_noise <= 0.0 {
            pose
        } else {
            let dt = Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), 0.0);
            let dyaw = 0.1 * noise.sample(&mut rng);
            RigidTransform::from_yaw(dyaw, pose.translation() + dt)
        };
        odometry.push(est);
    }
    let times = (0..params.n_scans).map(|i| i as f64 * params.dt).collect();
    ScanSequence::new(scans, odometry, times).expect("valid synthetic sequence")
}

/// Union of the world seen by `scans`, in the frame of the first of them.
pub fn corridor_union(params: &CorridorParams, scans: Range<usize>) -> PointCloud {
    let world = corridor_world(params);
    let first = corridor_pose(params, scans.start).inverse();
    let poses: Vec<Vector3> = scans.map(|i| *corridor_pose(params, i).translation()).collect();
    let pts = world
        .iter()
        .filter(|p| {
            poses
                .iter()
                .any(|o| ((p.x - o.x).powi(2) + (p.y - o.y).powi(2)).sqrt() <= params.range)
        })
        .map(|p| first.apply_point(p))
        .collect();
    PointCloud::new(pts).expect("finite world")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub n_structures: usize,
    /// Edge of the square footprint holding the structures, meters.
    pub extent: f64,
    pub points_per_structure: usize,
    /// Gaussian noise added to query points, meters.
    pub noise_sigma: f64,
    /// Fraction of re-observed points dropped from the query.
    pub dropout: f64,
    pub insert_object: bool,
    pub object_points: usize,
    /// Query yaw drawn from `[-range, range]`, degrees.
    pub view_yaw_range: f64,
    /// Query x and y offsets drawn from `[-range, range]`, meters.
    pub view_translation_range: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            n_structures: 20,
            extent: 30.0,
            points_per_structure: 400,
            noise_sigma: 0.01,
            dropout: 0.1,
            insert_object: true,
            object_points: 120,
            view_yaw_range: 180.0,
            view_translation_range: 5.0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_structures > 0 && self.extent > 0.0 && self.points_per_structure > 0;
        if !positive || (self.insert_object && self.object_points == 0) {
            return Err(Error::InvalidParameter("scene sizes must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter("noise must be >= 0 and dropout in [0, 1)".into()));
        }
        if !(self.view_yaw_range >= 0.0) || !(self.view_translation_range >= 0.0) {
            return Err(Error::InvalidParameter("view ranges must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsertedObject {
    /// Indices of the object's points in the query cloud.
    pub indices: Vec<usize>,
    /// Horizontal bounding box of the object in the query's ICS.
    pub box_ics: AxisAlignedBox,
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub seed: u64,
    pub reference: PointCloud,
    pub query: PointCloud,
    /// Reference frame → query frame.
    pub view: RigidTransform,
    /// Query frame → query ICS under the default ICS configuration.
    pub query_ics: IcsAlignment,
    pub object: Option<InsertedObject>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Wall { along_x: bool, length: f64 },
    Block { wx: f64, wy: f64 },
    Cylinder { radius: f64 },
    /// Sphere resting on the ground.
    Sphere { radius: f64 },
    /// Plane rising along x from the ground to the structure height.
    Ramp { wx: f64, wy: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Structure {
    shape: Shape,
    /// Footprint corner with the smallest coordinates (center for cylinders).
    x: f64,
    y: f64,
    height: f64,
}

impl Structure {
    fn footprint(&self) -> (f64, f64, f64, f64) {
        match self.shape {
            Shape::Wall { along_x: true, length } => (self.x, self.y, self.x + length, self.y),
            Shape::Wall { along_x: false, length } => (self.x, self.y, self.x, self.y + length),
            Shape::Block { wx, wy } => (self.x, self.y, self.x + wx, self.y + wy),
            Shape::Cylinder { radius } | Shape::Sphere { radius } => {
                (self.x - radius, self.y - radius, self.x + radius, self.y + radius)
            }
            Shape::Ramp { wx, wy } => (self.x, self.y, self.x + wx, self.y + wy),
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
        let h = self.height;
        (0..n)
            .map(|_| match self.shape {
                Shape::Wall { along_x, length } => {
                    let u = rng.random_range(0.0..length);
                    let z = rng.random_range(0.0..h);
                    if along_x {
                        Point3::new(self.x + u, self.y, z)
                    } else {
                        Point3::new(self.x, self.y + u, z)
                    }
                }
                Shape::Block { wx, wy } => {
                    // four sides and the top, area-weighted
                    let (side_x, side_y, top) = (wx * h, wy * h, wx * wy);
                    let r = rng.random_range(0.0..2.0 * (side_x + side_y) + top);
                    let (u, v, z) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..h));
                    if r < 2.0 * side_x {
                        let y = if r < side_x { self.y } else { self.y + wy };
                        Point3::new(self.x + u * wx, y, z)
                    } else if r < 2.0 * (side_x + side_y) {
                        let x = if r < 2.0 * side_x + side_y { self.x } else { self.x + wx };
                        Point3::new(x, self.y + v * wy, z)
                    } else {
                        Point3::new(self.x + u * wx, self.y + v * wy, h)
                    }
                }
                Shape::Cylinder { radius } => {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let z = rng.random_range(0.0..h);
                    Point3::new(self.x + radius * a.cos(), self.y + radius * a.sin(), z)
                }
                Shape::Sphere { radius } => {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let c: f64 = rng.random_range(-1.0..1.0);
                    let r = (1.0 - c * c).sqrt();
                    Point3::new(self.x + radius * r * a.cos(), self.y + radius * r * a.sin(), radius * (1.0 + c))
                }
                Shape::Ramp { wx, wy } => {
                    let (u, v) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                    Point3::new(self.x + u * wx, self.y + v * wy, u * h)
                }
            })
            .collect()
    }
}

const N_KINDS: usize = 7;

/// Per-scene mix of structure kinds and sizes, so places differ in character:
/// walls plus two of block, cylinder, sphere, ramp, pole and slab.
#[derive(Debug, Clone, Copy)]
struct Style {
    weights: [f64; N_KINDS],
    block: f64,
    radius: f64,
    height: f64,
}

impl Style {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut weights = [0.0; N_KINDS];
        weights[0] = 1.0;
        let a = rng.random_range(1..N_KINDS);
        let b = (a + rng.random_range(1..N_KINDS - 1) - 1) % (N_KINDS - 1) + 1;
        weights[a] = 1.0;
        weights[b] = 1.0;
        Self {
            weights,
            block: rng.random_range(0.8..3.0),
            radius: rng.random_range(0.25..1.2),
            height: rng.random_range(1.2..3.5),
        }
    }
}

fn random_structure(rng: &mut ChaCha8Rng, extent: f64, style: &Style) -> Structure {
    let half = 0.5 * extent;
    // crowded toward one corner, so the layout has a well-defined heading
    let x = -half + extent * rng.random_range(0.0f64..1.0).powi(2);
    let y = -half + extent * rng.random_range(0.0f64..1.0).powi(2);
    let total: f64 = style.weights.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut kind = 0;
    while kind < N_KINDS - 1 && pick >= style.weights[kind] {
        pick -= style.weights[kind];
        kind += 1;
    }
    let mut height = style.height * rng.random_range(0.7..1.3);
    let shape = match kind {
        0 => Shape::Wall {
            along_x: rng.random_bool(0.5),
            length: rng.random_range(3.0..10.0),
        },
        1 => Shape::Block {
            wx: style.block * rng.random_range(0.7..1.3),
            wy: style.block * rng.random_range(0.7..1.3),
        },
        2 => Shape::Cylinder {
            radius: style.radius * rng.random_range(0.8..1.2),
        },
        3 => Shape::Sphere {
            radius: style.radius * rng.random_range(1.0..1.5),
        },
        4 => Shape::Ramp {
            wx: 2.0 * style.block * rng.random_range(0.7..1.3),
            wy: style.block * rng.random_range(0.7..1.3),
        },
        5 => {
            height = rng.random_range(2.5..4.0);
            Shape::Cylinder {
                radius: rng.random_range(0.06..0.12),
            }
        }
        _ => {
            height = rng.random_range(0.2..0.4);
            Shape::Block {
                wx: rng.random_range(2.0..4.0),
                wy: rng.random_range(2.0..4.0),
            }
        }
    };
    Structure { shape, x, y, height }
}

/// A small block or cylinder placed clear of every structure's footprint.
fn random_object(rng: &mut ChaCha8Rng, extent: f64, structures: &[Structure]) -> Structure {
    const CLEARANCE: f64 = 1.0;
    let half = 0.5 * extent;
    let mut candidate = None;
    for _ in 0..200 {
        let shape = if rng.random_bool(0.5) {
            Shape::Block {
                wx: rng.random_range(0.6..1.2),
                wy: rng.random_range(0.6..1.2),
            }
        } else {
            Shape::Cylinder {
                radius: rng.random_range(0.3..0.6),
            }
        };
        let s = Structure {
            shape,
            x: rng.random_range(-half..half),
            y: rng.random_range(-half..half),
            height: rng.random_range(0.8..1.5),
        };
        let (ax0, ay0, ax1, ay1) = s.footprint();
        let clear = structures.iter().all(|o| {
            let (bx0, by0, bx1, by1) = o.footprint();
            ax1 + CLEARANCE < bx0 || bx1 + CLEARANCE < ax0 || ay1 + CLEARANCE < by0 || by1 + CLEARANCE < ay0
        });
        candidate = Some(s);
        if clear {
            break;
        }
    }
    candidate.expect("at least one attempt")
}

/// Random structured scene and a second, displaced and degraded observation.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SynthScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = Style::random(&mut rng);
    let structures: Vec<Structure> = (0..params.n_structures)
        .map(|_| random_structure(&mut rng, params.extent, &style))
        .collect();
    let mut ref_pts = Vec::with_capacity(params.n_structures * params.points_per_structure);
    for s in &structures {
        ref_pts.extend(s.sample(params.points_per_structure, &mut rng));
    }
    let reference = PointCloud::new(ref_pts)?;

    let yaw = rng.random_range(-1.0..=1.0) * params.view_yaw_range.to_radians();
    let tr = params.view_translation_range;
    let shift = Vector3::new(rng.random_range(-1.0..=1.0) * tr, rng.random_range(-1.0..=1.0) * tr, 0.0);
    let view = RigidTransform::from_yaw(yaw, shift);

    let noise = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
    let jitter = |p: Point3, rng: &mut ChaCha8Rng| {
        if params.noise_sigma > 0.0 {
            p + Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
        } else {
            p
        }
    };
    let mut query_pts = Vec::with_capacity(reference.len() + params.object_points);
    for p in reference.points() {
        let keep = rng.random::<f64>() >= params.dropout;
        if keep {
            query_pts.push(jitter(view.apply_point(p), &mut rng));
        }
    }
    let mut object_idx = Vec::new();
    if params.insert_object {
        let obj = random_object(&mut rng, params.extent, &structures);
        for p in obj.sample(params.object_points, &mut rng) {
            object_idx.push(query_pts.len());
            query_pts.push(jitter(view.apply_point(&p), &mut rng));
        }
    }
    let query = PointCloud::new(query_pts)?;
    let (query_ics, aligned) = to_ics(&query, &IcsConfig::default())?;
    let object = if object_idx.is_empty() {
        None
    } else {
        let box_ics = aligned.select(&object_idx).bounding_box().expect("non-empty object");
        let b = AxisAlignedBox::horizontal(box_ics.min.x, box_ics.min.y, box_ics.max.x, box_ics.max.y)?;
        Some(InsertedObject {
            indices: object_idx,
            box_ics: b,
        })
    };
    Ok(SynthScene {
        seed,
        reference,
        query,
        view,
        query_ics,
        object,
    })
}

impl SynthScene {
    /// Query cloud expressed in its ICS.
    pub fn query_in_ics(&self) -> PointCloud {
        apply_transform(&self.query, &self.query_ics.transform)
    }

    /// Horizontal box of the inserted object under another ICS configuration.
    pub fn object_box(&self, cfg: &IcsConfig) -> Result<Option<AxisAlignedBox>> {
        let Some(obj) = &self.object else {
            return Ok(None);
        };
        let (al, _) = to_ics(&self.query, cfg)?;
        let b = apply_transform(&self.query.select(&obj.indices), &al.transform)
            .bounding_box()
            .expect("non-empty object");
        AxisAlignedBox::horizontal(b.min.x, b.min.y, b.max.x, b.max.y).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kdtree::KdTree;

    #[test]
    fn corridor_sequence_shape() {
        let p = CorridorParams::default();
        let seq = corridor_sequence(&p);
        assert_eq!(seq.len(), 11);
        assert_eq!(seq.timestamps()[3], 3.0);
        assert!((seq.cumulative_travel()[10] - 10.0).abs() < 1e-12);
        // a world point seen by scans 0 and 1 appears shifted by the spacing
        let t1 = KdTree::from_points(seq.scans()[1].points());
        let p0 = seq.scans()[0].points().iter().find(|p| p.x > 1.0 && p.x < 2.0).unwrap();
        let (_, d) = t1.nearest_point(&(p0 - Vector3::new(1.0, 0.0, 0.0))).unwrap();
        assert!(d < 1e-9);
    }

    #[test]
    fn union_covers_first_scan() {
        let p = CorridorParams::default();
        let seq = corridor_sequence(&p);
        let u = corridor_union(&p, 0..1);
        assert_eq!(u.points(), seq.scans()[0].points());
    }

    #[test]
    fn identity_view_without_noise_is_reference_minus_dropout() {
        let params = SceneParams {
            noise_sigma: 0.0,
            insert_object: false,
            view_yaw_range: 0.0,
            view_translation_range: 0.0,
            ..Default::default()
        };
        let s = generate_scene(3, &params).unwrap();
        assert!(s.object.is_none());
        let n = s.reference.len() as f64;
        let kept = s.query.len() as f64;
        assert!((kept / n - 0.9).abs() < 0.02, "{kept}/{n}");
        let tree = KdTree::from_points(s.reference.points());
        assert!(s.query.points().iter().all(|p| tree.nearest_point(p).unwrap().1 == 0.0));
    }

    #[test]
    fn scenes_are_reproducible() {
        let a = generate_scene(11, &SceneParams::default()).unwrap();
        let b = generate_scene(11, &SceneParams::default()).unwrap();
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.query, b.query);
        assert_eq!(a.view, b.view);
        assert_eq!(a.object, b.object);
        let c = generate_scene(12, &SceneParams::default()).unwrap();
        assert_ne!(a.reference, c.reference);
    }

    #[test]
    fn object_box_contains_object_in_ics() {
        for seed in 0..10 {
            let s = generate_scene(seed, &SceneParams::default()).unwrap();
            let obj = s.object.as_ref().unwrap();
            assert!(obj.box_ics.horizontal_area() > 0.0);
            let q = s.query_in_ics();
            let inside = obj.indices.iter().filter(|&&i| obj.box_ics.contains_horizontal(&q.points()[i])).count();
            assert!(inside as f64 >= 0.95 * obj.indices.len() as f64);
        }
    }

    #[test]
    fn object_box_follows_ics_config() {
        let s = generate_scene(3, &SceneParams::default()).unwrap();
        let obj = s.object.as_ref().unwrap();
        assert_eq!(s.object_box(&IcsConfig::default()).unwrap(), Some(obj.box_ics));
        let fine = IcsConfig {
            bin_width: 0.25,
            ..Default::default()
        };
        let b = s.object_box(&fine).unwrap().unwrap();
        assert!((b.horizontal_area() - obj.box_ics.horizontal_area()).abs() < 0.5 * obj.box_ics.horizontal_area());
        let none = SceneParams {
            insert_object: false,
            ..Default::default()
        };
        assert_eq!(generate_scene(3, &none).unwrap().object_box(&fine).unwrap(), None);
    }

    #[test]
    fn rejects_bad_params() {
        let p = SceneParams {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(generate_scene(0, &p).is_err());
    }
}
