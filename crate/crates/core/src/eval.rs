//! Localization and change-detection metrics, and the ground-truth file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::change::ChangeReport;
use crate::cloud::AxisAlignedBox;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub use crate::synth::{generate_scene, SceneParams, SynthScene};

/// Averaged normalized rank: mean over queries of `rank(gt) / db_size`, ranks
/// starting at 1.
pub fn anr(rankings: &[Vec<u32>], gt: &[u32], db_size: usize) -> Result<f64> {
    if db_size == 0 {
        return Err(Error::InvalidParameter("database size must be >= 1".into()));
    }
    if rankings.len() != gt.len() {
        return Err(Error::CountMismatch {
            expected: gt.len(),
            got: rankings.len(),
        });
    }
    if rankings.is_empty() {
        return Err(Error::Precondition("no queries to score".into()));
    }
    let mut total = 0.0;
    for (q, (ranking, &g)) in rankings.iter().zip(gt).enumerate() {
        let pos = ranking
            .iter()
            .position(|&id| id == g)
            .ok_or(Error::MissingGroundTruth { query: q, gt: g })?;
        total += (pos + 1) as f64 / db_size as f64;
    }
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BoxRecord {
    pub fn to_box(&self) -> Result<AxisAlignedBox> {
        let b = AxisAlignedBox::horizontal(self.xmin, self.ymin, self.xmax, self.ymax)?;
        if !(b.horizontal_area() > 0.0) {
            return Err(Error::InvalidParameter(format!("box {self:?} has no horizontal area")));
        }
        Ok(b)
    }

    pub fn from_box(b: &AxisAlignedBox) -> Self {
        Self {
            xmin: b.min.x,
            ymin: b.min.y,
            xmax: b.max.x,
            ymax: b.max.y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub id: u32,
    pub gt_ref_id: u32,
    /// Change boxes in the query's ICS.
    #[serde(default)]
    pub boxes: Vec<BoxRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    pub queries: Vec<QueryTruth>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        for q in &self.queries {
            for b in &q.boxes {
                b.to_box()?;
            }
        }
        Ok(())
    }

    pub fn query(&self, id: u32) -> Option<&QueryTruth> {
        self.queries.iter().find(|q| q.id == id)
    }
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let gt: GroundTruth = serde_json::from_str(&text)?;
    gt.validate()?;
    Ok(gt)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    gt.validate()?;
    let mut s = serde_json::to_string_pretty(gt)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Whether any of the report's top-`x` keypoints lies in a change box.
pub fn change_hit(report: &ChangeReport, boxes: &[AxisAlignedBox], x: usize) -> bool {
    report
        .top_ics(x)
        .iter()
        .any(|p| boxes.iter().any(|b| b.contains_horizontal(p)))
}

/// Fraction of queries whose top-`x` keypoints hit a ground-truth box.
pub fn top_x_accuracy(reports: &[ChangeReport], gt: &GroundTruth, x: usize) -> Result<f64> {
    if x == 0 {
        return Err(Error::InvalidParameter("X must be >= 1".into()));
    }
    if reports.is_empty() {
        return Err(Error::Precondition("no reports to score".into()));
    }
    let mut hits = 0usize;
    for r in reports {
        let truth = gt
            .query(r.query_id)
            .ok_or_else(|| Error::Precondition(format!("no ground truth for query {}", r.query_id)))?;
        let boxes = truth.boxes.iter().map(BoxRecord::to_box).collect::<Result<Vec<_>>>()?;
        if change_hit(r, &boxes, x) {
            hits += 1;
        }
    }
    Ok(hits as f64 / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::change::ChangeEntry;
    use crate::cloud::{RigidTransform, Vector3};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(id: u32, pts: &[(f64, f64)]) -> ChangeReport {
        ChangeReport {
            query_id: id,
            hypotheses: vec![0],
            changes: pts
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| ChangeEntry {
                    x,
                    y,
                    z: 0.0,
                    loc: (pts.len() - i) as f64,
                    cell: 0,
                    sentinel: false,
                    feature: i,
                })
                .collect(),
            to_ics: None,
        }
    }

    fn truth(id: u32, b: (f64, f64, f64, f64)) -> QueryTruth {
        QueryTruth {
            id,
            gt_ref_id: 0,
            boxes: vec![BoxRecord {
                xmin: b.0,
                ymin: b.1,
                xmax: b.2,
                ymax: b.3,
            }],
        }
    }

    #[test]
    fn anr_examples() {
        let ranking: Vec<u32> = (0..100).map(|i| if i == 2 { 42 } else { 1000 + i }).collect();
        assert_eq!(anr(&[ranking], &[42], 100).unwrap(), 0.03);
        let a = vec![7, 1, 2, 3, 4, 5, 6, 8, 9, 10];
        let b = vec![1, 2, 3, 4, 7, 5, 6, 8, 9, 10];
        assert_eq!(anr(&[a.clone(), b], &[7, 7], 10).unwrap(), 0.3);
        assert!(matches!(anr(&[a], &[99], 10), Err(Error::MissingGroundTruth { query: 0, gt: 99 })));
        assert_eq!(anr(&[vec![3], vec![4]], &[3, 4], 1).unwrap(), 1.0);
    }

    #[test]
    fn anr_of_random_rankings_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50u32;
        let mut rankings = Vec::new();
        for _ in 0..200 {
            let mut r: Vec<u32> = (0..n).collect();
            r.shuffle(&mut rng);
            rankings.push(r);
        }
        let v = anr(&rankings, &vec![0; 200], n as usize).unwrap();
        assert!((v - 0.5).abs() < 0.05, "{v}");
    }

    #[test]
    fn top_x_examples() {
        let gt = GroundTruth {
            queries: vec![truth(1, (0.0, 0.0, 1.0, 1.0))],
        };
        assert_eq!(top_x_accuracy(&[report(1, &[(0.5, 0.5)])], &gt, 1).unwrap(), 1.0);
        assert_eq!(top_x_accuracy(&[report(1, &[(1.0, 0.0)])], &gt, 1).unwrap(), 1.0);
        assert_eq!(top_x_accuracy(&[report(1, &[(5.0, 5.0), (0.5, 0.5)])], &gt, 1).unwrap(), 0.0);
        assert_eq!(top_x_accuracy(&[report(1, &[(5.0, 5.0), (0.5, 0.5)])], &gt, 2).unwrap(), 1.0);
        assert!(top_x_accuracy(&[report(2, &[(0.5, 0.5)])], &gt, 1).is_err());
        assert!(top_x_accuracy(&[report(1, &[(0.5, 0.5)])], &gt, 0).is_err());
    }

    #[test]
    fn report_transform_is_applied() {
        let gt = GroundTruth {
            queries: vec![truth(1, (0.0, 0.0, 1.0, 1.0))],
        };
        let mut r = report(1, &[(10.5, 0.5)]);
        assert_eq!(top_x_accuracy(&[r.clone()], &gt, 1).unwrap(), 0.0);
        r.to_ics = Some(RigidTransform::translation_only(Vector3::new(-10.0, 0.0, 0.0)));
        assert_eq!(top_x_accuracy(&[r], &gt, 1).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_direct_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut reports = Vec::new();
        let mut gt = GroundTruth::default();
        for q in 0..50 {
            let pts: Vec<(f64, f64)> = (0..20).map(|_| (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))).collect();
            let (x0, y0) = (rng.random_range(-10.0..8.0), rng.random_range(-10.0..8.0));
            gt.queries.push(truth(q, (x0, y0, x0 + 2.0, y0 + 2.0)));
            reports.push(report(q, &pts));
        }
        for x in [1, 5, 20] {
            let direct = reports
                .iter()
                .zip(&gt.queries)
                .filter(|(r, t)| {
                    let b = t.boxes[0];
                    r.changes[..x].iter().any(|c| c.x >= b.xmin && c.x <= b.xmax && c.y >= b.ymin && c.y <= b.ymax)
                })
                .count() as f64
                / 50.0;
            assert_eq!(top_x_accuracy(&reports, &gt, x).unwrap(), direct);
        }
    }

    #[test]
    fn ground_truth_json() {
        let gt = GroundTruth {
            queries: vec![truth(3, (0.0, 1.0, 2.0, 3.0))],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.json");
        write_ground_truth(&p, &gt).unwrap();
        assert_eq!(read_ground_truth(&p).unwrap(), gt);
        std::fs::write(&p, r#"{"queries":[{"id":1,"gt_ref_id":2,"boxes":[{"xmin":0,"ymin":0,"xmax":0,"ymax":1}]}]}"#).unwrap();
        assert!(read_ground_truth(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn accuracy_non_decreasing_in_x(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut reports = Vec::new();
            let mut gt = GroundTruth::default();
            for q in 0..5 {
                let pts: Vec<(f64, f64)> = (0..10).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
                gt.queries.push(truth(q, (0.0, 0.0, 1.0, 1.0)));
                reports.push(report(q, &pts));
            }
            let mut prev = 0.0;
            for x in 1..=10 {
                let a = top_x_accuracy(&reports, &gt, x).unwrap();
                prop_assert!(a >= prev);
                prev = a;
            }
        }

        #[test]
        fn anr_in_unit_interval(seed in 0u64..10_000, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut r: Vec<u32> = (0..n as u32).collect();
            r.shuffle(&mut rng);
            let v = anr(&[r], &[0], n).unwrap();
            prop_assert!(v > 0.0 && v <= 1.0);
        }
    }
}
