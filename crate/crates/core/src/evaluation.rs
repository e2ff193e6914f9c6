//! Scan-level reconstruction metrics and report aggregation.
//!
//! All metrics compare a predicted chain of relative transforms against
//! ground-truth world poses, with both chains expressed relative to the
//! first frame:
//! - `eps_frame`: corner error of each adjacent-pair transform (no accumulation)
//! - `eps_acc`: mean pixel error of every later frame under accumulated transforms
//! - `eps_dice`: voxel overlap of all later frames' pixels
//! - `eps_drift`: corner error of the last frame under accumulated transforms

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix4, Point3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    accumulate_matrices, consecutive_relatives, frame_corners, frame_pixel_grid, relative_to_first, FrameGeometry,
    RigidTransform,
};
use crate::model::Model;
use crate::phantom::ScanRecord;
use crate::stats::{mean_std, MeanStd};

fn transform_point(m: &Matrix4<f64>, p: &Point3<f64>) -> Point3<f64> {
    m.transform_point(p)
}

fn mean_distance(a: &Matrix4<f64>, b: &Matrix4<f64>, pts: &[Point3<f64>]) -> f64 {
    pts.iter()
        .map(|p| (transform_point(a, p) - transform_point(b, p)).norm())
        .sum::<f64>()
        / pts.len() as f64
}

fn check_chain(pred_rels: &[RigidTransform], gt_world: &[RigidTransform]) -> Result<()> {
    if gt_world.len() < 2 || pred_rels.len() + 1 != gt_world.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted transforms for {} ground-truth frames",
            pred_rels.len(),
            gt_world.len()
        )));
    }
    Ok(())
}

/// Mean over adjacent pairs of the mean corner distance between the
/// ground-truth and predicted relative transforms.
pub fn eps_frame(pred_rels: &[RigidTransform], gt_rels: &[RigidTransform], g: &FrameGeometry) -> Result<f64> {
    if pred_rels.len() != gt_rels.len() || pred_rels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} predicted vs {} ground-truth transforms",
            pred_rels.len(),
            gt_rels.len()
        )));
    }
    let corners = frame_corners(g);
    Ok(pred_rels
        .iter()
        .zip(gt_rels)
        .map(|(p, t)| mean_distance(&t.matrix(), &p.matrix(), &corners))
        .sum::<f64>()
        / pred_rels.len() as f64)
}

/// Mean pixel distance over frames `1..N` under accumulated transforms.
pub fn eps_acc(
    pred_rels: &[RigidTransform],
    gt_world: &[RigidTransform],
    g: &FrameGeometry,
    stride: usize,
) -> Result<f64> {
    check_chain(pred_rels, gt_world)?;
    let grid = frame_pixel_grid(g, stride)?;
    let pred = accumulate_matrices(pred_rels);
    let gt = relative_to_first(gt_world);
    let total: f64 = (1..gt.len()).map(|k| mean_distance(&gt[k], &pred[k], &grid)).sum();
    Ok(total / (gt.len() - 1) as f64)
}

/// Mean corner distance of the final frame under accumulated transforms.
pub fn eps_drift(pred_rels: &[RigidTransform], gt_world: &[RigidTransform], g: &FrameGeometry) -> Result<f64> {
    check_chain(pred_rels, gt_world)?;
    let pred = accumulate_matrices(pred_rels);
    let gt = relative_to_first(gt_world);
    let last = gt.len() - 1;
    Ok(mean_distance(&gt[last], &pred[last], &frame_corners(g)))
}

/// Occupied voxels of a point set; point `p` occupies `floor(p / size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub occupied: HashSet<[i64; 3]>,
}

impl VoxelGrid {
    pub fn new(voxel_size: f64) -> Result<Self> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::InvalidParameter(format!("voxel size must be positive, got {voxel_size}")));
        }
        Ok(VoxelGrid { voxel_size, occupied: HashSet::new() })
    }

    pub fn index(&self, p: &Point3<f64>) -> [i64; 3] {
        [
            (p.x / self.voxel_size).floor() as i64,
            (p.y / self.voxel_size).floor() as i64,
            (p.z / self.voxel_size).floor() as i64,
        ]
    }

    pub fn insert(&mut self, p: &Point3<f64>) {
        let idx = self.index(p);
        self.occupied.insert(idx);
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn intersection_len(&self, other: &VoxelGrid) -> usize {
        let (small, large) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        small.occupied.iter().filter(|v| large.occupied.contains(*v)).count()
    }
}

pub fn dice(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::ContractViolation("dice of two empty voxel sets".into()));
    }
    Ok(2.0 * a.intersection_len(b) as f64 / (a.len() + b.len()) as f64)
}

/// Dice overlap of the voxelized pixels of frames `1..N`.
pub fn eps_dice(
    pred_rels: &[RigidTransform],
    gt_world: &[RigidTransform],
    g: &FrameGeometry,
    voxel_size: f64,
    stride: usize,
) -> Result<f64> {
    check_chain(pred_rels, gt_world)?;
    let grid = frame_pixel_grid(g, stride)?;
    let pred = accumulate_matrices(pred_rels);
    let gt = relative_to_first(gt_world);
    let mut va = VoxelGrid::new(voxel_size)?;
    let mut vb = VoxelGrid::new(voxel_size)?;
    for k in 1..gt.len() {
        for p in &grid {
            va.insert(&transform_point(&gt[k], p));
            vb.insert(&transform_point(&pred[k], p));
        }
    }
    dice(&va, &vb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Pixel stride for `eps_acc` and `eps_dice`.
    pub stride: usize,
    pub voxel_size_mm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { stride: 4, voxel_size_mm: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eps_frame: f64,
    pub eps_acc: f64,
    pub eps_dice: f64,
    pub eps_drift: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["eps_frame", "eps_acc", "eps_dice", "eps_drift"];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "eps_frame" => Some(self.eps_frame),
            "eps_acc" => Some(self.eps_acc),
            "eps_dice" => Some(self.eps_dice),
            "eps_drift" => Some(self.eps_drift),
            _ => None,
        }
    }
}

pub fn scan_metrics(
    pred_rels: &[RigidTransform],
    gt_world: &[RigidTransform],
    g: &FrameGeometry,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    let gt_rels = consecutive_relatives(gt_world);
    Ok(Metrics {
        eps_frame: eps_frame(pred_rels, &gt_rels, g)?,
        eps_acc: eps_acc(pred_rels, gt_world, g, cfg.stride)?,
        eps_dice: eps_dice(pred_rels, gt_world, g, cfg.voxel_size_mm, cfg.stride)?,
        eps_drift: eps_drift(pred_rels, gt_world, g)?,
    })
}

/// Anything that maps a window of `window_len()` frames of a scan, starting
/// at `start`, to the `window_len() - 1` relative transforms between them.
pub trait PosePredictor {
    fn window_len(&self) -> usize;
    fn predict_window(&self, scan: &ScanRecord, start: usize) -> Result<Vec<RigidTransform>>;
}

impl PosePredictor for Model {
    fn window_len(&self) -> usize {
        self.config.seq_len
    }

    fn predict_window(&self, scan: &ScanRecord, start: usize) -> Result<Vec<RigidTransform>> {
        self.predict_relative_poses(&scan.frames[start..start + self.config.seq_len])
    }
}

/// Returns the ground-truth transforms; the perfect predictor.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthPredictor {
    pub m: usize,
}

impl PosePredictor for GroundTruthPredictor {
    fn window_len(&self) -> usize {
        self.m
    }

    fn predict_window(&self, scan: &ScanRecord, start: usize) -> Result<Vec<RigidTransform>> {
        Ok(consecutive_relatives(&scan.world_poses[start..start + self.m]))
    }
}

/// Window start frames covering every adjacent pair of an `n`-frame scan
/// exactly once: consecutive windows share one boundary frame, and a final
/// right-aligned window supplies whatever pairs remain.
pub fn window_starts(n: usize, m: usize) -> Vec<usize> {
    if m < 2 || n < m {
        return Vec::new();
    }
    let step = m - 1;
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|s| s + m <= n).collect();
    let covered = starts.last().map_or(0, |s| s + step);
    if covered < n - 1 {
        starts.push(n - m);
    }
    starts
}

/// Scan-wide relative transforms stitched from windowed predictions.
pub fn predict_scan(predictor: &impl PosePredictor, scan: &ScanRecord) -> Result<Vec<RigidTransform>> {
    let n = scan.n_frames();
    let m = predictor.window_len();
    if n < m {
        return Err(Error::InsufficientData(format!("scan {} shorter than window {m}", scan.scan_id)));
    }
    let mut rels = Vec::with_capacity(n - 1);
    for start in window_starts(n, m) {
        let window = predictor.predict_window(scan, start)?;
        let already = rels.len();
        // Pairs start..start+m-1; keep only those not yet covered.
        let skip = already - start;
        rels.extend_from_slice(&window[skip..]);
    }
    debug_assert_eq!(rels.len(), n - 1);
    Ok(rels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub scan_id: String,
    pub n_frames: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: String,
    pub eval: EvalConfig,
    pub scans: Vec<ScanResult>,
    /// Scans shorter than the model window.
    pub skipped: Vec<String>,
    /// Mean and population std over scans, per metric name.
    pub aggregate: BTreeMap<String, MeanStd>,
}

impl MetricsReport {
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.scans.iter().filter_map(|s| s.metrics.get(metric)).collect()
    }

    pub fn mean(&self, metric: &str) -> f64 {
        self.aggregate.get(metric).map_or(f64::NAN, |m| m.mean)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub const CSV_HEADER: &'static str = "condition,scan_id,n_frames,eps_frame,eps_acc,eps_dice,eps_drift";

    pub fn write_csv_rows(&self, w: &mut impl Write) -> Result<()> {
        for s in &self.scans {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.condition,
                s.scan_id,
                s.n_frames,
                s.metrics.eps_frame,
                s.metrics.eps_acc,
                s.metrics.eps_dice,
                s.metrics.eps_drift
            )?;
        }
        Ok(())
    }
}

pub fn aggregate(scans: &[ScanResult]) -> BTreeMap<String, MeanStd> {
    Metrics::NAMES
        .iter()
        .map(|name| {
            let v: Vec<f64> = scans.iter().filter_map(|s| s.metrics.get(name)).collect();
            (name.to_string(), mean_std(&v))
        })
        .collect()
}

/// Evaluates a predictor over whole scans. Scans shorter than its window are
/// skipped and listed in the report.
pub fn evaluate_predictor(
    predictor: &impl PosePredictor,
    scans: &[impl AsRef<ScanRecord>],
    cfg: &EvalConfig,
    condition: &str,
) -> Result<MetricsReport> {
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for scan in scans {
        let scan = scan.as_ref();
        if scan.n_frames() < predictor.window_len() || scan.n_frames() < 2 {
            skipped.push(scan.scan_id.clone());
            continue;
        }
        let rels = predict_scan(predictor, scan)?;
        let metrics = scan_metrics(&rels, &scan.world_poses, &scan.geometry, cfg)?;
        results.push(ScanResult { scan_id: scan.scan_id.clone(), n_frames: scan.n_frames(), metrics });
    }
    if results.is_empty() {
        return Err(Error::InsufficientData("no evaluable scans".into()));
    }
    Ok(MetricsReport {
        condition: condition.to_string(),
        eval: *cfg,
        aggregate: aggregate(&results),
        scans: results,
        skipped,
    })
}

pub fn evaluate_model(
    model: &Model,
    scans: &[impl AsRef<ScanRecord>],
    cfg: &EvalConfig,
    condition: &str,
) -> Result<MetricsReport> {
    evaluate_predictor(model, scans, cfg, condition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose, invert};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_rel(rng: &mut impl Rng, scale: f64) -> RigidTransform {
        RigidTransform {
            rot: std::array::from_fn(|_| rng.random_range(-0.2..0.2) * scale),
            trans: std::array::from_fn(|_| rng.random_range(-3.0..3.0) * scale),
        }
    }

    fn random_world(rng: &mut impl Rng, n: usize) -> Vec<RigidTransform> {
        let mut w = vec![rand_rel(rng, 5.0)];
        for _ in 1..n {
            let next = compose(w.last().unwrap(), &rand_rel(rng, 1.0));
            w.push(next);
        }
        w
    }

    fn g() -> FrameGeometry {
        FrameGeometry::new(6, 5, 0.7).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let world = random_world(&mut rng, 5);
        let rels = consecutive_relatives(&world);
        let m = scan_metrics(&rels, &world, &g(), &EvalConfig { stride: 1, voxel_size_mm: 0.5 }).unwrap();
        assert!(m.eps_frame < 1e-9 && m.eps_acc < 1e-9 && m.eps_drift < 1e-9);
        assert_eq!(m.eps_dice, 1.0);
    }

    #[test]
    fn three_four_five() {
        let gt = vec![RigidTransform::IDENTITY];
        let pred = vec![RigidTransform::from_translation([3.0, 4.0, 0.0])];
        assert!((eps_frame(&pred, &gt, &g()).unwrap() - 5.0).abs() < 1e-12);
        assert!(eps_frame(&pred, &[], &g()).is_err());
    }

    #[test]
    fn uniform_translation_offsets() {
        let world = vec![RigidTransform::IDENTITY; 2];
        let d = RigidTransform::from_translation([1.0, -2.0, 2.0]);
        assert!((eps_acc(&[d], &world, &g(), 1).unwrap() - 3.0).abs() < 1e-12);
        assert!((eps_drift(&[d], &world, &g()).unwrap() - 3.0).abs() < 1e-12);

        let n = 9;
        let world = vec![RigidTransform::IDENTITY; n];
        let pred = vec![RigidTransform::from_translation([0.0, 0.0, 0.4]); n - 1];
        assert!((eps_drift(&pred, &world, &g()).unwrap() - 0.4 * (n - 1) as f64).abs() < 1e-12);
        assert!(eps_drift(&pred[1..], &world, &g()).is_err());
    }

    #[test]
    fn far_displacement_has_zero_overlap() {
        let world = vec![RigidTransform::IDENTITY, RigidTransform::from_translation([0.0, 0.0, 1.0])];
        let pred = vec![RigidTransform::from_translation([100.0, 0.0, 1.0])];
        assert_eq!(eps_dice(&pred, &world, &g(), 1.0, 1).unwrap(), 0.0);
    }

    /// Brute-force oracles written directly from the definitions.
    fn oracle(pred: &[RigidTransform], world: &[RigidTransform], geo: &FrameGeometry, vox: f64) -> [f64; 4] {
        let corners: Vec<Point3<f64>> = (0..geo.height_px)
            .flat_map(|r| (0..geo.width_px).map(move |c| (r, c)))
            .filter(|&(r, c)| (r == 0 || r == geo.height_px - 1) && (c == 0 || c == geo.width_px - 1))
            .map(|(r, c)| geo.pixel_point(r, c))
            .collect();
        let pixels: Vec<Point3<f64>> = (0..geo.height_px)
            .flat_map(|r| (0..geo.width_px).map(move |c| (r, c)))
            .map(|(r, c)| geo.pixel_point(r, c))
            .collect();
        let apply = |m: &Matrix4<f64>, p: &Point3<f64>| {
            let v = m * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            Point3::new(v.x, v.y, v.z)
        };
        let mut frame = 0.0;
        for k in 0..pred.len() {
            let t = (invert(&world[k]).matrix()) * world[k + 1].matrix();
            let p = pred[k].matrix();
            frame += corners.iter().map(|c| (apply(&t, c) - apply(&p, c)).norm()).sum::<f64>() / 4.0;
        }
        frame /= pred.len() as f64;

        let mut pm = vec![Matrix4::identity()];
        for r in pred {
            let next = pm.last().unwrap() * r.matrix();
            pm.push(next);
        }
        let w0 = world[0].matrix().try_inverse().unwrap();
        let gm: Vec<Matrix4<f64>> = world.iter().map(|w| w0 * w.matrix()).collect();

        let mut acc = 0.0;
        let mut a_vox: Vec<[i64; 3]> = Vec::new();
        let mut b_vox: Vec<[i64; 3]> = Vec::new();
        let key = |p: Point3<f64>| [(p.x / vox).floor() as i64, (p.y / vox).floor() as i64, (p.z / vox).floor() as i64];
        for k in 1..world.len() {
            let mut s = 0.0;
            for px in &pixels {
                let (a, b) = (apply(&gm[k], px), apply(&pm[k], px));
                s += (a - b).norm();
                a_vox.push(key(a));
                b_vox.push(key(b));
            }
            acc += s / pixels.len() as f64;
        }
        acc /= (world.len() - 1) as f64;
        a_vox.sort();
        a_vox.dedup();
        b_vox.sort();
        b_vox.dedup();
        let common = a_vox.iter().filter(|v| b_vox.binary_search(v).is_ok()).count();
        let dice = 2.0 * common as f64 / (a_vox.len() + b_vox.len()) as f64;

        let last = world.len() - 1;
        let drift = corners.iter().map(|c| (apply(&gm[last], c) - apply(&pm[last], c)).norm()).sum::<f64>() / 4.0;
        [frame, acc, dice, drift]
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geo = g();
        for _ in 0..10 {
            let n = rng.random_range(3..=5);
            let world = random_world(&mut rng, n);
            let pred: Vec<_> = consecutive_relatives(&world)
                .iter()
                .map(|r| compose(r, &rand_rel(&mut rng, 0.1)))
                .collect();
            let m = scan_metrics(&pred, &world, &geo, &EvalConfig { stride: 1, voxel_size_mm: 0.8 }).unwrap();
            let [f, a, d, dr] = oracle(&pred, &world, &geo, 0.8);
            assert!((m.eps_frame - f).abs() < 1e-10);
            assert!((m.eps_acc - a).abs() < 1e-9);
            assert_eq!(m.eps_dice, d);
            assert!((m.eps_drift - dr).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_both_chains_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let world = random_world(&mut rng, 6);
        let pred: Vec<_> = consecutive_relatives(&world).iter().map(|r| compose(r, &rand_rel(&mut rng, 0.2))).collect();
        let shift = rand_rel(&mut rng, 10.0);
        let moved: Vec<_> = world.iter().map(|w| compose(&shift, w)).collect();
        let cfg = EvalConfig { stride: 2, voxel_size_mm: 1.0 };
        let a = scan_metrics(&pred, &world, &g(), &cfg).unwrap();
        let b = scan_metrics(&pred, &moved, &g(), &cfg).unwrap();
        assert!((a.eps_frame - b.eps_frame).abs() < 1e-9);
        assert!((a.eps_acc - b.eps_acc).abs() < 1e-9);
        assert!((a.eps_drift - b.eps_drift).abs() < 1e-9);
        assert_eq!(a.eps_dice, b.eps_dice);
    }

    #[test]
    fn dice_falls_with_offset() {
        let geo = FrameGeometry::new(16, 16, 0.5).unwrap();
        let world: Vec<_> = (0..10).map(|k| RigidTransform::from_translation([0.0, 0.0, k as f64 * 0.5])).collect();
        let gt = consecutive_relatives(&world);
        let mut last = f64::INFINITY;
        for off in [0.0, 0.6, 1.7, 4.0, 20.0] {
            let mut pred = gt.clone();
            pred[0] = compose(&RigidTransform::from_translation([off, 0.0, 0.0]), &pred[0]);
            let d = eps_dice(&pred, &world, &geo, 1.0, 1).unwrap();
            assert!(d <= last);
            last = d;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn drift_bounded_by_worst_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let world = random_world(&mut rng, 8);
        let pred: Vec<_> = consecutive_relatives(&world).iter().map(|r| compose(r, &rand_rel(&mut rng, 0.1))).collect();
        let drift = eps_drift(&pred, &world, &g()).unwrap();
        let worst = (1..world.len())
            .map(|k| eps_drift(&pred[..k], &world[..=k], &g()).unwrap())
            .fold(0.0, f64::max);
        assert!(drift <= worst + 1e-12);
    }

    #[test]
    fn empty_voxel_sets_violate_contract() {
        let a = VoxelGrid::new(1.0).unwrap();
        assert!(matches!(dice(&a, &a), Err(Error::ContractViolation(_))));
        assert!(VoxelGrid::new(0.0).is_err());
    }

    #[test]
    fn windows_cover_every_pair_once() {
        assert_eq!(window_starts(10, 4), vec![0, 3, 6]);
        assert_eq!(window_starts(11, 4), vec![0, 3, 6, 7]);
        assert_eq!(window_starts(4, 4), vec![0]);
        assert!(window_starts(3, 4).is_empty());
        for n in 2..40 {
            for m in 2..=n {
                let starts = window_starts(n, m);
                let mut covered = 0;
                for s in starts {
                    assert!(s <= covered && s + m <= n);
                    covered = s + m - 1;
                }
                assert_eq!(covered, n - 1);
            }
        }
    }

    fn tiny_scan(n: usize) -> ScanRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let geometry = g();
        ScanRecord {
            scan_id: format!("t{n}"),
            subject_id: 0,
            forearm: 0,
            protocol: crate::phantom::ProtocolSpec::new(
                crate::phantom::Shape::Straight,
                crate::phantom::Orientation::Perpendicular,
                10.0,
                0.0,
            )
            .unwrap(),
            geometry,
            subject_seed: 0,
            frame_seed: 0,
            speckle_sigma: 0.0,
            frames: vec![vec![0.0; geometry.pixel_count()]; n],
            world_poses: random_world(&mut rng, n),
        }
    }

    #[test]
    fn ground_truth_predictor_is_perfect() {
        let scans: Vec<_> = [7, 12, 3, 9].iter().map(|&n| std::sync::Arc::new(tiny_scan(n))).collect();
        let report = evaluate_predictor(&GroundTruthPredictor { m: 4 }, &scans, &EvalConfig::default(), "oracle").unwrap();
        assert_eq!(report.skipped, vec!["t3"]);
        assert_eq!(report.scans.len(), 3);
        for s in &report.scans {
            assert!(s.metrics.eps_frame < 1e-9 && s.metrics.eps_acc < 1e-9 && s.metrics.eps_drift < 1e-9);
            assert_eq!(s.metrics.eps_dice, 1.0);
        }
        let short: Vec<_> = vec![std::sync::Arc::new(tiny_scan(3))];
        assert!(matches!(
            evaluate_predictor(&GroundTruthPredictor { m: 4 }, &short, &EvalConfig::default(), "x"),
            Err(Error::InsufficientData(_))
        ));
    }

    mod props {
        use super::*;
        use crate::geometry::compose;
        use proptest::prelude::*;

        fn step() -> impl Strategy<Value = RigidTransform> {
            (prop::array::uniform3(-0.2..0.2f64), prop::array::uniform3(-3.0..3.0f64))
                .prop_map(|(rot, trans)| RigidTransform { rot, trans })
        }

        fn world(steps: &[RigidTransform], start: RigidTransform) -> Vec<RigidTransform> {
            let mut w = vec![start];
            for s in steps {
                let next = compose(w.last().unwrap(), s);
                w.push(next);
            }
            w
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn metrics_are_invariant_to_a_common_world_move(
                gt in prop::collection::vec(step(), 2..6),
                noise in prop::collection::vec(step(), 6),
                start in step(),
                mv in (prop::array::uniform3(-1.4..1.4f64), prop::array::uniform3(-40.0..40.0f64)),
            ) {
                let g = FrameGeometry::new(9, 11, 0.7).unwrap();
                let cfg = EvalConfig { stride: 2, voxel_size_mm: 1.0 };
                let mv = RigidTransform { rot: mv.0, trans: mv.1 };
                let w = world(&gt, start);
                let moved: Vec<_> = w.iter().map(|p| compose(&mv, p)).collect();
                let pred: Vec<_> = gt.iter().zip(&noise).map(|(a, b)| compose(a, &RigidTransform {
                    rot: b.rot.map(|v| v * 0.1),
                    trans: b.trans.map(|v| v * 0.3),
                })).collect();
                let a = scan_metrics(&pred, &w, &g, &cfg).unwrap();
                let b = scan_metrics(&pred, &moved, &g, &cfg).unwrap();
                for name in Metrics::NAMES {
                    prop_assert!((a.get(name).unwrap() - b.get(name).unwrap()).abs() < 1e-9, "{name}");
                }
                prop_assert!(a.eps_dice >= 0.0 && a.eps_dice <= 1.0);
            }

            #[test]
            fn exact_prediction_scores_zero(gt in prop::collection::vec(step(), 1..6), start in step()) {
                let g = FrameGeometry::new(8, 8, 0.5).unwrap();
                let w = world(&gt, start);
                let rels = consecutive_relatives(&w);
                let m = scan_metrics(&rels, &w, &g, &EvalConfig { stride: 1, voxel_size_mm: 0.5 }).unwrap();
                prop_assert!(m.eps_frame < 1e-9 && m.eps_acc < 1e-9 && m.eps_drift < 1e-9);
                prop_assert_eq!(m.eps_dice, 1.0);
            }
        }
    }
}
