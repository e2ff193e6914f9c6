//! Procedural subjects, protocol trajectories and simulated scans.
//!
//! A subject is a sum of axis-aligned Gaussian blobs over a linear background
//! ramp, evaluated analytically at any point of its own (world) coordinates.
//! Probe paths start at the origin heading along +Z and bend in the X-Z
//! plane. Scans sample the field on each frame's pixel grid and apply
//! multiplicative log-normal speckle.

use std::f64::consts::FRAC_PI_2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, FrameGeometry, RigidTransform};
use crate::seeds;

/// Normalized squared distance beyond which a blob contributes nothing.
const BLOB_CUTOFF_SQ: f64 = 16.0;

/// Largest heading change a path may accumulate, keeping every pose away
/// from Euler gimbal lock.
pub const MAX_HEADING: f64 = FRAC_PI_2 - 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub axes: [f64; 3],
    pub amplitude: f64,
}

impl Blob {
    fn contribution(&self, p: &Point3<f64>) -> f64 {
        let mut q = 0.0;
        for i in 0..3 {
            let d = (p[i] - self.center[i]) / self.axes[i];
            q += d * d;
        }
        if q > BLOB_CUTOFF_SQ {
            0.0
        } else {
            self.amplitude * (-0.5 * q).exp()
        }
    }

    fn support_radius(&self) -> f64 {
        BLOB_CUTOFF_SQ.sqrt() * self.axes.iter().cloned().fold(0.0, f64::max)
    }
}

/// Axis-aligned box, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Extent {
    /// Covers every desk-default trajectory in both orientations.
    fn default() -> Self {
        Extent {
            min: [-30.0, -30.0, -15.0],
            max: [65.0, 30.0, 95.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectField {
    pub seed: u64,
    /// Anatomy class this field belongs to.
    pub subject_id: usize,
    /// 0 or 1; the second forearm is the first mirrored about `x = 0`.
    pub forearm: usize,
    pub blobs: Vec<Blob>,
    /// `background[0] + background[1..4] . p`
    pub background: [f64; 4],
}

impl SubjectField {
    pub fn zero() -> Self {
        SubjectField {
            seed: 0,
            subject_id: 0,
            forearm: 0,
            blobs: Vec::new(),
            background: [0.0; 4],
        }
    }

    pub fn with_identity(mut self, subject_id: usize, forearm: usize) -> Self {
        self.subject_id = subject_id;
        self.forearm = forearm;
        self
    }

    /// Mirror image about the `x = 0` plane (left vs right forearm).
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.blobs {
            b.center[0] = -b.center[0];
        }
        out.background[1] = -out.background[1];
        out.forearm = 1 - self.forearm.min(1);
        out
    }

    fn raw_intensity<'a>(&self, p: &Point3<f64>, blobs: impl Iterator<Item = &'a Blob>) -> f64 {
        let bg = self.background[0]
            + self.background[1] * p.x
            + self.background[2] * p.y
            + self.background[3] * p.z;
        let v = bg + blobs.map(|b| b.contribution(p)).sum::<f64>();
        v.clamp(0.0, 1.0)
    }

    /// Noise-free intensity at a world point, clamped to [0, 1].
    pub fn intensity(&self, p: &Point3<f64>) -> f64 {
        self.raw_intensity(p, self.blobs.iter())
    }
}

pub fn make_subject(seed: u64, k_blobs: usize, extent: &Extent) -> Result<SubjectField> {
    if k_blobs == 0 {
        return Err(Error::InvalidParameter("k_blobs must be >= 1".into()));
    }
    for i in 0..3 {
        if !(extent.max[i] > extent.min[i]) {
            return Err(Error::InvalidParameter(format!("degenerate extent {extent:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::SUBJECT, 0));
    let blobs = (0..k_blobs)
        .map(|_| Blob {
            center: std::array::from_fn(|i| rng.random_range(extent.min[i]..extent.max[i])),
            axes: std::array::from_fn(|_| rng.random_range(1.5..6.0)),
            amplitude: rng.random_range(0.25..0.9),
        })
        .collect();
    let background = [
        rng.random_range(0.05..0.15),
        rng.random_range(-1e-3..1e-3),
        rng.random_range(-2e-3..2e-3),
        rng.random_range(-1e-3..1e-3),
    ];
    Ok(SubjectField {
        seed,
        subject_id: 0,
        forearm: 0,
        blobs,
        background,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Straight,
    C,
    S,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Straight, Shape::C, Shape::S];

    pub fn index(self) -> usize {
        match self {
            Shape::Straight => 0,
            Shape::C => 1,
            Shape::S => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Perpendicular,
    Parallel,
}

impl Orientation {
    pub const ALL: [Orientation; 2] = [Orientation::Perpendicular, Orientation::Parallel];

    pub fn index(self) -> usize {
        match self {
            Orientation::Perpendicular => 0,
            Orientation::Parallel => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub shape: Shape,
    pub orientation: Orientation,
    pub path_length_mm: f64,
    /// 1/mm; zero exactly for straight paths.
    pub curvature: f64,
}

impl ProtocolSpec {
    pub fn new(shape: Shape, orientation: Orientation, path_length_mm: f64, curvature: f64) -> Result<Self> {
        let p = ProtocolSpec {
            shape,
            orientation,
            path_length_mm,
            curvature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.path_length_mm.is_finite() && self.path_length_mm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "path length must be positive, got {}",
                self.path_length_mm
            )));
        }
        if !self.curvature.is_finite() {
            return Err(Error::InvalidParameter("curvature must be finite".into()));
        }
        match (self.shape, self.curvature == 0.0) {
            (Shape::Straight, false) => {
                return Err(Error::InvalidParameter("straight paths have zero curvature".into()))
            }
            (Shape::C | Shape::S, true) => {
                return Err(Error::InvalidParameter("curved paths need non-zero curvature".into()))
            }
            _ => {}
        }
        let turn = match self.shape {
            Shape::Straight => 0.0,
            Shape::C => self.curvature.abs() * self.path_length_mm,
            Shape::S => self.curvature.abs() * self.path_length_mm / 2.0,
        };
        if turn >= MAX_HEADING {
            return Err(Error::InvalidParameter(format!(
                "path turns {turn:.3} rad, limit is {MAX_HEADING:.3}"
            )));
        }
        Ok(())
    }

    /// Three-class label: the path shape.
    pub fn class_id_3(&self) -> usize {
        self.shape.index()
    }

    /// Six-class label: shape index + 3 * orientation index (p1..p6 minus one).
    pub fn class_id_6(&self) -> usize {
        self.shape.index() + 3 * self.orientation.index()
    }

    pub fn class_id(&self, n_classes: usize) -> usize {
        if n_classes == 3 {
            self.class_id_3()
        } else {
            self.class_id_6()
        }
    }

    fn curvature_at(&self, s: f64) -> f64 {
        match self.shape {
            Shape::Straight => 0.0,
            Shape::C => self.curvature,
            Shape::S if s < self.path_length_mm / 2.0 => self.curvature,
            Shape::S => -self.curvature,
        }
    }

    /// Heading (rotation about +Y from +Z) and centre-line position after
    /// arc length `s`, integrated in closed form over constant-curvature
    /// pieces.
    pub fn heading_and_position(&self, s: f64) -> (f64, Vector3<f64>) {
        let half = self.path_length_mm / 2.0;
        let pieces: &[(f64, f64)] = match self.shape {
            Shape::S => &[(0.0, half), (half, f64::INFINITY)],
            _ => &[(0.0, f64::INFINITY)],
        };
        let mut heading = 0.0;
        let mut pos = Vector3::zeros();
        for &(a, b) in pieces {
            if s <= a {
                break;
            }
            let ds = s.min(b) - a;
            let k = self.curvature_at(a);
            let next = heading + k * ds;
            if k == 0.0 {
                pos += ds * Vector3::new(heading.sin(), 0.0, heading.cos());
            } else {
                pos.x += (heading.cos() - next.cos()) / k;
                pos.z += (next.sin() - heading.sin()) / k;
            }
            heading = next;
        }
        (heading, pos)
    }
}

/// Probe poses along the protocol path: the image centre sits on the path
/// and the image normal follows the tangent. The parallel orientation
/// additionally rotates the image 90 degrees about the tangent.
pub fn protocol_trajectory(spec: &ProtocolSpec, n_frames: usize) -> Result<Vec<RigidTransform>> {
    if n_frames < 2 {
        return Err(Error::InvalidParameter(format!(
            "a trajectory needs at least 2 frames, got {n_frames}"
        )));
    }
    spec.validate()?;
    let step = spec.path_length_mm / (n_frames - 1) as f64;
    let roll = match spec.orientation {
        Orientation::Perpendicular => Rotation3::identity(),
        Orientation::Parallel => Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2),
    };
    Ok((0..n_frames)
        .map(|k| {
            let (heading, pos) = spec.heading_and_position(k as f64 * step);
            let r = Rotation3::from_axis_angle(&Vector3::y_axis(), heading) * roll;
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&pos);
            RigidTransform::from_matrix(&m)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub subject_id: usize,
    pub forearm: usize,
    pub protocol: ProtocolSpec,
    pub geometry: FrameGeometry,
    pub subject_seed: u64,
    pub frame_seed: u64,
    pub speckle_sigma: f64,
    /// Row-major `height x width` images with values in [0, 1].
    #[serde(skip)]
    pub frames: Vec<Vec<f32>>,
    /// Pixel-grid pose of each frame in subject coordinates.
    #[serde(skip)]
    pub world_poses: Vec<RigidTransform>,
}

impl ScanRecord {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Keeps only the first `n` frames and poses.
    pub fn truncated(&self, n: usize) -> ScanRecord {
        let mut out = self.clone();
        out.frames.truncate(n);
        out.world_poses.truncate(n);
        out
    }
}

pub fn render_scan(
    subject: &SubjectField,
    spec: &ProtocolSpec,
    n_frames: usize,
    geometry: &FrameGeometry,
    speckle_sigma: f64,
    frame_seed: u64,
) -> Result<ScanRecord> {
    geometry.validate()?;
    if !(speckle_sigma.is_finite() && speckle_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "speckle sigma must be >= 0, got {speckle_sigma}"
        )));
    }
    let to_center = RigidTransform::from_translation((-geometry.center().coords).into());
    let world_poses: Vec<RigidTransform> = protocol_trajectory(spec, n_frames)?
        .iter()
        .map(|probe| compose(probe, &to_center))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(subject.seed, seeds::SCAN, frame_seed));
    let frames = world_poses
        .iter()
        .map(|pose| {
            let mut img = sample_frame(subject, pose, geometry);
            if speckle_sigma > 0.0 {
                for v in &mut img {
                    let n: f64 = rng.sample(StandardNormal);
                    *v = (*v as f64 * (speckle_sigma * n).exp()).clamp(0.0, 1.0) as f32;
                }
            }
            img
        })
        .collect();

    Ok(ScanRecord {
        scan_id: String::new(),
        subject_id: subject.subject_id,
        forearm: subject.forearm,
        protocol: *spec,
        geometry: *geometry,
        subject_seed: subject.seed,
        frame_seed,
        speckle_sigma,
        frames,
        world_poses,
    })
}

/// Noise-free field values on a frame's pixel grid.
pub fn sample_frame(subject: &SubjectField, pose: &RigidTransform, geometry: &FrameGeometry) -> Vec<f32> {
    let r = pose.rotation();
    let t = pose.translation();
    let centre = pose.apply(&geometry.center());
    let half_diag = geometry.center().coords.norm();
    let near: Vec<&Blob> = subject
        .blobs
        .iter()
        .filter(|b| (Point3::from(b.center) - centre).norm() <= half_diag + b.support_radius())
        .collect();
    let mut img = Vec::with_capacity(geometry.pixel_count());
    for row in 0..geometry.height_px {
        for col in 0..geometry.width_px {
            let p = Point3::from(r * geometry.pixel_point(row, col).coords + t);
            img.push(subject.raw_intensity(&p, near.iter().copied()) as f32);
        }
    }
    img
}

/// Settings for a generated phantom dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    pub forearms_per_subject: usize,
    pub scans_per_protocol: usize,
    pub geometry: FrameGeometry,
    pub n_frames_range: [usize; 2],
    pub path_length_range: [f64; 2],
    pub curvature_range: [f64; 2],
    pub k_blobs: usize,
    pub extent: Extent,
    pub speckle_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_subjects: 10,
            forearms_per_subject: 2,
            scans_per_protocol: 1,
            geometry: FrameGeometry::default(),
            n_frames_range: [40, 120],
            path_length_range: [40.0, 80.0],
            curvature_range: [0.006, 0.012],
            k_blobs: 160,
            extent: Extent::default(),
            speckle_sigma: 0.15,
        }
    }
}

impl PhantomConfig {
    /// 19 subjects x 2 forearms x 6 protocols = 228 scans.
    pub fn paper_scale() -> Self {
        PhantomConfig {
            n_subjects: 19,
            ..Default::default()
        }
    }

    pub fn n_scans(&self) -> usize {
        self.n_subjects * self.forearms_per_subject * 6 * self.scans_per_protocol
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.n_subjects == 0 || self.scans_per_protocol == 0 {
            return Err(Error::InvalidParameter("empty dataset configuration".into()));
        }
        if !(1..=2).contains(&self.forearms_per_subject) {
            return Err(Error::InvalidParameter("forearms_per_subject must be 1 or 2".into()));
        }
        let [lo, hi] = self.n_frames_range;
        if lo < 2 || hi < lo {
            return Err(Error::InvalidParameter(format!("bad frame range {lo}..{hi}")));
        }
        let [a, b] = self.path_length_range;
        let [ka, kb] = self.curvature_range;
        if !(a > 0.0 && b >= a && ka > 0.0 && kb >= ka) {
            return Err(Error::InvalidParameter("bad path length or curvature range".into()));
        }
        if kb * b >= MAX_HEADING {
            return Err(Error::InvalidParameter(
                "curvature and path length ranges allow near-vertical headings".into(),
            ));
        }
        Ok(())
    }
}

pub fn scan_id(subject: usize, forearm: usize, protocol: &ProtocolSpec, rep: usize) -> String {
    format!(
        "s{subject:03}_f{forearm}_p{}_r{rep}",
        protocol.class_id_6() + 1
    )
}

/// Generates every scan of a dataset. Output order and content depend only on
/// `(config, seed)`.
pub fn generate_dataset(config: &PhantomConfig, seed: u64) -> Result<Vec<ScanRecord>> {
    config.validate()?;
    let mut jobs = Vec::with_capacity(config.n_scans());
    for subject in 0..config.n_subjects {
        let base = make_subject(
            seeds::derive(seed, seeds::SUBJECT, subject as u64),
            config.k_blobs,
            &config.extent,
        )?
        .with_identity(subject, 0);
        for forearm in 0..config.forearms_per_subject {
            for orientation in Orientation::ALL {
                for shape in Shape::ALL {
                    for rep in 0..config.scans_per_protocol {
                        let index = jobs.len() as u64;
                        jobs.push((base.clone(), forearm, shape, orientation, rep, index));
                    }
                }
            }
        }
    }
    jobs.into_par_iter()
        .map(|(base, forearm, shape, orientation, rep, index)| {
            let field = if forearm == 0 { base } else { base.mirrored() };
            let scan_seed = seeds::derive(seed, seeds::SCAN, index);
            let mut rng = ChaCha8Rng::seed_from_u64(scan_seed);
            let [nlo, nhi] = config.n_frames_range;
            let n_frames = rng.random_range(nlo..=nhi);
            let [llo, lhi] = config.path_length_range;
            let length = if lhi > llo { rng.random_range(llo..lhi) } else { llo };
            let [klo, khi] = config.curvature_range;
            let kappa = if khi > klo { rng.random_range(klo..khi) } else { klo };
            let curvature = if shape == Shape::Straight { 0.0 } else { kappa };
            let protocol = ProtocolSpec::new(shape, orientation, length, curvature)?;
            let mut scan = render_scan(
                &field,
                &protocol,
                n_frames,
                &config.geometry,
                config.speckle_sigma,
                scan_seed,
            )?;
            scan.scan_id = scan_id(field.subject_id, forearm, &protocol, rep);
            Ok(scan)
        })
        .collect()
}

const SCAN_MAGIC: &[u8; 8] = b"FHSCAN\x00\x01";
pub const SCAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ScanHeader {
    format_version: u32,
    #[serde(flatten)]
    record: ScanRecord,
    class_id_3: usize,
    class_id_6: usize,
    n_frames: usize,
}

/// Writes a scan container:
///
/// ```text
/// magic     8 bytes  "FHSCAN\0\x01"
/// hlen      u64 LE   header length in bytes
/// header    hlen     UTF-8 JSON (scan id, labels, protocol, geometry, seeds, N)
/// frames    N*H*W    f32 LE, frame-major, row-major within a frame
/// poses     N*6      f64 LE per frame: rz, ry, rx, tx, ty, tz
/// ```
pub fn write_scan(path: &Path, scan: &ScanRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_scan_to(&mut w, scan)?;
    w.flush()?;
    Ok(())
}

pub fn write_scan_to(w: &mut impl Write, scan: &ScanRecord) -> Result<()> {
    let header = ScanHeader {
        format_version: SCAN_FORMAT_VERSION,
        record: ScanRecord {
            frames: Vec::new(),
            world_poses: Vec::new(),
            ..scan.clone()
        },
        class_id_3: scan.protocol.class_id_3(),
        class_id_6: scan.protocol.class_id_6(),
        n_frames: scan.n_frames(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(SCAN_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for frame in &scan.frames {
        for v in frame {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for pose in &scan.world_poses {
        for v in pose.params() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_scan(path: &Path) -> Result<ScanRecord> {
    let mut r = BufReader::new(File::open(path)?);
    read_scan_from(&mut r).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

pub fn read_scan_from(r: &mut impl Read) -> Result<ScanRecord> {
    let bad = |reason: String| Error::Format {
        path: Default::default(),
        reason,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SCAN_MAGIC {
        return Err(bad("not a scan container".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: ScanHeader = serde_json::from_slice(&json)?;
    if header.format_version != SCAN_FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.format_version)));
    }
    let mut scan = header.record;
    let px = scan.geometry.pixel_count();
    let mut buf4 = [0u8; 4];
    scan.frames = (0..header.n_frames)
        .map(|_| {
            (0..px)
                .map(|_| {
                    r.read_exact(&mut buf4)?;
                    Ok(f32::from_le_bytes(buf4))
                })
                .collect::<Result<Vec<f32>>>()
        })
        .collect::<Result<_>>()?;
    let mut buf8 = [0u8; 8];
    scan.world_poses = (0..header.n_frames)
        .map(|_| {
            let mut p = [0.0; 6];
            for v in &mut p {
                r.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            RigidTransform::from_params(&p)
        })
        .collect::<Result<_>>()?;
    Ok(scan)
}
