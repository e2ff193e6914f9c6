//! Scan-level splits, variance-reduction subsets, labels and subsequence
//! sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, RigidTransform};
use crate::phantom::{read_scan, ScanRecord, Shape};
use crate::seeds;

pub type Scan = Arc<ScanRecord>;

pub const SCAN_EXTENSION: &str = "fhscan";

/// Train/val/test = 3:1:1 at whole-scan granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<Scan>,
    pub val: Vec<Scan>,
    pub test: Vec<Scan>,
}

impl Split {
    pub fn ids(&self) -> SplitIds {
        SplitIds {
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn ids(scans: &[Scan]) -> Vec<String> {
    scans.iter().map(|s| s.scan_id.clone()).collect()
}

/// Split sizes: floor(0.6 n), floor(0.2 n), remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 3 / 5;
    let val = n / 5;
    (train, val, n - train - val)
}

pub fn split_scans(scans: &[Scan], spec: &SplitSpec) -> Result<Split> {
    let n = scans.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "splitting needs at least 5 scans, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, seeds::SPLIT, 0));
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(n);
    let pick = |idx: &[usize]| idx.iter().map(|&i| scans[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarianceMode {
    All,
    Straight,
    #[serde(rename = "C-S")]
    CS,
    Sub25,
    Sub50,
    Sub75,
    Frm50,
    Frm75,
}

impl VarianceMode {
    pub const ALL: [VarianceMode; 8] = [
        VarianceMode::All,
        VarianceMode::Straight,
        VarianceMode::CS,
        VarianceMode::Sub25,
        VarianceMode::Sub50,
        VarianceMode::Sub75,
        VarianceMode::Frm50,
        VarianceMode::Frm75,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VarianceMode::All => "All",
            VarianceMode::Straight => "Straight",
            VarianceMode::CS => "C-S",
            VarianceMode::Sub25 => "Sub25",
            VarianceMode::Sub50 => "Sub50",
            VarianceMode::Sub75 => "Sub75",
            VarianceMode::Frm50 => "Frm50",
            VarianceMode::Frm75 => "Frm75",
        }
    }
}

impl fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VarianceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VarianceMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variance mode {s:?}")))
    }
}

/// Distinct subject ids in a seeded order. Subject subsets take prefixes of
/// this order, so smaller subsets nest inside larger ones.
pub fn subject_order(scans: &[Scan], seed: u64) -> Vec<usize> {
    let mut subjects: Vec<usize> = scans
        .iter()
        .map(|s| s.subject_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::SUBSET, 0));
    subjects.shuffle(&mut rng);
    subjects
}

pub fn apply_variance_mode(train: &[Scan], mode: VarianceMode, seed: u64) -> Result<Vec<Scan>> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let subjects = |fraction: f64| -> Vec<Scan> {
        let order = subject_order(train, seed);
        let keep = ((fraction * order.len() as f64).ceil() as usize).max(1);
        let kept: BTreeSet<usize> = order[..keep].iter().copied().collect();
        train
            .iter()
            .filter(|s| kept.contains(&s.subject_id))
            .cloned()
            .collect()
    };
    let frames = |fraction: f64| -> Vec<Scan> {
        train
            .iter()
            .map(|s| {
                let n = (fraction * s.n_frames() as f64).ceil() as usize;
                Arc::new(s.truncated(n))
            })
            .collect()
    };
    let out: Vec<Scan> = match mode {
        VarianceMode::All => train.to_vec(),
        VarianceMode::Straight => train
            .iter()
            .filter(|s| s.protocol.shape == Shape::Straight)
            .cloned()
            .collect(),
        VarianceMode::CS => train
            .iter()
            .filter(|s| s.protocol.shape != Shape::Straight)
            .cloned()
            .collect(),
        VarianceMode::Sub25 => subjects(0.25),
        VarianceMode::Sub50 => subjects(0.50),
        VarianceMode::Sub75 => subjects(0.75),
        VarianceMode::Frm50 => frames(0.50),
        VarianceMode::Frm75 => frames(0.75),
    };
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("variance mode {mode} selects no scans")));
    }
    Ok(out)
}

/// Class indices for the two privileged tasks. Subject classes are the
/// distinct training subjects, in ascending id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub subjects: Vec<usize>,
    /// 3 (shape) or 6 (shape x orientation).
    pub n_protocol: usize,
}

impl LabelSpace {
    pub fn from_training(train: &[Scan], n_protocol: usize) -> Result<Self> {
        if n_protocol != 3 && n_protocol != 6 {
            return Err(Error::InvalidParameter(format!(
                "protocol task has 3 or 6 classes, got {n_protocol}"
            )));
        }
        let subjects: Vec<usize> = train
            .iter()
            .map(|s| s.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(LabelSpace {
            subjects,
            n_protocol,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// `None` for subjects never seen in training.
    pub fn subject_class(&self, subject_id: usize) -> Option<usize> {
        self.subjects.binary_search(&subject_id).ok()
    }

    pub fn protocol_class(&self, scan: &ScanRecord) -> usize {
        scan.protocol.class_id(self.n_protocol)
    }
}

pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

/// `m` consecutive frames of one scan with their `m - 1` relative targets
/// and privileged labels.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub scan: Scan,
    pub start: usize,
    pub len: usize,
    pub targets: Vec<RigidTransform>,
    pub subject_class: Option<usize>,
    pub protocol_class: usize,
}

impl SequenceSample {
    pub fn frames(&self) -> &[Vec<f32>] {
        &self.scan.frames[self.start..self.start + self.len]
    }
}

pub fn sample_at(scan: &Scan, start: usize, m: usize, labels: &LabelSpace) -> Result<SequenceSample> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!("sequence length must be >= 2, got {m}")));
    }
    if start + m > scan.n_frames() {
        return Err(Error::InsufficientData(format!(
            "scan {} has {} frames, window needs {}..{}",
            scan.scan_id,
            scan.n_frames(),
            start,
            start + m
        )));
    }
    let w = &scan.world_poses[start..start + m];
    Ok(SequenceSample {
        scan: scan.clone(),
        start,
        len: m,
        targets: w.windows(2).map(|p| relative_pose(&p[0], &p[1])).collect(),
        subject_class: labels.subject_class(scan.subject_id),
        protocol_class: labels.protocol_class(scan),
    })
}

pub fn sample_subsequence(
    scan: &Scan,
    m: usize,
    rng: &mut impl Rng,
    labels: &LabelSpace,
) -> Result<SequenceSample> {
    if scan.n_frames() < m {
        return Err(Error::InsufficientData(format!(
            "scan {} has {} frames, fewer than {m}",
            scan.scan_id,
            scan.n_frames()
        )));
    }
    let start = rng.random_range(0..=scan.n_frames() - m);
    sample_at(scan, start, m, labels)
}

/// Scans long enough for windows of `m` frames, plus the ids excluded.
#[derive(Debug, Clone)]
pub struct SamplingPool {
    pub scans: Vec<Scan>,
    pub skipped: Vec<String>,
    pub m: usize,
}

impl SamplingPool {
    pub fn new(scans: &[Scan], m: usize) -> Self {
        let (keep, skip): (Vec<_>, Vec<_>) = scans.iter().cloned().partition(|s| s.n_frames() >= m);
        SamplingPool {
            scans: keep,
            skipped: ids(&skip),
            m,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

/// Scan ids per split and per variance mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split_seed: u64,
    pub subset_seed: u64,
    pub split: SplitIds,
    pub modes: BTreeMap<String, Vec<String>>,
}

impl SplitManifest {
    pub fn build(split: &Split, split_seed: u64, subset_seed: u64) -> Self {
        let modes = VarianceMode::ALL
            .into_iter()
            .filter_map(|m| {
                apply_variance_mode(&split.train, m, subset_seed)
                    .ok()
                    .map(|s| (m.name().to_string(), ids(&s)))
            })
            .collect();
        SplitManifest {
            split_seed,
            subset_seed,
            split: split.ids(),
            modes,
        }
    }
}

/// Loads every scan container in `dir`, sorted by file name.
pub fn load_scans(dir: &Path) -> Result<Vec<Scan>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == SCAN_EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no .{SCAN_EXTENSION} files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_scan(p).map(Arc::new)).collect()
}
