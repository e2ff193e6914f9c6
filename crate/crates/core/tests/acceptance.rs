//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `FREEHAND_ACCEPTANCE_ONLY=1,2,5` runs a subset. The two directional
//! criteria (6 and 7) report their outcome but only fail the run when
//! `FREEHAND_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freehand::dataset::{sample_at, LabelSpace, Scan, VarianceMode};
use freehand::evaluation::{eps_acc, eps_dice, eps_drift, eps_frame};
use freehand::geometry::{compose, invert, relative_pose};
use freehand::harness::{self, AblationCondition, Dataset, ExperimentPlan, ABLATION_TABLE_HEADER};
use freehand::model::{Activation, Model, ModelConfig};
use freehand::phantom::{generate_dataset, PhantomConfig};
use freehand::training::{batch_loss, toy_descriptor_search, BiLevelConfig, RunConfig};
use freehand::{FrameGeometry, RigidTransform};

type M4 = [[f64; 4]; 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// Plain-array rigid transform algebra, independent of the library's.

fn rot_z(a: f64) -> M4 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0, 0.0], [s, c, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn rot_y(a: f64) -> M4 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s, 0.0], [0.0, 1.0, 0.0, 0.0], [-s, 0.0, c, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn rot_x(a: f64) -> M4 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0, 0.0], [0.0, c, -s, 0.0], [0.0, s, c, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn mul(a: &M4, b: &M4) -> M4 {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn oracle_matrix(t: &RigidTransform) -> M4 {
    let mut m = mul(&mul(&rot_z(t.rot[0]), &rot_y(t.rot[1])), &rot_x(t.rot[2]));
    for i in 0..3 {
        m[i][3] = t.trans[i];
    }
    m
}

fn oracle_inverse(m: &M4) -> M4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
        out[i][3] = -(0..3).map(|k| m[k][i] * m[k][3]).sum::<f64>();
    }
    out[3][3] = 1.0;
    out
}

fn apply(m: &M4, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3])
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn max_diff(a: &M4, t: &RigidTransform) -> f64 {
    let m = t.matrix();
    (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| (a[i][j] - m[(i, j)]).abs()).fold(0.0, f64::max)
}

fn random_transform(rng: &mut impl Rng) -> RigidTransform {
    RigidTransform {
        rot: [
            rng.random_range(-3.1..3.1),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.1..3.1),
        ],
        trans: std::array::from_fn(|_| rng.random_range(-50.0..50.0)),
    }
}

fn geometry_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ts: Vec<RigidTransform> = (0..1000).map(|_| random_transform(&mut rng)).collect();
    let mut worst = 0.0f64;
    for i in 0..ts.len() {
        let (a, b, c) = (&ts[i], &ts[(i + 1) % ts.len()], &ts[(i + 7) % ts.len()]);
        let (ma, mb, mc) = (oracle_matrix(a), oracle_matrix(b), oracle_matrix(c));
        worst = worst.max(max_diff(&ma, a));
        worst = worst.max(max_diff(&mul(&ma, &mb), &compose(a, b)));
        worst = worst.max(max_diff(&oracle_inverse(&ma), &invert(a)));
        let id = compose(a, &invert(a));
        worst = worst.max(max_diff(&mul(&ma, &oracle_inverse(&ma)), &id));
        worst = worst.max(max_diff(&mul(&oracle_inverse(&ma), &mb), &relative_pose(a, b)));
        let left = compose(&compose(a, b), c);
        let right = compose(a, &compose(b, c));
        worst = worst.max(max_diff(&mul(&mul(&ma, &mb), &mc), &left));
        worst = worst.max((left.matrix() - right.matrix()).abs().max());
        let back = RigidTransform::from_matrix(&a.matrix());
        worst = worst.max(max_diff(&ma, &back));
        let p = RigidTransform::from_params(&a.params()).unwrap();
        worst = worst.max(p.params().iter().zip(a.params()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-8 && secs < 10.0, format!("max deviation {worst:.2e}, {secs:.2} s"))
}

fn pixel_points(g: &FrameGeometry, stride: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::new();
    for r in (0..g.height_px).step_by(stride) {
        for c in (0..g.width_px).step_by(stride) {
            pts.push([c as f64 * g.spacing_mm, r as f64 * g.spacing_mm, 0.0]);
        }
    }
    pts
}

fn corner_points(g: &FrameGeometry) -> Vec<[f64; 3]> {
    let (w, h) = ((g.width_px - 1) as f64 * g.spacing_mm, (g.height_px - 1) as f64 * g.spacing_mm);
    vec![[0.0, 0.0, 0.0], [w, 0.0, 0.0], [0.0, h, 0.0], [w, h, 0.0]]
}

fn mean_dist(a: &M4, b: &M4, pts: &[[f64; 3]]) -> f64 {
    pts.iter().map(|&p| dist(apply(a, p), apply(b, p))).sum::<f64>() / pts.len() as f64
}

fn voxels(pts: impl Iterator<Item = [f64; 3]>, size: f64) -> BTreeSet<[i64; 3]> {
    pts.map(|p| p.map(|v| (v / size).floor() as i64)).collect()
}

fn metric_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (stride, voxel) = (3, 1.0);
    let mut worst = 0.0f64;
    let mut dice_mismatch = 0;
    for _ in 0..20 {
        let n = rng.random_range(3..=5);
        let g = FrameGeometry::new(rng.random_range(8..20), rng.random_range(8..20), rng.random_range(0.3..1.0)).unwrap();
        let mut world = vec![random_transform(&mut rng)];
        for _ in 1..n {
            let step = RigidTransform {
                rot: std::array::from_fn(|_| rng.random_range(-0.1..0.1)),
                trans: std::array::from_fn(|_| rng.random_range(-3.0..3.0)),
            };
            world.push(compose(world.last().unwrap(), &step));
        }
        let gt_rels: Vec<RigidTransform> = world.windows(2).map(|w| relative_pose(&w[0], &w[1])).collect();
        let pred: Vec<RigidTransform> = gt_rels
            .iter()
            .map(|t| RigidTransform {
                rot: std::array::from_fn(|i| t.rot[i] + rng.random_range(-0.05..0.05)),
                trans: std::array::from_fn(|i| t.trans[i] + rng.random_range(-1.0..1.0)),
            })
            .collect();

        let gw: Vec<M4> = world.iter().map(oracle_matrix).collect();
        let w0_inv = oracle_inverse(&gw[0]);
        let gt_rel_first: Vec<M4> = gw.iter().map(|w| mul(&w0_inv, w)).collect();
        let mut pred_acc = vec![oracle_matrix(&RigidTransform::IDENTITY)];
        for p in &pred {
            let next = mul(pred_acc.last().unwrap(), &oracle_matrix(p));
            pred_acc.push(next);
        }
        let corners = corner_points(&g);
        let pix = pixel_points(&g, stride);

        let frame_oracle = (0..n - 1)
            .map(|k| mean_dist(&mul(&oracle_inverse(&gw[k]), &gw[k + 1]), &oracle_matrix(&pred[k]), &corners))
            .sum::<f64>()
            / (n - 1) as f64;
        let acc_oracle = (1..n).map(|k| mean_dist(&gt_rel_first[k], &pred_acc[k], &pix)).sum::<f64>() / (n - 1) as f64;
        let drift_oracle = mean_dist(&gt_rel_first[n - 1], &pred_acc[n - 1], &corners);
        let a = voxels((1..n).flat_map(|k| pix.iter().map(move |&p| (k, p))).map(|(k, p)| apply(&gt_rel_first[k], p)), voxel);
        let b = voxels((1..n).flat_map(|k| pix.iter().map(move |&p| (k, p))).map(|(k, p)| apply(&pred_acc[k], p)), voxel);
        let dice_oracle = 2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64;

        worst = worst.max((eps_frame(&pred, &gt_rels, &g).unwrap() - frame_oracle).abs());
        worst = worst.max((eps_acc(&pred, &world, &g, stride).unwrap() - acc_oracle).abs());
        worst = worst.max((eps_drift(&pred, &world, &g).unwrap() - drift_oracle).abs());
        if eps_dice(&pred, &world, &g, voxel, stride).unwrap() != dice_oracle {
            dice_mismatch += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && dice_mismatch == 0 && secs < 60.0,
        format!("max deviation {worst:.2e}, dice mismatches {dice_mismatch}, {secs:.2} s"),
    )
}

fn small_scans(n_subjects: usize, hw: usize, seed: u64) -> Vec<Scan> {
    let cfg = PhantomConfig {
        n_subjects,
        geometry: FrameGeometry::new(hw, hw, 1.5).unwrap(),
        n_frames_range: [8, 10],
        k_blobs: 20,
        ..Default::default()
    };
    generate_dataset(&cfg, seed).unwrap().into_iter().map(Arc::new).collect()
}

fn small_model(scans: &[Scan], seq_len: usize, hw: usize, seed: u64) -> Model {
    let labels = LabelSpace::from_training(scans, 6).unwrap();
    let cfg = ModelConfig {
        seq_len,
        frame_height: hw,
        frame_width: hw,
        channels: vec![3, 4, 5],
        activation: Activation::Silu,
        main_hidden: 6,
        aux_classes: vec![labels.n_subjects(), 6],
    };
    Model::new(cfg, seed).unwrap()
}

fn gating_identity() -> Outcome {
    let scans = small_scans(2, 10, 3);
    let mut model = small_model(&scans, 4, 10, 9);
    let mut worst = 0.0f64;
    for scan in scans.iter().take(6) {
        let frames = &scan.frames[..4];
        for task in 0..2 {
            for tap in 0..3 {
                let mut m = model.clone();
                m.descriptors[task].alpha = (0..3).map(|i| if i == tap { 40.0 } else { -40.0 }).collect();
                let out = m.forward(frames).unwrap();
                for (a, b) in out.mixed[task].iter().zip(&out.branch_probs[task][tap]) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let chosen = model.finalize_branches();
    let out = model.forward(&scans[0].frames[..4]).unwrap();
    for (task, &tap) in chosen.iter().enumerate() {
        for (a, b) in out.mixed[task].iter().zip(&out.branch_probs[task][tap]) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst < 1e-8, format!("max deviation {worst:.2e} over 36 saturated cases and finalized branches"))
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let scans = small_scans(2, 10, 4);
    let labels = LabelSpace::from_training(&scans, 6).unwrap();
    let mut model = small_model(&scans, 4, 10, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in &mut model.descriptors {
        d.alpha.iter_mut().for_each(|a| *a = rng.random_range(-1.0..1.0));
    }
    let batch: Vec<_> = scans.iter().step_by(3).map(|s| sample_at(s, 2, 4, &labels).unwrap()).collect();
    let g = scans[0].geometry;
    let analytic = batch_loss(&model, &batch, &g, true).unwrap().grad;
    let loss = |m: &Model| batch_loss(m, &batch, &g, false).unwrap().loss.l_total;
    let h = 1e-6;
    let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(a.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut picked = BTreeSet::new();
    while picked.len() < 32 {
        picked.insert(rng.random_range(0..model.params.len()));
    }
    for &i in &picked {
        let mut m = model.clone();
        m.params[i] += h;
        let up = loss(&m);
        m.params[i] -= 2.0 * h;
        let down = loss(&m);
        worst = worst.max(rel(analytic.params[i], (up - down) / (2.0 * h)));
    }
    for task in 0..2 {
        for tap in 0..3 {
            let mut m = model.clone();
            m.descriptors[task].alpha[tap] += h;
            let up = loss(&m);
            m.descriptors[task].alpha[tap] -= 2.0 * h;
            let down = loss(&m);
            worst = worst.max(rel(analytic.alpha[task][tap], (up - down) / (2.0 * h)));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-3 && secs < 300.0,
        format!("max relative error {worst:.2e} over 32 parameters and 6 logits, {secs:.2} s"),
    )
}

fn toy_convergence() -> Outcome {
    let hits: Vec<bool> = (0..10).map(|s| toy_descriptor_search(s, 6, 200, 0.05, 8).final_argmax == 1).collect();
    let n = hits.iter().filter(|&&h| h).count();
    outcome(n >= 9, format!("correct branch selected in {n}/10 seeds"))
}

fn desk_dataset(dir: &Path) -> Dataset {
    harness::gen_data(&PhantomConfig::default(), 0, dir, false).unwrap();
    Dataset::open(dir).unwrap()
}

fn desk_run(data: &Path) -> RunConfig {
    RunConfig {
        data_dir: Some(data.to_path_buf()),
        optim: BiLevelConfig { max_epochs: 100, ..Default::default() },
        finetune_epochs: 20,
        ..Default::default()
    }
}

fn variance_direction(data: &Path, out: &Path) -> Outcome {
    let t0 = Instant::now();
    let plan = ExperimentPlan {
        data_dir: Some(data.to_path_buf()),
        seeds: vec![0, 1, 2],
        base: desk_run(data),
        modes: vec![VarianceMode::All, VarianceMode::Sub50, VarianceMode::Straight],
        ..Default::default()
    };
    let r = match harness::variance_sweep(&plan, out, true) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let (all, sub, straight) =
        (r.median(VarianceMode::All), r.median(VarianceMode::Sub50), r.median(VarianceMode::Straight));
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        r.complete && all <= sub && all <= straight && secs < 4.0 * 3600.0,
        format!("median eps_acc All {all:.3}, Sub50 {sub:.3}, Straight {straight:.3} mm, {:.1} min", secs / 60.0),
    )
}

fn privileged_direction(data: &Path, out: &Path) -> Outcome {
    let t0 = Instant::now();
    let plan = ExperimentPlan {
        data_dir: Some(data.to_path_buf()),
        seeds: vec![0, 1, 2],
        base: desk_run(data),
        conditions: vec![AblationCondition::NoBranch, AblationCondition::SixClass],
        ..Default::default()
    };
    let r = match harness::ablation(&plan, out, true) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let drift = |cond: AblationCondition, seed: u64| {
        r.cells.iter().find(|c| c.condition == cond && c.seed == seed).and_then(|c| c.median_eps_drift)
    };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in &plan.seeds {
        if let (Some(b), Some(n)) = (drift(AblationCondition::SixClass, *seed), drift(AblationCondition::NoBranch, *seed)) {
            wins += (b < n) as usize;
            pairs.push(format!("{b:.2} vs {n:.2}"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        r.complete && wins >= 2 && secs < 6.0 * 3600.0,
        format!(
            "branched beats no-branch median eps_drift in {wins}/3 seeds ({}), {:.1} min",
            pairs.join(", "),
            secs / 60.0
        ),
    )
}

fn tiny_plan(data: &Path) -> ExperimentPlan {
    ExperimentPlan {
        data_dir: Some(data.to_path_buf()),
        seeds: vec![0, 1],
        m_values: vec![3, 4],
        base: RunConfig {
            data_dir: Some(data.to_path_buf()),
            seq_len: 3,
            channels: vec![4, 6, 8],
            main_hidden: 8,
            optim: BiLevelConfig { max_epochs: 3, batch_size: 4, ..Default::default() },
            finetune_epochs: 1,
            ..Default::default()
        },
        ..Default::default()
    }
    .with_master_seed(42)
}

fn tiny_dataset(dir: &Path) {
    let cfg = PhantomConfig {
        n_subjects: 3,
        geometry: FrameGeometry::new(12, 12, 2.0).unwrap(),
        n_frames_range: [8, 10],
        k_blobs: 20,
        ..Default::default()
    };
    harness::gen_data(&cfg, 42, dir, true).unwrap();
}

fn json_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "json") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Outcome {
    // Relative paths keep the two repetitions' JSON free of their locations.
    let mut trees = Vec::new();
    for rep in 0..2 {
        let base = root.join(format!("rep{rep}"));
        fs::create_dir_all(&base).unwrap();
        std::env::set_current_dir(&base).unwrap();
        let data = Path::new("data");
        tiny_dataset(data);
        let plan = tiny_plan(data);
        let ok = harness::ablation(&plan, Path::new("ablation"), true).is_ok_and(|r| r.complete)
            && harness::variance_sweep(&ExperimentPlan { seeds: vec![3], ..plan.clone() }, Path::new("variance"), true)
                .is_ok_and(|r| r.complete);
        std::env::set_current_dir(root).unwrap();
        if !ok {
            return outcome(false, "pipeline failed");
        }
        trees.push(json_files(&base));
    }
    let n = trees[0].len();
    let same = trees[0] == trees[1];
    outcome(same && n > 0, format!("{n} JSON files compared, identical: {same}"))
}

fn report_fidelity(root: &Path) -> Outcome {
    let data = root.join("data");
    tiny_dataset(&data);
    let plan = tiny_plan(&data);
    let out = root.join("ablation");
    let r = match harness::ablation(&plan, &out, true) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let table = fs::read_to_string(out.join("ablation_table.csv")).unwrap();
    let mut lines = table.lines();
    let mut problems = Vec::new();
    if lines.next() != Some(ABLATION_TABLE_HEADER) {
        problems.push("header".to_string());
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    if rows.len() != 2 * 3 {
        problems.push(format!("{} rows", rows.len()));
    }
    let mean_std = |s: &str| {
        let parts: Vec<&str> = s.split(" ± ").collect();
        parts.len() == 2 && parts.iter().all(|p| p.parse::<f64>().is_ok())
    };
    for row in &rows {
        if row.len() != 11 {
            problems.push(format!("{} columns", row.len()));
            continue;
        }
        let no_branch = row[1] == "n/a";
        if !(["3", "6"].contains(&row[1]) || no_branch) || !["3", "4"].contains(&row[0]) {
            problems.push(format!("M/protocols {} {}", row[0], row[1]));
        }
        let starred = row[2].split('/').all(|b| b.strip_suffix('*').is_some_and(|n| n.parse::<usize>().is_ok_and(|n| (1..=3).contains(&n))));
        if no_branch != (row[2] == "n/a") || (!no_branch && !(starred && row[2].split('/').count() == 2)) {
            problems.push(format!("branches {}", row[2]));
        }
        if !row[3..7].iter().all(|s| mean_std(s)) {
            problems.push("metric cell".into());
        }
        let p_ok = if no_branch {
            row[7..11].iter().all(|s| s.is_empty())
        } else {
            row[7..11].iter().all(|s| s.parse::<f64>().is_ok_and(|p| (0.0..=1.0).contains(&p)))
        };
        if !p_ok {
            problems.push("p-values".into());
        }
    }
    let ok = problems.is_empty() && r.complete;
    outcome(ok, if ok { format!("{} table rows with starred branches and p-values", rows.len()) } else { problems.join("; ") })
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> =
        std::env::var("FREEHAND_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let strict = std::env::var("FREEHAND_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().canonicalize().unwrap();

    let mut failed = false;
    let mut report = |k: usize, name: &str, directional: bool, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let t0 = Instant::now();
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {k} {name}: {} [{:.1?}]", o.detail, Duration::from_secs_f64(t0.elapsed().as_secs_f64()));
        if !o.pass && (!directional || strict) {
            failed = true;
        }
    };

    report(1, "geometry oracle suite", false, &mut geometry_suite);
    report(2, "metric oracle equivalence", false, &mut metric_oracles);
    report(3, "gating identity", false, &mut gating_identity);
    report(4, "gradient checks", false, &mut gradient_checks);
    report(5, "bi-level toy convergence", false, &mut toy_convergence);
    report(8, "determinism", false, &mut || determinism(&root.join("determinism")));
    report(9, "report fidelity", false, &mut || report_fidelity(&root.join("fidelity")));
    if wanted(6) || wanted(7) {
        let data = root.join("desk");
        desk_dataset(&data);
        report(6, "variance-reduction direction", true, &mut || variance_direction(&data, &root.join("variance")));
        report(7, "privileged-information direction", true, &mut || privileged_direction(&data, &root.join("ablation")));
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
