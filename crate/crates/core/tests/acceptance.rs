//! Acceptance checks, one line per criterion. Criteria 1-10 gate the exit
//! status; 11 runs only when `HBU_REAL_MANIFEST` and `HBU_REAL_EXEMPLARS`
//! point at a real recording and an exemplar bundle or library.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hbu_core::bvh::{forward_kinematics, parse_bvh_str, resample, UnitScale};
use hbu_core::door::{back_project, door_pose, DepthImage, SegMask};
use hbu_core::eaws::{extract_features, rule_label, window_count, DetectParams, PostureSegment};
use hbu_core::manifest::load_manifest;
use hbu_core::metrics::{binary_roc, JointErrorTable, JointMap};
use hbu_core::model::{CameraModel, CoordFrame, PoseFrame, PoseSequence, PostureClass, RigidTransform, SkeletonTopology, Vec3};
use hbu_core::pipeline::{analyze, ingest, Bundle, IngestParams};
use hbu_core::progress::{grad_check, separable_windows, train, ModelConfig, TrainConfig, Transformer};
use hbu_core::softdtw::{hard_dtw, soft_dtw, soft_dtw_grad, ExemplarLibrary, FeatureSequence, SoftDtwParams};
use hbu_core::synth::{generate, ScenarioSpec};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> FeatureSequence {
    let rows: Vec<Vec<f64>> = (0..len).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    FeatureSequence::new(&rows).unwrap()
}

/// Every monotone path from (0,0) to (n-1,m-1), as its summed cost.
fn path_costs(d: &[Vec<f64>]) -> Vec<f64> {
    fn walk(d: &[Vec<f64>], i: usize, j: usize, acc: f64, out: &mut Vec<f64>) {
        let acc = acc + d[i][j];
        let (n, m) = (d.len(), d[0].len());
        if i == n - 1 && j == m - 1 {
            out.push(acc);
            return;
        }
        if i + 1 < n {
            walk(d, i + 1, j, acc, out);
        }
        if j + 1 < m {
            walk(d, i, j + 1, acc, out);
        }
        if i + 1 < n && j + 1 < m {
            walk(d, i + 1, j + 1, acc, out);
        }
    }
    let mut out = Vec::new();
    walk(d, 0, 0, 0.0, &mut out);
    out
}

fn sq_dist(x: &FeatureSequence, y: &FeatureSequence) -> Vec<Vec<f64>> {
    x.rows()
        .map(|a| y.rows().map(|b| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()).collect())
        .collect()
}

fn c1_softdtw_exact() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut soft_err, mut hard_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let (n, m) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (x, y) = (random_seq(&mut rng, n, 3), random_seq(&mut rng, m, 3));
        let costs = path_costs(&sq_dist(&x, &y));
        for gamma in [0.1, 1.0] {
            let lo = costs.iter().cloned().fold(f64::INFINITY, f64::min);
            let brute = lo - gamma * costs.iter().map(|c| (-(c - lo) / gamma).exp()).sum::<f64>().ln();
            let got = soft_dtw(&x, &y, &SoftDtwParams::new(gamma).unwrap()).unwrap();
            soft_err = soft_err.max((got - brute).abs());
        }
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        hard_err = hard_err.max((hard_dtw(&x, &y).unwrap() - min).abs());
    }
    let el = t.elapsed();
    check(
        soft_err <= 1e-9 && hard_err <= 1e-12 && within(el, 5.0),
        format!("soft max err {soft_err:.2e}, hard max err {hard_err:.2e}, {:.3} s", el.as_secs_f64()),
    )
}

fn c2_softdtw_grad() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let p = SoftDtwParams::new(1.0).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (n, m) = (rng.gen_range(4..=6), rng.gen_range(4..=6));
        let (x, y) = (random_seq(&mut rng, n, 3), random_seq(&mut rng, m, 3));
        let (_, grad) = soft_dtw_grad(&x, &y, &p).unwrap();
        for k in 0..x.as_flat().len() {
            let shifted = |delta: f64| {
                let mut v = x.as_flat().to_vec();
                v[k] += delta;
                soft_dtw(&FeatureSequence::from_flat(3, v).unwrap(), &y, &p).unwrap()
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let el = t.elapsed();
    check(
        worst <= 1e-4 && within(el, 5.0),
        format!("max relative error {worst:.2e}, {:.3} s", el.as_secs_f64()),
    )
}

fn c3_transformer_grad() -> Outcome {
    let t = Instant::now();
    let mc = ModelConfig {
        d_in: 51,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 16,
        n_classes: 5,
        dropout_rate: 0.0,
        positional: true,
        seed: 3,
    };
    let names = (1..=5).map(|c| format!("subgoal{c}")).collect();
    let model = Transformer::new(mc, names).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let tokens: Vec<f64> = (0..10 * 51).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = grad_check(&model, &tokens, 2).map_err(|e| e.to_string())?;
    let el = t.elapsed();
    check(
        r.max_rel_error <= 1e-3 && within(el, 30.0),
        format!("max relative error {:.2e} over {} tensors, {:.2} s", r.max_rel_error, r.per_tensor.len(), el.as_secs_f64()),
    )
}

fn c4_overfit() -> Outcome {
    let t = Instant::now();
    let ds = separable_windows(5, 40, 51, 0.3, 404).map_err(|e| e.to_string())?;
    let mc = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ffn: 32,
        seed: 4,
        ..ModelConfig::with_io(51, 5)
    };
    let tc = TrainConfig {
        epochs: 120,
        learning_rate: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = train(&ds, &mc, &tc).map_err(|e| e.to_string())?;
    let b = train(&ds, &mc, &tc).map_err(|e| e.to_string())?;
    let first = a.trace.iter().find(|m| m.train_accuracy >= 0.95).map(|m| m.epoch);
    let test = a.test.as_ref().map_or(0.0, |r| r.scores.overall_accuracy);
    let same = a.trace == b.trace && a.test == b.test && a.model.to_bytes() == b.model.to_bytes();
    let el = t.elapsed();
    check(
        ds.windows.len() == 200 && first.is_some_and(|e| e <= 300) && test >= 0.8 && same && within(el, 120.0),
        format!(
            "{} windows, train acc >= 0.95 at epoch {first:?}, held-out acc {test:.3}, deterministic {same}, {:.1} s",
            ds.windows.len(),
            el.as_secs_f64()
        ),
    )
}

/// Upright body15 pose with the trunk pitched forward by `flexion_deg`,
/// arms hanging along the trunk.
fn bent_pose(flexion_deg: f64) -> Vec<Vec3> {
    let f = flexion_deg.to_radians();
    let pelvis = Vec3::new(0.0, 0.0, 1.0);
    let trunk = Vec3::new(f.sin(), 0.0, f.cos());
    let neck = pelvis + 0.5 * trunk;
    let head = pelvis + 0.75 * trunk;
    let mut p = vec![pelvis, neck, head];
    for side in [-1.0, 1.0] {
        let sh = neck + Vec3::new(0.0, 0.18 * side, 0.0);
        p.extend([sh, sh - Vec3::new(0.0, 0.0, 0.3), sh - Vec3::new(0.0, 0.0, 0.55)]);
    }
    for side in [-1.0, 1.0] {
        let hip = pelvis + Vec3::new(0.0, 0.1 * side, 0.0);
        p.extend([hip, hip - Vec3::new(0.0, 0.0, 0.45), hip - Vec3::new(0.0, 0.0, 0.9)]);
    }
    p
}

fn c5_rules() -> Outcome {
    let topo = Arc::new(SkeletonTopology::body15());
    let mut got = Vec::new();
    for flex in [10.0, 40.0, 70.0] {
        let frames = (0..5)
            .map(|i| PoseFrame::certain(i as f64 / 30.0, bent_pose(flex), CoordFrame::Global).unwrap())
            .collect();
        let seq = PoseSequence::new(topo.clone(), frames, 30.0).unwrap();
        let labels: Vec<_> = extract_features(&seq).unwrap().iter().map(rule_label).collect();
        if labels.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("labels vary across a static pose at {flex} deg"));
        }
        got.push(labels[0].iter().map(|c| c.code()).collect::<Vec<_>>().join("+"));
    }
    let expected = ["", "P3", "P4"];
    let short = PostureSegment::new(PostureClass::P3BentForward, 10.0, 13.9).unwrap();
    let long = PostureSegment::new(PostureClass::P3BentForward, 10.0, 14.0).unwrap();
    let shown: Vec<&str> = got.iter().map(|s| if s.is_empty() { "none" } else { s.as_str() }).collect();
    check(
        got == expected && !short.valid && long.valid,
        format!("10/40/70 deg -> {shown:?}; 3.9 s valid={}, 4.0 s valid={}", short.valid, long.valid),
    )
}

struct E2e {
    windows: usize,
    files: Vec<(String, String)>,
    report: String,
    segments: Vec<PostureSegment>,
    /// (class code, start, end)
    scripted: Vec<(String, f64, f64)>,
    valid_total: f64,
    apportioned: f64,
}

fn run_e2e(dir: &Path) -> Result<E2e, String> {
    let e = |x: hbu_core::error::Error| x.to_string();
    let lib_cycle = generate(&ScenarioSpec::library(3)).map_err(e)?;
    let run_cycle = generate(&ScenarioSpec::standard(11)).map_err(e)?;
    let params = IngestParams::default();
    let lib_bundle = ingest(&load_manifest(&lib_cycle.write(&dir.join("lib")).map_err(e)?).map_err(e)?, &params).map_err(e)?;
    let bundle = ingest(&load_manifest(&run_cycle.write(&dir.join("run")).map_err(e)?).map_err(e)?, &params).map_err(e)?;
    bundle.write(&dir.join("bundle")).map_err(e)?;
    let bundle = Bundle::read(&dir.join("bundle")).map_err(e)?;
    let dp = DetectParams::default();
    let library: ExemplarLibrary = lib_bundle.exemplars(&dp).map_err(e)?;
    let analysis = analyze(&bundle, &library, &dp).map_err(e)?;
    analysis.write(&dir.join("analysis")).map_err(e)?;

    let mut files = Vec::new();
    for sub in ["bundle", "analysis"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|d| d.unwrap().path()).collect();
        names.sort();
        for p in names {
            files.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read_to_string(&p).unwrap()));
        }
    }
    let scripted = run_cycle
        .spec
        .episodes
        .iter()
        .map(|ep| (ep.class.clone(), ep.start_s, ep.start_s + ep.duration_s))
        .collect();
    let valid_total: f64 = analysis.detection.segments.iter().filter(|s| s.valid).map(|s| s.duration()).sum();
    Ok(E2e {
        windows: analysis.detection.windows.len(),
        files,
        report: analysis.report.to_csv(),
        segments: analysis.detection.segments.clone(),
        scripted,
        valid_total,
        apportioned: analysis.report.apportioned_total(),
    })
}

fn c6_windows(e2e_windows: Option<usize>) -> Outcome {
    let n = window_count(216.0, 8.0, 4.0);
    check(
        n == 53 && e2e_windows.is_none_or(|w| w == 53),
        format!("window_count(216 s) = {n}; detector on the 216 s synthetic cycle: {e2e_windows:?}"),
    )
}

fn c7_end_to_end() -> (Outcome, Option<usize>) {
    let t = Instant::now();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = match run_e2e(d1.path()) {
        Ok(r) => r,
        Err(msg) => return (Err(msg), None),
    };
    let b = match run_e2e(d2.path()) {
        Ok(r) => r,
        Err(msg) => return (Err(msg), None),
    };
    let mut missed = Vec::new();
    let mut worst = 0.0f64;
    for (class, s, e) in a.scripted.iter().filter(|(_, s, e)| e - s >= 4.0) {
        let best = a
            .segments
            .iter()
            .filter(|g| g.valid && g.class.code() == class)
            .map(|g| (g.start_s - s).abs().max((g.end_s - e).abs()))
            .fold(f64::INFINITY, f64::min);
        if best <= 4.0 + 1e-9 {
            worst = worst.max(best);
        } else {
            missed.push(format!("{class}@{s}"));
        }
    }
    let conserve = (a.valid_total - a.apportioned).abs();
    let identical = a.files == b.files && a.report == b.report;
    let el = t.elapsed();
    let mut detail = format!(
        "{}/{} scripted episodes recovered (worst boundary offset {worst:.1} s), duration conservation err {conserve:.1e}, byte-identical reruns {identical} ({} files), {:.1} s",
        a.scripted.len() - missed.len(),
        a.scripted.len(),
        a.files.len(),
        el.as_secs_f64()
    );
    if !missed.is_empty() {
        let _ = write!(detail, "; missed {missed:?}");
    }
    (check(missed.is_empty() && conserve <= 1e-9 && identical, detail), Some(a.windows))
}

fn c8_metrics() -> Outcome {
    let topo = Arc::new(SkeletonTopology::body15());
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let frames = |rng: &mut ChaCha8Rng, jitter: f64, base: &[Vec<Vec3>]| -> Vec<Vec<Vec3>> {
        base.iter()
            .map(|f| f.iter().map(|p| p + Vec3::new(rng.gen_range(-jitter..jitter), rng.gen_range(-jitter..jitter), rng.gen_range(-jitter..jitter))).collect())
            .collect()
    };
    let base: Vec<Vec<Vec3>> = (0..20).map(|i| bent_pose(i as f64 * 3.0)).collect();
    let gt_pos = frames(&mut rng, 0.02, &base);
    let pr_pos = frames(&mut rng, 0.15, &gt_pos);
    let seq = |pos: &[Vec<Vec3>]| {
        let f = pos.iter().enumerate().map(|(i, p)| PoseFrame::certain(i as f64 / 30.0, p.clone(), CoordFrame::Global).unwrap()).collect();
        PoseSequence::new(topo.clone(), f, 30.0).unwrap()
    };
    let table = JointErrorTable::evaluate(&seq(&pr_pos), &seq(&gt_pos), &JointMap::identity(&topo), 150.0).map_err(|e| e.to_string())?;
    let mut err = 0.0f64;
    for (k, name) in table.joints.iter().enumerate() {
        let j = topo.index(name).unwrap();
        let d: Vec<f64> = (0..20)
            .map(|f| ((pr_pos[f][j] - pr_pos[f][0]) - (gt_pos[f][j] - gt_pos[f][0])).norm() * 1000.0)
            .collect();
        let mpjpe = d.iter().sum::<f64>() / 20.0;
        let pck = d.iter().filter(|e| **e <= 150.0).count() as f64 / 20.0;
        err = err.max((mpjpe - table.mpjpe_mm[k]).abs()).max((pck - table.pck[k]).abs());
    }

    // one joint 149.9 mm off, another 150.1 mm off
    let gt_one = vec![bent_pose(0.0)];
    let mut pr_one = gt_one.clone();
    pr_one[0][2].x += 0.1499;
    pr_one[0][3].x += 0.1501;
    let b = JointErrorTable::evaluate(&seq(&pr_one), &seq(&gt_one), &JointMap::identity(&topo), 150.0).map_err(|e| e.to_string())?;
    let pck_of = |n: &str| b.pck[b.joints.iter().position(|j| j == n).unwrap()];
    let boundary = pck_of("head") == 1.0 && pck_of("r_shoulder") == 0.0;

    let sep = binary_roc(&[0.9, 0.8, 0.7, 0.3, 0.2, 0.1], &[true, true, true, false, false, false]).map_err(|e| e.to_string())?;
    // own stream, so the draw does not depend on the jitter above
    let mut srng = ChaCha8Rng::seed_from_u64(8);
    let scores: Vec<f64> = (0..200).map(|_| srng.gen_range(0.0..1.0)).collect();
    let labels: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
    let rand_auc = binary_roc(&scores, &labels).map_err(|e| e.to_string())?.auc;
    // Mann-Whitney oracle
    let mut wins = 0.0;
    for (a, _) in scores.iter().zip(&labels).filter(|(_, l)| **l) {
        for (b, _) in scores.iter().zip(&labels).filter(|(_, l)| !**l) {
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    let mw_err = (wins / 10_000.0 - rand_auc).abs();
    check(
        err <= 1e-9 && boundary && sep.auc == 1.0 && (0.4..=0.6).contains(&rand_auc) && mw_err <= 1e-12,
        format!(
            "MPJPE/PCK oracle err {err:.1e}, PCK boundary ok {boundary}, separated AUC {}, random AUC {rand_auc:.3} (Mann-Whitney err {mw_err:.1e})",
            sep.auc
        ),
    )
}

fn c9_bvh() -> Outcome {
    // A at origin, B one unit up Y, C one unit along X from B; A and B each
    // turn 90 degrees about Z
    let text = "HIERARCHY\nROOT A\n{\n OFFSET 0 0 0\n CHANNELS 3 Zrotation Xrotation Yrotation\n JOINT B\n {\n  OFFSET 0 1 0\n  CHANNELS 3 Zrotation Xrotation Yrotation\n  JOINT C\n  {\n   OFFSET 1 0 0\n   CHANNELS 0\n  }\n }\n}\nMOTION\nFrames: 1\nFrame Time: 0.0166667\n90 0 0 90 0 0\n";
    let rig = parse_bvh_str(text).map_err(|e| e.to_string())?;
    let f = forward_kinematics(&rig, 0, UnitScale::new(1.0).unwrap()).map_err(|e| e.to_string())?;
    // Rz(90) maps (0,1,0) -> (-1,0,0); Rz(180) maps (1,0,0) -> (-1,0,0)
    let expected = [Vec3::zeros(), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(-2.0, 0.0, 0.0)];
    let fk_err = f.positions.iter().zip(&expected).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);

    let topo = Arc::new(SkeletonTopology::new("line", &[("a", None), ("b", Some("a"))]).unwrap());
    let (a, v) = (Vec3::new(0.5, -1.0, 2.0), Vec3::new(0.3, 0.7, -0.2));
    let traj = |t: f64| vec![a + v * t, a * 2.0 - v * t];
    let src: Vec<PoseFrame> = (0..121)
        .map(|i| {
            let t = 1.0 + i as f64 / 60.0;
            PoseFrame::certain(t, traj(t), CoordFrame::Global).unwrap()
        })
        .collect();
    let seq = PoseSequence::new(topo, src, 60.0).unwrap();
    let out = resample(&seq, 30.0).map_err(|e| e.to_string())?;
    let lin_err = out
        .frames()
        .iter()
        .flat_map(|f| f.positions.iter().zip(traj(f.timestamp)).map(|(p, q)| (p - q).norm()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let half = (out.len() as f64 - 121.0 / 2.0).abs() <= 1.0;
    check(
        fk_err <= 1e-6 && half && lin_err <= 1e-12,
        format!("FK err {fk_err:.1e}; 121 frames at 60 Hz -> {} at 30 Hz, linear err {lin_err:.1e}", out.len()),
    )
}

fn c10_door() -> Outcome {
    let cam = CameraModel::new(600.0, 610.0, 319.5, 239.5, RigidTransform::identity()).unwrap();
    let (w, h) = (64, 48);
    let mut mask = SegMask::empty(w, h);
    let mut depth = DepthImage::uniform(w, h, 0);
    let mut expected = Vec::new();
    for v in (5..40).step_by(7) {
        for u in (3..60).step_by(11) {
            let mm = (1500 + 13 * u + 7 * v) as u16;
            mask.set(u, v, true);
            depth.set(u, v, mm);
            let z = mm as f64 / 1000.0;
            expected.push(Vec3::new(z * (u as f64 - 319.5) / 600.0, z * (v as f64 - 239.5) / 610.0, z));
        }
    }
    let pts = back_project(&mask, &depth, &cam, 0).map_err(|e| e.to_string())?;
    let bp_err = if pts.len() == expected.len() {
        pts.iter().zip(&expected).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };

    let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 30f64.to_radians());
    let mut panel = Vec::new();
    for i in 0..=40 {
        for k in 0..=20 {
            panel.push(rot * Vec3::new(-0.5 + i as f64 * 0.025, 0.0, k as f64 * 0.03) + Vec3::new(2.0, -0.5, 0.5));
        }
    }
    let yaw = door_pose(&panel, &cam).map_err(|e| e.to_string())?.yaw_deg;
    let yaw_err = yaw.map_or(f64::INFINITY, |y| (y - 30.0).abs());

    let r = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
    let ext = RigidTransform::new(Matrix3::from(r), Vec3::new(1.5, -2.0, 0.7)).unwrap();
    let base = door_pose(&panel, &cam).unwrap().centroid_global;
    let moved = door_pose(&panel, &CameraModel { extrinsic: ext, ..cam }).unwrap().centroid_global;
    let eq_err = (moved - ext.apply(&base)).norm();
    check(
        bp_err <= 1e-12 && yaw_err <= 0.5 && eq_err <= 1e-9,
        format!("back-projection err {bp_err:.1e}, yaw err {yaw_err:.3} deg, centroid equivariance err {eq_err:.1e}"),
    )
}

fn c11_real_data() -> Option<Outcome> {
    let manifest = std::env::var("HBU_REAL_MANIFEST").ok()?;
    let exemplars = std::env::var("HBU_REAL_EXEMPLARS").ok();
    Some((|| {
        let e = |x: hbu_core::error::Error| x.to_string();
        let bundle = ingest(&load_manifest(Path::new(&manifest)).map_err(e)?, &IngestParams::default()).map_err(e)?;
        let mut detail = format!("{} frames ingested", bundle.poses.len());
        if bundle.reference.is_some() {
            let t = bundle.pose_errors(150.0).map_err(e)?;
            let _ = write!(detail, ", MPJPE {:.1} mm, PCK@150 {:.1}%", t.mean_mpjpe_mm, 100.0 * t.mean_pck);
        }
        if let Some(x) = exemplars {
            let dp = DetectParams::default();
            let p = Path::new(&x);
            let lib = if p.is_dir() { Bundle::read(p).map_err(e)?.exemplars(&dp).map_err(e)? } else { ExemplarLibrary::read(p).map_err(e)? };
            let a = analyze(&bundle, &lib, &dp).map_err(e)?;
            let _ = write!(detail, ", {} report rows", a.report.rows.len());
        }
        Ok(detail)
    })())
}

fn main() {
    let mut failed = 0;
    let mut line = |id: &str, name: &str, r: Outcome| {
        match &r {
            Ok(d) => println!("[PASS] {id} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {id} {name}: {d}");
            }
        }
    };
    line("1", "softDTW exactness", c1_softdtw_exact());
    line("2", "softDTW gradient", c2_softdtw_grad());
    line("3", "transformer gradient check", c3_transformer_grad());
    line("4", "overfit and determinism", c4_overfit());
    line("5", "posture rules and validity", c5_rules());
    let (e2e, windows) = c7_end_to_end();
    line("6", "window arithmetic", c6_windows(windows));
    line("7", "end-to-end synthetic cycle", e2e);
    line("8", "metric oracles", c8_metrics());
    line("9", "BVH kinematics and resampling", c9_bvh());
    line("10", "door geometry", c10_door());
    match c11_real_data() {
        None => println!("[SKIP] 11 real recordings (optional): HBU_REAL_MANIFEST not set"),
        Some(Ok(d)) => println!("[PASS] 11 real recordings (optional): {d}"),
        Some(Err(d)) => println!("[FAIL] 11 real recordings (optional, not gating): {d}"),
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
    println!("all gating criteria passed");
}
