//! Deterministic synthetic task cycles: a scripted worker skeleton, two
//! noisy camera views, a door track and matching annotations, written in
//! the same formats the ingestion side reads.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{write_episodes, AnnotationTable, PostureAnnotation};
use crate::door::{DoorSample, DoorTrack};
use crate::error::{Error, Result};
use crate::manifest::{CameraDescriptor, DatasetManifest, RecordingPaths, StreamPaths, UpAxis, Workstation};
use crate::model::{
    AnnotationKind, AnnotationSegment, CameraModel, CoordFrame, PoseFrame, PoseSequence, PostureClass, RigidTransform,
    SkeletonTopology, Vec3, MIN_POSTURE_DURATION_S,
};
use crate::pose_stream::{PoseRecord, PoseStream};

pub const SUBGOAL_MIN_S: f64 = 22.0;
pub const SUBGOAL_MAX_S: f64 = 67.0;
pub const REFERENCE_CAMERA: &str = "mocap";

const SUBGOAL_NAMES: [&str; 10] = [
    "Adjust WS",
    "Fixate rearview mirror",
    "Fixate carrier",
    "Connect cables",
    "Mount trim",
    "Insert screws",
    "Fasten screws",
    "Attach seal",
    "Inspect door",
    "Return tools",
];

/// Door opening per subgoal index, degrees.
const DOOR_OPENING_DEG: [f64; 7] = [0.0, 35.0, 70.0, 85.0, 50.0, 20.0, 60.0];

const WORKER_BASE: [f64; 3] = [1.0, 0.0, 0.95];
const DOOR_HINGE: [f64; 3] = [2.0, -0.5, 1.0];
const DOOR_HALF_WIDTH: f64 = 0.5;
const BYSTANDER_POS: [f64; 3] = [-1.5, 2.5, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEpisode {
    /// Class code, e.g. `P3` or `TR`.
    pub class: String,
    pub start_s: f64,
    pub duration_s: f64,
}

impl ScriptedEpisode {
    pub fn new(class: PostureClass, start_s: f64, duration_s: f64) -> Self {
        Self {
            class: class.code().to_string(),
            start_s,
            duration_s,
        }
    }

    fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }
}

/// Interval during which one camera sees the worker badly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub camera: usize,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub workstation: String,
    pub cycle_duration_s: f64,
    /// Derived from the cycle duration when absent.
    pub subgoal_count: Option<usize>,
    pub episodes: Vec<ScriptedEpisode>,
    /// Per-coordinate Gaussian jitter of camera joints, meters.
    pub joint_noise_m: f64,
    pub base_confidence: f64,
    pub gt_rate_hz: f64,
    pub camera_rate_hz: f64,
    /// Ramp length at both ends of an episode, inside its interval.
    pub ramp_s: f64,
    pub occlusions: Vec<Occlusion>,
    /// Camera that reports zero confidence throughout.
    pub dead_camera: Option<usize>,
    pub bystander: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            workstation: "WS10".into(),
            cycle_duration_s: 216.0,
            subgoal_count: None,
            episodes: Vec::new(),
            joint_noise_m: 0.01,
            base_confidence: 0.9,
            gt_rate_hz: 60.0,
            camera_rate_hz: 30.0,
            ramp_s: 0.5,
            occlusions: Vec::new(),
            dead_camera: None,
            bystander: false,
        }
    }
}

impl ScenarioSpec {
    /// A 216 s cycle exercising all seven classes, one occlusion per camera
    /// and a bystander.
    pub fn standard(seed: u64) -> Self {
        use PostureClass::*;
        let script = [
            (P3BentForward, 14.0, 10.0),
            (P1StandingWalking, 32.0, 12.0),
            (P5ElbowAtAboveShoulder, 52.0, 9.0),
            (TrunkRotation, 70.0, 10.0),
            (P4StronglyBentForward, 90.0, 10.0),
            (LateralBending, 110.0, 9.0),
            (P6HandsAboveHead, 128.0, 10.0),
            (P3BentForward, 148.0, 8.0),
            (P6HandsAboveHead, 166.0, 9.0),
            (P5ElbowAtAboveShoulder, 186.0, 10.0),
        ];
        Self {
            seed,
            episodes: script.iter().map(|(c, s, d)| ScriptedEpisode::new(*c, *s, *d)).collect(),
            occlusions: vec![
                Occlusion {
                    camera: 0,
                    start_s: 40.0,
                    end_s: 55.0,
                },
                Occlusion {
                    camera: 1,
                    start_s: 120.0,
                    end_s: 140.0,
                },
            ],
            bystander: true,
            ..Self::default()
        }
    }

    /// Same classes at different times, for cutting exemplars.
    pub fn library(seed: u64) -> Self {
        use PostureClass::*;
        let script = [
            (P4StronglyBentForward, 12.0, 10.0),
            (P6HandsAboveHead, 32.0, 10.0),
            (P3BentForward, 52.0, 10.0),
            (LateralBending, 72.0, 10.0),
            (P1StandingWalking, 92.0, 12.0),
            (TrunkRotation, 114.0, 10.0),
            (P5ElbowAtAboveShoulder, 134.0, 10.0),
            (P3BentForward, 154.0, 10.0),
            (P6HandsAboveHead, 174.0, 10.0),
        ];
        Self {
            seed,
            episodes: script.iter().map(|(c, s, d)| ScriptedEpisode::new(*c, *s, *d)).collect(),
            ..Self::default()
        }
    }

    fn classes(&self) -> Result<Vec<PostureClass>> {
        self.episodes
            .iter()
            .map(|e| PostureClass::parse(&e.class).ok_or_else(|| Error::invalid(format!("unknown posture class `{}`", e.class))))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.cycle_duration_s, self.gt_rate_hz, self.camera_rate_hz];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("cycle duration and rates must be positive"));
        }
        let ratio = self.gt_rate_hz / self.camera_rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::invalid("reference rate must be an integer multiple of the camera rate"));
        }
        if self.joint_noise_m < 0.0 || !(0.0..=1.0).contains(&self.base_confidence) || self.ramp_s < 0.0 {
            return Err(Error::invalid("noise, confidence or ramp out of range"));
        }
        let classes = self.classes()?;
        for e in &self.episodes {
            if e.duration_s <= 0.0 || e.start_s < 0.0 || e.end_s() > self.cycle_duration_s + 1e-9 {
                return Err(Error::invalid(format!(
                    "episode {} [{}, {}] is empty or outside the cycle",
                    e.class,
                    e.start_s,
                    e.end_s()
                )));
            }
            if 2.0 * self.ramp_s > e.duration_s {
                return Err(Error::invalid(format!("episode {} at {} s is shorter than its ramps", e.class, e.start_s)));
            }
        }
        use PostureClass::*;
        let clash = |a: PostureClass, b: PostureClass| {
            let pair = |x, y| (a == x && b == y) || (a == y && b == x);
            a == P1StandingWalking
                || b == P1StandingWalking
                || pair(P3BentForward, P4StronglyBentForward)
                || pair(P5ElbowAtAboveShoulder, P3BentForward)
                || pair(P5ElbowAtAboveShoulder, P4StronglyBentForward)
                || pair(P5ElbowAtAboveShoulder, P6HandsAboveHead)
                || a == b
        };
        for i in 0..self.episodes.len() {
            for j in i + 1..self.episodes.len() {
                let (a, b) = (&self.episodes[i], &self.episodes[j]);
                let overlap = a.start_s < b.end_s() && b.start_s < a.end_s();
                if overlap && clash(classes[i], classes[j]) {
                    return Err(Error::invalid(format!(
                        "episodes {} at {} s and {} at {} s are mutually exclusive",
                        a.class, a.start_s, b.class, b.start_s
                    )));
                }
            }
        }
        for o in &self.occlusions {
            if o.camera > 1 || o.end_s <= o.start_s {
                return Err(Error::invalid("occlusion must name camera 0 or 1 and a non-empty interval"));
            }
        }
        if self.dead_camera.is_some_and(|c| c > 1) {
            return Err(Error::invalid("dead camera must be 0 or 1"));
        }
        self.workstation.parse::<Workstation>()?;
        Ok(())
    }
}

/// Subgoal durations in [22, 67] s summing to the cycle duration. Cycles
/// shorter than 22 s get a single subgoal.
pub fn sample_subgoal_durations(cycle_s: f64, count: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let lo = (cycle_s / SUBGOAL_MAX_S).ceil().max(1.0) as usize;
    let hi = (cycle_s / SUBGOAL_MIN_S).floor().max(1.0) as usize;
    if cycle_s < SUBGOAL_MIN_S {
        return Ok(vec![cycle_s]);
    }
    let n = match count {
        Some(n) if (lo..=hi).contains(&n) => n,
        Some(n) => {
            return Err(Error::invalid(format!(
                "{n} subgoals cannot fill {cycle_s} s within [{SUBGOAL_MIN_S}, {SUBGOAL_MAX_S}] s each"
            )))
        }
        None => ((cycle_s / 43.2).round() as usize).clamp(lo, hi),
    };
    let spare = cycle_s - SUBGOAL_MIN_S * n as f64;
    for _ in 0..1000 {
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = w.iter().sum();
        let d: Vec<f64> = w.iter().map(|x| SUBGOAL_MIN_S + spare * x / sum).collect();
        if d.iter().all(|v| *v <= SUBGOAL_MAX_S) {
            return Ok(d);
        }
    }
    Ok(vec![cycle_s / n as f64; n])
}

/// 0 outside the episode, 1 in its core, smooth ramps in between.
fn envelope(t: f64, start: f64, end: f64, ramp: f64) -> f64 {
    if t < start || t >= end {
        return 0.0;
    }
    if ramp <= 0.0 {
        return 1.0;
    }
    let x = ((t - start) / ramp).min((end - t) / ramp).min(1.0);
    x * x * (3.0 - 2.0 * x)
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

#[derive(Debug, Clone, Copy, Default)]
struct KeyPose {
    flexion_deg: f64,
    rotation_deg: f64,
    lateral_deg: f64,
    elbows_up: f64,
    hands_up: f64,
}

/// Target geometry per class.
fn class_pose(c: PostureClass) -> KeyPose {
    let mut k = KeyPose::default();
    match c {
        PostureClass::P3BentForward => k.flexion_deg = 40.0,
        PostureClass::P4StronglyBentForward => k.flexion_deg = 75.0,
        PostureClass::P5ElbowAtAboveShoulder => k.elbows_up = 1.0,
        PostureClass::P6HandsAboveHead => k.hands_up = 1.0,
        PostureClass::TrunkRotation => k.rotation_deg = 40.0,
        PostureClass::LateralBending => k.lateral_deg = 30.0,
        PostureClass::P1StandingWalking => {}
    }
    k
}

/// Body15 joints of a worker standing at `root` and facing +X.
fn build_skeleton(root: Vec3, k: &KeyPose) -> Vec<Vec3> {
    let trunk = Rotation3::from_axis_angle(&Vec3::y_axis(), k.flexion_deg.to_radians())
        * Rotation3::from_axis_angle(&Vec3::x_axis(), k.lateral_deg.to_radians())
        * Rotation3::from_axis_angle(&Vec3::z_axis(), k.rotation_deg.to_radians());
    let up = |v: Vec3| root + trunk * v;
    let mut p = vec![Vec3::zeros(); 15];
    p[0] = root;
    p[1] = up(Vec3::new(0.0, 0.0, 0.5));
    p[2] = up(Vec3::new(0.0, 0.0, 0.75));
    // (shoulder, elbow, wrist) indices; right side is -Y
    for (side, (s, e, w)) in [(-1.0, (3, 4, 5)), (1.0, (6, 7, 8))] {
        let sh = Vec3::new(0.0, 0.18 * side, 0.5);
        let down = (Vec3::new(0.0, 0.0, -0.3), Vec3::new(0.0, 0.0, -0.57));
        let raised = (Vec3::new(0.27, 0.0, 0.06), Vec3::new(0.54, 0.0, 0.06));
        let over = (Vec3::new(0.05, 0.05 * side, 0.29), Vec3::new(0.08, 0.05 * side, 0.56));
        let mix = |a: Vec3, b: Vec3, c: Vec3| {
            let ab = a + (b - a) * k.elbows_up;
            ab + (c - ab) * k.hands_up
        };
        p[s] = up(sh);
        p[e] = up(sh + mix(down.0, raised.0, over.0));
        p[w] = up(sh + mix(down.1, raised.1, over.1));
    }
    for (side, (h, kn, a)) in [(-1.0, (9, 10, 11)), (1.0, (12, 13, 14))] {
        p[h] = root + Vec3::new(0.0, 0.1 * side, 0.0);
        p[kn] = p[h] + Vec3::new(0.0, 0.0, -0.45);
        p[a] = p[kn] + Vec3::new(0.0, 0.0, -0.45);
    }
    p
}

/// Walking back and forth along Y: 1 s walking at 0.6 m/s, 1 s standing,
/// returning to the start every 4 s.
fn walk_offset(tau: f64) -> f64 {
    let r = tau.rem_euclid(4.0);
    0.6 * match r {
        r if r < 1.0 => r,
        r if r < 2.0 => 1.0,
        r if r < 3.0 => 3.0 - r,
        _ => 0.0,
    }
}

fn work_spot(k: usize) -> Vec3 {
    let a = 2.0 * PI * ((3 * k) % 7) as f64 / 7.0;
    Vec3::new(WORKER_BASE[0] + 0.15 * a.cos(), WORKER_BASE[1] + 0.15 * a.sin(), WORKER_BASE[2])
}

/// Two exocentric cameras facing each other across the station.
pub fn standard_cameras() -> Vec<CameraDescriptor> {
    let cam = |id: &str, side: &str, rows, t: [f64; 3]| CameraDescriptor {
        id: id.into(),
        side: side.into(),
        height_m: t[2],
        model: CameraModel::new(615.0, 615.0, 320.0, 240.0, RigidTransform::from_rows(rows, t).expect("orthonormal"))
            .expect("valid intrinsics"),
    };
    vec![
        cam("In10", "in", [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]], [1.0, -3.0, 1.85]),
        cam("Out10", "out", [[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]], [1.0, 3.0, 1.85]),
    ]
}

#[derive(Debug, Clone)]
pub struct SynthCycle {
    pub spec: ScenarioSpec,
    /// Global frame, at the reference rate.
    pub reference: PoseSequence,
    pub cameras: Vec<CameraDescriptor>,
    /// Camera-frame detections at the camera rate, one stream per camera.
    pub streams: Vec<PoseStream>,
    pub doors: DoorTrack,
    pub subgoals: Vec<AnnotationSegment>,
    pub episodes: Vec<AnnotationSegment>,
    pub annotations: AnnotationTable,
}

pub fn generate(spec: &ScenarioSpec) -> Result<SynthCycle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let durations = sample_subgoal_durations(spec.cycle_duration_s, spec.subgoal_count, &mut rng)?;
    let mut subgoals = Vec::with_capacity(durations.len());
    let mut t = 0.0;
    for (k, d) in durations.iter().enumerate() {
        let end = if k + 1 == durations.len() { spec.cycle_duration_s } else { t + d };
        subgoals.push(AnnotationSegment::new(
            format!("{}. {}", k + 1, SUBGOAL_NAMES[k % SUBGOAL_NAMES.len()]),
            t,
            end,
            AnnotationKind::Subgoal,
        )?);
        t = end;
    }
    let classes = spec.classes()?;
    let episodes: Vec<AnnotationSegment> = spec
        .episodes
        .iter()
        .zip(&classes)
        .map(|(e, c)| AnnotationSegment::new(c.code(), e.start_s, e.end_s(), AnnotationKind::Posture))
        .collect::<Result<_>>()?;

    let subgoal_at = |t: f64| subgoals.iter().position(|s| t < s.end_s).unwrap_or(subgoals.len() - 1);
    let worker_root = |t: f64| -> Vec3 {
        let k = subgoal_at(t);
        let from = work_spot(k.saturating_sub(1));
        let to = work_spot(k);
        let mut p = from + (to - from) * smoothstep((t - subgoals[k].start_s) / 3.0);
        for (e, c) in spec.episodes.iter().zip(&classes) {
            if *c == PostureClass::P1StandingWalking && t >= e.start_s && t < e.end_s() {
                p.y += walk_offset(t - e.start_s) * envelope(t, e.start_s, e.end_s(), spec.ramp_s);
            }
        }
        p
    };
    let key_pose = |t: f64| -> KeyPose {
        let mut k = KeyPose::default();
        for (e, c) in spec.episodes.iter().zip(&classes) {
            let w = envelope(t, e.start_s, e.end_s(), spec.ramp_s);
            if w == 0.0 {
                continue;
            }
            let target = class_pose(*c);
            k.flexion_deg = k.flexion_deg.max(w * target.flexion_deg);
            k.rotation_deg = k.rotation_deg.max(w * target.rotation_deg);
            k.lateral_deg = k.lateral_deg.max(w * target.lateral_deg);
            k.elbows_up = k.elbows_up.max(w * target.elbows_up);
            k.hands_up = k.hands_up.max(w * target.hands_up);
        }
        k
    };

    let n_ref = (spec.cycle_duration_s * spec.gt_rate_hz).round() as usize;
    let ref_frames = (0..n_ref)
        .map(|i| {
            let t = i as f64 / spec.gt_rate_hz;
            PoseFrame::certain(t, build_skeleton(worker_root(t), &key_pose(t)), CoordFrame::Global)
        })
        .collect::<Result<Vec<_>>>()?;
    let topology = Arc::new(SkeletonTopology::body15());

    let cameras = standard_cameras();
    let step = (spec.gt_rate_hz / spec.camera_rate_hz).round() as usize;
    let noise = Normal::new(0.0, spec.joint_noise_m).map_err(|e| Error::invalid(e.to_string()))?;
    let mut streams = Vec::with_capacity(cameras.len());
    for (ci, cam) in cameras.iter().enumerate() {
        let to_cam = cam.model.extrinsic.inverse();
        let mut cam_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(31).wrapping_add(ci as u64 + 1));
        let mut records = Vec::new();
        for f in ref_frames.iter().step_by(step) {
            let t = f.timestamp;
            let occluded = spec.occlusions.iter().any(|o| o.camera == ci && t >= o.start_s && t < o.end_s);
            let dead = spec.dead_camera == Some(ci);
            let mut emit = |positions: &[Vec3], person: u32, rng: &mut ChaCha8Rng| -> Result<()> {
                let pos: Vec<Vec3> = positions
                    .iter()
                    .map(|p| {
                        let q = to_cam.apply(p);
                        if spec.joint_noise_m > 0.0 {
                            q + Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
                        } else {
                            q
                        }
                    })
                    .collect();
                let conf: Vec<f64> = (0..pos.len())
                    .map(|j| {
                        let base = (spec.base_confidence + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                        if dead {
                            0.0
                        } else if occluded && j >= 5 {
                            0.2
                        } else {
                            base
                        }
                    })
                    .collect();
                records.push(PoseRecord {
                    camera: cam.id.clone(),
                    person,
                    pose: PoseFrame::new(t, pos, conf, CoordFrame::Camera)?,
                });
                Ok(())
            };
            if spec.bystander {
                let by = build_skeleton(Vec3::from(BYSTANDER_POS), &KeyPose::default());
                emit(&by, 0, &mut cam_rng)?;
                emit(&f.positions, 1, &mut cam_rng)?;
            } else {
                emit(&f.positions, 0, &mut cam_rng)?;
            }
        }
        streams.push(PoseStream {
            topology: topology.clone(),
            records,
        });
    }

    let mut door_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xd00d);
    let door_samples = ref_frames
        .iter()
        .step_by(step)
        .map(|f| {
            let t = f.timestamp;
            let k = subgoal_at(t);
            let from = DOOR_OPENING_DEG[k.saturating_sub(1) % DOOR_OPENING_DEG.len()];
            let to = DOOR_OPENING_DEG[k % DOOR_OPENING_DEG.len()];
            let theta = (from + (to - from) * smoothstep((t - subgoals[k].start_s) / 3.0)).to_radians();
            let dir = Vec3::new(theta.sin(), theta.cos(), 0.0);
            let jitter = Vec3::new(door_rng.gen_range(-0.002..0.002), door_rng.gen_range(-0.002..0.002), 0.0);
            let yaw = if dir.x < 0.0 { -dir } else { dir };
            DoorSample {
                timestamp: t,
                centroid: Vec3::from(DOOR_HINGE) + dir * DOOR_HALF_WIDTH + jitter,
                yaw_deg: Some(yaw.y.atan2(yaw.x).to_degrees()),
            }
        })
        .collect();

    let annotations = annotation_table(&subgoals, &episodes);
    Ok(SynthCycle {
        spec: spec.clone(),
        reference: PoseSequence::new(topology, ref_frames, spec.gt_rate_hz)?,
        cameras,
        streams,
        doors: DoorTrack { samples: door_samples },
        subgoals,
        episodes,
        annotations,
    })
}

/// Per-subgoal class durations from interval intersection.
fn annotation_table(subgoals: &[AnnotationSegment], episodes: &[AnnotationSegment]) -> AnnotationTable {
    let mut postures = Vec::new();
    for (i, sg) in subgoals.iter().enumerate() {
        for c in PostureClass::ALL {
            let d: f64 = episodes
                .iter()
                .filter(|e| e.label == c.code())
                .map(|e| (e.end_s.min(sg.end_s) - e.start_s.max(sg.start_s)).max(0.0))
                .sum();
            if d > 0.0 {
                postures.push(PostureAnnotation {
                    subgoal: i,
                    class: c,
                    duration_s: d,
                    valid: d >= MIN_POSTURE_DURATION_S,
                });
            }
        }
    }
    AnnotationTable {
        classes: PostureClass::ALL.to_vec(),
        subgoals: subgoals.to_vec(),
        postures,
    }
}

impl SynthCycle {
    /// Writes `manifest.toml` plus the files it references into `dir` and
    /// returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| -> Result<PathBuf> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            Ok(PathBuf::from(name))
        };
        let reference = PoseStream {
            topology: self.reference.topology_arc(),
            records: self
                .reference
                .frames()
                .iter()
                .map(|f| PoseRecord {
                    camera: REFERENCE_CAMERA.into(),
                    person: 0,
                    pose: f.clone(),
                })
                .collect(),
        };
        let reference_path = write("reference.csv", reference.to_csv())?;
        let mut streams = Vec::new();
        for (cam, s) in self.cameras.iter().zip(&self.streams) {
            streams.push(StreamPaths {
                camera: cam.id.clone(),
                poses: write(&format!("poses_{}.csv", cam.id), s.to_csv())?,
                depth_dir: None,
                mask_dir: None,
            });
        }
        let manifest = DatasetManifest {
            base_dir: dir.to_path_buf(),
            workstation: self.spec.workstation.parse()?,
            bvh_scale: Default::default(),
            bvh_up: UpAxis::default(),
            cart_position: Some([DOOR_HINGE[0], DOOR_HINGE[1] + DOOR_HALF_WIDTH, DOOR_HINGE[2]]),
            cameras: self.cameras.clone(),
            recordings: RecordingPaths {
                bvh: None,
                reference_poses: Some(reference_path),
                annotations: Some(write("annotations.csv", self.annotations.to_csv())?),
                episodes: Some(write("episodes.csv", write_episodes(&self.episodes))?),
                doors: Some(write("doors.csv", self.doors.to_csv())?),
                streams,
            },
        };
        let path = dir.join("manifest.toml");
        std::fs::write(&path, manifest.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eaws::{extract_features, label_frames, rule_label};
    use crate::pose_stream::{select_active_worker, select_view, CandidatePose, ViewSelectionPolicy};

    fn quiet(spec: ScenarioSpec) -> ScenarioSpec {
        ScenarioSpec {
            joint_noise_m: 0.0,
            ..spec
        }
    }

    #[test]
    fn null_scenario_is_upright() {
        let c = generate(&ScenarioSpec {
            cycle_duration_s: 30.0,
            ..ScenarioSpec::default()
        })
        .unwrap();
        let f = extract_features(&c.reference).unwrap();
        assert!(f.iter().all(|x| rule_label(x).is_empty()));
    }

    #[test]
    fn strongly_bent_core_exceeds_sixty_degrees() {
        let spec = ScenarioSpec {
            cycle_duration_s: 40.0,
            episodes: vec![ScriptedEpisode::new(PostureClass::P4StronglyBentForward, 10.0, 10.0)],
            ..ScenarioSpec::default()
        };
        let c = generate(&spec).unwrap();
        let f = extract_features(&c.reference).unwrap();
        for (fr, x) in c.reference.frames().iter().zip(&f) {
            if fr.timestamp >= 10.5 && fr.timestamp < 19.5 {
                assert!(x.trunk_flexion_deg >= 60.0);
            }
        }
    }

    #[test]
    fn episodes_recovered_by_majority_vote() {
        let c = generate(&ScenarioSpec::standard(3)).unwrap();
        let f = extract_features(&c.reference).unwrap();
        let ts: Vec<f64> = c.reference.frames().iter().map(|f| f.timestamp).collect();
        let labels = label_frames(&f, &ts, 4.0);
        for e in c.episodes.iter().filter(|e| e.duration() >= 4.0) {
            let class = PostureClass::parse(&e.label).unwrap();
            let (mut hit, mut n) = (0, 0);
            for (t, l) in ts.iter().zip(&labels) {
                if e.contains(*t) {
                    n += 1;
                    hit += l.contains(&class) as usize;
                }
            }
            assert!(hit * 2 > n, "{} at {}: {hit}/{n}", e.label, e.start_s);
        }
        // no spurious classes far from every episode
        for (t, l) in ts.iter().zip(&labels) {
            let near = c.episodes.iter().any(|e| *t > e.start_s - 2.0 && *t < e.end_s + 2.0);
            assert!(near || l.is_empty(), "{t}: {l:?}");
        }
    }

    #[test]
    fn noiseless_cameras_reproduce_reference() {
        let c = generate(&quiet(ScenarioSpec {
            cycle_duration_s: 25.0,
            ..ScenarioSpec::default()
        }))
        .unwrap();
        for (s, cam) in c.streams.iter().zip(&c.cameras) {
            assert_eq!(s.records.len(), c.reference.len() / 2);
            for (r, g) in s.records.iter().zip(c.reference.frames().iter().step_by(2)) {
                assert_eq!(r.pose.timestamp, g.timestamp);
                for (p, q) in r.pose.positions.iter().zip(&g.positions) {
                    assert!((cam.model.extrinsic.apply(p) - q).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cycle_statistics() {
        for seed in 0..20 {
            let c = generate(&ScenarioSpec {
                seed,
                cycle_duration_s: 216.0,
                ..ScenarioSpec::default()
            })
            .unwrap();
            let total: f64 = c.subgoals.iter().map(|s| s.duration()).sum();
            assert!((total - 216.0).abs() < 216.0 * 0.1);
            for s in &c.subgoals {
                assert!((SUBGOAL_MIN_S - 1e-9..=SUBGOAL_MAX_S + 1e-9).contains(&s.duration()), "{}", s.duration());
            }
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let spec = ScenarioSpec {
            cycle_duration_s: 30.0,
            ..ScenarioSpec::standard(5)
        };
        let spec = ScenarioSpec {
            episodes: spec.episodes.into_iter().filter(|e| e.end_s() <= 30.0).collect(),
            occlusions: vec![],
            ..spec
        };
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.streams, b.streams);
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.doors, b.doors);
    }

    #[test]
    fn exclusive_episodes_rejected() {
        let spec = ScenarioSpec {
            episodes: vec![
                ScriptedEpisode::new(PostureClass::P3BentForward, 10.0, 10.0),
                ScriptedEpisode::new(PostureClass::P4StronglyBentForward, 15.0, 10.0),
            ],
            ..ScenarioSpec::default()
        };
        assert!(generate(&spec).is_err());
        let ok = ScenarioSpec {
            episodes: vec![
                ScriptedEpisode::new(PostureClass::P3BentForward, 10.0, 10.0),
                ScriptedEpisode::new(PostureClass::TrunkRotation, 15.0, 10.0),
            ],
            ..ScenarioSpec::default()
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn occlusion_hands_selection_to_other_camera() {
        let spec = ScenarioSpec {
            cycle_duration_s: 22.0,
            occlusions: vec![Occlusion {
                camera: 0,
                start_s: 5.0,
                end_s: 10.0,
            }],
            bystander: true,
            ..ScenarioSpec::default()
        };
        let c = generate(&spec).unwrap();
        let policy = ViewSelectionPolicy::default();
        let cart = Vec3::new(2.0, 0.0, 1.0);
        let n = c.streams[0].records.len() / 2;
        for i in 0..n {
            let mut cands = Vec::new();
            for (s, cam) in c.streams.iter().zip(&c.cameras) {
                let people: Vec<PoseFrame> = s.records[2 * i..2 * i + 2]
                    .iter()
                    .map(|r| r.pose.transformed(&cam.model.extrinsic, CoordFrame::Global))
                    .collect();
                let w = select_active_worker(&people, &SkeletonTopology::body15(), &cart).unwrap();
                assert_eq!(s.records[2 * i + w].person, 1);
                cands.push(CandidatePose::new(cam.id.clone(), people[w].clone()));
            }
            let t = c.streams[0].records[2 * i].pose.timestamp;
            let chosen = select_view(&cands, &policy).unwrap();
            if (5.0..10.0).contains(&t) {
                assert_eq!(chosen.camera_id, "Out10");
            }
        }
    }

    #[test]
    fn annotation_table_matches_script() {
        let c = generate(&ScenarioSpec::standard(1)).unwrap();
        let total: f64 = c.episodes.iter().map(|e| e.duration()).sum();
        let table: f64 = c.annotations.postures.iter().map(|p| p.duration_s).sum();
        assert!((total - table).abs() < 1e-9);
    }

    #[test]
    fn written_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&ScenarioSpec {
            cycle_duration_s: 24.0,
            ..ScenarioSpec::default()
        })
        .unwrap();
        let path = c.write(dir.path()).unwrap();
        let m = crate::manifest::load_manifest(&path).unwrap();
        assert_eq!(m.recordings.streams.len(), 2);
        let back = PoseStream::read(&m.resolve(&m.recordings.streams[1].poses)).unwrap();
        assert_eq!(back.records.len(), c.streams[1].records.len());
    }
}
