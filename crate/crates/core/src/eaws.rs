//! Ergonomic posture analysis on the seven screening-sheet classes.
//!
//! Per-frame posture features feed two paths: a threshold rule engine used
//! for reference labels, and windowed soft-DTW classification against an
//! exemplar library. Detected segments are filtered by the 4 s validity
//! rule and aggregated per subgoal and per minute.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{AnnotationSegment, PoseSequence, PostureClass, SkeletonTopology, Vec3, MIN_POSTURE_DURATION_S};
use crate::softdtw::{classify_by_alignment, ExemplarLibrary, FeatureSequence, SoftDtwParams, Standardizer};

pub use crate::model::PostureClass as Posture;

/// Library label for windows that show none of the seven classes.
pub const NEUTRAL_LABEL: &str = "none";

pub const FEATURE_DIM: usize = 8;

/// Thresholds of the rule engine (degrees, meters, m/s).
pub mod thresholds {
    pub const BENT_FORWARD_DEG: f64 = 20.0;
    pub const STRONGLY_BENT_DEG: f64 = 60.0;
    pub const TRUNK_ROTATION_DEG: f64 = 20.0;
    pub const LATERAL_BEND_DEG: f64 = 20.0;
    pub const WALKING_SPEED_MPS: f64 = 0.2;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostureFeatures {
    pub trunk_flexion_deg: f64,
    pub trunk_rotation_deg: f64,
    pub lateral_bend_deg: f64,
    pub elbow_above_shoulder_l: f64,
    pub elbow_above_shoulder_r: f64,
    pub wrist_above_head_l: f64,
    pub wrist_above_head_r: f64,
    pub root_speed_mps: f64,
}

impl PostureFeatures {
    pub fn to_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.trunk_flexion_deg,
            self.trunk_rotation_deg,
            self.lateral_bend_deg,
            self.elbow_above_shoulder_l,
            self.elbow_above_shoulder_r,
            self.wrist_above_head_l,
            self.wrist_above_head_r,
            self.root_speed_mps,
        ]
    }
}

struct BodyJoints {
    pelvis: usize,
    neck: usize,
    head: usize,
    l_shoulder: usize,
    r_shoulder: usize,
    l_elbow: usize,
    r_elbow: usize,
    l_wrist: usize,
    r_wrist: usize,
    l_hip: usize,
    r_hip: usize,
}

impl BodyJoints {
    fn find(t: &SkeletonTopology) -> Result<Self> {
        const NAMES: [[&str; 11]; 2] = [
            [
                "pelvis", "neck", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hip", "r_hip",
            ],
            [
                "Hips",
                "Neck",
                "Head",
                "LeftShoulder",
                "RightShoulder",
                "LeftElbow",
                "RightElbow",
                "LeftWrist",
                "RightWrist",
                "LeftHip",
                "RightHip",
            ],
        ];
        let names = NAMES
            .iter()
            .find(|n| t.index(n[0]).is_some())
            .unwrap_or(&NAMES[0]);
        let j = |k: usize| t.require(names[k]);
        Ok(Self {
            pelvis: j(0)?,
            neck: j(1)?,
            head: j(2)?,
            l_shoulder: j(3)?,
            r_shoulder: j(4)?,
            l_elbow: j(5)?,
            r_elbow: j(6)?,
            l_wrist: j(7)?,
            r_wrist: j(8)?,
            l_hip: j(9)?,
            r_hip: j(10)?,
        })
    }
}

fn horizontal(v: Vec3) -> Vec3 {
    Vec3::new(v.x, v.y, 0.0)
}

/// Angles and margins of one global-frame (Z-up) pose; speed is filled in
/// by the caller.
fn static_features(p: &[Vec3], j: &BodyJoints) -> PostureFeatures {
    let up = Vec3::z();
    let mut lateral_axis = horizontal(p[j.l_hip] - p[j.r_hip]);
    if lateral_axis.norm() < 1e-9 {
        lateral_axis = horizontal(p[j.l_shoulder] - p[j.r_shoulder]);
    }
    let lateral_axis = lateral_axis.try_normalize(1e-12).unwrap_or_else(Vec3::y);
    let forward = lateral_axis.cross(&up);

    let trunk = p[j.neck] - p[j.pelvis];
    let vertical = trunk.dot(&up);
    let flexion = trunk.dot(&forward).atan2(vertical).to_degrees().max(0.0);
    // angle between the trunk and the sagittal plane
    let lateral = match trunk.try_normalize(1e-12) {
        Some(t) => t.dot(&lateral_axis).abs().min(1.0).asin().to_degrees(),
        None => 0.0,
    };

    let shoulders = horizontal(p[j.l_shoulder] - p[j.r_shoulder]);
    let rotation = match shoulders.try_normalize(1e-9) {
        Some(s) => s.dot(&lateral_axis).clamp(-1.0, 1.0).acos().to_degrees(),
        None => 0.0,
    };

    PostureFeatures {
        trunk_flexion_deg: flexion,
        trunk_rotation_deg: rotation,
        lateral_bend_deg: lateral,
        elbow_above_shoulder_l: p[j.l_elbow].z - p[j.l_shoulder].z,
        elbow_above_shoulder_r: p[j.r_elbow].z - p[j.r_shoulder].z,
        wrist_above_head_l: p[j.l_wrist].z - p[j.head].z,
        wrist_above_head_r: p[j.r_wrist].z - p[j.head].z,
        root_speed_mps: 0.0,
    }
}

/// Half-width of the central difference behind the root speed.
pub const SPEED_SPAN_S: f64 = 0.25;

/// One feature vector per frame of a global-frame sequence.
pub fn extract_features(seq: &PoseSequence) -> Result<Vec<PostureFeatures>> {
    let joints = BodyJoints::find(seq.topology())?;
    let frames = seq.frames();
    let mut out: Vec<PostureFeatures> = frames.iter().map(|f| static_features(&f.positions, &joints)).collect();
    let n = frames.len();
    let span = ((SPEED_SPAN_S * seq.rate_hz()).round() as usize).max(1);
    for i in 0..n {
        let (a, b) = (i.saturating_sub(span), (i + span).min(n - 1));
        if a == b {
            continue;
        }
        let dp = horizontal(frames[b].positions[joints.pelvis] - frames[a].positions[joints.pelvis]);
        out[i].root_speed_mps = dp.norm() / (frames[b].timestamp - frames[a].timestamp);
    }
    Ok(out)
}

pub fn features_to_sequence(features: &[PostureFeatures]) -> Result<FeatureSequence> {
    FeatureSequence::from_flat(FEATURE_DIM, features.iter().flat_map(|f| f.to_array()).collect())
}

/// Instantaneous classes of one feature vector. Standing & walking needs a
/// time horizon and is handled by [`rule_label_with_motion`].
pub fn rule_label(f: &PostureFeatures) -> BTreeSet<PostureClass> {
    use thresholds::*;
    let mut out = BTreeSet::new();
    if f.trunk_flexion_deg >= STRONGLY_BENT_DEG {
        out.insert(PostureClass::P4StronglyBentForward);
    } else if f.trunk_flexion_deg >= BENT_FORWARD_DEG {
        out.insert(PostureClass::P3BentForward);
    }
    // hands above head supersedes elbows above shoulder
    if f.wrist_above_head_l.max(f.wrist_above_head_r) > 0.0 {
        out.insert(PostureClass::P6HandsAboveHead);
    } else if f.elbow_above_shoulder_l.max(f.elbow_above_shoulder_r) >= 0.0 && f.trunk_flexion_deg < BENT_FORWARD_DEG {
        out.insert(PostureClass::P5ElbowAtAboveShoulder);
    }
    if f.trunk_rotation_deg >= TRUNK_ROTATION_DEG {
        out.insert(PostureClass::TrunkRotation);
    }
    if f.lateral_bend_deg >= LATERAL_BEND_DEG {
        out.insert(PostureClass::LateralBending);
    }
    out
}

/// [`rule_label`] plus standing & walking when nothing else fires and the
/// root speed alternated across the walking threshold within the horizon.
pub fn rule_label_with_motion(f: &PostureFeatures, speed_alternates: bool) -> BTreeSet<PostureClass> {
    let mut out = rule_label(f);
    if out.is_empty() && speed_alternates {
        out.insert(PostureClass::P1StandingWalking);
    }
    out
}

/// Rule labels for every frame; `horizon_s` is the centered interval over
/// which speed alternation is checked.
pub fn label_frames(features: &[PostureFeatures], timestamps: &[f64], horizon_s: f64) -> Vec<BTreeSet<PostureClass>> {
    let half = horizon_s / 2.0;
    let fast: Vec<bool> = features
        .iter()
        .map(|f| f.root_speed_mps >= thresholds::WALKING_SPEED_MPS)
        .collect();
    // prefix counts of fast frames
    let mut prefix = vec![0usize; fast.len() + 1];
    for (i, f) in fast.iter().enumerate() {
        prefix[i + 1] = prefix[i] + *f as usize;
    }
    (0..features.len())
        .map(|i| {
            let lo = timestamps.partition_point(|t| *t < timestamps[i] - half);
            let hi = timestamps.partition_point(|t| *t <= timestamps[i] + half);
            let n_fast = prefix[hi] - prefix[lo];
            let alternates = n_fast > 0 && n_fast < hi - lo;
            rule_label_with_motion(&features[i], alternates)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostureSegment {
    pub class: PostureClass,
    pub start_s: f64,
    pub end_s: f64,
    pub valid: bool,
}

impl PostureSegment {
    /// Validity tolerance absorbs timestamp round-off only.
    const VALID_EPS: f64 = 1e-9;

    pub fn new(class: PostureClass, start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite()) || end_s <= start_s {
            return Err(Error::invalid(format!("segment [{start_s}, {end_s}] is empty")));
        }
        Ok(Self {
            class,
            start_s,
            end_s,
            valid: end_s - start_s >= MIN_POSTURE_DURATION_S - Self::VALID_EPS,
        })
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Runs of frames carrying each class become segments ending one sample
/// period after their last frame. Output is sorted by class, then start.
pub fn segments_from_frame_labels(timestamps: &[f64], labels: &[BTreeSet<PostureClass>], rate_hz: f64) -> Result<Vec<PostureSegment>> {
    if timestamps.len() != labels.len() {
        return Err(Error::Dimension {
            expected: timestamps.len(),
            got: labels.len(),
        });
    }
    let dt = 1.0 / rate_hz;
    let mut out = Vec::new();
    for class in PostureClass::ALL {
        let mut start: Option<usize> = None;
        for i in 0..=labels.len() {
            let on = i < labels.len() && labels[i].contains(&class);
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push(PostureSegment::new(class, timestamps[s], timestamps[i - 1] + dt)?);
                    start = None;
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Joins same-class segments that touch or overlap. Idempotent.
pub fn merge_segments(segments: &[PostureSegment]) -> Vec<PostureSegment> {
    let mut sorted = segments.to_vec();
    sorted.sort_by(|a, b| a.class.cmp(&b.class).then(a.start_s.total_cmp(&b.start_s)));
    let mut out: Vec<PostureSegment> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match out.last_mut() {
            Some(last) if last.class == s.class && s.start_s <= last.end_s => {
                if s.end_s > last.end_s {
                    *last = PostureSegment::new(last.class, last.start_s, s.end_s).expect("non-empty");
                }
            }
            _ => out.push(s),
        }
    }
    out
}

/// Number of `window_s` windows at `hop_s` spacing inside `duration_s`.
pub fn window_count(duration_s: f64, window_s: f64, hop_s: f64) -> usize {
    if duration_s + 1e-9 < window_s {
        return 0;
    }
    ((duration_s - window_s) / hop_s + 1e-9).floor() as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub window_s: f64,
    pub hop_s: f64,
    pub gamma: f64,
    /// Exemplars per class averaged into the class score.
    pub k: usize,
    /// Keep every `feature_stride`-th frame when aligning.
    pub feature_stride: usize,
    /// When set, every class scoring at or below this also labels the
    /// window (multi-label mode). `None` keeps only the best class.
    pub multi_label_threshold: Option<f64>,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            window_s: 8.0,
            hop_s: 4.0,
            gamma: 0.1,
            k: 1,
            feature_stride: 3,
            multi_label_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowResult {
    pub start_s: f64,
    pub end_s: f64,
    /// Best library label (a class code or [`NEUTRAL_LABEL`]).
    pub label: String,
    pub classes: BTreeSet<PostureClass>,
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub windows: Vec<WindowResult>,
    pub segments: Vec<PostureSegment>,
}

fn check_library(lib: &ExemplarLibrary) -> Result<()> {
    if lib.dim != FEATURE_DIM {
        return Err(Error::Dimension {
            expected: FEATURE_DIM,
            got: lib.dim,
        });
    }
    let labels = lib.labels();
    for c in PostureClass::ALL {
        if !labels.contains(&c.code()) {
            return Err(Error::invalid(format!("exemplar library has no `{}` exemplar", c.code())));
        }
    }
    for l in labels {
        if l != NEUTRAL_LABEL && PostureClass::parse(l).is_none() {
            return Err(Error::invalid(format!("unknown exemplar label `{l}`")));
        }
    }
    Ok(())
}

/// Sliding-window posture detection over a global-frame sequence.
pub fn detect_postures(seq: &PoseSequence, library: &ExemplarLibrary, params: &DetectParams) -> Result<Detection> {
    check_library(library)?;
    let t0 = seq.start_time();
    let duration = seq.duration();
    let n_windows = window_count(duration, params.window_s, params.hop_s);
    if n_windows == 0 {
        return Err(Error::invalid(format!(
            "sequence of {duration:.3} s is shorter than one {} s window",
            params.window_s
        )));
    }
    let sdtw = SoftDtwParams::new(params.gamma)?;
    let features = features_to_sequence(&extract_features(seq)?)?;
    let features = match &library.standardizer {
        Some(s) => s.apply(&features)?,
        None => features,
    };
    let timestamps: Vec<f64> = seq.frames().iter().map(|f| f.timestamp).collect();
    let exemplars: Vec<(String, FeatureSequence)> = library.exemplars.clone();

    let windows = (0..n_windows)
        .into_par_iter()
        .map(|w| {
            let start = t0 + w as f64 * params.hop_s;
            let end = start + params.window_s;
            let lo = timestamps.partition_point(|t| *t < start - 1e-9);
            let hi = timestamps.partition_point(|t| *t < end - 1e-9);
            if lo >= hi {
                return Err(Error::invalid(format!("window [{start}, {end}) holds no frames")));
            }
            let query = features.subsample(lo, hi, params.feature_stride)?;
            let r = classify_by_alignment(&query, &exemplars, &sdtw, params.k)?;
            let mut classes: BTreeSet<PostureClass> = PostureClass::parse(&r.label).into_iter().collect();
            if let Some(th) = params.multi_label_threshold {
                classes.extend(
                    r.scores
                        .iter()
                        .filter(|(_, s)| *s <= th)
                        .filter_map(|(l, _)| PostureClass::parse(l)),
                );
            }
            Ok(WindowResult {
                start_s: start,
                end_s: end,
                label: r.label,
                classes,
                scores: r.scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let segments = segments_from_windows(&windows, params, t0 + duration)?;
    Ok(Detection { windows, segments })
}

/// Each window owns the central `hop_s` of its extent (the first and last
/// windows extend to the sequence bounds); consecutive windows carrying a
/// class join into one segment.
pub fn segments_from_windows(windows: &[WindowResult], params: &DetectParams, seq_end: f64) -> Result<Vec<PostureSegment>> {
    let margin = (params.window_s - params.hop_s) / 2.0;
    let core = |i: usize| {
        let w = &windows[i];
        let lo = if i == 0 { w.start_s } else { w.start_s + margin };
        let hi = if i + 1 == windows.len() { seq_end.max(w.end_s) } else { w.end_s - margin };
        (lo, hi)
    };
    let mut out = Vec::new();
    for class in PostureClass::ALL {
        let mut run: Option<(f64, f64)> = None;
        for i in 0..windows.len() {
            if windows[i].classes.contains(&class) {
                let (lo, hi) = core(i);
                run = Some(match run {
                    Some((s, _)) => (s, hi),
                    None => (lo, hi),
                });
            } else if let Some((s, e)) = run.take() {
                out.push(PostureSegment::new(class, s, e)?);
            }
        }
        if let Some((s, e)) = run {
            out.push(PostureSegment::new(class, s, e)?);
        }
    }
    Ok(merge_segments(&out))
}

/// Cuts one exemplar per labeled episode (at most one window long, centered
/// on the episode) plus neutral exemplars from the gaps between episodes.
/// Episodes shorter than 4 s are skipped. The library's standardizer is
/// fitted on the cut exemplars and stored pre-applied.
pub fn curate_library(seq: &PoseSequence, episodes: &[AnnotationSegment], params: &DetectParams) -> Result<ExemplarLibrary> {
    let features = features_to_sequence(&extract_features(seq)?)?;
    let timestamps: Vec<f64> = seq.frames().iter().map(|f| f.timestamp).collect();
    let cut = |start: f64, end: f64| -> Result<FeatureSequence> {
        let len = (end - start).min(params.window_s);
        let mid = (start + end) / 2.0;
        let (a, b) = (mid - len / 2.0, mid + len / 2.0);
        let lo = timestamps.partition_point(|t| *t < a - 1e-9);
        let hi = timestamps.partition_point(|t| *t < b - 1e-9);
        if lo >= hi {
            return Err(Error::invalid(format!("interval [{start}, {end}] holds no frames")));
        }
        features.subsample(lo, hi, params.feature_stride)
    };

    let mut raw: Vec<(String, FeatureSequence)> = Vec::new();
    let mut sorted: Vec<&AnnotationSegment> = episodes.iter().collect();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for e in &sorted {
        if e.duration() < MIN_POSTURE_DURATION_S {
            continue;
        }
        let class = PostureClass::parse(&e.label).ok_or_else(|| Error::invalid(format!("unknown posture label `{}`", e.label)))?;
        raw.push((class.code().to_string(), cut(e.start_s, e.end_s)?));
    }
    // neutral stretches between episodes, away from their ramps
    let guard = 1.0;
    let mut cursor = seq.start_time();
    let seq_end = seq.start_time() + seq.duration();
    for e in sorted.iter().map(|e| (e.start_s, e.end_s)).chain(std::iter::once((seq_end, seq_end))) {
        let (a, b) = (cursor + guard, e.0 - guard);
        if b - a >= params.window_s {
            raw.push((NEUTRAL_LABEL.to_string(), cut(a, b)?));
        }
        cursor = cursor.max(e.1);
    }

    let standardizer = Standardizer::fit(raw.iter().map(|(_, s)| s))?;
    let exemplars = raw
        .into_iter()
        .map(|(l, s)| Ok((l, standardizer.apply(&s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExemplarLibrary {
        dim: FEATURE_DIM,
        standardizer: Some(standardizer),
        exemplars,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassCell {
    pub occurrences: usize,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgoalRow {
    pub name: String,
    pub start_s: f64,
    pub end_s: f64,
    pub cells: [ClassCell; 7],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EawsMinuteReport {
    pub rows: Vec<SubgoalRow>,
    /// Valid time that falls outside every subgoal.
    pub outside: [ClassCell; 7],
    pub totals: [ClassCell; 7],
    pub cycle_duration_s: f64,
}

impl EawsMinuteReport {
    /// Class duration per minute of cycle.
    pub fn per_minute(&self, class: PostureClass) -> f64 {
        self.totals[class.index()].duration_s / (self.cycle_duration_s / 60.0)
    }

    pub fn occurrences_per_minute(&self, class: PostureClass) -> f64 {
        self.totals[class.index()].occurrences as f64 / (self.cycle_duration_s / 60.0)
    }

    pub fn apportioned_total(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| &r.cells)
            .chain(std::iter::once(&self.outside))
            .flat_map(|c| c.iter())
            .map(|c| c.duration_s)
            .sum()
    }

    /// Sheet layout: one row per subgoal with a duration column per class,
    /// then occurrence columns, then total and per-minute rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Subgoal,Start [s],End [s]");
        for c in PostureClass::ALL {
            let _ = write!(out, ",{} [s]", c.title());
        }
        for c in PostureClass::ALL {
            let _ = write!(out, ",{} [n]", c.code());
        }
        out.push('\n');
        let row = |out: &mut String, name: &str, start: &str, end: &str, cells: &[ClassCell; 7]| {
            let _ = write!(out, "{name},{start},{end}");
            for c in cells {
                let _ = write!(out, ",{}", round6(c.duration_s));
            }
            for c in cells {
                let _ = write!(out, ",{}", c.occurrences);
            }
            out.push('\n');
        };
        for r in &self.rows {
            row(&mut out, &r.name.replace(',', ";"), &round6(r.start_s), &round6(r.end_s), &r.cells);
        }
        if self.outside.iter().any(|c| c.occurrences > 0) {
            row(&mut out, "(outside subgoals)", "", "", &self.outside);
        }
        row(&mut out, "Task cycle", "0", &round6(self.cycle_duration_s), &self.totals);
        let _ = write!(out, "Per minute,,");
        for c in PostureClass::ALL {
            let _ = write!(out, ",{}", round6(self.per_minute(c)));
        }
        for c in PostureClass::ALL {
            let _ = write!(out, ",{}", round6(self.occurrences_per_minute(c)));
        }
        out.push('\n');
        out
    }
}

fn round6(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Apportions every valid segment to the subgoals it overlaps.
pub fn aggregate_report(segments: &[PostureSegment], subgoals: &[AnnotationSegment], cycle_duration_s: f64) -> Result<EawsMinuteReport> {
    if !(cycle_duration_s.is_finite() && cycle_duration_s > 0.0) {
        return Err(Error::invalid(format!("cycle duration {cycle_duration_s} must be positive")));
    }
    let mut order: Vec<&AnnotationSegment> = subgoals.iter().collect();
    order.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for pair in order.windows(2) {
        if pair[1].start_s < pair[0].end_s {
            return Err(Error::invalid(format!("subgoals `{}` and `{}` overlap", pair[0].label, pair[1].label)));
        }
    }
    let mut rows: Vec<SubgoalRow> = subgoals
        .iter()
        .map(|s| SubgoalRow {
            name: s.label.clone(),
            start_s: s.start_s,
            end_s: s.end_s,
            cells: [ClassCell::default(); 7],
        })
        .collect();
    let mut outside = [ClassCell::default(); 7];
    let mut totals = [ClassCell::default(); 7];

    for seg in segments.iter().filter(|s| s.valid) {
        let k = seg.class.index();
        totals[k].occurrences += 1;
        totals[k].duration_s += seg.duration();
        let mut inside = 0.0;
        for row in rows.iter_mut() {
            let overlap = seg.end_s.min(row.end_s) - seg.start_s.max(row.start_s);
            if overlap > 0.0 {
                row.cells[k].occurrences += 1;
                row.cells[k].duration_s += overlap;
                inside += overlap;
            }
        }
        let rest = seg.duration() - inside;
        if rest > 0.0 {
            outside[k].occurrences += 1;
            outside[k].duration_s += rest;
        }
    }
    Ok(EawsMinuteReport {
        rows,
        outside,
        totals,
        cycle_duration_s,
    })
}

/// Segments listed one per line: `class,start_s,end_s,duration_s,valid`.
pub fn segments_to_csv(segments: &[PostureSegment]) -> String {
    let mut out = String::from("class,start_s,end_s,duration_s,valid\n");
    for s in segments {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.class.code(),
            round6(s.start_s),
            round6(s.end_s),
            round6(s.duration()),
            s.valid
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnnotationKind, CoordFrame, PoseFrame};
    use proptest::prelude::*;
    use std::sync::Arc;

    /// Upright body15 skeleton facing +X with the pelvis at `root`.
    fn upright(root: Vec3) -> Vec<Vec3> {
        let mut p = vec![Vec3::zeros(); 15];
        let y = |v: f64| Vec3::new(0.0, v, 0.0);
        let z = |v: f64| Vec3::new(0.0, 0.0, v);
        p[0] = root;
        p[1] = root + z(0.5);
        p[2] = p[1] + z(0.25);
        p[6] = p[1] + y(0.18);
        p[3] = p[1] - y(0.18);
        p[7] = p[6] - z(0.3);
        p[4] = p[3] - z(0.3);
        p[8] = p[7] - z(0.27);
        p[5] = p[4] - z(0.27);
        p[12] = root + y(0.1);
        p[9] = root - y(0.1);
        p[13] = p[12] - z(0.45);
        p[10] = p[9] - z(0.45);
        p[14] = p[13] - z(0.45);
        p[11] = p[10] - z(0.45);
        p
    }

    /// Tilts the upper body forward (toward +X) about the pelvis.
    fn bend(mut p: Vec<Vec3>, deg: f64) -> Vec<Vec3> {
        let rot = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), deg.to_radians());
        let root = p[0];
        for i in 1..=8 {
            p[i] = root + rot * (p[i] - root);
        }
        p
    }

    fn feats(p: &[Vec3]) -> PostureFeatures {
        static_features(p, &BodyJoints::find(&SkeletonTopology::body15()).unwrap())
    }

    #[test]
    fn upright_features() {
        let f = feats(&upright(Vec3::new(1.0, 2.0, 0.95)));
        assert!(f.trunk_flexion_deg.abs() < 1e-9);
        assert!(f.trunk_rotation_deg.abs() < 1e-9 && f.lateral_bend_deg.abs() < 1e-9);
        for m in [f.elbow_above_shoulder_l, f.elbow_above_shoulder_r, f.wrist_above_head_l, f.wrist_above_head_r] {
            assert!(m <= 0.0);
        }
        assert!(rule_label(&f).is_empty());
    }

    #[test]
    fn forty_degree_tilt() {
        let f = feats(&bend(upright(Vec3::zeros()), 40.0));
        assert!((f.trunk_flexion_deg - 40.0).abs() < 0.1);
        assert!(f.lateral_bend_deg.abs() < 1e-9);
    }

    #[test]
    fn wrists_above_head() {
        let mut p = upright(Vec3::zeros());
        p[5] = p[2] + Vec3::new(0.0, -0.1, 0.1);
        p[8] = p[2] + Vec3::new(0.0, 0.1, 0.1);
        let f = feats(&p);
        assert!((f.wrist_above_head_l - 0.1).abs() < 1e-12);
        assert!((f.wrist_above_head_r - 0.1).abs() < 1e-12);
    }

    fn neutral() -> PostureFeatures {
        PostureFeatures {
            trunk_flexion_deg: 0.0,
            trunk_rotation_deg: 0.0,
            lateral_bend_deg: 0.0,
            elbow_above_shoulder_l: -0.3,
            elbow_above_shoulder_r: -0.3,
            wrist_above_head_l: -0.8,
            wrist_above_head_r: -0.8,
            root_speed_mps: 0.0,
        }
    }

    #[test]
    fn rule_bands() {
        let set = |v: &[PostureClass]| v.iter().copied().collect::<BTreeSet<_>>();
        let f = PostureFeatures {
            trunk_flexion_deg: 45.0,
            ..neutral()
        };
        assert_eq!(rule_label(&f), set(&[PostureClass::P3BentForward]));
        let f = PostureFeatures {
            trunk_flexion_deg: 70.0,
            ..neutral()
        };
        assert_eq!(rule_label(&f), set(&[PostureClass::P4StronglyBentForward]));
        let f = PostureFeatures {
            wrist_above_head_l: 0.05,
            elbow_above_shoulder_l: 0.2,
            trunk_rotation_deg: 25.0,
            ..neutral()
        };
        assert_eq!(rule_label(&f), set(&[PostureClass::P6HandsAboveHead, PostureClass::TrunkRotation]));
        let f = PostureFeatures {
            elbow_above_shoulder_r: 0.02,
            ..neutral()
        };
        assert_eq!(rule_label(&f), set(&[PostureClass::P5ElbowAtAboveShoulder]));
        let f = PostureFeatures {
            elbow_above_shoulder_r: 0.02,
            trunk_flexion_deg: 25.0,
            ..neutral()
        };
        assert_eq!(rule_label(&f), set(&[PostureClass::P3BentForward]));
        assert!(rule_label(&PostureFeatures {
            trunk_flexion_deg: 19.99,
            ..neutral()
        })
        .is_empty());
        assert_eq!(rule_label_with_motion(&neutral(), true), set(&[PostureClass::P1StandingWalking]));
        assert!(rule_label_with_motion(&PostureFeatures { trunk_flexion_deg: 30.0, ..neutral() }, true)
            .contains(&PostureClass::P3BentForward));
    }

    #[test]
    fn walking_alternation_over_horizon() {
        let ts: Vec<f64> = (0..120).map(|i| i as f64 / 10.0).collect();
        let f: Vec<PostureFeatures> = ts
            .iter()
            .map(|t| PostureFeatures {
                root_speed_mps: if (*t as usize / 2) % 2 == 0 { 0.8 } else { 0.0 },
                ..neutral()
            })
            .collect();
        let labels = label_frames(&f, &ts, 6.0);
        assert!(labels.iter().all(|l| l.contains(&PostureClass::P1StandingWalking)));
        let still: Vec<PostureFeatures> = ts.iter().map(|_| neutral()).collect();
        assert!(label_frames(&still, &ts, 6.0).iter().all(BTreeSet::is_empty));
    }

    #[test]
    fn validity_boundary() {
        assert!(!PostureSegment::new(PostureClass::P3BentForward, 10.0, 13.9).unwrap().valid);
        assert!(PostureSegment::new(PostureClass::P3BentForward, 10.0, 14.0).unwrap().valid);
        assert!(PostureSegment::new(PostureClass::P3BentForward, 10.0, 10.0).is_err());
    }

    #[test]
    fn frame_runs_become_segments() {
        let rate = 30.0;
        let ts: Vec<f64> = (0..300).map(|i| i as f64 / rate).collect();
        let labels: Vec<BTreeSet<PostureClass>> = (0..300)
            .map(|i| {
                if (30..147).contains(&i) {
                    [PostureClass::P3BentForward].into()
                } else if (180..300).contains(&i) {
                    [PostureClass::LateralBending].into()
                } else {
                    BTreeSet::new()
                }
            })
            .collect();
        let segs = segments_from_frame_labels(&ts, &labels, rate).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].class, PostureClass::P3BentForward);
        assert!((segs[0].duration() - 3.9).abs() < 1e-9 && !segs[0].valid);
        assert!((segs[1].duration() - 4.0).abs() < 1e-9 && segs[1].valid);
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_count(216.0, 8.0, 4.0), 53);
        assert_eq!(window_count(8.0, 8.0, 4.0), 1);
        assert_eq!(window_count(11.9, 8.0, 4.0), 1);
        assert_eq!(window_count(12.0, 8.0, 4.0), 2);
        assert_eq!(window_count(7.9, 8.0, 4.0), 0);
    }

    fn subgoal(name: &str, a: f64, b: f64) -> AnnotationSegment {
        AnnotationSegment::new(name, a, b, AnnotationKind::Subgoal).unwrap()
    }

    #[test]
    fn report_rows() {
        let sg = [subgoal("1. Adjust WS", 11.0, 52.0), subgoal("2. Fixate rearview mirror", 52.0, 102.0)];
        let seg = PostureSegment::new(PostureClass::P3BentForward, 20.0, 36.0).unwrap();
        let r = aggregate_report(&[seg], &sg, 216.0).unwrap();
        assert_eq!(r.rows[0].cells[PostureClass::P3BentForward.index()].duration_s, 16.0);
        assert_eq!(r.rows[0].cells[PostureClass::P3BentForward.index()].occurrences, 1);
        assert_eq!(r.rows[1].cells[PostureClass::P3BentForward.index()].occurrences, 0);
        assert!((r.per_minute(PostureClass::P3BentForward) - 16.0 / 3.6).abs() < 1e-12);

        let straddle = PostureSegment::new(PostureClass::TrunkRotation, 46.0, 56.0).unwrap();
        let r = aggregate_report(&[straddle], &sg, 216.0).unwrap();
        let k = PostureClass::TrunkRotation.index();
        assert!((r.rows[0].cells[k].duration_s - 6.0).abs() < 1e-12);
        assert!((r.rows[1].cells[k].duration_s - 4.0).abs() < 1e-12);

        let empty = aggregate_report(&[], &sg, 216.0).unwrap();
        assert!(empty.totals.iter().all(|c| c.occurrences == 0 && c.duration_s == 0.0));

        let short = PostureSegment::new(PostureClass::P4StronglyBentForward, 20.0, 21.0).unwrap();
        assert_eq!(aggregate_report(&[short], &sg, 216.0).unwrap().totals, empty.totals);

        let overlapping = [subgoal("a", 0.0, 10.0), subgoal("b", 9.0, 20.0)];
        assert!(aggregate_report(&[], &overlapping, 216.0).is_err());
    }

    #[test]
    fn report_csv_is_stable() {
        let sg = [subgoal("A", 0.0, 30.0)];
        let seg = PostureSegment::new(PostureClass::P6HandsAboveHead, 5.0, 10.5).unwrap();
        let text = aggregate_report(&[seg], &sg, 60.0).unwrap().to_csv();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("A,0,30,0,0,0,0,5.5,0,0,0,0,0,0,1,0,0"));
        assert!(lines[3].starts_with("Per minute,,,0,0,0,0,5.5,"));
    }

    fn toy_sequence(duration_s: f64) -> PoseSequence {
        let rate = 30.0;
        let n = (duration_s * rate).round() as usize;
        let frames = (0..n)
            .map(|i| PoseFrame::certain(i as f64 / rate, upright(Vec3::new(0.0, 0.0, 0.95)), CoordFrame::Global).unwrap())
            .collect();
        PoseSequence::new(Arc::new(SkeletonTopology::body15()), frames, rate).unwrap()
    }

    #[test]
    fn detection_requires_complete_library_and_length() {
        let seq = toy_sequence(10.0);
        let one = features_to_sequence(&extract_features(&toy_sequence(1.0)).unwrap()).unwrap();
        let partial = ExemplarLibrary {
            dim: FEATURE_DIM,
            standardizer: None,
            exemplars: vec![("P3".into(), one.clone())],
        };
        assert!(detect_postures(&seq, &partial, &DetectParams::default()).is_err());
        let full = ExemplarLibrary {
            dim: FEATURE_DIM,
            standardizer: None,
            exemplars: PostureClass::ALL.iter().map(|c| (c.code().to_string(), one.clone())).collect(),
        };
        assert!(detect_postures(&toy_sequence(7.0), &full, &DetectParams::default()).is_err());
        let d = detect_postures(&seq, &full, &DetectParams::default()).unwrap();
        assert_eq!(d.windows.len(), 1);
    }

    fn arb_segment() -> impl Strategy<Value = PostureSegment> {
        (0usize..7, 0.0f64..200.0, 0.5f64..30.0)
            .prop_map(|(c, s, d)| PostureSegment::new(PostureClass::ALL[c], s, s + d).unwrap())
    }

    proptest! {
        #[test]
        fn merge_is_idempotent(segs in prop::collection::vec(arb_segment(), 0..20)) {
            let once = merge_segments(&segs);
            prop_assert_eq!(merge_segments(&once), once);
        }

        #[test]
        fn report_conserves_time(
            segs in prop::collection::vec(arb_segment(), 0..20),
            cuts in prop::collection::vec(1.0f64..40.0, 1..6),
        ) {
            let mut sg = Vec::new();
            let mut t = 10.0;
            for (i, c) in cuts.iter().enumerate() {
                sg.push(subgoal(&format!("S{i}"), t, t + c));
                t += c;
            }
            let r = aggregate_report(&segs, &sg, 240.0).unwrap();
            let valid: f64 = segs.iter().filter(|s| s.valid).map(|s| s.duration()).sum();
            prop_assert!((r.apportioned_total() - valid).abs() < 1e-9);
            let totals: f64 = r.totals.iter().map(|c| c.duration_s).sum();
            prop_assert!((totals - valid).abs() < 1e-9);
        }

        #[test]
        fn bands_are_exclusive(flex in 0.0f64..180.0) {
            let l = rule_label(&PostureFeatures { trunk_flexion_deg: flex, ..neutral() });
            prop_assert!(!(l.contains(&PostureClass::P3BentForward) && l.contains(&PostureClass::P4StronglyBentForward)));
        }

        #[test]
        fn window_count_matches_closed_form(t in 8.0f64..2000.0) {
            let n = window_count(t, 8.0, 4.0);
            let start_last = (n - 1) as f64 * 4.0;
            prop_assert!(start_last + 8.0 <= t + 1e-9);
            prop_assert!(start_last + 4.0 + 8.0 > t);
        }
    }
}
