//! End-to-end stages: manifest ingestion into a normalized bundle, posture
//! analysis, progress windows and pose evaluation.
//!
//! A bundle directory holds `bundle.toml`, `poses.csv` (selected worker
//! pose per frame, global frame), `provenance.csv`, `doors.csv`, and when
//! available `reference.csv`, `annotations.csv` and `episodes.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annotations::{parse_annotations_str, parse_episodes_str, write_episodes, AnnotationTable};
use crate::bvh::{parse_bvh, resample, rig_to_sequence, y_up_to_z_up, MOCAP24_TO_BODY15};
use crate::door::{back_project, door_pose, DepthImage, DoorSample, DoorTrack, SegMask, DEFAULT_REPAIR_RADIUS};
use crate::eaws::{aggregate_report, curate_library, detect_postures, segments_to_csv, DetectParams, Detection, EawsMinuteReport};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, UpAxis};
use crate::metrics::{align_by_timestamp, JointErrorTable, JointMap, EVAL_RATE_HZ};
use crate::model::{AnnotationKind, AnnotationSegment, CoordFrame, PoseFrame, PoseSequence, SkeletonTopology, Vec3};
use crate::pose_stream::{select_active_worker, select_view, to_body_frame, CandidatePose, PoseRecord, PoseStream, ViewSelectionPolicy};
use crate::progress::{tokenize, TokenizedWindow, WindowDataset, WindowMeta};
use crate::softdtw::ExemplarLibrary;

pub const BUNDLE_RATE_HZ: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestParams {
    pub rate_hz: f64,
    pub joint_conf_threshold: f64,
    pub valid_fraction: f64,
    pub repair_radius: usize,
}

impl Default for IngestParams {
    fn default() -> Self {
        Self {
            rate_hz: BUNDLE_RATE_HZ,
            joint_conf_threshold: 0.5,
            valid_fraction: 0.5,
            repair_radius: DEFAULT_REPAIR_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProvenanceRow {
    pub timestamp: f64,
    /// `None` when no view was valid and the frame was dropped.
    pub camera: Option<String>,
    pub person: Option<u32>,
    pub mean_confidence: f64,
    pub valid_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleInfo {
    workstation: String,
    rate_hz: f64,
    frames: usize,
    dropped_frames: usize,
    reference_rate_hz: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub workstation: String,
    /// Selected worker pose per frame, global frame.
    pub poses: PoseSequence,
    pub sources: Vec<(String, u32)>,
    pub provenance: Vec<ProvenanceRow>,
    pub doors: DoorTrack,
    /// Ground truth resampled to the bundle rate.
    pub reference: Option<PoseSequence>,
    pub annotations: Option<AnnotationTable>,
    pub episodes: Option<Vec<AnnotationSegment>>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Groups detections into frames on a common clock starting at `t0`.
fn bin_records(stream: &PoseStream, t0: f64, rate: f64) -> BTreeMap<i64, Vec<&PoseRecord>> {
    let mut bins: BTreeMap<i64, Vec<&PoseRecord>> = BTreeMap::new();
    for r in &stream.records {
        let k = ((r.pose.timestamp - t0) * rate).round() as i64;
        let bin = bins.entry(k).or_default();
        if !bin.iter().any(|b| b.person == r.person) {
            bin.push(r);
        }
    }
    bins
}

fn to_global(pose: &PoseFrame, cam: &crate::model::CameraModel) -> PoseFrame {
    match pose.frame {
        CoordFrame::Camera => pose.transformed(&cam.extrinsic, CoordFrame::Global),
        _ => pose.clone(),
    }
}

fn stream_rate(seq_timestamps: &[f64]) -> Result<f64> {
    if seq_timestamps.len() < 2 {
        return Err(Error::invalid("reference stream needs at least two frames"));
    }
    let span = seq_timestamps[seq_timestamps.len() - 1] - seq_timestamps[0];
    Ok((seq_timestamps.len() - 1) as f64 / span)
}

fn load_reference(m: &DatasetManifest, rate: f64) -> Result<Option<PoseSequence>> {
    let r = &m.recordings;
    let seq = if let Some(p) = &r.reference_poses {
        let stream = PoseStream::read(&m.resolve(p))?;
        let frames: Vec<PoseFrame> = stream.records.into_iter().map(|r| r.pose).collect();
        let ts: Vec<f64> = frames.iter().map(|f| f.timestamp).collect();
        PoseSequence::new(stream.topology, frames, stream_rate(&ts)?)?
    } else if let Some(p) = &r.bvh {
        let rig = parse_bvh(&m.resolve(p))?;
        let seq = rig_to_sequence(&rig, m.bvh_scale)?;
        match m.bvh_up {
            UpAxis::Y => y_up_to_z_up(&seq)?,
            UpAxis::Z => seq,
        }
    } else {
        log::warn!("manifest has no ground-truth stream; bundle will carry none");
        return Ok(None);
    };
    if seq.rate_hz() > rate + 1e-6 {
        Ok(Some(resample(&seq, rate)?))
    } else {
        Ok(Some(seq))
    }
}

fn doors_from_masks(m: &DatasetManifest, params: &IngestParams, t0: f64, n_frames: usize) -> Result<Option<DoorTrack>> {
    let Some(s) = m.recordings.streams.iter().find(|s| s.depth_dir.is_some() && s.mask_dir.is_some()) else {
        return Ok(None);
    };
    let cam = &m.camera(&s.camera).expect("validated").model;
    let (ddir, mdir) = (m.resolve(s.depth_dir.as_ref().unwrap()), m.resolve(s.mask_dir.as_ref().unwrap()));
    let mut samples = Vec::new();
    for k in 0..n_frames {
        let (mp, dp) = (mdir.join(format!("{k}.png")), ddir.join(format!("{k}.png")));
        if !mp.exists() || !dp.exists() {
            continue;
        }
        let points = back_project(&SegMask::load(&mp)?, &DepthImage::load(&dp)?, cam, params.repair_radius)?;
        match door_pose(&points, cam) {
            Ok(p) => samples.push(DoorSample {
                timestamp: t0 + k as f64 / params.rate_hz,
                centroid: p.centroid_global,
                yaw_deg: p.yaw_deg,
            }),
            Err(e) => log::warn!("frame {k}: no door pose ({e})"),
        }
    }
    Ok(Some(DoorTrack { samples }))
}

/// Normalizes a manifest's recordings onto one clock: per frame, the
/// active worker of each camera is found (closest to the cart), then the
/// better valid view is kept.
pub fn ingest(m: &DatasetManifest, params: &IngestParams) -> Result<Bundle> {
    let policy = ViewSelectionPolicy::new(params.joint_conf_threshold, params.valid_fraction)?;
    if m.recordings.streams.is_empty() {
        return Err(Error::invalid("manifest lists no pose streams"));
    }
    let streams = m
        .recordings
        .streams
        .iter()
        .map(|s| Ok((s.camera.clone(), PoseStream::read(&m.resolve(&s.poses))?)))
        .collect::<Result<Vec<_>>>()?;
    let topology = streams[0].1.topology.clone();
    if streams.iter().any(|(_, s)| s.topology.name() != topology.name()) {
        return Err(Error::invalid("pose streams use different skeletons"));
    }
    let t0 = streams
        .iter()
        .flat_map(|(_, s)| s.records.iter().map(|r| r.pose.timestamp))
        .fold(f64::INFINITY, f64::min);
    if !t0.is_finite() {
        return Err(Error::invalid("pose streams are empty"));
    }
    let bins: Vec<(String, BTreeMap<i64, Vec<&PoseRecord>>)> =
        streams.iter().map(|(c, s)| (c.clone(), bin_records(s, t0, params.rate_hz))).collect();
    let last = bins.iter().filter_map(|(_, b)| b.keys().next_back().copied()).max().unwrap_or(0);

    let doors = match &m.recordings.doors {
        Some(p) => DoorTrack::read(&m.resolve(p))?,
        None => match doors_from_masks(m, params, t0, last as usize + 1)? {
            Some(t) => t,
            None => {
                log::warn!("no door track or depth/mask streams; door series is empty");
                DoorTrack::default()
            }
        },
    };
    let fallback_cart = m.cart_position.map(Vec3::from).unwrap_or_else(Vec3::zeros);

    let mut frames = Vec::new();
    let mut sources = Vec::new();
    let mut provenance = Vec::new();
    for k in 0..=last {
        let t = t0 + k as f64 / params.rate_hz;
        let cart = doors.nearest(t).map_or(fallback_cart, |d| d.centroid);
        let mut cands = Vec::new();
        let mut persons = Vec::new();
        for (cam_id, b) in &bins {
            let Some(recs) = b.get(&k) else { continue };
            let cam = &m.camera(cam_id).expect("validated").model;
            let poses: Vec<PoseFrame> = recs.iter().map(|r| to_global(&r.pose, cam)).collect();
            let w = select_active_worker(&poses, &topology, &cart)?;
            let mut pose = poses[w].clone();
            pose.timestamp = t;
            cands.push(CandidatePose::new(cam_id.clone(), pose));
            persons.push(recs[w].person);
        }
        let valid = cands.iter().filter(|c| crate::pose_stream::is_valid(&c.pose, &policy)).count();
        match select_view(&cands, &policy) {
            Some(c) => {
                let i = cands.iter().position(|x| std::ptr::eq(x, c)).expect("member");
                provenance.push(ProvenanceRow {
                    timestamp: t,
                    camera: Some(c.camera_id.clone()),
                    person: Some(persons[i]),
                    mean_confidence: c.mean_confidence,
                    valid_views: valid,
                });
                sources.push((c.camera_id.clone(), persons[i]));
                frames.push(c.pose.clone());
            }
            None => provenance.push(ProvenanceRow {
                timestamp: t,
                camera: None,
                person: None,
                mean_confidence: 0.0,
                valid_views: 0,
            }),
        }
    }
    let dropped = provenance.iter().filter(|p| p.camera.is_none()).count();
    if dropped > 0 {
        log::warn!("{dropped} frames had no valid view and were dropped");
    }
    if frames.is_empty() {
        return Err(Error::invalid("no frame has a valid view"));
    }

    let annotations = match &m.recordings.annotations {
        Some(p) => Some(parse_annotations_str(&read_text(&m.resolve(p))?)?),
        None => None,
    };
    let episodes = match &m.recordings.episodes {
        Some(p) => Some(parse_episodes_str(&read_text(&m.resolve(p))?)?),
        None => None,
    };
    Ok(Bundle {
        workstation: m.workstation.to_string(),
        poses: PoseSequence::new(topology, frames, params.rate_hz)?,
        sources,
        provenance,
        doors,
        reference: load_reference(m, params.rate_hz)?,
        annotations,
        episodes,
    })
}

fn provenance_csv(rows: &[ProvenanceRow]) -> String {
    let mut out = String::from("timestamp,camera,person,mean_confidence,valid_views\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.timestamp,
            r.camera.as_deref().unwrap_or(""),
            r.person.map(|p| p.to_string()).unwrap_or_default(),
            r.mean_confidence,
            r.valid_views
        );
    }
    out
}

fn parse_provenance(text: &str) -> Result<Vec<ProvenanceRow>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        out.push(ProvenanceRow {
            timestamp: f[0].parse().map_err(|_| bad("bad timestamp"))?,
            camera: (!f[1].is_empty()).then(|| f[1].to_string()),
            person: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad("bad person"))?) },
            mean_confidence: f[3].parse().map_err(|_| bad("bad confidence"))?,
            valid_views: f[4].parse().map_err(|_| bad("bad view count"))?,
        });
    }
    Ok(out)
}

fn sequence_to_stream(seq: &PoseSequence, sources: Option<&[(String, u32)]>, camera: &str) -> PoseStream {
    PoseStream {
        topology: seq.topology_arc(),
        records: seq
            .frames()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let (c, p) = sources.map_or((camera.to_string(), 0), |s| s[i].clone());
                PoseRecord {
                    camera: c,
                    person: p,
                    pose: f.clone(),
                }
            })
            .collect(),
    }
}

fn stream_to_sequence(s: PoseStream, rate: f64) -> Result<(PoseSequence, Vec<(String, u32)>)> {
    let sources = s.records.iter().map(|r| (r.camera.clone(), r.person)).collect();
    let frames = s.records.into_iter().map(|r| r.pose).collect();
    Ok((PoseSequence::new(s.topology, frames, rate)?, sources))
}

impl Bundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("poses.csv", sequence_to_stream(&self.poses, Some(&self.sources), "").to_csv())?;
        put("provenance.csv", provenance_csv(&self.provenance))?;
        put("doors.csv", self.doors.to_csv())?;
        if let Some(r) = &self.reference {
            put("reference.csv", sequence_to_stream(r, None, "reference").to_csv())?;
        }
        if let Some(a) = &self.annotations {
            put("annotations.csv", a.to_csv())?;
        }
        if let Some(e) = &self.episodes {
            put("episodes.csv", write_episodes(e))?;
        }
        let info = BundleInfo {
            workstation: self.workstation.clone(),
            rate_hz: self.poses.rate_hz(),
            frames: self.poses.len(),
            dropped_frames: self.provenance.iter().filter(|p| p.camera.is_none()).count(),
            reference_rate_hz: self.reference.as_ref().map(|r| r.rate_hz()),
        };
        put("bundle.toml", toml::to_string(&info).map_err(|e| Error::invalid(e.to_string()))?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let info: BundleInfo = toml::from_str(&read_text(&dir.join("bundle.toml"))?)
            .map_err(|e| Error::format(dir.join("bundle.toml"), e.to_string()))?;
        let (poses, sources) = stream_to_sequence(PoseStream::read(&dir.join("poses.csv"))?, info.rate_hz)?;
        if poses.is_empty() {
            return Err(Error::invalid(format!("bundle `{}` holds no poses", dir.display())));
        }
        let opt = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let reference = match (opt("reference.csv"), info.reference_rate_hz) {
            (Some(p), Some(rate)) => Some(stream_to_sequence(PoseStream::read(&p)?, rate)?.0),
            _ => None,
        };
        Ok(Self {
            workstation: info.workstation,
            poses,
            sources,
            provenance: parse_provenance(&read_text(&dir.join("provenance.csv"))?)?,
            doors: DoorTrack::read(&dir.join("doors.csv"))?,
            reference,
            annotations: opt("annotations.csv").map(|p| read_text(&p).and_then(|t| parse_annotations_str(&t))).transpose()?,
            episodes: opt("episodes.csv").map(|p| read_text(&p).and_then(|t| parse_episodes_str(&t))).transpose()?,
        })
    }

    /// Subgoals from the annotations, or one subgoal covering the poses.
    pub fn subgoals(&self) -> Result<Vec<AnnotationSegment>> {
        match &self.annotations {
            Some(a) if !a.subgoals.is_empty() => Ok(a.subgoals.clone()),
            _ => {
                let t0 = self.poses.start_time();
                Ok(vec![AnnotationSegment::new("Task cycle", t0, t0 + self.poses.duration(), AnnotationKind::Subgoal)?])
            }
        }
    }

    /// Exemplar library cut from this bundle's posture episodes.
    pub fn exemplars(&self, params: &DetectParams) -> Result<ExemplarLibrary> {
        let episodes = self
            .episodes
            .as_ref()
            .ok_or_else(|| Error::invalid("bundle has no posture episodes to cut exemplars from"))?;
        curate_library(&self.poses, episodes, params)
    }

    /// Pose error of the selected stream against the ground truth.
    pub fn pose_errors(&self, threshold_mm: f64) -> Result<JointErrorTable> {
        let reference = self.reference.as_ref().ok_or_else(|| Error::invalid("bundle has no ground-truth stream"))?;
        let map = joint_map_for(self.poses.topology(), reference.topology())?;
        let (p, g) = align_by_timestamp(&self.poses, reference, EVAL_RATE_HZ)?;
        JointErrorTable::evaluate(&p, &g, &map, threshold_mm)
    }
}

/// Identity for equal skeletons, otherwise the declared motion-capture map.
pub fn joint_map_for(pred: &SkeletonTopology, gt: &SkeletonTopology) -> Result<JointMap> {
    if pred.name() == gt.name() || pred.joints() == gt.joints() {
        return Ok(JointMap::identity(pred));
    }
    JointMap::from_names(pred, gt, &MOCAP24_TO_BODY15)
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub detection: Detection,
    pub report: EawsMinuteReport,
}

impl Analysis {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("segments.csv", segments_to_csv(&self.detection.segments))?;
        put("report.csv", self.report.to_csv())?;
        let mut w = String::from("start_s,end_s,label");
        if let Some(first) = self.detection.windows.first() {
            for (l, _) in &first.scores {
                let _ = write!(w, ",score_{l}");
            }
        }
        w.push('\n');
        for win in &self.detection.windows {
            let _ = write!(w, "{},{},{}", win.start_s, win.end_s, win.label);
            for (_, s) in &win.scores {
                let _ = write!(w, ",{s:.6}");
            }
            w.push('\n');
        }
        put("windows.csv", w)
    }
}

pub fn analyze(bundle: &Bundle, library: &ExemplarLibrary, params: &DetectParams) -> Result<Analysis> {
    let detection = detect_postures(&bundle.poses, library, params)?;
    let subgoals = bundle.subgoals()?;
    let cycle = subgoals.iter().map(|s| s.end_s).fold(f64::MIN, f64::max) - subgoals.iter().map(|s| s.start_s).fold(f64::MAX, f64::min);
    let report = aggregate_report(&detection.segments, &subgoals, cycle)?;
    Ok(Analysis { detection, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowParams {
    pub window_s: f64,
    pub hop_s: f64,
    /// Add door yaw (cos, sin) to every token.
    pub door_orientation: bool,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            window_s: 8.0,
            hop_s: 4.0,
            door_orientation: false,
        }
    }
}

/// Subgoal-labeled token windows. A window takes the subgoal holding its
/// midpoint; windows whose midpoint is outside every subgoal are skipped.
pub fn progress_windows(bundle: &Bundle, cycle: usize, params: &WindowParams) -> Result<WindowDataset> {
    let subgoals = match &bundle.annotations {
        Some(a) if !a.subgoals.is_empty() => &a.subgoals,
        _ => return Err(Error::invalid("bundle has no subgoal annotations")),
    };
    if bundle.doors.samples.is_empty() {
        return Err(Error::invalid("bundle has no door series"));
    }
    let topo = bundle.poses.topology_arc();
    let root = topo.root();
    let names: Vec<String> = subgoals.iter().map(|s| s.label.clone()).collect();
    let t0 = bundle.poses.start_time();
    let n = crate::eaws::window_count(bundle.poses.duration(), params.window_s, params.hop_s);
    let mut windows = Vec::new();
    for w in 0..n {
        let start = t0 + w as f64 * params.hop_s;
        let end = start + params.window_s;
        let mid = (start + end) / 2.0;
        let Some(label) = subgoals.iter().position(|s| s.start_s <= mid && mid < s.end_s) else {
            continue;
        };
        let frames = bundle.poses.slice_time(start, end);
        if frames.len() < crate::progress::N_TOKENS {
            continue;
        }
        let body = frames.iter().map(|f| to_body_frame(f, &topo)).collect::<Result<Vec<_>>>()?;
        let worker: Vec<Vec3> = frames.iter().map(|f| f.positions[root]).collect();
        let doors: Vec<&DoorSample> = frames.iter().map(|f| bundle.doors.nearest(f.timestamp).expect("non-empty")).collect();
        let centroids: Vec<Vec3> = doors.iter().map(|d| d.centroid).collect();
        let yaws: Vec<Option<f64>> = doors.iter().map(|d| d.yaw_deg).collect();
        let seq = PoseSequence::new(topo.clone(), body, bundle.poses.rate_hz())?;
        let meta = WindowMeta {
            workstation: bundle.workstation.clone(),
            cycle,
            start_s: start,
            end_s: end,
        };
        windows.push(tokenize(
            &seq,
            &worker,
            &centroids,
            params.door_orientation.then_some(yaws.as_slice()),
            label,
            meta,
        )?);
    }
    let d_in = windows.first().map_or(3 * topo.joints().len() + 6, |w: &TokenizedWindow| w.d_in);
    WindowDataset::new(names, d_in, windows)
}

/// Leading subgoal number, then name.
fn natural_key(name: &str) -> (u64, String) {
    let digits: String = name.chars().take_while(|c| c.is_ascii_digit()).collect();
    (digits.parse().unwrap_or(u64::MAX), name.to_string())
}

/// Concatenates datasets over the union of their class names.
pub fn merge_datasets(sets: &[WindowDataset]) -> Result<WindowDataset> {
    let first = sets.first().ok_or_else(|| Error::invalid("no window sets to merge"))?;
    let mut names: Vec<String> = sets.iter().flat_map(|s| s.class_names.iter().cloned()).collect();
    names.sort_by_key(|n| natural_key(n));
    names.dedup();
    let mut windows = Vec::new();
    for s in sets {
        if s.d_in != first.d_in {
            return Err(Error::Dimension {
                expected: first.d_in,
                got: s.d_in,
            });
        }
        for w in &s.windows {
            let mut w = w.clone();
            w.label = names.iter().position(|n| *n == s.class_names[w.label]).expect("union");
            windows.push(w);
        }
    }
    WindowDataset::new(names, first.d_in, windows)
}

/// Convenience for tests and the CLI: the body-frame topology used by
/// synthetic and estimated streams.
pub fn body15() -> Arc<SkeletonTopology> {
    Arc::new(SkeletonTopology::body15())
}
