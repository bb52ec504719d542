//! Shared domain types: skeleton topologies, pose frames and sequences,
//! rigid transforms and annotation segments.
//!
//! Global frame convention: right-handed, meters, Z up. Camera frames follow
//! the pinhole convention (X right, Y down, Z forward along the optical axis).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Shortest posture duration that counts for postural evaluation.
pub const MIN_POSTURE_DURATION_S: f64 = 4.0;

/// Which coordinate frame a pose is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordFrame {
    Camera,
    Global,
    Body,
}

impl fmt::Display for CoordFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoordFrame::Camera => "camera",
            CoordFrame::Global => "global",
            CoordFrame::Body => "body",
        })
    }
}

impl FromStr for CoordFrame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "camera" => Ok(CoordFrame::Camera),
            "global" => Ok(CoordFrame::Global),
            "body" => Ok(CoordFrame::Body),
            other => Err(Error::invalid(format!("unknown coordinate frame `{other}`"))),
        }
    }
}

/// A named joint tree. The root joint is the base spine (pelvis).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    name: String,
    joints: Vec<String>,
    parents: Vec<Option<usize>>,
}

impl SkeletonTopology {
    /// Builds a topology from `(joint, parent)` pairs. Exactly one joint may
    /// have no parent, names must be unique and the parent relation must be
    /// acyclic.
    pub fn new(name: &str, spec: &[(&str, Option<&str>)]) -> Result<Self> {
        let joints: Vec<String> = spec.iter().map(|(j, _)| j.to_string()).collect();
        for (i, j) in joints.iter().enumerate() {
            if joints[..i].contains(j) {
                return Err(Error::invalid(format!("duplicate joint name `{j}`")));
            }
        }
        let mut parents = Vec::with_capacity(spec.len());
        for (joint, parent) in spec {
            let p = match parent {
                None => None,
                Some(p) => Some(
                    joints
                        .iter()
                        .position(|j| j == p)
                        .ok_or_else(|| Error::invalid(format!("joint `{joint}` has unknown parent `{p}`")))?,
                ),
            };
            parents.push(p);
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::invalid(format!("topology `{name}` must have exactly one root, found {roots}")));
        }
        for start in 0..parents.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parents[cur] {
                cur = p;
                steps += 1;
                if steps > parents.len() {
                    return Err(Error::invalid(format!("topology `{name}` contains a cycle")));
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            joints,
            parents,
        })
    }

    /// 24-joint motion-capture skeleton (suit export layout).
    pub fn mocap24() -> Self {
        Self::new(
            "mocap24",
            &[
                ("Hips", None),
                ("Chest", Some("Hips")),
                ("Chest2", Some("Chest")),
                ("Chest3", Some("Chest2")),
                ("Chest4", Some("Chest3")),
                ("Neck", Some("Chest4")),
                ("Head", Some("Neck")),
                ("HeadTop", Some("Head")),
                ("RightCollar", Some("Chest4")),
                ("RightShoulder", Some("RightCollar")),
                ("RightElbow", Some("RightShoulder")),
                ("RightWrist", Some("RightElbow")),
                ("LeftCollar", Some("Chest4")),
                ("LeftShoulder", Some("LeftCollar")),
                ("LeftElbow", Some("LeftShoulder")),
                ("LeftWrist", Some("LeftElbow")),
                ("RightHip", Some("Hips")),
                ("RightKnee", Some("RightHip")),
                ("RightAnkle", Some("RightKnee")),
                ("RightToe", Some("RightAnkle")),
                ("LeftHip", Some("Hips")),
                ("LeftKnee", Some("LeftHip")),
                ("LeftAnkle", Some("LeftKnee")),
                ("LeftToe", Some("LeftAnkle")),
            ],
        )
        .expect("static topology")
    }

    /// 15-joint 3D skeleton produced by the upstream pose estimator.
    pub fn body15() -> Self {
        Self::new(
            "body15",
            &[
                ("pelvis", None),
                ("neck", Some("pelvis")),
                ("head", Some("neck")),
                ("r_shoulder", Some("neck")),
                ("r_elbow", Some("r_shoulder")),
                ("r_wrist", Some("r_elbow")),
                ("l_shoulder", Some("neck")),
                ("l_elbow", Some("l_shoulder")),
                ("l_wrist", Some("l_elbow")),
                ("r_hip", Some("pelvis")),
                ("r_knee", Some("r_hip")),
                ("r_ankle", Some("r_knee")),
                ("l_hip", Some("pelvis")),
                ("l_knee", Some("l_hip")),
                ("l_ankle", Some("l_knee")),
            ],
        )
        .expect("static topology")
    }

    /// 25-joint 2D detector layout.
    pub fn openpose25() -> Self {
        Self::new(
            "openpose25",
            &[
                ("Nose", Some("Neck")),
                ("Neck", Some("MidHip")),
                ("RShoulder", Some("Neck")),
                ("RElbow", Some("RShoulder")),
                ("RWrist", Some("RElbow")),
                ("LShoulder", Some("Neck")),
                ("LElbow", Some("LShoulder")),
                ("LWrist", Some("LElbow")),
                ("MidHip", None),
                ("RHip", Some("MidHip")),
                ("RKnee", Some("RHip")),
                ("RAnkle", Some("RKnee")),
                ("LHip", Some("MidHip")),
                ("LKnee", Some("LHip")),
                ("LAnkle", Some("LKnee")),
                ("REye", Some("Nose")),
                ("LEye", Some("Nose")),
                ("REar", Some("REye")),
                ("LEar", Some("LEye")),
                ("LBigToe", Some("LAnkle")),
                ("LSmallToe", Some("LBigToe")),
                ("LHeel", Some("LAnkle")),
                ("RBigToe", Some("RAnkle")),
                ("RSmallToe", Some("RBigToe")),
                ("RHeel", Some("RAnkle")),
            ],
        )
        .expect("static topology")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "mocap24" => Some(Self::mocap24()),
            "body15" => Some(Self::body15()),
            "openpose25" => Some(Self::openpose25()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[String] {
        &self.joints
    }

    pub fn expected_count(&self) -> usize {
        self.joints.len()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn index(&self, joint: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == joint)
    }

    pub fn require(&self, joint: &str) -> Result<usize> {
        self.index(joint).ok_or_else(|| Error::MissingJoint(joint.to_string()))
    }

    /// The base spine joint, i.e. the tree root.
    pub fn root(&self) -> usize {
        self.parents.iter().position(|p| p.is_none()).expect("validated root")
    }
}

/// One skeletal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub timestamp: f64,
    pub positions: Vec<Vec3>,
    pub confidences: Vec<f64>,
    pub frame: CoordFrame,
}

impl PoseFrame {
    pub fn new(timestamp: f64, positions: Vec<Vec3>, confidences: Vec<f64>, frame: CoordFrame) -> Result<Self> {
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(Error::invalid(format!("timestamp {timestamp} must be finite and >= 0")));
        }
        if positions.len() != confidences.len() {
            return Err(Error::Dimension {
                expected: positions.len(),
                got: confidences.len(),
            });
        }
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
        if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("non-finite joint position"));
        }
        Ok(Self {
            timestamp,
            positions,
            confidences,
            frame,
        })
    }

    /// Frame with unit confidence on every joint.
    pub fn certain(timestamp: f64, positions: Vec<Vec3>, frame: CoordFrame) -> Result<Self> {
        let n = positions.len();
        Self::new(timestamp, positions, vec![1.0; n], frame)
    }

    pub fn joint_count(&self) -> usize {
        self.positions.len()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.confidences.is_empty() {
            return 0.0;
        }
        self.confidences.iter().sum::<f64>() / self.confidences.len() as f64
    }

    /// Applies a rigid transform to every joint and retags the frame.
    pub fn transformed(&self, t: &RigidTransform, frame: CoordFrame) -> Self {
        Self {
            timestamp: self.timestamp,
            positions: self.positions.iter().map(|p| t.apply(p)).collect(),
            confidences: self.confidences.clone(),
            frame,
        }
    }
}

/// Time-ordered frames sharing one topology and coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    topology: Arc<SkeletonTopology>,
    frames: Vec<PoseFrame>,
    rate_hz: f64,
}

impl PoseSequence {
    pub fn new(topology: Arc<SkeletonTopology>, frames: Vec<PoseFrame>, rate_hz: f64) -> Result<Self> {
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::invalid(format!("rate {rate_hz} must be positive")));
        }
        let n = topology.expected_count();
        for (i, f) in frames.iter().enumerate() {
            if f.joint_count() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: f.joint_count(),
                });
            }
            if i > 0 {
                if f.timestamp <= frames[i - 1].timestamp {
                    return Err(Error::invalid(format!(
                        "timestamps must strictly increase (frame {i}: {} after {})",
                        f.timestamp,
                        frames[i - 1].timestamp
                    )));
                }
                if f.frame != frames[0].frame {
                    return Err(Error::invalid("frames mix coordinate frames"));
                }
            }
        }
        Ok(Self {
            topology,
            frames,
            rate_hz,
        })
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topology
    }

    pub fn topology_arc(&self) -> Arc<SkeletonTopology> {
        Arc::clone(&self.topology)
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<PoseFrame> {
        self.frames
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn coord_frame(&self) -> Option<CoordFrame> {
        self.frames.first().map(|f| f.frame)
    }

    pub fn start_time(&self) -> f64 {
        self.frames.first().map_or(0.0, |f| f.timestamp)
    }

    /// Covered duration: span of the timestamps plus one sample period.
    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp + 1.0 / self.rate_hz,
            _ => 0.0,
        }
    }

    /// Frames with `start <= t < end`.
    pub fn slice_time(&self, start: f64, end: f64) -> &[PoseFrame] {
        let lo = self.frames.partition_point(|f| f.timestamp < start);
        let hi = self.frames.partition_point(|f| f.timestamp < end);
        &self.frames[lo..hi.max(lo)]
    }
}

/// Rotation followed by translation. The rotation must be orthonormal with
/// determinant +1 (within 1e-6).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= Self::ORTHONORMAL_TOL) || (rotation.determinant() - 1.0).abs() > Self::ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (|RᵀR - I|max = {err:e}, det = {})",
                rotation.determinant()
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn rotation_rows(&self) -> [[f64; 3]; 3] {
        let r = &self.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }

    pub fn from_rows(rows: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let r = Matrix3::from_fn(|i, j| rows[i][j]);
        Self::new(r, Vec3::from(translation))
    }
}

/// Pinhole intrinsics plus the camera→global extrinsic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsic: RigidTransform,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsic: RigidTransform) -> Result<Self> {
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive (fx={fx}, fy={fy})")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("non-finite principal point"));
        }
        Ok(Self { fx, fy, cx, cy, extrinsic })
    }
}

/// The seven target posture classes of the ergonomic screening grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PostureClass {
    P1StandingWalking,
    P3BentForward,
    P4StronglyBentForward,
    P5ElbowAtAboveShoulder,
    P6HandsAboveHead,
    TrunkRotation,
    LateralBending,
}

impl PostureClass {
    pub const ALL: [PostureClass; 7] = [
        PostureClass::P1StandingWalking,
        PostureClass::P3BentForward,
        PostureClass::P4StronglyBentForward,
        PostureClass::P5ElbowAtAboveShoulder,
        PostureClass::P6HandsAboveHead,
        PostureClass::TrunkRotation,
        PostureClass::LateralBending,
    ];

    /// Short machine identifier used in files.
    pub fn code(self) -> &'static str {
        match self {
            PostureClass::P1StandingWalking => "P1",
            PostureClass::P3BentForward => "P3",
            PostureClass::P4StronglyBentForward => "P4",
            PostureClass::P5ElbowAtAboveShoulder => "P5",
            PostureClass::P6HandsAboveHead => "P6",
            PostureClass::TrunkRotation => "TR",
            PostureClass::LateralBending => "LB",
        }
    }

    /// Column title as it appears on the evaluation sheet.
    pub fn title(self) -> &'static str {
        match self {
            PostureClass::P1StandingWalking => "1. Standing & walking",
            PostureClass::P3BentForward => "3. Bent forward",
            PostureClass::P4StronglyBentForward => "4. Strongly bend forward",
            PostureClass::P5ElbowAtAboveShoulder => "5. Elbow at/above shoulder level",
            PostureClass::P6HandsAboveHead => "6. Hands above head level",
            PostureClass::TrunkRotation => "Trunk Rotation",
            PostureClass::LateralBending => "Lateral Bending",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("member of ALL")
    }

    /// Accepts the code, the sheet title, or a loose spelling of the title
    /// (case, punctuation and the leading number are ignored).
    pub fn parse(s: &str) -> Option<Self> {
        fn norm(s: &str) -> String {
            s.chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase()
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .replace("bend", "bent")
        }
        if let Some(c) = Self::ALL.iter().find(|c| c.code().eq_ignore_ascii_case(s.trim())) {
            return Some(*c);
        }
        let key = norm(s);
        if key.is_empty() {
            return None;
        }
        let aliases: &[(&str, PostureClass)] = &[
            ("standingwalkinginalteration", PostureClass::P1StandingWalking),
            ("elbowataboveshoulder", PostureClass::P5ElbowAtAboveShoulder),
            ("uprightwithelbowsatoraboveshoulders", PostureClass::P5ElbowAtAboveShoulder),
            ("handsabovehead", PostureClass::P6HandsAboveHead),
            ("uprightwithelbowsabovethehead", PostureClass::P6HandsAboveHead),
            ("lateraltrunkbenting", PostureClass::LateralBending),
        ];
        Self::ALL
            .iter()
            .copied()
            .find(|c| norm(c.title()) == key)
            .or_else(|| aliases.iter().find(|(a, _)| *a == key).map(|(_, c)| *c))
    }
}

impl fmt::Display for PostureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Subgoal,
    Posture,
}

/// A labeled interval on the recording clock.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSegment {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
    pub kind: AnnotationKind,
}

impl AnnotationSegment {
    pub fn new(label: impl Into<String>, start_s: f64, end_s: f64, kind: AnnotationKind) -> Result<Self> {
        if !(start_s.is_finite() && end_s.is_finite() && start_s >= 0.0) {
            return Err(Error::invalid("segment bounds must be finite and non-negative"));
        }
        if end_s <= start_s {
            return Err(Error::invalid(format!("segment end {end_s} must exceed start {start_s}")));
        }
        Ok(Self {
            label: label.into(),
            start_s,
            end_s,
            kind,
        })
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start_s && t < self.end_s
    }
}
