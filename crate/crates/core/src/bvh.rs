//! BVH motion capture: parsing, forward kinematics and rate conversion.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoordFrame, PoseFrame, PoseSequence, SkeletonTopology, Vec3};

/// Conversion from BVH file units to meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitScale(f64);

impl UnitScale {
    pub fn new(file_to_meters: f64) -> Result<Self> {
        if file_to_meters.is_finite() && file_to_meters > 0.0 {
            Ok(Self(file_to_meters))
        } else {
            Err(Error::invalid(format!("unit scale must be positive and finite, got {file_to_meters}")))
        }
    }

    pub fn file_to_meters(self) -> f64 {
        self.0
    }
}

impl Default for UnitScale {
    /// Centimeters.
    fn default() -> Self {
        Self(0.01)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Xposition,
    Yposition,
    Zposition,
    Xrotation,
    Yrotation,
    Zrotation,
}

impl Channel {
    fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "xposition" => Channel::Xposition,
            "yposition" => Channel::Yposition,
            "zposition" => Channel::Zposition,
            "xrotation" => Channel::Xrotation,
            "yrotation" => Channel::Yrotation,
            "zrotation" => Channel::Zrotation,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvhJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub channels: Vec<Channel>,
    /// Index of this joint's first value in a motion row.
    pub channel_offset: usize,
    pub end_site: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvhRig {
    joints: Vec<BvhJoint>,
    channel_count: usize,
    frame_count: usize,
    frame_time: f64,
    motion: Vec<f64>,
}

impl BvhRig {
    pub fn joints(&self) -> &[BvhJoint] {
        &self.joints
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn frame_time(&self) -> f64 {
        self.frame_time
    }

    pub fn frame_rate(&self) -> f64 {
        1.0 / self.frame_time
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn frame(&self, index: usize) -> Result<&[f64]> {
        if index >= self.frame_count {
            return Err(Error::OutOfRange {
                index,
                len: self.frame_count,
            });
        }
        let c = self.channel_count;
        Ok(&self.motion[index * c..(index + 1) * c])
    }

    /// Skeleton made of the rig's joints (end sites excluded).
    pub fn topology(&self) -> SkeletonTopology {
        let spec: Vec<(&str, Option<&str>)> = self
            .joints
            .iter()
            .map(|j| (j.name.as_str(), j.parent.map(|p| self.joints[p].name.as_str())))
            .collect();
        SkeletonTopology::new("bvh", &spec).expect("parser guarantees a tree")
    }
}

struct Tokens<'a> {
    items: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        let items = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
            .collect();
        Self { items, pos: 0 }
    }

    fn line(&self) -> usize {
        self.items
            .get(self.pos)
            .or(self.items.last())
            .map_or(1, |(l, _)| *l)
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line(),
            msg: msg.into(),
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.items.get(self.pos).map(|(_, t)| *t).ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a str> {
        self.items.get(self.pos).map(|(_, t)| *t)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got.eq_ignore_ascii_case(want) {
            Ok(())
        } else {
            self.pos -= 1;
            Err(self.err(format!("expected `{want}`, found `{got}`")))
        }
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.next()?;
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.pos -= 1;
                Err(self.err(format!("expected a number, found `{t}`")))
            }
        }
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.number()?, self.number()?, self.number()?))
    }
}

pub fn parse_bvh(path: &Path) -> Result<BvhRig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bvh_str(&text)
}

pub fn parse_bvh_str(text: &str) -> Result<BvhRig> {
    let mut tok = Tokens::new(text);
    tok.expect("HIERARCHY")?;
    let mut joints = Vec::new();
    let mut channel_count = 0;
    tok.expect("ROOT")?;
    parse_joint(&mut tok, None, &mut joints, &mut channel_count)?;
    if tok.peek().is_some_and(|t| t.eq_ignore_ascii_case("ROOT")) {
        return Err(tok.err("multiple ROOT joints are not supported"));
    }

    tok.expect("MOTION")?;
    tok.expect("Frames:")?;
    let frames = tok.number()?;
    if frames < 1.0 || frames.fract() != 0.0 {
        return Err(tok.err(format!("frame count must be a positive integer, got {frames}")));
    }
    let frame_count = frames as usize;
    tok.expect("Frame")?;
    tok.expect("Time:")?;
    let frame_time = tok.number()?;
    if frame_time <= 0.0 {
        return Err(tok.err(format!("frame time must be positive, got {frame_time}")));
    }

    // Values are read row by row so a short row is reported where it happens.
    let mut motion = Vec::with_capacity(frame_count * channel_count);
    let data_lines: Vec<(usize, &str)> = tok.items[tok.pos..].to_vec();
    let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
    for (line, t) in data_lines {
        match rows.last_mut() {
            Some((l, v)) if *l == line => v.push(t),
            _ => rows.push((line, vec![t])),
        }
    }
    if rows.len() != frame_count {
        return Err(Error::Parse {
            line: rows.last().map_or(tok.line(), |r| r.0),
            msg: format!("declared {frame_count} frames, found {} rows", rows.len()),
        });
    }
    for (line, values) in rows {
        if values.len() != channel_count {
            return Err(Error::Parse {
                line,
                msg: format!("expected {channel_count} channel values, found {}", values.len()),
            });
        }
        for v in values {
            let x: f64 = v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric channel value `{v}`"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite channel value `{v}`"),
                });
            }
            motion.push(x);
        }
    }

    Ok(BvhRig {
        joints,
        channel_count,
        frame_count,
        frame_time,
        motion,
    })
}

fn parse_joint(tok: &mut Tokens<'_>, parent: Option<usize>, joints: &mut Vec<BvhJoint>, channel_count: &mut usize) -> Result<()> {
    let name = tok.next()?.to_string();
    if joints.iter().any(|j| j.name == name) {
        return Err(tok.err(format!("duplicate joint `{name}`")));
    }
    tok.expect("{")?;
    tok.expect("OFFSET")?;
    let offset = tok.vec3()?;
    tok.expect("CHANNELS")?;
    let n = tok.number()?;
    if !(0.0..=6.0).contains(&n) || n.fract() != 0.0 {
        return Err(tok.err(format!("invalid channel count {n}")));
    }
    let mut channels = Vec::with_capacity(n as usize);
    for _ in 0..n as usize {
        let t = tok.next()?;
        let c = Channel::parse(t).ok_or_else(|| tok.err(format!("unknown channel `{t}`")))?;
        if channels.contains(&c) {
            return Err(tok.err(format!("channel `{t}` declared twice")));
        }
        channels.push(c);
    }
    let index = joints.len();
    joints.push(BvhJoint {
        name,
        parent,
        offset,
        channel_offset: *channel_count,
        channels,
        end_site: None,
    });
    *channel_count += n as usize;

    loop {
        let t = tok.next()?;
        match t {
            "}" => return Ok(()),
            _ if t.eq_ignore_ascii_case("JOINT") => parse_joint(tok, Some(index), joints, channel_count)?,
            _ if t.eq_ignore_ascii_case("End") => {
                tok.expect("Site")?;
                tok.expect("{")?;
                tok.expect("OFFSET")?;
                let site = tok.vec3()?;
                tok.expect("}")?;
                joints[index].end_site = Some(site);
            }
            other => {
                tok.pos -= 1;
                return Err(tok.err(format!("unexpected token `{other}` in hierarchy")));
            }
        }
    }
}

/// World transforms (rotation, translation in file units) of every joint.
fn world_transforms(rig: &BvhRig, values: &[f64]) -> Vec<(Matrix3<f64>, Vec3)> {
    let mut out: Vec<(Matrix3<f64>, Vec3)> = Vec::with_capacity(rig.joints.len());
    for joint in &rig.joints {
        let mut translation = joint.offset;
        let mut rotation = Matrix3::identity();
        for (k, ch) in joint.channels.iter().enumerate() {
            let v = values[joint.channel_offset + k];
            match ch {
                Channel::Xposition => translation.x += v,
                Channel::Yposition => translation.y += v,
                Channel::Zposition => translation.z += v,
                Channel::Xrotation => rotation *= Rotation3::from_axis_angle(&Vec3::x_axis(), v.to_radians()).into_inner(),
                Channel::Yrotation => rotation *= Rotation3::from_axis_angle(&Vec3::y_axis(), v.to_radians()).into_inner(),
                Channel::Zrotation => rotation *= Rotation3::from_axis_angle(&Vec3::z_axis(), v.to_radians()).into_inner(),
            }
        }
        let world = match joint.parent {
            None => (rotation, translation),
            Some(p) => {
                let (pr, pt) = out[p];
                (pr * rotation, pr * translation + pt)
            }
        };
        out.push(world);
    }
    out
}

/// World-space joint positions in meters for one motion frame. The frame is
/// tagged global; the timestamp is `frame_index * frame_time`.
pub fn forward_kinematics(rig: &BvhRig, frame_index: usize, scale: UnitScale) -> Result<PoseFrame> {
    let values = rig.frame(frame_index)?;
    let positions = world_transforms(rig, values)
        .into_iter()
        .map(|(_, t)| t * scale.file_to_meters())
        .collect();
    PoseFrame::certain(frame_index as f64 * rig.frame_time, positions, CoordFrame::Global)
}

/// Every frame of the rig as a sequence at the file's frame rate.
pub fn rig_to_sequence(rig: &BvhRig, scale: UnitScale) -> Result<PoseSequence> {
    let frames = (0..rig.frame_count)
        .map(|i| forward_kinematics(rig, i, scale))
        .collect::<Result<Vec<_>>>()?;
    PoseSequence::new(Arc::new(rig.topology()), frames, rig.frame_rate())
}

/// Maps positions from a Y-up file frame to the Z-up global frame
/// (`(x, y, z) -> (x, -z, y)`).
pub fn y_up_to_z_up(seq: &PoseSequence) -> Result<PoseSequence> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| PoseFrame {
            positions: f.positions.iter().map(|p| Vec3::new(p.x, -p.z, p.y)).collect(),
            ..f.clone()
        })
        .collect();
    PoseSequence::new(seq.topology_arc(), frames, seq.rate_hz())
}

/// Linear interpolation of joint positions onto a uniform grid at
/// `target_hz`, starting at the first source timestamp and never going past
/// the last one.
pub fn resample(seq: &PoseSequence, target_hz: f64) -> Result<PoseSequence> {
    if seq.len() < 2 {
        return Err(Error::invalid("resampling needs at least two frames"));
    }
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::invalid(format!("target rate {target_hz} must be positive")));
    }
    let src_hz = seq.rate_hz();
    if target_hz > src_hz * (1.0 + 1e-9) {
        return Err(Error::invalid(format!("upsampling from {src_hz} Hz to {target_hz} Hz is not supported")));
    }
    if (target_hz - src_hz).abs() <= 1e-9 * src_hz {
        return Ok(seq.clone());
    }
    let frames = seq.frames();
    let t0 = frames[0].timestamp;
    let t_last = frames[frames.len() - 1].timestamp;
    let tol = 1e-9 / src_hz;
    let mut out = Vec::new();
    let mut j = 0;
    for k in 0.. {
        let t = t0 + k as f64 / target_hz;
        if t > t_last + tol {
            break;
        }
        while j + 2 < frames.len() && frames[j + 1].timestamp <= t {
            j += 1;
        }
        let (a, b) = (&frames[j], &frames[j + 1]);
        let alpha = ((t - a.timestamp) / (b.timestamp - a.timestamp)).clamp(0.0, 1.0);
        let positions = a
            .positions
            .iter()
            .zip(&b.positions)
            .map(|(p, q)| p + (q - p) * alpha)
            .collect();
        let confidences = a
            .confidences
            .iter()
            .zip(&b.confidences)
            .map(|(p, q)| p + (q - p) * alpha)
            .collect();
        out.push(PoseFrame::new(t, positions, confidences, a.frame)?);
    }
    PoseSequence::new(seq.topology_arc(), out, target_hz)
}

/// Name correspondence from the 24-joint motion-capture skeleton to the
/// 15-joint estimated skeleton (nearest semantic joint).
pub const MOCAP24_TO_BODY15: [(&str, &str); 15] = [
    ("pelvis", "Hips"),
    ("neck", "Neck"),
    ("head", "Head"),
    ("r_shoulder", "RightShoulder"),
    ("r_elbow", "RightElbow"),
    ("r_wrist", "RightWrist"),
    ("l_shoulder", "LeftShoulder"),
    ("l_elbow", "LeftElbow"),
    ("l_wrist", "LeftWrist"),
    ("r_hip", "RightHip"),
    ("r_knee", "RightKnee"),
    ("r_ankle", "RightAnkle"),
    ("l_hip", "LeftHip"),
    ("l_knee", "LeftKnee"),
    ("l_ankle", "LeftAnkle"),
];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single_root() -> &'static str {
        "HIERARCHY\nROOT Hips\n{\n OFFSET 0 0 0\n CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation\n End Site\n {\n  OFFSET 0 10 0\n }\n}\nMOTION\nFrames: 1\nFrame Time: 0.033333\n0 0 0 0 0 0\n"
    }

    fn chain(order: &str, rot: [f64; 3]) -> String {
        format!(
            "HIERARCHY\nROOT A\n{{\n OFFSET 0 0 0\n CHANNELS 3 {order}\n JOINT B\n {{\n  OFFSET 0 1 0\n  CHANNELS 3 {order}\n  JOINT C\n  {{\n   OFFSET 1 0 0\n   CHANNELS 0\n  }}\n }}\n}}\nMOTION\nFrames: 1\nFrame Time: 0.0166667\n{} {} {} 0 0 0\n",
            rot[0], rot[1], rot[2]
        )
    }

    #[test]
    fn single_root_rig() {
        let rig = parse_bvh_str(single_root()).unwrap();
        assert_eq!(rig.joints().len(), 1);
        assert_eq!(rig.frame_count(), 1);
        assert_eq!(rig.channel_count(), 6);
        assert_eq!(rig.joints()[0].end_site, Some(Vec3::new(0.0, 10.0, 0.0)));
        let f = forward_kinematics(&rig, 0, UnitScale::default()).unwrap();
        assert_eq!(f.positions, vec![Vec3::zeros()]);
        assert!(forward_kinematics(&rig, 1, UnitScale::default()).is_err());
    }

    #[test]
    fn channel_value_count_mismatch() {
        let text = single_root().replace("0 0 0 0 0 0\n", "0 0 0 0 0\n");
        let err = parse_bvh_str(&text).unwrap_err();
        assert!(err.to_string().contains("expected 6 channel values"), "{err}");
    }

    #[test]
    fn rejects_malformed_inputs() {
        assert!(parse_bvh_str(&single_root().replace("Frame Time: 0.033333", "Frame Time: 0")).is_err());
        assert!(parse_bvh_str(&single_root().replace("Frames: 1", "Frames: 2")).is_err());
        assert!(parse_bvh_str(&single_root().replace("OFFSET 0 0 0", "OFFSET 0 0")).is_err());
        assert!(parse_bvh_str(&single_root().replace("Zrotation", "Wrotation")).is_err());
        assert!(parse_bvh_str("MOTION\nFrames: 1\n").is_err());
        assert!(parse_bvh_str(&single_root().replace("0 0 0 0 0 0\n", "0 0 0 0 0 nan\n")).is_err());
    }

    #[test]
    fn identity_rotations_stack_offsets() {
        let text = "HIERARCHY\nROOT A\n{\n OFFSET 0 0 0\n CHANNELS 3 Zrotation Xrotation Yrotation\n JOINT B\n {\n  OFFSET 0 1 0\n  CHANNELS 3 Zrotation Xrotation Yrotation\n  JOINT C\n  {\n   OFFSET 0 1 0\n   CHANNELS 3 Zrotation Xrotation Yrotation\n  }\n }\n}\nMOTION\nFrames: 1\nFrame Time: 0.0166667\n0 0 0 0 0 0 0 0 0\n";
        let rig = parse_bvh_str(text).unwrap();
        let f = forward_kinematics(&rig, 0, UnitScale::new(0.5).unwrap()).unwrap();
        assert_abs_diff_eq!(f.positions[2], Vec3::new(0.0, 2.0, 0.0) * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn root_with_zero_valued_channels_sits_at_scaled_offset() {
        let text = "HIERARCHY\nROOT A\n{\n OFFSET 3 -4 5\n CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation\n}\nMOTION\nFrames: 1\nFrame Time: 0.5\n0 0 0 0 0 0\n";
        let rig = parse_bvh_str(text).unwrap();
        let f = forward_kinematics(&rig, 0, UnitScale::new(0.01).unwrap()).unwrap();
        assert_eq!(f.positions[0], Vec3::new(3.0, -4.0, 5.0) * 0.01);
    }

    #[test]
    fn sixty_hz_frame_time() {
        let text = chain("Zrotation Xrotation Yrotation", [0.0; 3]);
        let rig = parse_bvh_str(&text).unwrap();
        assert!((rig.frame_rate() - 60.0).abs() < 1e-3);
    }

    #[test]
    fn parse_then_fk_is_bitwise_repeatable() {
        let text = chain("Zrotation Xrotation Yrotation", [12.5, -33.0, 71.25]);
        let a = forward_kinematics(&parse_bvh_str(&text).unwrap(), 0, UnitScale::default()).unwrap();
        let b = forward_kinematics(&parse_bvh_str(&text).unwrap(), 0, UnitScale::default()).unwrap();
        for (p, q) in a.positions.iter().zip(&b.positions) {
            for k in 0..3 {
                assert_eq!(p[k].to_bits(), q[k].to_bits());
            }
        }
    }

    #[test]
    fn resample_rejects_upsampling_and_short_input() {
        let topo = Arc::new(SkeletonTopology::new("one", &[("r", None)]).unwrap());
        let f = |t: f64| PoseFrame::certain(t, vec![Vec3::new(t, 0.0, 0.0)], CoordFrame::Global).unwrap();
        let one = PoseSequence::new(topo.clone(), vec![f(0.0)], 30.0).unwrap();
        assert!(resample(&one, 30.0).is_err());
        let two = PoseSequence::new(topo, vec![f(0.0), f(1.0 / 30.0)], 30.0).unwrap();
        assert!(resample(&two, 60.0).is_err());
        assert_eq!(resample(&two, 30.0).unwrap(), two);
    }

    #[test]
    fn mocap_map_targets_existing_joints() {
        let mocap = SkeletonTopology::mocap24();
        let body = SkeletonTopology::body15();
        for (b, m) in MOCAP24_TO_BODY15 {
            assert!(body.index(b).is_some(), "{b}");
            assert!(mocap.index(m).is_some(), "{m}");
        }
    }
}
