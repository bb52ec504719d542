//! Dataset manifest: one TOML file binding a workstation's cameras,
//! recordings and annotations. All paths are relative to the manifest.
//!
//! ```toml
//! workstation = "WS10"
//! bvh_scale = 0.01            # optional, file units -> meters
//! bvh_up = "y"                # optional, "y" (default) or "z"
//! cart_position = [2.0, 0.0, 0.9]   # optional fallback when no door track exists
//!
//! [[cameras]]
//! id = "In10"
//! side = "in"
//! height_m = 1.85
//! fx = 615.0
//! fy = 615.0
//! cx = 320.0
//! cy = 240.0
//! rotation = [[1, 0, 0], [0, 0, 1], [0, -1, 0]]   # camera -> global, row-major
//! translation = [0.0, -2.5, 1.85]
//!
//! [recordings]
//! bvh = "mocap/cycle01.bvh"
//! reference_poses = "reference.csv"  # optional ground truth as a pose stream; wins over bvh
//! annotations = "annotations.csv"
//! episodes = "episodes.csv"   # optional per-episode posture intervals
//! doors = "doors.csv"         # optional door track; otherwise computed from depth/mask
//!
//! [[recordings.streams]]
//! camera = "In10"
//! poses = "poses_in10.csv"
//! depth_dir = "depth/In10"    # optional, <frame>.png, 16-bit millimeters;
//!                             # <frame> counts 30 Hz ticks from the first pose
//! mask_dir = "mask/In10"      # optional, <frame>.png, nonzero = door
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bvh::UnitScale;
use crate::error::{Error, Result};
use crate::model::{CameraModel, RigidTransform};

pub const MAX_CAMERAS_PER_WORKSTATION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Workstation {
    WS10,
    WS20,
    WS30,
}

impl fmt::Display for Workstation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Workstation::WS10 => "WS10",
            Workstation::WS20 => "WS20",
            Workstation::WS30 => "WS30",
        })
    }
}

impl FromStr for Workstation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WS10" => Ok(Workstation::WS10),
            "WS20" => Ok(Workstation::WS20),
            "WS30" => Ok(Workstation::WS30),
            other => Err(Error::invalid(format!("unknown workstation `{other}`"))),
        }
    }
}

/// Vertical axis of the motion-capture files. Everything downstream is Z-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpAxis {
    #[default]
    Y,
    Z,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraDescriptor {
    pub id: String,
    pub side: String,
    pub height_m: f64,
    pub model: CameraModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPaths {
    pub camera: String,
    pub poses: PathBuf,
    pub depth_dir: Option<PathBuf>,
    pub mask_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordingPaths {
    pub bvh: Option<PathBuf>,
    /// Ground-truth skeleton already in pose-stream layout (global frame).
    pub reference_poses: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub episodes: Option<PathBuf>,
    /// Precomputed door track, used when no depth/mask streams are given.
    pub doors: Option<PathBuf>,
    pub streams: Vec<StreamPaths>,
}

/// Validated manifest. Stored paths are relative to `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub workstation: Workstation,
    pub bvh_scale: UnitScale,
    pub bvh_up: UpAxis,
    pub cart_position: Option<[f64; 3]>,
    pub cameras: Vec<CameraDescriptor>,
    pub recordings: RecordingPaths,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    workstation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bvh_scale: Option<f64>,
    #[serde(default)]
    bvh_up: UpAxis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cart_position: Option<[f64; 3]>,
    cameras: Vec<CameraEntry>,
    #[serde(default)]
    recordings: RecordingsEntry,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    id: String,
    #[serde(default)]
    side: String,
    height_m: f64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingsEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bvh: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_poses: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    episodes: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doors: Option<PathBuf>,
    #[serde(default)]
    streams: Vec<StreamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamEntry {
    camera: String,
    poses: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_dir: Option<PathBuf>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest::from_toml_str(&text, &base)?;
    m.check_paths()?;
    Ok(m)
}

impl DatasetManifest {
    /// Parses and validates everything except path existence.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: ManifestFile = toml::from_str(text).map_err(|e| Error::Manifest(format!("schema violation: {e}")))?;
        let workstation = raw.workstation.parse().map_err(|e: Error| Error::Manifest(e.to_string()))?;
        let bvh_scale = match raw.bvh_scale {
            Some(s) => UnitScale::new(s).map_err(|e| Error::Manifest(e.to_string()))?,
            None => UnitScale::default(),
        };
        if raw.cameras.is_empty() {
            return Err(Error::Manifest("at least one camera is required".into()));
        }
        if raw.cameras.len() > MAX_CAMERAS_PER_WORKSTATION {
            return Err(Error::Manifest(format!(
                "camera count {} exceeds {MAX_CAMERAS_PER_WORKSTATION} per workstation",
                raw.cameras.len()
            )));
        }
        let mut cameras = Vec::with_capacity(raw.cameras.len());
        for c in raw.cameras {
            if cameras.iter().any(|d: &CameraDescriptor| d.id == c.id) {
                return Err(Error::Manifest(format!("duplicate camera id `{}`", c.id)));
            }
            if !(c.height_m.is_finite() && c.height_m > 0.0) {
                return Err(Error::Manifest(format!("camera `{}`: mount height must be positive", c.id)));
            }
            let extrinsic = RigidTransform::from_rows(c.rotation, c.translation)
                .map_err(|e| Error::Manifest(format!("camera `{}` extrinsics: {e}", c.id)))?;
            let model = CameraModel::new(c.fx, c.fy, c.cx, c.cy, extrinsic)
                .map_err(|e| Error::Manifest(format!("camera `{}`: {e}", c.id)))?;
            cameras.push(CameraDescriptor {
                id: c.id,
                side: c.side,
                height_m: c.height_m,
                model,
            });
        }
        let mut streams = Vec::new();
        for s in raw.recordings.streams {
            if !cameras.iter().any(|c| c.id == s.camera) {
                return Err(Error::Manifest(format!("stream references unknown camera `{}`", s.camera)));
            }
            if streams.iter().any(|t: &StreamPaths| t.camera == s.camera) {
                return Err(Error::Manifest(format!("camera `{}` has more than one stream", s.camera)));
            }
            streams.push(StreamPaths {
                camera: s.camera,
                poses: s.poses,
                depth_dir: s.depth_dir,
                mask_dir: s.mask_dir,
            });
        }
        if let Some(p) = raw.cart_position {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Manifest("non-finite cart position".into()));
            }
        }
        Ok(Self {
            base_dir: base_dir.to_path_buf(),
            workstation,
            bvh_scale,
            bvh_up: raw.bvh_up,
            cart_position: raw.cart_position,
            cameras,
            recordings: RecordingPaths {
                bvh: raw.recordings.bvh,
                reference_poses: raw.recordings.reference_poses,
                annotations: raw.recordings.annotations,
                episodes: raw.recordings.episodes,
                doors: raw.recordings.doors,
                streams,
            },
        })
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn camera(&self, id: &str) -> Option<&CameraDescriptor> {
        self.cameras.iter().find(|c| c.id == id)
    }

    fn referenced_paths(&self) -> Vec<&Path> {
        let r = &self.recordings;
        let mut out: Vec<&Path> = [&r.bvh, &r.reference_poses, &r.annotations, &r.episodes, &r.doors]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect();
        for s in &r.streams {
            out.push(&s.poses);
            out.extend(s.depth_dir.as_deref());
            out.extend(s.mask_dir.as_deref());
        }
        out
    }

    /// Fails on the first recording path that does not exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in self.referenced_paths() {
            if !self.resolve(p).exists() {
                return Err(Error::Manifest(format!("dangling recording path `{}`", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        let raw = ManifestFile {
            workstation: self.workstation.to_string(),
            bvh_scale: Some(self.bvh_scale.file_to_meters()),
            bvh_up: self.bvh_up,
            cart_position: self.cart_position,
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraEntry {
                    id: c.id.clone(),
                    side: c.side.clone(),
                    height_m: c.height_m,
                    fx: c.model.fx,
                    fy: c.model.fy,
                    cx: c.model.cx,
                    cy: c.model.cy,
                    rotation: c.model.extrinsic.rotation_rows(),
                    translation: c.model.extrinsic.translation.into(),
                })
                .collect(),
            recordings: RecordingsEntry {
                bvh: self.recordings.bvh.clone(),
                reference_poses: self.recordings.reference_poses.clone(),
                annotations: self.recordings.annotations.clone(),
                episodes: self.recordings.episodes.clone(),
                doors: self.recordings.doors.clone(),
                streams: self
                    .recordings
                    .streams
                    .iter()
                    .map(|s| StreamEntry {
                        camera: s.camera.clone(),
                        poses: s.poses.clone(),
                        depth_dir: s.depth_dir.clone(),
                        mask_dir: s.mask_dir.clone(),
                    })
                    .collect(),
            },
        };
        toml::to_string(&raw).expect("manifest serializes")
    }
}
