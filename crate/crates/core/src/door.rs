//! Car-door pose from a segmentation mask and a registered depth image.
//!
//! Depth images are 16-bit grayscale PNGs in millimeters (0 = no depth).
//! Masks are 8-bit grayscale PNGs, nonzero pixels belong to the door.

use std::path::Path;

use image::{ImageBuffer, Luma};
use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::model::{CameraModel, Vec3};

pub const DEFAULT_REPAIR_RADIUS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Dimension {
                expected: width * height,
                got: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, on: bool) {
        self.bits[v * self.width + u] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Self::new(w as usize, h as usize, gray.pixels().map(|p| p.0[0] != 0).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(self.width as u32, self.height as u32, |u, v| {
            Luma([if self.get(u as usize, v as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    mm: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, mm: Vec<u16>) -> Result<Self> {
        if mm.len() != width * height {
            return Err(Error::Dimension {
                expected: width * height,
                got: mm.len(),
            });
        }
        Ok(Self { width, height, mm })
    }

    pub fn uniform(width: usize, height: usize, mm: u16) -> Self {
        Self {
            width,
            height,
            mm: vec![mm; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> u16 {
        self.mm[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, mm: u16) {
        self.mm[v * self.width + u] = mm;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let gray = match img {
            image::DynamicImage::ImageLuma16(g) => g,
            other => {
                return Err(Error::Image {
                    path: path.into(),
                    msg: format!("expected 16-bit grayscale depth, got {:?}", other.color()),
                })
            }
        };
        let (w, h) = gray.dimensions();
        Self::new(w as usize, h as usize, gray.pixels().map(|p| p.0[0]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |u, v| Luma([self.get(u as usize, v as usize)]));
        img.save(path).map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })
    }

    /// Nearest nonzero depth within `radius` pixels (Euclidean), scanning
    /// rings outward; ties resolve in row-major order.
    fn repaired(&self, u: usize, v: usize, radius: usize) -> Option<u16> {
        let r = radius as isize;
        let mut best: Option<(isize, u16)> = None;
        for dv in -r..=r {
            for du in -r..=r {
                let d2 = du * du + dv * dv;
                if d2 == 0 || d2 > r * r {
                    continue;
                }
                let (x, y) = (u as isize + du, v as isize + dv);
                if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
                    continue;
                }
                let d = self.get(x as usize, y as usize);
                if d != 0 && best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, d));
                }
            }
        }
        best.map(|(_, d)| d)
    }
}

/// Camera-frame points (meters) for every mask pixel with usable depth.
/// Pixels without depth take the nearest valid depth within
/// `repair_radius`; otherwise they are dropped.
pub fn back_project(mask: &SegMask, depth: &DepthImage, cam: &CameraModel, repair_radius: usize) -> Result<Vec<Vec3>> {
    if mask.width != depth.width || mask.height != depth.height {
        return Err(Error::invalid(format!(
            "mask is {}x{} but depth is {}x{}",
            mask.width, mask.height, depth.width, depth.height
        )));
    }
    if mask.count() == 0 {
        return Err(Error::invalid("empty mask"));
    }
    let mut points = Vec::new();
    for v in 0..mask.height {
        for u in 0..mask.width {
            if !mask.get(u, v) {
                continue;
            }
            let d = match depth.get(u, v) {
                0 => match depth.repaired(u, v, repair_radius) {
                    Some(d) => d,
                    None => continue,
                },
                d => d,
            };
            points.push(pixel_to_point(u as f64, v as f64, d as f64, cam));
        }
    }
    if points.is_empty() {
        return Err(Error::invalid("no mask pixel has valid depth"));
    }
    Ok(points)
}

/// Pinhole back-projection of pixel `(u, v)` at `depth_mm`.
pub fn pixel_to_point(u: f64, v: f64, depth_mm: f64, cam: &CameraModel) -> Vec3 {
    let z = depth_mm / 1000.0;
    Vec3::new(z * (u - cam.cx) / cam.fx, z * (v - cam.cy) / cam.fy, z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn of(points: &[Vec3]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Aabb { min: *first, max: *first };
        for p in &points[1..] {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoorPose {
    pub centroid_cam: Vec3,
    pub centroid_global: Vec3,
    /// Dominant axis in the global frame, oriented toward +X. `None` when
    /// the point spread has no unique dominant direction.
    pub principal_axis: Option<Vec3>,
    pub principal_axis_cam: Option<Vec3>,
    /// Heading of the axis' horizontal projection, degrees from +X toward +Y.
    pub yaw_deg: Option<f64>,
    pub bbox_cam: Aabb,
    pub bbox_global: Aabb,
}

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order with the matching
/// eigenvectors as columns.
pub fn symmetric_eigen3(m: &Matrix3<f64>, tol: f64) -> ([f64; 3], Matrix3<f64>) {
    let mut a = *m;
    let mut v = Matrix3::<f64>::identity();
    for _sweep in 0..100 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let scale = a.norm().max(f64::MIN_POSITIVE);
        if off.sqrt() <= tol * scale {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Matrix3::<f64>::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            v *= rot;
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.map(|i| a[(i, i)]);
    let vectors = Matrix3::from_columns(&order.map(|i| v.column(i).into_owned()));
    (values, vectors)
}

fn orient_toward_x(axis: Vec3) -> Vec3 {
    const EPS: f64 = 1e-12;
    let lead = (0..3).find(|&k| axis[k].abs() > EPS).unwrap_or(0);
    if axis[lead] < 0.0 {
        -axis
    } else {
        axis
    }
}

pub fn door_pose(points: &[Vec3], cam: &CameraModel) -> Result<DoorPose> {
    if points.is_empty() {
        return Err(Error::invalid("no points"));
    }
    let n = points.len() as f64;
    let centroid_cam = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    for p in points {
        let d = p - centroid_cam;
        cov += d * d.transpose();
    }
    cov /= n;

    let (values, vectors) = symmetric_eigen3(&cov, 1e-12);
    let spread = values[0].max(0.0);
    let ambiguous = spread <= 1e-18 || (values[0] - values[1]) <= 1e-9 * spread;
    let ext = &cam.extrinsic;
    let (axis_global, axis_cam) = if ambiguous {
        (None, None)
    } else {
        let g = orient_toward_x(ext.apply_vector(&vectors.column(0).into_owned()).normalize());
        (Some(g), Some(ext.inverse().apply_vector(&g)))
    };
    let yaw_deg = axis_global.and_then(|a| (a.x.hypot(a.y) > 1e-9).then(|| a.y.atan2(a.x).to_degrees()));

    let global: Vec<Vec3> = points.iter().map(|p| ext.apply(p)).collect();
    Ok(DoorPose {
        centroid_cam,
        centroid_global: ext.apply(&centroid_cam),
        principal_axis: axis_global,
        principal_axis_cam: axis_cam,
        yaw_deg,
        bbox_cam: Aabb::of(points).expect("non-empty"),
        bbox_global: Aabb::of(&global).expect("non-empty"),
    })
}

/// Door centroid (global frame) and yaw over time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DoorTrack {
    pub samples: Vec<DoorSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoorSample {
    pub timestamp: f64,
    pub centroid: Vec3,
    pub yaw_deg: Option<f64>,
}

impl DoorTrack {
    /// `timestamp,x,y,z,yaw_deg`; an empty yaw cell means undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp,x,y,z,yaw_deg\n");
        for s in &self.samples {
            let yaw = s.yaw_deg.map(|y| y.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", s.timestamp, s.centroid.x, s.centroid.y, s.centroid.z, yaw));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "timestamp,x,y,z,yaw_deg" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "header must be `timestamp,x,y,z,yaw_deg`".into(),
                })
            }
        }
        let mut samples: Vec<DoorSample> = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad number `{s}`")));
            let sample = DoorSample {
                timestamp: num(f[0])?,
                centroid: Vec3::new(num(f[1])?, num(f[2])?, num(f[3])?),
                yaw_deg: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            };
            if samples.last().is_some_and(|p| p.timestamp >= sample.timestamp) {
                return Err(bad("timestamps must increase".into()));
            }
            samples.push(sample);
        }
        Ok(Self { samples })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Sample closest in time; ties go to the earlier one.
    pub fn nearest(&self, t: f64) -> Option<&DoorSample> {
        let i = self.samples.partition_point(|s| s.timestamp < t);
        [i.checked_sub(1), (i < self.samples.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (self.samples[*a].timestamp - t).abs().total_cmp(&(self.samples[*b].timestamp - t).abs()))
            .map(|k| &self.samples[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RigidTransform;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn cam(ext: RigidTransform) -> CameraModel {
        CameraModel::new(100.0, 100.0, 32.0, 24.0, ext).unwrap()
    }

    #[test]
    fn principal_point_ray() {
        let c = cam(RigidTransform::identity());
        let mut mask = SegMask::empty(64, 48);
        mask.set(32, 24, true);
        let pts = back_project(&mask, &DepthImage::uniform(64, 48, 2000), &c, 5).unwrap();
        assert_eq!(pts, vec![Vec3::new(0.0, 0.0, 2.0)]);
    }

    #[test]
    fn off_axis_pixel() {
        let c = CameraModel::new(100.0, 100.0, 20.0, 10.0, RigidTransform::identity()).unwrap();
        let mut mask = SegMask::empty(200, 20);
        mask.set(120, 10, true);
        let pts = back_project(&mask, &DepthImage::uniform(200, 20, 1000), &c, 5).unwrap();
        assert!((pts[0] - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn symmetric_mask_centroid_on_axis() {
        let c = cam(RigidTransform::identity());
        let mut mask = SegMask::empty(64, 48);
        for (u, v) in [(31, 23), (33, 23), (31, 25), (33, 25)] {
            mask.set(u, v, true);
        }
        let pts = back_project(&mask, &DepthImage::uniform(64, 48, 1500), &c, 5).unwrap();
        let pose = door_pose(&pts, &c).unwrap();
        assert!((pose.centroid_cam - Vec3::new(0.0, 0.0, 1.5)).norm() < 1e-12);
    }

    #[test]
    fn depth_holes_are_repaired_or_dropped() {
        let c = cam(RigidTransform::identity());
        let mut mask = SegMask::empty(64, 48);
        mask.set(10, 10, true);
        mask.set(40, 40, true);
        let mut depth = DepthImage::uniform(64, 48, 0);
        depth.set(13, 10, 1200); // 3 px away: repaired
        depth.set(12, 10, 1100); // 2 px away wins
        let pts = back_project(&mask, &depth, &c, 5).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0].z - 1.1).abs() < 1e-12);
        assert!(back_project(&mask, &DepthImage::uniform(64, 48, 0), &c, 5).is_err());
        assert!(back_project(&SegMask::empty(64, 48), &depth, &c, 5).is_err());
        assert!(back_project(&mask, &DepthImage::uniform(10, 10, 5), &c, 5).is_err());
    }

    #[test]
    fn line_along_x() {
        let c = cam(RigidTransform::identity());
        let pts: Vec<Vec3> = (0..11).map(|i| Vec3::new(-0.5 + 0.1 * i as f64, 0.2, 2.0)).collect();
        let pose = door_pose(&pts, &c).unwrap();
        assert!((pose.principal_axis.unwrap() - Vec3::x()).norm() < 1e-9);
        assert!(pose.yaw_deg.unwrap().abs() < 1e-9);
        assert_eq!(pose.centroid_global, pose.centroid_cam);
    }

    #[test]
    fn coincident_points_have_no_orientation() {
        let c = cam(RigidTransform::identity());
        let pose = door_pose(&[Vec3::new(1.0, 2.0, 3.0); 4], &c).unwrap();
        assert!(pose.principal_axis.is_none() && pose.yaw_deg.is_none());
        assert_eq!(pose.centroid_cam, Vec3::new(1.0, 2.0, 3.0));
        assert!(pose.bbox_cam.contains(&pose.centroid_cam));
    }

    /// Planar rectangle, 1.0 m wide and 0.6 m tall, rotated about +Z.
    fn rotated_panel(yaw_deg: f64) -> Vec<Vec3> {
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), yaw_deg.to_radians());
        let mut pts = Vec::new();
        for i in 0..=40 {
            for k in 0..=24 {
                let local = Vec3::new(-0.5 + i as f64 * 0.025, 0.0, k as f64 * 0.025);
                pts.push(rot * local + Vec3::new(2.0, 1.0, 0.4));
            }
        }
        pts
    }

    #[test]
    fn yaw_of_rotated_panel() {
        let c = cam(RigidTransform::identity());
        let pose = door_pose(&rotated_panel(30.0), &c).unwrap();
        // independent check: closed-form eigenvector of the 2x2 horizontal covariance
        let pts = rotated_panel(30.0);
        let m = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for p in &pts {
            let d = p - m;
            sxx += d.x * d.x;
            syy += d.y * d.y;
            sxy += d.x * d.y;
        }
        let oracle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        assert!((oracle.to_degrees() - 30.0).abs() < 1e-9);
        assert!((pose.yaw_deg.unwrap() - 30.0).abs() < 0.5);
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let m = Matrix3::new(4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0);
        let (vals, vecs) = symmetric_eigen3(&m, 1e-14);
        // eigenvalues of this tridiagonal matrix are 3 and 3 ± sqrt(3)
        let expect = [3.0 + 3f64.sqrt(), 3.0, 3.0 - 3f64.sqrt()];
        for k in 0..3 {
            assert!((vals[k] - expect[k]).abs() < 1e-12);
            let v = vecs.column(k).into_owned();
            assert!((m * v - v * vals[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = DepthImage::uniform(8, 6, 0);
        d.set(3, 2, 65000);
        d.set(7, 5, 1234);
        d.save(&dir.path().join("d.png")).unwrap();
        assert_eq!(DepthImage::load(&dir.path().join("d.png")).unwrap(), d);
        let mut m = SegMask::empty(8, 6);
        m.set(1, 1, true);
        m.save(&dir.path().join("m.png")).unwrap();
        assert_eq!(SegMask::load(&dir.path().join("m.png")).unwrap(), m);
        assert!(DepthImage::load(&dir.path().join("m.png")).is_err());
    }

    proptest! {
        #[test]
        fn centroid_is_rigid_equivariant(
            pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, 0.5f64..5.0), 3..40),
            angles in (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0),
            shift in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
        ) {
            let pts: Vec<Vec3> = pts.into_iter().map(|p| Vec3::new(p.0, p.1, p.2)).collect();
            let rot = Rotation3::from_euler_angles(angles.0, angles.1, angles.2).into_inner();
            let ext = RigidTransform::new(rot, Vec3::new(shift.0, shift.1, shift.2)).unwrap();
            let pose = door_pose(&pts, &cam(ext)).unwrap();
            let moved: Vec<Vec3> = pts.iter().map(|p| ext.apply(p)).collect();
            let direct = moved.iter().sum::<Vec3>() / moved.len() as f64;
            prop_assert!((pose.centroid_global - direct).norm() < 1e-9);
            prop_assert!(pose.bbox_cam.contains(&pose.centroid_cam));
            prop_assert!(pose.bbox_global.contains(&pose.centroid_global));
            if let Some(a) = pose.principal_axis {
                prop_assert!((a.norm() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn doubling_depth_doubles_centroid(
            pixels in prop::collection::vec((0usize..64, 0usize..48, 300u16..20000), 1..30),
        ) {
            let c = cam(RigidTransform::identity());
            let mut mask = SegMask::empty(64, 48);
            let mut d1 = DepthImage::uniform(64, 48, 0);
            let mut d2 = DepthImage::uniform(64, 48, 0);
            for (u, v, d) in &pixels {
                mask.set(*u, *v, true);
                d1.set(*u, *v, *d);
                d2.set(*u, *v, *d * 2);
            }
            let a = door_pose(&back_project(&mask, &d1, &c, 5).unwrap(), &c).unwrap();
            let b = door_pose(&back_project(&mask, &d2, &c, 5).unwrap(), &c).unwrap();
            prop_assert!((b.centroid_cam - a.centroid_cam * 2.0).norm() <= 1e-12 * (1.0 + a.centroid_cam.norm()));
        }

        #[test]
        fn yaw_is_scale_invariant(yaw in -80.0f64..80.0, s in 0.1f64..10.0) {
            let c = cam(RigidTransform::identity());
            let pts = rotated_panel(yaw);
            let scaled: Vec<Vec3> = pts.iter().map(|p| p * s).collect();
            let a = door_pose(&pts, &c).unwrap().yaw_deg.unwrap();
            let b = door_pose(&scaled, &c).unwrap().yaw_deg.unwrap();
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!((a - yaw).abs() < 0.5);
        }
    }

    #[test]
    fn door_track_round_trip() {
        let t = DoorTrack {
            samples: vec![
                DoorSample {
                    timestamp: 0.0,
                    centroid: Vec3::new(1.0, 2.0, 0.5),
                    yaw_deg: Some(30.0),
                },
                DoorSample {
                    timestamp: 0.5,
                    centroid: Vec3::new(1.5, 2.0, 0.5),
                    yaw_deg: None,
                },
            ],
        };
        assert_eq!(DoorTrack::parse(&t.to_csv()).unwrap(), t);
        assert_eq!(t.nearest(0.2).unwrap().timestamp, 0.0);
        assert_eq!(t.nearest(0.3).unwrap().timestamp, 0.5);
        assert!(DoorTrack::parse("timestamp,x,y,z,yaw_deg\n1,0,0,0,\n0,0,0,0,\n").is_err());
    }
}
