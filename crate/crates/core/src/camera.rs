//! Camera poses, intrinsics, the spiral trajectory and trajectory files.
//!
//! Poses are world-to-camera: a world point `X` maps to camera coordinates
//! `R·X + t`. Cameras look down `+z` with `+y` as the up axis, and the
//! pinhole maps camera point `(x, y, z)` to pixel `(cx + fx·x/z, cy + fy·y/z)`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum separation between camera position and look-at target.
pub const LOOK_AT_MIN_DISTANCE: f64 = 1e-8;
/// Minimum angle between the viewing direction and the up hint.
pub const LOOK_AT_MIN_ANGLE_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square pixels, principal point at the image center, focal length equal
    /// to the image width (about 53 degrees horizontal field of view).
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("focal lengths must be positive: {self:?}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!("principal point outside image: {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.cx + self.fx * p.x / p.z, self.cy + self.fy * p.y / p.z)
    }

    /// Camera-space point at pixel `(u, v)` with depth `z`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Pose of a camera at `position` with world-to-camera rotation `rotation`.
    pub fn from_position(rotation: UnitQuaternion<f64>, position: Vector3<f64>) -> Self {
        Self::new(rotation, -(rotation * position))
    }

    /// `[w, x, y, z, tx, ty, tz]`; the quaternion is normalized on import.
    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose contains non-finite values"));
        }
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        let norm = q.norm();
        if norm < 1e-12 {
            return Err(Error::invalid("pose quaternion has zero norm"));
        }
        // Already-unit input is kept verbatim so files round-trip bit-exactly.
        let rotation = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self::new(rotation, Vector3::new(a[4], a[5], a[6])))
    }

    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn invert(&self) -> CameraPose {
        let inv = self.rotation.inverse();
        CameraPose::new(inv, -(inv * self.translation))
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Geodesic angle between two rotations, radians.
    pub fn rotation_angle_to(&self, other: &CameraPose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

/// World-to-camera rotation whose rows are `[right; up'; forward]`, with
/// `forward = norm(target − position)`, `right = norm(up × forward)` and
/// `up' = forward × right`. It maps `forward` to `(0, 0, 1)`.
pub fn look_at_rotation(
    position: &Vector3<f64>,
    target: &Vector3<f64>,
    up: &Vector3<f64>,
) -> Result<UnitQuaternion<f64>> {
    let delta = target - position;
    let dist = delta.norm();
    if !(dist > LOOK_AT_MIN_DISTANCE) {
        return Err(Error::DegenerateLookAt(format!(
            "target {target:?} coincides with position {position:?}"
        )));
    }
    let forward = delta / dist;
    let up_norm = up.norm();
    if !(up_norm > 0.0) {
        return Err(Error::DegenerateLookAt("zero up vector".into()));
    }
    let cos = forward.dot(up) / up_norm;
    if cos.abs() >= LOOK_AT_MIN_ANGLE_DEG.to_radians().cos() {
        return Err(Error::DegenerateLookAt(format!(
            "viewing direction {forward:?} is parallel to up {up:?}"
        )));
    }
    let right = up.cross(&forward).normalize();
    let true_up = forward.cross(&right);
    let m = Matrix3::from_rows(&[right.transpose(), true_up.transpose(), forward.transpose()]);
    let rot = Rotation3::from_matrix_unchecked(m);
    Ok(canonical(UnitQuaternion::from_rotation_matrix(&rot)))
}

/// Closed lobed camera path, evaluated exactly as
/// `(r·sin(2πt)·cos(2πt), r·sin(2πt)·sin(2πt), −sin(2πt))`.
pub fn spiral_position(t: f64, r: f64) -> Vector3<f64> {
    let (s, c) = sin_cos_turns(t);
    Vector3::new(r * s * c, r * s * s, -s)
}

/// `(sin 2πt, cos 2πt)` with the argument reduced to one turn first, exact at
/// quarter turns so that `t = 0` and `t = 1` give bit-identical positions.
fn sin_cos_turns(t: f64) -> (f64, f64) {
    let f = t - t.floor();
    match f {
        0.0 => (0.0, 1.0),
        0.25 => (1.0, 0.0),
        0.5 => (0.0, -1.0),
        0.75 => (-1.0, 0.0),
        _ => (2.0 * PI * f).sin_cos(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
}

/// Spiral of `n_views` poses at `t_i = i / (n_views − 1)`, each looking at
/// `look_point`. The first and last positions coincide.
pub fn spiral_trajectory(
    r: f64,
    n_views: usize,
    look_point: &Vector3<f64>,
    up: &Vector3<f64>,
    intrinsics: Intrinsics,
) -> Result<Trajectory> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("spiral radius must be positive, got {r}")));
    }
    if n_views < 2 {
        return Err(Error::invalid(format!("spiral needs at least 2 views, got {n_views}")));
    }
    let mut poses = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let t = i as f64 / (n_views - 1) as f64;
        let position = spiral_position(t, r);
        let rotation = look_at_rotation(&position, look_point, up)?;
        poses.push(CameraPose::from_position(rotation, position));
    }
    Ok(Trajectory { poses, intrinsics })
}

/// Rebases a trajectory onto its first camera: `pose_i ∘ pose_0⁻¹`.
/// The first pose becomes the identity and relative motion is preserved.
pub fn standardize_trajectory(traj: &Trajectory) -> Trajectory {
    let Some(first) = traj.poses.first() else {
        return traj.clone();
    };
    let base = first.invert();
    let mut poses: Vec<CameraPose> = traj.poses.iter().map(|p| p.compose(&base)).collect();
    poses[0] = CameraPose::identity();
    Trajectory {
        poses,
        intrinsics: traj.intrinsics,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryFile {
    intrinsics: Intrinsics,
    poses: Vec<[f64; 7]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn single(pose: CameraPose, intrinsics: Intrinsics) -> Self {
        Self {
            poses: vec![pose],
            intrinsics,
        }
    }

    /// Multiplies every translation by `scale` (monocular SLAM output has no
    /// absolute scale).
    pub fn scaled(&self, scale: f64) -> Trajectory {
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|p| CameraPose::new(*p.rotation(), p.translation * scale))
                .collect(),
            intrinsics: self.intrinsics,
        }
    }

    pub fn to_json(&self) -> String {
        let file = TrajectoryFile {
            intrinsics: self.intrinsics,
            poses: self.poses.iter().map(CameraPose::to_array).collect(),
        };
        serde_json::to_string_pretty(&file).expect("trajectory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TrajectoryFile = serde_json::from_str(text)?;
        file.intrinsics.validate()?;
        if file.poses.is_empty() {
            return Err(Error::invalid("trajectory has no poses"));
        }
        let poses = file
            .poses
            .into_iter()
            .map(CameraPose::from_array)
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            poses,
            intrinsics: file.intrinsics,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

// Serde for poses goes through the 7-number array so that inline trajectories
// in config files use the same layout as trajectory files.
impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        CameraPose::from_array(a).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Trajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TrajectoryFile {
            intrinsics: self.intrinsics,
            poses: self.poses.iter().map(CameraPose::to_array).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = TrajectoryFile::deserialize(d)?;
        file.intrinsics.validate().map_err(serde::de::Error::custom)?;
        if file.poses.is_empty() {
            return Err(serde::de::Error::custom("trajectory has no poses"));
        }
        let poses = file
            .poses
            .into_iter()
            .map(CameraPose::from_array)
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        Ok(Trajectory {
            poses,
            intrinsics: file.intrinsics,
        })
    }
}
