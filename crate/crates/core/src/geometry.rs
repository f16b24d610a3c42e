//! Rigid transforms, the pinhole camera model and depth back-projection.
//!
//! Camera frames follow the usual pinhole convention: +z forward, +x right,
//! +y down. Depth images store z-depth in meters with `0.0` marking an
//! invalid pixel.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("depth image is {got_w}x{got_h} but intrinsics expect {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
}

/// A rigid transform: `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Matrix3::identity(), Vec3::new(x, y, z))
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Builds a pose from a unit quaternion given as `[w, x, y, z]`.
    pub fn from_quaternion(wxyz: [f64; 4], translation: Vec3) -> Result<Self, GeometryError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let n = q.norm();
        if !n.is_finite() || n < 1e-9 {
            return Err(GeometryError::InvalidRotation(
                "quaternion has zero norm".into(),
            ));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Self::new(*uq.to_rotation_matrix().matrix(), translation))
    }

    /// Returns the rotation as a unit quaternion `[w, x, y, z]`.
    pub fn quaternion(&self) -> [f64; 4] {
        let r = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&r);
        [q.w, q.i, q.j, q.k]
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let rt = self.rotation.transpose();
        Pose3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, v: &Vec3) -> Vec3 {
        self.rotation * v + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Checks orthonormality and a positive determinant within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let ortho = (rtr - Matrix3::identity()).abs().max() <= tol;
        let det = (self.rotation.determinant() - 1.0).abs() <= tol;
        ortho && det && self.translation.iter().all(|x| x.is_finite())
    }

    /// Column `i` of the rotation, i.e. the local axis `i` in the parent frame.
    pub fn axis(&self, i: usize) -> Vec3 {
        self.rotation.column(i).into_owned()
    }

    /// Re-orthonormalizes the rotation (polar decomposition via SVD).
    pub fn orthonormalized(&self) -> Pose3 {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose3::new(r, self.translation)
    }

    pub fn max_abs_diff(&self, other: &Pose3) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Free functions mirroring the methods, handy when composing chains.
pub fn compose(a: &Pose3, b: &Pose3) -> Pose3 {
    a.compose(b)
}

pub fn transform_point(p: &Pose3, v: &Vec3) -> Vec3 {
    p.transform_point(v)
}

// Wire/file form: translation plus either a row-major matrix or a quaternion.
#[derive(Serialize, Deserialize)]
struct PoseDoc {
    translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quaternion: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    yaw: Option<f64>,
}

impl Serialize for Pose3 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseDoc {
            translation: [self.translation.x, self.translation.y, self.translation.z],
            rotation: Some([
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ]),
            quaternion: None,
            yaw: None,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose3 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let doc = PoseDoc::deserialize(d)?;
        let t = Vec3::from(doc.translation);
        let pose = match (doc.rotation, doc.quaternion, doc.yaw) {
            (Some(m), None, None) => Pose3::new(Matrix3::from_row_slice(&m), t),
            (None, Some(q), None) => Pose3::from_quaternion(q, t).map_err(D::Error::custom)?,
            (None, None, Some(yaw)) => Pose3::new(rot_z(yaw), t),
            (None, None, None) => Pose3::new(Matrix3::identity(), t),
            _ => {
                return Err(D::Error::custom(
                    "pose takes at most one of rotation, quaternion, yaw",
                ))
            }
        };
        if !pose.is_valid(1e-6) {
            return Err(D::Error::custom("pose rotation is not orthonormal"));
        }
        Ok(pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("empty image".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    /// Direction through pixel `(u, v)` in the camera frame, scaled so z = 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Pixel coordinates and z-depth of a camera-frame point, or `None` when
    /// the point is not in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z))
    }

    pub fn image_center_u(&self) -> f64 {
        self.width as f64 / 2.0
    }
}

/// Row-major 2D grid, used for depth and label images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }
}

pub type DepthImage = Image<f64>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Optional per-point object label (0 = background).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }
}

/// Pixel rectangle, half-open: contains `(u, v)` iff
/// `u_min <= u < u_max && v_min <= v < v_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl PixelRect {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self {
            u_min,
            v_min,
            u_max,
            v_max,
        }
    }

    /// Rectangle spanned by two corners in any order.
    pub fn from_corners(u0: f64, v0: f64, u1: f64, v1: f64) -> Self {
        Self::new(u0.min(u1), v0.min(v1), u0.max(u1), v0.max(v1))
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.u_min < self.u_max && self.v_min < self.v_max)
    }

    pub fn area(&self) -> f64 {
        (self.u_max - self.u_min).max(0.0) * (self.v_max - self.v_min).max(0.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min && u < self.u_max && v >= self.v_min && v < self.v_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.u_min + self.u_max) / 2.0,
            (self.v_min + self.v_max) / 2.0,
        )
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> PixelRect {
        PixelRect::new(
            self.u_min.clamp(0.0, width as f64),
            self.v_min.clamp(0.0, height as f64),
            self.u_max.clamp(0.0, width as f64),
            self.v_max.clamp(0.0, height as f64),
        )
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.u_min >= 0.0
            && self.v_min >= 0.0
            && self.u_max <= width as f64
            && self.v_max <= height as f64
    }

    /// Integer pixel ranges covered by the rectangle (pixel centers at integer coordinates).
    pub fn pixel_ranges(&self, width: usize, height: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let c = self.clamp_to(width, height);
        let u0 = c.u_min.ceil() as usize;
        let v0 = c.v_min.ceil() as usize;
        let u1 = (c.u_max.ceil() as usize).min(width);
        let v1 = (c.v_max.ceil() as usize).min(height);
        (u0..u1.max(u0), v0..v1.max(v0))
    }
}

/// Back-projects every valid pixel of `depth` into the camera frame.
pub fn backproject(depth: &DepthImage, k: &CameraIntrinsics) -> Result<PointCloud, GeometryError> {
    backproject_region(depth, k, None)
}

/// Like [`backproject`] but restricted to pixels inside `region` when given.
pub fn backproject_region(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    region: Option<&PixelRect>,
) -> Result<PointCloud, GeometryError> {
    if depth.width != k.width || depth.height != k.height {
        return Err(GeometryError::DimensionMismatch {
            got_w: depth.width,
            got_h: depth.height,
            want_w: k.width,
            want_h: k.height,
        });
    }
    let (us, vs) = match region {
        Some(r) => r.pixel_ranges(depth.width, depth.height),
        None => (0..depth.width, 0..depth.height),
    };
    let mut points = Vec::new();
    for v in vs {
        for u in us.clone() {
            let d = depth.get(u, v);
            if d > 0.0 && d.is_finite() {
                points.push(Vec3::new(
                    (u as f64 - k.cx) * d / k.fx,
                    (v as f64 - k.cy) * d / k.fy,
                    d,
                ));
            }
        }
    }
    Ok(PointCloud {
        points,
        labels: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 120.0,
            cx: 20.0,
            cy: 15.0,
            width: 40,
            height: 30,
        }
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let p = Pose3::new(rot_z(0.3) * rot_y(-0.2), Vec3::new(0.1, -0.4, 2.0));
        assert!(Pose3::identity().compose(&p).max_abs_diff(&p) < 1e-15);
        assert!(p.compose(&p.inverse()).max_abs_diff(&Pose3::identity()) < 1e-9);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = Pose3::from_rotation(rot_z(FRAC_PI_2));
        let b = Pose3::from_translation(1.0, 0.0, 0.0);
        let origin = a.compose(&b).transform_point(&Vec3::zeros());
        let h = a.to_homogeneous() * b.to_homogeneous() * nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(origin.x, h.x, epsilon = 1e-12);
        assert_relative_eq!(origin.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(origin.x, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transform_point_cases() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose3::identity().transform_point(&v), v);
        let t = Pose3::from_translation(0.1, 0.0, 0.0);
        assert_eq!(t.transform_point(&Vec3::zeros()), Vec3::new(0.1, 0.0, 0.0));
        let r = Pose3::from_rotation(rot_z(FRAC_PI_2)).transform_point(&Vec3::x());
        assert!((r - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_principal_point_and_focal_offset() {
        let mut d = DepthImage::filled(40, 30, 0.0);
        d.set(20, 15, 0.5);
        d.set(30, 15, 1.0); // cx + fx/10 with fx = 100 -> x = 0.1
        let cloud = backproject(&d, &k()).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0], Vec3::new(0.0, 0.0, 0.5));
        assert_relative_eq!(cloud.points[1].x, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn backproject_one_focal_length_right() {
        let k = CameraIntrinsics {
            fx: 10.0,
            fy: 10.0,
            cx: 5.0,
            cy: 5.0,
            width: 20,
            height: 20,
        };
        let mut d = DepthImage::filled(20, 20, 0.0);
        d.set(15, 5, 1.0);
        let cloud = backproject(&d, &k).unwrap();
        assert_eq!(cloud.points, vec![Vec3::new(1.0, 0.0, 1.0)]);
    }

    #[test]
    fn project_inverts_pixel_ray() {
        let p = k().pixel_ray(7.0, 22.0) * 1.5;
        let (u, v, z) = k().project(&p).unwrap();
        assert_relative_eq!(u, 7.0, epsilon = 1e-12);
        assert_relative_eq!(v, 22.0, epsilon = 1e-12);
        assert_eq!(z, 1.5);
        assert_eq!(k().project(&Vec3::new(0.0, 0.0, -1.0)), None);
    }

    #[test]
    fn backproject_empty_and_mismatch() {
        let d = DepthImage::filled(40, 30, 0.0);
        assert!(backproject(&d, &k()).unwrap().is_empty());
        let bad = DepthImage::filled(41, 30, 0.0);
        assert!(matches!(
            backproject(&bad, &k()),
            Err(GeometryError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(k().validate().is_ok());
        let mut bad = k();
        bad.cx = 40.0;
        assert!(bad.validate().is_err());
        bad = k();
        bad.fy = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pose_serde_accepts_quaternion_and_matrix() {
        let p: Pose3 =
            serde_json::from_str(r#"{"translation":[1,2,3],"quaternion":[0.7071067811865476,0,0,0.7071067811865476]}"#)
                .unwrap();
        assert!((p.transform_point(&Vec3::x()) - Vec3::new(1.0, 3.0, 3.0)).norm() < 1e-12);
        let text = serde_json::to_string(&p).unwrap();
        let back: Pose3 = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<Pose3>(r#"{"translation":[0,0,0],"rotation":[2,0,0,0,1,0,0,0,1]}"#).is_err());
    }

    #[test]
    fn pixel_rect_ranges_are_half_open() {
        let r = PixelRect::new(2.0, 3.0, 5.0, 4.0);
        let (us, vs) = r.pixel_ranges(10, 10);
        assert_eq!(us, 2..5);
        assert_eq!(vs, 3..4);
        assert!(r.contains(4.9, 3.0));
        assert!(!r.contains(5.0, 3.0));
    }
}
