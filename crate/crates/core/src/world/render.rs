use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RobotState, SceneObject, WorldScene};
use crate::arm::{self, ArmModel};
use crate::geometry::{CameraIntrinsics, DepthImage, Image, Pose3, Vec3};
use crate::world::CameraRig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Front,
    Gripper,
}

impl CameraId {
    pub fn as_str(&self) -> &'static str {
        match self {
            CameraId::Front => "front",
            CameraId::Gripper => "gripper",
        }
    }
}

/// Per-pixel object label: 0 is background, `i + 1` is `object_ids[i]`.
pub type LabelImage = Image<u16>;

#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub camera: CameraId,
    pub labels: LabelImage,
    pub depth: DepthImage,
    pub object_ids: Vec<String>,
    pub class_names: Vec<String>,
    /// Pixels each object would cover if nothing occluded it.
    pub projected_pixels: Vec<usize>,
    pub intrinsics: CameraIntrinsics,
    pub camera_pose_world: Pose3,
    pub tick: u64,
}

impl SensorFrame {
    pub fn label_of(&self, object_id: &str) -> Option<u16> {
        self.object_ids
            .iter()
            .position(|id| id == object_id)
            .map(|i| i as u16 + 1)
    }

    pub fn object_id(&self, label: u16) -> Option<&str> {
        if label == 0 {
            None
        } else {
            self.object_ids.get(label as usize - 1).map(String::as_str)
        }
    }

    pub fn visible_pixels(&self, label: u16) -> usize {
        self.labels.data.iter().filter(|&&l| l == label).count()
    }
}

/// World pose of a camera for the given robot state.
pub fn camera_pose_world(rig: &CameraRig, arm_model: &ArmModel, robot: &RobotState, camera: CameraId) -> Pose3 {
    match camera {
        CameraId::Front => robot.base.to_pose3().compose(&rig.front.mount),
        CameraId::Gripper => arm::arm_base_world(arm_model, robot)
            .compose(&arm::camera_pose(arm_model, &robot.arm_joints)),
    }
}

/// Pixel rectangle `(u0, u1, v0, v1)` (inclusive) that contains the image of
/// a sphere, or `None` when it is entirely behind the camera. Falls back to
/// the whole image when the sphere reaches the camera plane.
fn sphere_footprint(center: &Vec3, r: f64, k: &CameraIntrinsics) -> Option<(usize, usize, usize, usize)> {
    let full = Some((0, k.width - 1, 0, k.height - 1));
    if center.z + r <= 0.0 {
        return None;
    }
    let z_near = center.z - r;
    if z_near <= 1e-6 {
        return full;
    }
    let z_far = center.z + r;
    // Every point of the sphere has X/Z between these extremes.
    let bound = |lo: f64, hi: f64| {
        let c = [lo / z_near, lo / z_far, hi / z_near, hi / z_far];
        (
            c.iter().copied().fold(f64::INFINITY, f64::min),
            c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (xl, xh) = bound(center.x - r, center.x + r);
    let (yl, yh) = bound(center.y - r, center.y + r);
    let u0 = (k.cx + k.fx * xl).floor() - 1.0;
    let u1 = (k.cx + k.fx * xh).ceil() + 1.0;
    let v0 = (k.cy + k.fy * yl).floor() - 1.0;
    let v1 = (k.cy + k.fy * yh).ceil() + 1.0;
    let (w, h) = (k.width as f64, k.height as f64);
    if u1 < 0.0 || v1 < 0.0 || u0 >= w || v0 >= h {
        return None;
    }
    Some((
        u0.max(0.0) as usize,
        u1.min(w - 1.0) as usize,
        v0.max(0.0) as usize,
        v1.min(h - 1.0) as usize,
    ))
}

/// Nearest-hit ray casting of `objects` through every pixel.
///
/// Returns the label image, the noise-free z-depth image and the unoccluded
/// pixel count of every object.
pub fn render_view(objects: &[SceneObject], k: &CameraIntrinsics, pose: &Pose3) -> (LabelImage, DepthImage, Vec<usize>) {
    let mut labels = LabelImage::filled(k.width, k.height, 0);
    let mut depth = DepthImage::filled(k.width, k.height, 0.0);
    let mut projected = vec![0usize; objects.len()];
    let origin = pose.translation;
    let inv = pose.inverse();
    let footprints: Vec<_> = objects
        .iter()
        .map(|o| sphere_footprint(&inv.transform_point(&o.pose.translation), o.shape.bounding_radius(), k))
        .collect();
    let Some((u_lo, u_hi, v_lo, v_hi)) = footprints.iter().flatten().copied().reduce(|a, b| {
        (a.0.min(b.0), a.1.max(b.1), a.2.min(b.2), a.3.max(b.3))
    }) else {
        return (labels, depth, projected);
    };
    for v in v_lo..=v_hi {
        for u in u_lo..=u_hi {
            // Camera-frame direction has z = 1, so the ray parameter is the z-depth.
            let dir = pose.rotation * k.pixel_ray(u as f64, v as f64);
            let mut best: Option<(usize, f64)> = None;
            for (i, obj) in objects.iter().enumerate() {
                let Some((u0, u1, v0, v1)) = footprints[i] else { continue };
                if u < u0 || u > u1 || v < v0 || v > v1 {
                    continue;
                }
                if let Some(t) = obj.ray_hit(&origin, &dir) {
                    projected[i] += 1;
                    if best.is_none_or(|(_, bt)| t < bt) {
                        best = Some((i, t));
                    }
                }
            }
            if let Some((i, t)) = best {
                labels.set(u, v, i as u16 + 1);
                depth.set(u, v, t);
            }
        }
    }
    (labels, depth, projected)
}

fn noise_seed(seed: u64, tick: u64, camera: CameraId) -> u64 {
    let c = match camera {
        CameraId::Front => 0x51,
        CameraId::Gripper => 0xA7,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tick.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ c
}

/// Renders one camera. Depth noise (σ = `depth_sigma`) is drawn from a
/// generator keyed on `(seed, tick, camera)`, so frames are reproducible.
#[allow(clippy::too_many_arguments)]
pub fn render(
    scene: &WorldScene,
    robot: &RobotState,
    rig: &CameraRig,
    arm_model: &ArmModel,
    camera: CameraId,
    depth_sigma: f64,
    seed: u64,
    tick: u64,
) -> SensorFrame {
    let pose = camera_pose_world(rig, arm_model, robot, camera);
    let k = match camera {
        CameraId::Front => rig.front.intrinsics,
        CameraId::Gripper => rig.gripper.intrinsics,
    };
    let (labels, mut depth, projected_pixels) = render_view(&scene.objects, &k, &pose);
    if depth_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(seed, tick, camera));
        let n = Normal::new(0.0, depth_sigma).expect("finite sigma");
        for d in depth.data.iter_mut().filter(|d| **d > 0.0) {
            // Keep valid pixels valid.
            *d = (*d + n.sample(&mut rng)).max(1e-4);
        }
    }
    SensorFrame {
        camera,
        labels,
        depth,
        object_ids: scene.objects.iter().map(|o| o.id.clone()).collect(),
        class_names: scene.objects.iter().map(|o| o.class_name.clone()).collect(),
        projected_pixels,
        intrinsics: k,
        camera_pose_world: pose,
        tick,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Shape;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    fn obj(id: &str, shape: Shape, at: Vec3) -> SceneObject {
        SceneObject {
            id: id.into(),
            class_name: id.into(),
            shape,
            pose: Pose3::from_translation(at.x, at.y, at.z),
            mass: 0.1,
            slip_coefficient: 0.2,
            movable: true,
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let (labels, depth, _) = render_view(&[], &k(), &Pose3::identity());
        assert!(labels.data.iter().all(|l| *l == 0));
        assert!(depth.data.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn sphere_on_axis_center_depth() {
        let s = obj("s", Shape::Sphere { radius: 0.25 }, Vec3::new(0.0, 0.0, 1.0));
        let (labels, depth, counts) = render_view(&[s], &k(), &Pose3::identity());
        assert_eq!(labels.get(32, 32), 1);
        assert!((depth.get(32, 32) - 0.75).abs() < 1e-12);
        assert_eq!(counts[0], labels.data.iter().filter(|l| **l == 1).count());
    }

    #[test]
    fn nearer_box_occludes_sphere() {
        let sphere = obj("s", Shape::Sphere { radius: 0.2 }, Vec3::new(0.0, 0.0, 1.5));
        let bx = obj("b", Shape::Box { size: [0.15, 0.15, 0.1] }, Vec3::new(0.0, 0.0, 0.8));
        let (labels, depth, counts) = render_view(&[sphere, bx], &k(), &Pose3::identity());
        assert_eq!(labels.get(32, 32), 2);
        assert!((depth.get(32, 32) - 0.75).abs() < 1e-12);
        // Some sphere pixels remain visible around the box.
        assert!(labels.data.iter().any(|l| *l == 1));
        assert!(counts[0] > labels.data.iter().filter(|l| **l == 1).count());
    }
}
