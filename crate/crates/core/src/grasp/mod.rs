//! Grasp candidates, the three-stage filter and the feasibility fallback.
//!
//! Candidate poses use the end-effector convention of [`crate::arm`]:
//! approach on local +x, closing on local +y.

mod replay;
mod sampler;

pub use replay::{read_replay, write_replay, ReplayFile, ReplayHeader, ReplayProvider};
pub use sampler::{AntipodalSampler, SamplerConfig, SupportPlane};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{self, ArmModel};
use crate::geometry::{PointCloud, Pose3, Vec3};
use crate::perception::{mask_cloud, GraspInput, PerceptionError};

pub const STAGE1_K: usize = 20;
/// Approaches closer than this to vertical have no usable elevation.
pub const COLLAPSE_ANGLE_DEG: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("too few points for candidate generation ({0})")]
    NoCandidates(usize),
    #[error("approach axis within {COLLAPSE_ANGLE_DEG}° of vertical")]
    OrientationCollapse,
    #[error("no IK-feasible grasp among the top candidates")]
    NoFeasibleGrasp,
    #[error("empty candidate set")]
    EmptySet,
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error("replay file: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub pose: Pose3,
    pub width: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspSet {
    pub candidates: Vec<GraspCandidate>,
    pub source: String,
    pub object_centroid_camera: Vec3,
}

/// Anything that turns a masked cloud into a candidate set.
pub trait GraspProvider {
    fn id(&self) -> &str;
    fn generate(&self, cloud: &PointCloud, ctx: &ProviderContext, seed: u64) -> Result<GraspSet, GraspError>;
}

/// Scene knowledge a provider may use besides the cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProviderContext {
    pub max_opening: f64,
    /// Floor plane in the camera frame, if known.
    pub support_plane: Option<SupportPlane>,
}

/// Sorts by score (descending, stable) and keeps the first `k`.
pub fn filter_stage1_topk(gs: &GraspSet, k: usize) -> GraspSet {
    let mut order: Vec<usize> = (0..gs.candidates.len()).collect();
    order.sort_by(|&a, &b| gs.candidates[b].score.total_cmp(&gs.candidates[a].score));
    order.truncate(k);
    GraspSet {
        candidates: order.iter().map(|&i| gs.candidates[i]).collect(),
        source: gs.source.clone(),
        object_centroid_camera: gs.object_centroid_camera,
    }
}

/// Candidate indices ordered by distance to the centroid, then by higher
/// score, then by index.
pub fn stage2_ranking(gs: &GraspSet) -> Vec<usize> {
    let c = gs.object_centroid_camera;
    let dist: Vec<f64> = gs
        .candidates
        .iter()
        .map(|g| (g.pose.translation - c).norm())
        .collect();
    let mut order: Vec<usize> = (0..gs.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        dist[a]
            .total_cmp(&dist[b])
            .then(gs.candidates[b].score.total_cmp(&gs.candidates[a].score))
            .then(a.cmp(&b))
    });
    order
}

/// The candidate nearest the object centroid.
pub fn filter_stage2_center(gs: &GraspSet) -> Result<GraspCandidate, GraspError> {
    stage2_ranking(gs)
        .first()
        .map(|&i| gs.candidates[i])
        .ok_or(GraspError::EmptySet)
}

/// Maps the provider's gripper axes onto the arm's end-effector axes. Both use
/// approach = +x and closing = +y, so this is the identity.
pub fn convention_rotation() -> Matrix3<f64> {
    Matrix3::identity()
}

/// Transforms a camera-frame candidate into the arm-base frame and projects
/// its orientation onto the yaw + pitch manifold of the 4-DOF arm.
pub fn filter_stage3_orient(
    c: &GraspCandidate,
    camera_pose_base: &Pose3,
) -> Result<GraspCandidate, GraspError> {
    let in_base = camera_pose_base.compose(&c.pose);
    let r = in_base.rotation * convention_rotation();
    let t = in_base.translation;
    let approach = r.column(0).into_owned();
    let vertical = approach.z.abs().min(1.0);
    if vertical > COLLAPSE_ANGLE_DEG.to_radians().cos() {
        return Err(GraspError::OrientationCollapse);
    }
    let yaw = t.y.atan2(t.x);
    let elevation = vertical.asin().copysign(approach.z);
    // Manifold pitch is positive downward; allow horizontal to straight down.
    let pitch = (-elevation).clamp(0.0, std::f64::consts::FRAC_PI_2);
    Ok(GraspCandidate {
        pose: Pose3::new(arm::manifold_rotation(yaw, pitch), t),
        width: c.width,
        score: c.score,
    })
}

/// Stage 1, then the stage-2 order with stage 3 and an IK check of the grasp
/// and its pre-grasp standoff; the first feasible candidate wins.
pub fn select_executable(
    gs: &GraspSet,
    camera_pose_base: &Pose3,
    model: &ArmModel,
) -> Result<GraspCandidate, GraspError> {
    if gs.candidates.is_empty() {
        return Err(GraspError::EmptySet);
    }
    let top = filter_stage1_topk(gs, STAGE1_K);
    for i in stage2_ranking(&top) {
        let Ok(oriented) = filter_stage3_orient(&top.candidates[i], camera_pose_base) else {
            continue;
        };
        let pre = arm::pregrasp_pose(model, &oriented.pose);
        if arm::ik(model, &oriented.pose).is_ok() && arm::ik(model, &pre).is_ok() {
            return Ok(oriented);
        }
    }
    Err(GraspError::NoFeasibleGrasp)
}

/// Floor plane expressed in the gripper camera frame, given the camera pose
/// in the arm-base frame and the arm mount on the robot base (whose origin is
/// on the floor).
pub fn floor_plane_camera(camera_pose_base: &Pose3, mount: &Pose3) -> SupportPlane {
    let floor_to_camera = camera_pose_base.inverse().compose(&mount.inverse());
    let normal = floor_to_camera.transform_vector(&Vec3::z());
    let point = floor_to_camera.translation;
    SupportPlane {
        normal,
        offset: -normal.dot(&point),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedGrasp {
    pub grasp_base: GraspCandidate,
    pub set_size: usize,
    pub centroid_camera: Vec3,
}

/// mask → generate → filter for one captured input.
pub fn plan_grasp(
    gi: &GraspInput,
    provider: &dyn GraspProvider,
    model: &ArmModel,
    mount: &Pose3,
    seed: u64,
) -> Result<PlannedGrasp, GraspError> {
    let cloud = mask_cloud(gi)?;
    let ctx = ProviderContext {
        max_opening: model.max_opening,
        support_plane: Some(floor_plane_camera(&gi.camera_pose_base, mount)),
    };
    let gs = provider.generate(&cloud, &ctx, seed)?;
    let grasp_base = select_executable(&gs, &gi.camera_pose_base, model)?;
    Ok(PlannedGrasp {
        grasp_base,
        set_size: gs.candidates.len(),
        centroid_camera: gs.object_centroid_camera,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_y, rot_z};

    fn cand(t: [f64; 3], score: f64) -> GraspCandidate {
        GraspCandidate {
            pose: Pose3::new(rot_y(1.0), Vec3::new(t[0], t[1], t[2])),
            width: 0.03,
            score,
        }
    }

    fn set(c: Vec<GraspCandidate>) -> GraspSet {
        GraspSet {
            candidates: c,
            source: "test".into(),
            object_centroid_camera: Vec3::zeros(),
        }
    }

    #[test]
    fn stage1_keeps_all_when_few() {
        let s = set((0..5).map(|i| cand([0.0; 3], i as f64 / 10.0)).collect());
        let top = filter_stage1_topk(&s, 20);
        let scores: Vec<f64> = top.candidates.iter().map(|c| c.score).collect();
        assert_eq!(scores, vec![0.4, 0.3, 0.2, 0.1, 0.0]);
    }

    #[test]
    fn stage1_is_stable() {
        let s = set((0..4).map(|i| cand([i as f64, 0.0, 0.0], 0.5)).collect());
        let top = filter_stage1_topk(&s, 3);
        let xs: Vec<f64> = top.candidates.iter().map(|c| c.pose.translation.x).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn stage2_argmin() {
        let s = set(vec![cand([0.03, 0.0, 0.0], 0.9), cand([0.0, 0.01, 0.0], 0.1), cand([0.0, 0.0, 0.05], 0.5)]);
        assert_eq!(filter_stage2_center(&s).unwrap().score, 0.1);
        // Equal distance: the higher score wins.
        let tie = set(vec![cand([0.01, 0.0, 0.0], 0.2), cand([0.0, -0.01, 0.0], 0.7)]);
        assert_eq!(filter_stage2_center(&tie).unwrap().score, 0.7);
    }

    #[test]
    fn stage3_yaw_from_position() {
        let c = GraspCandidate {
            pose: Pose3::new(rot_y(0.8), Vec3::new(0.2, 0.2, 0.0)),
            width: 0.03,
            score: 0.5,
        };
        let out = filter_stage3_orient(&c, &Pose3::identity()).unwrap();
        let (yaw, pitch) = arm::manifold_angles(&out.pose.rotation).unwrap();
        assert!((yaw - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert!((pitch - 0.8).abs() < 1e-12);
        assert_eq!(out.pose.translation, c.pose.translation);
    }

    #[test]
    fn stage3_on_manifold_unchanged() {
        let t = Vec3::new(0.25, 0.0, 0.0);
        let c = GraspCandidate {
            pose: Pose3::new(arm::manifold_rotation(0.0, 0.6), t),
            width: 0.03,
            score: 0.5,
        };
        let out = filter_stage3_orient(&c, &Pose3::identity()).unwrap();
        assert!(out.pose.max_abs_diff(&c.pose) < 1e-12);
    }

    #[test]
    fn stage3_vertical_collapses() {
        let c = GraspCandidate {
            pose: Pose3::new(rot_z(0.3) * rot_y(std::f64::consts::FRAC_PI_2 - 0.01), Vec3::new(0.2, 0.0, 0.0)),
            width: 0.03,
            score: 0.5,
        };
        assert_eq!(filter_stage3_orient(&c, &Pose3::identity()), Err(GraspError::OrientationCollapse));
    }

    #[test]
    fn select_falls_back_to_reachable() {
        let model = ArmModel::default();
        let far = cand([1.0, 0.0, 0.0], 0.9);
        let near_but_second = cand([0.25, 0.0, 0.0], 0.8);
        let mut s = set(vec![far, near_but_second]);
        s.object_centroid_camera = Vec3::new(0.9, 0.0, 0.0);
        assert_eq!(filter_stage2_center(&s).unwrap().score, 0.9);
        let got = select_executable(&s, &Pose3::identity(), &model).unwrap();
        assert_eq!(got.score, 0.8);
        let none = set(vec![far]);
        assert_eq!(select_executable(&none, &Pose3::identity(), &model), Err(GraspError::NoFeasibleGrasp));
    }

    #[test]
    fn floor_plane_under_mount() {
        let mount = Pose3::from_translation(0.05, 0.0, 0.12);
        let cam = Pose3::from_translation(0.1, 0.0, 0.2);
        let p = floor_plane_camera(&cam, &mount);
        // A floor point in world coordinates, seen from the camera.
        let floor_pt = cam.inverse().transform_point(&Vec3::new(0.3, 0.1, -0.12));
        assert!(p.height(&floor_pt).abs() < 1e-12);
        assert!((p.height(&Vec3::zeros()) - 0.32).abs() < 1e-12);
    }
}
