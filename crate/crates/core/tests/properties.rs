use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use proptest::prelude::*;

use quadgrasp::arm::{self, ArmError, ArmModel, JointState};
use quadgrasp::geometry::{CameraIntrinsics, Pose3, Vec3};
use quadgrasp::grasp::{filter_stage1_topk, filter_stage2_center, filter_stage3_orient, GraspCandidate, GraspSet, STAGE1_K};
use quadgrasp::mission::{next_state, EventKind, StateKind};

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..3.1).prop_map(|(x, y, z, a)| {
        let axis = Vector3::new(x, y, z + 1e-3).normalize();
        UnitQuaternion::from_scaled_axis(axis * a).to_rotation_matrix().into_inner()
    })
}

fn pose() -> impl Strategy<Value = Pose3> {
    (rotation(), -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(r, x, y, z)| Pose3::new(r, Vec3::new(x, y, z)))
}

fn candidate() -> impl Strategy<Value = GraspCandidate> {
    (pose(), 0.01f64..0.08, 0u32..30).prop_map(|(pose, width, s)| GraspCandidate {
        pose,
        width,
        score: s as f64 / 30.0,
    })
}

fn grasp_set() -> impl Strategy<Value = GraspSet> {
    (prop::collection::vec(candidate(), 0..50), -0.1f64..0.1, -0.1f64..0.1).prop_map(|(candidates, x, y)| GraspSet {
        candidates,
        source: "prop".into(),
        object_centroid_camera: Vec3::new(x, y, 0.4),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stage1_is_stable_sort_then_truncate(gs in grasp_set(), k in 0usize..40) {
        let mut idx: Vec<usize> = (0..gs.candidates.len()).collect();
        idx.sort_by(|&a, &b| gs.candidates[b].score.partial_cmp(&gs.candidates[a].score).unwrap().then(a.cmp(&b)));
        let want: Vec<_> = idx.into_iter().take(k).map(|i| gs.candidates[i]).collect();
        prop_assert_eq!(filter_stage1_topk(&gs, k).candidates, want);
    }

    #[test]
    fn stage2_is_the_nearest_candidate(gs in grasp_set()) {
        let got = filter_stage2_center(&gs);
        if gs.candidates.is_empty() {
            prop_assert!(got.is_err());
        } else {
            let d = |g: &GraspCandidate| (g.pose.translation - gs.object_centroid_camera).norm();
            let min = gs.candidates.iter().map(d).fold(f64::INFINITY, f64::min);
            let g = got.unwrap();
            prop_assert_eq!(d(&g), min);
            let best_score = gs.candidates.iter().filter(|c| d(c) == min).map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(g.score, best_score);
        }
    }

    #[test]
    fn positive_score_scaling_keeps_selection(gs in grasp_set(), c in prop::sample::select(vec![0.25, 0.5, 3.0, 1e3])) {
        let scaled = GraspSet {
            candidates: gs.candidates.iter().map(|g| GraspCandidate { score: g.score * c, ..*g }).collect(),
            ..gs.clone()
        };
        let poses = |s: &GraspSet| s.candidates.iter().map(|g| g.pose).collect::<Vec<_>>();
        prop_assert_eq!(poses(&filter_stage1_topk(&gs, STAGE1_K)), poses(&filter_stage1_topk(&scaled, STAGE1_K)));
        prop_assert_eq!(
            filter_stage2_center(&gs).ok().map(|g| g.pose),
            filter_stage2_center(&scaled).ok().map(|g| g.pose)
        );
    }

    #[test]
    fn stage3_lands_on_the_manifold(c in candidate(), cam in pose()) {
        if let Ok(out) = filter_stage3_orient(&c, &cam) {
            let r = out.pose.rotation;
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            prop_assert!(r.column(1).z.abs() < 1e-12, "roll must be zero");
            prop_assert!((out.pose.translation - cam.transform_point(&c.pose.translation)).abs().max() < 1e-12);
            prop_assert_eq!((out.width, out.score), (c.width, c.score));
        }
    }

    #[test]
    fn ik_inverts_fk(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0) {
        let m = ArmModel::default();
        let lerp = |i: usize, s: f64| m.joint_limits[i][0] + s * (m.joint_limits[i][1] - m.joint_limits[i][0]);
        let q = JointState::new(lerp(0, a), lerp(1, b), lerp(2, c), lerp(3, d));
        let target = arm::fk(&m, &q).unwrap();
        let q2 = arm::ik(&m, &target).unwrap();
        let back = arm::fk(&m, &q2).unwrap();
        prop_assert!((back.translation - target.translation).norm() < 1e-6);
        prop_assert!((back.rotation - target.rotation).abs().max() < 1e-6);
    }

    #[test]
    fn rolled_targets_are_rejected(a in 0.0f64..1.0, roll in 0.01f64..1.5) {
        let m = ArmModel::default();
        let q = JointState::new(0.0, m.joint_limits[1][0] + a * 0.5, 0.3, 0.2);
        let target = arm::fk_unchecked(&m, &q);
        let rolled = Pose3::new(arm::with_roll(&target.rotation, roll), target.translation);
        prop_assert!(matches!(arm::ik(&m, &rolled), Err(ArmError::OrientationInfeasible(_))));
    }

    #[test]
    fn far_targets_are_unreachable(yaw in -3.0f64..3.0, extra in 0.001f64..1.0, pitch in 0.0f64..1.5) {
        let m = ArmModel::default();
        let r = m.max_reach() + extra;
        let t = Vec3::new(r * yaw.cos(), r * yaw.sin(), m.link_lengths[0]);
        let target = Pose3::new(arm::manifold_rotation(yaw, pitch), t);
        prop_assert_eq!(arm::ik(&m, &target), Err(ArmError::Unreachable));
    }

    #[test]
    fn projection_inverts_backprojection(u in 0.0f64..320.0, v in 0.0f64..240.0, z in 0.05f64..5.0) {
        let k = CameraIntrinsics { fx: 277.0, fy: 277.0, cx: 160.0, cy: 120.0, width: 320, height: 240 };
        let p = k.pixel_ray(u, v) * z;
        let (pu, pv, pz) = k.project(&p).unwrap();
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9 && (pz - z).abs() < 1e-12);
    }

    #[test]
    fn transition_table_is_total(i in 0usize..15, j in 0usize..11) {
        let s = StateKind::ALL[i];
        let e = &EventKind::samples()[j];
        let t = next_state(s, e);
        match e {
            EventKind::Stop => prop_assert_eq!(t, Some(StateKind::Idle)),
            EventKind::ToggleDetection { .. } => prop_assert_eq!(t, Some(s)),
            _ => prop_assert!(t.is_none_or(|t| StateKind::ALL.contains(&t))),
        }
    }
}
