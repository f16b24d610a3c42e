//! Detection and tracking oracles over rendered label frames, operator
//! selection handling, and capture/masking of the grasp input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{self, ArmModel, JointState};
use crate::geometry::{backproject_region, CameraIntrinsics, DepthImage, PixelRect, PointCloud, Pose3};
use crate::world::{LabelImage, SensorFrame};

/// Objects with fewer visible pixels than this are not detected (or tracked).
pub const MIN_VISIBLE_PIXELS: usize = 20;
pub const MIN_CONFIDENCE: f64 = 0.3;
pub const MAX_CONFIDENCE: f64 = 0.99;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("no object under the selection")]
    NoTargetUnderSelection,
    #[error("selection coordinates are outside the image")]
    SelectionOutOfBounds,
    #[error("track lost")]
    TrackLost,
    #[error("selection has not been confirmed")]
    SelectionNotConfirmed,
    #[error("no valid depth inside the mask")]
    EmptyMask,
    #[error("degenerate bounding box")]
    DegenerateBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub object_id: String,
    pub class_name: String,
    pub label: u16,
    pub bbox: PixelRect,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy)]
struct LabelStats {
    count: usize,
    u_min: usize,
    v_min: usize,
    u_max: usize,
    v_max: usize,
}

fn label_stats(labels: &LabelImage, region: Option<&PixelRect>) -> Vec<Option<LabelStats>> {
    let max_label = labels.data.iter().copied().max().unwrap_or(0) as usize;
    let mut stats: Vec<Option<LabelStats>> = vec![None; max_label + 1];
    let (us, vs) = match region {
        Some(r) => r.pixel_ranges(labels.width, labels.height),
        None => (0..labels.width, 0..labels.height),
    };
    for v in vs {
        for u in us.clone() {
            let l = labels.get(u, v) as usize;
            if l == 0 {
                continue;
            }
            let s = stats[l].get_or_insert(LabelStats {
                count: 0,
                u_min: u,
                v_min: v,
                u_max: u,
                v_max: v,
            });
            s.count += 1;
            s.u_min = s.u_min.min(u);
            s.v_min = s.v_min.min(v);
            s.u_max = s.u_max.max(u);
            s.v_max = s.v_max.max(v);
        }
    }
    stats
}

fn tight_box(s: &LabelStats) -> PixelRect {
    PixelRect::new(
        s.u_min as f64,
        s.v_min as f64,
        s.u_max as f64 + 1.0,
        s.v_max as f64 + 1.0,
    )
}

/// Adds independent Gaussian noise to each edge, then clamps to the image
/// while keeping the box at least one pixel wide.
fn jitter_box(b: PixelRect, sigma: f64, width: usize, height: usize, rng: &mut ChaCha8Rng) -> PixelRect {
    if sigma <= 0.0 {
        return b;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let mut j = PixelRect::new(
        b.u_min + n.sample(rng),
        b.v_min + n.sample(rng),
        b.u_max + n.sample(rng),
        b.v_max + n.sample(rng),
    )
    .clamp_to(width, height);
    let fix = |lo: &mut f64, hi: &mut f64, limit: f64| {
        if *hi - *lo < 1.0 {
            let c = ((*lo + *hi) / 2.0).clamp(0.5, limit - 0.5);
            *lo = c - 0.5;
            *hi = c + 0.5;
        }
    };
    fix(&mut j.u_min, &mut j.u_max, width as f64);
    fix(&mut j.v_min, &mut j.v_max, height as f64);
    j
}

fn frame_rng(frame: &SensorFrame, seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ frame.tick.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt)
}

/// Ground-truth detector: one box per object with enough visible pixels.
pub fn detect(frame: &SensorFrame, jitter_px: f64, noise_seed: u64) -> Vec<DetectionBox> {
    let stats = label_stats(&frame.labels, None);
    let mut rng = frame_rng(frame, noise_seed, 0xD7);
    let mut out = Vec::new();
    for (label, s) in stats.iter().enumerate() {
        let Some(s) = s else { continue };
        if s.count < MIN_VISIBLE_PIXELS {
            continue;
        }
        let idx = label - 1;
        let projected = frame.projected_pixels.get(idx).copied().unwrap_or(s.count).max(1);
        let confidence = (s.count as f64 / projected as f64).clamp(MIN_CONFIDENCE, MAX_CONFIDENCE);
        out.push(DetectionBox {
            object_id: frame.object_ids[idx].clone(),
            class_name: frame.class_names[idx].clone(),
            label: label as u16,
            bbox: jitter_box(tight_box(s), jitter_px, frame.labels.width, frame.labels.height, &mut rng),
            confidence,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    Click { u: f64, v: f64 },
    Drag { u0: f64, v0: f64, u1: f64, v1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub mode: SelectionMode,
    pub resolved_bbox: PixelRect,
    pub target_object_id: Option<String>,
    pub target_class: Option<String>,
    pub confirmed: bool,
}

impl Selection {
    pub fn confirm(mut self) -> Self {
        self.confirmed = true;
        self
    }
}

/// Resolves a click against the detections or a drag against the label pixels.
pub fn resolve_selection(
    mode: SelectionMode,
    detections: &[DetectionBox],
    frame: &SensorFrame,
) -> Result<Selection, PerceptionError> {
    let (w, h) = (frame.labels.width as f64, frame.labels.height as f64);
    match mode {
        SelectionMode::Click { u, v } => {
            if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
                return Err(PerceptionError::SelectionOutOfBounds);
            }
            let hit = detections
                .iter()
                .filter(|d| d.bbox.contains(u, v))
                .min_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()))
                .ok_or(PerceptionError::NoTargetUnderSelection)?;
            Ok(Selection {
                mode,
                resolved_bbox: hit.bbox,
                target_object_id: Some(hit.object_id.clone()),
                target_class: Some(hit.class_name.clone()),
                confirmed: true,
            })
        }
        SelectionMode::Drag { u0, v0, u1, v1 } => {
            let rect = PixelRect::from_corners(u0, v0, u1, v1);
            if rect.is_degenerate() {
                return Err(PerceptionError::DegenerateBox);
            }
            if rect.u_min < 0.0 || rect.v_min < 0.0 || rect.u_max > w || rect.v_max > h {
                return Err(PerceptionError::SelectionOutOfBounds);
            }
            let stats = label_stats(&frame.labels, Some(&rect));
            let (label, _) = stats
                .iter()
                .enumerate()
                .filter_map(|(l, s)| s.map(|s| (l, s.count)))
                // Highest count; lower label wins ties.
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .ok_or(PerceptionError::NoTargetUnderSelection)?;
            let idx = label - 1;
            Ok(Selection {
                mode,
                resolved_bbox: rect,
                target_object_id: Some(frame.object_ids[idx].clone()),
                target_class: Some(frame.class_names[idx].clone()),
                confirmed: false,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackUpdate {
    pub bbox: PixelRect,
    /// Box center minus image center along u (px); positive = object right of center.
    pub x_error: f64,
    /// Median valid depth inside the box (m).
    pub distance: f64,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Oracle tracker: re-boxes the target's current label pixels with jitter.
pub fn track(
    target_object_id: &str,
    previous_bbox: &PixelRect,
    frame: &SensorFrame,
    jitter_px: f64,
    noise_seed: u64,
) -> Result<TrackUpdate, PerceptionError> {
    if previous_bbox.is_degenerate() {
        return Err(PerceptionError::DegenerateBox);
    }
    let label = frame.label_of(target_object_id).ok_or(PerceptionError::TrackLost)? as usize;
    let stats = label_stats(&frame.labels, None);
    let s = stats
        .get(label)
        .copied()
        .flatten()
        .filter(|s| s.count >= MIN_VISIBLE_PIXELS)
        .ok_or(PerceptionError::TrackLost)?;
    let mut rng = frame_rng(frame, noise_seed, 0x7C);
    let bbox = jitter_box(tight_box(&s), jitter_px, frame.labels.width, frame.labels.height, &mut rng);
    let (us, vs) = bbox.pixel_ranges(frame.depth.width, frame.depth.height);
    let mut depths: Vec<f64> = vs
        .flat_map(|v| us.clone().map(move |u| (u, v)))
        .map(|(u, v)| frame.depth.get(u, v))
        .filter(|d| *d > 0.0)
        .collect();
    let distance = median(&mut depths).ok_or(PerceptionError::TrackLost)?;
    let (cu, _) = bbox.center();
    Ok(TrackUpdate {
        bbox,
        x_error: cu - frame.intrinsics.image_center_u(),
        distance,
    })
}

/// Frozen inputs to the grasp pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspInput {
    pub labels: LabelImage,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
    pub mask_bbox: PixelRect,
    /// Gripper camera pose in the arm-base frame at capture time.
    pub camera_pose_base: Pose3,
    pub target_object_id: Option<String>,
    /// Label of the target in `labels`; when set, the mask keeps only its pixels.
    pub target_label: Option<u16>,
}

pub fn capture_grasp_input(
    frame: &SensorFrame,
    sel: &Selection,
    arm_model: &ArmModel,
    arm_joints: &JointState,
) -> Result<GraspInput, PerceptionError> {
    if !sel.confirmed {
        return Err(PerceptionError::SelectionNotConfirmed);
    }
    Ok(GraspInput {
        labels: frame.labels.clone(),
        depth: frame.depth.clone(),
        intrinsics: frame.intrinsics,
        mask_bbox: sel.resolved_bbox.clamp_to(frame.labels.width, frame.labels.height),
        camera_pose_base: arm::camera_pose(arm_model, arm_joints),
        target_object_id: sel.target_object_id.clone(),
        target_label: sel.target_object_id.as_deref().and_then(|id| frame.label_of(id)),
    })
}

/// Back-projects the pixels inside the selection box, restricted to the
/// target's segmentation label when it is known.
pub fn mask_cloud(gi: &GraspInput) -> Result<PointCloud, PerceptionError> {
    let cloud = backproject_region(&gi.depth, &gi.intrinsics, Some(&gi.mask_bbox))
        .map_err(|_| PerceptionError::EmptyMask)?;
    let (us, vs) = gi.mask_bbox.pixel_ranges(gi.depth.width, gi.depth.height);
    let labels: Vec<u16> = vs
        .flat_map(|v| us.clone().map(move |u| (u, v)))
        .filter(|&(u, v)| gi.depth.get(u, v) > 0.0)
        .map(|(u, v)| gi.labels.get(u, v))
        .collect();
    debug_assert_eq!(labels.len(), cloud.len());
    let (points, labels): (Vec<_>, Vec<_>) = cloud
        .points
        .into_iter()
        .zip(labels)
        .filter(|(_, l)| gi.target_label.is_none_or(|t| t == *l))
        .unzip();
    if points.is_empty() {
        return Err(PerceptionError::EmptyMask);
    }
    Ok(PointCloud {
        points,
        labels: Some(labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::world::{render::render_view, CameraId, SceneObject, Shape};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 120.0,
            fy: 120.0,
            cx: 40.0,
            cy: 30.0,
            width: 80,
            height: 60,
        }
    }

    fn object(id: &str, shape: Shape, at: Vec3) -> SceneObject {
        SceneObject {
            id: id.into(),
            class_name: format!("{id}_class"),
            shape,
            pose: Pose3::from_translation(at.x, at.y, at.z),
            mass: 0.1,
            slip_coefficient: 0.1,
            movable: true,
        }
    }

    fn frame(objects: &[SceneObject]) -> SensorFrame {
        let (labels, depth, projected_pixels) = render_view(objects, &k(), &Pose3::identity());
        SensorFrame {
            camera: CameraId::Gripper,
            labels,
            depth,
            object_ids: objects.iter().map(|o| o.id.clone()).collect(),
            class_names: objects.iter().map(|o| o.class_name.clone()).collect(),
            projected_pixels,
            intrinsics: k(),
            camera_pose_world: Pose3::identity(),
            tick: 0,
        }
    }

    fn brute_force_box(f: &SensorFrame, label: u16) -> Option<PixelRect> {
        let mut r: Option<PixelRect> = None;
        for v in 0..f.labels.height {
            for u in 0..f.labels.width {
                if f.labels.get(u, v) == label {
                    let p = PixelRect::new(u as f64, v as f64, u as f64 + 1.0, v as f64 + 1.0);
                    r = Some(match r {
                        None => p,
                        Some(q) => PixelRect::new(
                            q.u_min.min(p.u_min),
                            q.v_min.min(p.v_min),
                            q.u_max.max(p.u_max),
                            q.v_max.max(p.v_max),
                        ),
                    });
                }
            }
        }
        r
    }

    #[test]
    fn detect_empty_frame() {
        assert!(detect(&frame(&[]), 2.0, 1).is_empty());
    }

    #[test]
    fn detect_tight_box_without_jitter() {
        let f = frame(&[object("s", Shape::Sphere { radius: 0.05 }, Vec3::new(0.0, 0.0, 0.5))]);
        let d = detect(&f, 0.0, 1);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, brute_force_box(&f, 1).unwrap());
        assert_eq!(d[0].confidence, MAX_CONFIDENCE);
    }

    #[test]
    fn detect_drops_tiny_objects() {
        // ~10 px: a sphere of radius 0.0089 m at 0.5 m covers about π·(2.1)² px.
        let f = frame(&[object("tiny", Shape::Sphere { radius: 0.0075 }, Vec3::new(0.0, 0.0, 0.5))]);
        let visible = f.visible_pixels(1);
        assert!(visible > 0 && visible < MIN_VISIBLE_PIXELS, "{visible}");
        assert!(detect(&f, 0.0, 1).is_empty());
    }

    #[test]
    fn click_selection() {
        let f = frame(&[object("s", Shape::Sphere { radius: 0.05 }, Vec3::new(0.0, 0.0, 0.5))]);
        let d = detect(&f, 0.0, 1);
        let (cu, cv) = d[0].bbox.center();
        let sel = resolve_selection(SelectionMode::Click { u: cu, v: cv }, &d, &f).unwrap();
        assert!(sel.confirmed);
        assert_eq!(sel.target_object_id.as_deref(), Some("s"));
        assert_eq!(sel.resolved_bbox, d[0].bbox);
        assert_eq!(
            resolve_selection(SelectionMode::Click { u: 1.0, v: 1.0 }, &d, &f),
            Err(PerceptionError::NoTargetUnderSelection)
        );
    }

    #[test]
    fn click_overlap_picks_smallest_box() {
        let f = frame(&[
            object("big", Shape::Box { size: [0.3, 0.3, 0.05] }, Vec3::new(0.0, 0.0, 0.8)),
            object("small", Shape::Sphere { radius: 0.03 }, Vec3::new(0.0, 0.0, 0.4)),
        ]);
        let d = detect(&f, 0.0, 1);
        assert_eq!(d.len(), 2);
        let sel = resolve_selection(SelectionMode::Click { u: 40.0, v: 30.0 }, &d, &f).unwrap();
        assert_eq!(sel.target_object_id.as_deref(), Some("small"));
    }

    #[test]
    fn drag_targets_pixel_majority() {
        let f = frame(&[
            object("sphere", Shape::Sphere { radius: 0.1 }, Vec3::new(-0.1, 0.0, 0.6)),
            object("box", Shape::Box { size: [0.2, 0.2, 0.05] }, Vec3::new(0.15, 0.0, 0.6)),
        ]);
        // Count labels inside a rect independently and make the sphere the 60% majority.
        let rect = (10.0, 5.0, 62.0, 55.0);
        let mut counts = [0usize; 3];
        for v in 5..55 {
            for u in 10..62 {
                counts[f.labels.get(u, v) as usize] += 1;
            }
        }
        assert!(counts[1] > counts[2] && counts[2] > 0, "{counts:?}");
        let sel = resolve_selection(
            SelectionMode::Drag { u0: rect.2, v0: rect.3, u1: rect.0, v1: rect.1 },
            &[],
            &f,
        )
        .unwrap();
        assert!(!sel.confirmed);
        assert_eq!(sel.target_object_id.as_deref(), Some("sphere"));
        assert_eq!(sel.resolved_bbox, PixelRect::new(10.0, 5.0, 62.0, 55.0));
        let bg = resolve_selection(SelectionMode::Drag { u0: 0.0, v0: 0.0, u1: 3.0, v1: 3.0 }, &[], &f);
        assert_eq!(bg, Err(PerceptionError::NoTargetUnderSelection));
    }

    #[test]
    fn track_centered_object() {
        // Front face at 0.5 m.
        let f = frame(&[object("b", Shape::Box { size: [0.1, 0.1, 0.02] }, Vec3::new(0.0, 0.0, 0.51))]);
        let prev = PixelRect::new(0.0, 0.0, 10.0, 10.0);
        let t = track("b", &prev, &f, 0.0, 3).unwrap();
        // Pixel centers sit on integers, so a symmetric blob is centered half a pixel right.
        assert!(t.x_error.abs() <= 0.5, "{}", t.x_error);
        assert!((t.distance - 0.5).abs() < 1e-12, "{}", t.distance);
        let empty = frame(&[]);
        assert_eq!(track("s", &prev, &empty, 0.0, 3), Err(PerceptionError::TrackLost));
    }

    #[test]
    fn capture_requires_confirmation_and_masks() {
        let f = frame(&[object("s", Shape::Sphere { radius: 0.05 }, Vec3::new(0.0, 0.0, 0.5))]);
        let d = detect(&f, 0.0, 1);
        let m = ArmModel::default();
        let q = m.survey;
        let drag = resolve_selection(SelectionMode::Drag { u0: 20.0, v0: 10.0, u1: 60.0, v1: 50.0 }, &d, &f).unwrap();
        assert_eq!(capture_grasp_input(&f, &drag, &m, &q), Err(PerceptionError::SelectionNotConfirmed));
        let click = resolve_selection(SelectionMode::Click { u: 40.0, v: 30.0 }, &d, &f).unwrap();
        let gi = capture_grasp_input(&f, &click, &m, &q).unwrap();
        assert_eq!(gi.mask_bbox, d[0].bbox);
        let expect = crate::arm::fk(&m, &q).unwrap().compose(&m.camera_offset);
        assert!(gi.camera_pose_base.max_abs_diff(&expect) < 1e-15);
        let cloud = mask_cloud(&gi).unwrap();
        assert_eq!(cloud.len(), f.visible_pixels(1));
    }

    #[test]
    fn mask_cloud_single_pixel_and_empty() {
        let mut depth = DepthImage::filled(80, 60, 0.0);
        depth.set(40, 30, 0.4);
        let gi = GraspInput {
            labels: LabelImage::filled(80, 60, 0),
            depth,
            intrinsics: k(),
            mask_bbox: PixelRect::new(40.0, 30.0, 41.0, 31.0),
            camera_pose_base: Pose3::identity(),
            target_object_id: None,
            target_label: None,
        };
        let c = mask_cloud(&gi).unwrap();
        assert_eq!(c.points, vec![Vec3::new(0.0, 0.0, 0.4)]);
        let empty = GraspInput {
            depth: DepthImage::filled(80, 60, 0.0),
            mask_bbox: PixelRect::new(0.0, 0.0, 80.0, 60.0),
            ..gi
        };
        assert_eq!(mask_cloud(&empty), Err(PerceptionError::EmptyMask));
    }
}
