//! Reference candidate provider: antipodal point pairs on the masked cloud.
//!
//! A single depth view rarely sees two opposing faces of a small object. When
//! the support plane is known the sampler closes the visible footprint with
//! synthetic walls: the convex hull of the cloud projected onto the plane,
//! raised to half the observed object height, with outward normals.

use std::collections::HashSet;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraspCandidate, GraspError, GraspProvider, GraspSet, ProviderContext};
use crate::geometry::{PointCloud, Pose3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportPlane {
    /// Unit normal pointing away from the floor.
    pub normal: Vec3,
    pub offset: f64,
}

impl SupportPlane {
    pub fn height(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub max_candidates: usize,
    pub min_points: usize,
    pub knn: usize,
    /// Pairs need `n_i · n_j` below minus this.
    pub min_opposition: f64,
    /// Both normals must be this aligned with the pair axis.
    pub min_axis_alignment: f64,
    pub min_width: f64,
    pub wall_spacing: f64,
    /// Wall height as a fraction of the object's observed height.
    pub wall_height_fraction: f64,
    /// Points lower than this above the support plane are ignored for the footprint (m).
    pub min_height: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_candidates: 256,
            min_points: 30,
            knn: 10,
            min_opposition: 0.8,
            min_axis_alignment: 0.9,
            min_width: 0.01,
            wall_spacing: 0.003,
            wall_height_fraction: 0.5,
            min_height: 0.002,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AntipodalSampler {
    pub config: SamplerConfig,
}

#[derive(Debug, Clone, Copy)]
struct Oriented {
    p: Vec3,
    n: Vec3,
    flatness: f64,
}

/// Per-point normal and flatness from a k-nearest-neighbor plane fit; normals
/// face the camera at the origin.
pub fn estimate_normals(points: &[Vec3], k: usize) -> Vec<(Vec3, f64)> {
    let k = k.min(points.len()).max(1);
    let mut d2: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    points
        .iter()
        .map(|p| {
            d2.clear();
            d2.extend(points.iter().enumerate().map(|(j, q)| ((q - p).norm_squared(), j)));
            d2.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nb = &d2[..k];
            let mean = nb.iter().map(|&(_, j)| points[j]).sum::<Vec3>() / k as f64;
            let mut cov = Matrix3::zeros();
            for &(_, j) in nb {
                let d = points[j] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let (imin, _) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("3 eigenvalues");
            let mut n = eig.eigenvectors.column(imin).into_owned();
            if n.dot(p) > 0.0 {
                n = -n;
            }
            let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
            let flatness = if total > 0.0 {
                (1.0 - 3.0 * eig.eigenvalues[imin].max(0.0) / total).clamp(0.0, 1.0)
            } else {
                1.0
            };
            (n, flatness)
        })
        .collect()
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain).
pub fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross2(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = (helper - n * n.dot(&helper)).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Synthetic wall points around the footprint of `points` on `plane`.
fn footprint_walls(points: &[Vec3], plane: &SupportPlane, cfg: &SamplerConfig) -> Vec<Oriented> {
    let n = plane.normal;
    let mut heights: Vec<f64> = points
        .iter()
        .map(|p| plane.height(p))
        .filter(|h| *h > cfg.min_height)
        .collect();
    if heights.len() < 3 {
        return Vec::new();
    }
    heights.sort_by(|a, b| a.total_cmp(b));
    // 95th percentile is robust to depth outliers.
    let top = heights[((heights.len() - 1) as f64 * 0.95).round() as usize];
    let wall_h = cfg.wall_height_fraction * top;
    let origin = -plane.offset * n;
    let (e1, e2) = plane_basis(&n);
    let footprint: Vec<[f64; 2]> = points
        .iter()
        .filter(|p| plane.height(p) > cfg.min_height)
        .map(|p| {
            let d = p - origin;
            [d.dot(&e1), d.dot(&e2)]
        })
        .collect();
    let hull = convex_hull(footprint);
    if hull.len() < 3 {
        return Vec::new();
    }
    let mut walls = Vec::new();
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = (dx * dx + dy * dy).sqrt();
        if len < 1e-9 {
            continue;
        }
        // Counter-clockwise hull: outward normal is the edge direction turned clockwise.
        let out2 = [dy / len, -dx / len];
        let normal = (e1 * out2[0] + e2 * out2[1]).normalize();
        let steps = (len / cfg.wall_spacing).ceil().max(1.0) as usize;
        for s in 0..steps {
            let t = (s as f64 + 0.5) / steps as f64;
            let q = [a[0] + dx * t, a[1] + dy * t];
            walls.push(Oriented {
                p: origin + e1 * q[0] + e2 * q[1] + n * wall_h,
                n: normal,
                flatness: 1.0,
            });
        }
    }
    walls
}

impl AntipodalSampler {
    pub fn new(config: SamplerConfig) -> Self {
        Self { config }
    }

    fn candidate(&self, a: &Oriented, b: &Oriented, max_opening: f64) -> Option<GraspCandidate> {
        let cfg = &self.config;
        let d = b.p - a.p;
        let sep = d.norm();
        if sep < cfg.min_width || sep > max_opening {
            return None;
        }
        if a.n.dot(&b.n) >= -cfg.min_opposition {
            return None;
        }
        let axis = d / sep;
        let antipodality = a.n.dot(&axis).abs().min(b.n.dot(&axis).abs());
        if antipodality < cfg.min_axis_alignment {
            return None;
        }
        let mid = (a.p + b.p) / 2.0;
        let orthogonal = |v: Vec3| {
            let w = v - axis * axis.dot(&v);
            let n = w.norm();
            (n > 0.3 * v.norm()).then(|| w / n)
        };
        // Approach along the view ray: the camera side is the unoccluded one.
        let approach = orthogonal(mid).or_else(|| orthogonal(-(a.n + b.n)))?;
        let third = approach.cross(&axis);
        let rotation = Matrix3::from_columns(&[approach, axis, third]);
        let flatness = (a.flatness + b.flatness) / 2.0;
        let score = (0.6 * antipodality + 0.4 * flatness).clamp(0.0, 1.0);
        Some(GraspCandidate {
            pose: Pose3::new(rotation, mid),
            width: sep,
            score,
        })
    }
}

impl GraspProvider for AntipodalSampler {
    fn id(&self) -> &str {
        "antipodal"
    }

    fn generate(&self, cloud: &PointCloud, ctx: &ProviderContext, seed: u64) -> Result<GraspSet, GraspError> {
        let cfg = &self.config;
        if cloud.len() < cfg.min_points {
            return Err(GraspError::NoCandidates(cloud.len()));
        }
        let centroid = cloud.centroid().expect("non-empty cloud");
        let normals = estimate_normals(&cloud.points, cfg.knn);
        let mut pts: Vec<Oriented> = cloud
            .points
            .iter()
            .zip(normals)
            .map(|(p, (n, flatness))| Oriented { p: *p, n, flatness })
            .collect();
        if let Some(plane) = &ctx.support_plane {
            pts.extend(footprint_walls(&cloud.points, plane, cfg));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.shuffle(&mut rng);
        let mut seen = HashSet::new();
        let mut candidates = Vec::new();
        let mut partners = Vec::new();
        for &i in &order {
            if candidates.len() >= cfg.max_candidates {
                break;
            }
            partners.clear();
            partners.extend(
                (0..pts.len()).filter_map(|j| {
                    (j != i && !seen.contains(&(i.min(j), i.max(j))))
                        .then(|| self.candidate(&pts[i], &pts[j], ctx.max_opening).map(|c| (j, c)))
                        .flatten()
                }),
            );
            if partners.is_empty() {
                continue;
            }
            // Best-scoring partner; the shuffled anchor order supplies the variety.
            let (j, c) = *partners
                .iter()
                .max_by(|a, b| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
                .expect("non-empty");
            seen.insert((i.min(j), i.max(j)));
            candidates.push(c);
        }
        Ok(GraspSet {
            candidates,
            source: self.id().to_string(),
            object_centroid_camera: centroid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_pair(gap: f64) -> PointCloud {
        // Two planes x = ±gap/2, seen edge-on from the origin.
        let mut points = Vec::new();
        for side in [-1.0, 1.0] {
            for i in 0..8 {
                for j in 0..8 {
                    points.push(Vec3::new(side * gap / 2.0, -0.02 + 0.005 * i as f64, 0.30 + 0.005 * j as f64));
                }
            }
        }
        PointCloud { points, labels: None }
    }

    fn ctx() -> ProviderContext {
        ProviderContext {
            max_opening: 0.07,
            support_plane: None,
        }
    }

    #[test]
    fn sparse_cloud_rejected() {
        let cloud = PointCloud {
            points: (0..10).map(|i| Vec3::new(0.0, 0.0, 0.3 + i as f64 * 0.001)).collect(),
            labels: None,
        };
        assert_eq!(
            AntipodalSampler::default().generate(&cloud, &ctx(), 1),
            Err(GraspError::NoCandidates(10))
        );
    }

    #[test]
    fn parallel_planes_close_across_the_gap() {
        let gs = AntipodalSampler::default().generate(&plane_pair(0.04), &ctx(), 3).unwrap();
        assert!(!gs.candidates.is_empty());
        assert!(gs.candidates.iter().all(|c| c.width <= 0.07));
        let top = crate::grasp::filter_stage1_topk(&gs, 5);
        for c in &top.candidates {
            let closing = c.pose.axis(1);
            assert!(closing.x.abs() > 5f64.to_radians().cos(), "{closing:?}");
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let s = AntipodalSampler::default();
        let a = s.generate(&plane_pair(0.04), &ctx(), 9).unwrap();
        let b = s.generate(&plane_pair(0.04), &ctx(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hull_of_square() {
        let h = convex_hull(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]);
        assert_eq!(h.len(), 4);
        let area: f64 = (0..4).map(|i| cross2([0.0, 0.0], h[i], h[(i + 1) % 4])).sum::<f64>() / 2.0;
        assert!((area - 1.0).abs() < 1e-12);
    }
}
