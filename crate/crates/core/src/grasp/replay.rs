//! Candidate sets exported by an external tool, stored as JSON lines: a
//! header `{intrinsics, centroid}` followed by one record per candidate.

use serde::{Deserialize, Serialize};

use super::{GraspCandidate, GraspError, GraspProvider, GraspSet, ProviderContext};
use crate::geometry::{CameraIntrinsics, PointCloud, Pose3, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayHeader {
    pub intrinsics: CameraIntrinsics,
    pub centroid: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRecord {
    pub translation: [f64; 3],
    /// Row-major.
    pub rotation: [f64; 9],
    pub width: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayFile {
    pub header: ReplayHeader,
    pub records: Vec<ReplayRecord>,
}

impl ReplayRecord {
    pub fn from_candidate(c: &GraspCandidate) -> Self {
        let r = &c.pose.rotation;
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        let t = c.pose.translation;
        Self {
            translation: [t.x, t.y, t.z],
            rotation,
            width: c.width,
            score: c.score,
        }
    }

    pub fn to_candidate(&self) -> GraspCandidate {
        let [tx, ty, tz] = self.translation;
        GraspCandidate {
            pose: Pose3::new(nalgebra::Matrix3::from_row_slice(&self.rotation), Vec3::new(tx, ty, tz)),
            width: self.width,
            score: self.score,
        }
    }
}

impl ReplayFile {
    pub fn from_set(gs: &GraspSet, intrinsics: CameraIntrinsics) -> Self {
        let c = gs.object_centroid_camera;
        Self {
            header: ReplayHeader {
                intrinsics,
                centroid: [c.x, c.y, c.z],
            },
            records: gs.candidates.iter().map(ReplayRecord::from_candidate).collect(),
        }
    }

    pub fn to_set(&self) -> GraspSet {
        let [x, y, z] = self.header.centroid;
        GraspSet {
            candidates: self.records.iter().map(ReplayRecord::to_candidate).collect(),
            source: "replay".into(),
            object_centroid_camera: Vec3::new(x, y, z),
        }
    }
}

pub fn write_replay(file: &ReplayFile) -> String {
    let mut out = serde_json::to_string(&file.header).expect("header serializes");
    out.push('\n');
    for r in &file.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_replay(text: &str) -> Result<ReplayFile, GraspError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| GraspError::Replay("missing header".into()))?;
    let header: ReplayHeader =
        serde_json::from_str(first).map_err(|e| GraspError::Replay(format!("line 1: {e}")))?;
    let records = lines
        .map(|(i, l)| {
            let r: ReplayRecord =
                serde_json::from_str(l).map_err(|e| GraspError::Replay(format!("line {}: {e}", i + 1)))?;
            if !(r.score >= 0.0 && r.score <= 1.0 && r.width > 0.0) {
                return Err(GraspError::Replay(format!("line {}: score or width out of range", i + 1)));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReplayFile { header, records })
}

/// Serves a stored candidate set regardless of the cloud.
#[derive(Debug, Clone)]
pub struct ReplayProvider {
    pub file: ReplayFile,
}

impl ReplayProvider {
    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self, GraspError> {
        let text = std::fs::read_to_string(path).map_err(|e| GraspError::Replay(e.to_string()))?;
        Ok(Self {
            file: read_replay(&text)?,
        })
    }
}

impl GraspProvider for ReplayProvider {
    fn id(&self) -> &str {
        "replay"
    }

    fn generate(&self, _cloud: &PointCloud, _ctx: &ProviderContext, _seed: u64) -> Result<GraspSet, GraspError> {
        Ok(self.file.to_set())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_x, rot_z};

    fn fixture() -> ReplayFile {
        let candidates = (0..7)
            .map(|i| GraspCandidate {
                pose: Pose3::new(rot_z(0.1 * i as f64) * rot_x(1.0 / 3.0), Vec3::new(0.1 / 3.0, -0.2 * i as f64, 0.3)),
                width: 0.01 + 0.003 * i as f64,
                score: 1.0 / (i as f64 + 1.5),
            })
            .collect();
        let gs = GraspSet {
            candidates,
            source: "x".into(),
            object_centroid_camera: Vec3::new(0.01, 0.02, 0.3333333333333333),
        };
        ReplayFile::from_set(
            &gs,
            CameraIntrinsics {
                fx: 260.0,
                fy: 260.0,
                cx: 160.0,
                cy: 120.0,
                width: 320,
                height: 240,
            },
        )
    }

    #[test]
    fn write_read_write_is_identical() {
        let text = write_replay(&fixture());
        let back = read_replay(&text).unwrap();
        assert_eq!(back, fixture());
        assert_eq!(write_replay(&back), text);
    }

    #[test]
    fn candidates_survive_conversion() {
        let f = fixture();
        let set = f.to_set();
        assert_eq!(ReplayFile::from_set(&set, f.header.intrinsics), f);
    }

    #[test]
    fn rejects_bad_records() {
        let mut text = write_replay(&fixture());
        text.push_str("{\"translation\":[0,0,0]}\n");
        assert!(matches!(read_replay(&text), Err(GraspError::Replay(_))));
        assert!(matches!(read_replay(""), Err(GraspError::Replay(_))));
    }
}
