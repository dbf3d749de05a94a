//! Human-friendly render requests and scene summaries for the render service.
//!
//! A [`PoseQuery`] is the JSON body of `POST /render`:
//!
//! ```json
//! {"position": [0, 1.5, 3], "target": [0, 0.25, 0], "up": [0, 1, 0],
//!  "fov_deg": 45, "width": 64, "height": 64}
//! ```
//!
//! `up` defaults to `+y`. The camera follows [`Camera::look_at`]: z towards
//! the target, image y pointing down, right-handed.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{Camera, TriangleMesh};

/// Largest width or height a query may ask for.
pub const MAX_QUERY_SIZE: usize = 1024;

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseQuery {
    pub position: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl PoseQuery {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        let q: PoseQuery = serde_json::from_str(text).map_err(|e| Error::Invalid(format!("pose: {e}")))?;
        q.validate()?;
        Ok(q)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pose serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let all = self.position.iter().chain(&self.target).chain(&self.up).chain([&self.fov_deg]);
        if !all.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("pose has non-finite values".into()));
        }
        if self.position == self.target {
            return Err(Error::Invalid("pose position equals its target".into()));
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 179.0) {
            return Err(Error::Invalid(format!("fov_deg {} outside (1, 179)", self.fov_deg)));
        }
        for (what, v) in [("width", self.width), ("height", self.height)] {
            if v == 0 || v > MAX_QUERY_SIZE {
                return Err(Error::Invalid(format!("{what} {v} outside 1..={MAX_QUERY_SIZE}")));
            }
        }
        Ok(())
    }

    pub fn to_camera(&self) -> Result<Camera, Error> {
        self.validate()?;
        Ok(Camera::look_at(
            Vector3::from(self.position),
            Vector3::from(self.target),
            Vector3::from(self.up),
            self.fov_deg,
            self.width,
            self.height,
        )?)
    }

    /// Pose on a sphere around `center`: azimuth about +y measured from +z,
    /// elevation above the xz-plane, looking at the centre with up = +y.
    pub fn orbit(center: [f64; 3], radius: f64, azimuth_deg: f64, elevation_deg: f64, fov_deg: f64, width: usize, height: usize) -> Self {
        let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let offset = [radius * e.cos() * a.sin(), radius * e.sin(), radius * e.cos() * a.cos()];
        PoseQuery {
            position: [center[0] + offset[0], center[1] + offset[1], center[2] + offset[2]],
            target: center,
            up: default_up(),
            fov_deg,
            width,
            height,
        }
    }
}

/// Camera path files hold one JSON pose per line; blank lines and `#`
/// comments are skipped.
pub fn parse_pose_path(text: &str, path: &Path) -> Result<Vec<PoseQuery>, Error> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let q = PoseQuery::from_json(line).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        out.push(q);
    }
    if out.is_empty() {
        return Err(Error::parse(path, 0, "camera path has no poses"));
    }
    Ok(out)
}

pub fn format_pose_path(poses: &[PoseQuery]) -> String {
    poses.iter().map(|p| p.to_json() + "\n").collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Body of `GET /scene-info`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub name: String,
    pub bounds: Bounds,
    pub orbit_center: [f64; 3],
    pub orbit_radius: f64,
    pub num_sources: usize,
    pub width: usize,
    pub height: usize,
}

impl SceneInfo {
    /// Orbit centre is the middle of the mesh bounds, radius the mean
    /// distance of the source cameras from it.
    pub fn new(name: &str, mesh: &TriangleMesh, cameras: &[Camera]) -> Result<Self, Error> {
        let first = cameras.first().ok_or_else(|| Error::Invalid("scene has no cameras".into()))?;
        let (lo, hi) = match mesh.bounds() {
            Some(b) => b,
            None => {
                let c = cameras.iter().map(|c| c.center()).sum::<Vector3<f64>>() / cameras.len() as f64;
                (c, c)
            }
        };
        let center = (lo + hi) / 2.0;
        let radius = cameras.iter().map(|c| (c.center() - center).norm()).sum::<f64>() / cameras.len() as f64;
        Ok(SceneInfo {
            name: name.to_string(),
            bounds: Bounds {
                min: lo.into(),
                max: hi.into(),
            },
            orbit_center: center.into(),
            orbit_radius: radius,
            num_sources: cameras.len(),
            width: first.width(),
            height: first.height(),
        })
    }
}
