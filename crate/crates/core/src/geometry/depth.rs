use nalgebra::Vector3;
use rayon::prelude::*;

use super::bvh::{Bvh, Hit};
use super::camera::Camera;
use super::mesh::TriangleMesh;

/// Per-pixel depth along the camera z axis; `f64::INFINITY` marks misses.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Vec<f64>,
    camera: Camera,
}

impl DepthMap {
    pub fn new(values: Vec<f64>, camera: Camera) -> Self {
        assert_eq!(values.len(), camera.width() * camera.height());
        Self { values, camera }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width() + col]
    }

    pub fn finite_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }
}

/// Closest hit for every pixel-centre ray, row-major.
pub fn render_hits(bvh: &Bvh, camera: &Camera) -> Vec<Option<Hit>> {
    let (w, h) = (camera.width(), camera.height());
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (row, col) = (i / w, i % w);
            let (o, d) = camera.pixel_ray(col as f64 + 0.5, row as f64 + 0.5);
            bvh.closest_hit(&o, &d)
        })
        .collect()
}

pub fn render_depth_bvh(bvh: &Bvh, camera: &Camera) -> DepthMap {
    let values = render_hits(bvh, camera)
        .into_iter()
        .map(|h| h.map_or(f64::INFINITY, |h| h.t))
        .collect();
    DepthMap::new(values, camera.clone())
}

/// Depth of the nearest surface under every pixel centre.
pub fn render_depth(mesh: &TriangleMesh, camera: &Camera) -> DepthMap {
    render_depth_bvh(&Bvh::build(mesh), camera)
}

/// One world point per pixel, valid where the depth is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointSet {
    points: Vec<Vector3<f64>>,
    valid: Vec<bool>,
    width: usize,
    height: usize,
}

impl SurfacePointSet {
    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> Option<Vector3<f64>> {
        let i = row * self.width + col;
        self.valid[i].then(|| self.points[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Lifts every pixel centre to 3-D using its depth. Invalid entries hold NaN.
pub fn unproject(depth: &DepthMap, camera: &Camera) -> SurfacePointSet {
    let (w, h) = (camera.width(), camera.height());
    assert_eq!((w, h), (depth.width(), depth.height()), "depth map size differs from camera");
    let mut points = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for (i, &d) in depth.values().iter().enumerate() {
        if d.is_finite() {
            let (row, col) = (i / w, i % w);
            points.push(camera.unproject(col as f64 + 0.5, row as f64 + 0.5, d));
            valid.push(true);
        } else {
            points.push(Vector3::repeat(f64::NAN));
            valid.push(false);
        }
    }
    SurfacePointSet {
        points,
        valid,
        width: w,
        height: h,
    }
}
