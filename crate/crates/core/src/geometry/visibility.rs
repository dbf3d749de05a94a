use nalgebra::{Vector2, Vector3};

use super::depth::DepthMap;

/// Default relative depth tolerance of the visibility test.
pub const DEFAULT_VIS_TOLERANCE: f64 = 0.01;

/// Source views that see a point, with directions but no features yet.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySkeleton {
    pub indices: Vec<usize>,
    /// Unit vectors from each source centre toward the point.
    pub directions: Vec<Vector3<f64>>,
    /// Continuous pixel coordinate of the point in each source.
    pub pixels: Vec<Vector2<f64>>,
}

impl RaySkeleton {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Pixel whose centre is nearest to a continuous coordinate.
pub fn nearest_pixel(pixel: &Vector2<f64>) -> (usize, usize) {
    (pixel.y.floor() as usize, pixel.x.floor() as usize)
}

/// Tests one source: in front, on the image, and within `tolerance · z` of
/// the source depth buffer at the nearest pixel.
pub fn is_visible(x: &Vector3<f64>, source: &DepthMap, tolerance: f64) -> Option<Vector2<f64>> {
    let cam = source.camera();
    let proj = cam.project(x)?;
    if !cam.contains(&proj.pixel) {
        return None;
    }
    let (row, col) = nearest_pixel(&proj.pixel);
    let d = source.at(row, col);
    ((proj.depth - d).abs() <= tolerance * proj.depth).then_some(proj.pixel)
}

/// Sources in which `x` is visible, in ascending source order.
pub fn visible_sources(x: &Vector3<f64>, sources: &[DepthMap], tolerance: f64) -> RaySkeleton {
    let mut out = RaySkeleton::default();
    for (k, src) in sources.iter().enumerate() {
        if let Some(pixel) = is_visible(x, src, tolerance) {
            let Ok(dir) = src.camera().view_direction(x) else {
                continue;
            };
            out.indices.push(k);
            out.directions.push(dir);
            out.pixels.push(pixel);
        }
    }
    out
}
