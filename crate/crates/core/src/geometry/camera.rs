use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::GeometryError;

/// Pinhole camera with world-to-camera map `x_cam = R·x + t`.
///
/// Image coordinates are y-down with `(0.5, 0.5)` at the centre of the
/// top-left pixel, so pixel `(row, col)` has centre `(col + 0.5, row + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    width: usize,
    height: usize,
}

/// Result of projecting a point that lies in front of the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Camera-space z.
    pub depth: f64,
}

const ORTHO_TOL: f64 = 1e-6;

impl Camera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidCamera(m));
        if width == 0 || height == 0 {
            return bad(format!("image size {width}x{height}"));
        }
        if k[(2, 2)] != 1.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return bad("intrinsics must be upper triangular with K[2][2] = 1".into());
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return bad("focal lengths must be positive".into());
        }
        if k.iter().chain(r.iter()).chain(t.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        let rrt = r * r.transpose();
        if (rrt - Matrix3::identity()).abs().max() > ORTHO_TOL {
            return bad("rotation is not orthonormal".into());
        }
        if (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return bad("rotation determinant is not 1".into());
        }
        Ok(Self {
            k,
            r,
            t,
            width,
            height,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_intrinsics(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(k, r, t, width, height)
    }

    /// Camera at `position` looking at `target`.
    ///
    /// The camera z axis points at the target, the y axis points down along
    /// the component of `-up` orthogonal to z, and `x = y × z` completes a
    /// right-handed frame. The principal point is the image centre and
    /// `fy = fx = (height / 2) / tan(fov_y / 2)`.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let forward = target - position;
        if forward.norm() < 1e-12 {
            return Err(GeometryError::InvalidCamera("position equals look-at target".into()));
        }
        if !(fov_y_deg > 1.0 && fov_y_deg < 179.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "vertical field of view {fov_y_deg} outside (1, 179)"
            )));
        }
        let z = forward.normalize();
        let down = -(up - z * up.dot(&z));
        if down.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera("up hint parallel to view direction".into()));
        }
        let y = down.normalize();
        let x = y.cross(&z);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * position);
        let f = (height as f64 / 2.0) / (fov_y_deg.to_radians() / 2.0).tan();
        Self::from_intrinsics(f, f, width as f64 / 2.0, height as f64 / 2.0, r, t, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera centre in world coordinates, `-Rᵀ·t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    /// Projects a world point; `None` when it is not strictly in front of the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<Projection> {
        let xc = self.to_camera(x);
        if xc.z <= 0.0 {
            return None;
        }
        let h = self.k * xc;
        Some(Projection {
            pixel: Vector2::new(h.x / h.z, h.y / h.z),
            depth: xc.z,
        })
    }

    /// Whether a continuous pixel coordinate falls on the image.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// World-space ray through a continuous pixel coordinate. The direction is
    /// scaled so that its camera-space z component is one; the ray parameter is
    /// therefore the depth along the optical axis.
    pub fn pixel_ray(&self, px: f64, py: f64) -> (Vector3<f64>, Vector3<f64>) {
        let k = &self.k;
        let y = (py - k[(1, 2)]) / k[(1, 1)];
        let x = (px - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        (self.center(), self.r.transpose() * Vector3::new(x, y, 1.0))
    }

    /// Inverse of [`Camera::project`] for a given depth.
    pub fn unproject(&self, px: f64, py: f64, depth: f64) -> Vector3<f64> {
        let (o, d) = self.pixel_ray(px, py);
        o + d * depth
    }

    /// Unit vector from the camera centre toward `x`, world frame.
    pub fn view_direction(&self, x: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
        let d = x - self.center();
        let n = d.norm();
        if n < 1e-12 {
            return Err(GeometryError::DegenerateDirection);
        }
        Ok(d / n)
    }

    /// Same camera with the image resampled by `scale` (intrinsics scaled).
    pub fn scaled(&self, width: usize, height: usize) -> Result<Self, GeometryError> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut k = self.k;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] *= sx;
        k[(1, 1)] *= sy;
        k[(1, 2)] *= sy;
        Self::new(k, self.r, self.t, width, height)
    }

    /// The `width`×`height` sub-window whose top-left pixel is `(x0, y0)`.
    pub fn cropped(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self, GeometryError> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(GeometryError::InvalidCamera(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut k = self.k;
        k[(0, 2)] -= x0 as f64;
        k[(1, 2)] -= y0 as f64;
        Self::new(k, self.r, self.t, width, height)
    }
}

/// Free-function form of [`Camera::project`].
pub fn project_point(camera: &Camera, x: &Vector3<f64>) -> Option<Projection> {
    camera.project(x)
}

/// Free-function form of [`Camera::view_direction`].
pub fn view_direction(camera: &Camera, x: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    camera.view_direction(x)
}
