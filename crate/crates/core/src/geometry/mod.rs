//! Cameras, meshes, ray casting, depth maps and source visibility.

pub mod bvh;
pub mod camera;
pub mod depth;
pub mod mesh;
pub mod visibility;

pub use bvh::{brute_force_hit, Bvh, Hit};
pub use camera::{project_point, view_direction, Camera, Projection};
pub use depth::{render_depth, render_depth_bvh, render_hits, unproject, DepthMap, SurfacePointSet};
pub use mesh::TriangleMesh;
pub use visibility::{is_visible, visible_sources, RaySkeleton, DEFAULT_VIS_TOLERANCE};

pub type Vec3 = nalgebra::Vector3<f64>;
