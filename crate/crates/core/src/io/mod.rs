//! File formats: PNG images, PLY/OBJ meshes, camera files, depth rasters
//! and scene directories.

pub mod cameras;
pub mod depth;
pub mod image;
pub mod obj;
pub mod ply;
pub mod scene;

pub use cameras::{format_cameras, parse_cameras, read_cameras, write_cameras};
pub use image::{decode_png, encode_png, read_image, write_image};
pub use scene::{load_scene, read_manifest, read_mesh, save_scene, Scene, SceneManifest, View};
