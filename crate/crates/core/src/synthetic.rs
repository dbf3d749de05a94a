//! Procedural fixture scenes: a textured ground plane, a box and a sphere,
//! ray cast from a ring of cameras looking at the scene centre.

use std::path::Path;

use nalgebra::Vector3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Error;
use crate::geometry::{Bvh, Camera, TriangleMesh, Vec3};
use crate::io::{save_scene, Scene, View};
use crate::tensor::Tensor;

const SKY: [f32; 3] = [0.62, 0.72, 0.86];
const AMBIENT: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    /// Soft 3D checkerboard with the given cell size.
    Checker(f64),
    /// Smooth value noise with the given lattice spacing.
    Noise(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Square in the y = 0 plane, centred at the origin.
    Ground { half_extent: f64, cells: usize },
    Cuboid { min: Vec3, max: Vec3 },
    Sphere { center: Vec3, radius: f64, segments: usize, rings: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub sources: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Held-out cameras sit on the same ring, halfway between two sources.
    pub heldout: usize,
    /// Camera ring height offset of the held-out views, in degrees of elevation.
    pub heldout_elevation_offset_deg: f64,
    pub look_at: Vec3,
    /// Strength of a view-dependent specular lobe; zero keeps shading diffuse.
    pub specular: f64,
    /// Multiplies the brightness of one source image.
    pub exposure: Option<(usize, f32)>,
    /// Supersampling factor per axis for antialiasing.
    pub supersample: usize,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// Diffuse fixture: 8 sources at 64×64 plus 2 held-out views.
    pub fn fixture() -> Self {
        Self {
            name: "fixture".into(),
            primitives: vec![
                Primitive {
                    shape: Shape::Ground { half_extent: 1.6, cells: 8 },
                    texture: Texture::Noise(0.35),
                },
                Primitive {
                    shape: Shape::Cuboid {
                        min: Vector3::new(-0.75, 0.0, -0.3),
                        max: Vector3::new(-0.15, 0.6, 0.3),
                    },
                    texture: Texture::Checker(0.15),
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: Vector3::new(0.5, 0.32, 0.1),
                        radius: 0.32,
                        segments: 20,
                        rings: 12,
                    },
                    texture: Texture::Noise(0.18),
                },
            ],
            sources: 8,
            radius: 3.0,
            elevation_deg: 30.0,
            fov_deg: 45.0,
            width: 64,
            height: 64,
            heldout: 2,
            heldout_elevation_offset_deg: 5.0,
            look_at: Vector3::new(0.0, 0.25, 0.0),
            specular: 0.0,
            exposure: None,
            supersample: 2,
            seed: 7,
        }
    }

    /// The fixture with a specular highlight, so appearance depends on view.
    pub fn specular_fixture() -> Self {
        Self {
            name: "fixture-specular".into(),
            specular: 0.6,
            ..Self::fixture()
        }
    }

    /// The fixture with source 1 rendered 35% brighter.
    pub fn exposure_fixture() -> Self {
        Self {
            name: "fixture-exposure".into(),
            exposure: Some((1, 1.35)),
            ..Self::fixture()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sources < 2 {
            return bad(format!("a synthetic scene needs at least 2 sources, got {}", self.sources));
        }
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            return bad("image size and supersampling must be positive".into());
        }
        if !(self.radius > 0.0) || !(-89.0..=89.0).contains(&self.elevation_deg) {
            return bad("camera ring needs a positive radius and elevation in [-89, 89]".into());
        }
        if let Some((k, f)) = self.exposure {
            if k >= self.sources || !(f > 0.0) {
                return bad(format!("exposure perturbation ({k}, {f}) is invalid"));
            }
        }
        if self.primitives.is_empty() {
            return bad("no primitives".into());
        }
        Ok(())
    }

    fn ring_camera(&self, azimuth_deg: f64, elevation_deg: f64) -> Result<Camera, Error> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let pos = self.look_at + self.radius * Vector3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
        Ok(Camera::look_at(
            pos,
            self.look_at,
            Vector3::y(),
            self.fov_deg,
            self.width,
            self.height,
        )?)
    }

    pub fn source_cameras(&self) -> Result<Vec<Camera>, Error> {
        let step = 360.0 / self.sources as f64;
        (0..self.sources)
            .map(|i| self.ring_camera(i as f64 * step, self.elevation_deg))
            .collect()
    }

    /// Held-out cameras spread evenly around the ring at source midpoints.
    pub fn heldout_cameras(&self) -> Result<Vec<Camera>, Error> {
        let step = 360.0 / self.sources as f64;
        (0..self.heldout)
            .map(|j| {
                let slot = j * self.sources / self.heldout.max(1);
                let az = (slot as f64 + 0.5) * step;
                self.ring_camera(az, self.elevation_deg + self.heldout_elevation_offset_deg)
            })
            .collect()
    }
}

/// Seeded appearance of one primitive.
#[derive(Clone, Debug)]
struct Material {
    texture: Texture,
    colors: [Vector3<f64>; 2],
    lattice_seed: u64,
    origin: Vec3,
}

impl Material {
    fn albedo(&self, p: &Vec3) -> Vector3<f64> {
        let t = match self.texture {
            Texture::Checker(s) => {
                let q = (p - self.origin) / s + Vector3::repeat(0.5);
                let prod = (q.x * std::f64::consts::PI).sin()
                    * (q.y * std::f64::consts::PI).sin()
                    * (q.z * std::f64::consts::PI).sin();
                0.5 + 0.5 * (4.0 * prod).clamp(-1.0, 1.0)
            }
            Texture::Noise(s) => value_noise(self.lattice_seed, &((p - self.origin) / s)),
        };
        self.colors[0] * (1.0 - t) + self.colors[1] * t
    }
}

fn hash3(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinearly interpolated lattice noise with smoothstep easing, in [0, 1].
fn value_noise(seed: u64, p: &Vec3) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let ease = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (bx, by, bz) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [dx, dy, dz]
            .iter()
            .zip(ease.iter())
            .map(|(&d, &e)| if d == 1 { e } else { 1.0 - e })
            .product::<f64>();
        acc += w * hash3(seed, bx + dx as i64, by + dy as i64, bz + dz as i64);
    }
    acc
}

struct Builder {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    owner: Vec<usize>,
}

impl Builder {
    fn quad(&mut self, prim: usize, corners: [Vec3; 4]) {
        let b = self.vertices.len() as u32;
        self.vertices.extend(corners);
        self.triangles.push([b, b + 1, b + 2]);
        self.triangles.push([b, b + 2, b + 3]);
        self.owner.extend([prim, prim]);
    }

    fn add(&mut self, prim: usize, shape: &Shape) {
        match *shape {
            Shape::Ground { half_extent, cells } => {
                let step = 2.0 * half_extent / cells as f64;
                for i in 0..cells {
                    for j in 0..cells {
                        let x0 = -half_extent + i as f64 * step;
                        let z0 = -half_extent + j as f64 * step;
                        let p = |x: f64, z: f64| Vector3::new(x, 0.0, z);
                        self.quad(
                            prim,
                            [p(x0, z0), p(x0, z0 + step), p(x0 + step, z0 + step), p(x0 + step, z0)],
                        );
                    }
                }
            }
            Shape::Cuboid { min, max } => {
                let c = |i: usize| {
                    Vector3::new(
                        if i & 1 == 0 { min.x } else { max.x },
                        if i & 2 == 0 { min.y } else { max.y },
                        if i & 4 == 0 { min.z } else { max.z },
                    )
                };
                for face in [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]] {
                    self.quad(prim, face.map(c));
                }
            }
            Shape::Sphere {
                center,
                radius,
                segments,
                rings,
            } => {
                let point = |ring: usize, seg: usize| {
                    let theta = std::f64::consts::PI * ring as f64 / rings as f64;
                    let phi = 2.0 * std::f64::consts::PI * seg as f64 / segments as f64;
                    center + radius * Vector3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin())
                };
                for ring in 0..rings {
                    for seg in 0..segments {
                        let next = (seg + 1) % segments;
                        let b = self.vertices.len() as u32;
                        if ring == 0 {
                            self.vertices.extend([point(0, 0), point(1, next), point(1, seg)]);
                            self.triangles.push([b, b + 1, b + 2]);
                            self.owner.push(prim);
                        } else if ring + 1 == rings {
                            self.vertices.extend([point(ring, seg), point(ring, next), point(rings, 0)]);
                            self.triangles.push([b, b + 1, b + 2]);
                            self.owner.push(prim);
                        } else {
                            self.quad(
                                prim,
                                [point(ring, seg), point(ring, next), point(ring + 1, next), point(ring + 1, seg)],
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Ray-castable fixture geometry with materials.
pub struct SyntheticScene {
    spec: SyntheticSceneSpec,
    mesh: TriangleMesh,
    bvh: Bvh,
    owner: Vec<usize>,
    materials: Vec<Material>,
}

impl SyntheticScene {
    pub fn new(spec: SyntheticSceneSpec) -> Result<Self, Error> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut b = Builder {
            vertices: Vec::new(),
            triangles: Vec::new(),
            owner: Vec::new(),
        };
        let mut materials = Vec::new();
        let mut vertex_owner = Vec::new();
        for (i, prim) in spec.primitives.iter().enumerate() {
            let start = b.vertices.len();
            b.add(i, &prim.shape);
            vertex_owner.resize(vertex_owner.len() + b.vertices.len() - start, i);
            let mut color = || Vector3::new(rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95));
            let colors = [color(), color()];
            let origin = match prim.shape {
                Shape::Cuboid { min, .. } => min,
                _ => Vector3::zeros(),
            };
            materials.push(Material {
                texture: prim.texture,
                colors,
                lattice_seed: rng.random(),
                origin,
            });
        }
        let vertex_colors = b
            .vertices
            .iter()
            .zip(&vertex_owner)
            .map(|(p, &m)| {
                let a = materials[m].albedo(p);
                [a.x as f32, a.y as f32, a.z as f32]
            })
            .collect();
        let expected = b.triangles.len();
        let mesh = TriangleMesh::new(b.vertices, b.triangles, Some(vertex_colors))?;
        if mesh.triangles().len() != expected {
            return Err(Error::Invalid("synthetic primitive produced a degenerate triangle".into()));
        }
        let bvh = Bvh::build(&mesh);
        Ok(Self {
            spec,
            mesh,
            bvh,
            owner: b.owner,
            materials,
        })
    }

    pub fn spec(&self) -> &SyntheticSceneSpec {
        &self.spec
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    fn light(&self) -> Vec3 {
        Vector3::new(0.4, 1.0, 0.3).normalize()
    }

    fn normal(&self, tri: usize, p: &Vec3) -> Vec3 {
        match self.spec.primitives[self.owner[tri]].shape {
            Shape::Sphere { center, .. } => (p - center).normalize(),
            _ => {
                let [a, b, c] = self.mesh.triangle(tri);
                (b - a).cross(&(c - a)).normalize()
            }
        }
    }

    /// Radiance along one ray; the sky colour on a miss.
    fn shade(&self, origin: &Vec3, dir: &Vec3) -> Vector3<f64> {
        let Some(hit) = self.bvh.closest_hit(origin, dir) else {
            return Vector3::new(SKY[0] as f64, SKY[1] as f64, SKY[2] as f64);
        };
        let [a, b, c] = self.mesh.triangle(hit.triangle);
        let p = a * (1.0 - hit.u - hit.v) + b * hit.u + c * hit.v;
        let albedo = self.materials[self.owner[hit.triangle]].albedo(&p);
        let view = dir.normalize();
        let mut n = self.normal(hit.triangle, &p);
        if n.dot(&view) > 0.0 {
            n = -n;
        }
        let l = self.light();
        let mut color = albedo * (AMBIENT + (1.0 - AMBIENT) * n.dot(&l).max(0.0));
        if self.spec.specular > 0.0 {
            let r = 2.0 * n.dot(&l) * n - l;
            color += Vector3::repeat(self.spec.specular * r.dot(&-view).max(0.0).powi(24));
        }
        color
    }

    /// Ground-truth image seen by `camera`.
    pub fn render(&self, camera: &Camera) -> Tensor<f32> {
        let (w, h, s) = (camera.width(), camera.height(), self.spec.supersample);
        let pixels: Vec<[f32; 3]> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (row, col) = (i / w, i % w);
                let mut acc = Vector3::zeros();
                for sy in 0..s {
                    for sx in 0..s {
                        let px = col as f64 + (sx as f64 + 0.5) / s as f64;
                        let py = row as f64 + (sy as f64 + 0.5) / s as f64;
                        let (o, d) = camera.pixel_ray(px, py);
                        acc += self.shade(&o, &d);
                    }
                }
                let c = acc / (s * s) as f64;
                [c.x as f32, c.y as f32, c.z as f32]
            })
            .collect();
        Tensor::from_fn(&[h, w, 3], |i| pixels[i / 3][i % 3].clamp(0.0, 1.0))
    }

    pub fn build(&self) -> Result<Scene, Error> {
        let mut sources: Vec<View> = self
            .spec
            .source_cameras()?
            .into_iter()
            .map(|camera| View {
                image: self.render(&camera),
                camera,
            })
            .collect();
        if let Some((k, f)) = self.spec.exposure {
            sources[k].image = sources[k].image.map(|v| (v * f).clamp(0.0, 1.0));
        }
        let heldout = self
            .spec
            .heldout_cameras()?
            .into_iter()
            .map(|camera| View {
                image: self.render(&camera),
                camera,
            })
            .collect();
        Ok(Scene {
            name: self.spec.name.clone(),
            mesh: self.mesh.clone(),
            sources,
            heldout,
        })
    }
}

/// Builds the scene in memory.
pub fn build_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<Scene, Error> {
    SyntheticScene::new(spec.clone())?.build()
}

/// Builds the scene and writes it as a scene directory.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec, dir: &Path) -> Result<Scene, Error> {
    let scene = build_synthetic_scene(spec)?;
    save_scene(dir, &scene)?;
    Ok(scene)
}
