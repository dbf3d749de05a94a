//! Scene setup and novel-view synthesis: target depth, unprojection,
//! per-point aggregation of source features, and the render stack.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, AggregatorConfig, RayBatch};
use crate::error::{Error, TensorError};
use crate::geometry::{render_depth_bvh, visible_sources, Bvh, Camera, DepthMap, RaySkeleton, TriangleMesh, DEFAULT_VIS_TOLERANCE};
use crate::io::write_image;
use crate::nn::{RenderConfig, RenderStack, UNet, UNetConfig};
use crate::tensor::{bilinear_lookup, ParamBinding, ParameterStore, Scalar, Tape, Tensor, Var};

/// Network and aggregation settings of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels `C` of the feature grids.
    pub feature_width: usize,
    /// `None` passes the RGB image through as a 3-channel feature grid.
    pub encoder: Option<UNetConfig>,
    pub aggregator: AggregatorConfig,
    /// `None` outputs `G` directly (3 channels).
    pub render: Option<RenderConfig>,
    pub vis_tolerance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let c = 32;
        Self {
            feature_width: c,
            encoder: Some(UNetConfig {
                in_channels: 3,
                base_width: 16,
                stages: 3,
                out_channels: c,
            }),
            aggregator: AggregatorConfig::default(),
            render: Some(RenderConfig {
                feature_width: c,
                stages: 3,
                base_width: 16,
                levels: 3,
            }),
            vis_tolerance: DEFAULT_VIS_TOLERANCE,
        }
    }
}

impl ModelConfig {
    /// Identity encoder and renderer with a weighted-mean aggregator over RGB.
    pub fn passthrough() -> Self {
        Self {
            feature_width: 3,
            encoder: None,
            aggregator: AggregatorConfig::new(crate::aggregate::Variant::WeightedMean, None, 3),
            render: None,
            vis_tolerance: DEFAULT_VIS_TOLERANCE,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let c = self.feature_width;
        let bad = |m: String| Err(Error::Config(m));
        match &self.encoder {
            Some(e) => {
                e.validate()?;
                if e.in_channels != 3 || e.out_channels != c {
                    return bad(format!("encoder must map 3 to {c} channels"));
                }
            }
            None if c != 3 => return bad(format!("identity encoder needs feature width 3, got {c}")),
            None => {}
        }
        match &self.render {
            Some(r) => {
                r.validate()?;
                if r.feature_width != c {
                    return bad(format!("render stack expects {} channels, features have {c}", r.feature_width));
                }
            }
            None if c != 3 => return bad(format!("identity renderer needs feature width 3, got {c}")),
            None => {}
        }
        if self.aggregator.feature_width != c {
            return bad(format!("aggregator width {} differs from feature width {c}", self.aggregator.feature_width));
        }
        self.aggregator.validate()?;
        if !(self.vis_tolerance > 0.0) {
            return bad(format!("visibility tolerance {} must be positive", self.vis_tolerance));
        }
        Ok(())
    }

    /// Image sizes must be divisible by this.
    pub fn multiple(&self) -> usize {
        let e = self.encoder.as_ref().map_or(1, UNetConfig::multiple);
        let r = self.render.as_ref().map_or(1, RenderConfig::multiple);
        e.max(r)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Option<UNet>,
    pub aggregator: Aggregator,
    pub render: Option<RenderStack>,
}

impl Model {
    pub const ENCODER: &'static str = "enc";
    pub const RENDER: &'static str = "render";

    pub fn new(config: ModelConfig) -> Result<Self, Error> {
        config.validate()?;
        Ok(Self {
            encoder: config.encoder.clone().map(|c| UNet::new(Self::ENCODER, c)),
            aggregator: Aggregator::new(config.aggregator.clone())?,
            render: config.render.clone().map(|c| RenderStack::new(Self::RENDER, c)),
            config,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParameterStore, Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        if let Some(e) = &self.encoder {
            e.init(&mut store, &mut rng, false)?;
        }
        self.aggregator.init(&mut store, &mut rng)?;
        if let Some(r) = &self.render {
            r.init(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    /// Checks that `params` holds every tensor this model reads.
    pub fn check_params(&self, params: &ParameterStore) -> Result<(), Error> {
        let fresh = self.init(0)?;
        for (name, t) in fresh.iter() {
            match params.get(name) {
                None => return Err(TensorError::MissingParam(name.to_string()).into()),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Feature grid `F = φ_enc(I)` of an H×W×3 image variable.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamBinding, image: Var) -> Result<Var, Error> {
        match &self.encoder {
            Some(e) => e.forward(tape, p, image),
            None => Ok(image),
        }
    }

    /// Image `O` from an H×W×C feature grid.
    pub fn render_features<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamBinding, g: Var) -> Result<Var, Error> {
        match &self.render {
            Some(r) => r.forward(tape, p, g),
            None => Ok(g),
        }
    }

    /// Full differentiable synthesis on `tape` from traced rays and source
    /// feature grids. Returns `(G, O)`.
    pub fn synthesize_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamBinding,
        trace: &TargetTrace,
        features: &[Var],
    ) -> Result<(Var, Var), Error> {
        let (h, w) = (trace.depth.height(), trace.depth.width());
        let f = gather_features(tape, &trace.batch, features)?;
        let rows = self.aggregator.forward(tape, p, &trace.batch, f)?;
        let g = tape.reshape(rows, &[h, w, self.config.feature_width])?;
        let o = self.render_features(tape, p, g)?;
        Ok((g, o))
    }
}

/// Rays of a target view: its depth map and, for every valid pixel in
/// raster order, the sources that see the pixel's surface point.
#[derive(Clone, Debug)]
pub struct TargetTrace {
    pub depth: DepthMap,
    pub batch: RayBatch,
}

/// Renders the target depth, unprojects valid pixels and collects visible
/// sources. Ray `sources` index into `source_depths`.
pub fn trace_target(bvh: &Bvh, camera: &Camera, source_depths: &[DepthMap], tolerance: f64) -> TargetTrace {
    let depth = render_depth_bvh(bvh, camera);
    let w = camera.width();
    let skeletons: Vec<Option<(crate::geometry::Vec3, RaySkeleton)>> = depth
        .values()
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            if !d.is_finite() {
                return None;
            }
            let x = camera.unproject((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, d);
            let u = camera.view_direction(&x).ok()?;
            Some((u, visible_sources(&x, source_depths, tolerance)))
        })
        .collect();
    let mut batch = RayBatch::new(depth.values().len());
    for (row, s) in skeletons.iter().enumerate() {
        if let Some((u, rays)) = s {
            batch.push(row, *u, rays);
        }
    }
    TargetTrace { depth, batch }
}

/// Samples every ray's source feature grid bilinearly; one row per ray.
pub fn gather_features<T: Scalar>(tape: &mut Tape<T>, batch: &RayBatch, features: &[Var]) -> Result<Var, Error> {
    let c = match features.first() {
        Some(&f) => tape.shape(f)[2],
        None if batch.num_rays() == 0 => return Ok(tape.constant(Tensor::zeros(&[0, 1]))),
        None => return Err(Error::Invalid("rays reference sources but no feature grids were given".into())),
    };
    if batch.num_rays() == 0 {
        return Ok(tape.constant(Tensor::zeros(&[0, c])));
    }
    let mut per_source: Vec<Vec<usize>> = vec![Vec::new(); features.len()];
    for (r, &k) in batch.sources.iter().enumerate() {
        per_source
            .get_mut(k)
            .ok_or_else(|| Error::Invalid(format!("ray references source {k} of {}", features.len())))?
            .push(r);
    }
    let mut parts = Vec::new();
    let mut order = vec![0; batch.num_rays()];
    let mut next = 0;
    for (k, rays) in per_source.iter().enumerate() {
        if rays.is_empty() {
            continue;
        }
        let coords = Tensor::from_fn(&[rays.len(), 2], |i| T::from_f64(batch.pixels[rays[i / 2]][i % 2]));
        let cv = tape.constant(coords);
        parts.push(tape.bilinear_sample(features[k], cv)?);
        for &r in rays {
            order[r] = next;
            next += 1;
        }
    }
    let stacked = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    Ok(tape.gather_rows(stacked, order)?)
}

/// Everything needed to synthesize new views of one scene.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
    pub cameras: Vec<Camera>,
    pub images: Vec<Tensor<f32>>,
    /// Encoded grids `F_n`, H×W×C.
    pub features: Vec<Tensor<f32>>,
    pub depths: Vec<DepthMap>,
}

impl SceneBundle {
    /// Assembles a bundle from precomputed features; depth buffers are
    /// rendered here.
    pub fn from_parts(
        mesh: TriangleMesh,
        cameras: Vec<Camera>,
        images: Vec<Tensor<f32>>,
        features: Vec<Tensor<f32>>,
    ) -> Result<Self, Error> {
        check_sources(&images, &cameras)?;
        if features.len() != images.len() {
            return Err(Error::Invalid(format!("{} feature grids for {} images", features.len(), images.len())));
        }
        for (f, i) in features.iter().zip(&images) {
            if f.shape().len() != 3 || f.shape()[..2] != i.shape()[..2] {
                return Err(Error::Invalid(format!("feature grid {:?} does not match image {:?}", f.shape(), i.shape())));
            }
        }
        let bvh = Bvh::build(&mesh);
        let depths = source_depths(&bvh, &cameras);
        Ok(Self {
            mesh,
            bvh,
            cameras,
            images,
            features,
            depths,
        })
    }

    /// Like [`SceneBundle::from_parts`] but with depth buffers already at hand.
    pub fn from_cached(
        mesh: TriangleMesh,
        cameras: Vec<Camera>,
        images: Vec<Tensor<f32>>,
        features: Vec<Tensor<f32>>,
        depths: Vec<Vec<f64>>,
    ) -> Result<Self, Error> {
        if depths.len() != cameras.len() {
            return Err(Error::Invalid(format!("{} depth buffers for {} cameras", depths.len(), cameras.len())));
        }
        for (k, (d, c)) in depths.iter().zip(&cameras).enumerate() {
            if d.len() != c.width() * c.height() {
                return Err(Error::Invalid(format!("depth buffer {k} has {} values for a {}x{} camera", d.len(), c.width(), c.height())));
            }
        }
        let mut b = Self::from_parts(TriangleMesh::empty(), cameras, images, features)?;
        b.bvh = Bvh::build(&mesh);
        b.mesh = mesh;
        b.depths = depths.into_iter().zip(&b.cameras).map(|(d, c)| DepthMap::new(d, c.clone())).collect();
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.features.first().map_or(0, |f| f.shape()[2])
    }

    /// Bilinear feature of source `k` at a continuous pixel coordinate.
    pub fn sample_source_feature(&self, k: usize, px: f64, py: f64) -> Vec<f32> {
        bilinear_lookup(&self.features[k], px as f32, py as f32)
    }
}

fn check_sources(images: &[Tensor<f32>], cameras: &[Camera]) -> Result<(), Error> {
    if images.is_empty() {
        return Err(Error::Invalid("scene setup needs at least one source image".into()));
    }
    if images.len() != cameras.len() {
        return Err(Error::Invalid(format!("{} images but {} cameras", images.len(), cameras.len())));
    }
    for (n, (img, cam)) in images.iter().zip(cameras).enumerate() {
        let s = img.shape();
        if s.len() != 3 || s[2] != 3 || s[0] != cam.height() || s[1] != cam.width() {
            return Err(Error::Invalid(format!(
                "source {n}: image {s:?} does not match camera {}x{}",
                cam.width(),
                cam.height()
            )));
        }
    }
    Ok(())
}

/// Depth buffers of every source camera.
pub fn source_depths(bvh: &Bvh, cameras: &[Camera]) -> Vec<DepthMap> {
    cameras.iter().map(|c| render_depth_bvh(bvh, c)).collect()
}

/// Encodes one image without recording gradients.
pub fn encode_image(model: &Model, params: &ParameterStore, image: &Tensor<f32>) -> Result<Tensor<f32>, Error> {
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, params, |_| false);
    let x = tape.constant(image.clone());
    let f = model.encode(&mut tape, &p, x)?;
    Ok(tape.value(f).clone())
}

/// Encodes every source image and renders every source depth buffer.
pub fn setup_scene(
    images: Vec<Tensor<f32>>,
    cameras: Vec<Camera>,
    mesh: TriangleMesh,
    model: &Model,
    params: &ParameterStore,
) -> Result<SceneBundle, Error> {
    check_sources(&images, &cameras)?;
    let features = images
        .iter()
        .map(|img| encode_image(model, params, img))
        .collect::<Result<Vec<_>, _>>()?;
    SceneBundle::from_parts(mesh, cameras, images, features)
}

/// A synthesized view with its intermediate products.
#[derive(Clone, Debug)]
pub struct Synthesis {
    /// H×W×3 output image.
    pub image: Tensor<f32>,
    /// H×W×C aggregated feature grid `G`.
    pub features: Tensor<f32>,
    pub depth: DepthMap,
    /// Number of contributing sources per pixel, raster order.
    pub counts: Vec<usize>,
}

/// Aggregated feature grid `G` only, without the render stack.
pub fn synthesize_features(
    bundle: &SceneBundle,
    model: &Model,
    params: &ParameterStore,
    camera: &Camera,
) -> Result<(Tensor<f32>, TargetTrace), Error> {
    let trace = trace_target(&bundle.bvh, camera, &bundle.depths, model.config.vis_tolerance);
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, params, |_| false);
    let feats = feature_constants(&mut tape, bundle);
    let f = gather_features(&mut tape, &trace.batch, &feats)?;
    let rows = model.aggregator.forward(&mut tape, &p, &trace.batch, f)?;
    let g = tape
        .value(rows)
        .clone()
        .reshape(&[camera.height(), camera.width(), model.config.feature_width])?;
    Ok((g, trace))
}

fn feature_constants(tape: &mut Tape<f32>, bundle: &SceneBundle) -> Vec<Var> {
    bundle.features.iter().map(|f| tape.constant(f.clone())).collect()
}

/// Synthesizes the view seen by `camera`.
pub fn synthesize_view(bundle: &SceneBundle, model: &Model, params: &ParameterStore, camera: &Camera) -> Result<Synthesis, Error> {
    if bundle.feature_width() != model.config.feature_width {
        return Err(Error::Config(format!(
            "bundle features have {} channels, model expects {}",
            bundle.feature_width(),
            model.config.feature_width
        )));
    }
    if let Some(r) = &model.config.render {
        r.unet_config(true).check_input(camera.height(), camera.width())?;
    }
    let trace = trace_target(&bundle.bvh, camera, &bundle.depths, model.config.vis_tolerance);
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, params, |_| false);
    let feats = feature_constants(&mut tape, bundle);
    let (g, o) = model.synthesize_on_tape(&mut tape, &p, &trace, &feats)?;
    Ok(Synthesis {
        image: tape.value(o).clone(),
        features: tape.value(g).clone(),
        counts: trace.batch.counts(),
        depth: trace.depth,
    })
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

/// Writes `frame_%06d.png` for each camera of a path.
pub fn render_path(
    bundle: &SceneBundle,
    model: &Model,
    params: &ParameterStore,
    cameras: &[Camera],
    dir: &Path,
) -> Result<Vec<PathBuf>, Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let out = synthesize_view(bundle, model, params, cam)?;
            let path = dir.join(frame_name(i));
            write_image(&path, &out.image)?;
            Ok(path)
        })
        .collect()
}
