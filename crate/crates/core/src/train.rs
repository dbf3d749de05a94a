//! Image loss with a random-filter perceptual surrogate, Adam, and the three
//! training regimes: scene-agnostic, network fine-tuning and scene
//! fine-tuning with a pool of trainable source images.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::aggregate::{Pool, Variant};
use crate::error::{Error, TensorError};
use crate::geometry::{Bvh, Camera, DepthMap, TriangleMesh};
use crate::io::Scene;
use crate::nn::he_normal;
use crate::pipeline::{source_depths, trace_target, Model, ModelConfig};
use crate::tensor::{ParamBinding, ParameterStore, Scalar, Tape, Tensor, Var};

/// Seed of the frozen perceptual filter bank.
pub const LOSS_BANK_SEED: u64 = 0x5EED_F117;

/// Three frozen random 3×3 convolution layers (16, 32 and 64 filters) with
/// ReLU, applied in cascade at strides 1, 2 and 2, so the feature maps sit
/// at 1, 1/2 and 1/4 of the image resolution.
#[derive(Clone, Debug)]
pub struct PerceptualBank {
    weights: Vec<Tensor<f32>>,
}

impl PerceptualBank {
    pub const WIDTHS: [usize; 3] = [16, 32, 64];
    pub const STRIDES: [usize; 3] = [1, 2, 2];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = Self::WIDTHS
            .iter()
            .map(|&cout| {
                let w = he_normal(&mut rng, &[3, 3, cin, cout], 9 * cin);
                cin = cout;
                w
            })
            .collect();
        Self { weights }
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>, TensorError> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut h = image;
        for (w, &stride) in self.weights.iter().zip(&Self::STRIDES) {
            let wv = tape.constant(w.cast());
            let y = tape.conv2d(h, wv, stride)?;
            h = tape.relu(y);
            out.push(h);
        }
        Ok(out)
    }
}

impl Default for PerceptualBank {
    fn default() -> Self {
        Self::new(LOSS_BANK_SEED)
    }
}

fn mean_abs_diff<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean_all(d))
}

/// `mean|O − I| + Σ_l λ_l · mean|φ_l(O) − φ_l(I)|` on a tape.
pub fn image_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bank: &PerceptualBank,
    output: Var,
    target: Var,
    lambdas: &[f64],
) -> Result<Var, Error> {
    if tape.shape(output) != tape.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "loss_image",
            lhs: tape.shape(output).to_vec(),
            rhs: tape.shape(target).to_vec(),
        }
        .into());
    }
    if lambdas.len() != bank.layers() {
        return Err(Error::Config(format!("{} loss weights for {} layers", lambdas.len(), bank.layers())));
    }
    let mut loss = mean_abs_diff(tape, output, target)?;
    let fo = bank.features(tape, output)?;
    let ft = bank.features(tape, target)?;
    for ((a, b), &l) in fo.into_iter().zip(ft).zip(lambdas) {
        let term = mean_abs_diff(tape, a, b)?;
        let term = tape.scale(term, T::from_f64(l));
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Loss value of an output image against a target.
pub fn loss_image(output: &Tensor<f32>, target: &Tensor<f32>, lambdas: &[f64]) -> Result<f64, Error> {
    let mut tape = Tape::<f64>::new();
    let o = tape.constant(output.cast());
    let t = tape.constant(target.cast());
    let l = image_loss_on_tape(&mut tape, &PerceptualBank::default(), o, t, lambdas)?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.9999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Bias-corrected Adam with per-parameter moments and step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// Step count of `name`, zero before its first update.
    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.t)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.v.as_slice())
    }

    /// Updates every entry of `store` that has a gradient in `grads`.
    /// Names in `required` must have one.
    pub fn step<'a>(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor<f32>>,
        required: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), TensorError> {
        for name in required {
            if !grads.contains_key(name) {
                return Err(TensorError::MissingGradient(name.to_string()));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| TensorError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            for (((x, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                let gi = gi as f64;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *x = (*x as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    SceneAgnostic,
    NetworkFt,
    SceneFt,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::SceneAgnostic => "scene-agnostic",
            Regime::NetworkFt => "network-ft",
            Regime::SceneFt => "scene-ft",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "scene-agnostic" | "agnostic" => Ok(Regime::SceneAgnostic),
            "network-ft" | "network" => Ok(Regime::NetworkFt),
            "scene-ft" | "scene" => Ok(Regime::SceneFt),
            _ => Err(Error::Config(format!(
                "unknown regime `{s}` (expected scene-agnostic, network-ft or scene-ft)"
            ))),
        }
    }
}

/// Network fine-tuning budget for a scene with `n` source images.
pub fn finetune_budget(n: usize) -> usize {
    256 * n
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    /// `None` means 2000 for scene-agnostic training and `256 · N` for
    /// fine-tuning.
    pub iterations: Option<usize>,
    /// Sources `M` per step.
    pub sources_per_step: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub lambdas: Vec<f64>,
    pub ckpt_every: usize,
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::SceneAgnostic,
            iterations: None,
            sources_per_step: 3,
            adam: AdamConfig::default(),
            seed: 0,
            lambdas: vec![1.0; PerceptualBank::WIDTHS.len()],
            ckpt_every: 500,
            log_every: 100,
            model: ModelConfig::default(),
        }
    }
}

pub const DEFAULT_ITERATIONS: usize = 2000;

impl TrainConfig {
    pub fn iterations_for(&self, sources: usize) -> usize {
        self.iterations.unwrap_or(match self.regime {
            Regime::SceneAgnostic => DEFAULT_ITERATIONS,
            _ => finetune_budget(sources),
        })
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sources_per_step == 0 {
            return bad("M must be at least 1".into());
        }
        if self.iterations == Some(0) {
            return bad("iters must be at least 1".into());
        }
        if self.ckpt_every == 0 {
            return bad("ckpt_every must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if self.lambdas.len() != PerceptualBank::WIDTHS.len() || self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return bad(format!("lambda_l needs {} non-negative values", PerceptualBank::WIDTHS.len()));
        }
        self.model.validate()
    }

    /// Parses a `key = value` run configuration; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self, Error> {
        let mut c = Self::default();
        let mut width = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(path, n + 1, m);
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key = value`".into()))?;
            c.apply(key, value, &mut width).map_err(|e| err(e.to_string()))?;
        }
        if let Some(w) = width {
            c.set_feature_width(w);
        }
        c.validate().map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(c)
    }

    fn set_feature_width(&mut self, w: usize) {
        let m = &mut self.model;
        m.feature_width = w;
        m.aggregator.feature_width = w;
        if let Some(e) = &mut m.encoder {
            e.out_channels = w;
        }
        if let Some(r) = &mut m.render {
            r.feature_width = w;
        }
    }

    fn apply(&mut self, key: &str, value: &str, width: &mut Option<usize>) -> Result<(), Error> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
        }
        fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, Error> {
            value.split(',').map(|v| num(key, v.trim())).collect()
        }
        let missing_net = |what: &str| Error::Config(format!("`{key}` needs a {what}, which this config disables"));
        let m = &mut self.model;
        match key {
            "regime" => self.regime = value.parse()?,
            "iters" => self.iterations = Some(num(key, value)?),
            "M" => self.sources_per_step = num(key, value)?,
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "eps" => self.adam.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lambda_l" => {
                let l: Vec<f64> = list(key, value)?;
                self.lambdas = if l.len() == 1 { vec![l[0]; PerceptualBank::WIDTHS.len()] } else { l };
            }
            "ckpt_every" => self.ckpt_every = num(key, value)?,
            "log_every" => self.log_every = num::<usize>(key, value)?.max(1),
            "features" => *width = Some(num(key, value)?),
            "vis_tolerance" => m.vis_tolerance = num(key, value)?,
            "aggregator.variant" => {
                m.aggregator.variant = value.parse::<Variant>()?;
                if m.aggregator.variant.uses_pool() {
                    m.aggregator.pool.get_or_insert(Pool::Mean);
                } else {
                    m.aggregator.pool = None;
                }
            }
            "aggregator.pool" => m.aggregator.pool = Some(value.parse::<Pool>()?),
            "aggregator.mlp_hidden" => m.aggregator.mlp_hidden = list(key, value)?,
            "aggregator.gat_heads" => m.aggregator.gat_heads = num(key, value)?,
            "aggregator.gat_layers" => m.aggregator.gat_layers = num(key, value)?,
            "aggregator.gat_slope" => m.aggregator.gat_slope = num(key, value)?,
            "render.stages" => m.render.as_mut().ok_or_else(|| missing_net("render stack"))?.stages = num(key, value)?,
            "render.base_width" => {
                m.render.as_mut().ok_or_else(|| missing_net("render stack"))?.base_width = num(key, value)?
            }
            "render.levels" => m.render.as_mut().ok_or_else(|| missing_net("render stack"))?.levels = num(key, value)?,
            "encoder.base_width" => {
                m.encoder.as_mut().ok_or_else(|| missing_net("encoder"))?.base_width = num(key, value)?
            }
            "encoder.levels" => m.encoder.as_mut().ok_or_else(|| missing_net("encoder"))?.stages = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn format(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            format!("regime = {}", self.regime),
            format!("M = {}", self.sources_per_step),
            format!("lr = {:?}", self.adam.lr),
            format!("beta1 = {:?}", self.adam.beta1),
            format!("beta2 = {:?}", self.adam.beta2),
            format!("eps = {:?}", self.adam.eps),
            format!("seed = {}", self.seed),
            format!(
                "lambda_l = {}",
                self.lambdas.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(",")
            ),
            format!("ckpt_every = {}", self.ckpt_every),
            format!("log_every = {}", self.log_every),
            format!("features = {}", m.feature_width),
            format!("vis_tolerance = {:?}", m.vis_tolerance),
            format!("aggregator.variant = {}", m.aggregator.variant),
        ];
        if let Some(i) = self.iterations {
            lines.push(format!("iters = {i}"));
        }
        if let Some(p) = m.aggregator.pool {
            lines.push(format!("aggregator.pool = {p}"));
        }
        lines.push(format!(
            "aggregator.mlp_hidden = {}",
            m.aggregator.mlp_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!("aggregator.gat_heads = {}", m.aggregator.gat_heads));
        lines.push(format!("aggregator.gat_layers = {}", m.aggregator.gat_layers));
        lines.push(format!("aggregator.gat_slope = {:?}", m.aggregator.gat_slope));
        if let Some(r) = &m.render {
            lines.push(format!("render.stages = {}", r.stages));
            lines.push(format!("render.base_width = {}", r.base_width));
            lines.push(format!("render.levels = {}", r.levels));
        }
        if let Some(e) = &m.encoder {
            lines.push(format!("encoder.base_width = {}", e.base_width));
            lines.push(format!("encoder.levels = {}", e.stages));
        }
        lines.join("\n") + "\n"
    }
}

/// A scene prepared for training: source depth buffers are rendered once.
#[derive(Clone, Debug)]
pub struct TrainingScene {
    pub name: String,
    pub bvh: Bvh,
    pub cameras: Vec<Camera>,
    pub images: Vec<Tensor<f32>>,
    pub depths: Vec<DepthMap>,
}

impl TrainingScene {
    pub fn new(name: &str, mesh: &TriangleMesh, cameras: Vec<Camera>, images: Vec<Tensor<f32>>) -> Result<Self, Error> {
        if cameras.len() != images.len() {
            return Err(Error::Invalid(format!("{} images but {} cameras", images.len(), cameras.len())));
        }
        let bvh = Bvh::build(mesh);
        let depths = source_depths(&bvh, &cameras);
        Ok(Self {
            name: name.to_string(),
            bvh,
            cameras,
            images,
            depths,
        })
    }

    pub fn from_scene(scene: &Scene) -> Result<Self, Error> {
        Self::new(&scene.name, &scene.mesh, scene.cameras(), scene.images())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

pub fn sha256(t: &Tensor<f32>) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Trainable copies `θ_imgs` of the source images, next to the untouched
/// originals.
#[derive(Clone, Debug)]
pub struct MutableImagePool {
    originals: Vec<Tensor<f32>>,
    pub entries: ParameterStore,
}

impl MutableImagePool {
    pub const PREFIX: &'static str = "imgs";

    pub fn new(originals: Vec<Tensor<f32>>) -> Self {
        let mut entries = ParameterStore::new();
        for (k, img) in originals.iter().enumerate() {
            entries.set(Self::name(k), img.clone());
        }
        Self { originals, entries }
    }

    pub fn name(k: usize) -> String {
        format!("{}.{k:04}", Self::PREFIX)
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn entry(&self, k: usize) -> &Tensor<f32> {
        self.entries.get(&Self::name(k)).expect("pool entry")
    }

    pub fn original(&self, k: usize) -> &Tensor<f32> {
        &self.originals[k]
    }

    pub fn original_checksums(&self) -> Vec<[u8; 32]> {
        self.originals.iter().map(sha256).collect()
    }

    /// Weights plus pool entries, as stored in a scene fine-tuning checkpoint.
    pub fn merged_with(&self, params: &ParameterStore) -> ParameterStore {
        let mut s = params.clone();
        s.extend(&self.entries);
        s
    }
}

/// Source images with any refined pool entry from `params` substituted.
pub fn refined_sources(params: &ParameterStore, mut images: Vec<Tensor<f32>>) -> Vec<Tensor<f32>> {
    for (k, img) in images.iter_mut().enumerate() {
        if let Some(t) = params.get(&MutableImagePool::name(k)) {
            if t.shape() == img.shape() {
                *img = t.clone();
            }
        }
    }
    images
}

/// Which images one step used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSample {
    pub scene: usize,
    pub target: usize,
    pub sources: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ParameterStore,
    pub pool: Option<MutableImagePool>,
    pub losses: Vec<f64>,
    pub samples: Vec<StepSample>,
    pub checkpoints: Vec<PathBuf>,
}

/// Picks a target and `m` distinct other sources, in ascending order.
pub fn sample_step(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (usize, Vec<usize>) {
    let target = rng.random_range(0..n);
    let mut sources: Vec<usize> = index::sample(rng, n - 1, m)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect();
    sources.sort_unstable();
    (target, sources)
}

/// One optimization step; returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    params: &mut ParameterStore,
    pool: Option<&mut MutableImagePool>,
    opt: &mut OptimizerState,
    bank: &PerceptualBank,
    lambdas: &[f64],
    scene: &TrainingScene,
    target: usize,
    sources: &[usize],
) -> Result<f64, Error> {
    if sources.contains(&target) {
        return Err(Error::Invalid(format!("target {target} is among its own sources")));
    }
    let depths: Vec<DepthMap> = sources.iter().map(|&k| scene.depths[k].clone()).collect();
    let trace = trace_target(&scene.bvh, &scene.cameras[target], &depths, model.config.vis_tolerance);
    let mut tape = Tape::<f32>::new();
    let binding = ParamBinding::bind(&mut tape, params, |_| true);
    let mut pool_vars = Vec::new();
    let mut feats = Vec::with_capacity(sources.len());
    for &k in sources {
        let img = match &pool {
            Some(p) => {
                let v = tape.param(p.entry(k).clone());
                pool_vars.push((MutableImagePool::name(k), v));
                v
            }
            None => tape.constant(scene.images[k].clone()),
        };
        feats.push(model.encode(&mut tape, &binding, img)?);
    }
    let (_, out) = model.synthesize_on_tape(&mut tape, &binding, &trace, &feats)?;
    let truth = tape.constant(scene.images[target].clone());
    let loss = image_loss_on_tape(&mut tape, bank, out, truth, lambdas)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let net: BTreeMap<String, Tensor<f32>> = binding
        .iter()
        .map(|(name, v)| (name.to_string(), grads.wrt(&tape, v)))
        .collect();
    opt.step(params, &net, binding.iter().map(|(n, _)| n))?;
    if let Some(p) = pool {
        let g: BTreeMap<String, Tensor<f32>> = pool_vars
            .into_iter()
            .filter_map(|(name, v)| grads.get(v).map(|g| (name, g.clone())))
            .collect();
        opt.step(&mut p.entries, &g, std::iter::empty())?;
    }
    Ok(value)
}

/// Runs `config.regime` over `scenes` starting from `init` (fresh weights
/// from `config.seed` when `None`). Checkpoints go to `ckpt_dir` every
/// `ckpt_every` iterations and at the end.
pub fn train(
    scenes: &[TrainingScene],
    init: Option<ParameterStore>,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport, Error> {
    config.validate()?;
    let model = Model::new(config.model.clone())?;
    let m = config.sources_per_step;
    let usable: Vec<usize> = scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let ok = s.len() > m;
            if !ok {
                log::warn!("skipping scene `{}`: {} images, need at least {}", s.name, s.len(), m + 1);
            }
            ok
        })
        .map(|(i, _)| i)
        .collect();
    if usable.is_empty() {
        return Err(Error::Invalid(format!("no scene has the {} images a step needs", m + 1)));
    }
    if config.regime != Regime::SceneAgnostic && scenes.len() != 1 {
        return Err(Error::Invalid(format!("{} fine-tunes exactly one scene", config.regime)));
    }
    let mut params = match init {
        Some(p) => {
            model.check_params(&p)?;
            p
        }
        None => model.init(config.seed)?,
    };
    let mut pool = (config.regime == Regime::SceneFt).then(|| MutableImagePool::new(scenes[0].images.clone()));
    let iterations = config.iterations_for(scenes[usable[0]].len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7A11_0000);
    let mut opt = OptimizerState::new(config.adam);
    let bank = PerceptualBank::default();
    let mut report = TrainReport {
        params: ParameterStore::new(),
        pool: None,
        losses: Vec::with_capacity(iterations),
        samples: Vec::with_capacity(iterations),
        checkpoints: Vec::new(),
    };
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for it in 1..=iterations {
        let si = usable[rng.random_range(0..usable.len())];
        let scene = &scenes[si];
        let (target, sources) = sample_step(&mut rng, scene.len(), m);
        let loss = train_step(&model, &mut params, pool.as_mut(), &mut opt, &bank, &config.lambdas, scene, target, &sources)?;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("loss became {loss} at iteration {it}")));
        }
        report.losses.push(loss);
        report.samples.push(StepSample {
            scene: si,
            target,
            sources,
        });
        if it % config.log_every == 0 {
            let window = &report.losses[report.losses.len().saturating_sub(config.log_every)..];
            log::info!(
                "[{}] iteration {it}/{iterations}: mean loss {:.5}",
                config.regime,
                window.iter().sum::<f64>() / window.len() as f64
            );
        }
        if let Some(dir) = ckpt_dir {
            if it % config.ckpt_every == 0 || it == iterations {
                let path = dir.join(checkpoint_name(it));
                Checkpoint {
                    config: config.model.clone(),
                    iteration: it,
                    params: checkpoint_store(&params, pool.as_ref()),
                }
                .save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    report.params = params;
    report.pool = pool;
    Ok(report)
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:06}.svs")
}

fn checkpoint_store(params: &ParameterStore, pool: Option<&MutableImagePool>) -> ParameterStore {
    match pool {
        Some(p) => p.merged_with(params),
        None => params.clone(),
    }
}

pub fn train_scene_agnostic(scenes: &[TrainingScene], config: &TrainConfig, ckpt_dir: Option<&Path>) -> Result<TrainReport, Error> {
    let c = TrainConfig {
        regime: Regime::SceneAgnostic,
        ..config.clone()
    };
    train(scenes, None, &c, ckpt_dir)
}

pub fn finetune_network(
    scene: &TrainingScene,
    params: ParameterStore,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport, Error> {
    let c = TrainConfig {
        regime: Regime::NetworkFt,
        ..config.clone()
    };
    train(std::slice::from_ref(scene), Some(params), &c, ckpt_dir)
}

pub fn finetune_scene(
    scene: &TrainingScene,
    params: ParameterStore,
    config: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainReport, Error> {
    let c = TrainConfig {
        regime: Regime::SceneFt,
        ..config.clone()
    };
    train(std::slice::from_ref(scene), Some(params), &c, ckpt_dir)
}

/// Model configuration plus weights, as written to disk.
///
/// ```text
/// magic      8 bytes  "SVSMODEL"
/// version    u32      1
/// iteration  u64
/// json_len   u32
/// config     json_len bytes of JSON
/// params     parameter container (see `tensor::params`)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: usize,
    pub params: ParameterStore,
}

pub const MODEL_MAGIC: &[u8; 8] = b"SVSMODEL";

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.params.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, Error> {
        let bad = |m: &str| Error::Invalid(format!("checkpoint: {m}"));
        if bytes.len() < 24 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != 1 {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let iteration = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let json = bytes.get(24..24 + len).ok_or_else(|| bad("truncated config"))?;
        let config: ModelConfig = serde_json::from_slice(json).map_err(|e| bad(&format!("config: {e}")))?;
        config.validate()?;
        let params = ParameterStore::decode(&bytes[24 + len..])?;
        let model = Model::new(config.clone())?;
        model.check_params(&params)?;
        Ok(Self {
            config,
            iteration: usize::try_from(iteration).map_err(|_| bad("iteration overflow"))?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn digest(&self) -> String {
        Sha256::digest(self.encode()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
