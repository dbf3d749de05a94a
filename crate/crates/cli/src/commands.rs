use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use svs_core::ablation::{run_ablation, AblationConfig, AblationRow};
use svs_core::cache::{cache_is_fresh, cache_path, load_cached_bundle, setup_with_cache, SetupOutcome};
use svs_core::eval::{evaluate_scene, MetricReport};
use svs_core::io::{encode_png, load_scene, Scene};
use svs_core::pipeline::{render_path, setup_scene, synthesize_view, Model, SceneBundle};
use svs_core::pose::{parse_pose_path, PoseQuery, SceneInfo};
use svs_core::synthetic::{generate_synthetic_scene, SyntheticSceneSpec};
use svs_core::tensor::ParameterStore;
use svs_core::train::{refined_sources, train, Checkpoint, Regime, TrainConfig, TrainReport, TrainingScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fixture {
    Diffuse,
    Specular,
    Exposure,
}

impl Fixture {
    pub fn spec(self) -> SyntheticSceneSpec {
        match self {
            Fixture::Diffuse => SyntheticSceneSpec::fixture(),
            Fixture::Specular => SyntheticSceneSpec::specular_fixture(),
            Fixture::Exposure => SyntheticSceneSpec::exposure_fixture(),
        }
    }
}

pub fn generate(dir: &Path, fixture: Fixture) -> Result<Scene> {
    Ok(generate_synthetic_scene(&fixture.spec(), dir)?)
}

pub fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::parse(&text, p)?)
        }
    }
}

/// Writes freshly initialized weights for the model in `config`.
pub fn init_checkpoint(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<Checkpoint> {
    let cfg = read_config(config)?;
    let model = Model::new(cfg.model.clone())?;
    let ck = Checkpoint {
        config: cfg.model,
        iteration: 0,
        params: model.init(seed.unwrap_or(cfg.seed))?,
    };
    ck.save(out)?;
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let model = Model::new(ck.config.clone())?;
    Ok((model, ck))
}

/// An immutable scene ready for synthesis.
pub struct Loaded {
    pub scene: Scene,
    pub model: Model,
    pub params: ParameterStore,
    pub bundle: SceneBundle,
    pub info: SceneInfo,
}

impl Loaded {
    pub fn check_pose(&self, pose: &PoseQuery) -> Result<()> {
        pose.validate()?;
        let m = self.model.config.multiple();
        if pose.width % m != 0 || pose.height % m != 0 {
            bail!("{}x{} is not a multiple of {m}", pose.width, pose.height);
        }
        Ok(())
    }

    pub fn render_png(&self, pose: &PoseQuery) -> Result<Vec<u8>> {
        self.check_pose(pose)?;
        let cam = pose.to_camera()?;
        let out = synthesize_view(&self.bundle, &self.model, &self.params, &cam)?;
        Ok(encode_png(&out.image)?)
    }
}

fn loaded(scene: Scene, model: Model, params: ParameterStore, bundle: SceneBundle) -> Result<Loaded> {
    let info = SceneInfo::new(&scene.name, &scene.mesh, &bundle.cameras)?;
    Ok(Loaded {
        scene,
        model,
        params,
        bundle,
        info,
    })
}

/// Scene setup: encodes the sources and writes the feature cache, or
/// reuses a cache that is newer than the scene and matches the checkpoint.
pub fn setup(scene_dir: &Path, ckpt: &Path) -> Result<(Loaded, SetupOutcome)> {
    let mut scene = load_scene(scene_dir)?;
    let (model, ck) = load_checkpoint(ckpt)?;
    refine(&mut scene, &ck.params);
    let (bundle, outcome) = setup_with_cache(scene_dir, &scene, &model, &ck.params, &ck.digest())?;
    Ok((loaded(scene, model, ck.params, bundle)?, outcome))
}

fn refine(scene: &mut Scene, params: &ParameterStore) {
    let images = refined_sources(params, scene.images());
    for (v, img) in scene.sources.iter_mut().zip(images) {
        v.image = img;
    }
}

/// Opens a scene whose setup has already run.
pub fn open(scene_dir: &Path, ckpt: &Path) -> Result<Loaded> {
    let mut scene = load_scene(scene_dir)?;
    let (model, ck) = load_checkpoint(ckpt)?;
    refine(&mut scene, &ck.params);
    let digest = ck.digest();
    if !cache_is_fresh(scene_dir, &digest) {
        bail!(
            "no usable feature cache at {} for this checkpoint; run `svs setup` first",
            cache_path(scene_dir).display()
        );
    }
    let bundle = load_cached_bundle(scene_dir, &scene, &digest)?;
    loaded(scene, model, ck.params, bundle)
}

/// `--pose` takes inline JSON or a path to a JSON file.
pub fn read_pose(arg: &str) -> Result<PoseQuery> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading pose file {arg}"))?
    };
    Ok(PoseQuery::from_json(text.trim())?)
}

pub fn render(scene_dir: &Path, ckpt: &Path, pose: &PoseQuery, out: &Path) -> Result<()> {
    let l = open(scene_dir, ckpt)?;
    let png = l.render_png(pose)?;
    std::fs::write(out, png).with_context(|| format!("writing {}", out.display()))
}

pub fn render_poses(scene_dir: &Path, ckpt: &Path, path_file: &Path, outdir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path_file).with_context(|| format!("reading {}", path_file.display()))?;
    let poses = parse_pose_path(&text, path_file)?;
    let l = open(scene_dir, ckpt)?;
    for p in &poses {
        l.check_pose(p)?;
    }
    let cams = poses.iter().map(PoseQuery::to_camera).collect::<Result<Vec<_>, _>>()?;
    Ok(render_path(&l.bundle, &l.model, &l.params, &cams, outdir)?)
}

fn training_scenes(dirs: &[PathBuf]) -> Result<Vec<TrainingScene>> {
    dirs.iter()
        .map(|d| {
            let s = load_scene(d)?;
            Ok(TrainingScene::from_scene(&s)?)
        })
        .collect()
}

pub fn train_scenes(scenes: &[PathBuf], config: Option<&Path>, out: &Path, iters: Option<usize>) -> Result<TrainReport> {
    let mut cfg = read_config(config)?;
    cfg.regime = Regime::SceneAgnostic;
    if iters.is_some() {
        cfg.iterations = iters;
    }
    let ts = training_scenes(scenes)?;
    Ok(train(&ts, None, &cfg, Some(out))?)
}

pub fn finetune(
    scene: &Path,
    regime: Regime,
    ckpt: &Path,
    config: Option<&Path>,
    out: &Path,
    iters: Option<usize>,
) -> Result<TrainReport> {
    if regime == Regime::SceneAgnostic {
        bail!("finetune takes --regime network or scene");
    }
    let (_, ck) = load_checkpoint(ckpt)?;
    // The checkpoint fixes the architecture; the config only sets training knobs.
    let mut cfg = read_config(config)?;
    cfg.model = ck.config;
    cfg.regime = regime;
    if iters.is_some() {
        cfg.iterations = iters;
    }
    let ts = training_scenes(&[scene.to_path_buf()])?;
    Ok(train(&ts, Some(ck.params), &cfg, Some(out))?)
}

pub fn evaluate(scene_dir: &Path, ckpt: &Path) -> Result<MetricReport> {
    let mut scene = load_scene(scene_dir)?;
    if scene.heldout.is_empty() {
        bail!("{} has no held-out views", scene_dir.display());
    }
    let (model, ck) = load_checkpoint(ckpt)?;
    refine(&mut scene, &ck.params);
    let bundle = setup_scene(scene.images(), scene.cameras(), scene.mesh.clone(), &model, &ck.params)?;
    Ok(evaluate_scene(&bundle, &scene.heldout, &model, &ck.params)?)
}

pub fn ablate(
    scene_dir: &Path,
    config: Option<&Path>,
    iterations: usize,
    finetune_iterations: usize,
    pretrained: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let scene = load_scene(scene_dir)?;
    let mut base = read_config(config)?;
    let pre = match pretrained {
        Some(p) => {
            let (_, ck) = load_checkpoint(p)?;
            base.model = ck.config;
            Some(ck.params)
        }
        None => None,
    };
    let cfg = AblationConfig::new(base, iterations, finetune_iterations);
    Ok(run_ablation(&scene, &cfg, pre.as_ref())?)
}

pub fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn last_checkpoint(report: &TrainReport) -> Result<&Path> {
    report.checkpoints.last().map(PathBuf::as_path).ok_or_else(|| anyhow!("training wrote no checkpoint"))
}
