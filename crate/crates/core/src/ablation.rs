//! Ablation runs over aggregator variant, render stage count and
//! fine-tuning regime, scored on a scene's held-out views.

use std::fmt::Write as _;

use crate::aggregate::{AggregatorConfig, Variant};
use crate::error::Error;
use crate::eval::{evaluate_scene, MetricReport};
use crate::io::Scene;
use crate::pipeline::{setup_scene, Model, ModelConfig};
use crate::tensor::ParameterStore;
use crate::train::{
    finetune_network, finetune_scene, refined_sources, train_scene_agnostic, Regime, TrainConfig, TrainingScene,
};

#[derive(Clone, Debug)]
pub struct AblationConfig {
    /// Settings shared by every run; each axis overrides one field.
    pub base: TrainConfig,
    /// Scene-agnostic iterations per aggregator and stage-count run.
    pub iterations: usize,
    /// Iterations per fine-tuning run.
    pub finetune_iterations: usize,
    pub variants: Vec<Variant>,
    pub stages: Vec<usize>,
}

impl AblationConfig {
    pub fn new(base: TrainConfig, iterations: usize, finetune_iterations: usize) -> Self {
        Self {
            base,
            iterations,
            finetune_iterations,
            variants: Variant::ALL.to_vec(),
            stages: vec![1, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: &'static str,
    pub setting: String,
    pub iterations: usize,
    pub psnr: f64,
    pub ssim: f64,
}

fn score(scene: &Scene, model_cfg: &ModelConfig, params: &ParameterStore) -> Result<MetricReport, Error> {
    let model = Model::new(model_cfg.clone())?;
    let bundle = setup_scene(refined_sources(params, scene.images()), scene.cameras(), scene.mesh.clone(), &model, params)?;
    evaluate_scene(&bundle, &scene.heldout, &model, params)
}

fn row(axis: &'static str, setting: String, iterations: usize, r: &MetricReport) -> AblationRow {
    AblationRow {
        axis,
        setting,
        iterations,
        psnr: r.mean_psnr(),
        ssim: r.mean_ssim(),
    }
}

/// Runs every axis on `scene`. The regime axis starts from `pretrained`
/// when given (it must match `config.base.model`), otherwise from a fresh
/// scene-agnostic run of `config.iterations`.
pub fn run_ablation(scene: &Scene, config: &AblationConfig, pretrained: Option<&ParameterStore>) -> Result<Vec<AblationRow>, Error> {
    if scene.heldout.is_empty() {
        return Err(Error::Invalid(format!("scene `{}` has no held-out views", scene.name)));
    }
    let ts = TrainingScene::from_scene(scene)?;
    let width = config.base.model.feature_width;
    let mut rows = Vec::new();
    let agnostic = |model: ModelConfig| -> Result<(ModelConfig, ParameterStore), Error> {
        let cfg = TrainConfig {
            regime: Regime::SceneAgnostic,
            iterations: Some(config.iterations),
            model: model.clone(),
            ..config.base.clone()
        };
        let r = train_scene_agnostic(std::slice::from_ref(&ts), &cfg, None)?;
        Ok((model, r.params))
    };

    for &variant in &config.variants {
        let mut m = config.base.model.clone();
        m.aggregator = AggregatorConfig::with_default_pool(variant, width);
        let (m, p) = agnostic(m)?;
        let setting = match m.aggregator.pool {
            Some(pool) => format!("{variant}-{pool}"),
            None => variant.to_string(),
        };
        log::info!("ablation: aggregator {setting} done");
        rows.push(row("aggregator", setting, config.iterations, &score(scene, &m, &p)?));
    }

    for &l in &config.stages {
        let mut m = config.base.model.clone();
        let r = m.render.as_mut().ok_or_else(|| Error::Invalid("stage ablation needs a render stack".into()))?;
        r.stages = l;
        let (m, p) = agnostic(m)?;
        log::info!("ablation: L={l} done");
        rows.push(row("stages", format!("L={l}"), config.iterations, &score(scene, &m, &p)?));
    }

    let (base_iters, base) = match pretrained {
        Some(p) => (0, p.clone()),
        None => (config.iterations, agnostic(config.base.model.clone())?.1),
    };
    let m = &config.base.model;
    rows.push(row("regime", "none".into(), base_iters, &score(scene, m, &base)?));
    let ft = TrainConfig {
        iterations: Some(config.finetune_iterations),
        ..config.base.clone()
    };
    let net = finetune_network(&ts, base.clone(), &ft, None)?;
    rows.push(row("regime", Regime::NetworkFt.to_string(), config.finetune_iterations, &score(scene, m, &net.params)?));
    let sc = finetune_scene(&ts, base, &ft, None)?;
    let refined = match &sc.pool {
        Some(pool) => pool.merged_with(&sc.params),
        None => sc.params.clone(),
    };
    rows.push(row("regime", Regime::SceneFt.to_string(), config.finetune_iterations, &score(scene, m, &refined)?));
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,setting,iterations,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.4},{:.6}", r.axis, r.setting, r.iterations, r.psnr, r.ssim);
    }
    s
}
