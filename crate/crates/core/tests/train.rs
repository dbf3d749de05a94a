use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svs_core::aggregate::{AggregatorConfig, Pool, Variant};
use svs_core::error::TensorError;
use svs_core::io::Scene;
use svs_core::pipeline::{setup_scene, synthesize_view, Model, ModelConfig};
use svs_core::synthetic::{build_synthetic_scene, SyntheticSceneSpec};
use svs_core::tensor::gradcheck::{grad_check, TapeFn};
use svs_core::tensor::{ParameterStore, Tensor};
use svs_core::train::*;
use svs_core::Error;

fn fixture() -> &'static Scene {
    static SCENE: OnceLock<Scene> = OnceLock::new();
    SCENE.get_or_init(|| build_synthetic_scene(&SyntheticSceneSpec::fixture()).unwrap())
}

fn small_model() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.feature_width = 8;
    let e = c.encoder.as_mut().unwrap();
    e.out_channels = 8;
    e.base_width = 4;
    c.aggregator = AggregatorConfig::new(Variant::Mlp, Some(Pool::Mean), 8);
    c.aggregator.mlp_hidden = vec![16];
    let r = c.render.as_mut().unwrap();
    r.feature_width = 8;
    r.base_width = 4;
    r.stages = 2;
    c
}

fn small_config(iters: usize) -> TrainConfig {
    TrainConfig {
        iterations: Some(iters),
        model: small_model(),
        seed: 11,
        ..TrainConfig::default()
    }
}

fn training_scene() -> TrainingScene {
    TrainingScene::from_scene(fixture()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0f32))
}

fn l1(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn loss_is_zero_at_identity_and_bounded_below_by_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lambdas = [1.0; 3];
    for _ in 0..5 {
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        assert_eq!(loss_image(&a, &a, &lambdas).unwrap(), 0.0);
        let l = loss_image(&a, &b, &lambdas).unwrap();
        assert!(l >= l1(&a, &b) - 1e-12);
        assert!((loss_image(&a, &b, &[0.0; 3]).unwrap() - l1(&a, &b)).abs() < 1e-9);
    }
    let c = random_image(&mut rng, 8, 16);
    assert!(loss_image(&c, &random_image(&mut rng, 16, 8), &lambdas).is_err());
    assert!(loss_image(&c, &c, &[1.0]).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bank = PerceptualBank::default();
    for _ in 0..3 {
        let target = random_image(&mut rng, 8, 8).cast::<f64>();
        let point: Vec<f64> = (0..192).map(|_| rng.random_range(0.0..1.0)).collect();
        let f = TapeFn::new(&[8, 8, 3], |tape, o| {
            let t = tape.constant(target.clone());
            image_loss_on_tape(tape, &bank, o, t, &[1.0, 0.5, 2.0])
        });
        let r = grad_check(&f, &point, 1e-6, 1e-3);
        assert!(r.passed(), "{r:?}");
    }
}

fn one_param(v: f32) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("x", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
    s
}

fn grads(pairs: &[(&str, Vec<f32>)]) -> BTreeMap<String, Tensor<f32>> {
    pairs
        .iter()
        .map(|(n, g)| (n.to_string(), Tensor::new(&[g.len()], g.clone()).unwrap()))
        .collect()
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut store = one_param(0.0);
    let mut opt = OptimizerState::new(AdamConfig::default());
    opt.step(&mut store, &grads(&[("x", vec![1.0])]), ["x"]).unwrap();
    let expected = -1e-4 / (1.0 + 1e-8);
    assert!((store.get("x").unwrap().data()[0] as f64 - expected).abs() < 1e-10);
    assert_eq!(opt.steps("x"), 1);
}

#[test]
fn adam_zero_gradient_and_symmetry() {
    let mut store = one_param(0.25);
    store.insert("y", Tensor::new(&[2], vec![0.5, 0.5]).unwrap()).unwrap();
    let mut opt = OptimizerState::new(AdamConfig::default());
    for _ in 0..3 {
        opt.step(&mut store, &grads(&[("x", vec![0.0]), ("y", vec![0.3, 0.3])]), ["x", "y"]).unwrap();
    }
    assert_eq!(store.get("x").unwrap().data(), &[0.25]);
    let y = store.get("y").unwrap().data();
    assert_eq!(y[0], y[1]);
    assert!(y[0] < 0.5);
}

#[test]
fn adam_reports_missing_gradients() {
    let mut store = one_param(0.0);
    let mut opt = OptimizerState::new(AdamConfig::default());
    match opt.step(&mut store, &BTreeMap::new(), ["x"]) {
        Err(TensorError::MissingGradient(n)) => assert_eq!(n, "x"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn adam_moments_and_first_step_bound(g in prop::collection::vec(-100.0f32..100.0, 1..16), lr in 1e-5f64..1e-2) {
        let mut store = ParameterStore::new();
        store.insert("p", Tensor::zeros(&[g.len()])).unwrap();
        let mut opt = OptimizerState::new(AdamConfig { lr, ..AdamConfig::default() });
        opt.step(&mut store, &grads(&[("p", g.clone())]), ["p"]).unwrap();
        for v in opt.second_moment("p").unwrap() {
            prop_assert!(*v >= 0.0);
        }
        for x in store.get("p").unwrap().data() {
            prop_assert!((*x as f64).abs() <= lr * (1.0 + 1e-6));
        }
    }

    #[test]
    fn target_is_never_a_source(seed in any::<u64>(), n in 2usize..20, m_frac in 0.0f64..1.0) {
        let m = 1 + ((n - 2) as f64 * m_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, s) = sample_step(&mut rng, n, m);
        prop_assert!(t < n);
        prop_assert_eq!(s.len(), m);
        prop_assert!(!s.contains(&t));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&k| k < n));
    }
}

#[test]
fn run_config_parses_and_round_trips() {
    let text = "\
# fixture run
regime = scene-ft
iters = 40
M = 2
lr = 0.001
beta2 = 0.999
seed = 5
lambda_l = 0.5
ckpt_every = 10
aggregator.variant = gat
aggregator.pool = max
aggregator.gat_heads = 4
render.stages = 1
features = 16
";
    let p = Path::new("run.cfg");
    let c = TrainConfig::parse(text, p).unwrap();
    assert_eq!(c.regime, Regime::SceneFt);
    assert_eq!(c.iterations, Some(40));
    assert_eq!(c.sources_per_step, 2);
    assert_eq!(c.adam.lr, 0.001);
    assert_eq!(c.adam.beta2, 0.999);
    assert_eq!(c.lambdas, vec![0.5; 3]);
    assert_eq!(c.model.aggregator.variant, Variant::Gat);
    assert_eq!(c.model.aggregator.pool, Some(Pool::Max));
    assert_eq!(c.model.render.as_ref().unwrap().stages, 1);
    assert_eq!(c.model.feature_width, 16);
    assert_eq!(c.model.encoder.as_ref().unwrap().out_channels, 16);
    assert_eq!(TrainConfig::parse(&c.format(), p).unwrap(), c);
}

#[test]
fn run_config_errors_name_the_key() {
    let p = Path::new("run.cfg");
    match TrainConfig::parse("iters = 3\nlearning_rate = 1\n", p) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("learning_rate"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    assert!(TrainConfig::parse("M = 0\n", p).is_err());
    assert!(TrainConfig::parse("regime = sometimes\n", p).unwrap_err().to_string().contains("sometimes"));
    assert!(TrainConfig::parse("aggregator.variant = weighted-mean\naggregator.pool = max\n", p).is_err());
    assert!(TrainConfig::parse("lambda_l = 1,2\n", p).is_err());
}

#[test]
fn finetune_budget_scales_with_sources() {
    assert_eq!(finetune_budget(10), 2560);
    let c = TrainConfig {
        regime: Regime::NetworkFt,
        ..TrainConfig::default()
    };
    assert_eq!(c.iterations_for(8), 2048);
    assert_eq!(TrainConfig::default().iterations_for(8), 2000);
}

#[test]
fn seeded_training_is_bit_reproducible() {
    let scene = training_scene();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small_config(7);
    cfg.ckpt_every = 3;
    let a = train_scene_agnostic(std::slice::from_ref(&scene), &cfg, Some(d1.path())).unwrap();
    let b = train_scene_agnostic(std::slice::from_ref(&scene), &cfg, Some(d2.path())).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.params, b.params);
    assert_eq!(a.samples, b.samples);
    let names: Vec<_> = a.checkpoints.iter().map(|p| p.file_name().unwrap().to_owned()).collect();
    assert_eq!(names, ["ckpt_000003.svs", "ckpt_000006.svs", "ckpt_000007.svs"]);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let last = Checkpoint::load(a.checkpoints.last().unwrap()).unwrap();
    assert_eq!(last.params, a.params);
    assert_eq!(last.iteration, 7);
    assert_eq!(last.config, cfg.model);
    for s in &a.samples {
        assert!(!s.sources.contains(&s.target));
        assert_eq!(s.sources.len(), 3);
    }
}

#[test]
fn checkpoint_decoding_rejects_damage() {
    let model = Model::new(small_model()).unwrap();
    let ck = Checkpoint {
        config: small_model(),
        iteration: 3,
        params: model.init(1).unwrap(),
    };
    let bytes = ck.encode();
    assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::decode(&bytes[..30]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::decode(&bad).is_err());
    let mut other = ck.clone();
    other.params.remove("render.s1.out.w");
    assert!(Checkpoint::decode(&other.encode()).is_err());
}

#[test]
fn every_parameter_group_receives_gradient() {
    let scene = training_scene();
    let model = Model::new(small_model()).unwrap();
    let before = model.init(2).unwrap();
    let mut params = before.clone();
    let mut opt = OptimizerState::new(AdamConfig::default());
    train_step(&model, &mut params, None, &mut opt, &PerceptualBank::default(), &[1.0; 3], &scene, 2, &[1, 3, 4]).unwrap();
    for group in ["enc.", "aggr.", "render."] {
        let moved = before
            .iter()
            .filter(|(n, _)| n.starts_with(group))
            .any(|(n, t)| params.get(n).unwrap() != t);
        assert!(moved, "group {group} did not move");
    }
    assert!(train_step(&model, &mut params, None, &mut opt, &PerceptualBank::default(), &[1.0; 3], &scene, 2, &[2, 3]).is_err());
}

#[test]
fn two_hundred_iterations_cut_the_loss() {
    let scene = training_scene();
    let cfg = TrainConfig {
        iterations: Some(200),
        ..TrainConfig::default()
    };
    let r = train_scene_agnostic(&[scene], &cfg, None).unwrap();
    let tail = &r.losses[180..];
    let running = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(running <= 0.7 * r.losses[0], "first {} running {running}", r.losses[0]);
}

#[test]
fn network_finetuning_allocates_no_pool_and_does_not_drift() {
    let scene = training_scene();
    let pre = train_scene_agnostic(std::slice::from_ref(&scene), &small_config(150), None).unwrap();
    let ft = finetune_network(&scene, pre.params.clone(), &small_config(100), None).unwrap();
    assert!(ft.pool.is_none());
    assert_eq!(ft.losses.len(), 100);
    let model = Model::new(small_model()).unwrap();
    let heldout_loss = |p: &ParameterStore| {
        let s = fixture();
        let b = setup_scene(s.images(), s.cameras(), s.mesh.clone(), &model, p).unwrap();
        s.heldout
            .iter()
            .map(|v| loss_image(&synthesize_view(&b, &model, p, &v.camera).unwrap().image, &v.image, &[1.0; 3]).unwrap())
            .sum::<f64>()
    };
    let (l0, l1) = (heldout_loss(&pre.params), heldout_loss(&ft.params));
    assert!(l1 <= 1.1 * l0, "held-out loss {l0} -> {l1}");
}

#[test]
fn scene_finetuning_keeps_ground_truth_immutable() {
    let scene = training_scene();
    let pool = MutableImagePool::new(scene.images.clone());
    for k in 0..scene.len() {
        assert_eq!(pool.entry(k), &scene.images[k]);
    }
    let sums: Vec<_> = scene.images.iter().map(sha256).collect();
    let init = Model::new(small_model()).unwrap().init(1).unwrap();
    let r = finetune_scene(&scene, init, &small_config(12), None).unwrap();
    let pool = r.pool.unwrap();
    assert_eq!(pool.original_checksums(), sums);
    assert_eq!(scene.images.iter().map(sha256).collect::<Vec<_>>(), sums);
    let used: std::collections::BTreeSet<usize> = r.samples.iter().flat_map(|s| s.sources.clone()).collect();
    for k in 0..scene.len() {
        assert_eq!(pool.entry(k) != pool.original(k), used.contains(&k), "entry {k}");
    }
}

#[test]
fn exposure_outlier_moves_toward_consensus() {
    let s = build_synthetic_scene(&SyntheticSceneSpec::exposure_fixture()).unwrap();
    let scene = TrainingScene::from_scene(&s).unwrap();
    let init = Model::new(small_model()).unwrap().init(1).unwrap();
    let mut cfg = small_config(60);
    cfg.adam.lr = 1e-3;
    let r = finetune_scene(&scene, init, &cfg, None).unwrap();
    let pool = r.pool.unwrap();
    let mean = |t: &Tensor<f32>| t.data().iter().map(|v| *v as f64).sum::<f64>() / t.len() as f64;
    let others = (0..8).filter(|&k| k != 1).map(|k| mean(pool.original(k))).sum::<f64>() / 7.0;
    let before = (mean(pool.original(1)) - others).abs();
    let after = (mean(pool.entry(1)) - others).abs();
    assert!(after < before, "gap {before} -> {after}");
}

#[test]
fn scenes_without_enough_images_are_skipped() {
    let s = fixture();
    let tiny = TrainingScene::new("tiny", &s.mesh, s.cameras()[..2].to_vec(), s.images()[..2].to_vec()).unwrap();
    let err = train_scene_agnostic(std::slice::from_ref(&tiny), &small_config(2), None).unwrap_err();
    assert!(err.to_string().contains("4 images"), "{err}");
    let r = train_scene_agnostic(&[tiny, training_scene()], &small_config(3), None).unwrap();
    assert!(r.samples.iter().all(|x| x.scene == 1));
}
