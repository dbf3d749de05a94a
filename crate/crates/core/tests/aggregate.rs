use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svs_core::aggregate::{
    aggregate, aggregate_weighted_mean, Aggregator, AggregatorConfig, Pool, RayBatch, RayFeatureSet, Variant,
};
use svs_core::geometry::{RaySkeleton, Vec3};
use svs_core::tensor::gradcheck::{grad_check_coords, TapeFn};
use svs_core::tensor::{ParamBinding, ParameterStore, Tape, Tensor};
use svs_core::Error;

const C: usize = 4;

fn config(variant: Variant, pool: Option<Pool>) -> AggregatorConfig {
    let mut c = AggregatorConfig::new(variant, pool, C);
    c.mlp_hidden = vec![8];
    c
}

fn all_configs() -> Vec<AggregatorConfig> {
    vec![
        config(Variant::WeightedMean, None),
        config(Variant::Mlp, Some(Pool::Mean)),
        config(Variant::Mlp, Some(Pool::Max)),
        config(Variant::Gat, Some(Pool::Mean)),
        config(Variant::Gat, Some(Pool::Max)),
        config(Variant::GatReadout, None),
    ]
}

fn setup(cfg: AggregatorConfig, seed: u64) -> (Aggregator, ParameterStore) {
    let agg = Aggregator::new(cfg).unwrap();
    let mut store = ParameterStore::new();
    agg.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (agg, store)
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() < 1.0 {
            return v.normalize();
        }
    }
}

/// Rays roughly aligned with the target so cosine weights are mostly positive.
fn random_rays(rng: &mut ChaCha8Rng, k: usize) -> RayFeatureSet {
    let target = unit(rng);
    let directions = (0..k).map(|_| (target + 0.8 * unit(rng)).normalize()).collect();
    RayFeatureSet {
        sources: (0..k).map(|i| i * 2 + rng.random_range(0..2)).collect(),
        directions,
        features: (0..k).map(|_| (0..C).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect(),
        target,
    }
}

fn permuted(rays: &RayFeatureSet, perm: &[usize]) -> RayFeatureSet {
    RayFeatureSet {
        sources: perm.iter().map(|&i| rays.sources[i]).collect(),
        directions: perm.iter().map(|&i| rays.directions[i]).collect(),
        features: perm.iter().map(|&i| rays.features[i].clone()).collect(),
        target: rays.target,
    }
}

fn ray_set(target: Vec3, dirs: &[Vec3], feats: &[Vec<f32>]) -> RayFeatureSet {
    RayFeatureSet {
        sources: (0..dirs.len()).collect(),
        directions: dirs.to_vec(),
        features: feats.to_vec(),
        target,
    }
}

#[test]
fn zero_rays_give_zero_for_every_variant() {
    for cfg in all_configs() {
        let (agg, store) = setup(cfg, 1);
        let rays = ray_set(Vector3::z(), &[], &[]);
        let out = aggregate(&agg, &store, &rays).unwrap();
        assert_eq!(out.count, 0);
        assert_eq!(out.g, vec![0.0; C]);
    }
}

#[test]
fn weighted_mean_hand_example() {
    let s = 60f64.to_radians();
    let rays = RayFeatureSet {
        sources: vec![0, 1],
        directions: vec![Vector3::z(), Vector3::new(0.0, s.sin(), s.cos())],
        features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        target: Vector3::z(),
    };
    let g = aggregate_weighted_mean(&rays, 2).unwrap().g;
    assert!((g[0] as f64 - 2.0 / 3.0).abs() < 1e-6, "{g:?}");
    assert!((g[1] as f64 - 1.0 / 3.0).abs() < 1e-6, "{g:?}");
}

#[test]
fn weighted_mean_single_aligned_ray_returns_its_feature() {
    let f = vec![0.25f32, -3.0, 7.5, 1e-3];
    let d = Vector3::new(0.3, -0.4, 0.5).normalize();
    let out = aggregate_weighted_mean(&ray_set(d, &[d], &[f.clone()]), C).unwrap();
    assert_eq!(out.g, f);
    assert_eq!(out.count, 1);
}

#[test]
fn weighted_mean_back_facing_rays_fall_back_to_zero() {
    let rays = ray_set(
        Vector3::z(),
        &[-Vector3::z(), Vector3::x()],
        &[vec![1.0; C], vec![2.0; C]],
    );
    let out = aggregate_weighted_mean(&rays, C).unwrap();
    assert_eq!(out.g, vec![0.0; C]);
    assert_eq!(out.count, 2);
}

#[test]
fn dispatch_matches_direct_weighted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (agg, store) = setup(config(Variant::WeightedMean, None), 0);
    for k in 1..6 {
        let rays = random_rays(&mut rng, k);
        assert_eq!(aggregate(&agg, &store, &rays).unwrap(), aggregate_weighted_mean(&rays, C).unwrap());
    }
}

#[test]
fn pool_is_required_exactly_for_mlp_and_gat() {
    assert!(Aggregator::new(config(Variant::Mlp, None)).is_err());
    assert!(Aggregator::new(config(Variant::Gat, None)).is_err());
    assert!(Aggregator::new(config(Variant::WeightedMean, Some(Pool::Mean))).is_err());
    assert!(Aggregator::new(config(Variant::GatReadout, Some(Pool::Max))).is_err());
    assert!(matches!("median".parse::<Pool>(), Err(Error::Config(_))));
    assert!(matches!("attention".parse::<Variant>(), Err(Error::Config(_))));
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
    }
}

fn tensor64(store: &ParameterStore, name: &str) -> Tensor<f64> {
    store.get(name).unwrap().cast::<f64>()
}

/// Plain-loop MLP evaluation from stored parameters.
fn mlp_oracle(store: &ParameterStore, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..layers {
        let w = tensor64(store, &format!("aggr.mlp.l{l}.w"));
        let b = tensor64(store, &format!("aggr.mlp.l{l}.b"));
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let mut y: Vec<f64> = (0..dout)
            .map(|o| b.data()[o] + (0..din).map(|i| h[i] * w.data()[i * dout + o]).sum::<f64>())
            .collect();
        if l + 1 < layers {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    h
}

fn node(u: &Vec3, v: &Vec3, f: &[f32]) -> Vec<f64> {
    let mut x = vec![u.x, u.y, u.z, v.x, v.y, v.z];
    x.extend(f.iter().map(|v| *v as f64));
    x
}

/// Single attention layer evaluated densely on a complete graph.
fn gat_oracle(store: &ParameterStore, heads: usize, nodes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = tensor64(store, "aggr.gat.l0.w");
    let (din, width) = (w.shape()[0], w.shape()[1]);
    let hw = width / heads;
    let wh: Vec<Vec<f64>> = nodes
        .iter()
        .map(|x| (0..width).map(|o| (0..din).map(|i| x[i] * w.data()[i * width + o]).sum()).collect())
        .collect();
    let n = nodes.len();
    let mut out = vec![vec![0.0; width]; n];
    for k in 0..heads {
        let ai = tensor64(store, &format!("aggr.gat.l0.h{k}.ai"));
        let aj = tensor64(store, &format!("aggr.gat.l0.h{k}.aj"));
        let dot = |a: &Tensor<f64>, z: &[f64]| (0..hw).map(|d| a.data()[d] * z[k * hw + d]).sum::<f64>();
        for i in 0..n {
            let e: Vec<f64> = (0..n)
                .map(|j| {
                    let x = dot(&ai, &wh[i]) + dot(&aj, &wh[j]);
                    if x > 0.0 {
                        x
                    } else {
                        0.2 * x
                    }
                })
                .collect();
            let z: f64 = e.iter().map(|x| x.exp()).sum();
            for j in 0..n {
                for d in 0..hw {
                    out[i][k * hw + d] += e[j].exp() / z * wh[j][k * hw + d];
                }
            }
        }
    }
    out
}

fn assert_close(got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((*g as f64 - w).abs() <= tol * (1.0 + w.abs()), "{got:?} vs {want:?}");
    }
}

#[test]
fn mlp_mean_of_identical_tuples_is_the_mlp_of_the_tuple() {
    let (agg, store) = setup(config(Variant::Mlp, Some(Pool::Mean)), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let one = random_rays(&mut rng, 1);
    let rays = RayFeatureSet {
        sources: vec![0, 1, 2],
        directions: vec![one.directions[0]; 3],
        features: vec![one.features[0].clone(); 3],
        target: one.target,
    };
    let expect = mlp_oracle(&store, 2, &node(&one.target, &one.directions[0], &one.features[0]));
    assert_close(&aggregate(&agg, &store, &rays).unwrap().g, &expect, 1e-5);
}

#[test]
fn mlp_max_pool_is_idempotent_under_duplication() {
    let (agg, store) = setup(config(Variant::Mlp, Some(Pool::Max)), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 1..6 {
        let rays = random_rays(&mut rng, k);
        let base = aggregate(&agg, &store, &rays).unwrap().g;
        let dup = rng.random_range(0..k);
        let mut more = rays.clone();
        more.sources.push(100);
        more.directions.push(rays.directions[dup]);
        more.features.push(rays.features[dup].clone());
        assert_eq!(aggregate(&agg, &store, &more).unwrap().g, base);
    }
}

#[test]
fn mlp_matches_direct_evaluation_and_pooling() {
    for pool in [Pool::Mean, Pool::Max] {
        let (agg, store) = setup(config(Variant::Mlp, Some(pool)), 8);
        let rays = random_rays(&mut ChaCha8Rng::seed_from_u64(9), 2);
        let outs: Vec<Vec<f64>> = (0..2)
            .map(|k| mlp_oracle(&store, 2, &node(&rays.target, &rays.directions[k], &rays.features[k])))
            .collect();
        let expect: Vec<f64> = (0..C)
            .map(|c| match pool {
                Pool::Mean => (outs[0][c] + outs[1][c]) / 2.0,
                Pool::Max => outs[0][c].max(outs[1][c]),
            })
            .collect();
        assert_close(&aggregate(&agg, &store, &rays).unwrap().g, &expect, 1e-5);
    }
}

#[test]
fn gat_singleton_is_transformed_node() {
    let (agg, store) = setup(config(Variant::Gat, Some(Pool::Mean)), 10);
    let rays = random_rays(&mut ChaCha8Rng::seed_from_u64(11), 1);
    let x = node(&rays.target, &rays.directions[0], &rays.features[0]);
    let w = tensor64(&store, "aggr.gat.l0.w");
    let expect: Vec<f64> = (0..C).map(|o| (0..C + 6).map(|i| x[i] * w.data()[i * C + o]).sum()).collect();
    assert_close(&aggregate(&agg, &store, &rays).unwrap().g, &expect, 1e-5);
}

#[test]
fn gat_matches_dense_oracle_and_pooling() {
    for pool in [Pool::Mean, Pool::Max] {
        let (agg, store) = setup(config(Variant::Gat, Some(pool)), 12);
        let rays = random_rays(&mut ChaCha8Rng::seed_from_u64(13), 3);
        let nodes: Vec<Vec<f64>> =
            (0..3).map(|k| node(&rays.target, &rays.directions[k], &rays.features[k])).collect();
        let outs = gat_oracle(&store, 2, &nodes);
        let expect: Vec<f64> = (0..C)
            .map(|c| match pool {
                Pool::Mean => outs.iter().map(|o| o[c]).sum::<f64>() / 3.0,
                Pool::Max => outs.iter().map(|o| o[c]).fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        assert_close(&aggregate(&agg, &store, &rays).unwrap().g, &expect, 1e-5);
    }
}

fn readout_nodes(rays: &RayFeatureSet) -> Vec<Vec<f64>> {
    let init = aggregate_weighted_mean(rays, C).unwrap().g;
    let u = rays.target;
    let mut nodes = vec![{
        let mut x = vec![u.x, u.y, u.z];
        x.extend(init.iter().map(|v| *v as f64));
        x
    }];
    for k in 0..rays.len() {
        let v = rays.directions[k];
        let mut x = vec![v.x, v.y, v.z];
        x.extend(rays.features[k].iter().map(|f| *f as f64));
        nodes.push(x);
    }
    nodes
}

#[test]
fn gat_readout_matches_dense_oracle() {
    let (agg, store) = setup(config(Variant::GatReadout, None), 14);
    let rays = random_rays(&mut ChaCha8Rng::seed_from_u64(15), 2);
    let expect = gat_oracle(&store, 2, &readout_nodes(&rays));
    assert_close(&aggregate(&agg, &store, &rays).unwrap().g, &expect[0], 1e-5);
}

#[test]
fn gat_readout_single_aligned_ray_initializes_target_with_its_feature() {
    let d = Vector3::new(0.0, 0.6, 0.8);
    let f = vec![0.5f32, -0.25, 1.0, 2.0];
    let rays = ray_set(d, &[d], &[f.clone()]);
    let nodes = readout_nodes(&rays);
    assert_eq!(&nodes[0][3..], &f.iter().map(|v| *v as f64).collect::<Vec<_>>()[..]);
    let (agg, store) = setup(config(Variant::GatReadout, None), 16);
    let expect = gat_oracle(&store, 2, &nodes);
    assert_close(&aggregate(&agg, &store, &rays).unwrap().g, &expect[0], 1e-5);
}

#[test]
fn batched_forward_equals_per_point_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for cfg in all_configs() {
        let (agg, store) = setup(cfg, 18);
        let sets: Vec<RayFeatureSet> = (0..5)
            .map(|i| {
                let mut r = random_rays(&mut rng, if i == 2 { 0 } else { 1 + i });
                r.canonicalize();
                r
            })
            .collect();
        let mut batch = RayBatch::new(sets.len());
        let mut feats = Vec::new();
        for (row, s) in sets.iter().enumerate() {
            batch.push(
                row,
                s.target,
                &RaySkeleton {
                    indices: s.sources.clone(),
                    directions: s.directions.clone(),
                    pixels: vec![Vector2::zeros(); s.len()],
                },
            );
            feats.extend(s.features.iter().flatten().copied());
        }
        let mut tape = Tape::<f32>::new();
        let p = ParamBinding::bind(&mut tape, &store, |_| false);
        let f = tape.constant(Tensor::new(&[batch.num_rays(), C], feats).unwrap());
        let g = agg.forward(&mut tape, &p, &batch, f).unwrap();
        let out = tape.value(g);
        assert_eq!(out.shape(), &[5, C]);
        assert_eq!(batch.counts(), vec![1, 2, 0, 4, 5]);
        for (row, s) in sets.iter().enumerate() {
            let single = aggregate(&agg, &store, s).unwrap().g;
            assert_eq!(&out.data()[row * C..(row + 1) * C], &single[..], "{:?} row {row}", agg.config.variant);
        }
    }
}

#[test]
fn gradients_of_squared_norm_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for cfg in all_configs() {
        let (agg, store) = setup(cfg, 20);
        let mut rays = random_rays(&mut rng, 3);
        rays.canonicalize();
        let mut batch = RayBatch::new(1);
        batch.push(
            0,
            rays.target,
            &RaySkeleton {
                indices: rays.sources.clone(),
                directions: rays.directions.clone(),
                pixels: vec![Vector2::zeros(); 3],
            },
        );
        let feats: Vec<f64> = rays.features.iter().flatten().map(|v| *v as f64).collect();
        let wrt_features = TapeFn::new(&[3, C], |tape, f| {
            let p = ParamBinding::bind(tape, &store, |_| false);
            let g = agg.forward(tape, &p, &batch, f)?;
            let sq = tape.mul(g, g)?;
            Ok::<_, Error>(tape.sum_all(sq))
        });
        let coords: Vec<usize> = (0..feats.len()).collect();
        let r = grad_check_coords(&wrt_features, &feats, 1e-6, 1e-3, &coords);
        assert!(r.passed(), "{:?} features: {r:?}", agg.config);

        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let shape = store.get(&name).unwrap().shape().to_vec();
            let f = TapeFn::new(&shape, |tape, v| {
                let mut p = ParamBinding::bind(tape, &store, |_| false);
                p.set(name.clone(), v);
                let fv = tape.constant(Tensor::new(&[3, C], feats.clone()).unwrap());
                let g = agg.forward(tape, &p, &batch, fv)?;
                let sq = tape.mul(g, g)?;
                Ok::<_, Error>(tape.sum_all(sq))
            });
            let point = tensor64(&store, &name).into_data();
            let coords: Vec<usize> = (0..point.len()).step_by(3).collect();
            let r = grad_check_coords(&f, &point, 1e-6, 1e-3, &coords);
            assert!(r.passed(), "{:?} {name}: {r:?}", agg.config.variant);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_variant_is_permutation_invariant(seed in any::<u64>(), k in 1usize..=8, shuffle in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rays = random_rays(&mut rng, k);
        let mut perm: Vec<usize> = (0..k).collect();
        let mut srng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..k).rev() {
            perm.swap(i, srng.random_range(0..=i));
        }
        for cfg in all_configs() {
            let (agg, store) = setup(cfg, seed ^ 0x5eed);
            let a = aggregate(&agg, &store, &rays).unwrap();
            let b = aggregate(&agg, &store, &permuted(&rays, &perm)).unwrap();
            prop_assert_eq!(a.g.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.g.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn weighted_mean_stays_in_feature_bounds(seed in any::<u64>(), k in 1usize..=8) {
        let rays = random_rays(&mut ChaCha8Rng::seed_from_u64(seed), k);
        let g = aggregate_weighted_mean(&rays, C).unwrap().g;
        let positive = rays.directions.iter().any(|v| rays.target.dot(v) > 0.0);
        prop_assume!(positive);
        for c in 0..C {
            let lo = rays.features.iter().map(|f| f[c]).fold(f32::INFINITY, f32::min);
            let hi = rays.features.iter().map(|f| f[c]).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(g[c] >= lo - 1e-6 && g[c] <= hi + 1e-6, "{} not in [{}, {}]", g[c], lo, hi);
        }
    }

    #[test]
    fn weighted_mean_is_linear_in_features(seed in any::<u64>(), k in 1usize..=8, s in -4.0f32..4.0) {
        let rays = random_rays(&mut ChaCha8Rng::seed_from_u64(seed), k);
        let mut scaled = rays.clone();
        scaled.features.iter_mut().flatten().for_each(|v| *v *= s);
        let g = aggregate_weighted_mean(&rays, C).unwrap().g;
        let gs = aggregate_weighted_mean(&scaled, C).unwrap().g;
        for c in 0..C {
            prop_assert!((gs[c] - s * g[c]).abs() <= 1e-6 * (1.0 + (s * g[c]).abs()), "{} vs {}", gs[c], s * g[c]);
        }
    }
}
