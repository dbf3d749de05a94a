use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::*;
use crate::error::Error;
use crate::tensor::gradcheck::{grad_check_coords, TapeFn};
use crate::tensor::{ParamBinding, ParameterStore, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let d = Uniform::new(lo, hi).unwrap();
    Tensor::from_fn(shape, |_| d.sample(rng))
}

fn small_unet(out: usize) -> UNet {
    UNet::new(
        "u",
        UNetConfig {
            in_channels: 3,
            base_width: 4,
            stages: 2,
            out_channels: out,
        },
    )
}

#[test]
fn unet_shape_contract() {
    let net = UNet::new(
        "enc",
        UNetConfig {
            in_channels: 3,
            base_width: 16,
            stages: 3,
            out_channels: 32,
        },
    );
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(0), false).unwrap();
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, &store, |_| false);
    let x = tape.constant(Tensor::full(&[64, 64, 3], 0.5));
    let y = net.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(y), &[64, 64, 32]);
}

#[test]
fn unet_rejects_indivisible_input_with_padding_hint() {
    let net = small_unet(2);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(0), false).unwrap();
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, &store, |_| false);
    let x = tape.constant(Tensor::zeros(&[10, 13, 3]));
    match net.forward(&mut tape, &p, x) {
        Err(Error::Divisibility {
            multiple,
            padded_height,
            padded_width,
            ..
        }) => assert_eq!((multiple, padded_height, padded_width), (4, 12, 16)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unet_is_pure() {
    let net = small_unet(5);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(3), false).unwrap();
    let img = random_tensor(&mut rng(4), &[8, 8, 3], 0.0, 1.0).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let p = ParamBinding::bind(&mut tape, &store, |_| false);
        let x = tape.constant(img.clone());
        let y = net.forward(&mut tape, &p, x).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn unet_weight_gradient_matches_finite_differences() {
    let net = small_unet(3);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(5), false).unwrap();
    let img = random_tensor(&mut rng(6), &[16, 16, 3], 0.0, 1.0);
    for name in ["u.in.w", "u.down2b.w", "u.up1.w", "u.out.b"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        let f = TapeFn::new(&shape, |tape, w| {
            let mut p = ParamBinding::bind(tape, &store, |_| false);
            p.set(name, w);
            let x = tape.constant(img.clone());
            let y = net.forward(tape, &p, x)?;
            Ok::<_, Error>(tape.mean_all(y))
        });
        let point: Vec<f64> = store.get(name).unwrap().cast::<f64>().into_data();
        let coords: Vec<usize> = (0..point.len()).step_by((point.len() / 7).max(1)).collect();
        let r = grad_check_coords(&f, &point, 1e-6, 1e-3, &coords);
        assert!(r.passed(), "{name}: {r:?}");
    }
}

#[test]
fn unet_translation_consistent_in_interior() {
    let net = small_unet(2);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(8), false).unwrap();
    let (h, w, shift) = (24usize, 24usize, 4usize);
    let base = random_tensor(&mut rng(9), &[h, w + shift, 3], 0.0, 1.0).cast::<f32>();
    let crop = |off: usize| {
        Tensor::from_fn(&[h, w, 3], |i| {
            let (r, c, ch) = (i / (w * 3), (i / 3) % w, i % 3);
            base.data()[(r * (w + shift) + c + off) * 3 + ch]
        })
    };
    let run = |img: Tensor<f32>| {
        let mut tape = Tape::<f32>::new();
        let p = ParamBinding::bind(&mut tape, &store, |_| false);
        let x = tape.constant(img);
        let y = net.forward(&mut tape, &p, x).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (run(crop(0)), run(crop(shift)));
    let margin = 10;
    for r in margin..h - margin {
        for c in margin..w - margin - shift {
            for ch in 0..2 {
                let va = a.data()[(r * w + c + shift) * 2 + ch];
                let vb = b.data()[(r * w + c) * 2 + ch];
                assert!((va - vb).abs() < 1e-5, "({r},{c},{ch}) {va} vs {vb}");
            }
        }
    }
}

fn fixed_store(entries: &[(&str, &[usize], &[f32])]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (name, shape, data) in entries {
        s.insert(*name, Tensor::new(shape, data.to_vec()).unwrap()).unwrap();
    }
    s
}

fn eval_rows(store: &ParameterStore, input: Tensor<f32>, f: impl Fn(&mut Tape<f32>, &ParamBinding, crate::tensor::Var) -> crate::tensor::Var) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, store, |_| false);
    let x = tape.constant(input);
    let y = f(&mut tape, &p, x);
    tape.value(y).clone()
}

#[test]
fn mlp_without_hidden_layers_is_affine() {
    let mlp = Mlp::new(
        "m",
        MlpConfig {
            widths: vec![3, 2],
            activation: Activation::Relu,
        },
    );
    let store = fixed_store(&[("m.l0.w", &[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), ("m.l0.b", &[2], &[0.0, 0.0])]);
    let out = eval_rows(&store, Tensor::new(&[1, 3], vec![-4.0, 5.0, 6.0]).unwrap(), |t, p, x| {
        mlp.forward(t, p, x).unwrap()
    });
    assert_eq!(out.data(), &[-4.0, 5.0]);
}

#[test]
fn mlp_one_hidden_layer_hand_evaluation() {
    let mlp = Mlp::new(
        "m",
        MlpConfig {
            widths: vec![2, 2, 1],
            activation: Activation::Relu,
        },
    );
    // hidden = relu([1,2]·[[1,-1],[0.5,1]] + [0,-1]) = relu([2, 0]) = [2, 0]
    // out = [2,0]·[[3],[7]] + 0.5 = 6.5
    let store = fixed_store(&[
        ("m.l0.w", &[2, 2], &[1.0, -1.0, 0.5, 1.0]),
        ("m.l0.b", &[2], &[0.0, -1.0]),
        ("m.l1.w", &[2, 1], &[3.0, 7.0]),
        ("m.l1.b", &[1], &[0.5]),
    ]);
    let out = eval_rows(&store, Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), |t, p, x| {
        mlp.forward(t, p, x).unwrap()
    });
    assert_eq!(out.data(), &[6.5]);
}

#[test]
fn mlp_rows_are_independent() {
    let mlp = Mlp::new(
        "m",
        MlpConfig {
            widths: vec![4, 8, 3],
            activation: Activation::LeakyRelu,
        },
    );
    let mut store = ParameterStore::new();
    mlp.init(&mut store, &mut rng(1)).unwrap();
    let batch = random_tensor(&mut rng(2), &[5, 4], -1.0, 1.0).cast::<f32>();
    let all = eval_rows(&store, batch.clone(), |t, p, x| mlp.forward(t, p, x).unwrap());
    for r in 0..5 {
        let row = Tensor::new(&[1, 4], batch.data()[r * 4..(r + 1) * 4].to_vec()).unwrap();
        let one = eval_rows(&store, row, |t, p, x| mlp.forward(t, p, x).unwrap());
        assert_eq!(one.data(), &all.data()[r * 3..(r + 1) * 3]);
    }
}

#[test]
fn mlp_rejects_width_mismatch() {
    let mlp = Mlp::new(
        "m",
        MlpConfig {
            widths: vec![4, 3],
            activation: Activation::Relu,
        },
    );
    let mut store = ParameterStore::new();
    mlp.init(&mut store, &mut rng(1)).unwrap();
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, &store, |_| false);
    let x = tape.constant(Tensor::zeros(&[2, 5]));
    assert!(mlp.forward(&mut tape, &p, x).is_err());
}

fn gat(heads: usize, width: usize, in_width: usize, layers: usize) -> Gat {
    Gat::new(
        "g",
        GatConfig {
            in_width,
            width,
            heads,
            slope: 0.2,
            layers,
        },
    )
}

fn run_gat(net: &Gat, store: &ParameterStore, x: &Tensor<f64>, graph_offsets: &[usize], readout: bool) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let p = ParamBinding::bind(&mut tape, store, |_| false);
    let xv = tape.constant(x.clone());
    let complete = AttentionGraph::complete(graph_offsets);
    let last = if readout { AttentionGraph::readout(graph_offsets) } else { complete.clone() };
    let y = net.forward(&mut tape, &p, xv, &complete, &last).unwrap();
    tape.value(y).clone()
}

/// Direct evaluation of one attention layer on a single complete graph.
fn dense_gat_oracle(store: &ParameterStore, heads: usize, x: &[Vec<f64>], slope: f64) -> Vec<Vec<f64>> {
    let w = store.get("g.l0.w").unwrap().cast::<f64>();
    let (din, width) = (w.shape()[0], w.shape()[1]);
    let hw = width / heads;
    let n = x.len();
    let wh: Vec<Vec<f64>> = x
        .iter()
        .map(|row| (0..width).map(|o| (0..din).map(|i| row[i] * w.data()[i * width + o]).sum()).collect())
        .collect();
    let mut out = vec![vec![0.0; width]; n];
    for k in 0..heads {
        let ai = store.get(&format!("g.l0.h{k}.ai")).unwrap().cast::<f64>();
        let aj = store.get(&format!("g.l0.h{k}.aj")).unwrap().cast::<f64>();
        let score = |a: &Tensor<f64>, v: &[f64]| -> f64 { (0..hw).map(|d| a.data()[d] * v[k * hw + d]).sum() };
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let e = score(&ai, &wh[i]) + score(&aj, &wh[j]);
                    if e > 0.0 {
                        e
                    } else {
                        slope * e
                    }
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|e| (e - m).exp()).sum();
            for j in 0..n {
                let a = (logits[j] - m).exp() / z;
                for d in 0..hw {
                    out[i][k * hw + d] += a * wh[j][k * hw + d];
                }
            }
        }
    }
    out
}

#[test]
fn gat_singleton_returns_transformed_node() {
    let net = gat(2, 4, 3, 1);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(10)).unwrap();
    let x = Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap();
    let y = run_gat(&net, &store, &x, &[0, 1], false);
    let w = store.get("g.l0.w").unwrap().cast::<f64>();
    for o in 0..4 {
        let expect: f64 = (0..3).map(|i| x.data()[i] * w.data()[i * 4 + o]).sum();
        assert!((y.data()[o] - expect).abs() < 1e-12);
    }
}

#[test]
fn gat_identical_nodes_give_identical_outputs() {
    let net = gat(2, 4, 3, 2);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(11)).unwrap();
    let x = Tensor::new(&[2, 3], vec![0.5, 0.1, -0.7, 0.5, 0.1, -0.7]).unwrap();
    let y = run_gat(&net, &store, &x, &[0, 2], false);
    assert_eq!(&y.data()[0..4], &y.data()[4..8]);
}

#[test]
fn gat_matches_dense_oracle() {
    let net = gat(2, 6, 4, 1);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(12)).unwrap();
    let x = random_tensor(&mut rng(13), &[3, 4], -1.0, 1.0);
    let rows: Vec<Vec<f64>> = x.data().chunks(4).map(|r| r.to_vec()).collect();
    let expect = dense_gat_oracle(&store, 2, &rows, 0.2);
    let y = run_gat(&net, &store, &x, &[0, 3], false);
    for i in 0..3 {
        for d in 0..6 {
            assert!((y.data()[i * 6 + d] - expect[i][d]).abs() < 1e-12);
        }
    }
    let r = run_gat(&net, &store, &x, &[0, 3], true);
    assert_eq!(r.shape(), &[1, 6]);
    for d in 0..6 {
        assert!((r.data()[d] - expect[0][d]).abs() < 1e-12);
    }
}

#[test]
fn gat_batches_graphs_independently() {
    let net = gat(1, 3, 2, 1);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(14)).unwrap();
    let x = random_tensor(&mut rng(15), &[5, 2], -1.0, 1.0);
    let both = run_gat(&net, &store, &x, &[0, 2, 5], false);
    let first = run_gat(&net, &store, &Tensor::new(&[2, 2], x.data()[..4].to_vec()).unwrap(), &[0, 2], false);
    let second = run_gat(&net, &store, &Tensor::new(&[3, 2], x.data()[4..].to_vec()).unwrap(), &[0, 3], false);
    assert_eq!(&both.data()[..6], first.data());
    assert_eq!(&both.data()[6..], second.data());
}

#[test]
fn gat_layer_rejects_empty_graph() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::zeros(&[1, 2]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let a = tape.constant(Tensor::zeros(&[2, 1]));
    let g = AttentionGraph::complete(&[0]);
    assert!(gat_layer(&mut tape, h, w, &[(a, a)], 0.2, &g).is_err());
}

#[test]
fn gat_gradients_match_finite_differences() {
    let net = gat(2, 4, 3, 2);
    let mut store = ParameterStore::new();
    net.init(&mut store, &mut rng(16)).unwrap();
    let x = random_tensor(&mut rng(17), &[4, 3], -1.0, 1.0);
    let offsets = [0usize, 1, 4];
    let complete = AttentionGraph::complete(&offsets);
    let readout = AttentionGraph::readout(&offsets);
    for name in ["g.l0.w", "g.l0.h1.ai", "g.l1.h0.aj", "g.l1.w"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        let f = TapeFn::new(&shape, |tape, v| {
            let mut p = ParamBinding::bind(tape, &store, |_| false);
            p.set(name, v);
            let xv = tape.constant(x.clone());
            let y = net.forward(tape, &p, xv, &complete, &readout)?;
            let sq = tape.mul(y, y)?;
            Ok::<_, crate::error::TensorError>(tape.sum_all(sq))
        });
        let point = store.get(name).unwrap().cast::<f64>().into_data();
        let coords: Vec<usize> = (0..point.len()).collect();
        let r = grad_check_coords(&f, &point, 1e-6, 1e-3, &coords);
        assert!(r.passed(), "{name}: {r:?}");
    }
}

fn render_stack(stages: usize) -> RenderStack {
    RenderStack::new(
        "r",
        RenderConfig {
            feature_width: 4,
            stages,
            base_width: 4,
            levels: 2,
        },
    )
}

fn run_render(stack: &RenderStack, store: &ParameterStore, g: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, store, |_| false);
    let gv = tape.constant(g.clone());
    let y = stack.forward(&mut tape, &p, gv).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_residual_stages_reduce_to_last_stage() {
    let stack = render_stack(3);
    let mut store = ParameterStore::new();
    stack.init(&mut store, &mut rng(20)).unwrap();
    let g = random_tensor(&mut rng(21), &[8, 8, 4], -1.0, 1.0).cast::<f32>();
    let full = run_render(&stack, &store, &g);

    let last = UNet::new("r.s2", stack.config.unet_config(true));
    let mut tape = Tape::<f32>::new();
    let p = ParamBinding::bind(&mut tape, &store, |_| false);
    let gv = tape.constant(g.clone());
    let y = last.forward(&mut tape, &p, gv).unwrap();
    let y = tape.sigmoid(y);
    assert_eq!(full.data(), tape.value(y).data());
}

#[test]
fn single_stage_maps_features_to_rgb_in_unit_interval() {
    for stages in [1, 3] {
        let stack = render_stack(stages);
        let mut store = ParameterStore::new();
        stack.init(&mut store, &mut rng(22)).unwrap();
        // Perturb residual outputs so all stages contribute.
        for (name, t) in store.clone().iter() {
            if name.contains(".out.") {
                store.set(name, t.map(|v| v + 0.05));
            }
        }
        let g = random_tensor(&mut rng(23), &[8, 8, 4], -3.0, 3.0).cast::<f32>();
        let out = run_render(&stack, &store, &g);
        assert_eq!(out.shape(), &[8, 8, 3]);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn render_gradient_matches_finite_differences() {
    let stack = render_stack(2);
    let mut store = ParameterStore::new();
    stack.init(&mut store, &mut rng(24)).unwrap();
    for (name, t) in store.clone().iter() {
        if name.starts_with("r.s0.out") {
            store.set(name, t.map(|v| v + 0.1));
        }
    }
    let g = random_tensor(&mut rng(25), &[8, 8, 4], -1.0, 1.0);
    for name in ["r.s0.out.w", "r.s1.in.w"] {
        let shape = store.get(name).unwrap().shape().to_vec();
        let f = TapeFn::new(&shape, |tape, v| {
            let mut p = ParamBinding::bind(tape, &store, |_| false);
            p.set(name, v);
            let gv = tape.constant(g.clone());
            let y = stack.forward(tape, &p, gv)?;
            Ok::<_, Error>(tape.mean_all(y))
        });
        let point = store.get(name).unwrap().cast::<f64>().into_data();
        let coords: Vec<usize> = (0..point.len()).step_by(5).collect();
        let r = grad_check_coords(&f, &point, 1e-6, 1e-3, &coords);
        assert!(r.passed(), "{name}: {r:?}");
    }
}
