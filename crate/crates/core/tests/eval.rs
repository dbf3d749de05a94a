use std::cell::RefCell;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svs_core::eval::*;
use svs_core::pipeline::{setup_scene, Model, ModelConfig};
use svs_core::synthetic::{build_synthetic_scene, SyntheticSceneSpec};
use svs_core::tensor::Tensor;

fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0f32))
}

#[test]
fn psnr_cap_offset_and_symmetry() {
    let a = random_image(1, 16, 16).map(|v| v * 0.8);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    let c = random_image(2, 16, 16);
    assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
    assert!(psnr(&a, &random_image(3, 8, 16)).is_err());
}

#[test]
fn psnr_decreases_with_noise() {
    let img = random_image(4, 32, 32).map(|v| 0.25 + 0.5 * v);
    let noise = random_image(5, 32, 32);
    let noisy = |amp: f32| Tensor::from_fn(&[32, 32, 3], |i| img.data()[i] + amp * (noise.data()[i] - 0.5));
    let p: Vec<f64> = [0.02, 0.1, 0.3].iter().map(|&a| psnr(&img, &noisy(a)).unwrap()).collect();
    assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
}

#[test]
fn ssim_identity_inversion_symmetry_and_size() {
    let a = random_image(6, 24, 20);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let inv = a.map(|v| 1.0 - v);
    assert!(ssim(&a, &inv).unwrap() < 1.0);
    let b = random_image(7, 24, 20);
    let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&ab));
    assert!(ssim(&random_image(8, 10, 30), &random_image(9, 10, 30)).is_err());
}

/// Direct per-window evaluation with a 2-D Gaussian.
fn ssim_direct(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let y = |t: &Tensor<f32>, r: usize, c: usize| {
        let p = &t.data()[(r * w + c) * 3..(r * w + c) * 3 + 3];
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut k = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let mut acc = 0.0;
    let mut n = 0;
    for r0 in 0..=h - 11 {
        for c0 in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    mx += k[i][j] / total * y(a, r0 + i, c0 + j);
                    my += k[i][j] / total * y(b, r0 + i, c0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (dx, dy) = (y(a, r0 + i, c0 + j) - mx, y(b, r0 + i, c0 + j) - my);
                    vx += k[i][j] / total * dx * dx;
                    vy += k[i][j] / total * dy * dy;
                    cxy += k[i][j] / total * dx * dy;
                }
            }
            let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn ssim_matches_direct_formula() {
    let a = random_image(10, 16, 16);
    let b = Tensor::from_fn(&[16, 16, 3], |i| (a.data()[i] * 0.7 + 0.3 * random_image(11, 16, 16).data()[i]).min(1.0));
    let got = ssim(&a, &b).unwrap();
    let want = ssim_direct(&a, &b);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn held_out_report_has_one_row_per_view() {
    let scene = build_synthetic_scene(&SyntheticSceneSpec::fixture()).unwrap();
    let model = Model::new(ModelConfig::passthrough()).unwrap();
    let params = model.init(0).unwrap();
    let bundle = setup_scene(scene.images(), scene.cameras(), scene.mesh.clone(), &model, &params).unwrap();
    let cams: Vec<_> = scene.heldout.iter().map(|v| v.camera.clone()).collect();
    let calls = RefCell::new(Vec::new());
    let report = evaluate_views(&bundle, &model, &params, &cams, |i| {
        calls.borrow_mut().push(i);
        scene.heldout[i].image.clone()
    })
    .unwrap();
    assert_eq!(*calls.borrow(), vec![0, 1]);
    assert_eq!(report.views.len(), 2);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "view_id,psnr,ssim");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    assert!(report.mean_psnr().is_finite() && report.mean_psnr() > 0.0);
    assert!(report.summary().contains("2 views"));
    assert!(evaluate_views(&bundle, &model, &params, &[], |_| unreachable!()).is_err());
}
