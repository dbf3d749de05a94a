//! PSNR, SSIM and held-out view scoring.

use std::fmt::Write as _;

use crate::error::{Error, TensorError};
use crate::geometry::Camera;
use crate::pipeline::{synthesize_view, Model, SceneBundle};
use crate::tensor::{ParameterStore, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `10·log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, Error> {
    same_shape("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("psnr of empty images".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Luma `0.299 R + 0.587 G + 0.114 B` of an H×W×3 image.
pub fn luma(img: &Tensor<f32>) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an h×w plane with `k`.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with an 11×11 Gaussian window (σ = 1.5),
/// averaged over every window that fits inside the image.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, Error> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Invalid(format!("ssim expects H×W×3 images, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let (x, y) = (luma(a), luma(b));
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter(&x, h, w, &k);
    let my = filter(&y, h, w, &k);
    let sxx = filter(&prod(&x, &x), h, w, &k);
    let syy = filter(&prod(&y, &y), h, w, &k);
    let sxy = filter(&prod(&x, &y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetric {
    pub view_id: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub views: Vec<ViewMetric>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        self.views.iter().map(|v| v.psnr).sum::<f64>() / self.views.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.views.iter().map(|v| v.ssim).sum::<f64>() / self.views.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view_id,psnr,ssim\n");
        for v in &self.views {
            let _ = writeln!(s, "{},{:.4},{:.6}", v.view_id, v.psnr, v.ssim);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} views: mean PSNR {:.3} dB, mean SSIM {:.4}",
            self.views.len(),
            self.mean_psnr(),
            self.mean_ssim()
        )
    }
}

/// Synthesizes each held-out camera, then asks `truth` for its ground truth
/// and scores it. `truth(i)` is called only after view `i` is synthesized.
pub fn evaluate_views(
    bundle: &SceneBundle,
    model: &Model,
    params: &ParameterStore,
    cameras: &[Camera],
    mut truth: impl FnMut(usize) -> Tensor<f32>,
) -> Result<MetricReport, Error> {
    if cameras.is_empty() {
        return Err(Error::Invalid("no held-out views to evaluate".into()));
    }
    let mut views = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let out = synthesize_view(bundle, model, params, cam)?;
        let gt = truth(i);
        views.push(ViewMetric {
            view_id: i,
            psnr: psnr(&out.image, &gt)?,
            ssim: ssim(&out.image, &gt)?,
        });
    }
    Ok(MetricReport { views })
}

/// Scores the held-out views of a scene.
pub fn evaluate_scene(
    bundle: &SceneBundle,
    heldout: &[crate::io::View],
    model: &Model,
    params: &ParameterStore,
) -> Result<MetricReport, Error> {
    let cams: Vec<Camera> = heldout.iter().map(|v| v.camera.clone()).collect();
    evaluate_views(bundle, model, params, &cams, |i| heldout[i].image.clone())
}
