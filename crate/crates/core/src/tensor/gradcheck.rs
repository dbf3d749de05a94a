//! Central-difference gradient checking in 64-bit arithmetic.

use super::{Tape, Tensor, Var};

/// A scalar function with a claimed gradient.
pub trait Differentiable {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative error used throughout: `|a − n| / max(floor, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(floor)
}

/// Rounding error bound of a central difference with values `fp`, `fm`.
pub fn difference_noise(fp: f64, fm: f64, step: f64) -> f64 {
    4.0 * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / (2.0 * step)
}

/// Checks every coordinate of `point`.
pub fn grad_check(f: &dyn Differentiable, point: &[f64], step: f64, tolerance: f64) -> GradCheck {
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, step, tolerance, &coords)
}

/// Checks only the listed coordinates; used for large parameter vectors.
///
/// Where the true derivative is near zero the central difference is pure
/// rounding noise, so the denominator never drops below
/// `difference_noise / tolerance`: a coordinate passes when it agrees to
/// `tolerance` relative or to within the resolution of the difference.
pub fn grad_check_coords(
    f: &dyn Differentiable,
    point: &[f64],
    step: f64,
    tolerance: f64,
    coords: &[usize],
) -> GradCheck {
    let analytic = f.gradient(point);
    let mut x = point.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
    };
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f.value(&x);
        x[i] = orig - step;
        let fm = f.value(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let floor = (difference_noise(fp, fm, step) / tolerance).max(1e-8);
        let err = relative_error(analytic[i], numeric, floor);
        if err > report.max_rel_error || !err.is_finite() {
            report = GradCheck {
                max_rel_error: if err.is_finite() { err } else { f64::INFINITY },
                worst: i,
                analytic: analytic[i],
                numeric,
                tolerance,
            };
        }
    }
    report
}

/// Adapts a tape-building closure into a [`Differentiable`]: the point is
/// placed on a fresh `f64` tape as a single parameter of `shape`, and the
/// closure must return a single-element loss.
pub struct TapeFn<F> {
    shape: Vec<usize>,
    build: F,
}

impl<F, E> TapeFn<F>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, E>,
    E: std::fmt::Debug,
{
    pub fn new(shape: &[usize], build: F) -> Self {
        Self {
            shape: shape.to_vec(),
            build,
        }
    }

    fn run(&self, x: &[f64]) -> (Tape<f64>, Var, Var) {
        let mut tape = Tape::new();
        let input = tape.param(Tensor::new(&self.shape, x.to_vec()).expect("point matches shape"));
        let loss = (self.build)(&mut tape, input).expect("function under test failed");
        (tape, input, loss)
    }
}

impl<F, E> Differentiable for TapeFn<F>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, E>,
    E: std::fmt::Debug,
{
    fn value(&self, x: &[f64]) -> f64 {
        let (tape, _, loss) = self.run(x);
        tape.value(loss).item()
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (tape, input, loss) = self.run(x);
        let grads = tape.backward(loss).expect("scalar loss");
        grads.wrt(&tape, input).into_data()
    }
}
