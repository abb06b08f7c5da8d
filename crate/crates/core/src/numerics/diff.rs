//! Forward values paired with their backward rules, and the central-difference harness
//! used to verify every backward rule.

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::Tensor;

type Backward = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

/// A forward output together with the map from its cotangent to input cotangents.
pub struct DiffRecord {
    pub output: Tensor,
    backward: Backward,
}

impl DiffRecord {
    pub fn new(output: Tensor, backward: impl Fn(&Tensor) -> Result<Vec<Tensor>> + 'static) -> Self {
        Self { output, backward: Box::new(backward) }
    }

    pub fn backward(&self, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        self.output.expect_same_shape(cotangent)?;
        (self.backward)(cotangent)
    }

    /// Chains a scalar-valued readout `g` after this record, yielding a record whose
    /// cotangents are the input cotangents of `self`.
    pub fn then<G>(self, g: G) -> Result<DiffRecord>
    where
        G: FnOnce(&Tensor) -> Result<DiffRecord>,
    {
        let outer = g(&self.output)?;
        let inner = self.backward;
        let DiffRecord { output, backward: outer_bw } = outer;
        Ok(DiffRecord::new(output, move |cot| {
            let mid = outer_bw(cot)?;
            inner(&mid[0])
        }))
    }
}

/// Records [`ops::conv1x1`]; cotangents are `[dx, dweight, dbias]`.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<DiffRecord> {
    let out = ops::conv1x1(x, weight, bias)?;
    let (x, weight) = (x.clone(), weight.clone());
    Ok(DiffRecord::new(out, move |dy| {
        let (dx, dw, db) = ops::conv1x1_backward(&x, &weight, dy)?;
        Ok(vec![dx, dw, db])
    }))
}

pub fn relu(x: &Tensor) -> DiffRecord {
    let saved = x.clone();
    DiffRecord::new(ops::relu(x), move |dy| Ok(vec![ops::relu_backward(&saved, dy)?]))
}

pub fn global_softmax(r: &Tensor) -> DiffRecord {
    let a = ops::global_softmax(r);
    let saved = a.clone();
    DiffRecord::new(a, move |da| Ok(vec![ops::global_softmax_backward(&saved, da)?]))
}

/// Records [`ops::elementwise_max`]; one cotangent per argument.
pub fn elementwise_max(xs: &[Tensor]) -> Result<DiffRecord> {
    let (out, arg) = ops::elementwise_max(xs)?;
    let count = xs.len();
    Ok(DiffRecord::new(out, move |dy| ops::elementwise_max_backward(&arg, count, dy)))
}

pub fn avg_pool(x: &Tensor, axes: &[usize]) -> Result<DiffRecord> {
    let out = ops::avg_pool(x, axes)?;
    let shape = x.shape().to_vec();
    let axes = axes.to_vec();
    Ok(DiffRecord::new(out, move |dy| Ok(vec![ops::avg_pool_backward(&shape, &axes, dy)?])))
}

/// Fixed linear functional `x -> <c, x>`, used to turn tensor-valued maps into scalars.
pub fn linear_readout(x: &Tensor, coeffs: &Tensor) -> Result<DiffRecord> {
    let value = x.dot(coeffs)?;
    let coeffs = coeffs.clone();
    Ok(DiffRecord::new(Tensor::scalar(value), move |dy| Ok(vec![coeffs.scale(dy.data()[0])])))
}

/// Largest relative disagreement between the analytic gradient of a scalar function at `x0`
/// and its central-difference estimate with the given `step`.
///
/// The relative error per coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// where `floor` is `1e-8` raised to the roundoff level of the difference quotient,
/// `1e6 * eps * max(|f(x0)|, 1) / step`. Coordinates whose true gradient vanishes (for
/// example shift-invariant parameters feeding a softmax) then compare at that noise level
/// instead of dividing roundoff by `1e-8`.
pub fn finite_diff_check<F>(f: F, x0: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<DiffRecord>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic = {
        let rec = f(x0)?;
        if rec.output.len() != 1 {
            return Err(Error::Argument(format!(
                "finite_diff_check needs a scalar function, output shape is {:?}",
                rec.output.shape()
            )));
        }
        let seed = Tensor::new(rec.output.shape(), vec![1.0])?;
        (rec.backward(&seed)?.swap_remove(0), rec.output.data()[0])
    };
    let (analytic, value) = analytic;
    x0.expect_same_shape(&analytic)?;
    let floor = error_floor(value, step);
    compare(|x| Ok(f(x)?.output.data()[0]), x0, &analytic, step, floor)
}

/// Denominator floor for the relative error at function value `value`.
pub fn error_floor(value: f64, step: f64) -> f64 {
    (1e6 * f64::EPSILON * value.abs().max(1.0) / step).max(1e-8)
}

/// Same error measure as [`finite_diff_check`] against a precomputed analytic gradient.
pub fn numeric_vs_analytic<F>(f: F, x0: &Tensor, analytic: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let floor = error_floor(f(x0)?, step);
    compare(f, x0, analytic, step, floor)
}

fn compare<F>(f: F, x0: &Tensor, analytic: &Tensor, step: f64, floor: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    x0.expect_same_shape(analytic)?;
    let mut worst: f64 = 0.0;
    let mut probe = x0.clone();
    for i in 0..x0.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
