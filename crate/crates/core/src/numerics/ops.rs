//! Differentiable primitives. Each forward has a matching `*_backward` that maps an output
//! cotangent to input cotangents.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides address exactly those
    // row-major (or transposed row-major) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn spatial(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    x.expect_rank(3, what)?;
    let s = x.shape();
    Ok((s[0], s[1], s[2]))
}

/// Pointwise linear map over channels: `out[d,h,w] = sum_c weight[d,c] * x[c,h,w] + bias[d]`.
pub fn conv1x1(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (d_in, h, w) = spatial(x, "conv1x1 input")?;
    weight.expect_rank(2, "conv1x1 weight")?;
    let (d_out, w_in) = (weight.shape()[0], weight.shape()[1]);
    if w_in != d_in {
        return Err(Error::Dimension(format!(
            "conv1x1: weight axis 1 has {w_in} channels but input axis 0 has {d_in}"
        )));
    }
    if bias.len() != d_out {
        return Err(Error::Dimension(format!(
            "conv1x1: bias has {} entries but weight axis 0 has {d_out}",
            bias.len()
        )));
    }
    let p = h * w;
    let mut out = vec![0.0; d_out * p];
    for (d, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[d]);
    }
    gemm(d_out, d_in, p, 1.0, weight.data(), false, x.data(), false, 1.0, &mut out);
    Tensor::new(&[d_out, h, w], out)
}

/// Cotangents `(dx, dweight, dbias)` of [`conv1x1`].
pub fn conv1x1_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (d_in, h, w) = spatial(x, "conv1x1 input")?;
    let d_out = weight.shape()[0];
    if dy.shape() != [d_out, h, w] {
        return Err(Error::Dimension(format!(
            "conv1x1 cotangent shape {:?}, expected {:?}",
            dy.shape(),
            [d_out, h, w]
        )));
    }
    let p = h * w;
    let mut dx = vec![0.0; d_in * p];
    gemm(d_in, d_out, p, 1.0, weight.data(), true, dy.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; d_out * d_in];
    gemm(d_out, p, d_in, 1.0, dy.data(), false, x.data(), true, 0.0, &mut dw);
    let db = dy.data().chunks(p).map(|c| c.iter().sum()).collect();
    Ok((
        Tensor::new(&[d_in, h, w], dx)?,
        Tensor::new(&[d_out, d_in], dw)?,
        Tensor::new(&[d_out], db)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes the cotangent where the input was strictly positive; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Softmax over every entry of `r` jointly, computed after subtracting the maximum.
pub fn global_softmax(r: &Tensor) -> Tensor {
    let mut out = r.clone();
    softmax_in_place(out.data_mut());
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Given the softmax output `a` and its cotangent `da`, returns `a * (da - <a, da>)`.
pub fn global_softmax_backward(a: &Tensor, da: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(da)?;
    let mut dr = vec![0.0; a.len()];
    softmax_backward_slice(a.data(), da.data(), &mut dr);
    Tensor::new(a.shape(), dr)
}

pub(crate) fn softmax_backward_slice(a: &[f64], da: &[f64], dr: &mut [f64]) {
    let inner: f64 = a.iter().zip(da).map(|(x, g)| x * g).sum();
    for ((o, &x), &g) in dr.iter_mut().zip(a).zip(da) {
        *o = x * (g - inner);
    }
}

/// Coordinatewise maximum of equally shaped tensors, plus the winning argument index per
/// coordinate (lowest index on ties).
pub fn elementwise_max(xs: &[Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Argument("elementwise_max needs at least one tensor".into()))?;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if x.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "elementwise_max: argument {i} has shape {:?}, argument 0 has {:?}",
                x.shape(),
                first.shape()
            )));
        }
    }
    let mut out = first.clone();
    let mut arg = vec![0usize; first.len()];
    for (k, x) in xs.iter().enumerate().skip(1) {
        for ((o, a), &v) in out.data_mut().iter_mut().zip(arg.iter_mut()).zip(x.data()) {
            if v > *o {
                *o = v;
                *a = k;
            }
        }
    }
    Ok((out, arg))
}

/// Routes the cotangent of [`elementwise_max`] to the recorded winners.
pub fn elementwise_max_backward(argmax: &[usize], count: usize, dy: &Tensor) -> Result<Vec<Tensor>> {
    if argmax.len() != dy.len() {
        return Err(Error::Dimension(format!(
            "argmax has {} entries, cotangent has {}",
            argmax.len(),
            dy.len()
        )));
    }
    let mut grads = vec![Tensor::zeros(dy.shape()); count];
    for (i, (&k, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        grads[k].data_mut()[i] = g;
    }
    Ok(grads)
}

fn validate_axes(x: &Tensor, axes: &[usize]) -> Result<Vec<bool>> {
    let mut reduce = vec![false; x.rank()];
    for &a in axes {
        if a >= x.rank() {
            return Err(Error::Argument(format!(
                "avg_pool axis {a} invalid for rank {}",
                x.rank()
            )));
        }
        if reduce[a] {
            return Err(Error::Argument(format!("avg_pool axis {a} listed twice")));
        }
        reduce[a] = true;
    }
    Ok(reduce)
}

/// Arithmetic mean over `axes`; those axes are removed. Reducing every axis yields shape `[1]`.
pub fn avg_pool(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let reduce = validate_axes(x, axes)?;
    let kept: Vec<usize> = x
        .shape()
        .iter()
        .zip(&reduce)
        .filter(|(_, &r)| !r)
        .map(|(&e, _)| e)
        .collect();
    let out_shape = if kept.is_empty() { vec![1] } else { kept };
    let count: usize = x.shape().iter().zip(&reduce).filter(|(_, &r)| r).map(|(&e, _)| e).product();
    let mut out = Tensor::zeros(&out_shape);
    let map = reduced_index_map(x.shape(), &reduce);
    for (v, &o) in x.data().iter().zip(&map) {
        out.data_mut()[o] += v;
    }
    let inv = 1.0 / count as f64;
    for v in out.data_mut() {
        *v *= inv;
    }
    Ok(out)
}

/// Spreads the pooled cotangent evenly back over the reduced axes.
pub fn avg_pool_backward(input_shape: &[usize], axes: &[usize], dy: &Tensor) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let reduce = validate_axes(&probe, axes)?;
    let count: usize = input_shape.iter().zip(&reduce).filter(|(_, &r)| r).map(|(&e, _)| e).product();
    let map = reduced_index_map(input_shape, &reduce);
    let inv = 1.0 / count as f64;
    Ok(Tensor::from_fn(input_shape, |i| dy.data()[map[i]] * inv))
}

/// Flat output offset for each flat input offset after dropping the reduced axes.
fn reduced_index_map(shape: &[usize], reduce: &[bool]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if !reduce[i] {
            out_strides[i] = acc;
            acc *= shape[i];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Geometry of a square-kernel strided convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Unfolds `x` (`C x H x W`) into `(C*k*k) x (Ho*Wo)` patch columns.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (g.output_extent(h), g.output_extent(w));
    let k = g.kernel;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: accumulates patch columns back into a `C x H x W` buffer.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.output_extent(h), g.output_extent(w));
    let k = g.kernel;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward state of [`conv2d`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Vec<f64>,
    input_shape: [usize; 3],
}

/// Strided square-kernel convolution. `weight` is `C_out x C_in x k x k`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, g: ConvGeometry) -> Result<(Tensor, Conv2dCache)> {
    let (c, h, w) = spatial(x, "conv2d input")?;
    weight.expect_rank(4, "conv2d weight")?;
    let ws = weight.shape();
    if ws[1] != c || ws[2] != g.kernel || ws[3] != g.kernel {
        return Err(Error::Dimension(format!(
            "conv2d: weight {ws:?} incompatible with {c} input channels and kernel {}",
            g.kernel
        )));
    }
    if bias.len() != ws[0] {
        return Err(Error::Dimension(format!(
            "conv2d: bias has {} entries for {} output channels",
            bias.len(),
            ws[0]
        )));
    }
    if h + 2 * g.padding < g.kernel || w + 2 * g.padding < g.kernel {
        return Err(Error::Dimension(format!("conv2d: input {h}x{w} smaller than kernel")));
    }
    let c_out = ws[0];
    let (cols, ho, wo) = im2col(x.data(), c, h, w, g);
    let p = ho * wo;
    let mut out = vec![0.0; c_out * p];
    for (d, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[d]);
    }
    gemm(c_out, c * g.kernel * g.kernel, p, 1.0, weight.data(), false, &cols, false, 1.0, &mut out);
    Ok((Tensor::new(&[c_out, ho, wo], out)?, Conv2dCache { cols, input_shape: [c, h, w] }))
}

/// Cotangents `(dx, dweight, dbias)` of [`conv2d`]. Weight and bias cotangents are
/// accumulated into `dweight` / `dbias`; `dx` is skipped when `need_input` is false.
pub fn conv2d_backward(
    cache: &Conv2dCache,
    weight: &Tensor,
    g: ConvGeometry,
    dy: &Tensor,
    dweight: &mut Tensor,
    dbias: &mut Tensor,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let [c, h, w] = cache.input_shape;
    let c_out = weight.shape()[0];
    let ckk = c * g.kernel * g.kernel;
    let p = g.output_extent(h) * g.output_extent(w);
    if dy.len() != c_out * p {
        return Err(Error::Dimension(format!(
            "conv2d cotangent has {} entries, expected {}",
            dy.len(),
            c_out * p
        )));
    }
    gemm(c_out, p, ckk, 1.0, dy.data(), false, &cache.cols, true, 1.0, dweight.data_mut());
    for (db, row) in dbias.data_mut().iter_mut().zip(dy.data().chunks(p)) {
        *db += row.iter().sum::<f64>();
    }
    if !need_input {
        return Ok(None);
    }
    let mut dcols = vec![0.0; ckk * p];
    gemm(ckk, c_out, p, 1.0, weight.data(), true, dy.data(), false, 0.0, &mut dcols);
    Ok(Some(Tensor::new(&[c, h, w], col2im(&dcols, c, h, w, g))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn conv1x1_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (din, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dout = w.shape()[0];
        let mut out = Tensor::zeros(&[dout, h, wd]);
        for d in 0..dout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b.data()[d];
                    for c in 0..din {
                        acc += w.get(&[d, c]) * x.get(&[c, i, j]);
                    }
                    out.set(&[d, i, j], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv1x1_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 2, 2], &mut rng);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(conv1x1(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
        let out = conv1x1(&x, &Tensor::zeros(&[2, 3]), &b).unwrap();
        for d in 0..2 {
            for p in 0..4 {
                assert_eq!(out.data()[d * 4 + p], b.data()[d]);
            }
        }
    }

    #[test]
    fn conv1x1_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 2, 2], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let got = conv1x1(&x, &w, &b).unwrap();
        let want = conv1x1_oracle(&x, &w, &b);
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1x1_names_bad_axes() {
        let x = Tensor::zeros(&[3, 2, 2]);
        let err = conv1x1(&x, &Tensor::zeros(&[4, 5]), &Tensor::zeros(&[4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 1") && msg.contains("axis 0"), "{msg}");
        assert!(conv1x1(&x, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn conv1x1_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 2, 3], &mut rng);
        let y = random(&[3, 2, 3], &mut rng);
        let w = random(&[2, 3], &mut rng);
        let zero = Tensor::zeros(&[2]);
        let (a, b) = (1.7, -0.3);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv1x1(&mix, &w, &zero).unwrap();
        let fx = conv1x1(&x, &w, &zero).unwrap();
        let fy = conv1x1(&y, &w, &zero).unwrap();
        let rhs = fx.zip_map(&fy, |p, q| a * p + b * q).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let pos = Tensor::new(&[2], vec![0.1, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random(&[50], &mut rng);
        for (o, i) in relu(&r).data().iter().zip(r.data()) {
            assert_eq!(*o, if *i > 0.0 { *i } else { 0.0 });
        }
    }

    #[test]
    fn softmax_cases() {
        let a = global_softmax(&Tensor::full(&[8, 4], 0.7));
        assert!(a.data().iter().all(|&v| (v - 1.0 / 32.0).abs() < 1e-15));
        let mut r = Tensor::zeros(&[4, 4]);
        r.set(&[2, 1], 50.0);
        assert!(global_softmax(&r).get(&[2, 1]) > 0.999);
    }

    #[test]
    fn softmax_matches_direct_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random(&[4, 4], &mut rng).scale(3.0);
        let a = global_softmax(&r);
        let z: f64 = r.data().iter().map(|v| v.exp()).sum();
        for (got, v) in a.data().iter().zip(r.data()) {
            assert!((got - v.exp() / z).abs() < 1e-12);
        }
        let shifted = global_softmax(&r.map(|v| v + 123.4));
        for (p, q) in a.data().iter().zip(shifted.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!((a.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_survives_large_responses() {
        let r = Tensor::new(&[2, 2], vec![1000.0, 999.0, -1000.0, 0.0]).unwrap();
        let a = global_softmax(&r);
        assert!(a.all_finite());
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_cases() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let (out, arg) = elementwise_max(std::slice::from_ref(&x)).unwrap();
        assert_eq!(out, x);
        assert_eq!(arg, vec![0, 0, 0]);
        let (out, arg) = elementwise_max(&[x.clone(), x.clone(), x.clone()]).unwrap();
        assert_eq!(out, x);
        assert_eq!(arg, vec![0, 0, 0]);
        let grads = elementwise_max_backward(&arg, 3, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(grads[0].data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads[1].sum() + grads[2].sum(), 0.0);
        assert!(matches!(elementwise_max(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn avg_pool_cases() {
        let c = Tensor::full(&[2, 3, 4], 2.5);
        assert_eq!(avg_pool(&c, &[0, 1, 2]).unwrap().data(), &[2.5]);
        let x = Tensor::new(&[2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(avg_pool(&x, &[0, 1]).unwrap().data(), &[4.0]);
        assert_eq!(avg_pool(&x, &[0]).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(avg_pool(&x, &[1]).unwrap().data(), &[2.0, 6.0]);
        assert!(matches!(avg_pool(&x, &[2]), Err(Error::Argument(_))));
    }

    #[test]
    fn avg_pool_column_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[7, 5], &mut rng);
        let got = avg_pool(&x, &[0]).unwrap();
        for d in 0..5 {
            let mean = (0..7).map(|n| x.get(&[n, d])).sum::<f64>() / 7.0;
            assert!((got.data()[d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeometry { kernel: 3, stride: 2, padding: 1 };
        let x = random(&[2, 5, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let (y, _) = conv2d(&x, &w, &b, g).unwrap();
        assert_eq!(y.shape(), &[3, 3, 2]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    acc += w.get(&[o, c, ky, kx]) * x.get(&[c, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.get(&[o, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = ConvGeometry { kernel: 3, stride: 2, padding: 1 };
        let x = random(&[2, 6, 4], &mut rng);
        let (cols, ho, wo) = im2col(x.data(), 2, 6, 4, g);
        let c = random(&[2 * 9 * ho * wo], &mut rng);
        let lhs: f64 = cols.iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let back = col2im(c.data(), 2, 6, 4, g);
        let rhs: f64 = back.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
