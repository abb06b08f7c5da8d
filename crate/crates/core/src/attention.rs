//! Multi-attention module: `K` submodules each map per-frame features to a spatial
//! distribution; the distributions re-weight the features, the re-weighted copies are fused
//! by an elementwise maximum plus a residual shortcut, and the result is pooled over frames
//! and space into one video embedding.
//!
//! Features are laid out `N x D x H x W` (frames, channels, rows, columns).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, gemm};
use crate::numerics::Tensor;

/// Parameters of one multi-attention module. Submodule `k` owns row `k` of every tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MamParams {
    /// `K x D1 x D`
    pub inner_weight: Tensor,
    /// `K x D1`
    pub inner_bias: Tensor,
    /// `K x D1`; the outer map has a single output channel.
    pub outer_weight: Tensor,
    /// `K`
    pub outer_bias: Tensor,
}

impl MamParams {
    pub fn zeros(k: usize, d: usize, d1: usize) -> Self {
        Self {
            inner_weight: Tensor::zeros(&[k, d1, d]),
            inner_bias: Tensor::zeros(&[k, d1]),
            outer_weight: Tensor::zeros(&[k, d1]),
            outer_bias: Tensor::zeros(&[k]),
        }
    }

    /// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init<R: Rng + ?Sized>(k: usize, d: usize, d1: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || d1 == 0 || d1 >= d {
            return Err(Error::Config(format!(
                "attention module needs K >= 1 and 0 < D1 < D, got K={k} D={d} D1={d1}"
            )));
        }
        let mut p = Self::zeros(k, d, d1);
        let a = 1.0 / (d as f64).sqrt();
        p.inner_weight.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        let a = 1.0 / (d1 as f64).sqrt();
        p.outer_weight.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        Ok(p)
    }

    pub fn submodules(&self) -> usize {
        self.inner_weight.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.inner_weight.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.inner_weight.shape()[2]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("inner_weight", &self.inner_weight),
            ("inner_bias", &self.inner_bias),
            ("outer_weight", &self.outer_weight),
            ("outer_bias", &self.outer_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("inner_weight", &mut self.inner_weight),
            ("inner_bias", &mut self.inner_bias),
            ("outer_weight", &mut self.outer_weight),
            ("outer_bias", &mut self.outer_bias),
        ]
    }

    fn submodule(&self, k: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        let (d1, d) = (self.bottleneck(), self.channels());
        let iw = Tensor::new(&[d1, d], self.inner_weight.data()[k * d1 * d..(k + 1) * d1 * d].to_vec());
        let ib = Tensor::new(&[d1], self.inner_bias.data()[k * d1..(k + 1) * d1].to_vec());
        let ow = Tensor::new(&[1, d1], self.outer_weight.data()[k * d1..(k + 1) * d1].to_vec());
        let ob = Tensor::new(&[1], vec![self.outer_bias.data()[k]]);
        (iw.unwrap(), ib.unwrap(), ow.unwrap(), ob.unwrap())
    }
}

/// `N x K x H x W` attentive distributions; each `(n, k)` slice is a distribution over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack(Tensor);

impl AttentionStack {
    /// Wraps a tensor after checking that every slice is nonnegative and sums to 1.
    pub fn new(values: Tensor) -> Result<Self> {
        values.expect_rank(4, "attention stack")?;
        let p = values.shape()[2] * values.shape()[3];
        for (i, slice) in values.data().chunks(p).enumerate() {
            if slice.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Domain(format!("attention slice {i} has a negative or NaN entry")));
            }
            let s: f64 = slice.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!("attention slice {i} sums to {s}")));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn submodules(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.0.shape()[2], self.0.shape()[3])
    }

    /// Flattened `K x (H*W)` attention matrix of frame `n`.
    pub fn frame_matrix(&self, n: usize) -> Tensor {
        let (k, p) = (self.submodules(), self.grid().0 * self.grid().1);
        Tensor::new(&[k, p], self.0.data()[n * k * p..(n + 1) * k * p].to_vec()).unwrap()
    }
}

/// `N x D x H x W` features after max-fusion and the residual shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures(pub Tensor);

impl FusedFeatures {
    pub fn values(&self) -> &Tensor {
        &self.0
    }
}

fn feature_dims(f: &Tensor) -> Result<(usize, usize, usize, usize)> {
    f.expect_rank(4, "feature volume")?;
    let s = f.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Per-submodule responses `r[n,k] = outer(relu(inner(f[n])))`, shape `N x K x H x W`.
pub fn attention_responses(f: &Tensor, params: &MamParams) -> Result<Tensor> {
    let (n, d, h, w) = feature_dims(f)?;
    if d != params.channels() {
        return Err(Error::Dimension(format!(
            "features have {d} channels, attention module expects {}",
            params.channels()
        )));
    }
    let k = params.submodules();
    let subs: Vec<_> = (0..k).map(|i| params.submodule(i)).collect();
    let mut out = Vec::with_capacity(n * k * h * w);
    for frame in 0..n {
        let fr = f.slice_outer(frame);
        for (iw, ib, ow, ob) in &subs {
            let hidden = ops::relu(&ops::conv1x1(&fr, iw, ib)?);
            out.extend_from_slice(ops::conv1x1(&hidden, ow, ob)?.data());
        }
    }
    Tensor::new(&[n, k, h, w], out)
}

/// Global softmax of every `(n, k)` response map over its `H x W` grid.
pub fn attention_distributions(r: &Tensor) -> Result<AttentionStack> {
    r.expect_rank(4, "attention responses")?;
    let mut a = r.clone();
    let p = r.shape()[2] * r.shape()[3];
    for slice in a.data_mut().chunks_mut(p) {
        ops::softmax_in_place(slice);
    }
    Ok(AttentionStack(a))
}

/// `x[n,k,d] = a[n,k] * f[n,d]` (Hadamard product on the grid), shape `N x K x D x H x W`.
pub fn weight_features(a: &AttentionStack, f: &Tensor) -> Result<Tensor> {
    let (n, d, h, w) = feature_dims(f)?;
    let av = a.values();
    if av.shape()[0] != n || av.shape()[2] != h || av.shape()[3] != w {
        return Err(Error::Dimension(format!(
            "attention {:?} does not match features {:?}",
            av.shape(),
            f.shape()
        )));
    }
    let k = a.submodules();
    let p = h * w;
    let mut out = Vec::with_capacity(n * k * d * p);
    for frame in 0..n {
        for sub in 0..k {
            let att = &av.data()[(frame * k + sub) * p..(frame * k + sub + 1) * p];
            for ch in 0..d {
                let feat = &f.data()[(frame * d + ch) * p..(frame * d + ch + 1) * p];
                out.extend(att.iter().zip(feat).map(|(x, y)| x * y));
            }
        }
    }
    Tensor::new(&[n, k, d, h, w], out)
}

/// `fhat[n] = f[n] + max_k x[n,k]`.
pub fn fuse_frames(x: &Tensor, f: &Tensor) -> Result<FusedFeatures> {
    let (n, d, h, w) = feature_dims(f)?;
    x.expect_rank(5, "weighted features")?;
    let xs = x.shape();
    if xs[0] != n || xs[2] != d || xs[3] != h || xs[4] != w {
        return Err(Error::Dimension(format!(
            "weighted features {xs:?} do not match features {:?}",
            f.shape()
        )));
    }
    let k = xs[1];
    let block = d * h * w;
    let mut out = Vec::with_capacity(n * block);
    for frame in 0..n {
        let parts: Vec<Tensor> = (0..k)
            .map(|sub| {
                let off = (frame * k + sub) * block;
                Tensor::new(&[block], x.data()[off..off + block].to_vec()).unwrap()
            })
            .collect();
        let (m, _) = ops::elementwise_max(&parts)?;
        let base = &f.data()[frame * block..(frame + 1) * block];
        out.extend(base.iter().zip(m.data()).map(|(a, b)| a + b));
    }
    Ok(FusedFeatures(Tensor::new(f.shape(), out)?))
}

/// Temporal mean followed by spatial mean, giving a `D`-vector.
pub fn video_embedding(fhat: &FusedFeatures) -> Result<Tensor> {
    let v = fhat.values();
    feature_dims(v)?;
    let temporal = ops::avg_pool(v, &[0])?;
    ops::avg_pool(&temporal, &[1, 2])
}

/// Full module: responses, distributions, weighting and fusion.
pub fn mam_forward(f: &Tensor, params: &MamParams) -> Result<(FusedFeatures, AttentionStack)> {
    let r = attention_responses(f, params)?;
    let a = attention_distributions(&r)?;
    let x = weight_features(&a, f)?;
    let fused = fuse_frames(&x, f)?;
    Ok((fused, a))
}

/// Intermediate values of [`mam_forward_cached`] needed by [`mam_backward`].
#[derive(Debug, Clone)]
pub struct MamCache {
    features: Tensor,
    /// Pre-activation bottleneck values, `N x K x D1 x P`.
    hidden: Vec<f64>,
    attention: Tensor,
    /// Winning submodule per fused coordinate, `N x D x P`.
    argmax: Vec<u16>,
}

impl MamCache {
    pub fn attention(&self) -> &Tensor {
        &self.attention
    }
}

/// Same result as [`mam_forward`] with every submodule evaluated in one matrix product per
/// frame, also returning what [`mam_backward`] needs.
pub fn mam_forward_cached(f: &Tensor, params: &MamParams) -> Result<(FusedFeatures, AttentionStack, MamCache)> {
    let (n, d, h, w) = feature_dims(f)?;
    if d != params.channels() {
        return Err(Error::Dimension(format!(
            "features have {d} channels, attention module expects {}",
            params.channels()
        )));
    }
    let (k, d1, p) = (params.submodules(), params.bottleneck(), h * w);
    if k > u16::MAX as usize {
        return Err(Error::Config(format!("too many submodules: {k}")));
    }
    let mut hidden = vec![0.0; n * k * d1 * p];
    let mut att = vec![0.0; n * k * p];
    let mut fused = f.data().to_vec();
    let mut argmax = vec![0u16; n * d * p];
    for frame in 0..n {
        let feat = &f.data()[frame * d * p..(frame + 1) * d * p];
        let z = &mut hidden[frame * k * d1 * p..(frame + 1) * k * d1 * p];
        for (row, &b) in z.chunks_mut(p).zip(params.inner_bias.data()) {
            row.fill(b);
        }
        gemm(k * d1, d, p, 1.0, params.inner_weight.data(), false, feat, false, 1.0, z);
        let a = &mut att[frame * k * p..(frame + 1) * k * p];
        for sub in 0..k {
            let r = &mut a[sub * p..(sub + 1) * p];
            r.fill(params.outer_bias.data()[sub]);
            for j in 0..d1 {
                let wgt = params.outer_weight.data()[sub * d1 + j];
                let zr = &z[(sub * d1 + j) * p..(sub * d1 + j + 1) * p];
                for (rv, &zv) in r.iter_mut().zip(zr) {
                    if zv > 0.0 {
                        *rv += wgt * zv;
                    }
                }
            }
            ops::softmax_in_place(r);
        }
        let out = &mut fused[frame * d * p..(frame + 1) * d * p];
        let arg = &mut argmax[frame * d * p..(frame + 1) * d * p];
        for ch in 0..d {
            for q in 0..p {
                let fv = feat[ch * p + q];
                let mut best = a[q] * fv;
                let mut best_k = 0u16;
                for sub in 1..k {
                    let v = a[sub * p + q] * fv;
                    if v > best {
                        best = v;
                        best_k = sub as u16;
                    }
                }
                out[ch * p + q] += best;
                arg[ch * p + q] = best_k;
            }
        }
    }
    let attention = Tensor::new(&[n, k, h, w], att)?;
    let cache = MamCache { features: f.clone(), hidden, attention: attention.clone(), argmax };
    Ok((FusedFeatures(Tensor::new(f.shape(), fused)?), AttentionStack(attention), cache))
}

/// Backward pass of the module. `d_fused` is the cotangent of the fused features and
/// `d_attention`, when given, an extra cotangent on the attention stack (from the attention
/// regularizers). Parameter cotangents are accumulated into `grads`; the feature cotangent is
/// returned.
pub fn mam_backward(
    cache: &MamCache,
    params: &MamParams,
    d_fused: &Tensor,
    d_attention: Option<&Tensor>,
    grads: &mut MamParams,
) -> Result<Tensor> {
    let f = &cache.features;
    f.expect_same_shape(d_fused)?;
    if let Some(da) = d_attention {
        cache.attention.expect_same_shape(da)?;
    }
    let (n, d, h, w) = feature_dims(f)?;
    let (k, d1, p) = (params.submodules(), params.bottleneck(), h * w);
    let mut df = d_fused.data().to_vec();
    let mut da = match d_attention {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; n * k * p],
    };
    let mut dr = vec![0.0; k * p];
    let mut dz = vec![0.0; k * d1 * p];
    for frame in 0..n {
        let feat = &f.data()[frame * d * p..(frame + 1) * d * p];
        let a = &cache.attention.data()[frame * k * p..(frame + 1) * k * p];
        let g = &d_fused.data()[frame * d * p..(frame + 1) * d * p];
        let arg = &cache.argmax[frame * d * p..(frame + 1) * d * p];
        let dfr = &mut df[frame * d * p..(frame + 1) * d * p];
        let dar = &mut da[frame * k * p..(frame + 1) * k * p];
        for i in 0..d * p {
            let q = i % p;
            let m = arg[i] as usize;
            dfr[i] += g[i] * a[m * p + q];
            dar[m * p + q] += g[i] * feat[i];
        }
        for sub in 0..k {
            ops::softmax_backward_slice(
                &a[sub * p..(sub + 1) * p],
                &dar[sub * p..(sub + 1) * p],
                &mut dr[sub * p..(sub + 1) * p],
            );
        }
        let z = &cache.hidden[frame * k * d1 * p..(frame + 1) * k * d1 * p];
        for sub in 0..k {
            let drs = &dr[sub * p..(sub + 1) * p];
            grads.outer_bias.data_mut()[sub] += drs.iter().sum::<f64>();
            for j in 0..d1 {
                let row = sub * d1 + j;
                let wgt = params.outer_weight.data()[row];
                let zr = &z[row * p..(row + 1) * p];
                let dzr = &mut dz[row * p..(row + 1) * p];
                let mut acc = 0.0;
                for q in 0..p {
                    if zr[q] > 0.0 {
                        acc += drs[q] * zr[q];
                        dzr[q] = wgt * drs[q];
                    } else {
                        dzr[q] = 0.0;
                    }
                }
                grads.outer_weight.data_mut()[row] += acc;
                grads.inner_bias.data_mut()[row] += dzr.iter().sum::<f64>();
            }
        }
        gemm(k * d1, p, d, 1.0, &dz, false, feat, true, 1.0, grads.inner_weight.data_mut());
        gemm(d, k * d1, p, 1.0, params.inner_weight.data(), true, &dz, false, 1.0, dfr);
    }
    Tensor::new(f.shape(), df)
}
