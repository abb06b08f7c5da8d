//! Training objectives: attention diversity and concentration regularizers, identity
//! cross-entropy, batch-hard triplet loss and their weighted sum. Every loss comes with its
//! gradient.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionStack;
use crate::error::{Error, Result};
use crate::numerics::ops::softmax_in_place;
use crate::numerics::Tensor;

/// Clamp inside the logarithm of the concentration loss.
pub const CONCENTRATION_EPS: f64 = 1e-8;

/// Smallest square root used when differentiating through `sqrt(a)` at `a = 0`.
const SQRT_FLOOR: f64 = 1e-100;

const ROW_TOL: f64 = 1e-6;

/// `K x (H*W)` attention matrix of one frame; row `k` is submodule `k`'s distribution
/// flattened row-major, so contiguous segments are horizontal stripes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatAttentionMatrix(Tensor);

impl FlatAttentionMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        values.expect_rank(2, "attention matrix")?;
        let p = values.shape()[1];
        for (k, row) in values.data().chunks(p).enumerate() {
            check_distribution(row, &format!("attention row {k}"))?;
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    fn row(&self, k: usize) -> &[f64] {
        let p = self.cols();
        &self.0.data()[k * p..(k + 1) * p]
    }
}

fn check_distribution(v: &[f64], what: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Domain(format!("{what} has entry {x}; distributions are nonnegative")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::Domain(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `(1/sqrt 2) * ||sqrt a - sqrt b||`, in `[0, 1]` for distributions.
pub fn hellinger_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("distributions of length {} and {}", a.len(), b.len())));
    }
    check_distribution(a, "first distribution")?;
    check_distribution(b, "second distribution")?;
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    Ok((sq / 2.0).sqrt())
}

/// Mean Hellinger distance over unordered pairs of rows.
pub fn mean_pairwise_hellinger(a: &FlatAttentionMatrix) -> Result<f64> {
    let k = a.rows();
    if k < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += hellinger_distance(a.row(i), a.row(j))?;
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}

/// Gram matrix of the elementwise square roots: entry `(j, k)` is the Bhattacharyya
/// coefficient of rows `j` and `k`.
fn sqrt_gram(a: &FlatAttentionMatrix) -> (Vec<f64>, Vec<f64>) {
    let (k, p) = (a.rows(), a.cols());
    let s: Vec<f64> = a.values().data().iter().map(|v| v.sqrt()).collect();
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v: f64 = s[i * p..(i + 1) * p].iter().zip(&s[j * p..(j + 1) * p]).map(|(x, y)| x * y).sum();
            g[i * k + j] = v;
            g[j * k + i] = v;
        }
    }
    (s, g)
}

/// `||sqrt(A) sqrt(A)^T - I||_F^2`, in `[0, K(K-1)]`.
pub fn diversity_loss(a: &FlatAttentionMatrix) -> f64 {
    let k = a.rows();
    let (_, g) = sqrt_gram(a);
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            total += (g[i * k + j] - target).powi(2);
        }
    }
    total
}

/// Gradient of [`diversity_loss`] with respect to the entries of `A`.
///
/// The diagonal terms contribute `2 (sum_x a_j[x] - 1)`, which vanishes on distributions, so
/// only the off-diagonal coefficients are differentiated.
pub fn diversity_loss_grad(a: &FlatAttentionMatrix) -> Tensor {
    let (k, p) = (a.rows(), a.cols());
    let (s, g) = sqrt_gram(a);
    let mut grad = vec![0.0; k * p];
    for j in 0..k {
        for x in 0..p {
            let mut acc = 0.0;
            for other in 0..k {
                if other != j {
                    acc += g[j * k + other] * s[other * p + x];
                }
            }
            grad[j * p + x] = 2.0 * acc / s[j * p + x].max(SQRT_FLOOR);
        }
    }
    Tensor::new(&[k, p], grad).unwrap()
}

/// `K x K` stripe masses: entry `(k, l)` is the attention mass of submodule `k` inside
/// stripe `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMatrix(Tensor);

impl ConcentrationMatrix {
    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let k = self.0.shape()[0];
        (0..k).map(|i| self.0.data()[i * k + i]).collect()
    }

    pub fn mean_diagonal(&self) -> f64 {
        let d = self.diagonal();
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Wraps an explicit matrix (rows must be distributions).
    pub fn from_values(values: Tensor) -> Result<Self> {
        values.expect_rank(2, "concentration matrix")?;
        if values.shape()[0] != values.shape()[1] {
            return Err(Error::Dimension(format!("concentration matrix {:?} is not square", values.shape())));
        }
        let k = values.shape()[0];
        for (i, row) in values.data().chunks(k).enumerate() {
            check_distribution(row, &format!("concentration row {i}"))?;
        }
        Ok(Self(values))
    }
}

/// Length of one stripe, or a configuration error when the grid does not split evenly.
pub fn stripe_length(cells: usize, k: usize) -> Result<usize> {
    if k == 0 || cells % k != 0 {
        return Err(Error::Config(format!("{cells} grid cells cannot be split into {k} equal stripes")));
    }
    Ok(cells / k)
}

/// Sums each row of `A` over `K` consecutive half-open segments of length `H*W/K`.
pub fn concentration_matrix(a: &FlatAttentionMatrix) -> Result<ConcentrationMatrix> {
    let (k, p) = (a.rows(), a.cols());
    let delta = stripe_length(p, k)?;
    let mut m = vec![0.0; k * k];
    for i in 0..k {
        for (l, seg) in a.row(i).chunks(delta).enumerate() {
            m[i * k + l] = seg.iter().sum();
        }
    }
    Ok(ConcentrationMatrix(Tensor::new(&[k, k], m)?))
}

/// `sum_k -ln(max(Ahat[k,k], eps))`.
pub fn concentration_loss(ahat: &ConcentrationMatrix) -> f64 {
    ahat.diagonal().iter().map(|&d| -d.max(CONCENTRATION_EPS).ln()).sum()
}

/// Gradient of `concentration_loss(concentration_matrix(A))` with respect to `A`.
pub fn concentration_loss_grad(a: &FlatAttentionMatrix) -> Result<Tensor> {
    let (k, p) = (a.rows(), a.cols());
    let delta = stripe_length(p, k)?;
    let diag = concentration_matrix(a)?.diagonal();
    let mut grad = vec![0.0; k * p];
    for (i, &d) in diag.iter().enumerate() {
        if d > CONCENTRATION_EPS {
            let g = -1.0 / d;
            grad[i * p + i * delta..i * p + (i + 1) * delta].fill(g);
        }
    }
    Tensor::new(&[k, p], grad)
}

/// Softmax cross-entropy of `logits` against class `label`, with its gradient.
pub fn id_loss_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 classes, got {}", logits.len())));
    }
    if label >= logits.len() {
        return Err(Error::Argument(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad = logits.to_vec();
    softmax_in_place(&mut grad);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn id_loss(logits: &[f64], label: usize) -> Result<f64> {
    Ok(id_loss_with_grad(logits, label)?.0)
}

fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Training(format!(
            "triplet batch needs at least 2 identities with at least 2 clips each; got identities {:?}",
            counts
        )));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Training(format!(
            "triplet batch needs at least 2 clips per identity; identity {id} has 1 (counts {counts:?})"
        )));
    }
    Ok(())
}

/// Batch-hard triplet loss and its gradient with respect to the embeddings.
///
/// For each anchor the farthest same-label embedding and the nearest other-label embedding
/// (lowest index on ties) enter `max(0, d_pos - d_neg + margin)`; the loss is the mean over
/// anchors.
pub fn triplet_loss_with_grad(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<(f64, Tensor)> {
    embeddings.expect_rank(2, "embeddings")?;
    let (b, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for {b} embeddings", labels.len())));
    }
    check_triplet_batch(labels)?;
    let e = embeddings.data();
    let row = |i: usize| &e[i * d..(i + 1) * d];
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let v = row(i).iter().zip(row(j)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            dist[i * b + j] = v;
            dist[j * b + i] = v;
        }
    }
    let mut grad = vec![0.0; b * d];
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| dist[i * b + j] > dist[i * b + p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| dist[i * b + j] < dist[i * b + n]) {
                neg = Some(j);
            }
        }
        let (p, n) = (pos.unwrap(), neg.unwrap());
        let hinge = dist[i * b + p] - dist[i * b + n] + margin;
        if hinge > 0.0 {
            total += hinge;
            for (other, sign) in [(p, 1.0), (n, -1.0)] {
                let dd = dist[i * b + other];
                if dd > 0.0 {
                    for c in 0..d {
                        let g = sign * inv_b * (e[i * d + c] - e[other * d + c]) / dd;
                        grad[i * d + c] += g;
                        grad[other * d + c] -= g;
                    }
                }
            }
        }
    }
    Ok((total * inv_b, Tensor::new(&[b, d], grad)?))
}

pub fn triplet_loss(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<f64> {
    Ok(triplet_loss_with_grad(embeddings, labels, margin)?.0)
}

/// Weights of the four objectives and the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub id: f64,
    pub triplet: f64,
    pub diversity: f64,
    pub concentration: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { id: 1.0, triplet: 1.0, diversity: 1.0, concentration: 1.0, margin: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        [
            ("id", self.id),
            ("triplet", self.triplet),
            ("diversity", self.diversity),
            ("concentration", self.concentration),
            ("margin", self.margin),
        ]
        .iter()
        .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
        .map(|(n, v)| format!("loss weight `{n}` must be finite and nonnegative, got {v}"))
        .collect()
    }
}

/// Model outputs for one batch of clips.
pub struct BatchOutputs<'a> {
    /// `B x D`
    pub embeddings: &'a Tensor,
    /// `B x C`
    pub logits: &'a Tensor,
    pub labels: &'a [usize],
    /// Per clip, the attention stacks of every active attention module.
    pub attention: &'a [Vec<AttentionStack>],
}

/// Weighted total and each unweighted term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub id: f64,
    pub triplet: f64,
    pub diversity: f64,
    pub concentration: f64,
    /// Mean diagonal of the concentration matrices over frames, clips and modules.
    pub mean_diag: f64,
}

/// Cotangents of the total loss.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub embeddings: Tensor,
    pub logits: Tensor,
    /// Same nesting as [`BatchOutputs::attention`].
    pub attention: Vec<Vec<Tensor>>,
}

/// `w_id * L_id + w_trip * L_trip + w_div * mean L_div + w_con * mean L_con`, with the
/// attention terms averaged over every frame of every clip of every module.
pub fn total_loss(out: &BatchOutputs<'_>, weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(total_loss_with_grads(out, weights)?.0)
}

pub fn total_loss_with_grads(out: &BatchOutputs<'_>, weights: &LossWeights) -> Result<(LossBreakdown, LossGrads)> {
    let b = out.labels.len();
    out.logits.expect_rank(2, "logits")?;
    if out.logits.shape()[0] != b || out.embeddings.shape()[0] != b || out.attention.len() != b {
        return Err(Error::Dimension(format!(
            "batch of {b} labels with {} logit rows, {} embeddings, {} attention sets",
            out.logits.shape()[0],
            out.embeddings.shape()[0],
            out.attention.len()
        )));
    }
    let c = out.logits.shape()[1];
    let mut d_logits = vec![0.0; b * c];
    let mut id_total = 0.0;
    for (i, &label) in out.labels.iter().enumerate() {
        let (l, g) = id_loss_with_grad(&out.logits.data()[i * c..(i + 1) * c], label)?;
        id_total += l;
        for (dst, v) in d_logits[i * c..(i + 1) * c].iter_mut().zip(g) {
            *dst = v * weights.id / b as f64;
        }
    }
    let id = id_total / b as f64;

    let (triplet, mut d_emb) = if weights.triplet > 0.0 {
        triplet_loss_with_grad(out.embeddings, out.labels, weights.margin)?
    } else {
        check_triplet_batch(out.labels)?;
        (triplet_loss(out.embeddings, out.labels, weights.margin)?, Tensor::zeros(out.embeddings.shape()))
    };
    d_emb.data_mut().iter_mut().for_each(|v| *v *= weights.triplet);

    let frames: usize = out.attention.iter().flatten().map(|s| s.frames()).sum();
    let mut div_total = 0.0;
    let mut con_total = 0.0;
    let mut diag_total = 0.0;
    let mut d_att = Vec::with_capacity(b);
    for clip in out.attention {
        let mut per_clip = Vec::with_capacity(clip.len());
        for stack in clip {
            let (k, (h, w)) = (stack.submodules(), stack.grid());
            let mut g = Vec::with_capacity(stack.values().len());
            for n in 0..stack.frames() {
                let a = FlatAttentionMatrix(stack.frame_matrix(n));
                let ahat = concentration_matrix(&a)?;
                div_total += diversity_loss(&a);
                con_total += concentration_loss(&ahat);
                diag_total += ahat.mean_diagonal();
                let scale_div = weights.diversity / frames as f64;
                let scale_con = weights.concentration / frames as f64;
                let gd = if scale_div > 0.0 { Some(diversity_loss_grad(&a)) } else { None };
                let gc = if scale_con > 0.0 { Some(concentration_loss_grad(&a)?) } else { None };
                for i in 0..k * h * w {
                    let mut v = 0.0;
                    if let Some(gd) = &gd {
                        v += scale_div * gd.data()[i];
                    }
                    if let Some(gc) = &gc {
                        v += scale_con * gc.data()[i];
                    }
                    g.push(v);
                }
            }
            per_clip.push(Tensor::new(stack.values().shape(), g)?);
        }
        d_att.push(per_clip);
    }
    let (diversity, concentration, mean_diag) = if frames > 0 {
        let f = frames as f64;
        (div_total / f, con_total / f, diag_total / f)
    } else {
        (0.0, 0.0, 0.0)
    };
    let total = weights.id * id
        + weights.triplet * triplet
        + weights.diversity * diversity
        + weights.concentration * concentration;
    let breakdown = LossBreakdown { total, id, triplet, diversity, concentration, mean_diag };
    let grads = LossGrads { embeddings: d_emb, logits: Tensor::new(&[b, c], d_logits)?, attention: d_att };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::numeric_vs_analytic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(k: usize, p: usize, data: Vec<f64>) -> FlatAttentionMatrix {
        FlatAttentionMatrix::new(Tensor::new(&[k, p], data).unwrap()).unwrap()
    }

    fn random_rows(k: usize, p: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::from_fn(&[k, p], |_| rng.gen_range(-2.0..2.0));
        for row in t.data_mut().chunks_mut(p) {
            softmax_in_place(row);
        }
        t
    }

    #[test]
    fn hellinger_cases() {
        assert_eq!(hellinger_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((hellinger_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let v = hellinger_distance(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 0.54120).abs() < 1e-5, "{v}");
        assert!(matches!(hellinger_distance(&[1.2, -0.2], &[0.5, 0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn diversity_extremes() {
        let disjoint = flat(3, 6, vec![
            0.5, 0.5, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.2, 0.8, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
        ]);
        assert!(diversity_loss(&disjoint).abs() < 1e-15);
        let row = [0.1, 0.2, 0.3, 0.4];
        let same = flat(3, 4, row.iter().cycle().take(12).copied().collect());
        assert!((diversity_loss(&same) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_matches_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = FlatAttentionMatrix::new(random_rows(2, 4, &mut rng)).unwrap();
        let v = a.values();
        let mut want = 0.0;
        for j in 0..2 {
            for k in 0..2 {
                if j != k {
                    let bc: f64 = (0..4).map(|x| (v.get(&[j, x]) * v.get(&[k, x])).sqrt()).sum();
                    want += bc * bc;
                }
            }
        }
        assert!((diversity_loss(&a) - want).abs() < 1e-12);
    }

    #[test]
    fn diversity_matches_squared_affinity() {
        // 1 - D^2 is the Bhattacharyya coefficient, so the loss is sum over pairs of (1 - D^2)^2.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = FlatAttentionMatrix::new(random_rows(3, 5, &mut rng)).unwrap();
        let mut want = 0.0;
        for j in 0..3 {
            for k in 0..3 {
                if j != k {
                    let d = hellinger_distance(a.row(j), a.row(k)).unwrap();
                    want += (1.0 - d * d).powi(2);
                }
            }
        }
        assert!((diversity_loss(&a) - want).abs() < 1e-12);
    }

    #[test]
    fn concentration_cases() {
        let uniform = flat(4, 32, vec![1.0 / 32.0; 128]);
        let m = concentration_matrix(&uniform).unwrap();
        assert!(m.values().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!((concentration_loss(&m) - 4.0 * 4f64.ln()).abs() < 1e-12);

        let mut data = vec![0.0; 4 * 8];
        for k in 0..4 {
            data[k * 8 + 2 * k] = 0.6;
            data[k * 8 + 2 * k + 1] = 0.4;
        }
        let m = concentration_matrix(&flat(4, 8, data)).unwrap();
        assert_eq!(m.diagonal(), vec![1.0; 4]);
        assert_eq!(concentration_loss(&m), 0.0);

        let two = flat(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]);
        let m = concentration_matrix(&two).unwrap();
        assert!((m.values().get(&[0, 0]) - 0.3).abs() < 1e-15);
        assert!((m.values().get(&[0, 1]) - 0.7).abs() < 1e-15);

        let diag = ConcentrationMatrix::from_values(Tensor::new(&[2, 2], vec![0.3, 0.7, 0.3, 0.7]).unwrap()).unwrap();
        assert!((concentration_loss(&diag) - 1.56065).abs() < 1e-5);
    }

    #[test]
    fn concentration_rejects_uneven_grid() {
        let a = flat(3, 4, vec![0.25; 12]);
        assert!(matches!(concentration_matrix(&a), Err(Error::Config(_))));
    }

    #[test]
    fn concentration_clamps_zero_diagonal() {
        let m = ConcentrationMatrix::from_values(Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert!((concentration_loss(&m) + 2.0 * CONCENTRATION_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn id_loss_cases() {
        assert!((id_loss(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(id_loss(&[0.0, 50.0, 0.0], 1).unwrap() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        assert!((id_loss(&logits, 3).unwrap() + (logits[3].exp() / z).ln()).abs() < 1e-12);
        assert!(matches!(id_loss(&logits, 5), Err(Error::Argument(_))));
        assert!(id_loss(&[1.0], 0).is_err());
    }

    /// Exhaustive triplet oracle: for each anchor, the max over positives and min over
    /// negatives by brute force over every (pos, neg) pair.
    fn triplet_oracle(e: &[[f64; 2]], labels: &[usize], margin: f64) -> f64 {
        let dist = |i: usize, j: usize| ((e[i][0] - e[j][0]).powi(2) + (e[i][1] - e[j][1]).powi(2)).sqrt();
        let b = e.len();
        let mut total = 0.0;
        for a in 0..b {
            let mut worst: f64 = f64::NEG_INFINITY;
            for p in 0..b {
                for n in 0..b {
                    if p != a && labels[p] == labels[a] && labels[n] != labels[a] {
                        worst = worst.max(dist(a, p) - dist(a, n) + margin);
                    }
                }
            }
            total += worst.max(0.0);
        }
        total / b as f64
    }

    #[test]
    fn triplet_cases() {
        let sep = Tensor::new(&[4, 1], vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(triplet_loss(&sep, &[0, 0, 1, 1], 0.3).unwrap(), 0.0);
        let same = Tensor::full(&[4, 3], 1.0);
        assert!((triplet_loss(&same, &[0, 0, 1, 1], 0.3).unwrap() - 0.3).abs() < 1e-15);
        let pts = [[0.0, 0.0], [1.0, 0.5], [0.8, 0.1], [2.0, -1.0]];
        let labels = [0, 0, 1, 1];
        let t = Tensor::new(&[4, 2], pts.iter().flatten().copied().collect()).unwrap();
        let want = triplet_oracle(&pts, &labels, 0.3);
        assert!((triplet_loss(&t, &labels, 0.3).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn triplet_rejects_degenerate_batches() {
        let t = Tensor::zeros(&[3, 2]);
        assert!(matches!(triplet_loss(&t, &[0, 0, 1], 0.3), Err(Error::Training(_))));
        assert!(matches!(triplet_loss(&t, &[0, 0, 0], 0.3), Err(Error::Training(_))));
    }

    #[test]
    fn triplet_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let e = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-1.0..1.0));
            let labels = [0, 1, 2, 0, 1, 2];
            let (_, g) = triplet_loss_with_grad(&e, &labels, 0.5).unwrap();
            let err = numeric_vs_analytic(|x| triplet_loss(x, &labels, 0.5), &e, &g, 1e-6).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn attention_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random_rows(4, 8, &mut rng);
            let fa = FlatAttentionMatrix::new(a.clone()).unwrap();
            // Off-diagonal form; the diagonal terms have zero gradient on distributions.
            let raw_div = |x: &Tensor| {
                let s: Vec<f64> = x.data().iter().map(|v| v.sqrt()).collect();
                let mut t = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        if i != j {
                            let bc: f64 = (0..8).map(|q| s[i * 8 + q] * s[j * 8 + q]).sum();
                            t += bc * bc;
                        }
                    }
                }
                Ok(t)
            };
            let err = numeric_vs_analytic(raw_div, &a, &diversity_loss_grad(&fa), 1e-7).unwrap();
            assert!(err < 1e-4, "div {err}");
            let raw_con = |x: &Tensor| {
                Ok((0..4).map(|k| -(x.data()[k * 8 + 2 * k] + x.data()[k * 8 + 2 * k + 1]).ln()).sum())
            };
            let err = numeric_vs_analytic(raw_con, &a, &concentration_loss_grad(&fa).unwrap(), 1e-7).unwrap();
            assert!(err < 1e-4, "con {err}");
        }
    }

    #[test]
    fn id_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::from_fn(&[5], |_| rng.gen_range(-2.0..2.0));
        let (_, g) = id_loss_with_grad(logits.data(), 1).unwrap();
        let g = Tensor::new(&[5], g).unwrap();
        let err = numeric_vs_analytic(|x| id_loss(x.data(), 1), &logits, &g, 1e-5).unwrap();
        assert!(err < 1e-6);
    }

    fn stack_of(rows: Vec<f64>, k: usize, h: usize, w: usize) -> AttentionStack {
        let n = rows.len() / (k * h * w);
        AttentionStack::new(Tensor::new(&[n, k, h, w], rows).unwrap()).unwrap()
    }

    #[test]
    fn total_loss_zero_weights_and_disjoint_attention() {
        let emb = Tensor::new(&[4, 2], vec![0.0, 0.0, 0.1, 0.0, 1.0, 1.0, 1.1, 1.0]).unwrap();
        let logits = Tensor::zeros(&[4, 2]);
        let labels = [0, 0, 1, 1];
        let disjoint = stack_of(vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5], 2, 2, 2);
        let att: Vec<Vec<AttentionStack>> = (0..4).map(|_| vec![disjoint.clone()]).collect();
        let out = BatchOutputs { embeddings: &emb, logits: &logits, labels: &labels, attention: &att };
        let zero = LossWeights { id: 0.0, triplet: 0.0, diversity: 0.0, concentration: 0.0, margin: 0.3 };
        assert_eq!(total_loss(&out, &zero).unwrap().total, 0.0);
        let div_only = LossWeights { diversity: 1.0, ..zero };
        let b = total_loss(&out, &div_only).unwrap();
        assert!(b.total.abs() < 1e-15);
        assert_eq!(b.mean_diag, 1.0);
        assert_eq!(b.concentration, 0.0);
        assert!((b.id - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weights_validation_lists_every_field() {
        let w = LossWeights { id: -1.0, triplet: f64::NAN, ..Default::default() };
        assert_eq!(w.validate().len(), 2);
        assert!(LossWeights::default().validate().is_empty());
    }

    proptest::proptest! {
        #[test]
        fn regularizer_invariants(seed in 0u64..400, k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = 2 * k;
            let a = FlatAttentionMatrix::new(random_rows(k, p, &mut rng)).unwrap();
            let div = diversity_loss(&a);
            proptest::prop_assert!(div >= 0.0 && div <= (k * (k - 1)) as f64 + 1e-12);
            let (_, g) = sqrt_gram(&a);
            for i in 0..k {
                proptest::prop_assert!((g[i * k + i] - 1.0).abs() < 1e-6);
            }
            // Same spatial permutation of all rows leaves the loss unchanged.
            let perm: Vec<usize> = (0..p).rev().collect();
            let permuted = Tensor::from_fn(&[k, p], |i| a.values().data()[(i / p) * p + perm[i % p]]);
            let pa = FlatAttentionMatrix::new(permuted).unwrap();
            proptest::prop_assert!((diversity_loss(&pa) - div).abs() < 1e-12);

            let m = concentration_matrix(&a).unwrap();
            for row in m.values().data().chunks(k) {
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                proptest::prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            proptest::prop_assert!(concentration_loss(&m) >= 0.0);
        }

        #[test]
        fn concentration_monotone_in_diagonal(seed in 0u64..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = FlatAttentionMatrix::new(random_rows(3, 6, &mut rng)).unwrap();
            let m = concentration_matrix(&a).unwrap();
            let before = concentration_loss(&m);
            let mut moved = m.values().clone();
            let (i, j) = (rng.gen_range(0..3), rng.gen_range(0..3));
            if i != j {
                let shift = moved.get(&[i, j]) * rng.gen_range(0.0..1.0);
                moved.set(&[i, j], moved.get(&[i, j]) - shift);
                moved.set(&[i, i], moved.get(&[i, i]) + shift);
            }
            let after = concentration_loss(&ConcentrationMatrix::from_values(moved).unwrap());
            proptest::prop_assert!(after <= before + 1e-12);
        }
    }
}
