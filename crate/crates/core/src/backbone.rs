//! Convolutional feature extractor with two attention taps, the identity classifier head,
//! and the model checkpoint format.
//!
//! Each stage is a 3x3 convolution (stride = the stage's downsampling factor, zero padding 1)
//! followed by ReLU, so every activation the attention modules see is nonnegative.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionStack, FusedFeatures, MamCache, MamParams};
use crate::error::{Error, Result};
use crate::losses::stripe_length;
use crate::numerics::ops::{self, Conv2dCache, ConvGeometry};
use crate::numerics::{read_tensor, write_tensor, DType, Tensor};

/// Which attention modules are inserted, and whether the concentration loss is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Backbone only; pooled final features.
    Baseline,
    /// One module behind the final stage.
    SingleMam,
    SingleMamCon,
    /// Modules behind the tap stage and the final stage.
    MultiMam,
    #[default]
    MultiMamCon,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::SingleMam,
        Ablation::SingleMamCon,
        Ablation::MultiMam,
        Ablation::MultiMamCon,
    ];

    pub fn wiring(self) -> Wiring {
        match self {
            Ablation::Baseline => Wiring { mam1: false, mam2: false },
            Ablation::SingleMam | Ablation::SingleMamCon => Wiring { mam1: false, mam2: true },
            Ablation::MultiMam | Ablation::MultiMamCon => Wiring { mam1: true, mam2: true },
        }
    }

    pub fn uses_concentration(self) -> bool {
        matches!(self, Ablation::SingleMamCon | Ablation::MultiMamCon)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::SingleMam => "single-mam",
            Ablation::SingleMamCon => "single-mam-con",
            Ablation::MultiMam => "multi-mam",
            Ablation::MultiMamCon => "multi-mam-con",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Which attention modules a forward pass runs; a disabled module is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub mam1: bool,
    pub mam2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Stage whose output feeds the first attention module; `None` builds no first module.
    pub tap1: Option<usize>,
    /// Stage feeding the second module; must be the final stage.
    pub tap2: usize,
    /// Whether the second module exists.
    pub mam2: bool,
    /// Submodules per attention module.
    pub k: usize,
    /// Bottleneck widths of the first and second module.
    pub mam_widths: [usize; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 32,
            stage_widths: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            tap1: Some(1),
            tap2: 2,
            mam2: true,
            k: 4,
            mam_widths: [8, 16],
        }
    }
}

const KERNEL: usize = 3;

impl BackboneConfig {
    /// Tiny configuration for gradient checks: 8x8 input, final grid 2x2 with 6 channels.
    pub fn tiny() -> Self {
        Self {
            input_height: 8,
            input_width: 8,
            stage_widths: vec![4, 6],
            stage_strides: vec![2, 2],
            tap1: Some(0),
            tap2: 1,
            mam2: true,
            k: 2,
            mam_widths: [2, 3],
        }
    }

    /// Returns the config with module presence matching `ablation`.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let w = ablation.wiring();
        if !w.mam1 {
            self.tap1 = None;
        } else if self.tap1.is_none() {
            self.tap1 = Some(self.stage_widths.len().saturating_sub(2));
        }
        self.mam2 = w.mam2;
        self
    }

    pub fn geometry(&self, stage: usize) -> ConvGeometry {
        ConvGeometry { kernel: KERNEL, stride: self.stage_strides[stage], padding: 1 }
    }

    /// `(channels, height, width)` at the output of every stage.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        (0..self.stage_widths.len())
            .map(|s| {
                let g = self.geometry(s);
                h = g.output_extent(h);
                w = g.output_extent(w);
                (self.stage_widths[s], h, w)
            })
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&0)
    }

    /// All violations, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let stages = self.stage_widths.len();
        if stages == 0 {
            errs.push("backbone needs at least one stage".into());
            return errs;
        }
        if self.stage_strides.len() != stages {
            errs.push(format!(
                "stage_strides has {} entries for {stages} stages",
                self.stage_strides.len()
            ));
            return errs;
        }
        if self.stage_widths.contains(&0) || self.stage_strides.contains(&0) {
            errs.push("stage widths and strides must be positive".into());
            return errs;
        }
        if self.input_height == 0 || self.input_width == 0 {
            errs.push("input size must be positive".into());
            return errs;
        }
        if self.k == 0 {
            errs.push("k must be at least 1".into());
        }
        if self.tap2 != stages - 1 {
            errs.push(format!("tap2 must be the final stage {}, got {}", stages - 1, self.tap2));
        }
        let shapes = self.stage_shapes();
        let mut taps = Vec::new();
        if let Some(t1) = self.tap1 {
            if t1 >= self.tap2 {
                errs.push(format!("tap1 ({t1}) must come before tap2 ({})", self.tap2));
            } else {
                taps.push((t1, self.mam_widths[0], "first"));
            }
        }
        if self.mam2 && self.tap2 < stages {
            taps.push((self.tap2, self.mam_widths[1], "second"));
        }
        for (stage, d1, which) in taps {
            let (d, h, w) = shapes[stage];
            if d1 == 0 || d1 >= d {
                errs.push(format!("{which} attention width {d1} must be in [1, {d}) for stage {stage}"));
            }
            if self.k > 0 && (h % self.k != 0 || stripe_length(h * w, self.k).is_err()) {
                errs.push(format!(
                    "{which} attention grid {h}x{w} at stage {stage} must have height divisible by k={}",
                    self.k
                ));
            }
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: BackboneConfig,
    /// Per stage: weight `C_out x C_in x 3 x 3` and bias `C_out`.
    pub stages: Vec<(Tensor, Tensor)>,
    pub mam1: Option<MamParams>,
    pub mam2: Option<MamParams>,
    /// `C x D`, no bias.
    pub classifier: Tensor,
}

impl ModelState {
    pub fn zeros(config: &BackboneConfig, classes: usize) -> Result<Self> {
        config.check()?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 identity classes, got {classes}")));
        }
        let mut c_in = 3;
        let stages = config
            .stage_widths
            .iter()
            .map(|&c| {
                let s = (Tensor::zeros(&[c, c_in, KERNEL, KERNEL]), Tensor::zeros(&[c]));
                c_in = c;
                s
            })
            .collect();
        let shapes = config.stage_shapes();
        let mam1 = config.tap1.map(|t| MamParams::zeros(config.k, shapes[t].0, config.mam_widths[0]));
        let mam2 = config
            .mam2
            .then(|| MamParams::zeros(config.k, shapes[config.tap2].0, config.mam_widths[1]));
        Ok(Self {
            config: config.clone(),
            stages,
            mam1,
            mam2,
            classifier: Tensor::zeros(&[classes, config.embedding_dim()]),
        })
    }

    /// Stage weights He-uniform, attention modules per [`MamParams::init`], classifier
    /// uniform on `+-1/sqrt(D)`; biases zero.
    pub fn init<R: Rng + ?Sized>(config: &BackboneConfig, classes: usize, rng: &mut R) -> Result<Self> {
        let mut s = Self::zeros(config, classes)?;
        for (w, _) in &mut s.stages {
            let fan_in = (w.shape()[1] * KERNEL * KERNEL) as f64;
            let a = (6.0 / fan_in).sqrt();
            w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        }
        // classifier before attention so every ablation shares this prefix of the stream
        let a = 1.0 / (config.embedding_dim() as f64).sqrt();
        s.classifier.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        let shapes = config.stage_shapes();
        if let Some(t) = config.tap1 {
            s.mam1 = Some(MamParams::init(config.k, shapes[t].0, config.mam_widths[0], rng)?);
        }
        if config.mam2 {
            s.mam2 = Some(MamParams::init(config.k, shapes[config.tap2].0, config.mam_widths[1], rng)?);
        }
        Ok(s)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn classes(&self) -> usize {
        self.classifier.shape()[0]
    }

    /// Modules present in this state.
    pub fn full_wiring(&self) -> Wiring {
        Wiring { mam1: self.mam1.is_some(), mam2: self.mam2.is_some() }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.weight"), w));
            out.push((format!("stage{i}.bias"), b));
        }
        for (prefix, m) in [("mam1", &self.mam1), ("mam2", &self.mam2)] {
            if let Some(p) = m {
                for (n, t) in p.tensors() {
                    out.push((format!("{prefix}.{n}"), t));
                }
            }
        }
        out.push(("classifier.weight".into(), &self.classifier));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{i}.weight"), w));
            out.push((format!("stage{i}.bias"), b));
        }
        for (prefix, m) in [("mam1", &mut self.mam1), ("mam2", &mut self.mam2)] {
            if let Some(p) = m {
                for (n, t) in p.tensors_mut() {
                    out.push((format!("{prefix}.{n}"), t));
                }
            }
        }
        out.push(("classifier.weight".into(), &mut self.classifier));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

fn check_frames(frames: &Tensor, config: &BackboneConfig) -> Result<usize> {
    frames.expect_rank(4, "frames")?;
    let s = frames.shape();
    if s[1] != 3 || s[2] != config.input_height || s[3] != config.input_width {
        return Err(Error::Dimension(format!(
            "frames {:?} do not match expected N x 3 x {} x {}",
            s, config.input_height, config.input_width
        )));
    }
    Ok(s[0])
}

/// Runs one stage over all frames; returns post-ReLU output and per-frame conv caches plus
/// pre-activations.
fn stage_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    g: ConvGeometry,
) -> Result<(Tensor, Vec<Conv2dCache>, Tensor)> {
    let n = x.shape()[0];
    let mut caches = Vec::with_capacity(n);
    let mut pre = Vec::new();
    let mut out_shape = Vec::new();
    for frame in 0..n {
        let (y, c) = ops::conv2d(&x.slice_outer(frame), weight, bias, g)?;
        if out_shape.is_empty() {
            out_shape = y.shape().to_vec();
        }
        pre.extend_from_slice(y.data());
        caches.push(c);
    }
    let mut shape = vec![n];
    shape.extend(out_shape);
    let pre = Tensor::new(&shape, pre)?;
    Ok((ops::relu(&pre), caches, pre))
}

/// Raw backbone activations (no attention) at the first tap and the final stage. When the
/// config has no first tap, the first element is `None`.
pub fn backbone_forward(frames: &Tensor, state: &ModelState) -> Result<(Option<Tensor>, Tensor)> {
    check_frames(frames, &state.config)?;
    let mut x = frames.clone();
    let mut tap1 = None;
    for (s, (w, b)) in state.stages.iter().enumerate() {
        x = stage_forward(&x, w, b, state.config.geometry(s))?.0;
        if state.config.tap1 == Some(s) {
            tap1 = Some(x.clone());
        }
    }
    Ok((tap1, x))
}

/// Result of [`model_forward`] for one clip.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `D`
    pub embedding: Tensor,
    /// `C`
    pub logits: Tensor,
    /// Attention stacks of the modules that ran, first module first.
    pub attention: Vec<AttentionStack>,
}

/// Everything [`model_backward`] needs from the forward pass.
pub struct ModelCache {
    wiring: Wiring,
    conv: Vec<Vec<Conv2dCache>>,
    pre: Vec<Tensor>,
    mam1: Option<MamCache>,
    mam2: Option<MamCache>,
    final_shape: Vec<usize>,
}

/// Clip forward: stages up to the first tap, first module (its fused output continues),
/// remaining stages, second module, frame/space mean, classifier.
pub fn model_forward(frames: &Tensor, state: &ModelState, wiring: Wiring) -> Result<ModelOutput> {
    Ok(model_forward_cached(frames, state, wiring)?.0)
}

pub fn model_forward_cached(frames: &Tensor, state: &ModelState, wiring: Wiring) -> Result<(ModelOutput, ModelCache)> {
    check_frames(frames, &state.config)?;
    let wiring = Wiring {
        mam1: wiring.mam1 && state.mam1.is_some(),
        mam2: wiring.mam2 && state.mam2.is_some(),
    };
    let mut x = frames.clone();
    let mut conv = Vec::with_capacity(state.stages.len());
    let mut pre = Vec::with_capacity(state.stages.len());
    let mut attention = Vec::new();
    let mut mam1 = None;
    for (s, (w, b)) in state.stages.iter().enumerate() {
        let (y, c, p) = stage_forward(&x, w, b, state.config.geometry(s))?;
        conv.push(c);
        pre.push(p);
        x = y;
        if wiring.mam1 && state.config.tap1 == Some(s) {
            let (fused, a, cache) = attention::mam_forward_cached(&x, state.mam1.as_ref().unwrap())?;
            x = fused.0;
            attention.push(a);
            mam1 = Some(cache);
        }
    }
    let mut mam2 = None;
    let fused = if wiring.mam2 {
        let (fused, a, cache) = attention::mam_forward_cached(&x, state.mam2.as_ref().unwrap())?;
        attention.push(a);
        mam2 = Some(cache);
        fused
    } else {
        FusedFeatures(x)
    };
    let final_shape = fused.values().shape().to_vec();
    let embedding = attention::video_embedding(&fused)?;
    let c = state.classes();
    let d = embedding.len();
    let mut logits = vec![0.0; c];
    ops::gemm(c, d, 1, 1.0, state.classifier.data(), false, embedding.data(), false, 0.0, &mut logits);
    let out = ModelOutput { embedding, logits: Tensor::new(&[c], logits)?, attention };
    Ok((out, ModelCache { wiring, conv, pre, mam1, mam2, final_shape }))
}

/// Backward pass for one clip. Accumulates parameter cotangents into `grads` given the
/// cotangents of the embedding, the logits, and each returned attention stack.
pub fn model_backward(
    cache: &ModelCache,
    state: &ModelState,
    output: &ModelOutput,
    d_embedding: &Tensor,
    d_logits: &Tensor,
    d_attention: &[Tensor],
    grads: &mut ModelState,
) -> Result<()> {
    let (c, d) = (state.classes(), output.embedding.len());
    if d_embedding.len() != d || d_logits.len() != c {
        return Err(Error::Dimension("embedding or logit cotangent has the wrong length".into()));
    }
    if d_attention.len() != output.attention.len() {
        return Err(Error::Dimension(format!(
            "{} attention cotangents for {} stacks",
            d_attention.len(),
            output.attention.len()
        )));
    }
    // logits = W F
    let mut d_f = d_embedding.data().to_vec();
    ops::gemm(c, 1, d, 1.0, d_logits.data(), false, output.embedding.data(), false, 1.0, grads.classifier.data_mut());
    ops::gemm(d, c, 1, 1.0, state.classifier.data(), true, d_logits.data(), false, 1.0, &mut d_f);

    let fs = &cache.final_shape;
    let spread = 1.0 / (fs[0] * fs[2] * fs[3]) as f64;
    let p = fs[2] * fs[3];
    let mut grad = Tensor::from_fn(fs, |i| d_f[(i / p) % fs[1]] * spread);

    let mut att_iter = d_attention.iter();
    let d_att1 = if cache.wiring.mam1 { att_iter.next() } else { None };
    let d_att2 = if cache.wiring.mam2 { att_iter.next() } else { None };

    if let Some(mc) = &cache.mam2 {
        grad = attention::mam_backward(
            mc,
            state.mam2.as_ref().unwrap(),
            &grad,
            d_att2,
            grads.mam2.as_mut().unwrap(),
        )?;
    }
    for s in (0..state.stages.len()).rev() {
        if cache.wiring.mam1 && state.config.tap1 == Some(s) {
            grad = attention::mam_backward(
                cache.mam1.as_ref().unwrap(),
                state.mam1.as_ref().unwrap(),
                &grad,
                d_att1,
                grads.mam1.as_mut().unwrap(),
            )?;
        }
        let d_pre = ops::relu_backward(&cache.pre[s], &grad)?;
        let n = d_pre.shape()[0];
        let g = state.config.geometry(s);
        let need_input = s > 0;
        let mut d_in = Vec::new();
        let (gw, gb) = &mut grads.stages[s];
        for frame in 0..n {
            let dx = ops::conv2d_backward(
                &cache.conv[s][frame],
                &state.stages[s].0,
                g,
                &d_pre.slice_outer(frame),
                gw,
                gb,
                need_input,
            )?;
            if let Some(dx) = dx {
                d_in.extend_from_slice(dx.data());
            }
        }
        if need_input {
            let mut shape = vec![n];
            shape.extend_from_slice(&cache.pre[s - 1].shape()[1..]);
            grad = Tensor::new(&shape, d_in)?;
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMMC";
const CHECKPOINT_VERSION: u32 = 1;

/// JSON sidecar stored next to a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub classes: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `"CMMC"`, version, section count, then per parameter a named section
/// (`u32` name length, UTF-8 name, tensor record); the config goes to `<path>.json`.
pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, state)?;
    w.flush()?;
    let meta = CheckpointMeta { backbone: state.config.clone(), classes: state.classes() };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, state: &ModelState) -> Result<()> {
    let tensors = state.named_tensors();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t, DType::F64)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r, &meta)
}

pub fn read_checkpoint<R: Read>(r: &mut R, meta: &CheckpointMeta) -> Result<ModelState> {
    let mut state = ModelState::zeros(&meta.backbone, meta.classes)?;
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    if &buf4 != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    r.read_exact(&mut buf4)?;
    if u32::from_le_bytes(buf4) != CHECKPOINT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;
    let mut slots = state.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!("checkpoint has {count} sections, config needs {}", slots.len())));
    }
    for _ in 0..count {
        r.read_exact(&mut buf4)?;
        let mut name = vec![0u8; u32::from_le_bytes(buf4) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("section name is not UTF-8".into()))?;
        let (t, _) = read_tensor(r)?;
        let slot = slots
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("unexpected section `{name}`")))?;
        if slot.1.shape() != t.shape() {
            return Err(Error::Format(format!(
                "section `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = t;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frames(n: usize, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[n, 3, config.input_height, config.input_width], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn default_config_shapes() {
        let c = BackboneConfig::default();
        assert!(c.validate().is_empty(), "{:?}", c.validate());
        assert_eq!(c.stage_shapes(), vec![(16, 32, 16), (32, 16, 8), (64, 8, 4)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ModelState::init(&c, 5, &mut rng).unwrap();
        let f = random_frames(2, &c, &mut rng);
        let (tap1, last) = backbone_forward(&f, &s).unwrap();
        assert_eq!(tap1.unwrap().shape(), &[2, 32, 16, 8]);
        assert_eq!(last.shape(), &[2, 64, 8, 4]);
        assert!(last.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let c = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ModelState::init(&c, 3, &mut rng).unwrap();
        let f = Tensor::zeros(&[2, 3, 64, 32]);
        let (t1, last) = backbone_forward(&f, &s).unwrap();
        assert!(t1.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(last.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frames_are_independent() {
        let c = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = ModelState::init(&c, 3, &mut rng).unwrap();
        let f = random_frames(2, &c, &mut rng);
        let doubled = Tensor::stack(&[f.slice_outer(0), f.slice_outer(1), f.slice_outer(0), f.slice_outer(1)]).unwrap();
        let (_, a) = backbone_forward(&f, &s).unwrap();
        let (_, b) = backbone_forward(&doubled, &s).unwrap();
        assert_eq!(b.shape()[0], 4);
        assert_eq!(&b.data()[..a.len()], a.data());
        assert_eq!(&b.data()[a.len()..], a.data());
    }

    #[test]
    fn validation_reports_all_violations() {
        let c = BackboneConfig { k: 3, mam_widths: [40, 64], ..Default::default() };
        let errs = c.validate();
        assert!(errs.len() >= 3, "{errs:?}");
        let c = BackboneConfig { tap1: Some(2), ..Default::default() };
        assert_eq!(c.validate().len(), 1);
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let c = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = ModelState::init(&c, 3, &mut rng).unwrap();
        let f = Tensor::zeros(&[1, 3, 32, 32]);
        assert!(matches!(model_forward(&f, &s, s.full_wiring()), Err(Error::Dimension(_))));
    }

    #[test]
    fn bypassed_first_module_equals_model_without_it() {
        let c = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = ModelState::init(&c, 4, &mut rng).unwrap();
        let mut single = ModelState::zeros(&c.clone().with_ablation(Ablation::SingleMam), 4).unwrap();
        single.stages = full.stages.clone();
        single.mam2 = full.mam2.clone();
        single.classifier = full.classifier.clone();
        let f = random_frames(3, &c, &mut rng);
        let a = model_forward(&f, &full, Ablation::SingleMam.wiring()).unwrap();
        let b = model_forward(&f, &single, single.full_wiring()).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.attention.len(), 1);

        let base = model_forward(&f, &full, Ablation::Baseline.wiring()).unwrap();
        let (_, last) = backbone_forward(&f, &full).unwrap();
        let pooled = attention::video_embedding(&FusedFeatures(last)).unwrap();
        assert_eq!(base.embedding, pooled);
        assert!(base.attention.is_empty());
    }

    #[test]
    fn embedding_dim_and_frame_permutation() {
        let c = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = ModelState::init(&c, 4, &mut rng).unwrap();
        let f = random_frames(3, &c, &mut rng);
        let perm = Tensor::stack(&[f.slice_outer(2), f.slice_outer(0), f.slice_outer(1)]).unwrap();
        let a = model_forward(&f, &s, s.full_wiring()).unwrap();
        let b = model_forward(&perm, &s, s.full_wiring()).unwrap();
        assert_eq!(a.embedding.len(), c.embedding_dim());
        for (x, y) in a.embedding.data().iter().zip(b.embedding.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn flatten(s: &ModelState) -> Tensor {
        let v: Vec<f64> = s.named_tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let n = v.len();
        Tensor::new(&[n], v).unwrap()
    }

    fn unflatten(s: &mut ModelState, flat: &Tensor) {
        let mut off = 0;
        for (_, t) in s.named_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
    }

    fn batch_loss(s: &ModelState, clips: &[Tensor], labels: &[usize], grads: Option<&mut ModelState>) -> f64 {
        let wiring = s.full_wiring();
        let runs: Vec<_> = clips.iter().map(|c| model_forward_cached(c, s, wiring).unwrap()).collect();
        let emb = Tensor::stack(&runs.iter().map(|r| r.0.embedding.clone()).collect::<Vec<_>>()).unwrap();
        let logits = Tensor::stack(&runs.iter().map(|r| r.0.logits.clone()).collect::<Vec<_>>()).unwrap();
        let att: Vec<_> = runs.iter().map(|r| r.0.attention.clone()).collect();
        let out = crate::losses::BatchOutputs { embeddings: &emb, logits: &logits, labels, attention: &att };
        let (l, g) = crate::losses::total_loss_with_grads(&out, &crate::losses::LossWeights::default()).unwrap();
        if let Some(grads) = grads {
            for (i, (o, cache)) in runs.iter().enumerate() {
                model_backward(
                    cache,
                    s,
                    o,
                    &g.embeddings.slice_outer(i),
                    &g.logits.slice_outer(i),
                    &g.attention[i],
                    grads,
                )
                .unwrap();
            }
        }
        l.total
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let c = BackboneConfig::tiny();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut s = ModelState::init(&c, 3, &mut rng).unwrap();
            // Zero biases put all-zero activations exactly on the hidden ReLU kink.
            for (name, t) in s.named_tensors_mut() {
                if name.ends_with("bias") {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                }
            }
            let clips: Vec<_> = (0..4).map(|_| random_frames(2, &c, &mut rng)).collect();
            let labels = [0, 0, 1, 1];
            let mut grads = s.zeros_like();
            batch_loss(&s, &clips, &labels, Some(&mut grads));
            let x0 = flatten(&s);
            let err = crate::numerics::numeric_vs_analytic(
                |x| {
                    let mut m = s.clone();
                    unflatten(&mut m, x);
                    Ok(batch_loss(&m, &clips, &labels, None))
                },
                &x0,
                &flatten(&grads),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = BackboneConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = ModelState::init(&c, 3, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cmmc");
        save_checkpoint(&path, &s).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), s);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CMMC");
    }
}
