//! Training loop: synthetic data, P x Q batch assembly, Adam under the total loss.

mod adam;
mod dataset;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, adam_update, AdamConfig, AdamMoments};
pub use dataset::{generate_dataset, generate_dataset_with, Clip, DatasetConfig, SyntheticDataset};

use crate::backbone::{self, Ablation, BackboneConfig, ModelState};
use crate::error::{Error, Result};
use crate::losses::{self, BatchOutputs, LossWeights};
use crate::numerics::Tensor;
use crate::sampling::{self, IntervalRedraw, SamplingStrategy};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "CMMA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity per batch.
    pub q: usize,
    pub batch_size: usize,
    /// Frames sampled per clip.
    pub frames: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub sampling: SamplingStrategy,
    pub interval_redraw: IntervalRedraw,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 5e-4,
            p: 4,
            q: 7,
            batch_size: 28,
            frames: 6,
            steps: 500,
            seed: 0,
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            sampling: SamplingStrategy::default(),
            interval_redraw: IntervalRedraw::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.p < 2 {
            errs.push(format!("p must be at least 2 identities per batch, got {}", self.p));
        }
        if self.q < 2 {
            errs.push(format!("q must be at least 2 clips per identity, got {}", self.q));
        }
        if self.p * self.q != self.batch_size {
            errs.push(format!("p*q = {} does not equal batch_size {}", self.p * self.q, self.batch_size));
        }
        if self.frames == 0 {
            errs.push("frames must be at least 1".into());
        }
        if self.steps == 0 {
            errs.push("steps must be at least 1".into());
        }
        errs.extend(self.loss.validate());
        errs.extend(self.model_config().validate());
        errs
    }

    /// Backbone with module presence set by the ablation.
    pub fn model_config(&self) -> BackboneConfig {
        self.backbone.clone().with_ablation(self.ablation)
    }

    /// Loss weights with the concentration term dropped for ablations without it.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss;
        if !self.ablation.uses_concentration() {
            w.concentration = 0.0;
        }
        w
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }

    /// Applies `CMMA_SEED` when set; an unparsable value is a config error.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// One training-log row; loss columns are the weighted contributions to the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub id: f64,
    pub triplet: f64,
    pub diversity: f64,
    pub concentration: f64,
    pub mean_diag: f64,
}

pub const LOG_HEADER: &str = "step,L_total,L_id,L_trip,L_div,L_con,mean_diag";

pub fn write_log<W: Write>(w: &mut W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.total, r.id, r.triplet, r.diversity, r.concentration, r.mean_diag
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<LogRow>,
}

pub fn train(config: &TrainConfig, data: &SyntheticDataset) -> Result<TrainOutcome> {
    train_with(config, data, |_| {})
}

/// Like [`train`], calling `observe` after every step.
pub fn train_with(config: &TrainConfig, data: &SyntheticDataset, mut observe: impl FnMut(&LogRow)) -> Result<TrainOutcome> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let mc = config.model_config();
    if mc.input_height != data.config.height || mc.input_width != data.config.width {
        return Err(Error::Config(format!(
            "backbone input {}x{} does not match dataset frames {}x{}",
            mc.input_height, mc.input_width, data.config.height, data.config.width
        )));
    }
    let ids = &data.train_identities;
    if ids.len() < config.p {
        return Err(Error::Training(format!(
            "batch needs {} identities, training split has {}",
            config.p,
            ids.len()
        )));
    }
    let videos: Vec<Vec<usize>> = ids.iter().map(|&id| data.clips_of(id).map(|c| c.video).collect()).collect();
    if videos.iter().any(|v| v.is_empty()) {
        return Err(Error::Training("a training identity has no clips".into()));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = ModelState::init(&mc, ids.len(), &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut moments = AdamMoments::new(&state);
    let weights = config.effective_weights();
    let adam = config.adam();
    let wiring = state.full_wiring();
    let t = data.config.frames_per_clip;
    let n = config.frames;
    let steps_per_epoch = ids.len().div_ceil(config.p);

    let mut order: Vec<usize> = Vec::new();
    let mut intervals = vec![1usize; data.clips.len()];
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if step % steps_per_epoch == 0 {
            order = (0..ids.len()).collect();
            order.shuffle(&mut rng);
            let g_max = sampling::max_interval(t, n);
            match config.interval_redraw {
                IntervalRedraw::PerVideoPerEpoch => {
                    for g in intervals.iter_mut() {
                        *g = if g_max == 0 { 1 } else { rng.gen_range(1..=g_max) };
                    }
                }
                IntervalRedraw::SharedPerEpoch => {
                    let g = if g_max == 0 { 1 } else { rng.gen_range(1..=g_max) };
                    intervals.fill(g);
                }
            }
        }
        let slot = step % steps_per_epoch;
        let mut chosen: Vec<usize> = order.iter().skip(slot * config.p).take(config.p).copied().collect();
        while chosen.len() < config.p {
            let c = rng.gen_range(0..ids.len());
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }

        let mut labels = Vec::with_capacity(config.batch_size);
        let mut clips = Vec::with_capacity(config.batch_size);
        for &class in &chosen {
            for _ in 0..config.q {
                let vs = &videos[class];
                let video = vs[rng.gen_range(0..vs.len())];
                let indices = match config.sampling {
                    SamplingStrategy::Ris => {
                        sampling::ris_sample_with_interval(t, n, intervals[video], &mut rng)?.indices
                    }
                    SamplingStrategy::Restricted => sampling::restricted_sample(t, n, &mut rng)?.indices,
                };
                clips.push(data.clip_tensor(video, &indices)?);
                labels.push(class);
            }
        }

        let mut runs = Vec::with_capacity(clips.len());
        for clip in &clips {
            runs.push(backbone::model_forward_cached(clip, &state, wiring)?);
        }
        let emb = Tensor::stack(&runs.iter().map(|r| r.0.embedding.clone()).collect::<Vec<_>>())?;
        let logits = Tensor::stack(&runs.iter().map(|r| r.0.logits.clone()).collect::<Vec<_>>())?;
        let attention: Vec<_> = runs.iter().map(|r| r.0.attention.clone()).collect();
        let out = BatchOutputs { embeddings: &emb, logits: &logits, labels: &labels, attention: &attention };
        let (loss, lg) = losses::total_loss_with_grads(&out, &weights)?;
        if !loss.total.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {}", step + 1)));
        }
        let mut grads = state.zeros_like();
        for (i, (o, cache)) in runs.iter().enumerate() {
            backbone::model_backward(
                cache,
                &state,
                o,
                &lg.embeddings.slice_outer(i),
                &lg.logits.slice_outer(i),
                &lg.attention[i],
                &mut grads,
            )?;
        }
        adam_step(&mut state, &grads, &mut moments, &adam)?;

        let row = LogRow {
            step: step + 1,
            total: loss.total,
            id: weights.id * loss.id,
            triplet: weights.triplet * loss.triplet,
            diversity: weights.diversity * loss.diversity,
            concentration: weights.concentration * loss.concentration,
            mean_diag: loss.mean_diag,
        };
        observe(&row);
        log.push(row);
    }
    Ok(TrainOutcome { state, log })
}

/// Attention statistics of a model over a set of clips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionStats {
    /// Mean diagonal of the concentration matrix over frames, clips and modules.
    pub mean_diag: f64,
    /// Mean pairwise Hellinger distance between submodule maps.
    pub mean_hellinger: f64,
}

/// Averages over `videos` with evenly spaced frames; zero when the model has no modules.
pub fn attention_stats(state: &ModelState, data: &SyntheticDataset, videos: &[usize], frames: usize) -> Result<AttentionStats> {
    let idx = sampling::eval_sample(data.config.frames_per_clip, frames)?;
    let (mut diag, mut hel, mut count) = (0.0, 0.0, 0usize);
    for &v in videos {
        let out = backbone::model_forward(&data.clip_tensor(v, &idx)?, state, state.full_wiring())?;
        for stack in &out.attention {
            for f in 0..stack.frames() {
                let a = losses::FlatAttentionMatrix::new(stack.frame_matrix(f))?;
                diag += losses::concentration_matrix(&a)?.mean_diagonal();
                hel += losses::mean_pairwise_hellinger(&a)?;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(AttentionStats { mean_diag: 0.0, mean_hellinger: 0.0 });
    }
    Ok(AttentionStats { mean_diag: diag / count as f64, mean_hellinger: hel / count as f64 })
}
