//! Synthetic multi-camera video benchmark.
//!
//! Every identity wears four vertically stacked garment bands, one per body part. The texture
//! of a band is fixed by the part (like collars, sleeves and trouser legs), while its two colors
//! and its height come from the identity, drawn from a shared palette so identities differ by
//! arrangement rather than by a unique color. Cameras apply their own color gain and
//! background tint; occluders are horizontal bars painted over a random band of a random
//! subset of frames.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub identities: usize,
    /// One clip per camera.
    pub clips_per_identity: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    /// Identities held out for evaluation; `None` holds out a third.
    pub test_identities: Option<usize>,
    pub occlusion_rate: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities: 30,
            clips_per_identity: 4,
            frames_per_clip: 24,
            height: 64,
            width: 32,
            test_identities: None,
            occlusion_rate: 0.3,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn test_count(&self) -> usize {
        self.test_identities.unwrap_or(self.identities / 3)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.identities < 2 {
            errs.push(format!("dataset needs at least 2 identities, got {}", self.identities));
        }
        if self.test_count() >= self.identities {
            errs.push(format!(
                "test_identities {} leaves no training identity out of {}",
                self.test_count(),
                self.identities
            ));
        }
        if self.clips_per_identity == 0 || self.frames_per_clip == 0 {
            errs.push("clips_per_identity and frames_per_clip must be positive".into());
        }
        if self.height < 8 || self.width < 8 {
            errs.push(format!("frame size {}x{} below 8x8", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            errs.push(format!("occlusion_rate {} outside [0, 1]", self.occlusion_rate));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push(format!("noise {} must be nonnegative", self.noise));
        }
        errs
    }
}

/// One video: `T` frames of `3 x H x W` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video: usize,
    pub identity: usize,
    pub camera: usize,
    pub pixels: Vec<f32>,
    pub occluded: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    /// Ordered by identity, then camera; `clips[i].video == i`.
    pub clips: Vec<Clip>,
    pub train_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
}

impl SyntheticDataset {
    pub fn frame_len(&self) -> usize {
        3 * self.config.height * self.config.width
    }

    pub fn total_frames(&self) -> usize {
        self.clips.len() * self.config.frames_per_clip
    }

    pub fn clips_of(&self, identity: usize) -> impl Iterator<Item = &Clip> {
        self.clips.iter().filter(move |c| c.identity == identity)
    }

    /// Stacks the given 1-based frames of `video` into `N x 3 x H x W`.
    pub fn clip_tensor(&self, video: usize, indices: &[usize]) -> Result<Tensor> {
        let clip = self
            .clips
            .get(video)
            .ok_or_else(|| Error::Argument(format!("unknown clip {video}")))?;
        let fl = self.frame_len();
        let t = self.config.frames_per_clip;
        let mut data = Vec::with_capacity(indices.len() * fl);
        for &i in indices {
            if i == 0 || i > t {
                return Err(Error::Argument(format!("frame {i} outside 1..={t}")));
            }
            data.extend(clip.pixels[(i - 1) * fl..i * fl].iter().map(|&v| v as f64));
        }
        Tensor::new(&[indices.len(), 3, self.config.height, self.config.width], data)
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.20],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20],
    [0.10, 0.10, 0.10],
    [0.90, 0.90, 0.90],
    [0.55, 0.25, 0.65],
    [0.95, 0.50, 0.10],
];

const BANDS: usize = 4;

#[derive(Debug, Clone, Copy)]
enum Texture {
    Solid,
    Vertical,
    Horizontal,
    Checker,
}

const PART_TEXTURES: [Texture; BANDS] = [Texture::Horizontal, Texture::Vertical, Texture::Checker, Texture::Solid];

#[derive(Debug, Clone)]
struct Appearance {
    /// Band boundaries as fractions of body height.
    cuts: [f32; BANDS + 1],
    colors: [[f32; 3]; BANDS],
    accents: [[f32; 3]; BANDS],
    /// Body width as a fraction of frame width.
    girth: f32,
}

fn appearance(seed: u64, identity: usize) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + identity as u64);
    let mut weights = [0f32; BANDS];
    for w in &mut weights {
        *w = rng.gen_range(0.8..1.2);
    }
    let total: f32 = weights.iter().sum();
    let mut cuts = [0f32; BANDS + 1];
    for b in 0..BANDS {
        cuts[b + 1] = cuts[b] + weights[b] / total;
    }
    cuts[BANDS] = 1.0;
    let pick = |rng: &mut ChaCha8Rng| PALETTE[rng.gen_range(0..PALETTE.len())];
    let mut colors = [[0f32; 3]; BANDS];
    let mut accents = [[0f32; 3]; BANDS];
    for b in 0..BANDS {
        colors[b] = pick(&mut rng);
        accents[b] = pick(&mut rng);
    }
    Appearance { cuts, colors, accents, girth: rng.gen_range(0.45..0.65) }
}

struct Camera {
    gain: [f32; 3],
    background: [f32; 3],
}

fn camera(seed: u64, index: usize) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 40) + index as u64);
    let mut gain = [0f32; 3];
    let mut background = [0f32; 3];
    for c in 0..3 {
        gain[c] = rng.gen_range(0.65..1.35);
        background[c] = rng.gen_range(0.25..0.6);
    }
    Camera { gain, background }
}

/// Dataset with default frame size, occlusion rate and noise.
pub fn generate_dataset(identities: usize, clips_per_identity: usize, frames: usize, seed: u64) -> Result<SyntheticDataset> {
    generate_dataset_with(&DatasetConfig {
        identities,
        clips_per_identity,
        frames_per_clip: frames,
        seed,
        ..Default::default()
    })
}

/// Renders every clip. Identity appearance depends only on `(seed, identity)`; the last
/// `test_count` identities form the test split.
pub fn generate_dataset_with(config: &DatasetConfig) -> Result<SyntheticDataset> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let (h, w, t) = (config.height, config.width, config.frames_per_clip);
    let fl = 3 * h * w;
    let mut clips = Vec::with_capacity(config.identities * config.clips_per_identity);
    for id in 0..config.identities {
        let look = appearance(config.seed, id);
        for cam in 0..config.clips_per_identity {
            let video = clips.len();
            let view = camera(config.seed, cam);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((1 << 50) + video as u64);
            let mut pixels = vec![0f32; t * fl];
            let mut occluded = vec![false; t];
            // Slow drift of the body centre over the clip.
            let mut cx = w as f32 * rng.gen_range(0.4..0.6);
            let drift = rng.gen_range(-0.25..0.25f32);
            let top0 = h as f32 * rng.gen_range(0.03..0.1);
            let bottom0 = h as f32 * rng.gen_range(0.9..0.98);
            for f in 0..t {
                let frame = &mut pixels[f * fl..(f + 1) * fl];
                cx = (cx + drift + rng.gen_range(-0.5..0.5f32)).clamp(w as f32 * 0.3, w as f32 * 0.7);
                let dy = rng.gen_range(-2.0..2.0f32);
                render_person(frame, h, w, &look, &view, cx, top0 + dy, bottom0 + dy);
                for v in frame.iter_mut() {
                    *v += config.noise as f32 * rng.gen_range(-1.0..1.0f32);
                }
                if rng.gen_bool(config.occlusion_rate) {
                    occluded[f] = true;
                    let bar = rng.gen_range(h / 8..=h / 2);
                    let y0 = rng.gen_range(0..=h - bar);
                    let color = PALETTE[rng.gen_range(0..PALETTE.len())];
                    for c in 0..3 {
                        for y in y0..y0 + bar {
                            for x in 0..w {
                                frame[(c * h + y) * w + x] = color[c] * 0.8 + rng.gen_range(0.0..0.2f32);
                            }
                        }
                    }
                }
                frame.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            clips.push(Clip { video, identity: id, camera: cam, pixels, occluded });
        }
    }
    let split = config.identities - config.test_count();
    Ok(SyntheticDataset {
        config: config.clone(),
        clips,
        train_identities: (0..split).collect(),
        test_identities: (split..config.identities).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn render_person(frame: &mut [f32], h: usize, w: usize, look: &Appearance, view: &Camera, cx: f32, top: f32, bottom: f32) {
    let half = look.girth * w as f32 / 2.0;
    let span = bottom - top;
    for y in 0..h {
        let yf = y as f32 + 0.5;
        let rel = (yf - top) / span;
        let band = if (0.0..1.0).contains(&rel) {
            (0..BANDS).find(|&b| rel < look.cuts[b + 1])
        } else {
            None
        };
        for x in 0..w {
            let xf = x as f32 + 0.5;
            let rgb = match band {
                Some(b) if (xf - cx).abs() < half => {
                    let col = ((xf - cx + half) / 3.0) as i32 % 2 == 1;
                    let row = ((yf - top) / 3.0) as i32 % 2 == 1;
                    let accent = match PART_TEXTURES[b] {
                        Texture::Solid => false,
                        Texture::Vertical => col,
                        Texture::Horizontal => row,
                        Texture::Checker => col != row,
                    };
                    let base = if accent { look.accents[b] } else { look.colors[b] };
                    [base[0] * view.gain[0], base[1] * view.gain[1], base[2] * view.gain[2]]
                }
                _ => view.background,
            };
            for c in 0..3 {
                frame[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
}
