//! `cmma` command line: train, eval, heatmap, sample-check, gen-data.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 unreadable or malformed input, 3 invalid
//! configuration, 4 unknown clip.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Ablation};
use crate::error::Error;
use crate::losses::{self, FlatAttentionMatrix};
use crate::retrieval::{self, EvalReport};
use crate::sampling;
use crate::trainer::{self, DatasetConfig, SyntheticDataset, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evenly spaced frames per clip.
    pub frames: usize,
    pub cross_camera: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { frames: 6, cross_camera: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint: "model.cmmc".into(), log: "train_log.csv".into() }
    }
}

/// Everything `train` needs, validated as a whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Desk preset: 500 steps at lr 1e-3 on the default synthetic benchmark.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.train.lr = 1e-3;
        c
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.train.validate().into_iter().map(|e| format!("train: {e}")).collect();
        errs.extend(self.dataset.validate().into_iter().map(|e| format!("dataset: {e}")));
        let b = &self.train.backbone;
        if b.input_height != self.dataset.height || b.input_width != self.dataset.width {
            errs.push(format!(
                "backbone input {}x{} does not match dataset frames {}x{}",
                b.input_height, b.input_width, self.dataset.height, self.dataset.width
            ));
        }
        let train_ids = self.dataset.identities.saturating_sub(self.dataset.test_count());
        if train_ids < self.train.p {
            errs.push(format!("batch needs {} identities, training split has {train_ids}", self.train.p));
        }
        if self.eval.frames == 0 {
            errs.push("eval: frames must be at least 1".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub video: usize,
    pub camera: usize,
    /// `synthetic:<seed>/<video>/<frame>` references into the deterministic generator.
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub id: usize,
    pub split: String,
    pub clips: Vec<ManifestClip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: DatasetConfig,
    pub identities: Vec<ManifestIdentity>,
}

impl DatasetManifest {
    pub fn describe(data: &SyntheticDataset) -> Self {
        let seed = data.config.seed;
        let identities = (0..data.config.identities)
            .map(|id| ManifestIdentity {
                id,
                split: if data.test_identities.contains(&id) { "test" } else { "train" }.into(),
                clips: data
                    .clips_of(id)
                    .map(|c| ManifestClip {
                        video: c.video,
                        camera: c.camera,
                        frames: (1..=data.config.frames_per_clip)
                            .map(|f| format!("synthetic:{seed}/{}/{f}", c.video))
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        Self { generator: data.config.clone(), identities }
    }

    /// Regenerates the frames and checks they agree with the listing.
    pub fn load(&self) -> Result<SyntheticDataset, Error> {
        let data = trainer::generate_dataset_with(&self.generator)?;
        if Self::describe(&data) != *self {
            return Err(Error::Format("manifest listing does not match its generator".into()));
        }
        Ok(data)
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 3,
            Error::Format(_) | Error::Json(_) => 2,
            _ => 1,
        };
        Self::new(code, e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::new(1, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "cmma", version, about = "Multi-attention video re-identification at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a JSON run config; writes a checkpoint and a per-step log CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.ablation.
        #[arg(long)]
        ablation: Option<String>,
        /// Overrides output.checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides output.log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rank-k and mAP of a checkpoint on the test split of a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        /// Keep same-camera matches of the query identity in the gallery.
        #[arg(long)]
        same_camera: bool,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention maps of one clip as graymaps plus CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        clip: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 6)]
        frames: usize,
    },
    /// Random-interval draws as JSON lines on stdout; uniformity summary on stderr.
    SampleCheck {
        #[arg(long = "t")]
        total: usize,
        #[arg(long = "n")]
        frames: usize,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic dataset and write its manifest.
    GenData {
        /// Run config whose `dataset` section is used; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train { config, ablation, checkpoint, log } => cmd_train(&config, ablation.as_deref(), checkpoint, log),
        Command::Eval { checkpoint, dataset, frames, same_camera, out } => {
            cmd_eval(&checkpoint, &dataset, frames, !same_camera, out.as_deref())
        }
        Command::Heatmap { checkpoint, dataset, clip, out_dir, frames } => {
            cmd_heatmap(&checkpoint, &dataset, clip, &out_dir, frames)
        }
        Command::SampleCheck { total, frames, draws, seed } => cmd_sample_check(total, frames, draws, seed),
        Command::GenData { config, out } => cmd_gen_data(config.as_deref(), &out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Reads and parses a JSON file; missing files and syntax errors are exit 2, with line and
/// column for the latter.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new(2, format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::new(
            2,
            format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()),
        )
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Parses, applies overrides and `CMMA_SEED`, and validates a run config.
pub fn load_run_config(path: &Path, ablation: Option<&str>) -> CliResult<RunConfig> {
    let mut cfg: RunConfig = read_json(path)?;
    let mut errs = Vec::new();
    if let Some(a) = ablation {
        match Ablation::parse(a) {
            Some(a) => cfg.train.ablation = a,
            None => errs.push(format!(
                "unknown ablation `{a}` (expected one of {})",
                Ablation::ALL.map(|a| a.name()).join(", ")
            )),
        }
    }
    if let Err(e) = cfg.train.apply_seed_env() {
        errs.push(e.to_string());
    }
    errs.extend(cfg.validate());
    if !errs.is_empty() {
        return Err(CliError::new(3, format!("invalid config:\n  {}", errs.join("\n  "))));
    }
    Ok(cfg)
}

pub fn cmd_train(config: &Path, ablation: Option<&str>, checkpoint: Option<PathBuf>, log: Option<PathBuf>) -> CliResult<()> {
    let mut cfg = load_run_config(config, ablation)?;
    if let Some(c) = checkpoint {
        cfg.output.checkpoint = c;
    }
    if let Some(l) = log {
        cfg.output.log = l;
    }
    let data = trainer::generate_dataset_with(&cfg.dataset)?;
    let outcome = trainer::train(&cfg.train, &data)?;
    backbone::save_checkpoint(&cfg.output.checkpoint, &outcome.state)?;
    let mut w = BufWriter::new(fs::File::create(&cfg.output.log)?);
    trainer::write_log(&mut w, &outcome.log)?;
    w.flush()?;
    let last = outcome.log.last().expect("at least one step");
    eprintln!(
        "trained {} steps ({}): L_total {:.4}, mean diag {:.3}; wrote {} and {}",
        last.step,
        cfg.train.ablation.name(),
        last.total,
        last.mean_diag,
        cfg.output.checkpoint.display(),
        cfg.output.log.display()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> CliResult<SyntheticDataset> {
    let manifest: DatasetManifest = read_json(path)?;
    Ok(manifest.load()?)
}

fn load_model(path: &Path) -> CliResult<backbone::ModelState> {
    backbone::load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => CliError::new(2, format!("cannot read checkpoint {}: {io}", path.display())),
        e => CliError::from(e),
    })
}

pub fn evaluate_dataset(
    state: &backbone::ModelState,
    data: &SyntheticDataset,
    frames: usize,
    cross_camera: bool,
) -> Result<EvalReport, Error> {
    let mut protocol = retrieval::test_protocol(data);
    protocol.cross_camera = cross_camera;
    retrieval::evaluate(state, data, &protocol, frames)
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, frames: usize, cross_camera: bool, out: Option<&Path>) -> CliResult<()> {
    let state = load_model(checkpoint)?;
    let data = load_dataset(dataset)?;
    let report = evaluate_dataset(&state, &data, frames, cross_camera)?;
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct HeatmapEntry {
    frame: usize,
    module: usize,
    submodule: usize,
    pgm: String,
    csv: String,
    max_weight: f64,
}

#[derive(Debug, Serialize)]
struct HeatmapManifest {
    clip: usize,
    identity: usize,
    frames: Vec<usize>,
    grids: Vec<[usize; 2]>,
    mean_diag: f64,
    maps: Vec<HeatmapEntry>,
}

/// Nearest-neighbour upsampling of an `h x w` map to `height x width`, scaled so the map
/// maximum is white.
fn graymap(values: &[f64], h: usize, w: usize, height: usize, width: usize) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            let v = values[(y * h / height) * w + x * w / width];
            let g = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
            out.push(g as u8);
        }
    }
    out
}

pub fn cmd_heatmap(checkpoint: &Path, dataset: &Path, clip: usize, out_dir: &Path, frames: usize) -> CliResult<()> {
    let state = load_model(checkpoint)?;
    let data = load_dataset(dataset)?;
    let Some(c) = data.clips.get(clip) else {
        return Err(CliError::new(4, format!("unknown clip {clip} (dataset has {})", data.clips.len())));
    };
    let idx = sampling::eval_sample(data.config.frames_per_clip, frames)?;
    let out = backbone::model_forward(&data.clip_tensor(clip, &idx)?, &state, state.full_wiring())?;
    if out.attention.is_empty() {
        return Err(CliError::new(1, "model has no attention modules"));
    }
    fs::create_dir_all(out_dir)?;
    let (height, width) = (data.config.height, data.config.width);
    let mut maps = Vec::new();
    let mut grids = Vec::new();
    let (mut diag, mut count) = (0.0, 0usize);
    for (m, stack) in out.attention.iter().enumerate() {
        let (h, w) = stack.grid();
        grids.push([h, w]);
        for n in 0..stack.frames() {
            let a = stack.frame_matrix(n);
            diag += losses::concentration_matrix(&FlatAttentionMatrix::new(a.clone())?)?.mean_diagonal();
            count += 1;
            for k in 0..stack.submodules() {
                let vals = &a.data()[k * h * w..(k + 1) * h * w];
                let stem = format!("frame{n}_mam{}_sub{k}", m + 1);
                fs::write(out_dir.join(format!("{stem}.pgm")), graymap(vals, h, w, height, width))?;
                let mut csv = String::new();
                for row in vals.chunks(w) {
                    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    csv.push_str(&cells.join(","));
                    csv.push('\n');
                }
                fs::write(out_dir.join(format!("{stem}.csv")), csv)?;
                maps.push(HeatmapEntry {
                    frame: idx[n],
                    module: m + 1,
                    submodule: k,
                    pgm: format!("{stem}.pgm"),
                    csv: format!("{stem}.csv"),
                    max_weight: vals.iter().cloned().fold(0.0, f64::max),
                });
            }
        }
    }
    let manifest = HeatmapManifest {
        clip,
        identity: c.identity,
        frames: idx,
        grids,
        mean_diag: diag / count as f64,
        maps,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct UniformityTest {
    chi2: f64,
    p: f64,
}

#[derive(Debug, Serialize)]
struct SampleSummary {
    draws: usize,
    padded: bool,
    g_min: usize,
    g_max: usize,
    g_histogram: BTreeMap<usize, u64>,
    g_uniformity: UniformityTest,
    /// Per interval, uniformity of the start over `[1, T - g*N]`.
    s_uniformity: BTreeMap<usize, UniformityTest>,
}

pub fn cmd_sample_check(total: usize, frames: usize, draws: usize, seed: u64) -> CliResult<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let summary = sample_check(&mut out, total, frames, draws, seed)?;
    out.flush()?;
    eprintln!("{summary}");
    Ok(())
}

/// Body of `sample-check`: writes one plan per line to `out` and returns the summary line.
pub fn sample_check<W: Write>(out: &mut W, total: usize, frames: usize, draws: usize, seed: u64) -> CliResult<String> {
    if frames == 0 || total == 0 || draws == 0 {
        return Err(CliError::new(3, "t, n and draws must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_max = sampling::max_interval(total, frames);
    let padded = g_max == 0;
    if padded {
        eprintln!("warning: T={total} < N+1={}; plans are padded by cycling frames", frames + 1);
    }
    let mut g_hist: BTreeMap<usize, u64> = BTreeMap::new();
    let mut s_hist: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for _ in 0..draws {
        let plan = sampling::ris_sample(total, frames, &mut rng)?;
        writeln!(out, "{}", serde_json::to_string(&plan).map_err(Error::from)?)?;
        if !plan.padded {
            *g_hist.entry(plan.interval).or_default() += 1;
            let bins = s_hist
                .entry(plan.interval)
                .or_insert_with(|| vec![0; total - plan.interval * frames]);
            bins[plan.start - 1] += 1;
        }
    }
    let g_counts: Vec<u64> = (1..=g_max.max(1)).map(|g| g_hist.get(&g).copied().unwrap_or(0)).collect();
    let (chi2, p) = if padded { (0.0, 1.0) } else { sampling::chi_square_uniform(&g_counts) };
    let summary = SampleSummary {
        draws,
        padded,
        g_min: g_hist.keys().next().copied().unwrap_or(0),
        g_max: g_hist.keys().last().copied().unwrap_or(0),
        g_histogram: g_hist,
        g_uniformity: UniformityTest { chi2, p },
        s_uniformity: s_hist
            .into_iter()
            .map(|(g, bins)| {
                let (chi2, p) = sampling::chi_square_uniform(&bins);
                (g, UniformityTest { chi2, p })
            })
            .collect(),
    };
    Ok(serde_json::to_string(&serde_json::json!({ "summary": summary })).map_err(Error::from)?)
}

pub fn cmd_gen_data(config: Option<&Path>, out: &Path) -> CliResult<()> {
    let dataset = match config {
        Some(p) => load_run_config(p, None)?.dataset,
        None => DatasetConfig::default(),
    };
    let data = trainer::generate_dataset_with(&dataset)?;
    write_json(out, &DatasetManifest::describe(&data))
}
