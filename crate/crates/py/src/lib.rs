//! Python module `cmma`: tensors travel as `(shape, flat row-major list)` pairs.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cmma_core::backbone::{self, Ablation, BackboneConfig, ModelState};
use cmma_core::cli::{evaluate_dataset, RunConfig};
use cmma_core::losses::{self, FlatAttentionMatrix};
use cmma_core::numerics::Tensor;
use cmma_core::retrieval::{self, EvalItem, EvalProtocol};
use cmma_core::trainer::{self, DatasetConfig, SyntheticDataset};
use cmma_core::{sampling, Error};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Training(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Shaped = (Vec<usize>, Vec<f64>);

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(&shape, data).map_err(err)
}

fn shaped(t: &Tensor) -> Shaped {
    (t.shape().to_vec(), t.data().to_vec())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    tensor(vec![r, c], rows.into_iter().flatten().collect())
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random-interval frame plan as a dict with keys T, N, g, s, indices, padded.
#[pyfunction]
fn ris_sample(py: Python<'_>, total: usize, frames: usize, seed: u64) -> PyResult<Py<PyDict>> {
    let plan = sampling::ris_sample(total, frames, &mut seeded(seed)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("T", plan.total_frames)?;
    d.set_item("N", plan.frames)?;
    d.set_item("g", plan.interval)?;
    d.set_item("s", plan.start)?;
    d.set_item("indices", plan.indices)?;
    d.set_item("padded", plan.padded)?;
    Ok(d.unbind())
}

#[pyfunction]
fn eval_sample(total: usize, frames: usize) -> PyResult<Vec<usize>> {
    sampling::eval_sample(total, frames).map_err(err)
}

#[pyfunction]
fn hellinger_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    losses::hellinger_distance(&a, &b).map_err(err)
}

/// Diversity loss of a `K x HW` matrix of attention rows.
#[pyfunction]
fn diversity_loss(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(losses::diversity_loss(&FlatAttentionMatrix::new(matrix(rows)?).map_err(err)?))
}

#[pyfunction]
fn concentration_matrix(rows: Vec<Vec<f64>>) -> PyResult<Shaped> {
    let a = FlatAttentionMatrix::new(matrix(rows)?).map_err(err)?;
    Ok(shaped(losses::concentration_matrix(&a).map_err(err)?.values()))
}

#[pyfunction]
fn concentration_loss(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = FlatAttentionMatrix::new(matrix(rows)?).map_err(err)?;
    Ok(losses::concentration_loss(&losses::concentration_matrix(&a).map_err(err)?))
}

fn items(v: Vec<(usize, usize, usize)>) -> Vec<EvalItem> {
    v.into_iter().map(|(video, identity, camera)| EvalItem { video, identity, camera }).collect()
}

/// CMC curve and excluded-query count; items are `(video, identity, camera)` triples.
#[pyfunction]
#[pyo3(signature = (dist, query, gallery, cross_camera=true, max_rank=20))]
fn cmc_curve(
    dist: Vec<Vec<f64>>,
    query: Vec<(usize, usize, usize)>,
    gallery: Vec<(usize, usize, usize)>,
    cross_camera: bool,
    max_rank: usize,
) -> PyResult<(Vec<f64>, usize)> {
    let p = EvalProtocol { query: items(query), gallery: items(gallery), cross_camera };
    let c = retrieval::cmc_curve(&matrix(dist)?, &p, max_rank).map_err(err)?;
    Ok((c.curve, c.excluded_queries))
}

#[pyfunction]
#[pyo3(signature = (dist, query, gallery, cross_camera=true))]
fn mean_average_precision(
    dist: Vec<Vec<f64>>,
    query: Vec<(usize, usize, usize)>,
    gallery: Vec<(usize, usize, usize)>,
    cross_camera: bool,
) -> PyResult<(f64, usize)> {
    let p = EvalProtocol { query: items(query), gallery: items(gallery), cross_camera };
    let m = retrieval::mean_average_precision(&matrix(dist)?, &p).map_err(err)?;
    Ok((m.value, m.excluded_queries))
}

#[pyfunction]
fn pairwise_distances(q: Vec<Vec<f64>>, g: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let d = retrieval::pairwise_distances(&matrix(q)?, &matrix(g)?).map_err(err)?;
    let cols = d.shape()[1];
    Ok(d.data().chunks(cols).map(|r| r.to_vec()).collect())
}

/// Synthetic multi-camera benchmark.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(SyntheticDataset);

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (identities=30, clips_per_identity=4, frames_per_clip=24, seed=0, config_json=None))]
    fn new(
        identities: usize,
        clips_per_identity: usize,
        frames_per_clip: usize,
        seed: u64,
        config_json: Option<&str>,
    ) -> PyResult<Self> {
        let cfg = match config_json {
            Some(j) => serde_json::from_str::<DatasetConfig>(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => DatasetConfig { identities, clips_per_identity, frames_per_clip, seed, ..Default::default() },
        };
        Ok(Self(trainer::generate_dataset_with(&cfg).map_err(err)?))
    }

    fn __len__(&self) -> usize {
        self.0.clips.len()
    }

    /// `(video, identity, camera)` of every clip.
    fn clips(&self) -> Vec<(usize, usize, usize)> {
        self.0.clips.iter().map(|c| (c.video, c.identity, c.camera)).collect()
    }

    #[getter]
    fn train_identities(&self) -> Vec<usize> {
        self.0.train_identities.clone()
    }

    #[getter]
    fn test_identities(&self) -> Vec<usize> {
        self.0.test_identities.clone()
    }

    /// Frames (1-based) of one clip as `N x 3 x H x W`.
    fn clip(&self, video: usize, indices: Vec<usize>) -> PyResult<Shaped> {
        Ok(shaped(&self.0.clip_tensor(video, &indices).map_err(err)?))
    }

    fn occluded(&self, video: usize) -> PyResult<Vec<bool>> {
        self.0
            .clips
            .get(video)
            .map(|c| c.occluded.clone())
            .ok_or_else(|| PyValueError::new_err(format!("unknown clip {video}")))
    }
}

/// Backbone, attention modules and classifier.
#[pyclass(name = "Model", frozen)]
struct PyModel(ModelState);

#[pymethods]
impl PyModel {
    /// Freshly initialized model; `config_json` is a backbone config (defaults when omitted).
    #[new]
    #[pyo3(signature = (classes, seed=0, config_json=None, ablation="multi-mam-con"))]
    fn new(classes: usize, seed: u64, config_json: Option<&str>, ablation: &str) -> PyResult<Self> {
        let cfg: BackboneConfig = match config_json {
            Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => BackboneConfig::default(),
        };
        let ab = Ablation::parse(ablation).ok_or_else(|| PyValueError::new_err(format!("unknown ablation {ablation}")))?;
        Ok(Self(ModelState::init(&cfg.with_ablation(ab), classes, &mut seeded(seed)).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(backbone::load_checkpoint(path.as_ref()).map_err(err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        backbone::save_checkpoint(path.as_ref(), &self.0).map_err(err)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.0.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    /// Returns `(embedding, logits, attention stacks)` for `N x 3 x H x W` frames.
    fn forward(&self, shape: Vec<usize>, data: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<Shaped>)> {
        let out = backbone::model_forward(&tensor(shape, data)?, &self.0, self.0.full_wiring()).map_err(err)?;
        Ok((
            out.embedding.data().to_vec(),
            out.logits.data().to_vec(),
            out.attention.iter().map(|a| shaped(a.values())).collect(),
        ))
    }

    /// Rank-k and mAP on the test split, as a dict.
    #[pyo3(signature = (dataset, frames=6, cross_camera=true))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, frames: usize, cross_camera: bool) -> PyResult<Bound<'py, PyDict>> {
        let r = evaluate_dataset(&self.0, &dataset.0, frames, cross_camera).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("rank1", r.rank1)?;
        d.set_item("rank5", r.rank5)?;
        d.set_item("rank10", r.rank10)?;
        d.set_item("rank20", r.rank20)?;
        d.set_item("mAP", r.map)?;
        d.set_item("excluded_queries", r.excluded_queries)?;
        Ok(d)
    }
}

/// Trains from a run-config JSON string (same schema as `cmma train`); returns the model and
/// the log rows `(step, L_total, L_id, L_trip, L_div, L_con, mean_diag)`.
#[pyfunction]
fn train(config_json: &str) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64, f64, f64, f64)>)> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(PyValueError::new_err(errs.join("; ")));
    }
    let data = trainer::generate_dataset_with(&cfg.dataset).map_err(err)?;
    let out = trainer::train(&cfg.train, &data).map_err(err)?;
    let log = out
        .log
        .iter()
        .map(|r| (r.step, r.total, r.id, r.triplet, r.diversity, r.concentration, r.mean_diag))
        .collect();
    Ok((PyModel(out.state), log))
}

#[pymodule]
fn cmma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ris_sample, m)?)?;
    m.add_function(wrap_pyfunction!(eval_sample, m)?)?;
    m.add_function(wrap_pyfunction!(hellinger_distance, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(concentration_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(concentration_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cmc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_distances, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
