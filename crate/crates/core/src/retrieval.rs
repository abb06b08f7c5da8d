//! Query-versus-gallery ranking metrics.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, ModelState, Wiring};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sampling;
use crate::trainer::SyntheticDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub video: usize,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub query: Vec<EvalItem>,
    pub gallery: Vec<EvalItem>,
    /// Drop gallery entries sharing both identity and camera with the query.
    pub cross_camera: bool,
}

impl EvalProtocol {
    /// Every listed video is a query against all the others.
    pub fn all_vs_all(items: Vec<EvalItem>, cross_camera: bool) -> Self {
        Self { query: items.clone(), gallery: items, cross_camera }
    }

    fn counts_for(&self, q: &EvalItem, g: &EvalItem) -> bool {
        g.video != q.video && !(self.cross_camera && g.identity == q.identity && g.camera == q.camera)
    }

    fn check(&self, dist: &Tensor) -> Result<()> {
        dist.expect_rank(2, "distance matrix")?;
        if dist.shape() != [self.query.len(), self.gallery.len()] {
            return Err(Error::Dimension(format!(
                "distance matrix {:?} for {} queries and {} gallery items",
                dist.shape(),
                self.query.len(),
                self.gallery.len()
            )));
        }
        if !dist.all_finite() {
            return Err(Error::Argument("distance matrix has non-finite entries".into()));
        }
        Ok(())
    }

    /// Per query, relevance flags of the valid gallery entries in ranked order (ascending
    /// distance, ties by gallery index). `None` for queries without a valid match.
    fn ranked_relevance(&self, dist: &Tensor) -> Result<Vec<Option<Vec<bool>>>> {
        self.check(dist)?;
        let g = self.gallery.len();
        Ok(self
            .query
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let row = &dist.data()[qi * g..(qi + 1) * g];
                let mut order: Vec<usize> = (0..g).filter(|&j| self.counts_for(q, &self.gallery[j])).collect();
                order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
                let rel: Vec<bool> = order.iter().map(|&j| self.gallery[j].identity == q.identity).collect();
                rel.iter().any(|&r| r).then_some(rel)
            })
            .collect())
    }
}

/// `q x g` Euclidean distances between rows.
pub fn pairwise_distances(q: &Tensor, g: &Tensor) -> Result<Tensor> {
    q.expect_rank(2, "query embeddings")?;
    g.expect_rank(2, "gallery embeddings")?;
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let ng = g.shape()[0];
    if g.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "query dimension {d} differs from gallery dimension {}",
            g.shape()[1]
        )));
    }
    Ok(Tensor::from_fn(&[nq, ng], |i| {
        let (a, b) = (i / ng, i % ng);
        q.data()[a * d..(a + 1) * d]
            .iter()
            .zip(&g.data()[b * d..(b + 1) * d])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cmc {
    /// `curve[k-1]` is the rank-k accuracy.
    pub curve: Vec<f64>,
    pub excluded_queries: usize,
}

impl Cmc {
    pub fn rank(&self, k: usize) -> f64 {
        self.curve[k.clamp(1, self.curve.len()) - 1]
    }
}

/// Rank-1..=max_rank accuracies over the queries with at least one valid match.
pub fn cmc_curve(dist: &Tensor, protocol: &EvalProtocol, max_rank: usize) -> Result<Cmc> {
    if max_rank == 0 {
        return Err(Error::Argument("max_rank must be at least 1".into()));
    }
    let ranked = protocol.ranked_relevance(dist)?;
    let mut hits = vec![0usize; max_rank];
    let mut valid = 0usize;
    for rel in ranked.iter().flatten() {
        valid += 1;
        let first = rel.iter().position(|&r| r).unwrap();
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    if valid == 0 {
        return Err(Error::Argument("no query has a valid gallery match".into()));
    }
    Ok(Cmc {
        curve: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        excluded_queries: ranked.len() - valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanAp {
    pub value: f64,
    pub excluded_queries: usize,
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    if found == 0 {
        0.0
    } else {
        sum / found as f64
    }
}

pub fn mean_average_precision(dist: &Tensor, protocol: &EvalProtocol) -> Result<MeanAp> {
    let ranked = protocol.ranked_relevance(dist)?;
    let aps: Vec<f64> = ranked.iter().flatten().map(|r| average_precision(r)).collect();
    if aps.is_empty() {
        return Err(Error::Argument("no query has a valid gallery match".into()));
    }
    Ok(MeanAp {
        value: aps.iter().sum::<f64>() / aps.len() as f64,
        excluded_queries: ranked.len() - aps.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub rank20: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub excluded_queries: usize,
}

/// Embeddings of `videos` from evenly spaced frames, one row per video.
pub fn extract_embeddings(
    state: &ModelState,
    data: &SyntheticDataset,
    videos: &[usize],
    frames: usize,
    wiring: Wiring,
) -> Result<Tensor> {
    let idx = sampling::eval_sample(data.config.frames_per_clip, frames)?;
    let rows = videos
        .iter()
        .map(|&v| Ok(backbone::model_forward(&data.clip_tensor(v, &idx)?, state, wiring)?.embedding))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&rows)
}

/// Cross-camera all-versus-all protocol over the test identities.
pub fn test_protocol(data: &SyntheticDataset) -> EvalProtocol {
    let items = data
        .clips
        .iter()
        .filter(|c| data.test_identities.contains(&c.identity))
        .map(|c| EvalItem { video: c.video, identity: c.identity, camera: c.camera })
        .collect();
    EvalProtocol::all_vs_all(items, true)
}

pub fn evaluate(state: &ModelState, data: &SyntheticDataset, protocol: &EvalProtocol, frames: usize) -> Result<EvalReport> {
    let wiring = state.full_wiring();
    let qv: Vec<usize> = protocol.query.iter().map(|i| i.video).collect();
    let gv: Vec<usize> = protocol.gallery.iter().map(|i| i.video).collect();
    let q = extract_embeddings(state, data, &qv, frames, wiring)?;
    let g = if qv == gv { q.clone() } else { extract_embeddings(state, data, &gv, frames, wiring)? };
    let dist = pairwise_distances(&q, &g)?;
    let cmc = cmc_curve(&dist, protocol, 20)?;
    let map = mean_average_precision(&dist, protocol)?;
    Ok(EvalReport {
        rank1: cmc.rank(1),
        rank5: cmc.rank(5),
        rank10: cmc.rank(10),
        rank20: cmc.rank(20),
        map: map.value,
        excluded_queries: cmc.excluded_queries,
    })
}
