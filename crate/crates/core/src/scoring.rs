//! Per-position log-likelihoods of a dataset under trained flows, and their
//! conversion to anomaly maps and image scores.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::{Dataset, FeatureMap};
use crate::flow::{position_embedding, ConditionVector, FlowModel};
use crate::metrics::{assemble_map, image_score, AnomalyMap, LogpGrid};
use crate::objective::{bgspp_loss_l0, is_extreme, BoundaryState, Label};
use crate::{Error, Result};

/// Condition vectors of every position of an `h×w` grid, row-major.
pub fn grid_conditions(grid: (usize, usize), cond_dim: usize) -> Result<Vec<ConditionVector>> {
    let (h, w) = grid;
    (0..h * w)
        .map(|p| position_embedding((p / w, p % w), grid, cond_dim))
        .collect()
}

#[derive(Default)]
struct ConditionCache {
    grids: HashMap<(usize, usize, usize), Vec<ConditionVector>>,
}

impl ConditionCache {
    fn get(&mut self, grid: (usize, usize), cond_dim: usize) -> Result<&[ConditionVector]> {
        let key = (grid.0, grid.1, cond_dim);
        if let std::collections::hash_map::Entry::Vacant(e) = self.grids.entry(key) {
            e.insert(grid_conditions(grid, cond_dim)?);
        }
        Ok(&self.grids[&key])
    }
}

fn check_level(model: &FlowModel, map: &FeatureMap, sample: &str) -> Result<()> {
    if model.dim() != map.channels() {
        return Err(Error::Dimension(format!(
            "level '{}': model expects {} channels, sample '{sample}' has {}",
            model.level(),
            model.dim(),
            map.channels()
        )));
    }
    Ok(())
}

fn grid_logps(
    model: &FlowModel,
    map: &FeatureMap,
    conds: &[ConditionVector],
    pool: Option<&rayon::ThreadPool>,
) -> Result<LogpGrid> {
    let (h, w) = map.grid();
    let one = |p: usize| model.log_likelihood(&map.vector_at(p / w, p % w), &conds[p]);
    let values = match pool {
        Some(tp) => tp.install(|| (0..h * w).into_par_iter().map(one).collect::<Result<Vec<_>>>())?,
        None => (0..h * w).map(one).collect::<Result<Vec<_>>>()?,
    };
    Ok(LogpGrid {
        height: h,
        width: w,
        values,
    })
}

/// Per-level log-likelihood grids of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    pub grids: Vec<LogpGrid>,
    pub image_dims: (usize, usize),
}

/// Evaluates every position of every sample; `models[i]` scores dataset
/// level `i`.
pub fn log_likelihood_grids(
    models: &[FlowModel],
    dataset: &Dataset,
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<ScoredSample>> {
    if models.len() != dataset.levels.len() {
        return Err(Error::Dimension(format!(
            "{} models for {} dataset levels",
            models.len(),
            dataset.levels.len()
        )));
    }
    for (m, name) in models.iter().zip(&dataset.levels) {
        if m.level() != name {
            return Err(Error::Dimension(format!(
                "model for level '{}' given for dataset level '{name}'",
                m.level()
            )));
        }
    }
    let mut cache = ConditionCache::default();
    let mut out = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let mut grids = Vec::with_capacity(models.len());
        for (model, map) in models.iter().zip(&s.levels) {
            check_level(model, map, &s.id)?;
            let conds = cache.get(map.grid(), model.cond_dim())?;
            grids.push(grid_logps(model, map, conds, pool)?);
        }
        out.push(ScoredSample {
            id: s.id.clone(),
            label: s.label,
            grids,
            image_dims: s.image_dims,
        });
    }
    Ok(out)
}

/// Maximum log-likelihood of each level over all scored samples.
pub fn level_maxima(scored: &[ScoredSample]) -> Vec<f64> {
    let levels = scored.first().map_or(0, |s| s.grids.len());
    (0..levels)
        .map(|l| {
            scored
                .iter()
                .map(|s| s.grids[l].max())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub image_scores: Vec<f64>,
    pub maps: Vec<AnomalyMap>,
    /// Per-level maxima the scores are relative to.
    pub logp_max: Vec<f64>,
}

/// Anomaly maps and image scores for `scored`, each level scored against
/// its maximum over the whole set.
pub fn anomaly_maps(scored: &[ScoredSample], smoothing_sigma: f64) -> Result<ScoreReport> {
    if scored.is_empty() {
        return Err(Error::invalid("nothing to score"));
    }
    let logp_max = level_maxima(scored);
    let maps = scored
        .iter()
        .map(|s| assemble_map(s.id.clone(), &s.grids, &logp_max, s.image_dims, smoothing_sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreReport {
        ids: scored.iter().map(|s| s.id.clone()).collect(),
        labels: scored.iter().map(|s| s.label).collect(),
        image_scores: maps.iter().map(image_score).collect(),
        maps,
        logp_max,
    })
}

/// Log-likelihood grids followed by [`anomaly_maps`].
pub fn score_dataset(
    models: &[FlowModel],
    dataset: &Dataset,
    smoothing_sigma: f64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<ScoreReport> {
    anomaly_maps(&log_likelihood_grids(models, dataset, pool)?, smoothing_sigma)
}

/// Normalized log-likelihoods of one level split by position label:
/// `(normals, abnormals)`. Abnormal positions below `-1` are dropped, as in
/// the training objective.
pub fn normalized_by_label(
    dataset: &Dataset,
    scored: &[ScoredSample],
    level: usize,
    boundary: &BoundaryState,
) -> (Vec<f64>, Vec<f64>) {
    let mut normals = Vec::new();
    let mut abnormals = Vec::new();
    for (s, sc) in dataset.samples.iter().zip(scored) {
        for (&lp, label) in sc.grids[level].values.iter().zip(s.position_labels(level)) {
            let x = boundary.normalize(lp);
            match label {
                Label::Normal => normals.push(x),
                Label::Abnormal if !is_extreme(x) => abnormals.push(x),
                Label::Abnormal => {}
            }
        }
    }
    (normals, abnormals)
}

/// Fraction of positions inside the margin region, i.e. the ℓ0 violator
/// count over the number of positions considered, pooled over levels.
pub fn margin_occupancy(dataset: &Dataset, scored: &[ScoredSample], boundaries: &[BoundaryState]) -> Result<f64> {
    if boundaries.len() != dataset.levels.len() {
        return Err(Error::Dimension(format!(
            "{} boundaries for {} levels",
            boundaries.len(),
            dataset.levels.len()
        )));
    }
    let (mut violators, mut total) = (0usize, 0usize);
    for (l, b) in boundaries.iter().enumerate() {
        let (n, a) = normalized_by_label(dataset, scored, l, b);
        violators += bgspp_loss_l0(&n, &a, b);
        total += n.len() + a.len();
    }
    if total == 0 {
        return Err(Error::invalid("no positions to measure"));
    }
    Ok(violators as f64 / total as f64)
}
