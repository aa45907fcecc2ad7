//! Two-phase training: maximum likelihood on normal positions, then the
//! boundary-guided objective with boundaries refreshed from the normal
//! log-likelihood distribution. Also Adam, the learning-rate schedule and
//! checkpoint persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{read_fbt, write_atomic, write_fbt, Dataset, Tensor};
use crate::flow::{
    random_orthogonal, CouplingBlock, FlowConfig, FlowModel, PermutationSource, DEFAULT_BLOCKS, DEFAULT_CLAMP,
    DEFAULT_COND_DIM,
};
use crate::gradients::{batch_log_likelihoods, loss_and_gradients_in, BatchSample};
use crate::objective::{
    build_boundary, find_normal_boundary, BoundaryState, FocalConfig, Label, LossBreakdown, ObjectiveConfig, Phase,
    DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_LAMBDA, DEFAULT_TAU,
};
use crate::scoring::grid_conditions;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "bgad-checkpoint 1";
const META_FILE: &str = "meta.txt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Linear warmup to `base_lr` over `[0, warmup_fraction)`, cosine decay to
/// zero over the rest.
pub fn lr_schedule(epoch_fraction: f64, warmup_fraction: f64, base_lr: f64) -> f64 {
    let f = epoch_fraction.clamp(0.0, 1.0);
    if warmup_fraction > 0.0 && f < warmup_fraction {
        return base_lr * f / warmup_fraction;
    }
    let progress = (f - warmup_fraction) / (1.0 - warmup_fraction);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// When the boundary is re-derived during the boundary-guided phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryRefresh {
    /// At the start of the phase and every `meta_epoch` epochs after.
    MetaEpoch,
    /// Only at the start of the phase.
    Once,
}

impl FromStr for BoundaryRefresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "meta-epoch" => Ok(Self::MetaEpoch),
            "once" => Ok(Self::Once),
            other => Err(Error::invalid(format!(
                "boundary_refresh must be 'meta-epoch' or 'once', got '{other}'"
            ))),
        }
    }
}

impl BoundaryRefresh {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MetaEpoch => "meta-epoch",
            Self::Once => "once",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Levels to train, empty for every dataset level.
    pub levels: Vec<String>,
    pub blocks: usize,
    pub cond_dim: usize,
    /// Subnet hidden width, `None` for `2·(d/2 + cond_dim)`.
    pub hidden: Option<usize>,
    pub clamp: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub phase1_epochs: usize,
    pub meta_epoch: usize,
    pub boundary_refresh: BoundaryRefresh,
    pub beta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub focal: Option<FocalConfig>,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling, `0` disables clipping.
    pub grad_clip: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            levels: Vec::new(),
            blocks: DEFAULT_BLOCKS,
            cond_dim: DEFAULT_COND_DIM,
            hidden: None,
            clamp: DEFAULT_CLAMP,
            lr: 2e-4,
            epochs: 200,
            batch_size: 32,
            warmup_epochs: 2,
            phase1_epochs: 16,
            meta_epoch: 8,
            boundary_refresh: BoundaryRefresh::MetaEpoch,
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            focal: None,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: 10.0,
            threads: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse '{value}'")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.phase1_epochs >= self.epochs {
            return fail(format!(
                "phase1_epochs ({}) must be < epochs ({})",
                self.phase1_epochs, self.epochs
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.meta_epoch == 0 {
            return fail("meta_epoch must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.blocks == 0 {
            return fail("blocks must be >= 1".into());
        }
        if self.cond_dim == 0 || !self.cond_dim.is_multiple_of(4) {
            return fail(format!(
                "cond_dim must be a positive multiple of 4, got {}",
                self.cond_dim
            ));
        }
        if self.hidden == Some(0) {
            return fail("hidden must be >= 1".into());
        }
        if self.threads == 0 {
            return fail("threads must be >= 1".into());
        }
        let checks = [
            ("clamp", self.clamp, self.clamp > 0.0),
            ("lr", self.lr, self.lr >= 0.0),
            ("beta", self.beta, self.beta > 0.0 && self.beta < 100.0),
            ("tau", self.tau, self.tau > 0.0),
            ("alpha", self.alpha, self.alpha >= 1.0),
            ("lambda", self.lambda, self.lambda >= 0.0),
            ("adam_beta1", self.adam.beta1, (0.0..1.0).contains(&self.adam.beta1)),
            ("adam_beta2", self.adam.beta2, (0.0..1.0).contains(&self.adam.beta2)),
            ("adam_eps", self.adam.eps, self.adam.eps > 0.0),
            ("grad_clip", self.grad_clip, self.grad_clip >= 0.0),
        ];
        for (name, v, ok) in checks {
            if !(ok && v.is_finite()) {
                return fail(format!("{name} out of range: {v}"));
            }
        }
        if self.tau > 1.0 - 1.0 / self.alpha {
            return fail(format!(
                "tau ({}) must be <= 1 - 1/alpha ({}) so the abnormal boundary stays >= -1",
                self.tau,
                1.0 - 1.0 / self.alpha
            ));
        }
        if let Some(f) = &self.focal {
            f.validate()?;
        }
        Ok(())
    }

    /// Sets one `key = value` entry. Returns `false` for keys that are not
    /// training keys. Any `focal_*` key switches focal weighting on.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "levels" => {
                self.levels = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "blocks" => self.blocks = parse(key, v)?,
            "cond_dim" => self.cond_dim = parse(key, v)?,
            "hidden" => self.hidden = if v == "auto" { None } else { Some(parse(key, v)?) },
            "clamp" => self.clamp = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "phase1_epochs" => self.phase1_epochs = parse(key, v)?,
            "meta_epoch" => self.meta_epoch = parse(key, v)?,
            "boundary_refresh" => self.boundary_refresh = v.parse()?,
            "beta" => self.beta = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "focal" => {
                self.focal = match v {
                    "on" | "true" => Some(self.focal.unwrap_or_default()),
                    "off" | "false" => None,
                    _ => return Err(Error::invalid(format!("focal must be on or off, got '{v}'"))),
                }
            }
            k if k.starts_with("focal_") => {
                let f = self.focal.get_or_insert_with(FocalConfig::default);
                let x: f64 = parse(key, v)?;
                match k {
                    "focal_alpha_norm" => f.alpha_norm = x,
                    "focal_gamma_norm" => f.gamma_norm = x,
                    "focal_logp_norm" => f.logp_norm_threshold = x,
                    "focal_alpha_abn" => f.alpha_abn = x,
                    "focal_gamma_abn" => f.gamma_abn = x,
                    "focal_logp_abn" => f.logp_abn_threshold = x,
                    _ => return Ok(false),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every training key with its value, in a fixed order. Feeding the
    /// pairs back through [`TrainConfig::set`] reproduces `self`.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("levels", self.levels.join(",")),
            ("blocks", self.blocks.to_string()),
            ("cond_dim", self.cond_dim.to_string()),
            ("hidden", self.hidden.map_or("auto".into(), |h| h.to_string())),
            ("clamp", format!("{:?}", self.clamp)),
            ("lr", format!("{:?}", self.lr)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("phase1_epochs", self.phase1_epochs.to_string()),
            ("meta_epoch", self.meta_epoch.to_string()),
            ("boundary_refresh", self.boundary_refresh.as_str().into()),
            ("beta", format!("{:?}", self.beta)),
            ("tau", format!("{:?}", self.tau)),
            ("alpha", format!("{:?}", self.alpha)),
            ("lambda", format!("{:?}", self.lambda)),
            ("seed", self.seed.to_string()),
            ("adam_beta1", format!("{:?}", self.adam.beta1)),
            ("adam_beta2", format!("{:?}", self.adam.beta2)),
            ("adam_eps", format!("{:?}", self.adam.eps)),
            ("grad_clip", format!("{:?}", self.grad_clip)),
            ("threads", self.threads.to_string()),
            ("focal", if self.focal.is_some() { "on" } else { "off" }.into()),
        ];
        if let Some(f) = &self.focal {
            out.extend([
                ("focal_alpha_norm", format!("{:?}", f.alpha_norm)),
                ("focal_gamma_norm", format!("{:?}", f.gamma_norm)),
                ("focal_logp_norm", format!("{:?}", f.logp_norm_threshold)),
                ("focal_alpha_abn", format!("{:?}", f.alpha_abn)),
                ("focal_gamma_abn", format!("{:?}", f.gamma_abn)),
                ("focal_logp_abn", format!("{:?}", f.logp_abn_threshold)),
            ]);
        }
        out
    }

    fn flow_config(&self, dim: usize) -> FlowConfig {
        FlowConfig {
            dim,
            cond_dim: self.cond_dim,
            blocks: self.blocks,
            hidden: self.hidden,
            clamp: self.clamp,
        }
    }
}

/// Per-epoch training summary. Losses are means over the epoch's batches
/// and levels; `bgspp_loss` is the hinge sum divided by the batch size,
/// before the `λ` factor.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub ml_loss: f64,
    pub bgspp_loss: f64,
    /// Learning rate at the first batch of the epoch.
    pub lr: f64,
    /// Raw normal boundary per level while this epoch ran.
    pub raw_b_n: Vec<Option<f64>>,
    pub boundary_refreshed: bool,
    pub violators: usize,
    /// Abnormal-labelled positions that entered a gradient this epoch.
    pub abnormal_positions: usize,
}

/// What one optimizer step saw; handed to the observer of
/// [`train_observed`].
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub level: &'a str,
    pub phase: Phase,
    /// Dataset sample index of every position in the batch.
    pub samples: &'a [usize],
    pub labels: &'a [Label],
    pub loss: &'a LossBreakdown,
    pub lr: f64,
}

/// Trained flows and boundaries, one per level.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub models: Vec<FlowModel>,
    pub boundaries: Vec<Option<BoundaryState>>,
    pub config: TrainConfig,
    pub epoch: usize,
    /// SHA-256 of the final state of every random stream, hex.
    pub rng_digest: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Flattened positions of one level.
struct LevelData {
    name: String,
    dim: usize,
    xs: Vec<f64>,
    cond: Vec<usize>,
    cond_table: Vec<Vec<f64>>,
    labels: Vec<Label>,
    sample: Vec<usize>,
    /// Positions of normal images: the phase-1 pool and the boundary fit set.
    clean: Vec<usize>,
    all: Vec<usize>,
}

impl LevelData {
    fn build(dataset: &Dataset, level: usize, cond_dim: usize) -> Result<Self> {
        let dim = dataset.samples[0].levels[level].channels();
        let mut grids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut data = Self {
            name: dataset.levels[level].clone(),
            dim,
            xs: Vec::new(),
            cond: Vec::new(),
            cond_table: Vec::new(),
            labels: Vec::new(),
            sample: Vec::new(),
            clean: Vec::new(),
            all: Vec::new(),
        };
        for (si, s) in dataset.samples.iter().enumerate() {
            let map = &s.levels[level];
            let grid = map.grid();
            let base = match grids.get(&grid) {
                Some(&b) => b,
                None => {
                    let b = data.cond_table.len();
                    data.cond_table
                        .extend(grid_conditions(grid, cond_dim)?.into_iter().map(|c| c.into_inner()));
                    grids.insert(grid, b);
                    b
                }
            };
            let labels = s.position_labels(level);
            for (p, label) in labels.into_iter().enumerate() {
                let idx = data.labels.len();
                data.xs.extend(map.vector_at(p / grid.1, p % grid.1));
                data.cond.push(base + p);
                data.labels.push(label);
                data.sample.push(si);
                data.all.push(idx);
                if s.label == Label::Normal {
                    data.clean.push(idx);
                }
            }
        }
        Ok(data)
    }

    fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    fn c(&self, i: usize) -> &[f64] {
        &self.cond_table[self.cond[i]]
    }

    fn pairs(&self, idx: &[usize]) -> Vec<(&[f64], &[f64])> {
        idx.iter().map(|&i| (self.x(i), self.c(i))).collect()
    }
}

fn make_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::invalid(format!("cannot start {threads} worker threads: {e}")))
}

fn refresh_boundary(
    model: &FlowModel,
    data: &LevelData,
    cfg: &TrainConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BoundaryState> {
    let logps = batch_log_likelihoods(model, &data.pairs(&data.clean), pool)?;
    let raw = find_normal_boundary(&logps, cfg.beta)?;
    build_boundary(raw, cfg.alpha, cfg.tau, cfg.beta).map_err(|e| {
        Error::Boundary(format!(
            "level '{}': normal boundary {raw} cannot be normalized ({e})",
            data.name
        ))
    })
}

fn rng_digest(rngs: &[ChaCha8Rng]) -> String {
    let mut h = Sha256::new();
    for r in rngs {
        h.update(r.get_seed());
        h.update(r.get_stream().to_le_bytes());
        h.update(r.get_word_pos().to_le_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Trains one flow per selected level. Deterministic given the config.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(dataset, config, |_| {})
}

/// As [`train`], reporting every optimizer step to `observer`.
pub fn train_observed(
    dataset: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&BatchEvent<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.count(Label::Normal) == 0 {
        return Err(Error::invalid("training needs at least one normal sample"));
    }
    dataset.level_dims()?;
    let selected: Vec<usize> = if config.levels.is_empty() {
        (0..dataset.levels.len()).collect()
    } else {
        config
            .levels
            .iter()
            .map(|l| {
                dataset
                    .levels
                    .iter()
                    .position(|d| d == l)
                    .ok_or_else(|| Error::invalid(format!("level '{l}' is not in the dataset")))
            })
            .collect::<Result<_>>()?
    };
    let pool = make_pool(config.threads)?;
    let pool = pool.as_ref();

    let levels: Vec<LevelData> = selected
        .iter()
        .map(|&l| LevelData::build(dataset, l, config.cond_dim))
        .collect::<Result<_>>()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut models = Vec::with_capacity(levels.len());
    let mut rngs = Vec::with_capacity(levels.len());
    for data in &levels {
        let model_seed: u64 = master.random();
        models.push(FlowModel::new(
            &config.flow_config(data.dim),
            data.name.clone(),
            model_seed,
        )?);
        rngs.push(ChaCha8Rng::seed_from_u64(master.random()));
    }
    let mut adam: Vec<Vec<AdamState>> = models
        .iter()
        .map(|m| m.blocks().iter().map(|b| AdamState::new(b.params().len())).collect())
        .collect();
    let mut boundaries: Vec<Option<BoundaryState>> = vec![None; levels.len()];
    let mut history = Vec::with_capacity(config.epochs);
    let warmup_fraction = config.warmup_epochs as f64 / config.epochs as f64;

    for epoch in 0..config.epochs {
        let phase = if epoch < config.phase1_epochs {
            Phase::Likelihood
        } else {
            Phase::BoundaryGuided
        };
        let since = epoch.saturating_sub(config.phase1_epochs);
        let refresh = phase == Phase::BoundaryGuided
            && (since == 0
                || (config.boundary_refresh == BoundaryRefresh::MetaEpoch && since % config.meta_epoch == 0));
        if refresh {
            for (l, data) in levels.iter().enumerate() {
                boundaries[l] = Some(refresh_boundary(&models[l], data, config, pool)?);
            }
        }

        let orders: Vec<Vec<usize>> = levels
            .iter()
            .zip(rngs.iter_mut())
            .map(|(data, rng)| {
                let mut order = match phase {
                    Phase::Likelihood => data.clean.clone(),
                    Phase::BoundaryGuided => data.all.clone(),
                };
                order.shuffle(rng);
                order
            })
            .collect();
        let batches: Vec<usize> = orders.iter().map(|o| o.len().div_ceil(config.batch_size)).collect();
        let n_batches = batches.iter().copied().max().unwrap_or(0);

        let mut record = EpochRecord {
            epoch,
            phase,
            ml_loss: 0.0,
            bgspp_loss: 0.0,
            lr: 0.0,
            raw_b_n: boundaries.iter().map(|b| b.map(|b| b.raw_b_n)).collect(),
            boundary_refreshed: refresh,
            violators: 0,
            abnormal_positions: 0,
        };
        let mut steps = 0usize;

        for b in 0..n_batches {
            // schedule sampled at the step midpoint, so no step runs at lr 0
            let frac = (epoch as f64 + (b as f64 + 0.5) / n_batches as f64) / config.epochs as f64;
            let lr = lr_schedule(frac, warmup_fraction, config.lr);
            if b == 0 {
                record.lr = lr;
            }
            for (l, data) in levels.iter().enumerate() {
                if b >= batches[l] {
                    continue;
                }
                let idx = &orders[l][b * config.batch_size..((b + 1) * config.batch_size).min(orders[l].len())];
                if epoch == 0 && b == 0 {
                    models[l].init_scales(&data.pairs(idx))?;
                }
                let objective = match phase {
                    Phase::Likelihood => ObjectiveConfig::likelihood(),
                    Phase::BoundaryGuided => ObjectiveConfig::boundary_guided(
                        boundaries[l].expect("refreshed at phase start"),
                        config.lambda,
                        config.focal,
                    ),
                };
                let batch: Vec<BatchSample<'_>> = idx
                    .iter()
                    .map(|&i| BatchSample {
                        x: data.x(i),
                        c: data.c(i),
                        label: data.labels[i],
                        id: data.sample[i],
                    })
                    .collect();
                let diverged = |message: String| Error::Divergence {
                    epoch,
                    batch: b,
                    level: data.name.clone(),
                    message,
                };
                let mut grads = loss_and_gradients_in(&models[l], &batch, &objective, pool).map_err(|e| match e {
                    Error::NonFinite(_) | Error::Block { .. } => diverged(e.to_string()),
                    other => other,
                })?;
                if !grads.is_finite() {
                    return Err(diverged("non-finite gradient".into()));
                }
                let norm = grads.global_norm();
                if config.grad_clip > 0.0 && norm > config.grad_clip {
                    grads.scale(config.grad_clip / norm);
                }
                for (block, (g, state)) in models[l]
                    .blocks_mut()
                    .iter_mut()
                    .zip(grads.blocks.iter().zip(adam[l].iter_mut()))
                {
                    adam_step(block.params_mut(), g, state, lr, &config.adam)?;
                }

                let sample_ids: Vec<usize> = idx.iter().map(|&i| data.sample[i]).collect();
                let labels: Vec<Label> = idx.iter().map(|&i| data.labels[i]).collect();
                observer(&BatchEvent {
                    epoch,
                    batch: b,
                    level: &data.name,
                    phase,
                    samples: &sample_ids,
                    labels: &labels,
                    loss: &grads.loss,
                    lr,
                });
                record.ml_loss += grads.loss.ml;
                record.bgspp_loss += grads.loss.bgspp / batch.len() as f64;
                record.violators += grads.loss.violators;
                record.abnormal_positions += labels.iter().filter(|l| **l == Label::Abnormal).count();
                steps += 1;
            }
        }
        if steps > 0 {
            record.ml_loss /= steps as f64;
            record.bgspp_loss /= steps as f64;
        }
        history.push(record);
    }

    for m in &mut models {
        m.snap_to_f32();
    }
    let mut cfg = config.clone();
    cfg.levels = levels.iter().map(|d| d.name.clone()).collect();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            models,
            boundaries,
            config: cfg,
            epoch: config.epochs,
            rng_digest: rng_digest(&rngs),
        },
        history,
    })
}

fn fmt_boundary(b: &Option<BoundaryState>) -> String {
    match b {
        None => "none".into(),
        Some(b) => format!(
            "{:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            b.raw_b_n, b.b_n, b.b_a, b.alpha_n, b.beta, b.tau, b.alpha
        ),
    }
}

fn tensor_file(level: usize, block: usize, part: &str) -> String {
    format!("level{level}_block{block}_{part}.fbt")
}

impl Checkpoint {
    /// Boundaries of every level, or an error naming the first level
    /// trained without a boundary-guided phase.
    pub fn require_boundaries(&self) -> Result<Vec<BoundaryState>> {
        self.boundaries
            .iter()
            .zip(&self.models)
            .map(|(b, m)| {
                b.ok_or_else(|| {
                    Error::invalid(format!(
                        "level '{}' has no boundary; train with phase1_epochs < epochs to run the boundary-guided phase",
                        m.level()
                    ))
                })
            })
            .collect()
    }

    pub fn levels(&self) -> Vec<String> {
        self.models.iter().map(|m| m.level().to_string()).collect()
    }

    fn meta_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format = {CHECKPOINT_FORMAT}");
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "rng_digest = {}", self.rng_digest);
        for (k, v) in self.config.to_pairs() {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        let _ = writeln!(s, "levels = {}", self.models.len());
        for (l, (m, b)) in self.models.iter().zip(&self.boundaries).enumerate() {
            let first = &m.blocks()[0];
            let _ = writeln!(s, "level.{l}.name = {}", m.level());
            let _ = writeln!(s, "level.{l}.dim = {}", m.dim());
            let _ = writeln!(s, "level.{l}.cond_dim = {}", m.cond_dim());
            let _ = writeln!(s, "level.{l}.blocks = {}", m.blocks().len());
            let _ = writeln!(s, "level.{l}.hidden = {}", first.hidden());
            let _ = writeln!(s, "level.{l}.clamp = {:?}", first.clamp());
            for (i, block) in m.blocks().iter().enumerate() {
                let perm = match block.permutation_source() {
                    PermutationSource::Seeded(seed) => format!("seeded {seed}"),
                    PermutationSource::Explicit => "explicit".into(),
                };
                let _ = writeln!(s, "level.{l}.block.{i}.permutation = {perm}");
            }
            let _ = writeln!(s, "level.{l}.boundary = {}", fmt_boundary(b));
        }
        s
    }

    /// Writes the checkpoint into a fresh sibling directory, then swaps it
    /// in place of `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let name = dir
            .file_name()
            .ok_or_else(|| Error::invalid(format!("not a directory path: {}", dir.display())))?;
        let mut tmp_name = std::ffi::OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(format!(".tmp{}", std::process::id()));
        let tmp = dir.with_file_name(tmp_name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for (l, m) in self.models.iter().enumerate() {
            for (i, block) in m.blocks().iter().enumerate() {
                let shape = block.shape();
                let [w1, b1, w2, b2] = shape.offsets();
                let p = block.params();
                let parts: [(&str, Vec<usize>, &[f64]); 5] = [
                    ("w1", vec![shape.hidden, shape.inputs], &p[w1..b1]),
                    ("b1", vec![shape.hidden], &p[b1..w2]),
                    ("w2", vec![shape.outputs, shape.hidden], &p[w2..b2]),
                    ("b2", vec![shape.outputs], &p[b2..]),
                    ("scale", vec![m.dim()], block.scale()),
                ];
                for (part, dims, values) in parts {
                    write_fbt(tmp.join(tensor_file(l, i, part)), &Tensor::from_f64(dims, values)?)?;
                }
                if *block.permutation_source() == PermutationSource::Explicit {
                    write_fbt(
                        tmp.join(tensor_file(l, i, "perm")),
                        &Tensor::from_f64(vec![m.dim(), m.dim()], block.permutation())?,
                    )?;
                }
            }
        }
        write_atomic(&tmp.join(META_FILE), self.meta_text().as_bytes())?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let bad = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut meta = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("{META_FILE} line {}: expected key = value", n + 1)))?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing key '{k}'")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad value for '{k}'"))) };
        let real = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad value for '{k}'"))) };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format '{}'", get("format")?)));
        }
        let mut config = TrainConfig::default();
        for (k, v) in &meta {
            if let Some(key) = k.strip_prefix("config.") {
                if !config.set(key, v).map_err(|e| bad(e.to_string()))? {
                    return Err(bad(format!("unknown config key '{key}'")));
                }
            }
        }
        let n_levels = num("levels")?;
        let mut models = Vec::with_capacity(n_levels);
        let mut boundaries = Vec::with_capacity(n_levels);
        for l in 0..n_levels {
            let key = |s: &str| format!("level.{l}.{s}");
            let dim = num(&key("dim"))?;
            let cond_dim = num(&key("cond_dim"))?;
            let hidden = num(&key("hidden"))?;
            let clamp = real(&key("clamp"))?;
            let n_blocks = num(&key("blocks"))?;
            let mut blocks = Vec::with_capacity(n_blocks);
            for i in 0..n_blocks {
                let read = |part: &str, dims: &[usize]| -> Result<Vec<f64>> {
                    let path: PathBuf = dir.join(tensor_file(l, i, part));
                    let t = read_fbt(&path)?;
                    if t.dims() != dims {
                        return Err(bad(format!(
                            "{} has dims {:?}, expected {dims:?}",
                            path.display(),
                            t.dims()
                        )));
                    }
                    Ok(t.to_f64())
                };
                let split = dim / 2;
                let (inputs, outputs) = (split + cond_dim, 2 * (dim - split));
                let mut params = read("w1", &[hidden, inputs])?;
                params.extend(read("b1", &[hidden])?);
                params.extend(read("w2", &[outputs, hidden])?);
                params.extend(read("b2", &[outputs])?);
                let scale = read("scale", &[dim])?;
                let perm_key = key(&format!("block.{i}.permutation"));
                let perm_spec = get(&perm_key)?;
                let (perm, source) = match perm_spec.split_once(' ') {
                    Some(("seeded", seed)) => {
                        let seed: u64 = seed.parse().map_err(|_| bad(format!("bad value for '{perm_key}'")))?;
                        (random_orthogonal(dim, seed), PermutationSource::Seeded(seed))
                    }
                    _ if perm_spec == "explicit" => (read("perm", &[dim, dim])?, PermutationSource::Explicit),
                    _ => return Err(bad(format!("bad value for '{perm_key}'"))),
                };
                let block = CouplingBlock::from_parts(dim, cond_dim, hidden, clamp, params, perm, source, scale)
                    .map_err(|e| bad(format!("level {l} block {i}: {e}")))?;
                blocks.push(block);
            }
            models.push(FlowModel::from_blocks(blocks, get(&key("name"))?.clone())?);
            let b = get(&key("boundary"))?;
            boundaries.push(if b == "none" {
                None
            } else {
                let v: Vec<f64> = b
                    .split_whitespace()
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(format!("bad boundary for level {l}")))?;
                if v.len() != 7 {
                    return Err(bad(format!("bad boundary for level {l}")));
                }
                Some(BoundaryState {
                    raw_b_n: v[0],
                    b_n: v[1],
                    b_a: v[2],
                    alpha_n: v[3],
                    beta: v[4],
                    tau: v[5],
                    alpha: v[6],
                })
            });
        }
        Ok(Self {
            models,
            boundaries,
            config,
            epoch: num("epoch")?,
            rng_digest: get("rng_digest")?.clone(),
        })
    }
}
