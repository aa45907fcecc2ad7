//! One function per subcommand. Each validates its whole input before
//! writing anything, then writes the config echo, then works.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bgad_core::data::{
    load_manifest, read_fbt, validate_manifest, write_atomic, write_fbt, BinaryMask, Dataset, Manifest, RasterImage,
    SampleRecord, Split, Tensor, ValidationOptions,
};
use bgad_core::data::{synth_dataset, synth_map_dataset};
use bgad_core::metrics::{auroc, pixel_auroc, pixel_roc_curve, pro, roc_csv, roc_curve, AnomalyMap};
use bgad_core::objective::{bound_report, BoundReport};
use bgad_core::racp::{racp_generate, AnomalyRegion};
use bgad_core::scoring::{log_likelihood_grids, score_dataset, ScoreReport};
use bgad_core::trainer::{train, EpochRecord};
use bgad_core::{Checkpoint, Error, Label, Phase, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Localization, RunConfig};

pub const CONFIG_ECHO: &str = "config.txt";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_REPORT: &str = "metrics.txt";
pub const ROC_CSV: &str = "roc.csv";
pub const PIXEL_ROC_CSV: &str = "pixel_roc.csv";
pub const BOUND_REPORT: &str = "bound_report.txt";
pub const AUGMENT_MANIFEST: &str = "augment.csv";

fn invalid(message: impl Into<String>) -> Error {
    Error::InvalidArgument(message.into())
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Shortest round-tripping decimal; `nan` for NaN.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:?}")
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), num)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str, command: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| invalid(format!("{command} needs '{key}' (config key or flag)")))
}

fn pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| invalid(format!("cannot start {threads} threads: {e}")))
}

fn write_echo(cfg: &RunConfig, command: &str) -> Result<()> {
    write_atomic(&cfg.out.join(CONFIG_ECHO), cfg.echo(command).as_bytes())
}

fn load_dataset(path: &Path, split: Split, localization: bool) -> Result<Dataset> {
    Dataset::load(&load_manifest(path, split)?, localization)
}

/// The dataset reduced to `levels`, in that order.
pub fn select_levels(dataset: &Dataset, levels: &[String]) -> Result<Dataset> {
    let index: Vec<usize> = levels
        .iter()
        .map(|l| {
            dataset
                .levels
                .iter()
                .position(|d| d == l)
                .ok_or_else(|| Error::Dimension(format!("level '{l}' is missing from the manifest")))
        })
        .collect::<Result<_>>()?;
    let mut out = Dataset {
        levels: levels.to_vec(),
        samples: dataset.samples.clone(),
    };
    for s in &mut out.samples {
        s.levels = index.iter().map(|&i| s.levels[i].clone()).collect();
    }
    Ok(out)
}

fn check_file_ids(ids: impl IntoIterator<Item = String>) -> Result<()> {
    let bad: Vec<String> = ids
        .into_iter()
        .filter(|id| id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']))
        .map(|id| format!("id '{id}' cannot name an output file"))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest(bad))
    }
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Likelihood => "likelihood",
        Phase::BoundaryGuided => "boundary",
    }
}

/// Per-epoch loss curve: `epoch,phase,ml_loss,bgspp_loss,lr,raw_b_n…`.
/// Single-level runs get one `raw_b_n` column, otherwise one per level.
pub fn loss_csv(history: &[EpochRecord], levels: &[String]) -> String {
    let mut s = String::from("epoch,phase,ml_loss,bgspp_loss,lr");
    if levels.len() == 1 {
        s.push_str(",raw_b_n");
    } else {
        for l in levels {
            let _ = write!(s, ",raw_b_n_{l}");
        }
    }
    s.push_str(",violators,abnormal_positions,boundary_refreshed\n");
    for r in history {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            phase_name(r.phase),
            num(r.ml_loss),
            num(r.bgspp_loss),
            num(r.lr)
        );
        for b in &r.raw_b_n {
            s.push(',');
            if let Some(b) = b {
                s.push_str(&num(*b));
            }
        }
        let _ = writeln!(s, ",{},{},{}", r.violators, r.abnormal_positions, r.boundary_refreshed);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Present when a test manifest was configured.
    pub metrics: Option<MetricsReport>,
}

/// Trains on `train_manifest`; with a `test_manifest` also scores and
/// evaluates the held-out set.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_path = required(&cfg.train_manifest, "train_manifest", "train")?;
    let dataset = load_dataset(train_path, Split::Train, false)?;
    let test = match &cfg.test_manifest {
        Some(p) => Some(load_dataset(p, Split::Test, false)?),
        None => None,
    };
    if let Some(t) = &test {
        check_file_ids(t.samples.iter().map(|s| s.id.clone()))?;
    }
    write_echo(cfg, "train")?;

    let outcome = train(&dataset, &cfg.train)?;
    outcome.checkpoint.save(cfg.checkpoint_dir())?;
    let levels = outcome.checkpoint.levels();
    write_atomic(&cfg.out.join(LOSS_CSV), loss_csv(&outcome.history, &levels).as_bytes())?;

    let metrics = match &test {
        Some(t) => {
            let test_manifest = load_manifest(cfg.test_manifest.as_ref().expect("set"), Split::Test)?;
            let scored = select_levels(t, &levels)?;
            let report = score_dataset(
                &outcome.checkpoint.models,
                &scored,
                cfg.smoothing_sigma,
                pool(cfg.train.threads)?.as_ref(),
            )?;
            write_scores(cfg, &report)?;
            Some(evaluate_files(cfg, &test_manifest)?)
        }
        None => None,
    };
    Ok(TrainSummary {
        checkpoint: outcome.checkpoint,
        history: outcome.history,
        metrics,
    })
}

/// `id,label,score` rows in dataset order.
pub fn scores_csv(report: &ScoreReport) -> String {
    let mut s = String::from("id,label,score\n");
    for ((id, label), score) in report.ids.iter().zip(&report.labels).zip(&report.image_scores) {
        let _ = writeln!(s, "{id},{},{}", label.as_str(), num(*score));
    }
    s
}

fn write_scores(cfg: &RunConfig, report: &ScoreReport) -> Result<()> {
    let maps_dir = cfg.maps_dir();
    let parent = maps_dir.parent().map(Path::to_path_buf).unwrap_or_default();
    let staging = parent.join(".maps.partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| io_error(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| io_error(&staging, e))?;
    for map in &report.maps {
        let tensor = Tensor::from_f64(vec![map.height, map.width], &map.scores)?;
        write_fbt(staging.join(format!("{}.fbt", map.id)), &tensor)?;
    }
    if maps_dir.exists() {
        fs::remove_dir_all(&maps_dir).map_err(|e| io_error(&maps_dir, e))?;
    }
    fs::rename(&staging, &maps_dir).map_err(|e| io_error(&maps_dir, e))?;
    write_atomic(&cfg.scores_path(), scores_csv(report).as_bytes())
}

/// Scores `test_manifest` with the checkpoint: an image score CSV and one
/// `H×W` anomaly-map FBT per sample.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreReport> {
    cfg.validate()?;
    let path = required(&cfg.test_manifest, "test_manifest", "score")?;
    let checkpoint = Checkpoint::load(cfg.checkpoint_dir())?;
    let dataset = select_levels(&load_dataset(path, Split::Test, false)?, &checkpoint.levels())?;
    check_file_ids(dataset.samples.iter().map(|s| s.id.clone()))?;
    write_echo(cfg, "score")?;
    let report = score_dataset(
        &checkpoint.models,
        &dataset,
        cfg.smoothing_sigma,
        pool(cfg.train.threads)?.as_ref(),
    )?;
    write_scores(cfg, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub normal: usize,
    pub abnormal: usize,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pro: Option<f64>,
    pub fpr_limit: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        format!(
            "samples = {}\nnormal = {}\nabnormal = {}\nimage_auroc = {}\npixel_auroc = {}\npro = {}\nfpr_limit = {}\n",
            self.samples,
            self.normal,
            self.abnormal,
            opt_num(self.image_auroc),
            opt_num(self.pixel_auroc),
            opt_num(self.pro),
            num(self.fpr_limit)
        )
    }
}

/// Reads an `id,label,score` CSV into `id → score`, rejecting duplicates.
pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: missing column '{name}'", path.display())))
    };
    let (id_col, score_col) = (col("id")?, col("score")?);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let score: f64 = row[score_col].trim().parse().map_err(|_| {
            invalid(format!(
                "{} row {}: bad score '{}'",
                path.display(),
                i + 1,
                &row[score_col]
            ))
        })?;
        out.push((row[id_col].to_string(), score));
    }
    Ok(out)
}

/// Scores aligned with the manifest order; every mismatch is itemized.
fn align_scores(manifest: &Manifest, scores: &[(String, f64)]) -> Result<Vec<f64>> {
    let mut problems = Vec::new();
    let mut by_id: HashMap<&str, f64> = HashMap::new();
    for (id, s) in scores {
        if by_id.insert(id.as_str(), *s).is_some() {
            problems.push(format!("score for '{id}' appears more than once"));
        }
    }
    let known: HashSet<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
    for (id, _) in scores {
        if !known.contains(id.as_str()) {
            problems.push(format!("score for '{id}' has no manifest record"));
        }
    }
    let mut aligned = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        match by_id.get(r.id.as_str()) {
            Some(s) => aligned.push(*s),
            None => problems.push(format!("record '{}' has no score", r.id)),
        }
    }
    if problems.is_empty() {
        Ok(aligned)
    } else {
        Err(Error::Manifest(problems))
    }
}

/// Maps and masks in manifest order, or `None` when pixel metrics are not
/// available and not required.
fn pixel_inputs(cfg: &RunConfig, manifest: &Manifest) -> Result<Option<(Vec<AnomalyMap>, Vec<BinaryMask>)>> {
    if cfg.localization == Localization::Off {
        return Ok(None);
    }
    let required = cfg.localization == Localization::On;
    let unmasked: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| r.label == Label::Abnormal && r.mask_path.is_none())
        .map(|r| format!("abnormal record '{}' has no mask", r.id))
        .collect();
    let maps_dir = cfg.maps_dir();
    if !unmasked.is_empty() || !maps_dir.is_dir() {
        if !required {
            return Ok(None);
        }
        let mut problems = unmasked;
        if !maps_dir.is_dir() {
            problems.push(format!("map directory {} does not exist", maps_dir.display()));
        }
        return Err(Error::Manifest(problems));
    }
    let mut maps = Vec::with_capacity(manifest.records.len());
    let mut masks = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let path = maps_dir.join(format!("{}.fbt", r.id));
        let t = read_fbt(&path)?;
        if t.dims().len() != 2 {
            return Err(Error::Dimension(format!("{}: expected an H×W map", path.display())));
        }
        let (h, w) = (t.dims()[0], t.dims()[1]);
        let mask = match &r.mask_path {
            Some(p) => BinaryMask::read_png(manifest.resolve(p))?,
            None => BinaryMask::empty(h, w),
        };
        maps.push(AnomalyMap::new(r.id.clone(), h, w, t.to_f64())?);
        masks.push(mask);
    }
    Ok(Some((maps, masks)))
}

fn evaluate_files(cfg: &RunConfig, manifest: &Manifest) -> Result<MetricsReport> {
    let scores = align_scores(manifest, &read_scores(&cfg.scores_path())?)?;
    let labels: Vec<bool> = manifest.records.iter().map(|r| r.label == Label::Abnormal).collect();
    let abnormal = labels.iter().filter(|l| **l).count();
    let both = abnormal > 0 && abnormal < labels.len();
    let image_auroc = if both { Some(auroc(&scores, &labels)?) } else { None };
    let mut report = MetricsReport {
        samples: labels.len(),
        normal: labels.len() - abnormal,
        abnormal,
        image_auroc,
        pixel_auroc: None,
        pro: None,
        fpr_limit: cfg.fpr_limit,
    };
    if both {
        write_atomic(
            &cfg.out.join(ROC_CSV),
            roc_csv(&roc_curve(&scores, &labels)?).as_bytes(),
        )?;
    }
    if let Some((maps, masks)) = pixel_inputs(cfg, manifest)? {
        let any_region = masks.iter().any(|m| !m.is_empty());
        let any_clear = masks.iter().any(|m| m.count() < m.bits().len());
        if any_region && any_clear {
            report.pixel_auroc = Some(pixel_auroc(&maps, &masks)?);
            report.pro = Some(pro(&maps, &masks, cfg.fpr_limit)?);
            write_atomic(
                &cfg.out.join(PIXEL_ROC_CSV),
                roc_csv(&pixel_roc_curve(&maps, &masks)?).as_bytes(),
            )?;
        } else if cfg.localization == Localization::On {
            return Err(invalid("pixel metrics need both anomalous and normal pixels"));
        }
    }
    write_atomic(&cfg.out.join(METRICS_REPORT), report.to_text().as_bytes())?;
    Ok(report)
}

/// Metrics of a scores CSV (and its maps) against `test_manifest`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let path = required(&cfg.test_manifest, "test_manifest", "eval")?;
    let manifest = load_manifest(path, Split::Test)?;
    validate_manifest(
        &manifest,
        ValidationOptions {
            localization: cfg.localization == Localization::On,
            require_features: false,
            check_files: true,
        },
    )?;
    align_scores(&manifest, &read_scores(&cfg.scores_path())?)?;
    write_echo(cfg, "eval")?;
    evaluate_files(cfg, &manifest)
}

fn absolute(manifest: &Manifest, p: &Path) -> Result<PathBuf> {
    let resolved = manifest.resolve(p);
    std::path::absolute(&resolved).map_err(|e| io_error(&resolved, e))
}

/// Cut-and-paste composites from the abnormal records of
/// `train_manifest` into its normal images, plus a manifest listing the
/// original records followed by the composites.
pub fn cmd_augment(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    let path = required(&cfg.train_manifest, "train_manifest", "augment")?;
    let manifest = load_manifest(path, Split::Train)?;
    validate_manifest(
        &manifest,
        ValidationOptions {
            localization: true,
            require_features: false,
            check_files: true,
        },
    )?;
    let normals: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.label == Label::Normal && r.image_path.is_some())
        .collect();
    let abnormals: Vec<&SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| r.label == Label::Abnormal && r.image_path.is_some())
        .collect();
    if normals.is_empty() || abnormals.is_empty() {
        return Err(invalid(
            "augment needs normal records with images and abnormal records with images and masks",
        ));
    }
    let count = cfg.racp_count.unwrap_or(normals.len());
    let ids: Vec<String> = (0..count).map(|k| format!("racp_{k:05}")).collect();
    let clashes: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| ids.contains(&r.id))
        .map(|r| format!("id '{}' clashes with a composite id", r.id))
        .collect();
    if !clashes.is_empty() {
        return Err(Error::Manifest(clashes));
    }
    write_echo(cfg, "augment")?;

    let mut extended = Manifest::new(Split::Train, manifest.levels.clone(), cfg.out.clone());
    for r in &manifest.records {
        let abs = |p: &Option<PathBuf>| p.as_ref().map(|p| absolute(&manifest, p)).transpose();
        extended.records.push(SampleRecord {
            id: r.id.clone(),
            label: r.label,
            image_path: abs(&r.image_path)?,
            mask_path: abs(&r.mask_path)?,
            feature_paths: r
                .feature_paths
                .iter()
                .map(|(l, p)| Ok((l.clone(), absolute(&manifest, p)?)))
                .collect::<Result<BTreeMap<_, _>>>()?,
        });
    }
    let mut cache: HashMap<PathBuf, RasterImage> = HashMap::new();
    let mut load = |p: PathBuf| -> Result<RasterImage> {
        if let Some(img) = cache.get(&p) {
            return Ok(img.clone());
        }
        let img = RasterImage::read_png(&p)?;
        cache.insert(p, img.clone());
        Ok(img)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    for (k, id) in ids.into_iter().enumerate() {
        let normal_rec = normals[k % normals.len()];
        let abnormal_rec = abnormals[rng.random_range(0..abnormals.len())];
        let seed = rng.next_u64();
        let normal = load(manifest.resolve(normal_rec.image_path.as_ref().expect("filtered")))?;
        let abnormal = load(manifest.resolve(abnormal_rec.image_path.as_ref().expect("filtered")))?;
        let mask = BinaryMask::read_png(manifest.resolve(abnormal_rec.mask_path.as_ref().expect("validated")))?;
        let out = racp_generate(
            &normal,
            &abnormal,
            &AnomalyRegion::from_mask(mask),
            cfg.racp_subset,
            seed,
        )
        .map_err(|e| match e {
            Error::InvalidArgument(m) => invalid(format!("{id} ({} into {}): {m}", abnormal_rec.id, normal_rec.id)),
            other => other,
        })?;
        let image_rel = PathBuf::from("augment").join("images").join(format!("{id}.png"));
        let mask_rel = PathBuf::from("augment").join("masks").join(format!("{id}.png"));
        out.image.write_png(cfg.out.join(&image_rel))?;
        out.mask.write_png(cfg.out.join(&mask_rel))?;
        extended.records.push(SampleRecord {
            id,
            label: Label::Abnormal,
            image_path: Some(image_rel),
            mask_path: Some(mask_rel),
            feature_paths: BTreeMap::new(),
        });
    }
    extended.write(cfg.out.join(AUGMENT_MANIFEST))?;
    Ok(extended)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelBound {
    pub level: String,
    pub epsilon: f64,
    pub report: BoundReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundSummary {
    pub levels: Vec<LevelBound>,
    /// Mean of the per-level sides; `slack = rhs - lhs`.
    pub aggregate: BoundReport,
}

impl BoundSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.levels {
            let _ = writeln!(s, "{}.lhs = {}", l.level, num(l.report.lhs));
            let _ = writeln!(s, "{}.rhs = {}", l.level, num(l.report.rhs));
            let _ = writeln!(s, "{}.slack = {}", l.level, num(l.report.slack));
        }
        let _ = writeln!(s, "lhs = {}", num(self.aggregate.lhs));
        let _ = writeln!(s, "rhs = {}", num(self.aggregate.rhs));
        let _ = writeln!(s, "slack = {}", num(self.aggregate.slack));
        s
    }
}

/// Normalized log-likelihoods of every position of `level`, split by
/// position label: `(normals, abnormals)`.
pub fn normalized_positions(
    dataset: &Dataset,
    grids: &[bgad_core::scoring::ScoredSample],
    level: usize,
    alpha_n: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (mut normals, mut abnormals) = (Vec::new(), Vec::new());
    for (s, g) in dataset.samples.iter().zip(grids) {
        for (&lp, label) in g.grids[level].values.iter().zip(s.position_labels(level)) {
            match label {
                Label::Normal => normals.push(lp / alpha_n),
                Label::Abnormal => abnormals.push(lp / alpha_n),
            }
        }
    }
    (normals, abnormals)
}

/// Both sides of the margin-error bound for every level of the checkpoint.
/// `epsilon` defaults to `0.05·τ`.
pub fn bound_summary(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    epsilon: Option<f64>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BoundSummary> {
    let boundaries = checkpoint.require_boundaries()?;
    let dataset = select_levels(dataset, &checkpoint.levels())?;
    let grids = log_likelihood_grids(&checkpoint.models, &dataset, pool)?;
    let lambda = checkpoint.config.lambda;
    let mut levels = Vec::with_capacity(boundaries.len());
    let mut any_abnormal = false;
    for (l, (b, m)) in boundaries.iter().zip(&checkpoint.models).enumerate() {
        let (normals, abnormals) = normalized_positions(&dataset, &grids, l, b.alpha_n);
        any_abnormal |= !abnormals.is_empty();
        let eps = epsilon.unwrap_or(0.05 * b.tau);
        levels.push(LevelBound {
            level: m.level().to_string(),
            epsilon: eps,
            report: bound_report(&normals, &abnormals, b, eps, lambda, m.dim())?,
        });
    }
    if !any_abnormal {
        return Err(invalid("bound report needs abnormal positions in the manifest"));
    }
    let k = levels.len() as f64;
    let lhs = levels.iter().map(|l| l.report.lhs).sum::<f64>() / k;
    let rhs = levels.iter().map(|l| l.report.rhs).sum::<f64>() / k;
    Ok(BoundSummary {
        levels,
        aggregate: BoundReport {
            lhs,
            rhs,
            slack: rhs - lhs,
        },
    })
}

/// Bound report on `train_manifest` (or the manifest given on the command
/// line) under the checkpoint's boundaries.
pub fn cmd_bound_report(cfg: &RunConfig) -> Result<BoundSummary> {
    cfg.validate()?;
    let path = required(&cfg.train_manifest, "train_manifest", "bound-report")?;
    let checkpoint = Checkpoint::load(cfg.checkpoint_dir())?;
    checkpoint.require_boundaries()?;
    let dataset = load_dataset(path, Split::Train, false)?;
    write_echo(cfg, "bound-report")?;
    let summary = bound_summary(&checkpoint, &dataset, cfg.epsilon, pool(cfg.train.threads)?.as_ref())?;
    write_atomic(&cfg.out.join(BOUND_REPORT), summary.to_text().as_bytes())?;
    Ok(summary)
}

/// Writes synthetic train and test sets under `<out>/train` and
/// `<out>/test`, each with a `manifest.csv`. The test set uses `seed + 1`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    cfg.validate()?;
    write_echo(cfg, "synth")?;
    let o = &cfg.synth;
    let make = |n: usize, m: usize, seed: u64| {
        if o.grid == (1, 1) {
            synth_dataset(o.kind, n, m, o.dim, seed)
        } else {
            synth_map_dataset(o.kind, n, m, o.dim, o.grid, seed)
        }
    };
    let seed = cfg.train.seed;
    let train_ds = make(o.train_normal, o.train_abnormal, seed)?;
    let test_ds = make(o.test_normal, o.test_abnormal, seed.wrapping_add(1))?;
    let train_dir = cfg.out.join("train");
    let test_dir = cfg.out.join("test");
    train_ds.write(&train_dir, "manifest.csv", Split::Train)?;
    test_ds.write(&test_dir, "manifest.csv", Split::Test)?;
    Ok((train_dir.join("manifest.csv"), test_dir.join("manifest.csv")))
}
