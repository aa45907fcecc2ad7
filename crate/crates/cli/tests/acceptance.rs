//! Acceptance suite: twelve criteria, one PASS/FAIL line each. Runs as a
//! plain binary so the lines are always printed; exits nonzero if any
//! criterion fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bgad_cli::commands::bound_summary;
use bgad_core::data::{synth_dataset, BinaryMask, Dataset, RasterImage, SynthKind};
use bgad_core::flow::{position_embedding, FlowConfig, HALF_LOG_2PI};
use bgad_core::gradients::{loss_and_gradients, BatchSample};
use bgad_core::metrics::{auroc, pro, AnomalyMap};
use bgad_core::objective::{
    build_boundary, combined_loss, find_normal_boundary, focal_weight_abnormal, focal_weight_normal, is_extreme,
    ml_loss,
};
use bgad_core::racp::{racp_generate, AnomalyRegion};
use bgad_core::scoring::{log_likelihood_grids, margin_occupancy, score_dataset};
use bgad_core::trainer::{train, train_observed};
use bgad_core::{BoundaryState, Checkpoint, FlowModel, FocalConfig, Label, ObjectiveConfig, Phase, TrainConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit_secs: u64, start: Instant, detail: String, ok: bool) -> Verdict {
    let took = start.elapsed();
    let detail = format!("{detail}; {:.1} s (limit {limit_secs} s)", took.as_secs_f64());
    check(ok && took <= Duration::from_secs(limit_secs), detail)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_model(dim: usize, blocks: usize, cond_dim: usize, seed: u64) -> FlowModel {
    let cfg = FlowConfig {
        cond_dim,
        blocks,
        ..FlowConfig::new(dim)
    };
    let mut m = FlowModel::new(&cfg, "l0", seed).unwrap();
    // fan-in scaled, so the coupling scales stay off the clamp plateau
    let fan_in = (dim / 2 + cond_dim) as f64;
    m.randomize(1.0 / fan_in.sqrt(), 0.2, seed.wrapping_add(7919));
    m
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// 1 -------------------------------------------------------------------------

fn invertibility() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let dim = [2, 4, 8][(i % 3) as usize];
        let blocks = [1, 4, 8][((i / 3) % 3) as usize];
        let model = random_model(dim, blocks, 64, i);
        let c = position_embedding(((i % 7) as usize, (i % 5) as usize), (7, 5), 64).unwrap();
        let x: Vec<f64> = gaussian_vec(&mut rng, dim).iter().map(|v| 2.0 * v).collect();
        let back = model.inverse(&model.forward(&x, &c).unwrap().z, &c).unwrap();
        let err: Vec<f64> = x.iter().zip(&back).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&err) / norm(&x));
    }
    within(
        10,
        start,
        format!("max relative round-trip error {worst:.2e} over 1000 pairs"),
        worst < 1e-6,
    )
}

// 2 -------------------------------------------------------------------------

fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
            .unwrap();
        if p != k {
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
        }
        let pivot = a[k * n + k];
        acc += pivot.abs().ln();
        for r in k + 1..n {
            let f = a[r * n + k] / pivot;
            for c in k..n {
                a[r * n + c] -= f * a[k * n + c];
            }
        }
    }
    acc
}

fn numeric_logdet(model: &FlowModel, x: &[f64], c: &[f64], h: f64) -> f64 {
    let n = x.len();
    let mut jac = vec![0.0; n * n];
    for j in 0..n {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[j] += h;
        xm[j] -= h;
        let (zp, zm) = (model.forward(&xp, c).unwrap().z, model.forward(&xm, c).unwrap().z);
        for i in 0..n {
            jac[i * n + j] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    log_abs_det(jac, n)
}

fn log_det() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for i in 0..200u64 {
        let dim = 1 + (i % 8) as usize;
        let blocks = [1, 2, 4, 8][((i / 8) % 4) as usize];
        let model = random_model(dim, blocks, 64, 1000 + i);
        let c = position_embedding(((i % 4) as usize, (i % 6) as usize), (4, 6), 64).unwrap();
        let x = gaussian_vec(&mut rng, dim);
        let analytic = model.forward(&x, &c).unwrap().logdet;
        let numeric = numeric_logdet(&model, &x, &c, 1e-7);
        // relative to |logdet|, floored at 1 where the log-det is near zero
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
    }
    within(
        60,
        start,
        format!("max relative log-det error {worst:.2e} over 200 pairs"),
        worst < 1e-4,
    )
}

// 3 -------------------------------------------------------------------------

/// Bounding box of the inverse image of the radius-6 sphere in z, padded.
/// The sphere encloses all but ~1e-8 of the base mass, and a bijection maps
/// its interior inside the image of its boundary.
fn covering_box(m: &FlowModel, c: &[f64]) -> Vec<(f64, f64)> {
    let dim = m.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for k in 0..4000 {
        let t = std::f64::consts::TAU * k as f64 / 4000.0;
        let z = if dim == 1 {
            vec![if k % 2 == 0 { 6.0 } else { -6.0 }]
        } else {
            vec![6.0 * t.cos(), 6.0 * t.sin()]
        };
        for (i, v) in m.inverse(&z, c).unwrap().into_iter().enumerate() {
            lo[i] = lo[i].min(v);
            hi[i] = hi[i].max(v);
        }
    }
    lo.into_iter()
        .zip(hi)
        .map(|(a, b)| {
            let pad = 0.05 * (b - a);
            (a - pad, b + pad)
        })
        .collect()
}

fn normalization() -> Verdict {
    let start = Instant::now();
    let c = position_embedding((0, 0), (1, 1), 8).unwrap();
    let mut masses = Vec::new();
    for seed in 0..3 {
        let m = random_model(1, 3, 8, 300 + seed);
        let (a, b) = covering_box(&m, &c)[0];
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mass: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * m.log_likelihood(&[a + i as f64 * h], &c).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        masses.push(("d=1", mass));
    }
    for seed in 0..3 {
        let m = random_model(2, 3, 8, 400 + seed);
        let bx = covering_box(&m, &c);
        let n = 800;
        let (h0, h1) = ((bx[0].1 - bx[0].0) / n as f64, (bx[1].1 - bx[1].0) / n as f64);
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [bx[0].0 + (i as f64 + 0.5) * h0, bx[1].0 + (j as f64 + 0.5) * h1];
                mass += m.log_likelihood(&x, &c).unwrap().exp();
            }
        }
        masses.push(("d=2", mass * h0 * h1));
    }
    let worst = masses.iter().map(|(_, m)| (m - 1.0).abs()).fold(0.0, f64::max);
    let shown: Vec<String> = masses.iter().map(|(d, m)| format!("{d}:{m:.4}")).collect();
    within(30, start, format!("masses {}", shown.join(" ")), worst <= 0.02)
}

// 4 -------------------------------------------------------------------------

struct Batch {
    xs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

impl Batch {
    fn new(dim: usize, n: usize, abnormal: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            xs: (0..n).map(|_| gaussian_vec(&mut rng, dim)).collect(),
            cs: (0..n)
                .map(|i| position_embedding((i / 4, i % 4), (4, 4), 8).unwrap().into_inner())
                .collect(),
            labels: (0..n)
                .map(|i| if i < abnormal { Label::Abnormal } else { Label::Normal })
                .collect(),
        }
    }

    fn samples(&self) -> Vec<BatchSample<'_>> {
        (0..self.xs.len())
            .map(|i| BatchSample {
                x: &self.xs[i],
                c: &self.cs[i],
                label: self.labels[i],
                id: i,
            })
            .collect()
    }

    fn logps(&self, m: &FlowModel) -> Vec<f64> {
        self.xs
            .iter()
            .zip(&self.cs)
            .map(|(x, c)| m.log_likelihood(x, c).unwrap())
            .collect()
    }
}

/// The batch objective from raw log-likelihoods with weights held fixed.
fn reference_loss(logps: &[f64], labels: &[Label], w: &[f64], b: Option<&BoundaryState>, lambda: f64) -> f64 {
    let normals: Vec<usize> = (0..logps.len()).filter(|&i| labels[i] == Label::Normal).collect();
    let ml = -normals.iter().map(|&i| w[i] * logps[i]).sum::<f64>() / normals.len() as f64;
    let Some(b) = b else { return ml };
    let mut hinge = 0.0;
    for i in 0..logps.len() {
        let x = logps[i] / b.alpha_n;
        hinge += match labels[i] {
            Label::Normal => w[i] * (b.b_n - x).max(0.0),
            Label::Abnormal if is_extreme(x) => 0.0,
            Label::Abnormal => w[i] * (x - b.b_a).max(0.0),
        };
    }
    ml + lambda * hinge / logps.len() as f64
}

/// `(worst relative error, checked, kink-skipped)` over a 5% coordinate
/// sample. Coordinates whose one-sided slopes disagree straddle a ReLU or
/// hinge kink and are counted separately.
fn fd_gradient(model: &FlowModel, b: &Batch, objective: &ObjectiveConfig, seed: u64) -> (f64, usize, usize) {
    let analytic = loss_and_gradients(model, &b.samples(), objective).unwrap();
    let base = b.logps(model);
    let weights: Vec<f64> = base
        .iter()
        .zip(&b.labels)
        .map(|(&lp, l)| match (objective.focal.as_ref(), l) {
            (None, _) => 1.0,
            (Some(f), Label::Normal) => focal_weight_normal(lp, f),
            (Some(f), Label::Abnormal) => focal_weight_abnormal(lp, f).unwrap(),
        })
        .collect();
    let loss = |m: &FlowModel| {
        reference_loss(
            &b.logps(m),
            &b.labels,
            &weights,
            objective.boundary.as_ref(),
            objective.lambda,
        )
    };
    let f0 = loss(model);
    let h = 1e-5;
    // gradient size at which roundoff in the loss alone reaches 1e-4
    let floor = 1e4 * f64::EPSILON * f0.abs().max(1.0) / h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for (bi, block) in model.blocks().iter().enumerate() {
        let len = block.params().len();
        for i in sample(&mut rng, len, (len / 20).max(1)) {
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.blocks_mut()[bi].params_mut()[i] += h;
            minus.blocks_mut()[bi].params_mut()[i] -= h;
            let (fp, fm) = (loss(&plus), loss(&minus));
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-3) {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.blocks[bi][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            checked += 1;
        }
    }
    (worst, checked, skipped)
}

fn midpoint_boundary(m: &FlowModel, b: &Batch) -> BoundaryState {
    let mut lps: Vec<f64> = b
        .logps(m)
        .into_iter()
        .zip(&b.labels)
        .filter(|(_, l)| **l == Label::Normal)
        .map(|(lp, _)| lp)
        .collect();
    lps.sort_by(f64::total_cmp);
    let mid = lps.len() / 2;
    build_boundary(0.5 * (lps[mid - 1] + lps[mid]), 2.0, 0.2, 5.0).unwrap()
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, kind) in [("ml", 0), ("ml+bgspp", 1), ("focal", 2)] {
        let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
        for (k, dim) in [2usize, 5, 8].into_iter().enumerate() {
            let seed = 40 + 10 * kind + k as u64;
            let model = random_model(dim, 4, 8, seed);
            let batch = Batch::new(dim, 16, if kind == 0 { 0 } else { 5 }, seed);
            let objective = match kind {
                0 => ObjectiveConfig::likelihood(),
                1 => ObjectiveConfig::boundary_guided(midpoint_boundary(&model, &batch), 1.0, None),
                _ => ObjectiveConfig::boundary_guided(
                    midpoint_boundary(&model, &batch),
                    1.0,
                    Some(FocalConfig::default()),
                ),
            };
            let (w, c, s) = fd_gradient(&model, &batch, &objective, seed);
            worst = worst.max(w);
            checked += c;
            skipped += s;
        }
        ok &= worst < 1e-4 && checked > 0 && skipped * 50 <= checked + skipped;
        parts.push(format!("{name} {worst:.1e} ({checked} coords, {skipped} at kinks)"));
    }
    within(120, start, parts.join(", "), ok)
}

// 5 -------------------------------------------------------------------------

fn boundary() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = 0;
    let mut fraction_violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..300);
        let coarse = rng.random_bool(0.5);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    -(rng.random_range(0..20) as f64)
                } else {
                    -rng.random::<f64>() * 50.0
                }
            })
            .collect();
        let beta = rng.random_range(0.01..99.99);
        let got = find_normal_boundary(&values, beta).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let k = (1..=n).find(|&k| 100.0 * k as f64 >= beta * n as f64).unwrap();
        if got != sorted[k - 1] {
            mismatches += 1;
        }
        let below = values.iter().filter(|&&v| v < got).count() as f64;
        if below >= beta / 100.0 * n as f64 {
            fraction_violations += 1;
        }
    }
    check(
        mismatches == 0 && fraction_violations == 0,
        format!("10000 lists: {mismatches} oracle mismatches, {fraction_violations} strict-below violations"),
    )
}

// 6 -------------------------------------------------------------------------

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        let _ = i;
        for (_, &sj) in scores.iter().enumerate().filter(|(j, _)| !labels[*j]) {
            pairs += 1;
            num += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    num as f64 / (2 * pairs) as f64
}

fn components(mask: &BinaryMask) -> Vec<usize> {
    let (h, w) = mask.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            for (dr, dc) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < h as isize && cc >= 0 && cc < w as isize && mask.get(rr as usize, cc as usize) {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, rr as usize * w + cc as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut ids = vec![0usize; h * w];
    let mut root_id = HashMap::new();
    for (p, &on) in mask.bits().iter().enumerate() {
        if on {
            let root = find(&mut parent, p);
            let next = root_id.len() + 1;
            ids[p] = *root_id.entry(root).or_insert(next);
        }
    }
    ids
}

fn brute_pro(maps: &[AnomalyMap], masks: &[BinaryMask], limit: f64) -> f64 {
    let (mut region_of, mut scores, mut regions) = (Vec::new(), Vec::new(), 0);
    for (m, g) in maps.iter().zip(masks) {
        let ids = components(g);
        let count = ids.iter().copied().max().unwrap_or(0);
        region_of.extend(ids.iter().map(|&i| if i == 0 { 0 } else { regions + i }));
        scores.extend_from_slice(&m.scores);
        regions += count;
    }
    let mut thresholds = scores.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut sizes = vec![0usize; regions + 1];
    for &r in &region_of {
        sizes[r] += 1;
    }
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let mut hits = vec![0usize; regions + 1];
        for (&s, &r) in scores.iter().zip(&region_of) {
            if s >= t {
                hits[r] += 1;
            }
        }
        let overlap = (1..=regions).map(|k| hits[k] as f64 / sizes[k] as f64).sum::<f64>() / regions as f64;
        points.push((hits[0] as f64 / sizes[0] as f64, overlap));
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((f0, o0), (f1, o1)) = (w[0], w[1]);
        if f0 >= limit {
            break;
        }
        if f1 <= limit {
            area += (f1 - f0) * (o0 + o1) / 2.0;
        } else {
            let o_lim = o0 + (o1 - o0) * (limit - f0) / (f1 - f0);
            area += (limit - f0) * (o0 + o_lim) / 2.0;
            break;
        }
    }
    area / limit
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_auroc: f64 = 0.0;
    for &n in &[2usize, 10, 100, 1000, 5000, 10_000] {
        for quantize in [false, true] {
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = labels
                .iter()
                .map(|&l| {
                    let s = rng.random::<f64>() + if l { 0.25 } else { 0.0 };
                    if quantize {
                        (s * 16.0).round() / 16.0
                    } else {
                        s
                    }
                })
                .collect();
            worst_auroc = worst_auroc.max((auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs());
        }
    }
    let mut pro_mismatches = 0;
    let cases = 20;
    for trial in 0..cases {
        let images = 1 + trial % 4;
        let (mut maps, mut masks) = (Vec::new(), Vec::new());
        for i in 0..images {
            let mut mask = BinaryMask::empty(32, 32);
            for _ in 0..rng.random_range(1..5) {
                let (r0, c0) = (rng.random_range(0..28), rng.random_range(0..28));
                let (hh, ww) = (rng.random_range(1..7), rng.random_range(1..7));
                for r in r0..(r0 + hh).min(32) {
                    for c in c0..(c0 + ww).min(32) {
                        if rng.random_bool(0.85) {
                            mask.set(r, c, true);
                        }
                    }
                }
            }
            let scores = mask
                .bits()
                .iter()
                .map(|&b| {
                    let s = rng.random::<f64>() + if b { 0.4 } else { 0.0 };
                    if trial % 3 == 0 {
                        (s * 10.0).floor() / 10.0
                    } else {
                        s
                    }
                })
                .collect();
            maps.push(AnomalyMap::new(format!("m{i}"), 32, 32, scores).unwrap());
            masks.push(mask);
        }
        for limit in [0.05, 0.3, 1.0] {
            if pro(&maps, &masks, limit).unwrap() != brute_pro(&maps, &masks, limit) {
                pro_mismatches += 1;
            }
        }
    }
    check(
        worst_auroc <= 1e-9 && pro_mismatches == 0,
        format!(
            "auroc max deviation {worst_auroc:.1e} (lists to 10^4); pro exact on {}/{} 32x32 cases",
            cases * 3 - pro_mismatches,
            cases * 3
        ),
    )
}

// 7, 8, 11 ----------------------------------------------------------------

struct Synthetic {
    train: Dataset,
    test: Dataset,
}

fn synthetic() -> Synthetic {
    Synthetic {
        train: synth_dataset(SynthKind::GaussianCluster, 2000, 5, 8, 7).unwrap(),
        test: synth_dataset(SynthKind::GaussianCluster, 500, 100, 8, 8).unwrap(),
    }
}

fn scaled_defaults() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        seed: 7,
        ..TrainConfig::default()
    }
}

struct RunResult {
    checkpoint: Checkpoint,
    image_auroc: f64,
    occupancy: f64,
}

fn run_synthetic(data: &Synthetic, cfg: &TrainConfig) -> RunResult {
    let checkpoint = train(&data.train, cfg).unwrap().checkpoint;
    let report = score_dataset(&checkpoint.models, &data.test, 0.0, None).unwrap();
    let labels: Vec<bool> = report.labels.iter().map(|l| *l == Label::Abnormal).collect();
    let image_auroc = auroc(&report.image_scores, &labels).unwrap();
    let grids = log_likelihood_grids(&checkpoint.models, &data.train, None).unwrap();
    let occupancy = margin_occupancy(&data.train, &grids, &checkpoint.require_boundaries().unwrap()).unwrap();
    RunResult {
        checkpoint,
        image_auroc,
        occupancy,
    }
}

fn end_to_end(data: &Synthetic) -> (Verdict, Option<Checkpoint>) {
    let start = Instant::now();
    let with = run_synthetic(data, &scaled_defaults());
    let without = run_synthetic(
        data,
        &TrainConfig {
            lambda: 0.0,
            ..scaled_defaults()
        },
    );
    let ok = with.image_auroc >= 0.95 && with.occupancy <= without.occupancy;
    let verdict = within(
        600,
        start,
        format!(
            "image AUROC λ=1 {:.5} (λ=0 {:.5}); margin occupancy λ=1 {:.5} vs λ=0 {:.5}; boundaries b_n {:.4} vs {:.4}",
            with.image_auroc,
            without.image_auroc,
            with.occupancy,
            without.occupancy,
            with.checkpoint.require_boundaries().unwrap()[0].b_n,
            without.checkpoint.require_boundaries().unwrap()[0].b_n
        ),
        ok,
    );
    (verdict, Some(with.checkpoint))
}

fn beta_direction(data: &Synthetic) -> Verdict {
    let (low, high) = std::thread::scope(|s| {
        let a = s.spawn(|| {
            run_synthetic(
                data,
                &TrainConfig {
                    beta: 1.0,
                    ..scaled_defaults()
                },
            )
        });
        let b = s.spawn(|| {
            run_synthetic(
                data,
                &TrainConfig {
                    beta: 10.0,
                    ..scaled_defaults()
                },
            )
        });
        (a.join().unwrap(), b.join().unwrap())
    });
    check(
        low.image_auroc >= high.image_auroc - 0.01,
        format!("image AUROC β=1 {:.5} vs β=10 {:.5}", low.image_auroc, high.image_auroc),
    )
}

fn bound(data: &Synthetic, checkpoint: Option<&Checkpoint>) -> Verdict {
    let Some(ckpt) = checkpoint else {
        return Err("needs the λ=1 run of criterion 7".into());
    };
    let summary = bound_summary(ckpt, &data.train, None, None).map_err(|e| e.to_string())?;
    let b = ckpt.require_boundaries().unwrap()[0];
    let model = &ckpt.models[0];
    let eps = 0.05 * (b.b_n - b.b_a);
    let c = position_embedding((0, 0), (1, 1), model.cond_dim()).unwrap();
    let (mut normals, mut abnormals) = (Vec::new(), Vec::new());
    for s in &data.train.samples {
        let x = model.log_likelihood(&s.levels[0].vector_at(0, 0), &c).unwrap() / b.alpha_n;
        match s.label {
            Label::Normal => normals.push(x),
            Label::Abnormal => abnormals.push(x),
        }
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let lhs = mean(&normals, &|x| (b.b_n - eps - x).max(0.0)) + mean(&abnormals, &|x| (x - b.b_a - eps).max(0.0));
    let (n, m) = (normals.len() as f64, abnormals.len() as f64);
    let rhs = (model.dim() as f64 * HALF_LOG_2PI - 0.5) * (b.b_n - b.b_a) / ckpt.config.lambda + n / (n + m);
    let r = summary.levels[0].report;
    let dev = (r.lhs - lhs)
        .abs()
        .max((r.rhs - rhs).abs())
        .max((r.slack - (rhs - lhs)).abs());
    check(
        r.slack >= 0.0 && dev <= 1e-12 && summary.levels[0].epsilon == eps,
        format!(
            "lhs {:.6} rhs {:.6} slack {:.6}; brute-force deviation {dev:.1e}",
            r.lhs, r.rhs, r.slack
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn anomaly_free() -> Verdict {
    let ds = synth_dataset(SynthKind::Ring, 600, 0, 4, 9).unwrap();
    let cfg = TrainConfig {
        blocks: 4,
        cond_dim: 16,
        epochs: 12,
        phase1_epochs: 4,
        meta_epoch: 4,
        lr: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let (mut steps, mut bad_steps) = (0, 0);
    let outcome = train_observed(&ds, &cfg, |ev| {
        if ev.phase == Phase::BoundaryGuided {
            steps += 1;
            let all_normal = ev.labels.iter().all(|l| *l == Label::Normal);
            let reduced = ev.loss.ml + cfg.lambda * ev.loss.bgspp / ev.labels.len() as f64;
            if !all_normal || ev.loss.total != reduced {
                bad_steps += 1;
            }
        }
    })
    .map_err(|e| format!("training failed: {e}"))?;
    let ckpt = &outcome.checkpoint;
    let b = ckpt.require_boundaries().map_err(|e| e.to_string())?[0];
    let c = position_embedding((0, 0), (1, 1), cfg.cond_dim).unwrap();
    let logps: Vec<f64> = ds.samples[..64]
        .iter()
        .map(|s| ckpt.models[0].log_likelihood(&s.levels[0].vector_at(0, 0), &c).unwrap())
        .collect();
    let labels = vec![Label::Normal; logps.len()];
    let loss = combined_loss(&logps, &labels, &ObjectiveConfig::boundary_guided(b, cfg.lambda, None)).unwrap();
    let pull: f64 = logps.iter().map(|lp| (b.b_n - lp / b.alpha_n).max(0.0)).sum();
    let expected = ml_loss(&logps).unwrap() + cfg.lambda * pull / logps.len() as f64;
    let dev = (loss.total - expected).abs() / expected.abs().max(1.0);
    check(
        steps > 0 && bad_steps == 0 && dev <= 1e-12,
        format!("{steps} phase-2 steps, {bad_steps} not ML + pull-only; final-model deviation {dev:.1e}"),
    )
}

// 10 ------------------------------------------------------------------------

fn racp() -> Verdict {
    let (h, w) = (48, 56);
    let mut normal = RasterImage::filled("n", h, w, 3, 0).unwrap();
    let mut abnormal = RasterImage::filled("a", h, w, 3, 0).unwrap();
    let mut mask = BinaryMask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            normal
                .pixel_mut(r, c)
                .copy_from_slice(&[(r * 5) as u8, (c * 4) as u8, ((r + c) % 256) as u8]);
            abnormal
                .pixel_mut(r, c)
                .copy_from_slice(&[220, (r * c % 253) as u8, (3 * r) as u8]);
            let (dr, dc) = (r as f64 - 20.0, c as f64 - 30.0);
            if dr * dr / 64.0 + dc * dc / 121.0 <= 1.0 {
                mask.set(r, c, true);
            }
        }
    }
    let region = AnomalyRegion::from_mask(mask);
    let digest = |seed: u64| {
        let out = racp_generate(&normal, &abnormal, &region, 3, seed).unwrap();
        let mut hasher = Sha256::new();
        hasher.update(out.image.pixels());
        hasher.update(out.mask.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
        (hasher.finalize().to_vec(), out.check_fidelity(&normal))
    };
    let (mut differing, mut unfaithful) = (0, 0);
    for seed in 0..100 {
        let (a, fa) = digest(seed);
        let (b, fb) = digest(seed);
        differing += usize::from(a != b);
        unfaithful += usize::from(!fa) + usize::from(!fb);
    }
    check(
        differing == 0 && unfaithful == 0,
        format!("100 seeds: {differing} non-identical reruns, {unfaithful} fidelity failures"),
    )
}

// 12 ------------------------------------------------------------------------

fn tree_digest(dir: &Path) -> String {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update(std::fs::read(&f).unwrap());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_bgad");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "synth_kind = ring\nsynth_dim = 4\nsynth_grid = 8x8\nsynth_train_normal = 60\nsynth_train_abnormal = 4\n\
         synth_test_normal = 12\nsynth_test_abnormal = 12\n\
         train_manifest = data/train/manifest.csv\ntest_manifest = data/test/manifest.csv\n\
         epochs = 8\nphase1_epochs = 3\nmeta_epoch = 2\nblocks = 4\ncond_dim = 16\nlr = 5e-4\n\
         smoothing_sigma = 1\nseed = 12\n",
    )
    .unwrap();
    let bgad = |args: &[&str]| {
        let status = Command::new(bin).args(args).output().unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    let cfg_s = cfg.to_str().unwrap();
    bgad(&[
        "synth",
        "--config",
        cfg_s,
        "--out",
        dir.path().join("data").to_str().unwrap(),
    ]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        bgad(&["train", "--config", cfg_s, "--out", out.to_str().unwrap()]);
        let report = std::fs::read(out.join("metrics.txt")).unwrap();
        (
            tree_digest(&out.join("checkpoint")),
            report,
            std::fs::read(out.join("scores.csv")).unwrap(),
        )
    };
    let (a, b) = (run("a"), run("b"));
    let same_ckpt = a.0 == b.0;
    let same_report = a.1 == b.1 && a.2 == b.2;
    check(
        same_ckpt && same_report,
        format!(
            "checkpoint digest {}… {}; metric report {}",
            &a.0[..12],
            if same_ckpt { "identical" } else { "differs" },
            if same_report { "identical" } else { "differs" }
        ),
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    // cargo passes harness flags such as --nocapture or a name filter
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let data = synthetic();
    let mut checkpoint = None;
    let mut results: Vec<(u8, &str, Verdict)> = Vec::new();
    let mut record = |id: u8, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let v = guarded(f);
        let (tag, detail) = match &v {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag}  {name}: {detail}");
        results.push((id, name, v));
    };
    record(1, "invertibility", &mut invertibility);
    record(2, "log-det", &mut log_det);
    record(3, "normalization", &mut normalization);
    record(4, "gradients", &mut gradients);
    record(5, "boundary", &mut boundary);
    record(6, "metric oracles", &mut metric_oracles);
    record(7, "end-to-end detection", &mut || {
        let (v, c) = end_to_end(&data);
        checkpoint = c;
        v
    });
    record(8, "beta direction", &mut || beta_direction(&data));
    record(9, "anomaly-free path", &mut anomaly_free);
    record(10, "racp determinism and fidelity", &mut racp);
    record(11, "bound report", &mut || bound(&data, checkpoint.as_ref()));
    record(12, "determinism", &mut determinism);
    let failed = results.iter().filter(|(_, _, v)| v.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
