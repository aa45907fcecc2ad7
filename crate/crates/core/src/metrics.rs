//! Detection and localization metrics, and anomaly-map assembly.

use crate::data::BinaryMask;
use crate::objective::anomaly_score;
use crate::{Error, Result};

/// Largest number of thresholds a PRO sweep evaluates.
pub const MAX_PRO_THRESHOLDS: usize = 5000;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major scores in `[0, 1]`.
    pub scores: Vec<f64>,
}

impl AnomalyMap {
    pub fn new(id: impl Into<String>, height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width || scores.is_empty() {
            return Err(Error::Dimension(format!(
                "{height}x{width} map needs {} scores, got {}",
                height * width,
                scores.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anomaly map score".into()));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            scores,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Per-position log-likelihoods of one level, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogpGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LogpGrid {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Bilinear resize with half-pixel centres, edges clamped.
pub fn bilinear_resize(src: &[f64], src_dims: (usize, usize), dst_dims: (usize, usize)) -> Vec<f64> {
    let (sh, sw) = src_dims;
    let (dh, dw) = dst_dims;
    let coord = |dst: usize, s: usize, d: usize| {
        let x = ((dst as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, x - i0 as f64)
    };
    let cols: Vec<(usize, usize, f64)> = (0..dw).map(|c| coord(c, sw, dw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for r in 0..dh {
        let (r0, r1, fr) = coord(r, sh, dh);
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * sw + c0] * (1.0 - fc) + src[r0 * sw + c1] * fc;
            let bottom = src[r1 * sw + c0] * (1.0 - fc) + src[r1 * sw + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Normalized Gaussian kernel truncated at `4σ`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with edge replication; `sigma <= 0` copies.
pub fn gaussian_blur(src: &[f64], dims: (usize, usize), sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let (h, w) = dims;
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| {
                    let cc = (c as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    kv * src[r * w + cc]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| {
                    let rr = (r as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    kv * tmp[rr * w + c]
                })
                .sum();
        }
    }
    out
}

/// Turns per-level log-likelihood grids into one image-sized map: score
/// each level against its `logp_max`, upsample bilinearly, average across
/// levels, blur, clamp to `[0, 1]`.
///
/// `logp_max` is the per-level maximum over whatever population the scores
/// should be comparable across (typically the whole evaluated set).
pub fn assemble_map(
    id: impl Into<String>,
    levels: &[LogpGrid],
    logp_max: &[f64],
    image_dims: (usize, usize),
    smoothing_sigma: f64,
) -> Result<AnomalyMap> {
    if levels.is_empty() {
        return Err(Error::invalid("assemble_map needs at least one level"));
    }
    if logp_max.len() != levels.len() {
        return Err(Error::Dimension(format!(
            "{} levels but {} maxima",
            levels.len(),
            logp_max.len()
        )));
    }
    let (h, w) = image_dims;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("image dims must be positive".into()));
    }
    let mut acc = vec![0.0; h * w];
    for (i, (grid, &max)) in levels.iter().zip(logp_max).enumerate() {
        if grid.values.len() != grid.height * grid.width || grid.values.is_empty() {
            return Err(Error::Dimension(format!(
                "level {i}: {}x{} grid with {} values",
                grid.height,
                grid.width,
                grid.values.len()
            )));
        }
        let scores = grid
            .values
            .iter()
            .map(|&lp| anomaly_score(lp, max))
            .collect::<Result<Vec<_>>>()?;
        let up = bilinear_resize(&scores, (grid.height, grid.width), image_dims);
        for (a, v) in acc.iter_mut().zip(up) {
            *a += v;
        }
    }
    let n = levels.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    let smooth = gaussian_blur(&acc, image_dims, smoothing_sigma);
    AnomalyMap::new(id, h, w, smooth.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Maximum pixel score.
pub fn image_score(map: &AnomalyMap) -> f64 {
    map.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both normal and abnormal samples"));
    }
    Ok((pos, neg))
}

/// `P(score_abnormal > score_normal) + ½·P(tie)`; `labels[i]` is true for
/// abnormal.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // count ordered pairs exactly: twice the Mann-Whitney U
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// ROC points for a descending threshold sweep over distinct scores,
/// starting from `(+∞, 0, 0)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(points)
}

/// Pixel-level AUROC over all maps, ground truth from `masks`.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<f64> {
    let (scores, labels) = flatten_pixels(maps, masks)?;
    auroc(&scores, &labels)
}

pub fn pixel_roc_curve(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<Vec<RocPoint>> {
    let (scores, labels) = flatten_pixels(maps, masks)?;
    roc_curve(&scores, &labels)
}

fn flatten_pixels(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<(Vec<f64>, Vec<bool>)> {
    check_pairs(maps, masks)?;
    let scores = maps.iter().flat_map(|m| m.scores.iter().copied()).collect();
    let labels = masks.iter().flat_map(|m| m.bits().iter().copied()).collect();
    Ok((scores, labels))
}

fn check_pairs(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (m, g) in maps.iter().zip(masks) {
        if m.dims() != g.dims() {
            return Err(Error::Dimension(format!(
                "map '{}' is {}x{} but its mask is {}x{}",
                m.id,
                m.height,
                m.width,
                g.height(),
                g.width()
            )));
        }
    }
    Ok(())
}

/// 8-connected component labels (`0` = background, components numbered
/// from 1 in raster order of their first pixel) and the component count.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let q = rr as usize * w + cc as usize;
                    if mask.bits()[q] && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// `(fpr, mean per-region overlap)` points of a descending threshold sweep,
/// starting at `(0, 0)`. Beyond [`MAX_PRO_THRESHOLDS`] distinct scores the
/// thresholds are quantile-spaced.
pub fn pro_curve(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<Vec<(f64, f64)>> {
    check_pairs(maps, masks)?;
    // (score, region) with region 0 = normal pixel; region ids are global
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut sizes: Vec<usize> = vec![0];
    for (map, mask) in maps.iter().zip(masks) {
        let (labels, count) = label_components(mask);
        let base = sizes.len() - 1;
        sizes.extend(std::iter::repeat_n(0, count));
        for (&s, &l) in map.scores.iter().zip(&labels) {
            let region = if l == 0 { 0 } else { base + l as usize };
            sizes[region] += 1;
            pixels.push((s, region));
        }
    }
    let regions = sizes.len() - 1;
    if regions == 0 {
        return Err(Error::invalid("PRO needs at least one ground-truth region"));
    }
    let negatives = sizes[0];
    if negatives == 0 {
        return Err(Error::invalid("PRO needs at least one normal pixel"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut group_ends = Vec::new();
    for i in 0..pixels.len() {
        if i + 1 == pixels.len() || pixels[i + 1].0 != pixels[i].0 {
            group_ends.push(i + 1);
        }
    }
    let keep: Vec<usize> = if group_ends.len() <= MAX_PRO_THRESHOLDS {
        group_ends
    } else {
        let last = group_ends.len() - 1;
        let mut picked: Vec<usize> = (0..MAX_PRO_THRESHOLDS)
            .map(|i| group_ends[(i * last + (MAX_PRO_THRESHOLDS - 1) / 2) / (MAX_PRO_THRESHOLDS - 1)])
            .collect();
        picked.dedup();
        picked
    };

    let mut hits = vec![0usize; sizes.len()];
    let mut points = vec![(0.0, 0.0)];
    let mut cursor = 0;
    for end in keep {
        for &(_, region) in &pixels[cursor..end] {
            hits[region] += 1;
        }
        cursor = end;
        let overlap: f64 = (1..sizes.len()).map(|k| hits[k] as f64 / sizes[k] as f64).sum::<f64>() / regions as f64;
        points.push((hits[0] as f64 / negatives as f64, overlap));
    }
    Ok(points)
}

/// Trapezoid area under `points` for `fpr ∈ [0, limit]`, divided by
/// `limit`. Points must be sorted by non-decreasing fpr.
pub fn integrate_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((f0, o0), (f1, o1)) = (pair[0], pair[1]);
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

/// Per-region overlap integrated up to `fpr_limit` and normalized.
pub fn pro(maps: &[AnomalyMap], masks: &[BinaryMask], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::invalid(format!("fpr_limit must lie in (0, 1], got {fpr_limit}")));
    }
    Ok(integrate_to_limit(&pro_curve(maps, masks)?, fpr_limit))
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,tpr,fpr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.tpr, p.fpr));
    }
    out
}
