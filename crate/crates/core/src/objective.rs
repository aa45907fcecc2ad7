//! Loss terms and boundary machinery.
//!
//! Raw log-likelihoods live in `(-∞, 0]` (in practice). The boundary-guided
//! terms work on normalized values `logp / alpha_n`, where
//! `alpha_n = -alpha · raw_b_n`, so the normal boundary always lands on
//! `-1/alpha` and the margin `tau` is chosen on a fixed scale. Focal
//! weights are computed from raw values.

use crate::flow::HALF_LOG_2PI;
use crate::{Error, Result};

pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "0" => Ok(Label::Normal),
            "abnormal" | "anomaly" | "1" => Ok(Label::Abnormal),
            other => Err(Error::invalid(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Maximum likelihood on normal samples only.
    Likelihood,
    /// Maximum likelihood plus the boundary-guided hinge terms.
    BoundaryGuided,
}

/// Normal/abnormal boundaries in normalized log-likelihood units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryState {
    /// β-th percentile of the raw normal log-likelihoods.
    pub raw_b_n: f64,
    pub b_n: f64,
    pub b_a: f64,
    pub alpha_n: f64,
    pub beta: f64,
    pub tau: f64,
    pub alpha: f64,
}

impl BoundaryState {
    /// Normalized value of a raw log-likelihood.
    pub fn normalize(&self, logp: f64) -> f64 {
        normalize_logp(logp, self.alpha_n)
    }
}

/// Asymmetric focal weighting constants. `alpha_norm` is the normal
/// focusing factor and has nothing to do with the normalizer `alpha_n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalConfig {
    pub alpha_norm: f64,
    pub gamma_norm: f64,
    pub logp_norm_threshold: f64,
    pub alpha_abn: f64,
    pub gamma_abn: f64,
    pub logp_abn_threshold: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha_norm: 15.0,
            gamma_norm: 1.0,
            logp_norm_threshold: -2.0,
            alpha_abn: 0.53,
            gamma_abn: 2.0,
            logp_abn_threshold: -20.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("focal alpha_norm", self.alpha_norm),
            ("focal gamma_norm", self.gamma_norm),
            ("focal alpha_abn", self.alpha_abn),
            ("focal gamma_abn", self.gamma_abn),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("focal logp_norm_threshold", self.logp_norm_threshold),
            ("focal logp_abn_threshold", self.logp_abn_threshold),
        ] {
            if !(v < 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub boundary: Option<BoundaryState>,
    pub focal: Option<FocalConfig>,
    pub phase: Phase,
}

impl ObjectiveConfig {
    pub fn likelihood() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            boundary: None,
            focal: None,
            phase: Phase::Likelihood,
        }
    }

    pub fn boundary_guided(boundary: BoundaryState, lambda: f64, focal: Option<FocalConfig>) -> Self {
        Self {
            lambda,
            boundary: Some(boundary),
            focal,
            phase: Phase::BoundaryGuided,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.phase == Phase::BoundaryGuided && self.boundary.is_none() {
            return Err(Error::invalid("the boundary-guided phase needs a boundary"));
        }
        if let Some(f) = &self.focal {
            f.validate()?;
        }
        Ok(())
    }
}

/// Mean negative log-likelihood.
pub fn ml_loss(logps: &[f64]) -> Result<f64> {
    if logps.is_empty() {
        return Err(Error::invalid("ml_loss of an empty batch"));
    }
    if let Some(i) = logps.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-likelihood at index {i}")));
    }
    Ok(-logps.iter().sum::<f64>() / logps.len() as f64)
}

/// `1 - exp(logp - logp_max)`: the likelihood gap to the most normal
/// sample, divided by that sample's likelihood so it cannot underflow.
pub fn anomaly_score(logp: f64, logp_max: f64) -> Result<f64> {
    if logp > logp_max {
        return Err(Error::invalid(format!(
            "log-likelihood {logp} exceeds the supplied maximum {logp_max}"
        )));
    }
    Ok(-(logp - logp_max).exp_m1())
}

/// Nearest-rank percentile: the `k`-th smallest value for the least `k`
/// with `100·k ≥ beta·N`.
pub fn find_normal_boundary(normal_logps: &[f64], beta: f64) -> Result<f64> {
    if normal_logps.is_empty() {
        return Err(Error::invalid("cannot place a boundary on zero normal log-likelihoods"));
    }
    if !(beta > 0.0 && beta < 100.0) {
        return Err(Error::invalid(format!("beta must lie in (0, 100), got {beta}")));
    }
    if let Some(i) = normal_logps.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("normal log-likelihood at index {i}")));
    }
    let n = normal_logps.len();
    let target = beta * n as f64;
    let mut k = ((target / 100.0).ceil() as usize).clamp(1, n);
    while k > 1 && ((k - 1) as f64) * 100.0 >= target {
        k -= 1;
    }
    while k < n && (k as f64) * 100.0 < target {
        k += 1;
    }
    let mut sorted = normal_logps.to_vec();
    let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

pub fn build_boundary(raw_b_n: f64, alpha: f64, tau: f64, beta: f64) -> Result<BoundaryState> {
    if !(raw_b_n < 0.0 && raw_b_n.is_finite()) {
        return Err(Error::invalid(format!(
            "normal boundary must be a negative log-likelihood, got {raw_b_n}"
        )));
    }
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be >= 1, got {alpha}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if !(beta > 0.0 && beta < 100.0) {
        return Err(Error::invalid(format!("beta must lie in (0, 100), got {beta}")));
    }
    let alpha_n = -alpha * raw_b_n;
    let b_n = raw_b_n / alpha_n;
    let b_a = b_n - tau;
    if b_a < -1.0 {
        return Err(Error::invalid(format!(
            "abnormal boundary {b_a} falls below -1; need tau <= 1 - 1/alpha"
        )));
    }
    Ok(BoundaryState {
        raw_b_n,
        b_n,
        b_a,
        alpha_n,
        beta,
        tau,
        alpha,
    })
}

pub fn normalize_logp(logp: f64, alpha_n: f64) -> f64 {
    logp / alpha_n
}

/// Normalized values below -1 are trivially abnormal and sit outside the
/// push term.
pub fn is_extreme(normalized: f64) -> bool {
    normalized < -1.0
}

#[inline]
fn pull_hinge(x: f64, b: &BoundaryState) -> f64 {
    (b.b_n - x).max(0.0)
}

#[inline]
fn push_hinge(x: f64, b: &BoundaryState) -> f64 {
    (x - b.b_a).max(0.0)
}

/// `Σ |min(x_i - b_n, 0)| + Σ |max(x_j - b_n + τ, 0)|` on normalized inputs.
pub fn bgspp_loss_l1(normals: &[f64], abnormals: &[f64], boundary: &BoundaryState) -> f64 {
    normals.iter().map(|&x| pull_hinge(x, boundary)).sum::<f64>()
        + abnormals.iter().map(|&x| push_hinge(x, boundary)).sum::<f64>()
}

/// Number of nonzero hinge terms, i.e. samples violating the margin.
pub fn bgspp_loss_l0(normals: &[f64], abnormals: &[f64], boundary: &BoundaryState) -> usize {
    normals.iter().filter(|&&x| pull_hinge(x, boundary) > 0.0).count()
        + abnormals.iter().filter(|&&x| push_hinge(x, boundary) > 0.0).count()
}

/// Truncated focal weight for a normal sample (raw log-likelihood).
pub fn focal_weight_normal(logp: f64, cfg: &FocalConfig) -> f64 {
    if logp > cfg.logp_norm_threshold {
        1.0
    } else {
        -cfg.alpha_norm * (1.0 - logp.exp()).powf(cfg.gamma_norm) * logp
    }
}

/// Reversed focal weight for an abnormal sample (raw log-likelihood).
pub fn focal_weight_abnormal(logp: f64, cfg: &FocalConfig) -> Result<f64> {
    if logp <= cfg.logp_abn_threshold {
        return Ok(1.0);
    }
    if logp >= 0.0 {
        return Err(Error::invalid(format!(
            "reversed focal weight undefined for log-likelihood {logp} >= 0"
        )));
    }
    Ok(-cfg.alpha_abn * (1.0 + logp.exp()).powf(cfg.gamma_abn) / logp)
}

/// Components of the batch objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Mean (optionally focal-weighted) negative log-likelihood of normals.
    pub ml: f64,
    /// Weighted hinge sum, before the `λ / batch` factor.
    pub bgspp: f64,
    /// Margin violators in the batch.
    pub violators: usize,
    pub total: f64,
}

/// Batch objective: `ml` in the likelihood phase; `ml + λ·bgspp / B` in the
/// boundary-guided phase, with focal weights on both when configured.
pub fn combined_loss(logps: &[f64], labels: &[Label], config: &ObjectiveConfig) -> Result<LossBreakdown> {
    evaluate(logps, labels, config).map(|(b, _)| b)
}

/// The objective and `∂total/∂logp_i` for every sample, with focal weights
/// and boundaries held constant.
pub(crate) fn evaluate(logps: &[f64], labels: &[Label], config: &ObjectiveConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    config.validate()?;
    if logps.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} log-likelihoods but {} labels",
            logps.len(),
            labels.len()
        )));
    }
    if logps.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(i) = logps.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-likelihood of batch sample {i}")));
    }

    let n_normal = labels.iter().filter(|l| **l == Label::Normal).count();
    let batch = logps.len() as f64;
    let mut sens = vec![0.0; logps.len()];
    let mut out = LossBreakdown::default();

    match config.phase {
        Phase::Likelihood => {
            if n_normal == 0 {
                return Err(Error::invalid("likelihood phase batch holds no normal samples"));
            }
            let inv = 1.0 / n_normal as f64;
            let mut sum = 0.0;
            for (i, (&lp, &label)) in logps.iter().zip(labels).enumerate() {
                if label == Label::Normal {
                    sum += lp;
                    sens[i] = -inv;
                }
            }
            out.ml = -sum / n_normal as f64;
            out.total = out.ml;
        }
        Phase::BoundaryGuided => {
            let boundary = config.boundary.as_ref().expect("validated");
            let focal = config.focal.as_ref();
            let hinge_scale = config.lambda / batch;
            let inv_normal = if n_normal > 0 { 1.0 / n_normal as f64 } else { 0.0 };
            let mut ml_sum = 0.0;
            for (i, (&lp, &label)) in logps.iter().zip(labels).enumerate() {
                let x = boundary.normalize(lp);
                match label {
                    Label::Normal => {
                        let w = focal.map_or(1.0, |f| focal_weight_normal(lp, f));
                        ml_sum += w * lp;
                        sens[i] = -w * inv_normal;
                        let h = pull_hinge(x, boundary);
                        if h > 0.0 {
                            out.bgspp += w * h;
                            out.violators += 1;
                            sens[i] -= hinge_scale * w / boundary.alpha_n;
                        }
                    }
                    Label::Abnormal => {
                        if is_extreme(x) {
                            continue;
                        }
                        let h = push_hinge(x, boundary);
                        if h > 0.0 {
                            let w = match focal {
                                Some(f) => focal_weight_abnormal(lp, f)?,
                                None => 1.0,
                            };
                            out.bgspp += w * h;
                            out.violators += 1;
                            sens[i] = hinge_scale * w / boundary.alpha_n;
                        }
                    }
                }
            }
            if n_normal > 0 {
                out.ml = -ml_sum / n_normal as f64;
            }
            out.total = out.ml + hinge_scale * out.bgspp;
        }
    }
    Ok((out, sens))
}

/// Both sides of the empirical margin-error bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// Evaluates
///
/// ```text
/// lhs = E_normal[max(b_n - ε - x, 0)] + E_abnormal[max(x - b_a - ε, 0)]
/// rhs = ((d/2)·log 2π - ½)·(b_n - b_a)/λ + N/(N+M)
/// ```
///
/// on normalized log-likelihoods. An empty class contributes zero to `lhs`.
pub fn bound_report(
    normals: &[f64],
    abnormals: &[f64],
    boundary: &BoundaryState,
    epsilon: f64,
    lambda: f64,
    dim: usize,
) -> Result<BoundReport> {
    let width = boundary.b_n - boundary.b_a;
    if !(epsilon > 0.0 && epsilon < width) {
        return Err(Error::invalid(format!(
            "epsilon must lie in (0, {width}), got {epsilon}"
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if normals.is_empty() && abnormals.is_empty() {
        return Err(Error::invalid("bound report needs at least one log-likelihood"));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64
        }
    };
    let bn = boundary.b_n - epsilon;
    let ba = boundary.b_a + epsilon;
    let lhs = mean(normals, &|x| (bn - x).max(0.0)) + mean(abnormals, &|x| (x - ba).max(0.0));
    let (n, m) = (normals.len() as f64, abnormals.len() as f64);
    let rhs = (dim as f64 * HALF_LOG_2PI - 0.5) * width / lambda + n / (n + m);
    Ok(BoundReport {
        lhs,
        rhs,
        slack: rhs - lhs,
    })
}
