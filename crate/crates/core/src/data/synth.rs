//! Seeded synthetic stand-ins for extracted deep features.
//!
//! - `gaussian-cluster`: normals `N(0, I)`, anomalies `N(6·e₁, I)`
//! - `ring`: normals on a radius-4 circle in the first two channels,
//!   anomalies at its centre
//! - `two-moons`: normals on the upper moon, anomalies on the lower one
//!
//! Channels beyond the first two are `N(0, 1)` noise for ring and moons.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{Dataset, FeatureMap, Sample};
use super::raster::BinaryMask;
use crate::objective::Label;
use crate::{Error, Result};

pub const CLUSTER_OFFSET: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    GaussianCluster,
    Ring,
    TwoMoons,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian-cluster" => Ok(Self::GaussianCluster),
            "ring" => Ok(Self::Ring),
            "two-moons" => Ok(Self::TwoMoons),
            other => Err(Error::invalid(format!(
                "unknown synthetic kind '{other}' (gaussian-cluster, ring, two-moons)"
            ))),
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw(kind: SynthKind, label: Label, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    match (kind, label) {
        (SynthKind::GaussianCluster, Label::Normal) => {}
        (SynthKind::GaussianCluster, Label::Abnormal) => v[0] += CLUSTER_OFFSET,
        (SynthKind::Ring, Label::Normal) => {
            let angle = rng.random_range(0.0..2.0 * PI);
            let radius = 4.0 + 0.3 * gaussian(rng);
            v[0] = radius * angle.cos();
            v[1] = radius * angle.sin();
        }
        (SynthKind::Ring, Label::Abnormal) => {
            v[0] *= 0.5;
            v[1] *= 0.5;
        }
        (SynthKind::TwoMoons, label) => {
            let t = rng.random_range(0.0..PI);
            let (x, y) = match label {
                Label::Normal => (t.cos(), t.sin()),
                Label::Abnormal => (1.0 - t.cos(), 0.5 - t.sin()),
            };
            v[0] = 3.0 * x + 0.2 * gaussian(rng);
            v[1] = 3.0 * y + 0.2 * gaussian(rng);
        }
    }
    v
}

fn check(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::invalid(format!("synthetic features need d >= 2, got {dim}")));
    }
    Ok(())
}

fn sample_id(label: Label, i: usize) -> String {
    match label {
        Label::Normal => format!("n{i:05}"),
        Label::Abnormal => format!("a{i:05}"),
    }
}

/// One feature vector per sample (a `1×1` map on level `l0`), no masks.
pub fn synth_dataset(kind: SynthKind, n_normal: usize, n_abnormal: usize, dim: usize, seed: u64) -> Result<Dataset> {
    check(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_normal + n_abnormal);
    for (label, n) in [(Label::Normal, n_normal), (Label::Abnormal, n_abnormal)] {
        for i in 0..n {
            let v = draw(kind, label, dim, &mut rng);
            samples.push(Sample {
                id: sample_id(label, i),
                label,
                levels: vec![FeatureMap::from_vectors(1, 1, &[v])?],
                mask: None,
                image_dims: (1, 1),
            });
        }
    }
    Ok(Dataset {
        levels: vec!["l0".into()],
        samples,
    })
}

/// `grid`-sized feature maps on level `l0`. Abnormal samples carry a
/// planted rectangular patch (a quarter of each side) of anomalous
/// vectors; every sample has a mask at grid resolution, empty for normals.
pub fn synth_map_dataset(
    kind: SynthKind,
    n_normal: usize,
    n_abnormal: usize,
    dim: usize,
    grid: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    check(dim)?;
    let (h, w) = grid;
    if h == 0 || w == 0 {
        return Err(Error::invalid("grid must be non-empty"));
    }
    let (ph, pw) = ((h / 4).max(1), (w / 4).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_normal + n_abnormal);
    for (label, n) in [(Label::Normal, n_normal), (Label::Abnormal, n_abnormal)] {
        for i in 0..n {
            let mut mask = BinaryMask::empty(h, w);
            if label == Label::Abnormal {
                let r0 = rng.random_range(0..=h - ph);
                let c0 = rng.random_range(0..=w - pw);
                for r in r0..r0 + ph {
                    for c in c0..c0 + pw {
                        mask.set(r, c, true);
                    }
                }
            }
            let vectors: Vec<Vec<f64>> = (0..h * w)
                .map(|p| {
                    let l = if mask.get(p / w, p % w) {
                        Label::Abnormal
                    } else {
                        Label::Normal
                    };
                    draw(kind, l, dim, &mut rng)
                })
                .collect();
            samples.push(Sample {
                id: sample_id(label, i),
                label,
                levels: vec![FeatureMap::from_vectors(h, w, &vectors)?],
                mask: Some(mask),
                image_dims: grid,
            });
        }
    }
    Ok(Dataset {
        levels: vec!["l0".into()],
        samples,
    })
}
