//! In-memory samples: per-level feature maps plus optional masks.

use std::path::{Path, PathBuf};

use super::fbt::{read_fbt, write_fbt, Tensor};
use super::manifest::{validate_manifest, Manifest, SampleRecord, Split, ValidationOptions};
use super::raster::{png_dims, BinaryMask};
use crate::objective::Label;
use crate::{Error, Result};

/// `C×H×W` feature map, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension("feature maps need positive C, H and W".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{channels}x{height}x{width} feature map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Rank-3 tensors are `C×H×W`; rank-1 tensors are a single `C×1×1`
    /// vector.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (c, h, w) = match *t.dims() {
            [c, h, w] => (c, h, w),
            [c] => (c, 1, 1),
            ref other => {
                return Err(Error::Dimension(format!(
                    "feature tensors are C×H×W (or C), got dims {other:?}"
                )))
            }
        };
        Self::new(c, h, w, t.into_data())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone()).expect("consistent dims")
    }

    /// Builds a map from per-position vectors listed row-major.
    pub fn from_vectors(height: usize, width: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let channels = vectors.first().map_or(0, Vec::len);
        if vectors.len() != height * width || vectors.iter().any(|v| v.len() != channels) {
            return Err(Error::Dimension("ragged or miscounted position vectors".into()));
        }
        let mut data = vec![0f32; channels * height * width];
        for (pos, v) in vectors.iter().enumerate() {
            for (ch, &x) in v.iter().enumerate() {
                data[ch * height * width + pos] = x as f32;
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn vector_at(&self, row: usize, col: usize) -> Vec<f64> {
        let plane = self.height * self.width;
        let pos = row * self.width + col;
        (0..self.channels)
            .map(|ch| self.data[ch * plane + pos] as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    /// One map per dataset level, in dataset level order.
    pub levels: Vec<FeatureMap>,
    pub mask: Option<BinaryMask>,
    /// `(height, width)` of the image the anomaly map is evaluated at.
    pub image_dims: (usize, usize),
}

impl Sample {
    /// Label of each position of level `level` (row-major). Positions of an
    /// abnormal sample are abnormal where the mask is set at the cell
    /// centre; without a mask every position is abnormal.
    pub fn position_labels(&self, level: usize) -> Vec<Label> {
        let (h, w) = self.levels[level].grid();
        match (self.label, &self.mask) {
            (Label::Normal, _) => vec![Label::Normal; h * w],
            (Label::Abnormal, None) => vec![Label::Abnormal; h * w],
            (Label::Abnormal, Some(mask)) => {
                let (mh, mw) = mask.dims();
                let mut out = Vec::with_capacity(h * w);
                for r in 0..h {
                    let mr = (((r as f64 + 0.5) * mh as f64 / h as f64) as usize).min(mh - 1);
                    for c in 0..w {
                        let mc = (((c as f64 + 0.5) * mw as f64 / w as f64) as usize).min(mw - 1);
                        out.push(if mask.get(mr, mc) {
                            Label::Abnormal
                        } else {
                            Label::Normal
                        });
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub levels: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Channel count of every level; errors if samples disagree.
    pub fn level_dims(&self) -> Result<Vec<usize>> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::invalid("dataset has no samples"))?;
        let dims: Vec<usize> = first.levels.iter().map(FeatureMap::channels).collect();
        for s in &self.samples {
            if s.levels.len() != self.levels.len() {
                return Err(Error::Dimension(format!(
                    "sample '{}' has {} levels, dataset has {}",
                    s.id,
                    s.levels.len(),
                    self.levels.len()
                )));
            }
            for (i, m) in s.levels.iter().enumerate() {
                if m.channels() != dims[i] {
                    return Err(Error::Dimension(format!(
                        "sample '{}' level '{}' has {} channels, expected {}",
                        s.id,
                        self.levels[i],
                        m.channels(),
                        dims[i]
                    )));
                }
            }
        }
        Ok(dims)
    }

    /// Reads every feature file and mask named by `manifest`.
    pub fn load(manifest: &Manifest, localization: bool) -> Result<Self> {
        validate_manifest(
            manifest,
            ValidationOptions {
                localization,
                require_features: true,
                check_files: true,
            },
        )?;
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let levels = manifest
                .levels
                .iter()
                .map(|l| {
                    let path = manifest.resolve(&r.feature_paths[l]);
                    FeatureMap::from_tensor(read_fbt(&path)?).map_err(|e| match e {
                        Error::Dimension(m) => Error::Dimension(format!("{}: {m}", path.display())),
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mask = r
                .mask_path
                .as_ref()
                .map(|p| BinaryMask::read_png(manifest.resolve(p)))
                .transpose()?;
            let image_dims = match (&mask, &r.image_path) {
                (Some(m), _) => m.dims(),
                (None, Some(p)) => png_dims(manifest.resolve(p))?,
                (None, None) => levels[0].grid(),
            };
            samples.push(Sample {
                id: r.id.clone(),
                label: r.label,
                levels,
                mask,
                image_dims,
            });
        }
        let ds = Self {
            levels: manifest.levels.clone(),
            samples,
        };
        ds.level_dims()?;
        Ok(ds)
    }

    /// Writes features under `dir/feats`, masks under `dir/masks`, and a
    /// manifest at `dir/<name>`, with paths relative to `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, name: &str, split: Split) -> Result<Manifest> {
        let dir = dir.as_ref();
        let mut manifest = Manifest::new(split, self.levels.clone(), dir);
        for s in &self.samples {
            let mut feature_paths = std::collections::BTreeMap::new();
            for (level, map) in self.levels.iter().zip(&s.levels) {
                let rel = PathBuf::from("feats").join(format!("{}_{level}.fbt", s.id));
                write_fbt(dir.join(&rel), &map.to_tensor())?;
                feature_paths.insert(level.clone(), rel);
            }
            let mask_path = match &s.mask {
                Some(m) => {
                    let rel = PathBuf::from("masks").join(format!("{}.png", s.id));
                    m.write_png(dir.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            manifest.records.push(SampleRecord {
                id: s.id.clone(),
                label: s.label,
                image_path: None,
                mask_path,
                feature_paths,
            });
        }
        manifest.write(dir.join(name))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_round_trip_through_map() {
        let vs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64), 0.5]).collect();
        let m = FeatureMap::from_vectors(2, 3, &vs).unwrap();
        assert_eq!(m.grid(), (2, 3));
        assert_eq!(m.vector_at(1, 2), vs[5]);
        let back = FeatureMap::from_tensor(m.to_tensor()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn position_labels_follow_mask() {
        let map = FeatureMap::from_vectors(2, 2, &vec![vec![0.0]; 4]).unwrap();
        let mut mask = BinaryMask::empty(4, 4);
        mask.set(0, 2, true);
        mask.set(0, 3, true);
        mask.set(1, 2, true);
        mask.set(1, 3, true);
        let s = Sample {
            id: "a".into(),
            label: Label::Abnormal,
            levels: vec![map],
            mask: Some(mask),
            image_dims: (4, 4),
        };
        assert_eq!(
            s.position_labels(0),
            vec![Label::Normal, Label::Abnormal, Label::Normal, Label::Normal]
        );
    }

    #[test]
    fn rejects_wrong_rank() {
        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(FeatureMap::from_tensor(t).is_err());
    }
}
