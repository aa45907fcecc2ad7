//! Cut-and-paste anomaly synthesis with random augmentation.
//!
//! A real anomaly is pushed through a random subset of image transforms,
//! its (transformed) defect region is cut along the mask and pasted hard
//! into a normal image. The result is a fresh abnormal sample with an exact
//! mask.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BinaryMask, RasterImage};
use crate::metrics::label_components;
use crate::{Error, Result};

pub const DEFAULT_SUBSET_SIZE: usize = 3;
/// Placement attempts before giving up.
pub const MAX_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    AutoContrast,
    Equalize,
    Rotate,
    Posterize,
    Solarize,
    Brightness,
    Sharpness,
    Translate,
    Shear,
}

impl TransformKind {
    pub const ALL: [TransformKind; 9] = [
        TransformKind::AutoContrast,
        TransformKind::Equalize,
        TransformKind::Rotate,
        TransformKind::Posterize,
        TransformKind::Solarize,
        TransformKind::Brightness,
        TransformKind::Sharpness,
        TransformKind::Translate,
        TransformKind::Shear,
    ];

    /// Inclusive magnitude range.
    ///
    /// Rotate is in degrees, Translate a signed fraction of the side,
    /// Shear a signed slope, Posterize kept bits, Solarize a threshold,
    /// Brightness and Sharpness blend factors (1 = identity).
    pub fn magnitude_range(self) -> (f64, f64) {
        match self {
            TransformKind::AutoContrast | TransformKind::Equalize => (0.0, 0.0),
            TransformKind::Rotate => (-30.0, 30.0),
            TransformKind::Posterize => (4.0, 8.0),
            TransformKind::Solarize => (0.0, 255.0),
            TransformKind::Brightness | TransformKind::Sharpness => (0.1, 1.9),
            TransformKind::Translate => (-0.1, 0.1),
            TransformKind::Shear => (-0.3, 0.3),
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            TransformKind::Rotate | TransformKind::Translate | TransformKind::Shear
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::AutoContrast => "AutoContrast",
            TransformKind::Equalize => "Equalize",
            TransformKind::Rotate => "Rotate",
            TransformKind::Posterize => "Posterize",
            TransformKind::Solarize => "Solarize",
            TransformKind::Brightness => "Brightness",
            TransformKind::Sharpness => "Sharpness",
            TransformKind::Translate => "Translate",
            TransformKind::Shear => "Shear",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown transform '{s}'")))
    }
}

/// Direction of Translate and Shear; ignored by other transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub magnitude: f64,
    pub probability: f64,
    pub axis: Axis,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, magnitude: f64, probability: f64, axis: Axis) -> Result<Self> {
        let spec = Self {
            kind,
            magnitude,
            probability,
            axis,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.magnitude_range();
        if !(self.magnitude >= lo && self.magnitude <= hi) {
            return Err(Error::invalid(format!(
                "{} magnitude {} outside [{lo}, {hi}]",
                self.kind, self.magnitude
            )));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid(format!(
                "{} probability {} outside [0, 1]",
                self.kind, self.probability
            )));
        }
        Ok(())
    }

    /// Uniform magnitude and axis, applied with probability 1.
    pub fn random(kind: TransformKind, rng: &mut impl Rng) -> Self {
        let (lo, hi) = kind.magnitude_range();
        let magnitude = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let axis = if rng.random::<bool>() {
            Axis::Horizontal
        } else {
            Axis::Vertical
        };
        Self {
            kind,
            magnitude,
            probability: 1.0,
            axis,
        }
    }
}

/// Binary defect mask with the bounding box `(r0, c0, r1, c1)`, inclusive,
/// of each 8-connected component.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyRegion {
    pub mask: BinaryMask,
    pub boxes: Vec<(usize, usize, usize, usize)>,
}

impl AnomalyRegion {
    pub fn from_mask(mask: BinaryMask) -> Self {
        let (labels, count) = label_components(&mask);
        let w = mask.width();
        let mut boxes = vec![(usize::MAX, usize::MAX, 0, 0); count];
        for (p, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let b = &mut boxes[l as usize - 1];
            let (r, c) = (p / w, p % w);
            *b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
        }
        Self { mask, boxes }
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub subset: Vec<TransformSpec>,
    pub seed: u64,
    /// Top-left corner of the pasted box; random when `None`.
    pub paste_location: Option<(usize, usize)>,
}

impl AugmentPlan {
    /// Draws `size` distinct transforms with random magnitudes.
    pub fn random(size: usize, seed: u64, rng: &mut impl Rng) -> Result<Self> {
        let k = TransformKind::ALL.len();
        if size > k {
            return Err(Error::invalid(format!("subset size {size} exceeds the {k} transforms")));
        }
        let subset = index::sample(rng, k, size)
            .into_iter()
            .map(|i| TransformSpec::random(TransformKind::ALL[i], rng))
            .collect();
        Ok(Self {
            subset,
            seed,
            paste_location: None,
        })
    }
}

fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_channels(img: &RasterImage, mut lut_for: impl FnMut(usize) -> [u8; 256]) -> RasterImage {
    let ch = img.channels();
    let luts: Vec<[u8; 256]> = (0..ch).map(&mut lut_for).collect();
    let mut out = img.clone();
    for (i, v) in out.pixels_mut().iter_mut().enumerate() {
        *v = luts[i % ch][*v as usize];
    }
    out
}

fn channel_values(img: &RasterImage, ch: usize) -> impl Iterator<Item = u8> + '_ {
    img.pixels().iter().skip(ch).step_by(img.channels()).copied()
}

fn autocontrast(img: &RasterImage) -> RasterImage {
    map_channels(img, |ch| {
        let (lo, hi) = channel_values(img, ch).fold((255u8, 0u8), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let mut lut = [0u8; 256];
        for (v, slot) in lut.iter_mut().enumerate() {
            *slot = if hi > lo {
                round_u8((v as f64 - lo as f64) * 255.0 / (hi - lo) as f64)
            } else {
                v as u8
            };
        }
        lut
    })
}

fn equalize(img: &RasterImage) -> RasterImage {
    map_channels(img, |ch| {
        let mut hist = [0usize; 256];
        for v in channel_values(img, ch) {
            hist[v as usize] += 1;
        }
        let total: usize = hist.iter().sum();
        let cdf_min = hist.iter().copied().find(|&h| h > 0).unwrap_or(0);
        let mut lut = [0u8; 256];
        let mut cdf = 0;
        for (v, slot) in lut.iter_mut().enumerate() {
            cdf += hist[v];
            *slot = if total > cdf_min {
                round_u8(cdf.saturating_sub(cdf_min) as f64 * 255.0 / (total - cdf_min) as f64)
            } else {
                v as u8
            };
        }
        lut
    })
}

fn lut_transform(img: &RasterImage, f: impl Fn(u8) -> u8) -> RasterImage {
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = f(v as u8);
    }
    map_channels(img, |_| lut)
}

/// `degenerate·(1-f) + img·f`, clamped.
fn blend(img: &RasterImage, degenerate: &[f64], factor: f64) -> RasterImage {
    let mut out = img.clone();
    for (v, &d) in out.pixels_mut().iter_mut().zip(degenerate) {
        *v = round_u8(d * (1.0 - factor) + *v as f64 * factor);
    }
    out
}

/// 3×3 smoothing (centre weight 5, others 1) inside, original on the border.
fn smoothed(img: &RasterImage) -> Vec<f64> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    if h < 3 || w < 3 {
        return out;
    }
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            for k in 0..ch {
                let mut acc = 0.0;
                for dr in 0..3 {
                    for dc in 0..3 {
                        let weight = if dr == 1 && dc == 1 { 5.0 } else { 1.0 };
                        acc += weight * img.pixel(r + dr - 1, c + dc - 1)[k] as f64;
                    }
                }
                out[(r * w + c) * ch + k] = acc / 13.0;
            }
        }
    }
    out
}

/// Inverse coordinate map of a geometric transform: output pixel centre
/// `(row, col)` to source `(row, col)`.
fn inverse_map(spec: &TransformSpec, dims: (usize, usize)) -> impl Fn(f64, f64) -> (f64, f64) {
    let (h, w) = dims;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let m = spec.magnitude;
    let kind = spec.kind;
    let axis = spec.axis;
    let (sin, cos) = (m * PI / 180.0).sin_cos();
    let shift = match axis {
        Axis::Horizontal => (0.0, (m * w as f64).round()),
        Axis::Vertical => ((m * h as f64).round(), 0.0),
    };
    move |r: f64, c: f64| match kind {
        // counter-clockwise on screen
        TransformKind::Rotate => {
            let (dy, dx) = (r - cy, c - cx);
            (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
        }
        TransformKind::Translate => (r - shift.0, c - shift.1),
        TransformKind::Shear => match axis {
            Axis::Horizontal => (r, c + m * (r - cy)),
            Axis::Vertical => (r + m * (c - cx), c),
        },
        _ => (r, c),
    }
}

fn warp(img: &RasterImage, mask: &BinaryMask, spec: &TransformSpec) -> (RasterImage, BinaryMask) {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let inv = inverse_map(spec, (h, w));
    let mut out = img.clone();
    let mut out_mask = BinaryMask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = inv(r as f64, c as f64);
            // edge replication for pixels
            let y = sr.clamp(0.0, (h - 1) as f64);
            let x = sc.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            for k in 0..ch {
                let p = |rr: usize, cc: usize| img.pixel(rr, cc)[k] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.pixel_mut(r, c)[k] = round_u8(top * (1.0 - fy) + bottom * fy);
            }
            // nearest neighbour for the mask, empty outside
            let (nr, nc) = (sr.round(), sc.round());
            if nr >= 0.0 && nc >= 0.0 && nr < h as f64 && nc < w as f64 && mask.get(nr as usize, nc as usize) {
                out_mask.set(r, c, true);
            }
        }
    }
    (out, out_mask)
}

/// Applies `spec` to an image and its mask. Photometric transforms leave
/// the mask untouched; geometric ones move both. A spec with probability
/// `p < 1` draws once from `rng` and is skipped with probability `1 - p`.
pub fn apply_transform(
    img: &RasterImage,
    mask: &BinaryMask,
    spec: &TransformSpec,
    rng: &mut impl Rng,
) -> Result<(RasterImage, BinaryMask)> {
    spec.validate()?;
    if img.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "image is {:?} but mask is {:?}",
            img.dims(),
            mask.dims()
        )));
    }
    if spec.probability < 1.0 && rng.random::<f64>() >= spec.probability {
        return Ok((img.clone(), mask.clone()));
    }
    let m = spec.magnitude;
    let out = match spec.kind {
        TransformKind::AutoContrast => autocontrast(img),
        TransformKind::Equalize => equalize(img),
        TransformKind::Posterize => {
            let bits = m.round() as u32;
            let keep = (0xFFu16 << (8 - bits)) as u8;
            lut_transform(img, |v| v & keep)
        }
        TransformKind::Solarize => lut_transform(img, |v| if v as f64 >= m { 255 - v } else { v }),
        TransformKind::Brightness => {
            let zeros = vec![0.0; img.pixels().len()];
            blend(img, &zeros, m)
        }
        TransformKind::Sharpness => blend(img, &smoothed(img), m),
        TransformKind::Rotate | TransformKind::Translate | TransformKind::Shear => {
            return Ok(warp(img, mask, spec));
        }
    };
    Ok((out, mask.clone()))
}

/// A synthesized anomaly plus everything needed to audit it.
#[derive(Clone, Debug, PartialEq)]
pub struct RacpOutput {
    pub image: RasterImage,
    pub mask: BinaryMask,
    pub plan: AugmentPlan,
    /// The abnormal image and mask after the transform subset.
    pub transformed: RasterImage,
    pub transformed_mask: BinaryMask,
    /// Top-left of the cut box in the transformed image.
    pub source_origin: (usize, usize),
    /// Top-left of the pasted box in the composite.
    pub offset: (usize, usize),
}

impl RacpOutput {
    /// Every masked composite pixel equals its transformed source pixel and
    /// every other pixel equals `normal`.
    pub fn check_fidelity(&self, normal: &RasterImage) -> bool {
        let (h, w) = self.image.dims();
        if normal.dims() != (h, w) || self.mask.dims() != (h, w) {
            return false;
        }
        for r in 0..h {
            for c in 0..w {
                let got = self.image.pixel(r, c);
                let expected = if self.mask.get(r, c) {
                    let sr = r + self.source_origin.0 - self.offset.0;
                    let sc = c + self.source_origin.1 - self.offset.1;
                    if !self.transformed_mask.get(sr, sc) {
                        return false;
                    }
                    self.transformed.pixel(sr, sc)
                } else {
                    normal.pixel(r, c)
                };
                if got != expected {
                    return false;
                }
            }
        }
        true
    }
}

/// Draws a random subset of `subset_size` transforms and pastes the
/// transformed anomaly into `normal` at a random offset.
pub fn racp_generate(
    normal: &RasterImage,
    abnormal: &RasterImage,
    region: &AnomalyRegion,
    subset_size: usize,
    seed: u64,
) -> Result<RacpOutput> {
    racp_generate_at(normal, abnormal, region, subset_size, seed, None)
}

/// As [`racp_generate`], with an optional fixed paste location.
pub fn racp_generate_at(
    normal: &RasterImage,
    abnormal: &RasterImage,
    region: &AnomalyRegion,
    subset_size: usize,
    seed: u64,
    paste_location: Option<(usize, usize)>,
) -> Result<RacpOutput> {
    if normal.dims() != abnormal.dims() || normal.channels() != abnormal.channels() {
        return Err(Error::Dimension(format!(
            "normal image is {:?}x{} but abnormal is {:?}x{}",
            normal.dims(),
            normal.channels(),
            abnormal.dims(),
            abnormal.channels()
        )));
    }
    if region.mask.dims() != abnormal.dims() {
        return Err(Error::Dimension("anomaly mask and image differ in size".into()));
    }
    if region.is_empty() {
        return Err(Error::invalid("anomaly region is empty"));
    }
    let (h, w) = normal.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let mut plan = AugmentPlan::random(subset_size, seed, &mut rng)?;
        plan.paste_location = paste_location;
        let (mut img, mut mask) = (abnormal.clone(), region.mask.clone());
        for spec in &plan.subset {
            (img, mask) = apply_transform(&img, &mask, spec, &mut rng)?;
        }
        let Some((r0, c0, r1, c1)) = mask.bounding_box() else {
            continue;
        };
        let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
        if bh > h || bw > w {
            continue;
        }
        let offset = match paste_location {
            Some((r, c)) => {
                if r + bh > h || c + bw > w {
                    continue;
                }
                (r, c)
            }
            None => (rng.random_range(0..=h - bh), rng.random_range(0..=w - bw)),
        };
        let mut composite = normal.clone();
        let mut out_mask = BinaryMask::empty(h, w);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if mask.get(r, c) {
                    let (tr, tc) = (r - r0 + offset.0, c - c0 + offset.1);
                    composite.pixel_mut(tr, tc).copy_from_slice(img.pixel(r, c));
                    out_mask.set(tr, tc, true);
                }
            }
        }
        return Ok(RacpOutput {
            image: composite,
            mask: out_mask,
            plan,
            transformed: img,
            transformed_mask: mask,
            source_origin: (r0, c0),
            offset,
        });
    }
    Err(Error::invalid(format!(
        "could not place the anomaly region after {MAX_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize, ch: usize) -> RasterImage {
        let px = (0..h * w * ch).map(|i| ((i * 37 + 11) % 251) as u8).collect();
        RasterImage::new("g", h, w, ch, px).unwrap()
    }

    fn square_mask(h: usize, w: usize, r: (usize, usize), c: (usize, usize)) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for rr in r.0..r.1 {
            for cc in c.0..c.1 {
                m.set(rr, cc, true);
            }
        }
        m
    }

    fn spec(kind: TransformKind, m: f64, axis: Axis) -> TransformSpec {
        TransformSpec::new(kind, m, 1.0, axis).unwrap()
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = gradient_image(9, 7, 3);
        let mask = square_mask(9, 7, (2, 5), (1, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = apply_transform(
            &img,
            &mask,
            &spec(TransformKind::Rotate, 0.0, Axis::Horizontal),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a, img);
        assert_eq!(b, mask);
    }

    #[test]
    fn translate_moves_pixel_and_mask_together() {
        let mut img = RasterImage::filled("p", 20, 20, 1, 0).unwrap();
        img.pixel_mut(5, 7)[0] = 255;
        let mut mask = BinaryMask::empty(20, 20);
        mask.set(5, 7, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // 0.1 of 20 rows = 2 rows down
        let (a, b) = apply_transform(
            &img,
            &mask,
            &spec(TransformKind::Translate, 0.1, Axis::Vertical),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.pixel(7, 7)[0], 255);
        assert_eq!(a.pixel(5, 7)[0], 0);
        assert!(b.get(7, 7));
        assert_eq!(b.count(), 1);
    }

    #[test]
    fn photometric_leaves_mask() {
        let img = gradient_image(8, 8, 3);
        let mask = square_mask(8, 8, (1, 4), (2, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (kind, m) in [
            (TransformKind::Solarize, 128.0),
            (TransformKind::AutoContrast, 0.0),
            (TransformKind::Equalize, 0.0),
            (TransformKind::Posterize, 4.0),
            (TransformKind::Brightness, 1.5),
            (TransformKind::Sharpness, 0.2),
        ] {
            let (_, b) = apply_transform(&img, &mask, &spec(kind, m, Axis::Horizontal), &mut rng).unwrap();
            assert_eq!(b, mask, "{kind}");
        }
    }

    #[test]
    fn identity_magnitudes() {
        let img = gradient_image(6, 6, 1);
        let mask = BinaryMask::empty(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (kind, m) in [
            (TransformKind::Brightness, 1.0),
            (TransformKind::Sharpness, 1.0),
            (TransformKind::Posterize, 8.0),
            (TransformKind::Translate, 0.0),
            (TransformKind::Shear, 0.0),
        ] {
            let (a, _) = apply_transform(&img, &mask, &spec(kind, m, Axis::Vertical), &mut rng).unwrap();
            assert_eq!(a, img, "{kind}");
        }
    }

    #[test]
    fn solarize_and_posterize_values() {
        let img = RasterImage::new("v", 1, 3, 1, vec![10, 128, 200]).unwrap();
        let mask = BinaryMask::empty(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, _) = apply_transform(
            &img,
            &mask,
            &spec(TransformKind::Solarize, 128.0, Axis::Horizontal),
            &mut rng,
        )
        .unwrap();
        assert_eq!(s.pixels(), &[10, 127, 55]);
        let (p, _) = apply_transform(
            &img,
            &mask,
            &spec(TransformKind::Posterize, 4.0, Axis::Horizontal),
            &mut rng,
        )
        .unwrap();
        assert_eq!(p.pixels(), &[0, 128, 192]);
        let (a, _) = apply_transform(
            &img,
            &mask,
            &spec(TransformKind::AutoContrast, 0.0, Axis::Horizontal),
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.pixels(), &[0, 158, 255]);
    }

    #[test]
    fn out_of_range_and_unknown_rejected() {
        assert!(TransformSpec::new(TransformKind::Rotate, 45.0, 1.0, Axis::Horizontal).is_err());
        assert!(TransformSpec::new(TransformKind::Posterize, 6.0, 1.5, Axis::Horizontal).is_err());
        assert!("Blur".parse::<TransformKind>().is_err());
        assert_eq!("shear".parse::<TransformKind>().unwrap(), TransformKind::Shear);
    }

    #[test]
    fn region_boxes() {
        let mut m = square_mask(10, 10, (1, 3), (1, 4));
        m.set(8, 8, true);
        let r = AnomalyRegion::from_mask(m);
        assert_eq!(r.boxes, vec![(1, 1, 2, 3), (8, 8, 8, 8)]);
    }

    #[test]
    fn no_transform_paste_at_origin() {
        let normal = RasterImage::filled("n", 12, 12, 3, 40).unwrap();
        let abnormal = gradient_image(12, 12, 3);
        let mask = square_mask(12, 12, (0, 4), (0, 3));
        let region = AnomalyRegion::from_mask(mask.clone());
        let out = racp_generate_at(&normal, &abnormal, &region, 0, 5, Some((0, 0))).unwrap();
        assert_eq!(out.mask, mask);
        for r in 0..12 {
            for c in 0..12 {
                let expected = if mask.get(r, c) {
                    abnormal.pixel(r, c)
                } else {
                    normal.pixel(r, c)
                };
                assert_eq!(out.image.pixel(r, c), expected);
            }
        }
    }

    #[test]
    fn generation_is_seeded_and_faithful() {
        let normal = RasterImage::filled("n", 24, 24, 3, 90).unwrap();
        let abnormal = gradient_image(24, 24, 3);
        let region = AnomalyRegion::from_mask(square_mask(24, 24, (8, 14), (6, 13)));
        for seed in 0..20 {
            let a = racp_generate(&normal, &abnormal, &region, DEFAULT_SUBSET_SIZE, seed).unwrap();
            let b = racp_generate(&normal, &abnormal, &region, DEFAULT_SUBSET_SIZE, seed).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.plan.subset.len(), DEFAULT_SUBSET_SIZE);
            assert!(!a.mask.is_empty());
            assert_eq!(a.image.dims(), normal.dims());
            assert!(a.check_fidelity(&normal));
        }
    }

    #[test]
    fn subset_is_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = AugmentPlan::random(9, 3, &mut rng).unwrap();
        let mut kinds: Vec<_> = plan.subset.iter().map(|s| s.kind.name()).collect();
        kinds.sort();
        kinds.dedup();
        assert_eq!(kinds.len(), 9);
        assert!(AugmentPlan::random(10, 3, &mut rng).is_err());
    }
}
