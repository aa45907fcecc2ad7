//! Conditional normalizing flow built from affine coupling blocks.
//!
//! Each block splits its input `y` into `(x1, x2)` with `x1` the first
//! `d / 2` channels. A one-hidden-layer ReLU subnet reads `x1 ‖ c` (the
//! position condition) and predicts `(s, t)` for the `d - d/2` channels of
//! `x2`. The block output is
//!
//! ```text
//! u = (x1, x2 ⊙ exp(clamp(s)) + t)
//! y' = scale ⊙ (P u)
//! ```
//!
//! where `P` is a fixed random orthogonal matrix and `scale` a frozen
//! per-channel positive vector. The log-determinant of a block is
//! `Σ clamp(s) + Σ log scale`; `P` contributes nothing.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::{Error, Result};

pub const DEFAULT_CLAMP: f64 = 1.9;
pub const DEFAULT_COND_DIM: usize = 64;
pub const DEFAULT_BLOCKS: usize = 8;

/// `½·log(2π)`, the per-dimension constant of the standard normal.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Tolerance on `PᵀP = I` accepted for a permutation matrix.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Sinusoidal 2D position code. Entries lie in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ConditionVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Encodes `(row, col)` as `cond_dim` sinusoids: the first half encodes the
/// row, the second half the column, each as interleaved `sin`/`cos` pairs
/// at frequencies `10000^(-2i / (cond_dim/2))`.
pub fn position_embedding(position: (usize, usize), grid: (usize, usize), cond_dim: usize) -> Result<ConditionVector> {
    if cond_dim == 0 || !cond_dim.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "condition dimension must be a positive multiple of 4, got {cond_dim}"
        )));
    }
    let (row, col) = position;
    let (height, width) = grid;
    if row >= height || col >= width {
        return Err(Error::invalid(format!(
            "position ({row}, {col}) outside grid {height}x{width}"
        )));
    }
    let half = cond_dim / 2;
    let mut out = Vec::with_capacity(cond_dim);
    for coord in [row, col] {
        for i in 0..half / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
            let phase = coord as f64 * freq;
            out.push(phase.sin());
            out.push(phase.cos());
        }
    }
    Ok(ConditionVector(out))
}

/// Elementwise `(2c/π)·atan(s/c)`: odd, monotone, bounded by `c`.
pub fn soft_clamp(s: &[f64], clamp: f64) -> Vec<f64> {
    s.iter().map(|&v| soft_clamp_scalar(v, clamp)).collect()
}

#[inline]
pub(crate) fn soft_clamp_scalar(s: f64, clamp: f64) -> f64 {
    (2.0 * clamp / PI) * (s / clamp).atan()
}

#[inline]
pub(crate) fn soft_clamp_derivative(s: f64, clamp: f64) -> f64 {
    let r = s / clamp;
    (2.0 / PI) / (1.0 + r * r)
}

/// Row-major `d×d` orthogonal matrix from a seeded Gaussian draw,
/// orthonormalized by two passes of modified Gram-Schmidt.
pub fn random_orthogonal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for _pass in 0..2 {
        for i in 0..dim {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= dot * b;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
    }
    rows.into_iter().flatten().collect()
}

pub fn identity_matrix(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

/// Largest entry of `|PᵀP - I|`.
pub fn orthogonality_defect(matrix: &[f64], dim: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..dim {
        for j in 0..dim {
            let dot: f64 = (0..dim).map(|k| matrix[k * dim + i] * matrix[k * dim + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

/// Where the permutation of a block comes from. Seeded permutations are
/// regenerated bit-exactly on checkpoint load.
#[derive(Clone, Debug, PartialEq)]
pub enum PermutationSource {
    Seeded(u64),
    Explicit,
}

/// Shape of a coupling subnet: `inputs -> hidden (ReLU) -> outputs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubnetShape {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl SubnetShape {
    pub fn w1_len(&self) -> usize {
        self.hidden * self.inputs
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.inputs + self.hidden + self.outputs * self.hidden + self.outputs
    }

    /// Offsets of `(w1, b1, w2, b2)` inside the flat parameter vector.
    pub fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.outputs * self.hidden;
        [w1, b1, w2, b2]
    }
}

/// One affine coupling block followed by a fixed orthogonal mix and a fixed
/// per-channel scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    dim: usize,
    cond_dim: usize,
    split: usize,
    shape: SubnetShape,
    /// Flat `[w1 | b1 | w2 | b2]`, weights row-major `(out, in)`.
    params: Vec<f64>,
    permutation: Vec<f64>,
    permutation_source: PermutationSource,
    scale: Vec<f64>,
    clamp: f64,
}

/// Activations recorded by a forward pass, consumed by backpropagation.
#[derive(Clone, Debug, Default)]
pub(crate) struct BlockTape {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub raw_s: Vec<f64>,
    pub expo: Vec<f64>,
}

impl CouplingBlock {
    /// Fresh trainable block: fan-in uniform hidden layer, zero output
    /// layer, seeded orthogonal permutation, unit scale.
    pub fn new(dim: usize, cond_dim: usize, hidden: usize, clamp: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut block = Self::identity(dim, cond_dim, hidden, clamp)?;
        let bound = 1.0 / (block.shape.inputs.max(1) as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w1_len = block.shape.w1_len();
        for w in &mut block.params[..w1_len] {
            *w = uniform.sample(rng);
        }
        let seed: u64 = rng.random();
        block.permutation = random_orthogonal(dim, seed);
        block.permutation_source = PermutationSource::Seeded(seed);
        Ok(block)
    }

    /// Block with all-zero subnet, identity permutation and unit scale; maps
    /// every input to itself with zero log-determinant.
    pub fn identity(dim: usize, cond_dim: usize, hidden: usize, clamp: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be positive"));
        }
        if hidden == 0 {
            return Err(Error::invalid("subnet hidden width must be positive"));
        }
        if !(clamp > 0.0 && clamp.is_finite()) {
            return Err(Error::invalid(format!("clamp constant must be positive, got {clamp}")));
        }
        let split = dim / 2;
        let shape = SubnetShape {
            inputs: split + cond_dim,
            hidden,
            outputs: 2 * (dim - split),
        };
        Ok(Self {
            dim,
            cond_dim,
            split,
            shape,
            params: vec![0.0; shape.param_count()],
            permutation: identity_matrix(dim),
            permutation_source: PermutationSource::Explicit,
            scale: vec![1.0; dim],
            clamp,
        })
    }

    /// Assembles a block from stored parts, checking every structural
    /// invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        clamp: f64,
        params: Vec<f64>,
        permutation: Vec<f64>,
        permutation_source: PermutationSource,
        scale: Vec<f64>,
    ) -> Result<Self> {
        let mut block = Self::identity(dim, cond_dim, hidden, clamp)?;
        if params.len() != block.shape.param_count() {
            return Err(Error::Dimension(format!(
                "subnet expects {} parameters, got {}",
                block.shape.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("subnet parameters".into()));
        }
        block.params = params;
        block.set_permutation(permutation, permutation_source)?;
        block.set_scale(scale)?;
        Ok(block)
    }

    pub fn set_permutation(&mut self, matrix: Vec<f64>, source: PermutationSource) -> Result<()> {
        if matrix.len() != self.dim * self.dim {
            return Err(Error::Dimension(format!(
                "permutation must be {0}x{0}, got {1} entries",
                self.dim,
                matrix.len()
            )));
        }
        let defect = orthogonality_defect(&matrix, self.dim);
        if defect.is_nan() || defect > ORTHOGONALITY_TOL {
            return Err(Error::invalid(format!(
                "permutation is not orthogonal (max |PᵀP - I| = {defect:e})"
            )));
        }
        self.permutation = matrix;
        self.permutation_source = source;
        Ok(())
    }

    pub fn set_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        if scale.len() != self.dim {
            return Err(Error::Dimension(format!(
                "scale must have {} entries, got {}",
                self.dim,
                scale.len()
            )));
        }
        if let Some(bad) = scale.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "fixed scale entries must be positive, got {bad}"
            )));
        }
        self.scale = scale;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn hidden(&self) -> usize {
        self.shape.hidden
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn shape(&self) -> SubnetShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn permutation(&self) -> &[f64] {
        &self.permutation
    }

    pub fn permutation_source(&self) -> &PermutationSource {
        &self.permutation_source
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    fn check_lengths(&self, y: &[f64], c: &[f64]) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::Dimension(format!(
                "block expects input of length {}, got {}",
                self.dim,
                y.len()
            )));
        }
        if c.len() != self.cond_dim {
            return Err(Error::Dimension(format!(
                "block expects condition of length {}, got {}",
                self.cond_dim,
                c.len()
            )));
        }
        Ok(())
    }

    /// Runs the subnet on `x1 ‖ c`, returning `(pre-activation, hidden, out)`.
    fn subnet(&self, x1: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let SubnetShape {
            inputs,
            hidden,
            outputs,
        } = self.shape;
        let [w1, b1, w2, b2] = self.shape.offsets();
        let mut pre = self.params[b1..b1 + hidden].to_vec();
        for (h, acc) in pre.iter_mut().enumerate() {
            let row = &self.params[w1 + h * inputs..w1 + (h + 1) * inputs];
            let (rx, rc) = row.split_at(self.split);
            *acc +=
                rx.iter().zip(x1).map(|(w, v)| w * v).sum::<f64>() + rc.iter().zip(c).map(|(w, v)| w * v).sum::<f64>();
        }
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut out = self.params[b2..b2 + outputs].to_vec();
        for (o, acc) in out.iter_mut().enumerate() {
            let row = &self.params[w2 + o * hidden..w2 + (o + 1) * hidden];
            *acc += row.iter().zip(&act).map(|(w, v)| w * v).sum::<f64>();
        }
        (pre, act, out)
    }

    pub(crate) fn forward_taped(&self, y: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64, BlockTape)> {
        self.check_lengths(y, c)?;
        let (x1, x2) = y.split_at(self.split);
        let (pre, act, out) = self.subnet(x1, c);
        let n = self.dim - self.split;
        let (raw_s, t) = out.split_at(n);
        if raw_s.iter().chain(t).any(|v| !v.is_finite()) {
            return Err(Error::Block {
                block: 0,
                message: "subnet produced a non-finite coefficient".into(),
            });
        }
        let mut u = Vec::with_capacity(self.dim);
        u.extend_from_slice(x1);
        let mut logdet = 0.0;
        let mut expo = Vec::with_capacity(n);
        for i in 0..n {
            let sc = soft_clamp_scalar(raw_s[i], self.clamp);
            logdet += sc;
            let e = sc.exp();
            expo.push(e);
            u.push(x2[i] * e + t[i]);
        }
        let mut out_y = vec![0.0; self.dim];
        for (r, slot) in out_y.iter_mut().enumerate() {
            let row = &self.permutation[r * self.dim..(r + 1) * self.dim];
            *slot = self.scale[r] * row.iter().zip(&u).map(|(p, v)| p * v).sum::<f64>();
        }
        logdet += self.log_scale_sum();
        let tape = BlockTape {
            input: y.to_vec(),
            pre,
            hidden: act,
            raw_s: raw_s.to_vec(),
            expo,
        };
        Ok((out_y, logdet, tape))
    }

    /// Returns the transformed vector and this block's log-determinant.
    pub fn forward(&self, y: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.forward_taped(y, c).map(|(out, logdet, _)| (out, logdet))
    }

    pub fn inverse(&self, y: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        self.check_lengths(y, c)?;
        let scaled: Vec<f64> = y.iter().zip(&self.scale).map(|(v, s)| v / s).collect();
        // Pᵀ undoes the orthogonal mix.
        let mut u = vec![0.0; self.dim];
        for (r, &v) in scaled.iter().enumerate() {
            let row = &self.permutation[r * self.dim..(r + 1) * self.dim];
            for (slot, p) in u.iter_mut().zip(row) {
                *slot += p * v;
            }
        }
        let (x1, u2) = u.split_at(self.split);
        let (_, _, out) = self.subnet(x1, c);
        let n = self.dim - self.split;
        let (raw_s, t) = out.split_at(n);
        if raw_s.iter().chain(t).any(|v| !v.is_finite()) {
            return Err(Error::Block {
                block: 0,
                message: "subnet produced a non-finite coefficient".into(),
            });
        }
        let mut x = x1.to_vec();
        for i in 0..n {
            let sc = soft_clamp_scalar(raw_s[i], self.clamp);
            x.push((u2[i] - t[i]) * (-sc).exp());
        }
        Ok(x)
    }

    /// Backpropagates `grad_out` (w.r.t. this block's output) and
    /// `grad_logdet` (w.r.t. its log-determinant) through the block.
    /// Subnet parameter gradients are accumulated into `grad_params`; the
    /// gradient w.r.t. the block input is returned.
    pub(crate) fn backward(
        &self,
        tape: &BlockTape,
        c: &[f64],
        grad_out: &[f64],
        grad_logdet: f64,
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let d = self.dim;
        let n = d - self.split;
        let SubnetShape {
            inputs,
            hidden,
            outputs,
        } = self.shape;
        let [w1, b1, w2, b2] = self.shape.offsets();

        // y' = scale ⊙ (P u)  =>  ∂/∂u = Pᵀ (scale ⊙ ∂/∂y')
        let mut grad_u = vec![0.0; d];
        for (r, (go, s)) in grad_out.iter().zip(&self.scale).enumerate() {
            let g = go * s;
            if g == 0.0 {
                continue;
            }
            let row = &self.permutation[r * d..(r + 1) * d];
            for (slot, p) in grad_u.iter_mut().zip(row) {
                *slot += p * g;
            }
        }

        let (x1, x2) = tape.input.split_at(self.split);
        let mut grad_x = vec![0.0; d];
        grad_x[..self.split].copy_from_slice(&grad_u[..self.split]);

        // u2 = x2 ⊙ exp(sc) + t, logdet += Σ sc
        let mut grad_subnet_out = vec![0.0; outputs];
        for i in 0..n {
            let gu = grad_u[self.split + i];
            let e = tape.expo[i];
            grad_x[self.split + i] = gu * e;
            let grad_sc = gu * x2[i] * e + grad_logdet;
            grad_subnet_out[i] = grad_sc * soft_clamp_derivative(tape.raw_s[i], self.clamp);
            grad_subnet_out[n + i] = gu;
        }

        let mut grad_hidden = vec![0.0; hidden];
        for o in 0..outputs {
            let g = grad_subnet_out[o];
            if g == 0.0 {
                continue;
            }
            grad_params[b2 + o] += g;
            let row = w2 + o * hidden;
            for h in 0..hidden {
                grad_params[row + h] += g * tape.hidden[h];
                grad_hidden[h] += g * self.params[row + h];
            }
        }

        for h in 0..hidden {
            // zero-side subgradient at the ReLU kink
            if tape.pre[h] <= 0.0 {
                continue;
            }
            let g = grad_hidden[h];
            if g == 0.0 {
                continue;
            }
            grad_params[b1 + h] += g;
            let row = w1 + h * inputs;
            for (k, &v) in x1.iter().enumerate() {
                grad_params[row + k] += g * v;
                grad_x[k] += g * self.params[row + k];
            }
            for (k, &v) in c.iter().enumerate() {
                grad_params[row + self.split + k] += g * v;
            }
        }
        grad_x
    }

    fn snap_to_f32(&mut self) {
        for v in self.params.iter_mut().chain(self.scale.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// Hyperparameters that fix the architecture of a [`FlowModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    /// Subnet hidden width; `None` means `2·(d/2 + cond_dim)`.
    pub hidden: Option<usize>,
    pub clamp: f64,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            cond_dim: DEFAULT_COND_DIM,
            blocks: DEFAULT_BLOCKS,
            hidden: None,
            clamp: DEFAULT_CLAMP,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(2 * (self.dim / 2 + self.cond_dim))
    }
}

/// `φ = φ_L ∘ … ∘ φ_1` for one feature level.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    blocks: Vec<CouplingBlock>,
    dim: usize,
    cond_dim: usize,
    level: String,
}

/// Latent image of an input and the accumulated log-determinant.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub z: Vec<f64>,
    pub logdet: f64,
}

impl FlowModel {
    /// Fresh near-identity model: every block starts as `scale ∘ P`.
    pub fn new(config: &FlowConfig, level: impl Into<String>, seed: u64) -> Result<Self> {
        if config.blocks == 0 {
            return Err(Error::invalid("a flow needs at least one coupling block"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = config.hidden_width();
        let blocks = (0..config.blocks)
            .map(|_| CouplingBlock::new(config.dim, config.cond_dim, hidden, config.clamp, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks, level)
    }

    /// Model whose every block is the identity.
    pub fn identity(config: &FlowConfig, level: impl Into<String>) -> Result<Self> {
        let hidden = config.hidden_width();
        let blocks = (0..config.blocks.max(1))
            .map(|_| CouplingBlock::identity(config.dim, config.cond_dim, hidden, config.clamp))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks, level)
    }

    pub fn from_blocks(blocks: Vec<CouplingBlock>, level: impl Into<String>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::invalid("a flow needs at least one coupling block"))?;
        let (dim, cond_dim) = (first.dim, first.cond_dim);
        if let Some(i) = blocks.iter().position(|b| b.dim != dim || b.cond_dim != cond_dim) {
            return Err(Error::Dimension(format!(
                "block {i} has dims ({}, {}), expected ({dim}, {cond_dim})",
                blocks[i].dim, blocks[i].cond_dim
            )));
        }
        Ok(Self {
            blocks,
            dim,
            cond_dim,
            level: level.into(),
        })
    }

    /// Randomizes every subnet parameter (output layer included) with
    /// `N(0, std²)` and every fixed scale with `exp(N(0, scale_std²))`.
    /// Turns a fresh model into a generic nonlinear bijection for testing.
    pub fn randomize(&mut self, std: f64, scale_std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            for w in &mut block.params {
                let g: f64 = StandardNormal.sample(&mut rng);
                *w = std * g;
            }
            for s in &mut block.scale {
                let g: f64 = StandardNormal.sample(&mut rng);
                *s = (scale_std * g).exp();
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn level(&self) -> &str {
        &self.level
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [CouplingBlock] {
        &mut self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.params.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "level {}: flow expects {} channels, got {}",
                self.level,
                self.dim,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("level {}: input feature", self.level)));
        }
        Ok(())
    }

    fn tag_block(err: Error, index: usize) -> Error {
        match err {
            Error::Block { message, .. } => Error::Block { block: index, message },
            other => other,
        }
    }

    pub(crate) fn forward_taped(&self, x: &[f64], c: &[f64]) -> Result<(Latent, Vec<BlockTape>)> {
        self.check_input(x)?;
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, ld, tape) = block.forward_taped(&y, c).map_err(|e| Self::tag_block(e, i))?;
            y = next;
            logdet += ld;
            tapes.push(tape);
        }
        Ok((Latent { z: y, logdet }, tapes))
    }

    pub fn forward(&self, x: &[f64], c: &[f64]) -> Result<Latent> {
        self.check_input(x)?;
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, ld) = block.forward(&y, c).map_err(|e| Self::tag_block(e, i))?;
            y = next;
            logdet += ld;
        }
        Ok(Latent { z: y, logdet })
    }

    pub fn inverse(&self, z: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::Dimension(format!(
                "flow expects latent of length {}, got {}",
                self.dim,
                z.len()
            )));
        }
        let mut y = z.to_vec();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            y = block.inverse(&y, c).map_err(|e| Self::tag_block(e, i))?;
        }
        Ok(y)
    }

    /// Exact `log p(x) = -½ zᵀz + Σ log|det J| - (d/2)·log 2π`.
    pub fn log_likelihood(&self, x: &[f64], c: &[f64]) -> Result<f64> {
        let latent = self.forward(x, c)?;
        Ok(standard_normal_logp(&latent.z) + latent.logdet)
    }

    /// Data-dependent init of the frozen scales: each block's scale becomes
    /// `1 / (std + 1e-6)` of its pre-scale output over `batch`, propagated
    /// block by block. Needs at least two samples; otherwise a no-op.
    pub fn init_scales(&mut self, batch: &[(&[f64], &[f64])]) -> Result<()> {
        if batch.len() < 2 {
            return Ok(());
        }
        let mut current: Vec<Vec<f64>> = batch.iter().map(|(x, _)| x.to_vec()).collect();
        for i in 0..self.blocks.len() {
            self.blocks[i].scale = vec![1.0; self.dim];
            let outputs = current
                .iter()
                .zip(batch)
                .map(|(y, (_, c))| self.blocks[i].forward(y, c).map(|(o, _)| o))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Self::tag_block(e, i))?;
            let n = outputs.len() as f64;
            let mut scale = Vec::with_capacity(self.dim);
            for ch in 0..self.dim {
                let mean = outputs.iter().map(|o| o[ch]).sum::<f64>() / n;
                let var = outputs.iter().map(|o| (o[ch] - mean).powi(2)).sum::<f64>() / n;
                scale.push(1.0 / (var.sqrt() + 1e-6));
            }
            current = outputs
                .into_iter()
                .map(|o| o.iter().zip(&scale).map(|(v, s)| v * s).collect())
                .collect();
            self.blocks[i].set_scale(scale)?;
        }
        Ok(())
    }

    /// Rounds every stored parameter to the nearest `f32`, so the model
    /// survives a round trip through the f32 tensor format unchanged.
    pub fn snap_to_f32(&mut self) {
        for block in &mut self.blocks {
            block.snap_to_f32();
        }
    }
}

/// `log N(z; 0, I)`.
pub fn standard_normal_logp(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - z.len() as f64 * HALF_LOG_2PI
}
