//! Per-layer mixed SVD/CPD decomposition of 4-d convolution weights.
//!
//! A weight tensor `(c_out, c_in, k, k)` is sliced into a `g1 × g2` grid of
//! chunks along its two channel axes and every chunk is factorized on its own:
//!
//! * SVD: the chunk is folded to `(c_out/g1, (c_in/g2)·k·k)` and truncated to
//!   rank `r`, with `√Σ` multiplied into both factors.
//! * CPD: the chunk is fitted by `r` rank-one terms `a₁ ⊗ a₂ ⊗ a₃ ⊗ a₄`
//!   (output channel, input channel, kernel row, kernel column) using
//!   alternating least squares.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, stream};
use crate::tensor::{solve_least_squares, truncated_svd, DenseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TdFormat {
    Svd,
    Cpd,
}

impl TdFormat {
    /// `t` encoding: SVD = 0, CPD = 1.
    pub fn code(self) -> u8 {
        match self {
            TdFormat::Svd => 0,
            TdFormat::Cpd => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TdFormat::Svd => "svd",
            TdFormat::Cpd => "cpd",
        }
    }
}

impl std::str::FromStr for TdFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svd" | "0" => Ok(TdFormat::Svd),
            "cpd" | "1" => Ok(TdFormat::Cpd),
            other => Err(Error::config(format!(
                "unknown decomposition format `{other}`"
            ))),
        }
    }
}

/// Extents of a convolution weight `(c_out, c_in, k, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl WeightShape {
    pub fn new(c_out: usize, c_in: usize, k: usize) -> Self {
        Self { c_out, c_in, k }
    }

    pub fn of(w: &DenseTensor) -> Result<Self> {
        match *w.shape() {
            [c_out, c_in, kh, kw] if kh == kw => Ok(Self { c_out, c_in, k: kh }),
            _ => Err(Error::shape(format!(
                "expected a (c_out, c_in, k, k) weight, got {:?}",
                w.shape()
            ))),
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }

    pub fn numel(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

/// The per-layer decision: format, output/input channel groups and rank per chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerTDConfig {
    pub format: TdFormat,
    pub g1: usize,
    pub g2: usize,
    pub rank: usize,
}

impl LayerTDConfig {
    pub fn svd(g1: usize, g2: usize, rank: usize) -> Self {
        Self {
            format: TdFormat::Svd,
            g1,
            g2,
            rank,
        }
    }

    pub fn cpd(g1: usize, g2: usize, rank: usize) -> Self {
        Self {
            format: TdFormat::Cpd,
            g1,
            g2,
            rank,
        }
    }

    /// Shape of one chunk of the grid.
    pub fn chunk_shape(&self, shape: WeightShape) -> WeightShape {
        WeightShape::new(shape.c_out / self.g1, shape.c_in / self.g2, shape.k)
    }

    pub fn chunks(&self) -> usize {
        self.g1 * self.g2
    }

    /// Largest admissible rank. For CPD there is no mathematical cap; this is
    /// the candidate-generation cap `2·c_out/g1`.
    pub fn max_rank(format: TdFormat, g1: usize, g2: usize, shape: WeightShape) -> usize {
        let (co, ci) = (shape.c_out / g1, shape.c_in / g2);
        match format {
            TdFormat::Svd => co.min(ci * shape.k * shape.k),
            TdFormat::Cpd => 2 * co,
        }
    }

    /// Checks grouping divisibility and rank bounds for `shape`.
    pub fn validate(&self, shape: WeightShape) -> Result<()> {
        if self.g1 == 0 || !shape.c_out.is_multiple_of(self.g1) {
            return Err(Error::config(format!(
                "g1 = {} does not divide c_out = {}",
                self.g1, shape.c_out
            )));
        }
        if self.g2 == 0 || !shape.c_in.is_multiple_of(self.g2) {
            return Err(Error::config(format!(
                "g2 = {} does not divide c_in = {}",
                self.g2, shape.c_in
            )));
        }
        let max = match self.format {
            TdFormat::Svd => Self::max_rank(TdFormat::Svd, self.g1, self.g2, shape),
            TdFormat::Cpd => usize::MAX,
        };
        if self.rank == 0 || self.rank > max {
            return Err(Error::Rank {
                rank: self.rank,
                min: 1,
                max,
            });
        }
        Ok(())
    }
}

/// Stored factors per unit of rank for one chunk.
fn words_per_rank(format: TdFormat, chunk: WeightShape) -> usize {
    match format {
        TdFormat::Svd => chunk.c_out + chunk.c_in * chunk.k * chunk.k,
        TdFormat::Cpd => chunk.c_out + chunk.c_in + 2 * chunk.k,
    }
}

/// Number of stored factor elements after decomposing a layer of `shape`.
pub fn param_count(cfg: &LayerTDConfig, shape: WeightShape) -> usize {
    cfg.chunks() * words_per_rank(cfg.format, cfg.chunk_shape(shape)) * cfg.rank
}

/// Largest rank at which `param_count` does not exceed the dense weight count.
pub fn break_even_rank(format: TdFormat, g1: usize, g2: usize, shape: WeightShape) -> usize {
    let chunk = WeightShape::new(shape.c_out / g1, shape.c_in / g2, shape.k);
    shape.numel() / (g1 * g2 * words_per_rank(format, chunk))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlsSettings {
    pub max_sweeps: usize,
    /// Stop once the relative error improves by less than this between sweeps.
    pub tolerance: f64,
    /// Ridge added to the normal equations, scaled by their mean diagonal.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for AlsSettings {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            tolerance: 1e-6,
            ridge: 1e-12,
            seed: 0,
        }
    }
}

impl AlsSettings {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Settings for one layer of a network; chunks then derive their own
    /// streams from this seed and their grid index.
    pub fn for_layer(&self, layer: usize) -> Self {
        Self {
            seed: mix_seed(&[self.seed, 0x4c41_5945, layer as u64]),
            ..*self
        }
    }
}

/// How a chunk's factorization went.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ChunkFit {
    /// Relative Frobenius error of the chunk (absolute when the chunk is zero).
    pub error: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// Relative error after every ALS sweep; empty for SVD.
    pub history: Vec<f64>,
}

/// One factorized chunk. SVD: `[U' (c'×r), V' (c''·k·k × r)]`;
/// CPD: `[a₁ (c'×r), a₂ (c''×r), a₃ (k×r), a₄ (k×r)]`.
#[derive(Clone, Debug)]
pub struct DecomposedChunk {
    pub format: TdFormat,
    pub factors: Vec<DenseTensor>,
    pub fit: ChunkFit,
}

impl DecomposedChunk {
    /// Builds a chunk from stored factors, checking their shapes.
    pub fn from_factors(
        format: TdFormat,
        chunk: WeightShape,
        rank: usize,
        factors: Vec<DenseTensor>,
    ) -> Result<Self> {
        let expected = factor_shapes(format, chunk, rank);
        if factors.len() != expected.len()
            || factors
                .iter()
                .zip(&expected)
                .any(|(f, e)| f.shape() != e.as_slice())
        {
            return Err(Error::shape(format!(
                "{} chunk factors must have shapes {expected:?}",
                format.name()
            )));
        }
        Ok(Self {
            format,
            factors,
            fit: ChunkFit {
                converged: true,
                ..ChunkFit::default()
            },
        })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].cols()
    }

    pub fn param_count(&self) -> usize {
        self.factors.iter().map(DenseTensor::len).sum()
    }

    /// Dense `(c', c'', k, k)` tensor represented by the factors.
    pub fn reconstruct(&self, k: usize) -> DenseTensor {
        match self.format {
            TdFormat::Svd => {
                let (u, v) = (&self.factors[0], &self.factors[1]);
                let prod = u
                    .matmul(&v.transpose().expect("2-d"))
                    .expect("matching rank");
                let (co, cols) = (u.rows(), v.rows());
                prod.into_reshape(&[co, cols / (k * k), k, k])
                    .expect("consistent")
            }
            TdFormat::Cpd => cp_reconstruct(&self.factors),
        }
    }
}

pub fn factor_shapes(format: TdFormat, chunk: WeightShape, rank: usize) -> Vec<Vec<usize>> {
    match format {
        TdFormat::Svd => vec![
            vec![chunk.c_out, rank],
            vec![chunk.c_in * chunk.k * chunk.k, rank],
        ],
        TdFormat::Cpd => vec![
            vec![chunk.c_out, rank],
            vec![chunk.c_in, rank],
            vec![chunk.k, rank],
            vec![chunk.k, rank],
        ],
    }
}

/// A layer decomposed chunk by chunk; `chunks` is the `g1 × g2` grid in
/// row-major order (output group major).
#[derive(Clone, Debug)]
pub struct DecomposedLayer {
    pub config: LayerTDConfig,
    pub chunks: Vec<DecomposedChunk>,
    pub original_shape: WeightShape,
}

impl DecomposedLayer {
    pub fn new(
        config: LayerTDConfig,
        chunks: Vec<DecomposedChunk>,
        original_shape: WeightShape,
    ) -> Result<Self> {
        config.validate(original_shape)?;
        if chunks.len() != config.chunks() {
            return Err(Error::shape(format!(
                "expected {}×{} chunks, got {}",
                config.g1,
                config.g2,
                chunks.len()
            )));
        }
        let chunk_shape = config.chunk_shape(original_shape);
        let expected = factor_shapes(config.format, chunk_shape, config.rank);
        for c in &chunks {
            if c.format != config.format {
                return Err(Error::config("all chunks of a layer must share one format"));
            }
            if c.factors
                .iter()
                .map(|f| f.shape().to_vec())
                .collect::<Vec<_>>()
                != expected
            {
                return Err(Error::shape(
                    "chunk factor shapes do not match the layer config",
                ));
            }
        }
        Ok(Self {
            config,
            chunks,
            original_shape,
        })
    }

    pub fn chunk(&self, i1: usize, i2: usize) -> &DecomposedChunk {
        &self.chunks[i1 * self.config.g2 + i2]
    }

    pub fn param_count(&self) -> usize {
        self.chunks.iter().map(DecomposedChunk::param_count).sum()
    }
}

fn check_chunk(w: &DenseTensor) -> Result<WeightShape> {
    if w.order() != 4 || w.shape()[2] != w.shape()[3] {
        return Err(Error::shape(format!(
            "chunk must be (c', c'', k, k), got {:?}",
            w.shape()
        )));
    }
    WeightShape::of(w)
}

/// Rank-`r` truncated SVD of the `(c', c''·k·k)` fold of a chunk.
pub fn svd_decompose_chunk(w: &DenseTensor, r: usize) -> Result<DecomposedChunk> {
    let shape = check_chunk(w)?;
    let cols = shape.c_in * shape.k * shape.k;
    let max = shape.c_out.min(cols);
    if r == 0 || r > max {
        return Err(Error::Rank {
            rank: r,
            min: 1,
            max,
        });
    }
    let norm = w.frobenius_norm();
    if norm == 0.0 {
        return DecomposedChunk::from_factors(
            TdFormat::Svd,
            shape,
            r,
            vec![
                DenseTensor::zeros(&[shape.c_out, r])?,
                DenseTensor::zeros(&[cols, r])?,
            ],
        );
    }
    let svd = truncated_svd(&w.reshape(&[shape.c_out, cols])?, r)?;
    let root: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
    let scale_cols = |m: &DenseTensor| {
        let mut m = m.clone();
        for row in m.data_mut().chunks_mut(r) {
            for (x, s) in row.iter_mut().zip(&root) {
                *x *= s;
            }
        }
        m
    };
    let mut chunk = DecomposedChunk {
        format: TdFormat::Svd,
        factors: vec![scale_cols(&svd.u), scale_cols(&svd.v)],
        fit: ChunkFit {
            converged: true,
            ..ChunkFit::default()
        },
    };
    chunk.fit.error = w.distance(&chunk.reconstruct(shape.k))? / norm;
    Ok(chunk)
}

/// `Σ_r a₁[:,r] ⊗ a₂[:,r] ⊗ a₃[:,r] ⊗ a₄[:,r]`
fn cp_reconstruct(factors: &[DenseTensor]) -> DenseTensor {
    let dims: Vec<usize> = factors.iter().map(DenseTensor::rows).collect();
    let r = factors[0].cols();
    let [a, b, c, d] = [0, 1, 2, 3].map(|i| factors[i].data());
    let mut out = vec![0.0; dims.iter().product()];
    let mut p01 = vec![0.0; r];
    let mut p012 = vec![0.0; r];
    let mut idx = 0;
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for q in 0..r {
                p01[q] = a[i0 * r + q] * b[i1 * r + q];
            }
            for i2 in 0..dims[2] {
                for q in 0..r {
                    p012[q] = p01[q] * c[i2 * r + q];
                }
                for i3 in 0..dims[3] {
                    let dr = &d[i3 * r..(i3 + 1) * r];
                    out[idx] = p012.iter().zip(dr).map(|(x, y)| x * y).sum();
                    idx += 1;
                }
            }
        }
    }
    DenseTensor::new(dims, out).expect("consistent")
}

/// Matricized-tensor times Khatri-Rao product for `mode` of a 4-way tensor:
/// `M[i_mode, q] = Σ x[i] Π_{m≠mode} A_m[i_m, q]`.
fn mttkrp(x: &DenseTensor, factors: &[DenseTensor], mode: usize) -> Vec<f64> {
    let dims = x.shape();
    let r = factors[0].cols();
    let ones = vec![1.0; r * dims[mode]];
    let f: Vec<&[f64]> = (0..4)
        .map(|m| {
            if m == mode {
                &ones[..]
            } else {
                factors[m].data()
            }
        })
        .collect();
    let mut out = vec![0.0; dims[mode] * r];
    let data = x.data();
    let mut p01 = vec![0.0; r];
    let mut p012 = vec![0.0; r];
    let mut idx = 0;
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for q in 0..r {
                p01[q] = f[0][i0 * r + q] * f[1][i1 * r + q];
            }
            for i2 in 0..dims[2] {
                for q in 0..r {
                    p012[q] = p01[q] * f[2][i2 * r + q];
                }
                for i3 in 0..dims[3] {
                    let v = data[idx];
                    idx += 1;
                    if v == 0.0 {
                        continue;
                    }
                    let target = [i0, i1, i2, i3][mode];
                    let row = &mut out[target * r..(target + 1) * r];
                    let dr = &f[3][i3 * r..(i3 + 1) * r];
                    for q in 0..r {
                        row[q] += v * p012[q] * dr[q];
                    }
                }
            }
        }
    }
    out
}

fn gram(a: &DenseTensor) -> Vec<f64> {
    let (n, r) = (a.rows(), a.cols());
    let d = a.data();
    let mut g = vec![0.0; r * r];
    for i in 0..n {
        let row = &d[i * r..(i + 1) * r];
        for p in 0..r {
            for q in p..r {
                g[p * r + q] += row[p] * row[q];
            }
        }
    }
    for p in 0..r {
        for q in 0..p {
            g[p * r + q] = g[q * r + p];
        }
    }
    g
}

/// Solves `X · g = m` for `X` (rows of `m` are independent right-hand sides)
/// with `g` symmetric positive semi-definite, by Cholesky with a pseudo-inverse
/// fallback.
fn solve_gram(g: &[f64], m: &[f64], r: usize, ridge: f64) -> Result<Vec<f64>> {
    let mean_diag = (0..r).map(|i| g[i * r + i]).sum::<f64>() / r as f64;
    let lambda = ridge * mean_diag.max(f64::MIN_POSITIVE);
    let mut l = g.to_vec();
    for i in 0..r {
        l[i * r + i] += lambda;
    }
    let mut ok = true;
    'chol: for j in 0..r {
        let mut d = l[j * r + j];
        for k in 0..j {
            d -= l[j * r + k] * l[j * r + k];
        }
        if d <= 0.0 || !d.is_finite() {
            ok = false;
            break 'chol;
        }
        let d = d.sqrt();
        l[j * r + j] = d;
        for i in (j + 1)..r {
            let mut s = l[i * r + j];
            for k in 0..j {
                s -= l[i * r + k] * l[j * r + k];
            }
            l[i * r + j] = s / d;
        }
    }
    let rows = m.len() / r;
    if ok {
        let mut out = m.to_vec();
        for row in out.chunks_mut(r) {
            for i in 0..r {
                let mut s = row[i];
                for k in 0..i {
                    s -= l[i * r + k] * row[k];
                }
                row[i] = s / l[i * r + i];
            }
            for i in (0..r).rev() {
                let mut s = row[i];
                for k in (i + 1)..r {
                    s -= l[k * r + i] * row[k];
                }
                row[i] = s / l[i * r + i];
            }
        }
        return Ok(out);
    }
    let mut gl = g.to_vec();
    for i in 0..r {
        gl[i * r + i] += lambda;
    }
    let gt = DenseTensor::new(vec![r, r], gl)?;
    let rhs = DenseTensor::new(vec![rows, r], m.to_vec())?.transpose()?;
    Ok(solve_least_squares(&gt, &rhs)?.transpose()?.into_data())
}

/// Equalizes column norms across the four factors without changing the
/// represented tensor.
fn balance(factors: &mut [DenseTensor]) {
    let r = factors[0].cols();
    for q in 0..r {
        let norms: Vec<f64> = factors
            .iter()
            .map(|f| {
                f.data()
                    .iter()
                    .skip(q)
                    .step_by(r)
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        if norms.contains(&0.0) {
            continue;
        }
        let target = norms.iter().map(|n| n.ln()).sum::<f64>() / norms.len() as f64;
        let target = target.exp();
        for (f, n) in factors.iter_mut().zip(&norms) {
            let s = target / n;
            for v in f.data_mut().iter_mut().skip(q).step_by(r) {
                *v *= s;
            }
        }
    }
}

/// Rank-`r` CP fit of a `(c', c'', k, k)` chunk by alternating least squares.
pub fn cpd_decompose_chunk(
    w: &DenseTensor,
    r: usize,
    als: &AlsSettings,
) -> Result<DecomposedChunk> {
    let shape = check_chunk(w)?;
    if r == 0 {
        return Err(Error::Rank {
            rank: 0,
            min: 1,
            max: usize::MAX,
        });
    }
    let dims = shape.dims();
    let norm = w.frobenius_norm();
    if norm == 0.0 {
        let factors = dims
            .iter()
            .map(|&d| DenseTensor::zeros(&[d, r]))
            .collect::<Result<Vec<_>>>()?;
        return DecomposedChunk::from_factors(TdFormat::Cpd, shape, r, factors);
    }

    let mut rng = stream(&[als.seed, 0x4350_4400]);
    let mut factors = dims
        .iter()
        .map(|&d| DenseTensor::random_uniform(&[d, r], -1.0, 1.0, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut history = Vec::new();
    let mut converged = false;
    let mut best: Option<(f64, Vec<DenseTensor>)> = None;
    for _ in 0..als.max_sweeps {
        for mode in 0..4 {
            let mut v = vec![1.0; r * r];
            for (m, f) in factors.iter().enumerate() {
                if m != mode {
                    for (vi, gi) in v.iter_mut().zip(gram(f)) {
                        *vi *= gi;
                    }
                }
            }
            let rhs = mttkrp(w, &factors, mode);
            let solved = solve_gram(&v, &rhs, r, als.ridge)?;
            factors[mode] = DenseTensor::new(vec![dims[mode], r], solved)?;
        }
        balance(&mut factors);
        let err = w.distance(&cp_reconstruct(&factors))? / norm;
        if !err.is_finite() {
            return Err(Error::Numerical("ALS diverged".into()));
        }
        let prev = history.last().copied();
        history.push(err);
        if best.as_ref().is_none_or(|(b, _)| err <= *b) {
            best = Some((err, factors.clone()));
        }
        if err < 1e-13 || prev.is_some_and(|p: f64| p - err < als.tolerance) {
            converged = true;
            break;
        }
    }
    let (error, factors) = best.expect("at least one sweep");
    Ok(DecomposedChunk {
        format: TdFormat::Cpd,
        factors,
        fit: ChunkFit {
            error,
            sweeps: history.len(),
            converged,
            history,
        },
    })
}

/// Copies the `(i1, i2)` chunk out of a full weight tensor.
pub fn slice_chunk(
    w: &DenseTensor,
    cfg: &LayerTDConfig,
    i1: usize,
    i2: usize,
) -> Result<DenseTensor> {
    let shape = WeightShape::of(w)?;
    let c = cfg.chunk_shape(shape);
    let kk = shape.k * shape.k;
    let mut data = Vec::with_capacity(c.numel());
    for o in 0..c.c_out {
        let oo = i1 * c.c_out + o;
        let start = (oo * shape.c_in + i2 * c.c_in) * kk;
        data.extend_from_slice(&w.data()[start..start + c.c_in * kk]);
    }
    DenseTensor::new(c.dims().to_vec(), data)
}

/// Slices `w` into the `g1 × g2` grid and decomposes every chunk per `cfg`.
/// Chunk `(i1, i2)` draws its ALS initialization from `(als.seed, i1·g2 + i2)`.
pub fn decompose_layer(
    w: &DenseTensor,
    cfg: &LayerTDConfig,
    als: &AlsSettings,
) -> Result<DecomposedLayer> {
    let shape = WeightShape::of(w)?;
    cfg.validate(shape)?;
    let chunks = (0..cfg.chunks())
        .into_par_iter()
        .map(|idx| {
            let (i1, i2) = (idx / cfg.g2, idx % cfg.g2);
            let piece = slice_chunk(w, cfg, i1, i2)?;
            match cfg.format {
                TdFormat::Svd => svd_decompose_chunk(&piece, cfg.rank),
                TdFormat::Cpd => {
                    let settings = AlsSettings {
                        seed: mix_seed(&[als.seed, idx as u64]),
                        ..*als
                    };
                    cpd_decompose_chunk(&piece, cfg.rank, &settings)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    DecomposedLayer::new(*cfg, chunks, shape)
}

/// Reassembles the full `(c_out, c_in, k, k)` tensor from a decomposed layer.
pub fn reconstruct_layer(d: &DecomposedLayer) -> DenseTensor {
    let shape = d.original_shape;
    let c = d.config.chunk_shape(shape);
    let kk = shape.k * shape.k;
    let mut out = vec![0.0; shape.numel()];
    for i1 in 0..d.config.g1 {
        for i2 in 0..d.config.g2 {
            let piece = d.chunk(i1, i2).reconstruct(shape.k);
            for o in 0..c.c_out {
                let oo = i1 * c.c_out + o;
                let dst = (oo * shape.c_in + i2 * c.c_in) * kk;
                let src = o * c.c_in * kk;
                out[dst..dst + c.c_in * kk].copy_from_slice(&piece.data()[src..src + c.c_in * kk]);
            }
        }
    }
    DenseTensor::new(shape.dims().to_vec(), out).expect("consistent")
}

/// Reconstruction error of a decomposed layer against its source weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionError {
    pub value: f64,
    /// False when `w` is all zeros and `value` is the absolute error.
    pub relative: bool,
}

pub fn relative_error(d: &DecomposedLayer, w: &DenseTensor) -> Result<ReconstructionError> {
    let norm = w.frobenius_norm();
    let zero = d
        .chunks
        .iter()
        .flat_map(|c| &c.factors)
        .all(|f| f.data().iter().all(|&v| v == 0.0));
    let diff = if zero {
        if w.shape() != d.original_shape.dims() {
            return Err(Error::Shape(format!(
                "weights {:?} do not match decomposed layer {:?}",
                w.shape(),
                d.original_shape.dims()
            )));
        }
        norm
    } else {
        w.distance(&reconstruct_layer(d))?
    };
    Ok(if norm == 0.0 {
        ReconstructionError {
            value: diff,
            relative: false,
        }
    } else {
        ReconstructionError {
            value: diff / norm,
            relative: true,
        }
    })
}

/// Uniform draw helper for tests and fixtures: a 4-way rank-one tensor and its factors.
pub fn random_rank_one<R: Rng + ?Sized>(
    shape: WeightShape,
    rng: &mut R,
) -> Result<(DenseTensor, Vec<DenseTensor>)> {
    let factors = shape
        .dims()
        .iter()
        .map(|&d| DenseTensor::random_uniform(&[d, 1], -1.0, 1.0, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((cp_reconstruct(&factors), factors))
}
