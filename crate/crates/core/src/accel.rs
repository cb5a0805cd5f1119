//! Analytical model of a layer-pipelined dataflow accelerator: one engine per
//! chunk of every layer, each a short chain of MAC stages with unroll factors
//! `(p_in, p_out)`, connected by FIFO arrays.

use std::fmt::Write as _;
use std::fs;
use std::ops::{Add, AddAssign, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decompose::{LayerTDConfig, TdFormat};
use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, NetworkSpec, TdMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceVector {
    pub dsp: u64,
    /// 18 Kb block equivalents.
    pub bram: u64,
    pub lut: u64,
    pub uram: u64,
}

impl ResourceVector {
    pub fn new(dsp: u64, bram: u64, lut: u64, uram: u64) -> Self {
        Self {
            dsp,
            bram,
            lut,
            uram,
        }
    }

    pub fn fits(&self, budget: &ResourceVector) -> bool {
        self.dsp <= budget.dsp
            && self.bram <= budget.bram
            && self.lut <= budget.lut
            && self.uram <= budget.uram
    }

    pub fn scaled(self, n: u64) -> Self {
        Self::new(self.dsp * n, self.bram * n, self.lut * n, self.uram * n)
    }

    /// Sum of components relative to `budget`.
    pub fn cost(&self, budget: &ResourceVector) -> f64 {
        let r = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        r(self.dsp, budget.dsp)
            + r(self.bram, budget.bram)
            + r(self.lut, budget.lut)
            + r(self.uram, budget.uram)
    }

    /// Name of the component that exceeds `budget` by the largest ratio.
    pub fn tightest(&self, budget: &ResourceVector) -> &'static str {
        let r = |a: u64, b: u64| match (a, b) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            _ => a as f64 / b as f64,
        };
        [
            ("dsp", r(self.dsp, budget.dsp)),
            ("bram", r(self.bram, budget.bram)),
            ("lut", r(self.lut, budget.lut)),
            ("uram", r(self.uram, budget.uram)),
        ]
        .into_iter()
        .fold(
            ("dsp", f64::NEG_INFINITY),
            |a, b| if b.1 > a.1 { b } else { a },
        )
        .0
    }
}

impl Add for ResourceVector {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(
            self.dsp + o.dsp,
            self.bram + o.bram,
            self.lut + o.lut,
            self.uram + o.uram,
        )
    }
}

impl AddAssign for ResourceVector {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for ResourceVector {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(
            self.dsp - o.dsp,
            self.bram - o.bram,
            self.lut - o.lut,
            self.uram - o.uram,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Platform {
    pub name: String,
    pub clock_mhz: f64,
    pub budget: ResourceVector,
    pub word_bits: u64,
    pub bram_block_bits: u64,
    pub lut_per_lane: u64,
    pub stage_overhead_lut: u64,
    pub fifo_depth: u64,
}

impl Default for Platform {
    fn default() -> Self {
        Self {
            name: "u250".into(),
            clock_mhz: 200.0,
            budget: ResourceVector::new(12_288, 5_376, 1_728_000, 1_280),
            word_bits: 8,
            bram_block_bits: 18_432,
            lut_per_lane: 40,
            stage_overhead_lut: 1_500,
            fifo_depth: 512,
        }
    }
}

impl Platform {
    /// Budgets large enough that nothing is ever constrained.
    pub fn unlimited() -> Self {
        let big = u64::MAX / 4;
        Self {
            name: "unlimited".into(),
            budget: ResourceVector::new(big, big, big, big),
            ..Self::default()
        }
    }

    pub fn with_budget(mut self, budget: ResourceVector) -> Self {
        self.budget = budget;
        self
    }

    pub fn clock_hz(&self) -> f64 {
        self.clock_mhz * 1e6
    }

    pub fn validate(&self) -> Result<()> {
        if self.clock_mhz.is_nan()
            || self.clock_mhz <= 0.0
            || self.word_bits == 0
            || self.bram_block_bits == 0
        {
            return Err(Error::config(
                "platform clock, word width and block size must be positive",
            ));
        }
        let b = &self.budget;
        if b.dsp == 0 || b.bram == 0 || b.lut == 0 {
            return Err(Error::config("platform budgets must be positive"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Platform =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn blocks(&self, words: u64) -> u64 {
        (words * self.word_bits).div_ceil(self.bram_block_bits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Undecomposed k×k convolution.
    Dense,
    /// SVD stage 1: k×k conv `c_in/g2 → r`.
    SvdSpatial,
    /// SVD stage 2: 1×1 conv `r → c_out/g1`.
    SvdPointwise,
    /// CPD stage 1: 1×1 conv `c_in/g2 → r`.
    CpdIn,
    /// CPD stage 2: depthwise k×1.
    CpdRows,
    /// CPD stage 3: depthwise 1×k.
    CpdCols,
    /// CPD stage 4: 1×1 conv `r → c_out/g1`.
    CpdOut,
    /// relu, pooling and element-wise add.
    PassThrough,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Dense => "dense",
            StageKind::SvdSpatial => "svd_kxk",
            StageKind::SvdPointwise => "svd_1x1",
            StageKind::CpdIn => "cpd_in",
            StageKind::CpdRows => "cpd_kx1",
            StageKind::CpdCols => "cpd_1xk",
            StageKind::CpdOut => "cpd_out",
            StageKind::PassThrough => "stream",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageModel {
    pub kind: StageKind,
    /// Positions this stage emits (its output map size, or the larger of input
    /// and output for pass-through stages).
    pub spatial_positions: usize,
    pub reduce_size: usize,
    pub expand_size: usize,
    pub p_in: usize,
    pub p_out: usize,
    pub weight_words: usize,
    /// Input positions that must arrive before the first output can start.
    pub fill_positions: usize,
}

impl StageModel {
    fn new(
        kind: StageKind,
        positions: usize,
        reduce: usize,
        expand: usize,
        words: usize,
        fill: usize,
    ) -> Self {
        Self {
            kind,
            spatial_positions: positions,
            reduce_size: reduce,
            expand_size: expand,
            p_in: 1,
            p_out: 1,
            weight_words: words,
            fill_positions: fill,
        }
    }

    pub fn cycles(&self) -> u64 {
        stage_cycles(self)
    }

    pub fn macs(&self) -> u64 {
        if self.kind == StageKind::PassThrough {
            0
        } else {
            (self.spatial_positions * self.reduce_size * self.expand_size) as u64
        }
    }

    pub fn lanes(&self) -> u64 {
        (self.p_in * self.p_out) as u64
    }

    pub fn is_fully_unrolled(&self) -> bool {
        self.p_in == self.reduce_size && self.p_out == self.expand_size
    }

    pub fn resources(&self, p: &Platform) -> ResourceVector {
        let lanes = self.lanes();
        if self.kind == StageKind::PassThrough {
            return ResourceVector::new(0, 0, p.stage_overhead_lut + p.lut_per_lane * lanes, 0);
        }
        let bram = if self.weight_words == 0 {
            0
        } else {
            p.blocks(self.weight_words as u64).max(lanes)
        };
        ResourceVector::new(
            lanes,
            bram,
            p.stage_overhead_lut + p.lut_per_lane * lanes,
            0,
        )
    }
}

/// `positions × ⌈reduce / p_in⌉ × ⌈expand / p_out⌉`
pub fn stage_cycles(s: &StageModel) -> u64 {
    s.spatial_positions as u64
        * s.reduce_size.div_ceil(s.p_in) as u64
        * s.expand_size.div_ceil(s.p_out) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineFormat {
    Dense,
    Svd,
    Cpd,
    PassThrough,
}

/// One hardware engine: a layer's chunk `(i1, i2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineModel {
    pub layer: usize,
    pub layer_id: String,
    pub format: EngineFormat,
    pub group: (usize, usize),
    pub stages: Vec<StageModel>,
}

impl EngineModel {
    pub fn cycles(&self) -> u64 {
        self.stages
            .iter()
            .map(StageModel::cycles)
            .max()
            .unwrap_or(0)
    }
}

/// The `g1 × g2` identical engines of one layer; unroll factors are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEngines {
    pub layer: usize,
    pub layer_id: String,
    pub format: EngineFormat,
    pub groups: (usize, usize),
    pub stages: Vec<StageModel>,
}

impl LayerEngines {
    pub fn count(&self) -> usize {
        self.groups.0 * self.groups.1
    }

    pub fn cycles(&self) -> u64 {
        self.stages
            .iter()
            .map(StageModel::cycles)
            .max()
            .unwrap_or(0)
    }

    pub fn resources(&self, p: &Platform) -> ResourceVector {
        self.stages
            .iter()
            .fold(ResourceVector::default(), |acc, s| acc + s.resources(p))
            .scaled(self.count() as u64)
    }
}

fn window_fill(k: usize, padding: usize, width: usize) -> usize {
    let reach = k.saturating_sub(1 + padding);
    reach * width + reach
}

/// Stages of one engine of `layer` under `cfg` (`None` keeps the layer dense).
pub fn build_stages(layer: &LayerSpec, cfg: Option<&LayerTDConfig>) -> Result<Vec<StageModel>> {
    let (k, p) = (layer.k, layer.padding);
    let width = layer.input_size.1;
    let p_in = layer.input_positions();
    let p_out = layer.output_positions();
    if !layer.is_decomposable() {
        let fill = match layer.kind {
            LayerKind::Maxpool | LayerKind::Avgpool => window_fill(k, p, width),
            LayerKind::GlobalAvgpool => p_in - 1,
            _ => 0,
        };
        return Ok(vec![StageModel::new(
            StageKind::PassThrough,
            p_in.max(p_out),
            1,
            layer.c_in,
            0,
            fill,
        )]);
    }
    let fill = window_fill(k, p, width);
    let Some(cfg) = cfg else {
        let reduce = layer.c_in * k * k;
        return Ok(vec![StageModel::new(
            StageKind::Dense,
            p_out,
            reduce,
            layer.c_out,
            reduce * layer.c_out,
            fill,
        )]);
    };
    cfg.validate(layer.weight_shape())
        .map_err(|e| Error::config(format!("layer `{}`: {e}", layer.id)))?;
    let chunk = cfg.chunk_shape(layer.weight_shape());
    let r = cfg.rank;
    Ok(match cfg.format {
        TdFormat::Svd => {
            let reduce = chunk.c_in * k * k;
            vec![
                StageModel::new(StageKind::SvdSpatial, p_out, reduce, r, reduce * r, fill),
                StageModel::new(
                    StageKind::SvdPointwise,
                    p_out,
                    r,
                    chunk.c_out,
                    r * chunk.c_out,
                    0,
                ),
            ]
        }
        TdFormat::Cpd => {
            let reach = k.saturating_sub(1 + p);
            let p_mid = layer.output_size().0 * width;
            vec![
                StageModel::new(StageKind::CpdIn, p_in, chunk.c_in, r, chunk.c_in * r, 0),
                StageModel::new(StageKind::CpdRows, p_mid, k, r, k * r, reach * width),
                StageModel::new(StageKind::CpdCols, p_out, k, r, k * r, reach),
                StageModel::new(StageKind::CpdOut, p_out, r, chunk.c_out, r * chunk.c_out, 0),
            ]
        }
    })
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm_fifo_width(g1_prev: usize, g2_next: usize) -> usize {
    g1_prev / gcd(g1_prev, g2_next) * g2_next
}

/// Position within a stream of `c` channels carried as `g` interleaved groups
/// (round robin over groups, each group in channel order) of channel `ch`.
fn stream_position(ch: usize, c: usize, g: usize) -> usize {
    let per = c / g;
    (ch % per) * g + ch / per
}

/// `perm[t]` is the producer stream index read by the consumer at its `t`-th slot.
pub fn rearrange_schedule(c: usize, g1: usize, g2: usize) -> Result<Vec<usize>> {
    if g1 == 0 || g2 == 0 || !c.is_multiple_of(g1) || !c.is_multiple_of(g2) {
        return Err(Error::config(format!(
            "groups {g1} and {g2} must divide {c} channels"
        )));
    }
    let per2 = c / g2;
    Ok((0..c)
        .map(|t| {
            let (j, i) = (t / g2, t % g2);
            stream_position(i * per2 + j, c, g1)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FifoEdge {
    /// Producer layer index, `None` for the network input.
    pub from: Option<usize>,
    pub to: usize,
    pub channels: usize,
    pub out_groups: usize,
    pub in_groups: usize,
    pub width: usize,
}

impl FifoEdge {
    pub fn needs_rearrangement(&self) -> bool {
        self.out_groups != self.in_groups
    }

    pub fn resources(&self, p: &Platform) -> ResourceVector {
        if !self.needs_rearrangement() {
            return ResourceVector::default();
        }
        ResourceVector::new(0, self.width as u64 * p.blocks(p.fifo_depth), 0, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineDesign {
    pub layers: Vec<LayerEngines>,
    pub fifos: Vec<FifoEdge>,
    pub platform: Platform,
    /// Predecessor layer indices, mirrored from the network.
    preds: Vec<Vec<usize>>,
}

/// Timing summary of a design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub ii: u64,
    pub depth: f64,
    pub fps_batch1: f64,
    pub fps_peak: f64,
}

impl PipelineDesign {
    /// All unroll factors at 1.
    pub fn new(net: &NetworkSpec, td: Option<&TdMap>, platform: &Platform) -> Result<Self> {
        let mut layers = Vec::with_capacity(net.layers.len());
        let mut out_groups = Vec::with_capacity(net.layers.len());
        let mut fifos = Vec::new();
        for (i, l) in net.layers.iter().enumerate() {
            let cfg = td
                .and_then(|t| t.get(&l.id))
                .filter(|_| l.is_decomposable());
            let stages = build_stages(l, cfg)?;
            let (format, groups) = match (l.is_decomposable(), cfg) {
                (false, _) => (EngineFormat::PassThrough, (1, 1)),
                (true, None) => (EngineFormat::Dense, (1, 1)),
                (true, Some(c)) => (
                    match c.format {
                        TdFormat::Svd => EngineFormat::Svd,
                        TdFormat::Cpd => EngineFormat::Cpd,
                    },
                    (c.g1, c.g2),
                ),
            };
            let upstream: Vec<(Option<usize>, usize)> = if l.preds.is_empty() {
                vec![(None, 1)]
            } else {
                l.preds.iter().map(|&p| (Some(p), out_groups[p])).collect()
            };
            let in_groups = if l.is_decomposable() {
                groups.1
            } else {
                upstream[0].1
            };
            for &(from, g_out) in &upstream {
                fifos.push(FifoEdge {
                    from,
                    to: i,
                    channels: l.c_in,
                    out_groups: g_out,
                    in_groups,
                    width: lcm_fifo_width(g_out, in_groups),
                });
            }
            out_groups.push(if l.is_decomposable() {
                groups.0
            } else {
                in_groups
            });
            layers.push(LayerEngines {
                layer: i,
                layer_id: l.id.clone(),
                format,
                groups,
                stages,
            });
        }
        Ok(Self {
            layers,
            fifos,
            platform: platform.clone(),
            preds: net.layers.iter().map(|l| l.preds.clone()).collect(),
        })
    }

    /// Every engine, expanded per chunk.
    pub fn engines(&self) -> Vec<EngineModel> {
        self.layers
            .iter()
            .flat_map(|le| {
                (0..le.groups.0).flat_map(move |i1| {
                    (0..le.groups.1).map(move |i2| EngineModel {
                        layer: le.layer,
                        layer_id: le.layer_id.clone(),
                        format: le.format,
                        group: (i1, i2),
                        stages: le.stages.clone(),
                    })
                })
            })
            .collect()
    }

    /// `(layer, stage)` pairs addressing every distinct unroll setting.
    pub fn units(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, le)| (0..le.stages.len()).map(move |s| (i, s)))
            .collect()
    }

    pub fn stage(&self, unit: (usize, usize)) -> &StageModel {
        &self.layers[unit.0].stages[unit.1]
    }

    pub fn set_unroll(&mut self, unit: (usize, usize), p_in: usize, p_out: usize) -> Result<()> {
        let s = &mut self.layers[unit.0].stages[unit.1];
        if p_in == 0 || p_out == 0 || p_in > s.reduce_size || p_out > s.expand_size {
            return Err(Error::config(format!(
                "unroll ({p_in}, {p_out}) outside 1..={} × 1..={}",
                s.reduce_size, s.expand_size
            )));
        }
        s.p_in = p_in;
        s.p_out = p_out;
        Ok(())
    }

    pub fn ii(&self) -> u64 {
        self.layers
            .iter()
            .map(LayerEngines::cycles)
            .max()
            .unwrap_or(0)
    }

    /// Single-image latency minus one initiation interval, so that `batch`
    /// images take `depth + batch × II` cycles.
    pub fn depth(&self) -> f64 {
        (self.latency() - self.ii() as f64).max(0.0)
    }

    /// Cycles until the last output of one image leaves the pipeline. Every
    /// stream is tracked by the times of its first and last positions, with
    /// arrivals in between taken as evenly spaced.
    pub fn latency(&self) -> f64 {
        let mut ready: Vec<(f64, f64, usize)> = Vec::with_capacity(self.layers.len());
        for (i, le) in self.layers.iter().enumerate() {
            let mut stream = self.preds[i]
                .iter()
                .map(|&p| ready[p])
                .reduce(|a, b| (a.0.max(b.0), a.1.max(b.1), a.2.max(b.2)))
                .unwrap_or((0.0, 0.0, 1));
            for s in &le.stages {
                let (first, last, n_in) = stream;
                let arrival = |k: usize| {
                    if n_in <= 1 {
                        last
                    } else {
                        first + (last - first) * k as f64 / (n_in - 1) as f64
                    }
                };
                let n_out = s.spatial_positions.max(1);
                let per = s.cycles() as f64 / n_out as f64;
                // Output j needs this many input positions; the finish time is
                // set by the binding one of j = 0, the clamp point and the end.
                let need = |j: usize| (s.fill_positions + 1 + j * n_in / n_out).min(n_in);
                let clamp = (n_in.saturating_sub(s.fill_positions + 1) * n_out).div_ceil(n_in);
                let out_last = [0, clamp.saturating_sub(1), clamp, n_out - 1]
                    .into_iter()
                    .filter(|&j| j < n_out)
                    .map(|j| arrival(need(j) - 1) + (n_out - j) as f64 * per)
                    .fold(f64::MIN, f64::max);
                stream = (arrival(need(0) - 1) + per, out_last, n_out);
            }
            ready.push(stream);
        }
        ready.last().map_or(0.0, |r| r.1)
    }

    pub fn resources(&self) -> ResourceVector {
        resource_usage(self, &self.platform)
    }

    pub fn fps(&self, batch: usize) -> f64 {
        pipeline_fps(self, batch)
    }

    pub fn metrics(&self) -> PipelineMetrics {
        PipelineMetrics {
            ii: self.ii(),
            depth: self.depth(),
            fps_batch1: self.fps(1),
            fps_peak: self.platform.clock_hz() / self.ii() as f64,
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.layers
            .iter()
            .map(|le| le.stages.iter().map(StageModel::macs).sum::<u64>() * le.count() as u64)
            .sum()
    }

    /// Tab-separated per-engine table followed by totals and the pipeline summary.
    pub fn report(&self, batch: usize) -> String {
        let p = &self.platform;
        let mut out = String::new();
        out.push_str("layer\tgroup\tformat\tstage\tpositions\treduce\texpand\tp_in\tp_out\tcycles\tdsp\tbram\tlut\turam\n");
        for e in self.engines() {
            for s in &e.stages {
                let r = s.resources(p);
                let _ = writeln!(
                    out,
                    "{}\t{}.{}\t{:?}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    e.layer_id,
                    e.group.0,
                    e.group.1,
                    e.format,
                    s.kind.name(),
                    s.spatial_positions,
                    s.reduce_size,
                    s.expand_size,
                    s.p_in,
                    s.p_out,
                    s.cycles(),
                    r.dsp,
                    r.bram,
                    r.lut,
                    r.uram
                );
            }
        }
        for f in self.fifos.iter().filter(|f| f.needs_rearrangement()) {
            let r = f.resources(p);
            let from = f
                .from
                .map_or("input".to_string(), |i| self.layers[i].layer_id.clone());
            let _ = writeln!(
                out,
                "fifo:{from}->{}\t-\tLcm{}\t-\t-\t-\t-\t-\t-\t-\t{}\t{}\t{}\t{}",
                self.layers[f.to].layer_id, f.width, r.dsp, r.bram, r.lut, r.uram
            );
        }
        let t = self.resources();
        let m = self.metrics();
        let _ = writeln!(
            out,
            "total\t-\t-\t-\t-\t-\t-\t-\t-\t{}\t{}\t{}\t{}\t{}",
            m.ii, t.dsp, t.bram, t.lut, t.uram
        );
        let b = p.budget;
        let _ = writeln!(
            out,
            "budget\t-\t-\t-\t-\t-\t-\t-\t-\t-\t{}\t{}\t{}\t{}",
            b.dsp, b.bram, b.lut, b.uram
        );
        let _ = writeln!(out, "clock_mhz\t{}", p.clock_mhz);
        let _ = writeln!(out, "ii_cycles\t{}", m.ii);
        let _ = writeln!(out, "depth_cycles\t{:.1}", m.depth);
        let _ = writeln!(out, "fps_batch1\t{:.3}", m.fps_batch1);
        if batch > 1 {
            let _ = writeln!(out, "fps_batch{batch}\t{:.3}", self.fps(batch));
        }
        let _ = writeln!(out, "fps_peak\t{:.3}", m.fps_peak);
        out
    }
}

/// `batch · clock / (depth + batch · II)`
pub fn pipeline_fps(d: &PipelineDesign, batch: usize) -> f64 {
    let batch = batch.max(1) as f64;
    batch * d.platform.clock_hz() / (d.depth() + batch * d.ii() as f64)
}

pub fn resource_usage(d: &PipelineDesign, p: &Platform) -> ResourceVector {
    let engines = d
        .layers
        .iter()
        .fold(ResourceVector::default(), |acc, le| acc + le.resources(p));
    d.fifos.iter().fold(engines, |acc, f| acc + f.resources(p))
}

pub fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut i = 1;
    while i * i <= n {
        if n.is_multiple_of(i) {
            small.push(i);
            if i * i != n {
                large.push(n / i);
            }
        }
        i += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

fn next_divisor(n: usize, current: usize) -> Option<usize> {
    (current + 1..=n).find(|d| n.is_multiple_of(*d))
}

/// Greedy unroll allocation maximizing peak throughput within the budget:
/// repeatedly speed up the bottleneck stage (lowest layer first on ties) by
/// moving `p_in` or `p_out` to its next divisor, whichever buys more cycles per
/// unit of budget-normalized resource.
pub fn allocate_unrolling(
    net: &NetworkSpec,
    td: Option<&TdMap>,
    platform: &Platform,
) -> Result<PipelineDesign> {
    let mut d = PipelineDesign::new(net, td, platform)?;
    allocate_design(&mut d)?;
    Ok(d)
}

/// Runs the greedy allocation on an existing design, starting from its current unrolls.
pub fn allocate_design(d: &mut PipelineDesign) -> Result<()> {
    let p = d.platform.clone();
    let budget = p.budget;
    let mut total = d.resources();
    if !total.fits(&budget) {
        return Err(Error::Budget(format!(
            "minimal design needs {total:?}, budget {budget:?} (tightest: {})",
            total.tightest(&budget)
        )));
    }
    let units = d.units();
    let mut cycles: Vec<u64> = units.iter().map(|&u| d.stage(u).cycles()).collect();
    loop {
        let (bi, &worst) =
            cycles
                .iter()
                .enumerate()
                .fold((0, &0u64), |a, b| if b.1 > a.1 { b } else { a });
        let unit = units[bi];
        let count = d.layers[unit.0].count() as u64;
        let s = d.stage(unit).clone();
        let before = s.resources(&p).scaled(count);
        let mut best: Option<(f64, StageModel, ResourceVector)> = None;
        let moves = [
            next_divisor(s.reduce_size, s.p_in).map(|v| StageModel {
                p_in: v,
                ..s.clone()
            }),
            next_divisor(s.expand_size, s.p_out).map(|v| StageModel {
                p_out: v,
                ..s.clone()
            }),
        ];
        for cand in moves.into_iter().flatten() {
            let after = cand.resources(&p).scaled(count);
            let next = total - before + after;
            if !next.fits(&budget) {
                continue;
            }
            let gain = (worst - cand.cycles()) as f64;
            let cost = (after - before).cost(&budget);
            let score = if cost > 0.0 {
                gain / cost
            } else {
                f64::INFINITY
            };
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, cand, next));
            }
        }
        let Some((_, cand, next)) = best else {
            break;
        };
        cycles[bi] = cand.cycles();
        d.layers[unit.0].stages[unit.1] = cand;
        total = next;
    }
    rebalance(d);
    debug_assert!(d.resources().fits(&budget));
    Ok(())
}

struct UnrollOption {
    p_in: usize,
    p_out: usize,
    cycles: u64,
    res: ResourceVector,
    cost: f64,
}

/// Cheapest option per unit whose cycles stay within `target`.
fn cheapest_within(options: &[Vec<UnrollOption>], target: u64) -> Option<Vec<usize>> {
    options
        .iter()
        .map(|opts| {
            opts.iter()
                .enumerate()
                .filter(|(_, o)| o.cycles <= target)
                .min_by(|a, b| {
                    a.1.cost
                        .total_cmp(&b.1.cost)
                        .then((a.1.p_in, a.1.p_out).cmp(&(b.1.p_in, b.1.p_out)))
                })
                .map(|(i, _)| i)
        })
        .collect()
}

/// Lowers the initiation interval past where the greedy phase stopped by
/// re-choosing every stage's unroll as the cheapest one meeting a common
/// cycle target, searching the lowest feasible target.
fn rebalance(d: &mut PipelineDesign) {
    let p = d.platform.clone();
    let units = d.units();
    let fifo = d
        .fifos
        .iter()
        .fold(ResourceVector::default(), |acc, f| acc + f.resources(&p));
    let options: Vec<Vec<UnrollOption>> = units
        .iter()
        .map(|&u| {
            let s = d.stage(u);
            let n = d.layers[u.0].count() as u64;
            let mut v = Vec::new();
            for pi in divisors(s.reduce_size) {
                for po in divisors(s.expand_size) {
                    let t = StageModel {
                        p_in: pi,
                        p_out: po,
                        ..s.clone()
                    };
                    let res = t.resources(&p).scaled(n);
                    v.push(UnrollOption {
                        p_in: pi,
                        p_out: po,
                        cycles: t.cycles(),
                        cost: res.cost(&p.budget),
                        res,
                    });
                }
            }
            v
        })
        .collect();
    let current = d.ii();
    let mut targets: Vec<u64> = options
        .iter()
        .flatten()
        .map(|o| o.cycles)
        .filter(|&c| c < current)
        .collect();
    targets.sort_unstable();
    targets.dedup();
    let feasible = |t: u64| {
        cheapest_within(&options, t).filter(|pick| {
            let total = pick
                .iter()
                .zip(&options)
                .fold(fifo, |acc, (&i, o)| acc + o[i].res);
            total.fits(&p.budget)
        })
    };
    // Feasibility is monotone in the target, so bisect for the smallest one.
    let (mut lo, mut hi) = (0, targets.len());
    let mut best = None;
    while lo < hi {
        let mid = (lo + hi) / 2;
        match feasible(targets[mid]) {
            Some(pick) => {
                best = Some(pick);
                hi = mid;
            }
            None => lo = mid + 1,
        }
    }
    if let Some(pick) = best {
        for ((&u, &i), opts) in units.iter().zip(&pick).zip(&options) {
            let s = &mut d.layers[u.0].stages[u.1];
            s.p_in = opts[i].p_in;
            s.p_out = opts[i].p_out;
        }
    }
}
