//! Constrained evolutionary search over per-layer decomposition choices.
//!
//! A population of valid designs is refined by mutation and uniform crossover;
//! a design is valid when its throughput meets the target (and, under exact
//! evaluation, the allocator fits it into the budget). Survivors are the most
//! accurate designs under the accuracy proxy.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::time::Instant;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accel::{allocate_unrolling, Platform, ResourceVector};
use crate::decompose::{AlsSettings, LayerTDConfig, TdFormat};
use crate::error::{Error, Result};
use crate::network::{AccuracyProxy, NetworkSpec, ProbeSet, TdMap};
use crate::rng::{mix_iter, stream};
use crate::surrogate::{
    extract_features_at, feature_names, holdout_report, total_macs_index, Dataset, ForestParams,
    MacBaseline, RandomForestModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatMode {
    SvdOnly,
    CpdOnly,
    Mixed,
}

impl FormatMode {
    pub fn formats(self) -> &'static [TdFormat] {
        match self {
            FormatMode::SvdOnly => &[TdFormat::Svd],
            FormatMode::CpdOnly => &[TdFormat::Cpd],
            FormatMode::Mixed => &[TdFormat::Svd, TdFormat::Cpd],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FormatMode::SvdOnly => "svd-only",
            FormatMode::CpdOnly => "cpd-only",
            FormatMode::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for FormatMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd-only" => Ok(FormatMode::SvdOnly),
            "cpd-only" => Ok(FormatMode::CpdOnly),
            "mixed" => Ok(FormatMode::Mixed),
            _ => Err(Error::config(format!("unknown format mode `{s}`"))),
        }
    }
}

/// How allowed configurations are generated for every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSpec {
    pub mode: FormatMode,
    /// Candidate values for both `g1` and `g2`; those not dividing the channel count are skipped.
    pub groups: Vec<usize>,
    /// Ranks as fractions of the layer's maximum rank, `r = max(1, ⌈f·R⌉)`.
    pub rank_fractions: Vec<f64>,
}

impl Default for ChoiceSpec {
    fn default() -> Self {
        Self {
            mode: FormatMode::Mixed,
            groups: vec![1, 2, 4],
            rank_fractions: vec![1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0],
        }
    }
}

/// Valid configs per decomposable layer, in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceSets {
    pub layers: Vec<usize>,
    pub sets: Vec<Vec<LayerTDConfig>>,
}

impl ChoiceSets {
    pub fn from_spec(net: &NetworkSpec, spec: &ChoiceSpec) -> Result<Self> {
        let layers = net.decomposable();
        let mut sets = Vec::with_capacity(layers.len());
        for &i in &layers {
            let l = &net.layers[i];
            let shape = l.weight_shape();
            let mut set = Vec::new();
            for &format in spec.mode.formats() {
                for &g1 in spec
                    .groups
                    .iter()
                    .filter(|&&g| g > 0 && l.c_out.is_multiple_of(g))
                {
                    for &g2 in spec
                        .groups
                        .iter()
                        .filter(|&&g| g > 0 && l.c_in.is_multiple_of(g))
                    {
                        let max = LayerTDConfig::max_rank(format, g1, g2, shape);
                        for &f in &spec.rank_fractions {
                            let rank = ((f * max as f64).ceil() as usize).clamp(1, max);
                            set.push(LayerTDConfig {
                                format,
                                g1,
                                g2,
                                rank,
                            });
                        }
                    }
                }
            }
            set.sort();
            set.dedup();
            sets.push(set);
        }
        Self::new(net, layers, sets)
    }

    /// Explicit per-layer sets; every entry must be valid for its layer.
    pub fn new(
        net: &NetworkSpec,
        layers: Vec<usize>,
        sets: Vec<Vec<LayerTDConfig>>,
    ) -> Result<Self> {
        if layers != net.decomposable() || sets.len() != layers.len() {
            return Err(Error::config(
                "choice sets must cover every decomposable layer in order",
            ));
        }
        for (&i, set) in layers.iter().zip(&sets) {
            let l = &net.layers[i];
            if set.is_empty() {
                return Err(Error::config(format!(
                    "layer `{}` has no valid configuration",
                    l.id
                )));
            }
            for c in set {
                c.validate(l.weight_shape())
                    .map_err(|e| Error::config(format!("layer `{}`: {e}", l.id)))?;
            }
        }
        Ok(Self { layers, sets })
    }

    /// Number of distinct designs.
    pub fn size(&self) -> BigUint {
        self.sets
            .iter()
            .fold(BigUint::from(1u32), |acc, s| acc * BigUint::from(s.len()))
    }
}

/// `Π_layers Σ_(t, g1, g2) |valid ranks|` under `spec`.
pub fn design_space_size(net: &NetworkSpec, spec: &ChoiceSpec) -> Result<BigUint> {
    Ok(ChoiceSets::from_spec(net, spec)?.size())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThroughputSource {
    Exact,
    Surrogate,
    MacBaseline,
}

impl ThroughputSource {
    pub fn name(self) -> &'static str {
        match self {
            ThroughputSource::Exact => "exact",
            ThroughputSource::Surrogate => "surrogate",
            ThroughputSource::MacBaseline => "mac-baseline",
        }
    }
}

impl std::str::FromStr for ThroughputSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ThroughputSource::Exact),
            "surrogate" => Ok(ThroughputSource::Surrogate),
            "mac-baseline" => Ok(ThroughputSource::MacBaseline),
            _ => Err(Error::config(format!("unknown evaluator `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fps: f64,
    /// Present for exact evaluations that fit the budget.
    pub resources: Option<ResourceVector>,
    /// Skipped for designs that already failed the throughput check.
    pub accuracy: Option<f64>,
    pub source: ThroughputSource,
    pub valid: bool,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    /// Config of every decomposable layer, in network order.
    pub genes: Vec<LayerTDConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached: Option<Evaluation>,
}

impl DesignPoint {
    pub fn new(genes: Vec<LayerTDConfig>) -> Self {
        Self {
            genes,
            cached: None,
        }
    }

    pub fn td(&self, net: &NetworkSpec) -> TdMap {
        net.decomposable()
            .iter()
            .zip(&self.genes)
            .map(|(&i, c)| (net.layers[i].id.clone(), *c))
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        self.cached
            .as_ref()
            .and_then(|c| c.accuracy)
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn fps(&self) -> f64 {
        self.cached.as_ref().map_or(0.0, |c| c.fps)
    }

    pub fn params(&self) -> u64 {
        self.cached.as_ref().map_or(u64::MAX, |c| c.params)
    }

    /// Stable 64-bit digest of the genes.
    pub fn fingerprint(&self) -> u64 {
        mix_iter(self.genes.iter().map(|g| {
            u64::from(g.format.code())
                | (g.g1 as u64 & 0xffff) << 8
                | (g.g2 as u64 & 0xffff) << 24
                | (g.rank as u64 & 0xff_ffff) << 40
        }))
    }

    /// [`fingerprint`](Self::fingerprint) as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", self.fingerprint())
    }
}

pub fn random_design<R: Rng + ?Sized>(choices: &ChoiceSets, rng: &mut R) -> DesignPoint {
    DesignPoint::new(
        choices
            .sets
            .iter()
            .map(|s| s[rng.gen_range(0..s.len())])
            .collect(),
    )
}

/// Resamples each gene with probability `rate`; if nothing changed, one
/// mutable gene is forced to a different value.
pub fn mutate<R: Rng + ?Sized>(
    d: &DesignPoint,
    choices: &ChoiceSets,
    rate: f64,
    rng: &mut R,
) -> DesignPoint {
    let mut genes = d.genes.clone();
    for (g, set) in genes.iter_mut().zip(&choices.sets) {
        if rng.gen_bool(rate.clamp(0.0, 1.0)) {
            *g = set[rng.gen_range(0..set.len())];
        }
    }
    if genes == d.genes {
        let mutable: Vec<usize> = (0..genes.len())
            .filter(|&i| choices.sets[i].len() > 1)
            .collect();
        if let Some(&i) = mutable.choose(rng) {
            let others: Vec<&LayerTDConfig> =
                choices.sets[i].iter().filter(|c| **c != genes[i]).collect();
            genes[i] = **others.choose(rng).expect("at least one alternative");
        }
    }
    DesignPoint::new(genes)
}

/// Uniform crossover.
pub fn crossover<R: Rng + ?Sized>(a: &DesignPoint, b: &DesignPoint, rng: &mut R) -> DesignPoint {
    DesignPoint::new(
        a.genes
            .iter()
            .zip(&b.genes)
            .map(|(x, y)| if rng.gen_bool(0.5) { *x } else { *y })
            .collect(),
    )
}

/// A throughput predictor active during part of a search.
#[derive(Clone, Debug)]
pub enum Evaluator {
    Exact,
    Surrogate(RandomForestModel),
    MacBaseline(MacBaseline),
}

impl Evaluator {
    pub fn source(&self) -> ThroughputSource {
        match self {
            Evaluator::Exact => ThroughputSource::Exact,
            Evaluator::Surrogate(_) => ThroughputSource::Surrogate,
            Evaluator::MacBaseline(_) => ThroughputSource::MacBaseline,
        }
    }
}

/// Shared, immutable inputs of every evaluation plus the layer-error cache.
pub struct SearchContext<'a> {
    pub net: &'a NetworkSpec,
    pub platform: Platform,
    pub batch: usize,
    layers: Vec<usize>,
    proxy: AccuracyProxy<'a>,
}

impl<'a> SearchContext<'a> {
    pub fn new(
        net: &'a NetworkSpec,
        probe: &'a ProbeSet,
        platform: Platform,
        batch: usize,
        als: AlsSettings,
    ) -> Result<Self> {
        platform.validate()?;
        Ok(Self {
            net,
            platform,
            batch: batch.max(1),
            layers: net.decomposable(),
            proxy: AccuracyProxy::new(net, probe, als)?,
        })
    }

    /// Allocator throughput at the configured batch, or `None` when even the
    /// minimal design exceeds the budget.
    pub fn exact_throughput(&self, d: &DesignPoint) -> Result<Option<(f64, ResourceVector)>> {
        match allocate_unrolling(self.net, Some(&d.td(self.net)), &self.platform) {
            Ok(p) => Ok(Some((p.fps(self.batch), p.resources()))),
            Err(Error::Budget(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn accuracy(&self, d: &DesignPoint) -> Result<f64> {
        let assigned: Vec<(usize, LayerTDConfig)> = self
            .layers
            .iter()
            .copied()
            .zip(d.genes.iter().copied())
            .collect();
        self.proxy.evaluate_layers(&assigned)
    }

    pub fn features(&self, d: &DesignPoint) -> Vec<f64> {
        extract_features_at(self.net, &self.layers, &d.genes)
    }

    pub fn params(&self, d: &DesignPoint) -> u64 {
        self.layers
            .iter()
            .zip(&d.genes)
            .map(|(&i, c)| self.net.layers[i].params(Some(c)) as u64)
            .sum()
    }
}

/// Fills `d.cached` and reports whether `d` meets `fps_target` (and, under
/// exact evaluation, the resource budget). Accuracy is only computed for
/// designs that pass.
pub fn validate(
    ctx: &SearchContext,
    d: &mut DesignPoint,
    evaluator: &Evaluator,
    fps_target: f64,
) -> Result<bool> {
    validate_batch(ctx, std::slice::from_mut(d), evaluator, fps_target).remove(0)
}

/// [`validate`] over many designs; exact evaluations run in parallel and
/// surrogate predictions are batched.
pub fn validate_batch(
    ctx: &SearchContext,
    designs: &mut [DesignPoint],
    evaluator: &Evaluator,
    fps_target: f64,
) -> Vec<Result<bool>> {
    let parallel = rayon::current_num_threads() > 1 && designs.len() > 1;
    let throughput: Vec<Result<(f64, Option<ResourceVector>)>> = match evaluator {
        Evaluator::Exact => {
            let eval = |d: &DesignPoint| {
                Ok(ctx
                    .exact_throughput(d)?
                    .map_or((0.0, None), |(f, r)| (f, Some(r))))
            };
            if parallel {
                designs.par_iter().map(eval).collect()
            } else {
                designs.iter().map(eval).collect()
            }
        }
        Evaluator::Surrogate(m) => {
            let features: Vec<Vec<f64>> = designs.iter().map(|d| ctx.features(d)).collect();
            match m.predict_batch(&features) {
                Ok(fps) => fps.into_iter().map(|f| Ok((f, None))).collect(),
                Err(e) => designs
                    .iter()
                    .map(|_| Err(Error::shape(e.to_string())))
                    .collect(),
            }
        }
        Evaluator::MacBaseline(b) => designs
            .iter()
            .map(|d| Ok((b.predict(&ctx.features(d)), None)))
            .collect(),
    };
    let exact = matches!(evaluator, Evaluator::Exact);
    let finish = |(d, t): (&mut DesignPoint, Result<(f64, Option<ResourceVector>)>)| {
        d.cached = None;
        let (fps, resources) = t?;
        let valid = (!exact || resources.is_some()) && fps >= fps_target;
        let accuracy = if valid { Some(ctx.accuracy(d)?) } else { None };
        d.cached = Some(Evaluation {
            fps,
            resources,
            accuracy,
            source: evaluator.source(),
            valid,
            params: ctx.params(d),
        });
        Ok(valid)
    };
    if parallel {
        designs.par_iter_mut().zip(throughput).map(finish).collect()
    } else {
        designs.iter_mut().zip(throughput).map(finish).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub children: usize,
    pub max_steps: usize,
    pub mutation_rate: f64,
    pub fps_target: f64,
    pub seed: u64,
    /// Steps run with the exact evaluator before handing off to the predictor.
    pub surrogate_start_step: usize,
    /// Maximum number of exact labels kept for predictor training.
    pub exact_eval_budget: usize,
    /// Rejection-sampling attempts allowed per needed sample.
    pub attempt_cap: usize,
    pub evaluator: ThroughputSource,
    /// Holdout median relative error the surrogate must reach before handoff.
    pub surrogate_gate: f64,
    pub forest: ForestParams,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 32,
            children: 32,
            max_steps: 20,
            mutation_rate: 0.1,
            fps_target: 0.0,
            seed: 0,
            surrogate_start_step: 3,
            exact_eval_budget: 2000,
            attempt_cap: 1000,
            evaluator: ThroughputSource::Exact,
            surrogate_gate: 0.2,
            forest: ForestParams::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.children == 0 || !self.children.is_multiple_of(2) {
            return Err(Error::config(
                "population must be positive and children a positive even number",
            ));
        }
        if !(self.mutation_rate > 0.0 && self.mutation_rate <= 1.0) {
            return Err(Error::config("mutation rate must lie in (0, 1]"));
        }
        if self.attempt_cap == 0 {
            return Err(Error::config("attempt cap must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Random,
    Mutation,
    Crossover,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Random => "random",
            Origin::Mutation => "mutation",
            Origin::Crossover => "crossover",
        }
    }
}

/// One validated candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub candidate: u64,
    pub origin: Origin,
    /// Gene fingerprint, see [`DesignPoint::fingerprint`].
    pub hash: u64,
    pub accuracy: Option<f64>,
    pub fps: f64,
    pub source: ThroughputSource,
    pub valid: bool,
}

/// Summary after each generation; step 0 is the initial population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub evaluator: ThroughputSource,
    pub best_accuracy: f64,
    pub median_accuracy: f64,
    pub evaluated: usize,
    pub accepted: usize,
    /// Elapsed time since the search started, at the end of this step.
    pub wall_seconds: f64,
    /// Part of this step spent fitting (and gating) the predictor.
    pub train_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    /// Final population, best first.
    pub population: Vec<DesignPoint>,
    pub log: Vec<LogRow>,
    pub steps: Vec<StepRow>,
    pub dataset: Dataset,
    pub model: Option<RandomForestModel>,
    pub handoff_step: Option<usize>,
}

/// A design with its candidate id and fingerprint.
#[derive(Clone, Debug)]
struct Member {
    id: u64,
    fingerprint: u64,
    design: DesignPoint,
}

impl Member {
    fn same(&self, fingerprint: u64, d: &DesignPoint) -> bool {
        self.fingerprint == fingerprint && self.design.genes == d.genes
    }
}

fn rank_order(a: &Member, b: &Member) -> Ordering {
    let (x, y) = (&a.design, &b.design);
    y.accuracy()
        .total_cmp(&x.accuracy())
        .then(y.fps().total_cmp(&x.fps()))
        .then(x.params().cmp(&y.params()))
        .then(a.id.cmp(&b.id))
}

struct Run<'c, 'a> {
    ctx: &'c SearchContext<'a>,
    cfg: &'c SearchConfig,
    rng: ChaCha8Rng,
    next_id: u64,
    log: Vec<LogRow>,
    dataset: Dataset,
}

impl Run<'_, '_> {
    /// Draws candidates in fixed-size batches from the master stream, validates
    /// each batch in parallel and accepts valid ones in generation order, so the
    /// outcome does not depend on the worker count.
    fn collect(
        &mut self,
        step: usize,
        need: usize,
        origin: Origin,
        evaluator: &Evaluator,
        exclude: &[&Member],
        mut make: impl FnMut(&mut ChaCha8Rng) -> DesignPoint,
    ) -> Result<(Vec<Member>, usize)> {
        let mut accepted: Vec<Member> = Vec::new();
        let mut attempts = 0;
        let cap = self.cfg.attempt_cap * need.max(1);
        while accepted.len() < need && attempts < cap {
            let batch = (need - accepted.len()).min(cap - attempts);
            let mut keys: Vec<(u64, u64)> = Vec::with_capacity(batch);
            let mut designs: Vec<DesignPoint> = Vec::with_capacity(batch);
            for _ in 0..batch {
                let d = make(&mut self.rng);
                let id = self.next_id;
                self.next_id += 1;
                let fp = d.fingerprint();
                let seen = exclude.iter().any(|m| m.same(fp, &d))
                    || accepted.iter().any(|m| m.same(fp, &d))
                    || keys
                        .iter()
                        .zip(&designs)
                        .any(|(k, c)| k.1 == fp && c.genes == d.genes);
                if !seen {
                    keys.push((id, fp));
                    designs.push(d);
                }
            }
            attempts += batch;
            let results = validate_batch(self.ctx, &mut designs, evaluator, self.cfg.fps_target);
            for (((id, fingerprint), design), ok) in keys.into_iter().zip(designs).zip(results) {
                let ok = ok.unwrap_or(false);
                let (accuracy, fps) = design
                    .cached
                    .as_ref()
                    .map_or((None, 0.0), |c| (c.accuracy, c.fps));
                if evaluator.source() == ThroughputSource::Exact
                    && fps > 0.0
                    && self.dataset.len() < self.cfg.exact_eval_budget
                {
                    self.dataset.push(self.ctx.features(&design), fps);
                }
                self.log.push(LogRow {
                    step,
                    candidate: id,
                    origin,
                    hash: fingerprint,
                    accuracy,
                    fps,
                    source: evaluator.source(),
                    valid: ok,
                });
                if ok && accepted.len() < need {
                    accepted.push(Member {
                        id,
                        fingerprint,
                        design,
                    });
                }
            }
        }
        Ok((accepted, attempts))
    }

    fn handoff(&self) -> Option<Evaluator> {
        let n = self.ctx.layers.len();
        match self.cfg.evaluator {
            ThroughputSource::Exact => None,
            ThroughputSource::MacBaseline => {
                MacBaseline::fit(&self.dataset.x, &self.dataset.y, total_macs_index(n))
                    .ok()
                    .map(Evaluator::MacBaseline)
            }
            ThroughputSource::Surrogate => {
                let forest = ForestParams {
                    seed: self.cfg.seed,
                    ..self.cfg.forest
                };
                let report = holdout_report(&self.dataset, &forest, 0.2, self.cfg.seed).ok()?;
                if report.median_relative_error > self.cfg.surrogate_gate {
                    return None;
                }
                RandomForestModel::fit(&self.dataset.x, &self.dataset.y, &forest)
                    .ok()
                    .map(Evaluator::Surrogate)
            }
        }
    }
}

fn step_row(
    step: usize,
    evaluator: ThroughputSource,
    pop: &[Member],
    evaluated: usize,
    accepted: usize,
    t0: Instant,
    train_seconds: f64,
) -> StepRow {
    let mut acc: Vec<f64> = pop.iter().map(|m| m.design.accuracy()).collect();
    acc.sort_by(f64::total_cmp);
    let median = if acc.is_empty() {
        f64::NAN
    } else if acc.len() % 2 == 1 {
        acc[acc.len() / 2]
    } else {
        (acc[acc.len() / 2 - 1] + acc[acc.len() / 2]) / 2.0
    };
    StepRow {
        step,
        evaluator,
        best_accuracy: acc.last().copied().unwrap_or(f64::NAN),
        median_accuracy: median,
        evaluated,
        accepted,
        wall_seconds: t0.elapsed().as_secs_f64(),
        train_seconds,
    }
}

/// Runs the evolutionary search. Throughput comes from the exact allocator
/// for the first `surrogate_start_step` steps (collecting training labels)
/// and from the configured predictor afterwards; the final population is
/// re-checked exactly and designs failing that check are dropped.
pub fn search(
    ctx: &SearchContext,
    choices: &ChoiceSets,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut run = Run {
        ctx,
        cfg,
        rng: stream(&[cfg.seed, 0x7365_6172]),
        next_id: 0,
        log: Vec::new(),
        dataset: Dataset::new(feature_names(ctx.net)),
    };
    let mut evaluator = Evaluator::Exact;
    let mut handoff_step = None;
    let mut steps = Vec::new();

    let (init, attempts) =
        run.collect(0, cfg.population, Origin::Random, &evaluator, &[], |rng| {
            random_design(choices, rng)
        })?;
    if init.len() < cfg.population {
        return Err(Error::Infeasible(infeasibility(
            &run.log,
            cfg,
            &ctx.platform,
            init.len(),
            attempts,
        )));
    }
    let mut pop = init;
    pop.sort_by(rank_order);
    let n0 = run.log.len();
    steps.push(step_row(
        0,
        evaluator.source(),
        &pop,
        n0,
        pop.len(),
        t0,
        0.0,
    ));

    for step in 1..=cfg.max_steps {
        let mut train_seconds = 0.0;
        if handoff_step.is_none()
            && cfg.evaluator != ThroughputSource::Exact
            && step > cfg.surrogate_start_step
        {
            let t = Instant::now();
            if let Some(e) = run.handoff() {
                evaluator = e;
                handoff_step = Some(step);
            }
            train_seconds = t.elapsed().as_secs_f64();
        }
        let logged = run.log.len();
        let half = cfg.children / 2;
        let parents: Vec<&Member> = pop.iter().collect();
        let (mutants, _) =
            run.collect(step, half, Origin::Mutation, &evaluator, &parents, |rng| {
                let p = &parents[rng.gen_range(0..parents.len())].design;
                mutate(p, choices, cfg.mutation_rate, rng)
            })?;
        let mut exclude = parents.clone();
        exclude.extend(mutants.iter());
        let (crossed, _) =
            run.collect(step, half, Origin::Crossover, &evaluator, &exclude, |rng| {
                let a = &parents[rng.gen_range(0..parents.len())].design;
                let b = &parents[rng.gen_range(0..parents.len())].design;
                crossover(a, b, rng)
            })?;
        let accepted = mutants.len() + crossed.len();
        pop.extend(mutants);
        pop.extend(crossed);
        pop.sort_by(rank_order);
        pop.truncate(cfg.population);
        steps.push(step_row(
            step,
            evaluator.source(),
            &pop,
            run.log.len() - logged,
            accepted,
            t0,
            train_seconds,
        ));
    }

    let mut population = pop;
    if !matches!(evaluator, Evaluator::Exact) {
        let mut designs: Vec<DesignPoint> = population.iter().map(|m| m.design.clone()).collect();
        let checked = validate_batch(ctx, &mut designs, &Evaluator::Exact, cfg.fps_target);
        let mut kept = Vec::new();
        for ((m, d), ok) in population.into_iter().zip(designs).zip(checked) {
            if ok? {
                kept.push(Member { design: d, ..m });
            }
        }
        kept.sort_by(rank_order);
        population = kept;
    }
    let model = match &evaluator {
        Evaluator::Surrogate(m) => Some(m.clone()),
        _ => None,
    };
    Ok(SearchResult {
        population: population.into_iter().map(|m| m.design).collect(),
        log: run.log,
        steps,
        dataset: run.dataset,
        model,
        handoff_step,
    })
}

fn infeasibility(
    log: &[LogRow],
    cfg: &SearchConfig,
    platform: &Platform,
    found: usize,
    attempts: usize,
) -> String {
    let over_budget = log
        .iter()
        .filter(|r| r.source == ThroughputSource::Exact && r.fps == 0.0)
        .count();
    let best = log.iter().map(|r| r.fps).fold(0.0, f64::max);
    let tightest = if over_budget == log.len() && !log.is_empty() {
        format!(
            "resource budget ({:?}): every sampled design exceeds it",
            platform.budget
        )
    } else {
        format!(
            "fps_target {:.3}: best sampled throughput {best:.3}",
            cfg.fps_target
        )
    };
    format!(
        "found {found} of {} valid designs in {attempts} attempts; tightest constraint is {tightest}",
        cfg.population
    )
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| crate::surrogate::csv_error(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |a| format!("{a:.9}"))
}

/// `step,candidate,origin,hash,accuracy,fps,source,valid`; contains no timing,
/// so identical seeds give identical files.
pub fn write_search_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let e = |e| crate::surrogate::csv_error(path, e);
    w.write_record([
        "step",
        "candidate",
        "origin",
        "hash",
        "accuracy",
        "fps",
        "source",
        "valid",
    ])
    .map_err(e)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.candidate.to_string(),
            r.origin.name().to_string(),
            format!("{:016x}", r.hash),
            fmt_opt(r.accuracy),
            format!("{:.6}", r.fps),
            r.source.name().to_string(),
            r.valid.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const STEP_HEADER: [&str; 9] = [
    "method",
    "step",
    "evaluator",
    "best_accuracy",
    "median_accuracy",
    "evaluated",
    "accepted",
    "wall_seconds",
    "train_seconds",
];

/// Per-step summary including wall time, labelled with `method`.
pub fn write_steps(path: impl AsRef<Path>, method: &str, rows: &[StepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let e = |e| crate::surrogate::csv_error(path, e);
    w.write_record(STEP_HEADER).map_err(e)?;
    for r in rows {
        w.write_record([
            method.to_string(),
            r.step.to_string(),
            r.evaluator.name().to_string(),
            format!("{:.9}", r.best_accuracy),
            format!("{:.9}", r.median_accuracy),
            r.evaluated.to_string(),
            r.accepted.to_string(),
            format!("{:.6}", r.wall_seconds),
            format!("{:.6}", r.train_seconds),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct PopulationEntry<'a> {
    rank: usize,
    hash: String,
    #[serde(flatten)]
    evaluation: &'a Option<Evaluation>,
    td: TdMap,
}

/// Final population as JSON, best first.
pub fn write_population(
    path: impl AsRef<Path>,
    ctx: &SearchContext,
    pop: &[DesignPoint],
) -> Result<()> {
    let path = path.as_ref();
    let entries: Vec<PopulationEntry> = pop
        .iter()
        .enumerate()
        .map(|(i, d)| PopulationEntry {
            rank: i + 1,
            hash: d.hash(),
            evaluation: &d.cached,
            td: d.td(ctx.net),
        })
        .collect();
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
