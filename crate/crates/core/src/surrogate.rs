//! Throughput surrogate: features of a decomposition choice and a CART random
//! forest regressing log-FPS on them, plus a MAC-count baseline.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{param_count, LayerTDConfig, TdFormat};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::rng::{mix_seed, stream};

pub const LAYER_FEATURES: [&str; 6] = ["t", "g1", "g2", "r", "macs", "words"];
pub const GLOBAL_FEATURES: [&str; 4] =
    ["total_macs", "total_words", "max_layer_macs", "cpd_layers"];

pub type FeatureVector = Vec<f64>;

/// Column names matching [`extract_features`] for `net`.
pub fn feature_names(net: &NetworkSpec) -> Vec<String> {
    let mut names = Vec::new();
    for &i in &net.decomposable() {
        for f in LAYER_FEATURES {
            names.push(format!("{}.{f}", net.layers[i].id));
        }
    }
    names.extend(GLOBAL_FEATURES.iter().map(|s| s.to_string()));
    names
}

/// `genes[j]` is the config of the `j`-th decomposable layer.
pub fn extract_features(net: &NetworkSpec, genes: &[LayerTDConfig]) -> FeatureVector {
    extract_features_at(net, &net.decomposable(), genes)
}

/// [`extract_features`] with the decomposable layer indices precomputed.
pub fn extract_features_at(
    net: &NetworkSpec,
    layers: &[usize],
    genes: &[LayerTDConfig],
) -> FeatureVector {
    debug_assert_eq!(layers.len(), genes.len());
    let mut x = Vec::with_capacity(layers.len() * LAYER_FEATURES.len() + GLOBAL_FEATURES.len());
    let (mut total_macs, mut total_words, mut max_macs, mut cpd) = (0.0, 0.0, 0.0f64, 0.0);
    for (&i, cfg) in layers.iter().zip(genes) {
        let l = &net.layers[i];
        let macs = l.macs(Some(cfg)) as f64;
        let words = param_count(cfg, l.weight_shape()) as f64;
        x.extend_from_slice(&[
            f64::from(cfg.format.code()),
            cfg.g1 as f64,
            cfg.g2 as f64,
            cfg.rank as f64,
            macs,
            words,
        ]);
        total_macs += macs;
        total_words += words;
        max_macs = max_macs.max(macs);
        if cfg.format == TdFormat::Cpd {
            cpd += 1.0;
        }
    }
    x.extend_from_slice(&[total_macs, total_words, max_macs, cpd]);
    x
}

/// Index of the total-MAC feature for a network with `layers` decomposable layers.
pub fn total_macs_index(layers: usize) -> usize {
    layers * LAYER_FEATURES.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `usize::MAX` grows trees until leaves are pure or too small to split.
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub feature_fraction: f64,
    pub bootstrap: bool,
    pub seed: u64,
    /// Regress `ln(y)` and exponentiate predictions.
    pub log_target: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 2,
            feature_fraction: 1.0 / 3.0,
            bootstrap: true,
            seed: 0,
            log_target: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
        samples: usize,
    },
}

/// Nodes of one regression tree; the root is `nodes[0]`. Rows with
/// `x[feature] <= threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

/// Serialized form of [`RandomForestModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestRecord {
    pub params: ForestParams,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    pub target_min: f64,
    pub target_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ForestRecord", into = "ForestRecord")]
pub struct RandomForestModel {
    record: ForestRecord,
    flat: FlatForest,
}

impl From<ForestRecord> for RandomForestModel {
    fn from(record: ForestRecord) -> Self {
        let flat = flatten(&record.trees);
        Self { record, flat }
    }
}

impl From<RandomForestModel> for ForestRecord {
    fn from(m: RandomForestModel) -> Self {
        m.record
    }
}

/// Branch-free node: a walk picks `child[(x[feature] > threshold) as usize]`.
/// Leaves point to themselves with an infinite threshold, so every walk can run
/// for the full tree depth.
#[derive(Clone, Copy, Debug, PartialEq)]
struct FlatNode {
    threshold: f64,
    feature: u32,
    child: [u32; 2],
}

#[derive(Clone, Debug, Default, PartialEq)]
struct FlatForest {
    roots: Vec<(u32, usize)>,
    nodes: Vec<FlatNode>,
    values: Vec<f64>,
}

fn flatten(trees: &[Tree]) -> FlatForest {
    let mut f = FlatForest::default();
    for t in trees {
        let base = f.nodes.len() as u32;
        for (i, n) in t.nodes.iter().enumerate() {
            let (node, value) = match *n {
                Node::Leaf { value, .. } => (
                    FlatNode {
                        threshold: f64::INFINITY,
                        feature: 0,
                        child: [base + i as u32; 2],
                    },
                    value,
                ),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => (
                    FlatNode {
                        threshold,
                        feature: feature as u32,
                        child: [base + left as u32, base + right as u32],
                    },
                    0.0,
                ),
            };
            f.nodes.push(node);
            f.values.push(value);
        }
        f.roots.push((base, t.depth()));
    }
    f
}

struct Builder<'a> {
    x: &'a [FeatureVector],
    y: &'a [f64],
    active: &'a [usize],
    params: &'a ForestParams,
    mtry: usize,
}

impl Builder<'_> {
    fn grow<R: Rng>(
        &self,
        rows: &mut [usize],
        depth: usize,
        nodes: &mut Vec<Node>,
        rng: &mut R,
    ) -> usize {
        let id = nodes.len();
        let n = rows.len();
        let mean = rows.iter().map(|&r| self.y[r]).sum::<f64>() / n as f64;
        nodes.push(Node::Leaf {
            value: mean,
            samples: n,
        });
        if depth >= self.params.max_depth || n < 2 * self.params.min_samples_leaf {
            return id;
        }
        let sse: f64 = rows.iter().map(|&r| (self.y[r] - mean).powi(2)).sum();
        if sse <= 1e-24 {
            return id;
        }
        let mut features = self.active.to_vec();
        features.partial_shuffle(rng, self.mtry);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for &f in &features[..self.mtry] {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut ls, mut lq) = (0.0, 0.0);
            let (ts, tq): (f64, f64) = order.iter().fold((0.0, 0.0), |(s, q), &r| {
                (s + self.y[r], q + self.y[r] * self.y[r])
            });
            for i in 0..n - 1 {
                let v = self.y[order[i]];
                ls += v;
                lq += v * v;
                let nl = i + 1;
                let nr = n - nl;
                if nl < self.params.min_samples_leaf || nr < self.params.min_samples_leaf {
                    continue;
                }
                let (a, b) = (self.x[order[i]][f], self.x[order[i + 1]][f]);
                if a == b {
                    continue;
                }
                let rs = ts - ls;
                let rq = tq - lq;
                let child = (lq - ls * ls / nl as f64) + (rq - rs * rs / nr as f64);
                if best.is_none_or(|(s, _, _)| child < s - 1e-12 * sse.max(1.0)) {
                    best = Some((child, f, a + (b - a) / 2.0));
                }
            }
        }
        let Some((child, feature, threshold)) = best else {
            return id;
        };
        if child >= sse {
            return id;
        }
        let split = itertools_partition(rows, |&r| self.x[r][feature] <= threshold);
        let (l, r) = rows.split_at_mut(split);
        let left = self.grow(l, depth + 1, nodes, rng);
        let right = self.grow(r, depth + 1, nodes, rng);
        nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

/// Stable in-place partition; returns the number of rows satisfying `pred`.
fn itertools_partition(rows: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = rows.iter().partition(|r| pred(r));
    let k = yes.len();
    rows[..k].copy_from_slice(&yes);
    rows[k..].copy_from_slice(&no);
    k
}

impl RandomForestModel {
    pub fn fit(x: &[FeatureVector], y: &[f64], params: &ForestParams) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Training(format!(
                "{} feature rows for {} targets",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 * params.min_samples_leaf.max(1) {
            return Err(Error::Training(format!(
                "{} rows cannot support leaves of {}",
                x.len(),
                params.min_samples_leaf
            )));
        }
        if params.n_trees == 0
            || params.min_samples_leaf == 0
            || params.feature_fraction.is_nan()
            || params.feature_fraction <= 0.0
        {
            return Err(Error::Training(
                "forest needs trees, leaves and features".into(),
            ));
        }
        let n_features = x[0].len();
        if x.iter()
            .any(|r| r.len() != n_features || r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Training(
                "feature rows must be finite and equally long".into(),
            ));
        }
        if y.iter()
            .any(|v| !v.is_finite() || (params.log_target && *v <= 0.0))
        {
            return Err(Error::Training(
                "targets must be finite (and positive for log regression)".into(),
            ));
        }
        let target: Vec<f64> = if params.log_target {
            y.iter().map(|v| v.ln()).collect()
        } else {
            y.to_vec()
        };
        let active: Vec<usize> = (0..n_features)
            .filter(|&f| x.iter().any(|r| r[f] != x[0][f]))
            .collect();
        let mtry = ((params.feature_fraction * active.len() as f64).ceil() as usize)
            .clamp(1, active.len().max(1));
        let builder = Builder {
            x,
            y: &target,
            active: &active,
            params,
            mtry,
        };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream(&[params.seed, 0x7472_6565, t as u64]);
                let mut rows: Vec<usize> = if params.bootstrap {
                    (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                let mut nodes = Vec::new();
                if active.is_empty() {
                    let mean = rows.iter().map(|&r| target[r]).sum::<f64>() / rows.len() as f64;
                    nodes.push(Node::Leaf {
                        value: mean,
                        samples: rows.len(),
                    });
                } else {
                    builder.grow(&mut rows, 0, &mut nodes, &mut rng);
                }
                Tree { nodes }
            })
            .collect();
        Ok(ForestRecord {
            params: *params,
            n_features,
            trees,
            target_min: y.iter().copied().fold(f64::INFINITY, f64::min),
            target_max: y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
        .into())
    }

    pub fn record(&self) -> &ForestRecord {
        &self.record
    }

    pub fn trees(&self) -> &[Tree] {
        &self.record.trees
    }

    pub fn n_features(&self) -> usize {
        self.record.n_features
    }

    /// `[min, max]` of the training targets; predictions are clamped to it.
    pub fn target_range(&self) -> (f64, f64) {
        (self.record.target_min, self.record.target_max)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(std::slice::from_ref(&x))?[0])
    }

    /// Predictions for many rows; walks each tree over all rows before moving
    /// on, which keeps the tree cache-resident.
    pub fn predict_batch<X: AsRef<[f64]>>(&self, rows: &[X]) -> Result<Vec<f64>> {
        let r = &self.record;
        if let Some(x) = rows.iter().find(|x| x.as_ref().len() != r.n_features) {
            return Err(Error::shape(format!(
                "expected {} features, got {}",
                r.n_features,
                x.as_ref().len()
            )));
        }
        let flat = &self.flat;
        const LANES: usize = 8;
        let mut sums = vec![0.0; rows.len()];
        let full = rows.len() / LANES * LANES;
        for (x, sum) in rows[full..].iter().zip(&mut sums[full..]) {
            let x = x.as_ref();
            for &(root, depth) in &flat.roots {
                let mut i = root as usize;
                for _ in 0..depth {
                    let n = &flat.nodes[i];
                    i = n.child[(x[n.feature as usize] > n.threshold) as usize] as usize;
                }
                *sum += flat.values[i];
            }
        }
        for (rows, sums) in rows[..full]
            .chunks(LANES)
            .zip(sums[..full].chunks_mut(LANES))
        {
            let mut xs: [&[f64]; LANES] = [rows[0].as_ref(); LANES];
            for (slot, x) in xs.iter_mut().zip(rows) {
                *slot = x.as_ref();
            }
            for &(root, depth) in &flat.roots {
                let mut at = [root as usize; LANES];
                for _ in 0..depth {
                    for (i, x) in at.iter_mut().zip(&xs) {
                        let n = &flat.nodes[*i];
                        *i = n.child[(x[n.feature as usize] > n.threshold) as usize] as usize;
                    }
                }
                for (sum, i) in sums.iter_mut().zip(&at) {
                    *sum += flat.values[*i];
                }
            }
        }
        let trees = flat.roots.len() as f64;
        Ok(sums
            .into_iter()
            .map(|s| {
                let mean = s / trees;
                let v = if r.params.log_target {
                    mean.exp()
                } else {
                    mean
                };
                v.clamp(r.target_min, r.target_max)
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

/// Throughput estimate proportional to `1 / total MACs`, scaled so that it
/// matches the calibration points in geometric mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacBaseline {
    pub kappa: f64,
    pub macs_feature: usize,
}

impl MacBaseline {
    pub fn fit(x: &[FeatureVector], y: &[f64], macs_feature: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Training(
                "MAC baseline needs calibration points".into(),
            ));
        }
        let log_k = x
            .iter()
            .zip(y)
            .map(|(r, &f)| (f * r[macs_feature]).ln())
            .sum::<f64>()
            / x.len() as f64;
        if !log_k.is_finite() {
            return Err(Error::Training(
                "calibration points must have positive FPS and MACs".into(),
            ));
        }
        Ok(Self {
            kappa: log_k.exp(),
            macs_feature,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.kappa / x[self.macs_feature]
    }
}

/// Labelled `(features, fps)` rows with named columns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub x: Vec<FeatureVector>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            ..Self::default()
        }
    }

    pub fn push(&mut self, x: FeatureVector, y: f64) {
        self.x.push(x);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            x: rows.iter().map(|&r| self.x[r].clone()).collect(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    /// Header of feature names then `fps`; one row per sample.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = self.names.clone();
        header.push("fps".into());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (x, y) in self.x.iter().zip(&self.y) {
            let row: Vec<String> = x
                .iter()
                .chain(std::iter::once(y))
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().next_back() != Some("fps") {
            return Err(Error::Parse {
                line: 1,
                message: "last column must be `fps`".into(),
            });
        }
        let mut d = Dataset::new(
            header
                .iter()
                .take(header.len() - 1)
                .map(String::from)
                .collect(),
        );
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let vals: std::result::Result<Vec<f64>, _> =
                rec.iter().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            if vals.len() != header.len() {
                return Err(Error::Parse {
                    line: i + 2,
                    message: format!("{} fields, expected {}", vals.len(), header.len()),
                });
            }
            let (x, y) = vals.split_at(vals.len() - 1);
            d.push(x.to_vec(), y[0]);
        }
        Ok(d)
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match (e.into_kind(), line) {
        (csv::ErrorKind::Io(io), _) => Error::io(path, io),
        (kind, line) => Error::Parse {
            line: line.unwrap_or(0),
            message: format!("{}: {kind:?}", path.display()),
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub mae: f64,
    pub median_relative_error: f64,
    pub r2: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Deterministic `(train, test)` row split with `test_fraction` of rows held out.
pub fn holdout_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut stream(&[seed, 0x686f_6c64]));
    let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let (t, tr) = rows.split_at(test);
    let (mut train, mut test) = (tr.to_vec(), t.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Linear-space error metrics of `pred` against `truth`.
pub fn score(pred: &[f64], truth: &[f64]) -> HoldoutReport {
    let n = truth.len() as f64;
    let mae = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let mut rel: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| ((p - t) / t).abs())
        .collect();
    rel.sort_by(f64::total_cmp);
    let median = if rel.is_empty() {
        f64::NAN
    } else if rel.len() % 2 == 1 {
        rel[rel.len() / 2]
    } else {
        (rel[rel.len() / 2 - 1] + rel[rel.len() / 2]) / 2.0
    };
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    HoldoutReport {
        mae,
        median_relative_error: median,
        r2,
        train_rows: 0,
        test_rows: truth.len(),
    }
}

pub const MIN_HOLDOUT_ROWS: usize = 20;

/// Fits a forest on the training part of a deterministic split and scores it
/// on the rest.
pub fn holdout_report(
    data: &Dataset,
    params: &ForestParams,
    test_fraction: f64,
    seed: u64,
) -> Result<HoldoutReport> {
    if data.len() < MIN_HOLDOUT_ROWS {
        return Err(Error::Training(format!(
            "{} rows; at least {MIN_HOLDOUT_ROWS} are needed for a holdout check",
            data.len()
        )));
    }
    let (train, test) = holdout_split(data.len(), test_fraction, seed);
    let tr = data.subset(&train);
    let model = RandomForestModel::fit(
        &tr.x,
        &tr.y,
        &ForestParams {
            seed: mix_seed(&[params.seed, seed]),
            ..*params
        },
    )?;
    let pred: Vec<f64> = test
        .iter()
        .map(|&r| model.predict(&data.x[r]))
        .collect::<Result<_>>()?;
    let truth: Vec<f64> = test.iter().map(|&r| data.y[r]).collect();
    Ok(HoldoutReport {
        train_rows: train.len(),
        ..score(&pred, &truth)
    })
}
