//! Network descriptions, weight ingestion, reference executors, the accuracy
//! proxy and parameter/MAC counting.
//!
//! Activations are channel-last `(b, m, n, c)`; weights are `(c_out, c_in, k, k)`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rustc_hash::FxHashMap;

use serde::{Deserialize, Serialize};

use crate::decompose::{
    decompose_layer, param_count, relative_error, AlsSettings, DecomposedLayer, LayerTDConfig,
    TdFormat, WeightShape,
};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Activation tensor `(b, m, n, c)`.
pub type FeatureMap = DenseTensor;

/// Per-layer decomposition choices keyed by layer id.
pub type TdMap = BTreeMap<String, LayerTDConfig>;

/// Name under which the network input appears in predecessor lists.
pub const INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Avgpool,
    GlobalAvgpool,
    EltwiseAdd,
    FullyConnected,
}

impl LayerKind {
    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::FullyConnected)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::GlobalAvgpool => "global_avgpool",
            LayerKind::EltwiseAdd => "eltwise_add",
            LayerKind::FullyConnected => "fully_connected",
        }
    }
}

/// One manifest entry as written by an exporter. Shapes not given are derived
/// from the predecessors; `inputs` defaults to the previous layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecl {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
    /// Per-output-channel additive bias.
    #[serde(default, skip_serializing_if = "is_false")]
    pub bias: bool,
    /// Per-output-channel scale and shift (a folded batch norm).
    #[serde(default, skip_serializing_if = "is_false")]
    pub affine: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_blob: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_blob: Option<String>,
    /// `c_out` scales followed by `c_out` shifts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine_blob: Option<String>,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl LayerDecl {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            id: id.into(),
            kind,
            c_in: None,
            c_out: None,
            k: None,
            stride: None,
            padding: None,
            inputs: None,
            bias: false,
            affine: false,
            weights_blob: None,
            bias_blob: None,
            affine_blob: None,
        }
    }

    pub fn conv(
        id: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            c_in: Some(c_in),
            c_out: Some(c_out),
            k: Some(k),
            stride: Some(stride),
            padding: Some(padding),
            ..Self::new(id, LayerKind::Conv)
        }
    }

    pub fn fc(id: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            c_in: Some(c_in),
            c_out: Some(c_out),
            bias: true,
            ..Self::new(id, LayerKind::FullyConnected)
        }
    }

    pub fn pool(
        id: impl Into<String>,
        kind: LayerKind,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            k: Some(k),
            stride: Some(stride),
            padding: Some(padding),
            ..Self::new(id, kind)
        }
    }

    pub fn with_inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = Some(inputs.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn with_affine(mut self) -> Self {
        self.affine = true;
        self
    }
}

/// A resolved layer with every shape known.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// Input spatial size `(m, n)`.
    pub input_size: (usize, usize),
    /// Indices of predecessor layers; empty for a layer fed by the network input.
    pub preds: Vec<usize>,
    pub bias: bool,
    pub affine: bool,
}

impl LayerSpec {
    pub fn output_size(&self) -> (usize, usize) {
        let (m, n) = self.input_size;
        match self.kind {
            LayerKind::Conv | LayerKind::Maxpool | LayerKind::Avgpool => (
                (m + 2 * self.padding - self.k) / self.stride + 1,
                (n + 2 * self.padding - self.k) / self.stride + 1,
            ),
            LayerKind::GlobalAvgpool | LayerKind::FullyConnected => (1, 1),
            LayerKind::Relu | LayerKind::EltwiseAdd => (m, n),
        }
    }

    pub fn input_positions(&self) -> usize {
        self.input_size.0 * self.input_size.1
    }

    pub fn output_positions(&self) -> usize {
        let (m, n) = self.output_size();
        m * n
    }

    pub fn is_decomposable(&self) -> bool {
        self.kind.has_weights()
    }

    pub fn weight_shape(&self) -> WeightShape {
        WeightShape::new(self.c_out, self.c_in, self.k)
    }

    /// Extra per-channel parameters (bias, scale and shift).
    pub fn channel_params(&self) -> usize {
        usize::from(self.bias) * self.c_out + usize::from(self.affine) * 2 * self.c_out
    }

    pub fn dense_params(&self) -> usize {
        if self.is_decomposable() {
            self.weight_shape().numel() + self.channel_params()
        } else {
            0
        }
    }

    /// Stored parameters after applying `cfg` (dense when `None`).
    pub fn params(&self, cfg: Option<&LayerTDConfig>) -> usize {
        match (self.is_decomposable(), cfg) {
            (false, _) => 0,
            (true, None) => self.dense_params(),
            (true, Some(c)) => param_count(c, self.weight_shape()) + self.channel_params(),
        }
    }

    pub fn dense_macs(&self) -> u64 {
        if !self.is_decomposable() {
            return 0;
        }
        (self.output_positions() * self.c_out * self.c_in * self.k * self.k) as u64
    }

    /// Multiply-accumulates of one forward pass over all stages of the layer.
    pub fn macs(&self, cfg: Option<&LayerTDConfig>) -> u64 {
        let Some(c) = cfg.filter(|_| self.is_decomposable()) else {
            return self.dense_macs();
        };
        let (g1, g2, r, k) = (c.g1 as u64, c.g2 as u64, c.rank as u64, self.k as u64);
        let (ci, co) = (self.c_in as u64, self.c_out as u64);
        let p_out = self.output_positions() as u64;
        match c.format {
            TdFormat::Svd => p_out * r * (g1 * ci * k * k + g2 * co),
            TdFormat::Cpd => {
                let p_in = self.input_positions() as u64;
                let p_mid = (self.output_size().0 * self.input_size.1) as u64;
                r * (p_in * g1 * ci + g1 * g2 * k * (p_mid + p_out) + p_out * g2 * co)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub weight: DenseTensor,
    /// Empty when the layer has no bias.
    pub bias: Vec<f64>,
    /// Empty when the layer has no affine transform.
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerWeights {
    /// Zero weights with identity affine and zero bias.
    pub fn neutral(layer: &LayerSpec) -> Result<Self> {
        let c = layer.c_out;
        Ok(Self {
            weight: DenseTensor::zeros(&layer.weight_shape().dims())?,
            bias: if layer.bias { vec![0.0; c] } else { Vec::new() },
            scale: if layer.affine {
                vec![1.0; c]
            } else {
                Vec::new()
            },
            shift: if layer.affine {
                vec![0.0; c]
            } else {
                Vec::new()
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub name: String,
    /// `(b, m, n, c)` of the network input.
    pub input: [usize; 4],
    /// Layers in topological order.
    pub layers: Vec<LayerSpec>,
    pub weights: BTreeMap<String, LayerWeights>,
}

impl NetworkSpec {
    /// Resolves shapes, orders the graph topologically and validates it.
    /// Layers without an entry in `weights` get neutral (zero) weights.
    pub fn build(
        name: impl Into<String>,
        input: [usize; 4],
        decls: &[LayerDecl],
        mut weights: BTreeMap<String, LayerWeights>,
    ) -> Result<Self> {
        let load = |id: &str, msg: String| Error::Load {
            layer: id.to_string(),
            message: msg,
        };
        if input.contains(&0) {
            return Err(Error::config(format!(
                "network input shape {input:?} has a zero extent"
            )));
        }
        if decls.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let mut index = HashMap::new();
        for (i, d) in decls.iter().enumerate() {
            if d.id == INPUT || index.insert(d.id.as_str(), i).is_some() {
                return Err(load(&d.id, "duplicate or reserved layer id".into()));
            }
        }
        // Predecessors as declaration indices; None = network input.
        let mut preds: Vec<Vec<Option<usize>>> = Vec::with_capacity(decls.len());
        for (i, d) in decls.iter().enumerate() {
            let names: Vec<String> = match &d.inputs {
                Some(v) => v.clone(),
                None if i == 0 => vec![INPUT.into()],
                None => vec![decls[i - 1].id.clone()],
            };
            let expected = if d.kind == LayerKind::EltwiseAdd {
                2
            } else {
                1
            };
            if names.len() != expected {
                return Err(load(
                    &d.id,
                    format!("expects {expected} predecessor(s), got {}", names.len()),
                ));
            }
            let mut p = Vec::new();
            for n in &names {
                if n == INPUT {
                    p.push(None);
                } else {
                    let j = *index
                        .get(n.as_str())
                        .ok_or_else(|| load(&d.id, format!("unknown predecessor `{n}`")))?;
                    p.push(Some(j));
                }
            }
            preds.push(p);
        }

        // Kahn's algorithm, preferring declaration order.
        let mut indeg: Vec<usize> = preds.iter().map(|p| p.iter().flatten().count()).collect();
        let mut consumers = vec![Vec::new(); decls.len()];
        for (i, p) in preds.iter().enumerate() {
            for &j in p.iter().flatten() {
                consumers[j].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..decls.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(decls.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != decls.len() {
            let stuck = (0..decls.len())
                .find(|&i| indeg[i] > 0)
                .expect("cycle member");
            return Err(load(
                &decls[stuck].id,
                "layer graph contains a cycle".into(),
            ));
        }
        let sinks: Vec<usize> = (0..decls.len())
            .filter(|&i| consumers[i].is_empty())
            .collect();
        if sinks.len() != 1 {
            let names: Vec<&str> = sinks.iter().map(|&i| decls[i].id.as_str()).collect();
            return Err(Error::config(format!(
                "network must have exactly one output, found {names:?}"
            )));
        }

        let mut position = vec![0; decls.len()];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let mut layers: Vec<LayerSpec> = Vec::with_capacity(decls.len());
        for &i in &order {
            let d = &decls[i];
            let in_shapes: Vec<(usize, usize, usize)> = preds[i]
                .iter()
                .map(|p| match p {
                    None => (input[1], input[2], input[3]),
                    Some(j) => {
                        let l = &layers[position[*j]];
                        let (m, n) = l.output_size();
                        (m, n, l.c_out)
                    }
                })
                .collect();
            if in_shapes.windows(2).any(|w| w[0] != w[1]) {
                return Err(load(
                    &d.id,
                    format!("predecessor shapes differ: {in_shapes:?}"),
                ));
            }
            let (m, n, c) = in_shapes[0];
            if let Some(ci) = d.c_in {
                if ci != c {
                    return Err(load(
                        &d.id,
                        format!("declares c_in = {ci} but receives {c} channels"),
                    ));
                }
            }
            let need = |v: Option<usize>, what: &str| {
                v.ok_or_else(|| load(&d.id, format!("missing `{what}`")))
            };
            let (c_out, k, stride, padding) = match d.kind {
                LayerKind::Conv => (
                    need(d.c_out, "c_out")?,
                    need(d.k, "k")?,
                    d.stride.unwrap_or(1),
                    d.padding.unwrap_or(0),
                ),
                LayerKind::FullyConnected => {
                    if (m, n) != (1, 1) {
                        return Err(load(
                            &d.id,
                            format!("fully_connected needs a 1×1 input, got {m}×{n}"),
                        ));
                    }
                    (need(d.c_out, "c_out")?, 1, 1, 0)
                }
                LayerKind::Maxpool | LayerKind::Avgpool => (
                    c,
                    need(d.k, "k")?,
                    d.stride.unwrap_or(1),
                    d.padding.unwrap_or(0),
                ),
                _ => (c, 1, 1, 0),
            };
            if let (false, Some(co)) = (d.kind.has_weights(), d.c_out) {
                if co != c {
                    return Err(load(
                        &d.id,
                        format!(
                            "declares c_out = {co} but a {} keeps {c} channels",
                            d.kind.name()
                        ),
                    ));
                }
            }
            if k == 0 || stride == 0 || c_out == 0 {
                return Err(load(&d.id, "zero kernel, stride or channel count".into()));
            }
            if m + 2 * padding < k || n + 2 * padding < k {
                return Err(load(
                    &d.id,
                    format!("kernel {k} larger than padded input {m}×{n}"),
                ));
            }
            layers.push(LayerSpec {
                id: d.id.clone(),
                kind: d.kind,
                c_in: c,
                c_out,
                k,
                stride,
                padding,
                input_size: (m, n),
                preds: preds[i].iter().flatten().map(|&j| position[j]).collect(),
                bias: d.bias,
                affine: d.affine,
            });
        }

        for l in layers.iter().filter(|l| l.is_decomposable()) {
            match weights.get(&l.id) {
                None => {
                    weights.insert(l.id.clone(), LayerWeights::neutral(l)?);
                }
                Some(w) => {
                    if w.weight.shape() != l.weight_shape().dims() {
                        return Err(load(
                            &l.id,
                            format!(
                                "weight shape {:?} does not match {:?}",
                                w.weight.shape(),
                                l.weight_shape().dims()
                            ),
                        ));
                    }
                    let c = l.c_out;
                    let want = |v: &Vec<f64>, on: bool| v.len() == if on { c } else { 0 };
                    if !want(&w.bias, l.bias)
                        || !want(&w.scale, l.affine)
                        || !want(&w.shift, l.affine)
                    {
                        return Err(load(
                            &l.id,
                            "bias or affine length does not match c_out".into(),
                        ));
                    }
                }
            }
        }
        if let Some(extra) = weights
            .keys()
            .find(|id| !layers.iter().any(|l| &l.id == *id && l.is_decomposable()))
        {
            return Err(load(
                extra,
                "weights given for a layer without weights".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            input,
            layers,
            weights,
        })
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Indices of conv and fully-connected layers, in topological order.
    pub fn decomposable(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_decomposable())
            .collect()
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Fails with the first decomposable layer missing from `td`, or an id in
    /// `td` that names no decomposable layer, or a config invalid for its layer.
    pub fn check_td(&self, td: &TdMap) -> Result<()> {
        for l in self.layers.iter().filter(|l| l.is_decomposable()) {
            let cfg = td.get(&l.id).ok_or_else(|| {
                Error::config(format!("td-config has no entry for layer `{}`", l.id))
            })?;
            cfg.validate(l.weight_shape())
                .map_err(|e| Error::config(format!("layer `{}`: {e}", l.id)))?;
        }
        if let Some(id) = td
            .keys()
            .find(|id| !self.layer(id).is_some_and(LayerSpec::is_decomposable))
        {
            return Err(Error::config(format!(
                "td-config names unknown or weightless layer `{id}`"
            )));
        }
        Ok(())
    }

    pub fn count_params(&self, td: Option<&TdMap>) -> u64 {
        self.layers
            .iter()
            .map(|l| l.params(td.and_then(|t| t.get(&l.id))) as u64)
            .sum()
    }

    pub fn count_macs(&self, td: Option<&TdMap>) -> u64 {
        self.layers
            .iter()
            .map(|l| l.macs(td.and_then(|t| t.get(&l.id))))
            .sum()
    }
}

/// Total stored bits: parameters (after `td` when given) times `bits_per_weight`.
pub fn count_memory_bits(net: &NetworkSpec, td: Option<&TdMap>, bits_per_weight: u64) -> u64 {
    net.count_params(td) * bits_per_weight
}

/// `2 · w_bits · a_bits` per multiply-accumulate.
pub fn count_bitops(net: &NetworkSpec, td: Option<&TdMap>, w_bits: u64, a_bits: u64) -> u64 {
    net.count_macs(td) * 2 * w_bits * a_bits
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    input: [usize; 4],
    #[serde(rename = "layer")]
    layers: Vec<LayerDecl>,
}

fn read_blob(path: &Path, layer: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        layer: layer.into(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    if bytes.len() != expected * 4 {
        return Err(Error::Load {
            layer: layer.into(),
            message: format!(
                "{} holds {} bytes, expected {}",
                path.display(),
                bytes.len(),
                expected * 4
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub fn write_blob(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    read_blob(path, &path.display().to_string(), expected)
}

/// Parses a TOML manifest and reads its referenced blobs (paths relative to
/// the manifest's directory). Layers without a weights blob get zero weights.
pub fn load_network(manifest_path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    // Shapes are needed to size blobs, so resolve the graph once without weights.
    let shapes = NetworkSpec::build(&m.name, m.input, &m.layers, BTreeMap::new())?;
    let mut weights = BTreeMap::new();
    for d in &m.layers {
        let Some(l) = shapes.layer(&d.id).filter(|l| l.is_decomposable()) else {
            if d.weights_blob.is_some() || d.bias_blob.is_some() || d.affine_blob.is_some() {
                return Err(Error::Load {
                    layer: d.id.clone(),
                    message: "blob given for a layer without weights".into(),
                });
            }
            continue;
        };
        let mut w = LayerWeights::neutral(l)?;
        if let Some(b) = &d.weights_blob {
            let shape = l.weight_shape();
            w.weight = DenseTensor::new(
                shape.dims().to_vec(),
                read_blob(&dir.join(b), &l.id, shape.numel())?,
            )?;
        }
        if let Some(b) = &d.bias_blob {
            if !l.bias {
                return Err(Error::Load {
                    layer: l.id.clone(),
                    message: "bias_blob given but bias = false".into(),
                });
            }
            w.bias = read_blob(&dir.join(b), &l.id, l.c_out)?;
        }
        if let Some(b) = &d.affine_blob {
            if !l.affine {
                return Err(Error::Load {
                    layer: l.id.clone(),
                    message: "affine_blob given but affine = false".into(),
                });
            }
            let v = read_blob(&dir.join(b), &l.id, 2 * l.c_out)?;
            w.scale = v[..l.c_out].to_vec();
            w.shift = v[l.c_out..].to_vec();
        }
        weights.insert(l.id.clone(), w);
    }
    NetworkSpec::build(m.name, m.input, &m.layers, weights)
}

/// Writes `manifest.toml`-style text to `manifest_path`; with `with_blobs`
/// every weighted layer also gets `<id>.w.bin` (and bias/affine blobs) beside it.
pub fn save_network(
    net: &NetworkSpec,
    manifest_path: impl AsRef<Path>,
    with_blobs: bool,
) -> Result<()> {
    let path = manifest_path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut decls = Vec::with_capacity(net.layers.len());
    for (i, l) in net.layers.iter().enumerate() {
        let mut d = LayerDecl::new(&l.id, l.kind);
        let prev_is_pred = match (i, l.preds.as_slice()) {
            (0, []) => true,
            (_, [p]) => *p + 1 == i,
            _ => false,
        };
        if !prev_is_pred {
            let names: Vec<&str> = if l.preds.is_empty() {
                vec![INPUT]
            } else {
                l.preds.iter().map(|&p| net.layers[p].id.as_str()).collect()
            };
            d = d.with_inputs(&names);
        }
        match l.kind {
            LayerKind::Conv => {
                d.c_in = Some(l.c_in);
                d.c_out = Some(l.c_out);
                d.k = Some(l.k);
                d.stride = Some(l.stride);
                d.padding = Some(l.padding);
            }
            LayerKind::FullyConnected => {
                d.c_in = Some(l.c_in);
                d.c_out = Some(l.c_out);
            }
            LayerKind::Maxpool | LayerKind::Avgpool => {
                d.k = Some(l.k);
                d.stride = Some(l.stride);
                d.padding = Some(l.padding);
            }
            _ => {}
        }
        d.bias = l.bias;
        d.affine = l.affine;
        if with_blobs && l.is_decomposable() {
            let w = &net.weights[&l.id];
            let name = format!("{}.w.bin", l.id);
            write_blob(&dir.join(&name), w.weight.data())?;
            d.weights_blob = Some(name);
            if l.bias {
                let name = format!("{}.b.bin", l.id);
                write_blob(&dir.join(&name), &w.bias)?;
                d.bias_blob = Some(name);
            }
            if l.affine {
                let name = format!("{}.affine.bin", l.id);
                let v: Vec<f64> = w.scale.iter().chain(&w.shift).copied().collect();
                write_blob(&dir.join(&name), &v)?;
                d.affine_blob = Some(name);
            }
        }
        decls.push(d);
    }
    let m = Manifest {
        name: net.name.clone(),
        input: net.input,
        layers: decls,
    };
    let text = toml::to_string(&m).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parameters of one 2-d convolution over a channel-last map.
#[derive(Clone, Copy, Debug)]
struct Conv2d<'a> {
    /// `(c_out, c_in, kh, kw)`, or `(c, kh, kw)` when depthwise.
    weight: &'a [f64],
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    depthwise: bool,
}

fn conv2d(x: &FeatureMap, p: Conv2d) -> Result<FeatureMap> {
    let &[b, m, n, c] = x.shape() else {
        return Err(Error::shape(format!(
            "feature map must be (b, m, n, c), got {:?}",
            x.shape()
        )));
    };
    if c != p.c_in || (p.depthwise && p.c_in != p.c_out) {
        return Err(Error::shape(format!(
            "conv expects {} channels, got {c}",
            p.c_in
        )));
    }
    if m + 2 * p.pad.0 < p.kh || n + 2 * p.pad.1 < p.kw {
        return Err(Error::shape("kernel larger than padded input"));
    }
    let mo = (m + 2 * p.pad.0 - p.kh) / p.stride.0 + 1;
    let no = (n + 2 * p.pad.1 - p.kw) / p.stride.1 + 1;
    let co = p.c_out;
    // (kh, kw, c_in, c_out) so the innermost loop runs over contiguous outputs.
    let wt: Vec<f64> = if p.depthwise {
        let mut t = vec![0.0; p.kh * p.kw * co];
        for ch in 0..co {
            for y in 0..p.kh {
                for x in 0..p.kw {
                    t[(y * p.kw + x) * co + ch] = p.weight[(ch * p.kh + y) * p.kw + x];
                }
            }
        }
        t
    } else {
        let mut t = vec![0.0; p.kh * p.kw * p.c_in * co];
        for o in 0..co {
            for i in 0..p.c_in {
                for y in 0..p.kh {
                    for x in 0..p.kw {
                        t[((y * p.kw + x) * p.c_in + i) * co + o] =
                            p.weight[((o * p.c_in + i) * p.kh + y) * p.kw + x];
                    }
                }
            }
        }
        t
    };
    let xd = x.data();
    let mut out = vec![0.0; b * mo * no * co];
    for bi in 0..b {
        for oy in 0..mo {
            for ox in 0..no {
                let o_base = ((bi * mo + oy) * no + ox) * co;
                let acc = &mut out[o_base..o_base + co];
                for ky in 0..p.kh {
                    let iy = (oy * p.stride.0 + ky) as isize - p.pad.0 as isize;
                    if iy < 0 || iy >= m as isize {
                        continue;
                    }
                    for kx in 0..p.kw {
                        let ix = (ox * p.stride.1 + kx) as isize - p.pad.1 as isize;
                        if ix < 0 || ix >= n as isize {
                            continue;
                        }
                        let i_base = ((bi * m + iy as usize) * n + ix as usize) * c;
                        let xin = &xd[i_base..i_base + c];
                        let tap = ky * p.kw + kx;
                        if p.depthwise {
                            let w = &wt[tap * co..(tap + 1) * co];
                            for ch in 0..co {
                                acc[ch] += xin[ch] * w[ch];
                            }
                        } else {
                            for (i, &xv) in xin.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let w = &wt[(tap * p.c_in + i) * co..(tap * p.c_in + i + 1) * co];
                                for (a, wv) in acc.iter_mut().zip(w) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    DenseTensor::new(vec![b, mo, no, co], out)
}

fn check_layer_input(x: &FeatureMap, layer: &LayerSpec) -> Result<()> {
    let (m, n) = layer.input_size;
    match x.shape() {
        [_, xm, xn, xc] if (*xm, *xn, *xc) == (m, n, layer.c_in) => Ok(()),
        s => Err(Error::shape(format!(
            "layer `{}` expects (b, {m}, {n}, {}), got {s:?}",
            layer.id, layer.c_in
        ))),
    }
}

/// Direct convolution with zero padding (also used for fully-connected layers
/// on a 1×1 map). Bias and affine are not applied here.
pub fn conv_forward(x: &FeatureMap, layer: &LayerSpec, w: &DenseTensor) -> Result<FeatureMap> {
    check_layer_input(x, layer)?;
    if w.shape() != layer.weight_shape().dims() {
        return Err(Error::shape(format!(
            "layer `{}` weight shape {:?}",
            layer.id,
            w.shape()
        )));
    }
    conv2d(
        x,
        Conv2d {
            weight: w.data(),
            c_out: layer.c_out,
            c_in: layer.c_in,
            kh: layer.k,
            kw: layer.k,
            stride: (layer.stride, layer.stride),
            pad: (layer.padding, layer.padding),
            depthwise: false,
        },
    )
}

fn channel_slice(x: &FeatureMap, start: usize, len: usize) -> Result<FeatureMap> {
    let s = x.shape();
    let c = s[3];
    let data: Vec<f64> = x
        .data()
        .chunks(c)
        .flat_map(|px| px[start..start + len].iter().copied())
        .collect();
    DenseTensor::new(vec![s[0], s[1], s[2], len], data)
}

/// Column `q` of every row of an `(rows, r)` factor, as a `(r, rows)` row-major array.
fn factor_t(f: &DenseTensor) -> Vec<f64> {
    f.transpose().expect("2-d").into_data()
}

/// Runs the staged computation of a decomposed layer chunk by chunk.
pub fn decomposed_conv_forward(
    x: &FeatureMap,
    layer: &LayerSpec,
    d: &DecomposedLayer,
) -> Result<FeatureMap> {
    check_layer_input(x, layer)?;
    if d.original_shape != layer.weight_shape() {
        return Err(Error::config(format!(
            "decomposition of shape {:?} does not fit layer `{}`",
            d.original_shape, layer.id
        )));
    }
    let cfg = d.config;
    let chunk = cfg.chunk_shape(layer.weight_shape());
    let (k, s, p, r) = (layer.k, layer.stride, layer.padding, cfg.rank);
    let b = x.shape()[0];
    let (mo, no) = layer.output_size();
    let mut out = vec![0.0; b * mo * no * layer.c_out];
    for i2 in 0..cfg.g2 {
        let xs = channel_slice(x, i2 * chunk.c_in, chunk.c_in)?;
        for i1 in 0..cfg.g1 {
            let f = &d.chunk(i1, i2).factors;
            let y = match cfg.format {
                TdFormat::Svd => {
                    // V' row (c·k + kh)·k + kw is exactly weight[q, c, kh, kw] after transposing.
                    let v = factor_t(&f[1]);
                    let mid = conv2d(
                        &xs,
                        Conv2d {
                            weight: &v,
                            c_out: r,
                            c_in: chunk.c_in,
                            kh: k,
                            kw: k,
                            stride: (s, s),
                            pad: (p, p),
                            depthwise: false,
                        },
                    )?;
                    conv2d(&mid, pointwise(f[0].data(), chunk.c_out, r))?
                }
                TdFormat::Cpd => {
                    let a2 = factor_t(&f[1]);
                    let a3 = factor_t(&f[2]);
                    let a4 = factor_t(&f[3]);
                    let t = conv2d(&xs, pointwise(&a2, r, chunk.c_in))?;
                    let t = conv2d(
                        &t,
                        Conv2d {
                            weight: &a3,
                            c_out: r,
                            c_in: r,
                            kh: k,
                            kw: 1,
                            stride: (s, 1),
                            pad: (p, 0),
                            depthwise: true,
                        },
                    )?;
                    let t = conv2d(
                        &t,
                        Conv2d {
                            weight: &a4,
                            c_out: r,
                            c_in: r,
                            kh: 1,
                            kw: k,
                            stride: (1, s),
                            pad: (0, p),
                            depthwise: true,
                        },
                    )?;
                    conv2d(&t, pointwise(f[0].data(), chunk.c_out, r))?
                }
            };
            for (px, ypx) in out
                .chunks_mut(layer.c_out)
                .zip(y.data().chunks(chunk.c_out))
            {
                for (o, v) in px[i1 * chunk.c_out..(i1 + 1) * chunk.c_out]
                    .iter_mut()
                    .zip(ypx)
                {
                    *o += v;
                }
            }
        }
    }
    DenseTensor::new(vec![b, mo, no, layer.c_out], out)
}

fn pointwise(weight: &[f64], c_out: usize, c_in: usize) -> Conv2d<'_> {
    Conv2d {
        weight,
        c_out,
        c_in,
        kh: 1,
        kw: 1,
        stride: (1, 1),
        pad: (0, 0),
        depthwise: false,
    }
}

fn apply_channel_params(y: &mut FeatureMap, w: &LayerWeights) {
    let c = y.shape()[3];
    for px in y.data_mut().chunks_mut(c) {
        if !w.scale.is_empty() {
            for ((v, a), b) in px.iter_mut().zip(&w.scale).zip(&w.shift) {
                *v = *v * a + b;
            }
        }
        for (v, b) in px.iter_mut().zip(&w.bias) {
            *v += b;
        }
    }
}

fn pool(x: &FeatureMap, layer: &LayerSpec, max: bool) -> Result<FeatureMap> {
    let &[b, m, n, c] = x.shape() else {
        unreachable!()
    };
    let (mo, no) = layer.output_size();
    let (k, s, p) = (layer.k, layer.stride, layer.padding);
    let mut out = Vec::with_capacity(b * mo * no * c);
    for bi in 0..b {
        for oy in 0..mo {
            for ox in 0..no {
                for ch in 0..c {
                    let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= m as isize || ix >= n as isize {
                                continue;
                            }
                            let v = x.data()[((bi * m + iy as usize) * n + ix as usize) * c + ch];
                            acc = if max { acc.max(v) } else { acc + v };
                        }
                    }
                    out.push(if max { acc } else { acc / (k * k) as f64 });
                }
            }
        }
    }
    DenseTensor::new(vec![b, mo, no, c], out)
}

/// Runs one layer on its (already gathered) inputs.
fn run_layer(
    net: &NetworkSpec,
    layer: &LayerSpec,
    inputs: &[&FeatureMap],
    decomposed: Option<&DecomposedLayer>,
) -> Result<FeatureMap> {
    let x = inputs[0];
    check_layer_input(x, layer)?;
    match layer.kind {
        LayerKind::Conv | LayerKind::FullyConnected => {
            let w = &net.weights[&layer.id];
            let mut y = match decomposed {
                Some(d) => decomposed_conv_forward(x, layer, d)?,
                None => conv_forward(x, layer, &w.weight)?,
            };
            apply_channel_params(&mut y, w);
            Ok(y)
        }
        LayerKind::Relu => {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            Ok(y)
        }
        LayerKind::Maxpool => pool(x, layer, true),
        LayerKind::Avgpool => pool(x, layer, false),
        LayerKind::GlobalAvgpool => {
            let &[b, m, n, c] = x.shape() else {
                unreachable!()
            };
            let mut out = vec![0.0; b * c];
            for bi in 0..b {
                for px in x.data()[bi * m * n * c..(bi + 1) * m * n * c].chunks(c) {
                    for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(px) {
                        *o += v;
                    }
                }
            }
            let inv = 1.0 / (m * n) as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            DenseTensor::new(vec![b, 1, 1, c], out)
        }
        LayerKind::EltwiseAdd => inputs[1]
            .shape()
            .eq(x.shape())
            .then(|| x.clone())
            .map_or_else(
                || {
                    Err(Error::shape(format!(
                        "eltwise_add `{}` operand shapes differ",
                        layer.id
                    )))
                },
                |y| {
                    Ok(DenseTensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(inputs[1].data())
                            .map(|(a, b)| a + b)
                            .collect(),
                    )
                    .expect("same shape"))
                },
            ),
    }
}

fn forward_with<'a>(
    net: &NetworkSpec,
    x: &FeatureMap,
    lookup: impl Fn(&str) -> Option<&'a DecomposedLayer>,
) -> Result<FeatureMap> {
    let &[_, m, n, c] = x.shape() else {
        return Err(Error::shape(format!(
            "input must be (b, m, n, c), got {:?}",
            x.shape()
        )));
    };
    if [m, n, c] != net.input[1..] {
        return Err(Error::shape(format!(
            "input {:?} does not match network input {:?}",
            x.shape(),
            net.input
        )));
    }
    let mut last_use = vec![0; net.layers.len()];
    for (i, l) in net.layers.iter().enumerate() {
        for &p in &l.preds {
            last_use[p] = i;
        }
    }
    let mut acts: Vec<Option<FeatureMap>> = vec![None; net.layers.len()];
    for (i, l) in net.layers.iter().enumerate() {
        let inputs: Vec<&FeatureMap> = if l.preds.is_empty() {
            vec![x]
        } else {
            l.preds
                .iter()
                .map(|&p| acts[p].as_ref().expect("topological order"))
                .collect()
        };
        let y = run_layer(net, l, &inputs, lookup(&l.id))?;
        acts[i] = Some(y);
        for &p in &l.preds {
            if last_use[p] == i {
                acts[p] = None;
            }
        }
    }
    Ok(acts.pop().flatten().expect("output layer"))
}

/// Topological execution; layers present in `decomposed` run their staged form.
pub fn network_forward(
    net: &NetworkSpec,
    x: &FeatureMap,
    decomposed: Option<&BTreeMap<String, DecomposedLayer>>,
) -> Result<FeatureMap> {
    forward_with(net, x, |id| decomposed.and_then(|d| d.get(id)))
}

/// Index of the largest logit per batch row (ties go to the lowest index).
pub fn argmax_rows(y: &FeatureMap) -> Vec<usize> {
    let b = y.shape()[0];
    let width = y.len() / b.max(1);
    y.data()
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyMode {
    Labeled,
    Reconstruction,
}

/// A single batch of labeled inputs, or the marker for reconstruction mode.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pub mode: ProxyMode,
    pub inputs: Option<FeatureMap>,
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    mode: ProxyMode,
    #[serde(default)]
    inputs_blob: Option<String>,
    #[serde(default)]
    shape: Option<[usize; 4]>,
    #[serde(default)]
    labels: Vec<usize>,
}

impl ProbeSet {
    pub fn reconstruction() -> Self {
        Self {
            mode: ProxyMode::Reconstruction,
            inputs: None,
            labels: Vec::new(),
        }
    }

    pub fn labeled(inputs: FeatureMap, labels: Vec<usize>) -> Result<Self> {
        if inputs.order() != 4 || inputs.shape()[0] != labels.len() {
            return Err(Error::config(format!(
                "probe has {} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Self {
            mode: ProxyMode::Labeled,
            inputs: Some(inputs),
            labels,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: ProbeFile =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        match f.mode {
            ProxyMode::Reconstruction => Ok(Self::reconstruction()),
            ProxyMode::Labeled => {
                let (Some(blob), Some(shape)) = (f.inputs_blob, f.shape) else {
                    return Err(Error::config(
                        "labeled probe needs `inputs_blob` and `shape`",
                    ));
                };
                let dir = path.parent().unwrap_or(Path::new("."));
                let n = shape.iter().product();
                let data = read_blob_f32(&dir.join(blob), n)?;
                Self::labeled(DenseTensor::new(shape.to_vec(), data)?, f.labels)
            }
        }
    }

    /// Writes the probe description to `path` and its input blob beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = ProbeFile {
            mode: self.mode,
            inputs_blob: None,
            shape: None,
            labels: self.labels.clone(),
        };
        if let Some(x) = &self.inputs {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("probe");
            let name = format!("{stem}.inputs.bin");
            let dir = path.parent().unwrap_or(Path::new("."));
            write_blob(&dir.join(&name), x.data())?;
            f.inputs_blob = Some(name);
            f.shape = Some([x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]]);
        }
        let text = toml::to_string(&f).map_err(|e| Error::config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `1 − Σ wᵢ eᵢ / Σ wᵢ`.
pub fn weighted_proxy(errors: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    1.0 - errors.iter().zip(weights).map(|(e, w)| e * w).sum::<f64>() / total
}

#[derive(Debug)]
struct LayerFit {
    /// Only kept when the probe needs a forward pass.
    layer: Option<DecomposedLayer>,
    error: f64,
}

/// Scores decompositions without fine-tuning. Decomposed layers are cached per
/// `(layer, config)` so repeated genes cost nothing.
pub struct AccuracyProxy<'a> {
    net: &'a NetworkSpec,
    probe: &'a ProbeSet,
    als: AlsSettings,
    zero_weights: Vec<bool>,
    total_macs: f64,
    cache: RwLock<FxHashMap<(usize, LayerTDConfig), Arc<LayerFit>>>,
}

impl<'a> AccuracyProxy<'a> {
    pub fn new(net: &'a NetworkSpec, probe: &'a ProbeSet, als: AlsSettings) -> Result<Self> {
        if probe.mode == ProxyMode::Labeled && probe.labels.is_empty() {
            return Err(Error::config("probe set is empty"));
        }
        let zero_weights = net
            .layers
            .iter()
            .map(|l| {
                net.weights
                    .get(&l.id)
                    .is_some_and(|w| w.weight.data().iter().all(|&v| v == 0.0))
            })
            .collect();
        Ok(Self {
            net,
            probe,
            als,
            zero_weights,
            total_macs: net.layers.iter().map(|l| l.dense_macs() as f64).sum(),
            cache: RwLock::new(FxHashMap::default()),
        })
    }

    fn fit(&self, layer: usize, cfg: &LayerTDConfig) -> Result<Arc<LayerFit>> {
        let key = (layer, *cfg);
        if let Some(f) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(f.clone());
        }
        let spec = &self.net.layers[layer];
        let w = &self.net.weights[&spec.id].weight;
        let fit = if self.probe.mode == ProxyMode::Reconstruction && self.zero_weights[layer] {
            cfg.validate(spec.weight_shape())?;
            LayerFit {
                layer: None,
                error: 0.0,
            }
        } else {
            let d = decompose_layer(w, cfg, &self.als.for_layer(layer))?;
            let error = relative_error(&d, w)?.value;
            let keep = self.probe.mode == ProxyMode::Labeled;
            LayerFit {
                layer: keep.then_some(d),
                error,
            }
        };
        let fit = Arc::new(fit);
        self.cache
            .write()
            .expect("cache lock")
            .insert(key, fit.clone());
        Ok(fit)
    }

    /// Relative reconstruction error of one layer under `cfg` (absolute for zero weights).
    pub fn layer_error(&self, layer: usize, cfg: &LayerTDConfig) -> Result<f64> {
        Ok(self.fit(layer, cfg)?.error)
    }

    pub fn cached_layers(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    /// Higher is better. Layers absent from `td` are left dense.
    pub fn evaluate(&self, td: &TdMap) -> Result<f64> {
        let assigned: Vec<(usize, LayerTDConfig)> = self
            .net
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| {
                td.get(&l.id)
                    .filter(|_| l.is_decomposable())
                    .map(|c| (i, *c))
            })
            .collect();
        self.evaluate_layers(&assigned)
    }

    /// Like [`evaluate`](Self::evaluate) with configs addressed by layer index.
    pub fn evaluate_layers(&self, assigned: &[(usize, LayerTDConfig)]) -> Result<f64> {
        let cached: Vec<Option<f64>> = {
            let cache = self.cache.read().expect("cache lock");
            assigned
                .iter()
                .map(|k| cache.get(k).map(|f| f.error))
                .collect()
        };
        match self.probe.mode {
            ProxyMode::Reconstruction => {
                let mut e = Vec::with_capacity(assigned.len() + 1);
                let mut w = Vec::with_capacity(assigned.len() + 1);
                for ((i, cfg), hit) in assigned.iter().zip(cached) {
                    e.push(match hit {
                        Some(v) => v,
                        None => self.fit(*i, cfg)?.error,
                    });
                    w.push(self.net.layers[*i].dense_macs() as f64);
                }
                // Dense layers count with zero error.
                let covered: f64 = w.iter().sum();
                w.push(self.total_macs - covered);
                e.push(0.0);
                Ok(weighted_proxy(&e, &w))
            }
            ProxyMode::Labeled => {
                let fits = assigned
                    .iter()
                    .map(|(i, cfg)| Ok((*i, self.fit(*i, cfg)?)))
                    .collect::<Result<Vec<_>>>()?;
                let x = self
                    .probe
                    .inputs
                    .as_ref()
                    .ok_or_else(|| Error::config("probe set is empty"))?;
                let map: HashMap<&str, &DecomposedLayer> = fits
                    .iter()
                    .filter_map(|(i, f)| {
                        f.layer
                            .as_ref()
                            .map(|l| (self.net.layers[*i].id.as_str(), l))
                    })
                    .collect();
                let y = forward_with(self.net, x, |id| map.get(id).copied())?;
                let hits = argmax_rows(&y)
                    .iter()
                    .zip(&self.probe.labels)
                    .filter(|(a, b)| a == b)
                    .count();
                Ok(hits as f64 / self.probe.labels.len() as f64)
            }
        }
    }
}

/// One-shot proxy evaluation without a persistent cache.
pub fn accuracy_proxy(
    net: &NetworkSpec,
    td: &TdMap,
    probe: &ProbeSet,
    als: AlsSettings,
) -> Result<f64> {
    AccuracyProxy::new(net, probe, als)?.evaluate(td)
}

/// Writes factor blobs for every decomposed layer and a TOML index beside
/// them; returns the index path.
pub fn save_decomposed(
    dir: impl AsRef<Path>,
    source_manifest: &str,
    layers: &BTreeMap<String, DecomposedLayer>,
) -> Result<PathBuf> {
    #[derive(Serialize)]
    struct Entry<'a> {
        id: &'a str,
        #[serde(flatten)]
        config: LayerTDConfig,
        blob: String,
    }
    #[derive(Serialize)]
    struct Index<'a> {
        model: &'a str,
        layer: Vec<Entry<'a>>,
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (id, d) in layers {
        let blob = format!("{id}.td.bin");
        let values: Vec<f64> = d
            .chunks
            .iter()
            .flat_map(|c| c.factors.iter().flat_map(|f| f.data().iter().copied()))
            .collect();
        write_blob(&dir.join(&blob), &values)?;
        entries.push(Entry {
            id,
            config: d.config,
            blob,
        });
    }
    let path = dir.join("decomposed.toml");
    let text = toml::to_string(&Index {
        model: source_manifest,
        layer: entries,
    })
    .map_err(|e| Error::config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a td-config file: `[layers.<id>]` tables with `format`, `g1`, `g2`, `rank`.
pub fn load_td_config(path: impl AsRef<Path>) -> Result<TdMap> {
    #[derive(Deserialize)]
    struct File {
        layers: TdMap,
    }
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: File =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(f.layers)
}

pub fn save_td_config(path: impl AsRef<Path>, td: &TdMap) -> Result<()> {
    #[derive(Serialize)]
    struct File<'a> {
        layers: &'a TdMap,
    }
    let path = path.as_ref();
    let text = toml::to_string(&File { layers: td }).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
