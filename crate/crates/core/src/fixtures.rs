//! Built-in networks used by tests, benches and the CLI examples.

use std::collections::BTreeMap;

use crate::accel::{Platform, ResourceVector};
use crate::decompose::LayerTDConfig;
use crate::error::Result;
use crate::network::{
    argmax_rows, network_forward, LayerDecl, LayerKind, LayerWeights, NetworkSpec, ProbeSet, TdMap,
};
use crate::rng::stream;
use crate::tensor::DenseTensor;

/// Three 3×3 convolutions on an 8×8×3 input, ending in global average pooling
/// over 8 classes.
pub fn tiny_cnn_decls() -> Vec<LayerDecl> {
    vec![
        LayerDecl::conv("conv1", 3, 8, 3, 1, 1),
        LayerDecl::new("relu1", LayerKind::Relu),
        LayerDecl::conv("conv2", 8, 16, 3, 2, 1),
        LayerDecl::new("relu2", LayerKind::Relu),
        LayerDecl::conv("conv3", 16, 8, 3, 1, 1),
        LayerDecl::new("gap", LayerKind::GlobalAvgpool),
    ]
}

pub const TINY_INPUT: [usize; 4] = [1, 8, 8, 3];

/// A small budget under which tiny-cnn designs compete for DSPs.
pub fn desk_platform() -> Platform {
    Platform {
        name: "desk".into(),
        ..Platform::default()
    }
    .with_budget(ResourceVector::new(128, 200, 100_000, 0))
}

/// tiny-cnn with weights drawn uniformly from ±1/√fan_in.
pub fn tiny_cnn(seed: u64) -> Result<NetworkSpec> {
    let decls = tiny_cnn_decls();
    let shapes = NetworkSpec::build("tiny-cnn", TINY_INPUT, &decls, BTreeMap::new())?;
    let mut weights = BTreeMap::new();
    for (i, l) in shapes
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_decomposable())
    {
        let mut rng = stream(&[seed, 0x7769_6e79, i as u64]);
        let bound = 1.0 / ((l.c_in * l.k * l.k) as f64).sqrt();
        let mut w = LayerWeights::neutral(l)?;
        w.weight = DenseTensor::random_uniform(&l.weight_shape().dims(), -bound, bound, &mut rng)?;
        weights.insert(l.id.clone(), w);
    }
    NetworkSpec::build("tiny-cnn", TINY_INPUT, &decls, weights)
}

/// A labeled probe batch whose labels are the dense network's own predictions,
/// so the uncompressed proxy accuracy is 1.
pub fn tiny_probe(net: &NetworkSpec, batch: usize, seed: u64) -> Result<ProbeSet> {
    let [_, m, n, c] = net.input;
    let mut rng = stream(&[seed, 0x7072_6f62]);
    let x = DenseTensor::random_uniform(&[batch, m, n, c], -1.0, 1.0, &mut rng)?;
    let mut batched = net.clone();
    batched.input[0] = batch;
    let labels = argmax_rows(&network_forward(&batched, &x, None)?);
    ProbeSet::labeled(x, labels)
}

/// ResNet-18 descriptors for 224×224 ImageNet inputs with zero weights. Every
/// convolution carries a folded batch norm (scale and shift per channel).
pub fn resnet18_decls() -> Vec<LayerDecl> {
    let mut d = vec![
        LayerDecl::conv("conv1", 3, 64, 7, 2, 3).with_affine(),
        LayerDecl::new("relu1", LayerKind::Relu),
        LayerDecl::pool("maxpool", LayerKind::Maxpool, 3, 2, 1),
    ];
    let mut prev = "maxpool".to_string();
    let mut c_in = 64;
    for (stage, &c) in [64, 128, 256, 512].iter().enumerate() {
        for block in 0..2 {
            let p = format!("l{}.{block}", stage + 1);
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            d.push(
                LayerDecl::conv(format!("{p}.a"), c_in, c, 3, stride, 1)
                    .with_affine()
                    .with_inputs(&[&prev]),
            );
            d.push(LayerDecl::new(format!("{p}.a.relu"), LayerKind::Relu));
            d.push(LayerDecl::conv(format!("{p}.b"), c, c, 3, 1, 1).with_affine());
            let shortcut = if stride != 1 || c_in != c {
                d.push(
                    LayerDecl::conv(format!("{p}.ds"), c_in, c, 1, stride, 0)
                        .with_affine()
                        .with_inputs(&[&prev]),
                );
                format!("{p}.ds")
            } else {
                prev.clone()
            };
            d.push(
                LayerDecl::new(format!("{p}.add"), LayerKind::EltwiseAdd)
                    .with_inputs(&[&format!("{p}.b"), &shortcut]),
            );
            d.push(LayerDecl::new(format!("{p}.relu"), LayerKind::Relu));
            prev = format!("{p}.relu");
            c_in = c;
        }
    }
    d.push(LayerDecl::new("gap", LayerKind::GlobalAvgpool));
    d.push(LayerDecl::fc("fc", 512, 1000));
    d
}

pub fn resnet18_shapes() -> Result<NetworkSpec> {
    NetworkSpec::build(
        "resnet18-shapes",
        [1, 224, 224, 3],
        &resnet18_decls(),
        BTreeMap::new(),
    )
}

/// A hand-picked decomposition of resnet18-shapes: SVD at roughly 30% of the
/// full rank (multiples of 8) for most layers, CPD for the last 3×3 convs.
pub fn resnet18_td() -> Result<TdMap> {
    let net = resnet18_shapes()?;
    let mut td = TdMap::new();
    for l in net.layers.iter().filter(|l| l.is_decomposable()) {
        let full = l.c_out.min(l.c_in * l.k * l.k);
        let cfg = match l.id.as_str() {
            "conv1" => LayerTDConfig::svd(1, 1, 64),
            "fc" => LayerTDConfig::svd(1, 1, 384),
            "l4.0.b" | "l4.1.b" => LayerTDConfig::cpd(1, 1, 768),
            _ => {
                let r = ((0.3 * full as f64 / 8.0).round() as usize * 8).max(8);
                LayerTDConfig::svd(1, 1, r)
            }
        };
        td.insert(l.id.clone(), cfg);
    }
    Ok(td)
}
