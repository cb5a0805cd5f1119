use mixtd_core::fixtures::{desk_platform, resnet18_shapes, resnet18_td, tiny_cnn, tiny_probe};
use mixtd_core::network::load_td_config;
use mixtd_core::{load_network, NetworkSpec, Platform, ProbeSet, Result, TdMap};

pub fn model(name: &str) -> Result<NetworkSpec> {
    match name {
        "tiny-cnn" => tiny_cnn(0),
        "resnet18-shapes" => resnet18_shapes(),
        path => load_network(path),
    }
}

pub fn platform(name: &str) -> Result<Platform> {
    match name {
        "u250" => Ok(Platform::default()),
        "desk" => Ok(desk_platform()),
        "unlimited" => Ok(Platform::unlimited()),
        path => Platform::load(path),
    }
}

/// `self-labeled` draws 32 random inputs labeled by the dense network itself.
pub fn probe(name: &str, net: &NetworkSpec, seed: u64) -> Result<ProbeSet> {
    match name {
        "reconstruction" => Ok(ProbeSet::reconstruction()),
        "self-labeled" => tiny_probe(net, 32, seed),
        path => ProbeSet::load(path),
    }
}

pub fn td_config(name: &str) -> Result<TdMap> {
    match name {
        "resnet18-td" => resnet18_td(),
        path => load_td_config(path),
    }
}
