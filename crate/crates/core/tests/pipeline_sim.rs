use std::collections::BTreeMap;

use mixtd_core::accel::{allocate_unrolling, PipelineDesign, StageModel};
use mixtd_core::*;

/// Token-level stream simulation of a chain pipeline for one image. Each stage
/// emits its output positions in order, one every `cycles / positions` cycles,
/// and output `j` waits for the input positions it needs.
fn simulate(d: &PipelineDesign) -> f64 {
    let mut arrivals: Vec<f64> = vec![0.0];
    for le in &d.layers {
        for s in &le.stages {
            arrivals = run_stage(s, &arrivals);
        }
    }
    *arrivals.last().unwrap()
}

fn run_stage(s: &StageModel, input: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    let n_out = s.spatial_positions;
    let per = s.cycles() as f64 / n_out as f64;
    let mut out = Vec::with_capacity(n_out);
    let mut free = 0.0f64;
    for j in 0..n_out {
        let need = (s.fill_positions + 1 + j * n_in / n_out).min(n_in);
        let start = free.max(input[need - 1]);
        free = start + per;
        out.push(free);
    }
    out
}

fn chain(name: &str, input: [usize; 4], decls: &[LayerDecl]) -> NetworkSpec {
    NetworkSpec::build(name, input, decls, BTreeMap::new()).unwrap()
}

fn uniform_td(net: &NetworkSpec, cfg: LayerTDConfig) -> TdMap {
    net.decomposable()
        .iter()
        .map(|&i| (net.layers[i].id.clone(), cfg))
        .collect()
}

fn check(net: &NetworkSpec, td: Option<&TdMap>, platform: &Platform) {
    let d = allocate_unrolling(net, td, platform).unwrap();
    let model = d.depth() + d.ii() as f64;
    let sim = simulate(&d);
    let rel = (model - sim).abs() / sim;
    assert!(
        rel <= 0.10,
        "{}: model {model:.0} cycles, simulation {sim:.0} ({rel:.3})",
        net.name
    );
    let fps_model = pipeline_fps(&d, 1);
    let fps_sim = platform.clock_hz() / sim;
    assert!((fps_model - fps_sim).abs() / fps_sim <= 0.10);
}

fn nets() -> Vec<NetworkSpec> {
    vec![
        fixtures::tiny_cnn(0).unwrap(),
        chain(
            "two-conv",
            [1, 12, 12, 4],
            &[
                LayerDecl::conv("a", 4, 8, 3, 1, 1),
                LayerDecl::conv("b", 8, 8, 3, 1, 1),
            ],
        ),
        chain(
            "strided",
            [1, 16, 16, 8],
            &[
                LayerDecl::conv("a", 8, 16, 3, 2, 1),
                LayerDecl::new("r", LayerKind::Relu),
                LayerDecl::conv("b", 16, 16, 1, 1, 0),
                LayerDecl::pool("p", LayerKind::Maxpool, 2, 2, 0),
                LayerDecl::conv("c", 16, 8, 3, 1, 1),
            ],
        ),
        chain(
            "head",
            [1, 6, 6, 8],
            &[
                LayerDecl::conv("a", 8, 8, 3, 1, 1),
                LayerDecl::new("gap", LayerKind::GlobalAvgpool),
                LayerDecl::fc("fc", 8, 10),
            ],
        ),
    ]
}

#[test]
fn batch_one_latency_matches_stream_simulation() {
    let platforms = [
        Platform::default().with_budget(ResourceVector::new(32, 200, 100_000, 0)),
        Platform::default().with_budget(ResourceVector::new(256, 400, 400_000, 0)),
        Platform::unlimited(),
    ];
    for net in nets() {
        for p in &platforms {
            check(&net, None, p);
            for cfg in [
                LayerTDConfig::svd(1, 1, 2),
                LayerTDConfig::svd(2, 2, 2),
                LayerTDConfig::cpd(1, 1, 4),
                LayerTDConfig::cpd(2, 1, 3),
            ] {
                let td = uniform_td(&net, cfg);
                if net.check_td(&td).is_ok() {
                    check(&net, Some(&td), p);
                }
            }
        }
    }
}

#[test]
fn two_stage_store_and_forward() {
    let mut a = StageModel {
        kind: mixtd_core::accel::StageKind::Dense,
        spatial_positions: 1,
        reduce_size: 100,
        expand_size: 1,
        p_in: 1,
        p_out: 1,
        weight_words: 100,
        fill_positions: 0,
    };
    let b = StageModel {
        reduce_size: 300,
        weight_words: 300,
        ..a.clone()
    };
    let t = run_stage(&b, &run_stage(&a, &[0.0]));
    assert_eq!(t, vec![400.0]);
    a.spatial_positions = 4;
    a.reduce_size = 25;
    assert_eq!(run_stage(&a, &[0.0])[3], 100.0);
}

#[test]
fn larger_batches_amortize_depth() {
    let net = fixtures::tiny_cnn(0).unwrap();
    let d = allocate_unrolling(&net, None, &fixtures::desk_platform()).unwrap();
    assert!(d.depth() > 0.0);
    assert!(pipeline_fps(&d, 256) > pipeline_fps(&d, 1));
    assert!(pipeline_fps(&d, 256) < d.platform.clock_hz() / d.ii() as f64);
}
