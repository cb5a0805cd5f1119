//! Layer-specific mixed SVD/CPD compression of CNN weights, an analytical
//! model of a layer-pipelined dataflow accelerator, and the constrained
//! evolutionary search (with a random-forest throughput surrogate) that
//! picks per-layer decompositions for it.

pub mod accel;
pub mod decompose;
pub mod dse;
pub mod error;
pub mod fixtures;
pub mod network;
pub mod rng;
pub mod surrogate;
pub mod tensor;

pub use accel::{
    allocate_unrolling, build_stages, lcm_fifo_width, pipeline_fps, rearrange_schedule,
    resource_usage, stage_cycles, EngineModel, PipelineDesign, Platform, ResourceVector,
    StageModel,
};
pub use decompose::{
    decompose_layer, param_count, reconstruct_layer, relative_error, AlsSettings, DecomposedChunk,
    DecomposedLayer, LayerTDConfig, TdFormat, WeightShape,
};
pub use dse::{
    crossover, design_space_size, mutate, random_design, search, validate, ChoiceSets, ChoiceSpec,
    DesignPoint, Evaluator, FormatMode, SearchConfig, SearchContext, SearchResult,
    ThroughputSource,
};
pub use error::{Error, Result};
pub use network::{
    accuracy_proxy, conv_forward, count_bitops, count_memory_bits, decomposed_conv_forward,
    load_network, network_forward, AccuracyProxy, FeatureMap, LayerDecl, LayerKind, LayerSpec,
    NetworkSpec, ProbeSet, ProxyMode, TdMap,
};
pub use surrogate::{
    extract_features, holdout_report, Dataset, FeatureVector, ForestParams, HoldoutReport,
    MacBaseline, RandomForestModel,
};
pub use tensor::{
    contract, khatri_rao, solve_least_squares, truncated_svd, DenseTensor, SvdResult,
};
