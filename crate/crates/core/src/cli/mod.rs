//! Command-line pipeline: config handling, run directories and one
//! function per subcommand. The `grass` binary is a thin wrapper.

mod commands;
mod config;

pub use commands::{
    cmd_attribute, cmd_bench, cmd_cache, cmd_lds, cmd_select_mask, cmd_train, AttributeOutput, BenchOutput,
    BenchRow, CacheOutput, Context, LdsOutput, SelectMaskOutput, TrainOutput, RESOLVED_CONFIG, RUN_ROOT_ENV,
};
pub use config::{
    AttributionConfig, BenchConfig, CompressorConfig, DatasetConfig, DatasetKindName, LdsSection, MethodName,
    ModeName, ModelConfig, PredictorName, RunConfig, SelectMaskConfig,
};
