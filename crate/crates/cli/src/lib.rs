//! Pipeline and synthetic data behind the `hybrid-ensemble` command.

pub mod error;
pub mod fusion;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use error::CliError;
pub use pipeline::{run_pipeline, train_base, BaseOutputs};
pub use report::RunReport;
pub use synth::{synth_data, SynthSpec};

/// Default experiment name. Names of the form `<positive>_vs_<negative>`
/// label the report's classes.
pub const DEFAULT_TASK: &str = "AD_vs_MCI";
