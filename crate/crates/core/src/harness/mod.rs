//! Experiment plumbing: objectives, configuration, corpora, the experiment
//! drivers behind each CLI verb, and CSV/SVG report emission.

mod config;
mod experiments;
mod objectives;
mod report;
mod setup;
pub mod stats;
pub mod svg;
mod table;
mod verbs;

pub use config::{
    AblationConfig, ChainKind, CorpusConfig, CorpusSource, DesignConfig, ExperimentConfig, GridConfig, InfillConfig,
    McmcConfig, PlantedConfig, SamplingConfig,
};
pub use experiments::{
    ablation_cells, grid_cells, run_ablation, run_infill, run_mcmc, run_optimize, run_sampling, select_seeds,
    AblationCell, Cell, DesignRecord, InfillRecord, McmcReport, Mode, SampleRecord, SamplingRun, SeedSet,
};
pub use objectives::{motif_count, planted_linear, sheet_fraction, CompiledObjective, Objective};
pub use report::{
    summarize_ablation, summarize_cells, tradeoff_tests, write_report, AblationRow, AblationSummary, CellSummary,
    GuidedVsUnguided, TradeoffTests, Trend,
};
pub use setup::{build_corpus, load_checkpoint, prepare_model, save_checkpoint, Corpus, Prepared};
pub use table::Table;
pub use verbs::{run_verb, Verb};

use crate::lambo::LamboError;
use crate::model::ModelError;
use crate::noise::NoiseError;
use crate::sample::SampleError;
use crate::seqcore::SeqError;
use crate::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Checkpoint(_) => 2,
            HarnessError::Io(_) | HarnessError::Runtime(_) => 3,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(ModelError, TrainError, SampleError, LamboError, NoiseError, SeqError);
