//! Experiment orchestration: run configuration, seeded training with action
//! repeat, evaluation, CSV logs, preset suites and SVG learning curves.

mod config;
mod log;
mod plot;
mod suite;
mod train;

pub use config::{EnvId, Learner, RunConfig};
pub use log::{timing_path, LogRecord, RunLog};
pub use plot::{aggregate, interpolate, plot_curves, render_svg, Curve, Frame};
pub use suite::{
    discrete_preset, final_score, group_by_variant, load_suite, normalized_auc, pixel_preset,
    run_suite, state_preset, suite_configs, suite_dir, summarize, SuiteId, SuiteResult,
    VariantResult, Verdict, FINAL_WINDOW,
};
pub use train::{
    evaluate, evaluate_with, mean_std, output_root, random_action, run_dir, run_training,
    run_training_with, train_and_save, Agent, EvalResult, History, RunOutput, Streams,
    EVAL_SEED_BIT,
};

use thiserror::Error;

use crate::nn::Checkpoint;

/// Environment variable naming the output root directory.
pub const OUTPUT_ENV: &str = "FLARE_OUTPUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("log error: {0}")]
    Log(String),
    #[error("training diverged at env step {env_step}: non-finite loss")]
    Diverged {
        env_step: u64,
        snapshot: Box<Checkpoint<f32>>,
    },
    #[error(transparent)]
    Sac(#[from] crate::sac::SacError),
    #[error(transparent)]
    Dqn(#[from] crate::dqn::DqnError),
    #[error(transparent)]
    Repr(#[from] crate::representation::ReprError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
