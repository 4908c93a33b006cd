//! Elicit opinion distributions over ordinal survey answers from language
//! models, calibrate them against human response distributions with scalar
//! regression, and measure distributional alignment per demographic group.

pub mod calibration;
pub mod elicitation;
pub mod exec;
pub mod ingest;
pub mod metrics;
pub mod opinion;
pub mod providers;
pub mod regressors;
pub mod runner;
pub mod seed;
pub mod synth;

pub use exec::Execution;
pub use metrics::{opinion_alignment, AlignmentScore, PairedTestResult};
pub use opinion::{
    DistributionKey, ElicitationMethod, GroupKey, NegativePolicy, OpinionDistribution, PromptKind, Setting,
    Source, SurveyQuestion,
};
