//! Distillation from a pretrained teacher and a co-trained trainee.

pub mod convexity;
pub mod halting;
pub mod lambda;
pub mod loss;
pub mod plan;
pub mod train;

pub use convexity::{convexity_probe, probe_value, ConvexityReport, HyperDual, ProbeLoss, ProbePoint};
pub use halting::{determine_halting_epoch, HaltingConfig};
pub use lambda::{literal_minimizer, optimize_lambdas, softmax_simplex, DeConfig, LambdaMode, LambdaSearch};
pub use loss::{combined_loss, Branch, LossBreakdown, LossParts};
pub use plan::{DistillPlan, Lambdas, Scheme, DEFAULT_GRAD_CLIP};
pub use train::{prepare_models, train, EpochRecord, FlopModel, SchemeModels, TrainOutcome};
