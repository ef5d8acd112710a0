//! Joint objective, optimiser and the training loop.

pub mod gradcheck;
mod loss;
pub mod metrics;
mod optim;
mod step;
mod trainer;

pub use loss::{
    argmax, bce, bce_logit_grad, build_review_input, cross_entropy_with_grad, loss_dec, loss_len,
    loss_rev, review_labels, REVIEW_CLAMP,
};
pub use optim::{lr_schedule, Adam, AdamConfig};
pub use step::{
    compute_gradients, compute_loss, loss_and_grad, train_step, LossBreakdown, LossWeights,
    ReviewSampling, StepOptions, StepOutput, StepSeeds,
};
pub use metrics::{parse_metrics_log, EvalRow, MetricsRow, TrainRow};
pub use trainer::{
    decode_pairs, derive_seed, evaluate_pairs, Finish, PairScores, StopRule, TrainConfig, TrainObserver,
    TrainState, Trainer,
};
