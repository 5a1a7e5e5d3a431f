//! Weak annotation, supervised warm-up and reinforcement fine-tuning.

mod annotate;
mod dqn;
mod reft;
mod reward;
mod sl;

pub use annotate::{annotate, clearance, AnnotationConfig, WeakLabel};
pub use dqn::{dqn_update, td_targets, DqnConfig, DqnState, ReplayBuffer, Transition};
pub use reft::{train_reft, ReftConfig, ReftReport};
pub use reward::{step_reward, VIOLATION_PENALTY};
pub use sl::{
    batch_loss, collect_samples, monitor_scores, positive_scores, train_epoch, train_sl, Sample, SlConfig, SlReport,
};
