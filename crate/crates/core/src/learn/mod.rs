//! Adversarial actor-critic for reach-avoid values: a protagonist policy,
//! a disturbance policy and a reach-avoid action-value network.

pub mod buffer;
pub mod losses;
pub mod mlp;
pub mod train;

pub use buffer::{ReplayBuffer, Transition};
pub use losses::{actor_loss, adversary_loss, critic_loss, critic_target, Nets};
pub use mlp::{Head, Mlp};
pub use train::{read_checkpoint, train, write_checkpoint, EpochLog, OptimizerKind, TrainConfig, TrainOutput};
