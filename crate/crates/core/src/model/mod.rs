//! Encoders, optimisation and augmentation.

pub mod augment;
pub mod encoder;
pub mod mlp;
pub mod optim;
pub mod schedule;

pub use augment::{augment, AugmentPolicy, Strength};
pub use encoder::{Architecture, EncoderPair, Student, StudentBatchPass, StudentGrads, StudentOptimizer, StudentPass, Teacher};
pub use mlp::{Activation, BatchTape, Gradients, LayerSpec, Mlp, Norm, Tape};
pub use optim::{ema_update, sgd_step, SgdConfig};
pub use schedule::{scaled_base_lr, LrSchedule};
