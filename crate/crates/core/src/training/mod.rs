//! Parameter registry, optimizer, schedule, loss, the training loop and a
//! finite-difference gradient check.

mod gradcheck;
mod optim;
mod store;
mod train;

pub use gradcheck::{gradcheck, jitter, GradcheckReport, REL_FLOOR};
pub use optim::{adam_step, cross_entropy, lr_at, TrainConfig};
pub use store::{weights_checksum, ParamEntry, ParamStore};
pub use train::{train, EpochLog, TrainMode, TrainOutcome};
