//! Synthetic grid VQA task: colored cells on a black grid with presence,
//! counting and comparison questions; dataset files; evaluation scenarios
//! and accuracy metrics.

mod generate;
mod io;
mod metrics;
mod sample;
mod scenario;
mod vocab;

pub use generate::{generate, TaskConfig, CHANNELS};
pub use io::{load, save, to_line, vocab_path};
pub use metrics::{argmax, evaluate, predict, Metrics};
pub use sample::{QType, VQASample, ANSWERS, COUNT_BASE, FEWER, MAX_COUNT, MORE, NO, N_ANSWERS, SAME, YES};
pub use scenario::{apply_scenario, swap_assignment, Scenario};
pub use vocab::{Vocab, COLORS, PAD};
