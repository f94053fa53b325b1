use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

/// Question family of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    Presence,
    Count,
    Comparison,
}

impl QType {
    pub const ALL: [QType; 3] = [QType::Presence, QType::Count, QType::Comparison];

    pub fn name(self) -> &'static str {
        match self {
            QType::Presence => "presence",
            QType::Count => "count",
            QType::Comparison => "comparison",
        }
    }

    /// Answer ids this question family can produce.
    pub fn answers(self) -> std::ops::Range<usize> {
        match self {
            QType::Presence => YES..NO + 1,
            QType::Count => COUNT_BASE..COUNT_BASE + MAX_COUNT + 1,
            QType::Comparison => MORE..SAME + 1,
        }
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Answer vocabulary: yes, no, the counts 0..=6, more, fewer, same.
pub const ANSWERS: [&str; 12] = ["yes", "no", "0", "1", "2", "3", "4", "5", "6", "more", "fewer", "same"];
pub const N_ANSWERS: usize = ANSWERS.len();
pub const YES: usize = 0;
pub const NO: usize = 1;
pub const COUNT_BASE: usize = 2;
pub const MAX_COUNT: usize = 6;
pub const MORE: usize = 9;
pub const FEWER: usize = 10;
pub const SAME: usize = 11;

/// One image–question–answer triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VQASample {
    /// `(side·side) x channels`, values in `[0, 1]`, row-major cells.
    pub image: Matrix,
    pub tokens: Vec<usize>,
    pub qtype: QType,
    pub answer: usize,
}

impl VQASample {
    /// Checks the sample's own invariants.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("question has no tokens".into());
        }
        if self.answer >= N_ANSWERS {
            return Err(format!("answer {} out of range", self.answer));
        }
        if !self.qtype.answers().contains(&self.answer) {
            return Err(format!(
                "answer `{}` is not a {} answer",
                ANSWERS[self.answer], self.qtype
            ));
        }
        Ok(())
    }
}
