use serde::{Deserialize, Serialize};

use super::sample::VQASample;
use crate::numerics::Rng;

/// Evaluation/training input manipulations probing reliance on the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Standard,
    /// Every image replaced by zeros.
    QuestionOnly,
    /// Each test image swapped for another test sample's image.
    RandomImageTest,
    /// The same swap, applied to the training inputs.
    RandomImageTrain,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Standard,
        Scenario::QuestionOnly,
        Scenario::RandomImageTest,
        Scenario::RandomImageTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Standard => "standard",
            Scenario::QuestionOnly => "question_only",
            Scenario::RandomImageTest => "random_image_test",
            Scenario::RandomImageTrain => "random_image_train",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        let s = s.replace('-', "_");
        Scenario::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Image indices drawn for the random-image scenarios: for each sample, a
/// uniformly chosen *other* sample (itself only when the set has one element).
pub fn swap_assignment(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed).fork("random_image");
    (0..n)
        .map(|i| if n < 2 { i } else { (i + 1 + rng.below(n - 1)) % n })
        .collect()
}

/// Returns a copy of `samples` with images transformed; questions and
/// answers are never changed.
pub fn apply_scenario(samples: &[VQASample], scenario: Scenario, seed: u64) -> Vec<VQASample> {
    match scenario {
        Scenario::Standard => samples.to_vec(),
        Scenario::QuestionOnly => samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.image.fill(0.0);
                s
            })
            .collect(),
        Scenario::RandomImageTest | Scenario::RandomImageTrain => swap_assignment(samples.len(), seed)
            .into_iter()
            .zip(samples)
            .map(|(j, s)| VQASample {
                image: samples[j].image.clone(),
                ..s.clone()
            })
            .collect(),
    }
}
