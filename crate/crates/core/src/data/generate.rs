use serde::{Deserialize, Serialize};

use super::sample::{QType, VQASample, COUNT_BASE, FEWER, MAX_COUNT, MORE, NO, SAME, YES};
use super::vocab::{Vocab, COLORS};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Shape of the synthetic grid task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Cells per image side; one pixel per cell.
    pub grid_side: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { grid_side: 8 }
    }
}

pub const CHANNELS: usize = 3;

impl TaskConfig {
    pub fn cells(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Generates `n` samples deterministically from `seed`.
///
/// Question families are dealt round-robin (counts differ by at most one)
/// and, within each family, answers cycle through its classes, so every
/// family is class-balanced to within one sample. Images are then built to
/// realise the chosen answer: the asked-about colors get the required
/// counts, every other color an independent count in `0..=6`, and the
/// cells are scattered uniformly. Comparison counts are either equal or at
/// least two apart.
pub fn generate(n: usize, seed: u64, task: &TaskConfig) -> Result<Vec<VQASample>> {
    if n == 0 {
        return Err(Error::Balance {
            n,
            reason: "at least one sample is required".into(),
        });
    }
    if task.cells() < COLORS.len() * MAX_COUNT {
        return Err(Error::Balance {
            n,
            reason: format!(
                "a {0}x{0} grid cannot hold {1} cells of each of {2} colors",
                task.grid_side,
                MAX_COUNT,
                COLORS.len()
            ),
        });
    }
    let root = Rng::new(seed);
    let mut plan_rng = root.fork("plan");
    let mut seen = [0usize; 3];
    let mut plan: Vec<(QType, usize)> = (0..n)
        .map(|i| {
            let q = QType::ALL[i % 3];
            let k = seen[i % 3];
            seen[i % 3] += 1;
            let classes = q.answers();
            (q, classes.start + k % classes.len())
        })
        .collect();
    plan_rng.shuffle(&mut plan);

    let vocab = Vocab::default();
    let mut rng = root.fork("samples");
    Ok(plan
        .into_iter()
        .map(|(qtype, answer)| build(qtype, answer, task, &vocab, &mut rng))
        .collect())
}

fn build(qtype: QType, answer: usize, task: &TaskConfig, vocab: &Vocab, rng: &mut Rng) -> VQASample {
    let n_colors = COLORS.len();
    let mut counts: Vec<usize> = (0..n_colors).map(|_| rng.below(MAX_COUNT + 1)).collect();
    let color = rng.below(n_colors);
    let other = (color + 1 + rng.below(n_colors - 1)) % n_colors;
    match qtype {
        QType::Presence => {
            counts[color] = if answer == YES { 1 + rng.below(MAX_COUNT) } else { 0 };
            debug_assert!(answer == YES || answer == NO);
        }
        QType::Count => counts[color] = answer - COUNT_BASE,
        QType::Comparison => {
            let (a, b) = match answer {
                SAME => {
                    let c = rng.below(MAX_COUNT + 1);
                    (c, c)
                }
                MORE | FEWER => {
                    let low = rng.below(MAX_COUNT - 1);
                    let high = low + 2 + rng.below(MAX_COUNT - 1 - low);
                    if answer == MORE {
                        (high, low)
                    } else {
                        (low, high)
                    }
                }
                _ => unreachable!("comparison answers are more/fewer/same"),
            };
            counts[color] = a;
            counts[other] = b;
        }
    }
    let mut cells: Vec<usize> = (0..task.cells()).collect();
    rng.shuffle(&mut cells);
    let mut image = Matrix::zeros(task.cells(), CHANNELS);
    let mut next = cells.into_iter();
    for (c, &k) in counts.iter().enumerate() {
        for cell in next.by_ref().take(k) {
            image.row_mut(cell).copy_from_slice(&COLORS[c].1);
        }
    }
    VQASample {
        image,
        tokens: vocab.question(qtype, color, other),
        qtype,
        answer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let task = TaskConfig::default();
        let a = generate(300, 9, &task).unwrap();
        assert_eq!(a, generate(300, 9, &task).unwrap());
        assert_ne!(a, generate(300, 10, &task).unwrap());
        for q in QType::ALL {
            let of: Vec<_> = a.iter().filter(|s| s.qtype == q).collect();
            assert_eq!(of.len(), 100);
            let per: Vec<usize> = q
                .answers()
                .map(|c| of.iter().filter(|s| s.answer == c).count())
                .collect();
            assert!(
                per.iter().max().unwrap() - per.iter().min().unwrap() <= 1,
                "{q}: {per:?}"
            );
        }
        assert!(a.iter().all(|s| s.check().is_ok()));
    }

    #[test]
    fn impossible_requests() {
        assert!(matches!(
            generate(0, 1, &TaskConfig::default()),
            Err(Error::Balance { .. })
        ));
        assert!(generate(5, 1, &TaskConfig { grid_side: 4 }).is_err());
    }
}
