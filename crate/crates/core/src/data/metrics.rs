use std::collections::BTreeMap;

use serde::Serialize;

use super::sample::{QType, VQASample};
use super::scenario::{apply_scenario, Scenario};
use crate::error::Result;
use crate::model::{model_forward, ModelWeights};

/// Accuracy summary of one prediction run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Only question families present in the data appear.
    pub per_type_accuracy: BTreeMap<QType, f64>,
    pub per_type_count: BTreeMap<QType, usize>,
    /// Unweighted mean of the per-family accuracies.
    pub average_accuracy: f64,
    /// Correct predictions over all predictions.
    pub overall_accuracy: f64,
    /// `confusion[answer][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub total: usize,
    pub correct: usize,
}

impl Metrics {
    /// Builds metrics from predictions aligned with `samples`.
    pub fn from_predictions(samples: &[VQASample], predictions: &[usize], n_answers: usize) -> Metrics {
        assert_eq!(samples.len(), predictions.len(), "one prediction per sample");
        let mut confusion = vec![vec![0u64; n_answers]; n_answers];
        let mut hits: BTreeMap<QType, (usize, usize)> = BTreeMap::new();
        for (s, &p) in samples.iter().zip(predictions) {
            confusion[s.answer][p] += 1;
            let e = hits.entry(s.qtype).or_default();
            e.0 += usize::from(s.answer == p);
            e.1 += 1;
        }
        let per_type_accuracy: BTreeMap<QType, f64> =
            hits.iter().map(|(&q, &(c, n))| (q, c as f64 / n as f64)).collect();
        let per_type_count = hits.iter().map(|(&q, &(_, n))| (q, n)).collect();
        let correct: usize = hits.values().map(|h| h.0).sum();
        let total = samples.len();
        let average_accuracy = if per_type_accuracy.is_empty() {
            0.0
        } else {
            per_type_accuracy.values().sum::<f64>() / per_type_accuracy.len() as f64
        };
        let overall_accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Metrics {
            per_type_accuracy,
            per_type_count,
            average_accuracy,
            overall_accuracy,
            confusion,
            total,
            correct,
        }
    }

    /// Tab-separated header matching [`Metrics::tsv_row`].
    pub fn tsv_header() -> String {
        let mut cols = vec!["label".to_string()];
        cols.extend(QType::ALL.iter().map(|q| q.name().to_string()));
        cols.extend(["aa".into(), "oa".into(), "n".into()]);
        cols.join("\t")
    }

    pub fn tsv_row(&self, label: &str) -> String {
        let mut cols = vec![label.to_string()];
        for q in QType::ALL {
            cols.push(self.per_type_accuracy.get(&q).map_or("-".into(), |a| format!("{a:.6}")));
        }
        cols.push(format!("{:.6}", self.average_accuracy));
        cols.push(format!("{:.6}", self.overall_accuracy));
        cols.push(self.total.to_string());
        cols.join("\t")
    }
}

/// Index of the largest logit; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax answers. RS adapters are folded first, as they would be when
/// deployed; the folded model agrees with the unfolded one to rounding.
pub fn predict(w: &ModelWeights, samples: &[VQASample]) -> Result<Vec<usize>> {
    let folded;
    let w = if w.has_rs_adapters() {
        folded = w.merged()?;
        &folded
    } else {
        w
    };
    samples
        .iter()
        .map(|s| model_forward(w, &s.tokens, &s.image).map(|o| argmax(o.logits.data())))
        .collect()
}

/// Applies `scenario` (with `seed` for the random-image swaps) and scores
/// the argmax predictions.
pub fn evaluate(w: &ModelWeights, samples: &[VQASample], scenario: Scenario, seed: u64) -> Result<Metrics> {
    let view = apply_scenario(samples, scenario, seed);
    let preds = predict(w, &view)?;
    Ok(Metrics::from_predictions(&view, &preds, w.cfg.n_answers))
}
