use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, cross_entropy, lr_at, TrainConfig};
use super::store::ParamStore;
use crate::data::{argmax, evaluate, Scenario, VQASample};
use crate::error::{Error, Result};
use crate::model::{
    backward, forward_train, head_backward, head_cached, model_forward, AdapterMode, AdapterVariant, GradScope,
    ModelConfig, ModelWeights,
};
use crate::numerics::{Matrix, Rng};
use crate::rsadapter::{build_freeze_mask, FreezePolicy};

/// Samples per gradient chunk. Chunks are reduced in index order, so the
/// result does not depend on how many threads computed them.
const CHUNK: usize = 16;

/// Named training setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Head only, no adapters.
    LinearProbe,
    /// Every parameter, no adapters.
    FullFinetune,
    /// Parallel RS adapters beside both sub-blocks, with scaling factors.
    Rsadapter,
    RsadapterMsaOnly,
    RsadapterMlpOnly,
    /// Parallel adapters without the linear transforms.
    AdapterPlain,
    /// The model config exactly as given, adapters and head trainable.
    Configured,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::LinearProbe,
        TrainMode::FullFinetune,
        TrainMode::Rsadapter,
        TrainMode::RsadapterMsaOnly,
        TrainMode::RsadapterMlpOnly,
        TrainMode::AdapterPlain,
        TrainMode::Configured,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::LinearProbe => "linear_probe",
            TrainMode::FullFinetune => "full_finetune",
            TrainMode::Rsadapter => "rsadapter",
            TrainMode::RsadapterMsaOnly => "rsadapter_msa_only",
            TrainMode::RsadapterMlpOnly => "rsadapter_mlp_only",
            TrainMode::AdapterPlain => "adapter_plain",
            TrainMode::Configured => "configured",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMode> {
        let s = s.replace('-', "_");
        TrainMode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn policy(self) -> FreezePolicy {
        match self {
            TrainMode::LinearProbe => FreezePolicy::LinearProbe,
            TrainMode::FullFinetune => FreezePolicy::FullFinetune,
            _ => FreezePolicy::Adapters,
        }
    }

    /// The model configuration this mode trains, derived from `base`.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let rs = |mode| {
            let mut c = base.with_adapters(mode);
            c.adapter_variant = AdapterVariant::Rs;
            c.skip_connection_in_adapter = false;
            c
        };
        match self {
            TrainMode::LinearProbe | TrainMode::FullFinetune => base.with_adapters(AdapterMode::None),
            TrainMode::Rsadapter => {
                let mut c = rs(AdapterMode::ParallelBoth);
                c.scaling_enabled = true;
                c
            }
            TrainMode::RsadapterMsaOnly => rs(AdapterMode::ParallelMsa),
            TrainMode::RsadapterMlpOnly => rs(AdapterMode::ParallelMlp),
            TrainMode::AdapterPlain => {
                let mut c = rs(AdapterMode::ParallelBoth);
                c.adapter_variant = AdapterVariant::Plain;
                c
            }
            TrainMode::Configured => base.clone(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy of the predictions made while training.
    pub train_accuracy: f64,
    /// Overall accuracy on each evaluation split after the epoch.
    pub splits: Vec<(String, f64)>,
}

impl EpochLog {
    pub fn tsv_header(split_names: &[&str]) -> String {
        let mut cols = vec!["epoch", "step", "lr", "loss", "train_acc"];
        cols.extend_from_slice(split_names);
        cols.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.step.to_string(),
            format!("{:e}", self.lr),
            format!("{:.9}", self.loss),
            format!("{:.6}", self.train_accuracy),
        ];
        cols.extend(self.splits.iter().map(|(_, a)| format!("{a:.6}")));
        cols.join("\t")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub tunable_params: usize,
    /// Per evaluation split: (best epoch, best accuracy).
    pub best: Vec<(String, usize, f64)>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.loss)
    }
}

/// Thread pool for per-chunk gradients, capped by `RSAK_THREADS`.
fn pool() -> rayon::ThreadPool {
    let threads = std::env::var("RSAK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

struct ChunkResult {
    grads: ModelWeights,
    loss: f64,
    correct: usize,
}

/// Where a sample's head input comes from.
enum Inputs<'a> {
    Full(&'a [VQASample]),
    /// Frozen class-token features, for head-only training.
    Features(Vec<Matrix>, &'a [VQASample]),
}

fn chunk_grads(w: &ModelWeights, inputs: &Inputs<'_>, idx: &[usize], scope: GradScope) -> Result<ChunkResult> {
    let mut grads = w.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for &i in idx {
        let (logits, target) = match inputs {
            Inputs::Full(samples) => {
                let s = &samples[i];
                let (out, cache) = forward_train(w, &s.tokens, &s.image)?;
                let (l, g) = cross_entropy(out.logits.data(), s.answer)?;
                backward(w, &cache, &Matrix::row_vector(g), scope, &mut grads);
                loss += l;
                (out.logits, s.answer)
            }
            Inputs::Features(features, samples) => {
                let (logits, cache) = head_cached(&w.head, &features[i]);
                let (l, g) = cross_entropy(logits.data(), samples[i].answer)?;
                head_backward(&w.head, &cache, &Matrix::row_vector(g), Some(&mut grads.head));
                loss += l;
                (logits, samples[i].answer)
            }
        };
        correct += usize::from(argmax(logits.data()) == target);
    }
    Ok(ChunkResult { grads, loss, correct })
}

/// Trains `weights` on `train_set` under `policy`.
///
/// Deterministic given `cfg.seed`: the sample order of every epoch comes
/// from a dedicated shuffle stream, batch gradients are means over the
/// batch reduced in a fixed order, and only trainable tensors are ever
/// written back. When only the head trains, class-token features are
/// computed once and reused. RS adapters are trained through their folded
/// form (see [`crate::rsadapter::pull_back`]), which gives the same
/// gradients without the per-token transform products. Each epoch appends one tab-separated line to
/// `log_sink` (preceded by a header line).
pub fn train(
    weights: ModelWeights,
    train_set: &[VQASample],
    eval_sets: &[(&str, &[VQASample])],
    cfg: &TrainConfig,
    policy: FreezePolicy,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = train_set.iter().find(|s| s.answer >= weights.cfg.n_answers) {
        return Err(Error::TargetOutOfRange {
            target: s.answer,
            classes: weights.cfg.n_answers,
        });
    }
    let mut weights = weights;
    let mut store = ParamStore::from_weights(&weights);
    build_freeze_mask(policy, &mut store);
    let tunable_params = store.trainable_count();
    let scope = policy.grad_scope();
    let head_only = !scope.embeddings && !scope.backbone && !scope.adapters;
    let inputs = if head_only {
        let feats = train_set
            .iter()
            .map(|s| model_forward(&weights, &s.tokens, &s.image).map(|o| o.class_token))
            .collect::<Result<Vec<_>>>()?;
        Inputs::Features(feats, train_set)
    } else {
        Inputs::Full(train_set)
    };

    if let Some(sink) = log_sink.as_mut() {
        let names: Vec<&str> = eval_sets.iter().map(|(n, _)| *n).collect();
        writeln!(sink, "{}", EpochLog::tsv_header(&names)).map_err(|e| Error::io("<training log>", e))?;
    }

    let pool = pool();
    let mut shuffle = Rng::new(cfg.seed).fork("shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Vec<(String, usize, f64)> = eval_sets
        .iter()
        .map(|(n, _)| (n.to_string(), 0, f64::NEG_INFINITY))
        .collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        shuffle.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            // RS adapters are folded for the passes; their gradients are
            // pulled back exactly afterwards.
            let folded = if weights.has_rs_adapters() && !head_only {
                Some(weights.merged()?)
            } else {
                None
            };
            let pass_weights = folded.as_ref().unwrap_or(&weights);
            let results: Vec<Result<ChunkResult>> = pool.install(|| {
                batch
                    .par_chunks(CHUNK)
                    .map(|idx| chunk_grads(pass_weights, &inputs, idx, scope))
                    .collect()
            });
            let inv = 1.0 / batch.len() as f64;
            for r in results {
                let r = r?;
                if folded.is_some() {
                    store.accumulate_grads(&weights.pull_back_grads(&r.grads), inv);
                } else {
                    store.accumulate_grads(&r.grads, inv);
                }
                epoch_loss += r.loss;
                epoch_correct += r.correct;
            }
            step += 1;
            adam_step(&mut store, lr, step, cfg);
            store.write_trainable_to(&mut weights);
        }
        let n = train_set.len() as f64;
        let loss = epoch_loss / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let mut splits = Vec::with_capacity(eval_sets.len());
        for (k, (name, data)) in eval_sets.iter().enumerate() {
            let acc = evaluate(&weights, data, Scenario::Standard, 0)?.overall_accuracy;
            if acc > best[k].2 {
                best[k] = (name.to_string(), epoch, acc);
            }
            splits.push((name.to_string(), acc));
        }
        let entry = EpochLog {
            epoch,
            step,
            lr,
            loss,
            train_accuracy: epoch_correct as f64 / n,
            splits,
        };
        if let Some(sink) = log_sink.as_mut() {
            writeln!(sink, "{}", entry.tsv_row()).map_err(|e| Error::io("<training log>", e))?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        weights,
        log,
        steps: step,
        tunable_params,
        best,
    })
}
