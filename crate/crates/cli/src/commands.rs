//! Subcommand implementations. Each returns a report value; rendering it
//! as text is the caller's business, so the same code backs the binary
//! and the tests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rsak_core::data::{self, apply_scenario, evaluate, Metrics, Scenario, TaskConfig, VQASample, Vocab};
use rsak_core::model::{attention_map, model_forward, AttentionMap};
use rsak_core::rsadapter::{adapter_arith_ops, model_arith_ops, param_count, Phase};
use rsak_core::training::{gradcheck, jitter, train, GradcheckReport, TrainConfig, TrainMode};
use rsak_core::{AdapterVariant, FreezePolicy, Matrix, ModelConfig, ModelWeights, Rng};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

fn load_data(path: &Path) -> CliResult<Vec<VQASample>> {
    data::load(path).map_err(|e| CliError::Data(e.to_string()))
}

fn load_ckpt(path: &Path) -> CliResult<(ModelWeights, FreezePolicy)> {
    Ok(checkpoint::load(path)?)
}

fn save_ckpt(path: &Path, w: &ModelWeights, policy: FreezePolicy) -> CliResult<()> {
    Ok(checkpoint::save(path, w, policy)?)
}

/// Rejects samples the model cannot consume before any work starts.
fn check_compatible(w: &ModelWeights, samples: &[VQASample], what: &str) -> CliResult<()> {
    let cfg = &w.cfg;
    for (i, s) in samples.iter().enumerate() {
        let bad = |m: String| CliError::Data(format!("{what}: sample {i}: {m}"));
        if s.image.shape() != (cfg.image_side * cfg.image_side, cfg.patch_channels) {
            return Err(bad(format!(
                "image shape {:?} does not fit a {}x{}x{} model input",
                s.image.shape(),
                cfg.image_side,
                cfg.image_side,
                cfg.patch_channels
            )));
        }
        if s.tokens.len() > cfg.max_text_len {
            return Err(bad(format!(
                "{} tokens, model accepts {}",
                s.tokens.len(),
                cfg.max_text_len
            )));
        }
        if let Some(t) = s.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(bad(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        if s.answer >= cfg.n_answers {
            return Err(bad(format!("answer {} outside {} classes", s.answer, cfg.n_answers)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: ModelWeights,
    pub policy: FreezePolicy,
    /// Test metrics of the final weights (standard scenario).
    pub test: Metrics,
    pub tunable_params: usize,
    /// The tab-separated training log, header included.
    pub log: String,
    /// (split, best epoch, best accuracy).
    pub best: Vec<(String, usize, f64)>,
}

/// Trains the configured mode on the configured data.
pub fn run_training(run: &RunConfig, train_set: &[VQASample], test_set: &[VQASample]) -> CliResult<TrainReport> {
    let cfg = run.model_config();
    let weights = ModelWeights::init(&cfg, run.train.seed)?;
    check_compatible(&weights, train_set, "training data")?;
    check_compatible(&weights, test_set, "test data")?;
    let inputs = match run.scenario {
        Scenario::RandomImageTrain => apply_scenario(train_set, Scenario::RandomImageTrain, run.train.seed),
        _ => train_set.to_vec(),
    };
    let policy = run.mode.policy();
    let mut log = Vec::new();
    let out = train(
        weights,
        &inputs,
        &[("test", test_set)],
        &run.train,
        policy,
        Some(&mut log),
    )?;
    let test = evaluate(&out.weights, test_set, Scenario::Standard, 0)?;
    Ok(TrainReport {
        weights: out.weights,
        policy,
        test,
        tunable_params: out.tunable_params,
        log: String::from_utf8(log).expect("log is UTF-8"),
        best: out.best,
    })
}

/// `train`: reads the config and data, trains, writes the checkpoint and
/// `<out>.log.tsv`.
pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> CliResult<TrainReport> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let train_set = load_data(&run.data.train)?;
    let test_set = load_data(&run.data.test)?;
    let report = run_training(&run, &train_set, &test_set)?;
    save_ckpt(out, &report.weights, report.policy)?;
    fs::write(log_path(out), &report.log)?;
    Ok(report)
}

pub fn log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.tsv");
    ckpt.with_file_name(name)
}

// ----------------------------------------------------------------- eval

pub fn cmd_eval(ckpt: &Path, data_path: &Path, scenario: Scenario, seed: u64) -> CliResult<Metrics> {
    let (w, _) = load_ckpt(ckpt)?;
    let samples = load_data(data_path)?;
    check_compatible(&w, &samples, "data")?;
    Ok(evaluate(&w, &samples, scenario, seed)?)
}

// ---------------------------------------------------------------- merge

#[derive(Debug, Clone, Serialize)]
pub struct MergeReport {
    pub tensors_before: usize,
    pub tensors_after: usize,
    pub adapters: usize,
    pub params_before: usize,
    pub params_after: usize,
}

fn nothing_to_merge(w: &ModelWeights) -> CliResult<()> {
    if w.is_merged() {
        return Err(CliError::Data("nothing to merge: checkpoint is already merged".into()));
    }
    if !w.has_rs_adapters() {
        return Err(CliError::Data(
            "nothing to merge: checkpoint has no RSAdapter tensors".into(),
        ));
    }
    Ok(())
}

pub fn merge_weights(w: &ModelWeights) -> CliResult<(ModelWeights, MergeReport)> {
    nothing_to_merge(w)?;
    let m = w.merged()?;
    let report = MergeReport {
        tensors_before: w.param_shapes().len(),
        tensors_after: m.param_shapes().len(),
        adapters: w.adapters().count(),
        params_before: w.param_count(),
        params_after: m.param_count(),
    };
    Ok((m, report))
}

pub fn cmd_merge(ckpt: &Path, out: &Path) -> CliResult<MergeReport> {
    let (w, policy) = load_ckpt(ckpt)?;
    let (m, report) = merge_weights(&w)?;
    save_ckpt(out, &m, policy)?;
    Ok(report)
}

// --------------------------------------------------------- verify-merge

/// Random model inputs: question lengths in `1..=max_text_len`, non-pad
/// token ids, pixel values uniform in `[0, 1)`.
pub fn random_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<(Vec<usize>, Matrix)> {
    let mut rng = Rng::new(seed).fork("inputs");
    (0..n)
        .map(|_| {
            let len = 1 + rng.below(cfg.max_text_len.max(1));
            let tokens = (0..len).map(|_| 1 + rng.below(cfg.vocab_size - 1)).collect();
            let rows = cfg.image_side * cfg.image_side;
            let pixels = (0..rows * cfg.patch_channels).map(|_| rng.uniform()).collect();
            (
                tokens,
                Matrix::from_vec(rows, cfg.patch_channels, pixels).expect("sized"),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Largest logit difference between `a` and `b` over `inputs`.
pub fn max_logit_diff(a: &ModelWeights, b: &ModelWeights, inputs: &[(Vec<usize>, Matrix)]) -> CliResult<f64> {
    let mut max = 0.0f64;
    for (tokens, image) in inputs {
        let la = model_forward(a, tokens, image)?.logits;
        let lb = model_forward(b, tokens, image)?.logits;
        max = max.max(la.max_abs_diff(&lb));
    }
    Ok(max)
}

pub fn verify_merge(w: &ModelWeights, trials: usize, tol: f64, seed: u64) -> CliResult<VerifyReport> {
    let (m, _) = merge_weights(w)?;
    let inputs = random_inputs(&w.cfg, trials, seed);
    let max_abs_diff = max_logit_diff(w, &m, &inputs)?;
    Ok(VerifyReport {
        trials,
        max_abs_diff,
        tol,
        passed: max_abs_diff <= tol,
    })
}

pub fn cmd_verify_merge(ckpt: &Path, trials: usize, tol: f64, seed: u64) -> CliResult<VerifyReport> {
    let (w, _) = load_ckpt(ckpt)?;
    verify_merge(&w, trials, tol, seed)
}

// --------------------------------------------------------------- ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Placement,
    Skip,
    Bottleneck,
    Position,
    Layers,
}

/// One row of an ablation grid.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub cfg: ModelConfig,
    pub policy: FreezePolicy,
}

fn variant(label: impl Into<String>, mode: TrainMode, base: &ModelConfig) -> Variant {
    Variant {
        label: label.into(),
        cfg: mode.configure(base),
        policy: mode.policy(),
    }
}

/// The variant grid of `axis` around `base`.
pub fn ablation_variants(base: &ModelConfig, axis: Axis) -> Vec<Variant> {
    let n = base.n_layers;
    match axis {
        Axis::Placement => vec![
            variant("linear_probe", TrainMode::LinearProbe, base),
            variant("rsadapter_msa", TrainMode::RsadapterMsaOnly, base),
            variant("rsadapter_mlp", TrainMode::RsadapterMlpOnly, base),
            variant("scaling_rsadapter", TrainMode::Rsadapter, base),
            variant("full_finetune", TrainMode::FullFinetune, base),
        ],
        Axis::Skip => {
            let mut out = Vec::new();
            for (name, mode) in [
                ("msa", TrainMode::RsadapterMsaOnly),
                ("mlp", TrainMode::RsadapterMlpOnly),
                ("msa+mlp", TrainMode::Rsadapter),
            ] {
                for sc in [true, false] {
                    let mut v = variant(format!("{name} {}", if sc { "w/ sc" } else { "w/o sc" }), mode, base);
                    v.cfg.skip_connection_in_adapter = sc;
                    out.push(v);
                }
            }
            out
        }
        Axis::Bottleneck => [2, 4, 8, 16]
            .into_iter()
            .map(|dp| {
                let mut v = variant(format!("d'={dp}"), TrainMode::Rsadapter, base);
                v.cfg.d_prime = dp;
                v
            })
            .collect(),
        Axis::Position => {
            let keep = |name: &str, l: usize| match name {
                "top" => l >= n / 2,
                "bottom" => l < n / 2,
                "even" => l % 2 == 0,
                "odd" => l % 2 == 1,
                _ => true,
            };
            ["top", "bottom", "even", "odd", "all"]
                .into_iter()
                .map(|name| {
                    let mut v = variant(name, TrainMode::Rsadapter, base);
                    v.cfg.adapter_layer_mask = (0..n).map(|l| keep(name, l)).collect();
                    v
                })
                .collect()
        }
        Axis::Layers => {
            let mut counts: Vec<usize> = (1..=4).map(|q| (q * n).div_ceil(4).max(1)).collect();
            counts.dedup();
            counts
                .into_iter()
                .map(|k| {
                    let mut v = variant(format!("layers={k}"), TrainMode::Rsadapter, base);
                    v.cfg.n_layers = k;
                    v.cfg.adapter_layer_mask = vec![true; k];
                    v
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub total_params: usize,
    pub tunable_params: usize,
    /// `None` when the grid was only counted.
    pub metrics: Option<Metrics>,
}

impl AblationRow {
    pub fn tsv_header() -> &'static str {
        "variant\ttotal_params\ttunable_params\taverage_accuracy\toverall_accuracy"
    }

    pub fn tsv_row(&self) -> String {
        let (aa, oa) = match &self.metrics {
            Some(m) => (
                format!("{:.6}", m.average_accuracy),
                format!("{:.6}", m.overall_accuracy),
            ),
            None => ("-".into(), "-".into()),
        };
        format!(
            "{}\t{}\t{}\t{aa}\t{oa}",
            self.label, self.total_params, self.tunable_params
        )
    }
}

/// Runs (or, with `train_cfg = None`, only counts) every variant of `axis`.
/// Every variant starts from the same seed, so shared backbone tensors are
/// identical across rows.
pub fn ablate(
    base: &ModelConfig,
    axis: Axis,
    train_cfg: Option<&TrainConfig>,
    train_set: &[VQASample],
    test_set: &[VQASample],
) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in ablation_variants(base, axis) {
        let counts = param_count(&v.cfg, v.policy, Phase::Train);
        let metrics = match train_cfg {
            None => None,
            Some(tc) => {
                let w = ModelWeights::init(&v.cfg, tc.seed)?;
                check_compatible(&w, train_set, "training data")?;
                check_compatible(&w, test_set, "test data")?;
                let out = train(w, train_set, &[], tc, v.policy, None)?;
                if out.tunable_params != counts.tunable_exact {
                    return Err(CliError::Verification(format!(
                        "{}: trained {} parameters, accounting says {}",
                        v.label, out.tunable_params, counts.tunable_exact
                    )));
                }
                Some(evaluate(&out.weights, test_set, Scenario::Standard, 0)?)
            }
        };
        rows.push(AblationRow {
            label: v.label,
            total_params: counts.total,
            tunable_params: counts.tunable_exact,
            metrics,
        });
    }
    Ok(rows)
}

pub fn cmd_ablate(config: &Path, axis: Axis, count_only: bool) -> CliResult<Vec<AblationRow>> {
    let run = RunConfig::load(config)?;
    if count_only {
        return ablate(&run.model, axis, None, &[], &[]);
    }
    let train_set = load_data(&run.data.train)?;
    let test_set = load_data(&run.data.test)?;
    ablate(&run.model, axis, Some(&run.train), &train_set, &test_set)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub iters: usize,
    pub unmerged_secs: f64,
    pub merged_secs: f64,
    /// merged / unmerged mean time.
    pub ratio: f64,
    /// Arithmetic operations of one forward pass for one sample.
    pub unmerged_ops: u64,
    pub merged_ops: u64,
    pub adapters: usize,
    pub tokens: usize,
    /// Ops saved by one adapter on one token.
    pub saved_per_adapter_token: u64,
    /// `2(d'² + d²) + (d' + d)`.
    pub expected_saving: u64,
    pub max_abs_diff: f64,
}

fn forward_batch(w: &ModelWeights, inputs: &[(Vec<usize>, Matrix)]) -> CliResult<Vec<Matrix>> {
    inputs
        .iter()
        .map(|(t, img)| Ok(model_forward(w, t, img)?.logits))
        .collect()
}

/// Times forward passes over one batch with unmerged and merged weights.
/// Warm-up iterations are excluded and the two models alternate which one
/// runs first. Fails verification if their logits differ by more than 1e-9.
pub fn bench(w: &ModelWeights, batch: usize, iters: usize, warmup: usize, seed: u64) -> CliResult<BenchReport> {
    let (m, _) = merge_weights(w)?;
    let inputs = random_inputs(&w.cfg, batch, seed);
    for _ in 0..warmup {
        forward_batch(w, &inputs)?;
        forward_batch(&m, &inputs)?;
    }
    let mut unmerged = 0.0;
    let mut merged = 0.0;
    let mut max_abs_diff = 0.0f64;
    for i in 0..iters.max(1) {
        let time = |which: &ModelWeights| -> CliResult<(f64, Vec<Matrix>)> {
            let t = Instant::now();
            let out = forward_batch(which, &inputs)?;
            Ok((t.elapsed().as_secs_f64(), out))
        };
        let ((tu, lu), (tm, lm)) = if i % 2 == 0 {
            let u = time(w)?;
            (u, time(&m)?)
        } else {
            let mm = time(&m)?;
            (time(w)?, mm)
        };
        unmerged += tu;
        merged += tm;
        for (a, b) in lu.iter().zip(&lm) {
            max_abs_diff = max_abs_diff.max(a.max_abs_diff(b));
        }
    }
    let n = iters.max(1) as f64;
    let cfg = &w.cfg;
    let (d, dp) = (cfg.d as u64, cfg.d_prime as u64);
    let report = BenchReport {
        batch,
        iters: iters.max(1),
        unmerged_secs: unmerged / n,
        merged_secs: merged / n,
        ratio: merged / unmerged,
        unmerged_ops: model_arith_ops(cfg, Phase::Train),
        merged_ops: model_arith_ops(cfg, Phase::Inference),
        adapters: cfg.adapter_count(),
        tokens: cfg.seq_len(),
        saved_per_adapter_token: adapter_arith_ops(cfg.d, cfg.d_prime, AdapterVariant::Rs, Phase::Train)
            - adapter_arith_ops(cfg.d, cfg.d_prime, AdapterVariant::Rs, Phase::Inference),
        expected_saving: 2 * (dp * dp + d * d) + (dp + d),
        max_abs_diff,
    };
    if max_abs_diff > 1e-9 {
        return Err(CliError::Verification(format!(
            "merged and unmerged logits differ by {max_abs_diff:e}"
        )));
    }
    Ok(report)
}

pub fn cmd_bench(ckpt: &Path, batch: usize, iters: usize, warmup: usize, seed: u64) -> CliResult<BenchReport> {
    let (w, _) = load_ckpt(ckpt)?;
    bench(&w, batch, iters, warmup, seed)
}

// ------------------------------------------------------------ gradcheck

/// The small model used by `gradcheck`: d=8, one layer, two heads, d'=4.
pub fn gradcheck_config() -> ModelConfig {
    let mut c = ModelConfig::toy();
    c.d = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_prime = 4;
    c.head_hidden = 8;
    c.adapter_layer_mask = vec![true];
    c
}

/// Gradient check of `mode` on the small model, after jittering every
/// parameter by `N(0, jitter²)` so the check does not run at the special
/// initial point.
pub fn run_gradcheck(mode: TrainMode, seed: u64, eps: f64, tol: f64, jitter_std: f64) -> CliResult<GradcheckReport> {
    let cfg = mode.configure(&gradcheck_config());
    let mut w = ModelWeights::init(&cfg, seed)?;
    jitter(&mut w, seed, jitter_std);
    let sample = data::generate(1, seed, &TaskConfig::default())?.remove(0);
    Ok(gradcheck(&w, &sample, mode.policy(), eps, tol)?)
}

// ------------------------------------------------------------- gen-data

pub fn cmd_gen_data(n: usize, seed: u64, grid_side: usize, out: &Path) -> CliResult<usize> {
    let samples = data::generate(n, seed, &TaskConfig { grid_side })?;
    data::save(out, &samples)?;
    Ok(samples.len())
}

// -------------------------------------------------------------- attmap

#[derive(Debug, Clone)]
pub struct AttmapReport {
    pub map: AttentionMap,
    /// Labels of the text segment, aligned with `map.text`.
    pub text_labels: Vec<String>,
    pub layer: usize,
}

impl AttmapReport {
    /// Patch weights, one grid row per line.
    pub fn grid_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.map.image.rows() {
            let row: Vec<String> = self.map.image.row(r).iter().map(|v| format!("{v:.17e}")).collect();
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        s
    }

    /// Plain (P2) graymap, scaled so the largest patch weight is white.
    pub fn pgm(&self) -> String {
        let img = &self.map.image;
        let max = img.data().iter().copied().fold(0.0f64, f64::max);
        let mut s = format!("P2\n{} {}\n255\n", img.cols(), img.rows());
        for r in 0..img.rows() {
            let row: Vec<String> = img
                .row(r)
                .iter()
                .map(|&v| {
                    if max > 0.0 {
                        ((v / max) * 255.0).round() as u8
                    } else {
                        0
                    }
                    .to_string()
                })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn token_lines(&self) -> String {
        self.text_labels
            .iter()
            .zip(&self.map.text)
            .map(|(t, w)| format!("{t}:{w:.17e}\n"))
            .collect()
    }
}

pub fn attmap(w: &ModelWeights, sample: &VQASample, layer: Option<usize>, vocab: &Vocab) -> CliResult<AttmapReport> {
    check_compatible(w, std::slice::from_ref(sample), "sample")?;
    let out = model_forward(w, &sample.tokens, &sample.image)?;
    let layer = layer.unwrap_or(out.attentions.len() - 1);
    let heads = out
        .attentions
        .get(layer)
        .ok_or_else(|| CliError::Config(format!("layer {layer} out of range ({} layers)", out.attentions.len())))?;
    let map = attention_map(heads, &w.cfg);
    let mut text_labels = vec!["[CLS]".to_string()];
    for i in 0..w.cfg.max_text_len {
        let id = sample.tokens.get(i).copied().unwrap_or(rsak_core::model::PAD_ID);
        text_labels.push(vocab.word(id).map_or_else(|| format!("#{id}"), str::to_string));
    }
    Ok(AttmapReport {
        map,
        text_labels,
        layer,
    })
}

/// Writes `<out>.txt`, `<out>.pgm` and `<out>.tokens.txt`.
pub fn cmd_attmap(
    ckpt: &Path,
    data_path: &Path,
    index: usize,
    layer: Option<usize>,
    out: &Path,
) -> CliResult<AttmapReport> {
    let (w, _) = load_ckpt(ckpt)?;
    let samples = load_data(data_path)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| CliError::Data(format!("sample {index} out of range ({} samples)", samples.len())))?;
    let vocab = fs::read_to_string(data::vocab_path(data_path))
        .ok()
        .and_then(|t| serde_json::from_str::<Vocab>(&t).ok())
        .unwrap_or_default();
    let report = attmap(&w, sample, layer, &vocab)?;
    let with_ext = |ext: &str| {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(ext);
        out.with_file_name(name)
    };
    fs::write(with_ext(".txt"), report.grid_text())?;
    fs::write(with_ext(".pgm"), report.pgm())?;
    fs::write(with_ext(".tokens.txt"), report.token_lines())?;
    Ok(report)
}

/// Writes `key<TAB>value` lines.
pub fn write_kv(out: &mut dyn Write, pairs: &[(&str, String)]) -> std::io::Result<()> {
    for (k, v) in pairs {
        writeln!(out, "{k}\t{v}")?;
    }
    Ok(())
}
