//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::time::Instant;

use rsak_cli::commands::{self, TrainReport};
use rsak_cli::{Checkpoint, DataPaths, RunConfig};
use rsak_core::data::{self, evaluate, Scenario, TaskConfig, VQASample, Vocab};
use rsak_core::model::{block_forward, model_forward, param_group, ParamGroup};
use rsak_core::numerics::rng_normal;
use rsak_core::rsadapter::{
    adapter_forward, formula_train_per_adapter, merge, merged_forward, param_count, AdapterWeights,
};
use rsak_core::training::{jitter, train, weights_checksum, TrainConfig, TrainMode};
use rsak_core::{AdapterMode, AdapterVariant, FreezePolicy, Matrix, ModelConfig, ModelWeights, Phase, Rng};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

/// Prints the criterion line; a run over its CPU-time budget fails.
fn report(id: usize, name: &str, started: Instant, budget_secs: Option<f64>, o: &mut Outcome) {
    let secs = started.elapsed().as_secs_f64();
    if let Some(b) = budget_secs {
        if secs > b {
            o.passed = false;
            o.detail.push_str(&format!("; over the {b:.0}s budget"));
        }
    }
    println!(
        "criterion {id:>2} {name:<28} {} ({secs:.1}s) {}",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail
    );
}

// ---------------------------------------------------------------- 1

fn merge_exactness() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst_adapter = 0.0f64;
    let instances = 1000;
    for _ in 0..instances {
        let d = 1 + rng.below(48);
        let d_prime = 1 + rng.below(24);
        let rows = 1 + rng.below(8);
        // Fan-in scaled weights keep activations O(1) so that 1e-12 is a
        // meaningful absolute bound.
        let std = 1.0 / (d.max(d_prime) as f64).sqrt();
        let w = AdapterWeights::random(d, d_prime, &mut rng, std);
        let x = rng_normal(&mut rng, rows, d, 1.0);
        let a = adapter_forward(&x, &w, AdapterVariant::Rs, false).unwrap();
        let b = merged_forward(&x, &merge(&w)).unwrap();
        worst_adapter = worst_adapter.max(a.max_abs_diff(&b));
    }

    let mut cfg = ModelConfig::toy();
    cfg.d = 32;
    cfg.n_layers = 2;
    cfg.d_prime = 8;
    cfg.head_hidden = 32;
    cfg.adapter_layer_mask = vec![true; 2];
    let mut w = ModelWeights::init(&cfg, 7).unwrap();
    jitter(&mut w, 8, 0.05);
    let m = w.merged().unwrap();
    let samples = data::generate(100, 9, &TaskConfig::default()).unwrap();
    let worst_model = samples
        .iter()
        .map(|s| {
            let a = model_forward(&w, &s.tokens, &s.image).unwrap().logits;
            let b = model_forward(&m, &s.tokens, &s.image).unwrap().logits;
            a.max_abs_diff(&b)
        })
        .fold(0.0, f64::max);
    Outcome::new(
        worst_adapter <= 1e-12 && worst_model <= 1e-9,
        format!(
            "{instances} adapters max |diff| {worst_adapter:.2e}; d=32 N=2 model, 100 samples max |diff| {worst_model:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn parameter_arithmetic() -> Outcome {
    let per_layer = formula_train_per_adapter(768, 192);
    let cfg = ModelConfig::base_scale();
    let full = param_count(&cfg, FreezePolicy::Adapters, Phase::Train);
    let lp = param_count(
        &cfg.with_adapters(AdapterMode::None),
        FreezePolicy::LinearProbe,
        Phase::Train,
    );
    let full_m = full.tunable_formula as f64 / 1e6;
    let lp_m = lp.tunable_exact as f64 / 1e6;
    Outcome::new(
        per_layer == 296_832 && (full_m - 8.4).abs() <= 0.1 && (lp_m - 1.2).abs() <= 0.1,
        format!("per layer {per_layer}; scaling RSAdapter {full_m:.3}M tunable; linear probe {lp_m:.3}M"),
    )
}

// ---------------------------------------------------------------- 3

fn gradient_correctness() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [TrainMode::Rsadapter, TrainMode::FullFinetune] {
        let r = commands::run_gradcheck(mode, 0, 1e-5, 1e-6, 0.1).unwrap();
        ok &= r.passed;
        parts.push(format!(
            "{}: {} params, max rel err {:.2e} at {}",
            mode.name(),
            r.checked,
            r.max_rel_err,
            r.worst.unwrap_or_default()
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 4

fn freeze_contract() -> Outcome {
    let train_set = data::generate(800, 3, &TaskConfig::default()).unwrap();
    // 800 samples at batch 16 for four epochs: 200 steps.
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 16,
        warmup_epochs: 4,
        warmup_lr: 1e-3,
        base_lr: 1e-3,
        seed: 1,
        ..TrainConfig::default()
    };
    let rs = TrainMode::Rsadapter.configure(&ModelConfig::toy());
    let mut ok = true;
    let mut parts = Vec::new();
    for (policy, frozen) in [
        (
            FreezePolicy::Adapters,
            &[ParamGroup::Embedding, ParamGroup::Backbone][..],
        ),
        (
            FreezePolicy::LinearProbe,
            &[ParamGroup::Embedding, ParamGroup::Backbone, ParamGroup::Adapter][..],
        ),
    ] {
        let w = ModelWeights::init(&rs, 4).unwrap();
        let mut before = Vec::new();
        w.visit(&mut |name, _, _| {
            if frozen.contains(&param_group(name)) {
                before.push(name.to_string());
            }
        });
        let sums: Vec<u64> = before.iter().map(|n| weights_checksum(&w, |m| m == n)).collect();
        let out = train(w, &train_set, &[], &tc, policy, None).unwrap();
        let changed = before
            .iter()
            .zip(&sums)
            .filter(|(n, s)| weights_checksum(&out.weights, |m| m == n.as_str()) != **s)
            .count();
        ok &= changed == 0 && out.steps == 200;
        parts.push(format!(
            "{policy:?}: {} steps, {changed}/{} frozen tensors changed",
            out.steps,
            before.len()
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 5

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn noop_init() -> Outcome {
    let base = ModelConfig::toy();
    let vanilla = ModelWeights::init(&base.with_adapters(AdapterMode::None), 11).unwrap();
    let adopted = ModelWeights::init(&TrainMode::Rsadapter.configure(&base), 11).unwrap();
    let merged = adopted.merged().unwrap();
    let mut rng = Rng::new(12);
    let mut block_mismatch = 0;
    for (bv, ba) in vanilla.blocks.iter().zip(&adopted.blocks) {
        let x = rng_normal(&mut rng, base.seq_len(), base.d, 1.0);
        let yv = block_forward(&x, bv, &vanilla.cfg).unwrap();
        let ya = block_forward(&x, ba, &adopted.cfg).unwrap();
        block_mismatch += usize::from(bits(&yv) != bits(&ya));
    }
    let samples = data::generate(50, 13, &TaskConfig::default()).unwrap();
    let (mut model_mismatch, mut merge_mismatch) = (0, 0);
    for s in &samples {
        let v = model_forward(&vanilla, &s.tokens, &s.image).unwrap().logits;
        let a = model_forward(&adopted, &s.tokens, &s.image).unwrap().logits;
        let m = model_forward(&merged, &s.tokens, &s.image).unwrap().logits;
        model_mismatch += usize::from(bits(&v) != bits(&a));
        merge_mismatch += usize::from(bits(&a) != bits(&m));
    }
    Outcome::new(
        block_mismatch + model_mismatch + merge_mismatch == 0,
        format!(
            "bitwise mismatches: blocks {block_mismatch}/{}, logits {model_mismatch}/50, merged vs unmerged {merge_mismatch}/50",
            base.n_layers
        ),
    )
}

// ---------------------------------------------------------------- 6-10

const SEEDS: [u64; 3] = [0, 1, 2];

fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 16,
        warmup_epochs: 4,
        warmup_lr: 2e-3,
        base_lr: 4e-4,
        seed,
        ..TrainConfig::default()
    }
}

fn toy_run(mode: TrainMode, scenario: Scenario, seed: u64) -> RunConfig {
    RunConfig {
        mode,
        scenario,
        model: ModelConfig::toy(),
        train: toy_train_config(seed),
        // Unused: the harness passes the samples directly.
        data: DataPaths {
            train: "train.jsonl".into(),
            test: "test.jsonl".into(),
        },
    }
}

struct ToyTask {
    train: Vec<VQASample>,
    test: Vec<VQASample>,
}

impl ToyTask {
    fn new() -> Self {
        let task = TaskConfig::default();
        ToyTask {
            train: data::generate(5000, 1, &task).unwrap(),
            test: data::generate(1000, 2, &task).unwrap(),
        }
    }

    fn run(&self, mode: TrainMode, scenario: Scenario, seed: u64) -> TrainReport {
        commands::run_training(&toy_run(mode, scenario, seed), &self.train, &self.test).unwrap()
    }
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_runs(v: &[f64]) -> String {
    let each: Vec<String> = v.iter().map(|x| format!("{:.1}", pct(*x))).collect();
    format!("{:.2} [{}]", pct(mean(v)), each.join(" "))
}

struct ToyResults {
    rs_models: Vec<ModelWeights>,
    rs: Vec<f64>,
}

fn table_ordering(task: &ToyTask) -> (Outcome, ToyResults) {
    let oa = |mode| -> (Vec<f64>, Vec<ModelWeights>) {
        SEEDS
            .iter()
            .map(|&s| {
                let r = task.run(mode, Scenario::Standard, s);
                (r.test.overall_accuracy, r.weights)
            })
            .unzip()
    };
    let (lp, _) = oa(TrainMode::LinearProbe);
    let (rs, rs_models) = oa(TrainMode::Rsadapter);
    let (msa, _) = oa(TrainMode::RsadapterMsaOnly);
    let (mlp, _) = oa(TrainMode::RsadapterMlpOnly);
    let gap = pct(mean(&rs) - mean(&lp));
    let mlp_vs_msa = pct(mean(&mlp) - mean(&msa));
    let outcome = Outcome::new(
        gap >= 5.0 && mlp_vs_msa >= -1.0,
        format!(
            "OA% linear probe {}, scaling RSAdapter {}, MSA {}, MLP {}; RS-LP {gap:+.2} (need >= 5), MLP-MSA {mlp_vs_msa:+.2} (need >= -1)",
            fmt_runs(&lp),
            fmt_runs(&rs),
            fmt_runs(&msa),
            fmt_runs(&mlp)
        ),
    );
    (outcome, ToyResults { rs_models, rs })
}

fn scenario_oa(models: &[ModelWeights], test: &[VQASample], scenario: Scenario) -> Vec<f64> {
    models
        .iter()
        .map(|w| evaluate(w, test, scenario, 0).unwrap().overall_accuracy)
        .collect()
}

fn question_only_gap(task: &ToyTask, toy: &ToyResults) -> Outcome {
    let qo = scenario_oa(&toy.rs_models, &task.test, Scenario::QuestionOnly);
    let gap = pct(mean(&toy.rs) - mean(&qo));
    Outcome::new(
        gap >= 10.0,
        format!(
            "standard {} vs question-only {}: gap {gap:.2} (need >= 10)",
            fmt_runs(&toy.rs),
            fmt_runs(&qo)
        ),
    )
}

fn language_bias(task: &ToyTask, toy: &ToyResults) -> Outcome {
    let s2 = scenario_oa(&toy.rs_models, &task.test, Scenario::RandomImageTest);
    let s3 = task.run(TrainMode::Rsadapter, Scenario::RandomImageTrain, SEEDS[0]);
    let s1_seed0 = toy.rs[0];
    let s3_oa = s3.test.overall_accuracy;
    Outcome::new(
        mean(&s2) < mean(&toy.rs) && s3_oa <= s1_seed0,
        format!(
            "S1 {} ; S2 random test images {} ; S3 random train images (seed 0) {:.2} vs S1 seed 0 {:.2}",
            fmt_runs(&toy.rs),
            fmt_runs(&s2),
            pct(s3_oa),
            pct(s1_seed0)
        ),
    )
}

fn inference_cost(toy: &ToyResults) -> Outcome {
    let r = commands::bench(&toy.rs_models[0], 64, 10, 2, 0).unwrap();
    Outcome::new(
        r.saved_per_adapter_token == r.expected_saving
            && r.unmerged_ops - r.merged_ops == r.expected_saving * (r.adapters * r.tokens) as u64
            && r.merged_secs <= r.unmerged_secs,
        format!(
            "ops/sample {} -> {} (saved {} per adapter-token, expected {}); batch 64: unmerged {:.4}s merged {:.4}s (ratio {:.3})",
            r.unmerged_ops,
            r.merged_ops,
            r.saved_per_adapter_token,
            r.expected_saving,
            r.unmerged_secs,
            r.merged_secs,
            r.ratio
        ),
    )
}

fn attention_maps(task: &ToyTask, toy: &ToyResults) -> Outcome {
    let vocab = Vocab::default();
    let w = &toy.rs_models[0];
    let (mut negative, mut worst_sum) = (0usize, 0.0f64);
    let mut maps = 0;
    for s in &task.test {
        for layer in 0..w.cfg.n_layers {
            let r = commands::attmap(w, s, Some(layer), &vocab).unwrap();
            let m = &r.map;
            negative += m
                .full_row
                .iter()
                .chain(&m.text)
                .chain(m.image.data())
                .filter(|v| **v < 0.0)
                .count();
            negative += usize::from(m.image_class < 0.0);
            worst_sum = worst_sum.max((m.full_row.iter().sum::<f64>() - 1.0).abs());
            let parts = m.text.iter().sum::<f64>() + m.image_class + m.image.data().iter().sum::<f64>();
            worst_sum = worst_sum.max((parts - 1.0).abs());
            maps += 1;
        }
    }
    Outcome::new(
        negative == 0 && worst_sum <= 1e-9,
        format!("{maps} maps: {negative} negative entries, max |row sum - 1| {worst_sum:.2e}"),
    )
}

// ---------------------------------------------------------------- 11

fn random_checkpoint(rng: &mut Rng) -> Vec<u8> {
    let modes = [
        TrainMode::LinearProbe,
        TrainMode::FullFinetune,
        TrainMode::Rsadapter,
        TrainMode::RsadapterMsaOnly,
        TrainMode::RsadapterMlpOnly,
        TrainMode::AdapterPlain,
    ];
    let mode = modes[rng.below(modes.len())];
    let mut base = ModelConfig::toy();
    base.n_heads = 1 + rng.below(2);
    base.d = base.n_heads * (2 + 2 * rng.below(4));
    base.n_layers = 1 + rng.below(3);
    base.d_prime = 1 + rng.below(6);
    base.head_hidden = 2 + rng.below(12);
    base.adapter_layer_mask = (0..base.n_layers).map(|_| rng.below(3) > 0).collect();
    base.adapter_layer_mask[0] = true;
    let mut w = ModelWeights::init(&mode.configure(&base), rng.below(1 << 20) as u64).unwrap();
    jitter(&mut w, rng.below(1 << 20) as u64, 0.3);
    if w.has_rs_adapters() && rng.below(2) == 0 {
        w = w.merged().unwrap();
    }
    let policy = [
        FreezePolicy::LinearProbe,
        FreezePolicy::FullFinetune,
        FreezePolicy::Adapters,
    ][rng.below(3)];
    Checkpoint::from_model(&w, policy).encode()
}

fn checkpoint_integrity() -> Outcome {
    let mut rng = Rng::new(77);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.rsak");
    let mut identical = 0;
    let mut pool = Vec::new();
    for _ in 0..100 {
        let bytes = random_checkpoint(&mut rng);
        let ck = Checkpoint::decode(&bytes).unwrap();
        let (w, policy) = ck.to_model().unwrap();
        rsak_cli::checkpoint::save(&path, &w, policy).unwrap();
        let (w2, policy2) = rsak_cli::checkpoint::load(&path).unwrap();
        let again = Checkpoint::from_model(&w2, policy2).encode();
        let on_disk = std::fs::read(&path).unwrap();
        identical += usize::from(again == bytes && on_disk == bytes && w2 == w);
        pool.push(bytes);
    }
    let mut detected = 0;
    for _ in 0..100 {
        let mut bytes = pool[rng.below(pool.len())].clone();
        let at = rng.below(bytes.len());
        bytes[at] ^= 1 + rng.below(255) as u8;
        let caught = match Checkpoint::decode(&bytes) {
            Err(_) => true,
            Ok(ck) => ck.to_model().is_err(),
        };
        detected += usize::from(caught);
    }
    Outcome::new(
        identical == 100 && detected == 100,
        format!("{identical}/100 round trips byte-identical; {detected}/100 corruptions detected"),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; this target has
    // no individual tests to filter, so they are ignored.
    let total = Instant::now();
    let mut failures = Vec::new();
    let mut check = |id: usize, name: &str, budget: Option<f64>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        report(id, name, t, budget, &mut o);
        if !o.passed {
            failures.push(id);
        }
    };

    check(1, "merge exactness", Some(60.0), &mut merge_exactness);
    check(2, "parameter arithmetic", None, &mut parameter_arithmetic);
    check(3, "gradient correctness", Some(120.0), &mut gradient_correctness);
    check(4, "freeze contract", Some(60.0), &mut freeze_contract);
    check(5, "no-op initialization", None, &mut noop_init);

    let task = ToyTask::new();
    let mut toy = None;
    check(6, "placement ordering", Some(900.0), &mut || {
        let (o, r) = table_ordering(&task);
        toy = Some(r);
        o
    });
    let toy = toy.expect("criterion 6 ran");
    check(7, "question-only gap", None, &mut || question_only_gap(&task, &toy));
    check(8, "language-bias scenarios", None, &mut || language_bias(&task, &toy));
    check(9, "inference cost", None, &mut || inference_cost(&toy));
    check(10, "attention maps", None, &mut || attention_maps(&task, &toy));
    check(11, "checkpoint integrity", None, &mut checkpoint_integrity);

    println!(
        "acceptance: {} failed, total {:.1}s",
        failures.len(),
        total.elapsed().as_secs_f64()
    );
    if !failures.is_empty() {
        println!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}
