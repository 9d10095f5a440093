//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `PMTTS_ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.
//! `PMTTS_REFERENCE_CHECKPOINT=path` evaluates an existing reference
//! checkpoint instead of training one (training time is then not checked).

use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pmtts::cli::{self, cmd_corpus, eval, read_manifest, read_split, RunConfig};
use pmtts::duration::{estimate_from_rate, estimate_from_reference, target_token_count, RateTable};
use pmtts::metrics::{bootstrap_ci, error_rate, pearson_r, wilson_interval};
use pmtts::model::{checkpoint, ModelConfig, ModelParams, SeqPair};
use pmtts::numerics::gradcheck::{central_difference, max_relative_error, FD_STEP};
use pmtts::numerics::Tensor;
use pmtts::positional::{apply_rope, cross_attention_scores, ProgressSchedule, RopeParams};
use pmtts::synthcorpus::generate_corpus;
use pmtts::training::{clip_gradients, global_grad_norm, lr_at, train, TrainConfig, TrainPaths};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: pmtts::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pmtts-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("temp dir");
    dir
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        ffn_dim: 32,
        text_vocab: 8,
        audio_vocab: 16,
        ..ModelConfig::default()
    }
}

fn flatten(p: &ModelParams<f64>) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(p: &mut ModelParams<f64>, flat: &[f64]) {
    let mut off = 0;
    for t in p.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Projections at init scale, embeddings rescaled to the projection scale,
/// norm gains jittered around one.
fn random_instance(seed: u64) -> ModelParams<f64> {
    let cfg = tiny_config();
    let mut p = ModelParams::<f64>::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let std = 1.0 / (cfg.d_model as f64).sqrt();
    let names = p.names().to_vec();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        if name.ends_with("embed") {
            t.data_mut().iter_mut().for_each(|x| *x *= std / 0.02);
        } else if name.ends_with("norm") {
            t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
        }
    }
    p
}

fn gradient_correctness() -> Check {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let mut p = random_instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = p.config().total_vocab();
        let texts: Vec<Vec<usize>> = [3, 5].iter().map(|&n| (0..n).map(|_| rng.random_range(0..8)).collect()).collect();
        let audio: Vec<Vec<usize>> = [6, 8].iter().map(|&n| (0..n).map(|_| rng.random_range(0..v)).collect()).collect();
        let pairs: Vec<SeqPair<'_>> = texts.iter().zip(&audio).map(|(t, a)| SeqPair { text: t, audio: a }).collect();
        let targets: Vec<usize> = (0..14).map(|_| rng.random_range(0..v)).collect();
        let mut mask = vec![true; 14];
        mask[rng.random_range(0..14)] = false;

        p.zero_grad();
        ok(p.loss_and_grad(&pairs, &targets, &mask))?;
        let analytic: Vec<f64> = p
            .tensors()
            .iter()
            .flat_map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let x0 = flatten(&p);
        let mut probe = p.clone();
        let numeric = central_difference(
            |x| {
                unflatten(&mut probe, x);
                probe.loss(&pairs, &targets, &mask).unwrap()
            },
            &x0,
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    let elapsed = started.elapsed();
    ensure(worst <= 1e-4, || format!("max relative error {worst:.3e} > 1e-4"))?;
    ensure(elapsed <= Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {worst:.2e} over 4 instances in {:.1}s", elapsed.as_secs_f64()))
}

fn shift_gap<F: pmtts::numerics::Float>(rng: &mut ChaCha8Rng, rope: &RopeParams) -> f64 {
    let draw = |rng: &mut ChaCha8Rng| -> Vec<F> {
        (0..rope.head_dim()).map(|_| F::cast_from(rng.random_range(-1.0..1.0))).collect()
    };
    let q = draw(rng);
    let k = draw(rng);
    let a = rng.random_range(0.0..2000.0);
    let b = rng.random_range(0.0..2000.0);
    let c = rng.random_range(-2000.0..2000.0);
    let score = |pq: f64, pk: f64| {
        let rq = apply_rope(&q, pq, rope).unwrap();
        let rk = apply_rope(&k, pk, rope).unwrap();
        cross_attention_scores(&[rq], &[rk]).unwrap()[0][0].as_f64()
    };
    (score(a, b) - score(a + c, b + c)).abs()
}

fn relative_progress_invariance() -> Check {
    let rope = ok(RopeParams::new(16, 10_000.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        w32 = w32.max(shift_gap::<f32>(&mut rng, &rope));
        w64 = w64.max(shift_gap::<f64>(&mut rng, &rope));
    }
    ensure(w32 <= 1e-6, || format!("32-bit gap {w32:.3e}"))?;
    ensure(w64 <= 1e-10, || format!("64-bit gap {w64:.3e}"))?;
    Ok(format!("1000 tuples; max gap {w32:.2e} (f32), {w64:.2e} (f64)"))
}

fn zero_rotation_equivalence() -> Check {
    for seed in 0..10 {
        let cfg = ModelConfig::default();
        let on = ok(ModelParams::<f32>::init(&cfg, 1000 + seed))?;
        let mut off = on.clone();
        off.set_pm_rope(false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text: Vec<usize> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..cfg.text_vocab)).collect();
        let s = rng.random_range(1..40);
        let audio: Vec<usize> = (0..s).map(|_| rng.random_range(0..cfg.total_vocab())).collect();
        let enc = ok(on.encode(&text))?;
        let zeros = |n| vec![0.0; n];
        let a = ok(on.decoder_forward_with_progress(&audio, &enc, &zeros(s), &zeros(text.len()), None))?;
        let dec = ok(ProgressSchedule::new(s, cfg.progress_scale))?.ids(s);
        let encp = ok(ProgressSchedule::new(text.len(), cfg.progress_scale))?.ids(text.len());
        let b = ok(off.decoder_forward_with_progress(&audio, &enc, &dec, &encp, None))?;
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("model {seed}: logits differ"))?;
    }
    Ok("10 models bitwise identical".into())
}

fn schedule_endpoints() -> Check {
    let cfg = TrainConfig::default();
    let w = cfg.warmup_steps();
    let ends = (ok(lr_at(0, &cfg))?, ok(lr_at(w, &cfg))?, ok(lr_at(cfg.total_steps, &cfg))?);
    ensure(ends == (0.0, 1e-4, 0.0), || format!("lr endpoints {ends:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let scale = 10f64.powf(rng.random_range(-3.0..4.0));
        let mut ts: Vec<Tensor<f32>> = (0..rng.random_range(1..6))
            .map(|_| {
                let n = rng.random_range(1..300);
                let g: Vec<f32> = (0..n).map(|_| (rng.random_range(-1.0..1.0) * scale) as f32).collect();
                let mut t = Tensor::zeros(vec![n]).with_grad();
                t.accumulate_grad(&g);
                t
            })
            .collect();
        clip_gradients(&mut ts, cfg.clip_norm);
        worst = worst.max(global_grad_norm(&ts));
    }
    ensure(worst <= 1.0, || format!("post-clip norm {worst}"))?;
    Ok(format!("lr 0 / 1e-4 at step {w} / 0; max post-clip norm {worst:.9}"))
}

/// Plain recursive edit distance, memoized per pair.
fn edit_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut [[usize; 7]; 7]) -> usize {
        if memo[i][j] != usize::MAX {
            return memo[i][j];
        }
        let d = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo[i][j] = d;
        d
    }
    go(a, b, 0, 0, &mut [[usize::MAX; 7]; 7])
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| (0..alphabet).map(move |c| [s.as_slice(), &[c]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn metric_oracles() -> Check {
    let seqs = all_sequences(6, 3);
    let mut pairs = 0usize;
    for r in seqs.iter().filter(|s| !s.is_empty()) {
        for h in &seqs {
            let got = ok(error_rate(r, h))?;
            let want = edit_oracle(r, h) as f64 / r.len() as f64;
            ensure(got == want, || format!("error_rate({r:?}, {h:?}) = {got}, oracle {want}"))?;
            pairs += 1;
        }
    }
    ensure(error_rate::<u8>(&[], &[1]).is_err(), || "empty reference accepted".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v + rng.random_range(-3.0..3.0)).collect();
        let nf = n as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let want = (nf * sxy - sx * sy) / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());
        let got = ok(pearson_r(&x, &y))?;
        ensure((got - want).abs() <= 1e-9, || format!("pearson {got} vs {want}"))?;
    }

    const Z95: f64 = 1.959_963_984_540_054;
    for n in 1..=120usize {
        for s in 0..=n {
            let (p, nf) = (s as f64 / n as f64, n as f64);
            let centre = (p + Z95 * Z95 / (2.0 * nf)) / (1.0 + Z95 * Z95 / nf);
            let half = Z95 / (1.0 + Z95 * Z95 / nf) * (p * (1.0 - p) / nf + Z95 * Z95 / (4.0 * nf * nf)).sqrt();
            let got = ok(wilson_interval(s, n, 0.95))?;
            let close = (got.ci_low - (centre - half)).abs() <= 1e-9 && (got.ci_high - (centre + half)).abs() <= 1e-9;
            ensure(close, || format!("wilson {s}/{n}: [{}, {}] vs [{}, {}]", got.ci_low, got.ci_high, centre - half, centre + half))?;
        }
    }

    let values: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
    let a = ok(bootstrap_ci(&values, 10_000, 0.95, 42))?;
    let b = ok(bootstrap_ci(&values, 10_000, 0.95, 42))?;
    ensure(a == b, || "bootstrap differs across identical calls".into())?;
    let c = ok(bootstrap_ci(&values, 10_000, 0.95, 43))?;
    ensure(a.ci_low != c.ci_low || a.ci_high != c.ci_high, || "bootstrap ignores its seed".into())?;

    let mut widths = Vec::new();
    for s in [39, 40] {
        let w = ok(wilson_interval(s, 50, 0.95))?.half_width();
        ensure((w - 0.11).abs() <= 0.02, || format!("Wilson half-width at {s}/50 is {w:.4}"))?;
        widths.push(format!("{s}/50 -> {w:.4}"));
    }
    Ok(format!("{pairs} edit pairs; Wilson half-widths {}", widths.join(", ")))
}

fn duration_estimator() -> Check {
    let est = ok(estimate_from_reference(5.0, 50, 100))?;
    ensure(est.seconds == 10.0, || format!("estimate {} s", est.seconds))?;
    let tokens = target_token_count(&est, 50);
    ensure(tokens == 500, || format!("{tokens} tokens"))?;
    let table = RateTable::default();
    for (lang, rate) in [("en", 0.085), ("ja", 0.10), ("zh", 0.27)] {
        let got = ok(table.rate(lang))?;
        ensure(got == rate, || format!("{lang} rate {got}"))?;
        let e = ok(estimate_from_rate(100, lang, &table))?;
        ensure(e.seconds == 100.0 * rate, || format!("{lang} estimate {}", e.seconds))?;
    }
    Ok("10.0 s / 500 tokens; rates 0.085 / 0.10 / 0.27".into())
}

fn reference_run() -> Check {
    let cfg = ok(RunConfig::load(&workspace_root().join("configs/reference.toml")))?;
    let dir = scratch_dir("reference");
    let corpus = dir.join("corpus");
    ok(cmd_corpus(&cfg, &corpus))?;
    let m = &cfg.model;
    ensure(
        m.n_enc_layers == 2 && m.n_dec_layers == 2 && m.d_model == 64 && m.audio_vocab == 64,
        || "reference model is not 2+2 layers, d=64, V=64".into(),
    )?;
    ensure(cfg.corpus.train_size == 4000 && cfg.train.total_steps <= 20_000, || "reference run exceeds its budget".into())?;

    let (ckpt, train_note) = match std::env::var_os("PMTTS_REFERENCE_CHECKPOINT") {
        Some(path) => (PathBuf::from(path), "reused checkpoint, training time not measured".to_string()),
        None => {
            let ckpt = dir.join("reference.pmrt");
            let manifest = ok(read_manifest(&corpus))?;
            let started = Instant::now();
            let out = ok(train(
                &ok(read_split(&corpus, "train"))?,
                &ok(read_split(&corpus, "val"))?,
                &manifest.codebook,
                &cfg.train,
                &cfg.model,
                &TrainPaths {
                    checkpoint: Some(ckpt.clone()),
                    loss_curve: Some(dir.join("reference.csv")),
                },
                |p| eprintln!("  step {:>6} train {:.4} val {:.4}", p.step, p.train_loss, p.val_loss),
            ))?;
            let elapsed = started.elapsed();
            ensure(elapsed <= Duration::from_secs(3600), || format!("training took {elapsed:?}"))?;
            (ckpt, format!("trained in {:.1} min, best val {:.4}", elapsed.as_secs_f64() / 60.0, out.best_val_loss))
        }
    };
    let model = ok(checkpoint::load(&ckpt))?;
    let manifest = ok(read_manifest(&corpus))?;
    let test = ok(read_split(&corpus, "test"))?;
    ensure(test.len() >= 200, || format!("only {} test utterances", test.len()))?;
    let mut run = cfg.clone();
    run.eval.limit = Some(200);
    let ab = ok(eval::ablate(&model, &test, &manifest.codebook, &run, |_, _, _| {}))?;
    let (on, off) = (&ab.configurations[0], &ab.configurations[1]);
    let r = on.pearson_r.unwrap_or(f64::NAN);
    let summary = format!(
        "{train_note}; on: DA {:.3} r {:.3} ER {:.3} SIM {:.3}; off: DA {:.3} ER {:.3}",
        on.duration_accuracy(),
        r,
        on.error_rate(),
        on.style_similarity(),
        off.duration_accuracy(),
        off.error_rate()
    );
    let mut failed = Vec::new();
    if !(on.duration_accuracy() >= 0.90) {
        failed.push("PM-on DA < 0.90");
    }
    if !(r >= 0.90) {
        failed.push("Pearson r < 0.90");
    }
    if !(off.duration_accuracy() <= on.duration_accuracy() - 0.25) {
        failed.push("PM-off DA not 0.25 below PM-on");
    }
    if !(off.error_rate() >= 2.0 * on.error_rate()) {
        failed.push("PM-off error rate below twice PM-on");
    }
    if !(on.style_similarity() >= 0.95) {
        failed.push("style similarity < 0.95");
    }
    let _ = std::fs::remove_dir_all(&dir);
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failed.join(", ")))
    }
}

fn memorization() -> Check {
    let (codebook, splits) = ok(generate_corpus(&Default::default()))?;
    let one = vec![splits.train[0].clone()];
    let cfg = TrainConfig {
        total_steps: 2000,
        validation_interval: 50,
        ..TrainConfig::default()
    };
    let out = ok(train(&one, &one, &codebook, &cfg, &ModelConfig::default(), &TrainPaths::default(), |_| {}))?;
    let initial = out.curve[0].val_loss;
    let uniform = (ModelConfig::default().total_vocab() as f64).ln();
    let summary = format!(
        "initial {initial:.4} (ln V' {uniform:.4}, {:+.1}%); loss {:.4} at step {}",
        100.0 * (initial - uniform) / uniform,
        out.best_val_loss,
        out.best_step
    );
    let mut failed = Vec::new();
    if (initial - uniform).abs() > 0.15 * uniform {
        failed.push("initial loss outside 15% of ln V'");
    }
    if !(out.best_val_loss < 0.1) {
        failed.push("loss not below 0.1 within 2000 steps");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}: {summary}", failed.join(", ")))
    }
}

fn round_trips() -> Check {
    let dir = scratch_dir("roundtrip");
    let params = ok(ModelParams::<f32>::init(&ModelConfig::default(), 9))?;
    let (a, b) = (dir.join("a.pmrt"), dir.join("b.pmrt"));
    ok(checkpoint::save(&params, &a))?;
    ok(checkpoint::save(&ok(checkpoint::load(&a))?, &b))?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    ensure(read(&a)? == read(&b)?, || "checkpoint bytes differ after reload".into())?;

    let mut cfg = RunConfig::default();
    cfg.corpus.train_size = 40;
    cfg.corpus.val_size = 8;
    cfg.corpus.test_size = 8;
    let (c1, c2) = (dir.join("c1"), dir.join("c2"));
    ok(cmd_corpus(&cfg, &c1))?;
    ok(cmd_corpus(&cfg, &c2))?;
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        ensure(read(&c1.join(f))? == read(&c2.join(f))?, || format!("{f} differs between runs"))?;
    }

    let cfg_path = dir.join("run.toml");
    std::fs::write(&cfg_path, "[corpus]\ntrain_size = 40\nval_size = 8\ntest_size = 8\n").map_err(|e| e.to_string())?;
    let report = dir.join("report.json");
    let args = [
        "pmtts",
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        a.to_str().unwrap(),
        "--corpus",
        c1.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--limit",
        "3",
    ];
    ensure(cli::run(args) == ExitCode::SUCCESS, || "eval exited with failure".into())?;
    let json: serde_json::Value = serde_json::from_slice(&read(&report)?).map_err(|e| e.to_string())?;
    validate_reports(&json)?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok("checkpoint and corpus byte-identical; eval report schema valid".into())
}

fn validate_reports(json: &serde_json::Value) -> std::result::Result<(), String> {
    let reports = json.as_array().ok_or("report is not an array")?;
    let mut seen: Vec<&str> = Vec::new();
    for r in reports {
        let obj = r.as_object().ok_or("report entry is not an object")?;
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        let want = ["ci_high", "ci_low", "mean", "method", "metric", "n", "resamples", "seed"];
        ensure(keys == want, || format!("report keys {keys:?}"))?;
        let num = |k: &str| obj[k].as_f64().ok_or(format!("{k} is not a number"));
        let (lo, mean, hi) = (num("ci_low")?, num("mean")?, num("ci_high")?);
        ensure(lo <= mean && mean <= hi, || format!("interval [{lo}, {hi}] misses {mean}"))?;
        for k in ["n", "resamples", "seed"] {
            ensure(obj[k].is_u64(), || format!("{k} is not an unsigned integer"))?;
        }
        let method = obj["method"].as_str().ok_or("method is not a string")?;
        ensure(["bootstrap", "wilson"].contains(&method), || format!("method {method}"))?;
        seen.push(obj["metric"].as_str().ok_or("metric is not a string")?);
    }
    seen.sort_unstable();
    ensure(seen == ["duration_accuracy", "error_rate", "style_similarity"], || format!("metrics {seen:?}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient correctness", gradient_correctness),
        ("relative-progress invariance", relative_progress_invariance),
        ("zero-rotation equivalence", zero_rotation_equivalence),
        ("schedule endpoints and clipping", schedule_endpoints),
        ("metric oracles", metric_oracles),
        ("duration estimator", duration_estimator),
        ("reference configuration", reference_run),
        ("memorization", memorization),
        ("round-trip formats", round_trips),
    ];
    let only: Option<Vec<usize>> = std::env::var("PMTTS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut results: HashMap<usize, bool> = HashMap::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match &outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => println!("criterion {id} ({name}): FAIL [{secs:.1}s] {detail}"),
        }
        results.insert(id, outcome.is_ok());
    }
    if results.values().all(|&p| p) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
