//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nuvision::cnn::{self, CnnConfig, CnnModel, TrainOptions, TrainRecipe};
use nuvision::datastore::{write_dataset, Dataset, PromptConfig, Subset};
use nuvision::decode::{build_constraint, temperature_rescale, Tokenizer, WordTokenizer};
use nuvision::decode::fuzz::closure_sweep;
use nuvision::evalkit::{
    aggregate_metrics, compute_report, confusion, read_predictions, read_reports, render_report, roc_auc,
    write_predictions, LabeledPrediction, Normalization, ResourceProfile, TABLE_ROWS,
};
use nuvision::eventgen::{generate_dataset, generate_range, GeneratorConfig};
use nuvision::vlm::{self, AdapterConfig, FinetuneOptions, SftExample, SftRecipe, VlmClassifier, TINY_BACKBONE_ID};
use nuvision::{InteractionClass, NUM_CLASSES};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn labels() -> [&'static str; 3] {
    InteractionClass::ALL.map(|c| c.canonical_label())
}

fn closure() -> Outcome {
    let prompt = PromptConfig::default();
    let (system, user) = (prompt.system_text().unwrap(), prompt.user_text().unwrap());
    let mut texts = vec![system.clone(), user.clone(), prompt.prefix.clone()];
    texts.extend(labels().map(String::from));
    let tok = WordTokenizer::from_texts(&[], &texts);
    let constraint = build_constraint(&tok, &labels(), &prompt.prefix).map_err(|e| e.to_string())?;
    let mut prompt_ids = tok.encode(&system);
    prompt_ids.extend(tok.encode(&user));
    let start = Instant::now();
    let r = closure_sweep(&constraint, &prompt_ids, tok.vocab_size(), 10_000, 1, 5.0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(r.admissible == r.trials, format!("{} of {} outputs admissible", r.admissible, r.trials))?;
    ensure(secs < 60.0, format!("sweep took {secs:.1} s"))?;
    Ok(format!("10000/10000 admissible in {secs:.2} s, labels {:?}", r.per_label))
}

fn temperature() -> Outcome {
    let p: [f64; 3] = [0.7, 0.2, 0.1];
    let got = temperature_rescale(&p.map(f64::ln), 5.0).map_err(|e| e.to_string())?;
    let expected = [0.99804, 0.00190, 0.0000594];
    let denom: f64 = p.iter().map(|v| v.powi(5)).sum();
    for i in 0..3 {
        ensure((got[i] - expected[i]).abs() < 1e-5, format!("component {i}: {} vs {}", got[i], expected[i]))?;
        let closed = p[i].powi(5) / denom;
        ensure((got[i] - closed).abs() < 1e-12, format!("component {i}: {} vs closed form {closed}", got[i]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10_000 {
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0f64)).collect();
        let sum: f64 = raw.iter().sum();
        let logp: Vec<f64> = raw.iter().map(|v| (v / sum).ln()).collect();
        let t = rng.random_range(0.2..10.0);
        let out = temperature_rescale(&logp, t).map_err(|e| e.to_string())?;
        let best = |v: &[f64]| (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        ensure(best(&out) == best(&logp), format!("trial {trial}: argmax moved"))?;
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = logp.iter().map(|l| l + shift).collect();
        let out2 = temperature_rescale(&shifted, t).map_err(|e| e.to_string())?;
        ensure(out.iter().zip(&out2).all(|(a, b)| (a - b).abs() < 1e-12), format!("trial {trial}: shift changed output"))?;
    }
    Ok(format!("({:.5}, {:.5}, {:.7}); argmax and shift invariance over 10000 vectors", got[0], got[1], got[2]))
}

fn random_predictions(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<LabeledPrediction> {
    (0..n)
        .map(|i| {
            let raw: [f64; 3] = std::array::from_fn(|_| f64::from(rng.random_range(0..levels)) + 1.0);
            let s: f64 = raw.iter().sum();
            let conf = raw.map(|v| v / s);
            let predicted = (0..3).fold(0, |b, k| if conf[k] > conf[b] { k } else { b });
            LabeledPrediction {
                event_id: i as u64,
                truth: InteractionClass::ALL[rng.random_range(0..3)],
                predicted: InteractionClass::ALL[predicted],
                confidences: conf,
                latency_ms: 1.0,
            }
        })
        .collect()
}

fn mann_whitney(preds: &[LabeledPrediction], class: InteractionClass) -> f64 {
    let k = class.index();
    let pos: Vec<f64> = preds.iter().filter(|p| p.truth == class).map(|p| p.confidences[k]).collect();
    let neg: Vec<f64> = preds.iter().filter(|p| p.truth != class).map(|p| p.confidences[k]).collect();
    let mut wins = 0.0;
    for a in &pos {
        for b in &neg {
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    let mut worst = 0.0f64;
    for set in 0..1000 {
        let n = rng.random_range(2..=200);
        // Few distinct score levels force ties.
        let levels = if set % 2 == 0 { 4 } else { 1000 };
        let preds = random_predictions(&mut rng, n, levels);
        for class in InteractionClass::ALL {
            let has_both = preds.iter().any(|p| p.truth == class) && preds.iter().any(|p| p.truth != class);
            if !has_both {
                continue;
            }
            let (_, auc) = roc_auc(&preds, class).map_err(|e| e.to_string())?;
            let diff = (auc - mann_whitney(&preds, class)).abs();
            worst = worst.max(diff);
            compared += 1;
        }
    }
    ensure(worst <= 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("{compared} class curves over 1000 sets, max deviation {worst:e}"))
}

fn confusion_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..500 {
        let n = rng.random_range(1..300);
        let preds = random_predictions(&mut rng, n, 50);
        let rows = confusion(&preds, Normalization::Truth).map_err(|e| e.to_string())?;
        let cols = confusion(&preds, Normalization::Prediction).map_err(|e| e.to_string())?;
        for k in 0..NUM_CLASSES {
            let class = InteractionClass::ALL[k];
            let row: f64 = rows.values[k].iter().sum();
            let col: f64 = (0..NUM_CLASSES).map(|r| cols.values[r][k]).sum();
            if !rows.empty.contains(&class) {
                ensure((row - 1.0).abs() < 1e-9, format!("trial {trial}: row {k} sums to {row}"))?;
            }
            if !cols.empty.contains(&class) {
                ensure((col - 1.0).abs() < 1e-9, format!("trial {trial}: column {k} sums to {col}"))?;
            }
        }
    }
    let perfect: Vec<_> = (0..60)
        .map(|i| {
            let mut c = [0.0; 3];
            c[i % 3] = 1.0;
            LabeledPrediction { event_id: i as u64, truth: InteractionClass::ALL[i % 3], predicted: InteractionClass::ALL[i % 3], confidences: c, latency_ms: 0.0 }
        })
        .collect();
    for norm in [Normalization::Truth, Normalization::Prediction] {
        let m = confusion(&perfect, norm).map_err(|e| e.to_string())?;
        for r in 0..3 {
            for c in 0..3 {
                ensure(m.values[r][c] == if r == c { 1.0 } else { 0.0 }, "perfect predictions are not the identity")?;
            }
        }
    }
    Ok("500 random sets normalize within 1e-9; perfect predictions give identity".into())
}

fn parameter_budget() -> Outcome {
    let model = CnnModel::new(CnnConfig::default(), 0).map_err(|e| e.to_string())?;
    let n = model.num_params();
    ensure((3_060_000..=3_740_000).contains(&n), format!("{n} parameters"))?;
    Ok(format!("{n} trainable parameters"))
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn weight_sharing() -> Outcome {
    let model = CnnModel::new(CnnConfig::default(), 1).map_err(|e| e.to_string())?;
    let views = generate_range(&GeneratorConfig::default(), 0, 2).map_err(|e| e.to_string())?;
    let a = model.input_from_grid(&views[0].view_xz).map_err(|e| e.to_string())?;
    let b = model.input_from_grid(&views[1].view_yz).map_err(|e| e.to_string())?;
    let alone = model.branch_features(&a).map_err(|e| e.to_string())?;
    let half = alone.data.len();
    let first = model.joint_features(&a, &b).map_err(|e| e.to_string())?;
    let second = model.joint_features(&b, &a).map_err(|e| e.to_string())?;
    ensure(bits(&first.data[..half]) == bits(&alone.data), "slot 1 differs from the shared branch")?;
    ensure(bits(&second.data[half..]) == bits(&alone.data), "slot 2 differs from the shared branch")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("cnn.ckpt");
    model.save(&path, serde_json::Value::Null).map_err(|e| e.to_string())?;
    let size = std::fs::metadata(&path).map_err(|e| e.to_string())?.len() as usize;
    let payload = 4 * model.num_params();
    let branch: usize = model
        .layout()
        .entries
        .iter()
        .filter(|e| e.name.starts_with("stem.") || e.name.starts_with("branch."))
        .map(|e| e.len())
        .sum();
    let header = size - payload;
    ensure(size >= payload && header < 64 * 1024, format!("file {size} bytes for {payload} bytes of parameters"))?;
    ensure(size < payload + 4 * branch, "checkpoint is large enough to hold two branch copies")?;
    let (loaded, _) = CnnModel::load(&path).map_err(|e| e.to_string())?;
    ensure(bits(&loaded.params) == bits(&model.params), "checkpoint round trip changed parameters")?;
    Ok(format!("both slots bit-identical; checkpoint {size} B = {payload} B parameters + {header} B header, shared branch {branch} params stored once"))
}

fn toy_end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = GeneratorConfig { base_seed: 7, ..GeneratorConfig::default() };
    let (n_train, n_val, n_test) = (3000u64, 300u64, 300u64);
    let stream = generate_dataset(gen.clone(), n_train + n_val + n_test).map_err(|e| e.to_string())?;
    write_dataset(stream, 500, dir.path(), &gen.geometry, gen.base_seed).map_err(|e| e.to_string())?;
    let ds = Dataset::open(dir.path()).map_err(|e| e.to_string())?;
    let subset = |lo: u64, hi: u64| Subset { dataset: ds.clone(), positions: (lo..hi).collect() };
    let (train, val, test) = (subset(0, n_train), subset(n_train, n_train + n_val), subset(n_train + n_val, n_train + n_val + n_test));
    let gen_secs = start.elapsed().as_secs_f64();

    let recipe = TrainRecipe { learning_rate: 1e-4, max_epochs: 5, seed: 7, ..TrainRecipe::default() };
    let mut model = CnnModel::new(CnnConfig::default(), 7).map_err(|e| e.to_string())?;
    let opts = TrainOptions { out_dir: None, resume: false, epoch_limit: None, verbose: false };
    let outcome = cnn::train(&mut model, &train, &val, &recipe, &opts).map_err(|e| e.to_string())?;
    for r in &outcome.history {
        eprintln!(
            "  epoch {:>2}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3} | {:.0} s",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy, r.seconds
        );
    }
    let mut preds = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let pair = test.get(i).map_err(|e| e.to_string())?;
        let p = model.predict(&pair).map_err(|e| e.to_string())?;
        preds.push(LabeledPrediction::from_prediction(pair.event_id, pair.truth.interaction_class, &p));
    }
    let m = aggregate_metrics(&preds).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary = format!(
        "{} epochs (best {}), test accuracy {:.3}, macro recall {:.3}, generation {gen_secs:.0} s, total {:.1} min",
        outcome.history.len(),
        outcome.best_epoch,
        m.accuracy,
        m.macro_recall,
        elapsed.as_secs_f64() / 60.0
    );
    ensure(outcome.history.len() <= 20, format!("{summary}: more than 20 epochs"))?;
    ensure(m.accuracy >= 0.60 && m.macro_recall >= 0.60, format!("{summary}: below 0.60"))?;
    ensure(elapsed < Duration::from_secs(30 * 60), format!("{summary}: over 30 minutes"))?;
    Ok(summary)
}

fn vlm_smoke() -> Outcome {
    let adapter = AdapterConfig { lora_rank: 8, lora_alpha: 16.0, ..AdapterConfig::default() };
    let mut model = vlm::attach_adapters(TINY_BACKBONE_ID, &adapter).map_err(|e| e.to_string())?;
    let gen = GeneratorConfig { base_seed: 8, ..GeneratorConfig::default() };
    let pairs = generate_range(&gen, 0, 64).map_err(|e| e.to_string())?;
    let prompt = PromptConfig::default();
    let examples = pairs
        .iter()
        .map(|p| SftExample::from_pair(&model, p, &prompt))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let recipe = SftRecipe { max_steps: Some(50), ..SftRecipe::default() };
    let before = model.base_hash();
    let out = vlm::finetune(&mut model, &examples, &recipe, &prompt.template_hash(), &FinetuneOptions { out_dir: None, verbose: false })
        .map_err(|e| e.to_string())?;
    let (first, last) = out.smoothed_endpoints(10);
    ensure(out.log.len() == 50, format!("{} steps", out.log.len()))?;
    ensure(last < first, format!("smoothed loss {first:.4} -> {last:.4}"))?;
    ensure(model.base_hash() == before && out.base_hash_after == before, "base weights changed")?;
    let classifier = VlmClassifier::new(model, prompt.clone(), 5.0).map_err(|e| e.to_string())?;
    let allowed: Vec<String> = InteractionClass::ALL.iter().map(|&c| prompt.target(c)).collect();
    for pair in pairs.iter().take(16) {
        let text = classifier.generate_text(pair).map_err(|e| e.to_string())?;
        ensure(allowed.contains(&text), format!("generated `{text}`"))?;
        classifier.classify(pair).map_err(|e| e.to_string())?;
    }
    Ok(format!(
        "rank 8, {:.2}% trainable, smoothed loss {first:.4} -> {last:.4} over 50 steps, base hash unchanged, 16/16 outputs canonical",
        100.0 * vlm::trainable_fraction(&classifier.model)
    ))
}

fn dataset_contract() -> Outcome {
    let gen = GeneratorConfig { base_seed: 9, ..GeneratorConfig::default() };
    let n = 10_000u64;
    let mut cc = 0u64;
    let mut bad = 0u64;
    for event in generate_dataset(gen, n).map_err(|e| e.to_string())? {
        let e = event.map_err(|e| e.to_string())?;
        cc += u64::from(e.truth.interaction_class != InteractionClass::Nc);
        let ok = [&e.view_xz, &e.view_yz].iter().all(|g| g.size == 512 && g.data.len() == 512 * 512 && g.nonzero_count() > 0);
        bad += u64::from(!ok);
    }
    let frac = cc as f64 / n as f64;
    ensure((frac - 0.74).abs() <= 0.02, format!("CC fraction {frac:.4}"))?;
    ensure(bad == 0, format!("{bad} events with a malformed or empty view"))?;
    Ok(format!("CC fraction {frac:.4}; all 20000 views 512x512 with nonzero pixels"))
}

fn report_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let split_hash = "5e1f00d5a1b2c3d4e5f60718293a4b5c";
    let mut reports = Vec::new();
    for (tag, skill) in [("cnn", 0.8), ("vlm", 1.6)] {
        let preds: Vec<LabeledPrediction> = (0..300)
            .map(|i| {
                let t = i % 3;
                let mut c: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
                c[t] += skill;
                let s: f64 = c.iter().sum();
                let c = c.map(|v| v / s);
                let predicted = (0..3).fold(0, |b, k| if c[k] > c[b] { k } else { b });
                LabeledPrediction { event_id: i as u64, truth: InteractionClass::ALL[t], predicted: InteractionClass::ALL[predicted], confidences: c, latency_ms: rng.random_range(1.0..5.0) }
            })
            .collect();
        let path = dir.path().join(format!("{tag}.jsonl"));
        write_predictions(&path, &preds).map_err(|e| e.to_string())?;
        let back = read_predictions(&path).map_err(|e| e.to_string())?;
        ensure(back == preds, "predictions file did not round-trip")?;
        let profile = ResourceProfile { memory_mb: 100.0 + skill, ms_per_sample: 2.0 * skill, ms_std: Some(0.1), n_measure: 10 };
        reports.push(compute_report(tag, split_hash, &back, Some(&profile)).map_err(|e| e.to_string())?);
    }
    let out = dir.path().join("report");
    let files = render_report(&reports[0], &reports[1], &out).map_err(|e| e.to_string())?;
    let table = std::fs::read_to_string(&files.table).map_err(|e| e.to_string())?;
    let rows: Vec<String> = table.lines().skip(2).map(|l| l.split('|').nth(1).unwrap_or("").trim().to_string()).collect();
    ensure(rows == TABLE_ROWS, format!("table rows {rows:?}"))?;
    ensure(files.confusion_pngs.len() == 4, "expected recall and precision matrices for both models")?;
    ensure(files.roc_pngs.len() == 3, "expected one ROC overlay per class")?;
    for p in files.confusion_pngs.iter().chain(&files.roc_pngs) {
        image::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    let back = read_reports(&files.metrics_json).map_err(|e| e.to_string())?;
    ensure(back == reports, "metrics JSON did not round-trip exactly")?;
    let json = std::fs::read_to_string(&files.metrics_json).map_err(|e| e.to_string())?;
    let again = serde_json::to_string_pretty(&back).map_err(|e| e.to_string())?;
    ensure(json == again, "re-serialized metrics differ from the file")?;
    Ok(format!("{} table rows, 4 confusion + 3 ROC figures, metrics JSON round-trips exactly", rows.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("constrained-output closure", closure),
        ("temperature confidence formula", temperature),
        ("AUC matches pairwise oracle", auc_oracle),
        ("confusion-matrix normalizations", confusion_normalization),
        ("CNN parameter budget", parameter_budget),
        ("Siamese weight sharing", weight_sharing),
        ("toy end-to-end CNN training", toy_end_to_end),
        ("VLM harness smoke", vlm_smoke),
        ("dataset contract", dataset_contract),
        ("report fidelity", report_fidelity),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
