//! Supervised fine-tuning of the adapters.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adapt::{adapted_modules, attach_adapters_to, load_base};
use super::backbone::{ImageInput, VlmModel};
use super::config::{AdapterConfig, BackboneConfig, SftRecipe};
use super::tokens::training_tokens;
use super::VlmError;
use crate::datastore::{build_prompt_record, PromptConfig, PromptRecord};
use crate::decode::TokenId;
use crate::eventgen::PixelMapPair;
use crate::optim::{Adam, AdamConfig};

const GRAD_CHUNKS: usize = 4;
const ADAPTER_KIND: &str = "nuvision-vlm-adapter";
pub const LOSS_LOG: &str = "loss.jsonl";
pub const FINAL_ADAPTER: &str = "adapter.ckpt";

/// A prompt record with its tokenized sequence and image features.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub record: PromptRecord,
    pub tokens: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub image: ImageInput,
}

impl SftExample {
    pub fn new(model: &VlmModel, record: PromptRecord, image: ImageInput) -> Self {
        let (tokens, mask) = training_tokens(&model.tokenizer, &record);
        Self { record, tokens, mask, image }
    }

    pub fn from_pair(model: &VlmModel, pair: &PixelMapPair, prompt: &PromptConfig) -> Result<Self, VlmError> {
        let record = build_prompt_record(pair, prompt)?;
        Ok(Self::new(model, record, model.image_input(pair)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub target_tokens: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub log: Vec<StepLog>,
    pub base_hash_before: String,
    pub base_hash_after: String,
    pub checkpoint: Option<PathBuf>,
}

impl FinetuneOutcome {
    /// Mean loss of the first and last `window` steps.
    pub fn smoothed_endpoints(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.log.len().max(1));
        let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.log[..w.min(self.log.len())]), mean(&self.log[self.log.len().saturating_sub(w)..]))
    }
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    kind: String,
    base_model_id: String,
    backbone: BackboneConfig,
    adapter: AdapterConfig,
    recipe: SftRecipe,
    template_hash: String,
    base_hash: String,
    modules: Vec<String>,
    step: usize,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> VlmError {
    VlmError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

pub fn save_adapter(
    model: &VlmModel,
    recipe: &SftRecipe,
    template_hash: &str,
    step: usize,
    path: &Path,
) -> Result<(), VlmError> {
    let adapter = model.adapter_config.clone().ok_or_else(|| VlmError::Config("model has no adapters".into()))?;
    let meta = AdapterMeta {
        kind: ADAPTER_KIND.into(),
        base_model_id: model.base_model_id.clone(),
        backbone: model.config.clone(),
        adapter,
        recipe: recipe.clone(),
        template_hash: template_hash.into(),
        base_hash: model.base_hash(),
        modules: adapted_modules(model),
        step,
    };
    let meta = serde_json::to_value(&meta).map_err(|e| io_err(path, e))?;
    crate::ckpt::save(path, &meta, &[("adapters", &model.adapters)])?;
    Ok(())
}

/// Rebuilds the base, re-attaches adapters and loads their weights. Refuses
/// checkpoints trained under different prompt templates or base weights.
pub fn load_adapter(path: &Path, prompt: &PromptConfig) -> Result<(VlmModel, SftRecipe), VlmError> {
    let mut ck = crate::ckpt::load(path)?;
    let meta: AdapterMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| io_err(path, e))?;
    if meta.kind != ADAPTER_KIND {
        return Err(VlmError::InvalidInput(format!("{} is not an adapter checkpoint", path.display())));
    }
    let expected = prompt.template_hash();
    if meta.template_hash != expected {
        return Err(VlmError::TemplateMismatch { checkpoint: meta.template_hash, current: expected });
    }
    let base = load_base(&meta.base_model_id, Some(meta.backbone))?;
    let mut model = attach_adapters_to(base, &meta.adapter)?;
    if model.base_hash() != meta.base_hash {
        return Err(VlmError::InvalidInput(format!("{}: base weights differ from those it was trained on", path.display())));
    }
    if adapted_modules(&model) != meta.modules {
        return Err(VlmError::InvalidInput(format!("{}: adapted module list differs", path.display())));
    }
    let adapters = ck.take("adapters", path)?;
    if adapters.len() != model.adapters.len() {
        return Err(VlmError::InvalidInput(format!("{}: adapter size mismatch", path.display())));
    }
    model.adapters = adapters;
    model.precision = meta.recipe.precision;
    Ok((model, meta.recipe))
}

/// Fine-tunes the adapters of `model` in place.
pub fn finetune(
    model: &mut VlmModel,
    examples: &[SftExample],
    recipe: &SftRecipe,
    template_hash: &str,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome, VlmError> {
    recipe.validate()?;
    if examples.is_empty() {
        return Err(VlmError::InvalidInput("no prompt records to train on".into()));
    }
    if model.adapter_config.is_none() {
        return Err(VlmError::Config("attach adapters before fine-tuning".into()));
    }
    let longest = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0) + model.config.image_tokens();
    let in_flight = recipe.per_device_batch * GRAD_CHUNKS.min(crate::par::current_num_threads().max(1));
    let needed = model.training_memory_mb(longest, in_flight);
    if needed > recipe.memory_limit_mb {
        return Err(VlmError::OutOfMemory {
            needed_mb: needed,
            limit_mb: recipe.memory_limit_mb,
            hint: format!(
                "lower per_device_batch (now {}) and raise grad_accumulation (now {}) so their product stays at the effective batch of {}",
                recipe.per_device_batch,
                recipe.grad_accumulation,
                recipe.effective_batch()
            ),
        });
    }
    model.precision = recipe.precision;
    let base_hash_before = model.base_hash();
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let total = recipe.total_steps(examples.len());
    let batch = recipe.effective_batch();
    let adam_cfg = AdamConfig { weight_decay: recipe.weight_decay, ..AdamConfig::default() };
    let mut adam = Adam::new(adam_cfg, model.adapters.len());
    let mut order: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    let mut cursor = 0;
    let mut log = Vec::with_capacity(total);
    let mut last_ckpt = None;
    for step in 0..total {
        let started = Instant::now();
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut crate::seed::rng(recipe.seed, &[0x5F7, pass]));
                pass += 1;
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let (grads, loss, targets) = batch_gradient(model, examples, &picked, recipe.seed, step)?;
        if !loss.is_finite() {
            let ids: Vec<u64> = picked.iter().map(|&i| examples[i].record.event_id).collect();
            return Err(VlmError::NonFinite { step, detail: format!("loss {loss} on records {ids:?}") });
        }
        let mut grads = grads;
        let norm = crate::linalg::sum_sq(&grads).sqrt();
        if !norm.is_finite() {
            return Err(VlmError::NonFinite { step, detail: format!("gradient norm {norm}") });
        }
        let clipped_norm = if norm > recipe.grad_clip_norm {
            let s = (recipe.grad_clip_norm / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
            crate::linalg::sum_sq(&grads).sqrt()
        } else {
            norm
        };
        let lr = recipe.lr_at(step, total);
        adam.update(&mut model.adapters, &grads, lr);
        let entry = StepLog { step, lr, loss, grad_norm: norm, clipped_norm, target_tokens: targets, seconds: started.elapsed().as_secs_f64() };
        if opts.verbose {
            eprintln!("step {step}/{total}: loss {loss:.4} lr {lr:.2e} grad {norm:.3} -> {clipped_norm:.3}");
        }
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(LOSS_LOG);
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
            let line = serde_json::to_string(&entry).map_err(|e| io_err(&path, e))?;
            writeln!(f, "{line}").map_err(|e| io_err(&path, e))?;
            if recipe.checkpoint_every > 0 && (step + 1) % recipe.checkpoint_every == 0 && step + 1 < total {
                let p = dir.join(format!("adapter-step-{:06}.ckpt", step + 1));
                save_adapter(model, recipe, template_hash, step + 1, &p)?;
            }
        }
        log.push(entry);
    }
    if let Some(dir) = &opts.out_dir {
        let p = dir.join(FINAL_ADAPTER);
        save_adapter(model, recipe, template_hash, total, &p)?;
        last_ckpt = Some(p);
    }
    let base_hash_after = model.base_hash();
    if base_hash_after != base_hash_before {
        return Err(VlmError::InvalidInput("base weights changed during fine-tuning".into()));
    }
    Ok(FinetuneOutcome { log, base_hash_before, base_hash_after, checkpoint: last_ckpt })
}

/// Mean per-record loss over `picked` and its adapter gradient. Records
/// without supervised tokens count toward the batch with zero loss.
fn batch_gradient(
    model: &VlmModel,
    examples: &[SftExample],
    picked: &[usize],
    seed: u64,
    step: usize,
) -> Result<(Vec<f32>, f64, usize), VlmError> {
    let per_chunk = picked.len().div_ceil(GRAD_CHUNKS).max(1);
    let chunks: Vec<(usize, &[usize])> = picked.chunks(per_chunk).enumerate().map(|(c, s)| (c * per_chunk, s)).collect();
    let n = picked.len() as f32;
    let partials = crate::par::try_map(&chunks, |&(start, chunk)| {
        let mut g = vec![0.0f32; model.adapters.len()];
        let mut loss = 0.0;
        let mut targets = 0;
        for (j, &i) in chunk.iter().enumerate() {
            let ex = &examples[i];
            let supervised = ex.mask.iter().skip(1).filter(|m| **m).count().max(1);
            let weight = 1.0 / (supervised as f32 * n);
            let dropout_seed = crate::seed::derive(seed, &[0xD7, step as u64, (start + j) as u64]);
            let (l, t) = model.accumulate_gradient(&ex.image, &ex.tokens, &ex.mask, weight, Some(dropout_seed), &mut g)?;
            loss += l / supervised as f64;
            targets += t;
        }
        Ok::<_, VlmError>((g, loss, targets))
    })?;
    let mut grads = vec![0.0f32; model.adapters.len()];
    let mut loss = 0.0;
    let mut targets = 0;
    for (g, l, t) in partials {
        crate::linalg::add_assign(&mut grads, &g);
        loss += l;
        targets += t;
    }
    Ok((grads, loss / picked.len() as f64, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventgen::{generate_range, DetectorGeometry, GeneratorConfig};
    use crate::vlm::{VlmClassifier, TINY_BACKBONE_ID};

    fn small_backbone() -> BackboneConfig {
        BackboneConfig { d_model: 32, n_layers: 2, n_heads: 4, mlp_hidden: 64, pool_grid: 4, patch_cells: 2, max_seq_len: 256, init_seed: 3 }
    }

    fn setup(n: u64) -> (VlmModel, Vec<PixelMapPair>, Vec<SftExample>) {
        let base = load_base(TINY_BACKBONE_ID, Some(small_backbone())).unwrap();
        let cfg = AdapterConfig { lora_rank: 4, lora_alpha: 8.0, trainable_fraction_max: 1.0, ..Default::default() };
        let model = attach_adapters_to(base, &cfg).unwrap();
        let gen = GeneratorConfig {
            geometry: DetectorGeometry { crop_size: 64, ..Default::default() },
            base_seed: 5,
            ..Default::default()
        };
        let pairs = generate_range(&gen, 0, n).unwrap();
        let prompt = PromptConfig::default();
        let examples = pairs.iter().map(|p| SftExample::from_pair(&model, p, &prompt).unwrap()).collect();
        (model, pairs, examples)
    }

    #[test]
    fn loss_decreases_clip_holds_and_base_is_frozen() {
        let (mut model, _, examples) = setup(16);
        let recipe = SftRecipe { max_steps: Some(30), learning_rate: 2e-3, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let opts = FinetuneOptions { out_dir: Some(dir.path().into()), verbose: false };
        let before = model.base_hash();
        let out = finetune(&mut model, &examples, &recipe, &PromptConfig::default().template_hash(), &opts).unwrap();
        assert_eq!(out.log.len(), 30);
        let (first, last) = out.smoothed_endpoints(5);
        assert!(last < first, "{first} -> {last}");
        assert!(out.log.iter().all(|s| s.clipped_norm <= recipe.grad_clip_norm + 1e-6));
        assert_eq!(out.log[0].lr, 0.0);
        assert_eq!(before, model.base_hash());
        assert_eq!(out.base_hash_before, out.base_hash_after);
        let lines = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
        assert_eq!(lines.lines().count(), 30);
        assert!(out.checkpoint.as_ref().unwrap().exists());
    }

    #[test]
    fn checkpoint_round_trip_and_template_guard() {
        let (mut model, pairs, examples) = setup(8);
        let prompt = PromptConfig::default();
        let recipe = SftRecipe { max_steps: Some(3), checkpoint_every: 2, precision: super::super::Precision::F32, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let opts = FinetuneOptions { out_dir: Some(dir.path().into()), verbose: false };
        let out = finetune(&mut model, &examples, &recipe, &prompt.template_hash(), &opts).unwrap();
        assert!(dir.path().join("adapter-step-000002.ckpt").exists());
        let (loaded, _) = load_adapter(out.checkpoint.as_ref().unwrap(), &prompt).unwrap();
        assert_eq!(loaded.adapters, model.adapters);

        let a = VlmClassifier::new(model, prompt.clone(), 5.0).unwrap();
        let b = VlmClassifier::new(loaded, prompt.clone(), 5.0).unwrap();
        for p in &pairs {
            let (pa, pb) = (a.classify(p).unwrap(), b.classify(p).unwrap());
            assert_eq!(pa.class, pb.class);
            assert_eq!(pa.confidences, pb.confidences);
            assert!((pa.confidences.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let text = a.generate_text(p).unwrap();
            assert!(canonical_labels().iter().any(|l| text == format!("{}{}", prompt.prefix, l).trim_end()), "{text}");
        }

        let other = PromptConfig { prefix: "My answer is ".into(), ..prompt };
        let err = load_adapter(out.checkpoint.as_ref().unwrap(), &other).unwrap_err();
        assert!(matches!(err, VlmError::TemplateMismatch { .. }));
    }

    #[allow(non_snake_case)]
    fn canonical_labels() -> Vec<&'static str> {
        crate::InteractionClass::ALL.iter().map(|c| c.canonical_label()).collect()
    }

    #[test]
    fn empty_completions_contribute_nothing() {
        let (model, _, mut examples) = setup(4);
        for e in &mut examples {
            e.record.target_completion.clear();
            *e = SftExample::new(&model, e.record.clone(), e.image.clone());
        }
        let (g, loss, targets) = batch_gradient(&model, &examples, &[0, 1, 2, 3], 0, 0).unwrap();
        assert_eq!((loss, targets), (0.0, 0));
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn memory_precheck_suggests_accumulation() {
        let (mut model, _, examples) = setup(2);
        let recipe = SftRecipe { memory_limit_mb: 0.01, ..Default::default() };
        let err = finetune(&mut model, &examples, &recipe, "h", &FinetuneOptions::default()).unwrap_err();
        assert!(matches!(err, VlmError::OutOfMemory { .. }));
        assert!(err.to_string().contains("grad_accumulation"));
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let (mut model, _, examples) = setup(2);
        model.adapters[0] = f32::NAN;
        let r = model.adapters.len() - 1;
        model.adapters[r] = f32::NAN;
        let recipe = SftRecipe { max_steps: Some(2), ..Default::default() };
        let err = finetune(&mut model, &examples, &recipe, "h", &FinetuneOptions::default()).unwrap_err();
        assert!(matches!(err, VlmError::NonFinite { step: 0, .. }), "{err}");
    }
}
