//! Mini-batch Adam training with early stopping and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainRecipe;
use super::model::CnnModel;
use super::CnnError;
use crate::eventgen::PixelMapPair;
use crate::optim::{Adam, AdamConfig};

/// Number of gradient partial sums per batch. Fixed so that the reduction
/// order, and therefore the result, does not depend on the thread count.
const GRAD_CHUNKS: usize = 4;

const BEST_CKPT: &str = "best.ckpt";
const STATE_CKPT: &str = "last.ckpt";
const EPOCH_LOG: &str = "epochs.jsonl";

/// Random access to labelled examples.
pub trait ExampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<PixelMapPair, CnnError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for [PixelMapPair] {
    fn len(&self) -> usize {
        <[PixelMapPair]>::len(self)
    }

    fn get(&self, index: usize) -> Result<PixelMapPair, CnnError> {
        self.get(index).cloned().ok_or_else(|| CnnError::InvalidInput(format!("example {index} out of range")))
    }
}

impl ExampleSource for Vec<PixelMapPair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<PixelMapPair, CnnError> {
        ExampleSource::get(self.as_slice(), index)
    }
}

impl ExampleSource for crate::datastore::Subset {
    fn len(&self) -> usize {
        crate::datastore::Subset::len(self)
    }

    fn get(&self, index: usize) -> Result<PixelMapPair, CnnError> {
        Ok(crate::datastore::Subset::get(self, index)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a new best loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best_loss: f64::INFINITY, best_epoch: 0, stale_epochs: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.stale_epochs = 0;
            StopDecision::Improved
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the epoch log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt` if present.
    pub resume: bool,
    /// Stop after this many epochs in this call, leaving a resumable state.
    pub epoch_limit: Option<usize>,
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub best_params: Vec<f32>,
}

/// Mean loss and accuracy of `model` over `data`.
pub fn evaluate(model: &CnnModel, data: &dyn ExampleSource) -> Result<(f64, f64), CnnError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let per = crate::par::try_map(&idx, |&i| {
        let ex = data.get(i)?;
        let pred = model.predict(&ex)?;
        let label = ex.truth.interaction_class.index();
        Ok::<_, CnnError>((-pred.raw_logp[label], pred.class.index() == label))
    })?;
    let n = per.len().max(1) as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().filter(|p| p.1).count() as f64 / n))
}

/// Summed loss and correct count over one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchResult {
    pub loss: f64,
    pub correct: usize,
}

/// Mean gradient of a batch into `grads`. Partial sums over a fixed number of
/// chunks are reduced in order, so the result is bit-identical for any
/// thread count.
pub fn batch_gradient(
    model: &CnnModel,
    examples: &[PixelMapPair],
    dropout_seeds: &[u64],
    grads: &mut [f32],
) -> Result<BatchResult, CnnError> {
    let per_chunk = examples.len().div_ceil(GRAD_CHUNKS).max(1);
    let chunks: Vec<usize> = (0..examples.len().div_ceil(per_chunk)).collect();
    let partials = crate::par::try_map(&chunks, |&c| {
        let lo = c * per_chunk;
        let hi = (lo + per_chunk).min(examples.len());
        let mut g = vec![0.0f32; model.num_params()];
        let mut loss = 0.0;
        let mut correct = 0;
        for i in lo..hi {
            let ex = &examples[i];
            let xz = model.input_from_grid(&ex.view_xz)?;
            let yz = model.input_from_grid(&ex.view_yz)?;
            let label = ex.truth.interaction_class.index();
            let s = model.accumulate_gradient(&xz, &yz, label, Some(dropout_seeds[i]), &mut g)?;
            loss += s.loss;
            correct += usize::from(s.correct);
        }
        Ok::<_, CnnError>((g, loss, correct))
    })?;
    grads.fill(0.0);
    let mut loss = 0.0;
    let mut correct = 0;
    for (g, l, c) in partials {
        crate::linalg::add_assign(grads, &g);
        loss += l;
        correct += c;
    }
    let scale = 1.0 / examples.len() as f32;
    grads.iter_mut().for_each(|g| *g *= scale);
    Ok(BatchResult { loss, correct })
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    epochs_done: usize,
    adam_step: u64,
    stopper: EarlyStopping,
    history: Vec<EpochRecord>,
    finished: bool,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CnnError {
    CnnError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

fn write_log(dir: &Path, history: &[EpochRecord]) -> Result<(), CnnError> {
    let path = dir.join(EPOCH_LOG);
    let tmp = dir.join(format!("{EPOCH_LOG}.partial"));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    for r in history {
        let line = serde_json::to_string(r).map_err(|e| io_err(&tmp, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(&tmp, e))?;
    }
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

/// Trains `model` in place and leaves it holding the best-validation weights.
pub fn train(
    model: &mut CnnModel,
    train_set: &dyn ExampleSource,
    val_set: &dyn ExampleSource,
    recipe: &TrainRecipe,
    opts: &TrainOptions,
) -> Result<TrainOutcome, CnnError> {
    recipe.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CnnError::InvalidInput("training and validation sets must be non-empty".into()));
    }
    let adam_cfg = AdamConfig { beta1: recipe.beta1, beta2: recipe.beta2, epsilon: recipe.epsilon, weight_decay: 0.0 };
    let mut adam = Adam::new(adam_cfg, model.num_params());
    let mut stopper = EarlyStopping::new(recipe.early_stop_patience);
    let mut history = Vec::new();
    let mut best_params = model.params.clone();
    let mut start_epoch = 1;

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let state_path = dir.join(STATE_CKPT);
        if opts.resume && state_path.exists() {
            let mut ck = crate::ckpt::load(&state_path)?;
            let meta: ResumeMeta = serde_json::from_value(ck.meta["resume"].clone()).map_err(|e| io_err(&state_path, e))?;
            let params = ck.take("params", &state_path)?;
            if params.len() != model.num_params() {
                return Err(CnnError::InvalidInput("resume state does not match the model layout".into()));
            }
            model.params = params;
            adam.m = ck.take("adam_m", &state_path)?;
            adam.v = ck.take("adam_v", &state_path)?;
            adam.step = meta.adam_step;
            best_params = ck.take("best_params", &state_path)?;
            stopper = meta.stopper;
            history = meta.history;
            start_epoch = meta.epochs_done + 1;
            if meta.finished {
                start_epoch = recipe.max_epochs + 1;
            }
        }
    }

    let n = train_set.len();
    let mut stopped_early = false;
    let mut epochs_this_call = 0;
    let mut epoch = start_epoch;
    while epoch <= recipe.max_epochs {
        if opts.epoch_limit.is_some_and(|l| epochs_this_call >= l) {
            break;
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut crate::seed::rng(recipe.seed, &[0x5EED, epoch as u64]));
        let mut grads = vec![0.0f32; model.num_params()];
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, batch) in order.chunks(recipe.batch_size).enumerate() {
            let examples = crate::par::try_map(batch, |&i| train_set.get(i))?;
            let seeds: Vec<u64> =
                batch.iter().map(|&i| crate::seed::derive(recipe.seed, &[0xD509, epoch as u64, i as u64])).collect();
            let r = batch_gradient(model, &examples, &seeds, &mut grads)?;
            if !r.loss.is_finite() {
                return Err(CnnError::NonFinite {
                    quantity: "loss".into(),
                    epoch,
                    step,
                    detail: format!("batch loss {} over event ids {:?}", r.loss, examples.iter().map(|e| e.event_id).collect::<Vec<_>>()),
                });
            }
            if let Some((name, at)) = model.layout().first_non_finite(&grads) {
                return Err(CnnError::NonFinite {
                    quantity: "gradient".into(),
                    epoch,
                    step,
                    detail: format!("{name}[{at}]; learning rate {}", recipe.learning_rate),
                });
            }
            adam.update(&mut model.params, &grads, recipe.learning_rate);
            if let Some((name, at)) = model.layout().first_non_finite(&model.params) {
                return Err(CnnError::NonFinite {
                    quantity: "parameter".into(),
                    epoch,
                    step,
                    detail: format!("{name}[{at}] after update; learning rate {}", recipe.learning_rate),
                });
            }
            loss_sum += r.loss;
            correct += r.correct;
        }
        let (val_loss, val_accuracy) = evaluate(model, val_set)?;
        if !val_loss.is_finite() {
            return Err(CnnError::NonFinite { quantity: "validation loss".into(), epoch, step: 0, detail: format!("{val_loss}") });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3} ({:.0}s)",
                record.train_loss, record.train_accuracy, record.val_loss, record.val_accuracy, record.seconds
            );
        }
        history.push(record);
        let decision = stopper.observe(epoch, val_loss);
        if decision == StopDecision::Improved {
            best_params.clone_from(&model.params);
        }
        stopped_early = decision == StopDecision::Stop;
        let finished = stopped_early || epoch == recipe.max_epochs;
        if let Some(dir) = &opts.out_dir {
            write_log(dir, &history)?;
            if decision == StopDecision::Improved {
                let best = CnnModel::from_params(model.config.clone(), best_params.clone())?;
                best.save(&dir.join(BEST_CKPT), serde_json::json!({ "epoch": epoch, "val_loss": val_loss }))?;
            }
            let meta = ResumeMeta { epochs_done: epoch, adam_step: adam.step, stopper: stopper.clone(), history: history.clone(), finished };
            let meta = serde_json::json!({ "kind": "nuvision-cnn-state", "config": model.config, "recipe": recipe, "resume": meta });
            crate::ckpt::save(
                &dir.join(STATE_CKPT),
                &meta,
                &[("params", &model.params), ("adam_m", &adam.m), ("adam_v", &adam.v), ("best_params", &best_params)],
            )?;
        }
        epochs_this_call += 1;
        epoch += 1;
        if stopped_early {
            break;
        }
    }
    model.params.clone_from(&best_params);
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        stopped_early,
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::CnnConfig;
    use crate::eventgen::{generate_range, DetectorGeometry, GeneratorConfig};

    fn tiny_events(n: u64, seed: u64) -> Vec<PixelMapPair> {
        let mut cfg = GeneratorConfig::default();
        cfg.base_seed = seed;
        cfg.geometry = DetectorGeometry { crop_size: 32, ..DetectorGeometry::default() };
        cfg.geometry.render_pitch = crate::eventgen::RenderPitch::Coarse;
        generate_range(&cfg, 0, n).unwrap()
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn batch_gradient_ignores_thread_count() {
        let model = CnnModel::new(CnnConfig::tiny(), 4).unwrap();
        let data = tiny_events(10, 8);
        let seeds: Vec<u64> = (0..10).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let mut g = vec![0.0f32; model.num_params()];
            let r = pool.install(|| batch_gradient(&model, &data, &seeds, &mut g)).unwrap();
            (g, r)
        };
        let (g1, r1) = run(1);
        let (g3, r3) = run(3);
        assert_eq!(r1, r3);
        assert!(g1.iter().zip(&g3).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn patience_ten_with_rising_loss_stops_at_epoch_eleven() {
        let mut s = EarlyStopping::new(10);
        let mut stop_at = None;
        for epoch in 1..=100 {
            if s.observe(epoch, epoch as f64) == StopDecision::Stop {
                stop_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stop_at, Some(11));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn overfits_a_small_set() {
        let data = tiny_events(12, 4);
        let mut cfg = CnnConfig::tiny();
        cfg.dropout_rate = 0.0;
        let mut model = CnnModel::new(cfg, 1).unwrap();
        let recipe = TrainRecipe { learning_rate: 3e-3, batch_size: 4, max_epochs: 60, early_stop_patience: 60, ..Default::default() };
        let out = train(&mut model, &data, &data, &recipe, &TrainOptions::default()).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let (loss, acc) = evaluate(&model, &data).unwrap();
        assert!(loss < 0.5 * first, "loss {first} -> {loss}");
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = tiny_events(10, 7);
        let (tr, va) = data.split_at(8);
        let recipe = TrainRecipe { learning_rate: 1e-3, batch_size: 3, max_epochs: 4, early_stop_patience: 10, seed: 9, ..Default::default() };
        let dir_a = tempfile::tempdir().unwrap();
        let mut a = CnnModel::new(CnnConfig::tiny(), 1).unwrap();
        let opts = TrainOptions { out_dir: Some(dir_a.path().into()), ..Default::default() };
        let ra = train(&mut a, &tr.to_vec(), &va.to_vec(), &recipe, &opts).unwrap();

        let dir_b = tempfile::tempdir().unwrap();
        let mut b = CnnModel::new(CnnConfig::tiny(), 1).unwrap();
        let opts = TrainOptions { out_dir: Some(dir_b.path().into()), epoch_limit: Some(2), ..Default::default() };
        train(&mut b, &tr.to_vec(), &va.to_vec(), &recipe, &opts).unwrap();
        let mut b = CnnModel::new(CnnConfig::tiny(), 99).unwrap();
        let opts = TrainOptions { out_dir: Some(dir_b.path().into()), resume: true, ..Default::default() };
        let rb = train(&mut b, &tr.to_vec(), &va.to_vec(), &recipe, &opts).unwrap();

        assert_eq!(ra.history.len(), 4);
        assert_eq!(ra.history.iter().map(|r| r.val_loss).collect::<Vec<_>>(), rb.history.iter().map(|r| r.val_loss).collect::<Vec<_>>());
        assert_eq!(a.params, b.params);
        let log = fs::read_to_string(dir_b.path().join(EPOCH_LOG)).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(dir_b.path().join(BEST_CKPT).exists());
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let data = tiny_events(6, 2);
        let mut model = CnnModel::new(CnnConfig::tiny(), 1).unwrap();
        let r = model.param_range("head.fc2.bias").unwrap();
        model.params[r.start] = f32::NAN;
        let recipe = TrainRecipe { learning_rate: 1e-3, batch_size: 2, max_epochs: 2, ..Default::default() };
        let err = train(&mut model, &data, &data, &recipe, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, CnnError::NonFinite { epoch: 1, step: 0, .. }), "{err}");
    }
}
