use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nuvision::cnn::{self, CnnModel, TrainOptions};
use nuvision::config::RunConfig;
use nuvision::datastore::{self, ids_hash, write_dataset, Dataset, SplitSpec, Subset};
use nuvision::evalkit::{
    compute_report, read_predictions, render_report, resource_profile, write_predictions, Classifier,
    LabeledPrediction, MetricsReport, ResourceProfile,
};
use nuvision::eventgen::generate_dataset;
use nuvision::vlm::{self, FinetuneOptions, SftExample, VlmClassifier};

use crate::failure::Failure;
use crate::{Cli, Command, DataArgs, ModelArgs, ModelKind};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const SPLIT_FILE: &str = "split.json";
pub const CNN_CHECKPOINT: &str = "cnn.ckpt";

/// A split tied to the exact dataset it was drawn from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub spec: SplitSpec,
    pub dataset_hash: String,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub test_hash: String,
}

/// Written next to a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionsMeta {
    pub model_tag: String,
    pub split_hash: String,
    pub dataset_hash: String,
    pub checkpoint: PathBuf,
    pub profile: ResourceProfile,
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(config.seed);
    config.apply_seed(seed);
    config.validate()?;
    match &cli.command {
        Command::Gen => gen(cli, &config),
        Command::Split { data } => split(cli, &config, data),
        Command::TrainCnn(args) => train_cnn(cli, &config, args),
        Command::FinetuneVlm(args) => finetune_vlm(cli, &config, args),
        Command::Infer(args) => infer(cli, &config, args),
        Command::Eval { predictions, split } => eval(cli, predictions, split),
        Command::Report { first, second } => report(cli, first, second),
        Command::Bench(args) => bench(cli, &config, args),
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::runtime(format!("{}: {e}", path.display()))
}

fn required_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| Failure::usage("this command needs --out"))
}

fn required_model(cli: &Cli) -> Result<ModelKind, Failure> {
    cli.model.ok_or_else(|| Failure::usage("this command needs --model {cnn,vlm}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let body = serde_json::to_string_pretty(value).expect("serializable");
    let tmp = path.with_extension("partial");
    fs::write(&tmp, body).map_err(|e| io_failure(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_failure(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_resolved(dir: &Path, config: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, config.to_toml()).map_err(|e| io_failure(&path, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn gen(cli: &Cli, config: &RunConfig) -> Result<(), Failure> {
    let out = required_out(cli)?;
    let n = cli.n.unwrap_or(config.dataset.n_events);
    let stream = generate_dataset(config.generator.clone(), n)?;
    let manifest = write_dataset(stream, config.dataset.shard_size, out, &config.generator.geometry, config.generator.base_seed)?;
    write_resolved(out, config)?;
    print_json(&serde_json::json!({
        "dataset": out,
        "n_events": manifest.n_events,
        "shards": manifest.shard_paths.len(),
        "composition": manifest.composition_counts,
    }));
    Ok(())
}

fn split(cli: &Cli, config: &RunConfig, data: &Path) -> Result<(), Failure> {
    let dataset = Dataset::open(data)?;
    dataset.verify()?;
    let labels: Vec<_> = dataset.truths()?.into_iter().map(|(id, t)| (id, t.interaction_class)).collect();
    let indices = datastore::split(&labels, &config.split)?;
    let file = SplitFile {
        spec: config.split.clone(),
        dataset_hash: dataset.manifest_hash(),
        test_hash: indices.test_hash(),
        train: indices.train,
        val: indices.val,
        test: indices.test,
    };
    let out = cli.out.clone().unwrap_or_else(|| data.join(SPLIT_FILE));
    write_json(&out, &file)?;
    write_resolved(&parent_dir(&out), config)?;
    print_json(&serde_json::json!({
        "split": out,
        "train": file.train.len(),
        "val": file.val.len(),
        "test": file.test.len(),
        "test_hash": file.test_hash,
    }));
    Ok(())
}

/// Opens the dataset and split, refusing a split drawn from other data.
fn open_split(args: &DataArgs) -> Result<(Dataset, SplitFile), Failure> {
    let dataset = Dataset::open(&args.data)?;
    let split_path = args.split.clone().unwrap_or_else(|| args.data.join(SPLIT_FILE));
    let split: SplitFile = read_json(&split_path)?;
    let actual = dataset.manifest_hash();
    if split.dataset_hash != actual {
        return Err(Failure::data(format!(
            "{} was drawn from dataset {}, but {} is {}",
            split_path.display(),
            split.dataset_hash,
            args.data.display(),
            actual
        )));
    }
    if ids_hash(&split.test) != split.test_hash {
        return Err(Failure::data(format!("{}: test ids do not match test_hash", split_path.display())));
    }
    dataset.verify()?;
    Ok((dataset, split))
}

fn capped(ids: &[u64], cap: Option<u64>) -> Vec<u64> {
    let n = cap.map_or(ids.len(), |c| ids.len().min(c as usize));
    ids[..n].to_vec()
}

fn train_cnn(cli: &Cli, config: &RunConfig, args: &DataArgs) -> Result<(), Failure> {
    let out = required_out(cli)?;
    let (dataset, split) = open_split(args)?;
    write_resolved(out, config)?;
    let train_set = Subset::by_ids(dataset.clone(), &capped(&split.train, cli.n))?;
    let val_set = Subset::by_ids(dataset, &split.val)?;
    let mut model = CnnModel::new(config.cnn.model.clone(), config.cnn.recipe.seed)?;
    eprintln!("training {} parameters on {} events ({} validation)", model.num_params(), train_set.len(), val_set.len());
    let opts = TrainOptions { out_dir: Some(out.to_path_buf()), resume: true, epoch_limit: None, verbose: true };
    let outcome = cnn::train(&mut model, &train_set, &val_set, &config.cnn.recipe, &opts)?;
    let ckpt = out.join(CNN_CHECKPOINT);
    let extra = serde_json::json!({
        "dataset_hash": split.dataset_hash,
        "split_hash": split.test_hash,
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
    });
    model.save(&ckpt, extra)?;
    let last = outcome.history.last();
    print_json(&serde_json::json!({
        "checkpoint": ckpt,
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "stopped_early": outcome.stopped_early,
        "last_val_accuracy": last.map(|r| r.val_accuracy),
    }));
    Ok(())
}

fn finetune_vlm(cli: &Cli, config: &RunConfig, args: &DataArgs) -> Result<(), Failure> {
    let out = required_out(cli)?;
    let (dataset, split) = open_split(args)?;
    write_resolved(out, config)?;
    let vc = &config.vlm;
    let base = vlm::load_base(&vc.adapter.base_model_id, vc.backbone.clone())?;
    let mut model = vlm::attach_adapters_to(base, &vc.adapter)?;
    let cap = cli.n.or(vc.max_train_records.map(|c| c as u64));
    let pairs = Subset::by_ids(dataset, &capped(&split.train, cap))?.read_all()?;
    let examples = pairs
        .iter()
        .map(|p| SftExample::from_pair(&model, p, &vc.prompt))
        .collect::<Result<Vec<_>, _>>()?;
    eprintln!(
        "fine-tuning {} adapter parameters ({:.2}% of the model) on {} records",
        model.trainable_param_count(),
        100.0 * vlm::trainable_fraction(&model),
        examples.len()
    );
    let opts = FinetuneOptions { out_dir: Some(out.to_path_buf()), verbose: true };
    let outcome = vlm::finetune(&mut model, &examples, &vc.recipe, &vc.prompt.template_hash(), &opts)?;
    let (first, last) = outcome.smoothed_endpoints(10);
    print_json(&serde_json::json!({
        "checkpoint": outcome.checkpoint,
        "steps": outcome.log.len(),
        "loss_start": first,
        "loss_end": last,
        "base_hash": outcome.base_hash_after,
    }));
    Ok(())
}

fn load_classifier(config: &RunConfig, kind: ModelKind, checkpoint: &Path) -> Result<Box<dyn Classifier>, Failure> {
    Ok(match kind {
        ModelKind::Cnn => {
            let (model, _) = CnnModel::load(checkpoint)?;
            if model.config.input_size != config.generator.geometry.crop_size {
                return Err(Failure::data(format!(
                    "checkpoint expects {}-pixel views, the configuration produces {}",
                    model.config.input_size, config.generator.geometry.crop_size
                )));
            }
            Box::new(model)
        }
        ModelKind::Vlm => {
            let (model, _) = vlm::load_adapter(checkpoint, &config.vlm.prompt)?;
            Box::new(VlmClassifier::new(model, config.vlm.prompt.clone(), config.vlm.temperature)?)
        }
    })
}

pub fn meta_path(predictions: &Path) -> PathBuf {
    let mut s = predictions.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn infer(cli: &Cli, config: &RunConfig, args: &ModelArgs) -> Result<(), Failure> {
    let kind = required_model(cli)?;
    let out = required_out(cli)?;
    let (dataset, split) = open_split(&args.data)?;
    let classifier = load_classifier(config, kind, &args.checkpoint)?;
    let test = Subset::by_ids(dataset, &split.test)?;
    let first = [test.get(0)?];
    let profile = resource_profile(classifier.as_ref(), &first, config.eval.n_warmup, config.eval.n_measure)?;
    let mut preds = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let pair = test.get(i)?;
        let p = classifier
            .classify_pair(&pair)
            .map_err(|e| Failure::runtime(format!("event {}: {e}", pair.event_id)))?;
        preds.push(LabeledPrediction::from_prediction(pair.event_id, pair.truth.interaction_class, &p));
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    write_predictions(out, &preds)?;
    let meta = PredictionsMeta {
        model_tag: kind.tag().into(),
        split_hash: split.test_hash.clone(),
        dataset_hash: split.dataset_hash.clone(),
        checkpoint: args.checkpoint.clone(),
        profile,
    };
    write_json(&meta_path(out), &meta)?;
    write_resolved(&parent_dir(out), config)?;
    let correct = preds.iter().filter(|p| p.truth == p.predicted).count();
    print_json(&serde_json::json!({
        "predictions": out,
        "n": preds.len(),
        "accuracy": correct as f64 / preds.len() as f64,
        "ms_per_sample": meta.profile.ms_per_sample,
    }));
    Ok(())
}

fn eval(cli: &Cli, predictions: &Path, split_path: &Path) -> Result<(), Failure> {
    let split: SplitFile = read_json(split_path)?;
    let meta: PredictionsMeta = read_json(&meta_path(predictions))?;
    let preds = read_predictions(predictions)?;
    let ids: Vec<u64> = preds.iter().map(|p| p.event_id).collect();
    let got = ids_hash(&ids);
    if got != split.test_hash || meta.split_hash != split.test_hash {
        return Err(Failure::data(format!(
            "{} covers test split {got} (recorded {}), but {} is {}",
            predictions.display(),
            meta.split_hash,
            split_path.display(),
            split.test_hash
        )));
    }
    let report = compute_report(&meta.model_tag, &split.test_hash, &preds, Some(&meta.profile))?;
    let dir = cli.out.clone().unwrap_or_else(|| parent_dir(predictions));
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let path = dir.join(format!("{}_metrics.json", meta.model_tag));
    write_json(&path, &report)?;
    for flag in &report.flags {
        eprintln!("warning: {flag}");
    }
    print_json(&serde_json::json!({
        "metrics": path,
        "accuracy": report.accuracy,
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_auc": report.macro_auc,
    }));
    Ok(())
}

fn report(cli: &Cli, first: &Path, second: &Path) -> Result<(), Failure> {
    let out = required_out(cli)?;
    let a: MetricsReport = read_json(first)?;
    let b: MetricsReport = read_json(second)?;
    let files = render_report(&a, &b, out)?;
    println!("{}", fs::read_to_string(&files.table).map_err(|e| io_failure(&files.table, e))?);
    eprintln!("wrote {} and {} figures to {}", files.metrics_json.display(), files.confusion_pngs.len() + files.roc_pngs.len(), out.display());
    Ok(())
}

fn bench(cli: &Cli, config: &RunConfig, args: &ModelArgs) -> Result<(), Failure> {
    let kind = required_model(cli)?;
    let (dataset, split) = open_split(&args.data)?;
    let classifier = load_classifier(config, kind, &args.checkpoint)?;
    let samples = Subset::by_ids(dataset, &capped(&split.test, Some(8)))?.read_all()?;
    let n_measure = cli.n.map_or(config.eval.n_measure, |n| n as usize);
    let profile = resource_profile(classifier.as_ref(), &samples, config.eval.n_warmup, n_measure)?;
    if let Some(out) = &cli.out {
        write_json(out, &profile)?;
    }
    print_json(&serde_json::json!({ "model": kind.tag(), "profile": profile }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_sits_next_to_predictions() {
        assert_eq!(meta_path(Path::new("out/p.jsonl")), PathBuf::from("out/p.jsonl.meta.json"));
        assert_eq!(parent_dir(Path::new("p.jsonl")), PathBuf::from("."));
    }

    #[test]
    fn caps_keep_order() {
        assert_eq!(capped(&[5, 3, 9], Some(2)), vec![5, 3]);
        assert_eq!(capped(&[5, 3, 9], Some(10)), vec![5, 3, 9]);
        assert_eq!(capped(&[5, 3, 9], None), vec![5, 3, 9]);
    }
}
