//! Adam optimization, the epoch loop, and checkpoint persistence.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{epoch_order, for_each_batch, AugmentationSpec, SampleSet};
use crate::eval::predict_probabilities;
use crate::fsutil::write_dir_atomic;
use crate::model::{build_model, EWasteNet, EWasteNetConfig, Mode};
use crate::params::ParamStore;
use crate::rng::{label_key, SeededRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Drives initialization, shuffling, augmentation and dropout.
    pub seed: u64,
    pub freeze_backbones: bool,
    /// Apply `augmentation` to training batches. Off by default: the
    /// bundled set is memorized far faster without it.
    pub augment: bool,
    pub augmentation: AugmentationSpec,
    /// Batch size for validation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            freeze_backbones: false,
            augment: false,
            augmentation: AugmentationSpec::default(),
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.eval_batch_size == 0 {
            problems.push("eval_batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            problems.push(format!("adam betas ({}, {}) must lie in [0, 1)", a.beta1, a.beta2));
        }
        if !(a.eps.is_finite() && a.eps > 0.0) {
            problems.push(format!("adam eps {} must be positive", a.eps));
        }
        if let Err(e) = self.augmentation.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("train: {}", problems.join("; "))))
        }
    }

    fn augmentation(&self) -> Option<&AugmentationSpec> {
        self.augment.then_some(&self.augmentation)
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// Gradients of every trainable tensor that received one.
pub fn collect_gradients(params: &ParamStore) -> BTreeMap<String, Vec<f32>> {
    params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .filter_map(|(name, p)| p.tensor.grad().map(|g| (name.to_string(), g)))
        .collect()
}

/// One bias-corrected Adam update. Frozen tensors are never touched, even
/// if a gradient is supplied for them.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    learning_rate: f64,
    adam: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .param(name)
            .ok_or_else(|| Error::arg(format!("gradient for unknown parameter {name}")))?;
        if g.len() != p.tensor.numel() {
            return Err(Error::shape(format!(
                "{name}: gradient has {} values for shape {:?}",
                g.len(),
                p.tensor.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (adam.beta1, adam.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.param(name).expect("checked above");
        if p.frozen {
            continue;
        }
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mut data = p.tensor.to_vec();
        for i in 0..n {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = learning_rate * (mi / c1) / ((vi / c2).sqrt() + adam.eps);
            data[i] = (data[i] as f64 - update) as f32;
        }
        params.set_data(name, data)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted means over the epoch's batches.
    pub mean_loss: f64,
    pub accuracy: f64,
    pub step_losses: Vec<f64>,
}

/// One pass over `set` in a seeded order: forward, cross-entropy, backward,
/// Adam step and gradient reset per batch. Accuracy is measured on the
/// training-mode (augmented, dropout) logits.
pub fn train_epoch(
    model: &mut EWasteNet,
    set: &SampleSet,
    cfg: &TrainConfig,
    state: &mut AdamState,
    epoch: usize,
) -> Result<EpochStats> {
    if set.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let order = epoch_order(set.len(), cfg.seed, epoch, true);
    let mut dropout = SeededRng::derived(cfg.seed, &[label_key("dropout"), epoch as u64]);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let mut step_losses = Vec::new();
    for_each_batch(set, &order, cfg.batch_size, cfg.augmentation(), cfg.seed, epoch, |batch| {
        let logits = model.forward_logits(&batch.images, &mut Mode::Train(&mut dropout))?;
        let loss = logits.cross_entropy(&batch.labels)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {value} at epoch {epoch}, step {}",
                state.step + 1
            )));
        }
        loss.backward()?;
        let grads = collect_gradients(&model.params);
        adam_step(&mut model.params, &grads, state, cfg.learning_rate, &cfg.adam)?;
        model.params.zero_grad();
        let predicted = logits.argmax_rows()?;
        correct += predicted.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        loss_sum += value * batch.labels.len() as f64;
        step_losses.push(value);
        Ok(())
    })?;
    Ok(EpochStats {
        mean_loss: loss_sum / set.len() as f64,
        accuracy: correct as f64 / set.len() as f64,
        step_losses,
    })
}

/// Mean cross-entropy and accuracy in evaluation mode.
pub fn evaluate_set(model: &EWasteNet, set: &SampleSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let probs = predict_probabilities(model, set, batch_size)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in probs.iter().zip(&set.labels) {
        loss -= (row[label] as f64).max(f64::MIN_POSITIVE).ln();
        correct += usize::from(crate::eval::argmax(row) == label);
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Per-epoch curves. Validation arrays are empty when no validation split
/// was supplied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Every optimizer step's batch loss, in order.
    pub step_loss: Vec<f64>,
}

impl History {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    /// The score used to pick the best checkpoint: validation accuracy, or
    /// training accuracy without a validation split.
    fn selection_score(&self, epoch: usize) -> f64 {
        self.val_accuracy.get(epoch).copied().unwrap_or(self.train_accuracy[epoch])
    }

    /// Zero-based epoch with the highest selection score; ties go to the earliest.
    pub fn best_epoch(&self) -> Option<usize> {
        (0..self.epochs()).fold(None, |best, e| match best {
            Some(b) if self.selection_score(b) >= self.selection_score(e) => Some(b),
            _ => Some(e),
        })
    }
}

/// What a finished epoch reports to the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val: Option<(f64, f64)>,
    pub improved: bool,
}

pub struct FitOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
}

/// Trains for `cfg.epochs` epochs, validating after each. With `out`, the
/// `final` and `best` checkpoints are rewritten atomically as training goes.
pub fn fit(
    mut model: EWasteNet,
    classes: &[String],
    train: &SampleSet,
    val: Option<&SampleSet>,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if classes.len() != model.config.fusion.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model predicts {}",
            classes.len(),
            model.config.fusion.num_classes
        )));
    }
    let val = val.filter(|v| !v.is_empty());
    model.freeze_backbones(cfg.freeze_backbones);
    let mut state = AdamState::default();
    let mut history = History::default();
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(&mut model, train, cfg, &mut state, epoch)?;
        history.train_loss.push(stats.mean_loss);
        history.train_accuracy.push(stats.accuracy);
        history.step_loss.extend(stats.step_losses);
        let val_metrics = val.map(|v| evaluate_set(&model, v, cfg.eval_batch_size)).transpose()?;
        if let Some((loss, acc)) = val_metrics {
            history.val_loss.push(loss);
            history.val_accuracy.push(acc);
        }
        let snapshot = Checkpoint {
            model: model.clone(),
            classes: classes.to_vec(),
            train: cfg.clone(),
            epoch: epoch + 1,
            history: history.clone(),
        };
        let improved = history.best_epoch() == Some(epoch);
        if let Some(dir) = out {
            save_checkpoint(&dir.join("final"), &snapshot)?;
            if improved {
                save_checkpoint(&dir.join("best"), &snapshot)?;
            }
        }
        if improved {
            best = Some(snapshot);
        }
        on_epoch(&EpochRecord {
            epoch: epoch + 1,
            steps: state.step,
            train_loss: stats.mean_loss,
            train_accuracy: stats.accuracy,
            val: val_metrics,
            improved,
        });
    }
    let mut best = best.expect("at least one epoch ran");
    if let Some(dir) = out {
        // the best snapshot's history stops at its epoch; keep the full one on disk too
        best.history = history.clone();
        save_checkpoint(&dir.join("best"), &best)?;
    }
    best.history = history.clone();
    Ok(FitOutcome {
        last: Checkpoint {
            model,
            classes: classes.to_vec(),
            train: cfg.clone(),
            epoch: cfg.epochs,
            history,
        },
        best,
    })
}

const FORMAT: &str = "ewastenet-checkpoint-v1";

/// A trained network together with everything needed to use or audit it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: EWasteNet,
    pub classes: Vec<String>,
    pub train: TrainConfig,
    /// Epochs completed when this snapshot was taken.
    pub epoch: usize,
    pub history: History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    offset: usize,
    frozen: bool,
}

/// Where the seeded streams stand: they are derived from `seed` and the
/// epoch index, so this pair is the whole generator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    epoch: usize,
    classes: Vec<String>,
    model: EWasteNetConfig,
    train: TrainConfig,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn checkpoint_bytes(ck: &Checkpoint) -> Result<(String, Vec<u8>, String)> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in ck.model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            offset: blob.len(),
            frozen: p.frozen,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        epoch: ck.epoch,
        classes: ck.classes.clone(),
        model: ck.model.config.clone(),
        train: ck.train.clone(),
        rng: RngState {
            seed: ck.train.seed,
            next_epoch: ck.epoch,
        },
        tensors,
    };
    Ok((
        serde_json::to_string_pretty(&manifest)? + "\n",
        blob,
        serde_json::to_string_pretty(&ck.history)? + "\n",
    ))
}

/// Writes `manifest.json`, `weights.bin` and `history.json` into `dir`,
/// replacing any previous checkpoint only once the new one is complete.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let (manifest, blob, history) = checkpoint_bytes(ck)?;
    write_dir_atomic(dir, |tmp| {
        for (file, bytes) in [
            ("manifest.json", manifest.as_bytes()),
            ("weights.bin", &blob[..]),
            ("history.json", history.as_bytes()),
        ] {
            let path = tmp.join(file);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })
}

fn read(dir: &Path, file: &str) -> Result<Vec<u8>> {
    let path = dir.join(file);
    std::fs::read(&path).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint, checking the tensor manifest against the layout its
/// own model config implies.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", dir.display()));
    let manifest: Manifest = serde_json::from_slice(&read(dir, "manifest.json")?)
        .map_err(|e| bad(format!("manifest.json: {e}")))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unknown format {:?}", manifest.format)));
    }
    let history: History =
        serde_json::from_slice(&read(dir, "history.json")?).map_err(|e| bad(format!("history.json: {e}")))?;
    let blob = read(dir, "weights.bin")?;
    let mut model = build_model(&manifest.model, 0).map_err(|e| bad(format!("model config: {e}")))?;
    if manifest.classes.len() != manifest.model.fusion.num_classes {
        return Err(bad(format!(
            "{} class names for {} outputs",
            manifest.classes.len(),
            manifest.model.fusion.num_classes
        )));
    }

    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .iter()
        .map(|(n, p)| (n.to_string(), p.tensor.shape().to_vec()))
        .collect();
    let listed: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut problems = Vec::new();
    if listed.len() != manifest.tensors.len() {
        problems.push("duplicate tensor names".to_string());
    }
    for (name, shape) in &expected {
        match listed.get(name.as_str()) {
            None => problems.push(format!("missing tensor {name}")),
            Some(t) if &t.shape != shape => {
                problems.push(format!("{name}: shape {:?}, model expects {shape:?}", t.shape))
            }
            Some(_) => {}
        }
    }
    for name in listed.keys() {
        if model.params.param(name).is_none() {
            problems.push(format!("unexpected tensor {name}"));
        }
    }
    if !problems.is_empty() {
        return Err(bad(problems.join("; ")));
    }

    let mut spans: Vec<(usize, usize, &str)> = manifest
        .tensors
        .iter()
        .map(|t| (t.offset, 4 * t.shape.iter().product::<usize>(), t.name.as_str()))
        .collect();
    spans.sort();
    let mut end = 0;
    for &(offset, len, name) in &spans {
        if offset != end {
            return Err(bad(format!("{name}: offset {offset}, expected {end} (overlap or gap)")));
        }
        end += len;
    }
    if end != blob.len() {
        return Err(bad(format!("weights.bin has {} bytes, manifest covers {end}", blob.len())));
    }

    for t in &manifest.tensors {
        let len = 4 * t.shape.iter().product::<usize>();
        let data = blob[t.offset..t.offset + len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let constant = model.params.param(&t.name).expect("validated").constant;
        if constant && !t.frozen {
            return Err(bad(format!("{} is a constant but is marked trainable", t.name)));
        }
        model.params.set_data(&t.name, data)?;
        model.params.set_frozen(&t.name, t.frozen);
    }
    Ok(Checkpoint {
        model,
        classes: manifest.classes,
        train: manifest.train,
        epoch: manifest.epoch,
        history,
    })
}

/// JSON paths (`backbone.depth`) where two configs differ.
fn config_differences(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                config_differences(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &sub, out);
            }
        }
        _ if a != b => out.push(format!("{path}: checkpoint {a}, requested {b}")),
        _ => {}
    }
}

impl Checkpoint {
    /// Errors unless the checkpoint was built from exactly `cfg`.
    pub fn ensure_model_config(&self, cfg: &EWasteNetConfig) -> Result<()> {
        let mut diffs = Vec::new();
        config_differences(
            &serde_json::to_value(&self.model.config)?,
            &serde_json::to_value(cfg)?,
            "",
            &mut diffs,
        );
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "model config does not match the checkpoint: {}",
                diffs.join("; ")
            )))
        }
    }

    /// The serialized files, for byte-level comparisons.
    pub fn to_bytes(&self) -> Result<(String, Vec<u8>, String)> {
        checkpoint_bytes(self)
    }
}

impl std::fmt::Debug for FitOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FitOutcome")
            .field("last_epoch", &self.last.epoch)
            .field("best_epoch", &self.best.epoch)
            .finish()
    }
}
