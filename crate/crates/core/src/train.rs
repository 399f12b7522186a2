//! Training loop: seeded mini-batches of whole scenes, Adam updates,
//! per-epoch JSON-lines logging and best-validation checkpointing.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PreparedScene};
use crate::nn::{ParamStore, Session};
use crate::optim::AdamState;
use crate::scene::Scene;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
const VALIDATION_NOISE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many Adam steps; 0 means no cap.
    pub max_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            max_steps: cfg.max_steps,
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
        }
    }
}

/// Batch-mean loss terms of one Adam step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
}

/// Owns the parameters and optimiser state during training.
pub struct Trainer<'m> {
    pub model: &'m Model,
    pub store: ParamStore,
    adam: AdamState,
    noise: ChaCha8Rng,
    clip_norm: f64,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, store: ParamStore, learning_rate: f64, clip_norm: f64, seed: u64) -> Self {
        let adam = AdamState::new(&store, learning_rate);
        Self {
            model,
            store,
            adam,
            noise: ChaCha8Rng::seed_from_u64(seed),
            clip_norm,
        }
    }

    pub fn steps(&self) -> u64 {
        self.adam.step_count()
    }

    /// One Adam update on the mean loss of `batch`.
    pub fn step(&mut self, batch: &[&PreparedScene]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let mut s = Session::new(&self.store, true);
        let mut total = None;
        let (mut rec, mut kl, mut ce) = (0.0, 0.0, 0.0);
        for scene in batch {
            let b = self.model.loss(&mut s, scene, &mut self.noise)?;
            rec += b.reconstruction;
            kl += b.kl;
            ce += b.cross_entropy;
            total = Some(match total {
                Some(t) => s.graph.add(t, b.total)?,
                None => b.total,
            });
        }
        let inv = 1.0 / batch.len() as f64;
        let loss = s.graph.scale(total.expect("non-empty batch"), inv)?;
        let value = s.value(loss).item()?;
        let mut grads = s.backward(loss)?;
        let grad_norm = grads.clip_global_norm(self.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.adam.step_count() as usize,
            });
        }
        self.adam.step(&mut self.store, &grads)?;
        Ok(StepStats {
            loss: value,
            reconstruction: rec * inv,
            kl: kl * inv,
            cross_entropy: ce * inv,
            grad_norm,
        })
    }
}

/// Mean scene loss under a fixed noise seed, so repeated calls on the same
/// parameters agree exactly.
pub fn validation_loss(model: &Model, store: &ParamStore, scenes: &[PreparedScene]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::invalid("validation_loss", "no scenes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_NOISE_SEED);
    let mut sum = 0.0;
    for scene in scenes {
        let mut s = Session::new(store, false);
        let b = model.loss(&mut s, scene, &mut rng)?;
        sum += s.value(b.total).item()?;
    }
    Ok(sum / scenes.len() as f64)
}

pub fn prepare_all(model: &Model, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    scenes.iter().map(|s| model.prepare(s)).collect()
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters with the lowest validation loss (training loss when there
    /// is no validation data).
    pub best: ParamStore,
    pub best_epoch: usize,
    /// Parameters after the last update.
    pub last: ParamStore,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
}

/// Runs the epoch loop. `on_epoch` sees every record as it is produced.
pub fn fit(
    model: &Model,
    store: ParamStore,
    train: &[Scene],
    val: &[Scene],
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("train", "no training scenes"));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::invalid("train", "batch size and epochs must be at least 1"));
    }
    let train_p = prepare_all(model, train)?;
    let val_p = prepare_all(model, val)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut trainer = Trainer::new(model, store, opts.learning_rate, opts.clip_norm, opts.seed);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_p.len()).collect();

    'epochs: for epoch in 0..opts.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            if opts.max_steps > 0 && trainer.steps() >= opts.max_steps as u64 {
                break;
            }
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &train_p[i]).collect();
            let st = trainer.step(&batch)?;
            for (acc, v) in sums.iter_mut().zip([st.loss, st.reconstruction, st.kl, st.cross_entropy, st.grad_norm]) {
                *acc += v;
            }
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let mean = |i: usize| sums[i] / batches as f64;
        let val_loss = if val_p.is_empty() {
            None
        } else {
            Some(validation_loss(model, &trainer.store, &val_p)?)
        };
        let record = EpochRecord {
            epoch,
            steps: trainer.steps(),
            train_loss: mean(0),
            reconstruction: mean(1),
            kl: mean(2),
            cross_entropy: mean(3),
            grad_norm: mean(4),
            val_loss,
        };
        on_epoch(&record)?;
        let score = val_loss.unwrap_or(record.train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, trainer.store.clone()));
        }
        history.push(record);
        if opts.max_steps > 0 && trainer.steps() >= opts.max_steps as u64 {
            break;
        }
    }
    let (_, best_epoch, best_store) = best.ok_or_else(|| Error::invalid("train", "no update was made"))?;
    Ok(FitOutcome {
        best: best_store,
        best_epoch,
        steps: trainer.steps(),
        last: trainer.store,
        history,
    })
}

/// Checkpoint metadata: the model architecture and the run configuration.
pub fn checkpoint_meta(model: &ModelConfig, run: Option<&RunConfig>) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert(
        "model".to_string(),
        serde_json::to_string(model).expect("model config serialises"),
    );
    if let Some(run) = run {
        meta.insert("dataset".to_string(), run.dataset.to_string());
    }
    meta
}

pub fn save_model(path: &Path, model: &Model, store: &ParamStore, run: Option<&RunConfig>) -> Result<()> {
    checkpoint::save(path, store, &checkpoint_meta(&model.config, run))
}

/// Rebuilds a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(Model, ParamStore)> {
    let ckpt = checkpoint::load(path)?;
    let text = ckpt
        .meta
        .get("model")
        .ok_or_else(|| Error::Checkpoint(format!("{}: no model configuration", path.display())))?;
    let config: ModelConfig = serde_json::from_str(text)
        .map_err(|e| Error::Checkpoint(format!("{}: bad model configuration: {e}", path.display())))?;
    let (model, mut store) = Model::init(config, 0)?;
    store.load_from(&ckpt.params)?;
    Ok((model, store))
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: FitOutcome,
    pub model: Model,
}

/// Initialises a model from `cfg`, trains it, writes the JSON-lines log and
/// the best-validation checkpoint under `out_dir`.
pub fn train_run(cfg: &RunConfig, train: &[Scene], val: &[Scene], out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let (model, store) = Model::init(cfg.model_config(), cfg.seed)?;
    let log_path = out_dir.join(LOG_FILE);
    let file = File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?;
    let mut log = BufWriter::new(file);
    let outcome = fit(&model, store, train, val, &TrainOptions::from_config(cfg), &mut |r| {
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(format!("writing {}", log_path.display()), e))
    })?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    save_model(&ckpt, &model, &outcome.best, Some(cfg))?;
    Ok(TrainArtifacts {
        checkpoint: ckpt,
        log: log_path,
        outcome,
        model,
    })
}
