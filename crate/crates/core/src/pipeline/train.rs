//! The training loop.
//!
//! Each step draws a batch, and for every item augments the image, builds
//! the attention stack, harvests proposals, samples pseudo-labels and
//! backpropagates the weighted objective into the localization network.
//! Only the network's parameters are ever written; the attention provider
//! and the classifier are checked against their digests after each epoch.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use super::{build_attention, build_classifier, dataset_info, load_split, prepare_item, ItemContext};
use crate::backbone::{AttentionProvider, Classifier};
use crate::config::RunConfig;
use crate::data::{DatasetInfo, Sample};
use crate::error::{DipsError, Result};
use crate::losses::{objective, LossInputs, LossTerms};
use crate::metrics::{pxap, EvalRecord};
use crate::model::{Adam, Checkpoint, UNet};
use crate::seed::{rng_for, Stream};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RUN_CONFIG: &str = "config.txt";

fn hex(d: &[u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-step log line.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub batch: usize,
    /// Batch means of the enabled terms.
    pub terms: LossTerms,
    pub total: f64,
    pub harvest_fallbacks: usize,
    pub degenerate_maps: usize,
    pub sampler_clipped: usize,
    pub sampler_uniform: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fallback_images: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub degenerate_images: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub steps: u64,
    pub mean_total: f64,
    pub mean_cpa: Option<f64>,
    pub val_pxap: Option<f64>,
    pub harvest_fallbacks: usize,
    pub fallback_images: Vec<String>,
    pub degenerate_images: Vec<String>,
}

/// Digests of the frozen models.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrozenDigests {
    pub backbone: String,
    pub classifier: String,
}

impl FrozenDigests {
    pub fn of(attention: &dyn AttentionProvider, classifier: &dyn Classifier) -> Self {
        Self {
            backbone: hex(&attention.weights_digest()),
            classifier: hex(&classifier.weights_digest()),
        }
    }
}

/// Training state: the network, its optimizer and the frozen providers.
pub struct Trainer {
    pub cfg: RunConfig,
    pub info: DatasetInfo,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub attention: Box<dyn AttentionProvider>,
    pub classifier: Box<dyn Classifier>,
    pub model: UNet,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: u64,
    pub step: u64,
    pub best_val_pxap: Option<f64>,
    /// Parameter slots registered with the optimizer.
    param_ids: Vec<String>,
    digests: FrozenDigests,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let info = dataset_info(cfg)?;
        let model = UNet::new(cfg.model.resolve(info.image_width, info.image_height)?)?;
        let optimizer = Adam::new(model.parameter_count(), cfg.optim.adam());
        Self::assemble(cfg, info, model, optimizer, 0, 0, None)
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(cfg: &RunConfig, checkpoint: &Path) -> Result<Self> {
        let info = dataset_info(cfg)?;
        let expected = cfg.model.resolve(info.image_width, info.image_height)?;
        let ckpt = Checkpoint::load_expecting(checkpoint, &expected)?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| DipsError::Checkpoint("checkpoint carries no optimizer state".into()))?;
        let best = ckpt.meta.get("best_val_pxap").and_then(|v| v.as_f64());
        Self::assemble(cfg, info, ckpt.model, optimizer, ckpt.epoch, ckpt.step, best)
    }

    fn assemble(
        cfg: &RunConfig,
        info: DatasetInfo,
        model: UNet,
        optimizer: Adam,
        epoch: u64,
        step: u64,
        best_val_pxap: Option<f64>,
    ) -> Result<Self> {
        if cfg.optim.batch_size == 0 {
            return Err(DipsError::Config("optim.batch_size must be positive".into()));
        }
        let train = load_split(cfg, &info, &cfg.data.train)?;
        if train.is_empty() {
            return Err(DipsError::Config("training split is empty".into()));
        }
        let val = if cfg.train.val_every > 0 && cfg.data.split_path(&cfg.data.val).exists() {
            load_split(cfg, &info, &cfg.data.val)?
        } else {
            Vec::new()
        };
        let attention = build_attention(&cfg.backbone, &info)?;
        let classifier = build_classifier(&cfg.classifier, &info)?;
        let weights = cfg.loss.weights()?;
        if weights.lambda_cls > 0.0 && !classifier.supports_input_grad() {
            return Err(DipsError::Config(
                "the classifier term needs a classifier with input gradients".into(),
            ));
        }
        let digests = FrozenDigests::of(attention.as_ref(), classifier.as_ref());
        let param_ids = model.slots().iter().map(|s| s.name.clone()).collect();
        Ok(Self {
            cfg: cfg.clone(),
            info,
            train,
            val,
            attention,
            classifier,
            model,
            optimizer,
            epoch,
            step,
            best_val_pxap,
            param_ids,
            digests,
        })
    }

    pub fn frozen_digests(&self) -> FrozenDigests {
        FrozenDigests::of(self.attention.as_ref(), self.classifier.as_ref())
    }

    /// The optimizer may only touch the network's own parameter slots.
    fn check_param_containment(&self, grads: &[f32]) -> Result<()> {
        let slots_match = self.model.slots().len() == self.param_ids.len()
            && self
                .model
                .slots()
                .iter()
                .zip(&self.param_ids)
                .all(|(s, id)| &s.name == id);
        if !slots_match
            || self.optimizer.num_params() != self.model.parameter_count()
            || grads.len() != self.model.parameter_count()
        {
            return Err(DipsError::Config(
                "optimizer parameters differ from the network's parameter set".into(),
            ));
        }
        Ok(())
    }

    /// One optimizer step over the given training indices.
    pub fn train_step(&mut self, batch: &[usize], log: &mut impl Write) -> Result<StepLog> {
        let epoch = self.epoch;
        let lr = self.cfg.optim.lr_at(epoch as usize);
        let weights = self.cfg.loss.weights()?;
        let crf = self.cfg.loss.crf();
        let ctx = ItemContext::new(&self.cfg, &self.info, self.attention.as_ref(), self.classifier.as_ref())?;
        let mut grads = vec![0.0f32; self.model.parameter_count()];
        let mut sums = [0.0f64; 4];
        let mut step_log = StepLog {
            epoch,
            step: self.step,
            lr,
            batch: batch.len(),
            terms: LossTerms::default(),
            total: 0.0,
            harvest_fallbacks: 0,
            degenerate_maps: 0,
            sampler_clipped: 0,
            sampler_uniform: 0,
            fallback_images: Vec::new(),
            degenerate_images: Vec::new(),
        };
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let sample = &self.train[i];
            let item = prepare_item(&ctx, sample, i as u64, epoch)?;
            if item.harvest.fallback {
                step_log.harvest_fallbacks += 1;
                step_log.fallback_images.push(sample.id.clone());
            }
            if item.harvest.degenerate_maps > 0 {
                step_log.degenerate_images.push(sample.id.clone());
            }
            step_log.degenerate_maps += item.harvest.degenerate_maps;
            step_log.sampler_clipped += item.labels.clipped as usize;
            step_log.sampler_uniform += item.labels.uniform_fallback as usize;
            let (cache, map) = self.model.forward_cached(&item.image)?;
            let inputs = LossInputs {
                image: &item.image,
                labels: &item.labels,
                class_index: sample.class_index,
                classifier: self.classifier.as_ref(),
            };
            let (terms, total, mut grad) = objective(&map, &inputs, &weights, &crf).map_err(|e| match e {
                DipsError::NonFiniteLoss { term, value } => {
                    let diag = json!({"abort": "non-finite loss", "term": term, "value": value.to_string(),
                                      "image": sample.id, "epoch": epoch, "step": self.step});
                    let _ = writeln!(log, "{diag}");
                    DipsError::NonFiniteLoss { term, value }
                }
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip([terms.cls, terms.cpa, terms.crf, Some(total)]) {
                *s += v.unwrap_or(0.0) * scale;
            }
            grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            self.model.backward(&cache, &grad, &mut grads)?;
        }
        self.check_param_containment(&grads)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(DipsError::NonFiniteLoss {
                term: "gradient",
                value: f64::NAN,
            });
        }
        self.optimizer.update(self.model.params_mut(), &grads, lr)?;
        self.step += 1;
        step_log.terms = LossTerms {
            cls: (weights.lambda_cls > 0.0).then_some(sums[0]),
            cpa: (weights.lambda_cpa > 0.0).then_some(sums[1]),
            crf: (weights.lambda_crf > 0.0).then_some(sums[2]),
        };
        step_log.total = sums[3];
        writeln!(log, "{}", serde_json::to_string(&step_log)?)?;
        Ok(step_log)
    }

    /// Shuffled batches of the training set for the current epoch.
    pub fn epoch_batches(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.train.seed, Stream::Shuffle, 0, self.epoch));
        order.chunks(self.cfg.optim.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn run_epoch(&mut self, log: &mut impl Write) -> Result<EpochLog> {
        let batches = self.epoch_batches();
        let (mut total, mut cpa, mut fallbacks) = (0.0, 0.0, 0);
        let mut has_cpa = false;
        let mut fallback_images = Vec::new();
        let mut degenerate_images = Vec::new();
        for batch in &batches {
            let s = self.train_step(batch, log)?;
            total += s.total;
            if let Some(c) = s.terms.cpa {
                cpa += c;
                has_cpa = true;
            }
            fallbacks += s.harvest_fallbacks;
            fallback_images.extend(s.fallback_images);
            degenerate_images.extend(s.degenerate_images);
        }
        let after = self.frozen_digests();
        if after != self.digests {
            return Err(DipsError::Config(format!(
                "frozen model weights changed during training: {:?} -> {after:?}",
                self.digests
            )));
        }
        let epoch = self.epoch;
        self.epoch += 1;
        let val_every = self.cfg.train.val_every as u64;
        let last = self.epoch as usize >= self.cfg.optim.epochs;
        let val_pxap = if val_every > 0 && !self.val.is_empty() && (self.epoch.is_multiple_of(val_every) || last) {
            Some(self.validate()?)
        } else {
            None
        };
        if !fallback_images.is_empty() {
            warn!(
                "epoch {epoch}: whole-image fallback for {} images",
                fallback_images.len()
            );
        }
        let n = batches.len().max(1) as f64;
        Ok(EpochLog {
            epoch,
            steps: batches.len() as u64,
            mean_total: total / n,
            mean_cpa: has_cpa.then_some(cpa / n),
            val_pxap,
            harvest_fallbacks: fallbacks,
            fallback_images,
            degenerate_images,
        })
    }

    /// PxAP of the current network on the validation split.
    pub fn validate(&self) -> Result<f64> {
        let mut records = Vec::with_capacity(self.val.len());
        for s in &self.val {
            let map = self.model.forward(&s.image)?;
            records.push(EvalRecord::new(
                s.id.clone(),
                s.boxes.clone(),
                s.mask.clone(),
                map.fg,
                Vec::new(),
                s.class_index,
            )?);
        }
        pxap(&records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            epoch: self.epoch,
            step: self.step,
            meta: json!({
                "run_config": self.cfg,
                "loss_set": self.cfg.loss.loss_set_tag(),
                "best_val_pxap": self.best_val_pxap,
                "frozen_digests": self.digests,
                "seeds": {
                    "train": self.cfg.train.seed,
                    "harvest": self.cfg.harvest.seed,
                    "sampler": self.cfg.sampler.seed,
                    "init": self.cfg.model.init_seed,
                },
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: PathBuf,
    pub best: Option<PathBuf>,
    pub log: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub digests_before: FrozenDigests,
    pub digests_after: FrozenDigests,
}

/// Trains until `optim.epochs` epochs are complete, writing `last.ckpt`
/// every epoch and `best.ckpt` whenever validation PxAP improves.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, p)?,
        None => Trainer::new(cfg)?,
    };
    cfg.write(&out_dir.join(RUN_CONFIG))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let file = if resume.is_some() {
        File::options().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(file);
    let digests_before = trainer.frozen_digests();
    info!(
        "training {} images, {} parameters, losses {}",
        trainer.train.len(),
        trainer.model.parameter_count(),
        cfg.loss.loss_set_tag()
    );
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut epochs = Vec::new();
    while (trainer.epoch as usize) < cfg.optim.epochs {
        let started = std::time::Instant::now();
        let e = trainer.run_epoch(&mut log)?;
        if let Some(p) = e.val_pxap {
            if trainer.best_val_pxap.is_none_or(|b| p > b) {
                trainer.best_val_pxap = Some(p);
                trainer.save(&best_path)?;
            }
        }
        trainer.save(&last_path)?;
        writeln!(log, "{}", serde_json::to_string(&e)?)?;
        log.flush()?;
        info!(
            "epoch {} loss {:.4} val pxap {} ({:.1}s)",
            e.epoch,
            e.mean_total,
            e.val_pxap.map_or("-".into(), |p| format!("{p:.4}")),
            started.elapsed().as_secs_f64()
        );
        epochs.push(e);
    }
    if trainer.best_val_pxap.is_none() {
        trainer.save(&best_path)?;
    }
    let digests_after = trainer.frozen_digests();
    Ok(TrainOutcome {
        last: last_path,
        best: best_path.exists().then_some(best_path),
        log: log_path,
        epochs,
        digests_before,
        digests_after,
    })
}
