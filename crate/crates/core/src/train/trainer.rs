use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::bias_mean_abs;
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::model::ViTPModel;
use crate::tensor::Tensor;
use crate::train::checkpoint::{Checkpoint, RngState};
use crate::train::data::{augment, load_cifar_binary, synth_dataset, Dataset, Split};
use crate::train::optim::{clip_grad_norm, AdamW, LrSchedule};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STEP_METRICS_FILE: &str = "metrics_steps.csv";
pub const EPOCH_METRICS_FILE: &str = "metrics_epochs.csv";
pub const STEP_HEADER: &str = "step,lr,train_loss";
pub const EPOCH_HEADER: &str = "epoch,eval_acc,bias_mean_abs";

const EVAL_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const TRAIN_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Training and held-out sets for a config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let classes = cfg.model.num_classes;
    let d = &cfg.data;
    let (train, eval) = match &d.source {
        DataSource::Synthetic => (
            synth_dataset(d.data_seed, d.train_samples, classes, cfg.model.image_px, &d.norm)?,
            synth_dataset(
                d.data_seed ^ EVAL_SEED_SALT,
                d.eval_samples,
                classes,
                cfg.model.image_px,
                &d.norm,
            )?,
        ),
        DataSource::Cifar(path) => (
            load_cifar_binary(path, Split::Train, classes, &d.norm)?,
            load_cifar_binary(path, Split::Test, classes, &d.norm)?,
        ),
    };
    Ok((train, eval))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub eval_acc: f64,
    pub bias_mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub step_records: Vec<StepRecord>,
    pub epoch_records: Vec<EpochRecord>,
}

impl TrainSummary {
    /// Mean loss of the first and last `k` recorded steps.
    pub fn loss_window_means(&self, k: usize) -> Option<(f64, f64)> {
        let n = self.step_records.len();
        if n == 0 {
            return None;
        }
        let k = k.clamp(1, n);
        let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss as f64).sum::<f64>() / r.len() as f64;
        Some((mean(&self.step_records[..k]), mean(&self.step_records[n - k..])))
    }

    pub fn final_eval_acc(&self) -> Option<f64> {
        self.epoch_records.last().map(|e| e.eval_acc)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: ViTPModel<f32>,
    pub opt: AdamW<f32>,
    pub train: Dataset,
    pub eval: Dataset,
    pub schedule: LrSchedule,
    pub step: u64,
    rng: ChaCha8Rng,
    steps_per_epoch: u64,
    total_steps: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let (train, eval) = load_datasets(&cfg)?;
        Self::with_data(cfg, train, eval)
    }

    pub fn with_data(cfg: RunConfig, train: Dataset, eval: Dataset) -> Result<Self> {
        cfg.validate()?;
        for (what, d) in [("training", &train), ("held-out", &eval)] {
            if d.is_empty() {
                return Err(Error::Config(format!("{what} set is empty")));
            }
            if d.image_px != cfg.model.image_px || d.classes != cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "{what} set has {} px images and {} classes, model expects {} and {}",
                    d.image_px, d.classes, cfg.model.image_px, cfg.model.num_classes
                )));
            }
        }
        let model = ViTPModel::<f32>::new(&cfg.model, cfg.seed)?;
        let opt = AdamW::new(model.params(), &cfg.optim, cfg.model.decay_enabled);
        let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
        let epoch_steps = (cfg.optim.epochs * steps_per_epoch as f64).round().max(1.0) as u64;
        let total_steps = cfg.steps.unwrap_or(epoch_steps);
        let warmup = (cfg.optim.warmup_epochs * steps_per_epoch as f64).round() as u64;
        let schedule = LrSchedule::new(cfg.optim.peak_lr(cfg.batch_size), warmup, total_steps);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            cfg,
            model,
            opt,
            train,
            eval,
            schedule,
            step: 0,
            rng,
            steps_per_epoch,
            total_steps,
            order: None,
        })
    }

    /// Rebuilds the trainer saved in `ckpt`, using its embedded config with
    /// `out_dir` replaced when given.
    pub fn from_checkpoint(ckpt: &Checkpoint, out_dir: Option<PathBuf>) -> Result<Self> {
        let mut cfg = RunConfig::parse(&ckpt.config_text, "checkpoint config")?;
        if let Some(d) = out_dir {
            cfg.out_dir = d;
        }
        let mut t = Trainer::new(cfg)?;
        t.restore(ckpt)?;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(SHUFFLE_STREAM_BASE + epoch);
            idx.shuffle(&mut rng);
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("order set").1
    }

    /// Sample indices of the batch used at `step`.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch;
        let bs = self.cfg.batch_size;
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let order = self.epoch_order(epoch);
        order[k * bs..((k + 1) * bs).min(order.len())].to_vec()
    }

    fn param_norm_report(&self) -> String {
        let mut out = String::from("parameter L2 norms:\n");
        for p in self.model.params() {
            writeln!(out, "  {}: {:.6e}", p.name, p.tensor.l2_norm()).unwrap();
        }
        out
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let indices = self.batch_indices(step);
        let (mut images, labels) = self.train.batch(&indices);
        if self.cfg.data.augment {
            let s = self.train.image_px;
            let len = self.train.image_len();
            let data = images.data_mut();
            for b in 0..indices.len() {
                let out = augment(&data[b * len..(b + 1) * len], s, &mut self.rng);
                data[b * len..(b + 1) * len].copy_from_slice(&out);
            }
        }
        let (loss, mut grads) =
            self.model
                .loss_and_grads(&images, &labels, self.cfg.optim.label_smoothing, Some(&mut self.rng))?;
        let grads_finite = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        if !loss.is_finite() || !grads_finite {
            return Err(Error::NonFinite {
                step,
                batch_index: (step % self.steps_per_epoch) as usize,
                report: format!(
                    "loss {loss}, gradients finite: {grads_finite}\n{}",
                    self.param_norm_report()
                ),
            });
        }
        if self.cfg.optim.clip_grad > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.optim.clip_grad);
        }
        let lr = self.schedule.lr_at(step);
        self.opt.step(self.model.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(StepRecord { step, lr, loss })
    }

    /// Top-1 accuracy on the held-out set.
    pub fn evaluate(&self) -> Result<f64> {
        evaluate(&self.model, &self.eval, self.cfg.eval_batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for p in self.model.params() {
            tensors.push((p.name.clone(), p.tensor.clone()));
        }
        for (k, p) in self.model.params().iter().enumerate() {
            if p.trainable {
                tensors.push((format!("adam.m.{}", p.name), self.opt.m[k].clone()));
                tensors.push((format!("adam.v.{}", p.name), self.opt.v[k].clone()));
            }
        }
        Checkpoint {
            config_text: self.cfg.to_text(),
            rng: RngState::capture(&self.rng),
            step: self.step,
            tensors,
        }
    }

    /// Loads parameters, optimizer moments, PRNG and step from `ckpt`.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        restore_params(&mut self.model, ckpt, true)?;
        let names: Vec<(usize, String, bool)> = self
            .model
            .params()
            .iter()
            .enumerate()
            .map(|(k, p)| (k, p.name.clone(), p.trainable))
            .collect();
        for (k, name, trainable) in names {
            if !trainable {
                continue;
            }
            for (prefix, slot) in [("adam.m.", &mut self.opt.m[k]), ("adam.v.", &mut self.opt.v[k])] {
                let key = format!("{prefix}{name}");
                let t = ckpt.tensor(&key).ok_or_else(|| Error::TensorShape {
                    name: key.clone(),
                    expected: format!("{:?}", slot.shape()),
                    found: "missing".into(),
                })?;
                check_shape(&key, slot.shape(), t)?;
                *slot = t.clone();
            }
        }
        self.rng = ckpt.rng.restore();
        self.step = ckpt.step;
        self.opt.t = ckpt.step;
        self.order = None;
        Ok(())
    }

    /// Trains from the current step to the configured step count, writing
    /// metrics, the resolved config and checkpoints under `out_dir`.
    pub fn run(&mut self, progress: &mut dyn FnMut(&StepRecord)) -> Result<TrainSummary> {
        self.run_until(self.total_steps, progress)
    }

    /// Like [`Trainer::run`] but stops once `stop` steps are done. The final
    /// checkpoint is written only when training completes, so stopping
    /// early behaves like an interruption.
    pub fn run_until(&mut self, stop: u64, progress: &mut dyn FnMut(&StepRecord)) -> Result<TrainSummary> {
        let stop = stop.min(self.total_steps);
        let dir = self.cfg.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join(CONFIG_FILE), &self.cfg.to_text())?;
        let mut metrics = MetricsWriter::open(&dir, self.step, self.steps_per_epoch)?;
        let mut summary = TrainSummary {
            steps: self.step,
            step_records: Vec::new(),
            epoch_records: Vec::new(),
        };
        while self.step < stop {
            let rec = match self.train_step() {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => {
                    let path = dir.join(format!("nonfinite_step{}.txt", self.step));
                    let _ = fs::write(&path, e.to_string());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            metrics.step(&rec)?;
            progress(&rec);
            summary.step_records.push(rec);
            let epoch_end = self.step.is_multiple_of(self.steps_per_epoch);
            if epoch_end || self.step == self.total_steps {
                let epoch = (self.step - 1) / self.steps_per_epoch;
                let e = EpochRecord {
                    epoch,
                    eval_acc: self.evaluate()?,
                    bias_mean_abs: bias_mean_abs(&self.model),
                };
                metrics.epoch(&e)?;
                summary.epoch_records.push(e);
            }
            if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        if self.step == self.total_steps {
            self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
        summary.steps = self.step;
        Ok(summary)
    }
}

pub fn evaluate(model: &ViTPModel<f32>, data: &Dataset, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let logits = model.logits(&x)?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Index of the largest entry of each row of `[b, c]` (first on ties).
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

fn check_shape(name: &str, expected: &[usize], found: &Tensor<f32>) -> Result<()> {
    if found.shape() != expected {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: format!("{expected:?}"),
            found: format!("{:?}", found.shape()),
        });
    }
    Ok(())
}

/// Copies named parameters from `ckpt` into `model`. With `strict`, a
/// parameter-like tensor in the file that the model lacks is an error too.
pub fn restore_params(model: &mut ViTPModel<f32>, ckpt: &Checkpoint, strict: bool) -> Result<()> {
    for p in model.params_mut().iter_mut() {
        let t = ckpt.tensor(&p.name).ok_or_else(|| Error::TensorShape {
            name: p.name.clone(),
            expected: format!("{:?}", p.tensor.shape()),
            found: "missing".into(),
        })?;
        check_shape(&p.name, p.tensor.shape(), t)?;
        p.tensor = t.clone();
    }
    if strict {
        for (name, t) in &ckpt.tensors {
            let base = name
                .strip_prefix("adam.m.")
                .or_else(|| name.strip_prefix("adam.v."))
                .unwrap_or(name);
            if model.params().find(base).is_none() {
                return Err(Error::TensorShape {
                    name: name.clone(),
                    expected: "absent".into(),
                    found: format!("{:?}", t.shape()),
                });
            }
        }
    }
    Ok(())
}

/// Config and model stored in a checkpoint file.
pub fn load_model(path: &Path) -> Result<(RunConfig, ViTPModel<f32>, u64)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(&ckpt.config_text, "checkpoint config")?;
    let mut model = ViTPModel::new(&cfg.model, cfg.seed)?;
    restore_params(&mut model, &ckpt, false)?;
    Ok((cfg, model, ckpt.step))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends metric rows. Opening at a nonzero step keeps only rows produced
/// before that step, so a resumed run continues the files seamlessly.
struct MetricsWriter {
    steps: fs::File,
    epochs: fs::File,
    step_path: PathBuf,
    epoch_path: PathBuf,
}

impl MetricsWriter {
    fn open(dir: &Path, start_step: u64, steps_per_epoch: u64) -> Result<Self> {
        let step_path = dir.join(STEP_METRICS_FILE);
        let epoch_path = dir.join(EPOCH_METRICS_FILE);
        let keep = |path: &Path, header: &str, keep_row: &dyn Fn(u64) -> bool| -> Result<String> {
            let mut out = format!("{header}\n");
            if start_step == 0 {
                return Ok(out);
            }
            let text = fs::read_to_string(path).unwrap_or_default();
            for line in text.lines().skip(1) {
                let first = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
                if first.is_some_and(keep_row) {
                    out.push_str(line);
                    out.push('\n');
                }
            }
            Ok(out)
        };
        let steps_text = keep(&step_path, STEP_HEADER, &|s| s < start_step)?;
        let epochs_text = keep(&epoch_path, EPOCH_HEADER, &|e| (e + 1) * steps_per_epoch <= start_step)?;
        write_file(&step_path, &steps_text)?;
        write_file(&epoch_path, &epochs_text)?;
        let append = |p: &Path| fs::OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e));
        Ok(MetricsWriter {
            steps: append(&step_path)?,
            epochs: append(&epoch_path)?,
            step_path,
            epoch_path,
        })
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.steps, "{},{:?},{:?}", r.step, r.lr, r.loss).map_err(|e| Error::io(&self.step_path, e))
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.epochs, "{},{:?},{:?}", r.epoch, r.eval_acc, r.bias_mean_abs)
            .map_err(|e| Error::io(&self.epoch_path, e))
    }
}
