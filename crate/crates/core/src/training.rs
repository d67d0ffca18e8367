//! Teacher-forced backpropagation through time over whole sequences.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingSnapshot};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::mesh::{BorderMode, MeshTopology};
use crate::model::{lattice_step, Distana, Lattice, ParamVars};
use crate::optim::{adam_update, clip_global_norm, AdamConfig, AdamState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sequences per optimizer update.
    pub batch_size: usize,
    /// Steps fed with ground truth before the model's own predictions are fed
    /// back during training; `None` teacher-forces the whole sequence.
    pub teacher_forcing: Option<usize>,
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            teacher_forcing: None,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.validate_update_rule()
    }

    /// Everything except the positivity of the learning rate, which
    /// [`Trainer`] does not need (a zero rate is a useful no-op probe).
    fn validate_update_rule(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("eps must be positive and the learning rate finite".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.teacher_forcing == Some(0) {
            return Err(Error::Config("teacher forcing needs at least 1 step".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Zero-padded grid topology matching a field's spatial shape.
pub fn grid_topology_for(field: &Field) -> Result<Arc<MeshTopology>> {
    Ok(Arc::new(MeshTopology::grid(field.height(), field.width(), BorderMode::ZeroPad)?))
}

/// Records the training loss: the mean over steps of `mse(prediction_t, frame_{t+1})`,
/// starting from a zero state. Steps `t < teacher` consume the true frame `t`;
/// later steps consume the previous prediction, so gradients flow through the
/// feedback loop. `teacher >= frames - 1` is plain teacher forcing.
pub fn sequence_loss(tape: &mut Tape, lattice: &Lattice, params: &ParamVars, seq: &Field, teacher: usize) -> Result<Var> {
    let frames = seq.steps();
    if frames < 2 || teacher == 0 {
        return Err(Error::Config(format!(
            "need at least 2 frames and 1 teacher-forced step, got {frames} and {teacher}"
        )));
    }
    if seq.cells() != lattice.cells() {
        return Err(Error::shape(
            "sequence_loss",
            format!("sequence has {} cells, lattice has {}", seq.cells(), lattice.cells()),
        ));
    }
    let mut state = lattice.zero_state().record(tape);
    let mut total: Option<Var> = None;
    let mut prev: Option<Var> = None;
    for t in 0..frames - 1 {
        let input = match prev {
            Some(p) if t >= teacher => p,
            _ => tape.constant(seq.frame_column(t)),
        };
        let (pred, next) = lattice_step(tape, lattice, params, input, &state)?;
        let target = tape.constant(seq.frame_column(t + 1));
        let l = tape.mse(pred, target)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
        state = next;
        prev = Some(pred);
    }
    tape.scale(total.expect("at least one step"), 1.0 / (frames - 1) as f64)
}

/// Loss and parameter gradients for one sequence.
pub fn sequence_gradients(model: &Distana, lattice: &Lattice, seq: &Field, teacher: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.record(&mut tape);
    let loss = sequence_loss(&mut tape, lattice, &params, seq, teacher)?;
    let value = tape.value(loss)?.item()?;
    let grads = tape.backward(loss)?;
    let g = params.to_vec().into_iter().map(|v| grads.get(v)).collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

/// Progress record emitted once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Episode {
    /// Mean teacher-forced loss of every epoch run so far, resumed ones included.
    pub losses: Vec<f64>,
    pub seconds: f64,
    pub config: TrainConfig,
    pub final_checkpoint: Option<PathBuf>,
}

/// One training run: the shared parameters, the optimizer state and progress.
pub struct Trainer {
    model: Distana,
    lattice: Lattice,
    adam: AdamState,
    config: TrainConfig,
    epoch: usize,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Distana, topology: Arc<MeshTopology>, config: TrainConfig) -> Result<Self> {
        config.validate_update_rule()?;
        let lattice = Lattice::new(model.config(), topology)?;
        let adam = AdamState::new(&model.tensors());
        Ok(Self {
            model,
            lattice,
            adam,
            config,
            epoch: 0,
            losses: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// `epochs` overrides the stored epoch budget when given.
    pub fn resume(ckpt: Checkpoint, topology: Arc<MeshTopology>, epochs: Option<usize>) -> Result<Self> {
        let snap = ckpt
            .training
            .ok_or_else(|| Error::Config("checkpoint carries no training state".into()))?;
        let mut config = snap.train_config;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        let mut t = Self::new(ckpt.model, topology, config)?;
        t.adam = snap.adam;
        t.epoch = snap.epoch;
        t.losses = snap.losses;
        Ok(t)
    }

    pub fn model(&self) -> &Distana {
        &self.model
    }

    pub fn into_model(self) -> Distana {
        self.model
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Adjusts settings between phases of a run, e.g. to switch from full
    /// teacher forcing to closed-loop feedback. Optimizer state is kept.
    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(TrainingSnapshot {
                epoch: self.epoch,
                losses: self.losses.clone(),
                train_config: self.config.clone(),
                adam: self.adam.clone(),
            }),
        }
    }

    fn teacher_steps(&self, seq: &Field) -> usize {
        self.config.teacher_forcing.unwrap_or(seq.steps())
    }

    /// One optimizer update on a single sequence; returns its loss before the update.
    pub fn train_step(&mut self, seq: &Field) -> Result<f64> {
        let losses = self.update(&[seq], self.epoch, &[0])?;
        Ok(losses[0])
    }

    /// One optimizer update on the mean gradient of `batch`.
    fn update(&mut self, batch: &[&Field], epoch: usize, ids: &[usize]) -> Result<Vec<f64>> {
        let results = batch
            .par_iter()
            .map(|seq| {
                sequence_gradients(&self.model, &self.lattice, seq, self.teacher_steps(seq))
            })
            .collect::<Vec<_>>();
        let mut losses = Vec::with_capacity(batch.len());
        let mut sum: Option<Vec<Tensor>> = None;
        for (r, &id) in results.into_iter().zip(ids) {
            let (loss, grads) = r.map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch,
                    sequence: id,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    sequence: id,
                    detail: format!("loss is {loss}"),
                });
            }
            losses.push(loss);
            sum = Some(match sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        let mut grads = sum.expect("non-empty batch");
        if batch.len() > 1 {
            let s = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
        }
        clip_global_norm(&mut grads, self.config.clip_norm);
        let mut params: Vec<Tensor> = self.model.tensors().into_iter().cloned().collect();
        adam_update(&mut params, &grads, &mut self.adam, &self.config.adam())?;
        self.model = Distana::from_tensors(self.lattice.config().clone(), params)?;
        Ok(losses)
    }

    /// Visiting order of the training set in `epoch`; depends only on the seed and epoch.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch and returns the mean sequence loss.
    pub fn run_epoch(&mut self, train: &[Field]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let order = Self::epoch_order(self.config.seed, self.epoch, train.len());
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Field> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.update(&batch, self.epoch, chunk)?.iter().sum::<f64>();
        }
        let mean = total / train.len() as f64;
        self.losses.push(mean);
        self.epoch += 1;
        Ok(mean)
    }

    /// Trains until the configured epoch count. When `checkpoint` is given it is
    /// rewritten every `checkpoint_every` epochs and once at the end.
    pub fn fit(
        &mut self,
        train: &[Field],
        checkpoint: Option<&Path>,
        mut progress: impl FnMut(&EpochRecord),
    ) -> Result<Episode> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let start = Instant::now();
        while self.epoch < self.config.epochs {
            let epoch_start = Instant::now();
            let train_mse = self.run_epoch(train)?;
            progress(&EpochRecord {
                epoch: self.epoch - 1,
                train_mse,
                seconds: epoch_start.elapsed().as_secs_f64(),
            });
            if let Some(path) = checkpoint {
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(Episode {
            losses: self.losses.clone(),
            seconds: start.elapsed().as_secs_f64(),
            config: self.config.clone(),
            final_checkpoint: checkpoint.map(Path::to_path_buf),
        })
    }
}
