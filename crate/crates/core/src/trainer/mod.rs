//! Optimisation loop with momentum teacher, feature queues, checkpointing
//! and a per-step scalar log.

mod checkpoint;
mod config;
mod optim;
mod step;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xvl_autograd::ParamStore;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;
pub use optim::{clip_global_norm, ema_update, lr_schedule, AdamW};
pub use step::{forward_step, prepare, Example, Negatives, StepForward, StepPlan};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{HardNegatives, QueuePair};
use crate::seed;
use crate::synthdata::SyntheticStudy;
use crate::textpipe::Vocabulary;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EPOCH_STREAM: u64 = 3;

/// One line of the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    #[serde(rename = "L_CMC")]
    pub l_cmc: f64,
    #[serde(rename = "L_IMC")]
    pub l_imc: f64,
    #[serde(rename = "L_sent")]
    pub l_sent: f64,
    #[serde(rename = "L_MLM")]
    pub l_mlm: f64,
    #[serde(rename = "L_ITM")]
    pub l_itm: f64,
    #[serde(rename = "L_dist")]
    pub l_dist: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub negative_fallbacks: usize,
    pub mlm_empty: bool,
}

/// Result of one optimiser step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub negatives: HardNegatives,
}

/// Mutable state of a run.
#[derive(Clone, Debug)]
pub struct RunState {
    pub step: u64,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub optimizer: AdamW,
    pub queues: QueuePair,
    pub rng: ChaCha8Rng,
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    vocab: Vocabulary,
    examples: Vec<Example>,
    state: RunState,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: &[SyntheticStudy], vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let model_config = config.model_config(vocab.len());
        let (model, student) = Model::init(model_config, &mut seed::child_rng(config.seed, INIT_STREAM))?;
        let teacher = student.clone();
        let optimizer = AdamW::new(
            &student,
            config.beta1,
            config.beta2,
            config.adam_eps,
            config.weight_decay,
        );
        let queues = QueuePair::new(config.queue_size, config.proj_dim);
        let examples = prepare(corpus, &vocab, config.max_text_len);
        let state = RunState {
            step: 0,
            student,
            teacher,
            optimizer,
            queues,
            rng: seed::child_rng(config.seed, TRAIN_STREAM),
        };
        Ok(Self {
            config,
            model,
            vocab,
            examples,
            state,
            dump_dir: None,
        })
    }

    /// Continues from a checkpoint over the same training corpus.
    pub fn resume(checkpoint: Checkpoint, corpus: &[SyntheticStudy]) -> Result<Self> {
        checkpoint.config.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab = Vocabulary::from_words(checkpoint.vocab.iter().skip(crate::textpipe::SPECIALS.len()));
        if vocab.len() != checkpoint.vocab.len() {
            return Err(Error::Checkpoint("stored vocabulary is malformed".into()));
        }
        let model = Model::bind(checkpoint.model.clone(), &checkpoint.student)?;
        let examples = prepare(corpus, &vocab, checkpoint.config.max_text_len);
        Ok(Self {
            config: checkpoint.config,
            model,
            vocab,
            examples,
            state: RunState {
                step: checkpoint.step,
                student: checkpoint.student,
                teacher: checkpoint.teacher,
                optimizer: checkpoint.optimizer,
                queues: checkpoint.queues,
                rng: checkpoint.rng,
            },
            dump_dir: None,
        })
    }

    /// Directory receiving a checkpoint of the offending state when a step
    /// produces a non-finite loss.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut RunState {
        &mut self.state
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Full batches per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.examples.len() / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch()
    }

    pub fn warmup_steps(&self) -> u64 {
        self.config.warmup_epochs as u64 * self.steps_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(
            step,
            self.warmup_steps(),
            self.total_steps(),
            self.config.lr_init,
            self.config.lr_peak,
        )
    }

    /// Sample order of an epoch, derived from `(seed, epoch)` alone.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = seed::child_rng(seed::derive(self.config.seed, EPOCH_STREAM), epoch);
        order.shuffle(&mut rng);
        order
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.state.step,
            config: self.config.clone(),
            model: self.model.config().clone(),
            vocab: (0..self.vocab.len() as u32).map(|i| self.vocab.token(i).to_string()).collect(),
            student: self.state.student.clone(),
            teacher: self.state.teacher.clone(),
            optimizer: self.state.optimizer.clone(),
            queues: self.state.queues.clone(),
            rng: self.state.rng.clone(),
        }
    }

    fn abort(&self, step: u64, detail: String) -> Error {
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("abort-step{step}.ckpt"));
            match std::fs::create_dir_all(dir).map_err(Error::from).and_then(|_| self.checkpoint().save(&path)) {
                Ok(()) => log::error!("non-finite state at step {step}; dumped to {}", path.display()),
                Err(e) => log::error!("non-finite state at step {step}; dump failed: {e}"),
            }
        }
        Error::NonFinite { step, detail }
    }

    /// Runs one optimiser step.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let spe = self.steps_per_epoch();
        if spe == 0 {
            return Err(Error::InvalidArgument(format!(
                "corpus of {} studies is smaller than one batch of {}",
                self.examples.len(),
                self.config.batch_size
            )));
        }
        let step = self.state.step;
        let epoch = step / spe;
        let within = (step % spe) as usize;
        let order = self.epoch_order(epoch);
        let bs = self.config.batch_size;
        let batch: Vec<&Example> = order[within * bs..(within + 1) * bs]
            .iter()
            .map(|&i| &self.examples[i])
            .collect();
        let masking = self.config.masking();
        let state = &mut self.state;
        let plan = StepPlan::draw(&self.vocab, &batch, &masking, &mut state.rng);
        let fwd = forward_step(
            &self.model,
            &state.student,
            &state.teacher,
            &batch,
            &state.queues,
            &plan,
            Negatives::Sample {
                theta: self.config.theta_sim,
                rng: &mut state.rng,
            },
            self.config.lambda,
        )?;
        let tags: Vec<u64> = batch.iter().map(|e| e.tag).collect();
        if !fwd.total_value.is_finite() {
            let detail = format!("L_total = {} ({:?})", fwd.total_value, fwd.terms);
            return Err(self.abort(step, detail));
        }
        let mut grads = fwd.graph.backward(fwd.total);
        let mut grads = fwd.graph.param_grads(&mut grads, self.state.student.len());
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(self.abort(step, "non-finite gradient".into()));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = self.lr_at(step);
        let state = &mut self.state;
        state.optimizer.step(&mut state.student, &grads, lr)?;
        self.model.clamp_tau(&mut state.student);
        if !state.student.all_finite() {
            return Err(self.abort(step, "non-finite parameters after update".into()));
        }
        ema_update(&mut state.teacher, &state.student, self.config.momentum)?;
        state.queues.enqueue(&fwd.teacher_image, &fwd.teacher_text, &tags)?;
        state.step += 1;
        let t = fwd.terms;
        Ok(StepOutcome {
            record: StepRecord {
                step,
                epoch,
                l_cmc: t.cmc,
                l_imc: t.imc,
                l_sent: t.sent,
                l_mlm: t.mlm,
                l_itm: t.itm,
                l_dist: t.dist,
                l_total: fwd.total_value,
                tau: fwd.tau,
                lr,
                grad_norm,
                negative_fallbacks: fwd.negatives.fallbacks(),
                mlm_empty: fwd.mlm_empty,
            },
            negatives: fwd.negatives,
        })
    }

    /// Steps until `stop` (exclusive) or the end of the schedule.
    pub fn run_until<F: FnMut(&StepOutcome)>(&mut self, stop: u64, mut on_step: F) -> Result<()> {
        let stop = stop.min(self.total_steps());
        while self.state.step < stop {
            let out = self.step()?;
            on_step(&out);
        }
        Ok(())
    }

    pub fn run<F: FnMut(&StepOutcome)>(&mut self, on_step: F) -> Result<()> {
        self.run_until(self.total_steps(), on_step)
    }
}
