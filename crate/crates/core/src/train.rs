//! Training loop for both phases: plain pretraining at the base window and
//! context extension with per-iteration scale/offset augmentation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{plans_for_batch, AugmentPolicy, IterationPlan, OffsetDistribution, ScaleDistribution};
use crate::error::{Error, Result};
use crate::model::{Model, Token};
use crate::rope::RopeParams;
use crate::tensor::optim::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Extend,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "extend" => Ok(Self::Extend),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrain => "pretrain",
            Self::Extend => "extend",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Sequence length `R` of every training example.
    pub trained_window: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Fill `wall_ms` in telemetry; off makes logs byte-reproducible.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            epsilon: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            trained_window: 128,
            checkpoint_every: 500,
            log_every: 10,
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    /// Default learning rate per phase: from-scratch pretraining runs hotter
    /// than extension.
    pub fn default_learning_rate(phase: Phase) -> f64 {
        match phase {
            Phase::Pretrain => 3e-4,
            Phase::Extend => 1e-4,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self, base_window: usize) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "train.steps, train.batch_size, train.checkpoint_every and train.log_every must be positive".into(),
            ));
        }
        if self.trained_window < 2 {
            return Err(Error::Config("train.trained_window must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.phase == Phase::Pretrain && self.trained_window > base_window {
            return Err(Error::Constraint {
                first: "train.trained_window",
                second: "model.base_window",
                msg: format!(
                    "pretraining window {} exceeds base window {}",
                    self.trained_window, base_window
                ),
            });
        }
        Ok(())
    }

    /// The policy actually sampled from: pretraining ignores the configured
    /// policy and always uses scale 1 with no offset.
    pub fn effective_policy(&self, policy: &AugmentPolicy, base_window: usize) -> AugmentPolicy {
        let mut p = policy.clone();
        p.base_window = base_window;
        p.trained_window = self.trained_window;
        if self.phase == Phase::Pretrain {
            p.g_max = 1;
            p.scale_distribution = ScaleDistribution::Uniform;
            p.offset_distribution = OffsetDistribution::Zero;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub scale: u32,
    pub offset: u64,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

/// Deterministic stream of `R`-token training sequences. Each pass over the
/// corpus cuts it into consecutive windows starting at a random phase and
/// visits them in shuffled order, wrapping around indefinitely.
#[derive(Debug, Clone)]
pub struct SequenceStream {
    corpus: Vec<Token>,
    window: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl SequenceStream {
    pub fn new(corpus: Vec<Token>, window: usize, seed: u64) -> Result<Self> {
        if corpus.len() < window {
            return Err(Error::Data(format!(
                "corpus has {} tokens, need at least one window of {window}",
                corpus.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            corpus,
            window,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn refill(&mut self) {
        let spare = self.corpus.len() - self.window;
        let phase = if spare == 0 {
            0
        } else {
            self.rng.random_range(0..=spare.min(self.window - 1))
        };
        self.order = (phase..=self.corpus.len() - self.window).step_by(self.window).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_sequence(&mut self) -> &[Token] {
        if self.cursor >= self.order.len() {
            self.refill();
        }
        let start = self.order[self.cursor];
        self.cursor += 1;
        &self.corpus[start..start + self.window]
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<Vec<Token>> {
        (0..batch).map(|_| self.next_sequence().to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One forward/backward pass under the given plans and a clipped AdamW update.
pub fn train_step(
    model: &mut Model<f32>,
    optimizer: &mut AdamWState<f32>,
    batch: &[Vec<Token>],
    plans: &[IterationPlan],
    clip_norm: f64,
) -> Result<StepStats> {
    let cfg = model.config();
    let ropes = plans
        .iter()
        .map(|p| p.rope(cfg.head_dim, cfg.rope_base))
        .collect::<Result<Vec<RopeParams>>>()?;
    let seqs: Vec<&[Token]> = batch.iter().map(Vec::as_slice).collect();
    let rope_refs: Vec<&RopeParams> = ropes.iter().collect();
    let (loss, mut grads) = model.loss_and_grads(&seqs, &rope_refs)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    let grad_norm = clip_grad_norm(&mut grads, clip_norm);
    let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    let mut params: Vec<&mut [f32]> = model.params_mut().iter_mut().map(|p| p.data_mut()).collect();
    adamw_step(&mut params, &grad_refs, optimizer)?;
    Ok(StepStats { loss, grad_norm })
}

/// Stateful trainer: model, optimizer, data stream and plan sampler.
pub struct Trainer {
    model: Model<f32>,
    optimizer: AdamWState<f32>,
    config: TrainConfig,
    policy: AugmentPolicy,
    plan_rng: ChaCha8Rng,
    data: SequenceStream,
    step: u64,
    tokens_seen: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, policy: &AugmentPolicy, corpus: Vec<Token>) -> Result<Self> {
        let base_window = model.config().base_window;
        config.validate(base_window)?;
        let policy = config.effective_policy(policy, base_window);
        policy.validate()?;
        if let Some(&bad) = corpus.iter().find(|&&t| t as usize >= model.config().vocab_size) {
            return Err(Error::Data(format!("corpus token {bad} outside the vocabulary")));
        }
        let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        let optimizer = AdamWState::new(&lens, config.adamw()).with_decay_mask(model.decay_mask());
        let data = SequenceStream::new(corpus, config.trained_window, config.seed)?;
        Ok(Self {
            model,
            optimizer,
            plan_rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            policy,
            data,
            step: 0,
            tokens_seen: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn policy(&self) -> &AugmentPolicy {
        &self.policy
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Runs one iteration. The recorded `wall_ms` is zero when wall-clock
    /// logging is off.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let started = Instant::now();
        let plans = plans_for_batch(&self.policy, self.config.batch_size, &mut self.plan_rng);
        let batch = self.data.next_batch(self.config.batch_size);
        let stats = train_step(
            &mut self.model,
            &mut self.optimizer,
            &batch,
            &plans,
            self.config.clip_norm,
        )?;
        self.step += 1;
        self.tokens_seen += (self.config.batch_size * self.config.trained_window) as u64;
        Ok(TrainRecord {
            step: self.step,
            loss: stats.loss,
            scale: plans[0].scale,
            offset: plans[0].body_offset,
            tokens_seen: self.tokens_seen,
            wall_ms: if self.config.log_wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }
}

pub type RecordHook<'a> = &'a mut dyn FnMut(&TrainRecord) -> Result<()>;
pub type CheckpointHook<'a> = &'a mut dyn FnMut(&Model<f32>, u64) -> Result<PathBuf>;

/// Callbacks invoked by [`run_training`].
#[derive(Default)]
pub struct Hooks<'a> {
    /// Called every `log_every` steps and after the final step.
    pub on_record: Option<RecordHook<'a>>,
    /// Called every `checkpoint_every` steps and after the final step;
    /// returns where the checkpoint went.
    pub on_checkpoint: Option<CheckpointHook<'a>>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub records: Vec<TrainRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Runs `config.steps` iterations. Any non-finite loss or gradient aborts the
/// run with [`Error::Diverged`] naming the last checkpoint written.
pub fn run_training(
    model: Model<f32>,
    config: &TrainConfig,
    policy: &AugmentPolicy,
    corpus: Vec<Token>,
    mut hooks: Hooks<'_>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config.clone(), policy, corpus)?;
    let mut records = Vec::with_capacity(config.steps as usize);
    let mut last_checkpoint = None;
    for _ in 0..config.steps {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(Error::NonFinite(msg)) => {
                return Err(Error::Diverged {
                    step: trainer.steps_done() + 1,
                    msg,
                    last_good: last_checkpoint,
                })
            }
            Err(e) => return Err(e),
        };
        let last = rec.step == config.steps;
        if rec.step % config.log_every == 0 || last {
            if let Some(f) = hooks.on_record.as_mut() {
                f(&rec)?;
            }
        }
        if rec.step % config.checkpoint_every == 0 || last {
            if let Some(f) = hooks.on_checkpoint.as_mut() {
                last_checkpoint = Some(f(trainer.model(), rec.step)?);
            }
        }
        records.push(rec);
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        records,
        last_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            head_dim: 8,
            ffn_mult: 2,
            base_window: 16,
            rope_base: 10_000.0,
            max_seq_len: 256,
        }
    }

    fn corpus() -> Vec<Token> {
        (0..600).map(|i| ((i * 7 + i / 5) % 16) as Token).collect()
    }

    fn cfg(phase: Phase, steps: u64) -> TrainConfig {
        TrainConfig {
            phase,
            steps,
            batch_size: 2,
            learning_rate: 3e-3,
            trained_window: 16,
            log_wall_clock: false,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn fresh() -> Model<f32> {
        Model::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn stream_windows_are_exact_and_deterministic() {
        let mut a = SequenceStream::new(corpus(), 16, 3).unwrap();
        let mut b = SequenceStream::new(corpus(), 16, 3).unwrap();
        for _ in 0..200 {
            let s = a.next_sequence().to_vec();
            assert_eq!(s.len(), 16);
            assert_eq!(s, b.next_sequence());
        }
        assert!(matches!(SequenceStream::new(vec![1; 5], 16, 0), Err(Error::Data(_))));
    }

    #[test]
    fn unit_plan_step_matches_standard_rope_step() {
        let policy = AugmentPolicy::standard(16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plans = plans_for_batch(&policy, 2, &mut rng);
        let batch = vec![corpus()[..16].to_vec(), corpus()[16..32].to_vec()];
        let mut m = fresh();
        let std = m.config().standard_rope();
        let expected = m.loss(&[&batch[0], &batch[1]], &[&std, &std]).unwrap();
        let lens: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
        let mut opt = AdamWState::new(&lens, AdamWConfig::default());
        let stats = train_step(&mut m, &mut opt, &batch, &plans, 1.0).unwrap();
        assert!((stats.loss - expected).abs() < 1e-6);
    }

    #[test]
    fn augmented_run_logs_in_range_plans() {
        let policy = AugmentPolicy {
            g_max: 8,
            ..AugmentPolicy::default()
        };
        let out = run_training(fresh(), &cfg(Phase::Extend, 10), &policy, corpus(), Hooks::default()).unwrap();
        assert_eq!(out.records.len(), 10);
        for r in &out.records {
            assert!((1..=8).contains(&r.scale));
            assert!(r.offset <= (r.scale as u64 - 1) * 16);
            assert!(r.loss.is_finite());
        }
    }

    #[test]
    fn runs_are_reproducible_and_learn() {
        let policy = AugmentPolicy::default();
        let run = || run_training(fresh(), &cfg(Phase::Pretrain, 60), &policy, corpus(), Hooks::default()).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.records, b.records);
        assert_eq!(a.model, b.model);
        let first = a.records[0].loss;
        let last = a.records.last().unwrap().loss;
        assert!(last < first * 0.8, "{first} -> {last}");
    }

    #[test]
    fn hooks_fire_on_schedule() {
        let mut logged = Vec::new();
        let mut saved = Vec::new();
        let mut on_record = |r: &TrainRecord| {
            logged.push(r.step);
            Ok(())
        };
        let mut on_checkpoint = |_: &Model<f32>, step: u64| {
            saved.push(step);
            Ok(PathBuf::from(format!("ck-{step}")))
        };
        let c = TrainConfig {
            log_every: 4,
            checkpoint_every: 5,
            ..cfg(Phase::Pretrain, 11)
        };
        let out = run_training(
            fresh(),
            &c,
            &AugmentPolicy::default(),
            corpus(),
            Hooks {
                on_record: Some(&mut on_record),
                on_checkpoint: Some(&mut on_checkpoint),
            },
        )
        .unwrap();
        assert_eq!(logged, vec![4, 8, 11]);
        assert_eq!(saved, vec![5, 10, 11]);
        assert_eq!(out.last_checkpoint, Some(PathBuf::from("ck-11")));
    }

    #[test]
    fn divergence_reports_last_checkpoint() {
        let mut m = fresh();
        m.params_mut().last_mut().unwrap().data_mut()[3] = f32::NAN;
        let mut on_checkpoint = |_: &Model<f32>, step: u64| Ok(PathBuf::from(format!("ck-{step}")));
        let err = run_training(
            m,
            &cfg(Phase::Pretrain, 3),
            &AugmentPolicy::default(),
            corpus(),
            Hooks {
                on_record: None,
                on_checkpoint: Some(&mut on_checkpoint),
            },
        )
        .err()
        .unwrap();
        assert!(
            matches!(
                err,
                Error::Diverged {
                    step: 1,
                    last_good: None,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn pretrain_window_must_fit_base_window() {
        let c = TrainConfig {
            trained_window: 32,
            ..cfg(Phase::Pretrain, 1)
        };
        assert!(matches!(
            Trainer::new(fresh(), c, &AugmentPolicy::default(), corpus()),
            Err(Error::Constraint { .. })
        ));
    }
}
