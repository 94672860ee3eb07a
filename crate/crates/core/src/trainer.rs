//! Two-stage SGD-with-momentum training.
//!
//! Before `stage2_start_step` the embedder and class head learn from the
//! class loss only while the dataset head learns to classify frozen
//! embeddings. From `stage2_start_step` on, the reversed dataset-loss
//! gradient also reaches the embedder.
//!
//! Randomness is split into keyed streams (initialization, one per epoch
//! shuffle, one per step of crossing-dropout draws), so the run is a pure
//! function of the seed and the step counter. That is what makes checkpoint
//! resume exact.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticCorpus;
use crate::losses::MarginSpec;
use crate::model::{
    backward, embed_forward, heads_forward, BatchLabels, ModelConfig, ModelParams, ParamTensors,
    Stage,
};
use crate::numerics::{Matrix, Prng};
use crate::registry::{crossing_dropout_mask, dataset_mask, ClassTable};
use crate::{Error, Result};

const STREAM_INIT: u64 = 0;
const STREAM_EPOCH: u64 = 1 << 32;
const STREAM_DROPOUT: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Softmax over every class of the merged corpus.
    Naive,
    /// Softmax restricted to the sample's own dataset.
    DatasetAware,
    /// Dataset-aware loss plus adversarial dataset invariance.
    DatasetAwareGrl,
    /// As `DatasetAwareGrl`, with crossing dropout on the masks.
    DatasetAwareGrlCd,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [
        LossMode::Naive,
        LossMode::DatasetAware,
        LossMode::DatasetAwareGrl,
        LossMode::DatasetAwareGrlCd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Naive => "naive",
            LossMode::DatasetAware => "dataset_aware",
            LossMode::DatasetAwareGrl => "dataset_aware_grl",
            LossMode::DatasetAwareGrlCd => "dataset_aware_grl_cd",
        }
    }

    pub fn uses_grl(self) -> bool {
        matches!(
            self,
            LossMode::DatasetAwareGrl | LossMode::DatasetAwareGrlCd
        )
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub margin: MarginSpec,
    pub lambda: f64,
    /// Crossing-dropout admission probability.
    pub cd_p: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub stage2_start_step: usize,
    pub base_lr: f64,
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Metrics are emitted on steps divisible by this.
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::DatasetAwareGrl,
            margin: MarginSpec::arcface(32.0, 0.3),
            lambda: 0.1,
            cd_p: 1e-4,
            batch_size: 64,
            total_steps: 2000,
            stage2_start_step: 700,
            base_lr: 0.05,
            lr_decay_steps: vec![700, 1167],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            seed: 0,
            log_every: 20,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage2_start_step > self.total_steps {
            return bad(format!(
                "train.stage2_start_step {} exceeds train.total_steps {}",
                self.stage2_start_step, self.total_steps
            ));
        }
        if self.lr_decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("train.lr_decay_steps must be strictly increasing".into());
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor <= 0.0 {
            return bad("train.lr_decay_factor must be > 0".into());
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("train.batch_size and train.log_every must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.cd_p) {
            return Err(Error::InvalidProbability(self.cd_p));
        }
        if [self.lambda, self.base_lr, self.momentum]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return bad("train.lambda, train.base_lr and train.momentum must be >= 0".into());
        }
        self.margin.validate()
    }

    fn stage_at(&self, step: usize) -> Stage {
        if self.loss_mode.uses_grl() && step >= self.stage2_start_step {
            Stage::Adversarial
        } else {
            Stage::Separate
        }
    }
}

/// Step-decay schedule: `base_lr · factor^(#boundaries ≤ step)`.
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let crossed = config.lr_decay_steps.iter().filter(|&&b| b <= step).count();
    config.base_lr * config.lr_decay_factor.powi(crossed as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub momentum: ParamTensors,
    /// Number of completed steps.
    pub step: usize,
    pub prng: Prng,
}

impl TrainState {
    pub fn init(config: &TrainConfig, input_dim: usize, table: &ClassTable) -> Result<Self> {
        config.validate()?;
        let prng = Prng::new(config.seed);
        let mut init_rng = prng.derive(STREAM_INIT);
        let params = ModelParams::init(
            &config.model,
            input_dim,
            table.num_classes(),
            config.loss_mode.uses_grl().then(|| table.num_datasets()),
            config.margin,
            config.lambda,
            &mut init_rng,
        )?;
        Ok(Self {
            momentum: params.weights.zeros_like(),
            params,
            step: 0,
            prng,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: u8,
    pub loss_cls: f64,
    pub loss_d: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

impl StepMetrics {
    /// JSON line with the wall-clock field dropped, for determinism checks.
    pub fn deterministic_line(&self) -> String {
        let mut v = serde_json::to_value(self).expect("plain struct");
        if let Some(o) = v.as_object_mut() {
            o.remove("wall_ms");
        }
        v.to_string()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub targets: Vec<usize>,
    pub dataset_ids: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
}

/// Class masks for one batch according to the loss mode.
pub fn batch_masks(
    mode: LossMode,
    table: &ClassTable,
    dataset_ids: &[usize],
    cd_p: f64,
    prng: &mut Prng,
) -> Result<Vec<Vec<bool>>> {
    dataset_ids
        .iter()
        .map(|&k| match mode {
            LossMode::Naive => Ok(vec![true; table.num_classes()]),
            LossMode::DatasetAware | LossMode::DatasetAwareGrl => dataset_mask(table, k),
            LossMode::DatasetAwareGrlCd => crossing_dropout_mask(table, k, cd_p, prng),
        })
        .collect()
}

/// One forward/backward/update on `batch`. Advances `state.step`.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let started = Instant::now();
    let step = state.step;
    let stage = config.stage_at(step);
    let lr = lr_at(config, step);

    let mut trace = embed_forward(&state.params, &batch.x)?;
    heads_forward(&state.params, &mut trace, &batch.targets)?;
    let labels = BatchLabels {
        targets: &batch.targets,
        dataset_ids: &batch.dataset_ids,
        masks: &batch.masks,
    };
    let out = backward(&state.params, &trace, labels, stage)?;

    let mu = config.momentum;
    let params = state.params.weights.named_mut();
    let bufs = state.momentum.named_mut();
    let grads = out.grads.named();
    for (((_, p), (_, buf)), (_, g)) in params.into_iter().zip(bufs).zip(grads) {
        for ((pv, bv), &gv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(buf.as_mut_slice())
            .zip(g.as_slice())
        {
            *bv = mu * *bv + gv;
            *pv -= lr * *bv;
        }
    }
    state.step += 1;
    if !state.params.weights.is_finite() {
        return Err(Error::NonFinite(format!("parameters after step {step}")));
    }
    Ok(StepMetrics {
        step,
        stage: stage.number(),
        loss_cls: out.loss_cls,
        loss_d: out.loss_d,
        lr,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Drives [`train_step`] over a corpus's training split.
pub struct Trainer<'a> {
    config: TrainConfig,
    corpus: &'a SyntheticCorpus,
    train_idx: Vec<usize>,
    epoch: Option<(usize, Vec<usize>)>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, corpus: &'a SyntheticCorpus) -> Result<Self> {
        let state = TrainState::init(&config, corpus.input_dim(), &corpus.class_table)?;
        Self::resume(config, corpus, state)
    }

    /// Continues from a saved state.
    pub fn resume(
        config: TrainConfig,
        corpus: &'a SyntheticCorpus,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        let train_idx = corpus.train_indices();
        if train_idx.is_empty() {
            return Err(Error::InvalidConfig(
                "corpus has no training samples".into(),
            ));
        }
        let p = &state.params;
        let domain_ok = match &p.weights.domain {
            Some(d) => config.loss_mode.uses_grl() && d.weight.rows() == corpus.num_datasets(),
            None => !config.loss_mode.uses_grl(),
        };
        if p.num_classes() != corpus.num_classes()
            || p.input_dim() != corpus.input_dim()
            || !domain_ok
        {
            return Err(Error::InvalidConfig(format!(
                "config/corpus mismatch: model has {} classes over {} inputs, corpus has {} classes over {} inputs in {} datasets",
                p.num_classes(),
                p.input_dim(),
                corpus.num_classes(),
                corpus.input_dim(),
                corpus.num_datasets()
            )));
        }
        Ok(Self {
            config,
            corpus,
            train_idx,
            epoch: None,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// The batch consumed by step `step`.
    pub fn batch_for(&mut self, step: usize) -> Result<Batch> {
        let n = self.train_idx.len();
        let b = self.config.batch_size.min(n);
        let per_epoch = n / b;
        let epoch = step / per_epoch;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order = self.train_idx.clone();
            self.state
                .prng
                .derive(STREAM_EPOCH + epoch as u64)
                .shuffle(&mut order);
            self.epoch = Some((epoch, order));
        }
        let order = &self.epoch.as_ref().expect("set above").1;
        let slot = step % per_epoch;
        let idx = &order[slot * b..(slot + 1) * b];
        let samples = &self.corpus.samples;
        let targets: Vec<usize> = idx.iter().map(|&i| samples[i].local_class).collect();
        let dataset_ids: Vec<usize> = idx.iter().map(|&i| samples[i].dataset_id).collect();
        let mut drop_rng = self.state.prng.derive(STREAM_DROPOUT + step as u64);
        let masks = batch_masks(
            self.config.loss_mode,
            &self.corpus.class_table,
            &dataset_ids,
            self.config.cd_p,
            &mut drop_rng,
        )?;
        Ok(Batch {
            x: self.corpus.features(idx),
            targets,
            dataset_ids,
            masks,
        })
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let batch = self.batch_for(self.state.step)?;
        train_step(&mut self.state, &batch, &self.config)
    }

    /// Runs until `state.step == until` (capped at `total_steps`), passing
    /// emitted metrics to `sink`.
    pub fn run_until(&mut self, until: usize, mut sink: impl FnMut(&StepMetrics)) -> Result<()> {
        let until = until.min(self.config.total_steps);
        while self.state.step < until {
            let m = self.step()?;
            if m.step % self.config.log_every == 0 || m.step + 1 == self.config.total_steps {
                sink(&m);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

pub fn train(config: &TrainConfig, corpus: &SyntheticCorpus) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config.clone(), corpus)?;
    let mut metrics = Vec::new();
    trainer.run_until(config.total_steps, |m| metrics.push(m.clone()))?;
    let state = trainer.into_state();
    Ok(TrainOutput {
        params: state.params.clone(),
        state,
        metrics,
    })
}
