//! Flat `section.key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Absent keys keep their defaults;
//! unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use dail_core::datagen::GenConfig;
use dail_core::eval::EvalOptions;
use dail_core::trainer::{LossMode, TrainConfig};

use crate::CliError;

/// Environment variable overriding both the corpus and training seeds.
pub const SEED_ENV: &str = "DAIL_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    /// Training seeds per mode in `ablate`.
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            ablate_seeds: 5,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, String> {
    raw.parse()
        .map_err(|_| format!("invalid value {raw:?} for {key}"))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>, String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl RunConfig {
    fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let g = &mut self.gen;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "gen.num_datasets" => g.num_datasets = parse_value(key, raw)?,
            "gen.identities_per_dataset" => g.identities_per_dataset = parse_value(key, raw)?,
            "gen.overlap_fraction" => g.overlap_fraction = parse_value(key, raw)?,
            "gen.samples_per_identity" => g.samples_per_identity = parse_value(key, raw)?,
            "gen.input_dim" => g.input_dim = parse_value(key, raw)?,
            "gen.prototype_spread" => g.prototype_spread = parse_value(key, raw)?,
            "gen.sample_noise" => g.sample_noise = parse_value(key, raw)?,
            "gen.domain_shift_strength" => g.domain_shift_strength = parse_value(key, raw)?,
            "gen.holdout_fraction" => g.holdout_fraction = parse_value(key, raw)?,
            "gen.seed" => g.seed = parse_value(key, raw)?,

            "train.loss_mode" => {
                t.loss_mode = raw
                    .parse::<LossMode>()
                    .map_err(|_| format!("invalid value {raw:?} for {key}"))?
            }
            "train.m1" => t.margin.m1 = parse_value(key, raw)?,
            "train.m2" => t.margin.m2 = parse_value(key, raw)?,
            "train.m3" => t.margin.m3 = parse_value(key, raw)?,
            "train.scale" => t.margin.s = parse_value(key, raw)?,
            "train.angular" => t.margin.angular = parse_value(key, raw)?,
            "train.lambda" => t.lambda = parse_value(key, raw)?,
            "train.cd_p" => t.cd_p = parse_value(key, raw)?,
            "train.batch_size" => t.batch_size = parse_value(key, raw)?,
            "train.total_steps" => t.total_steps = parse_value(key, raw)?,
            "train.stage2_start_step" => t.stage2_start_step = parse_value(key, raw)?,
            "train.base_lr" => t.base_lr = parse_value(key, raw)?,
            "train.lr_decay_steps" => t.lr_decay_steps = parse_list(key, raw)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse_value(key, raw)?,
            "train.momentum" => t.momentum = parse_value(key, raw)?,
            "train.seed" => t.seed = parse_value(key, raw)?,
            "train.log_every" => t.log_every = parse_value(key, raw)?,

            "model.hidden" => t.model.hidden = parse_list(key, raw)?,
            "model.embed_dim" => t.model.embed_dim = parse_value(key, raw)?,

            "eval.n_pos" => e.n_pos = parse_value(key, raw)?,
            "eval.n_neg" => e.n_neg = parse_value(key, raw)?,
            "eval.seed" => e.seed = parse_value(key, raw)?,
            "eval.probe_steps" => e.probe.steps = parse_value(key, raw)?,
            "eval.probe_lr" => e.probe.lr = parse_value(key, raw)?,
            "eval.probe_momentum" => e.probe.momentum = parse_value(key, raw)?,
            "eval.probe_train_fraction" => e.probe.train_fraction = parse_value(key, raw)?,

            "ablate.seeds" => self.ablate_seeds = parse_value(key, raw)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| CliError::Config {
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `section.key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(bad)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.gen.validate()?;
        self.train.validate()?;
        let p = &self.eval.probe;
        if !(0.0 < p.train_fraction && p.train_fraction < 1.0) {
            return Err(CliError::Invalid(
                "eval.probe_train_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.ablate_seeds == 0 {
            return Err(CliError::Invalid("ablate.seeds must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies `DAIL_SEED` when the variable is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<(), CliError> {
        if let Some(raw) = value {
            let seed: u64 = raw.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "{SEED_ENV} must be an unsigned integer, got {raw:?}"
                ))
            })?;
            self.gen.seed = seed;
            self.train.seed = seed;
        }
        Ok(())
    }

    /// Renders every key; parsing the result gives back `self`.
    pub fn render(&self) -> String {
        let g = &self.gen;
        let t = &self.train;
        let e = &self.eval;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("gen.num_datasets", g.num_datasets.to_string());
        kv(
            "gen.identities_per_dataset",
            g.identities_per_dataset.to_string(),
        );
        kv("gen.overlap_fraction", g.overlap_fraction.to_string());
        kv(
            "gen.samples_per_identity",
            g.samples_per_identity.to_string(),
        );
        kv("gen.input_dim", g.input_dim.to_string());
        kv("gen.prototype_spread", g.prototype_spread.to_string());
        kv("gen.sample_noise", g.sample_noise.to_string());
        kv(
            "gen.domain_shift_strength",
            g.domain_shift_strength.to_string(),
        );
        kv("gen.holdout_fraction", g.holdout_fraction.to_string());
        kv("gen.seed", g.seed.to_string());
        kv("train.loss_mode", t.loss_mode.to_string());
        kv("train.angular", t.margin.angular.to_string());
        kv("train.m1", t.margin.m1.to_string());
        kv("train.m2", t.margin.m2.to_string());
        kv("train.m3", t.margin.m3.to_string());
        kv("train.scale", t.margin.s.to_string());
        kv("train.lambda", t.lambda.to_string());
        kv("train.cd_p", t.cd_p.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.total_steps", t.total_steps.to_string());
        kv("train.stage2_start_step", t.stage2_start_step.to_string());
        kv("train.base_lr", t.base_lr.to_string());
        kv("train.lr_decay_steps", join(&t.lr_decay_steps));
        kv("train.lr_decay_factor", t.lr_decay_factor.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.log_every", t.log_every.to_string());
        kv("model.hidden", join(&t.model.hidden));
        kv("model.embed_dim", t.model.embed_dim.to_string());
        kv("eval.n_pos", e.n_pos.to_string());
        kv("eval.n_neg", e.n_neg.to_string());
        kv("eval.seed", e.seed.to_string());
        kv("eval.probe_steps", e.probe.steps.to_string());
        kv("eval.probe_lr", e.probe.lr.to_string());
        kv("eval.probe_momentum", e.probe.momentum.to_string());
        kv(
            "eval.probe_train_fraction",
            e.probe.train_fraction.to_string(),
        );
        kv("ablate.seeds", self.ablate_seeds.to_string());
        s
    }
}
