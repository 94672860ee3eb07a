//! Finite-difference verification of the analytic backward pass.
//!
//! Each parameter group is compared against the derivative of the objective
//! that drives it: the embedder follows `L_cls − λ·L_d` in the adversarial
//! stage and `L_cls` otherwise, the class head follows `L_cls` and the dataset
//! head follows `L_d`.

use serde::Serialize;

use crate::losses::{dataset_aware_loss, domain_loss, MarginSpec};
use crate::model::{
    backward, embed_forward, heads_forward, BatchLabels, ModelConfig, ModelParams, Stage,
};
use crate::numerics::{finite_diff_grad, Matrix, Prng};
use crate::registry::build_class_table;
use crate::trainer::{batch_masks, LossMode};
use crate::Result;

/// Agreement required by the built-in suite.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: String,
    pub groups: Vec<GroupError>,
}

impl CaseReport {
    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// `max|a − n| / max(max|a|, max|n|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}

#[derive(Clone, Copy)]
enum Objective {
    Class,
    Domain,
    Embedder,
}

fn objective(
    params: &ModelParams,
    x: &Matrix,
    labels: BatchLabels<'_>,
    stage: Stage,
    which: Objective,
) -> Result<f64> {
    let mut trace = embed_forward(params, x)?;
    let (cl, dl) = heads_forward(params, &mut trace, labels.targets)?;
    let l_cls = || dataset_aware_loss(&cl, labels.targets, labels.masks).map(|o| o.loss);
    let l_d = || match &dl {
        Some(d) => domain_loss(d, labels.dataset_ids).map(|o| o.loss),
        None => Ok(0.0),
    };
    match which {
        Objective::Class => l_cls(),
        Objective::Domain => l_d(),
        Objective::Embedder if stage == Stage::Adversarial => Ok(l_cls()? - params.lambda * l_d()?),
        Objective::Embedder => l_cls(),
    }
}

/// Compares every parameter array against central differences and reports the
/// worst relative error per group (`embed`, `class`, `domain`).
pub fn check_model(
    params: &ModelParams,
    x: &Matrix,
    labels: BatchLabels<'_>,
    stage: Stage,
) -> Result<Vec<GroupError>> {
    let mut trace = embed_forward(params, x)?;
    heads_forward(params, &mut trace, labels.targets)?;
    let analytic = backward(params, &trace, labels, stage)?.grads;

    let mut per_group: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let names = params.weights.named();
    for (idx, (name, tensor)) in names.iter().enumerate() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        let which = match group.as_str() {
            "class" => Objective::Class,
            "domain" => Objective::Domain,
            _ => Objective::Embedder,
        };
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |theta| {
                probe.weights.named_mut()[idx]
                    .1
                    .as_mut_slice()
                    .copy_from_slice(theta);
                objective(&probe, x, labels, stage, which).unwrap_or(f64::NAN)
            },
            tensor.as_slice(),
            STEP,
        )?;
        let a = analytic.named()[idx].1.as_slice().to_vec();
        match per_group.iter_mut().find(|g| g.0 == group) {
            Some(g) => {
                g.1.extend(a);
                g.2.extend(numeric);
            }
            None => per_group.push((group, a, numeric)),
        }
    }
    Ok(per_group
        .into_iter()
        .map(|(group, a, n)| GroupError {
            max_rel_error: relative_error(&a, &n),
            group,
        })
        .collect())
}

/// Margins exercised by the suite, at a small logit scale.
pub fn suite_margins() -> Vec<(&'static str, MarginSpec)> {
    vec![
        ("linear", MarginSpec::linear()),
        ("normface", MarginSpec::normface(4.0)),
        ("arcface", MarginSpec::arcface(4.0, 0.5)),
        ("cosface", MarginSpec::cosface(4.0, 0.35)),
        ("sphereface", MarginSpec::sphereface(4.0, 1.35)),
        ("combined", MarginSpec::combined(0.9, 0.4, 0.15, 4.0)),
    ]
}

/// Every loss mode × stage × margin on a tiny random problem: input width 3,
/// one hidden layer of 4, embedding width 2, 4 classes split over 2 datasets,
/// batch of 3. Crossing dropout uses `p = 0.5` so that foreign classes are
/// actually admitted.
pub fn run_suite(seed: u64) -> Result<Vec<CaseReport>> {
    let table = build_class_table([(0, 0), (1, 0), (2, 1), (3, 1)])?;
    let cfg = ModelConfig {
        hidden: vec![4],
        embed_dim: 2,
    };
    let root = Prng::new(seed);
    let mut reports = Vec::new();
    for (m, &mode) in LossMode::ALL.iter().enumerate() {
        for (g, (margin_name, margin)) in suite_margins().into_iter().enumerate() {
            for stage in [Stage::Separate, Stage::Adversarial] {
                let mut prng = root.derive((m * 100 + g * 10 + stage.number() as usize) as u64);
                let heads = mode.uses_grl().then_some(table.num_datasets());
                let mut params =
                    ModelParams::init(&cfg, 3, table.num_classes(), heads, margin, 0.7, &mut prng)?;
                for (_, b) in params
                    .weights
                    .named_mut()
                    .into_iter()
                    .filter(|(n, _)| n.ends_with("bias"))
                {
                    b.as_mut_slice()
                        .iter_mut()
                        .for_each(|v| *v = 0.1 * prng.normal());
                }
                let x = Matrix::from_vec(3, 3, (0..9).map(|_| prng.normal()).collect())?;
                let targets = vec![0, 3, 1];
                let ids: Vec<usize> = targets.iter().map(|&c| table.dataset_of(c)).collect();
                let masks = batch_masks(mode, &table, &ids, 0.5, &mut prng)?;
                let labels = BatchLabels {
                    targets: &targets,
                    dataset_ids: &ids,
                    masks: &masks,
                };
                reports.push(CaseReport {
                    case: format!("{mode}/{margin_name}/stage{}", stage.number()),
                    groups: check_model(&params, &x, labels, stage)?,
                });
            }
        }
    }
    Ok(reports)
}
