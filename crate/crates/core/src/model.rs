//! Embedder, class head, dataset head and the gradient reversal junction.
//!
//! The embedder is a ReLU multilayer perceptron. The class head produces
//! angular or affine logits; the dataset head is a single affine layer on the
//! raw embeddings. Between the embedder and the dataset head sits the
//! gradient reversal junction: identity going forward, `−λ·g` coming back,
//! and only in stage 2. In stage 1 the dataset loss trains the dataset head
//! alone.

use serde::{Deserialize, Serialize};

use crate::losses::{
    angular_forward, dataset_aware_loss, domain_loss, linear_backward, linear_logits,
    AngularForward, MarginSpec,
};
use crate::numerics::{Matrix, Prng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Widths of the ReLU hidden layers.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embed_dim: 16,
        }
    }
}

/// Affine layer, `weight` is `out × in`, `bias` is `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, prng: &mut Prng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| prng.uniform_range(-a, a))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        linear_logits(x, &self.weight, Some(self.bias.as_slice()))
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }
}

/// The trainable arrays of a model. Also used for gradients and momentum
/// buffers, which share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensors {
    pub embed: Vec<Dense>,
    /// `C × d` class weights, one row per class.
    pub class_weight: Matrix,
    /// Present only for affine class heads.
    pub class_bias: Option<Matrix>,
    /// `K × d` dataset classifier; absent when no adversarial path exists.
    pub domain: Option<Dense>,
}

impl ParamTensors {
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, d) in self.embed.iter().enumerate() {
            out.push((format!("embed.{l}.weight"), &d.weight));
            out.push((format!("embed.{l}.bias"), &d.bias));
        }
        out.push(("class.weight".to_string(), &self.class_weight));
        if let Some(b) = &self.class_bias {
            out.push(("class.bias".to_string(), b));
        }
        if let Some(d) = &self.domain {
            out.push(("domain.weight".to_string(), &d.weight));
            out.push(("domain.bias".to_string(), &d.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (l, d) in self.embed.iter_mut().enumerate() {
            out.push((format!("embed.{l}.weight"), &mut d.weight));
            out.push((format!("embed.{l}.bias"), &mut d.bias));
        }
        out.push(("class.weight".to_string(), &mut self.class_weight));
        if let Some(b) = &mut self.class_bias {
            out.push(("class.bias".to_string(), b));
        }
        if let Some(d) = &mut self.domain {
            out.push(("domain.weight".to_string(), &mut d.weight));
            out.push(("domain.bias".to_string(), &mut d.bias));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: self.embed.iter().map(Dense::zeros_like).collect(),
            class_weight: Matrix::zeros(self.class_weight.rows(), self.class_weight.cols()),
            class_bias: self.class_bias.as_ref().map(|b| Matrix::zeros(1, b.cols())),
            domain: self.domain.as_ref().map(Dense::zeros_like),
        }
    }

    /// Largest absolute difference over all arrays; infinite if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamTensors) -> f64 {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter()
            .zip(&b)
            .map(|((na, ma), (nb, mb))| {
                if na != nb {
                    f64::INFINITY
                } else {
                    ma.max_abs_diff(mb)
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub weights: ParamTensors,
    pub margin: MarginSpec,
    /// Gradient reversal coefficient.
    pub lambda: f64,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases. Arrays are drawn in a fixed
    /// order (embedder, class head, dataset head) so that omitting the
    /// dataset head leaves every other array unchanged.
    pub fn init(
        cfg: &ModelConfig,
        input_dim: usize,
        num_classes: usize,
        num_datasets: Option<usize>,
        margin: MarginSpec,
        lambda: f64,
        prng: &mut Prng,
    ) -> Result<Self> {
        margin.validate()?;
        if input_dim == 0 || num_classes == 0 || cfg.embed_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.embed_dim);
        let embed = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], prng))
            .collect();
        let class = Dense::glorot(cfg.embed_dim, num_classes, prng);
        let domain = num_datasets.map(|k| Dense::glorot(cfg.embed_dim, k, prng));
        Ok(Self {
            weights: ParamTensors {
                embed,
                class_weight: class.weight,
                class_bias: (!margin.angular).then_some(class.bias),
                domain,
            },
            margin,
            lambda,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights
            .embed
            .first()
            .map_or(self.embed_dim(), |d| d.weight.cols())
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.class_weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.class_weight.rows()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Matrix,
    /// Affine outputs of each embedder layer.
    pub pre: Vec<Matrix>,
    /// Outputs after activation (ReLU on hidden layers, none on the last).
    pub acts: Vec<Matrix>,
    pub class_logits: Option<Matrix>,
    pub domain_logits: Option<Matrix>,
    angular: Option<AngularForward>,
}

impl ForwardTrace {
    pub fn embeddings(&self) -> &Matrix {
        self.acts.last().unwrap_or(&self.input)
    }
}

pub fn embed_forward(params: &ModelParams, x: &Matrix) -> Result<ForwardTrace> {
    let layers = &params.weights.embed;
    if let Some(first) = layers.first() {
        if first.weight.cols() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "embed_forward",
                detail: format!(
                    "input width {} for layer width {}",
                    x.cols(),
                    first.weight.cols()
                ),
            });
        }
    }
    let mut pre = Vec::with_capacity(layers.len());
    let mut acts: Vec<Matrix> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = acts.last().unwrap_or(x);
        let z = layer.forward(input)?;
        let a = if l + 1 < layers.len() {
            z.map(|v| v.max(0.0))
        } else {
            z.clone()
        };
        pre.push(z);
        acts.push(a);
    }
    Ok(ForwardTrace {
        input: x.clone(),
        pre,
        acts,
        class_logits: None,
        domain_logits: None,
        angular: None,
    })
}

/// Embeddings for a batch, without keeping the trace.
pub fn embed(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let mut t = embed_forward(params, x)?;
    Ok(t.acts.pop().unwrap_or(t.input))
}

/// Class and dataset logits; both are also cached in `trace`.
pub fn heads_forward(
    params: &ModelParams,
    trace: &mut ForwardTrace,
    targets: &[usize],
) -> Result<(Matrix, Option<Matrix>)> {
    let w = &params.weights;
    let emb = trace.embeddings();
    if emb.cols() != w.class_weight.cols() {
        return Err(Error::ShapeMismatch {
            op: "heads_forward",
            detail: format!(
                "embedding width {} vs head width {}",
                emb.cols(),
                w.class_weight.cols()
            ),
        });
    }
    let (class_logits, angular) = if params.margin.angular {
        let fwd = angular_forward(emb, &w.class_weight, targets, &params.margin)?;
        (fwd.logits.clone(), Some(fwd))
    } else {
        let b = w.class_bias.as_ref().map(|b| b.as_slice());
        (linear_logits(emb, &w.class_weight, b)?, None)
    };
    let domain_logits = match &w.domain {
        Some(d) => Some(d.forward(&grl_forward(emb))?),
        None => None,
    };
    trace.class_logits = Some(class_logits.clone());
    trace.domain_logits = domain_logits.clone();
    trace.angular = angular;
    Ok((class_logits, domain_logits))
}

/// Gradient reversal, forward direction: the identity.
pub fn grl_forward(x: &Matrix) -> Matrix {
    x.clone()
}

/// Gradient reversal, backward direction: `−λ · upstream`.
pub fn grl_backward(upstream: &Matrix, lambda: f64) -> Matrix {
    upstream.map(|g| -lambda * g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Embedder and class head on the class loss; dataset head on the
    /// dataset loss with embeddings held fixed.
    Separate,
    /// As `Separate`, plus the reversed dataset-loss gradient into the embedder.
    Adversarial,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Separate => 1,
            Stage::Adversarial => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::Separate),
            2 => Ok(Stage::Adversarial),
            other => Err(Error::InvalidStage(other)),
        }
    }
}

/// Labels and masks of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLabels<'a> {
    pub targets: &'a [usize],
    pub dataset_ids: &'a [usize],
    pub masks: &'a [Vec<bool>],
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub grads: ParamTensors,
    pub loss_cls: f64,
    pub loss_d: Option<f64>,
    /// Gradient reaching the embeddings from the class loss.
    pub grad_emb_cls: Matrix,
    /// Gradient of the dataset loss with respect to the embeddings, before
    /// reversal. Present whenever a dataset head exists.
    pub grad_emb_domain: Option<Matrix>,
}

/// Stage-aware backward pass. `trace` must hold logits from [`heads_forward`].
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: BatchLabels<'_>,
    stage: Stage,
) -> Result<BackwardOutput> {
    let w = &params.weights;
    let emb = trace.embeddings();
    let class_logits = trace
        .class_logits
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("backward before heads_forward".into()))?;
    let cls = dataset_aware_loss(class_logits, labels.targets, labels.masks)?;

    let mut grads = w.zeros_like();
    let grad_emb_cls = match &trace.angular {
        Some(fwd) => {
            let (gx, gw) = fwd.backward(&cls.grad_logits)?;
            grads.class_weight = gw;
            gx
        }
        None => {
            let (gx, gw, gb) = linear_backward(emb, &w.class_weight, &cls.grad_logits)?;
            grads.class_weight = gw;
            if let Some(b) = &mut grads.class_bias {
                *b = gb;
            }
            gx
        }
    };

    let mut loss_d = None;
    let mut grad_emb_domain = None;
    if let (Some(head), Some(dl)) = (&w.domain, &trace.domain_logits) {
        if labels.dataset_ids.len() != emb.rows() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "{} dataset ids for {} rows",
                    labels.dataset_ids.len(),
                    emb.rows()
                ),
            });
        }
        let d = domain_loss(dl, labels.dataset_ids)?;
        let (gx, gw, gb) = linear_backward(emb, &head.weight, &d.grad_logits)?;
        let gd = grads.domain.as_mut().expect("layout mirrors params");
        gd.weight = gw;
        gd.bias = gb;
        loss_d = Some(d.loss);
        grad_emb_domain = Some(gx);
    }

    let grad_emb = match (stage, &grad_emb_domain) {
        (Stage::Adversarial, Some(gd)) => grad_emb_cls.add(&grl_backward(gd, params.lambda))?,
        _ => grad_emb_cls.clone(),
    };
    grads.embed = embed_backward(params, trace, &grad_emb)?;

    Ok(BackwardOutput {
        grads,
        loss_cls: cls.loss,
        loss_d,
        grad_emb_cls,
        grad_emb_domain,
    })
}

/// Backpropagates a gradient on the embeddings through the embedder.
pub fn embed_backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_emb: &Matrix,
) -> Result<Vec<Dense>> {
    let layers = &params.weights.embed;
    let mut out: Vec<Dense> = Vec::with_capacity(layers.len());
    let mut g = grad_emb.clone();
    for l in (0..layers.len()).rev() {
        if l + 1 < layers.len() {
            for (gv, &z) in g.as_mut_slice().iter_mut().zip(trace.pre[l].as_slice()) {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.acts[l - 1]
        };
        let (gx, gw, gb) = linear_backward(input, &layers[l].weight, &g)?;
        out.push(Dense {
            weight: gw,
            bias: gb,
        });
        g = gx;
    }
    out.reverse();
    Ok(out)
}
