//! Classification losses and their analytic gradients.
//!
//! The class loss is a softmax cross-entropy whose normalizer runs only over
//! the classes active in each sample's mask. With all-ones masks it is the
//! plain softmax loss; with dataset masks, classes from other datasets get no
//! gradient at all, so a duplicated identity under another dataset's label is
//! never pushed away.
//!
//! Logits come either from an affine head or from an angular head
//! `s·(cos(m1·θ_y + m2) − m3)` on the target and `s·cos θ_j` elsewhere.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, masked_log_softmax, norm2, Matrix, NORM_EPS};
use crate::{Error, Result};

/// Cosines are clamped this far inside `[-1, 1]` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

/// Angular-margin parameters. `(m1, m2, m3) = (1, 0, 0)` is the identity
/// margin; `angular = false` selects affine logits and ignores the rest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    /// Multiplicative angular margin.
    pub m1: f64,
    /// Additive angular margin, radians.
    pub m2: f64,
    /// Additive cosine margin.
    pub m3: f64,
    /// Logit scale.
    pub s: f64,
    pub angular: bool,
}

impl MarginSpec {
    pub const ARCFACE_SCALE: f64 = 64.0;
    pub const ARCFACE_MARGIN: f64 = 0.5;

    /// Affine logits `W x + b`.
    pub fn linear() -> Self {
        Self {
            m1: 1.0,
            m2: 0.0,
            m3: 0.0,
            s: 1.0,
            angular: false,
        }
    }

    pub fn combined(m1: f64, m2: f64, m3: f64, s: f64) -> Self {
        Self {
            m1,
            m2,
            m3,
            s,
            angular: true,
        }
    }

    pub fn arcface(s: f64, m: f64) -> Self {
        Self::combined(1.0, m, 0.0, s)
    }

    pub fn cosface(s: f64, m: f64) -> Self {
        Self::combined(1.0, 0.0, m, s)
    }

    pub fn sphereface(s: f64, m: f64) -> Self {
        Self::combined(m, 0.0, 0.0, s)
    }

    /// Normalized softmax with no margin.
    pub fn normface(s: f64) -> Self {
        Self::combined(1.0, 0.0, 0.0, s)
    }

    pub fn is_identity_margin(&self) -> bool {
        self.m1 == 1.0 && self.m2 == 0.0
    }

    /// `m1` only has to be positive: the combined-margin setting
    /// `(0.9, 0.4, 0.15)` uses a multiplicative factor below one.
    pub fn validate(&self) -> Result<()> {
        let ok = self.s > 0.0
            && self.m1 > 0.0
            && self.m2 >= 0.0
            && self.m3 >= 0.0
            && [self.s, self.m1, self.m2, self.m3]
                .iter()
                .all(|v| v.is_finite());
        if !ok && self.angular {
            return Err(Error::InvalidConfig(format!("invalid margin {self:?}")));
        }
        Ok(())
    }
}

impl Default for MarginSpec {
    fn default() -> Self {
        Self::arcface(Self::ARCFACE_SCALE, Self::ARCFACE_MARGIN)
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_logits: Matrix,
}

/// `logits[i][j] = W_j · x_i + b_j`
pub fn linear_logits(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Result<Matrix> {
    let mut z = x.matmul_t(w)?;
    if let Some(b) = b {
        z.add_row_broadcast(b)?;
    }
    Ok(z)
}

/// Gradients of [`linear_logits`]: `(dx, dW, db)`.
pub fn linear_backward(
    x: &Matrix,
    w: &Matrix,
    grad_logits: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let dx = grad_logits.matmul(w)?;
    let dw = grad_logits.t_matmul(x)?;
    Ok((dx, dw, grad_logits.sum_rows()))
}

/// Forward pass of the angular head, keeping what backward needs.
#[derive(Clone, Debug)]
pub struct AngularForward {
    pub logits: Matrix,
    x_hat: Matrix,
    x_norm: Vec<f64>,
    w_hat: Matrix,
    w_norm: Vec<f64>,
    /// `∂logit/∂cos θ` for each entry.
    dlogit_dcos: Matrix,
}

pub fn angular_forward(
    x: &Matrix,
    w: &Matrix,
    targets: &[usize],
    spec: &MarginSpec,
) -> Result<AngularForward> {
    if !spec.angular {
        return Err(Error::InvalidConfig(
            "angular head with non-angular margin".into(),
        ));
    }
    spec.validate()?;
    if x.cols() != w.cols() || targets.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "angular_logits",
            detail: format!(
                "x {}x{}, W {}x{}, {} targets",
                x.rows(),
                x.cols(),
                w.rows(),
                w.cols(),
                targets.len()
            ),
        });
    }
    let c = w.rows();
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::OutOfRange {
            what: "target label",
            value: t,
            bound: c,
        });
    }
    let (x_hat, x_norm) = normalize_with_norms(x);
    let (w_hat, w_norm) = normalize_with_norms(w);
    let cos = x_hat.matmul_t(&w_hat)?;
    let mut logits = cos.scale(spec.s);
    let mut dlogit_dcos = Matrix::zeros(x.rows(), c);
    dlogit_dcos.as_mut_slice().fill(spec.s);
    for (i, &t) in targets.iter().enumerate() {
        let (z, dz) = target_logit(cos.get(i, t), spec);
        logits.set(i, t, z);
        dlogit_dcos.set(i, t, dz);
    }
    Ok(AngularForward {
        logits,
        x_hat,
        x_norm,
        w_hat,
        w_norm,
        dlogit_dcos,
    })
}

/// Target logit and its derivative with respect to the raw cosine.
fn target_logit(cos: f64, spec: &MarginSpec) -> (f64, f64) {
    if spec.is_identity_margin() {
        return (spec.s * (cos - spec.m3), spec.s);
    }
    let lo = -1.0 + COS_CLAMP;
    let hi = 1.0 - COS_CLAMP;
    let clamped = cos.clamp(lo, hi);
    let theta = clamped.acos();
    let phi = spec.m1 * theta + spec.m2;
    if phi >= std::f64::consts::PI {
        return (spec.s * (-1.0 - spec.m3), 0.0);
    }
    let z = spec.s * (phi.cos() - spec.m3);
    let dz = if cos > lo && cos < hi {
        spec.s * spec.m1 * phi.sin() / (1.0 - clamped * clamped).sqrt()
    } else {
        0.0
    };
    (z, dz)
}

fn normalize_with_norms(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let n = norm2(row);
        let d = n.max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= d);
        norms.push(n);
    }
    (out, norms)
}

/// Pulls a gradient on `row / max(‖row‖, eps)` back to `row`.
fn normalize_backward(hat: &Matrix, norms: &[f64], grad_hat: &Matrix) -> Matrix {
    let mut out = grad_hat.clone();
    for (r, &n) in norms.iter().enumerate() {
        let h = hat.row(r);
        let g = out.row_mut(r);
        if n >= NORM_EPS {
            let proj = dot(h, g);
            for (gv, &hv) in g.iter_mut().zip(h) {
                *gv = (*gv - hv * proj) / n;
            }
        } else {
            g.iter_mut().for_each(|v| *v /= NORM_EPS);
        }
    }
    out
}

impl AngularForward {
    /// Gradients with respect to the raw embeddings and raw class weights.
    pub fn backward(&self, grad_logits: &Matrix) -> Result<(Matrix, Matrix)> {
        if grad_logits.shape() != self.logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "angular_backward",
                detail: format!("{:?} vs {:?}", grad_logits.shape(), self.logits.shape()),
            });
        }
        let mut grad_cos = grad_logits.clone();
        for (g, &d) in grad_cos
            .as_mut_slice()
            .iter_mut()
            .zip(self.dlogit_dcos.as_slice())
        {
            *g *= d;
        }
        let grad_x_hat = grad_cos.matmul(&self.w_hat)?;
        let grad_w_hat = grad_cos.t_matmul(&self.x_hat)?;
        Ok((
            normalize_backward(&self.x_hat, &self.x_norm, &grad_x_hat),
            normalize_backward(&self.w_hat, &self.w_norm, &grad_w_hat),
        ))
    }
}

/// Angular-margin logits; embeddings and weight rows are normalized inside.
pub fn angular_logits(
    x: &Matrix,
    w: &Matrix,
    targets: &[usize],
    spec: &MarginSpec,
) -> Result<Matrix> {
    Ok(angular_forward(x, w, targets, spec)?.logits)
}

/// Mean masked softmax cross-entropy.
///
/// `grad_logits[i][j] = (p_ij − 1{j = y_i}) / N` on active entries and
/// exactly zero on inactive ones.
pub fn dataset_aware_loss(
    logits: &Matrix,
    targets: &[usize],
    masks: &[Vec<bool>],
) -> Result<LossOutput> {
    let (n, c) = logits.shape();
    if targets.len() != n || masks.len() != n {
        return Err(Error::ShapeMismatch {
            op: "dataset_aware_loss",
            detail: format!("{n} rows, {} targets, {} masks", targets.len(), masks.len()),
        });
    }
    if n == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for i in 0..n {
        let t = targets[i];
        if t >= c {
            return Err(Error::OutOfRange {
                what: "target label",
                value: t,
                bound: c,
            });
        }
        if masks[i].len() != c {
            return Err(Error::ShapeMismatch {
                op: "dataset_aware_loss",
                detail: format!("mask {i} has {} entries for {c} classes", masks[i].len()),
            });
        }
        if !masks[i][t] {
            return Err(Error::TargetMaskedOut {
                sample: i,
                target: t,
            });
        }
        let logp = masked_log_softmax(logits.row(i), &masks[i])?;
        loss -= logp[t];
        let g = grad.row_mut(i);
        for j in 0..c {
            if masks[i][j] {
                let onehot = if j == t { 1.0 } else { 0.0 };
                g[j] = (logp[j].exp() - onehot) * inv_n;
            }
        }
    }
    Ok(LossOutput {
        loss: (loss * inv_n).max(0.0),
        grad_logits: grad,
    })
}

/// Plain softmax cross-entropy over all classes.
pub fn softmax_loss(logits: &Matrix, targets: &[usize]) -> Result<LossOutput> {
    let masks = vec![vec![true; logits.cols()]; logits.rows()];
    dataset_aware_loss(logits, targets, &masks)
}

/// Dataset-classifier loss: mean softmax cross-entropy over the K datasets.
pub fn domain_loss(domain_logits: &Matrix, dataset_ids: &[usize]) -> Result<LossOutput> {
    softmax_loss(domain_logits, dataset_ids)
}
