//! Verification accuracy, dataset-membership probe and overlap consistency.
//!
//! All cosine computations run on L2-normalized embeddings.

use serde::{Deserialize, Serialize};

use crate::datagen::{make_verification_pairs, SyntheticCorpus, VerificationPair};
use crate::losses::softmax_loss;
use crate::model::{embed, ModelParams};
use crate::numerics::{dot, l2_normalize_rows, Matrix, Prng, NORM_EPS};
use crate::{Error, Result};

/// Number of different-identity pairs sampled by [`overlap_consistency`].
pub const CROSS_ID_SAMPLES: usize = 10_000;

/// Cosine similarity of each pair.
pub fn pair_similarities(embeddings: &Matrix, pairs: &[VerificationPair]) -> Vec<f64> {
    let e = l2_normalize_rows(embeddings, NORM_EPS);
    pairs.iter().map(|p| dot(e.row(p.a), e.row(p.b))).collect()
}

/// Best-threshold accuracy over precomputed similarities.
///
/// Candidate thresholds are `−∞`, the midpoints between consecutive distinct
/// sorted similarities, and `+∞`; a pair is called "same" when `sim ≥ t`.
/// Ties go to the smaller threshold.
pub fn best_threshold(sims: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    let n_pos = same.iter().filter(|&&s| s).count();
    let n_neg = same.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientPairs(
            "verification needs at least one positive and one negative pair".into(),
        ));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("pair similarities".into()));
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]));

    // cut i: pairs order[..i] predicted different, order[i..] predicted same
    let mut neg_below = 0usize;
    let mut pos_below = 0usize;
    let mut best = (n_pos, f64::NEG_INFINITY);
    for i in 1..=order.len() {
        if same[order[i - 1]] {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        let t = if i == order.len() {
            f64::INFINITY
        } else {
            let (lo, hi) = (sims[order[i - 1]], sims[order[i]]);
            if lo == hi {
                continue;
            }
            let mid = lo + (hi - lo) / 2.0;
            if mid > lo {
                mid
            } else {
                hi
            }
        };
        let correct = neg_below + (n_pos - pos_below);
        if correct > best.0 {
            best = (correct, t);
        }
    }
    Ok((best.0 as f64 / sims.len() as f64, best.1))
}

/// Verification accuracy and the threshold achieving it.
pub fn verification_accuracy(
    embeddings: &Matrix,
    pairs: &[VerificationPair],
) -> Result<(f64, f64)> {
    if let Some(p) = pairs
        .iter()
        .find(|p| p.a >= embeddings.rows() || p.b >= embeddings.rows())
    {
        return Err(Error::OutOfRange {
            what: "pair index",
            value: p.a.max(p.b),
            bound: embeddings.rows(),
        });
    }
    let sims = pair_similarities(embeddings, pairs);
    let same: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    best_threshold(&sims, &same)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Share of each dataset used to fit the probe.
    pub train_fraction: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            momentum: 0.9,
            train_fraction: 0.7,
        }
    }
}

/// Held-out accuracy of an affine softmax classifier predicting the dataset
/// from frozen embeddings, with default options.
pub fn domain_probe(embeddings: &Matrix, dataset_ids: &[usize], prng: &mut Prng) -> Result<f64> {
    domain_probe_with(embeddings, dataset_ids, prng, &ProbeOptions::default())
}

/// The split is stratified per dataset; the classifier is fit full-batch
/// with momentum SGD from a seeded Glorot initialization.
pub fn domain_probe_with(
    embeddings: &Matrix,
    dataset_ids: &[usize],
    prng: &mut Prng,
    opts: &ProbeOptions,
) -> Result<f64> {
    if dataset_ids.len() != embeddings.rows() {
        return Err(Error::ShapeMismatch {
            op: "domain_probe",
            detail: format!(
                "{} labels for {} rows",
                dataset_ids.len(),
                embeddings.rows()
            ),
        });
    }
    let k = dataset_ids.iter().max().map_or(0, |m| m + 1);
    let mut by_dataset: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &d) in dataset_ids.iter().enumerate() {
        by_dataset[d].push(i);
    }
    if by_dataset.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(Error::SingleDataset);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for group in &mut by_dataset {
        prng.shuffle(group);
        let cut = ((opts.train_fraction * group.len() as f64).round() as usize).min(group.len());
        train_idx.extend_from_slice(&group[..cut]);
        test_idx.extend_from_slice(&group[cut..]);
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InsufficientPairs(
            "probe split left an empty side".into(),
        ));
    }

    let d = embeddings.cols();
    let a = (6.0 / (d + k) as f64).sqrt();
    let mut w = Matrix::from_vec(
        k,
        d,
        (0..k * d).map(|_| prng.uniform_range(-a, a)).collect(),
    )?;
    let mut b = vec![0.0; k];
    let mut vw = Matrix::zeros(k, d);
    let mut vb = vec![0.0; k];
    let x = embeddings.select_rows(&train_idx);
    let y: Vec<usize> = train_idx.iter().map(|&i| dataset_ids[i]).collect();
    for _ in 0..opts.steps {
        let mut z = x.matmul_t(&w)?;
        z.add_row_broadcast(&b)?;
        let g = softmax_loss(&z, &y)?.grad_logits;
        let gw = g.t_matmul(&x)?;
        let gb = g.sum_rows();
        for ((wv, vv), &gv) in w
            .as_mut_slice()
            .iter_mut()
            .zip(vw.as_mut_slice())
            .zip(gw.as_slice())
        {
            *vv = opts.momentum * *vv + gv;
            *wv -= opts.lr * *vv;
        }
        for ((bv, vv), &gv) in b.iter_mut().zip(vb.iter_mut()).zip(gb.as_slice()) {
            *vv = opts.momentum * *vv + gv;
            *bv -= opts.lr * *vv;
        }
    }

    let xt = embeddings.select_rows(&test_idx);
    let mut z = xt.matmul_t(&w)?;
    z.add_row_broadcast(&b)?;
    let correct = test_idx
        .iter()
        .enumerate()
        .filter(|(r, &i)| argmax(z.row(*r)) == dataset_ids[i])
        .count();
    Ok(correct as f64 / test_idx.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(mean cosine over same-identity cross-dataset pairs, mean cosine over a
/// seeded sample of different-identity pairs)`.
pub fn overlap_consistency(
    embeddings: &Matrix,
    corpus: &SyntheticCorpus,
    prng: &mut Prng,
) -> Result<(f64, f64)> {
    if embeddings.rows() != corpus.len() {
        return Err(Error::ShapeMismatch {
            op: "overlap_consistency",
            detail: format!(
                "{} embeddings for {} samples",
                embeddings.rows(),
                corpus.len()
            ),
        });
    }
    let e = l2_normalize_rows(embeddings, NORM_EPS);
    let s = &corpus.samples;

    let mut by_identity: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, smp) in s.iter().enumerate() {
        by_identity.entry(smp.global_identity).or_default().push(i);
    }
    let mut same_sum = 0.0;
    let mut same_n = 0usize;
    for members in by_identity.values() {
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                if s[i].dataset_id != s[j].dataset_id {
                    same_sum += dot(e.row(i), e.row(j));
                    same_n += 1;
                }
            }
        }
    }
    if same_n == 0 {
        return Err(Error::NoSharedIdentities);
    }
    if by_identity.len() < 2 {
        return Err(Error::InsufficientPairs("only one identity present".into()));
    }
    let mut cross_sum = 0.0;
    let mut drawn = 0;
    while drawn < CROSS_ID_SAMPLES {
        let i = prng.below(s.len());
        let j = prng.below(s.len());
        if s[i].global_identity == s[j].global_identity {
            continue;
        }
        cross_sum += dot(e.row(i), e.row(j));
        drawn += 1;
    }
    Ok((
        same_sum / same_n as f64,
        cross_sum / CROSS_ID_SAMPLES as f64,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub probe: ProbeOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_pos: 500,
            n_neg: 500,
            seed: 0,
            probe: ProbeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub verification_accuracy: f64,
    /// `null` in JSON when the best cut is at ±∞.
    pub best_threshold: f64,
    pub domain_probe_accuracy: Option<f64>,
    pub overlap_same_id_cosine: Option<f64>,
    pub cross_id_cosine: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Why optional metrics are missing, if any are.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Full evaluation of a model on a corpus.
///
/// Verification uses the held-out pool; the probe and overlap score use every
/// sample. When the pool cannot supply `n_pos` positives, all available
/// positives are used. Probe and overlap failures (single dataset, no shared
/// identity) are recorded in `notes` rather than failing the report.
pub fn evaluate(
    params: &ModelParams,
    corpus: &SyntheticCorpus,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let emb = l2_normalize_rows(&embed(params, &corpus.all_features())?, NORM_EPS);
    let root = Prng::new(opts.seed);
    let n_pos = opts.n_pos.min(available_positives(corpus));
    let pairs = make_verification_pairs(corpus, n_pos, opts.n_neg, &mut root.derive(1))?;
    let (acc, thr) = verification_accuracy(&emb, &pairs)?;

    let mut notes = Vec::new();
    let probe = match domain_probe_with(
        &emb,
        &corpus.dataset_ids(),
        &mut root.derive(2),
        &opts.probe,
    ) {
        Ok(a) => Some(a),
        Err(e) => {
            notes.push(format!("domain probe: {e}"));
            None
        }
    };
    let (same, cross) = match overlap_consistency(&emb, corpus, &mut root.derive(3)) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(e) => {
            notes.push(format!("overlap consistency: {e}"));
            (None, None)
        }
    };
    Ok(EvalReport {
        verification_accuracy: acc,
        best_threshold: thr,
        domain_probe_accuracy: probe,
        overlap_same_id_cosine: same,
        cross_id_cosine: cross,
        n_pos,
        n_neg: opts.n_neg,
        notes,
    })
}

fn available_positives(corpus: &SyntheticCorpus) -> usize {
    let mut count: std::collections::HashMap<usize, usize> = Default::default();
    for i in corpus.eval_indices() {
        *count.entry(corpus.samples[i].global_identity).or_default() += 1;
    }
    count.values().map(|&m| m * (m - 1) / 2).sum()
}
