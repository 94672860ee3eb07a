//! Synthetic multi-dataset corpora.
//!
//! Each identity is a Gaussian prototype. Every dataset holds the same block
//! of shared identities plus its own exclusive ones, and labels every identity
//! it holds with a fresh local class, so a shared identity carries a different
//! class label in each dataset. Each dataset also applies its own input
//! transform: a blend of the identity with a random orthogonal map, plus a
//! constant offset, both scaled by `domain_shift_strength`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, Prng, PRNG_ALGORITHM};
use crate::registry::{build_class_table, ClassTable};
use crate::{Error, Result};

pub const CORPUS_CSV: &str = "corpus.csv";
pub const CORPUS_META: &str = "corpus.meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_datasets: usize,
    pub identities_per_dataset: usize,
    /// Fraction of each dataset's identities drawn from the shared block.
    pub overlap_fraction: f64,
    pub samples_per_identity: usize,
    pub input_dim: usize,
    /// Standard deviation of identity prototypes.
    pub prototype_spread: f64,
    /// Within-identity standard deviation.
    pub sample_noise: f64,
    pub domain_shift_strength: f64,
    /// Fraction of each class's samples held out from training.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_datasets: 3,
            identities_per_dataset: 30,
            overlap_fraction: 0.3,
            samples_per_identity: 20,
            input_dim: 8,
            prototype_spread: 1.0,
            sample_noise: 0.35,
            domain_shift_strength: 0.5,
            holdout_fraction: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_datasets == 0
            || self.identities_per_dataset == 0
            || self.samples_per_identity == 0
            || self.input_dim == 0
        {
            return bad("gen counts must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad("gen.overlap_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("gen.holdout_fraction must lie in [0, 1)");
        }
        if !(self.prototype_spread >= 0.0 && self.sample_noise >= 0.0) {
            return bad("gen standard deviations must be >= 0");
        }
        if !(self.domain_shift_strength >= 0.0 && self.domain_shift_strength.is_finite()) {
            return bad("gen.domain_shift_strength must be >= 0");
        }
        Ok(())
    }

    /// Size of the identity block common to all datasets.
    pub fn shared_count(&self) -> usize {
        (self.overlap_fraction * self.identities_per_dataset as f64).round() as usize
    }

    /// Samples per class kept out of training (at least one stays in).
    pub fn holdout_count(&self) -> usize {
        let h = (self.holdout_fraction * self.samples_per_identity as f64).round() as usize;
        h.min(self.samples_per_identity - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Ground-truth person; evaluation only.
    pub global_identity: usize,
    /// Class label seen by training.
    pub local_class: usize,
    pub dataset_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub samples: Vec<Sample>,
    pub class_table: ClassTable,
    /// Ground-truth identity behind each local class.
    pub identity_of_class: Vec<usize>,
    /// Per sample: excluded from training.
    pub held_out: Vec<bool>,
}

impl SyntheticCorpus {
    /// Builds the class table and class→identity map from raw samples.
    pub fn from_samples(samples: Vec<Sample>, held_out: Vec<bool>) -> Result<Self> {
        if held_out.len() != samples.len() {
            return Err(Error::Format(format!(
                "{} split flags for {} samples",
                held_out.len(),
                samples.len()
            )));
        }
        if let Some(d) = samples.first().map(|s| s.features.len()) {
            if samples.iter().any(|s| s.features.len() != d) {
                return Err(Error::Format("ragged feature rows".into()));
            }
        }
        let class_table = build_class_table(samples.iter().map(|s| (s.local_class, s.dataset_id)))?;
        let mut identity_of_class = vec![usize::MAX; class_table.num_classes()];
        for s in &samples {
            let slot = &mut identity_of_class[s.local_class];
            if *slot != usize::MAX && *slot != s.global_identity {
                return Err(Error::Format(format!(
                    "class {} maps to identities {} and {}",
                    s.local_class, slot, s.global_identity
                )));
            }
            *slot = s.global_identity;
        }
        Ok(Self {
            samples,
            class_table,
            identity_of_class,
            held_out,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.num_classes()
    }

    pub fn num_datasets(&self) -> usize {
        self.class_table.num_datasets()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.held_out[i]).collect()
    }

    /// Held-out samples, or every sample when nothing is held out.
    pub fn eval_indices(&self) -> Vec<usize> {
        let held: Vec<usize> = (0..self.len()).filter(|&i| self.held_out[i]).collect();
        if held.is_empty() {
            (0..self.len()).collect()
        } else {
            held
        }
    }

    pub fn features(&self, idx: &[usize]) -> Matrix {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].features);
        }
        Matrix::from_vec(idx.len(), d, data).expect("uniform rows")
    }

    pub fn all_features(&self) -> Matrix {
        self.features(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn dataset_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.dataset_id).collect()
    }

    /// Identities that appear in two or more datasets.
    pub fn shared_identities(&self) -> Vec<usize> {
        let mut seen: std::collections::BTreeMap<usize, HashSet<usize>> = Default::default();
        for (c, &id) in self.identity_of_class.iter().enumerate() {
            seen.entry(id)
                .or_default()
                .insert(self.class_table.dataset_of(c));
        }
        seen.into_iter()
            .filter(|(_, ds)| ds.len() >= 2)
            .map(|(id, _)| id)
            .collect()
    }

    /// Writes `corpus.csv` and `corpus.meta.json` into `dir`.
    pub fn save(&self, dir: &Path, gen: &GenConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(CORPUS_CSV))?;
        let d = self.input_dim();
        let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        header.extend(["global_identity", "local_class", "dataset_id"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.features.iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(s.global_identity.to_string());
            rec.push(s.local_class.to_string());
            rec.push(s.dataset_id.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        let meta = CorpusMetadata {
            gen: gen.clone(),
            seed: gen.seed,
            prng_algorithm: PRNG_ALGORITHM.to_string(),
            num_samples: self.len(),
            held_out_indices: (0..self.len()).filter(|&i| self.held_out[i]).collect(),
        };
        fs::write(dir.join(CORPUS_META), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a corpus written by [`SyntheticCorpus::save`].
    pub fn load(dir: &Path) -> Result<(Self, CorpusMetadata)> {
        let meta: CorpusMetadata =
            serde_json::from_str(&fs::read_to_string(dir.join(CORPUS_META))?)?;
        let mut r = csv::Reader::from_path(dir.join(CORPUS_CSV))?;
        let header = r.headers()?.clone();
        let d = header
            .len()
            .checked_sub(3)
            .ok_or_else(|| Error::Format("corpus header too short".into()))?;
        for (i, h) in header.iter().take(d).enumerate() {
            if h != format!("f{i}") {
                return Err(Error::Format(format!("unexpected column {h:?} at {i}")));
            }
        }
        if header.iter().skip(d).collect::<Vec<_>>()
            != ["global_identity", "local_class", "dataset_id"]
        {
            return Err(Error::Format(
                "corpus header must end with global_identity,local_class,dataset_id".into(),
            ));
        }
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {}: column {i}: {e}", line + 2)))
            };
            let int = |i: usize| -> Result<usize> {
                rec[i]
                    .parse::<usize>()
                    .map_err(|e| Error::Format(format!("row {}: column {i}: {e}", line + 2)))
            };
            samples.push(Sample {
                features: (0..d).map(num).collect::<Result<_>>()?,
                global_identity: int(d)?,
                local_class: int(d + 1)?,
                dataset_id: int(d + 2)?,
            });
        }
        if samples.len() != meta.num_samples {
            return Err(Error::Format(format!(
                "metadata lists {} samples, csv has {}",
                meta.num_samples,
                samples.len()
            )));
        }
        let mut held_out = vec![false; samples.len()];
        for &i in &meta.held_out_indices {
            *held_out
                .get_mut(i)
                .ok_or_else(|| Error::Format(format!("held-out index {i} out of range")))? = true;
        }
        Ok((Self::from_samples(samples, held_out)?, meta))
    }
}

/// Sidecar written next to the corpus CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetadata {
    pub gen: GenConfig,
    pub seed: u64,
    pub prng_algorithm: String,
    pub num_samples: usize,
    pub held_out_indices: Vec<usize>,
}

/// Random orthogonal matrix: Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, prng: &mut Prng) -> Matrix {
    let mut q = Matrix::zeros(d, d);
    let mut r = 0;
    while r < d {
        let mut v: Vec<f64> = (0..d).map(|_| prng.normal()).collect();
        for prev in 0..r {
            let p = q.row(prev);
            let proj: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(p).for_each(|(a, b)| *a -= proj * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        q.row_mut(r)
            .iter_mut()
            .zip(&v)
            .for_each(|(o, a)| *o = a / n);
        r += 1;
    }
    q
}

/// Per-dataset input transform `v ↦ A v + b`.
#[derive(Clone, Debug)]
struct DomainShift {
    a: Matrix,
    b: Vec<f64>,
}

impl DomainShift {
    fn draw(d: usize, strength: f64, spread: f64, prng: &mut Prng) -> Self {
        let q = random_orthogonal(d, prng);
        let offset: Vec<f64> = (0..d).map(|_| spread * prng.normal()).collect();
        let mut a = q.scale(strength);
        for i in 0..d {
            a.set(i, i, a.get(i, i) + (1.0 - strength));
        }
        Self {
            a,
            b: offset.iter().map(|o| strength * o).collect(),
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..v.len())
            .map(|i| self.a.row(i).iter().zip(v).map(|(x, y)| x * y).sum::<f64>() + self.b[i])
            .collect()
    }
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let k = cfg.num_datasets;
    let per = cfg.identities_per_dataset;
    let shared = cfg.shared_count();
    let exclusive = per - shared;
    let total_ids = shared + k * exclusive;
    let d = cfg.input_dim;

    // Draw order is fixed regardless of the shift strength, so that two
    // corpora differing only in strength share prototypes and noise.
    let root = Prng::new(cfg.seed);
    let mut proto_rng = root.derive(1);
    let prototypes: Vec<Vec<f64>> = (0..total_ids)
        .map(|_| {
            (0..d)
                .map(|_| cfg.prototype_spread * proto_rng.normal())
                .collect()
        })
        .collect();
    let mut shift_rng = root.derive(2);
    let shifts: Vec<DomainShift> = (0..k)
        .map(|_| {
            DomainShift::draw(
                d,
                cfg.domain_shift_strength,
                cfg.prototype_spread,
                &mut shift_rng,
            )
        })
        .collect();
    let mut noise_rng = root.derive(3);

    let holdout = cfg.holdout_count();
    let mut samples = Vec::with_capacity(k * per * cfg.samples_per_identity);
    let mut held_out = Vec::with_capacity(samples.capacity());
    for (ds, shift) in shifts.iter().enumerate() {
        let ids = (0..shared).chain((0..exclusive).map(|j| shared + ds * exclusive + j));
        for (slot, id) in ids.enumerate() {
            let class = ds * per + slot;
            for s in 0..cfg.samples_per_identity {
                let raw: Vec<f64> = prototypes[id]
                    .iter()
                    .map(|p| p + cfg.sample_noise * noise_rng.normal())
                    .collect();
                samples.push(Sample {
                    features: shift.apply(&raw),
                    global_identity: id,
                    local_class: class,
                    dataset_id: ds,
                });
                held_out.push(s >= cfg.samples_per_identity - holdout);
            }
        }
    }
    SyntheticCorpus::from_samples(samples, held_out)
}

/// A verification pair of sample indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same_identity: bool,
}

/// Draws `n_pos` same-identity and `n_neg` different-identity pairs from the
/// evaluation pool. Positives come from cross-dataset pairs first and fall
/// back to same-dataset pairs only when the cross-dataset supply runs out.
pub fn make_verification_pairs(
    corpus: &SyntheticCorpus,
    n_pos: usize,
    n_neg: usize,
    prng: &mut Prng,
) -> Result<Vec<VerificationPair>> {
    let pool = corpus.eval_indices();
    let ident = |i: usize| corpus.samples[i].global_identity;
    let ds = |i: usize| corpus.samples[i].dataset_id;

    let mut cross = Vec::new();
    let mut within = Vec::new();
    let mut same_count = 0usize;
    for (x, &i) in pool.iter().enumerate() {
        for &j in &pool[x + 1..] {
            if ident(i) == ident(j) {
                same_count += 1;
                if ds(i) != ds(j) {
                    cross.push((i, j));
                } else {
                    within.push((i, j));
                }
            }
        }
    }
    if n_pos > cross.len() + within.len() {
        return Err(Error::InsufficientPairs(format!(
            "{n_pos} positives requested, {} available",
            cross.len() + within.len()
        )));
    }
    let total = pool.len() * pool.len().saturating_sub(1) / 2;
    let neg_available = total - same_count;
    if n_neg > neg_available {
        return Err(Error::InsufficientPairs(format!(
            "{n_neg} negatives requested, {neg_available} available"
        )));
    }

    let mut pairs = Vec::with_capacity(n_pos + n_neg);
    prng.shuffle(&mut cross);
    prng.shuffle(&mut within);
    for &(a, b) in cross.iter().chain(&within).take(n_pos) {
        pairs.push(VerificationPair {
            a,
            b,
            same_identity: true,
        });
    }

    if n_neg * 2 > neg_available {
        let mut all: Vec<(usize, usize)> = Vec::with_capacity(neg_available);
        for (x, &i) in pool.iter().enumerate() {
            for &j in &pool[x + 1..] {
                if ident(i) != ident(j) {
                    all.push((i, j));
                }
            }
        }
        prng.shuffle(&mut all);
        pairs.extend(all.into_iter().take(n_neg).map(|(a, b)| VerificationPair {
            a,
            b,
            same_identity: false,
        }));
    } else {
        let mut seen = HashSet::with_capacity(n_neg);
        while seen.len() < n_neg {
            let i = pool[prng.below(pool.len())];
            let j = pool[prng.below(pool.len())];
            if ident(i) == ident(j) {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                pairs.push(VerificationPair {
                    a: key.0,
                    b: key.1,
                    same_identity: false,
                });
            }
        }
    }
    Ok(pairs)
}
