//! Global class table and per-sample class masks.

use serde::{Deserialize, Serialize};

use crate::numerics::Prng;
use crate::{Error, Result};

/// Class label space of the merged corpus and the dataset owning each class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    dataset_of: Vec<usize>,
    per_dataset_class_count: Vec<usize>,
}

impl ClassTable {
    pub fn num_classes(&self) -> usize {
        self.dataset_of.len()
    }

    pub fn num_datasets(&self) -> usize {
        self.per_dataset_class_count.len()
    }

    pub fn dataset_of(&self, class: usize) -> usize {
        self.dataset_of[class]
    }

    pub fn dataset_map(&self) -> &[usize] {
        &self.dataset_of
    }

    pub fn per_dataset_class_count(&self) -> &[usize] {
        &self.per_dataset_class_count
    }

    fn check_dataset(&self, k: usize) -> Result<()> {
        if k >= self.num_datasets() {
            return Err(Error::OutOfRange {
                what: "dataset index",
                value: k,
                bound: self.num_datasets(),
            });
        }
        Ok(())
    }
}

/// Builds the table from `(class, dataset)` pairs. Pairs may repeat (one per
/// sample, say) as long as each class always names the same dataset.
pub fn build_class_table<I>(class_dataset_pairs: I) -> Result<ClassTable>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut owner: Vec<Option<usize>> = Vec::new();
    for (class, dataset) in class_dataset_pairs {
        if class >= owner.len() {
            owner.resize(class + 1, None);
        }
        match owner[class] {
            None => owner[class] = Some(dataset),
            Some(prev) if prev != dataset => {
                return Err(Error::InconsistentClassMap {
                    class,
                    first: prev,
                    second: dataset,
                })
            }
            Some(_) => {}
        }
    }
    let dataset_of = owner
        .iter()
        .enumerate()
        .map(|(c, o)| {
            o.ok_or_else(|| Error::InvalidConfig(format!("class label {c} never appears")))
        })
        .collect::<Result<Vec<_>>>()?;
    if dataset_of.is_empty() {
        return Err(Error::InvalidConfig("no classes".into()));
    }
    let k = dataset_of.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &d in &dataset_of {
        counts[d] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidConfig(format!(
            "dataset {empty} owns no class"
        )));
    }
    Ok(ClassTable {
        dataset_of,
        per_dataset_class_count: counts,
    })
}

/// Dataset indicator: `mask[j]` is set iff class `j` belongs to dataset `k`.
pub fn dataset_mask(table: &ClassTable, k: usize) -> Result<Vec<bool>> {
    table.check_dataset(k)?;
    Ok(table.dataset_of.iter().map(|&d| d == k).collect())
}

/// Dataset indicator relaxed by crossing dropout: own-dataset classes are
/// always active, every other class is admitted independently with
/// probability `p`. Draws one uniform per foreign class on every call.
pub fn crossing_dropout_mask(
    table: &ClassTable,
    k: usize,
    p: f64,
    prng: &mut Prng,
) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    table.check_dataset(k)?;
    Ok(table
        .dataset_of
        .iter()
        .map(|&d| d == k || prng.uniform() < p)
        .collect())
}
