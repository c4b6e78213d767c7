use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Index-disjoint split of one dataset into test rows, a reserve for the
/// public reference set, and the pool that is partitioned across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    pub test: Vec<usize>,
    pub reserve: Vec<usize>,
    pub pool: Vec<usize>,
}

/// Stratified test holdout of `test_fraction` per class, then a uniformly drawn
/// public reserve of `reserve_size` rows from what is left.
pub fn holdout_split(
    ds: &Dataset,
    test_fraction: f64,
    reserve_size: usize,
    seed: u64,
) -> Result<HoldoutSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Parameter(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut test = Vec::new();
    let mut rest = Vec::new();
    for mut members in by_class {
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&members[..n_test]);
        rest.extend_from_slice(&members[n_test..]);
    }
    if reserve_size == 0 || reserve_size >= rest.len() {
        return Err(Error::Parameter(format!(
            "public reserve of {reserve_size} rows does not fit in {} non-test rows",
            rest.len()
        )));
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let reserve = rest[..reserve_size].to_vec();
    let mut pool = rest[reserve_size..].to_vec();
    test.sort_unstable();
    pool.sort_unstable();
    Ok(HoldoutSplit {
        test,
        reserve,
        pool,
    })
}

/// The shared public reference set. Row order is fixed; every logit matrix
/// row `j` refers to row `j` here.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicSet {
    pub inputs: Array2<f64>,
    /// Source rows in the parent dataset.
    pub indices: Vec<usize>,
    pub num_classes: usize,
    labels: Vec<usize>,
}

impl PublicSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Labels for server-side teacher pretraining. Clients never receive them.
    pub fn teacher_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn teacher_dataset(&self) -> Dataset {
        Dataset {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            name: "public".into(),
        }
    }

    pub fn distinct_classes(&self) -> usize {
        super::histogram(self.labels.iter().copied(), self.num_classes)
            .iter()
            .filter(|&&n| n > 0)
            .count()
    }
}

/// Draws `m` rows from `reserve`, keeping their order in `reserve`.
pub fn make_public_reference(
    ds: &Dataset,
    reserve: &[usize],
    m: usize,
    seed: u64,
) -> Result<PublicSet> {
    if m == 0 || m > reserve.len() {
        return Err(Error::Parameter(format!(
            "public set size {m} must be in [1, {}]",
            reserve.len()
        )));
    }
    if let Some(&bad) = reserve.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Index(format!("row {bad} >= {}", ds.len())));
    }
    let indices: Vec<usize> = if m == reserve.len() {
        reserve.to_vec()
    } else {
        let mut rng = rng_from(seed);
        let mut positions: Vec<usize> = (0..reserve.len()).collect();
        positions.shuffle(&mut rng);
        positions.truncate(m);
        positions.sort_unstable();
        positions.into_iter().map(|p| reserve[p]).collect()
    };
    Ok(PublicSet {
        inputs: ds.inputs.select(Axis(0), &indices),
        labels: indices.iter().map(|&i| ds.labels[i]).collect(),
        num_classes: ds.num_classes,
        indices,
    })
}
