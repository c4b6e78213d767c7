use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

/// How private data is spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Regime {
    Iid,
    /// Per-client class proportions drawn from `Dir(α·1_C)`.
    Dirichlet {
        alpha: f64,
    },
    /// Label-pure shards, `per_client` of them per client.
    Shards {
        per_client: usize,
    },
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Iid => write!(f, "iid"),
            Regime::Dirichlet { alpha } => write!(f, "dirichlet:{alpha}"),
            Regime::Shards { per_client } => write!(f, "shards:{per_client}"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = || {
            Error::Parameter(format!(
                "unknown distribution `{s}` (iid, dirichlet:<α>, shards:<s>)"
            ))
        };
        match (name, arg) {
            ("iid", None) => Ok(Regime::Iid),
            ("dirichlet", Some(a)) => {
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::Parameter(format!(
                        "dirichlet α must be > 0, got {alpha}"
                    )));
                }
                Ok(Regime::Dirichlet { alpha })
            }
            ("shards", Some(a)) => {
                let per_client: usize = a.parse().map_err(|_| bad())?;
                if per_client == 0 {
                    return Err(Error::Parameter("shards per client must be >= 1".into()));
                }
                Ok(Regime::Shards { per_client })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Regime {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Dataset row indices per client.
    pub assignments: Vec<Vec<usize>>,
    pub regime: Regime,
    /// Seed that produced the accepted assignment (after any retries).
    pub seed: u64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Per-client label histograms.
    pub fn histograms(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|idx| super::histogram(idx.iter().map(|&i| ds.labels[i]), ds.num_classes))
            .collect()
    }
}

const MAX_RETRIES: u64 = 64;

/// Partitions every row of `ds` over `clients` clients.
pub fn partition(ds: &Dataset, clients: usize, regime: Regime, seed: u64) -> Result<Partition> {
    let pool: Vec<usize> = (0..ds.len()).collect();
    partition_indices(&ds.labels, ds.num_classes, &pool, clients, regime, seed)
}

/// Partitions the rows listed in `pool` (indices into `labels`).
///
/// An assignment that leaves a client empty is redrawn with `seed+1`, `seed+2`, …
pub fn partition_indices(
    labels: &[usize],
    num_classes: usize,
    pool: &[usize],
    clients: usize,
    regime: Regime,
    seed: u64,
) -> Result<Partition> {
    if clients < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 clients, got {clients}"
        )));
    }
    if pool.len() < clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {clients} clients",
            pool.len()
        )));
    }
    match regime {
        Regime::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
            return Err(Error::Parameter(format!(
                "dirichlet α must be > 0, got {alpha}"
            )));
        }
        Regime::Shards { per_client } => {
            if per_client == 0 {
                return Err(Error::Parameter("shards per client must be >= 1".into()));
            }
            if clients * per_client > pool.len() {
                return Err(Error::Parameter(format!(
                    "{} shards requested from {} samples",
                    clients * per_client,
                    pool.len()
                )));
            }
        }
        _ => {}
    }
    for attempt in 0..MAX_RETRIES {
        let s = seed.wrapping_add(attempt);
        let mut rng = rng_from(s);
        let assignments = match regime {
            Regime::Iid => iid(pool, clients, &mut rng),
            Regime::Dirichlet { alpha } => {
                dirichlet(labels, num_classes, pool, clients, alpha, &mut rng)?
            }
            Regime::Shards { per_client } => {
                shards(labels, num_classes, pool, clients, per_client, &mut rng)
            }
        };
        if assignments.iter().all(|a| !a.is_empty()) {
            return Ok(Partition {
                assignments,
                regime,
                seed: s,
            });
        }
    }
    Err(Error::Partition(format!(
        "{regime} left a client empty after {MAX_RETRIES} attempts"
    )))
}

fn iid(pool: &[usize], clients: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = pool.to_vec();
    order.shuffle(rng);
    let base = order.len() / clients;
    let extra = order.len() % clients;
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let n = base + usize::from(k < extra);
        let mut part = order[start..start + n].to_vec();
        part.sort_unstable();
        out.push(part);
        start += n;
    }
    out
}

fn by_class(labels: &[usize], num_classes: usize, pool: &[usize]) -> Vec<Vec<usize>> {
    let mut classes = vec![Vec::new(); num_classes];
    for &i in pool {
        classes[labels[i]].push(i);
    }
    classes
}

/// Splits `total` into integer parts proportional to `weights`, handing the
/// leftover units to the largest fractional remainders (ties: lower index).
pub(crate) fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn sample_dirichlet(alpha: f64, dim: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Parameter(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

fn dirichlet(
    labels: &[usize],
    num_classes: usize,
    pool: &[usize],
    clients: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let proportions: Vec<Vec<f64>> = (0..clients)
        .map(|_| sample_dirichlet(alpha, num_classes, rng))
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); clients];
    for (c, mut members) in by_class(labels, num_classes, pool).into_iter().enumerate() {
        members.shuffle(rng);
        let weights: Vec<f64> = proportions.iter().map(|p| p[c]).collect();
        let counts = largest_remainder(members.len(), &weights);
        let mut start = 0;
        for (k, n) in counts.into_iter().enumerate() {
            out[k].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Label-pure shards: each class is cut into a number of shards proportional
/// to its size, then shards are dealt `per_client` at a time.
fn shards(
    labels: &[usize],
    num_classes: usize,
    pool: &[usize],
    clients: usize,
    per_client: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    let total = clients * per_client;
    let classes = by_class(labels, num_classes, pool);
    let sizes: Vec<f64> = classes.iter().map(|c| c.len() as f64).collect();
    let mut counts = largest_remainder(total, &sizes);
    // a class cannot yield more shards than it has samples
    for (c, n) in counts.iter_mut().enumerate() {
        *n = (*n).min(classes[c].len());
    }
    let mut deficit = total - counts.iter().sum::<usize>();
    while deficit > 0 {
        let spare = (0..num_classes)
            .filter(|&c| classes[c].len() > counts[c])
            .max_by_key(|&c| (classes[c].len() - counts[c], std::cmp::Reverse(c)));
        match spare {
            Some(c) => {
                counts[c] += 1;
                deficit -= 1;
            }
            None => break,
        }
    }
    let mut all_shards: Vec<Vec<usize>> = Vec::with_capacity(total);
    for (members, &n) in classes.iter().zip(&counts) {
        if n == 0 {
            continue;
        }
        let base = members.len() / n;
        let extra = members.len() % n;
        let mut start = 0;
        for s in 0..n {
            let len = base + usize::from(s < extra);
            all_shards.push(members[start..start + len].to_vec());
            start += len;
        }
    }
    all_shards.shuffle(rng);
    let mut out = vec![Vec::new(); clients];
    for (i, shard) in all_shards.into_iter().enumerate() {
        out[i / per_client].extend(shard);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn ds(samples: usize, classes: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            samples,
            classes,
            dim: 4,
            spread: 1.0,
            seed,
        })
        .unwrap()
    }

    fn check_disjoint(p: &Partition, n: usize) {
        let mut seen = vec![false; n];
        for part in &p.assignments {
            assert!(!part.is_empty());
            for &i in part {
                assert!(i < n);
                assert!(!seen[i], "row {i} assigned twice");
                seen[i] = true;
            }
        }
    }

    #[test]
    fn regime_parsing() {
        assert_eq!("iid".parse::<Regime>().unwrap(), Regime::Iid);
        assert_eq!(
            "dirichlet:0.1".parse::<Regime>().unwrap(),
            Regime::Dirichlet { alpha: 0.1 }
        );
        assert_eq!(
            "shards:2".parse::<Regime>().unwrap(),
            Regime::Shards { per_client: 2 }
        );
        assert!("dirichlet:-1".parse::<Regime>().is_err());
        assert!("shards:0".parse::<Regime>().is_err());
        assert!("zipf".parse::<Regime>().is_err());
    }

    #[test]
    fn iid_equal_split() {
        let d = ds(100, 5, 0);
        let p = partition(&d, 4, Regime::Iid, 1).unwrap();
        assert!(p.assignments.iter().all(|a| a.len() == 25));
        check_disjoint(&p, 100);
    }

    #[test]
    fn shards_bound_labels_per_client() {
        let d = ds(500, 10, 0);
        let p = partition(&d, 5, Regime::Shards { per_client: 2 }, 3).unwrap();
        for h in p.histograms(&d) {
            assert!(h.iter().filter(|&&n| n > 0).count() <= 2, "{h:?}");
        }
        check_disjoint(&p, 500);
    }

    #[test]
    fn largest_remainder_sums_to_total() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(
            largest_remainder(7, &[0.5, 0.25, 0.25])
                .iter()
                .sum::<usize>(),
            7
        );
    }

    fn mean_l1_to_global(d: &Dataset, alpha: f64, seed: u64) -> f64 {
        let p = partition(d, 5, Regime::Dirichlet { alpha }, seed).unwrap();
        let global: Vec<f64> = d
            .class_histogram()
            .iter()
            .map(|&n| n as f64 / d.len() as f64)
            .collect();
        let hs = p.histograms(d);
        hs.iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                h.iter()
                    .zip(&global)
                    .map(|(&c, g)| (c as f64 / n as f64 - g).abs())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / hs.len() as f64
    }

    #[test]
    fn dirichlet_large_alpha_approaches_global_mixture() {
        let d = ds(1000, 10, 2);
        let (mut low, mut high) = (0.0, 0.0);
        for seed in 0..20 {
            low += mean_l1_to_global(&d, 0.1, seed) / 20.0;
            high += mean_l1_to_global(&d, 1000.0, seed) / 20.0;
        }
        assert!(
            high < 0.1 * low,
            "α=1000 distance {high} vs α=0.1 distance {low}"
        );
        assert!(high < 0.15, "{high}");
    }

    fn mean_entropy(d: &Dataset, alpha: f64, seed: u64) -> f64 {
        let p = partition(d, 5, Regime::Dirichlet { alpha }, seed).unwrap();
        let hs = p.histograms(d);
        hs.iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                -h.iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let q = c as f64 / n as f64;
                        q * q.ln()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / hs.len() as f64
    }

    #[test]
    fn dirichlet_skew_is_monotone_in_alpha() {
        let d = ds(1000, 10, 5);
        let avg = |alpha| (0..20).map(|s| mean_entropy(&d, alpha, s)).sum::<f64>() / 20.0;
        let (a, b, c) = (avg(0.1), avg(1.0), avg(100.0));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn impossible_shard_request() {
        let d = ds(20, 2, 0);
        assert!(matches!(
            partition(&d, 5, Regime::Shards { per_client: 5 }, 0),
            Err(Error::Parameter(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn partitions_are_disjoint_and_nonempty(seed in any::<u64>(), which in 0usize..3, k in 2usize..8) {
            let d = ds(240, 6, 11);
            let regime = match which {
                0 => Regime::Iid,
                1 => Regime::Dirichlet { alpha: 0.5 },
                _ => Regime::Shards { per_client: 2 },
            };
            let p = partition(&d, k, regime, seed).unwrap();
            prop_assert_eq!(p.num_clients(), k);
            check_disjoint(&p, 240);
            if let Regime::Shards { per_client } = regime {
                for h in p.histograms(&d) {
                    prop_assert!(h.iter().filter(|&&n| n > 0).count() <= per_client);
                }
            }
        }
    }
}
