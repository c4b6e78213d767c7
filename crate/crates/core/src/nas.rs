//! Candidate architectures, analytic cost profiles, proxy accuracy and
//! per-round resource-aware architecture selection.
//!
//! A client scores each sampled candidate as `proxy_accuracy − λ · cost`, where
//! `cost` is the mean of the min-max normalized (flops, params, memory) over the
//! sampled subset. The previous round's architecture is always evaluated and is
//! only replaced by a strictly better candidate.

use std::cmp::Ordering;

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{train_step, LossConfig, Model, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, derived_rng, hash_str, rng_from, stream};

const BYTES_PER_VALUE: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub id: String,
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    /// Id is derived from the hidden widths, e.g. `h32-16`, or `linear`.
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Parameter(
                "input and output dims must be positive".into(),
            ));
        }
        if hidden_widths.contains(&0) {
            return Err(Error::Parameter("hidden widths must be positive".into()));
        }
        let id = if hidden_widths.is_empty() {
            "linear".to_string()
        } else {
            let parts: Vec<String> = hidden_widths.iter().map(ToString::to_string).collect();
            format!("h{}", parts.join("-"))
        };
        Ok(ArchitectureSpec {
            id,
            input_dim,
            hidden_widths,
            num_classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    /// `(in, out)` per dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostProfile {
    pub flops_per_sample: u64,
    pub params: u64,
    /// Parameters plus every layer activation for a batch, 8 bytes per value.
    pub mem_bytes: u64,
}

pub fn cost_profile(arch: &ArchitectureSpec, batch_size: usize) -> CostProfile {
    let dims = arch.layer_dims();
    let flops = dims.iter().map(|&(i, o)| 2 * (i * o) as u64).sum();
    let params: u64 = dims.iter().map(|&(i, o)| (i * o + o) as u64).sum();
    let activations = (arch.input_dim + arch.hidden_widths.iter().sum::<usize>() + arch.num_classes)
        as u64
        * batch_size as u64;
    CostProfile {
        flops_per_sample: flops,
        params,
        mem_bytes: BYTES_PER_VALUE * (params + activations),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    candidates: Vec<ArchitectureSpec>,
    /// Sorted distinct width ladder, used for neighborhood coordinates.
    widths: Vec<usize>,
    pub subset_size: usize,
    pub radius: usize,
}

impl SearchSpace {
    /// Grid of uniform-width networks: depth `1..=max_depth` × each width.
    pub fn grid(
        input_dim: usize,
        num_classes: usize,
        max_depth: usize,
        widths: &[usize],
        subset_size: usize,
        radius: usize,
    ) -> Result<Self> {
        if max_depth == 0 || widths.is_empty() {
            return Err(Error::Parameter(
                "search space needs depth >= 1 and a width".into(),
            ));
        }
        let mut ladder = widths.to_vec();
        ladder.sort_unstable();
        ladder.dedup();
        let mut candidates = Vec::new();
        for depth in 1..=max_depth {
            for &w in &ladder {
                candidates.push(ArchitectureSpec::new(
                    input_dim,
                    vec![w; depth],
                    num_classes,
                )?);
            }
        }
        Self::from_candidates(candidates, subset_size, radius)
    }

    pub fn from_candidates(
        candidates: Vec<ArchitectureSpec>,
        subset_size: usize,
        radius: usize,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Parameter("search space is empty".into()));
        }
        if subset_size == 0 {
            return Err(Error::Parameter("subset size must be >= 1".into()));
        }
        let mut widths: Vec<usize> = candidates
            .iter()
            .flat_map(|a| a.hidden_widths.iter().copied())
            .collect();
        widths.sort_unstable();
        widths.dedup();
        Ok(SearchSpace {
            subset_size: subset_size.min(candidates.len()),
            candidates,
            widths,
            radius,
        })
    }

    pub fn single(arch: ArchitectureSpec) -> Self {
        SearchSpace {
            widths: arch.hidden_widths.clone(),
            candidates: vec![arch],
            subset_size: 1,
            radius: 0,
        }
    }

    pub fn candidates(&self) -> &[ArchitectureSpec] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Most expensive candidate by parameter count (ties: later id).
    pub fn largest(&self) -> &ArchitectureSpec {
        self.candidates
            .iter()
            .max_by(|a, b| {
                cost_profile(a, 1)
                    .params
                    .cmp(&cost_profile(b, 1).params)
                    .then_with(|| a.id.cmp(&b.id))
            })
            .expect("non-empty search space")
    }

    /// `(depth, width rank)` using the widest hidden layer.
    fn coords(&self, arch: &ArchitectureSpec) -> (usize, usize) {
        let widest = arch.hidden_widths.iter().copied().max().unwrap_or(0);
        let rank = self.widths.partition_point(|&w| w < widest);
        (arch.depth(), rank)
    }

    /// Candidates to evaluate this round. `prev` is always included and the
    /// rest are drawn first from its ±radius neighborhood.
    pub fn sample_subset(
        &self,
        prev: Option<&ArchitectureSpec>,
        rng: &mut crate::rng::Rng,
    ) -> Vec<ArchitectureSpec> {
        let k = self.subset_size;
        let mut chosen: Vec<ArchitectureSpec> = Vec::with_capacity(k);
        let mut rest: Vec<&ArchitectureSpec> = self.candidates.iter().collect();
        if let Some(p) = prev {
            chosen.push(p.clone());
            rest.retain(|a| a.id != p.id);
            let (pd, pw) = self.coords(p);
            let (mut near, mut far): (Vec<_>, Vec<_>) = rest.into_iter().partition(|a| {
                let (d, w) = self.coords(a);
                d.abs_diff(pd) <= self.radius && w.abs_diff(pw) <= self.radius
            });
            near.shuffle(rng);
            far.shuffle(rng);
            rest = near.into_iter().chain(far).collect();
        } else {
            rest.shuffle(rng);
        }
        for a in rest {
            if chosen.len() >= k {
                break;
            }
            chosen.push(a.clone());
        }
        chosen.sort_by(|a, b| a.id.cmp(&b.id));
        chosen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyBudget {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for ProxyBudget {
    fn default() -> Self {
        ProxyBudget {
            epochs: 1,
            lr: 0.05,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub accuracy: f64,
    /// Too little data for a held-out split; `accuracy` is training accuracy.
    pub fallback: bool,
    /// Forward + backward flops spent on the proxy run.
    pub flops: u64,
}

const MIN_PROXY_SAMPLES: usize = 10;

/// Briefly trains a fresh model on 80% of `data` and reports accuracy on the
/// remaining 20%.
pub fn proxy_performance(
    arch: &ArchitectureSpec,
    data: &Dataset,
    budget: &ProxyBudget,
    seed: u64,
) -> Result<ProxyScore> {
    if data.is_empty() {
        return Err(Error::Parameter("proxy evaluation needs data".into()));
    }
    if budget.batch_size == 0 {
        return Err(Error::Parameter("proxy batch size must be >= 1".into()));
    }
    let mut rng = rng_from(derive_seed(seed, &[1]));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let fallback = data.len() < MIN_PROXY_SAMPLES;
    let (train_idx, val_idx) = if fallback {
        log::warn!(
            "proxy evaluation of {} on {} samples: using training accuracy",
            arch.id,
            data.len()
        );
        (order.clone(), order)
    } else {
        let cut = (data.len() * 4) / 5;
        let (t, v) = order.split_at(cut);
        (t.to_vec(), v.to_vec())
    };

    let mut model = Model::new(arch, derive_seed(seed, &[2]));
    let mut opt = Optimizer::new(budget.optimizer, budget.lr)?;
    let cfg = LossConfig {
        alpha: 0.0,
        temperature: 1.0,
    };
    let per_row = cost_profile(arch, 1).flops_per_sample;
    let mut flops = 0u64;
    let mut epoch_order = train_idx.clone();
    for _ in 0..budget.epochs {
        epoch_order.shuffle(&mut rng);
        for chunk in epoch_order.chunks(budget.batch_size) {
            let batch = data.batch(chunk)?;
            let out = train_step(&mut model, &batch, None, &cfg, &mut opt)?;
            flops += 3 * per_row * out.rows as u64;
        }
    }
    let val = data.inputs.select(Axis(0), &val_idx);
    let preds = model.predict(val.view())?;
    flops += per_row * val_idx.len() as u64;
    let correct = preds
        .iter()
        .zip(&val_idx)
        .filter(|(p, &i)| **p == data.labels[i])
        .count();
    Ok(ProxyScore {
        accuracy: correct as f64 / val_idx.len() as f64,
        fallback,
        flops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub arch: ArchitectureSpec,
    pub profile: CostProfile,
    pub proxy: f64,
    pub cost: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub chosen: ArchitectureSpec,
    pub evaluated: Vec<CandidateScore>,
    /// Flops spent evaluating the subset.
    pub flops: u64,
}

/// Mean of min-max normalized (flops, params, mem) within `profiles`.
pub fn normalized_costs(profiles: &[CostProfile]) -> Vec<f64> {
    let norm = |get: fn(&CostProfile) -> u64| -> Vec<f64> {
        let vals: Vec<f64> = profiles.iter().map(|p| get(p) as f64).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        vals.iter()
            .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    };
    let f = norm(|p| p.flops_per_sample);
    let p = norm(|p| p.params);
    let m = norm(|p| p.mem_bytes);
    (0..profiles.len())
        .map(|i| (f[i] + p[i] + m[i]) / 3.0)
        .collect()
}

/// Scores candidates from known proxy accuracies.
pub fn score_candidates(
    archs: &[ArchitectureSpec],
    proxies: &[f64],
    lambda: f64,
    batch_size: usize,
) -> Vec<CandidateScore> {
    let profiles: Vec<CostProfile> = archs.iter().map(|a| cost_profile(a, batch_size)).collect();
    let costs = normalized_costs(&profiles);
    archs
        .iter()
        .zip(profiles)
        .zip(proxies.iter().zip(costs))
        .map(|((arch, profile), (&proxy, cost))| CandidateScore {
            arch: arch.clone(),
            profile,
            proxy,
            cost,
            score: proxy - lambda * cost,
        })
        .collect()
}

/// Argmax of score. Ties keep `prev`, then prefer fewer params, then lower id.
pub fn pick_winner<'a>(scores: &'a [CandidateScore], prev: Option<&str>) -> &'a CandidateScore {
    scores
        .iter()
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| {
                    let a_prev = Some(a.arch.id.as_str()) == prev;
                    let b_prev = Some(b.arch.id.as_str()) == prev;
                    a_prev.cmp(&b_prev)
                })
                .then_with(|| b.profile.params.cmp(&a.profile.params))
                .then_with(|| b.arch.id.cmp(&a.arch.id))
        })
        .expect("at least one candidate")
}

pub fn select_architecture(
    space: &SearchSpace,
    local_data: &Dataset,
    lambda: f64,
    budget: &ProxyBudget,
    seed: u64,
    prev: Option<&ArchitectureSpec>,
) -> Result<Selection> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let mut rng = derived_rng(seed, &[stream::NAS_SUBSET]);
    let subset = space.sample_subset(prev, &mut rng);

    let evaluate = |arch: &ArchitectureSpec| {
        proxy_performance(
            arch,
            local_data,
            budget,
            derive_seed(seed, &[stream::NAS_PROXY, hash_str(&arch.id)]),
        )
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<ProxyScore>> = {
        use rayon::prelude::*;
        subset.par_iter().map(evaluate).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<ProxyScore>> = subset.iter().map(evaluate).collect();

    let proxies = results.into_iter().collect::<Result<Vec<_>>>()?;
    let flops = proxies.iter().map(|p| p.flops).sum();
    let accs: Vec<f64> = proxies.iter().map(|p| p.accuracy).collect();
    let evaluated = score_candidates(&subset, &accs, lambda, budget.batch_size);
    let chosen = pick_winner(&evaluated, prev.map(|p| p.id.as_str()))
        .arch
        .clone();
    Ok(Selection {
        chosen,
        evaluated,
        flops,
    })
}
