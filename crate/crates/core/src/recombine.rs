//! Model recombination.
//!
//! The K models of a round are cut into layer groups (single layers, or
//! contiguous segments). For every group an independent uniform permutation of
//! `0..K` decides which input model supplies that group to each output model.
//! Blocks are moved by reference, never re-materialised, so each input block
//! ends up in exactly one output model, bit for bit.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, LayeredModel, ModelList};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    PerLayer,
    /// `count` contiguous segments of near-equal size.
    Segments { count: usize },
}

impl Granularity {
    /// Segment granularity for a fraction `x` in (0, 1]: `ceil(1/x)` segments.
    pub fn from_fraction(x: f64) -> Result<Self> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(Error::InvalidGranularity(x));
        }
        // Guard against 1/x landing a hair above an integer (e.g. 1/0.1).
        let count = ((1.0 / x) - 1e-9).ceil().max(1.0) as usize;
        Ok(Granularity::Segments { count })
    }

    pub fn groups(&self, n_layers: usize) -> Vec<Range<usize>> {
        match *self {
            Granularity::Segments { count } if count >= 1 && count <= n_layers => {
                balanced_split(n_layers, count)
            }
            _ => (0..n_layers).map(|i| i..i + 1).collect(),
        }
    }

    pub fn group_count(&self, n_layers: usize) -> usize {
        self.groups(n_layers).len()
    }
}

/// Splits `0..n` into `count` contiguous ranges whose sizes differ by at most
/// one; the first `n % count` ranges carry the extra layer.
fn balanced_split(n: usize, count: usize) -> Vec<Range<usize>> {
    let base = n / count;
    let extra = n % count;
    let mut start = 0;
    (0..count)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Layer ranges for segment fraction `x`. Falls back to one range per layer
/// when `ceil(1/x)` exceeds the layer count.
pub fn segment_groups(n_layers: usize, x: f64) -> Result<Vec<Range<usize>>> {
    Ok(Granularity::from_fraction(x)?.groups(n_layers))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecombinationPlan {
    pub granularity: Granularity,
    /// `permutations[g][j]` = index of the input model whose group `g` lands
    /// in output model `j`.
    pub permutations: Vec<Vec<usize>>,
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

impl RecombinationPlan {
    pub fn new(granularity: Granularity, permutations: Vec<Vec<usize>>) -> Result<Self> {
        let k = permutations.first().map_or(0, Vec::len);
        for (g, p) in permutations.iter().enumerate() {
            if p.len() != k || !is_permutation(p) {
                return Err(Error::PlanShape(format!(
                    "group {g} is not a permutation of 0..{k}: {p:?}"
                )));
            }
        }
        Ok(Self {
            granularity,
            permutations,
        })
    }

    pub fn identity(granularity: Granularity, k: usize, n_layers: usize) -> Self {
        Self {
            granularity,
            permutations: vec![(0..k).collect(); granularity.group_count(n_layers)],
        }
    }

    pub fn population(&self) -> usize {
        self.permutations.first().map_or(0, Vec::len)
    }

    /// The single plan equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &RecombinationPlan) -> Result<RecombinationPlan> {
        if self.granularity != next.granularity
            || self.permutations.len() != next.permutations.len()
            || self.population() != next.population()
        {
            return Err(Error::PlanShape("plans are not composable".into()));
        }
        let permutations = self
            .permutations
            .iter()
            .zip(&next.permutations)
            .map(|(first, second)| second.iter().map(|&j| first[j]).collect())
            .collect();
        Ok(RecombinationPlan {
            granularity: self.granularity,
            permutations,
        })
    }
}

/// Draws one Fisher–Yates permutation of `0..k` per layer group.
pub fn sample_plan(
    k: usize,
    granularity: Granularity,
    n_layers: usize,
    seed: u64,
) -> Result<RecombinationPlan> {
    if k == 0 {
        return Err(Error::EmptyPopulation);
    }
    if n_layers == 0 {
        return Err(Error::PlanShape("model has no layers".into()));
    }
    let mut rng = rng::rng_from_seed(seed);
    let permutations = (0..granularity.group_count(n_layers))
        .map(|_| {
            let mut p: Vec<usize> = (0..k).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    Ok(RecombinationPlan {
        granularity,
        permutations,
    })
}

pub fn recombine(models: &ModelList, plan: &RecombinationPlan) -> Result<ModelList> {
    let k = models.len();
    if k == 0 {
        return Err(Error::EmptyPopulation);
    }
    let n_layers = models[0].num_layers();
    let groups = plan.granularity.groups(n_layers);
    if plan.permutations.len() != groups.len() {
        return Err(Error::PlanShape(format!(
            "plan has {} permutations, architecture has {} layer groups",
            plan.permutations.len(),
            groups.len()
        )));
    }
    if plan.population() != k {
        return Err(Error::PlanShape(format!(
            "plan permutes {} models, list holds {k}",
            plan.population()
        )));
    }

    let mut out: Vec<LayeredModel> = (0..k)
        .map(|_| LayeredModel {
            arch_id: models[0].arch_id,
            layers: Vec::with_capacity(n_layers),
        })
        .collect();
    for (range, perm) in groups.iter().zip(&plan.permutations) {
        for (j, target) in out.iter_mut().enumerate() {
            let source = &models[perm[j]];
            target
                .layers
                .extend(source.layers[range.clone()].iter().cloned());
        }
    }
    ModelList::new(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    /// Max absolute elementwise difference between the two model sums.
    pub sum_gap: f64,
    /// Relative gap between the squared-distance sums to the reference.
    pub sqdist_gap: f64,
}

impl Lemma1Report {
    pub const SUM_TOLERANCE: f64 = 1e-9;
    pub const SQDIST_TOLERANCE: f64 = 1e-12;

    pub fn holds(&self) -> bool {
        self.sum_gap <= Self::SUM_TOLERANCE && self.sqdist_gap <= Self::SQDIST_TOLERANCE
    }
}

/// Compares the conserved quantities of two model lists: the elementwise sum
/// and the sum of squared distances to `x`.
pub fn check_lemma1(before: &ModelList, after: &ModelList, x: &LayeredModel) -> Result<Lemma1Report> {
    if before.len() != after.len() {
        return Err(Error::ShapeMismatch(format!(
            "lists hold {} and {} models",
            before.len(),
            after.len()
        )));
    }
    let sb = model::sum_models(before)?;
    let sa = model::sum_models(after)?;
    sb.ensure_same_arch(&sa)?;
    let sum_gap = sb
        .values()
        .zip(sa.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let db = model::sq_distance_sum(before, x)?;
    let da = model::sq_distance_sum(after, x)?;
    Ok(Lemma1Report {
        sum_gap,
        sqdist_gap: (db - da).abs() / db.max(1.0),
    })
}
