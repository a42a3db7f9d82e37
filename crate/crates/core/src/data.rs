//! Synthetic datasets and client partitioning.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Distance of every class center from the origin.
pub const CENTER_SCALE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_classes: usize,
    pub dim: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// FNV-1a over every feature bit pattern and label, train then test.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.num_classes as u64);
        feed(self.dim as u64);
        for s in self.train.iter().chain(&self.test) {
            feed(s.label as u64);
            for f in &s.features {
                feed(f.to_bits());
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of the isotropic noise around each center.
    pub spread: f64,
    pub seed: u64,
}

/// Unit-norm vertices of a regular simplex with `classes` vertices, embedded in
/// the first `classes - 1` coordinates of `dim`-space.
pub fn simplex_centers(classes: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if classes == 0 || dim == 0 || dim + 1 < classes {
        return Err(Error::InfeasibleCenters { classes, dim });
    }
    if classes == 1 {
        let mut c = vec![0.0; dim];
        c[0] = 1.0;
        return Ok(vec![c]);
    }
    // Coordinates in the Helmert basis of the hyperplane orthogonal to (1, ..., 1).
    let norm = (1.0 - 1.0 / classes as f64).sqrt();
    Ok((0..classes)
        .map(|i| {
            let mut c = vec![0.0; dim];
            for k in 1..classes {
                let scale = 1.0 / ((k * (k + 1)) as f64).sqrt();
                c[k - 1] = if i < k {
                    scale
                } else if i == k {
                    -(k as f64) * scale
                } else {
                    0.0
                } / norm;
            }
            c
        })
        .collect())
}

/// Gaussian blobs around scaled simplex vertices, split 80/20 per class.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.dim == 0 || spec.per_class == 0 {
        return Err(Error::config("dataset", "counts must be at least 1"));
    }
    if !(spec.spread > 0.0 && spec.spread.is_finite()) {
        return Err(Error::config("dataset.spread", "must be positive and finite"));
    }
    let centers = simplex_centers(spec.num_classes, spec.dim)?;
    let mut rng = rng::rng_for(spec.seed, &[stream::DATA]);
    let n_test = spec.per_class / 5;
    let mut train = Vec::with_capacity(spec.num_classes * (spec.per_class - n_test));
    let mut test = Vec::with_capacity(spec.num_classes * n_test);
    for (label, center) in centers.iter().enumerate() {
        for i in 0..spec.per_class {
            let features = center
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    CENTER_SCALE * c + spec.spread * z
                })
                .collect();
            let s = Sample { features, label };
            if i < spec.per_class - n_test {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        dim: spec.dim,
        train,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub mode: PartitionMode,
    #[serde(default = "PartitionSpec::default_min_shard")]
    pub min_shard_size: usize,
    pub seed: u64,
}

impl PartitionSpec {
    /// Twice the default local batch size.
    pub const DEFAULT_MIN_SHARD: usize = 100;

    fn default_min_shard() -> usize {
        Self::DEFAULT_MIN_SHARD
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("partition.num_clients", "must be at least 1"));
        }
        if let PartitionMode::Dirichlet { alpha } = self.mode {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::config(
                    "partition.mode.alpha",
                    format!("must be positive and finite, got {alpha}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    /// Positions in the training split, ascending.
    pub indices: Vec<usize>,
    pub samples: Vec<Sample>,
    pub class_histogram: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Rounds `weights * total` to integers summing to `total`: floors first, then
/// one extra unit to the largest remainders (lower index wins ties).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws `p ~ Dir(alpha * 1_n)` by normalising independent Gamma(alpha, 1)
/// variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter_mut().for_each(|d| *d /= sum);
    } else {
        // Every variate underflowed; the limit of Dir(alpha -> 0) is a random vertex.
        let hit = rng.random_range(0..n);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = f64::from(u8::from(i == hit)));
    }
    draws
}

pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    spec.validate()?;
    let n_train = dataset.train.len();
    let n = spec.num_clients;
    if n_train == 0 || n > n_train {
        return Err(Error::InfeasiblePartition {
            clients: n,
            samples: n_train,
        });
    }
    let mut rng = rng::rng_for(spec.seed, &[stream::PARTITION]);
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n];

    match spec.mode {
        PartitionMode::Iid => {
            for i in 0..n_train {
                owners[rng.random_range(0..n)].push(i);
            }
        }
        PartitionMode::Dirichlet { alpha } => {
            for class in 0..dataset.num_classes {
                let mut members: Vec<usize> = (0..n_train)
                    .filter(|&i| dataset.train[i].label == class)
                    .collect();
                members.shuffle(&mut rng);
                let p = sample_dirichlet(alpha, n, &mut rng);
                let counts = largest_remainder(&p, members.len());
                let mut rest = members.as_slice();
                for (client, &c) in counts.iter().enumerate() {
                    let (take, tail) = rest.split_at(c);
                    owners[client].extend_from_slice(take);
                    rest = tail;
                }
            }
        }
    }

    let min_size = spec.min_shard_size.min(n_train / n).max(1);
    if min_size < spec.min_shard_size {
        log::warn!(
            "min_shard_size {} infeasible for {n_train} samples over {n} clients; using {min_size}",
            spec.min_shard_size
        );
    }
    while let Some(small) = (0..n).find(|&c| owners[c].len() < min_size) {
        let largest = (0..n)
            .max_by(|&a, &b| owners[a].len().cmp(&owners[b].len()).then(b.cmp(&a)))
            .expect("n >= 1");
        let pos = rng.random_range(0..owners[largest].len());
        let moved = owners[largest].swap_remove(pos);
        owners[small].push(moved);
    }

    Ok(owners
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            let samples: Vec<Sample> = indices.iter().map(|&i| dataset.train[i].clone()).collect();
            let mut class_histogram = vec![0; dataset.num_classes];
            for s in &samples {
                class_histogram[s.label] += 1;
            }
            ClientShard {
                client_id,
                indices,
                samples,
                class_histogram,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    /// Label entropy of each client, in nats.
    pub entropy: Vec<f64>,
    /// Earth mover's distance of each client's label distribution to the
    /// global one, under unit ground distance between distinct classes
    /// (equal to total variation).
    pub emd: Vec<f64>,
    pub mean_entropy: f64,
    pub mean_emd: f64,
}

fn normalized(hist: &[usize]) -> Vec<f64> {
    let total: usize = hist.iter().sum();
    hist.iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

pub fn label_entropy(hist: &[usize]) -> f64 {
    -normalized(hist)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

pub fn heterogeneity_report(shards: &[ClientShard]) -> HeterogeneityReport {
    let classes = shards.iter().map(|s| s.class_histogram.len()).max().unwrap_or(0);
    let mut global = vec![0usize; classes];
    for s in shards {
        for (g, &c) in global.iter_mut().zip(&s.class_histogram) {
            *g += c;
        }
    }
    let global = normalized(&global);
    let entropy: Vec<f64> = shards.iter().map(|s| label_entropy(&s.class_histogram)).collect();
    let emd: Vec<f64> = shards
        .iter()
        .map(|s| {
            0.5 * normalized(&s.class_histogram)
                .iter()
                .zip(&global)
                .map(|(p, q)| (p - q).abs())
                .sum::<f64>()
        })
        .collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    HeterogeneityReport {
        mean_entropy: mean(&entropy),
        mean_emd: mean(&emd),
        entropy,
        emd,
    }
}

#[derive(Serialize)]
struct SampleLine<'a> {
    split: &'static str,
    index: usize,
    label: usize,
    features: &'a [f64],
}

/// One JSON object per line: `{"split", "index", "label", "features"}`.
pub fn write_dataset_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for (index, s) in samples.iter().enumerate() {
            serde_json::to_writer(
                &mut w,
                &SampleLine {
                    split,
                    index,
                    label: s.label,
                    features: &s.features,
                },
            )?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn partition_map(shards: &[ClientShard]) -> BTreeMap<usize, Vec<usize>> {
    shards.iter().map(|s| (s.client_id, s.indices.clone())).collect()
}

/// Rebuilds shards from a saved partition map.
pub fn shards_from_map(dataset: &Dataset, map: &BTreeMap<usize, Vec<usize>>) -> Result<Vec<ClientShard>> {
    map.iter()
        .map(|(&client_id, indices)| {
            let samples = indices
                .iter()
                .map(|&i| {
                    dataset.train.get(i).cloned().ok_or_else(|| {
                        Error::config("partition_map", format!("index {i} out of range"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut class_histogram = vec![0; dataset.num_classes];
            for s in &samples {
                class_histogram[s.label] += 1;
            }
            Ok(ClientShard {
                client_id,
                indices: indices.clone(),
                samples,
                class_histogram,
            })
        })
        .collect()
}
