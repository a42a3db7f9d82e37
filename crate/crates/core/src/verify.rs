//! Fixed-seed property suites, runnable from the CLI.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, BlobSpec, PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::{self, LayeredModel, ModelList};
use crate::recombine::{self, Granularity, Lemma1Report};
use crate::rng::{self, SimRng};
use crate::secure::{self, ClientProtocolState, DeliveryPolicy, MessageBus, SecureConfig, TaggingSealer};
use crate::train::{self, ArchitectureSpec};

const SUITE_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Lemma1,
    Gradcheck,
    Secure,
    Partition,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Lemma1, Suite::Gradcheck, Suite::Secure, Suite::Partition];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Lemma1 => "lemma1",
            Suite::Gradcheck => "gradcheck",
            Suite::Secure => "secure",
            Suite::Partition => "partition",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub observed: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckResult {
    fn at_most(name: &str, observed: f64, tolerance: f64, cases: usize) -> Self {
        Self {
            name: name.into(),
            passed: observed <= tolerance,
            observed,
            tolerance,
            cases,
        }
    }

    fn exact(name: &str, failures: usize, cases: usize) -> Self {
        Self::at_most(name, failures as f64, 0.0, cases)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn new(suite: Suite, checks: Vec<CheckResult>) -> Self {
        Self {
            suite,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    match suite {
        Suite::Lemma1 => lemma1_suite(200, SUITE_SEED),
        Suite::Gradcheck => gradcheck_suite(20, SUITE_SEED),
        Suite::Secure => secure_suite(200, SUITE_SEED),
        Suite::Partition => partition_suite(20, SUITE_SEED),
    }
}

/// A list of `k` models with `layers` blocks of random small shapes.
pub fn random_model_list(rng: &mut SimRng, k: usize, layers: usize) -> ModelList {
    let shapes: Vec<Vec<usize>> = (0..layers)
        .map(|_| {
            if rng.random_bool(0.5) {
                vec![rng.random_range(1..=6)]
            } else {
                vec![rng.random_range(1..=4), rng.random_range(1..=4)]
            }
        })
        .collect();
    let scale = 10f64.powi(rng.random_range(-2..=3));
    let template = LayeredModel::zeros(&shapes).expect("valid shapes");
    ModelList::new(
        (0..k)
            .map(|_| template.map_values(|_, _| scale * rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .expect("shared architecture")
}

fn random_granularity(rng: &mut SimRng) -> Result<Granularity> {
    if rng.random_bool(0.5) {
        Ok(Granularity::PerLayer)
    } else {
        Granularity::from_fraction(rng.random_range(0.05..=1.0))
    }
}

pub fn lemma1_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng::rng_from_seed(seed);
    let mut worst = Lemma1Report {
        sum_gap: 0.0,
        sqdist_gap: 0.0,
    };
    let mut mean_gap: f64 = 0.0;
    for case in 0..cases {
        let k = rng.random_range(2..=20);
        let layers = rng.random_range(2..=12);
        let before = random_model_list(&mut rng, k, layers);
        let x = before[0].map_values(|_, v| v * 0.5 + 0.25);
        let plan = recombine::sample_plan(k, random_granularity(&mut rng)?, layers, seed ^ case as u64)?;
        let after = recombine::recombine(&before, &plan)?;
        let r = recombine::check_lemma1(&before, &after, &x)?;
        worst.sum_gap = worst.sum_gap.max(r.sum_gap);
        worst.sqdist_gap = worst.sqdist_gap.max(r.sqdist_gap);
        let ma = model::aggregate_mean(&before)?;
        let mb = model::aggregate_mean(&after)?;
        for (a, b) in ma.values().zip(mb.values()) {
            mean_gap = mean_gap.max((a - b).abs());
        }
    }
    Ok(SuiteReport::new(
        Suite::Lemma1,
        vec![
            CheckResult::at_most("sum_gap", worst.sum_gap, Lemma1Report::SUM_TOLERANCE, cases),
            CheckResult::at_most("sqdist_rel_gap", worst.sqdist_gap, Lemma1Report::SQDIST_TOLERANCE, cases),
            CheckResult::at_most("aggregate_mean_gap", mean_gap, 1e-9, cases),
        ],
    ))
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// A random MLP with 0..=3 hidden layers, random biases, and a labelled batch.
pub fn random_net_and_batch(rng: &mut SimRng) -> Result<(LayeredModel, Vec<data::Sample>)> {
    let input = rng.random_range(2..=6);
    let classes = rng.random_range(2..=5);
    let hidden: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(2..=8)).collect();
    let arch = ArchitectureSpec::mlp(input, &hidden, classes)?;
    let mut net = model::init_model(&arch, rng.random())?;
    // Zero biases can park a unit exactly on its ReLU kink, where the loss
    // has no derivative to check.
    for li in (1..net.num_layers()).step_by(2) {
        for b in net.layer_mut(li).values.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let batch = (0..rng.random_range(1..=8))
        .map(|_| data::Sample {
            features: (0..input).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..classes),
        })
        .collect();
    Ok((net, batch))
}

pub fn gradcheck_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng::rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..cases {
        let (net, batch) = random_net_and_batch(&mut rng)?;
        let r = train::gradient_check(&net, &batch, GRADCHECK_STEP, GRADCHECK_FLOOR)?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    Ok(SuiteReport::new(
        Suite::Gradcheck,
        vec![
            CheckResult::at_most("max_rel_error", worst, GRADCHECK_TOLERANCE, cases),
            CheckResult {
                name: "parameters_checked".into(),
                passed: checked > 0,
                observed: checked as f64,
                tolerance: 1.0,
                cases,
            },
        ],
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SecureRunCheck {
    pub multiset_ok: bool,
    pub one_per_index: bool,
    pub balanced: bool,
}

/// One randomized exchange: K in 2..=10, r_s in 1..=3, random bounds, with
/// either delivery policy.
pub fn random_secure_run(rng: &mut SimRng) -> Result<SecureRunCheck> {
    let k = rng.random_range(2..=10);
    let layers = rng.random_range(1..=8);
    let list = random_model_list(rng, k, layers);
    let n_high = rng.random_range(0..=layers);
    let cfg = SecureConfig {
        repeats: rng.random_range(1..=3),
        n_low: rng.random_range(0..=n_high),
        n_high,
        seed: rng.random(),
    };
    let policy = if rng.random_bool(0.5) {
        DeliveryPolicy::Fifo
    } else {
        DeliveryPolicy::Shuffled { seed: rng.random() }
    };
    let mut nonce = 0;
    let mut clients: Vec<ClientProtocolState> = list
        .iter()
        .enumerate()
        .map(|(i, m)| ClientProtocolState::from_model(i, m, &TaggingSealer, &mut nonce))
        .collect();
    let multisets = |clients: &[ClientProtocolState]| -> Vec<Vec<u64>> {
        (0..layers)
            .map(|i| {
                let mut v: Vec<u64> = clients
                    .iter()
                    .flat_map(|c| c.layer_buffers[i].iter().map(|l| l.nonce))
                    .collect();
                v.sort_unstable();
                v
            })
            .collect()
    };
    let before = multisets(&clients);
    let mut bus = MessageBus::new(policy);
    let report = secure::secure_round(&mut clients, &cfg, &mut bus)?;
    let sends = bus.trace().iter().filter(|e| e.kind == secure::MessageKind::Send).count();
    let returns = bus.trace().len() - sends;
    Ok(SecureRunCheck {
        multiset_ok: multisets(&clients) == before,
        one_per_index: clients.iter().all(|c| c.layer_buffers.iter().all(|b| b.len() == 1)),
        balanced: sends == returns && report.total_messages() == sends + returns,
    })
}

pub fn secure_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = rng::rng_from_seed(seed);
    let mut failures = [0usize; 3];
    for _ in 0..cases {
        let r = random_secure_run(&mut rng)?;
        failures[0] += usize::from(!r.multiset_ok);
        failures[1] += usize::from(!r.one_per_index);
        failures[2] += usize::from(!r.balanced);
    }

    // Expected traffic on equal-size layers.
    let arch = LayeredModel::zeros(&vec![vec![16]; 8])?;
    let list = ModelList::replicate(&arch, 4);
    let cfg = SecureConfig {
        repeats: 2000,
        n_low: 1,
        n_high: 3,
        seed,
    };
    let out = secure::secure_recombine(&list, &cfg, DeliveryPolicy::Fifo, &TaggingSealer)?;
    let expected = secure::expected_overhead(&cfg, 4, &arch);
    let traffic_gap = (out.report.total_bytes() as f64 - expected).abs() / expected;

    let honest_only = secure::collusion_probe(&out.trace, &BTreeSet::new()).max_identifiable;

    Ok(SuiteReport::new(
        Suite::Secure,
        vec![
            CheckResult::exact("nonce_multiset_conserved", failures[0], cases),
            CheckResult::exact("one_layer_per_index", failures[1], cases),
            CheckResult::exact("send_return_balance", failures[2], cases),
            CheckResult::at_most("traffic_rel_gap", traffic_gap, 0.03, 1),
            CheckResult::exact("no_colluders_no_leak", honest_only, 1),
        ],
    ))
}

/// Mean per-client label entropy of one partition of the standard blob set.
pub fn mean_entropy(dataset: &data::Dataset, mode: PartitionMode, clients: usize, seed: u64) -> Result<f64> {
    let shards = data::partition(
        dataset,
        &PartitionSpec {
            num_clients: clients,
            mode,
            min_shard_size: 10,
            seed,
        },
    )?;
    Ok(data::heterogeneity_report(&shards).mean_entropy)
}

pub fn partition_suite(seeds: usize, seed: u64) -> Result<SuiteReport> {
    let dataset = data::make_blobs(&BlobSpec {
        num_classes: 10,
        dim: 16,
        per_class: 200,
        spread: 1.0,
        seed,
    })?;
    let modes = [
        PartitionMode::Dirichlet { alpha: 0.1 },
        PartitionMode::Dirichlet { alpha: 1.0 },
        PartitionMode::Iid,
    ];
    let mut coverage_failures = 0;
    let mut entropies = vec![Vec::new(); modes.len()];
    for s in 0..seeds as u64 {
        for (m, mode) in modes.iter().enumerate() {
            let spec = PartitionSpec {
                num_clients: 20,
                mode: *mode,
                min_shard_size: 10,
                seed: seed.wrapping_add(s),
            };
            let shards = data::partition(&dataset, &spec)?;
            let mut all: Vec<usize> = shards.iter().flat_map(|c| c.indices.iter().copied()).collect();
            all.sort_unstable();
            let covered = all.len() == dataset.train.len() && all.iter().enumerate().all(|(i, &x)| i == x);
            let big_enough = shards.iter().all(|c| c.len() >= 10);
            coverage_failures += usize::from(!(covered && big_enough));
            entropies[m].push(data::heterogeneity_report(&shards).mean_entropy);
        }
    }
    let mut checks = vec![CheckResult::exact("disjoint_cover_and_min_size", coverage_failures, seeds * modes.len())];
    for (lo, hi, name) in [(0, 1, "entropy_alpha0.1_below_alpha1"), (1, 2, "entropy_alpha1_below_iid")] {
        let (gap, sd) = gap_and_spread(&entropies[lo], &entropies[hi]);
        // Observed is the gap in units of spread; it passes when above 3.
        checks.push(CheckResult {
            name: name.into(),
            passed: gap > 3.0 * sd,
            observed: if sd > 0.0 { gap / sd } else { f64::INFINITY },
            tolerance: 3.0,
            cases: seeds,
        });
    }
    Ok(SuiteReport::new(Suite::Partition, checks))
}

/// Mean of `hi - lo` and the larger of the two seed-wise standard deviations.
pub fn gap_and_spread(lo: &[f64], hi: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0)).sqrt()
    };
    (mean(hi) - mean(lo), sd(lo).max(sd(hi)))
}
