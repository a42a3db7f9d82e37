//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use fedmr_core::data::{self, BlobSpec, ClientShard, Dataset, PartitionMode, PartitionSpec, Sample};
use fedmr_core::metrics;
use fedmr_core::model::{self, LayeredModel, ModelList};
use fedmr_core::orchestrator::{self, RunConfig, Strategy};
use fedmr_core::recombine::{self, Granularity};
use fedmr_core::rng::rng_from_seed;
use fedmr_core::secure::{self, DeliveryPolicy, SecureConfig, TaggingSealer};
use fedmr_core::train::{self, LocalTrainConfig};
use fedmr_core::verify;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() <= budget_s
}

/// Plain left-to-right elementwise sum; independent of the library reductions.
fn naive_sum(models: &ModelList) -> Vec<f64> {
    let mut acc = vec![0.0; models[0].num_params()];
    for m in models.iter() {
        for (a, v) in acc.iter_mut().zip(m.values()) {
            *a += v;
        }
    }
    acc
}

fn naive_sqdist(models: &ModelList, x: &LayeredModel) -> f64 {
    models
        .iter()
        .map(|m| m.values().zip(x.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

fn lemma1_cases() -> Vec<(ModelList, ModelList, LayeredModel)> {
    let mut rng = rng_from_seed(1);
    (0..200)
        .map(|case| {
            let k = rng.random_range(2..=20);
            let layers = rng.random_range(2..=12);
            let before = verify::random_model_list(&mut rng, k, layers);
            let granularity = if case % 2 == 0 {
                Granularity::PerLayer
            } else {
                Granularity::from_fraction(rng.random_range(0.05..=1.0)).unwrap()
            };
            let plan = recombine::sample_plan(k, granularity, layers, rng.random()).unwrap();
            let after = recombine::recombine(&before, &plan).unwrap();
            let x = before[k - 1].map_values(|i, v| v * 0.3 - i as f64 * 1e-3);
            (before, after, x)
        })
        .collect()
}

fn c1_lemma1() -> Outcome {
    let start = Instant::now();
    let (mut sum_gap, mut sq_gap) = (0.0f64, 0.0f64);
    for (before, after, x) in lemma1_cases() {
        for (a, b) in naive_sum(&before).iter().zip(naive_sum(&after)) {
            sum_gap = sum_gap.max((a - b).abs());
        }
        let (sa, sb) = (naive_sqdist(&before, &x), naive_sqdist(&after, &x));
        sq_gap = sq_gap.max((sa - sb).abs() / sa.abs().max(f64::MIN_POSITIVE));
    }
    let t = start.elapsed();
    outcome(
        sum_gap <= 1e-9 && sq_gap <= 1e-12 && within(t, 10.0),
        format!("max sum gap {sum_gap:.2e}, max sqdist rel gap {sq_gap:.2e}, {:.2}s", t.as_secs_f64()),
    )
}

fn c2_aggregate_invariance() -> Outcome {
    let mut gap = 0.0f64;
    for (before, after, _) in lemma1_cases() {
        let a = model::aggregate_mean(&before).unwrap();
        let b = model::aggregate_mean(&after).unwrap();
        for (x, y) in a.values().zip(b.values()) {
            gap = gap.max((x - y).abs());
        }
    }
    outcome(gap <= 1e-9, format!("max aggregate_mean gap {gap:.2e} over 200 cases"))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(3);
    let h = verify::GRADCHECK_STEP;
    let mut worst = 0.0f64;
    let mut params = 0;
    for _ in 0..20 {
        let (net, batch) = verify::random_net_and_batch(&mut rng).unwrap();
        let analytic = train::backward(&net, &batch).unwrap().flatten();
        let base = net.flatten();
        let loss_at = |flat: &[f64]| train::forward(&net.unflatten(flat).unwrap(), &batch).unwrap().loss;
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + h;
            let plus = loss_at(&probe);
            probe[i] = base[i] - h;
            let minus = loss_at(&probe);
            probe[i] = base[i];
            let numeric = (plus - minus) / (2.0 * h);
            let err = train::relative_error(analytic[i], numeric, verify::GRADCHECK_FLOOR);
            worst = worst.max(err);
            params += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-5 && within(t, 30.0),
        format!("max relative error {worst:.2e} over {params} parameters, {:.2}s", t.as_secs_f64()),
    )
}

/// Minibatch SGD with momentum written out directly against the gradient.
fn direct_sgd(start: &LayeredModel, shard: &ClientShard, cfg: &LocalTrainConfig, seed: u64) -> LayeredModel {
    let mut w = start.flatten();
    let mut v = vec![0.0; w.len()];
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..shard.samples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &shard.samples[i]).collect();
            let g = train::backward(&start.unflatten(&w).unwrap(), &batch).unwrap().flatten();
            for i in 0..w.len() {
                v[i] = cfg.momentum * v[i] + g[i];
                w[i] -= cfg.lr * v[i];
            }
        }
    }
    start.unflatten(&w).unwrap()
}

fn c4_centralized() -> Outcome {
    let ds = blobs(4, 60, 2.0);
    let shard = data::partition(
        &ds,
        &PartitionSpec {
            num_clients: 1,
            mode: PartitionMode::Iid,
            min_shard_size: 1,
            seed: 4,
        },
    )
    .unwrap()
    .remove(0);
    let cfg = RunConfig {
        name: "centralized".into(),
        rounds: 50,
        population: 1,
        active: 1,
        strategy: Strategy::FedAvg,
        granularity: None,
        stage_switch: 0,
        hidden: vec![16, 16],
        local: LocalTrainConfig {
            epochs: 1,
            batch_size: 32,
            ..Default::default()
        },
        eval_every: 1,
        seed: 4,
    };
    let mut trajectory = Vec::new();
    orchestrator::run_with_observer(&cfg, std::slice::from_ref(&shard), &ds.test, |_, g| {
        trajectory.push(g.clone());
        Ok(())
    })
    .unwrap();

    let arch = train::ArchitectureSpec::mlp(ds.dim, &cfg.hidden, ds.num_classes).unwrap();
    let mut w = model::init_model(&arch, orchestrator::init_seed(cfg.seed, 0)).unwrap();
    let mut mismatched = 0;
    for (round, got) in (1..=cfg.rounds).zip(&trajectory) {
        w = direct_sgd(&w, &shard, &cfg.local, orchestrator::local_seed(cfg.seed, round, &shard));
        let same = w.values().zip(got.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        mismatched += usize::from(!same);
    }
    outcome(
        trajectory.len() == 50 && mismatched == 0,
        format!("{} rounds compared, {mismatched} differ bitwise", trajectory.len()),
    )
}

fn blobs(seed: u64, per_class: usize, spread: f64) -> Dataset {
    data::make_blobs(&BlobSpec {
        num_classes: 10,
        dim: 32,
        per_class,
        spread,
        seed,
    })
    .unwrap()
}

const DESK_SEEDS: u64 = 5;
const DESK_SPREAD: f64 = 2.0;

struct DeskResults {
    fedavg: Vec<f64>,
    fedmr: Vec<f64>,
    indep_aggr: Vec<f64>,
    elapsed: Duration,
}

fn desk_config(strategy: Strategy, stage_switch: usize, seed: u64) -> RunConfig {
    RunConfig {
        name: strategy.name().into(),
        rounds: 200,
        population: 50,
        active: 5,
        strategy,
        granularity: None,
        stage_switch,
        hidden: vec![64, 64, 64],
        local: LocalTrainConfig::default(),
        eval_every: 200,
        seed,
    }
}

fn desk_scale() -> DeskResults {
    let start = Instant::now();
    let mut r = DeskResults {
        fedavg: Vec::new(),
        fedmr: Vec::new(),
        indep_aggr: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for seed in 0..DESK_SEEDS {
        let ds = blobs(seed, 400, DESK_SPREAD);
        let shards = data::partition(
            &ds,
            &PartitionSpec {
                num_clients: 50,
                mode: PartitionMode::Dirichlet { alpha: 0.1 },
                min_shard_size: 10,
                seed,
            },
        )
        .unwrap();
        let final_acc = |cfg: RunConfig| {
            orchestrator::run(&cfg, &shards, &ds.test).unwrap().records.last().unwrap().global_acc
        };
        r.fedavg.push(final_acc(desk_config(Strategy::FedAvg, 0, seed)));
        r.fedmr.push(final_acc(desk_config(Strategy::FedMr, 20, seed)));
        r.indep_aggr.push(final_acc(desk_config(Strategy::Indep, 0, seed)));
    }
    r.elapsed = start.elapsed();
    r
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c5_direction(r: &DeskResults) -> Outcome {
    let (mr, avg) = (mean(&r.fedmr), mean(&r.fedavg));
    let worst = r.fedmr.iter().zip(&r.fedavg).map(|(m, a)| m - a).fold(f64::INFINITY, f64::min);
    outcome(
        mr >= avg && worst >= -0.005 && within(r.elapsed, 900.0),
        format!(
            "FedMR {:.2}% vs FedAvg {:.2}%, worst seed gap {:+.2} pp, {:.0}s for all strategies",
            100.0 * mr,
            100.0 * avg,
            100.0 * worst,
            r.elapsed.as_secs_f64()
        ),
    )
}

fn c6_indep_aggr(r: &DeskResults) -> Outcome {
    let gap = mean(&r.fedmr) - mean(&r.indep_aggr);
    outcome(
        gap >= 0.05,
        format!("IndepAggr {:.2}% vs FedMR {:.2}% ({:.2} pp below)", 100.0 * mean(&r.indep_aggr), 100.0 * mean(&r.fedmr), 100.0 * gap),
    )
}

fn c7_two_stage() -> Outcome {
    let ds = blobs(7, 60, 2.0);
    let shards = data::partition(
        &ds,
        &PartitionSpec {
            num_clients: 10,
            mode: PartitionMode::Dirichlet { alpha: 0.5 },
            min_shard_size: 10,
            seed: 7,
        },
    )
    .unwrap();
    let cfg = |strategy, stage_switch| RunConfig {
        name: String::new(),
        rounds: 12,
        population: 10,
        active: 4,
        strategy,
        granularity: None,
        stage_switch,
        hidden: vec![16],
        local: LocalTrainConfig {
            epochs: 1,
            ..Default::default()
        },
        eval_every: 1,
        seed: 7,
    };
    let csv = |c: RunConfig| metrics::csv_string(&orchestrator::run(&c, &shards, &ds.test).unwrap().records).unwrap();
    let a = csv(cfg(Strategy::FedMr, 12));
    let b = csv(cfg(Strategy::FedAvg, 0));
    outcome(a == b, format!("{} vs {} CSV bytes, identical: {}", a.len(), b.len(), a == b))
}

fn c8_secure_conservation() -> Outcome {
    let mut rng = rng_from_seed(8);
    let mut failures = 0;
    for _ in 0..500 {
        let r = verify::random_secure_run(&mut rng).unwrap();
        failures += usize::from(!(r.multiset_ok && r.one_per_index && r.balanced));
    }
    outcome(failures == 0, format!("{failures} of 500 randomized runs violated an invariant"))
}

fn c9_secure_traffic() -> Outcome {
    let start = Instant::now();
    let arch = LayeredModel::zeros(&vec![vec![32]; 8]).unwrap();
    let list = ModelList::replicate(&arch, 4);
    let cfg = SecureConfig {
        repeats: 10_000,
        n_low: 1,
        n_high: 3,
        seed: 9,
    };
    let out = secure::secure_recombine(&list, &cfg, DeliveryPolicy::Fifo, &TaggingSealer).unwrap();
    let measured = out.report.total_bytes() as f64 / cfg.repeats as f64;
    let per_rep = SecureConfig { repeats: 1, ..cfg.clone() };
    let expected = secure::expected_overhead(&per_rep, 4, &arch);
    // (n_u + n_l) K / len(w) * size(w) = 4 * 4 / 8 * size(w).
    let closed_form = 2.0 * arch.byte_size() as f64;
    let rel = (measured - expected).abs() / expected;
    let t = start.elapsed();
    outcome(
        rel <= 0.03 && expected == closed_form && within(t, 60.0),
        format!("mean {measured:.1} B vs expected {expected:.1} B per repetition ({:.2}%), {:.2}s", 100.0 * rel, t.as_secs_f64()),
    )
}

fn c10_heterogeneity() -> Outcome {
    let ds = blobs(10, 400, 2.0);
    let modes = [
        PartitionMode::Dirichlet { alpha: 0.1 },
        PartitionMode::Dirichlet { alpha: 1.0 },
        PartitionMode::Iid,
    ];
    let entropies: Vec<Vec<f64>> = modes
        .iter()
        .map(|&mode| (0..50).map(|s| verify::mean_entropy(&ds, mode, 50, s).unwrap()).collect())
        .collect();
    let (g1, s1) = verify::gap_and_spread(&entropies[0], &entropies[1]);
    let (g2, s2) = verify::gap_and_spread(&entropies[1], &entropies[2]);
    outcome(
        g1 > 3.0 * s1 && g2 > 3.0 * s2,
        format!(
            "mean entropy {:.3} < {:.3} < {:.3} nats; gaps {:.1} and {:.1} spreads",
            mean(&entropies[0]),
            mean(&entropies[1]),
            mean(&entropies[2]),
            g1 / s1,
            g2 / s2
        ),
    )
}

fn c11_cosine() -> Outcome {
    let mut rng = rng_from_seed(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(2..=8);
        let layers = rng.random_range(1..=6);
        let list = verify::random_model_list(&mut rng, k, layers);
        let flat: Vec<Vec<f64>> = list.iter().map(|m| m.flatten()).collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..k {
            for j in 0..k {
                if i < j {
                    let d: f64 = flat[i].iter().zip(&flat[j]).map(|(a, b)| a * b).sum();
                    let ni: f64 = flat[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nj: f64 = flat[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                    total += d / (ni * nj);
                    pairs += 1;
                }
            }
        }
        let got = model::pairwise_cosine_mean(&list).unwrap();
        worst = worst.max((got - total / pairs as f64).abs());
    }
    outcome(worst <= 1e-12, format!("max deviation from brute force {worst:.2e} over 200 lists"))
}

fn main() -> ExitCode {
    // Accept and ignore libtest flags such as --nocapture.
    let desk = desk_scale();
    let results = [
        ("1  lemma1 conservation", c1_lemma1()),
        ("2  aggregate invariance", c2_aggregate_invariance()),
        ("3  gradient correctness", c3_gradients()),
        ("4  centralized equivalence", c4_centralized()),
        ("5  direction of effect", c5_direction(&desk)),
        ("6  IndepAggr degradation", c6_indep_aggr(&desk)),
        ("7  two-stage degeneration", c7_two_stage()),
        ("8  secure conservation", c8_secure_conservation()),
        ("9  secure traffic", c9_secure_traffic()),
        ("10 heterogeneity ordering", c10_heterogeneity()),
        ("11 cosine diagnostic", c11_cosine()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        println!("criterion {name:<28} {}  {}", if r.passed { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
