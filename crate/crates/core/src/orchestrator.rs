//! Server-side round loop.
//!
//! FedMR keeps a list of K models. Each round the i-th model goes to the
//! i-th selected client, the trained models come back into the same slot, and
//! the list is recombined layer-wise for the next round. FedAvg / FedProx keep
//! a single global model. Indep keeps K models and only permutes whole models.
//!
//! With a stage switch `n > 0`, FedMR and Indep first run `n` FedAvg rounds and
//! then seed the model list with K copies of the pre-trained global model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Sample};
use crate::error::{Error, Result};
use crate::model::{self, LayeredModel, ModelList};
use crate::recombine::{self, Granularity};
use crate::rng::{self, stream};
use crate::train::{self, ArchitectureSpec, LocalTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    FedMr,
    FedAvg,
    FedProx { mu: f64 },
    Indep,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedMr => "fedmr",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::Indep => "indep",
        }
    }

    fn keeps_model_list(&self) -> bool {
        matches!(self, Strategy::FedMr | Strategy::Indep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub rounds: usize,
    pub population: usize,
    pub active: usize,
    pub strategy: Strategy,
    /// Segment fraction `x` in (0, 1]; `None` recombines layer by layer.
    #[serde(default)]
    pub granularity: Option<f64>,
    /// FedAvg pre-training rounds before recombination starts.
    #[serde(default)]
    pub stage_switch: usize,
    /// Hidden widths of the MLP; input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub local: LocalTrainConfig,
    #[serde(default = "RunConfig::default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    fn default_eval_every() -> usize {
        1
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::config("population", "must be at least 1"));
        }
        if self.active == 0 || self.active > self.population {
            return Err(Error::config(
                "active",
                format!("K = {} must lie in [1, N = {}]", self.active, self.population),
            ));
        }
        if self.stage_switch > self.rounds {
            return Err(Error::config(
                "stage_switch",
                format!("n = {} exceeds rounds = {}", self.stage_switch, self.rounds),
            ));
        }
        if let Some(x) = self.granularity {
            if !(x > 0.0 && x <= 1.0) {
                return Err(Error::config("granularity", format!("x = {x} must lie in (0, 1]")));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if let Strategy::FedProx { mu } = self.strategy {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::config("strategy.mu", format!("must be finite and non-negative, got {mu}")));
            }
        }
        self.local.validate()
    }

    pub fn recombination_granularity(&self) -> Result<Granularity> {
        match (self.strategy, self.granularity) {
            (Strategy::Indep, _) => Ok(Granularity::Segments { count: 1 }),
            (_, Some(x)) => Granularity::from_fraction(x),
            (_, None) => Ok(Granularity::PerLayer),
        }
    }

    pub fn is_eval_round(&self, round: usize) -> bool {
        round.is_multiple_of(self.eval_every) || round == self.rounds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected_clients: Vec<usize>,
    /// Test metrics of the round's global model: the aggregate for FedAvg /
    /// FedProx, the mean of the model list for FedMR, and IndepAggr for Indep.
    pub global_loss: f64,
    pub global_acc: f64,
    /// Mean test accuracy of the K uploaded local models.
    pub local_acc_mean: f64,
    /// Mean pairwise cosine similarity of the uploaded models (NaN for K = 1).
    pub cosine_mean: f64,
    /// Largest sum-conservation gap of any recombination since the previous record.
    pub lemma1_sum_gap: f64,
    /// Cumulative parameter bytes uploaded / dispatched so far.
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_global: LayeredModel,
}

/// K distinct ids drawn uniformly without replacement from `0..n`.
pub fn sample_clients(n: usize, k: usize, seed: u64, round: usize) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::InvalidK { k, n });
    }
    let mut rng = rng::rng_for(seed, &[stream::SELECT, round as u64]);
    Ok(rand::seq::index::sample(&mut rng, n, k).into_vec())
}

/// Seed of a client's local-training stream in `round`, keyed by the shard's
/// sample indices. Disjoint shards get distinct streams; identical shards
/// train identically.
pub fn local_seed(run_seed: u64, round: usize, shard: &ClientShard) -> u64 {
    let key = shard
        .indices
        .iter()
        .fold(shard.indices.len() as u64, |h, &i| rng::derive_seed(h, &[i as u64]));
    rng::derive_seed(run_seed, &[stream::LOCAL, round as u64, key])
}

/// Seed of the initial model in list slot `slot`; slot 0 also seeds the
/// single global model.
pub fn init_seed(run_seed: u64, slot: usize) -> u64 {
    rng::derive_seed(run_seed, &[stream::INIT, slot as u64])
}

pub fn plan_seed(run_seed: u64, round: usize) -> u64 {
    rng::derive_seed(run_seed, &[stream::PLAN, round as u64])
}

/// The reported global model: the mean of the model list.
pub fn final_global(models: &ModelList) -> Result<LayeredModel> {
    let g = model::aggregate_mean(models)?;
    log::info!("final global model aggregated from {} models", models.len());
    Ok(g)
}

enum ServerState {
    Global(LayeredModel),
    List(ModelList),
}

fn sum_gap(before: &ModelList, after: &ModelList) -> Result<f64> {
    let a = model::sum_models(before)?;
    let b = model::sum_models(after)?;
    Ok(a.values().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

pub fn run(cfg: &RunConfig, shards: &[ClientShard], test_set: &[Sample]) -> Result<RunOutput> {
    run_with_observer(cfg, shards, test_set, |_, _| Ok(()))
}

/// Runs the configured strategy. `observer` sees every record together with
/// the global model it was computed from (checkpointing hooks in here).
pub fn run_with_observer(
    cfg: &RunConfig,
    shards: &[ClientShard],
    test_set: &[Sample],
    mut observer: impl FnMut(&RoundRecord, &LayeredModel) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if shards.len() != cfg.population {
        return Err(Error::config(
            "population",
            format!("N = {} but {} shards were supplied", cfg.population, shards.len()),
        ));
    }
    let first = shards
        .iter()
        .find_map(|s| s.samples.first())
        .ok_or(Error::EmptyShard { client: 0 })?;
    let classes = shards
        .iter()
        .map(|s| s.class_histogram.len())
        .max()
        .unwrap_or(0)
        .max(1);
    let arch = ArchitectureSpec::mlp(first.features.len(), &cfg.hidden, classes)?;
    let granularity = cfg.recombination_granularity()?;
    let k = cfg.active;
    let prox_mu = match cfg.strategy {
        Strategy::FedProx { mu } => mu,
        _ => 0.0,
    };

    let mut state = if cfg.strategy.keeps_model_list() && cfg.stage_switch == 0 {
        ServerState::List(ModelList::new(
            (0..k)
                .map(|slot| model::init_model(&arch, init_seed(cfg.seed, slot)))
                .collect::<Result<_>>()?,
        )?)
    } else {
        ServerState::Global(model::init_model(&arch, init_seed(cfg.seed, 0))?)
    };

    let model_bytes = arch
        .block_shapes()
        .iter()
        .map(|s| s.iter().product::<usize>() * std::mem::size_of::<f64>())
        .sum::<usize>() as u64;
    let (mut bytes_up, mut bytes_down) = (0u64, 0u64);
    let mut pending_gap = 0.0f64;
    let mut records = Vec::new();

    for round in 1..=cfg.rounds {
        if cfg.strategy.keeps_model_list() && round == cfg.stage_switch + 1 {
            if let ServerState::Global(g) = &state {
                log::info!("round {round}: switching to recombination with {k} copies of the pre-trained model");
                state = ServerState::List(ModelList::replicate(g, k));
            }
        }
        let selected = sample_clients(cfg.population, k, cfg.seed, round)?;

        let train_slot = |slot: usize, start: &LayeredModel, reference: Option<&LayeredModel>| {
            let client = selected[slot];
            let local = LocalTrainConfig {
                prox_mu,
                seed: local_seed(cfg.seed, round, &shards[client]),
                ..cfg.local.clone()
            };
            train::client_update(start, &shards[client], &local, reference).map_err(|e| Error::Client {
                round,
                client,
                source: Box::new(e),
            })
        };

        let (uploaded, next_state) = match &state {
            ServerState::Global(g) => {
                let reference = (prox_mu > 0.0).then_some(g);
                let locals: Vec<LayeredModel> = (0..k)
                    .into_par_iter()
                    .map(|slot| train_slot(slot, g, reference))
                    .collect::<Result<_>>()?;
                let uploaded = ModelList::new(locals)?;
                let global = model::aggregate_mean(&uploaded)?;
                (uploaded, ServerState::Global(global))
            }
            ServerState::List(list) => {
                let locals: Vec<LayeredModel> = (0..k)
                    .into_par_iter()
                    .map(|slot| train_slot(slot, &list[slot], None))
                    .collect::<Result<_>>()?;
                let uploaded = ModelList::new(locals)?;
                let plan = recombine::sample_plan(
                    k,
                    granularity,
                    arch.block_shapes().len(),
                    plan_seed(cfg.seed, round),
                )?;
                let next = recombine::recombine(&uploaded, &plan)?;
                let gap = sum_gap(&uploaded, &next)?;
                if gap > recombine::Lemma1Report::SUM_TOLERANCE {
                    log::warn!("round {round}: recombination sum gap {gap:e}");
                }
                pending_gap = pending_gap.max(gap);
                (uploaded, ServerState::List(next))
            }
        };
        state = next_state;
        bytes_down += k as u64 * model_bytes;
        bytes_up += k as u64 * model_bytes;

        if cfg.is_eval_round(round) {
            let global = match &state {
                ServerState::Global(g) => g.clone(),
                ServerState::List(list) => model::aggregate_mean(list)?,
            };
            let eval = train::evaluate(&global, test_set)?;
            let local_acc: Vec<f64> = uploaded
                .as_slice()
                .par_iter()
                .map(|m| train::evaluate(m, test_set).map(|e| e.accuracy))
                .collect::<Result<_>>()?;
            let cosine_mean = if k >= 2 {
                model::pairwise_cosine_mean(&uploaded).unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            let record = RoundRecord {
                round,
                selected_clients: selected,
                global_loss: eval.loss,
                global_acc: eval.accuracy,
                local_acc_mean: local_acc.iter().sum::<f64>() / k as f64,
                cosine_mean,
                lemma1_sum_gap: pending_gap,
                bytes_up,
                bytes_down,
            };
            pending_gap = 0.0;
            log::debug!(
                "{} round {round}: acc {:.4} loss {:.4} cos {:.4}",
                cfg.strategy.name(),
                record.global_acc,
                record.global_loss,
                record.cosine_mean
            );
            observer(&record, &global)?;
            records.push(record);
        }
    }

    let final_global = match &state {
        ServerState::Global(g) => g.clone(),
        ServerState::List(list) => final_global(list)?,
    };
    Ok(RunOutput {
        records,
        final_global,
    })
}
