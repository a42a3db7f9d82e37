use std::fmt::Write as FmtWrite;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedmr_core::data;
use fedmr_core::io as model_io;
use fedmr_core::metrics;
use fedmr_core::orchestrator::{self, RoundRecord};
use fedmr_core::verify::{self, Suite, SuiteReport};

use crate::manifest::{config_hash, ExperimentManifest};

/// Per-run facts `compare` needs without re-reading the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub name: String,
    pub strategy: String,
    pub config_hash: String,
    pub dataset_fingerprint: u64,
    pub seed: u64,
    pub rounds: usize,
    pub final_acc: f64,
    pub best_acc: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Runs every configuration of `manifest`, writing one directory per run under
/// `out` (or the manifest's output directory).
pub fn cmd_run(manifest: &ExperimentManifest, out: Option<&Path>) -> Result<Vec<RunInfo>> {
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| manifest.output_dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("output directory {} is not writable", out_dir.display()))?;

    let dataset = data::make_blobs(&manifest.dataset)?;
    let shards = data::partition(&dataset, &manifest.partition)?;
    let fingerprint = dataset.fingerprint();
    write_json(&out_dir.join("partition.json"), &data::partition_map(&shards))?;
    log::info!(
        "dataset {fingerprint:016x}: {} train / {} test samples over {} clients",
        dataset.train.len(),
        dataset.test.len(),
        shards.len()
    );

    let mut infos = Vec::new();
    for i in 0..manifest.runs.len() {
        let resolved = manifest.single_run(i);
        let run = &resolved.runs[0];
        let run_dir = out_dir.join(&run.name);
        let ckpt_dir = run_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;

        let every = manifest.checkpoint_every;
        let output = orchestrator::run_with_observer(run, &shards, &dataset.test, |record, global| {
            if every > 0 && record.round % every == 0 {
                model_io::write_model(ckpt_dir.join(format!("round-{:05}.fmrm", record.round)), global)?;
            }
            Ok(())
        })
        .with_context(|| format!("run `{}`", run.name))?;
        model_io::write_model(ckpt_dir.join("final.fmrm"), &output.final_global)?;

        let mut csv = create(&run_dir.join("metrics.csv"))?;
        metrics::write_csv(&mut csv, &output.records)?;
        let mut jsonl = create(&run_dir.join("metrics.jsonl"))?;
        metrics::write_jsonl(&mut jsonl, &output.records)?;
        jsonl.flush()?;

        write_json(&run_dir.join("resolved_config.json"), &resolved)?;

        let info = RunInfo {
            name: run.name.clone(),
            strategy: run.strategy.name().into(),
            config_hash: config_hash(manifest, run)?,
            dataset_fingerprint: fingerprint,
            seed: run.seed,
            rounds: run.rounds,
            final_acc: output.records.last().map_or(f64::NAN, |r| r.global_acc),
            best_acc: output.records.iter().map(|r| r.global_acc).fold(f64::NAN, f64::max),
        };
        write_json(&run_dir.join("run_info.json"), &info)?;
        log::info!("run `{}` ({}) final accuracy {:.4}", info.name, info.strategy, info.final_acc);
        infos.push(info);
    }
    Ok(infos)
}

/// First evaluated round whose global accuracy reaches `target`.
pub fn rounds_to_target(records: &[RoundRecord], target: f64) -> Option<usize> {
    records.iter().find(|r| r.global_acc >= target).map(|r| r.round)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dir: PathBuf,
    pub name: String,
    pub strategy: String,
    pub config_hash: String,
    pub seed: u64,
    pub final_acc: f64,
    pub best_acc: f64,
    pub rounds_to_target: Option<usize>,
    /// Differences to the first run.
    pub delta_final: f64,
    pub delta_best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_fingerprint: u64,
    pub target: Option<f64>,
    pub rows: Vec<ComparisonRow>,
}

pub fn cmd_compare(dirs: &[PathBuf], target: Option<f64>) -> Result<Comparison> {
    if dirs.is_empty() {
        bail!("compare needs at least one run directory");
    }
    let mut loaded = Vec::new();
    for dir in dirs {
        let info_path = dir.join("run_info.json");
        let info: RunInfo = serde_json::from_str(
            &fs::read_to_string(&info_path).with_context(|| format!("reading {}", info_path.display()))?,
        )
        .with_context(|| format!("parsing {}", info_path.display()))?;
        let records = metrics::read_csv(dir.join("metrics.csv")).with_context(|| format!("metrics of {}", dir.display()))?;
        loaded.push((dir.clone(), info, records));
    }
    let fingerprint = loaded[0].1.dataset_fingerprint;
    if let Some((dir, info, _)) = loaded.iter().find(|(_, i, _)| i.dataset_fingerprint != fingerprint) {
        bail!(
            "incompatible runs: {} uses dataset {:016x}, {} uses {fingerprint:016x}",
            dir.display(),
            info.dataset_fingerprint,
            loaded[0].0.display()
        );
    }

    let summarize = |records: &[RoundRecord]| {
        let final_acc = records.last().map_or(f64::NAN, |r| r.global_acc);
        let best_acc = records.iter().map(|r| r.global_acc).fold(f64::NAN, f64::max);
        (final_acc, best_acc)
    };
    let (base_final, base_best) = summarize(&loaded[0].2);
    let rows = loaded
        .into_iter()
        .map(|(dir, info, records)| {
            let (final_acc, best_acc) = summarize(&records);
            ComparisonRow {
                dir,
                name: info.name,
                strategy: info.strategy,
                config_hash: info.config_hash,
                seed: info.seed,
                final_acc,
                best_acc,
                rounds_to_target: target.and_then(|t| rounds_to_target(&records, t)),
                delta_final: final_acc - base_final,
                delta_best: best_acc - base_best,
            }
        })
        .collect();
    Ok(Comparison {
        dataset_fingerprint: fingerprint,
        target,
        rows,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset {:016x}", self.dataset_fingerprint);
        let _ = writeln!(
            s,
            "{:<20} {:<8} {:<12} {:>9} {:>9} {:>9} {:>9} {:>8}",
            "run", "strategy", "config", "final", "best", "d_final", "d_best", "to_tgt"
        );
        for r in &self.rows {
            let to_target = match (self.target, r.rounds_to_target) {
                (None, _) => "-".to_string(),
                (Some(_), None) => "never".to_string(),
                (Some(_), Some(n)) => n.to_string(),
            };
            let _ = writeln!(
                s,
                "{:<20} {:<8} {:<12} {:>9.4} {:>9.4} {:>+9.4} {:>+9.4} {:>8}",
                r.name,
                r.strategy,
                &r.config_hash[..r.config_hash.len().min(12)],
                r.final_acc,
                r.best_acc,
                r.delta_final,
                r.delta_best,
                to_target
            );
        }
        s
    }
}

pub fn cmd_verify(suites: &[Suite]) -> Result<Vec<SuiteReport>> {
    suites
        .iter()
        .map(|&s| verify::run_suite(s).with_context(|| format!("suite {s}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: usize, acc: f64) -> RoundRecord {
        RoundRecord {
            round,
            selected_clients: vec![0],
            global_loss: 1.0,
            global_acc: acc,
            local_acc_mean: acc,
            cosine_mean: f64::NAN,
            lemma1_sum_gap: 0.0,
            bytes_up: 0,
            bytes_down: 0,
        }
    }

    #[test]
    fn rounds_to_target_matches_a_scan() {
        let records: Vec<RoundRecord> = [0.1, 0.4, 0.35, 0.6, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &a)| record(2 * (i + 1), a))
            .collect();
        for target in [0.0, 0.1, 0.36, 0.4, 0.55, 0.6, 0.61] {
            let mut oracle = None;
            for r in &records {
                if oracle.is_none() && r.global_acc >= target {
                    oracle = Some(r.round);
                }
            }
            assert_eq!(rounds_to_target(&records, target), oracle, "target {target}");
        }
    }
}
