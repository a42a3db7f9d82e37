//! Experiment manifests.
//!
//! A manifest is JSON: a blob dataset, one partition shared by every run, the
//! runs themselves, an output directory and a master seed. Any `seed` left out
//! of the dataset, partition or a run is derived from the master seed, and the
//! fully expanded form is what gets written next to each run's outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use fedmr_core::data::{BlobSpec, PartitionSpec};
use fedmr_core::orchestrator::RunConfig;
use fedmr_core::rng::derive_seed;

const DATASET_TAG: u64 = 1;
const PARTITION_TAG: u64 = 2;
const RUN_TAG: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub dataset: BlobSpec,
    pub partition: PartitionSpec,
    pub runs: Vec<RunConfig>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Write a checkpoint every this many rounds; 0 keeps only the final model.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn fill_seed(obj: &mut Value, seed: u64) {
    if let Value::Object(map) = obj {
        if map.get("seed").is_none_or(Value::is_null) {
            map.insert("seed".into(), seed.into());
        }
    }
}

fn overwrite_seed(obj: &mut Value, seed: u64) {
    if let Value::Object(map) = obj {
        map.insert("seed".into(), seed.into());
    }
}

/// Fills in (or, with `seed_override`, replaces) every seed of a raw manifest.
fn expand_seeds(raw: &mut Value, seed_override: Option<u64>) -> Result<()> {
    let master = match seed_override {
        Some(s) => s,
        None => raw
            .get("seed")
            .and_then(Value::as_u64)
            .context("manifest field `seed`: expected an unsigned integer master seed")?,
    };
    let set = if seed_override.is_some() { overwrite_seed } else { fill_seed };
    raw["seed"] = master.into();
    if let Some(d) = raw.get_mut("dataset") {
        set(d, derive_seed(master, &[DATASET_TAG]));
    }
    if let Some(p) = raw.get_mut("partition") {
        set(p, derive_seed(master, &[PARTITION_TAG]));
    }
    if let Some(Value::Array(runs)) = raw.get_mut("runs") {
        for (i, r) in runs.iter_mut().enumerate() {
            set(r, derive_seed(master, &[RUN_TAG, i as u64]));
        }
    }
    Ok(())
}

impl ExperimentManifest {
    /// Parses, expands seeds and validates. Errors name the offending field.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut raw: Value = serde_json::from_str(text).context("manifest is not valid JSON")?;
        if !raw.is_object() {
            bail!("manifest must be a JSON object");
        }
        expand_seeds(&mut raw, seed_override)?;
        let manifest: ExperimentManifest = serde_path_to_error::deserialize(raw).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("manifest field `{path}`: {}", e.into_inner())
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, seed_override).with_context(|| format!("invalid manifest {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.runs.is_empty() {
            bail!("manifest field `runs`: at least one run is required");
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, run) in self.runs.iter().enumerate() {
            run.validate().with_context(|| format!("manifest field `runs[{i}]`"))?;
            if run.population != self.partition.num_clients {
                bail!(
                    "manifest field `runs[{i}].population`: N = {} but the partition has {} clients",
                    run.population,
                    self.partition.num_clients
                );
            }
            if !names.insert(self.run_dir_name(i)) {
                bail!("manifest field `runs[{i}].name`: duplicate run name `{}`", self.run_dir_name(i));
            }
        }
        Ok(())
    }

    /// Directory name of run `i`: its name, or `run-<i>` when unnamed.
    pub fn run_dir_name(&self, i: usize) -> String {
        let name = &self.runs[i].name;
        if name.is_empty() {
            format!("run-{i}")
        } else {
            name.clone()
        }
    }

    /// A replayable manifest holding only run `i`, seeds explicit.
    pub fn single_run(&self, i: usize) -> ExperimentManifest {
        let mut run = self.runs[i].clone();
        run.name = self.run_dir_name(i);
        ExperimentManifest {
            runs: vec![run],
            ..self.clone()
        }
    }
}

/// SHA-256 over the run's configuration with every seed, the run name and
/// the output location stripped. Runs that differ only in seed share it.
pub fn config_hash(manifest: &ExperimentManifest, run: &RunConfig) -> Result<String> {
    let mut v = serde_json::json!({
        "dataset": manifest.dataset,
        "partition": manifest.partition,
        "run": run,
    });
    for key in ["dataset", "partition", "run"] {
        v[key].as_object_mut().expect("struct serializes to an object").remove("seed");
    }
    v["run"].as_object_mut().expect("object").remove("name");
    v["run"]["local"].as_object_mut().map(|o| o.remove("seed"));
    // serde_json maps are ordered by key, so this encoding is canonical.
    let digest = Sha256::digest(serde_json::to_vec(&v)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "dataset": {"num_classes": 3, "dim": 4, "per_class": 20, "spread": 1.0},
        "partition": {"num_clients": 4, "mode": {"kind": "iid"}, "min_shard_size": 5},
        "runs": [{"rounds": 5, "population": 4, "active": 2, "strategy": {"kind": "fedavg"}, "hidden": [8]}],
        "output_dir": "out",
        "seed": 7
    }"#;

    #[test]
    fn missing_seeds_are_derived_from_the_master_seed() {
        let m = ExperimentManifest::parse(MINIMAL, None).unwrap();
        assert_eq!(m.dataset.seed, derive_seed(7, &[DATASET_TAG]));
        assert_eq!(m.partition.seed, derive_seed(7, &[PARTITION_TAG]));
        assert_eq!(m.runs[0].seed, derive_seed(7, &[RUN_TAG, 0]));
        let again = ExperimentManifest::parse(&serde_json::to_string(&m).unwrap(), None).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn explicit_seeds_survive_unless_overridden() {
        let text = MINIMAL.replace(r#""spread": 1.0"#, r#""spread": 1.0, "seed": 99"#);
        assert_eq!(ExperimentManifest::parse(&text, None).unwrap().dataset.seed, 99);
        let m = ExperimentManifest::parse(&text, Some(3)).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.dataset.seed, derive_seed(3, &[DATASET_TAG]));
    }

    #[test]
    fn k_above_n_names_the_field() {
        let text = MINIMAL.replace(r#""active": 2"#, r#""active": 9"#);
        let err = format!("{:#}", ExperimentManifest::parse(&text, None).unwrap_err());
        assert!(err.contains("runs[0]") && err.contains("active"), "{err}");
    }

    #[test]
    fn unknown_fields_report_their_path() {
        let text = MINIMAL.replace(r#""hidden": [8]"#, r#""hidden": [8], "hiden": 1"#);
        let err = format!("{:#}", ExperimentManifest::parse(&text, None).unwrap_err());
        assert!(err.contains("runs[0]") && err.contains("hiden"), "{err}");
    }

    #[test]
    fn config_hash_ignores_seeds_only() {
        let a = ExperimentManifest::parse(MINIMAL, None).unwrap();
        let b = ExperimentManifest::parse(MINIMAL, Some(12345)).unwrap();
        assert_eq!(config_hash(&a, &a.runs[0]).unwrap(), config_hash(&b, &b.runs[0]).unwrap());
        let mut c = a.clone();
        c.runs[0].rounds = 6;
        assert_ne!(config_hash(&a, &a.runs[0]).unwrap(), config_hash(&c, &c.runs[0]).unwrap());
    }
}
