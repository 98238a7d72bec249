//! The run configuration document and flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use drp_core::backbones::BackboneConfig;
use drp_core::metrics::{BucketMode, DEFAULT_CUTOFF};
use drp_core::synthworld::WorldConfig;
use drp_core::training::{TrainConfig, Variant};
use drp_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ranking cutoff `K` for NDCG@K and HR@K.
    pub cutoff: usize,
    pub bucket_mode: BucketMode,
    /// Inference chunk size.
    pub batch_size: usize,
    /// Training seeds per variant in `ablate`, counted up from `train.seed`.
    pub seeds: usize,
    pub variants: Vec<Variant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoff: DEFAULT_CUTOFF,
            bucket_mode: BucketMode::Oracle,
            batch_size: 1024,
            seeds: 5,
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// JSONL dataset. When absent, commands sample the configured world in memory.
    pub dataset: Option<PathBuf>,
    /// Checkpoint written by `train` and read by `eval` and `heatmap`.
    pub checkpoint: Option<PathBuf>,
    /// Report directory.
    pub reports: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub delta: Option<f64>,
    pub rank: Option<usize>,
    pub out: Option<PathBuf>,
    pub seeds: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub bucket_mode: Option<BucketMode>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// File (or defaults) with flags applied on top. `--seed` seeds both the
    /// world and training.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let o = overrides;
        if let Some(seed) = o.seed {
            cfg.world.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(v) = o.variant {
            cfg.train.variant = v;
        }
        if let Some(d) = o.delta {
            cfg.train.delta = d;
        }
        if let Some(r) = o.rank {
            cfg.train.rank = r;
        }
        if let Some(n) = o.seeds {
            cfg.eval.seeds = n;
        }
        if let Some(m) = o.bucket_mode {
            cfg.eval.bucket_mode = m;
        }
        if o.out.is_some() {
            cfg.paths.reports.clone_from(&o.out);
        }
        if o.dataset.is_some() {
            cfg.paths.dataset.clone_from(&o.dataset);
        }
        if o.checkpoint.is_some() {
            cfg.paths.checkpoint.clone_from(&o.checkpoint);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.cutoff == 0 || e.batch_size == 0 || e.seeds == 0 {
            return Err(Error::Config(
                "eval.cutoff, eval.batch_size and eval.seeds must be positive".into(),
            ));
        }
        if e.variants.is_empty() {
            return Err(Error::Config(
                "eval.variants must name at least one variant".into(),
            ));
        }
        Ok(())
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths
            .reports
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.reports_dir().join("checkpoint.json"))
    }

    /// Creates the report directory and writes the resolved configuration into it.
    pub fn echo(&self) -> Result<PathBuf> {
        let dir = self.reports_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"bogus": 1}"#,
            r#"{"world": {"users": 5, "bogus": 1}}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"eval": {"cutof": 3}}"#,
            r#"{"paths": {"data": "x"}}"#,
        ] {
            assert!(
                matches!(RunConfig::from_json(doc), Err(Error::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"train": {"delta": 2.0, "seed": 4}, "world": {"seed": 9}}"#,
        )
        .unwrap();
        let file_only = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(
            (
                file_only.train.delta,
                file_only.train.seed,
                file_only.world.seed
            ),
            (2.0, 4, 9)
        );
        let o = Overrides {
            seed: Some(1),
            delta: Some(0.5),
            rank: Some(8),
            variant: Some(Variant::BaseFixed),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Some(&path), &o).unwrap();
        assert_eq!(
            (
                cfg.train.delta,
                cfg.train.rank,
                cfg.train.seed,
                cfg.world.seed
            ),
            (0.5, 8, 1, 1)
        );
        assert_eq!(cfg.train.variant, Variant::BaseFixed);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let o = Overrides {
            rank: Some(0),
            ..Default::default()
        };
        assert!(matches!(
            RunConfig::resolve(None, &o),
            Err(Error::Config(_))
        ));
        let cfg = RunConfig::from_json(r#"{"eval": {"variants": []}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn echo_materializes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            paths: PathsConfig {
                reports: Some(dir.path().join("out")),
                ..Default::default()
            },
            ..Default::default()
        };
        let path = cfg.echo().unwrap();
        let text = fs::read_to_string(path).unwrap();
        for key in [
            "\"world\"",
            "\"popularity_exponent\"",
            "\"learning_rate\"",
            "\"cutoff\"",
            "\"reports\"",
        ] {
            assert!(text.contains(key), "{key}");
        }
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
