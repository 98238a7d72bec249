//! Data preparation, single training runs, evaluation and seed-repeated
//! ablations shared by the commands and the acceptance suite.

use std::io::Write;

use drp_core::backbones::BackboneConfig;
use drp_core::encoding::{FeatureSpec, SessionExample};
use drp_core::metrics::{
    heatmap, mean_std, oracle_buckets, score_buckets, BucketMode, HeatmapTable, MetricsReport,
};
use drp_core::pipeline_io::{self, time_split, Split, DEFAULT_FRACTIONS};
use drp_core::synthworld::{generate_world, LabeledExample};
use drp_core::training::{
    train, Checkpoint, EpochRecord, JointModel, PredictionSet, TrainConfig, Variant,
};
use drp_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{EvalConfig, RunConfig};

pub const THREADS_ENV: &str = "DRP_THREADS";

/// A labeled log with its vocabulary and time split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub examples: Vec<LabeledExample>,
    pub spec: FeatureSpec,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl Prepared {
    pub fn new(examples: Vec<LabeledExample>, spec: FeatureSpec) -> Result<Self> {
        spec.validate()?;
        let split = time_split(&examples, DEFAULT_FRACTIONS)?;
        Ok(Prepared {
            examples,
            spec,
            split,
        })
    }

    /// Loads `paths.dataset` when set, otherwise samples the configured world.
    pub fn from_config(cfg: &RunConfig, lenient: bool) -> Result<Self> {
        match &cfg.paths.dataset {
            Some(path) => {
                let ds = pipeline_io::load(path, lenient)?;
                for w in &ds.warnings {
                    log::warn!("{w}");
                }
                Prepared::new(ds.examples, ds.spec)
            }
            None => Prepared::new(generate_world(&cfg.world)?, cfg.world.feature_spec()),
        }
    }

    pub fn indices(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.split.train,
            Part::Validation => &self.split.validation,
            Part::Test => &self.split.test,
        }
    }

    pub fn part(&self, part: Part) -> Vec<&SessionExample> {
        self.indices(part)
            .iter()
            .map(|&i| &self.examples[i].example)
            .collect()
    }

    pub fn labeled(&self, part: Part) -> Vec<LabeledExample> {
        self.indices(part)
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect()
    }
}

/// Test-split evaluation of one model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub predictions: PredictionSet,
}

pub fn evaluate(
    model: &JointModel,
    data: &Prepared,
    part: Part,
    eval: &EvalConfig,
) -> Result<Evaluation> {
    let examples = data.part(part);
    for ex in &examples {
        ex.check_vocab(&model.encoder.spec)?;
    }
    let predictions = model.predict(&examples, eval.batch_size)?;
    let sessions: Vec<u64> = examples.iter().map(|e| e.session_id).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let metrics = MetricsReport::compute(&sessions, &predictions.output, &labels, eval.cutoff)?;
    Ok(Evaluation {
        metrics,
        predictions,
    })
}

/// Area heatmap of `predictions` made on `part`.
pub fn area_heatmap(
    data: &Prepared,
    part: Part,
    predictions: &PredictionSet,
    mode: BucketMode,
) -> Result<HeatmapTable> {
    let examples = data.labeled(part);
    let buckets = match mode {
        BucketMode::Oracle => {
            if examples.iter().any(|e| e.oracle.is_none()) {
                return Err(Error::Config(
                    "oracle heatmaps need oracle fields in the dataset; use score mode".into(),
                ));
            }
            oracle_buckets(&examples)?
        }
        BucketMode::Score => {
            let labels: Vec<u8> = examples.iter().map(|e| e.example.label).collect();
            score_buckets(&predictions.preference, &predictions.relevance, &labels)?
        }
    };
    heatmap(mode, &buckets, &predictions.stages)
}

/// Outcome of training one variant with one seed and scoring it on the test split.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint: Checkpoint,
    pub test: Evaluation,
}

pub fn run(
    data: &Prepared,
    model: &BackboneConfig,
    train_cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<RunResult> {
    let out = train(
        data.spec,
        model,
        train_cfg,
        &data.part(Part::Train),
        &data.part(Part::Validation),
    )?;
    let test = evaluate(&out.model, data, Part::Test, eval)?;
    Ok(RunResult {
        variant: train_cfg.variant,
        seed: train_cfg.seed,
        history: out.history,
        best_epoch: out.best_epoch,
        checkpoint: out.checkpoint,
        test,
    })
}

/// Worker count from `DRP_THREADS`, if set.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

/// Trains every `(variant, seed)` pair. Runs are independent and results are
/// returned in variant-major order regardless of scheduling.
pub fn run_grid(
    data: &Prepared,
    model: &BackboneConfig,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<Vec<RunResult>> {
    let jobs: Vec<TrainConfig> = variants
        .iter()
        .flat_map(|&variant| {
            seeds.iter().map(move |&seed| TrainConfig {
                variant,
                seed,
                ..base.clone()
            })
        })
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_limit()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|cfg| {
                let r = run(data, model, cfg, eval);
                if let Ok(r) = &r {
                    log::info!(
                        "{} seed {}: test AUC {:.4}",
                        r.variant,
                        r.seed,
                        r.test.metrics.auc
                    );
                }
                r
            })
            .collect()
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Aggregate { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: usize,
    pub auc: Aggregate,
    pub logloss: Aggregate,
    pub ndcg: Aggregate,
    pub hr: Aggregate,
}

/// One row per variant, in first-appearance order of `results`.
pub fn summarize(results: &[RunResult]) -> Vec<AblationRow> {
    let mut order: Vec<Variant> = Vec::new();
    for r in results {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let rs: Vec<&MetricsReport> = results
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| &r.test.metrics)
                .collect();
            let col = |f: fn(&MetricsReport) -> f64| {
                Aggregate::of(&rs.iter().map(|m| f(m)).collect::<Vec<_>>())
            };
            AblationRow {
                variant,
                runs: rs.len(),
                auc: col(|m| m.auc),
                logloss: col(|m| m.logloss),
                ndcg: col(|m| m.ndcg),
                hr: col(|m| m.hr),
            }
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: [&str; 10] = [
    "variant",
    "runs",
    "auc_mean",
    "auc_std",
    "logloss_mean",
    "logloss_std",
    "ndcg_mean",
    "ndcg_std",
    "hr_mean",
    "hr_std",
];

pub fn write_ablation_csv<W: Write>(writer: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ABLATION_CSV_HEADER)?;
    for r in rows {
        let mut rec = vec![r.variant.name().to_string(), r.runs.to_string()];
        for a in [r.auc, r.logloss, r.ndcg, r.hr] {
            rec.push(a.mean.to_string());
            rec.push(a.std.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Plain-text comparison table, one line per variant.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<14} {:>4}  {:>17}  {:>17}  {:>17}  {:>17}\n",
        "variant", "runs", "AUC", "LogLoss", "NDCG", "HR"
    );
    for r in rows {
        s.push_str(&format!("{:<14} {:>4}", r.variant.name(), r.runs));
        for a in [r.auc, r.logloss, r.ndcg, r.hr] {
            s.push_str(&format!("  {:>8.4}±{:<8.4}", a.mean, a.std));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use drp_core::synthworld::WorldConfig;

    fn tiny() -> RunConfig {
        RunConfig {
            world: WorldConfig {
                users: 40,
                queries: 30,
                items: 300,
                interactions: 1_500,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn split_parts_cover_the_log() {
        let data = Prepared::from_config(&tiny(), false).unwrap();
        let n: usize = [Part::Train, Part::Validation, Part::Test]
            .iter()
            .map(|&p| data.part(p).len())
            .sum();
        assert_eq!(n, data.examples.len());
    }

    #[test]
    fn grid_is_ordered_and_summarized_per_variant() {
        let cfg = tiny();
        let data = Prepared::from_config(&cfg, false).unwrap();
        let variants = [Variant::BaseFixed, Variant::Full];
        let results =
            run_grid(&data, &cfg.model, &cfg.train, &variants, &[0, 1], &cfg.eval).unwrap();
        let order: Vec<(Variant, u64)> = results.iter().map(|r| (r.variant, r.seed)).collect();
        assert_eq!(
            order,
            [
                (Variant::BaseFixed, 0),
                (Variant::BaseFixed, 1),
                (Variant::Full, 0),
                (Variant::Full, 1)
            ]
        );
        let rows = summarize(&results);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].variant, Variant::BaseFixed);
        let aucs = [results[0].test.metrics.auc, results[1].test.metrics.auc];
        assert_eq!(rows[0].auc.mean, (aucs[0] + aucs[1]) / 2.0);
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("variant,runs,auc_mean"));
        assert_eq!(format_ablation(&rows).lines().count(), 3);
    }

    #[test]
    fn oracle_heatmap_requires_oracle_fields() {
        let cfg = tiny();
        let mut data = Prepared::from_config(&cfg, false).unwrap();
        let r = run(&data, &cfg.model, &cfg.train, &cfg.eval).unwrap();
        let table =
            area_heatmap(&data, Part::Test, &r.test.predictions, BucketMode::Oracle).unwrap();
        assert!(table.count(drp_core::metrics::Stage::Fixed, 0) > 0);
        assert!(area_heatmap(&data, Part::Test, &r.test.predictions, BucketMode::Score).is_ok());
        for e in &mut data.examples {
            e.oracle = None;
        }
        assert!(matches!(
            area_heatmap(&data, Part::Test, &r.test.predictions, BucketMode::Oracle),
            Err(Error::Config(_))
        ));
    }
}
