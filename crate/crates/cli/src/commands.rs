//! Subcommand implementations. Each writes its artifacts into the report
//! directory, after echoing the effective configuration there, and returns
//! a summary for the caller to print.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use drp_core::encoding::SessionExample;
use drp_core::metrics::{write_heatmap_csv, write_metrics_csv, HeatmapTable, MetricsReport, Stage};
use drp_core::numerics::{
    check_gradients, derive_seed, rng_from_seed, GradCheckOptions, GradCheckReport,
};
use drp_core::pipeline_io::{save, split_stats, write_split_stats_csv};
use drp_core::synthworld::{
    generate_world, summarize as summarize_world, WorldConfig, WorldSummary, AREA_COUNT,
};
use drp_core::training::{Checkpoint, EpochRecord, JointModel};
use drp_core::{Error, Result};
use rand::seq::index;
use serde::Serialize;

use crate::config::RunConfig;
use crate::experiment::{self, area_heatmap, evaluate, AblationRow, Part, Prepared, RunResult};

/// Examples sampled by `gradcheck` when no dataset file is configured.
pub const GRADCHECK_WORLD_INTERACTIONS: usize = 2_000;
pub const GRADCHECK_BATCH: usize = 8;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub dataset: PathBuf,
    pub summary: WorldSummary,
}

impl GenerateOutput {
    pub fn render(&self) -> String {
        let s = &self.summary;
        let mut out = format!(
            "wrote {} impressions to {}\n",
            s.examples,
            self.dataset.display()
        );
        out.push_str("area  count     share\n");
        for (a, &c) in s.area_counts.iter().enumerate() {
            let share = c as f64 / s.examples.max(1) as f64;
            let _ = writeln!(out, "{a:>4}  {c:>8}  {share:.4}");
        }
        let _ = writeln!(out, "click rate {:.4}", s.click_rate);
        let _ = writeln!(out, "P*/R* correlation {:.4}", s.pr_correlation);
        out
    }
}

/// Samples the configured world and writes it as JSONL.
pub fn generate(cfg: &RunConfig) -> Result<GenerateOutput> {
    let reports = cfg.reports_dir();
    cfg.echo()?;
    let data = generate_world(&cfg.world)?;
    let dataset = cfg
        .paths
        .dataset
        .clone()
        .unwrap_or_else(|| reports.join("data.jsonl"));
    if let Some(dir) = dataset.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save(&dataset, &data)?;
    let summary = summarize_world(&data);
    write_json(&reports.join("world_summary.json"), &summary)?;
    if let Ok(split) =
        drp_core::pipeline_io::time_split(&data, drp_core::pipeline_io::DEFAULT_FRACTIONS)
    {
        write_split_stats_csv(
            create(&reports.join("split_stats.csv"))?,
            &split_stats(&data, &split),
        )?;
    }
    Ok(GenerateOutput { dataset, summary })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

impl TrainOutput {
    pub fn render(&self) -> String {
        let mut out = String::from("epoch  train_loss  val_auc\n");
        for h in &self.history {
            let mark = if h.epoch == self.best_epoch { " *" } else { "" };
            let _ = writeln!(
                out,
                "{:>5}  {:>10.5}  {:.5}{mark}",
                h.epoch, h.train_loss, h.val_auc
            );
        }
        let t = &self.test;
        let _ = writeln!(
            out,
            "test AUC {:.4}  LogLoss {:.4}  NDCG@{} {:.4}  HR@{} {:.4}",
            t.auc, t.logloss, t.cutoff, t.ndcg, t.cutoff, t.hr
        );
        let _ = writeln!(out, "checkpoint {}", self.checkpoint.display());
        out
    }
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for h in history {
        w.serialize(h)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains the configured variant and writes its checkpoint and per-epoch history.
pub fn train(cfg: &RunConfig, lenient: bool) -> Result<TrainOutput> {
    let reports = cfg.reports_dir();
    cfg.echo()?;
    let data = Prepared::from_config(cfg, lenient)?;
    let r = experiment::run(&data, &cfg.model, &cfg.train, &cfg.eval)?;
    let checkpoint = cfg.checkpoint_path();
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    r.checkpoint.save(&checkpoint)?;
    write_history_csv(&reports.join("history.csv"), &r.history)?;
    Ok(TrainOutput {
        checkpoint,
        history: r.history,
        best_epoch: r.best_epoch,
        test: r.test.metrics,
    })
}

fn load_model(path: &Path) -> Result<(Checkpoint, JointModel)> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let model = ck.restore()?;
    Ok((ck, model))
}

/// Row name `VARIANT/seedN`.
fn run_name(ck: &Checkpoint) -> String {
    format!("{}/seed{}", ck.train.variant, ck.train.seed)
}

pub fn render_metrics(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!(
        "{:<24} {:>8} {:>8} {:>8} {:>8}\n",
        "model", "AUC", "LogLoss", "NDCG", "HR"
    );
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            m.auc, m.logloss, m.ndcg, m.hr
        );
    }
    out
}

/// Scores each checkpoint on the test split. With no explicit checkpoints,
/// the configured one is used.
pub fn eval(
    cfg: &RunConfig,
    lenient: bool,
    checkpoints: &[PathBuf],
) -> Result<Vec<(String, MetricsReport)>> {
    let reports = cfg.reports_dir();
    cfg.echo()?;
    let paths = if checkpoints.is_empty() {
        vec![cfg.checkpoint_path()]
    } else {
        checkpoints.to_vec()
    };
    let models = paths
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>>>()?;
    let data = Prepared::from_config(cfg, lenient)?;
    let mut rows = Vec::new();
    for (ck, model) in &models {
        let ev = evaluate(model, &data, Part::Test, &cfg.eval)?;
        rows.push((run_name(ck), ev.metrics));
    }
    write_metrics_csv(create(&reports.join("metrics.csv"))?, &rows)?;
    let json: Vec<_> = rows
        .iter()
        .map(|(name, m)| serde_json::json!({ "name": name, "metrics": m }))
        .collect();
    write_json(&reports.join("metrics.json"), &json)?;
    Ok(rows)
}

pub fn render_heatmap(table: &HeatmapTable) -> String {
    let mut out = String::from("stage   ");
    for a in 0..AREA_COUNT {
        let _ = write!(out, " {:>8}", format!("area{a}"));
    }
    out.push('\n');
    for stage in Stage::ALL {
        if !table.cells.iter().any(|c| c.stage == stage) {
            continue;
        }
        let _ = write!(out, "{:<8}", stage.name());
        for a in 0..AREA_COUNT as u8 {
            match table.mean(stage, a) {
                Some(m) => {
                    let _ = write!(out, " {m:>8.4}");
                }
                None => out.push_str("        -"),
            }
        }
        out.push('\n');
    }
    if table.contradictions > 0 {
        let _ = writeln!(out, "contradictory triples: {}", table.contradictions);
    }
    if table.has_warning() {
        let _ = writeln!(
            out,
            "warning: fewer than {} examples in areas {:?}",
            drp_core::metrics::MIN_AREA_COUNT,
            table.low_count_areas
        );
    }
    out
}

/// Per-area mean predictions of the configured checkpoint on the test split.
pub fn heatmap(cfg: &RunConfig, lenient: bool) -> Result<HeatmapTable> {
    let reports = cfg.reports_dir();
    cfg.echo()?;
    let (_, model) = load_model(&cfg.checkpoint_path())?;
    let data = Prepared::from_config(cfg, lenient)?;
    let ev = evaluate(&model, &data, Part::Test, &cfg.eval)?;
    let table = area_heatmap(&data, Part::Test, &ev.predictions, cfg.eval.bucket_mode)?;
    write_heatmap_csv(create(&reports.join("heatmap.csv"))?, &table)?;
    Ok(table)
}

pub fn render_gradcheck(report: &GradCheckReport) -> String {
    let mut out = format!(
        "{:<32} {:>7} {:>9} {:>12}\n",
        "block", "checked", "straddled", "max_rel_err"
    );
    for b in &report.blocks {
        let _ = writeln!(
            out,
            "{:<32} {:>7} {:>9} {:>12.3e}",
            b.name, b.checked, b.straddled, b.max_rel_error
        );
    }
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        out,
        "{verdict}: max relative error {:.3e} at {} (tolerance {:.0e})",
        report.max_rel_error, report.worst_param, report.tolerance
    );
    out
}

/// Finite-difference check of a freshly initialized model on a random batch.
pub fn gradcheck(cfg: &RunConfig, lenient: bool) -> Result<GradCheckReport> {
    let reports = cfg.reports_dir();
    cfg.echo()?;
    let (examples, spec) = match &cfg.paths.dataset {
        Some(_) => {
            let data = Prepared::from_config(cfg, lenient)?;
            (data.examples, data.spec)
        }
        None => {
            let world = WorldConfig {
                interactions: cfg.world.interactions.min(GRADCHECK_WORLD_INTERACTIONS),
                ..cfg.world.clone()
            };
            (generate_world(&world)?, world.feature_spec())
        }
    };
    if examples.is_empty() {
        return Err(Error::Config("gradcheck needs at least one example".into()));
    }
    let mut rng = rng_from_seed(derive_seed(cfg.train.seed, 77));
    let take = GRADCHECK_BATCH.min(examples.len());
    let batch: Vec<&SessionExample> = index::sample(&mut rng, examples.len(), take)
        .into_iter()
        .map(|i| &examples[i].example)
        .collect();
    let mut model = JointModel::new(spec, &cfg.model, &cfg.train)?;
    let opts = GradCheckOptions {
        seed: cfg.train.seed,
        ..Default::default()
    };
    let report = check_gradients(&mut model, |m| m.loss_and_grad(&batch), opts)?;
    write_json(&reports.join("gradcheck.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AblateOutput {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
}

#[derive(Serialize)]
struct RunRow<'a> {
    variant: &'a str,
    seed: u64,
    best_epoch: usize,
    epochs: usize,
    auc: f64,
    logloss: f64,
    ndcg: f64,
    hr: f64,
}

/// Every configured variant over `eval.seeds` training seeds on one world.
pub fn ablate(cfg: &RunConfig, lenient: bool) -> Result<AblateOutput> {
    let reports = cfg.reports_dir();
    cfg.echo()?;
    let data = Prepared::from_config(cfg, lenient)?;
    let seeds: Vec<u64> = (0..cfg.eval.seeds as u64)
        .map(|k| cfg.train.seed + k)
        .collect();
    let runs = experiment::run_grid(
        &data,
        &cfg.model,
        &cfg.train,
        &cfg.eval.variants,
        &seeds,
        &cfg.eval,
    )?;
    let rows = experiment::summarize(&runs);
    experiment::write_ablation_csv(create(&reports.join("ablation.csv"))?, &rows)?;
    let mut w = csv::Writer::from_writer(create(&reports.join("ablation_runs.csv"))?);
    for r in &runs {
        let m = &r.test.metrics;
        w.serialize(RunRow {
            variant: r.variant.name(),
            seed: r.seed,
            best_epoch: r.best_epoch,
            epochs: r.history.len(),
            auc: m.auc,
            logloss: m.logloss,
            ndcg: m.ndcg,
            hr: m.hr,
        })?;
    }
    w.flush().map_err(|e| Error::io(&reports, e))?;
    Ok(AblateOutput { rows, runs })
}
